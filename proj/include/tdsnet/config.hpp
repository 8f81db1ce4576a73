#pragma once

#include <cstdint>
#include <set>
#include <sstream>
#include <string>

#include "tdsnet/common.hpp"
#include "tdsnet/model.hpp"

namespace tdsnet {

// Every knob of a run. Parsed (file < environment < flags), validated,
// then frozen; the digest is stored in checkpoints and reports so results
// stay traceable to their configuration.
struct RunConfig {
    // task
    std::size_t n_way = 5;
    std::size_t k_shot = 1;
    std::size_t q_train = 15; // queries per class, training episodes
    std::size_t q_eval = 15;  // queries per class, evaluation episodes

    // model
    std::size_t image_size = 84;
    std::size_t channels = 64;
    std::size_t blocks = 4;
    std::string hconv = "conv3x3"; // conv3x3 | conv1x1 | identity
    std::size_t attention_maps = 8;
    std::size_t top_k = 3;
    double steepness = 20.0;
    bool share_mphi = false;

    // branches and ablation switches
    bool lfe = true;
    bool local = true;
    std::string attention = "task";        // task | uniform
    std::string attention_norm = "task";   // task | class
    std::string eval_attention = "smooth"; // smooth | hard
    double lambda = 0.4;

    // optimization
    double lr = 0.001;
    std::size_t lr_halving_interval = 100000; // episodes
    std::size_t epochs = 600;
    std::size_t episodes_per_epoch = 100;
    bool loss_sum_mode = false; // per-query sum instead of mean
    double grad_clip = 0.0;     // global norm, 0 disables

    // evaluation
    std::size_t eval_episodes = 600;
    std::size_t val_episodes = 100;

    // infrastructure
    std::uint64_t seed = 1;
    std::string precision = "f32"; // f32 | f64
    std::string data_root;
    std::string aux_split = "auxiliary.txt";
    std::string test_split = "test.txt";
    std::string val_split;
    std::string output_dir = "runs/out";
    std::string cache_dir;

    void validate() const {
        auto require = [](bool ok, const std::string& what) {
            if (!ok) throw std::invalid_argument("config: " + what);
        };
        require(n_way >= 2, "way must be at least 2");
        require(k_shot >= 1 && q_train >= 1 && q_eval >= 1, "shot and query counts must be positive");
        require(blocks >= 1 && channels >= 1, "backbone must have blocks and channels");
        require((image_size >> blocks) >= 1, "image size too small for the pooled blocks");
        require(std::set<std::string>{"conv3x3", "conv1x1", "identity"}.count(hconv), "hconv must be conv3x3|conv1x1|identity");
        require(std::set<std::string>{"task", "uniform"}.count(attention), "attention must be task|uniform");
        require(std::set<std::string>{"task", "class"}.count(attention_norm), "attention_norm must be task|class");
        require(std::set<std::string>{"smooth", "hard"}.count(eval_attention), "eval_attention must be smooth|hard");
        require(std::set<std::string>{"f32", "f64"}.count(precision), "precision must be f32|f64");
        require(top_k >= 1, "top_k must be at least 1");
        require(attention_maps >= 1, "attention_maps must be at least 1");
        require(steepness > 0, "steepness must be positive");
        require(lambda >= 0, "lambda must be non-negative");
        require(lr > 0 && lr_halving_interval >= 1, "learning rate schedule is degenerate");
        require(epochs >= 1 && episodes_per_epoch >= 1, "epochs and episodes_per_epoch must be positive");
    }

    ModelConfig model_config() const {
        ModelConfig mc;
        mc.image_size = image_size;
        mc.channels = channels;
        mc.blocks = blocks;
        mc.hconv = hconv == "conv3x3" ? HConvVariant::Conv3x3
                   : hconv == "conv1x1" ? HConvVariant::Conv1x1
                                        : HConvVariant::Identity;
        mc.attention_maps = attention_maps;
        mc.top_k = top_k;
        mc.steepness = steepness;
        mc.lfe = lfe;
        mc.local_branch = local;
        mc.uniform_attention = attention == "uniform";
        mc.attention_kind = AttentionKind::Smooth; // training always differentiates
        mc.attention_scope = attention_norm == "class" ? AttentionScope::PerClass : AttentionScope::TaskWide;
        mc.share_mphi = share_mphi;
        return mc;
    }

    std::string serialize() const {
        std::ostringstream os;
        os << "n_way=" << n_way << "\nk_shot=" << k_shot << "\nq_train=" << q_train
           << "\nq_eval=" << q_eval << "\nimage_size=" << image_size << "\nchannels=" << channels
           << "\nblocks=" << blocks << "\nhconv=" << hconv << "\nattention_maps=" << attention_maps
           << "\ntop_k=" << top_k << "\nsteepness=" << steepness << "\nshare_mphi=" << share_mphi
           << "\nlfe=" << lfe << "\nlocal=" << local << "\nattention=" << attention
           << "\nattention_norm=" << attention_norm << "\neval_attention=" << eval_attention
           << "\nlambda=" << lambda << "\nlr=" << lr << "\nlr_halving_interval=" << lr_halving_interval
           << "\nepochs=" << epochs << "\nepisodes_per_epoch=" << episodes_per_epoch
           << "\nloss_sum_mode=" << loss_sum_mode << "\ngrad_clip=" << grad_clip
           << "\neval_episodes=" << eval_episodes << "\nval_episodes=" << val_episodes
           << "\nseed=" << seed << "\nprecision=" << precision << "\ndata_root=" << data_root
           << "\naux_split=" << aux_split << "\ntest_split=" << test_split << "\nval_split=" << val_split
           << "\noutput_dir=" << output_dir << "\ncache_dir=" << cache_dir << "\n";
        return os.str();
    }

    std::string digest() const {
        Fnv1a h;
        h.update(serialize());
        return h.hex();
    }
};

} // namespace tdsnet
