#pragma once

#include <string>
#include <vector>

#include "tdsnet/layers.hpp"
#include "tdsnet/lfe.hpp"
#include "tdsnet/metric.hpp"

namespace tdsnet {

struct ModelConfig {
    std::size_t image_size = 84;
    std::size_t in_channels = 3;
    std::size_t channels = 64;
    std::size_t blocks = 4;
    HConvVariant hconv = HConvVariant::Conv3x3;
    std::size_t attention_maps = 8; // m
    std::size_t top_k = 3;          // k
    double steepness = 20.0;        // t
    bool lfe = true;
    bool local_branch = true;
    bool uniform_attention = false; // ablation: drop task-aware reweighting
    AttentionKind attention_kind = AttentionKind::Smooth;
    AttentionScope attention_scope = AttentionScope::TaskWide;
    bool share_mphi = false; // relation matrix reuses the h_conv features
};

// One sampled task, already preprocessed: support images are class-major
// (class 0's K images first), query labels index the episode's class order.
template <class T>
struct EpisodeBatch {
    std::size_t n_way = 0;
    std::size_t k_shot = 0;
    Tensor<T> support; // (N*K, S, S, C)
    Tensor<T> query;   // (Q, S, S, C)
    std::vector<int> labels; // per query, in [0, N)
};

// Per-query similarity matrices, captured on demand for inspection.
template <class T>
struct SimilarityBundle {
    Tensor<T> m;    // (HW, N*HW)
    Tensor<T> mphi; // (HW, N*HW)
    Tensor<T> ma;   // (HW, N*HW)
};

template <class T>
struct EpisodeResult {
    Tensor<T> global_scores; // (Q,N)
    Tensor<T> local_scores;  // (Q,N), defined only with the local branch
    Tensor<T> total_scores;  // (Q,N)
    Tensor<T> kl;            // scalar, defined only when LFE ran
    std::vector<int> predictions;
};

template <class T>
struct TDSNet {
    ModelConfig cfg;
    ParamStore<T> params;
    StateStore<T> state;
    Backbone<T> backbone;
    HConv<T> hconv;
    Conv2dLayer<T> mphi;
    AttentionHead<T> lfe_head;

    explicit TDSNet(const ModelConfig& c, std::uint64_t seed) : cfg(c) {
        Rng rng = Rng(seed).child("init");
        backbone = Backbone<T>(params, state, cfg.image_size, cfg.in_channels, cfg.channels, cfg.blocks, rng);
        hconv = HConv<T>(params, state, cfg.channels, cfg.hconv, rng);
        if (cfg.local_branch && !cfg.uniform_attention && !cfg.share_mphi)
            mphi = Conv2dLayer<T>(params, "mphi.conv", 1, 1, cfg.channels, cfg.channels, 0, /*with_bias=*/false, rng);
        if (cfg.lfe) lfe_head = AttentionHead<T>(params, cfg.channels, cfg.attention_maps, rng);
    }

    std::size_t feature_hw() const {
        const std::size_t s = backbone.feature_hw();
        return s * s;
    }

    // Runs one episode. `mode` selects the batch-norm behaviour (training,
    // frozen-statistics training for gradient probes, or evaluation).
    // `bundles`, when given, receives per-query similarity matrices.
    EpisodeResult<T> forward(const EpisodeBatch<T>& ep, BnMode mode, ForwardTrace<T>* trace = nullptr,
                             std::vector<SimilarityBundle<T>>* bundles = nullptr) {
        const std::size_t n = ep.n_way, k = ep.k_shot;
        const std::size_t nk = n * k;
        const std::size_t q = ep.query.shape()[0];
        const std::size_t side = backbone.feature_hw();
        const std::size_t hw = side * side;
        const std::size_t c = cfg.channels;

        Tensor<T> feats = backbone.forward(concat0<T>({ep.support, ep.query}), mode);
        Tensor<T> fs = slice0(feats, 0, nk);
        Tensor<T> fq = slice0(feats, nk, nk + q);
        Tensor<T> protos =
            k == 1 ? fs : mean(reshape(fs, {n, k, side, side, c}), {1}); // (N, h, w, C)

        // Global branch: prototypes and queries share one h_conv batch.
        Tensor<T> headed = hconv.forward(concat0<T>({protos, fq}), mode);
        Tensor<T> hp = slice0(headed, 0, n);
        Tensor<T> hq = slice0(headed, n, n + q);
        const std::size_t d = hp.numel() / n;
        Tensor<T> hp_rows = reshape(hp, {n, d});
        EpisodeResult<T> out;
        out.global_scores = global_similarity(reshape(hq, {q, d}), hp_rows); // (Q,N)

        if (cfg.local_branch) {
            Tensor<T> phi_q, phi_p;
            if (cfg.uniform_attention) {
                // attention is constant; no relation features needed
            } else if (cfg.share_mphi) {
                phi_q = hq;
                phi_p = hp;
            } else {
                phi_q = mphi.forward(fq);
                phi_p = mphi.forward(protos);
            }
            Tensor<T> ls = descriptor_columns(protos); // (C, N*HW)
            Tensor<T> ls_phi = cfg.uniform_attention ? Tensor<T>() : descriptor_columns(phi_p);
            std::vector<Tensor<T>> rows;
            rows.reserve(q);
            for (std::size_t i = 0; i < q; ++i) {
                Tensor<T> lq = descriptor_columns(slice0(fq, i, i + 1));
                Tensor<T> m = build_similarity_matrix(lq, ls);
                Tensor<T> ma, mphi_mat;
                if (cfg.uniform_attention) {
                    ma = uniform_attention<T>(hw, n * hw);
                } else {
                    Tensor<T> lq_phi = descriptor_columns(slice0(phi_q, i, i + 1));
                    mphi_mat = build_similarity_matrix(lq_phi, ls_phi);
                    ma = task_attention(mphi_mat, n, cfg.top_k, T(cfg.steepness), cfg.attention_kind,
                                        cfg.attention_scope, trace);
                }
                if (bundles) bundles->push_back({detach(m), mphi_mat.defined() ? detach(mphi_mat) : Tensor<T>(),
                                                 detach(ma)});
                rows.push_back(reshape(local_similarity(m, ma, n), {std::size_t(1), n}));
            }
            out.local_scores = concat0(rows);
            out.total_scores = fuse(out.global_scores, out.local_scores);
        } else {
            out.total_scores = out.global_scores;
        }

        if (cfg.lfe && mode != BnMode::Eval) {
            Tensor<T> att = lfe_head.forward(fq);            // (Q,h,w,m)
            Tensor<T> pooled = attention_pooled(fq, att);    // (Q,h,w,C)
            // Separate h_conv pass: batch statistics of the pooled maps,
            // running statistics untouched, main-path scores unaffected.
            Tensor<T> ha = hconv.forward(pooled, BnMode::TrainFrozen);
            Tensor<T> part_scores = global_similarity(reshape(ha, {q, d}), hp_rows);
            Tensor<T> pa = row_softmax(part_scores);

            // Teacher distribution: detached global predictions.
            std::vector<std::vector<T>> teacher(q);
            if (trace && trace->replay) {
                for (std::size_t i = 0; i < q; ++i) teacher[i] = trace->teacher.at(trace->teacher_cursor++);
            } else {
                Tensor<T> pg = row_softmax(detach(out.global_scores));
                for (std::size_t i = 0; i < q; ++i)
                    teacher[i].assign(pg.data() + i * n, pg.data() + (i + 1) * n);
                if (trace)
                    for (auto& row : teacher) trace->teacher.push_back(row);
            }
            Tensor<T> total = Tensor<T>::scalar(T(0));
            for (std::size_t i = 0; i < q; ++i) {
                Tensor<T> pg_row = Tensor<T>::from_vec({n}, std::vector<T>(teacher[i]));
                total = add(total, kl_regularizer(pg_row, reshape(slice0(pa, i, i + 1), {n})));
            }
            out.kl = mul(total, Tensor<T>::scalar(T(1) / static_cast<T>(q)));
        }

        out.predictions.resize(q);
        const T* ts = out.total_scores.data();
        for (std::size_t i = 0; i < q; ++i) {
            std::size_t best = 0;
            for (std::size_t j = 1; j < n; ++j)
                if (ts[i * n + j] > ts[i * n + best]) best = j;
            out.predictions[i] = static_cast<int>(best);
        }
        return out;
    }
};

} // namespace tdsnet
