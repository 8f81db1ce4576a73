#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <string>

#include <json.hpp>

#include "tdsnet/config.hpp"
#include "tdsnet/episodes.hpp"
#include "tdsnet/model.hpp"

namespace tdsnet {

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

// Squared error of one query against its one-hot label. Branch scores are
// cosines in [-1,1]; (s+1)/2 maps them onto the label range first.
template <class T>
Tensor<T> branch_loss(const Tensor<T>& scores, int label) {
    if (scores.rank() != 1) throw std::invalid_argument("branch_loss: rank-1 scores expected");
    const std::size_t n = scores.numel();
    if (label < 0 || std::size_t(label) >= n)
        throw std::invalid_argument("branch_loss: label " + std::to_string(label) + " out of range for " +
                                    std::to_string(n) + " classes");
    std::vector<T> onehot(n, T(0));
    onehot[label] = T(1);
    Tensor<T> y = mul(add(scores, Tensor<T>::scalar(T(1))), Tensor<T>::scalar(T(0.5)));
    Tensor<T> d = sub(y, Tensor<T>::from_vec({n}, std::move(onehot)));
    return sum(mul(d, d));
}

// Same loss over the query batch of one episode; mean over queries by
// default, literal per-query sum behind the flag.
template <class T>
Tensor<T> episode_branch_loss(const Tensor<T>& scores, const std::vector<int>& labels, bool sum_mode = false) {
    if (scores.rank() != 2 || scores.shape()[0] != labels.size())
        throw std::invalid_argument("episode_branch_loss: scores " + shape_str(scores.shape()) + " vs " +
                                    std::to_string(labels.size()) + " labels");
    const std::size_t q = labels.size(), n = scores.shape()[1];
    std::vector<T> onehot(q * n, T(0));
    for (std::size_t i = 0; i < q; ++i) {
        if (labels[i] < 0 || std::size_t(labels[i]) >= n)
            throw std::invalid_argument("episode_branch_loss: label out of range");
        onehot[i * n + labels[i]] = T(1);
    }
    Tensor<T> y = mul(add(scores, Tensor<T>::scalar(T(1))), Tensor<T>::scalar(T(0.5)));
    Tensor<T> d = sub(y, Tensor<T>::from_vec({q, n}, std::move(onehot)));
    Tensor<T> per_query = sum(mul(d, d), {1});
    return sum_mode ? sum(per_query) : mean(per_query);
}

struct NonFiniteLoss : std::runtime_error {
    using std::runtime_error::runtime_error;
};

template <class T>
struct LossBundle {
    Tensor<T> g, l, kl, total;
};

// L_total = L_g + L_l + lambda * L_KL, in that association.
template <class T>
LossBundle<T> assemble_total_loss(Tensor<T> lg, Tensor<T> ll, Tensor<T> lkl, T lambda) {
    if (!ll.defined()) ll = Tensor<T>::scalar(T(0));
    if (!lkl.defined()) lkl = Tensor<T>::scalar(T(0));
    LossBundle<T> out;
    out.g = lg;
    out.l = ll;
    out.kl = lkl;
    out.total = add(add(lg, ll), mul(lkl, Tensor<T>::scalar(lambda)));
    if (!std::isfinite(double(lg.value())) || !std::isfinite(double(ll.value())) ||
        !std::isfinite(double(lkl.value())))
        throw NonFiniteLoss("non-finite loss component: g=" + std::to_string(double(lg.value())) +
                            " l=" + std::to_string(double(ll.value())) +
                            " kl=" + std::to_string(double(lkl.value())));
    return out;
}

// ---------------------------------------------------------------------------
// Optimizer and schedule
// ---------------------------------------------------------------------------

template <class T>
struct Adam {
    T beta1 = T(0.9), beta2 = T(0.999), eps = T(1e-8);
    std::uint64_t step_count = 0;
    std::map<std::string, std::vector<T>> m, v;

    void step(ParamStore<T>& params, T lr) {
        ++step_count;
        const T bc1 = T(1) - std::pow(beta1, T(step_count));
        const T bc2 = T(1) - std::pow(beta2, T(step_count));
        for (auto& [path, p] : params.params) {
            auto& mp = m[path];
            auto& vp = v[path];
            if (mp.empty()) mp.assign(p.numel(), T(0));
            if (vp.empty()) vp.assign(p.numel(), T(0));
            const auto g = p.grad_or_zeros();
            T* w = p.mutable_data();
            for (std::size_t i = 0; i < g.size(); ++i) {
                mp[i] = beta1 * mp[i] + (T(1) - beta1) * g[i];
                vp[i] = beta2 * vp[i] + (T(1) - beta2) * g[i] * g[i];
                w[i] -= lr * (mp[i] / bc1) / (std::sqrt(vp[i] / bc2) + eps);
            }
        }
    }
};

struct LrSchedule {
    double base = 0.001;
    std::size_t halving_interval = 100000;
    double at(std::uint64_t episode) const {
        return base * std::pow(0.5, double(episode / halving_interval));
    }
};

// Scales all gradients so their global norm does not exceed `clip`.
template <class T>
void clip_gradients(ParamStore<T>& params, T clip) {
    double norm_sq = 0;
    for (auto& [path, p] : params.params)
        if (p.has_grad())
            for (T g : p.grad()) norm_sq += double(g) * double(g);
    const double norm = std::sqrt(norm_sq);
    if (norm <= double(clip)) return;
    const T scale = T(double(clip) / norm);
    for (auto& [path, p] : params.params)
        if (p.has_grad()) {
            auto& g = p.impl()->grad;
            for (auto& e : g) e *= scale;
        }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointFormatVersion = 1;

struct CheckpointMeta {
    std::uint32_t format_version = kCheckpointFormatVersion;
    std::string config_digest;
    std::uint64_t episode_counter = 0;
};

// Layout: one JSON header line, then a u32 record count and records of
// (u32 path length, path, tensor) in lexicographic path order.
template <class T>
void save_checkpoint(const std::string& path, const CheckpointMeta& meta, const TDSNet<T>& model,
                     const Adam<T>* adam = nullptr) {
    std::map<std::string, Tensor<T>> records;
    for (const auto& [p, t] : model.params.params) records.emplace("param/" + p, t);
    for (const auto& [p, t] : model.state.buffers) records.emplace("state/" + p, t);
    if (adam) {
        records.emplace("adam/step", Tensor<T>::from_vec({1}, {T(adam->step_count)}));
        for (const auto& [p, t] : model.params.params) {
            auto mit = adam->m.find(p);
            auto vit = adam->v.find(p);
            records.emplace("adam_m/" + p, mit != adam->m.end() && !mit->second.empty()
                                               ? Tensor<T>::from_vec(t.shape(), mit->second)
                                               : Tensor<T>::zeros(t.shape()));
            records.emplace("adam_v/" + p, vit != adam->v.end() && !vit->second.empty()
                                               ? Tensor<T>::from_vec(t.shape(), vit->second)
                                               : Tensor<T>::zeros(t.shape()));
        }
    }
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open checkpoint for write: " + path);
    nlohmann::json header = {{"format_version", meta.format_version},
                             {"config_digest", meta.config_digest},
                             {"episode_counter", meta.episode_counter}};
    os << header.dump() << "\n";
    detail::write_pod<std::uint32_t>(os, std::uint32_t(records.size()));
    for (const auto& [p, t] : records) {
        detail::write_pod<std::uint32_t>(os, std::uint32_t(p.size()));
        os.write(p.data(), p.size());
        write_tensor(os, t);
    }
    if (!os) throw std::runtime_error("checkpoint write failed: " + path);
}

template <class T>
CheckpointMeta load_checkpoint(const std::string& path, TDSNet<T>& model, Adam<T>* adam = nullptr) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
    std::string line;
    std::getline(is, line);
    nlohmann::json header = nlohmann::json::parse(line);
    CheckpointMeta meta;
    meta.format_version = header.at("format_version").get<std::uint32_t>();
    if (meta.format_version != kCheckpointFormatVersion)
        throw std::runtime_error("unsupported checkpoint format version " + std::to_string(meta.format_version));
    meta.config_digest = header.at("config_digest").get<std::string>();
    meta.episode_counter = header.at("episode_counter").get<std::uint64_t>();

    const auto count = detail::read_pod<std::uint32_t>(is);
    std::map<std::string, Tensor<T>> records;
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto len = detail::read_pod<std::uint32_t>(is);
        std::string p(len, '\0');
        is.read(p.data(), len);
        records.emplace(std::move(p), read_tensor<T>(is));
    }
    auto restore = [&](const std::string& key, Tensor<T>& dst) {
        auto it = records.find(key);
        if (it == records.end()) throw std::runtime_error("checkpoint misses record: " + key);
        if (it->second.shape() != dst.shape())
            fail_shape("checkpoint record " + key + " shape differs", it->second.shape(), dst.shape());
        std::memcpy(dst.mutable_data(), it->second.data(), dst.numel() * sizeof(T));
    };
    for (auto& [p, t] : model.params.params) restore("param/" + p, t);
    for (auto& [p, t] : model.state.buffers) restore("state/" + p, t);
    if (adam) {
        auto it = records.find("adam/step");
        if (it != records.end()) {
            adam->step_count = std::uint64_t(it->second.data()[0]);
            for (auto& [p, t] : model.params.params) {
                adam->m[p] = records.at("adam_m/" + p).values();
                adam->v[p] = records.at("adam_v/" + p).values();
            }
        } else {
            adam->step_count = 0;
            adam->m.clear();
            adam->v.clear();
        }
    }
    return meta;
}

// Per-module trainable parameter counts of a checkpoint, read without
// binding to a scalar type (payloads are skipped).
inline std::pair<std::map<std::string, std::size_t>, std::size_t> checkpoint_param_counts(
    const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
    std::string line;
    std::getline(is, line);
    const auto count = detail::read_pod<std::uint32_t>(is);
    std::map<std::string, std::size_t> by_module;
    std::size_t total = 0;
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto len = detail::read_pod<std::uint32_t>(is);
        std::string p(len, '\0');
        is.read(p.data(), len);
        char magic[4];
        is.read(magic, 4);
        if (!is || std::memcmp(magic, "TDSN", 4) != 0) throw std::runtime_error("corrupt checkpoint: " + path);
        detail::read_pod<std::uint32_t>(is); // version
        const auto dtype = detail::read_pod<std::uint8_t>(is);
        const auto rank = detail::read_pod<std::uint8_t>(is);
        std::size_t n = 1;
        for (std::uint8_t r = 0; r < rank; ++r) n *= detail::read_pod<std::uint32_t>(is);
        is.seekg(std::streamoff(n * (dtype == 0 ? 4 : 8)), std::ios::cur);
        if (p.rfind("param/", 0) == 0) {
            const std::string rest = p.substr(6);
            by_module[rest.substr(0, rest.find('.'))] += n;
            total += n;
        }
    }
    return {by_module, total};
}

// ---------------------------------------------------------------------------
// Episodic training loop
// ---------------------------------------------------------------------------

struct TrainProgress {
    std::uint64_t episodes_run = 0;
    double best_val = -1.0;
    double last_loss = 0.0;
};

// Runs episodes [start_episode, epochs*episodes_per_epoch). Fully resumable:
// the episode index keys the sampler stream, so a reloaded checkpoint
// continues the exact same draw sequence. Checkpoints land in `ckpt_dir`
// every epoch (latest.tdsn + best.tdsn when `validate` is provided).
template <class T>
TrainProgress train_loop(const RunConfig& cfg, TDSNet<T>& model, Adam<T>& opt,
                         const EpisodeProvider<T>& data, std::uint64_t start_episode,
                         std::ostream* metrics, const std::string& ckpt_dir,
                         const std::function<double(TDSNet<T>&)>& validate = {}, double best_val_in = -1.0) {
    namespace fs = std::filesystem;
    const std::uint64_t total = std::uint64_t(cfg.epochs) * cfg.episodes_per_epoch;
    const LrSchedule schedule{cfg.lr, cfg.lr_halving_interval};
    const std::string digest = cfg.digest();
    if (!ckpt_dir.empty()) fs::create_directories(ckpt_dir);

    TrainProgress progress;
    progress.best_val = best_val_in;
    auto save = [&](const std::string& name, std::uint64_t episodes_done) {
        if (ckpt_dir.empty()) return;
        save_checkpoint((fs::path(ckpt_dir) / name).string(), {kCheckpointFormatVersion, digest, episodes_done},
                        model, &opt);
    };

    for (std::uint64_t e = start_episode; e < total; ++e) {
        const double lr = schedule.at(e);
        auto draw = sample_episode(data.index(), cfg.n_way, cfg.k_shot, cfg.q_train,
                                   Rng(cfg.seed).child("train-ep", e), e);
        auto ep = data.template materialize<EpisodeBatch<T>>(draw, cfg.q_train);

        Tape<T> tape;
        LossBundle<T> loss;
        EpisodeResult<T> out;
        {
            typename Tape<T>::Scope scope(tape);
            out = model.forward(ep, BnMode::Train);
            Tensor<T> lg = episode_branch_loss(out.global_scores, ep.labels, cfg.loss_sum_mode);
            Tensor<T> ll = cfg.local ? episode_branch_loss(out.local_scores, ep.labels, cfg.loss_sum_mode)
                                     : Tensor<T>();
            try {
                loss = assemble_total_loss(lg, ll, out.kl, T(cfg.lambda));
            } catch (const NonFiniteLoss&) {
                save("abort_dump.tdsn", e);
                throw;
            }
        }
        model.params.zero_grads();
        tape.backward(loss.total);
        if (cfg.grad_clip > 0) clip_gradients(model.params, T(cfg.grad_clip));
        opt.step(model.params, T(lr));

        std::size_t correct = 0;
        for (std::size_t i = 0; i < ep.labels.size(); ++i)
            if (out.predictions[i] == ep.labels[i]) ++correct;
        const double acc = double(correct) / double(ep.labels.size());
        progress.last_loss = double(loss.total.value());
        progress.episodes_run = e + 1;

        if (metrics) {
            nlohmann::ordered_json rec{{"episode", e},
                                       {"loss_g", double(loss.g.value())},
                                       {"loss_l", double(loss.l.value())},
                                       {"loss_kl", double(loss.kl.value())},
                                       {"loss_total", double(loss.total.value())},
                                       {"lr", lr},
                                       {"acc", acc}};
            *metrics << rec.dump() << "\n";
        }

        if ((e + 1) % cfg.episodes_per_epoch == 0) {
            char name[32];
            std::snprintf(name, sizeof(name), "epoch_%04llu.tdsn",
                          static_cast<unsigned long long>((e + 1) / cfg.episodes_per_epoch));
            save(name, e + 1);
            save("latest.tdsn", e + 1);
            if (validate) {
                const double val = validate(model);
                if (val > progress.best_val) {
                    progress.best_val = val;
                    save("best.tdsn", e + 1);
                }
            }
        }
    }
    return progress;
}

} // namespace tdsnet
