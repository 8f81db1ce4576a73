#pragma once

#include <array>
#include <chrono>
#include <string>
#include <vector>

#include "tdsnet/config.hpp"
#include "tdsnet/training.hpp"

namespace tdsnet {

struct GradCheckReport {
    // max relative error per loss component, over all trainable parameters
    double err_global = 0, err_local = 0, err_kl = 0, err_total = 0;
    std::size_t parameters = 0;
    double seconds = 0;

    double worst() const { return std::max({err_global, err_local, err_kl, err_total}); }
    bool pass(double tol) const { return worst() <= tol; }
};

// Compares the recorded-tape gradients of every loss component against
// central finite differences over all parameters. The probe evaluates the
// same function the trainer differentiates: detached quantities (top-k
// thresholds, teacher distributions) are captured on the base pass and
// replayed unchanged at the perturbed points, and batch-norm runs with
// frozen running statistics throughout.
template <class T>
GradCheckReport run_gradcheck(const RunConfig& cfg, double step = 1e-5) {
    const auto t0 = std::chrono::steady_clock::now();
    TDSNet<T> model(cfg.model_config(), cfg.seed);

    // synthetic episode straight from the stream: contents are irrelevant,
    // only differentiability is under test
    Rng rng = Rng(cfg.seed).child("gradcheck");
    EpisodeBatch<T> ep;
    ep.n_way = cfg.n_way;
    ep.k_shot = cfg.k_shot;
    const std::size_t px = cfg.image_size * cfg.image_size * 3;
    std::vector<T> sup(cfg.n_way * cfg.k_shot * px), qry(cfg.n_way * cfg.q_train * px);
    for (auto& v : sup) v = T(rng.uniform(0.0, 1.0));
    for (auto& v : qry) v = T(rng.uniform(0.0, 1.0));
    ep.support = Tensor<T>::from_vec({cfg.n_way * cfg.k_shot, cfg.image_size, cfg.image_size, 3}, std::move(sup));
    ep.query = Tensor<T>::from_vec({cfg.n_way * cfg.q_train, cfg.image_size, cfg.image_size, 3}, std::move(qry));
    for (std::size_t c = 0; c < cfg.n_way; ++c)
        for (std::size_t q = 0; q < cfg.q_train; ++q) ep.labels.push_back(int(c));

    auto components = [&](ForwardTrace<T>* trace) {
        auto out = model.forward(ep, BnMode::TrainFrozen, trace);
        Tensor<T> lg = episode_branch_loss(out.global_scores, ep.labels, cfg.loss_sum_mode);
        Tensor<T> ll = cfg.local ? episode_branch_loss(out.local_scores, ep.labels, cfg.loss_sum_mode)
                                 : Tensor<T>::scalar(T(0));
        Tensor<T> lkl = out.kl.defined() ? out.kl : Tensor<T>::scalar(T(0));
        Tensor<T> lt = add(add(lg, ll), mul(lkl, Tensor<T>::scalar(T(cfg.lambda))));
        return std::array<Tensor<T>, 4>{lg, ll, lkl, lt};
    };

    // analytic gradients, one backward per component on the recorded tape
    ForwardTrace<T> trace;
    Tape<T> tape;
    std::array<Tensor<T>, 4> losses;
    {
        typename Tape<T>::Scope scope(tape);
        losses = components(&trace);
    }
    std::vector<std::string> paths;
    std::array<std::map<std::string, std::vector<T>>, 4> analytic;
    for (int c = 0; c < 4; ++c) {
        model.params.zero_grads();
        tape.backward(losses[c]);
        for (auto& [p, t] : model.params.params) analytic[c][p] = t.grad_or_zeros();
    }
    for (auto& [p, t] : model.params.params) paths.push_back(p);

    // finite differences with the recorded trace replayed
    trace.replay = true;
    auto eval_all = [&]() {
        trace.rewind();
        auto ls = components(&trace);
        return std::array<double, 4>{double(ls[0].value()), double(ls[1].value()), double(ls[2].value()),
                                     double(ls[3].value())};
    };
    GradCheckReport report;
    for (const auto& p : paths) {
        Tensor<T>& t = model.params.params.at(p);
        T* w = t.mutable_data();
        report.parameters += t.numel();
        for (std::size_t i = 0; i < t.numel(); ++i) {
            const T keep = w[i];
            w[i] = keep + T(step);
            const auto fp = eval_all();
            w[i] = keep - T(step);
            const auto fm = eval_all();
            w[i] = keep;
            double* errs[4] = {&report.err_global, &report.err_local, &report.err_kl, &report.err_total};
            for (int c = 0; c < 4; ++c) {
                const double fd = (fp[c] - fm[c]) / (2.0 * step);
                const double an = double(analytic[c].at(p)[i]);
                const double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-6});
                if (rel > *errs[c]) *errs[c] = rel;
            }
        }
    }
    report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

// The desk-scale configuration used for gradient verification: 2-way
// 1-shot, one query per class, 16x16 inputs, an 8-channel 2-block
// backbone, 2 attention maps, k=2, smooth attention, 64-bit scalars.
inline RunConfig tiny_gradcheck_config() {
    RunConfig cfg;
    cfg.n_way = 2;
    cfg.k_shot = 1;
    cfg.q_train = 1;
    cfg.image_size = 16;
    cfg.channels = 8;
    cfg.blocks = 2;
    cfg.attention_maps = 2;
    cfg.top_k = 2;
    cfg.precision = "f64";
    cfg.seed = 1;
    return cfg;
}

} // namespace tdsnet
