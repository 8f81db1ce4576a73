#pragma once

#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tdsnet/training.hpp"

namespace tdsnet {

struct EvalReport {
    double mean_accuracy = 0; // percent
    double ci95 = 0;          // percent
    std::size_t episodes = 0;
    std::vector<double> per_episode; // percent
    std::string config_digest;
    std::string flags; // ablation switches in effect
};

// 1.96 * sample std (n-1 denominator) / sqrt(n).
inline double ci95_half_width(const std::vector<double>& xs) {
    if (xs.size() < 2) return 0.0;
    const double mean = std::accumulate(xs.begin(), xs.end(), 0.0) / double(xs.size());
    double ss = 0;
    for (double x : xs) ss += (x - mean) * (x - mean);
    const double sd = std::sqrt(ss / double(xs.size() - 1));
    return 1.96 * sd / std::sqrt(double(xs.size()));
}

inline std::string format_report_line(const EvalReport& r) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.2f±%.2f", r.mean_accuracy, r.ci95);
    return buf;
}

// Test-time protocol: running batch-norm statistics, argmax of the fused
// score, mean accuracy with its 95% confidence interval over episodes.
template <class T>
EvalReport evaluate(TDSNet<T>& model, const EpisodeProvider<T>& data, std::size_t episodes,
                    std::size_t n_way, std::size_t k_shot, std::size_t q_per, std::uint64_t seed,
                    AttentionKind attention = AttentionKind::Smooth) {
    const AttentionKind keep = model.cfg.attention_kind;
    model.cfg.attention_kind = attention;
    EvalReport report;
    report.episodes = episodes;
    report.per_episode.reserve(episodes);
    for (std::size_t e = 0; e < episodes; ++e) {
        auto draw = sample_episode(data.index(), n_way, k_shot, q_per, Rng(seed).child("eval-ep", e), e);
        auto ep = data.template materialize<EpisodeBatch<T>>(draw, q_per);
        auto out = model.forward(ep, BnMode::Eval);
        std::size_t correct = 0;
        for (std::size_t i = 0; i < ep.labels.size(); ++i)
            if (out.predictions[i] == ep.labels[i]) ++correct;
        report.per_episode.push_back(100.0 * double(correct) / double(ep.labels.size()));
    }
    model.cfg.attention_kind = keep;
    report.mean_accuracy =
        std::accumulate(report.per_episode.begin(), report.per_episode.end(), 0.0) / double(episodes);
    report.ci95 = ci95_half_width(report.per_episode);
    return report;
}

inline nlohmann::ordered_json report_json(const EvalReport& r) {
    return {{"mean_accuracy", r.mean_accuracy}, {"ci95", r.ci95},      {"episodes", r.episodes},
            {"config_digest", r.config_digest}, {"flags", r.flags},    {"line", format_report_line(r)},
            {"per_episode", r.per_episode}};
}

// ---------------------------------------------------------------------------
// Parameter accounting
// ---------------------------------------------------------------------------

template <class T>
std::string parameter_table(const ParamStore<T>& params) {
    std::ostringstream os;
    std::size_t total = 0;
    for (const auto& [mod, n] : params.counts_by_module()) {
        char line[64];
        std::snprintf(line, sizeof(line), "%-10s %10zu\n", mod.c_str(), n);
        os << line;
        total += n;
    }
    char line[64];
    std::snprintf(line, sizeof(line), "%-10s %10zu\n", "total", total);
    os << line;
    return os.str();
}

// ---------------------------------------------------------------------------
// Ablation suite
// ---------------------------------------------------------------------------

struct AblationRowSpec {
    std::string label;
    std::string checkpoint_path; // may be missing on disk
    RunConfig cfg;
};

struct AblationRow {
    std::string label;
    bool present = false;
    EvalReport report;
};

// The four standard switch settings, least to most machinery. First the
// global head alone, then enhancement-regularized training, then the dual
// head with uniform patch weights, then full task-aware attention.
inline std::vector<AblationRowSpec> standard_ablation_specs(const RunConfig& base,
                                                            const std::string& checkpoint_dir) {
    auto make = [&](const char* label, const char* file, bool lfe, bool local, const char* attention) {
        AblationRowSpec row;
        row.label = label;
        row.checkpoint_path = checkpoint_dir.empty() ? "" : checkpoint_dir + "/" + file;
        row.cfg = base;
        row.cfg.lfe = lfe;
        row.cfg.local = local;
        row.cfg.attention = attention;
        return row;
    };
    return {make("(a) global-only", "ablate_a/latest.tdsn", false, false, "task"),
            make("(b) global+enhancement", "ablate_b/latest.tdsn", true, false, "task"),
            make("(c) dual, uniform patches", "ablate_c/latest.tdsn", true, true, "uniform"),
            make("(d) dual, task attention", "ablate_d/latest.tdsn", true, true, "task")};
}

// Evaluates one checkpoint per row; missing checkpoints yield absent rows
// and the suite continues.
template <class T>
std::vector<AblationRow> ablation_suite(const std::vector<AblationRowSpec>& specs,
                                        const EpisodeProvider<T>& data, std::size_t episodes,
                                        std::uint64_t eval_seed) {
    std::vector<AblationRow> rows;
    for (const auto& spec : specs) {
        AblationRow row;
        row.label = spec.label;
        if (!spec.checkpoint_path.empty() && std::filesystem::exists(spec.checkpoint_path)) {
            TDSNet<T> model(spec.cfg.model_config(), spec.cfg.seed);
            load_checkpoint<T>(spec.checkpoint_path, model);
            row.report = evaluate(model, data, episodes, spec.cfg.n_way, spec.cfg.k_shot, spec.cfg.q_eval,
                                  eval_seed,
                                  spec.cfg.eval_attention == "hard" ? AttentionKind::Hard : AttentionKind::Smooth);
            row.report.config_digest = spec.cfg.digest();
            row.report.flags = std::string("lfe=") + (spec.cfg.lfe ? "on" : "off") +
                               " local=" + (spec.cfg.local ? "on" : "off") + " attention=" + spec.cfg.attention;
            row.present = true;
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

inline std::string ablation_table_text(const std::vector<AblationRow>& rows) {
    std::ostringstream os;
    for (const auto& row : rows) {
        char line[96];
        std::snprintf(line, sizeof(line), "%-28s %s\n", row.label.c_str(),
                      row.present ? format_report_line(row.report).c_str() : "absent");
        os << line;
    }
    return os.str();
}

inline nlohmann::ordered_json ablation_table_json(const std::vector<AblationRow>& rows) {
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const auto& row : rows) {
        nlohmann::ordered_json entry{{"label", row.label}, {"present", row.present}};
        if (row.present) {
            entry["mean_accuracy"] = row.report.mean_accuracy;
            entry["ci95"] = row.report.ci95;
            entry["episodes"] = row.report.episodes;
            entry["flags"] = row.report.flags;
        }
        arr.push_back(std::move(entry));
    }
    return arr;
}

} // namespace tdsnet
