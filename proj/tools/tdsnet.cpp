// tdsnet: few-shot fine-grained classification laboratory.
//
// Commands: train, eval, ablate, synth, gradcheck, params.
// Configuration precedence: config file < TDSNET_* environment < flags.
// Exit codes: 0 ok, 1 runtime failure, 2 usage or configuration error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "tdsnet/evaluation.hpp"
#include "tdsnet/gradcheck.hpp"
#include "tdsnet/synthetic.hpp"
#include "tdsnet/training.hpp"

namespace fs = std::filesystem;
using namespace tdsnet;

namespace {

struct CliState {
    RunConfig cfg;
    bool resume = false;
    std::string checkpoint;
    std::string eval_split = "test";
    std::string ablate_root;
    std::string ablate_ckpt[4];
    SyntheticSpec synth;
    std::string synth_out = "synthetic";
    double gradcheck_tol = 1e-3;
    double gradcheck_step = 1e-5;
};

std::string upper_env(std::string name) {
    for (auto& c : name) c = c == '-' ? '_' : char(std::toupper(static_cast<unsigned char>(c)));
    return "TDSNET_" + name;
}

// Registers one option with its TDSNET_ environment fallback.
template <class Value>
CLI::Option* opt(CLI::App& app, const std::string& flag, Value& target, const std::string& help) {
    auto* o = app.add_option(flag, target, help);
    o->envname(upper_env(flag.substr(2)));
    return o;
}

void add_run_options(CLI::App& app, RunConfig& cfg) {
    opt(app, "--way", cfg.n_way, "Classes per episode (N)");
    opt(app, "--shot", cfg.k_shot, "Support images per class (K)");
    opt(app, "--q-train", cfg.q_train, "Training queries per class");
    opt(app, "--q-eval", cfg.q_eval, "Evaluation queries per class");
    opt(app, "--image-size", cfg.image_size, "Input side length after resize");
    opt(app, "--channels", cfg.channels, "Backbone channel width");
    opt(app, "--blocks", cfg.blocks, "Backbone conv blocks (each pools 2x)");
    opt(app, "--hconv", cfg.hconv, "Global head variant: conv3x3|conv1x1|identity");
    opt(app, "--attention-maps", cfg.attention_maps, "Enhancement attention maps (m)");
    opt(app, "--top-k", cfg.top_k, "Attention threshold rank (k)");
    opt(app, "--steepness", cfg.steepness, "Smooth threshold steepness (t)");
    opt(app, "--lambda", cfg.lambda, "Enhancement loss weight");
    app.add_flag("--lfe,!--no-lfe", cfg.lfe, "Train with the local feature enhancement loss")
        ->envname(upper_env("lfe"));
    app.add_flag("--local,!--no-local", cfg.local, "Use the local similarity branch")
        ->envname(upper_env("local"));
    opt(app, "--attention", cfg.attention, "Patch reweighting: task|uniform");
    opt(app, "--attention-norm", cfg.attention_norm, "Attention normalization scope: task|class");
    opt(app, "--eval-attention", cfg.eval_attention, "Attention form at test time: smooth|hard");
    app.add_flag("--share-mphi", cfg.share_mphi, "Relation matrix reuses the global head features")
        ->envname(upper_env("share-mphi"));
    opt(app, "--lr", cfg.lr, "Initial learning rate");
    opt(app, "--lr-halving-interval", cfg.lr_halving_interval, "Episodes between halvings");
    opt(app, "--epochs", cfg.epochs, "Training epochs");
    opt(app, "--episodes-per-epoch", cfg.episodes_per_epoch, "Episodes per epoch (E)");
    app.add_flag("--loss-sum-mode", cfg.loss_sum_mode, "Sum per-query losses instead of averaging")
        ->envname(upper_env("loss-sum-mode"));
    opt(app, "--grad-clip", cfg.grad_clip, "Global gradient norm clip (0 = off)");
    opt(app, "--eval-episodes", cfg.eval_episodes, "Evaluation episodes");
    opt(app, "--val-episodes", cfg.val_episodes, "Validation episodes per epoch");
    opt(app, "--seed", cfg.seed, "Master seed");
    opt(app, "--precision", cfg.precision, "Scalar type: f32|f64");
    opt(app, "--data", cfg.data_root, "Dataset root directory");
    opt(app, "--aux-split", cfg.aux_split, "Auxiliary split file (under the data root)");
    opt(app, "--test-split", cfg.test_split, "Test split file (under the data root)");
    opt(app, "--val-split", cfg.val_split, "Validation split file (optional)");
    opt(app, "--out", cfg.output_dir, "Output directory");
    opt(app, "--cache-dir", cfg.cache_dir, "Preprocessed tensor cache directory");
}

std::string split_path(const RunConfig& cfg, const std::string& name) {
    const fs::path p(name);
    return p.is_absolute() ? name : (fs::path(cfg.data_root) / name).string();
}

DatasetIndex load_split_checked(const RunConfig& cfg, const std::string& split) {
    auto index = load_dataset(cfg.data_root, split_path(cfg, split));
    return index;
}

template <class T>
int do_train(const CliState& st) {
    const RunConfig& cfg = st.cfg;
    auto aux = load_split_checked(cfg, cfg.aux_split);
    if (fs::exists(split_path(cfg, cfg.test_split)))
        check_disjoint(aux, load_split_checked(cfg, cfg.test_split));

    EpisodeProvider<T> provider(aux, cfg.image_size, cfg.cache_dir);
    std::optional<EpisodeProvider<T>> val_provider;
    if (!cfg.val_split.empty()) {
        auto val = load_split_checked(cfg, cfg.val_split);
        check_disjoint(aux, val);
        val_provider.emplace(val, cfg.image_size, cfg.cache_dir);
    }

    TDSNet<T> model(cfg.model_config(), cfg.seed);
    Adam<T> adam;
    const std::string ckpt_dir = (fs::path(cfg.output_dir) / "checkpoints").string();
    std::uint64_t start = 0;
    if (st.resume) {
        const std::string latest = (fs::path(ckpt_dir) / "latest.tdsn").string();
        if (fs::exists(latest)) {
            auto meta = load_checkpoint(latest, model, &adam);
            if (meta.config_digest != cfg.digest())
                throw std::invalid_argument("config: resume digest mismatch (checkpoint " +
                                            meta.config_digest + ", run " + cfg.digest() + ")");
            start = meta.episode_counter;
            std::printf("resuming at episode %llu\n", static_cast<unsigned long long>(start));
        }
    }

    fs::create_directories(cfg.output_dir);
    std::ofstream metrics(fs::path(cfg.output_dir) / "metrics.ndjson", std::ios::app);
    std::function<double(TDSNet<T>&)> validate;
    if (val_provider)
        validate = [&](TDSNet<T>& m) {
            auto r = evaluate(m, *val_provider, cfg.val_episodes, cfg.n_way, cfg.k_shot, cfg.q_eval,
                              cfg.seed ^ 0x76616cull,
                              cfg.eval_attention == "hard" ? AttentionKind::Hard : AttentionKind::Smooth);
            std::printf("  val %s\n", format_report_line(r).c_str());
            return r.mean_accuracy;
        };

    auto progress = train_loop(cfg, model, adam, provider, start, &metrics, ckpt_dir, validate);
    std::printf("trained %llu episodes, final loss %.6f\n",
                static_cast<unsigned long long>(progress.episodes_run), progress.last_loss);
    if (progress.best_val >= 0) std::printf("best validation accuracy %.2f\n", progress.best_val);
    return 0;
}

template <class T>
int do_eval(const CliState& st) {
    const RunConfig& cfg = st.cfg;
    if (!fs::exists(st.checkpoint)) {
        std::fprintf(stderr, "checkpoint not found: %s\n", st.checkpoint.c_str());
        return 2;
    }
    auto split = st.eval_split == "auxiliary" ? cfg.aux_split : st.eval_split == "val" ? cfg.val_split
                                                                                       : cfg.test_split;
    auto index = load_split_checked(cfg, split);
    EpisodeProvider<T> provider(index, cfg.image_size, cfg.cache_dir);
    TDSNet<T> model(cfg.model_config(), cfg.seed);
    load_checkpoint<T>(st.checkpoint, model);
    auto report = evaluate(model, provider, cfg.eval_episodes, cfg.n_way, cfg.k_shot, cfg.q_eval, cfg.seed,
                           cfg.eval_attention == "hard" ? AttentionKind::Hard : AttentionKind::Smooth);
    report.config_digest = cfg.digest();
    report.flags = std::string("lfe=") + (cfg.lfe ? "on" : "off") + " local=" + (cfg.local ? "on" : "off") +
                   " attention=" + cfg.attention;
    std::printf("%s\n", format_report_line(report).c_str());
    fs::create_directories(cfg.output_dir);
    const auto path = fs::path(cfg.output_dir) / "report.json";
    std::ofstream(path) << report_json(report).dump(2) << "\n";
    std::printf("report: %s\n", path.string().c_str());
    return 0;
}

template <class T>
int do_ablate(const CliState& st) {
    const RunConfig& cfg = st.cfg;
    auto index = load_split_checked(cfg, cfg.test_split);
    EpisodeProvider<T> provider(index, cfg.image_size, cfg.cache_dir);
    auto specs = standard_ablation_specs(cfg, st.ablate_root.empty() ? cfg.output_dir : st.ablate_root);
    for (int i = 0; i < 4; ++i)
        if (!st.ablate_ckpt[i].empty()) specs[i].checkpoint_path = st.ablate_ckpt[i];
    auto rows = ablation_suite<T>(specs, provider, cfg.eval_episodes, cfg.seed);
    std::fputs(ablation_table_text(rows).c_str(), stdout);
    fs::create_directories(cfg.output_dir);
    const auto path = fs::path(cfg.output_dir) / "ablation.json";
    std::ofstream(path) << ablation_table_json(rows).dump(2) << "\n";
    std::printf("table: %s\n", path.string().c_str());
    return 0;
}

int do_synth(const CliState& st) {
    generate_synthetic(st.synth, st.synth_out);
    Fnv1a digest;
    std::vector<std::string> files;
    for (const auto& e : fs::recursive_directory_iterator(st.synth_out))
        if (e.is_regular_file()) files.push_back(e.path().string());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
        std::ifstream is(f, std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
        digest.update(fs::relative(f, st.synth_out).string());
        digest.update(bytes);
    }
    std::printf("dataset %s (%zu files) digest %s\n", st.synth_out.c_str(), files.size(),
                digest.hex().c_str());
    return 0;
}

int do_gradcheck(const CliState& st) {
    auto cfg = tiny_gradcheck_config();
    cfg.seed = st.cfg.seed;
    auto report = run_gradcheck<double>(cfg, st.gradcheck_step);
    std::printf("max relative gradient error over %zu parameters (64-bit, step %g):\n", report.parameters,
                st.gradcheck_step);
    std::printf("  global       %.3e\n", report.err_global);
    std::printf("  local        %.3e\n", report.err_local);
    std::printf("  enhancement  %.3e\n", report.err_kl);
    std::printf("  total        %.3e\n", report.err_total);
    std::printf("runtime %.2fs, tolerance %g: %s\n", report.seconds, st.gradcheck_tol,
                report.pass(st.gradcheck_tol) ? "pass" : "FAIL");
    return report.pass(st.gradcheck_tol) ? 0 : 1;
}

int do_params(const CliState& st) {
    if (!st.checkpoint.empty()) {
        auto [by_module, total] = checkpoint_param_counts(st.checkpoint);
        for (const auto& [mod, n] : by_module) std::printf("%-10s %10zu\n", mod.c_str(), n);
        std::printf("%-10s %10zu\n", "total", total);
        return 0;
    }
    if (st.cfg.precision == "f64") {
        TDSNet<double> model(st.cfg.model_config(), st.cfg.seed);
        std::fputs(parameter_table(model.params).c_str(), stdout);
    } else {
        TDSNet<float> model(st.cfg.model_config(), st.cfg.seed);
        std::fputs(parameter_table(model.params).c_str(), stdout);
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CliState st;
    CLI::App app{"Task-aware dual-similarity few-shot classification laboratory"};
    app.require_subcommand(1);
    app.fallthrough(); // run options are accepted after the subcommand too
    app.set_config("--config", "", "TOML-style key=value configuration file");
    app.allow_config_extras(false);
    add_run_options(app, st.cfg);

    auto* train = app.add_subcommand("train", "Episodic training");
    train->add_flag("--resume", st.resume, "Continue from <out>/checkpoints/latest.tdsn");

    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint: prints mean±ci");
    eval->add_option("--checkpoint", st.checkpoint, "Checkpoint file")->required();
    eval->add_option("--split", st.eval_split, "Split to evaluate: test|auxiliary|val");
    eval->add_option("--episodes", st.cfg.eval_episodes, "Evaluation episodes");

    auto* ablate = app.add_subcommand("ablate", "Evaluate the four-row component ablation");
    ablate->add_option("--ablate-root", st.ablate_root, "Directory with ablate_{a,b,c,d}/latest.tdsn");
    ablate->add_option("--checkpoint-a", st.ablate_ckpt[0], "Row (a) checkpoint");
    ablate->add_option("--checkpoint-b", st.ablate_ckpt[1], "Row (b) checkpoint");
    ablate->add_option("--checkpoint-c", st.ablate_ckpt[2], "Row (c) checkpoint");
    ablate->add_option("--checkpoint-d", st.ablate_ckpt[3], "Row (d) checkpoint");
    ablate->add_option("--episodes", st.cfg.eval_episodes, "Evaluation episodes per row");

    auto* synth = app.add_subcommand("synth", "Generate the synthetic fine-grained dataset");
    synth->add_option("--synth-out", st.synth_out, "Output dataset root");
    synth->add_option("--size", st.synth.image_size, "Image side length");
    synth->add_option("--classes", st.synth.num_classes, "Total classes");
    synth->add_option("--aux-classes", st.synth.auxiliary_classes, "Classes in the auxiliary split");
    synth->add_option("--images-per-class", st.synth.images_per_class, "Images per class");
    synth->add_option("--parts", st.synth.parts, "Glyph parts");
    synth->add_option("--part-offset", st.synth.part_offset_range, "Class part-angle range (rad)");
    synth->add_option("--hue-delta", st.synth.hue_delta_range, "Class hue shift range");
    synth->add_option("--jitter-translate", st.synth.jitter_translate, "Translation jitter (fraction)");
    synth->add_option("--jitter-rotate", st.synth.jitter_rotate, "Rotation jitter (rad)");
    synth->add_option("--background-noise", st.synth.background_noise, "Per-pixel background noise");
    synth->add_option("--background-variation", st.synth.background_variation, "Background color range");
    synth->add_option("--brightness-jitter", st.synth.brightness_jitter, "Brightness jitter");
    auto* synth_seed = synth->add_option("--synth-seed", st.synth.seed, "Dataset seed");

    auto* gradcheck = app.add_subcommand(
        "gradcheck", "64-bit finite-difference verification of every loss component (desk-scale model)");
    gradcheck->add_option("--tolerance", st.gradcheck_tol, "Max relative error allowed");
    gradcheck->add_option("--step", st.gradcheck_step, "Central difference step");

    auto* params = app.add_subcommand("params", "Trainable parameter counts by module");
    params->add_option("--checkpoint", st.checkpoint, "Count records of a checkpoint instead");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        st.cfg.validate();
        // synth honors the master --seed unless its own seed was given
        if (app.got_subcommand(synth) && synth_seed->count() == 0) st.synth.seed = st.cfg.seed;
        std::printf("config digest %s\n", st.cfg.digest().c_str());
        const bool f64 = st.cfg.precision == "f64";
        if (app.got_subcommand(train)) return f64 ? do_train<double>(st) : do_train<float>(st);
        if (app.got_subcommand(eval)) return f64 ? do_eval<double>(st) : do_eval<float>(st);
        if (app.got_subcommand(ablate)) return f64 ? do_ablate<double>(st) : do_ablate<float>(st);
        if (app.got_subcommand(synth)) return do_synth(st);
        if (app.got_subcommand(gradcheck)) return do_gradcheck(st);
        if (app.got_subcommand(params)) return do_params(st);
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
