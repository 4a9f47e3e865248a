// xdiff: crosscoder model-diffing pipeline on synthetic paired-activation worlds.
//
// Subcommands: generate, train, diff, scale, patch, report, all.
// Exit codes: 0 success, 2 usage, 3 numeric failure, 4 I/O.

#include "xdiff/io.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

namespace fs = std::filesystem;
using namespace xdiff;

namespace {

struct CommonArgs {
    std::string config_path;
    std::string weights_path;
    std::string output_dir;
    std::vector<std::string> overrides;
    std::optional<std::uint64_t> seed;
};

KeyValueMap resolve_config(const CommonArgs& args) {
    KeyValueMap kv = load_key_values(args.config_path);
    apply_overrides(kv, args.overrides);
    if (args.seed) kv["seed"] = std::to_string(*args.seed);
    return kv;
}

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory: " + dir);
}

fs::path out_path(const CommonArgs& args, const char* name) {
    return fs::path(args.output_dir) / name;
}

std::vector<PairedActivationBatch> eval_batches(const PlantedWorld& world, const KeyValueMap& kv) {
    int n_batches = 16;
    int batch_size = 256;
    if (auto it = kv.find("eval_batches"); it != kv.end()) n_batches = std::stoi(it->second);
    if (auto it = kv.find("eval_batch_size"); it != kv.end()) batch_size = std::stoi(it->second);
    return held_out_batches(world, n_batches, batch_size);
}

std::vector<PairedActivationBatch> train_side_batches(const PlantedWorld& world,
                                                      const KeyValueMap& kv) {
    int n_batches = 4;
    int batch_size = 256;
    if (auto it = kv.find("eval_batches"); it != kv.end()) n_batches = std::stoi(it->second);
    if (auto it = kv.find("eval_batch_size"); it != kv.end()) batch_size = std::stoi(it->second);
    std::vector<PairedActivationBatch> batches;
    for (int i = 0; i < n_batches; ++i)
        batches.push_back(sample_batch(world, batch_size, static_cast<std::uint64_t>(i)));
    return batches;
}

void run_generate(const CommonArgs& args, int n, std::uint64_t stream,
                  const std::string& out_file) {
    const KeyValueMap kv = resolve_config(args);
    const PlantedWorld world = generate_world(world_config_from_kv(kv));
    const PairedActivationBatch batch = sample_batch(world, n, stream);
    save_batch(out_file, batch);
    write_manifest(out_file + ".manifest.json", kv, world.seed);
    std::cout << "wrote " << out_file << " (" << n << " x " << world.d << ")\n";
}

CrosscoderParams run_train(const CommonArgs& args) {
    const KeyValueMap kv = resolve_config(args);
    const PlantedWorld world = generate_world(world_config_from_kv(kv));
    const TrainConfig cfg = train_config_from_kv(kv);
    auto [params, stats] = train(world, cfg);
    ensure_dir(args.output_dir);
    save_params(out_path(args, "weights.bin").string(), params);
    write_train_stats_csv(out_path(args, "train_stats.csv").string(), stats);
    write_manifest(out_path(args, "manifest.json").string(), kv, world.seed);
    std::cout << "trained " << (cfg.variant.kind == VariantKind::L1 ? "l1" : "batchtopk")
              << " crosscoder: fve_total=" << format_float(stats.fve_total)
              << " l0=" << format_float(stats.l0_mean)
              << " dead=" << format_float(stats.dead_fraction) << "\n";
    return params;
}

struct Analyses {
    std::vector<LatentClassification> classes;
    std::vector<TwinPair> twins;
    std::vector<BetaQuadruple> scaling;
    std::vector<PatchResult> patches;
};

Analyses run_analyses(const PlantedWorld& world, const CrosscoderParams& params,
                      const KeyValueMap& kv, bool with_patch) {
    Analyses a;
    const auto train_b = train_side_batches(world, kv);
    const auto val_b = eval_batches(world, kv);

    a.classes = classify_with_freq(params, val_b);
    a.twins = twin_pairs(params, a.classes);
    for (auto& t : a.twins) {
        const auto div = activation_divergence(params, t.chat_latent, t.base_latent, train_b, val_b);
        t.divergence = div.value_or(-1.0);
    }

    std::vector<int> alive;
    for (const auto& c : a.classes)
        if (c.cls != LatentClass::Dead) alive.push_back(c.latent);
    a.scaling = latent_scaling_report(params, val_b, alive);

    if (with_patch) {
        std::vector<PatchSpec> specs = {PatchSpec::none(), PatchSpec::all(), PatchSpec::error(),
                                        PatchSpec::template_tokens()};
        const std::vector<int> ranked = latents_by_delta_norm(params);
        if (ranked.size() >= 2) {
            const std::size_t half = ranked.size() / 2;
            specs.push_back(PatchSpec::latent_set(
                std::vector<int>(ranked.begin(), ranked.begin() + half), "best_half_delta_norm"));
            specs.push_back(PatchSpec::latent_set(std::vector<int>(ranked.begin() + half, ranked.end()),
                                                  "worst_half_delta_norm"));
        }
        const std::vector<int> by_nu = rank_by_nu_sum(a.scaling);
        if (by_nu.size() >= 2) {
            const std::size_t half = by_nu.size() / 2;
            specs.push_back(PatchSpec::latent_set(std::vector<int>(by_nu.begin(), by_nu.begin() + half),
                                                  "best_half_nu"));
            specs.push_back(
                PatchSpec::latent_set(std::vector<int>(by_nu.begin() + half, by_nu.end()),
                                      "worst_half_nu"));
        }
        a.patches = run_patch_experiment(world, params, val_b, specs);
    }
    return a;
}

int dispatch(const std::string& cmd, const CommonArgs& args, int gen_n, std::uint64_t gen_stream,
             const std::string& gen_out) {
    if (cmd == "generate") {
        run_generate(args, gen_n, gen_stream, gen_out);
        return 0;
    }
    if (cmd == "train") {
        run_train(args);
        return 0;
    }

    const KeyValueMap kv = resolve_config(args);
    const PlantedWorld world = generate_world(world_config_from_kv(kv));
    CrosscoderParams params;
    if (cmd == "all") {
        CommonArgs train_args = args;
        params = run_train(train_args);
    } else {
        if (args.weights_path.empty())
            throw ConfigError("this subcommand requires --weights (or use 'all')");
        params = load_params(args.weights_path);
    }
    ensure_dir(args.output_dir);

    if (cmd == "diff") {
        Analyses a = run_analyses(world, params, kv, false);
        write_latents_csv(out_path(args, "latents.csv").string(), a.classes);
        write_twins_csv(out_path(args, "twins.csv").string(), a.twins);
    } else if (cmd == "scale") {
        Analyses a = run_analyses(world, params, kv, false);
        write_scaling_csv(out_path(args, "scaling.csv").string(), a.scaling);
    } else if (cmd == "patch") {
        Analyses a = run_analyses(world, params, kv, true);
        write_patch_csv(out_path(args, "patch.csv").string(), a.patches);
    } else if (cmd == "report" || cmd == "all") {
        Analyses a = run_analyses(world, params, kv, true);
        write_latents_csv(out_path(args, "latents.csv").string(), a.classes);
        write_twins_csv(out_path(args, "twins.csv").string(), a.twins);
        write_scaling_csv(out_path(args, "scaling.csv").string(), a.scaling);
        write_patch_csv(out_path(args, "patch.csv").string(), a.patches);
        write_delta_norm_histogram_csv(out_path(args, "hist_delta_norm.csv").string(), a.classes);
        write_nu_scatter_csv(out_path(args, "nu_scatter.csv").string(), a.scaling, a.classes);
    }
    write_manifest(out_path(args, "manifest.json").string(), kv, world.seed);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"crosscoder model diffing on synthetic paired-activation worlds"};
    app.require_subcommand(1);

    CommonArgs args;
    int gen_n = 1024;
    std::uint64_t gen_stream = 0;
    std::string gen_out = "batch.bin";

    // Flag overrides applied after the config file.
    std::optional<std::string> variant;
    std::optional<int> k, steps, batch_size, dict_size;
    std::optional<double> mu, lr;

    auto add_common = [&](CLI::App* sub, bool needs_weights, bool needs_out) {
        sub->add_option("--config", args.config_path, "world/train config file")->required();
        if (needs_weights) sub->add_option("--weights", args.weights_path, "XCODER01 weights file");
        if (needs_out) sub->add_option("--out", args.output_dir, "output directory")->required();
        sub->add_option("--seed", args.seed, "override the world seed");
        sub->add_option("--set", args.overrides, "config override key=value (repeatable)");
        sub->add_option("--variant", variant, "crosscoder variant: l1 or batchtopk");
        sub->add_option("--k", k, "BatchTopK k")->check(CLI::PositiveNumber);
        sub->add_option("--mu", mu, "L1 sparsity weight")->check(CLI::NonNegativeNumber);
        sub->add_option("--lr", lr, "learning rate")->check(CLI::PositiveNumber);
        sub->add_option("--steps", steps, "training steps")->check(CLI::PositiveNumber);
        sub->add_option("--batch-size", batch_size, "training batch size")
            ->check(CLI::PositiveNumber);
        sub->add_option("--dict-size", dict_size, "dictionary size D")->check(CLI::PositiveNumber);
    };

    CLI::App* c_generate = app.add_subcommand("generate", "sample a paired-activation batch");
    add_common(c_generate, false, false);
    c_generate->add_option("--n", gen_n, "number of samples")->check(CLI::PositiveNumber);
    c_generate->add_option("--stream", gen_stream, "batch stream index");
    c_generate->add_option("--out-file", gen_out, "output batch file");

    for (const char* name : {"train", "all"})
        add_common(app.add_subcommand(name, name == std::string("train")
                                                ? "train a crosscoder"
                                                : "train + full report pipeline"),
                   false, true);
    for (const char* name : {"diff", "scale", "patch", "report"})
        add_common(app.add_subcommand(
                       name, std::string("emit ") + name + " analysis CSVs from trained weights"),
                   true, true);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help
        app.exit(e);
        return 2;
    }

    try {
        const std::string cmd = app.get_subcommands().front()->get_name();
        if (variant) args.overrides.push_back("variant=" + *variant);
        if (k) args.overrides.push_back("k=" + std::to_string(*k));
        if (mu) args.overrides.push_back("mu=" + format_float(*mu));
        if (lr) args.overrides.push_back("lr=" + format_float(*lr));
        if (steps) args.overrides.push_back("steps=" + std::to_string(*steps));
        if (batch_size) args.overrides.push_back("batch_size=" + std::to_string(*batch_size));
        if (dict_size) args.overrides.push_back("dict_size=" + std::to_string(*dict_size));
        return dispatch(cmd, args, gen_n, gen_stream, gen_out);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    } catch (const FormatError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
}
