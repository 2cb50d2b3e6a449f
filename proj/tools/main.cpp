// Copyright (c) fetchlab contributors.
// SPDX-License-Identifier: Apache-2.0
//
// Command-line front door: decode listings, dump fetch batches, simulate
// traces, classify them, sweep the alignment heatmap, run the attack
// pipelines, and apply the alignment defense.
#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include "fetchlab/attacks.hpp"
#include "fetchlab/io.hpp"

namespace {

using fetchlab::io::json;

// Input problems exit 2; a pipeline that ran but failed its requirement
// exits 1.
struct InputError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct PipelineError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct CommonArgs {
    std::string config_path;
    std::vector<std::string> overrides;
    std::uint64_t seed = 1;
    std::string out;
    int runs = 0;  // 0: command default
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "JSON config file");
    cmd->add_option("--set", args.overrides,
                    "dotted-path config override, e.g. timing.delta=50");
    cmd->add_option("--seed", args.seed, "root seed for all randomness");
    cmd->add_option("--out", args.out, "output file (default: stdout)");
    cmd->add_option("--runs", args.runs, "number of runs");
}

json load_config(const CommonArgs& args) {
    json config = json::object();
    if (!args.config_path.empty()) {
        std::string text;
        try {
            text = fetchlab::io::read_file(args.config_path);
        } catch (const std::exception& e) {
            throw InputError(e.what());
        }
        config = json::parse(text, nullptr, false);
        if (config.is_discarded())
            throw InputError("config is not valid JSON: " + args.config_path);
    }
    for (const std::string& assignment : args.overrides) {
        try {
            fetchlab::io::apply_override(config, assignment);
        } catch (const std::exception& e) {
            throw InputError(e.what());
        }
    }
    return config;
}

fetchlab::timing::TimingParams timing_from(const json& config) {
    try {
        if (config.contains("timing"))
            return fetchlab::io::timing_params_from_json(config["timing"]);
        return fetchlab::timing::TimingParams{};
    } catch (const std::exception& e) {
        throw InputError(e.what());
    }
}

fetchlab::listing::Program load_listing(const std::string& path) {
    std::string text;
    try {
        text = fetchlab::io::read_file(path);
    } catch (const std::exception& e) {
        throw InputError(e.what());
    }
    try {
        fetchlab::listing::Program prog = fetchlab::listing::parse_listing(text);
        if (prog.instructions.empty())
            throw InputError(path + ": listing has no instructions");
        return prog;
    } catch (const fetchlab::listing::ParseError& e) {
        throw InputError(path + ": " + e.what());
    }
}

std::vector<int> parse_secret(const std::string& text) {
    std::vector<int> bits;
    for (char c : text) {
        if (c != '0' && c != '1') throw InputError("secret must be a string of 0/1");
        bits.push_back(c - '0');
    }
    if (bits.empty()) throw InputError("secret must not be empty");
    return bits;
}

void emit(const CommonArgs& args, const std::string& content) {
    if (args.out.empty()) {
        std::cout << content;
        return;
    }
    fetchlab::io::atomic_write_file(args.out, content);
}

std::string dump(const json& doc) { return doc.dump(2) + "\n"; }

template <typename T>
T cfg(const json& config, const char* section, const char* key, T fallback) {
    if (config.contains(section) && config[section].contains(key))
        return config[section][key].get<T>();
    return fallback;
}

// Step with the largest expected mode-surcharge difference between the two
// paths of the first branch pair, per the public timing model.
int auto_discriminator(const fetchlab::listing::Program& fused,
                       const fetchlab::timing::TimingParams& params) {
    namespace tl = fetchlab::listing;
    fetchlab::timing::Simulator sim(fused, params);
    std::vector<std::uint64_t> taken = tl::executed_path(fused, {1});
    std::vector<std::uint64_t> fall = tl::executed_path(fused, {0});
    std::size_t steps = std::min(taken.size(), fall.size());
    int best = static_cast<int>(steps) - 1;
    double best_gap = -1.0;
    for (std::size_t s = 0; s < steps; ++s) {
        if (taken[s] == fall[s]) continue;
        double gap = std::abs(sim.p_slow_at(taken[s]) * sim.delta_at(taken[s]) -
                              sim.p_slow_at(fall[s]) * sim.delta_at(fall[s]));
        if (gap > best_gap + 1e-12) {
            best_gap = gap;
            best = static_cast<int>(s);
        }
    }
    return best;
}

int cmd_decode(const std::string& listing_path, const CommonArgs& args) {
    fetchlab::listing::Program program = load_listing(listing_path);
    fetchlab::listing::Program fused = fetchlab::frontend::fuse(program);
    json doc;
    doc["program"] = fetchlab::io::program_to_json(program);
    doc["features"] = fetchlab::io::feature_table_to_json(fused);
    emit(args, dump(doc));
    return 0;
}

int cmd_batches(const std::string& listing_path, const std::string& secret,
                const CommonArgs& args) {
    fetchlab::listing::Program fused =
        fetchlab::frontend::fuse(load_listing(listing_path));
    std::vector<int> bits = parse_secret(secret);
    std::vector<std::uint64_t> path;
    try {
        path = fetchlab::listing::executed_path(fused, bits);
    } catch (const std::exception& e) {
        throw InputError(e.what());
    }
    emit(args, fetchlab::frontend::batches_to_csv(
                   fetchlab::frontend::step_batches(fused, path)));
    return 0;
}

int cmd_simulate(const std::string& listing_path, const std::string& secret,
                 bool random_secrets, bool attack_mode, const CommonArgs& args) {
    json config = load_config(args);
    fetchlab::timing::TimingParams params = timing_from(config);
    fetchlab::listing::Program fused =
        fetchlab::frontend::fuse(load_listing(listing_path));
    std::vector<int> bits = parse_secret(secret);
    int runs = args.runs > 0 ? args.runs : 1;

    std::vector<std::vector<int>> secrets;
    secrets.reserve(static_cast<std::size_t>(runs));
    fetchlab::Rng secret_rng(fetchlab::mix_seed(args.seed, 0x73656372ULL));
    for (int r = 0; r < runs; ++r) {
        std::vector<int> s = bits;
        if (random_secrets)
            for (int& b : s) b = secret_rng.bernoulli(0.5) ? 1 : 0;
        secrets.push_back(std::move(s));
    }
    std::vector<fetchlab::timing::Run> batch =
        fetchlab::timing::simulate_runs(fused, secrets, params, args.seed);
    emit(args, fetchlab::io::runs_to_csv(batch, fused, attack_mode));
    return 0;
}

int cmd_analyze(const std::string& listing_path, int step, const CommonArgs& args) {
    json config = load_config(args);
    fetchlab::timing::TimingParams params = timing_from(config);
    fetchlab::listing::Program fused =
        fetchlab::frontend::fuse(load_listing(listing_path));
    if (fused.branch_pairs.empty())
        throw InputError("program has no branch pair to analyze");
    int runs = args.runs > 0 ? args.runs : 1000;
    if (step < 0) step = auto_discriminator(fused, params);

    std::vector<std::vector<int>> secrets;
    secrets.reserve(static_cast<std::size_t>(runs));
    fetchlab::Rng secret_rng(fetchlab::mix_seed(args.seed, 0x73656372ULL));
    for (int r = 0; r < runs; ++r)
        secrets.push_back({secret_rng.bernoulli(0.5) ? 1 : 0});
    std::vector<fetchlab::timing::Run> batch =
        fetchlab::timing::simulate_runs(fused, secrets, params, args.seed);

    fetchlab::attacks::ExtractResult res =
        fetchlab::attacks::extract_branch_secret(fused, params, batch, step);
    json doc;
    doc["runs"] = runs;
    doc["discriminator_step"] = step;
    doc["threshold"] = res.threshold;
    doc["polarity"] = res.polarity;
    doc["accuracy"] = res.accuracy;
    emit(args, dump(doc));
    return 0;
}

int cmd_heatmap(const std::string& matrix_path, const CommonArgs& args) {
    json config = load_config(args);
    fetchlab::stats::HeatmapConfig hc;
    hc.timing = timing_from(config);
    hc.reps = cfg(config, "heatmap", "reps", hc.reps);
    hc.add_len = cfg(config, "heatmap", "add_len", hc.add_len);
    hc.mov_len = cfg(config, "heatmap", "mov_len", hc.mov_len);
    hc.runs_per_cell = cfg(config, "heatmap", "runs_per_cell", hc.runs_per_cell);
    hc.discriminator_step =
        cfg(config, "heatmap", "discriminator_step", hc.discriminator_step);
    hc.threads = cfg(config, "heatmap", "threads", hc.threads);
    if (args.runs > 0) hc.runs_per_cell = args.runs;
    hc.base_seed = args.seed;

    std::vector<fetchlab::stats::HeatmapCell> cells = fetchlab::stats::heatmap_sweep(hc);
    emit(args, fetchlab::stats::heatmap_to_csv(cells));
    std::string matrix = matrix_path;
    if (matrix.empty() && !args.out.empty()) matrix = args.out + ".matrix";
    if (!matrix.empty())
        fetchlab::io::atomic_write_file(matrix, fetchlab::stats::heatmap_to_matrix(cells));
    return 0;
}

int cmd_attack(const std::string& pipeline, double require_success,
               const CommonArgs& args) {
    namespace att = fetchlab::attacks;
    json config = load_config(args);
    fetchlab::timing::TimingParams params = timing_from(config);
    json doc;
    double achieved = 0.0;

    if (pipeline == "branch") {
        // Default to a strong cell: the if-side mov lands on a mostly-fast
        // offset, the else-side mov on a mostly-slow one.
        int x = cfg(config, "branch", "x", 6);
        int y = cfg(config, "branch", "y", 2);
        int reps = cfg(config, "branch", "reps", 25);
        int step = cfg(config, "branch", "discriminator_step", 10);
        int runs = args.runs > 0 ? args.runs : 1000;
        fetchlab::listing::Program fused = fetchlab::frontend::fuse(
            fetchlab::listing::template_branch_program(x, y, reps));
        std::vector<std::vector<int>> secrets;
        fetchlab::Rng secret_rng(fetchlab::mix_seed(args.seed, 0x73656372ULL));
        for (int r = 0; r < runs; ++r)
            secrets.push_back({secret_rng.bernoulli(0.5) ? 1 : 0});
        std::vector<fetchlab::timing::Run> batch =
            fetchlab::timing::simulate_runs(fused, secrets, params, args.seed);
        att::ExtractResult res = att::extract_branch_secret(fused, params, batch, step);
        doc["pipeline"] = "branch";
        doc["x"] = x;
        doc["y"] = y;
        doc["runs"] = runs;
        doc["discriminator_step"] = step;
        doc["accuracy"] = res.accuracy;
        doc["threshold"] = res.threshold;
        doc["polarity"] = res.polarity;
        achieved = res.accuracy;
    } else if (pipeline == "cmpbn") {
        att::CmpBnParams cp;
        cp.calibration_samples =
            cfg(config, "cmpbn", "calibration_samples", cp.calibration_samples);
        cp.fp_target = cfg(config, "cmpbn", "fp_target", cp.fp_target);
        cp.runs_per_bit = cfg(config, "cmpbn", "runs_per_bit", cp.runs_per_bit);
        cp.bigger_slow_weight =
            cfg(config, "cmpbn", "bigger_slow_weight", cp.bigger_slow_weight);
        int bits = args.runs > 0 ? args.runs : cfg(config, "cmpbn", "bits", 1000);
        std::vector<int> secret(static_cast<std::size_t>(bits));
        fetchlab::Rng secret_rng(fetchlab::mix_seed(args.seed, 0x73656372ULL));
        for (int& b : secret) b = secret_rng.bernoulli(0.5) ? 1 : 0;
        att::CmpBnResult res = att::cmp_bn_pipeline(secret, cp, args.seed);
        doc["pipeline"] = "cmpbn";
        doc["bits"] = bits;
        doc["recovered_fraction"] = res.recovered_fraction;
        doc["claim_accuracy"] = res.claim_accuracy;
        doc["false_positive_rate"] = res.false_positive_rate;
        doc["threshold"] = res.threshold;
        doc["fitted_smaller_mu"] = res.fitted_smaller_mu;
        doc["bigger_fit"] = {{"mu_fast", res.bigger_fit.mu_fast},
                             {"mu_slow", res.bigger_fit.mu_slow},
                             {"weight_slow", res.bigger_fit.weight_slow}};
        achieved = res.recovered_fraction;
    } else if (pipeline == "montmul") {
        att::MontmulConfig mc;
        mc.timing = params;
        mc.seed = args.seed;
        mc.calls = args.runs > 0 ? args.runs : cfg(config, "montmul", "calls", mc.calls);
        mc.repetitions = cfg(config, "montmul", "repetitions", mc.repetitions);
        mc.loop_len = cfg(config, "montmul", "loop_len", mc.loop_len);
        mc.reference_samples =
            cfg(config, "montmul", "reference_samples", mc.reference_samples);
        mc.alpha = cfg(config, "montmul", "alpha", mc.alpha);
        mc.real_offset = cfg(config, "montmul", "real_offset", mc.real_offset);
        mc.dummy_offset = cfg(config, "montmul", "dummy_offset", mc.dummy_offset);
        att::MontmulResult res = att::montmul_pipeline(mc);
        doc["pipeline"] = "montmul";
        doc["calls"] = mc.calls;
        doc["decided"] = res.decided;
        doc["correct"] = res.correct;
        doc["decided_fraction"] = res.decided_fraction;
        doc["decided_accuracy"] = res.decided_accuracy;
        achieved = res.decided_accuracy;
    } else if (pipeline == "rsa") {
        att::RsaAttackConfig rc;
        rc.timing = params;
        rc.seed = args.seed;
        rc.keys = args.runs > 0 ? args.runs : cfg(config, "rsa", "keys", rc.keys);
        rc.prime_bits = cfg(config, "rsa", "prime_bits", rc.prime_bits);
        rc.e = att::BigInt(cfg(config, "rsa", "e", 65537));
        rc.unclassified_mean_fraction = cfg(config, "rsa", "unclassified_mean_fraction",
                                            rc.unclassified_mean_fraction);
        rc.branch_samples = cfg(config, "rsa", "branch_samples", rc.branch_samples);
        std::string model = cfg<std::string>(config, "rsa", "model", "reliable");
        if (model == "reliable")
            rc.model = att::UnclassificationModel::reliable;
        else if (model == "suffix_weighted")
            rc.model = att::UnclassificationModel::suffix_weighted;
        else if (model == "simulated")
            rc.model = att::UnclassificationModel::simulated;
        else
            throw InputError("unknown rsa model " + model);
        att::RsaAttackReport report = att::rsa_attack_end_to_end(rc);
        doc["pipeline"] = "rsa";
        doc["keys"] = rc.keys;
        doc["model"] = model;
        doc["success_fraction"] = report.success_fraction;
        doc["mean_unclassified"] = report.mean_unclassified;
        doc["median_unclassified"] = report.median_unclassified;
        doc["mean_iterations"] = report.mean_iterations;
        doc["runs"] = json::array();
        for (const att::RsaRunReport& rr : report.runs)
            doc["runs"].push_back({{"success", rr.success},
                                   {"iterations", rr.iterations},
                                   {"unclassified", rr.unclassified},
                                   {"flips_used", rr.flips_used}});
        achieved = report.success_fraction;
    } else {
        throw InputError("unknown pipeline " + pipeline +
                         " (expected branch|cmpbn|montmul|rsa)");
    }

    emit(args, dump(doc));
    if (achieved < require_success)
        throw PipelineError(pipeline + " achieved " + std::to_string(achieved) +
                            ", required " + std::to_string(require_success));
    return 0;
}

int cmd_defend(const std::string& listing_path, int target_offset,
               const std::string& report_path, const CommonArgs& args) {
    json config = load_config(args);
    fetchlab::timing::TimingParams params = timing_from(config);
    fetchlab::listing::Program program = load_listing(listing_path);
    if (target_offset < 0 || target_offset > 15)
        throw InputError("target offset must be in 0..15");
    int runs = args.runs > 0 ? args.runs : 1000;

    fetchlab::defense::AlignedProgram aligned =
        fetchlab::defense::align_branch_targets(program, target_offset);
    double control = fetchlab::defense::verify_defense(program, params, runs, args.seed);
    double defended =
        fetchlab::defense::verify_defense(aligned.program, params, runs, args.seed);

    json doc;
    doc["patch"] = fetchlab::io::patch_to_json(aligned.patch);
    doc["control_success"] = control;
    doc["aligned_success"] = defended;
    if (!args.out.empty())
        fetchlab::io::atomic_write_file(args.out,
                                        fetchlab::listing::emit_listing(aligned.program));
    if (report_path.empty()) {
        std::cout << dump(doc);
    } else {
        fetchlab::io::atomic_write_file(report_path, dump(doc));
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"fetch-window side-channel laboratory"};
    app.require_subcommand(1);

    CommonArgs args;
    std::string listing_path, secret = "0", pipeline, matrix_path, report_path;
    bool random_secrets = false, attack_mode = false;
    int step = -1, target_offset = 0;
    double require_success = 0.0;

    CLI::App* decode = app.add_subcommand("decode", "parse a listing, dump layout");
    decode->add_option("listing", listing_path, "listing file")->required();
    add_common(decode, args);

    CLI::App* batches = app.add_subcommand("batches", "fetch batches along a path");
    batches->add_option("listing", listing_path, "listing file")->required();
    batches->add_option("--secret", secret, "branch secret bits (default 0)");
    add_common(batches, args);

    CLI::App* simulate = app.add_subcommand("simulate", "emit a latency trace CSV");
    simulate->add_option("listing", listing_path, "listing file")->required();
    simulate->add_option("--secret", secret, "branch secret bits (default 0)");
    simulate->add_flag("--random-secrets", random_secrets,
                       "draw per-run secrets from the seed");
    simulate->add_flag("--attack-mode", attack_mode,
                       "blank addresses of branch-path steps");
    add_common(simulate, args);

    CLI::App* analyze = app.add_subcommand("analyze", "simulate and classify one branch");
    analyze->add_option("listing", listing_path, "listing file")->required();
    analyze->add_option("--step", step, "discriminator step (default: auto)");
    add_common(analyze, args);

    CLI::App* heatmap = app.add_subcommand("heatmap", "alignment sweep over [0,31]^2");
    heatmap->add_option("--matrix", matrix_path, "matrix file (default: <out>.matrix)");
    add_common(heatmap, args);

    CLI::App* attack = app.add_subcommand("attack", "run an attack pipeline");
    attack->add_option("pipeline", pipeline, "branch|cmpbn|montmul|rsa")->required();
    attack->add_option("--require-success", require_success,
                       "exit 1 below this success fraction");
    add_common(attack, args);

    CLI::App* defend = app.add_subcommand("defend", "align branch targets and verify");
    defend->add_option("listing", listing_path, "listing file")->required();
    defend->add_option("--target-offset", target_offset, "alignment offset mod 16");
    defend->add_option("--report", report_path, "patch report file (default: stdout)");
    add_common(defend, args);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (decode->parsed()) return cmd_decode(listing_path, args);
        if (batches->parsed()) return cmd_batches(listing_path, secret, args);
        if (simulate->parsed())
            return cmd_simulate(listing_path, secret, random_secrets, attack_mode, args);
        if (analyze->parsed()) return cmd_analyze(listing_path, step, args);
        if (heatmap->parsed()) return cmd_heatmap(matrix_path, args);
        if (attack->parsed()) return cmd_attack(pipeline, require_success, args);
        if (defend->parsed()) return cmd_defend(listing_path, target_offset, report_path, args);
    } catch (const InputError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const PipelineError& e) {
        std::cerr << "pipeline failed: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
