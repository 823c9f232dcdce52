// Command-line front end: scene generation, the two training stages,
// evaluation, conflict diagnostics, and strategy comparison, all driven by a
// JSON config file with flag overrides (flags win).

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cooplearn/pipeline.hpp"

namespace {

struct Overrides {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> balance;  // "N,M"
    std::optional<std::string> strategy;
    std::optional<std::string> out_dir;
    std::optional<std::string> scenes;
    std::optional<std::string> ckpt;
};

coop::RunConfig effective_config(const Overrides& ov) {
    coop::RunConfig cfg;
    if (!ov.config_path.empty()) cfg = coop::load_run_config(ov.config_path);
    if (ov.seed) cfg.seed = *ov.seed;
    if (ov.strategy) cfg.strategy = coop::strategy_from_string(*ov.strategy);
    if (ov.balance) {
        const auto comma = ov.balance->find(',');
        if (comma == std::string::npos)
            throw std::invalid_argument("--balance expects N,M");
        cfg.train.balance_enabled = true;
        cfg.train.schedule.free_steps = std::stoull(ov.balance->substr(0, comma));
        cfg.train.schedule.balanced_steps = std::stoull(ov.balance->substr(comma + 1));
    }
    if (ov.out_dir) cfg.paths.out_dir = *ov.out_dir;
    if (ov.scenes) cfg.paths.scenes = *ov.scenes;
    if (ov.ckpt) cfg.paths.checkpoint_in = *ov.ckpt;

    // Relative outputs land in the output directory.
    namespace fs = std::filesystem;
    auto anchored = [&](std::string& path) {
        if (!path.empty() && fs::path(path).is_relative())
            path = (fs::path(cfg.paths.out_dir) / path).string();
    };
    if (cfg.paths.out_dir != ".") {
        fs::create_directories(cfg.paths.out_dir);
        anchored(cfg.paths.pretrain_checkpoint);
        anchored(cfg.paths.train_checkpoint);
        anchored(cfg.paths.report);
        anchored(cfg.paths.loss_trace);
        anchored(cfg.paths.step_log);
    }
    cfg.validate();
    return cfg;
}

std::vector<coop::Strategy> parse_strategies(const std::string& csv) {
    std::vector<coop::Strategy> out;
    std::size_t start = 0;
    while (start <= csv.size()) {
        const std::size_t comma = csv.find(',', start);
        const std::string tok =
            csv.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
        if (!tok.empty()) out.push_back(coop::strategy_from_string(tok));
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return out;
}

std::vector<std::uint64_t> parse_seeds(const std::string& csv) {
    std::vector<std::uint64_t> out;
    std::size_t start = 0;
    while (start <= csv.size()) {
        const std::size_t comma = csv.find(',', start);
        const std::string tok =
            csv.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
        if (!tok.empty()) out.push_back(std::stoull(tok));
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"cooplearn: cooperative perception + prediction training toolkit"};
    app.require_subcommand(1);

    Overrides ov;
    app.add_option("--config", ov.config_path, "JSON run config");
    app.add_option("--seed", ov.seed, "master seed override");
    app.add_option("--balance", ov.balance,
                   "N,M hybrid schedule; 0,1 balances every step; omit for free training");
    app.add_option("--strategy", ov.strategy, "one-time | pretrain-only | turbotrain");
    app.add_option("--out", ov.out_dir, "output directory");
    app.add_option("--scenes", ov.scenes, "scene directory override");
    app.add_option("--ckpt", ov.ckpt, "input checkpoint override");

    std::size_t gen_count = 8;
    std::string gen_out;
    auto* gen = app.add_subcommand("gen", "generate synthetic scenes + manifest");
    gen->add_option("--count", gen_count, "number of scenes");
    gen->add_option("--gen-out", gen_out, "scene output directory (defaults to paths.scenes)");

    auto* pretrain = app.add_subcommand("pretrain", "masked reconstruction pretraining");
    auto* train = app.add_subcommand("train", "supervised multi-task training");
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on held-out scenes");

    std::size_t diag_steps = 10;
    auto* diagnose = app.add_subcommand("diagnose", "trace gradient conflicts, no updates");
    diagnose->add_option("--steps", diag_steps, "steps to trace");

    std::string cmp_strategies = "one-time,turbotrain";
    std::string cmp_seeds = "1,2,3";
    std::size_t cmp_train_scenes = 64, cmp_eval_scenes = 16;
    double cmp_fraction = 1.0;
    auto* compare = app.add_subcommand("compare", "run strategies x seeds and summarize");
    compare->add_option("--strategies", cmp_strategies, "comma-separated strategy list");
    compare->add_option("--seeds", cmp_seeds, "comma-separated seed list");
    compare->add_option("--train-scenes", cmp_train_scenes, "train scenes per seed");
    compare->add_option("--eval-scenes", cmp_eval_scenes, "held-out scenes per seed");
    compare->add_option("--train-fraction", cmp_fraction, "fine-tune on this fraction");

    CLI11_PARSE(app, argc, argv);

    try {
        coop::RunConfig cfg = effective_config(ov);
        if (gen->parsed()) {
            const std::string dir = gen_out.empty() ? cfg.paths.scenes : gen_out;
            coop::GenResult r = coop::cmd_gen(cfg, gen_count, dir, &std::cerr);
            std::cout << "wrote " << r.files.size() << " scenes + " << r.manifest << "\n";
        } else if (pretrain->parsed()) {
            coop::PretrainResult r = coop::cmd_pretrain(cfg, &std::cerr);
            std::cout << "pretrain done: checkpoint " << cfg.paths.pretrain_checkpoint
                      << ", final rec " << r.trace.back().mean_rec << ", occ "
                      << r.trace.back().mean_occ << "\n";
        } else if (train->parsed()) {
            coop::TrainResult r = coop::cmd_train(cfg, &std::cerr);
            std::cout << "train done: checkpoint " << cfg.paths.train_checkpoint << ", "
                      << r.log.size() << " steps logged to " << cfg.paths.step_log << "\n";
        } else if (eval->parsed()) {
            coop::MetricsReport r = coop::cmd_eval(cfg, &std::cerr);
            std::cout << "eval done: ap " << r.ap << ", epa " << r.epa << ", report "
                      << cfg.paths.report << "\n";
        } else if (diagnose->parsed()) {
            auto rows = coop::cmd_diagnose(cfg, diag_steps, &std::cerr);
            std::cout << "diagnose done: " << rows.size() << " rows in " << cfg.paths.step_log
                      << "\n";
        } else if (compare->parsed()) {
            coop::CompareOptions opts;
            opts.strategies = parse_strategies(cmp_strategies);
            opts.seeds = parse_seeds(cmp_seeds);
            opts.train_scene_count = cmp_train_scenes;
            opts.eval_scene_count = cmp_eval_scenes;
            opts.train_fraction = cmp_fraction;
            coop::PretrainCache cache;
            auto legs = coop::run_compare_legs(cfg, opts, &cache, &std::cerr);
            auto summary = coop::summarize_compare(legs);
            const std::string path =
                (std::filesystem::path(cfg.paths.out_dir) / "comparison.csv").string();
            coop::write_compare_csv(path, cfg, legs, summary);
            for (const auto& s : summary)
                std::cout << coop::strategy_name(s.strategy) << ": epa " << s.epa_mean << " ± "
                          << s.epa_std << " (ap " << s.ap_mean << " ± " << s.ap_std << ", "
                          << s.legs << " legs)\n";
            std::cout << "comparison written to " << path << "\n";
            for (const auto& leg : legs)
                if (!leg.error.empty()) return 1;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
