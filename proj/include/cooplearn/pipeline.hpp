#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cooplearn/balance.hpp"
#include "cooplearn/checkpoint.hpp"
#include "cooplearn/config.hpp"
#include "cooplearn/metrics.hpp"
#include "cooplearn/model.hpp"
#include "cooplearn/pretrain.hpp"

namespace coop {

namespace fs = std::filesystem;

inline std::string config_echo_line(const RunConfig& cfg) {
    return "# config: " + run_config_to_json(cfg).dump();
}

inline std::string fmt_g17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

// ---------------------------------------------------------------------------
// Scene directories

inline std::vector<Scene> load_scene_dir(const std::string& dir) {
    if (!fs::is_directory(dir))
        throw std::runtime_error("scenes: directory '" + dir + "' does not exist");
    std::vector<std::string> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.is_regular_file() && entry.path().extension() == ".scn")
            files.push_back(entry.path().string());
    }
    std::sort(files.begin(), files.end());
    if (files.empty())
        throw std::runtime_error("scenes: no .scn files in '" + dir + "'");
    std::vector<Scene> scenes;
    scenes.reserve(files.size());
    for (const auto& f : files) scenes.push_back(read_scene(f));
    return scenes;
}

// count scenes with per-scene seeds derived from the master seed; eval scenes
// use a disjoint derivation stream.
inline std::vector<Scene> generate_scene_set(const ScenarioConfig& base, std::uint64_t master_seed,
                                             std::size_t count, bool eval_set = false) {
    std::vector<Scene> scenes;
    scenes.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        ScenarioConfig cfg = base;
        const std::uint64_t stream = eval_set ? 0x45564100ULL + i : i;
        Rng seeder = Rng::derive(master_seed, stream);
        cfg.seed = seeder.next_u64();
        const std::string id = (eval_set ? "eval_" : "train_") + std::to_string(i);
        scenes.push_back(generate_scene(cfg, id));
    }
    return scenes;
}

struct GenResult {
    std::vector<std::string> files;
    std::string manifest;
};

inline GenResult cmd_gen(const RunConfig& cfg, std::size_t count, const std::string& out_dir,
                         std::ostream* log = nullptr) {
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (!fs::is_directory(out_dir))
        throw std::runtime_error("gen: cannot create output directory '" + out_dir + "'");
    GenResult result;
    std::ostringstream manifest;
    manifest << config_echo_line(cfg) << "\n";
    manifest << "# scene_id seed\n";
    if (count == 0 && log) *log << "gen: count is 0, writing manifest only\n";
    for (std::size_t i = 0; i < count; ++i) {
        ScenarioConfig sc = cfg.scenario;
        Rng seeder = Rng::derive(cfg.seed, i);
        sc.seed = seeder.next_u64();
        const std::string id = "scene_" + std::to_string(i);
        Scene scene = generate_scene(sc, id);
        char name[32];
        std::snprintf(name, sizeof(name), "scene_%04zu.scn", i);
        const std::string path = (fs::path(out_dir) / name).string();
        write_scene(path, scene);
        result.files.push_back(path);
        manifest << id << " " << sc.seed << "\n";
    }
    result.manifest = (fs::path(out_dir) / "manifest.txt").string();
    std::ofstream mf(result.manifest, std::ios::trunc);
    if (!mf) throw std::runtime_error("gen: cannot write manifest '" + result.manifest + "'");
    mf << manifest.str();
    return result;
}

// ---------------------------------------------------------------------------
// Checkpoint assembly

inline ParamStore merge_stores(const std::vector<const ParamStore*>& stores) {
    ParamStore merged;
    for (const ParamStore* s : stores)
        for (std::size_t i = 0; i < s->count(); ++i)
            merged.add(s->names()[i], s->value(i));
    return merged;
}

// Fills a freshly shaped store from a loaded checkpoint by name.
inline void fill_from_checkpoint(ParamStore& dst, const ParamStore& loaded,
                                 const std::string& what) {
    for (const auto& name : dst.names()) {
        const NumArray* v = loaded.find(name);
        if (!v)
            throw std::runtime_error("checkpoint: missing " + what + " parameter '" + name + "'");
        if (v->shape() != dst.at(name).shape())
            throw std::runtime_error("checkpoint: shape mismatch for '" + name + "'");
        dst.at(name) = *v;
    }
}

// ---------------------------------------------------------------------------
// Stage runners

inline void write_loss_trace(const std::string& path, const RunConfig& cfg,
                             const std::vector<PretrainEpochStats>& trace) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("pretrain: cannot write loss trace '" + path + "'");
    out << config_echo_line(cfg) << "\n";
    out << "epoch,mean_rec,mean_occ\n";
    for (std::size_t e = 0; e < trace.size(); ++e)
        out << e << "," << fmt_g17(trace[e].mean_rec) << "," << fmt_g17(trace[e].mean_occ)
            << "\n";
}

inline PretrainResult cmd_pretrain(const RunConfig& cfg, std::ostream* log = nullptr) {
    cfg.validate();
    std::vector<Scene> scenes = load_scene_dir(cfg.paths.scenes);
    PretrainConfig pcfg = cfg.pretrain;
    pcfg.seed = cfg.seed;
    PretrainResult result = pretrain_run(scenes, cfg.voxel, cfg.model, pcfg, log);
    // Decoders are dropped; only the shared trunk flows to the train stage.
    save_checkpoint(cfg.paths.pretrain_checkpoint, result.trunk);
    {
        std::ofstream echo(cfg.paths.pretrain_checkpoint + ".config.json", std::ios::trunc);
        echo << run_config_to_json(cfg).dump(2) << "\n";
    }
    write_loss_trace(cfg.paths.loss_trace, cfg, result.trace);
    return result;
}

inline void write_step_log(const std::string& path, const RunConfig& cfg,
                           const std::vector<StepLogRow>& rows) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("train: cannot write step log '" + path + "'");
    out << config_echo_line(cfg) << "\n";
    out << "step,phase,delta,norm_det,norm_pred,cosine,loss_det,loss_pred\n";
    auto cell = [](double v) { return std::isfinite(v) ? fmt_g17(v) : std::string(); };
    for (const auto& r : rows)
        out << r.step << "," << r.phase << "," << cell(r.delta) << "," << cell(r.norm_det) << ","
            << cell(r.norm_pred) << "," << cell(r.cosine) << "," << fmt_g17(r.loss_det) << ","
            << fmt_g17(r.loss_pred) << "\n";
}

inline TrainResult cmd_train(const RunConfig& cfg, std::ostream* log = nullptr) {
    cfg.validate();
    std::vector<Scene> scenes = load_scene_dir(cfg.paths.scenes);
    TrainConfig tcfg = cfg.train;
    tcfg.seed = cfg.seed;

    std::optional<ParamStore> init_trunk;
    switch (cfg.strategy) {
        case Strategy::one_time:
            tcfg.balance_enabled = false;
            break;
        case Strategy::pretrain_only:
        case Strategy::turbotrain: {
            const std::string in = cfg.paths.checkpoint_in.empty()
                                       ? cfg.paths.pretrain_checkpoint
                                       : cfg.paths.checkpoint_in;
            if (in.empty() || !fs::exists(in))
                throw std::runtime_error(std::string("train: strategy ") +
                                         strategy_name(cfg.strategy) +
                                         " requires a pretrain checkpoint, none at '" + in +
                                         "'");
            ParamStore loaded = load_checkpoint(in);
            Rng shape_rng(0);
            ParamStore shaped = make_trunk_params(cfg.model, shape_rng);
            fill_from_checkpoint(shaped, loaded, "trunk");
            init_trunk = std::move(shaped);
            if (cfg.strategy == Strategy::pretrain_only) tcfg.balance_enabled = false;
            break;
        }
    }
    if (log)
        *log << "train: strategy " << strategy_name(cfg.strategy) << ", balance "
             << (tcfg.balance_enabled ? "on" : "off") << "\n";

    TrainResult result = train_run(scenes, cfg.voxel, cfg.model, tcfg,
                                   init_trunk ? &*init_trunk : nullptr);
    ParamStore merged =
        merge_stores({&result.trunk, &result.det_head, &result.pred_head});
    save_checkpoint(cfg.paths.train_checkpoint, merged);
    {
        std::ofstream echo(cfg.paths.train_checkpoint + ".config.json", std::ios::trunc);
        echo << run_config_to_json(cfg).dump(2) << "\n";
    }
    write_step_log(cfg.paths.step_log, cfg, result.log);
    return result;
}

inline MetricsReport evaluate_model(const ParamStore& trunk, const ParamStore& det,
                                    const ParamStore& pred, const std::vector<Scene>& scenes,
                                    const VoxelSpec& spec, const ModelConfig& mcfg) {
    std::vector<EvalSceneFull> eval_scenes;
    eval_scenes.reserve(scenes.size());
    for (const Scene& scene : scenes) {
        if (scene.t_fut != mcfg.waypoints)
            throw std::runtime_error("eval: scene horizon " + std::to_string(scene.t_fut) +
                                     " != model horizon " + std::to_string(mcfg.waypoints));
        EvalSceneFull es;
        es.dets = forward_e2e(scene, trunk, det, pred, spec, mcfg).detections;
        for (const auto& ob : scene.objects) {
            const ObjectState& s = ob.state;
            if (s.cx < spec.x_min || s.cx >= spec.x_max || s.cy < spec.y_min ||
                s.cy >= spec.y_max)
                continue;
            es.gt_boxes.push_back({s.cx, s.cy, s.length, s.width, s.yaw, 1.0});
            es.gt_futures.push_back(ob.future);
        }
        eval_scenes.push_back(std::move(es));
    }
    return evaluate(eval_scenes, mcfg.nms_iou);
}

inline json report_to_json(const MetricsReport& r) {
    json j;
    j["ap"] = r.ap;
    j["ade"] = r.ade ? json(*r.ade) : json(nullptr);
    j["fde"] = r.fde ? json(*r.fde) : json(nullptr);
    j["mr"] = r.mr ? json(*r.mr) : json(nullptr);
    j["epa"] = r.epa;
    j["counts"] = {
        {"n_gt", r.n_gt}, {"n_tp", r.n_tp}, {"n_fp", r.n_fp}, {"matched_hits", r.hits}};
    return j;
}

inline void write_report(const std::string& json_path, const RunConfig& cfg,
                         const MetricsReport& r) {
    json j = report_to_json(r);
    j["config"] = run_config_to_json(cfg);
    std::ofstream out(json_path, std::ios::trunc);
    if (!out) throw std::runtime_error("eval: cannot write report '" + json_path + "'");
    out << j.dump(2) << "\n";

    const std::string csv_path =
        json_path.size() > 5 && json_path.substr(json_path.size() - 5) == ".json"
            ? json_path.substr(0, json_path.size() - 5) + ".csv"
            : json_path + ".csv";
    std::ofstream csv(csv_path, std::ios::trunc);
    csv << config_echo_line(cfg) << "\n";
    csv << "ap,ade,fde,mr,epa,n_gt,n_tp,n_fp,matched_hits\n";
    auto opt = [](const std::optional<double>& v) { return v ? fmt_g17(*v) : std::string(); };
    csv << fmt_g17(r.ap) << "," << opt(r.ade) << "," << opt(r.fde) << "," << opt(r.mr) << ","
        << fmt_g17(r.epa) << "," << r.n_gt << "," << r.n_tp << "," << r.n_fp << "," << r.hits
        << "\n";
}

inline MetricsReport cmd_eval(const RunConfig& cfg, std::ostream* log = nullptr) {
    cfg.validate();
    const std::string in = cfg.paths.checkpoint_in.empty() ? cfg.paths.train_checkpoint
                                                           : cfg.paths.checkpoint_in;
    ParamStore loaded = load_checkpoint(in);
    Rng shape_rng(0);
    ParamStore trunk = make_trunk_params(cfg.model, shape_rng);
    ParamStore det = make_det_head_params(cfg.model, shape_rng);
    ParamStore pred = make_pred_head_params(cfg.model, shape_rng);
    fill_from_checkpoint(trunk, loaded, "trunk");
    fill_from_checkpoint(det, loaded, "detection head");
    fill_from_checkpoint(pred, loaded, "prediction head");

    std::vector<Scene> scenes = load_scene_dir(cfg.paths.eval_scenes);
    MetricsReport report = evaluate_model(trunk, det, pred, scenes, cfg.voxel, cfg.model);
    write_report(cfg.paths.report, cfg, report);
    if (log)
        *log << "eval: ap " << report.ap << ", epa " << report.epa << " over " << scenes.size()
             << " scenes\n";
    return report;
}

inline std::vector<StepLogRow> cmd_diagnose(const RunConfig& cfg, std::size_t steps,
                                            std::ostream* log = nullptr) {
    cfg.validate();
    const std::string in = cfg.paths.checkpoint_in.empty() ? cfg.paths.train_checkpoint
                                                           : cfg.paths.checkpoint_in;
    ParamStore loaded = load_checkpoint(in);
    Rng shape_rng(cfg.seed);
    ParamStore trunk = make_trunk_params(cfg.model, shape_rng);
    ParamStore det = make_det_head_params(cfg.model, shape_rng);
    ParamStore pred = make_pred_head_params(cfg.model, shape_rng);
    fill_from_checkpoint(trunk, loaded, "trunk");
    // Heads may be absent from a pretrain checkpoint; fall back to random init.
    if (loaded.find("det.obj_w")) fill_from_checkpoint(det, loaded, "detection head");
    if (loaded.find("pred.w")) fill_from_checkpoint(pred, loaded, "prediction head");

    std::vector<Scene> scenes = load_scene_dir(cfg.paths.scenes);
    auto rows = diagnose_conflicts(trunk, det, pred, scenes, cfg.voxel, cfg.model, steps);
    write_step_log(cfg.paths.step_log, cfg, rows);
    if (log) *log << "diagnose: " << rows.size() << " steps traced\n";
    return rows;
}

// ---------------------------------------------------------------------------
// Strategy comparison

struct CompareLeg {
    Strategy strategy = Strategy::one_time;
    std::uint64_t seed = 0;
    std::optional<MetricsReport> report;
    std::string error;
};

struct CompareOptions {
    std::vector<Strategy> strategies;
    std::vector<std::uint64_t> seeds;
    std::size_t train_scene_count = 64;
    std::size_t eval_scene_count = 16;
    double train_fraction = 1.0;  // pretraining always uses the full train set
};

// Shared pretrained trunks per seed so pretrain-only and turbotrain legs of
// the same seed reuse one pretraining run.
using PretrainCache = std::map<std::uint64_t, ParamStore>;

// One gen->(pretrain)->train->eval leg. Pretraining always sees the full
// train set; train_subset carries the (possibly data-limited) fine-tuning set.
inline MetricsReport run_compare_leg(const RunConfig& base, Strategy strategy,
                                     std::uint64_t seed,
                                     const std::vector<Scene>& train_full,
                                     const std::vector<Scene>& train_subset,
                                     const std::vector<Scene>& eval_scenes,
                                     PretrainCache* cache = nullptr,
                                     std::ostream* log = nullptr) {
    const ParamStore* init_trunk = nullptr;
    ParamStore local_trunk;
    if (strategy != Strategy::one_time) {
        if (!cache || !cache->count(seed)) {
            PretrainConfig pcfg = base.pretrain;
            pcfg.seed = seed;
            if (log) *log << "  pretraining (seed " << seed << ")...\n";
            PretrainResult pr = pretrain_run(train_full, base.voxel, base.model, pcfg);
            if (cache)
                (*cache)[seed] = std::move(pr.trunk);
            else
                local_trunk = std::move(pr.trunk);
        }
        init_trunk = cache ? &cache->at(seed) : &local_trunk;
    }
    TrainConfig tcfg = base.train;
    tcfg.seed = seed;
    tcfg.balance_enabled = strategy == Strategy::turbotrain && base.train.balance_enabled;
    if (log)
        *log << "  training " << strategy_name(strategy) << " (seed " << seed << ", balance "
             << (tcfg.balance_enabled ? "on" : "off") << ")...\n";
    TrainResult tr = train_run(train_subset, base.voxel, base.model, tcfg, init_trunk);
    return evaluate_model(tr.trunk, tr.det_head, tr.pred_head, eval_scenes, base.voxel,
                          base.model);
}

inline std::vector<CompareLeg> run_compare_legs(const RunConfig& base,
                                                const CompareOptions& opts,
                                                PretrainCache* cache = nullptr,
                                                std::ostream* log = nullptr) {
    if (opts.strategies.size() < 2)
        throw std::invalid_argument("compare: need at least two strategies");
    if (opts.seeds.empty()) throw std::invalid_argument("compare: need at least one seed");

    std::vector<CompareLeg> legs;
    for (std::uint64_t seed : opts.seeds) {
        std::vector<Scene> train_scenes =
            generate_scene_set(base.scenario, seed, opts.train_scene_count, false);
        std::vector<Scene> eval_scenes =
            generate_scene_set(base.scenario, seed, opts.eval_scene_count, true);
        std::vector<Scene> train_subset = train_scenes;
        if (opts.train_fraction < 1.0) {
            const std::size_t keep = static_cast<std::size_t>(
                std::ceil(opts.train_fraction * static_cast<double>(train_scenes.size())));
            train_subset.assign(train_scenes.begin(),
                                train_scenes.begin() + std::max<std::size_t>(1, keep));
        }
        for (Strategy strategy : opts.strategies) {
            CompareLeg leg;
            leg.strategy = strategy;
            leg.seed = seed;
            if (log) *log << "compare leg: " << strategy_name(strategy) << " seed " << seed << "\n";
            try {
                leg.report = run_compare_leg(base, strategy, seed, train_scenes, train_subset,
                                             eval_scenes, cache, log);
            } catch (const std::exception& e) {
                leg.error = e.what();
                if (log) *log << "  leg failed: " << e.what() << "\n";
            }
            legs.push_back(std::move(leg));
        }
    }
    return legs;
}

struct StrategySummary {
    Strategy strategy = Strategy::one_time;
    std::size_t legs = 0;
    double ap_mean = 0.0, ap_std = 0.0;
    double epa_mean = 0.0, epa_std = 0.0;
};

inline std::vector<StrategySummary> summarize_compare(const std::vector<CompareLeg>& legs) {
    std::map<int, std::vector<const CompareLeg*>> grouped;
    for (const auto& leg : legs) grouped[static_cast<int>(leg.strategy)].push_back(&leg);
    std::vector<StrategySummary> out;
    for (const auto& [key, group] : grouped) {
        StrategySummary s;
        s.strategy = static_cast<Strategy>(key);
        std::vector<double> aps, epas;
        for (const CompareLeg* leg : group) {
            if (!leg->report) continue;
            aps.push_back(leg->report->ap);
            epas.push_back(leg->report->epa);
        }
        s.legs = aps.size();
        auto mean_std = [](const std::vector<double>& v, double& mean, double& sd) {
            if (v.empty()) return;
            mean = 0.0;
            for (double x : v) mean += x;
            mean /= static_cast<double>(v.size());
            sd = 0.0;
            for (double x : v) sd += (x - mean) * (x - mean);
            sd = v.size() > 1 ? std::sqrt(sd / static_cast<double>(v.size() - 1)) : 0.0;
        };
        mean_std(aps, s.ap_mean, s.ap_std);
        mean_std(epas, s.epa_mean, s.epa_std);
        out.push_back(s);
    }
    std::sort(out.begin(), out.end(), [](const StrategySummary& a, const StrategySummary& b) {
        return a.epa_mean > b.epa_mean;
    });
    return out;
}

inline void write_compare_csv(const std::string& path, const RunConfig& cfg,
                              const std::vector<CompareLeg>& legs,
                              const std::vector<StrategySummary>& summary) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("compare: cannot write '" + path + "'");
    out << config_echo_line(cfg) << "\n";
    out << "kind,strategy,seed,ap,ade,fde,mr,epa,error\n";
    auto opt = [](const std::optional<double>& v) { return v ? fmt_g17(*v) : std::string(); };
    for (const auto& leg : legs) {
        out << "leg," << strategy_name(leg.strategy) << "," << leg.seed << ",";
        if (leg.report) {
            const MetricsReport& r = *leg.report;
            out << fmt_g17(r.ap) << "," << opt(r.ade) << "," << opt(r.fde) << "," << opt(r.mr)
                << "," << fmt_g17(r.epa) << ",";
        } else {
            out << ",,,,,\"" << leg.error << "\"";
        }
        out << "\n";
    }
    for (const auto& s : summary) {
        out << "summary," << strategy_name(s.strategy) << ",," << fmt_g17(s.ap_mean) << "±"
            << fmt_g17(s.ap_std) << ",,,," << fmt_g17(s.epa_mean) << "±" << fmt_g17(s.epa_std)
            << ",\n";
    }
}

}  // namespace coop
