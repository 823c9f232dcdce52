#pragma once

#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "cooplearn/balance.hpp"
#include "cooplearn/model.hpp"
#include "cooplearn/pretrain.hpp"
#include "cooplearn/scene.hpp"
#include "cooplearn/voxel.hpp"

namespace coop {

using json = nlohmann::json;

enum class Strategy { one_time, pretrain_only, turbotrain };

inline Strategy strategy_from_string(const std::string& s) {
    if (s == "one-time") return Strategy::one_time;
    if (s == "pretrain-only") return Strategy::pretrain_only;
    if (s == "turbotrain") return Strategy::turbotrain;
    throw std::invalid_argument("config: unknown strategy '" + s +
                                "' (expected one-time, pretrain-only, or turbotrain)");
}

inline const char* strategy_name(Strategy s) {
    switch (s) {
        case Strategy::one_time: return "one-time";
        case Strategy::pretrain_only: return "pretrain-only";
        default: return "turbotrain";
    }
}

struct RunPaths {
    std::string scenes = "scenes/train";
    std::string eval_scenes = "scenes/eval";
    std::string pretrain_checkpoint = "pretrain_checkpoint.bin";
    std::string train_checkpoint = "train_checkpoint.bin";
    std::string checkpoint_in;  // explicit input override (--ckpt); wins when set
    std::string report = "report.json";
    std::string loss_trace = "pretrain_loss.csv";
    std::string step_log = "train_steps.csv";
    std::string out_dir = ".";
};

struct RunConfig {
    std::uint64_t seed = 0;
    Strategy strategy = Strategy::turbotrain;
    RunPaths paths;
    ScenarioConfig scenario;
    VoxelSpec voxel;
    ModelConfig model;
    PretrainConfig pretrain;
    TrainConfig train;

    void validate() const {
        scenario.validate();
        voxel.validate();
        pretrain.validate();
        if (train.balance_enabled) train.schedule.validate();
    }
};

namespace cfgdetail {

template <typename T>
void read_field(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

inline void reject_unknown(const json& j, std::initializer_list<const char*> known,
                           const std::string& section) {
    for (const auto& [key, value] : j.items()) {
        bool ok = false;
        for (const char* k : known)
            if (key == k) ok = true;
        if (!ok)
            throw std::invalid_argument("config: unknown key '" + key + "' in section '" +
                                        section + "'");
    }
}

}  // namespace cfgdetail

inline RunConfig run_config_from_json(const json& j) {
    using cfgdetail::read_field;
    using cfgdetail::reject_unknown;
    RunConfig cfg;
    reject_unknown(j, {"seed", "strategy", "paths", "scenario", "voxel", "model", "pretrain",
                       "train"},
                   "<root>");
    read_field(j, "seed", cfg.seed);
    if (j.contains("strategy")) cfg.strategy = strategy_from_string(j.at("strategy"));

    if (j.contains("paths")) {
        const json& p = j.at("paths");
        reject_unknown(p,
                       {"scenes", "eval_scenes", "pretrain_checkpoint", "train_checkpoint",
                        "checkpoint_in", "report", "loss_trace", "step_log", "out_dir"},
                       "paths");
        read_field(p, "scenes", cfg.paths.scenes);
        read_field(p, "eval_scenes", cfg.paths.eval_scenes);
        read_field(p, "pretrain_checkpoint", cfg.paths.pretrain_checkpoint);
        read_field(p, "train_checkpoint", cfg.paths.train_checkpoint);
        read_field(p, "checkpoint_in", cfg.paths.checkpoint_in);
        read_field(p, "report", cfg.paths.report);
        read_field(p, "loss_trace", cfg.paths.loss_trace);
        read_field(p, "step_log", cfg.paths.step_log);
        read_field(p, "out_dir", cfg.paths.out_dir);
    }
    if (j.contains("scenario")) {
        const json& s = j.at("scenario");
        reject_unknown(s,
                       {"agents", "objects", "extent_x", "extent_y", "speed_min", "speed_max",
                        "rays", "range", "noise_sigma"},
                       "scenario");
        read_field(s, "agents", cfg.scenario.agent_count);
        read_field(s, "objects", cfg.scenario.object_count);
        read_field(s, "extent_x", cfg.scenario.extent_x);
        read_field(s, "extent_y", cfg.scenario.extent_y);
        read_field(s, "speed_min", cfg.scenario.speed_min);
        read_field(s, "speed_max", cfg.scenario.speed_max);
        read_field(s, "rays", cfg.scenario.rays_per_frame);
        read_field(s, "range", cfg.scenario.range_limit);
        read_field(s, "noise_sigma", cfg.scenario.noise_sigma);
    }
    if (j.contains("voxel")) {
        const json& v = j.at("voxel");
        reject_unknown(v,
                       {"x_min", "x_max", "y_min", "y_max", "z_min", "z_max", "voxel_x",
                        "voxel_y", "voxel_z", "max_points_per_voxel", "max_voxels", "bev_cell"},
                       "voxel");
        read_field(v, "x_min", cfg.voxel.x_min);
        read_field(v, "x_max", cfg.voxel.x_max);
        read_field(v, "y_min", cfg.voxel.y_min);
        read_field(v, "y_max", cfg.voxel.y_max);
        read_field(v, "z_min", cfg.voxel.z_min);
        read_field(v, "z_max", cfg.voxel.z_max);
        read_field(v, "voxel_x", cfg.voxel.voxel_x);
        read_field(v, "voxel_y", cfg.voxel.voxel_y);
        read_field(v, "voxel_z", cfg.voxel.voxel_z);
        read_field(v, "max_points_per_voxel", cfg.voxel.max_points_per_voxel);
        read_field(v, "max_voxels", cfg.voxel.max_voxels);
        read_field(v, "bev_cell", cfg.voxel.bev_cell);
    }
    if (j.contains("model")) {
        const json& m = j.at("model");
        reject_unknown(m,
                       {"input_features", "hidden", "channels", "score_threshold", "nms_iou"},
                       "model");
        read_field(m, "input_features", cfg.model.input_features);
        read_field(m, "hidden", cfg.model.hidden);
        read_field(m, "channels", cfg.model.channels);
        read_field(m, "score_threshold", cfg.model.score_threshold);
        read_field(m, "nms_iou", cfg.model.nms_iou);
    }
    if (j.contains("pretrain")) {
        const json& p = j.at("pretrain");
        reject_unknown(p,
                       {"mask_ratio", "w_rec", "w_occ", "epochs", "lr", "weight_decay",
                        "predicted_points", "focal_alpha", "focal_gamma", "decoder_hidden"},
                       "pretrain");
        read_field(p, "mask_ratio", cfg.pretrain.mask_ratio);
        read_field(p, "w_rec", cfg.pretrain.w_rec);
        read_field(p, "w_occ", cfg.pretrain.w_occ);
        read_field(p, "epochs", cfg.pretrain.epochs);
        read_field(p, "lr", cfg.pretrain.lr);
        read_field(p, "weight_decay", cfg.pretrain.weight_decay);
        read_field(p, "predicted_points", cfg.pretrain.chamfer.predicted_points);
        read_field(p, "focal_alpha", cfg.pretrain.focal.alpha);
        read_field(p, "focal_gamma", cfg.pretrain.focal.gamma);
        read_field(p, "decoder_hidden", cfg.pretrain.decoder_hidden);
        cfg.model.focal = cfg.pretrain.focal;
    }
    if (j.contains("train")) {
        const json& t = j.at("train");
        reject_unknown(t,
                       {"epochs", "lr", "weight_decay", "cosine_decay", "balance",
                        "symmetric_suppression"},
                       "train");
        read_field(t, "epochs", cfg.train.epochs);
        read_field(t, "lr", cfg.train.lr);
        read_field(t, "weight_decay", cfg.train.weight_decay);
        read_field(t, "cosine_decay", cfg.train.cosine_decay);
        read_field(t, "symmetric_suppression", cfg.train.symmetric_suppression);
        if (t.contains("balance")) {
            const json& b = t.at("balance");
            reject_unknown(b, {"n", "m"}, "train.balance");
            cfg.train.balance_enabled = true;
            read_field(b, "n", cfg.train.schedule.free_steps);
            read_field(b, "m", cfg.train.schedule.balanced_steps);
        }
    }
    return cfg;
}

inline json run_config_to_json(const RunConfig& cfg) {
    json j;
    j["seed"] = cfg.seed;
    j["strategy"] = strategy_name(cfg.strategy);
    j["paths"] = {{"scenes", cfg.paths.scenes},
                  {"eval_scenes", cfg.paths.eval_scenes},
                  {"pretrain_checkpoint", cfg.paths.pretrain_checkpoint},
                  {"train_checkpoint", cfg.paths.train_checkpoint},
                  {"checkpoint_in", cfg.paths.checkpoint_in},
                  {"report", cfg.paths.report},
                  {"loss_trace", cfg.paths.loss_trace},
                  {"step_log", cfg.paths.step_log},
                  {"out_dir", cfg.paths.out_dir}};
    j["scenario"] = {{"agents", cfg.scenario.agent_count},
                     {"objects", cfg.scenario.object_count},
                     {"extent_x", cfg.scenario.extent_x},
                     {"extent_y", cfg.scenario.extent_y},
                     {"speed_min", cfg.scenario.speed_min},
                     {"speed_max", cfg.scenario.speed_max},
                     {"rays", cfg.scenario.rays_per_frame},
                     {"range", cfg.scenario.range_limit},
                     {"noise_sigma", cfg.scenario.noise_sigma}};
    j["voxel"] = {{"x_min", cfg.voxel.x_min},
                  {"x_max", cfg.voxel.x_max},
                  {"y_min", cfg.voxel.y_min},
                  {"y_max", cfg.voxel.y_max},
                  {"z_min", cfg.voxel.z_min},
                  {"z_max", cfg.voxel.z_max},
                  {"voxel_x", cfg.voxel.voxel_x},
                  {"voxel_y", cfg.voxel.voxel_y},
                  {"voxel_z", cfg.voxel.voxel_z},
                  {"max_points_per_voxel", cfg.voxel.max_points_per_voxel},
                  {"max_voxels", cfg.voxel.max_voxels},
                  {"bev_cell", cfg.voxel.bev_cell}};
    j["model"] = {{"input_features", cfg.model.input_features},
                  {"hidden", cfg.model.hidden},
                  {"channels", cfg.model.channels},
                  {"score_threshold", cfg.model.score_threshold},
                  {"nms_iou", cfg.model.nms_iou}};
    j["pretrain"] = {{"mask_ratio", cfg.pretrain.mask_ratio},
                     {"w_rec", cfg.pretrain.w_rec},
                     {"w_occ", cfg.pretrain.w_occ},
                     {"epochs", cfg.pretrain.epochs},
                     {"lr", cfg.pretrain.lr},
                     {"weight_decay", cfg.pretrain.weight_decay},
                     {"predicted_points", cfg.pretrain.chamfer.predicted_points},
                     {"focal_alpha", cfg.pretrain.focal.alpha},
                     {"focal_gamma", cfg.pretrain.focal.gamma},
                     {"decoder_hidden", cfg.pretrain.decoder_hidden}};
    j["train"] = {{"epochs", cfg.train.epochs},
                  {"lr", cfg.train.lr},
                  {"weight_decay", cfg.train.weight_decay},
                  {"cosine_decay", cfg.train.cosine_decay},
                  {"symmetric_suppression", cfg.train.symmetric_suppression}};
    if (cfg.train.balance_enabled)
        j["train"]["balance"] = {{"n", cfg.train.schedule.free_steps},
                                 {"m", cfg.train.schedule.balanced_steps}};
    return j;
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config: cannot open '" + path + "'");
    json j;
    try {
        in >> j;
    } catch (const json::parse_error& e) {
        throw std::runtime_error("config '" + path + "': " + e.what());
    }
    RunConfig cfg = run_config_from_json(j);
    cfg.validate();
    return cfg;
}

}  // namespace coop
