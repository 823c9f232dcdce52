#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cooplearn/autodiff.hpp"
#include "cooplearn/losses.hpp"
#include "cooplearn/model.hpp"
#include "cooplearn/optim.hpp"
#include "cooplearn/voxel.hpp"

namespace coop {

struct PretrainConfig {
    double mask_ratio = 0.7;
    double w_rec = 1.0;
    double w_occ = 1.0;
    std::size_t epochs = 15;
    double lr = 0.002;
    double weight_decay = 1e-2;
    std::uint64_t seed = 0;
    std::size_t decoder_hidden = 16;
    ChamferConfig chamfer{};
    OccFocalConfig focal{};

    void validate() const {
        if (mask_ratio < 0.0 || mask_ratio > 1.0)
            throw std::invalid_argument("pretrain: mask ratio must be in [0,1], got " +
                                        std::to_string(mask_ratio));
        if (w_rec < 0.0 || w_occ < 0.0)
            throw std::invalid_argument("pretrain: loss weights must be >= 0");
        if (epochs < 1) throw std::invalid_argument("pretrain: epochs must be >= 1");
        if (chamfer.predicted_points < 1)
            throw std::invalid_argument("pretrain: predicted point count must be >= 1");
    }
};

// Point decoder: one affine layer from the fused cell feature to a fixed
// number of xyz offsets. Occupancy decoder: three affine layers, relu between,
// sigmoid per z level.
inline ParamStore make_decoder_params(const ModelConfig& mcfg, const PretrainConfig& pcfg,
                                      std::size_t z_levels, Rng& rng) {
    ParamStore store;
    const std::size_t p3 = 3 * pcfg.chamfer.predicted_points;
    store.add("dec.point_w", detail::init_matrix(rng, mcfg.channels, p3));
    store.add("dec.point_b", NumArray::zeros({1, p3}));
    const std::size_t h = pcfg.decoder_hidden;
    store.add("dec.occ_w1", detail::init_matrix(rng, mcfg.channels, h));
    store.add("dec.occ_b1", NumArray::zeros({1, h}));
    store.add("dec.occ_w2", detail::init_matrix(rng, h, h));
    store.add("dec.occ_b2", NumArray::zeros({1, h}));
    store.add("dec.occ_w3", detail::init_matrix(rng, h, z_levels));
    store.add("dec.occ_b3", NumArray::zeros({1, z_levels}));
    return store;
}

// [M, C] cell features -> [M, 3P] xyz offsets.
inline NodeId point_decoder_offsets(Tape& t, NodeId feats, const Binding& dec) {
    return gops::affine(t, feats, dec["dec.point_w"], dec["dec.point_b"]);
}

// One cell's offsets anchored at the cell center: [P, 3] predicted points.
inline NodeId point_decoder_cell(Tape& t, NodeId offsets, std::size_t row,
                                 const std::array<double, 2>& cell_center, double z_anchor,
                                 std::size_t predicted_points) {
    NodeId slice = t.reshape(t.gather_rows(offsets, {row}), {predicted_points, 3});
    NumArray anchor = NumArray::zeros({predicted_points, 3});
    for (std::size_t i = 0; i < predicted_points; ++i) {
        anchor.at(i, 0) = cell_center[0];
        anchor.at(i, 1) = cell_center[1];
        anchor.at(i, 2) = z_anchor;
    }
    return t.add(slice, t.constant(std::move(anchor)));
}

// [M, C] cell features -> [M, z_levels] occupancy probabilities in (0,1).
inline NodeId occ_decoder(Tape& t, NodeId feats, const Binding& dec) {
    NodeId h1 = t.relu(gops::affine(t, feats, dec["dec.occ_w1"], dec["dec.occ_b1"]));
    NodeId h2 = t.relu(gops::affine(t, h1, dec["dec.occ_w2"], dec["dec.occ_b2"]));
    return t.sigmoid(gops::affine(t, h2, dec["dec.occ_w3"], dec["dec.occ_b3"]));
}

// All agents' frame-f clouds expressed in the current ego frame and merged.
inline std::vector<std::array<double, 3>> merged_ego_points(const Scene& scene,
                                                            std::size_t frame) {
    const AgentPose& ego = scene.agents[0].poses.back();
    std::vector<std::array<double, 3>> merged;
    for (const auto& agent : scene.agents) {
        PointCloudFrame c = transform_to_ego(agent.clouds[frame], agent.poses[frame], ego);
        merged.insert(merged.end(), c.points.begin(), c.points.end());
    }
    return merged;
}

struct PretrainEpochStats {
    double mean_rec = 0.0;
    double mean_occ = 0.0;
};

struct PretrainResult {
    ParamStore trunk;
    ParamStore decoders;
    std::vector<PretrainEpochStats> trace;
    std::size_t skipped_scenes = 0;
};

// Masked multi-agent spatiotemporal reconstruction. Per step: every agent's
// frames go to the ego frame, per-frame masks (resampled each frame) hide
// cells from the encoders, and the decoders reconstruct the current frame's
// masked cells from the fused features against merged multi-agent targets.
inline PretrainResult pretrain_run(const std::vector<Scene>& scenes, const VoxelSpec& spec,
                                   const ModelConfig& mcfg, const PretrainConfig& cfg,
                                   std::ostream* log = nullptr) {
    cfg.validate();
    spec.validate();
    if (scenes.empty()) throw std::invalid_argument("pretrain: need at least one scene");

    Rng init_rng(cfg.seed);
    PretrainResult result;
    result.trunk = make_trunk_params(mcfg, init_rng);
    result.decoders = make_decoder_params(mcfg, cfg, spec.z_levels(), init_rng);

    const std::size_t total_steps = cfg.epochs * scenes.size();
    AdamWConfig ocfg;
    ocfg.lr = cfg.lr;
    ocfg.weight_decay = cfg.weight_decay;
    ocfg.cosine_decay = true;
    ocfg.total_steps = total_steps;
    AdamW trunk_opt(ocfg, result.trunk.total_size());
    AdamW dec_opt(ocfg, result.decoders.total_size());

    const double z_anchor = 0.5 * (spec.z_min + spec.z_max);
    const std::size_t frames = kHistFrames + 1;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        double rec_sum = 0.0, occ_sum = 0.0;
        std::size_t counted = 0;
        for (std::size_t si = 0; si < scenes.size(); ++si) {
            const Scene& scene = scenes[si];
            if (scene.agents.empty())
                throw std::invalid_argument("pretrain: scene '" + scene.id + "' has no agents");

            // Per-frame mask plans over the merged multi-agent cloud.
            FrameMasks masks(frames);
            BevMaskPlan current_plan;
            bool any_unmasked = false;
            const std::uint64_t step_key = epoch * scenes.size() + si;
            for (std::size_t f = 0; f < frames; ++f) {
                auto merged = merged_ego_points(scene, f);
                auto cells = non_empty_cells(merged, spec);
                Rng mask_rng = Rng::derive(cfg.seed, step_key * 16 + f);
                BevMaskPlan plan = mask_grids(cells, cfg.mask_ratio, mask_rng.next_u64());
                if (plan.masked.size() < plan.non_empty.size()) any_unmasked = true;
                masks[f] = plan.masked;
                if (f == frames - 1) {
                    build_targets(merged, spec, plan);
                    current_plan = std::move(plan);
                }
            }
            if (current_plan.non_empty.empty()) {
                if (log)
                    *log << "pretrain: skipping scene '" << scene.id
                         << "' with no non-empty cells\n";
                ++result.skipped_scenes;
                continue;
            }
            if (!any_unmasked)
                throw std::runtime_error(
                    "pretrain: mask ratio " + std::to_string(cfg.mask_ratio) +
                    " left no unmasked cells in any frame of scene '" + scene.id +
                    "'; the encoder would see empty input");
            if (current_plan.masked.empty()) {
                if (log)
                    *log << "pretrain: skipping scene '" << scene.id
                         << "' with no masked cells to reconstruct\n";
                ++result.skipped_scenes;
                continue;
            }

            Tape t;
            Binding trunk = bind_params(t, result.trunk, true);
            Binding dec = bind_params(t, result.decoders, true);
            NodeId fused = trunk_forward(t, scene, spec, mcfg, trunk, &masks);
            NodeId masked_feats = t.gather_rows(fused, current_plan.masked);

            // Point-level reconstruction: mean Chamfer over masked cells.
            NodeId offsets = point_decoder_offsets(t, masked_feats, dec);
            NodeId rec_acc = 0;
            bool first = true;
            for (std::size_t i = 0; i < current_plan.masked.size(); ++i) {
                const CellTarget& target = current_plan.targets[i];
                NodeId pts = point_decoder_cell(t, offsets, i, spec.cell_center(target.cell),
                                                z_anchor, cfg.chamfer.predicted_points);
                NodeId cell_loss = chamfer_graph(t, pts, target.points);
                rec_acc = first ? cell_loss : t.add(rec_acc, cell_loss);
                first = false;
            }
            NodeId rec_loss =
                t.scale(rec_acc, 1.0 / static_cast<double>(current_plan.masked.size()));

            // Voxel-level reconstruction: focal occupancy over the z column.
            const std::size_t levels = spec.z_levels();
            std::vector<std::uint8_t> labels;
            labels.reserve(current_plan.masked.size() * levels);
            for (const auto& target : current_plan.targets)
                labels.insert(labels.end(), target.occupancy.begin(), target.occupancy.end());
            NodeId probs = occ_decoder(t, masked_feats, dec);
            NodeId occ_loss = occupancy_focal_graph(
                t, t.reshape(probs, {current_plan.masked.size() * levels}), labels, cfg.focal);

            NodeId total = t.add(t.scale(rec_loss, cfg.w_rec), t.scale(occ_loss, cfg.w_occ));
            const double rec_v = t.value(rec_loss).item();
            const double occ_v = t.value(occ_loss).item();
            if (!std::isfinite(rec_v) || !std::isfinite(occ_v))
                throw std::runtime_error("pretrain: non-finite loss at epoch " +
                                         std::to_string(epoch) + ", scene '" + scene.id + "'");

            GradientMap gm = t.backward(total);
            trunk_opt.step(result.trunk,
                           flatten_gradients(gm, trunk.order, TaskId::detection).values);
            dec_opt.step(result.decoders,
                         flatten_gradients(gm, dec.order, TaskId::detection).values);

            rec_sum += rec_v;
            occ_sum += occ_v;
            ++counted;
        }
        PretrainEpochStats stats;
        if (counted > 0) {
            stats.mean_rec = rec_sum / static_cast<double>(counted);
            stats.mean_occ = occ_sum / static_cast<double>(counted);
        }
        result.trace.push_back(stats);
        if (log)
            *log << "pretrain epoch " << epoch << ": rec " << stats.mean_rec << ", occ "
                 << stats.mean_occ << "\n";
    }
    return result;
}

}  // namespace coop
