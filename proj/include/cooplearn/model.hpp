#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "cooplearn/autodiff.hpp"
#include "cooplearn/graphops.hpp"
#include "cooplearn/losses.hpp"
#include "cooplearn/params.hpp"
#include "cooplearn/rng.hpp"
#include "cooplearn/scene.hpp"
#include "cooplearn/voxel.hpp"

namespace coop {

struct ModelConfig {
    std::size_t input_features = 6;
    std::size_t hidden = 16;
    std::size_t channels = 8;
    std::size_t frames = kHistFrames + 1;
    std::size_t waypoints = kFutureFrames;
    double score_threshold = 0.25;
    double nms_iou = 0.5;
    OccFocalConfig focal{};  // objectness classification reuses the focal defaults
};

// ---------------------------------------------------------------------------
// Parameters

namespace detail {
inline NumArray init_matrix(Rng& rng, std::size_t rows, std::size_t cols) {
    const double s = 1.0 / std::sqrt(static_cast<double>(rows));
    NumArray w = NumArray::zeros({rows, cols});
    for (auto& v : w.values()) v = rng.uniform(-s, s);
    return w;
}
}  // namespace detail

// Shared trunk: per-frame encoder, temporal gates + mix, agent-fusion scorer.
inline ParamStore make_trunk_params(const ModelConfig& cfg, Rng& rng) {
    ParamStore store;
    store.add("enc.w1", detail::init_matrix(rng, cfg.input_features, cfg.hidden));
    store.add("enc.b1", NumArray::zeros({1, cfg.hidden}));
    store.add("enc.w2", detail::init_matrix(rng, cfg.hidden, cfg.channels));
    store.add("enc.b2", NumArray::zeros({1, cfg.channels}));
    store.add("temporal.gates",
              NumArray::full({cfg.frames, 1}, 1.0 / static_cast<double>(cfg.frames)));
    NumArray mix = detail::init_matrix(rng, cfg.channels, cfg.channels);
    for (std::size_t i = 0; i < cfg.channels; ++i) mix.at(i, i) += 1.0;
    store.add("temporal.mix_w", std::move(mix));
    store.add("temporal.mix_b", NumArray::zeros({1, cfg.channels}));
    store.add("fuse.score_w", detail::init_matrix(rng, cfg.channels, 1));
    store.add("fuse.score_b", NumArray::zeros({1, 1}));
    return store;
}

inline ParamStore make_det_head_params(const ModelConfig& cfg, Rng& rng) {
    ParamStore store;
    store.add("det.obj_w", detail::init_matrix(rng, cfg.channels, 1));
    store.add("det.obj_b", NumArray::full({1, 1}, -2.0));  // start with low objectness
    store.add("det.box_w", detail::init_matrix(rng, cfg.channels, 5));
    store.add("det.box_b", NumArray::zeros({1, 5}));
    return store;
}

inline ParamStore make_pred_head_params(const ModelConfig& cfg, Rng& rng) {
    ParamStore store;
    store.add("pred.w", detail::init_matrix(rng, cfg.channels, 2 * cfg.waypoints));
    store.add("pred.b", NumArray::zeros({1, 2 * cfg.waypoints}));
    return store;
}

// Tape bindings of a store's parameters, in store order.
struct Binding {
    std::vector<NodeId> order;
    std::map<std::string, NodeId> by_name;

    NodeId operator[](const std::string& name) const {
        auto it = by_name.find(name);
        if (it == by_name.end())
            throw std::invalid_argument("binding: unknown parameter '" + name + "'");
        return it->second;
    }
};

inline Binding bind_params(Tape& t, const ParamStore& store, bool trainable = true) {
    Binding b;
    for (std::size_t i = 0; i < store.count(); ++i) {
        NodeId id = trainable ? t.param(store.value(i)) : t.constant(store.value(i));
        b.order.push_back(id);
        b.by_name.emplace(store.names()[i], id);
    }
    return b;
}

// ---------------------------------------------------------------------------
// Per-cell input features

// Aggregated from the kept voxel points of one agent's ego-frame sweep.
struct CellStats {
    std::size_t count = 0;
    double sum_dx = 0.0, sum_dy = 0.0, sum_z = 0.0;
    double max_z = 0.0;
    std::uint64_t z_mask = 0;
};

// Dense [cells, F] features plus a {0,1} indicator column. Masked cells are
// presented exactly like empty ones: all-zero input, zero indicator.
struct FrameFeatures {
    NumArray features;   // [cells, F]
    NumArray indicator;  // [cells, 1]
};

inline FrameFeatures cell_features(const VoxelGrid& grid, const VoxelSpec& spec,
                                   const ModelConfig& cfg,
                                   const std::vector<std::size_t>* masked_cells = nullptr) {
    const std::size_t cells = spec.cell_count();
    std::map<std::size_t, CellStats> stats;
    const std::size_t vox_per_cell_x =
        static_cast<std::size_t>(std::round(spec.bev_cell / spec.voxel_x));
    const std::size_t vox_per_cell_y =
        static_cast<std::size_t>(std::round(spec.bev_cell / spec.voxel_y));
    for (const auto& v : grid.voxels) {
        const std::size_t cx = v.ix / vox_per_cell_x;
        const std::size_t cy = v.iy / vox_per_cell_y;
        const std::size_t cell = cx * spec.cells_y() + cy;
        CellStats& s = stats[cell];
        const auto center = spec.cell_center(cell);
        for (std::size_t k = 0; k < v.count; ++k) {
            const auto& p = v.slots[k];
            s.sum_dx += p[0] - center[0];
            s.sum_dy += p[1] - center[1];
            s.sum_z += p[2];
            if (s.count == 0 || p[2] > s.max_z) s.max_z = p[2];
            ++s.count;
        }
        if (v.iz < 64) s.z_mask |= (1ULL << v.iz);
    }

    FrameFeatures out;
    out.features = NumArray::zeros({cells, cfg.input_features});
    out.indicator = NumArray::zeros({cells, 1});
    const double z_span = spec.z_max - spec.z_min;
    const double half_cell = 0.5 * spec.bev_cell;
    for (const auto& [cell, s] : stats) {
        if (masked_cells &&
            std::binary_search(masked_cells->begin(), masked_cells->end(), cell))
            continue;
        const double n = static_cast<double>(s.count);
        double* row = out.features.data() + cell * cfg.input_features;
        row[0] = n / (n + 8.0);
        row[1] = (s.sum_dx / n) / half_cell;
        row[2] = (s.sum_dy / n) / half_cell;
        row[3] = (s.sum_z / n - spec.z_min) / z_span;
        row[4] = static_cast<double>(__builtin_popcountll(s.z_mask)) /
                 static_cast<double>(spec.z_levels());
        row[5] = (s.max_z - spec.z_min) / z_span;
        out.indicator[cell] = 1.0;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Trunk forward

// Small affine+relu stack per cell; empty (and masked) cells stay exactly zero.
inline NodeId encode_frame(Tape& t, const FrameFeatures& frame, const Binding& trunk,
                           const ModelConfig& cfg) {
    NodeId x = t.constant(frame.features);
    NodeId h = t.relu(gops::affine(t, x, trunk["enc.w1"], trunk["enc.b1"]));
    NodeId g = t.relu(gops::affine(t, h, trunk["enc.w2"], trunk["enc.b2"]));
    NodeId ind = t.constant(frame.indicator);
    return t.mul(g, gops::broadcast_col(t, ind, cfg.channels));
}

// Learned per-frame scalar gates followed by an affine mix over channels.
inline NodeId temporal_fuse(Tape& t, const std::vector<NodeId>& grids, const Binding& trunk) {
    const NumArray& gates = t.value(trunk["temporal.gates"]);
    if (grids.empty() || grids.size() != gates.shape()[0])
        throw std::invalid_argument("temporal_fuse: got " + std::to_string(grids.size()) +
                                    " frames, gates expect " + std::to_string(gates.shape()[0]));
    const auto shape = t.value(grids[0]).shape();
    const std::size_t flat = shape[0] * shape[1];
    NodeId acc = 0;
    bool first = true;
    for (std::size_t f = 0; f < grids.size(); ++f) {
        NodeId gate = t.gather_rows(trunk["temporal.gates"], {f});  // [1,1]
        NodeId scaled = t.matmul(t.reshape(grids[f], {flat, 1}), gate);
        acc = first ? scaled : t.add(acc, scaled);
        first = false;
    }
    NodeId mixed = t.reshape(acc, shape);
    return gops::affine(t, mixed, trunk["temporal.mix_w"], trunk["temporal.mix_b"]);
}

// Softmax-weighted per-cell combination across agents with a tied scorer.
inline NodeId agent_fuse(Tape& t, const std::vector<NodeId>& grids, const Binding& trunk,
                         const ModelConfig& cfg) {
    if (grids.empty()) throw std::invalid_argument("agent_fuse: no agent grids");
    std::vector<NodeId> scores;
    scores.reserve(grids.size());
    for (NodeId g : grids)
        scores.push_back(gops::affine(t, g, trunk["fuse.score_w"], trunk["fuse.score_b"]));
    std::vector<NodeId> weights = gops::softmax_columns(t, scores);
    NodeId fused = 0;
    bool first = true;
    for (std::size_t a = 0; a < grids.size(); ++a) {
        NodeId weighted = t.mul(grids[a], gops::broadcast_col(t, weights[a], cfg.channels));
        fused = first ? weighted : t.add(fused, weighted);
        first = false;
    }
    return fused;
}

// Per-frame masked cell ids (sorted), indexed oldest..current; empty = no mask.
using FrameMasks = std::vector<std::vector<std::size_t>>;

// Runs the full shared trunk on one scene: per-agent per-frame encoding in the
// current ego frame, temporal fusion per agent, then agent fusion. Agent 0 is
// the ego.
inline NodeId trunk_forward(Tape& t, const Scene& scene, const VoxelSpec& spec,
                            const ModelConfig& cfg, const Binding& trunk,
                            const FrameMasks* masks = nullptr) {
    if (scene.agents.empty()) throw std::invalid_argument("trunk_forward: scene has no agents");
    if (scene.frame_count() != cfg.frames)
        throw std::invalid_argument("trunk_forward: scene has " +
                                    std::to_string(scene.frame_count()) + " frames, model expects " +
                                    std::to_string(cfg.frames));
    const AgentPose& ego = scene.agents[0].poses.back();
    std::vector<NodeId> agent_grids;
    agent_grids.reserve(scene.agents.size());
    for (std::size_t a = 0; a < scene.agents.size(); ++a) {
        std::vector<NodeId> frame_grids;
        frame_grids.reserve(cfg.frames);
        for (std::size_t f = 0; f < cfg.frames; ++f) {
            PointCloudFrame ego_cloud =
                transform_to_ego(scene.agents[a].clouds[f], scene.agents[a].poses[f], ego);
            VoxelGrid grid = voxelize(ego_cloud.points, spec);
            const std::vector<std::size_t>* mask =
                (masks && f < masks->size()) ? &(*masks)[f] : nullptr;
            FrameFeatures feats = cell_features(grid, spec, cfg, mask);
            frame_grids.push_back(encode_frame(t, feats, trunk, cfg));
        }
        agent_grids.push_back(temporal_fuse(t, frame_grids, trunk));
    }
    return agent_fuse(t, agent_grids, trunk, cfg);
}

// ---------------------------------------------------------------------------
// Heads, decoding, losses

struct DetectionBox {
    double cx = 0.0, cy = 0.0;
    double length = 1.0, width = 1.0;
    double yaw = 0.0;
    double score = 0.0;
};

struct PredictedTrajectory {
    std::vector<std::array<double, 2>> waypoints;  // absolute positions, 2 Hz
};

struct Detection {
    DetectionBox box;
    PredictedTrajectory trajectory;
    std::size_t cell = 0;
};

struct HeadOutputs {
    NodeId obj_scores = 0;  // [cells, 1] sigmoid
    NodeId box_reg = 0;     // [cells, 5] dx, dy, length, width, yaw
    NodeId traj_reg = 0;    // [cells, 2*W] waypoint offsets from the cell center
};

inline HeadOutputs heads_forward(Tape& t, NodeId fused, const Binding& det,
                                 const Binding& pred) {
    HeadOutputs out;
    out.obj_scores = t.sigmoid(gops::affine(t, fused, det["det.obj_w"], det["det.obj_b"]));
    out.box_reg = gops::affine(t, fused, det["det.box_w"], det["det.box_b"]);
    out.traj_reg = gops::affine(t, fused, pred["pred.w"], pred["pred.b"]);
    return out;
}

// Greedy non-maximum suppression at the configured IoU.
inline std::vector<Detection> nms(std::vector<Detection> dets, double iou_thr) {
    std::sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) {
        if (a.box.score != b.box.score) return a.box.score > b.box.score;
        return a.cell < b.cell;
    });
    std::vector<Detection> kept;
    for (const auto& d : dets) {
        bool suppressed = false;
        for (const auto& k : kept) {
            const double iou =
                oriented_box_iou(d.box.cx, d.box.cy, d.box.length, d.box.width, d.box.yaw,
                                 k.box.cx, k.box.cy, k.box.length, k.box.width, k.box.yaw);
            if (iou >= iou_thr) {
                suppressed = true;
                break;
            }
        }
        if (!suppressed) kept.push_back(d);
    }
    return kept;
}

inline std::vector<Detection> decode_detections(const Tape& t, const HeadOutputs& heads,
                                                const VoxelSpec& spec, const ModelConfig& cfg) {
    const NumArray& scores = t.value(heads.obj_scores);
    const NumArray& boxes = t.value(heads.box_reg);
    const NumArray& traj = t.value(heads.traj_reg);
    std::vector<Detection> dets;
    for (std::size_t cell = 0; cell < scores.size(); ++cell) {
        const double s = scores[cell];
        if (s < cfg.score_threshold) continue;
        const auto center = spec.cell_center(cell);
        Detection d;
        d.cell = cell;
        d.box.cx = center[0] + boxes.at(cell, 0);
        d.box.cy = center[1] + boxes.at(cell, 1);
        d.box.length = std::max(boxes.at(cell, 2), 0.05);
        d.box.width = std::max(boxes.at(cell, 3), 0.05);
        d.box.yaw = normalize_angle(boxes.at(cell, 4));
        d.box.score = s;
        d.trajectory.waypoints.resize(cfg.waypoints);
        for (std::size_t w = 0; w < cfg.waypoints; ++w) {
            d.trajectory.waypoints[w] = {center[0] + traj.at(cell, 2 * w),
                                         center[1] + traj.at(cell, 2 * w + 1)};
        }
        dets.push_back(std::move(d));
    }
    return nms(std::move(dets), cfg.nms_iou);
}

// Ground-truth assignment by center containment; the first object to land in
// a cell claims it.
struct CellAssignment {
    std::vector<std::size_t> cells;    // positive cells, ascending
    std::vector<std::size_t> objects;  // claiming object index per cell
};

inline CellAssignment assign_objects_to_cells(const Scene& scene, const VoxelSpec& spec) {
    std::map<std::size_t, std::size_t> claimed;
    for (std::size_t j = 0; j < scene.objects.size(); ++j) {
        const ObjectState& s = scene.objects[j].state;
        if (s.cx < spec.x_min || s.cx >= spec.x_max || s.cy < spec.y_min || s.cy >= spec.y_max)
            continue;
        claimed.emplace(spec.cell_of(s.cx, s.cy), j);  // emplace keeps the first claim
    }
    CellAssignment out;
    for (const auto& [cell, obj] : claimed) {
        out.cells.push_back(cell);
        out.objects.push_back(obj);
    }
    return out;
}

struct TaskLosses {
    NodeId detection = 0;
    NodeId prediction = 0;
};

// L_det = focal objectness over all cells + smooth-L1 box regression at
// positive cells; L_pred = smooth-L1 waypoint regression at positive cells.
inline TaskLosses task_losses(Tape& t, const HeadOutputs& heads, const Scene& scene,
                              const VoxelSpec& spec, const ModelConfig& cfg) {
    const std::size_t cells = spec.cell_count();
    CellAssignment assign = assign_objects_to_cells(scene, spec);

    std::vector<std::uint8_t> labels(cells, 0);
    for (std::size_t c : assign.cells) labels[c] = 1;
    NodeId cls = occupancy_focal_graph(t, t.reshape(heads.obj_scores, {cells}), labels, cfg.focal);

    TaskLosses out;
    if (assign.cells.empty()) {
        out.detection = cls;
        out.prediction = t.constant(NumArray::scalar(0.0));
        return out;
    }

    const std::size_t P = assign.cells.size();
    NumArray box_targets = NumArray::zeros({P, 5});
    NumArray traj_targets = NumArray::zeros({P, 2 * cfg.waypoints});
    for (std::size_t i = 0; i < P; ++i) {
        const SceneObject& ob = scene.objects[assign.objects[i]];
        const auto center = spec.cell_center(assign.cells[i]);
        box_targets.at(i, 0) = ob.state.cx - center[0];
        box_targets.at(i, 1) = ob.state.cy - center[1];
        box_targets.at(i, 2) = ob.state.length;
        box_targets.at(i, 3) = ob.state.width;
        box_targets.at(i, 4) = ob.state.yaw;
        for (std::size_t w = 0; w < cfg.waypoints && w < ob.future.size(); ++w) {
            traj_targets.at(i, 2 * w) = ob.future[w][0] - center[0];
            traj_targets.at(i, 2 * w + 1) = ob.future[w][1] - center[1];
        }
    }

    NodeId box_pos = t.gather_rows(heads.box_reg, assign.cells);
    NodeId box_err = t.sub(box_pos, t.constant(std::move(box_targets)));
    NodeId box_loss = t.mean(gops::smooth_l1(t, box_err));
    out.detection = t.add(cls, box_loss);

    NodeId traj_pos = t.gather_rows(heads.traj_reg, assign.cells);
    NodeId traj_err = t.sub(traj_pos, t.constant(std::move(traj_targets)));
    out.prediction = t.mean(gops::smooth_l1(t, traj_err));
    return out;
}

// ---------------------------------------------------------------------------

struct E2EResult {
    std::vector<Detection> detections;
};

// Full inference pass: trunk + heads + decode. Deterministic given parameters
// and scene.
inline E2EResult forward_e2e(const Scene& scene, const ParamStore& trunk_store,
                             const ParamStore& det_store, const ParamStore& pred_store,
                             const VoxelSpec& spec, const ModelConfig& cfg) {
    Tape t;
    Binding trunk = bind_params(t, trunk_store, false);
    Binding det = bind_params(t, det_store, false);
    Binding pred = bind_params(t, pred_store, false);
    NodeId fused = trunk_forward(t, scene, spec, cfg, trunk);
    HeadOutputs heads = heads_forward(t, fused, det, pred);
    E2EResult out;
    out.detections = decode_detections(t, heads, spec, cfg);
    return out;
}

}  // namespace coop
