#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "cooplearn/autodiff.hpp"
#include "cooplearn/model.hpp"
#include "cooplearn/optim.hpp"

namespace coop {

// Hybrid schedule: n free steps then m balanced steps per cycle, driven by a
// global step counter. Phase is free while (step mod (n+m)) < n.
struct BalanceSchedule {
    std::size_t free_steps = 2000;
    std::size_t balanced_steps = 1000;
    std::size_t step = 0;

    void validate() const {
        if (free_steps + balanced_steps < 1)
            throw std::invalid_argument("balance schedule: n + m must be >= 1");
    }

    std::size_t cycle_position() const { return step % (free_steps + balanced_steps); }
    bool in_balanced_phase() const { return cycle_position() >= free_steps; }
    void advance() { ++step; }
};

inline double conflict_delta(const TaskGradient& gi, const TaskGradient& gj) {
    if (gi.size() != gj.size())
        throw std::invalid_argument("conflict_delta: lengths " + std::to_string(gi.size()) +
                                    " vs " + std::to_string(gj.size()));
    double acc = 0.0;
    for (std::size_t k = 0; k < gi.size(); ++k) acc += gi.values[k] * gj.values[k];
    return acc;
}

inline double squared_norm(const std::vector<double>& v) {
    double acc = 0.0;
    for (double x : v) acc += x * x;
    return acc;
}

constexpr double kNormFloor = 1e-12;  // |g_j| below this counts as non-conflicting

// Conflict-suppressing combination of two task gradients over the shared
// parameters: plain sum when the inner product is non-negative, otherwise
// g_i + (1 - delta/|g_j|^2) g_j, i.e. g_i projected off g_j, plus g_j.
inline std::vector<double> suppress_conflict(const TaskGradient& gi, const TaskGradient& gj) {
    const double delta = conflict_delta(gi, gj);
    const double nj2 = squared_norm(gj.values);
    std::vector<double> out(gi.size());
    if (delta >= 0.0 || nj2 < kNormFloor * kNormFloor) {
        for (std::size_t k = 0; k < out.size(); ++k) out[k] = gi.values[k] + gj.values[k];
        return out;
    }
    const double coef = 1.0 - delta / nj2;
    for (std::size_t k = 0; k < out.size(); ++k)
        out[k] = gi.values[k] + coef * gj.values[k];
    return out;
}

// Two-way variant: each gradient sheds its component along the other before
// summing. Selected by a config switch; the one-sided form is the default.
inline std::vector<double> suppress_conflict_symmetric(const TaskGradient& gi,
                                                       const TaskGradient& gj) {
    const double delta = conflict_delta(gi, gj);
    const double ni2 = squared_norm(gi.values);
    const double nj2 = squared_norm(gj.values);
    std::vector<double> out(gi.size());
    if (delta >= 0.0 || ni2 < kNormFloor * kNormFloor || nj2 < kNormFloor * kNormFloor) {
        for (std::size_t k = 0; k < out.size(); ++k) out[k] = gi.values[k] + gj.values[k];
        return out;
    }
    const double ci = delta / nj2;  // g_i's component on g_j
    const double cj = delta / ni2;
    for (std::size_t k = 0; k < out.size(); ++k)
        out[k] = (gi.values[k] - ci * gj.values[k]) + (gj.values[k] - cj * gi.values[k]);
    return out;
}

struct CombineOutcome {
    std::vector<double> shared_grad;
    bool balanced_phase = false;
    bool suppressed = false;
    double delta = std::numeric_limits<double>::quiet_NaN();
};

// One scheduled combination step: plain sum in the free phase, conflict
// suppression (detection = i, prediction = j) in the balanced phase. Advances
// the schedule counter.
inline CombineOutcome hybrid_combine(BalanceSchedule& schedule, const TaskGradient& g_det,
                                     const TaskGradient& g_pred, bool symmetric = false) {
    schedule.validate();
    if (g_det.size() != g_pred.size())
        throw std::invalid_argument("hybrid_combine: gradient lengths differ");
    CombineOutcome out;
    out.balanced_phase = schedule.in_balanced_phase();
    if (!out.balanced_phase) {
        out.shared_grad.resize(g_det.size());
        for (std::size_t k = 0; k < g_det.size(); ++k)
            out.shared_grad[k] = g_det.values[k] + g_pred.values[k];
    } else {
        out.delta = conflict_delta(g_det, g_pred);
        out.suppressed =
            out.delta < 0.0 && squared_norm(g_pred.values) >= kNormFloor * kNormFloor;
        out.shared_grad = symmetric ? suppress_conflict_symmetric(g_det, g_pred)
                                    : suppress_conflict(g_det, g_pred);
    }
    schedule.advance();
    return out;
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainConfig {
    std::size_t epochs = 6;
    double lr = 0.005;
    double weight_decay = 1e-2;
    bool cosine_decay = true;
    std::uint64_t seed = 0;
    bool balance_enabled = false;  // off: pure free training
    BalanceSchedule schedule{};
    bool symmetric_suppression = false;
};

struct StepLogRow {
    std::size_t step = 0;
    char phase = 'F';  // 'F' free, 'B' balanced
    double delta = std::numeric_limits<double>::quiet_NaN();
    double norm_det = std::numeric_limits<double>::quiet_NaN();
    double norm_pred = std::numeric_limits<double>::quiet_NaN();
    double cosine = std::numeric_limits<double>::quiet_NaN();
    double loss_det = 0.0;
    double loss_pred = 0.0;
};

struct TrainResult {
    ParamStore trunk;
    ParamStore det_head;
    ParamStore pred_head;
    std::vector<StepLogRow> log;
};

// Supervised stage. Free steps take one backward pass on the summed loss;
// balanced steps backward each task separately and combine the shared
// gradient, while task heads always update from their own task's gradient.
inline TrainResult train_run(const std::vector<Scene>& scenes, const VoxelSpec& spec,
                             const ModelConfig& mcfg, const TrainConfig& cfg,
                             const ParamStore* init_trunk = nullptr) {
    if (scenes.empty()) throw std::invalid_argument("train: need at least one scene");
    if (cfg.balance_enabled) cfg.schedule.validate();

    Rng init_rng(cfg.seed);
    TrainResult result;
    ParamStore fresh_trunk = make_trunk_params(mcfg, init_rng);
    result.det_head = make_det_head_params(mcfg, init_rng);
    result.pred_head = make_pred_head_params(mcfg, init_rng);
    if (init_trunk) {
        for (const auto& name : fresh_trunk.names()) {
            const NumArray* loaded = init_trunk->find(name);
            if (!loaded)
                throw std::invalid_argument("train: checkpoint missing trunk parameter '" +
                                            name + "'");
            if (loaded->shape() != fresh_trunk.at(name).shape())
                throw std::invalid_argument("train: checkpoint shape mismatch for '" + name +
                                            "'");
        }
        for (const auto& name : fresh_trunk.names())
            fresh_trunk.at(name) = *init_trunk->find(name);
    }
    result.trunk = std::move(fresh_trunk);

    const std::size_t total_steps = cfg.epochs * scenes.size();
    AdamWConfig ocfg;
    ocfg.lr = cfg.lr;
    ocfg.weight_decay = cfg.weight_decay;
    ocfg.cosine_decay = cfg.cosine_decay;
    ocfg.total_steps = total_steps;
    AdamW trunk_opt(ocfg, result.trunk.total_size());
    AdamW det_opt(ocfg, result.det_head.total_size());
    AdamW pred_opt(ocfg, result.pred_head.total_size());

    BalanceSchedule schedule = cfg.schedule;
    schedule.step = 0;
    Rng order_rng = Rng::derive(cfg.seed, 0xb1);

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<std::size_t> order(scenes.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        for (std::size_t i = order.size(); i > 1; --i) {
            const std::size_t j = order_rng.uniform_index(i);
            std::swap(order[i - 1], order[j]);
        }
        for (std::size_t oi = 0; oi < order.size(); ++oi) {
            const Scene& scene = scenes[order[oi]];
            Tape t;
            Binding trunk = bind_params(t, result.trunk, true);
            Binding det = bind_params(t, result.det_head, true);
            Binding pred = bind_params(t, result.pred_head, true);
            NodeId fused = trunk_forward(t, scene, spec, mcfg, trunk);
            HeadOutputs heads = heads_forward(t, fused, det, pred);
            TaskLosses losses = task_losses(t, heads, scene, spec, mcfg);

            StepLogRow row;
            row.step = schedule.step;
            row.loss_det = t.value(losses.detection).item();
            row.loss_pred = t.value(losses.prediction).item();
            if (!std::isfinite(row.loss_det) || !std::isfinite(row.loss_pred))
                throw std::runtime_error("train: non-finite loss at step " +
                                         std::to_string(schedule.step) + " (scene '" + scene.id +
                                         "')");

            const bool balanced = cfg.balance_enabled && schedule.in_balanced_phase();
            if (!balanced) {
                row.phase = 'F';
                NodeId summed = t.add(losses.detection, losses.prediction);
                GradientMap gm = t.backward(summed);
                trunk_opt.step(result.trunk,
                               flatten_gradients(gm, trunk.order, TaskId::detection).values);
                det_opt.step(result.det_head,
                             flatten_gradients(gm, det.order, TaskId::detection).values);
                pred_opt.step(result.pred_head,
                              flatten_gradients(gm, pred.order, TaskId::prediction).values);
                schedule.advance();
            } else {
                row.phase = 'B';
                GradientMap gm_det = t.backward(losses.detection);
                GradientMap gm_pred = t.backward(losses.prediction);
                TaskGradient g_det =
                    flatten_gradients(gm_det, trunk.order, TaskId::detection);
                TaskGradient g_pred =
                    flatten_gradients(gm_pred, trunk.order, TaskId::prediction);
                CombineOutcome combined =
                    hybrid_combine(schedule, g_det, g_pred, cfg.symmetric_suppression);
                row.delta = combined.delta;
                row.norm_det = std::sqrt(squared_norm(g_det.values));
                row.norm_pred = std::sqrt(squared_norm(g_pred.values));
                if (row.norm_det > 0.0 && row.norm_pred > 0.0)
                    row.cosine = combined.delta / (row.norm_det * row.norm_pred);
                trunk_opt.step(result.trunk, combined.shared_grad);
                det_opt.step(result.det_head,
                             flatten_gradients(gm_det, det.order, TaskId::detection).values);
                pred_opt.step(result.pred_head,
                              flatten_gradients(gm_pred, pred.order, TaskId::prediction).values);
            }
            result.log.push_back(row);
        }
    }
    return result;
}

// Per-step conflict diagnostics without parameter updates.
inline std::vector<StepLogRow> diagnose_conflicts(const ParamStore& trunk_store,
                                                  const ParamStore& det_store,
                                                  const ParamStore& pred_store,
                                                  const std::vector<Scene>& scenes,
                                                  const VoxelSpec& spec, const ModelConfig& mcfg,
                                                  std::size_t steps) {
    if (scenes.empty()) throw std::invalid_argument("diagnose: need at least one scene");
    std::vector<StepLogRow> rows;
    rows.reserve(steps);
    for (std::size_t s = 0; s < steps; ++s) {
        const Scene& scene = scenes[s % scenes.size()];
        Tape t;
        Binding trunk = bind_params(t, trunk_store, true);
        Binding det = bind_params(t, det_store, true);
        Binding pred = bind_params(t, pred_store, true);
        NodeId fused = trunk_forward(t, scene, spec, mcfg, trunk);
        HeadOutputs heads = heads_forward(t, fused, det, pred);
        TaskLosses losses = task_losses(t, heads, scene, spec, mcfg);
        GradientMap gm_det = t.backward(losses.detection);
        GradientMap gm_pred = t.backward(losses.prediction);
        TaskGradient g_det = flatten_gradients(gm_det, trunk.order, TaskId::detection);
        TaskGradient g_pred = flatten_gradients(gm_pred, trunk.order, TaskId::prediction);

        StepLogRow row;
        row.step = s;
        row.phase = 'D';
        row.delta = conflict_delta(g_det, g_pred);
        row.norm_det = std::sqrt(squared_norm(g_det.values));
        row.norm_pred = std::sqrt(squared_norm(g_pred.values));
        if (row.norm_det > 0.0 && row.norm_pred > 0.0)
            row.cosine = row.delta / (row.norm_det * row.norm_pred);
        row.loss_det = t.value(losses.detection).item();
        row.loss_pred = t.value(losses.prediction).item();
        rows.push_back(row);
    }
    return rows;
}

}  // namespace coop
