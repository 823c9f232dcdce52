#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "cooplearn/geom.hpp"
#include "cooplearn/model.hpp"

namespace coop {

// BEV polygon-intersection over union of two oriented boxes.
inline double rotated_iou(const DetectionBox& a, const DetectionBox& b) {
    if (a.length <= 0.0 || a.width <= 0.0 || b.length <= 0.0 || b.width <= 0.0)
        throw std::invalid_argument("rotated_iou: degenerate box with non-positive extent");
    return oriented_box_iou(a.cx, a.cy, a.length, a.width, a.yaw, b.cx, b.cy, b.length, b.width,
                            b.yaw);
}

struct MatchResult {
    struct TruePositive {
        std::size_t det = 0;
        std::size_t gt = 0;
        double iou = 0.0;
    };
    std::vector<TruePositive> tps;
    std::vector<std::size_t> fp_dets;
    std::vector<std::size_t> fn_gts;
};

// Greedy matching: detections in descending score order each claim the
// unmatched ground truth with the highest IoU at or above the threshold.
inline MatchResult match_detections(const std::vector<DetectionBox>& dets,
                                    const std::vector<DetectionBox>& gts,
                                    double iou_thr = 0.5) {
    std::vector<std::size_t> order(dets.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return dets[a].score > dets[b].score;
    });

    MatchResult out;
    std::vector<bool> gt_taken(gts.size(), false);
    for (std::size_t oi = 0; oi < order.size(); ++oi) {
        const std::size_t di = order[oi];
        double best_iou = 0.0;
        std::size_t best_gt = gts.size();
        for (std::size_t gi = 0; gi < gts.size(); ++gi) {
            if (gt_taken[gi]) continue;
            const double iou = rotated_iou(dets[di], gts[gi]);
            if (iou >= iou_thr && iou > best_iou) {
                best_iou = iou;
                best_gt = gi;
            }
        }
        if (best_gt < gts.size()) {
            gt_taken[best_gt] = true;
            out.tps.push_back({di, best_gt, best_iou});
        } else {
            out.fp_dets.push_back(di);
        }
    }
    for (std::size_t gi = 0; gi < gts.size(); ++gi)
        if (!gt_taken[gi]) out.fn_gts.push_back(gi);
    return out;
}

// All-point interpolated AP over a score-ranked detection list. Entries are
// (score, is_true_positive); ties and merge order must already be resolved
// deterministically by the caller's sort keys.
inline double average_precision_ranked(std::vector<std::pair<double, bool>> scored,
                                       std::size_t n_gt) {
    if (n_gt == 0) throw std::invalid_argument("average_precision: zero ground truths");
    std::stable_sort(scored.begin(), scored.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    const std::size_t n = scored.size();
    std::vector<double> precision(n), recall(n);
    std::size_t tp = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (scored[i].second) ++tp;
        precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
        recall[i] = static_cast<double>(tp) / static_cast<double>(n_gt);
    }
    // precision envelope: running max from the right
    for (std::size_t i = n; i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
    double ap = 0.0;
    double prev_recall = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        ap += (recall[i] - prev_recall) * precision[i];
        prev_recall = recall[i];
    }
    return ap;
}

struct EvalScene {
    std::vector<DetectionBox> dets;
    std::vector<DetectionBox> gts;
};

// Pools detections across scenes (sorted by score desc, then scene id, then
// detection index) after per-scene greedy matching.
inline double average_precision(const std::vector<EvalScene>& scenes, double iou_thr = 0.5) {
    std::vector<std::tuple<double, std::size_t, std::size_t, bool>> pooled;
    std::size_t n_gt = 0;
    for (std::size_t si = 0; si < scenes.size(); ++si) {
        n_gt += scenes[si].gts.size();
        MatchResult match = match_detections(scenes[si].dets, scenes[si].gts, iou_thr);
        std::vector<bool> is_tp(scenes[si].dets.size(), false);
        for (const auto& tp : match.tps) is_tp[tp.det] = true;
        for (std::size_t di = 0; di < scenes[si].dets.size(); ++di)
            pooled.emplace_back(scenes[si].dets[di].score, si, di, is_tp[di]);
    }
    if (n_gt == 0) throw std::invalid_argument("average_precision: zero ground truths");
    std::sort(pooled.begin(), pooled.end(), [](const auto& a, const auto& b) {
        if (std::get<0>(a) != std::get<0>(b)) return std::get<0>(a) > std::get<0>(b);
        if (std::get<1>(a) != std::get<1>(b)) return std::get<1>(a) < std::get<1>(b);
        return std::get<2>(a) < std::get<2>(b);
    });
    std::vector<std::pair<double, bool>> scored;
    scored.reserve(pooled.size());
    for (const auto& e : pooled) scored.emplace_back(std::get<0>(e), std::get<3>(e));
    return average_precision_ranked(std::move(scored), n_gt);
}

struct TrajectoryErrors {
    double ade = 0.0;
    double fde = 0.0;
    double mr = 0.0;  // fraction with final error > 2 m
    std::size_t count = 0;
};

constexpr double kMissThreshold = 2.0;

using Waypoints = std::vector<std::array<double, 2>>;

// ADE/FDE/MR over matched (predicted, ground-truth) future pairs; absent when
// nothing matched.
inline std::optional<TrajectoryErrors> trajectory_errors(
    const std::vector<std::pair<Waypoints, Waypoints>>& matched) {
    if (matched.empty()) return std::nullopt;
    TrajectoryErrors out;
    out.count = matched.size();
    std::size_t misses = 0;
    for (const auto& [pred, gt] : matched) {
        if (pred.size() != gt.size() || pred.empty())
            throw std::invalid_argument("trajectory_errors: horizon mismatch (" +
                                        std::to_string(pred.size()) + " vs " +
                                        std::to_string(gt.size()) + ")");
        double acc = 0.0;
        for (std::size_t k = 0; k < pred.size(); ++k)
            acc += std::hypot(pred[k][0] - gt[k][0], pred[k][1] - gt[k][1]);
        out.ade += acc / static_cast<double>(pred.size());
        const double fin = std::hypot(pred.back()[0] - gt.back()[0], pred.back()[1] - gt.back()[1]);
        out.fde += fin;
        if (fin > kMissThreshold) ++misses;
    }
    out.ade /= static_cast<double>(out.count);
    out.fde /= static_cast<double>(out.count);
    out.mr = static_cast<double>(misses) / static_cast<double>(out.count);
    return out;
}

// EPA = (|matched hits with FDE < tau| - alpha * N_FP) / N_GT, unclamped.
inline double epa(std::size_t hits, std::size_t n_fp, std::size_t n_gt, double tau = 2.0,
                  double alpha = 0.5) {
    (void)tau;
    if (n_gt == 0) throw std::invalid_argument("epa: zero ground truths");
    return (static_cast<double>(hits) - alpha * static_cast<double>(n_fp)) /
           static_cast<double>(n_gt);
}

struct MetricsReport {
    double ap = 0.0;
    std::optional<double> ade, fde, mr;
    double epa = 0.0;
    std::size_t n_gt = 0;
    std::size_t n_tp = 0;
    std::size_t n_fp = 0;
    std::size_t hits = 0;  // TPs whose FDE < tau
};

struct EvalSceneFull {
    std::vector<Detection> dets;  // decoded boxes with trajectories
    std::vector<DetectionBox> gt_boxes;
    std::vector<Waypoints> gt_futures;  // aligned with gt_boxes
};

constexpr double kEpaTau = 2.0;
constexpr double kEpaAlpha = 0.5;

// Full evaluation over held-out scenes: AP at the IoU threshold plus pooled
// trajectory metrics and EPA over the per-scene greedy matches.
inline MetricsReport evaluate(const std::vector<EvalSceneFull>& scenes, double iou_thr = 0.5,
                              double tau = kEpaTau, double alpha = kEpaAlpha) {
    MetricsReport report;
    std::vector<EvalScene> ap_scenes;
    std::vector<std::pair<Waypoints, Waypoints>> matched_futures;
    for (const auto& scene : scenes) {
        EvalScene s;
        for (const auto& d : scene.dets) s.dets.push_back(d.box);
        s.gts = scene.gt_boxes;
        report.n_gt += scene.gt_boxes.size();

        MatchResult match = match_detections(s.dets, s.gts, iou_thr);
        report.n_tp += match.tps.size();
        report.n_fp += match.fp_dets.size();
        for (const auto& tp : match.tps) {
            const Waypoints& pred = scene.dets[tp.det].trajectory.waypoints;
            const Waypoints& gt = scene.gt_futures[tp.gt];
            matched_futures.emplace_back(pred, gt);
            const double fde =
                std::hypot(pred.back()[0] - gt.back()[0], pred.back()[1] - gt.back()[1]);
            if (fde < tau) ++report.hits;
        }
        ap_scenes.push_back(std::move(s));
    }
    if (report.n_gt == 0) throw std::invalid_argument("evaluate: zero ground truths");
    bool any_dets = false;
    for (const auto& s : ap_scenes)
        if (!s.dets.empty()) any_dets = true;
    report.ap = any_dets ? average_precision(ap_scenes, iou_thr) : 0.0;
    if (auto errs = trajectory_errors(matched_futures)) {
        report.ade = errs->ade;
        report.fde = errs->fde;
        report.mr = errs->mr;
    }
    report.epa = epa(report.hits, report.n_fp, report.n_gt, tau, alpha);
    return report;
}

}  // namespace coop
