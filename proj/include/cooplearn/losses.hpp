#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "cooplearn/autodiff.hpp"
#include "cooplearn/graphops.hpp"

namespace coop {

struct ChamferConfig {
    std::size_t predicted_points = 20;
};

struct OccFocalConfig {
    double alpha = 2.0;
    double gamma = 0.25;
};

constexpr double kProbEps = 1e-7;

// Symmetric Chamfer between a predicted point set on the tape and a fixed
// target set: mean over each set of the squared distance to its nearest
// neighbor in the other. Gradients flow through the nearest-neighbor
// assignments held fixed by min_reduce's argmin.
inline NodeId chamfer_graph(Tape& t, NodeId pred,
                            const std::vector<std::array<double, 3>>& target) {
    const NumArray& P = t.value(pred);
    if (P.rank() != 2 || P.shape()[1] != 3)
        throw std::invalid_argument("chamfer: predicted set must be [n,3], got " + P.shape_str());
    const std::size_t n = P.shape()[0];
    const std::size_t m = target.size();
    if (n == 0 || m == 0) throw std::invalid_argument("chamfer: point sets must be non-empty");

    NumArray target_t = NumArray::zeros({3, m});  // transposed target
    NumArray target_sq = NumArray::zeros({1, m});
    for (std::size_t j = 0; j < m; ++j) {
        double sq = 0.0;
        for (int d = 0; d < 3; ++d) {
            target_t.at(d, j) = target[j][d];
            sq += target[j][d] * target[j][d];
        }
        target_sq.at(0, j) = sq;
    }

    NodeId pred_sq = t.matmul(t.mul(pred, pred), gops::const_full(t, {3, 1}, 1.0));  // [n,1]
    NodeId lhs = t.matmul(pred_sq, gops::const_full(t, {1, m}, 1.0));                // [n,m]
    NodeId rhs = t.matmul(gops::const_full(t, {n, 1}, 1.0), t.constant(target_sq));  // [n,m]
    NodeId cross = t.matmul(pred, t.constant(target_t));                             // [n,m]
    // D[i,j] = |p_i|^2 + |q_j|^2 - 2 p_i.q_j; relu guards cancellation noise.
    NodeId dist = t.relu(t.sub(t.add(lhs, rhs), t.scale(cross, 2.0)));
    NodeId fwd = t.mean(t.min_reduce(dist, 1));
    NodeId bwd = t.mean(t.min_reduce(dist, 0));
    return t.add(fwd, bwd);
}

struct LossWithGrad {
    double loss = 0.0;
    std::vector<std::array<double, 3>> point_grads;  // chamfer: d loss / d pred
    std::vector<double> prob_grads;                  // focal: d loss / d prob
};

inline LossWithGrad chamfer_loss(const std::vector<std::array<double, 3>>& pred,
                                 const std::vector<std::array<double, 3>>& target) {
    if (pred.empty() || target.empty())
        throw std::invalid_argument("chamfer: point sets must be non-empty");
    Tape t;
    NumArray p = NumArray::zeros({pred.size(), 3});
    for (std::size_t i = 0; i < pred.size(); ++i)
        for (int d = 0; d < 3; ++d) p.at(i, d) = pred[i][d];
    NodeId pid = t.param(std::move(p));
    NodeId root = chamfer_graph(t, pid, target);
    GradientMap gm = t.backward(root);
    LossWithGrad out;
    out.loss = t.value(root).item();
    const NumArray& g = gm.at(pid);
    out.point_grads.resize(pred.size());
    for (std::size_t i = 0; i < pred.size(); ++i)
        for (int d = 0; d < 3; ++d) out.point_grads[i][d] = g.at(i, d);
    return out;
}

// Focal binary occupancy loss, mean over labeled voxels:
//   positives:  -alpha (1 - Pr)^gamma log(Pr)
//   negatives:  -alpha (Pr)^gamma     log(1 - Pr)
// Probabilities are clamped to [eps, 1-eps] on the graph.
inline NodeId occupancy_focal_graph(Tape& t, NodeId probs,
                                    const std::vector<std::uint8_t>& labels,
                                    const OccFocalConfig& cfg = {}) {
    const NumArray& P = t.value(probs);
    if (P.size() != labels.size())
        throw std::invalid_argument("focal: " + std::to_string(P.size()) + " probabilities vs " +
                                    std::to_string(labels.size()) + " labels");
    if (P.size() == 0) throw std::invalid_argument("focal: no labeled voxels");
    NumArray pos = NumArray::zeros(P.shape());
    NumArray neg = NumArray::zeros(P.shape());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        pos[i] = labels[i] ? 1.0 : 0.0;
        neg[i] = labels[i] ? 0.0 : 1.0;
    }
    NodeId p = gops::clamp(t, probs, kProbEps, 1.0 - kProbEps);
    NodeId q = t.sub(gops::const_full(t, P.shape(), 1.0), p);
    NodeId pos_term = t.mul(t.constant(std::move(pos)), t.mul(t.pow_scalar(q, cfg.gamma), t.log(p)));
    NodeId neg_term = t.mul(t.constant(std::move(neg)), t.mul(t.pow_scalar(p, cfg.gamma), t.log(q)));
    const double scale = -cfg.alpha / static_cast<double>(labels.size());
    return t.scale(t.sum(t.add(pos_term, neg_term)), scale);
}

inline LossWithGrad occupancy_focal_loss(const std::vector<double>& probs,
                                         const std::vector<std::uint8_t>& labels,
                                         const OccFocalConfig& cfg = {}) {
    if (probs.size() != labels.size())
        throw std::invalid_argument("focal: " + std::to_string(probs.size()) +
                                    " probabilities vs " + std::to_string(labels.size()) +
                                    " labels");
    Tape t;
    NodeId pid = t.param(NumArray::vec(probs));
    NodeId root = occupancy_focal_graph(t, pid, labels, cfg);
    GradientMap gm = t.backward(root);
    LossWithGrad out;
    out.loss = t.value(root).item();
    out.prob_grads = gm.at(pid).values();
    return out;
}

}  // namespace coop
