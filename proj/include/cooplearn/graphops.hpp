#pragma once

#include <array>
#include <cstddef>
#include <vector>

#include "cooplearn/autodiff.hpp"
#include "cooplearn/numarray.hpp"

namespace coop {

// Composite graph builders assembled from the primitive op set.
namespace gops {

inline NodeId const_full(Tape& t, const std::vector<std::size_t>& shape, double v) {
    return t.constant(NumArray::full(shape, v));
}

// x[n,k] . W[k,m] + broadcast bias b[1,m]
inline NodeId affine(Tape& t, NodeId x, NodeId w, NodeId b) {
    const std::size_t n = t.value(x).shape()[0];
    NodeId ones = const_full(t, {n, 1}, 1.0);
    return t.add(t.matmul(x, w), t.matmul(ones, b));
}

inline NodeId neg(Tape& t, NodeId x) { return t.scale(x, -1.0); }

// max(x, lo) elementwise, relu-based; gradient is 0 below the bound.
inline NodeId clamp_min(Tape& t, NodeId x, double lo) {
    NodeId c = const_full(t, t.value(x).shape(), lo);
    return t.add(t.relu(t.sub(x, c)), c);
}

// min(x, hi) elementwise.
inline NodeId clamp_max(Tape& t, NodeId x, double hi) {
    NodeId c = const_full(t, t.value(x).shape(), hi);
    return t.sub(c, t.relu(t.sub(c, x)));
}

inline NodeId clamp(Tape& t, NodeId x, double lo, double hi) {
    return clamp_max(t, clamp_min(t, x, lo), hi);
}

inline NodeId abs(Tape& t, NodeId x) { return t.add(t.relu(x), t.relu(neg(t, x))); }

// Huber with unit transition: 0.5 e^2 - 0.5 relu(|e|-1)^2.
inline NodeId smooth_l1(Tape& t, NodeId err) {
    NodeId e2 = t.mul(err, err);
    NodeId over = t.relu(t.sub(abs(t, err), const_full(t, t.value(err).shape(), 1.0)));
    return t.sub(t.scale(e2, 0.5), t.scale(t.mul(over, over), 0.5));
}

// exp(x) as sigmoid(x) / (1 - sigmoid(x)); callers keep x <= 0 (max-shifted)
// so the denominator stays in [0.5, 1].
inline NodeId exp_nonpos(Tape& t, NodeId x) {
    NodeId s = t.sigmoid(x);
    NodeId denom = t.sub(const_full(t, t.value(x).shape(), 1.0), s);
    return t.mul(s, t.pow_scalar(denom, -1.0));
}

// Column-wise softmax across a list of [n,1] score columns, numerically
// stabilized by subtracting the per-row maximum.
inline std::vector<NodeId> softmax_columns(Tape& t, const std::vector<NodeId>& scores) {
    if (scores.size() == 1) {
        return {const_full(t, t.value(scores[0]).shape(), 1.0)};
    }
    NodeId stacked = t.concat(scores, 1);                     // [n, N]
    NodeId negmax = t.min_reduce(t.scale(stacked, -1.0), 1);  // [n]
    const std::size_t n = t.value(negmax).shape()[0];
    NodeId maxcol = t.scale(t.reshape(negmax, {n, 1}), -1.0);
    std::vector<NodeId> exps;
    exps.reserve(scores.size());
    for (NodeId s : scores) exps.push_back(exp_nonpos(t, t.sub(s, maxcol)));
    NodeId denom = exps[0];
    for (std::size_t i = 1; i < exps.size(); ++i) denom = t.add(denom, exps[i]);
    NodeId inv = t.pow_scalar(denom, -1.0);
    std::vector<NodeId> weights;
    weights.reserve(exps.size());
    for (NodeId e : exps) weights.push_back(t.mul(e, inv));
    return weights;
}

// [n,1] column replicated across m columns.
inline NodeId broadcast_col(Tape& t, NodeId col, std::size_t m) {
    return t.matmul(col, const_full(t, {1, m}, 1.0));
}

}  // namespace gops

}  // namespace coop
