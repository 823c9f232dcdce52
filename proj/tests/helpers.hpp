#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "cooplearn/autodiff.hpp"
#include "cooplearn/numarray.hpp"
#include "cooplearn/rng.hpp"

namespace coop::testutil {

// Builds a scalar root from freshly inserted parameter leaves.
using GraphBuilder = std::function<NodeId(Tape&, const std::vector<NodeId>&)>;

struct FdReport {
    double max_rel_error = 0.0;
    std::size_t checked = 0;
};

inline double rel_error(double a, double b) {
    const double denom = std::max(1.0, std::max(std::fabs(a), std::fabs(b)));
    return std::fabs(a - b) / denom;
}

// Central finite differences against reverse-mode gradients, perturbing every
// element of every parameter.
inline FdReport check_against_fd(const std::vector<NumArray>& params, const GraphBuilder& build,
                                 double eps = 1e-5) {
    auto eval = [&](const std::vector<NumArray>& p) {
        Tape tape;
        std::vector<NodeId> ids;
        ids.reserve(p.size());
        for (const auto& a : p) ids.push_back(tape.param(a));
        return tape.value(build(tape, ids)).item();
    };

    Tape tape;
    std::vector<NodeId> ids;
    for (const auto& a : params) ids.push_back(tape.param(a));
    GradientMap gm = tape.backward(build(tape, ids));

    FdReport report;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        const NumArray& grad = gm.at(ids[pi]);
        for (std::size_t k = 0; k < params[pi].size(); ++k) {
            std::vector<NumArray> bumped = params;
            bumped[pi][k] += eps;
            const double fp = eval(bumped);
            bumped[pi][k] -= 2.0 * eps;
            const double fm = eval(bumped);
            const double fd = (fp - fm) / (2.0 * eps);
            report.max_rel_error = std::max(report.max_rel_error, rel_error(grad[k], fd));
            ++report.checked;
        }
    }
    return report;
}

inline NumArray random_array(Rng& rng, std::vector<std::size_t> shape, double lo = -1.0,
                             double hi = 1.0) {
    NumArray out = NumArray::zeros(std::move(shape));
    for (auto& v : out.values()) v = rng.uniform(lo, hi);
    return out;
}

}  // namespace coop::testutil
