#pragma once

#include <cmath>
#include <cstddef>
#include <deque>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cooplearn/numarray.hpp"

namespace coop {

using NodeId = std::size_t;

enum class Op {
    leaf,
    add,
    sub,
    mul,
    matmul,
    relu,
    sigmoid,
    log,
    pow_scalar,
    scale,
    sum_reduce,
    mean_reduce,
    min_reduce,
    gather_rows,
    concat,
    reshape,
};

enum class TaskId { detection, prediction };

inline const char* task_name(TaskId id) {
    return id == TaskId::detection ? "detection" : "prediction";
}

// Flat gradient of one task's loss over an ordered parameter list.
struct TaskGradient {
    TaskId task = TaskId::detection;
    std::vector<double> values;

    std::size_t size() const { return values.size(); }
};

// Parameter node id -> gradient array of the parameter's shape.
using GradientMap = std::map<NodeId, NumArray>;

// Reverse-mode tape. Forward values are computed eagerly at insertion;
// insertion order is the topological order replayed by backward().
class Tape {
public:
    NodeId param(NumArray v) { return push_leaf(std::move(v), true); }
    NodeId constant(NumArray v) { return push_leaf(std::move(v), false); }

    const NumArray& value(NodeId id) const { return nodes_.at(id).value; }
    std::size_t node_count() const { return nodes_.size(); }
    bool is_param(NodeId id) const {
        const Node& n = nodes_.at(id);
        return n.op == Op::leaf && n.requires_grad;
    }

    NodeId add(NodeId a, NodeId b) { return elementwise2(Op::add, a, b); }
    NodeId sub(NodeId a, NodeId b) { return elementwise2(Op::sub, a, b); }
    NodeId mul(NodeId a, NodeId b) { return elementwise2(Op::mul, a, b); }

    NodeId matmul(NodeId a, NodeId b) {
        const NumArray& A = value(a);
        const NumArray& B = value(b);
        if (A.rank() != 2 || B.rank() != 2 || A.shape()[1] != B.shape()[0]) {
            throw std::invalid_argument("matmul: incompatible shapes " + A.shape_str() +
                                        " and " + B.shape_str());
        }
        const std::size_t n = A.shape()[0], k = A.shape()[1], m = B.shape()[1];
        NumArray out = NumArray::zeros({n, m});
        matmul_into(A.data(), B.data(), out.data(), n, k, m);
        return push(Op::matmul, {a, b}, std::move(out));
    }

    NodeId relu(NodeId a) {
        NumArray out = value(a);
        for (auto& v : out.values()) v = v > 0.0 ? v : 0.0;
        return push(Op::relu, {a}, std::move(out));
    }

    NodeId sigmoid(NodeId a) {
        NumArray out = value(a);
        for (auto& v : out.values()) v = stable_sigmoid(v);
        return push(Op::sigmoid, {a}, std::move(out));
    }

    NodeId log(NodeId a) {
        NumArray out = value(a);
        for (auto& v : out.values()) v = std::log(v);
        return push(Op::log, {a}, std::move(out));
    }

    NodeId pow_scalar(NodeId a, double exponent) {
        NumArray out = value(a);
        for (auto& v : out.values()) v = std::pow(v, exponent);
        NodeId id = push(Op::pow_scalar, {a}, std::move(out));
        nodes_[id].scalar = exponent;
        return id;
    }

    NodeId scale(NodeId a, double factor) {
        NumArray out = value(a);
        for (auto& v : out.values()) v *= factor;
        NodeId id = push(Op::scale, {a}, std::move(out));
        nodes_[id].scalar = factor;
        return id;
    }

    NodeId sum(NodeId a) {
        double s = 0.0;
        for (double v : value(a).values()) s += v;
        return push(Op::sum_reduce, {a}, NumArray::scalar(s));
    }

    NodeId mean(NodeId a) {
        const NumArray& A = value(a);
        if (A.size() == 0)
            throw std::invalid_argument("mean: empty array " + A.shape_str());
        double s = 0.0;
        for (double v : A.values()) s += v;
        return push(Op::mean_reduce, {a}, NumArray::scalar(s / static_cast<double>(A.size())));
    }

    // axis 1: per-row minimum over columns, [n,m] -> [n]; axis 0: per-column,
    // [n,m] -> [m]. A 1-D input reduces to a scalar regardless of axis.
    // Ties resolve to the lowest index; the gradient routes to that element.
    NodeId min_reduce(NodeId a, int axis = 1) {
        const NumArray& A = value(a);
        NumArray out;
        std::vector<std::size_t> argmins;
        if (A.rank() <= 1) {
            if (A.size() == 0)
                throw std::invalid_argument("min_reduce: empty array");
            std::size_t best = 0;
            for (std::size_t i = 1; i < A.size(); ++i)
                if (A[i] < A[best]) best = i;
            out = NumArray::scalar(A[best]);
            argmins = {best};
        } else if (A.rank() == 2) {
            const std::size_t n = A.shape()[0], m = A.shape()[1];
            if (n == 0 || m == 0)
                throw std::invalid_argument("min_reduce: empty array " + A.shape_str());
            if (axis == 1) {
                out = NumArray::zeros({n});
                argmins.resize(n);
                for (std::size_t r = 0; r < n; ++r) {
                    std::size_t best = 0;
                    for (std::size_t c = 1; c < m; ++c)
                        if (A.at(r, c) < A.at(r, best)) best = c;
                    argmins[r] = best;
                    out[r] = A.at(r, best);
                }
            } else if (axis == 0) {
                out = NumArray::zeros({m});
                argmins.resize(m);
                for (std::size_t c = 0; c < m; ++c) {
                    std::size_t best = 0;
                    for (std::size_t r = 1; r < n; ++r)
                        if (A.at(r, c) < A.at(best, c)) best = r;
                    argmins[c] = best;
                    out[c] = A.at(best, c);
                }
            } else {
                throw std::invalid_argument("min_reduce: axis must be 0 or 1");
            }
        } else {
            throw std::invalid_argument("min_reduce: rank > 2 unsupported, shape " + A.shape_str());
        }
        NodeId id = push(Op::min_reduce, {a}, std::move(out));
        nodes_[id].axis = axis;
        nodes_[id].indices = std::move(argmins);
        return id;
    }

    // Row selection; indices may repeat. 1-D inputs select elements.
    NodeId gather_rows(NodeId a, std::vector<std::size_t> rows) {
        const NumArray& A = value(a);
        const std::size_t n = A.rows();
        for (std::size_t r : rows) {
            if (r >= n)
                throw std::invalid_argument("gather_rows: index " + std::to_string(r) +
                                            " out of range for shape " + A.shape_str());
        }
        NumArray out;
        if (A.rank() <= 1) {
            out = NumArray::zeros({rows.size()});
            for (std::size_t i = 0; i < rows.size(); ++i) out[i] = A[rows[i]];
        } else {
            const std::size_t m = A.shape()[1];
            out = NumArray::zeros({rows.size(), m});
            for (std::size_t i = 0; i < rows.size(); ++i)
                for (std::size_t c = 0; c < m; ++c) out.at(i, c) = A.at(rows[i], c);
        }
        NodeId id = push(Op::gather_rows, {a}, std::move(out));
        nodes_[id].indices = std::move(rows);
        return id;
    }

    // Concatenate along axis 0 (stacked rows) or axis 1 (side by side).
    NodeId concat(const std::vector<NodeId>& parts, int axis = 0) {
        if (parts.empty()) throw std::invalid_argument("concat: no inputs");
        const NumArray& first = value(parts[0]);
        NumArray out;
        if (axis == 0) {
            const std::size_t m = first.cols();
            std::size_t total_rows = 0;
            for (NodeId p : parts) {
                const NumArray& P = value(p);
                if (P.cols() != m)
                    throw std::invalid_argument("concat axis 0: column mismatch " +
                                                P.shape_str() + " vs " + first.shape_str());
                total_rows += P.rows();
            }
            out = first.rank() <= 1 && m == 1 ? NumArray::zeros({total_rows})
                                              : NumArray::zeros({total_rows, m});
            std::size_t off = 0;
            for (NodeId p : parts) {
                const NumArray& P = value(p);
                for (std::size_t i = 0; i < P.size(); ++i) out[off + i] = P[i];
                off += P.size();
            }
        } else if (axis == 1) {
            const std::size_t n = first.rows();
            std::size_t total_cols = 0;
            for (NodeId p : parts) {
                const NumArray& P = value(p);
                if (P.rows() != n)
                    throw std::invalid_argument("concat axis 1: row mismatch " + P.shape_str() +
                                                " vs " + first.shape_str());
                total_cols += P.cols();
            }
            out = NumArray::zeros({n, total_cols});
            std::size_t col_off = 0;
            for (NodeId p : parts) {
                const NumArray& P = value(p);
                const std::size_t pc = P.cols();
                for (std::size_t r = 0; r < n; ++r)
                    for (std::size_t c = 0; c < pc; ++c) out.at(r, col_off + c) = P.at(r, c);
                col_off += pc;
            }
        } else {
            throw std::invalid_argument("concat: axis must be 0 or 1");
        }
        NodeId id = push(Op::concat, parts, std::move(out));
        nodes_[id].axis = axis;
        return id;
    }

    NodeId reshape(NodeId a, std::vector<std::size_t> shape) {
        const NumArray& A = value(a);
        if (NumArray::element_count(shape) != A.size())
            throw std::invalid_argument("reshape: " + A.shape_str() + " to " +
                                        NumArray::shape_to_string(shape) +
                                        " changes element count");
        NumArray out(std::move(shape), A.values());
        return push(Op::reshape, {a}, std::move(out));
    }

    // Gradient of a scalar root w.r.t. every parameter leaf. Parameters the
    // root does not depend on get exact-zero gradients.
    GradientMap backward(NodeId root) const {
        const NumArray& rv = value(root);
        if (!rv.shape().empty())
            throw std::invalid_argument("backward: root must be scalar, got shape " +
                                        rv.shape_str());
        std::vector<NumArray> grads(nodes_.size());
        std::vector<bool> touched(nodes_.size(), false);
        auto grad_of = [&](NodeId id) -> NumArray& {
            if (!touched[id]) {
                grads[id] = NumArray::zeros(nodes_[id].value.shape());
                touched[id] = true;
            }
            return grads[id];
        };
        grad_of(root)[0] = 1.0;

        for (std::size_t i = nodes_.size(); i-- > 0;) {
            const Node& node = nodes_[i];
            if (!touched[i] || node.op == Op::leaf || !node.requires_grad) continue;
            const NumArray& g = grads[i];
            switch (node.op) {
                case Op::add:
                    accumulate(grad_of(node.inputs[0]), g, +1.0, node.inputs[0]);
                    accumulate(grad_of(node.inputs[1]), g, +1.0, node.inputs[1]);
                    break;
                case Op::sub:
                    accumulate(grad_of(node.inputs[0]), g, +1.0, node.inputs[0]);
                    accumulate(grad_of(node.inputs[1]), g, -1.0, node.inputs[1]);
                    break;
                case Op::mul: {
                    const NumArray& A = value(node.inputs[0]);
                    const NumArray& B = value(node.inputs[1]);
                    if (wants_grad(node.inputs[0])) {
                        NumArray& ga = grad_of(node.inputs[0]);
                        for (std::size_t k = 0; k < g.size(); ++k) ga[k] += g[k] * B[k];
                    }
                    if (wants_grad(node.inputs[1])) {
                        NumArray& gb = grad_of(node.inputs[1]);
                        for (std::size_t k = 0; k < g.size(); ++k) gb[k] += g[k] * A[k];
                    }
                    break;
                }
                case Op::matmul: {
                    const NumArray& A = value(node.inputs[0]);
                    const NumArray& B = value(node.inputs[1]);
                    const std::size_t n = A.shape()[0], k = A.shape()[1], m = B.shape()[1];
                    if (wants_grad(node.inputs[0])) {
                        // dA = g . B^T
                        NumArray& ga = grad_of(node.inputs[0]);
                        for (std::size_t r = 0; r < n; ++r)
                            for (std::size_t c = 0; c < m; ++c) {
                                const double gv = g.at(r, c);
                                if (gv == 0.0) continue;
                                for (std::size_t q = 0; q < k; ++q)
                                    ga.at(r, q) += gv * B.at(q, c);
                            }
                    }
                    if (wants_grad(node.inputs[1])) {
                        // dB = A^T . g
                        NumArray& gb = grad_of(node.inputs[1]);
                        for (std::size_t r = 0; r < n; ++r)
                            for (std::size_t q = 0; q < k; ++q) {
                                const double av = A.at(r, q);
                                if (av == 0.0) continue;
                                for (std::size_t c = 0; c < m; ++c)
                                    gb.at(q, c) += av * g.at(r, c);
                            }
                    }
                    break;
                }
                case Op::relu: {
                    if (!wants_grad(node.inputs[0])) break;
                    const NumArray& X = value(node.inputs[0]);
                    NumArray& gx = grad_of(node.inputs[0]);
                    for (std::size_t k = 0; k < g.size(); ++k)
                        if (X[k] > 0.0) gx[k] += g[k];
                    break;
                }
                case Op::sigmoid: {
                    if (!wants_grad(node.inputs[0])) break;
                    NumArray& gx = grad_of(node.inputs[0]);
                    for (std::size_t k = 0; k < g.size(); ++k) {
                        const double s = node.value[k];
                        gx[k] += g[k] * s * (1.0 - s);
                    }
                    break;
                }
                case Op::log: {
                    if (!wants_grad(node.inputs[0])) break;
                    const NumArray& X = value(node.inputs[0]);
                    NumArray& gx = grad_of(node.inputs[0]);
                    for (std::size_t k = 0; k < g.size(); ++k) gx[k] += g[k] / X[k];
                    break;
                }
                case Op::pow_scalar: {
                    if (!wants_grad(node.inputs[0])) break;
                    const NumArray& X = value(node.inputs[0]);
                    NumArray& gx = grad_of(node.inputs[0]);
                    const double c = node.scalar;
                    for (std::size_t k = 0; k < g.size(); ++k)
                        gx[k] += g[k] * c * std::pow(X[k], c - 1.0);
                    break;
                }
                case Op::scale: {
                    if (!wants_grad(node.inputs[0])) break;
                    accumulate(grad_of(node.inputs[0]), g, node.scalar, node.inputs[0]);
                    break;
                }
                case Op::sum_reduce: {
                    if (!wants_grad(node.inputs[0])) break;
                    NumArray& gx = grad_of(node.inputs[0]);
                    const double gv = g[0];
                    for (auto& v : gx.values()) v += gv;
                    break;
                }
                case Op::mean_reduce: {
                    if (!wants_grad(node.inputs[0])) break;
                    NumArray& gx = grad_of(node.inputs[0]);
                    const double gv = g[0] / static_cast<double>(gx.size());
                    for (auto& v : gx.values()) v += gv;
                    break;
                }
                case Op::min_reduce: {
                    if (!wants_grad(node.inputs[0])) break;
                    const NumArray& X = value(node.inputs[0]);
                    NumArray& gx = grad_of(node.inputs[0]);
                    if (X.rank() <= 1) {
                        gx[node.indices[0]] += g[0];
                    } else if (node.axis == 1) {
                        const std::size_t m = X.shape()[1];
                        for (std::size_t r = 0; r < node.indices.size(); ++r)
                            gx[r * m + node.indices[r]] += g[r];
                    } else {
                        const std::size_t m = X.shape()[1];
                        for (std::size_t c = 0; c < node.indices.size(); ++c)
                            gx[node.indices[c] * m + c] += g[c];
                    }
                    break;
                }
                case Op::gather_rows: {
                    if (!wants_grad(node.inputs[0])) break;
                    const NumArray& X = value(node.inputs[0]);
                    NumArray& gx = grad_of(node.inputs[0]);
                    const std::size_t m = X.rank() <= 1 ? 1 : X.shape()[1];
                    for (std::size_t i = 0; i < node.indices.size(); ++i)
                        for (std::size_t c = 0; c < m; ++c)
                            gx[node.indices[i] * m + c] += g[i * m + c];
                    break;
                }
                case Op::concat: {
                    if (node.axis == 0) {
                        std::size_t off = 0;
                        for (NodeId in : node.inputs) {
                            const std::size_t sz = value(in).size();
                            if (wants_grad(in)) {
                                NumArray& gi = grad_of(in);
                                for (std::size_t k = 0; k < sz; ++k) gi[k] += g[off + k];
                            }
                            off += sz;
                        }
                    } else {
                        const std::size_t n = node.value.shape()[0];
                        const std::size_t total_cols = node.value.shape()[1];
                        std::size_t col_off = 0;
                        for (NodeId in : node.inputs) {
                            const std::size_t pc = value(in).cols();
                            if (wants_grad(in)) {
                                NumArray& gi = grad_of(in);
                                for (std::size_t r = 0; r < n; ++r)
                                    for (std::size_t c = 0; c < pc; ++c)
                                        gi[r * pc + c] += g[r * total_cols + col_off + c];
                            }
                            col_off += pc;
                        }
                    }
                    break;
                }
                case Op::reshape: {
                    if (!wants_grad(node.inputs[0])) break;
                    NumArray& gx = grad_of(node.inputs[0]);
                    for (std::size_t k = 0; k < g.size(); ++k) gx[k] += g[k];
                    break;
                }
                case Op::leaf:
                    break;
            }
        }

        GradientMap gm;
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            if (nodes_[i].op == Op::leaf && nodes_[i].requires_grad) {
                gm.emplace(i, touched[i] ? std::move(grads[i])
                                         : NumArray::zeros(nodes_[i].value.shape()));
            }
        }
        return gm;
    }

private:
    struct Node {
        Op op;
        std::vector<NodeId> inputs;
        NumArray value;
        bool requires_grad = false;
        double scalar = 0.0;
        int axis = 0;
        std::vector<std::size_t> indices;
    };

    static double stable_sigmoid(double x) {
        if (x >= 0.0) {
            const double e = std::exp(-x);
            return 1.0 / (1.0 + e);
        }
        const double e = std::exp(x);
        return e / (1.0 + e);
    }

    static void matmul_into(const double* A, const double* B, double* C, std::size_t n,
                            std::size_t k, std::size_t m) {
        for (std::size_t r = 0; r < n; ++r) {
            double* crow = C + r * m;
            for (std::size_t q = 0; q < k; ++q) {
                const double av = A[r * k + q];
                if (av == 0.0) continue;
                const double* brow = B + q * m;
                for (std::size_t c = 0; c < m; ++c) crow[c] += av * brow[c];
            }
        }
    }

    bool wants_grad(NodeId id) const { return nodes_[id].requires_grad; }

    void accumulate(NumArray& dst, const NumArray& src, double factor, NodeId) const {
        for (std::size_t k = 0; k < src.size(); ++k) dst[k] += factor * src[k];
    }

    NodeId push_leaf(NumArray v, bool requires_grad) {
        Node node;
        node.op = Op::leaf;
        node.value = std::move(v);
        node.requires_grad = requires_grad;
        nodes_.push_back(std::move(node));
        return nodes_.size() - 1;
    }

    NodeId push(Op op, std::vector<NodeId> inputs, NumArray out) {
        Node node;
        node.op = op;
        node.requires_grad = false;
        for (NodeId in : inputs) {
            if (in >= nodes_.size())
                throw std::invalid_argument("tape: input id " + std::to_string(in) +
                                            " does not precede its consumer");
            node.requires_grad = node.requires_grad || nodes_[in].requires_grad;
        }
        node.inputs = std::move(inputs);
        node.value = std::move(out);
        nodes_.push_back(std::move(node));
        return nodes_.size() - 1;
    }

    NodeId elementwise2(Op op, NodeId a, NodeId b) {
        const NumArray& A = value(a);
        const NumArray& B = value(b);
        if (!A.same_shape(B)) {
            const char* name = op == Op::add ? "add" : op == Op::sub ? "sub" : "mul";
            throw std::invalid_argument(std::string(name) + ": shape mismatch " + A.shape_str() +
                                        " vs " + B.shape_str());
        }
        NumArray out = A;
        switch (op) {
            case Op::add:
                for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] + B[i];
                break;
            case Op::sub:
                for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] - B[i];
                break;
            case Op::mul:
                for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] * B[i];
                break;
            default:
                break;
        }
        return push(op, {a, b}, std::move(out));
    }

    // deque: references returned by value() stay valid across later insertions
    std::deque<Node> nodes_;
};

// Serializes gradients for the listed parameters, in order, into one flat
// vector. Every id must be a parameter present in the map.
inline TaskGradient flatten_gradients(const GradientMap& gm, const std::vector<NodeId>& order,
                                      TaskId task) {
    TaskGradient out;
    out.task = task;
    std::size_t total = 0;
    for (NodeId id : order) {
        auto it = gm.find(id);
        if (it == gm.end())
            throw std::invalid_argument("flatten_gradients: parameter id " + std::to_string(id) +
                                        " missing from gradient map");
        total += it->second.size();
    }
    out.values.reserve(total);
    for (NodeId id : order) {
        const NumArray& g = gm.at(id);
        out.values.insert(out.values.end(), g.values().begin(), g.values().end());
    }
    return out;
}

// Inverse of flatten_gradients given the same order and per-parameter shapes.
inline GradientMap unflatten_gradients(const TaskGradient& tg, const std::vector<NodeId>& order,
                                       const std::vector<std::vector<std::size_t>>& shapes) {
    if (order.size() != shapes.size())
        throw std::invalid_argument("unflatten_gradients: order/shape count mismatch");
    GradientMap gm;
    std::size_t off = 0;
    for (std::size_t i = 0; i < order.size(); ++i) {
        const std::size_t n = NumArray::element_count(shapes[i]);
        if (off + n > tg.values.size())
            throw std::invalid_argument("unflatten_gradients: vector too short");
        std::vector<double> chunk(tg.values.begin() + off, tg.values.begin() + off + n);
        gm.emplace(order[i], NumArray(shapes[i], std::move(chunk)));
        off += n;
    }
    if (off != tg.values.size())
        throw std::invalid_argument("unflatten_gradients: vector too long");
    return gm;
}

}  // namespace coop
