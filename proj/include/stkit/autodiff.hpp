#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "stkit/errors.hpp"
#include "stkit/matrix.hpp"

namespace stkit {

class Node;
using NodePtr = std::shared_ptr<Node>;

// One vertex of a define-by-run computation graph. Values are computed
// eagerly when an op constructs the node; backward() replays the tape in
// reverse topological order, visiting each node exactly once and summing
// gradient contributions from all consumers.
class Node {
public:
    Matrix value;
    Matrix grad; // same shape as value, starts at zero
    bool requires_grad = false;
    std::string name; // non-empty for named parameters
    std::vector<NodePtr> parents;
    std::function<void()> backward_fn;

    static NodePtr constant(Matrix v) {
        auto n = std::make_shared<Node>();
        n->grad = Matrix(v.rows(), v.cols());
        n->value = std::move(v);
        return n;
    }

    static NodePtr parameter(Matrix v, std::string name = "") {
        auto n = constant(std::move(v));
        n->requires_grad = true;
        n->name = std::move(name);
        return n;
    }

    std::size_t rows() const { return value.rows(); }
    std::size_t cols() const { return value.cols(); }

    double scalar() const {
        if (value.size() != 1)
            throw ShapeError("Node::scalar: value is " + value.shape_str());
        return value.raw()[0];
    }

    void zero_grad() { grad.fill(0.0); }
};

namespace detail {

inline NodePtr make_op(Matrix value, std::initializer_list<NodePtr> parents) {
    auto out = std::make_shared<Node>();
    out->grad = Matrix(value.rows(), value.cols());
    out->value = std::move(value);
    for (const auto& p : parents)
        if (p->requires_grad) out->requires_grad = true;
    if (out->requires_grad) out->parents.assign(parents.begin(), parents.end());
    return out;
}

inline NodePtr make_op(Matrix value, const std::vector<NodePtr>& parents) {
    auto out = std::make_shared<Node>();
    out->grad = Matrix(value.rows(), value.cols());
    out->value = std::move(value);
    for (const auto& p : parents)
        if (p->requires_grad) out->requires_grad = true;
    if (out->requires_grad) out->parents = parents;
    return out;
}

} // namespace detail

// Reverse-mode sweep from a scalar root. Gradients accumulate into each
// reachable node's grad; call zero_grad on parameters between steps.
inline void backward(const NodePtr& root) {
    if (root->value.size() != 1)
        throw ShapeError("backward: root must be a 1x1 scalar, got " + root->value.shape_str());
    if (!root->requires_grad) return;

    // Iterative post-order DFS; parents precede children in `order`.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root.get(), 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root->grad.raw()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backward_fn) (*it)->backward_fn();
}

// ---------------------------------------------------------------------------
// Elementwise and linear-algebra ops
// ---------------------------------------------------------------------------

inline NodePtr add(const NodePtr& a, const NodePtr& b) {
    if (!a->value.same_shape(b->value))
        throw ShapeError("add: " + a->value.shape_str() + " vs " + b->value.shape_str());
    Matrix v = a->value;
    for (std::size_t i = 0; i < v.size(); ++i) v.raw()[i] += b->value.raw()[i];
    auto out = detail::make_op(std::move(v), {a, b});
    if (out->requires_grad) {
        Node* ap = a.get();
        Node* bp = b.get();
        Node* op = out.get();
        out->backward_fn = [ap, bp, op] {
            if (ap->requires_grad)
                for (std::size_t i = 0; i < op->grad.size(); ++i) ap->grad.raw()[i] += op->grad.raw()[i];
            if (bp->requires_grad)
                for (std::size_t i = 0; i < op->grad.size(); ++i) bp->grad.raw()[i] += op->grad.raw()[i];
        };
    }
    return out;
}

inline NodePtr sub(const NodePtr& a, const NodePtr& b) {
    if (!a->value.same_shape(b->value))
        throw ShapeError("sub: " + a->value.shape_str() + " vs " + b->value.shape_str());
    Matrix v = a->value;
    for (std::size_t i = 0; i < v.size(); ++i) v.raw()[i] -= b->value.raw()[i];
    auto out = detail::make_op(std::move(v), {a, b});
    if (out->requires_grad) {
        Node* ap = a.get();
        Node* bp = b.get();
        Node* op = out.get();
        out->backward_fn = [ap, bp, op] {
            if (ap->requires_grad)
                for (std::size_t i = 0; i < op->grad.size(); ++i) ap->grad.raw()[i] += op->grad.raw()[i];
            if (bp->requires_grad)
                for (std::size_t i = 0; i < op->grad.size(); ++i) bp->grad.raw()[i] -= op->grad.raw()[i];
        };
    }
    return out;
}

inline NodePtr mul(const NodePtr& a, const NodePtr& b) {
    if (!a->value.same_shape(b->value))
        throw ShapeError("mul: " + a->value.shape_str() + " vs " + b->value.shape_str());
    Matrix v = a->value;
    for (std::size_t i = 0; i < v.size(); ++i) v.raw()[i] *= b->value.raw()[i];
    auto out = detail::make_op(std::move(v), {a, b});
    if (out->requires_grad) {
        Node* ap = a.get();
        Node* bp = b.get();
        Node* op = out.get();
        out->backward_fn = [ap, bp, op] {
            if (ap->requires_grad)
                for (std::size_t i = 0; i < op->grad.size(); ++i)
                    ap->grad.raw()[i] += op->grad.raw()[i] * bp->value.raw()[i];
            if (bp->requires_grad)
                for (std::size_t i = 0; i < op->grad.size(); ++i)
                    bp->grad.raw()[i] += op->grad.raw()[i] * ap->value.raw()[i];
        };
    }
    return out;
}

inline NodePtr scale(const NodePtr& a, double c) {
    Matrix v = a->value;
    for (double& x : v.raw()) x *= c;
    auto out = detail::make_op(std::move(v), {a});
    if (out->requires_grad) {
        Node* ap = a.get();
        Node* op = out.get();
        out->backward_fn = [ap, op, c] {
            for (std::size_t i = 0; i < op->grad.size(); ++i) ap->grad.raw()[i] += c * op->grad.raw()[i];
        };
    }
    return out;
}

inline NodePtr neg(const NodePtr& a) { return scale(a, -1.0); }

inline NodePtr matmul(const NodePtr& a, const NodePtr& b) {
    if (a->cols() != b->rows())
        throw ShapeError("matmul: " + a->value.shape_str() + " x " + b->value.shape_str());
    const std::size_t n = a->rows(), k = a->cols(), m = b->cols();
    Matrix v(n, m);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = a->value(i, p);
            if (aip == 0.0) continue;
            for (std::size_t j = 0; j < m; ++j) v(i, j) += aip * b->value(p, j);
        }
    auto out = detail::make_op(std::move(v), {a, b});
    if (out->requires_grad) {
        Node* ap = a.get();
        Node* bp = b.get();
        Node* op = out.get();
        out->backward_fn = [ap, bp, op, n, k, m] {
            if (ap->requires_grad) // dA = dOut * B^T
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < m; ++j) {
                        const double g = op->grad(i, j);
                        if (g == 0.0) continue;
                        for (std::size_t p = 0; p < k; ++p) ap->grad(i, p) += g * bp->value(p, j);
                    }
            if (bp->requires_grad) // dB = A^T * dOut
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t p = 0; p < k; ++p) {
                        const double av = ap->value(i, p);
                        if (av == 0.0) continue;
                        for (std::size_t j = 0; j < m; ++j) bp->grad(p, j) += av * op->grad(i, j);
                    }
        };
    }
    return out;
}

inline NodePtr transpose(const NodePtr& a) {
    Matrix v(a->cols(), a->rows());
    for (std::size_t i = 0; i < a->rows(); ++i)
        for (std::size_t j = 0; j < a->cols(); ++j) v(j, i) = a->value(i, j);
    auto out = detail::make_op(std::move(v), {a});
    if (out->requires_grad) {
        Node* ap = a.get();
        Node* op = out.get();
        out->backward_fn = [ap, op] {
            for (std::size_t i = 0; i < op->grad.rows(); ++i)
                for (std::size_t j = 0; j < op->grad.cols(); ++j) ap->grad(j, i) += op->grad(i, j);
        };
    }
    return out;
}

inline NodePtr sum_all(const NodePtr& a) {
    double s = 0.0;
    for (double x : a->value.raw()) s += x;
    auto out = detail::make_op(Matrix(1, 1, s), {a});
    if (out->requires_grad) {
        Node* ap = a.get();
        Node* op = out.get();
        out->backward_fn = [ap, op] {
            const double g = op->grad.raw()[0];
            for (double& x : ap->grad.raw()) x += g;
        };
    }
    return out;
}

inline NodePtr mean_all(const NodePtr& a) {
    if (a->value.size() == 0) throw ShapeError("mean_all: empty matrix");
    double s = 0.0;
    for (double x : a->value.raw()) s += x;
    const double inv = 1.0 / static_cast<double>(a->value.size());
    auto out = detail::make_op(Matrix(1, 1, s * inv), {a});
    if (out->requires_grad) {
        Node* ap = a.get();
        Node* op = out.get();
        out->backward_fn = [ap, op, inv] {
            const double g = op->grad.raw()[0] * inv;
            for (double& x : ap->grad.raw()) x += g;
        };
    }
    return out;
}

inline NodePtr slice_rows(const NodePtr& a, std::size_t start, std::size_t count) {
    if (start + count > a->rows())
        throw ShapeError("slice_rows: [" + std::to_string(start) + ", " + std::to_string(start + count) +
                         ") out of " + std::to_string(a->rows()) + " rows");
    Matrix v(count, a->cols());
    for (std::size_t i = 0; i < count; ++i)
        for (std::size_t j = 0; j < a->cols(); ++j) v(i, j) = a->value(start + i, j);
    auto out = detail::make_op(std::move(v), {a});
    if (out->requires_grad) {
        Node* ap = a.get();
        Node* op = out.get();
        out->backward_fn = [ap, op, start, count] {
            for (std::size_t i = 0; i < count; ++i)
                for (std::size_t j = 0; j < op->grad.cols(); ++j)
                    ap->grad(start + i, j) += op->grad(i, j);
        };
    }
    return out;
}

inline NodePtr concat_rows(const std::vector<NodePtr>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no inputs");
    const std::size_t cols = parts[0]->cols();
    std::size_t rows = 0;
    for (const auto& p : parts) {
        if (p->cols() != cols) throw ShapeError("concat_rows: column mismatch");
        rows += p->rows();
    }
    Matrix v(rows, cols);
    std::size_t r = 0;
    for (const auto& p : parts)
        for (std::size_t i = 0; i < p->rows(); ++i, ++r)
            for (std::size_t j = 0; j < cols; ++j) v(r, j) = p->value(i, j);
    auto out = detail::make_op(std::move(v), parts);
    if (out->requires_grad) {
        Node* op = out.get();
        std::vector<Node*> raw;
        raw.reserve(parts.size());
        for (const auto& p : parts) raw.push_back(p.get());
        out->backward_fn = [raw, op] {
            std::size_t r = 0;
            for (Node* p : raw) {
                if (p->requires_grad)
                    for (std::size_t i = 0; i < p->value.rows(); ++i)
                        for (std::size_t j = 0; j < p->value.cols(); ++j)
                            p->grad(i, j) += op->grad(r + i, j);
                r += p->value.rows();
            }
        };
    }
    return out;
}

// Adds a 1xM row vector to every row of an NxM matrix.
inline NodePtr add_rowvec(const NodePtr& a, const NodePtr& r) {
    if (r->rows() != 1 || r->cols() != a->cols())
        throw ShapeError("add_rowvec: " + a->value.shape_str() + " + " + r->value.shape_str());
    Matrix v = a->value;
    for (std::size_t i = 0; i < a->rows(); ++i)
        for (std::size_t j = 0; j < a->cols(); ++j) v(i, j) += r->value(0, j);
    auto out = detail::make_op(std::move(v), {a, r});
    if (out->requires_grad) {
        Node* ap = a.get();
        Node* rp = r.get();
        Node* op = out.get();
        out->backward_fn = [ap, rp, op] {
            if (ap->requires_grad)
                for (std::size_t i = 0; i < op->grad.size(); ++i) ap->grad.raw()[i] += op->grad.raw()[i];
            if (rp->requires_grad)
                for (std::size_t i = 0; i < op->grad.rows(); ++i)
                    for (std::size_t j = 0; j < op->grad.cols(); ++j) rp->grad(0, j) += op->grad(i, j);
        };
    }
    return out;
}

// Adds an Nx1 column vector to every column of an NxM matrix.
inline NodePtr add_colvec(const NodePtr& a, const NodePtr& c) {
    if (c->cols() != 1 || c->rows() != a->rows())
        throw ShapeError("add_colvec: " + a->value.shape_str() + " + " + c->value.shape_str());
    Matrix v = a->value;
    for (std::size_t i = 0; i < a->rows(); ++i)
        for (std::size_t j = 0; j < a->cols(); ++j) v(i, j) += c->value(i, 0);
    auto out = detail::make_op(std::move(v), {a, c});
    if (out->requires_grad) {
        Node* ap = a.get();
        Node* cp = c.get();
        Node* op = out.get();
        out->backward_fn = [ap, cp, op] {
            if (ap->requires_grad)
                for (std::size_t i = 0; i < op->grad.size(); ++i) ap->grad.raw()[i] += op->grad.raw()[i];
            if (cp->requires_grad)
                for (std::size_t i = 0; i < op->grad.rows(); ++i)
                    for (std::size_t j = 0; j < op->grad.cols(); ++j) cp->grad(i, 0) += op->grad(i, j);
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// Nonlinearities and normalizations
// ---------------------------------------------------------------------------

inline NodePtr exp_elem(const NodePtr& a) {
    Matrix v = a->value;
    for (double& x : v.raw()) x = std::exp(x);
    auto out = detail::make_op(std::move(v), {a});
    if (out->requires_grad) {
        Node* ap = a.get();
        Node* op = out.get();
        out->backward_fn = [ap, op] {
            for (std::size_t i = 0; i < op->grad.size(); ++i)
                ap->grad.raw()[i] += op->grad.raw()[i] * op->value.raw()[i];
        };
    }
    return out;
}

// Exact GELU, x * Phi(x).
inline NodePtr gelu(const NodePtr& a) {
    Matrix v = a->value;
    for (double& x : v.raw()) x = 0.5 * x * (1.0 + std::erf(x * 0.70710678118654752440));
    auto out = detail::make_op(std::move(v), {a});
    if (out->requires_grad) {
        Node* ap = a.get();
        Node* op = out.get();
        out->backward_fn = [ap, op] {
            constexpr double inv_sqrt2 = 0.70710678118654752440;
            constexpr double inv_sqrt2pi = 0.39894228040143267794;
            for (std::size_t i = 0; i < op->grad.size(); ++i) {
                const double x = ap->value.raw()[i];
                const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
                const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
                ap->grad.raw()[i] += op->grad.raw()[i] * (cdf + x * pdf);
            }
        };
    }
    return out;
}

// Row-wise layer normalization, no learnable gain/bias.
inline NodePtr layer_norm(const NodePtr& a, double eps = 1e-5) {
    const std::size_t n = a->rows(), d = a->cols();
    if (d == 0) throw ShapeError("layer_norm: empty rows");
    Matrix v(n, d);
    for (std::size_t i = 0; i < n; ++i) {
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += a->value(i, j);
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double c = a->value(i, j) - mu;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double inv_sd = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j) v(i, j) = (a->value(i, j) - mu) * inv_sd;
    }
    auto out = detail::make_op(std::move(v), {a});
    if (out->requires_grad) {
        Node* ap = a.get();
        Node* op = out.get();
        out->backward_fn = [ap, op, n, d, eps] {
            for (std::size_t i = 0; i < n; ++i) {
                double mu = 0.0;
                for (std::size_t j = 0; j < d; ++j) mu += ap->value(i, j);
                mu /= static_cast<double>(d);
                double var = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    const double c = ap->value(i, j) - mu;
                    var += c * c;
                }
                var /= static_cast<double>(d);
                const double inv_sd = 1.0 / std::sqrt(var + eps);
                double g_mean = 0.0, gy_mean = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    g_mean += op->grad(i, j);
                    gy_mean += op->grad(i, j) * op->value(i, j);
                }
                g_mean /= static_cast<double>(d);
                gy_mean /= static_cast<double>(d);
                for (std::size_t j = 0; j < d; ++j)
                    ap->grad(i, j) += inv_sd * (op->grad(i, j) - g_mean - op->value(i, j) * gy_mean);
            }
        };
    }
    return out;
}

enum class Axis { Rows, Cols };

namespace detail {

inline void log_softmax_rows_values(const Matrix& in, Matrix& out) {
    for (std::size_t i = 0; i < in.rows(); ++i) {
        double mx = in(i, 0);
        for (std::size_t j = 1; j < in.cols(); ++j) mx = std::max(mx, in(i, j));
        double lse = 0.0;
        for (std::size_t j = 0; j < in.cols(); ++j) lse += std::exp(in(i, j) - mx);
        lse = mx + std::log(lse);
        for (std::size_t j = 0; j < in.cols(); ++j) out(i, j) = in(i, j) - lse;
    }
}

} // namespace detail

// Max-shifted log-sum-exp normalization per slice; exponentials of each
// output slice sum to 1.
inline NodePtr log_softmax(const NodePtr& a, Axis axis = Axis::Rows) {
    if (a->value.size() == 0) throw ShapeError("log_softmax: empty input");
    if (axis == Axis::Cols) return transpose(log_softmax(transpose(a), Axis::Rows));
    Matrix v(a->rows(), a->cols());
    detail::log_softmax_rows_values(a->value, v);
    auto out = detail::make_op(std::move(v), {a});
    if (out->requires_grad) {
        Node* ap = a.get();
        Node* op = out.get();
        out->backward_fn = [ap, op] {
            for (std::size_t i = 0; i < op->grad.rows(); ++i) {
                double gsum = 0.0;
                for (std::size_t j = 0; j < op->grad.cols(); ++j) gsum += op->grad(i, j);
                for (std::size_t j = 0; j < op->grad.cols(); ++j)
                    ap->grad(i, j) += op->grad(i, j) - std::exp(op->value(i, j)) * gsum;
            }
        };
    }
    return out;
}

inline NodePtr softmax_rows(const NodePtr& a) {
    Matrix v(a->rows(), a->cols());
    detail::log_softmax_rows_values(a->value, v);
    for (double& x : v.raw()) x = std::exp(x);
    auto out = detail::make_op(std::move(v), {a});
    if (out->requires_grad) {
        Node* ap = a.get();
        Node* op = out.get();
        out->backward_fn = [ap, op] {
            for (std::size_t i = 0; i < op->grad.rows(); ++i) {
                double dot = 0.0;
                for (std::size_t j = 0; j < op->grad.cols(); ++j)
                    dot += op->grad(i, j) * op->value(i, j);
                for (std::size_t j = 0; j < op->grad.cols(); ++j)
                    ap->grad(i, j) += op->value(i, j) * (op->grad(i, j) - dot);
            }
        };
    }
    return out;
}

// Log-sum-exp over each row, NxM -> Nx1.
inline NodePtr logsumexp_rows(const NodePtr& a) {
    Matrix v(a->rows(), 1);
    for (std::size_t i = 0; i < a->rows(); ++i) {
        double mx = a->value(i, 0);
        for (std::size_t j = 1; j < a->cols(); ++j) mx = std::max(mx, a->value(i, j));
        double s = 0.0;
        for (std::size_t j = 0; j < a->cols(); ++j) s += std::exp(a->value(i, j) - mx);
        v(i, 0) = mx + std::log(s);
    }
    auto out = detail::make_op(std::move(v), {a});
    if (out->requires_grad) {
        Node* ap = a.get();
        Node* op = out.get();
        out->backward_fn = [ap, op] {
            for (std::size_t i = 0; i < ap->value.rows(); ++i) {
                const double g = op->grad(i, 0);
                if (g == 0.0) continue;
                for (std::size_t j = 0; j < ap->value.cols(); ++j)
                    ap->grad(i, j) += g * std::exp(ap->value(i, j) - op->value(i, 0));
            }
        };
    }
    return out;
}

// Log-sum-exp over each column, NxM -> 1xM.
inline NodePtr logsumexp_cols(const NodePtr& a) {
    Matrix v(1, a->cols());
    for (std::size_t j = 0; j < a->cols(); ++j) {
        double mx = a->value(0, j);
        for (std::size_t i = 1; i < a->rows(); ++i) mx = std::max(mx, a->value(i, j));
        double s = 0.0;
        for (std::size_t i = 0; i < a->rows(); ++i) s += std::exp(a->value(i, j) - mx);
        v(0, j) = mx + std::log(s);
    }
    auto out = detail::make_op(std::move(v), {a});
    if (out->requires_grad) {
        Node* ap = a.get();
        Node* op = out.get();
        out->backward_fn = [ap, op] {
            for (std::size_t j = 0; j < ap->value.cols(); ++j) {
                const double g = op->grad(0, j);
                if (g == 0.0) continue;
                for (std::size_t i = 0; i < ap->value.rows(); ++i)
                    ap->grad(i, j) += g * std::exp(ap->value(i, j) - op->value(0, j));
            }
        };
    }
    return out;
}

// Scales every row to unit L2 norm; rows shorter than `floor` are divided by
// `floor` instead, which keeps the map differentiable near zero.
inline NodePtr row_l2_normalize(const NodePtr& a, double floor = 1e-12) {
    const std::size_t n = a->rows(), d = a->cols();
    Matrix v(n, d);
    std::vector<double> norms(n);
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) s += a->value(i, j) * a->value(i, j);
        norms[i] = std::max(std::sqrt(s), floor);
        for (std::size_t j = 0; j < d; ++j) v(i, j) = a->value(i, j) / norms[i];
    }
    auto out = detail::make_op(std::move(v), {a});
    if (out->requires_grad) {
        Node* ap = a.get();
        Node* op = out.get();
        out->backward_fn = [ap, op, norms, floor, n, d] {
            for (std::size_t i = 0; i < n; ++i) {
                const double inv = 1.0 / norms[i];
                double true_norm = 0.0;
                for (std::size_t j = 0; j < d; ++j) true_norm += ap->value(i, j) * ap->value(i, j);
                true_norm = std::sqrt(true_norm);
                if (true_norm <= floor) {
                    // clamped branch: plain scaling
                    for (std::size_t j = 0; j < d; ++j) ap->grad(i, j) += op->grad(i, j) * inv;
                } else {
                    double dot = 0.0;
                    for (std::size_t j = 0; j < d; ++j) dot += op->grad(i, j) * op->value(i, j);
                    for (std::size_t j = 0; j < d; ++j)
                        ap->grad(i, j) += (op->grad(i, j) - op->value(i, j) * dot) * inv;
                }
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// Sequence ops
// ---------------------------------------------------------------------------

// Strided 1-D cross-correlation without padding. Input is T x d_in, the
// kernel is (width * d_in) x d_out with the window slices stacked row-wise:
// out[t] = sum_u x[t*stride + u] * K[u*d_in .. (u+1)*d_in, :].
inline NodePtr conv1d_strided(const NodePtr& x, const NodePtr& kernel, std::size_t stride) {
    if (stride == 0) throw ConfigError("conv1d_strided: stride must be >= 1");
    const std::size_t d_in = x->cols();
    if (d_in == 0 || kernel->rows() % d_in != 0)
        throw ShapeError("conv1d_strided: kernel rows " + std::to_string(kernel->rows()) +
                         " not a multiple of input dim " + std::to_string(d_in));
    const std::size_t width = kernel->rows() / d_in;
    const std::size_t t_in = x->rows();
    if (t_in < width)
        throw ShapeError("conv1d_strided: sequence length " + std::to_string(t_in) +
                         " shorter than kernel width " + std::to_string(width));
    const std::size_t d_out = kernel->cols();
    const std::size_t t_out = (t_in - width) / stride + 1;
    Matrix v(t_out, d_out);
    for (std::size_t t = 0; t < t_out; ++t)
        for (std::size_t u = 0; u < width; ++u)
            for (std::size_t c = 0; c < d_in; ++c) {
                const double xv = x->value(t * stride + u, c);
                if (xv == 0.0) continue;
                for (std::size_t o = 0; o < d_out; ++o) v(t, o) += xv * kernel->value(u * d_in + c, o);
            }
    auto out = detail::make_op(std::move(v), {x, kernel});
    if (out->requires_grad) {
        Node* xp = x.get();
        Node* kp = kernel.get();
        Node* op = out.get();
        out->backward_fn = [xp, kp, op, width, stride, d_in, d_out, t_out] {
            for (std::size_t t = 0; t < t_out; ++t)
                for (std::size_t u = 0; u < width; ++u)
                    for (std::size_t c = 0; c < d_in; ++c) {
                        const std::size_t row = t * stride + u;
                        const std::size_t krow = u * d_in + c;
                        if (xp->requires_grad) {
                            double s = 0.0;
                            for (std::size_t o = 0; o < d_out; ++o)
                                s += op->grad(t, o) * kp->value(krow, o);
                            xp->grad(row, c) += s;
                        }
                        if (kp->requires_grad) {
                            const double xv = xp->value(row, c);
                            if (xv != 0.0)
                                for (std::size_t o = 0; o < d_out; ++o)
                                    kp->grad(krow, o) += xv * op->grad(t, o);
                        }
                    }
        };
    }
    return out;
}

// Row lookup: out[i] = table[ids[i]]. Gradients scatter back into the table.
inline NodePtr embed(const NodePtr& table, const std::vector<int>& ids) {
    Matrix v(ids.size(), table->cols());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= table->rows())
            throw DataError("embed: id " + std::to_string(ids[i]) + " outside table of " +
                            std::to_string(table->rows()) + " rows");
        for (std::size_t j = 0; j < table->cols(); ++j) v(i, j) = table->value(ids[i], j);
    }
    auto out = detail::make_op(std::move(v), {table});
    if (out->requires_grad) {
        Node* tp = table.get();
        Node* op = out.get();
        out->backward_fn = [tp, op, ids] {
            for (std::size_t i = 0; i < ids.size(); ++i)
                for (std::size_t j = 0; j < op->grad.cols(); ++j)
                    tp->grad(ids[i], j) += op->grad(i, j);
        };
    }
    return out;
}

// Fixed sine/cosine positional encoding:
// pe[t, 2i] = sin(t / 10000^(2i/dim)), pe[t, 2i+1] = cos(same), t zero-based.
inline Matrix sinusoidal_pe(std::size_t length, std::size_t dim) {
    if (dim % 2 != 0)
        throw ConfigError("sinusoidal_pe: dim must be even, got " + std::to_string(dim));
    Matrix pe(length, dim);
    for (std::size_t t = 0; t < length; ++t)
        for (std::size_t i = 0; 2 * i < dim; ++i) {
            const double rate = std::pow(10000.0, 2.0 * static_cast<double>(i) / static_cast<double>(dim));
            const double angle = static_cast<double>(t) / rate;
            pe(t, 2 * i) = std::sin(angle);
            pe(t, 2 * i + 1) = std::cos(angle);
        }
    return pe;
}

} // namespace stkit
