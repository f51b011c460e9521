#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "stkit/autodiff.hpp"
#include "stkit/errors.hpp"

namespace stkit {

struct SinkhornConfig {
    double epsilon = 0.1; // entropic regularization
    std::size_t max_iterations = 200;
    double tolerance = 1e-6; // max marginal violation

    void validate() const {
        if (epsilon <= 0.0) throw ConfigError("sinkhorn: epsilon must be > 0");
        if (max_iterations < 1) throw ConfigError("sinkhorn: max_iterations must be >= 1");
    }
};

struct TransportPlan {
    Matrix plan; // n x m, entries >= 0
    std::vector<double> marginal_a, marginal_b;
    double transport_cost = 0.0; // <P, C>
    std::size_t iterations_used = 0;
    bool converged = false;
    double max_violation = 0.0;
};

inline std::vector<double> uniform_marginal(std::size_t n) {
    return std::vector<double>(n, 1.0 / static_cast<double>(n));
}

namespace detail {

inline void validate_marginals(const std::vector<double>& a, const std::vector<double>& b,
                               std::size_t n, std::size_t m) {
    if (a.size() != n || b.size() != m)
        throw ShapeError("sinkhorn: marginal sizes do not match the cost matrix");
    auto check = [](const std::vector<double>& v, const char* which) {
        double s = 0.0;
        for (double x : v) {
            if (x <= 0.0) throw DataError(std::string("sinkhorn: marginal ") + which + " must be strictly positive");
            s += x;
        }
        if (std::fabs(s - 1.0) > 1e-9)
            throw DataError(std::string("sinkhorn: marginal ") + which + " sums to " + std::to_string(s));
    };
    check(a, "a");
    check(b, "b");
}

inline double lse(const std::vector<double>& v) {
    double mx = v[0];
    for (double x : v) mx = std::max(mx, x);
    double s = 0.0;
    for (double x : v) s += std::exp(x - mx);
    return mx + std::log(s);
}

} // namespace detail

// Squared Euclidean distance between every row of x and every row of y.
inline NodePtr cost_matrix(const NodePtr& x, const NodePtr& y) {
    if (x->cols() != y->cols())
        throw ShapeError("cost_matrix: " + x->value.shape_str() + " vs " + y->value.shape_str());
    const std::size_t n = x->rows(), m = y->rows(), d = x->cols();
    Matrix v(n, m);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < d; ++k) {
                const double diff = x->value(i, k) - y->value(j, k);
                s += diff * diff;
            }
            v(i, j) = s;
        }
    auto out = detail::make_op(std::move(v), {x, y});
    if (out->requires_grad) {
        Node* xp = x.get();
        Node* yp = y.get();
        Node* op = out.get();
        out->backward_fn = [xp, yp, op, n, m, d] {
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < m; ++j) {
                    const double g = op->grad(i, j);
                    if (g == 0.0) continue;
                    for (std::size_t k = 0; k < d; ++k) {
                        const double diff = xp->value(i, k) - yp->value(j, k);
                        if (xp->requires_grad) xp->grad(i, k) += 2.0 * g * diff;
                        if (yp->requires_grad) yp->grad(j, k) -= 2.0 * g * diff;
                    }
                }
        };
    }
    return out;
}

// Log-domain Sinkhorn on plain matrices. Alternates the dual potential
// updates until the row-marginal violation (columns are exact after the g
// update) drops below tolerance or the iteration budget runs out.
// Non-convergence is reported through the flag; the plan stays usable.
inline TransportPlan sinkhorn(const Matrix& C, const std::vector<double>& a,
                              const std::vector<double>& b, const SinkhornConfig& cfg) {
    cfg.validate();
    const std::size_t n = C.rows(), m = C.cols();
    if (n == 0 || m == 0) throw ShapeError("sinkhorn: empty cost matrix");
    detail::validate_marginals(a, b, n, m);
    if (!C.all_finite()) throw NumericError("sinkhorn: non-finite cost matrix");

    const double eps = cfg.epsilon;
    std::vector<double> f(n, 0.0), g(m, 0.0);
    std::vector<double> scratch(std::max(n, m));

    TransportPlan result;
    result.marginal_a = a;
    result.marginal_b = b;

    auto row_violation = [&]() {
        double viol = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double rs = 0.0;
            for (std::size_t j = 0; j < m; ++j) rs += std::exp((f[i] + g[j] - C(i, j)) / eps);
            viol = std::max(viol, std::fabs(rs - a[i]));
        }
        return viol;
    };

    for (std::size_t it = 1; it <= cfg.max_iterations; ++it) {
        for (std::size_t i = 0; i < n; ++i) {
            scratch.resize(m);
            for (std::size_t j = 0; j < m; ++j) scratch[j] = (g[j] - C(i, j)) / eps;
            f[i] = eps * (std::log(a[i]) - detail::lse(scratch));
        }
        for (std::size_t j = 0; j < m; ++j) {
            scratch.resize(n);
            for (std::size_t i = 0; i < n; ++i) scratch[i] = (f[i] - C(i, j)) / eps;
            g[j] = eps * (std::log(b[j]) - detail::lse(scratch));
        }
        for (double x : f)
            if (!std::isfinite(x)) throw NumericError("sinkhorn: non-finite row scaling");
        for (double x : g)
            if (!std::isfinite(x)) throw NumericError("sinkhorn: non-finite column scaling");

        result.iterations_used = it;
        result.max_violation = row_violation();
        if (result.max_violation <= cfg.tolerance) {
            result.converged = true;
            break;
        }
    }

    result.plan = Matrix(n, m);
    result.transport_cost = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
            const double p = std::exp((f[i] + g[j] - C(i, j)) / eps);
            result.plan(i, j) = p;
            result.transport_cost += p * C(i, j);
        }
    return result;
}

// Differentiable transport cost <P, C>, built by unrolling `iterations`
// Sinkhorn updates as graph ops over the cost node.
inline NodePtr sinkhorn_cost_node(const NodePtr& C, const std::vector<double>& a,
                                  const std::vector<double>& b, const SinkhornConfig& cfg,
                                  std::size_t iterations) {
    cfg.validate();
    const std::size_t n = C->rows(), m = C->cols();
    detail::validate_marginals(a, b, n, m);

    std::vector<double> log_a(n), log_b(m);
    for (std::size_t i = 0; i < n; ++i) log_a[i] = std::log(a[i]);
    for (std::size_t j = 0; j < m; ++j) log_b[j] = std::log(b[j]);
    auto la = Node::constant(Matrix::col(log_a));
    auto lb = Node::constant(Matrix::row(log_b));

    const double eps = cfg.epsilon;
    auto neg_c_over_eps = scale(C, -1.0 / eps);
    auto f = Node::constant(Matrix(n, 1));
    auto g = Node::constant(Matrix(1, m));
    for (std::size_t it = 0; it < iterations; ++it) {
        auto m1 = add_rowvec(neg_c_over_eps, scale(g, 1.0 / eps));
        f = scale(sub(la, logsumexp_rows(m1)), eps);
        auto m2 = add_colvec(neg_c_over_eps, scale(f, 1.0 / eps));
        g = scale(sub(lb, logsumexp_cols(m2)), eps);
    }
    auto log_plan = add_rowvec(add_colvec(neg_c_over_eps, scale(f, 1.0 / eps)), scale(g, 1.0 / eps));
    return sum_all(mul(exp_elem(log_plan), C));
}

struct WassersteinResult {
    NodePtr loss; // scalar <P, C>
    TransportPlan plan;
};

// Sequence-level Wasserstein loss: optionally add sinusoidal positional
// encodings (scaled by pe_weight), L2-normalize rows, square-distance cost,
// Sinkhorn with uniform marginals. The value-mode solver fixes the iteration
// count, then the same updates are unrolled as graph ops for the gradient.
inline WassersteinResult wasserstein_loss(const NodePtr& speech, const NodePtr& text,
                                          const SinkhornConfig& cfg, bool with_pe = true,
                                          double pe_weight = 1.0) {
    if (speech->rows() == 0 || text->rows() == 0)
        throw ShapeError("wasserstein_loss: empty sequence");
    NodePtr x = speech, y = text;
    if (with_pe) {
        auto add_pe = [&](const NodePtr& s) {
            Matrix pe = sinusoidal_pe(s->rows(), s->cols());
            if (pe_weight != 1.0)
                for (double& v : pe.raw()) v *= pe_weight;
            return add(s, Node::constant(std::move(pe)));
        };
        x = add_pe(x);
        y = add_pe(y);
    }
    x = row_l2_normalize(x);
    y = row_l2_normalize(y);
    auto C = cost_matrix(x, y);

    const auto ua = uniform_marginal(C->rows());
    const auto ub = uniform_marginal(C->cols());
    WassersteinResult result;
    result.plan = sinkhorn(C->value, ua, ub, cfg);
    result.loss = sinkhorn_cost_node(C, ua, ub, cfg, result.plan.iterations_used);
    return result;
}

// Value-only variant for retrieval and scoring loops.
inline double wasserstein_distance(const Matrix& speech, const Matrix& text,
                                   const SinkhornConfig& cfg, bool with_pe = true,
                                   double pe_weight = 1.0) {
    auto x = Node::constant(speech);
    auto y = Node::constant(text);
    if (speech.rows() == 0 || text.rows() == 0)
        throw ShapeError("wasserstein_distance: empty sequence");
    if (with_pe) {
        Matrix px = sinusoidal_pe(speech.rows(), speech.cols());
        Matrix py = sinusoidal_pe(text.rows(), text.cols());
        if (pe_weight != 1.0) {
            for (double& v : px.raw()) v *= pe_weight;
            for (double& v : py.raw()) v *= pe_weight;
        }
        x = add(x, Node::constant(std::move(px)));
        y = add(y, Node::constant(std::move(py)));
    }
    x = row_l2_normalize(x);
    y = row_l2_normalize(y);
    auto C = cost_matrix(x, y);
    return sinkhorn(C->value, uniform_marginal(C->rows()), uniform_marginal(C->cols()), cfg).transport_cost;
}

// Exact OT cost for equal-size uniform marginals: the minimizing coupling is
// a permutation matrix scaled by 1/n, so enumerate all n! permutations.
inline double exact_ot_oracle(const Matrix& C) {
    if (C.rows() != C.cols())
        throw ShapeError("exact_ot_oracle: cost matrix must be square, got " + C.shape_str());
    const std::size_t n = C.rows();
    if (n == 0) throw ShapeError("exact_ot_oracle: empty cost matrix");
    if (n > 6) throw ConfigError("exact_ot_oracle: refusing n > 6 (factorial blowup)");
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    double best = std::numeric_limits<double>::infinity();
    do {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += C(i, perm[i]);
        best = std::min(best, s);
    } while (std::next_permutation(perm.begin(), perm.end()));
    return best / static_cast<double>(n);
}

} // namespace stkit
