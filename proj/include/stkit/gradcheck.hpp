#pragma once

#include <functional>
#include <vector>

#include "stkit/autodiff.hpp"

namespace stkit {

// A scalar-valued graph builder: given parameter nodes (same shapes as the
// init matrices), returns a 1x1 loss node. Must be pure so it can be
// re-evaluated at perturbed parameters.
using ScalarFn = std::function<NodePtr(const std::vector<NodePtr>&)>;

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::size_t entries_checked = 0;
};

namespace detail {

inline double eval_scalar(const ScalarFn& f, const std::vector<Matrix>& values) {
    std::vector<NodePtr> params;
    params.reserve(values.size());
    for (const auto& v : values) params.push_back(Node::parameter(v));
    return f(params)->scalar();
}

} // namespace detail

// Compares reverse-mode gradients against central finite differences at the
// given step. Relative error uses a floor so that near-zero gradients do not
// turn rounding noise into spurious failures.
inline GradCheckReport grad_check(const ScalarFn& f, const std::vector<Matrix>& inits,
                                  double step = 1e-5, double floor = 1e-6) {
    std::vector<NodePtr> params;
    params.reserve(inits.size());
    for (const auto& v : inits) params.push_back(Node::parameter(v));
    auto loss = f(params);
    backward(loss);

    GradCheckReport report;
    std::vector<Matrix> work = inits;
    for (std::size_t p = 0; p < work.size(); ++p) {
        for (std::size_t i = 0; i < work[p].size(); ++i) {
            const double saved = work[p].raw()[i];
            work[p].raw()[i] = saved + step;
            const double f_plus = detail::eval_scalar(f, work);
            work[p].raw()[i] = saved - step;
            const double f_minus = detail::eval_scalar(f, work);
            work[p].raw()[i] = saved;

            const double fd = (f_plus - f_minus) / (2.0 * step);
            const double ad = params[p]->grad.raw()[i];
            const double denom = std::max(std::max(std::fabs(fd), std::fabs(ad)), floor);
            report.max_rel_err = std::max(report.max_rel_err, std::fabs(fd - ad) / denom);
            ++report.entries_checked;
        }
    }
    return report;
}

} // namespace stkit
