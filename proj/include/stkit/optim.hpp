#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "stkit/autodiff.hpp"
#include "stkit/errors.hpp"

namespace stkit {

struct AdamConfig {
    double lr = 2e-4;
    double beta1 = 0.9;
    double beta2 = 0.98;
    double epsilon = 1e-8;
};

// Bias-corrected Adam. Moment buffers are keyed by parameter name, so every
// parameter passed to step() must carry a unique non-empty name.
class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {
        if (cfg_.beta1 <= 0.0 || cfg_.beta1 >= 1.0 || cfg_.beta2 <= 0.0 || cfg_.beta2 >= 1.0)
            throw ConfigError("Adam: betas must lie in (0,1)");
    }

    const AdamConfig& config() const { return cfg_; }
    std::size_t step_count() const { return step_count_; }

    // lr_scale multiplies the base rate (warm-up / decay schedules).
    void step(const std::vector<NodePtr>& params, double lr_scale = 1.0) {
        ++step_count_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_count_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_count_));
        const double rate = cfg_.lr * lr_scale;
        for (const auto& p : params) {
            if (p->name.empty()) throw ConfigError("Adam: parameter without a name");
            if (!p->grad.all_finite())
                throw DivergenceError("Adam: non-finite gradient in '" + p->name + "' at step " +
                                      std::to_string(step_count_));
            auto& [m, v] = moments_[p->name];
            if (m.size() == 0) {
                m = Matrix(p->value.rows(), p->value.cols());
                v = Matrix(p->value.rows(), p->value.cols());
            }
            if (!m.same_shape(p->value))
                throw ShapeError("Adam: moment shape " + m.shape_str() + " vs parameter '" +
                                 p->name + "' " + p->value.shape_str());
            for (std::size_t i = 0; i < p->value.size(); ++i) {
                const double g = p->grad.raw()[i];
                double& mi = m.raw()[i];
                double& vi = v.raw()[i];
                mi = cfg_.beta1 * mi + (1.0 - cfg_.beta1) * g;
                vi = cfg_.beta2 * vi + (1.0 - cfg_.beta2) * g * g;
                const double m_hat = mi / bc1;
                const double v_hat = vi / bc2;
                p->value.raw()[i] -= rate * m_hat / (std::sqrt(v_hat) + cfg_.epsilon);
            }
        }
    }

private:
    AdamConfig cfg_;
    std::size_t step_count_ = 0;
    std::unordered_map<std::string, std::pair<Matrix, Matrix>> moments_;
};

// Linear warm-up followed by inverse square root decay; scale(warmup) == 1.
struct WarmupInvSqrtSchedule {
    std::size_t warmup_steps = 1000;

    double scale(std::size_t step) const {
        if (step == 0) step = 1;
        const double w = static_cast<double>(warmup_steps ? warmup_steps : 1);
        const double s = static_cast<double>(step);
        return std::min(s / w, std::sqrt(w / s));
    }
};

// Constant for the first part of training, then linear decay down to
// final_scale at total_steps.
struct ConstThenDecaySchedule {
    std::size_t total_steps = 1;
    double constant_fraction = 0.2;
    double final_scale = 0.01;

    double scale(std::size_t step) const {
        const double t = static_cast<double>(std::min(step, total_steps));
        const double knee = constant_fraction * static_cast<double>(total_steps);
        if (t <= knee || total_steps == 0) return 1.0;
        const double span = static_cast<double>(total_steps) - knee;
        const double frac = span > 0.0 ? (t - knee) / span : 1.0;
        return 1.0 + frac * (final_scale - 1.0);
    }
};

} // namespace stkit
