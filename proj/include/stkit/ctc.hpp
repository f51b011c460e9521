#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "stkit/autodiff.hpp"
#include "stkit/errors.hpp"

namespace stkit {

// Index 0 of the CTC vocabulary is always the blank symbol.
inline constexpr int kCtcBlank = 0;

// Per-frame log-distribution over the ASR vocabulary (blank at column 0).
struct CtcPosterior {
    NodePtr log_probs; // n' x |V|

    std::size_t frames() const { return log_probs->rows(); }
    std::size_t vocab_size() const { return log_probs->cols(); }
};

namespace detail {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

inline double log_add(double a, double b) {
    if (a == kNegInf) return b;
    if (b == kNegInf) return a;
    const double mx = std::max(a, b);
    return mx + std::log(std::exp(a - mx) + std::exp(b - mx));
}

inline void validate_posterior(const CtcPosterior& posterior) {
    const Matrix& lp = posterior.log_probs->value;
    if (lp.rows() == 0 || lp.cols() < 2)
        throw ShapeError("ctc: posterior must be n x |V| with |V| >= 2, got " + lp.shape_str());
    for (std::size_t t = 0; t < lp.rows(); ++t) {
        double s = 0.0;
        for (std::size_t k = 0; k < lp.cols(); ++k) s += std::exp(lp(t, k));
        if (std::fabs(s - 1.0) > 1e-9)
            throw DataError("ctc: posterior row " + std::to_string(t) +
                            " exponentiates to " + std::to_string(s) + ", expected 1");
    }
}

inline std::size_t adjacent_repeats(const std::vector<int>& target) {
    std::size_t r = 0;
    for (std::size_t i = 1; i < target.size(); ++i)
        if (target[i] == target[i - 1]) ++r;
    return r;
}

} // namespace detail

// Negative log-probability of the target under all monotone blank-augmented
// alignments, via the forward recursion over the 2L+1 extended label
// sequence, entirely in log space. Differentiable through the posterior.
inline NodePtr ctc_loss(const CtcPosterior& posterior, const std::vector<int>& target) {
    detail::validate_posterior(posterior);
    const Matrix& lp = posterior.log_probs->value;
    const std::size_t frames = lp.rows();
    const std::size_t vocab = lp.cols();

    if (target.empty()) throw DataError("ctc_loss: empty target");
    for (int t : target) {
        if (t == kCtcBlank) throw DataError("ctc_loss: target contains the blank symbol");
        if (t < 0 || static_cast<std::size_t>(t) >= vocab)
            throw DataError("ctc_loss: target id " + std::to_string(t) + " outside vocabulary of " +
                            std::to_string(vocab));
    }
    const std::size_t needed = target.size() + detail::adjacent_repeats(target);
    if (frames < needed)
        throw InfeasibleAlignmentError("ctc_loss: " + std::to_string(frames) + " frames cannot align a target needing " +
                                       std::to_string(needed));

    const std::size_t L = target.size();
    const std::size_t S = 2 * L + 1;
    auto ext_label = [&](std::size_t s) -> int {
        return (s % 2 == 1) ? target[(s - 1) / 2] : kCtcBlank;
    };

    constexpr double ninf = detail::kNegInf;
    Matrix alpha(frames, S, ninf);
    alpha(0, 0) = lp(0, ext_label(0));
    if (S > 1) alpha(0, 1) = lp(0, ext_label(1));
    for (std::size_t t = 1; t < frames; ++t)
        for (std::size_t s = 0; s < S; ++s) {
            double a = alpha(t - 1, s);
            if (s >= 1) a = detail::log_add(a, alpha(t - 1, s - 1));
            if (s >= 2 && ext_label(s) != kCtcBlank && ext_label(s) != ext_label(s - 2))
                a = detail::log_add(a, alpha(t - 1, s - 2));
            if (a != ninf) alpha(t, s) = a + lp(t, ext_label(s));
        }

    double log_p = alpha(frames - 1, S - 1);
    if (S > 1) log_p = detail::log_add(log_p, alpha(frames - 1, S - 2));
    if (log_p == ninf)
        throw InfeasibleAlignmentError("ctc_loss: no feasible alignment path");

    auto out = detail::make_op(Matrix(1, 1, -log_p), {posterior.log_probs});
    if (out->requires_grad) {
        // Backward lattice pass: beta(t, s) covers emissions t+1..T-1, so
        // alpha + beta is the full log-mass through state s at time t.
        Matrix beta(frames, S, ninf);
        beta(frames - 1, S - 1) = 0.0;
        if (S > 1) beta(frames - 1, S - 2) = 0.0;
        for (std::size_t t = frames - 1; t-- > 0;)
            for (std::size_t s = 0; s < S; ++s) {
                double b = ninf;
                for (std::size_t nxt = s; nxt < std::min(S, s + 3); ++nxt) {
                    if (nxt == s + 2 && (ext_label(nxt) == kCtcBlank || ext_label(nxt) == ext_label(s)))
                        continue;
                    if (beta(t + 1, nxt) != ninf)
                        b = detail::log_add(b, beta(t + 1, nxt) + lp(t + 1, ext_label(nxt)));
                }
                beta(t, s) = b;
            }

        Matrix dloss(frames, vocab); // d(-log P)/d log_probs
        for (std::size_t t = 0; t < frames; ++t) {
            std::vector<double> mass(vocab, ninf);
            for (std::size_t s = 0; s < S; ++s) {
                if (alpha(t, s) == ninf || beta(t, s) == ninf) continue;
                const int k = ext_label(s);
                mass[k] = detail::log_add(mass[k], alpha(t, s) + beta(t, s));
            }
            for (std::size_t k = 0; k < vocab; ++k)
                if (mass[k] != ninf) dloss(t, k) = -std::exp(mass[k] - log_p);
        }

        Node* post = posterior.log_probs.get();
        Node* op = out.get();
        out->backward_fn = [post, op, dloss] {
            const double g = op->grad.raw()[0];
            for (std::size_t i = 0; i < dloss.size(); ++i)
                post->grad.raw()[i] += g * dloss.raw()[i];
        };
    }
    return out;
}

// Per-frame argmax (ties to the lower index), collapse adjacent repeats,
// drop blanks.
inline std::vector<int> ctc_greedy_decode(const Matrix& log_probs) {
    std::vector<int> out;
    int prev = -1;
    for (std::size_t t = 0; t < log_probs.rows(); ++t) {
        int best = 0;
        for (std::size_t k = 1; k < log_probs.cols(); ++k)
            if (log_probs(t, k) > log_probs(t, best)) best = static_cast<int>(k);
        if (best != prev && best != kCtcBlank) out.push_back(best);
        prev = best;
    }
    return out;
}

inline std::vector<int> ctc_greedy_decode(const CtcPosterior& posterior) {
    return ctc_greedy_decode(posterior.log_probs->value);
}

// Result of collapsing frame representations along argmax runs. When every
// frame is blank there is nothing to emit; `empty` tells the caller to skip
// the example.
struct CompressedSequence {
    NodePtr features; // n'' x d, null when empty
    std::vector<int> labels; // one non-blank label per compressed frame
    bool empty = false;

    std::size_t frames() const { return features ? features->rows() : 0; }
};

// Groups consecutive frames with equal argmax prediction, emits the mean of
// each non-blank group, and removes blank groups. Differentiable w.r.t. the
// features (each output row is a mean of input rows).
inline CompressedSequence ctc_compress(const NodePtr& features, const Matrix& posterior_log_probs) {
    if (features->rows() != posterior_log_probs.rows())
        throw ShapeError("ctc_compress: features " + features->value.shape_str() + " vs posterior " +
                         posterior_log_probs.shape_str());
    const std::size_t frames = features->rows();
    const std::size_t d = features->cols();

    // Run-length encode the argmax sequence.
    struct Run {
        int label;
        std::size_t start, len;
    };
    std::vector<Run> runs;
    for (std::size_t t = 0; t < frames; ++t) {
        int best = 0;
        for (std::size_t k = 1; k < posterior_log_probs.cols(); ++k)
            if (posterior_log_probs(t, k) > posterior_log_probs(t, best)) best = static_cast<int>(k);
        if (!runs.empty() && runs.back().label == best)
            ++runs.back().len;
        else
            runs.push_back({best, t, 1});
    }

    CompressedSequence result;
    std::vector<Run> kept;
    for (const auto& r : runs)
        if (r.label != kCtcBlank) {
            kept.push_back(r);
            result.labels.push_back(r.label);
        }
    if (kept.empty()) {
        result.empty = true;
        return result;
    }

    Matrix v(kept.size(), d);
    for (std::size_t i = 0; i < kept.size(); ++i) {
        const double inv = 1.0 / static_cast<double>(kept[i].len);
        for (std::size_t t = kept[i].start; t < kept[i].start + kept[i].len; ++t)
            for (std::size_t j = 0; j < d; ++j) v(i, j) += features->value(t, j) * inv;
    }
    auto out = detail::make_op(std::move(v), {features});
    if (out->requires_grad) {
        Node* fp = features.get();
        Node* op = out.get();
        out->backward_fn = [fp, op, kept] {
            for (std::size_t i = 0; i < kept.size(); ++i) {
                const double inv = 1.0 / static_cast<double>(kept[i].len);
                for (std::size_t t = kept[i].start; t < kept[i].start + kept[i].len; ++t)
                    for (std::size_t j = 0; j < op->grad.cols(); ++j)
                        fp->grad(t, j) += op->grad(i, j) * inv;
            }
        };
    }
    result.features = out;
    return result;
}

} // namespace stkit
