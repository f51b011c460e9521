#pragma once

#include <cctype>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "stkit/errors.hpp"

namespace stkit {

struct BleuScore {
    double score = 0.0; // 0..100
    double precisions[4] = {0, 0, 0, 0}; // p1..p4
    double brevity_penalty = 1.0;
    std::size_t hyp_length = 0;
    std::size_t ref_length = 0;
    bool zero_length = false; // empty hypothesis corpus

    std::string to_json() const {
        char buf[512];
        std::snprintf(buf, sizeof(buf),
                      "{\"bleu\": %.6f, \"precisions\": [%.6f, %.6f, %.6f, %.6f], "
                      "\"brevity_penalty\": %.6f, \"hyp_length\": %zu, \"ref_length\": %zu}",
                      score, precisions[0], precisions[1], precisions[2], precisions[3],
                      brevity_penalty, hyp_length, ref_length);
        return buf;
    }
};

enum class BleuSmoothing { None, AddK };

// Frozen tokenizer: lowercase, every punctuation character becomes its own
// token, whitespace splits. A documented simplification of the usual
// moses/13a style; scores are internally consistent, not tool-identical.
inline std::vector<std::string> bleu_tokenize(const std::string& text) {
    std::vector<std::string> tokens;
    std::string current;
    auto flush = [&] {
        if (!current.empty()) {
            tokens.push_back(current);
            current.clear();
        }
    };
    for (unsigned char c : text) {
        if (std::isspace(c)) {
            flush();
        } else if (std::ispunct(c)) {
            flush();
            tokens.push_back(std::string(1, static_cast<char>(c)));
        } else {
            current += static_cast<char>(std::tolower(c));
        }
    }
    flush();
    return tokens;
}

namespace detail {

using NgramCounts = std::map<std::vector<std::string>, std::size_t>;

inline NgramCounts count_ngrams(const std::vector<std::string>& tokens, std::size_t n) {
    NgramCounts counts;
    if (tokens.size() < n) return counts;
    for (std::size_t i = 0; i + n <= tokens.size(); ++i)
        ++counts[std::vector<std::string>(tokens.begin() + i, tokens.begin() + i + n)];
    return counts;
}

} // namespace detail

// Corpus-level BLEU with clipped n-gram precision and the standard brevity
// penalty. Smoothing (add-k, k=0.1, n >= 2) is for trainer-facing use; the
// acceptance oracles run unsmoothed.
inline BleuScore corpus_bleu(const std::vector<std::string>& hypotheses,
                             const std::vector<std::string>& references, std::size_t max_n = 4,
                             BleuSmoothing smoothing = BleuSmoothing::None, double smoothing_k = 0.1) {
    if (hypotheses.size() != references.size())
        throw DataError("corpus_bleu: " + std::to_string(hypotheses.size()) + " hypotheses vs " +
                        std::to_string(references.size()) + " references");
    if (hypotheses.empty()) throw DataError("corpus_bleu: empty corpus");
    if (max_n < 1 || max_n > 4) throw ConfigError("corpus_bleu: max_n must be in 1..4");

    std::vector<std::size_t> matched(max_n, 0), total(max_n, 0);
    BleuScore result;
    for (std::size_t s = 0; s < hypotheses.size(); ++s) {
        const auto hyp = bleu_tokenize(hypotheses[s]);
        const auto ref = bleu_tokenize(references[s]);
        result.hyp_length += hyp.size();
        result.ref_length += ref.size();
        for (std::size_t n = 1; n <= max_n; ++n) {
            const auto hyp_counts = detail::count_ngrams(hyp, n);
            const auto ref_counts = detail::count_ngrams(ref, n);
            for (const auto& [gram, count] : hyp_counts) {
                total[n - 1] += count;
                const auto it = ref_counts.find(gram);
                if (it != ref_counts.end()) matched[n - 1] += std::min(count, it->second);
            }
        }
    }

    if (result.hyp_length == 0) {
        result.zero_length = true;
        return result;
    }
    result.brevity_penalty =
        result.hyp_length >= result.ref_length
            ? 1.0
            : std::exp(1.0 - static_cast<double>(result.ref_length) / static_cast<double>(result.hyp_length));

    double log_precision = 0.0;
    bool any_zero = false;
    for (std::size_t n = 1; n <= max_n; ++n) {
        double num = static_cast<double>(matched[n - 1]);
        double den = static_cast<double>(total[n - 1]);
        if (smoothing == BleuSmoothing::AddK && n >= 2) {
            num += smoothing_k;
            den += smoothing_k;
        }
        if (num <= 0.0 || den <= 0.0) {
            any_zero = true;
            result.precisions[n - 1] = 0.0;
        } else {
            result.precisions[n - 1] = num / den;
            log_precision += std::log(num / den);
        }
    }
    result.score = any_zero ? 0.0
                            : result.brevity_penalty *
                                  std::exp(log_precision / static_cast<double>(max_n)) * 100.0;
    return result;
}

} // namespace stkit
