#pragma once

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "stkit/errors.hpp"
#include "stkit/matrix.hpp"
#include "stkit/params.hpp"

namespace stkit {

// One dataset record: identifiers, duration, transcript, translation and an
// optional pointer to a frame-feature matrix file.
struct ParallelExample {
    std::string id;
    std::string talk_id;
    double duration = 0.0; // seconds
    std::string transcript;
    std::string translation;
    std::string features_path; // relative path to a binary matrix file, optional
    std::string source_tag;
    bool synthetic = false;
    std::string asr_hypothesis; // optional, used for WER filtering
};

// ---------------------------------------------------------------------------
// Manifest I/O: JSON lines, one example per line
// ---------------------------------------------------------------------------

inline ParallelExample parse_manifest_line(const std::string& line, std::size_t line_no) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw DataError("manifest line " + std::to_string(line_no) + ": " + e.what());
    }
    ParallelExample ex;
    ex.id = j.value("id", "");
    if (ex.id.empty()) throw DataError("manifest line " + std::to_string(line_no) + ": missing id");
    ex.talk_id = j.value("talk_id", "");
    ex.duration = j.value("duration", 0.0);
    if (j.contains("duration") && ex.duration <= 0.0)
        throw DataError("manifest line " + std::to_string(line_no) + ": duration must be > 0");
    ex.transcript = j.value("transcript", "");
    ex.translation = j.value("translation", "");
    ex.features_path = j.value("features", "");
    ex.source_tag = j.value("source_tag", "");
    ex.synthetic = j.value("synthetic", false);
    ex.asr_hypothesis = j.value("asr_hypothesis", "");
    return ex;
}

inline std::vector<ParallelExample> load_manifest(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("load_manifest: cannot open " + path);
    std::vector<ParallelExample> out;
    std::set<std::string> ids;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        auto ex = parse_manifest_line(line, line_no);
        if (!ids.insert(ex.id).second)
            throw DataError("load_manifest: duplicate id '" + ex.id + "' at line " + std::to_string(line_no));
        out.push_back(std::move(ex));
    }
    return out;
}

inline void save_manifest(const std::string& path, const std::vector<ParallelExample>& examples) {
    std::ofstream os(path);
    if (!os) throw DataError("save_manifest: cannot open " + path);
    for (const auto& ex : examples) {
        nlohmann::json j{{"id", ex.id},
                         {"talk_id", ex.talk_id},
                         {"duration", ex.duration},
                         {"transcript", ex.transcript},
                         {"translation", ex.translation},
                         {"source_tag", ex.source_tag},
                         {"synthetic", ex.synthetic}};
        if (!ex.features_path.empty()) j["features"] = ex.features_path;
        if (!ex.asr_hypothesis.empty()) j["asr_hypothesis"] = ex.asr_hypothesis;
        os << j.dump() << "\n";
    }
}

// ---------------------------------------------------------------------------
// Text normalization
// ---------------------------------------------------------------------------

// English cardinals for 0..999999, hyphenated tens-units, no "and".
inline std::string spell_number(long n) {
    if (n < 0 || n > 999999) throw DataError("spell_number: " + std::to_string(n) + " out of range");
    static const char* ones[] = {"zero", "one", "two", "three", "four", "five", "six", "seven",
                                 "eight", "nine", "ten", "eleven", "twelve", "thirteen", "fourteen",
                                 "fifteen", "sixteen", "seventeen", "eighteen", "nineteen"};
    static const char* tens[] = {"", "", "twenty", "thirty", "forty", "fifty", "sixty", "seventy",
                                 "eighty", "ninety"};
    auto under_hundred = [&](long v) -> std::string {
        if (v < 20) return ones[v];
        std::string s = tens[v / 10];
        if (v % 10) s += std::string("-") + ones[v % 10];
        return s;
    };
    auto under_thousand = [&](long v) -> std::string {
        std::string s;
        if (v >= 100) {
            s = std::string(ones[v / 100]) + " hundred";
            if (v % 100) s += " " + under_hundred(v % 100);
            return s;
        }
        return under_hundred(v);
    };
    if (n == 0) return "zero";
    std::string s;
    if (n >= 1000) {
        s = under_thousand(n / 1000) + " thousand";
        if (n % 1000) s += " " + under_thousand(n % 1000);
        return s;
    }
    return under_thousand(n);
}

enum class NormalizeMode { Asr, Mt };

namespace detail {

// letters, space, apostrophe and hyphen; hyphens appear in spelled-out
// numbers ("twenty-one") and sit in the ASR model's character vocabulary
inline bool is_ctc_char(char c) {
    return (c >= 'a' && c <= 'z') || c == ' ' || c == '\'' || c == '-';
}

// strips (...) and [...] groups, tolerating one level of nesting per pass
inline std::string strip_bracketed(std::string s) {
    bool changed = true;
    while (changed) {
        changed = false;
        std::string out;
        int depth = 0;
        char open = 0;
        for (char c : s) {
            if (depth == 0 && (c == '(' || c == '[')) {
                depth = 1;
                open = c;
                changed = true;
            } else if (depth > 0 && c == open) {
                ++depth;
            } else if (depth > 0 && ((open == '(' && c == ')') || (open == '[' && c == ']'))) {
                --depth;
            } else if (depth == 0) {
                out += c;
            }
        }
        s = out;
    }
    return s;
}

// leading "Name:" label of at most three capitalized tokens, before any
// lowercase word
inline std::string strip_speaker_label(const std::string& s) {
    std::size_t i = 0;
    while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
    std::size_t token_start = i;
    int tokens = 0;
    std::size_t j = i;
    while (j < s.size()) {
        if (s[j] == ':') {
            if (tokens >= 1 && tokens <= 3 && j > token_start) return s.substr(j + 1);
            return s;
        }
        if (std::isspace(static_cast<unsigned char>(s[j]))) {
            ++j;
            continue;
        }
        // a token must start uppercase to count toward a speaker label
        if (!std::isupper(static_cast<unsigned char>(s[j]))) return s;
        ++tokens;
        if (tokens > 3) return s;
        while (j < s.size() && !std::isspace(static_cast<unsigned char>(s[j])) && s[j] != ':') ++j;
        if (j < s.size() && s[j] == ':') {
            return s.substr(j + 1);
        }
    }
    return s;
}

inline std::vector<std::string> whitespace_tokens(const std::string& s) {
    std::vector<std::string> tokens;
    std::istringstream iss(s);
    std::string t;
    while (iss >> t) tokens.push_back(t);
    return tokens;
}

inline std::string collapse_whitespace(const std::string& s) {
    std::string out;
    bool in_space = true; // trims leading space too
    for (char c : s) {
        if (std::isspace(static_cast<unsigned char>(c))) {
            if (!in_space) out += ' ';
            in_space = true;
        } else {
            out += c;
            in_space = false;
        }
    }
    while (!out.empty() && out.back() == ' ') out.pop_back();
    return out;
}

// common UTF-8 punctuation to their ASCII equivalents
inline std::string ascii_punctuation(const std::string& s) {
    static const std::vector<std::pair<std::string, std::string>> table = {
        {"‘", "'"}, {"’", "'"}, {"“", "\""}, {"”", "\""},
        {"–", "-"}, {"—", "-"}, {"…", "..."}, {" ", " "},
    };
    std::string out = s;
    for (const auto& [from, to] : table) {
        std::size_t pos = 0;
        while ((pos = out.find(from, pos)) != std::string::npos) {
            out.replace(pos, from.size(), to);
            pos += to.size();
        }
    }
    return out;
}

} // namespace detail

// ASR mode: strip event tags and speaker labels, spell out integers,
// lowercase, and drop everything outside the CTC character set. MT mode:
// punctuation and whitespace normalization only.
inline std::string normalize_text(const std::string& input, NormalizeMode mode) {
    if (mode == NormalizeMode::Mt)
        return detail::collapse_whitespace(detail::ascii_punctuation(input));

    std::string s = detail::strip_bracketed(detail::ascii_punctuation(input));
    s = detail::strip_speaker_label(s);

    // spell out integer tokens in range; leave others to the charset filter
    std::string rebuilt;
    for (const auto& token : detail::whitespace_tokens(s)) {
        std::string word = token;
        bool numeric = !token.empty();
        for (char c : token)
            if (!std::isdigit(static_cast<unsigned char>(c))) {
                numeric = false;
                break;
            }
        if (numeric && token.size() <= 6) word = spell_number(std::stol(token));
        if (!rebuilt.empty()) rebuilt += ' ';
        rebuilt += word;
    }

    std::string lowered;
    for (char c : rebuilt) lowered += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    std::string filtered;
    for (char c : lowered)
        if (detail::is_ctc_char(c)) filtered += c;
    return detail::collapse_whitespace(filtered);
}

// ---------------------------------------------------------------------------
// Word error rate
// ---------------------------------------------------------------------------

struct EditStats {
    std::size_t edits = 0; // substitutions + insertions + deletions
    std::size_t reference_words = 0;

    double wer() const {
        return static_cast<double>(edits) / static_cast<double>(reference_words);
    }
};

inline EditStats word_edit_stats(const std::string& reference, const std::string& hypothesis) {
    const auto ref = detail::whitespace_tokens(reference);
    const auto hyp = detail::whitespace_tokens(hypothesis);
    if (ref.empty()) throw DataError("wer: empty reference after tokenization");
    std::vector<std::vector<std::size_t>> dp(ref.size() + 1, std::vector<std::size_t>(hyp.size() + 1));
    for (std::size_t i = 0; i <= ref.size(); ++i) dp[i][0] = i;
    for (std::size_t j = 0; j <= hyp.size(); ++j) dp[0][j] = j;
    for (std::size_t i = 1; i <= ref.size(); ++i)
        for (std::size_t j = 1; j <= hyp.size(); ++j)
            dp[i][j] = std::min({dp[i - 1][j] + 1, dp[i][j - 1] + 1,
                                 dp[i - 1][j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1)});
    return {dp[ref.size()][hyp.size()], ref.size()};
}

inline double wer(const std::string& reference, const std::string& hypothesis) {
    return word_edit_stats(reference, hypothesis).wer();
}

// ---------------------------------------------------------------------------
// WER threshold calibration
// ---------------------------------------------------------------------------

// Largest threshold t over the observed per-example WER values such that the
// corpus-level WER (total edits / total reference words) of the examples
// with WER <= t stays within the target; 1.0 means the whole corpus already
// satisfies it.
inline double calibrate_wer_threshold(const std::vector<EditStats>& per_example, double target) {
    if (target <= 0.0 || target > 1.0)
        throw ConfigError("calibrate_wer_threshold: target must be in (0,1]");
    if (per_example.empty()) throw DataError("calibrate_wer_threshold: no examples");

    std::size_t total_edits = 0, total_words = 0;
    for (const auto& e : per_example) {
        if (e.reference_words == 0) throw DataError("calibrate_wer_threshold: zero-length reference");
        total_edits += e.edits;
        total_words += e.reference_words;
    }
    if (static_cast<double>(total_edits) <= target * static_cast<double>(total_words)) return 1.0;

    std::vector<EditStats> sorted = per_example;
    std::sort(sorted.begin(), sorted.end(),
              [](const EditStats& a, const EditStats& b) { return a.wer() < b.wer(); });

    double best = -1.0;
    std::size_t edits = 0, words = 0;
    std::size_t i = 0;
    while (i < sorted.size()) {
        // consume the whole group sharing this WER value, then test it as a
        // threshold
        const double t = sorted[i].wer();
        while (i < sorted.size() && sorted[i].wer() == t) {
            edits += sorted[i].edits;
            words += sorted[i].reference_words;
            ++i;
        }
        if (static_cast<double>(edits) <= target * static_cast<double>(words)) best = t;
    }
    if (best < 0.0)
        throw CalibrationError("calibrate_wer_threshold: no threshold reaches corpus WER " +
                               std::to_string(target));
    return best;
}

// ---------------------------------------------------------------------------
// Filtering
// ---------------------------------------------------------------------------

struct FilterReport {
    std::size_t input_count = 0;
    std::size_t kept_count = 0;
    std::vector<std::pair<std::string, std::size_t>> removed_by_rule;
    double corpus_wer_before = -1.0; // -1 when WER was not evaluated
    double corpus_wer_after = -1.0;
    double chosen_wer_threshold = -1.0;
    std::size_t warnings = 0;

    std::size_t removed_total() const {
        std::size_t n = 0;
        for (const auto& [rule, count] : removed_by_rule) n += count;
        return n;
    }

    void add_removal(const std::string& rule) {
        for (auto& [name, count] : removed_by_rule)
            if (name == rule) {
                ++count;
                return;
            }
        removed_by_rule.emplace_back(rule, 1);
    }

    std::string to_json() const {
        nlohmann::json rules = nlohmann::json::object();
        for (const auto& [rule, count] : removed_by_rule) rules[rule] = count;
        nlohmann::json j{{"input_count", input_count},
                         {"kept_count", kept_count},
                         {"removed_by_rule", rules},
                         {"warnings", warnings}};
        if (corpus_wer_before >= 0.0) j["corpus_wer_before"] = corpus_wer_before;
        if (corpus_wer_after >= 0.0) j["corpus_wer_after"] = corpus_wer_after;
        if (chosen_wer_threshold >= 0.0) j["chosen_wer_threshold"] = chosen_wer_threshold;
        return j.dump(2);
    }

    std::string to_text() const {
        std::ostringstream os;
        os << "input:   " << input_count << "\n";
        os << "kept:    " << kept_count << "\n";
        for (const auto& [rule, count] : removed_by_rule)
            os << "removed (" << rule << "): " << count << "\n";
        if (chosen_wer_threshold >= 0.0) os << "wer threshold: " << chosen_wer_threshold << "\n";
        if (corpus_wer_before >= 0.0) os << "corpus wer before: " << corpus_wer_before << "\n";
        if (corpus_wer_after >= 0.0) os << "corpus wer after: " << corpus_wer_after << "\n";
        if (warnings) os << "warnings: " << warnings << "\n";
        return os.str();
    }
};

struct StFilterConfig {
    double wer_threshold = 0.5; // applied when a hypothesis is available
    std::size_t min_chars = 4; // either side shorter than this is dropped
    double ratio_min = 0.5; // source/target character-length ratio bounds, inclusive
    double ratio_max = 2.0;
};

// Short-text, length-ratio and fixed-threshold WER filtering for the ST
// fine-tuning data. An example failing several rules is attributed to the
// first one checked, so the report always reconciles.
inline std::pair<std::vector<ParallelExample>, FilterReport>
filter_st(const std::vector<ParallelExample>& examples, const StFilterConfig& cfg = {}) {
    std::vector<ParallelExample> kept;
    FilterReport report;
    report.input_count = examples.size();
    for (const auto& ex : examples) {
        if (ex.transcript.size() < cfg.min_chars || ex.translation.size() < cfg.min_chars) {
            report.add_removal("min_chars");
            continue;
        }
        const double ratio =
            static_cast<double>(ex.transcript.size()) / static_cast<double>(ex.translation.size());
        if (ratio < cfg.ratio_min || ratio > cfg.ratio_max) {
            report.add_removal("length_ratio");
            continue;
        }
        if (!ex.asr_hypothesis.empty() && wer(ex.transcript, ex.asr_hypothesis) > cfg.wer_threshold) {
            report.add_removal("wer");
            continue;
        }
        kept.push_back(ex);
    }
    report.kept_count = kept.size();
    return {std::move(kept), std::move(report)};
}

// Calibrated ASR-based filtering: pick the threshold that brings the kept
// corpus to the target WER, then keep examples at or below it.
inline std::pair<std::vector<ParallelExample>, FilterReport>
filter_by_calibrated_wer(const std::vector<ParallelExample>& examples, double target_corpus_wer) {
    std::vector<EditStats> stats;
    stats.reserve(examples.size());
    std::size_t total_edits = 0, total_words = 0;
    for (const auto& ex : examples) {
        stats.push_back(word_edit_stats(ex.transcript, ex.asr_hypothesis));
        total_edits += stats.back().edits;
        total_words += stats.back().reference_words;
    }
    FilterReport report;
    report.input_count = examples.size();
    report.corpus_wer_before = total_words ? static_cast<double>(total_edits) / total_words : 0.0;

    const double threshold = calibrate_wer_threshold(stats, target_corpus_wer);
    report.chosen_wer_threshold = threshold;

    std::vector<ParallelExample> kept;
    std::size_t kept_edits = 0, kept_words = 0;
    for (std::size_t i = 0; i < examples.size(); ++i) {
        if (threshold < 1.0 && stats[i].wer() > threshold) {
            report.add_removal("wer_calibrated");
            continue;
        }
        kept_edits += stats[i].edits;
        kept_words += stats[i].reference_words;
        kept.push_back(examples[i]);
    }
    report.kept_count = kept.size();
    report.corpus_wer_after = kept_words ? static_cast<double>(kept_edits) / kept_words : 0.0;
    return {std::move(kept), std::move(report)};
}

// ---------------------------------------------------------------------------
// TF-IDF near-duplicate filtering
// ---------------------------------------------------------------------------

namespace detail {

using TermCounts = std::map<std::string, double>;

inline TermCounts term_counts(const std::string& text) {
    TermCounts counts;
    std::string lowered;
    for (char c : text) lowered += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    for (const auto& token : whitespace_tokens(lowered)) counts[token] += 1.0;
    return counts;
}

// tf * ln((N + 1) / (df + 1)) over the current pool. Add-one smoothing on
// both counts keeps every idf strictly positive, so a candidate identical to
// a pool document always scores cosine 1 even in tiny pools where a plain
// ln(N / (df + 1)) collapses shared terms to weight zero.
inline TermCounts tfidf_vector(const TermCounts& tf, const std::vector<TermCounts>& pool) {
    TermCounts out;
    const double n = static_cast<double>(pool.size());
    for (const auto& [term, count] : tf) {
        double df = 0.0;
        for (const auto& doc : pool)
            if (doc.count(term)) df += 1.0;
        out[term] = count * std::log((n + 1.0) / (df + 1.0));
    }
    return out;
}

inline double cosine(const TermCounts& a, const TermCounts& b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (const auto& [term, v] : a) {
        na += v * v;
        auto it = b.find(term);
        if (it != b.end()) dot += v * it->second;
    }
    for (const auto& [term, v] : b) nb += v * v;
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

} // namespace detail

struct TfidfFilterResult {
    std::vector<ParallelExample> kept;
    std::size_t rejected = 0;
    std::size_t warnings = 0; // candidates with no comparison basis
};

// Per-talk near-duplicate rejection of candidate examples against the talk's
// original translations. Accepted candidates join the comparison pool, so
// later candidates (other segmentation variants) are deduplicated against
// them as well. A candidate is kept iff its maximum cosine similarity over
// the pool stays below the threshold.
inline TfidfFilterResult tfidf_filter(const std::vector<ParallelExample>& originals,
                                      const std::vector<ParallelExample>& candidates,
                                      double threshold = 0.8) {
    if (threshold <= 0.0) throw ConfigError("tfidf_filter: threshold must be positive");
    std::unordered_map<std::string, std::vector<detail::TermCounts>> pools;
    for (const auto& ex : originals) pools[ex.talk_id].push_back(detail::term_counts(ex.translation));

    TfidfFilterResult result;
    std::unordered_map<std::string, bool> talk_known;
    for (const auto& ex : originals) talk_known[ex.talk_id] = true;

    for (const auto& cand : candidates) {
        auto& pool = pools[cand.talk_id];
        const auto tf = detail::term_counts(cand.translation);
        if (pool.empty()) {
            if (!talk_known.count(cand.talk_id)) ++result.warnings;
            result.kept.push_back(cand);
            pool.push_back(tf);
            continue;
        }
        // the candidate is scored against the pool's document frequencies
        std::vector<detail::TermCounts> scoring_pool = pool;
        const auto cand_vec = detail::tfidf_vector(tf, scoring_pool);
        double max_sim = 0.0;
        for (const auto& doc : scoring_pool)
            max_sim = std::max(max_sim, detail::cosine(cand_vec, detail::tfidf_vector(doc, scoring_pool)));
        if (max_sim < threshold) {
            result.kept.push_back(cand);
            pool.push_back(tf);
        } else {
            ++result.rejected;
        }
    }
    return result;
}

} // namespace stkit
