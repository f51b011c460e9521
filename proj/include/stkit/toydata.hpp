#pragma once

// Synthetic desk-scale corpora. "Speech" renders each transcript character
// as a few noisy copies of a fixed per-character embedding, which gives the
// CTC head a learnable task with a decodable ground truth. "Translation" is
// a per-symbol cipher plus adjacent-pair reordering, so the decoder has to
// attend non-monotonically and BLEU is a meaningful score.

#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "stkit/rng.hpp"
#include "stkit/siamese.hpp"

namespace stkit::toy {

// 26 letters + space + apostrophe; CTC ids are these indices + 1 (blank=0).
inline constexpr std::string_view kCharset = "abcdefghijklmnopqrstuvwxyz '";

inline int char_index(char c) {
    const auto pos = kCharset.find(c);
    return pos == std::string_view::npos ? -1 : static_cast<int>(pos);
}

inline std::vector<int> text_ids(const std::string& transcript) {
    std::vector<int> ids;
    ids.reserve(transcript.size());
    for (char c : transcript) {
        const int idx = char_index(c);
        if (idx < 0) throw DataError(std::string("text_ids: character '") + c + "' outside the toy charset");
        ids.push_back(idx);
    }
    return ids;
}

// The text encoder runs at a subword-like rate: tokens are character
// bigrams, which puts the text sequence at roughly the same length as the
// speech branch after its stride-2 convolution. An odd trailing character
// pairs with space.
inline constexpr std::size_t kTextVocab = 28 * 28;

inline std::vector<int> bigram_ids(const std::string& transcript) {
    const auto chars = text_ids(transcript);
    std::vector<int> ids;
    ids.reserve((chars.size() + 1) / 2);
    for (std::size_t i = 0; i < chars.size(); i += 2) {
        const int second = (i + 1 < chars.size()) ? chars[i + 1] : char_index(' ');
        ids.push_back(chars[i] * 28 + second);
    }
    return ids;
}

// Frozen text-embedding table for the bigram vocabulary. Embeddings are
// compositional (left half keyed by the first character, right half by the
// second), the way real subword embeddings share structure; a purely random
// per-pair table would turn alignment into rote memorization of 784
// unrelated targets.
inline Matrix bigram_embedding_table(std::size_t d, std::uint64_t seed = 7777) {
    if (d % 2 != 0) throw ConfigError("bigram_embedding_table: d must be even");
    Rng rng(seed);
    const Matrix left = rng.gaussian(28, d / 2, 1.0);
    const Matrix right = rng.gaussian(28, d / 2, 1.0);
    Matrix table(kTextVocab + 2, d); // + bos/eos rows
    for (std::size_t c1 = 0; c1 < 28; ++c1)
        for (std::size_t c2 = 0; c2 < 28; ++c2)
            for (std::size_t j = 0; j < d / 2; ++j) {
                table(c1 * 28 + c2, j) = left(c1, j);
                table(c1 * 28 + c2, d / 2 + j) = right(c2, j);
            }
    for (std::size_t r = kTextVocab; r < kTextVocab + 2; ++r)
        for (std::size_t j = 0; j < d; ++j) table(r, j) = rng.normal(0.0, 1.0);
    return table;
}

inline std::vector<int> ctc_targets(const std::string& transcript) {
    auto ids = text_ids(transcript);
    for (int& id : ids) ++id;
    return ids;
}

struct SpeechRenderConfig {
    std::size_t feature_dim = 16;
    double noise_sd = 0.3;
    std::size_t min_repeat = 2, max_repeat = 4; // frames per character
    std::uint64_t embedding_seed = 9001; // fixed per-character "acoustics"
};

inline Matrix char_embedding_table(const SpeechRenderConfig& cfg) {
    Rng rng(cfg.embedding_seed);
    return rng.gaussian(kCharset.size(), cfg.feature_dim, 1.0);
}

inline Matrix render_speech(const std::string& transcript, const Matrix& table,
                            const SpeechRenderConfig& cfg, Rng& rng) {
    std::vector<std::size_t> rows;
    for (char c : transcript) {
        const int idx = char_index(c);
        if (idx < 0) throw DataError(std::string("render_speech: character '") + c + "' outside the toy charset");
        const std::size_t copies =
            static_cast<std::size_t>(rng.uniform_int(static_cast<int>(cfg.min_repeat), static_cast<int>(cfg.max_repeat)));
        for (std::size_t k = 0; k < copies; ++k) rows.push_back(static_cast<std::size_t>(idx));
    }
    Matrix features(rows.size(), cfg.feature_dim);
    for (std::size_t t = 0; t < rows.size(); ++t)
        for (std::size_t j = 0; j < cfg.feature_dim; ++j)
            features(t, j) = table(rows[t], j) + rng.normal(0.0, cfg.noise_sd);
    return features;
}

struct CorpusConfig {
    std::size_t size = 500;
    std::size_t min_words = 2, max_words = 4;
    std::size_t min_word_len = 2, max_word_len = 6;
    double apostrophe_prob = 0.02;
    SpeechRenderConfig render{};
};

// Random transcript without adjacent duplicate characters. A frame-local
// acoustic model cannot place blanks between identical neighbouring units,
// so doubled letters would put a floor on the achievable WER.
inline std::string random_transcript(const CorpusConfig& cfg, Rng& rng) {
    std::string transcript;
    const std::size_t words =
        static_cast<std::size_t>(rng.uniform_int(static_cast<int>(cfg.min_words), static_cast<int>(cfg.max_words)));
    for (std::size_t w = 0; w < words; ++w) {
        if (w) transcript += ' ';
        const std::size_t len = static_cast<std::size_t>(
            rng.uniform_int(static_cast<int>(cfg.min_word_len), static_cast<int>(cfg.max_word_len)));
        for (std::size_t i = 0; i < len; ++i) {
            char c;
            do {
                if (i > 0 && rng.uniform() < cfg.apostrophe_prob)
                    c = '\'';
                else
                    c = static_cast<char>('a' + rng.uniform_int(0, 25));
            } while (!transcript.empty() && transcript.back() == c);
            transcript += c;
        }
    }
    return transcript;
}

inline std::vector<SpeechExample> make_speech_corpus(const CorpusConfig& cfg, std::uint64_t seed) {
    Rng rng(seed);
    const Matrix table = char_embedding_table(cfg.render);
    std::vector<SpeechExample> corpus;
    std::set<std::string> seen;
    while (corpus.size() < cfg.size) {
        const std::string transcript = random_transcript(cfg, rng);
        if (!seen.insert(transcript).second) continue; // keep transcripts distinct
        SpeechExample ex;
        ex.id = "toy-" + std::to_string(corpus.size());
        ex.transcript = transcript;
        ex.features = render_speech(transcript, table, cfg.render, rng);
        ex.ctc_target = ctc_targets(transcript);
        ex.text_ids = bigram_ids(transcript);
        corpus.push_back(std::move(ex));
    }
    return corpus;
}

// ---------------------------------------------------------------------------
// Cipher translation task
// ---------------------------------------------------------------------------

inline constexpr std::size_t kTargetVocab = 30; // 28 cipher symbols + bos + eos
inline constexpr int kTargetBos = 28;
inline constexpr int kTargetEos = 29;

inline int cipher_symbol(int char_id) { return (char_id * 11 + 5) % 28; }

// Cipher each character, then swap every adjacent pair of positions. The
// swap makes the source-target alignment non-monotonic.
inline std::vector<int> cipher_translate(const std::string& transcript) {
    auto ids = text_ids(transcript);
    std::vector<int> target(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) target[i] = cipher_symbol(ids[i]);
    for (std::size_t i = 0; i + 1 < target.size(); i += 2) std::swap(target[i], target[i + 1]);
    return target;
}

// Each target symbol is rendered as a distinct consonant-vowel syllable, so
// hypotheses are ordinary space-separated text.
inline std::string target_surface_token(int symbol_id) {
    static constexpr std::string_view consonants = "bcdfgh";
    static constexpr std::string_view vowels = "aeiou";
    if (symbol_id < 0 || symbol_id >= static_cast<int>(kTargetVocab))
        throw DataError("target_surface_token: symbol " + std::to_string(symbol_id) + " out of range");
    std::string t;
    t += consonants[static_cast<std::size_t>(symbol_id) / vowels.size()];
    t += vowels[static_cast<std::size_t>(symbol_id) % vowels.size()];
    return t;
}

inline std::string target_surface(const std::vector<int>& symbol_ids) {
    std::string out;
    for (std::size_t i = 0; i < symbol_ids.size(); ++i) {
        if (i) out += ' ';
        out += target_surface_token(symbol_ids[i]);
    }
    return out;
}

struct StExample {
    std::string id;
    Matrix features;
    std::string transcript;
    std::vector<int> target; // cipher symbols, no bos/eos
    std::string reference; // detokenized target surface
};

inline std::vector<StExample> make_st_corpus(const CorpusConfig& cfg, std::uint64_t seed) {
    auto speech = make_speech_corpus(cfg, seed);
    std::vector<StExample> corpus;
    corpus.reserve(speech.size());
    for (auto& sp : speech) {
        StExample ex;
        ex.id = sp.id;
        ex.features = std::move(sp.features);
        ex.transcript = sp.transcript;
        ex.target = cipher_translate(sp.transcript);
        ex.reference = target_surface(ex.target);
        corpus.push_back(std::move(ex));
    }
    return corpus;
}

} // namespace stkit::toy
