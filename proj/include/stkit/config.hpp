#pragma once

#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "stkit/errors.hpp"
#include "stkit/ot.hpp"
#include "stkit/siamese.hpp"
#include "stkit/sttrain.hpp"

namespace stkit {

// Full run configuration. Every constant with an established default keeps
// it here: loss weights 1.0, lambda 0.5, T 1.3, top-8, label smoothing 0.2,
// beam 5, 10-checkpoint averaging, warm-up 1000, patience 5000, target
// corpus WER 0.11, TF-IDF threshold 0.8.
struct RunConfig {
    std::uint64_t seed = 0;
    std::size_t jobs = 1;

    EncoderConfig model{};
    DecoderConfig decoder{};
    KdConfig kd{};

    struct Optim {
        double siamese_lr = 2e-4;
        double st_lr = 5e-5;
        double st_final_lr = 5e-7;
        double st_constant_fraction = 0.2;
        std::size_t warmup_steps = 1000;
        double beta1 = 0.9, beta2 = 0.98, epsilon = 1e-8;
    } optim;

    struct Train {
        std::size_t max_steps = 2000;
        std::size_t batch_size = 8;
        std::size_t val_interval = 25;
        std::size_t patience_steps = 5000;
        std::size_t keep_checkpoints = 10;
    } train;

    struct Decode {
        std::size_t beam = 5;
        std::size_t max_len = 64;
    } decode;

    struct Filter {
        std::string mode = "st"; // "st" or "siamese"
        double target_corpus_wer = 0.11;
        double st_wer_threshold = 0.5;
        std::size_t min_chars = 4;
        double ratio_min = 0.5;
        double ratio_max = 2.0;
        double tfidf_threshold = 0.8;
    } filter;

    struct Sweep {
        double min_start = 0.2;
        double max_limit = 30.0; // 18 for the ACL-style domain
        double step = 2.0;
        double target_mean_length = 8.0; // built-in synthetic scorer
    } sweep;

    struct Toy {
        std::size_t train_size = 500;
        std::size_t val_size = 100;
        double noise_sd = 0.3;
        std::size_t min_words = 2, max_words = 4;
        std::size_t min_word_len = 2, max_word_len = 6;
        double teacher_error_rate = 0.02;
    } toy;
};

namespace detail {

struct ConfigBinder {
    static double parse_double(const std::string& key, const std::string& value) {
        try {
            std::size_t pos = 0;
            const double v = std::stod(value, &pos);
            if (pos != value.size()) throw std::invalid_argument("trailing characters");
            return v;
        } catch (const std::exception&) {
            throw ConfigError("config: bad number '" + value + "' for " + key);
        }
    }

    static std::size_t parse_count(const std::string& key, const std::string& value) {
        try {
            std::size_t pos = 0;
            const long long v = std::stoll(value, &pos);
            if (pos != value.size() || v < 0) throw std::invalid_argument("not a count");
            return static_cast<std::size_t>(v);
        } catch (const std::exception&) {
            throw ConfigError("config: bad count '" + value + "' for " + key);
        }
    }

    static bool parse_bool(const std::string& key, const std::string& value) {
        if (value == "true" || value == "1") return true;
        if (value == "false" || value == "0") return false;
        throw ConfigError("config: bad bool '" + value + "' for " + key);
    }
};

} // namespace detail

// Applies one dotted key. Unknown keys are rejected.
inline void apply_config_entry(RunConfig& cfg, const std::string& key, const std::string& value) {
    using B = detail::ConfigBinder;
    static const std::map<std::string, std::function<void(RunConfig&, const std::string&)>> setters = {
        {"seed", [](RunConfig& c, const std::string& v) { c.seed = B::parse_count("seed", v); }},
        {"jobs", [](RunConfig& c, const std::string& v) { c.jobs = B::parse_count("jobs", v); }},

        {"model.feature_dim", [](RunConfig& c, const std::string& v) { c.model.feature_dim = B::parse_count("model.feature_dim", v); }},
        {"model.d", [](RunConfig& c, const std::string& v) { c.model.d = B::parse_count("model.d", v); }},
        {"model.adapter_expansion", [](RunConfig& c, const std::string& v) { c.model.adapter_expansion = B::parse_count("model.adapter_expansion", v); }},
        {"model.acoustic_layers", [](RunConfig& c, const std::string& v) { c.model.acoustic_layers = B::parse_count("model.acoustic_layers", v); }},
        {"model.semantic_layers", [](RunConfig& c, const std::string& v) { c.model.semantic_layers = B::parse_count("model.semantic_layers", v); }},
        {"model.text_layers", [](RunConfig& c, const std::string& v) { c.model.text_layers = B::parse_count("model.text_layers", v); }},
        {"model.ff_multiple", [](RunConfig& c, const std::string& v) { c.model.ff_multiple = B::parse_count("model.ff_multiple", v); }},
        {"model.max_positions", [](RunConfig& c, const std::string& v) { c.model.max_positions = B::parse_count("model.max_positions", v); }},
        {"model.ctc_vocab", [](RunConfig& c, const std::string& v) { c.model.ctc_vocab = B::parse_count("model.ctc_vocab", v); }},
        {"model.text_vocab", [](RunConfig& c, const std::string& v) { c.model.text_vocab = B::parse_count("model.text_vocab", v); }},
        {"model.conv_width", [](RunConfig& c, const std::string& v) { c.model.conv_width = B::parse_count("model.conv_width", v); }},
        {"model.conv_stride", [](RunConfig& c, const std::string& v) { c.model.conv_stride = B::parse_count("model.conv_stride", v); }},

        {"loss.alpha", [](RunConfig& c, const std::string& v) { c.model.alpha = B::parse_double("loss.alpha", v); }},
        {"loss.beta", [](RunConfig& c, const std::string& v) { c.model.beta = B::parse_double("loss.beta", v); }},
        {"loss.gamma", [](RunConfig& c, const std::string& v) { c.model.gamma = B::parse_double("loss.gamma", v); }},

        {"ot.positional", [](RunConfig& c, const std::string& v) { c.model.ot_positional = B::parse_bool("ot.positional", v); }},
        {"ot.pe_weight", [](RunConfig& c, const std::string& v) { c.model.ot_pe_weight = B::parse_double("ot.pe_weight", v); }},
        {"sinkhorn.epsilon", [](RunConfig& c, const std::string& v) { c.model.sinkhorn.epsilon = B::parse_double("sinkhorn.epsilon", v); }},
        {"sinkhorn.max_iterations", [](RunConfig& c, const std::string& v) { c.model.sinkhorn.max_iterations = B::parse_count("sinkhorn.max_iterations", v); }},
        {"sinkhorn.tolerance", [](RunConfig& c, const std::string& v) { c.model.sinkhorn.tolerance = B::parse_double("sinkhorn.tolerance", v); }},

        {"kd.enabled", [](RunConfig& c, const std::string& v) { c.kd.enabled = B::parse_bool("kd.enabled", v); }},
        {"kd.k", [](RunConfig& c, const std::string& v) { c.kd.k = B::parse_count("kd.k", v); }},
        {"kd.temperature", [](RunConfig& c, const std::string& v) { c.kd.temperature = B::parse_double("kd.temperature", v); }},
        {"kd.lambda", [](RunConfig& c, const std::string& v) { c.kd.lambda = B::parse_double("kd.lambda", v); }},
        {"kd.label_smoothing", [](RunConfig& c, const std::string& v) { c.kd.label_smoothing = B::parse_double("kd.label_smoothing", v); }},

        {"optim.siamese_lr", [](RunConfig& c, const std::string& v) { c.optim.siamese_lr = B::parse_double("optim.siamese_lr", v); }},
        {"optim.st_lr", [](RunConfig& c, const std::string& v) { c.optim.st_lr = B::parse_double("optim.st_lr", v); }},
        {"optim.st_final_lr", [](RunConfig& c, const std::string& v) { c.optim.st_final_lr = B::parse_double("optim.st_final_lr", v); }},
        {"optim.st_constant_fraction", [](RunConfig& c, const std::string& v) { c.optim.st_constant_fraction = B::parse_double("optim.st_constant_fraction", v); }},
        {"optim.warmup_steps", [](RunConfig& c, const std::string& v) { c.optim.warmup_steps = B::parse_count("optim.warmup_steps", v); }},
        {"optim.beta1", [](RunConfig& c, const std::string& v) { c.optim.beta1 = B::parse_double("optim.beta1", v); }},
        {"optim.beta2", [](RunConfig& c, const std::string& v) { c.optim.beta2 = B::parse_double("optim.beta2", v); }},
        {"optim.epsilon", [](RunConfig& c, const std::string& v) { c.optim.epsilon = B::parse_double("optim.epsilon", v); }},

        {"train.max_steps", [](RunConfig& c, const std::string& v) { c.train.max_steps = B::parse_count("train.max_steps", v); }},
        {"train.batch_size", [](RunConfig& c, const std::string& v) { c.train.batch_size = B::parse_count("train.batch_size", v); }},
        {"train.val_interval", [](RunConfig& c, const std::string& v) { c.train.val_interval = B::parse_count("train.val_interval", v); }},
        {"train.patience_steps", [](RunConfig& c, const std::string& v) { c.train.patience_steps = B::parse_count("train.patience_steps", v); }},
        {"train.keep_checkpoints", [](RunConfig& c, const std::string& v) { c.train.keep_checkpoints = B::parse_count("train.keep_checkpoints", v); }},

        {"decode.beam", [](RunConfig& c, const std::string& v) { c.decode.beam = B::parse_count("decode.beam", v); }},
        {"decode.max_len", [](RunConfig& c, const std::string& v) { c.decode.max_len = B::parse_count("decode.max_len", v); }},

        {"filter.mode", [](RunConfig& c, const std::string& v) { c.filter.mode = v; }},
        {"filter.target_corpus_wer", [](RunConfig& c, const std::string& v) { c.filter.target_corpus_wer = B::parse_double("filter.target_corpus_wer", v); }},
        {"filter.st_wer_threshold", [](RunConfig& c, const std::string& v) { c.filter.st_wer_threshold = B::parse_double("filter.st_wer_threshold", v); }},
        {"filter.min_chars", [](RunConfig& c, const std::string& v) { c.filter.min_chars = B::parse_count("filter.min_chars", v); }},
        {"filter.ratio_min", [](RunConfig& c, const std::string& v) { c.filter.ratio_min = B::parse_double("filter.ratio_min", v); }},
        {"filter.ratio_max", [](RunConfig& c, const std::string& v) { c.filter.ratio_max = B::parse_double("filter.ratio_max", v); }},
        {"filter.tfidf_threshold", [](RunConfig& c, const std::string& v) { c.filter.tfidf_threshold = B::parse_double("filter.tfidf_threshold", v); }},

        {"sweep.min_start", [](RunConfig& c, const std::string& v) { c.sweep.min_start = B::parse_double("sweep.min_start", v); }},
        {"sweep.max_limit", [](RunConfig& c, const std::string& v) { c.sweep.max_limit = B::parse_double("sweep.max_limit", v); }},
        {"sweep.step", [](RunConfig& c, const std::string& v) { c.sweep.step = B::parse_double("sweep.step", v); }},
        {"sweep.target_mean_length", [](RunConfig& c, const std::string& v) { c.sweep.target_mean_length = B::parse_double("sweep.target_mean_length", v); }},

        {"toy.train_size", [](RunConfig& c, const std::string& v) { c.toy.train_size = B::parse_count("toy.train_size", v); }},
        {"toy.val_size", [](RunConfig& c, const std::string& v) { c.toy.val_size = B::parse_count("toy.val_size", v); }},
        {"toy.noise_sd", [](RunConfig& c, const std::string& v) { c.toy.noise_sd = B::parse_double("toy.noise_sd", v); }},
        {"toy.min_words", [](RunConfig& c, const std::string& v) { c.toy.min_words = B::parse_count("toy.min_words", v); }},
        {"toy.max_words", [](RunConfig& c, const std::string& v) { c.toy.max_words = B::parse_count("toy.max_words", v); }},
        {"toy.min_word_len", [](RunConfig& c, const std::string& v) { c.toy.min_word_len = B::parse_count("toy.min_word_len", v); }},
        {"toy.max_word_len", [](RunConfig& c, const std::string& v) { c.toy.max_word_len = B::parse_count("toy.max_word_len", v); }},
        {"toy.teacher_error_rate", [](RunConfig& c, const std::string& v) { c.toy.teacher_error_rate = B::parse_double("toy.teacher_error_rate", v); }},
    };
    auto it = setters.find(key);
    if (it == setters.end()) throw ConfigError("config: unknown key '" + key + "'");
    it->second(cfg, value);
}

// key = value lines; '#' starts a comment; blank lines ignored.
inline void load_config_file(RunConfig& cfg, const std::string& path,
                             std::vector<std::pair<std::string, std::string>>* entries_out = nullptr) {
    std::ifstream is(path);
    if (!is) throw ConfigError("config: cannot open " + path);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        std::string trimmed;
        for (char c : line)
            if (!std::isspace(static_cast<unsigned char>(c)) || (!trimmed.empty() && trimmed.back() != ' '))
                trimmed += std::isspace(static_cast<unsigned char>(c)) ? ' ' : c;
        while (!trimmed.empty() && trimmed.back() == ' ') trimmed.pop_back();
        if (trimmed.empty()) continue;
        const auto eq = trimmed.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config: line " + std::to_string(line_no) + " is not key = value");
        auto strip = [](std::string s) {
            while (!s.empty() && s.front() == ' ') s.erase(s.begin());
            while (!s.empty() && s.back() == ' ') s.pop_back();
            return s;
        };
        const std::string key = strip(trimmed.substr(0, eq));
        const std::string value = strip(trimmed.substr(eq + 1));
        apply_config_entry(cfg, key, value);
        if (entries_out) entries_out->emplace_back(key, value);
    }
}

// FNV-1a over the canonical key=value serialization, for the run header.
inline std::string config_hash(const std::vector<std::pair<std::string, std::string>>& entries,
                               std::uint64_t seed) {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&](const std::string& s) {
        for (unsigned char c : s) {
            h ^= c;
            h *= 1099511628211ull;
        }
    };
    mix("seed=" + std::to_string(seed));
    for (const auto& [k, v] : entries) mix(k + "=" + v);
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

} // namespace stkit
