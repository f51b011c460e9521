#pragma once

#include <cstdio>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "stkit/ctc.hpp"
#include "stkit/optim.hpp"
#include "stkit/ot.hpp"
#include "stkit/params.hpp"
#include "stkit/rng.hpp"

namespace stkit {

struct EncoderConfig {
    std::size_t feature_dim = 16; // raw speech feature size
    std::size_t d = 32; // model width, must be even
    std::size_t adapter_expansion = 8;
    std::size_t acoustic_layers = 1;
    std::size_t semantic_layers = 1;
    std::size_t text_layers = 1;
    std::size_t ff_multiple = 4;
    std::size_t max_positions = 64; // M; the positional table has M+2 rows
    std::size_t ctc_vocab = 29; // blank + 26 letters + space + apostrophe
    std::size_t text_vocab = 28;
    std::size_t conv_width = 3;
    std::size_t conv_stride = 2;
    double alpha = 1.0, beta = 1.0, gamma = 1.0; // CTC / OT1 / OT2 weights
    bool ot_positional = true;
    double ot_pe_weight = 1.0;
    SinkhornConfig sinkhorn{};

    void validate() const {
        if (d == 0 || d % 2 != 0) throw ConfigError("EncoderConfig: d must be positive and even");
        if (feature_dim == 0) throw ConfigError("EncoderConfig: feature_dim must be positive");
        if (alpha < 0 || beta < 0 || gamma < 0) throw ConfigError("EncoderConfig: loss weights must be >= 0");
        if (ctc_vocab < 2) throw ConfigError("EncoderConfig: ctc_vocab must be >= 2");
        if (text_vocab < 1) throw ConfigError("EncoderConfig: text_vocab must be >= 1");
        if (conv_width == 0 || conv_stride == 0) throw ConfigError("EncoderConfig: conv params must be >= 1");
        if (adapter_expansion == 0) throw ConfigError("EncoderConfig: adapter_expansion must be >= 1");
        sinkhorn.validate();
    }
};

// Named components of a combined training loss plus the weights that
// produced it. `combined` always equals the applicable weighted sum.
struct LossBreakdown {
    std::optional<double> l_ctc, l_ot1, l_ot2, l_ce, l_kl;
    double alpha = 1.0, beta = 1.0, gamma = 1.0, lambda = 0.5;
    double combined = 0.0;
};

struct SpeechExample {
    std::string id;
    Matrix features; // n' x feature_dim
    std::vector<int> ctc_target; // ids over the CTC vocabulary, no blanks
    std::vector<int> text_ids; // ids over the text vocabulary
    std::string transcript;
};

// The speech branch of the Siamese pair: acoustic encoder -> CTC head ->
// compression -> adapter -> strided conv -> bos/eos + learned positions ->
// semantic encoder. The text branch is a frozen embedding + encoder stack.
class SiameseModel {
public:
    // The frozen text embedding defaults to a random table; callers may
    // inject a structured one (shape (text_vocab + 2) x d).
    explicit SiameseModel(const EncoderConfig& cfg, Rng& init_rng,
                          const Matrix* frozen_text_embed = nullptr)
        : cfg_(cfg) {
        cfg_.validate();
        if (frozen_text_embed &&
            (frozen_text_embed->rows() != cfg_.text_vocab + 2 || frozen_text_embed->cols() != cfg_.d))
            throw ShapeError("SiameseModel: text embedding is " + frozen_text_embed->shape_str() +
                             ", expected " + std::to_string(cfg_.text_vocab + 2) + "x" +
                             std::to_string(cfg_.d));
        build(init_rng, frozen_text_embed);
    }

    const EncoderConfig& config() const { return cfg_; }
    ParamStore& params() { return store_; }
    const ParamStore& params() const { return store_; }

    int text_bos() const { return static_cast<int>(cfg_.text_vocab); }
    int text_eos() const { return static_cast<int>(cfg_.text_vocab) + 1; }

    struct SpeechEncoding {
        NodePtr ctc_log_probs; // n' x |V|
        NodePtr semantic_input; // (len+2) x d, null when skipped
        NodePtr semantic_output;
        std::vector<int> compressed_labels;
        bool skipped = false; // compression empty or shorter than the conv kernel
    };

    SpeechEncoding speech_encode(const Matrix& features) {
        if (features.rows() == 0) throw DataError("speech_encode: empty feature sequence");
        if (features.cols() != cfg_.feature_dim)
            throw ShapeError("speech_encode: feature dim " + std::to_string(features.cols()) +
                             " expected " + std::to_string(cfg_.feature_dim));
        SpeechEncoding enc;
        auto acoustic = acoustic_forward(Node::constant(features));
        enc.ctc_log_probs = log_softmax(dense(acoustic, "ctc_head"));

        auto compressed = ctc_compress(acoustic, enc.ctc_log_probs->value);
        enc.compressed_labels = compressed.labels;
        if (compressed.empty || compressed.frames() < cfg_.conv_width) {
            enc.skipped = true;
            return enc;
        }
        enc.semantic_input = couple(compressed.features);
        enc.semantic_output = semantic_forward(enc.semantic_input);
        return enc;
    }

    // Adapter, strided conv, special tokens, learned positions. Exposed so
    // the length arithmetic can be exercised on a given compressed sequence.
    NodePtr couple(const NodePtr& compressed) {
        auto x = dense(compressed, "adapter.in");
        x = gelu(x);
        x = dense(x, "adapter.out");
        x = add_rowvec(conv1d_strided(x, store_.get("conv.kernel"), cfg_.conv_stride),
                       store_.get("conv.bias"));
        const std::size_t content = x->rows();
        if (content + 2 > cfg_.max_positions + 2)
            throw DataError("couple: sequence of " + std::to_string(content) +
                            " rows exceeds max_positions " + std::to_string(cfg_.max_positions));
        x = concat_rows({store_.get("special.bos"), x, store_.get("special.eos")});
        return add(x, slice_rows(store_.get("special.positions"), 0, content + 2));
    }

    NodePtr semantic_forward(const NodePtr& semantic_input) {
        auto x = semantic_input;
        for (std::size_t l = 0; l < cfg_.semantic_layers; ++l)
            x = ff_block(x, "semantic.block" + std::to_string(l));
        return x;
    }

    NodePtr acoustic_forward(const NodePtr& features) {
        auto x = dense(features, "acoustic.in_proj");
        for (std::size_t l = 0; l < cfg_.acoustic_layers; ++l)
            x = ff_block(x, "acoustic.block" + std::to_string(l));
        return x;
    }

    struct TextEncoding {
        NodePtr embedded; // (len+2) x d with positional rows added
        NodePtr encoded;
    };

    // Frozen branch: lookup + sinusoidal positions, then frozen encoder
    // blocks. No gradient ever reaches these parameters.
    TextEncoding text_encode(const std::vector<int>& ids) const {
        for (int id : ids)
            if (id < 0 || static_cast<std::size_t>(id) >= cfg_.text_vocab)
                throw DataError("text_encode: id " + std::to_string(id) + " outside vocabulary of " +
                                std::to_string(cfg_.text_vocab));
        std::vector<int> with_specials;
        with_specials.reserve(ids.size() + 2);
        with_specials.push_back(text_bos());
        with_specials.insert(with_specials.end(), ids.begin(), ids.end());
        with_specials.push_back(text_eos());

        TextEncoding enc;
        auto x = embed(store_.get("text.embed"), with_specials);
        enc.embedded = add(x, Node::constant(sinusoidal_pe(with_specials.size(), cfg_.d)));
        x = enc.embedded;
        for (std::size_t l = 0; l < cfg_.text_layers; ++l)
            x = ff_block(x, "text.block" + std::to_string(l));
        enc.encoded = x;
        return enc;
    }

    struct Output {
        SpeechEncoding speech;
        TextEncoding text;
        NodePtr combined; // null when skipped
        LossBreakdown losses;
        bool skipped = false;
    };

    // Full forward pass plus the combined loss:
    // alpha * L_CTC + beta * L_OT1(semantic in, text embed)
    //              + gamma * L_OT2(semantic out, text encoded).
    Output forward_example(const SpeechExample& example) {
        Output out;
        out.speech = speech_encode(example.features);
        if (out.speech.skipped) {
            out.skipped = true;
            return out;
        }
        out.text = text_encode(example.text_ids);

        auto l_ctc = ctc_loss(CtcPosterior{out.speech.ctc_log_probs}, example.ctc_target);
        auto ot1 = wasserstein_loss(out.speech.semantic_input, out.text.embedded, cfg_.sinkhorn,
                                    cfg_.ot_positional, cfg_.ot_pe_weight);
        auto ot2 = wasserstein_loss(out.speech.semantic_output, out.text.encoded, cfg_.sinkhorn,
                                    cfg_.ot_positional, cfg_.ot_pe_weight);
        out.combined = add(add(scale(l_ctc, cfg_.alpha), scale(ot1.loss, cfg_.beta)),
                           scale(ot2.loss, cfg_.gamma));

        out.losses.l_ctc = l_ctc->scalar();
        out.losses.l_ot1 = ot1.loss->scalar();
        out.losses.l_ot2 = ot2.loss->scalar();
        out.losses.alpha = cfg_.alpha;
        out.losses.beta = cfg_.beta;
        out.losses.gamma = cfg_.gamma;
        out.losses.combined = out.combined->scalar();
        return out;
    }

    // Mean OT2 value over a validation set, skipping empty compressions.
    double validation_ot2(const std::vector<SpeechExample>& val) {
        double total = 0.0;
        std::size_t counted = 0;
        for (const auto& ex : val) {
            auto enc = speech_encode(ex.features);
            if (enc.skipped) continue;
            auto text = text_encode(ex.text_ids);
            total += wasserstein_loss(enc.semantic_output, text.encoded, cfg_.sinkhorn,
                                      cfg_.ot_positional, cfg_.ot_pe_weight)
                         .loss->scalar();
            ++counted;
        }
        if (counted == 0) throw DataError("validation_ot2: every validation example was skipped");
        return total / static_cast<double>(counted);
    }

private:
    void build(Rng& rng, const Matrix* frozen_text_embed) {
        const std::size_t d = cfg_.d;
        const std::size_t ff = cfg_.ff_multiple * d;
        auto dense_init = [&](const std::string& name, std::size_t in, std::size_t out, bool trainable = true) {
            store_.create(name + ".W", rng.gaussian(in, out, 1.0 / std::sqrt(static_cast<double>(in))), trainable);
            store_.create(name + ".b", Matrix(1, out), trainable);
        };
        auto block_init = [&](const std::string& name, bool trainable = true) {
            dense_init(name + ".ff1", d, ff, trainable);
            dense_init(name + ".ff2", ff, d, trainable);
        };

        dense_init("acoustic.in_proj", cfg_.feature_dim, d);
        for (std::size_t l = 0; l < cfg_.acoustic_layers; ++l)
            block_init("acoustic.block" + std::to_string(l));
        dense_init("ctc_head", d, cfg_.ctc_vocab);
        dense_init("adapter.in", d, cfg_.adapter_expansion * d);
        dense_init("adapter.out", cfg_.adapter_expansion * d, d);
        store_.create("conv.kernel",
                      rng.gaussian(cfg_.conv_width * d, d, 1.0 / std::sqrt(static_cast<double>(cfg_.conv_width * d))));
        store_.create("conv.bias", Matrix(1, d));
        store_.create("special.bos", rng.gaussian(1, d, 1.0));
        store_.create("special.eos", rng.gaussian(1, d, 1.0));
        store_.create("special.positions", rng.gaussian(cfg_.max_positions + 2, d, 0.1));
        for (std::size_t l = 0; l < cfg_.semantic_layers; ++l)
            block_init("semantic.block" + std::to_string(l));

        store_.create("text.embed",
                      frozen_text_embed ? *frozen_text_embed : rng.gaussian(cfg_.text_vocab + 2, d, 1.0),
                      /*trainable=*/false);
        for (std::size_t l = 0; l < cfg_.text_layers; ++l)
            block_init("text.block" + std::to_string(l), /*trainable=*/false);
    }

    NodePtr dense(const NodePtr& x, const std::string& name) const {
        return add_rowvec(matmul(x, store_.get(name + ".W")), store_.get(name + ".b"));
    }

    // Pre-norm residual feed-forward block.
    NodePtr ff_block(const NodePtr& x, const std::string& name) const {
        auto h = dense(gelu(dense(layer_norm(x), name + ".ff1")), name + ".ff2");
        return add(x, h);
    }

    EncoderConfig cfg_;
    ParamStore store_;
};

// ---------------------------------------------------------------------------
// Pretraining loop
// ---------------------------------------------------------------------------

struct SiameseTrainConfig {
    std::size_t max_steps = 2000;
    std::size_t val_interval = 25;
    std::size_t patience_steps = 5000; // full-scale default; desk runs use ~200
    std::size_t keep_checkpoints = 10;
    std::size_t warmup_steps = 1000; // full-scale default; desk runs use ~50
    AdamConfig adam{}; // base lr 2e-4
    std::uint64_t seed = 0;
};

struct MetricsRow {
    std::size_t step = 0;
    double l_ctc = 0, l_ot1 = 0, l_ot2 = 0, combined = 0;
    double val_l_ot2 = 0;
};

struct ScoredCheckpoint {
    double score = 0; // validation OT2 (lower is better) or BLEU (higher)
    std::size_t step = 0;
    ParamSnapshot params;
};

struct SiameseTrainResult {
    std::vector<ScoredCheckpoint> best_checkpoints; // best first
    std::vector<MetricsRow> log; // one row per validation
    std::size_t skipped_examples = 0;
    double initial_val_ot2 = 0.0;
    double best_val_ot2 = std::numeric_limits<double>::infinity();
    std::size_t steps_run = 0;
    bool early_stopped = false;
};

// Adam with linear warm-up + inverse-sqrt decay; early stopping and
// checkpoint selection are both driven by validation OT2, not the combined
// loss. The frozen text branch is untouched throughout.
inline SiameseTrainResult train_siamese(SiameseModel& model, const std::vector<SpeechExample>& train,
                                        const std::vector<SpeechExample>& val,
                                        const SiameseTrainConfig& cfg) {
    if (train.empty()) throw DataError("train_siamese: empty training set");
    SiameseTrainResult result;
    Adam adam(cfg.adam);
    WarmupInvSqrtSchedule schedule{.warmup_steps = cfg.warmup_steps};
    Rng order_rng(cfg.seed);
    auto trainable = model.params().trainable();

    result.initial_val_ot2 = model.validation_ot2(val);
    result.best_val_ot2 = result.initial_val_ot2;
    result.log.push_back({0, 0, 0, 0, 0, result.initial_val_ot2});

    auto record_checkpoint = [&](double score, std::size_t step) {
        ScoredCheckpoint ckpt{score, step, model.params().snapshot()};
        auto pos = result.best_checkpoints.begin();
        while (pos != result.best_checkpoints.end() && pos->score <= score) ++pos;
        result.best_checkpoints.insert(pos, std::move(ckpt));
        if (result.best_checkpoints.size() > cfg.keep_checkpoints)
            result.best_checkpoints.pop_back();
    };
    record_checkpoint(result.initial_val_ot2, 0);

    std::vector<std::size_t> epoch_order(train.size());
    for (std::size_t i = 0; i < train.size(); ++i) epoch_order[i] = i;
    std::size_t cursor = train.size(); // force a shuffle on first use

    double acc_ctc = 0, acc_ot1 = 0, acc_ot2 = 0, acc_comb = 0;
    std::size_t acc_count = 0;
    std::size_t best_step = 0;
    std::size_t consecutive_skips = 0;

    for (std::size_t step = 1; step <= cfg.max_steps; ++step) {
        // deterministic reshuffle each epoch
        if (cursor >= epoch_order.size()) {
            order_rng.shuffle(epoch_order);
            cursor = 0;
        }
        const auto& example = train[epoch_order[cursor++]];

        auto out = model.forward_example(example);
        if (out.skipped) {
            ++result.skipped_examples;
            if (++consecutive_skips > train.size())
                throw DataError("train_siamese: every training example produced an empty compression");
            --step; // a skipped example does not consume a step
            continue;
        }
        consecutive_skips = 0;
        if (!std::isfinite(out.losses.combined))
            throw DivergenceError("train_siamese: non-finite loss at step " + std::to_string(step));

        model.params().zero_grads();
        backward(out.combined);
        adam.step(trainable, schedule.scale(step));

        acc_ctc += *out.losses.l_ctc;
        acc_ot1 += *out.losses.l_ot1;
        acc_ot2 += *out.losses.l_ot2;
        acc_comb += out.losses.combined;
        ++acc_count;
        result.steps_run = step;

        if (step % cfg.val_interval == 0) {
            const double val_ot2 = model.validation_ot2(val);
            const double inv = acc_count ? 1.0 / static_cast<double>(acc_count) : 0.0;
            result.log.push_back({step, acc_ctc * inv, acc_ot1 * inv, acc_ot2 * inv, acc_comb * inv, val_ot2});
            acc_ctc = acc_ot1 = acc_ot2 = acc_comb = 0.0;
            acc_count = 0;

            record_checkpoint(val_ot2, step);
            if (val_ot2 < result.best_val_ot2) {
                result.best_val_ot2 = val_ot2;
                best_step = step;
            } else if (step - best_step >= cfg.patience_steps) {
                result.early_stopped = true;
                break;
            }
        }
    }
    return result;
}

inline void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows) {
    std::ofstream os(path);
    if (!os) throw DataError("write_metrics_csv: cannot open " + path);
    os << "step,l_ctc,l_ot1,l_ot2,combined,val_l_ot2\n";
    char buf[256];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%zu,%.12g,%.12g,%.12g,%.12g,%.12g\n", r.step, r.l_ctc, r.l_ot1,
                      r.l_ot2, r.combined, r.val_l_ot2);
        os << buf;
    }
}

} // namespace stkit
