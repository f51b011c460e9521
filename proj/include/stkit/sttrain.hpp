#pragma once

#include <algorithm>
#include <fstream>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "stkit/metrics.hpp"
#include "stkit/siamese.hpp"
#include "stkit/toydata.hpp"

namespace stkit {

struct KdConfig {
    bool enabled = false;
    std::size_t k = 8; // teacher top-k
    double temperature = 1.3; // applied to both teacher and student
    double lambda = 0.5; // CE weight; (1 - lambda) on the KL term
    double label_smoothing = 0.2; // pure-CE runs only; 0 when KD is on

    void validate() const {
        if (k < 1) throw ConfigError("KdConfig: k must be >= 1");
        if (temperature <= 0.0) throw ConfigError("KdConfig: temperature must be > 0");
        if (lambda < 0.0 || lambda > 1.0) throw ConfigError("KdConfig: lambda must be in [0,1]");
        if (label_smoothing < 0.0 || label_smoothing >= 1.0)
            throw ConfigError("KdConfig: label smoothing must be in [0,1)");
    }
};

// Renormalized top-k slice of a teacher distribution for one target position.
using TopK = std::vector<std::pair<int, double>>; // (index, probability), descending

struct TeacherExample {
    std::string id;
    std::vector<TopK> positions;
};

using TeacherTable = std::unordered_map<std::string, TeacherExample>;

// Keep the k largest entries (ties to the lower index) and renormalize the
// kept mass to one.
inline TopK truncate_topk(const std::vector<double>& dist, std::size_t k) {
    if (dist.empty()) throw DataError("truncate_topk: empty distribution");
    if (k < 1) throw ConfigError("truncate_topk: k must be >= 1");
    k = std::min(k, dist.size());
    std::vector<int> order(dist.size());
    for (std::size_t i = 0; i < dist.size(); ++i) order[i] = static_cast<int>(i);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return dist[a] > dist[b]; });
    TopK kept;
    double mass = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        kept.emplace_back(order[i], dist[order[i]]);
        mass += dist[order[i]];
    }
    if (mass <= 0.0) throw DataError("truncate_topk: kept mass is zero");
    for (auto& [idx, p] : kept) p /= mass;
    return kept;
}

// softmax(logits / T).
inline std::vector<double> soften(const std::vector<double>& logits, double temperature) {
    if (temperature <= 0.0) throw ConfigError("soften: temperature must be > 0");
    double mx = logits[0];
    for (double v : logits) mx = std::max(mx, v);
    std::vector<double> out(logits.size());
    double z = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp((logits[i] - mx) / temperature);
        z += out[i];
    }
    for (double& v : out) v /= z;
    return out;
}

// Temperature applied to an already-truncated probability slice:
// p^(1/T) renormalized over the kept set (== soften of the log-probs).
inline TopK soften_topk(const TopK& kept, double temperature) {
    if (temperature <= 0.0) throw ConfigError("soften_topk: temperature must be > 0");
    TopK out = kept;
    double z = 0.0;
    for (auto& [idx, p] : out) {
        p = std::pow(p, 1.0 / temperature);
        z += p;
    }
    if (z <= 0.0) throw NumericError("soften_topk: zero mass after temperature");
    for (auto& [idx, p] : out) p /= z;
    return out;
}

// KL between the teacher slices and the student log-probabilities,
// restricted to the teacher's kept indices and averaged over positions.
// Gradients flow only into the student.
inline NodePtr kl_loss(const std::vector<TopK>& teacher, const NodePtr& student_logprobs) {
    const std::size_t positions = student_logprobs->rows();
    if (teacher.size() != positions)
        throw ShapeError("kl_loss: " + std::to_string(teacher.size()) + " teacher positions vs " +
                         std::to_string(positions) + " student rows");
    double total = 0.0;
    for (std::size_t i = 0; i < positions; ++i) {
        for (const auto& [idx, p] : teacher[i]) {
            if (idx < 0 || static_cast<std::size_t>(idx) >= student_logprobs->cols())
                throw DataError("kl_loss: teacher index " + std::to_string(idx) + " outside student vocab");
            const double s = student_logprobs->value(i, static_cast<std::size_t>(idx));
            if (!std::isfinite(s)) throw NumericError("kl_loss: student log-prob not finite at a kept index");
            if (p > 0.0) total += p * (std::log(p) - s);
        }
    }
    const double inv = 1.0 / static_cast<double>(positions);
    auto out = detail::make_op(Matrix(1, 1, total * inv), {student_logprobs});
    if (out->requires_grad) {
        Node* sp = student_logprobs.get();
        Node* op = out.get();
        out->backward_fn = [sp, op, teacher, inv] {
            const double g = op->grad.raw()[0] * inv;
            for (std::size_t i = 0; i < teacher.size(); ++i)
                for (const auto& [idx, p] : teacher[i]) sp->grad(i, static_cast<std::size_t>(idx)) -= g * p;
        };
    }
    return out;
}

// Per position: (1-s) * (-logp[target]) + s * mean over the vocabulary of
// (-logp), averaged over positions.
inline NodePtr label_smoothed_ce(const NodePtr& student_logprobs, const std::vector<int>& targets,
                                 double smoothing) {
    if (smoothing < 0.0 || smoothing >= 1.0)
        throw ConfigError("label_smoothed_ce: smoothing must be in [0,1)");
    const std::size_t positions = student_logprobs->rows();
    const std::size_t vocab = student_logprobs->cols();
    if (targets.size() != positions)
        throw ShapeError("label_smoothed_ce: " + std::to_string(targets.size()) + " targets vs " +
                         std::to_string(positions) + " rows");
    double total = 0.0;
    for (std::size_t i = 0; i < positions; ++i) {
        if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= vocab)
            throw DataError("label_smoothed_ce: target " + std::to_string(targets[i]) + " outside vocab");
        double mean_nll = 0.0;
        for (std::size_t v = 0; v < vocab; ++v) mean_nll -= student_logprobs->value(i, v);
        mean_nll /= static_cast<double>(vocab);
        total += (1.0 - smoothing) * -student_logprobs->value(i, static_cast<std::size_t>(targets[i])) +
                 smoothing * mean_nll;
    }
    const double inv = 1.0 / static_cast<double>(positions);
    auto out = detail::make_op(Matrix(1, 1, total * inv), {student_logprobs});
    if (out->requires_grad) {
        Node* sp = student_logprobs.get();
        Node* op = out.get();
        out->backward_fn = [sp, op, targets, smoothing, vocab, inv] {
            const double g = op->grad.raw()[0] * inv;
            const double uniform = smoothing / static_cast<double>(vocab);
            for (std::size_t i = 0; i < targets.size(); ++i) {
                for (std::size_t v = 0; v < vocab; ++v) sp->grad(i, v) -= g * uniform;
                sp->grad(i, static_cast<std::size_t>(targets[i])) -= g * (1.0 - smoothing);
            }
        };
    }
    return out;
}

// lambda * CE + (1 - lambda) * KL.
inline NodePtr st_loss(const NodePtr& ce, const NodePtr& kl, double lambda) {
    if (lambda < 0.0 || lambda > 1.0) throw ConfigError("st_loss: lambda must be in [0,1]");
    return add(scale(ce, lambda), scale(kl, 1.0 - lambda));
}

// ---------------------------------------------------------------------------
// Teacher table file: JSON lines, one {id, positions: [[[index, prob] x k]]}
// record per example.
// ---------------------------------------------------------------------------

inline void save_teacher_table(const std::string& path, const std::vector<TeacherExample>& examples) {
    std::ofstream os(path);
    if (!os) throw DataError("save_teacher_table: cannot open " + path);
    for (const auto& ex : examples) {
        nlohmann::json positions = nlohmann::json::array();
        for (const auto& pos : ex.positions) {
            nlohmann::json slot = nlohmann::json::array();
            for (const auto& [idx, p] : pos) slot.push_back({idx, p});
            positions.push_back(slot);
        }
        os << nlohmann::json{{"id", ex.id}, {"positions", positions}}.dump() << "\n";
    }
}

inline TeacherTable load_teacher_table(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("load_teacher_table: cannot open " + path);
    TeacherTable table;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw DataError("teacher table line " + std::to_string(line_no) + ": " + e.what());
        }
        TeacherExample ex;
        ex.id = j.at("id").get<std::string>();
        for (const auto& slot : j.at("positions")) {
            TopK pos;
            for (const auto& pair : slot)
                pos.emplace_back(pair.at(0).get<int>(), pair.at(1).get<double>());
            ex.positions.push_back(std::move(pos));
        }
        table[ex.id] = std::move(ex);
    }
    return table;
}

// ---------------------------------------------------------------------------
// ST model: Siamese speech encoder + a single cross-attention decoder block
// ---------------------------------------------------------------------------

struct DecoderConfig {
    std::size_t target_vocab = toy::kTargetVocab;
    int bos = toy::kTargetBos;
    int eos = toy::kTargetEos;
    std::size_t max_len = 64;
};

class StModel {
public:
    StModel(const EncoderConfig& enc_cfg, const DecoderConfig& dec_cfg, Rng& init_rng,
            const Matrix* frozen_text_embed = nullptr)
        : encoder_(enc_cfg, init_rng, frozen_text_embed), dec_cfg_(dec_cfg) {
        build_decoder(init_rng);
        // no CTC supervision at this stage: the acoustic stack and CTC head
        // stay exactly as initialized / loaded
        encoder_.params().set_trainable_prefix("acoustic.", false);
        encoder_.params().set_trainable_prefix("ctc_head.", false);
    }

    SiameseModel& encoder() { return encoder_; }
    const DecoderConfig& decoder_config() const { return dec_cfg_; }

    std::vector<NodePtr> trainable() {
        auto out = encoder_.params().trainable();
        for (const auto& p : decoder_store_.trainable()) out.push_back(p);
        return out;
    }

    void zero_grads() {
        encoder_.params().zero_grads();
        decoder_store_.zero_grads();
    }

    ParamSnapshot snapshot() const {
        ParamSnapshot s = encoder_.params().snapshot();
        for (const auto& e : decoder_store_.snapshot().entries) s.entries.push_back(e);
        return s;
    }

    void load(const ParamSnapshot& snap) {
        encoder_.params().load(snap);
        decoder_store_.load(snap);
    }

    // Initialize the encoder from a Siamese pretraining checkpoint (the
    // decoder stays fresh).
    void load_encoder(const ParamSnapshot& snap) { encoder_.params().load(snap); }

    struct Forward {
        NodePtr logits; // (len+1) x vocab
        NodePtr logprobs;
        std::vector<int> expected; // target tokens followed by eos
        bool skipped = false;
    };

    // Teacher-forced pass: inputs are [bos, target...], predictions line up
    // with [target..., eos].
    Forward forward(const Matrix& features, const std::vector<int>& target) {
        Forward out;
        auto enc = encoder_.speech_encode(features);
        if (enc.skipped) {
            out.skipped = true;
            return out;
        }
        std::vector<int> inputs;
        inputs.reserve(target.size() + 1);
        inputs.push_back(dec_cfg_.bos);
        inputs.insert(inputs.end(), target.begin(), target.end());
        out.expected = target;
        out.expected.push_back(dec_cfg_.eos);
        out.logits = decode_logits(enc.semantic_output, inputs);
        out.logprobs = log_softmax(out.logits);
        return out;
    }

    // Step function for search: encoder output is computed once, then each
    // call re-runs the (tiny) decoder on the whole prefix.
    using StepFn = std::function<std::vector<double>(const std::vector<int>&)>;

    struct DecodeContext {
        StepFn step;
        bool skipped = false;
    };

    DecodeContext make_step_fn(const Matrix& features) {
        DecodeContext ctx;
        auto enc = encoder_.speech_encode(features);
        if (enc.skipped) {
            ctx.skipped = true;
            return ctx;
        }
        const Matrix memory = enc.semantic_output->value;
        ctx.step = [this, memory](const std::vector<int>& prefix) {
            auto logits = decode_logits(Node::constant(memory), prefix);
            auto logprobs = log_softmax(logits);
            std::vector<double> row(logprobs->cols());
            for (std::size_t v = 0; v < row.size(); ++v)
                row[v] = logprobs->value(logprobs->rows() - 1, v);
            return row;
        };
        return ctx;
    }

    NodePtr decode_logits(const NodePtr& memory, const std::vector<int>& input_tokens) {
        for (int t : input_tokens)
            if (t < 0 || static_cast<std::size_t>(t) >= dec_cfg_.target_vocab)
                throw DataError("decode_logits: token " + std::to_string(t) + " outside target vocab");
        const std::size_t d = encoder_.config().d;
        auto q_in = add(embed(decoder_store_.get("dec.embed"), input_tokens),
                        Node::constant(sinusoidal_pe(input_tokens.size(), d)));
        auto q = matmul(layer_norm(q_in), decoder_store_.get("dec.attn.wq"));
        // position channel on the memory side, independent of how much
        // positional structure the encoder has learned
        auto keyed = add(memory, Node::constant(sinusoidal_pe(memory->rows(), d)));
        auto keys = matmul(keyed, decoder_store_.get("dec.attn.wk"));
        auto values = matmul(keyed, decoder_store_.get("dec.attn.wv"));
        auto scores = scale(matmul(q, transpose(keys)), 1.0 / std::sqrt(static_cast<double>(d)));
        auto context = matmul(softmax_rows(scores), values);
        auto h = add(q_in, matmul(context, decoder_store_.get("dec.attn.wo")));
        auto ff = dense(gelu(dense(layer_norm(h), "dec.ff1")), "dec.ff2");
        h = add(h, ff);
        return dense(h, "dec.out");
    }

private:
    void build_decoder(Rng& rng) {
        const std::size_t d = encoder_.config().d;
        const std::size_t ff = encoder_.config().ff_multiple * d;
        auto dense_init = [&](const std::string& name, std::size_t in, std::size_t out) {
            decoder_store_.create(name + ".W", rng.gaussian(in, out, 1.0 / std::sqrt(static_cast<double>(in))));
            decoder_store_.create(name + ".b", Matrix(1, out));
        };
        decoder_store_.create("dec.embed", rng.gaussian(dec_cfg_.target_vocab, d, 1.0));
        auto attn_init = [&](const std::string& name) {
            decoder_store_.create(name, rng.gaussian(d, d, 1.0 / std::sqrt(static_cast<double>(d))));
        };
        attn_init("dec.attn.wq");
        attn_init("dec.attn.wk");
        attn_init("dec.attn.wv");
        attn_init("dec.attn.wo");
        dense_init("dec.ff1", d, ff);
        dense_init("dec.ff2", ff, d);
        dense_init("dec.out", d, dec_cfg_.target_vocab);
    }

    NodePtr dense(const NodePtr& x, const std::string& name) {
        return add_rowvec(matmul(x, decoder_store_.get(name + ".W")), decoder_store_.get(name + ".b"));
    }

    SiameseModel encoder_;
    DecoderConfig dec_cfg_;
    ParamStore decoder_store_;
};

// ---------------------------------------------------------------------------
// Beam search
// ---------------------------------------------------------------------------

struct Hypothesis {
    std::vector<int> tokens; // generated tokens, ending with eos unless cut at max_len
    double score = 0.0; // sum of per-step log-probabilities
    double normalized_score = -std::numeric_limits<double>::infinity(); // score / tokens

    bool empty() const { return tokens.empty(); }
};

// Length-normalized beam search. At every step the top `beam_size`
// candidates are taken in score order; a candidate emitting eos retires to
// the finished pool, the rest stay on the beam. With beam_size 1 this is
// exactly greedy decoding.
inline Hypothesis beam_search(const StModel::StepFn& step, int bos, int eos, std::size_t beam_size,
                              std::size_t max_len) {
    if (beam_size < 1) throw ConfigError("beam_search: beam_size must be >= 1");
    struct Beam {
        std::vector<int> prefix; // starts with bos
        double score = 0.0;
    };
    std::vector<Beam> beams{{{bos}, 0.0}};
    std::vector<Hypothesis> finished;

    auto finish = [&](const Beam& beam, int last, double score) {
        Hypothesis h;
        h.tokens.assign(beam.prefix.begin() + 1, beam.prefix.end());
        if (last >= 0) h.tokens.push_back(last);
        h.score = score;
        h.normalized_score = h.tokens.empty() ? -std::numeric_limits<double>::infinity()
                                              : score / static_cast<double>(h.tokens.size());
        finished.push_back(std::move(h));
    };

    for (std::size_t t = 0; t < max_len && !beams.empty(); ++t) {
        struct Cand {
            std::size_t beam_index;
            int token;
            double score;
        };
        std::vector<Cand> cands;
        for (std::size_t b = 0; b < beams.size(); ++b) {
            const auto lp = step(beams[b].prefix);
            for (std::size_t v = 0; v < lp.size(); ++v)
                cands.push_back({b, static_cast<int>(v), beams[b].score + lp[v]});
        }
        std::stable_sort(cands.begin(), cands.end(),
                         [](const Cand& a, const Cand& b) { return a.score > b.score; });

        std::vector<Beam> next;
        for (std::size_t i = 0; i < cands.size() && i < beam_size; ++i) {
            const Cand& c = cands[i];
            if (c.token == eos) {
                finish(beams[c.beam_index], eos, c.score);
            } else {
                Beam nb = beams[c.beam_index];
                nb.prefix.push_back(c.token);
                nb.score = c.score;
                next.push_back(std::move(nb));
            }
        }
        beams = std::move(next);
    }
    for (const auto& b : beams) finish(b, -1, b.score); // cut at max_len, no eos

    Hypothesis best;
    for (const auto& h : finished)
        if (h.normalized_score > best.normalized_score) best = h;
    return best;
}

// Per-step arithmetic mean of the member models' log-probabilities.
inline StModel::StepFn ensemble_step(std::vector<StModel::StepFn> members) {
    if (members.empty()) throw ConfigError("ensemble_step: no members");
    return [members = std::move(members)](const std::vector<int>& prefix) {
        auto acc = members[0](prefix);
        for (std::size_t m = 1; m < members.size(); ++m) {
            const auto lp = members[m](prefix);
            if (lp.size() != acc.size()) throw ShapeError("ensemble_step: member vocab mismatch");
            for (std::size_t v = 0; v < acc.size(); ++v) acc[v] += lp[v];
        }
        const double inv = 1.0 / static_cast<double>(members.size());
        for (double& v : acc) v *= inv;
        return acc;
    };
}

// ---------------------------------------------------------------------------
// Fine-tuning loop
// ---------------------------------------------------------------------------

struct StTrainConfig {
    std::size_t max_steps = 2000;
    std::size_t batch_size = 8; // examples accumulated per optimizer step
    std::size_t val_interval = 25;
    std::size_t keep_checkpoints = 10;
    std::size_t val_beam = 1; // greedy validation keeps the loop fast
    AdamConfig adam{.lr = 5e-5};
    double final_lr_scale = 0.01; // decayed-to fraction of the base rate
    double constant_fraction = 0.2;
    KdConfig kd{};
    std::uint64_t seed = 0;
};

struct StMetricsRow {
    std::size_t step = 0;
    double l_ce = 0, l_kl = 0, combined = 0;
    double val_bleu = 0;
};

struct StTrainResult {
    std::vector<ScoredCheckpoint> best_checkpoints; // by validation BLEU, best first
    std::vector<StMetricsRow> log;
    std::size_t skipped_examples = 0;
    double best_val_bleu = 0.0;
    std::size_t steps_run = 0;
};

inline std::size_t longest_target(const std::vector<toy::StExample>& examples) {
    std::size_t longest = 0;
    for (const auto& ex : examples) longest = std::max(longest, ex.target.size());
    return longest;
}

inline double st_validation_bleu(StModel& model, const std::vector<toy::StExample>& val,
                                 std::size_t beam, std::size_t max_len) {
    std::vector<std::string> hyps, refs;
    for (const auto& ex : val) {
        refs.push_back(ex.reference);
        auto ctx = model.make_step_fn(ex.features);
        if (ctx.skipped) {
            hyps.emplace_back();
            continue;
        }
        const auto hyp = beam_search(ctx.step, model.decoder_config().bos, model.decoder_config().eos,
                                     beam, max_len);
        std::vector<int> content;
        for (int tok : hyp.tokens)
            if (tok != model.decoder_config().eos) content.push_back(tok);
        hyps.push_back(toy::target_surface(content));
    }
    return corpus_bleu(hyps, refs, 4, BleuSmoothing::AddK).score;
}

// Optimizes lambda * CE + (1 - lambda) * KL (plain label-smoothed CE when KD
// is off). The acoustic stack and CTC head are frozen; checkpoints are
// selected by validation BLEU.
inline StTrainResult train_st(StModel& model, const std::vector<toy::StExample>& train,
                              const std::vector<toy::StExample>& val, const TeacherTable* teacher,
                              const StTrainConfig& cfg) {
    if (train.empty()) throw DataError("train_st: empty training set");
    cfg.kd.validate();
    if (cfg.kd.enabled && !teacher) throw DataError("train_st: KD enabled but no teacher table");

    StTrainResult result;
    Adam adam(cfg.adam);
    ConstThenDecaySchedule schedule{.total_steps = cfg.max_steps,
                                    .constant_fraction = cfg.constant_fraction,
                                    .final_scale = cfg.final_lr_scale};
    Rng order_rng(cfg.seed);
    auto trainable = model.trainable();

    auto record_checkpoint = [&](double bleu, std::size_t step) {
        ScoredCheckpoint ckpt{bleu, step, model.snapshot()};
        auto pos = result.best_checkpoints.begin();
        while (pos != result.best_checkpoints.end() && pos->score >= bleu) ++pos;
        result.best_checkpoints.insert(pos, std::move(ckpt));
        if (result.best_checkpoints.size() > cfg.keep_checkpoints) result.best_checkpoints.pop_back();
    };

    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < train.size(); ++i) order[i] = i;
    std::size_t cursor = train.size();
    std::size_t consecutive_skips = 0;

    double acc_ce = 0, acc_kl = 0, acc_comb = 0;
    std::size_t acc_count = 0;

    const std::size_t batch = std::max<std::size_t>(1, cfg.batch_size);
    auto example_loss = [&](const toy::StExample& example, const StModel::Forward& fwd,
                            LossBreakdown& breakdown) -> NodePtr {
        if (cfg.kd.enabled) {
            auto it = teacher->find(example.id);
            if (it == teacher->end()) throw DataError("train_st: no teacher entry for " + example.id);
            const auto& entry = it->second;
            if (entry.positions.size() != fwd.expected.size())
                throw DataError("train_st: teacher has " + std::to_string(entry.positions.size()) +
                                " positions for " + example.id + ", expected " +
                                std::to_string(fwd.expected.size()));
            std::vector<TopK> soft_teacher;
            soft_teacher.reserve(entry.positions.size());
            for (const auto& pos : entry.positions) soft_teacher.push_back(soften_topk(pos, cfg.kd.temperature));
            auto student_soft = log_softmax(scale(fwd.logits, 1.0 / cfg.kd.temperature));
            auto ce = label_smoothed_ce(fwd.logprobs, fwd.expected, 0.0); // no smoothing with KD
            auto kl = kl_loss(soft_teacher, student_soft);
            breakdown.l_ce = ce->scalar();
            breakdown.l_kl = kl->scalar();
            return st_loss(ce, kl, cfg.kd.lambda);
        }
        auto ce = label_smoothed_ce(fwd.logprobs, fwd.expected, cfg.kd.label_smoothing);
        breakdown.l_ce = ce->scalar();
        return ce;
    };

    for (std::size_t step = 1; step <= cfg.max_steps; ++step) {
        // accumulate mean gradients over a batch, then update once
        model.zero_grads();
        std::size_t in_batch = 0;
        double batch_ce = 0, batch_kl = 0, batch_comb = 0;
        while (in_batch < batch) {
            if (cursor >= order.size()) {
                order_rng.shuffle(order);
                cursor = 0;
            }
            const auto& example = train[order[cursor++]];
            auto fwd = model.forward(example.features, example.target);
            if (fwd.skipped) {
                ++result.skipped_examples;
                if (++consecutive_skips > train.size())
                    throw DataError("train_st: every training example produced an empty compression");
                continue;
            }
            consecutive_skips = 0;

            LossBreakdown breakdown;
            auto loss = example_loss(example, fwd, breakdown);
            breakdown.lambda = cfg.kd.lambda;
            breakdown.combined = loss->scalar();
            if (!std::isfinite(breakdown.combined))
                throw DivergenceError("train_st: non-finite loss at step " + std::to_string(step));
            backward(scale(loss, 1.0 / static_cast<double>(batch)));

            batch_ce += *breakdown.l_ce;
            batch_kl += breakdown.l_kl.value_or(0.0);
            batch_comb += breakdown.combined;
            ++in_batch;
        }
        adam.step(trainable, schedule.scale(step));

        acc_ce += batch_ce / static_cast<double>(in_batch);
        acc_kl += batch_kl / static_cast<double>(in_batch);
        acc_comb += batch_comb / static_cast<double>(in_batch);
        ++acc_count;
        result.steps_run = step;

        if (step % cfg.val_interval == 0) {
            const double bleu = st_validation_bleu(model, val, cfg.val_beam, 2 * longest_target(val) + 4);
            const double inv = acc_count ? 1.0 / static_cast<double>(acc_count) : 0.0;
            result.log.push_back({step, acc_ce * inv, acc_kl * inv, acc_comb * inv, bleu});
            acc_ce = acc_kl = acc_comb = 0.0;
            acc_count = 0;
            record_checkpoint(bleu, step);
            result.best_val_bleu = std::max(result.best_val_bleu, bleu);
        }
    }
    return result;
}

inline void write_st_metrics_csv(const std::string& path, const std::vector<StMetricsRow>& rows) {
    std::ofstream os(path);
    if (!os) throw DataError("write_st_metrics_csv: cannot open " + path);
    os << "step,l_ce,l_kl,combined,val_bleu\n";
    char buf[256];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%zu,%.12g,%.12g,%.12g,%.12g\n", r.step, r.l_ce, r.l_kl, r.combined,
                      r.val_bleu);
        os << buf;
    }
}

// Noisy-oracle teacher for the toy task: mostly confident on the true token,
// confidently wrong at `error_rate`, truncated to top-k and renormalized.
inline std::vector<TeacherExample> make_synthetic_teacher(const std::vector<toy::StExample>& examples,
                                                          std::size_t k, double error_rate,
                                                          std::uint64_t seed) {
    Rng rng(seed);
    std::vector<TeacherExample> table;
    table.reserve(examples.size());
    for (const auto& ex : examples) {
        TeacherExample te;
        te.id = ex.id;
        std::vector<int> expected = ex.target;
        expected.push_back(toy::kTargetEos);
        for (int correct : expected) {
            std::vector<double> logits(toy::kTargetVocab);
            for (double& v : logits) v = rng.normal(0.0, 0.7);
            int peak = correct;
            if (rng.uniform() < error_rate)
                peak = rng.uniform_int(0, static_cast<int>(toy::kTargetVocab) - 1);
            logits[peak] += 4.0;
            te.positions.push_back(truncate_topk(soften(logits, 1.0), k));
        }
        table.push_back(std::move(te));
    }
    return table;
}

} // namespace stkit
