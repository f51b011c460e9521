// stkit command-line front end: one subcommand per pipeline stage.

#include <atomic>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "stkit/config.hpp"
#include "stkit/ctc.hpp"
#include "stkit/datapipe.hpp"
#include "stkit/metrics.hpp"
#include "stkit/ot.hpp"
#include "stkit/segtool.hpp"
#include "stkit/siamese.hpp"
#include "stkit/sttrain.hpp"
#include "stkit/toydata.hpp"

namespace fs = std::filesystem;
using namespace stkit;

namespace {

constexpr const char* kVersion = "stkit 0.1.0";

struct CommonArgs {
    std::string config_path;
    std::vector<std::string> overrides; // key=value
    std::string out_dir;
    long long seed = -1; // -1: keep config value
    long long jobs = -1;

    RunConfig resolve(const std::string& command) const {
        RunConfig cfg;
        std::vector<std::pair<std::string, std::string>> entries;
        if (!config_path.empty()) load_config_file(cfg, config_path, &entries);
        for (const auto& kv : overrides) {
            const auto eq = kv.find('=');
            if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
            apply_config_entry(cfg, kv.substr(0, eq), kv.substr(eq + 1));
            entries.emplace_back(kv.substr(0, eq), kv.substr(eq + 1));
        }
        if (seed >= 0) cfg.seed = static_cast<std::uint64_t>(seed);
        if (jobs >= 1) cfg.jobs = static_cast<std::size_t>(jobs);
        if (!out_dir.empty()) {
            fs::create_directories(out_dir);
            nlohmann::json header{{"version", kVersion},
                                  {"command", command},
                                  {"seed", cfg.seed},
                                  {"config_hash", config_hash(entries, cfg.seed)}};
            std::ofstream os(fs::path(out_dir) / "run_info.json");
            os << header.dump(2) << "\n";
        }
        return cfg;
    }

    fs::path out(const std::string& name) const {
        if (out_dir.empty()) throw ConfigError("this subcommand requires --out-dir");
        return fs::path(out_dir) / name;
    }
};

void add_common(CLI::App* cmd, CommonArgs& args, bool needs_out = true) {
    cmd->add_option("--config", args.config_path, "key = value configuration file");
    cmd->add_option("--set", args.overrides, "override a config entry (key=value), repeatable");
    cmd->add_option("--seed", args.seed, "random seed (overrides the config)");
    cmd->add_option("--jobs", args.jobs, "worker threads for parallel stages");
    auto* out = cmd->add_option("--out-dir", args.out_dir, "output directory");
    if (needs_out) out->required();
}

// Deterministic parallel map: results land in slot order regardless of the
// thread interleaving.
template <typename Fn>
void parallel_for(std::size_t count, std::size_t jobs, Fn&& fn) {
    jobs = std::max<std::size_t>(1, std::min(jobs, count));
    if (jobs == 1) {
        for (std::size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> workers;
    std::vector<std::exception_ptr> errors(jobs);
    for (std::size_t w = 0; w < jobs; ++w)
        workers.emplace_back([&, w] {
            try {
                for (std::size_t i = next++; i < count; i = next++) fn(i);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    for (auto& t : workers) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

EncoderConfig encoder_config(const RunConfig& cfg) {
    EncoderConfig enc = cfg.model;
    enc.text_vocab = toy::kTextVocab;
    return enc;
}

toy::CorpusConfig corpus_config(const RunConfig& cfg) {
    toy::CorpusConfig cc;
    cc.size = cfg.toy.train_size + cfg.toy.val_size;
    cc.min_words = cfg.toy.min_words;
    cc.max_words = cfg.toy.max_words;
    cc.min_word_len = cfg.toy.min_word_len;
    cc.max_word_len = cfg.toy.max_word_len;
    cc.render.feature_dim = cfg.model.feature_dim;
    cc.render.noise_sd = cfg.toy.noise_sd;
    return cc;
}

// Manifest-backed speech examples: features from binary matrix files,
// transcripts normalized and tokenized with the toolkit's text pipeline.
std::vector<SpeechExample> manifest_speech_examples(const std::string& manifest_path) {
    const auto manifest = load_manifest(manifest_path);
    const fs::path base = fs::path(manifest_path).parent_path();
    std::vector<SpeechExample> out;
    for (const auto& ex : manifest) {
        if (ex.features_path.empty())
            throw DataError("example '" + ex.id + "' has no features file");
        SpeechExample sp;
        sp.id = ex.id;
        sp.transcript = normalize_text(ex.transcript, NormalizeMode::Asr);
        // hyphens survive normalization but sit outside the toy charset
        for (char& c : sp.transcript)
            if (c == '-') c = ' ';
        sp.transcript = normalize_text(sp.transcript, NormalizeMode::Mt);
        if (sp.transcript.empty()) throw DataError("example '" + ex.id + "' normalizes to empty text");
        sp.features = load_matrix((base / ex.features_path).string());
        sp.ctc_target = toy::ctc_targets(sp.transcript);
        sp.text_ids = toy::bigram_ids(sp.transcript);
        out.push_back(std::move(sp));
    }
    return out;
}

int run_filter(const CommonArgs& common, const std::string& manifest_path) {
    RunConfig cfg = common.resolve("filter");
    auto examples = load_manifest(manifest_path);

    // text normalization first: ASR-style transcripts, MT-style translations
    for (auto& ex : examples) {
        ex.transcript = normalize_text(ex.transcript, NormalizeMode::Asr);
        ex.translation = normalize_text(ex.translation, NormalizeMode::Mt);
    }

    std::vector<ParallelExample> kept;
    FilterReport report;
    if (cfg.filter.mode == "siamese") {
        for (const auto& ex : examples)
            if (ex.asr_hypothesis.empty())
                throw DataError("siamese filtering needs asr_hypothesis for '" + ex.id + "'");
        std::tie(kept, report) = filter_by_calibrated_wer(examples, cfg.filter.target_corpus_wer);
    } else if (cfg.filter.mode == "st") {
        StFilterConfig fc;
        fc.wer_threshold = cfg.filter.st_wer_threshold;
        fc.min_chars = cfg.filter.min_chars;
        fc.ratio_min = cfg.filter.ratio_min;
        fc.ratio_max = cfg.filter.ratio_max;
        std::tie(kept, report) = filter_st(examples, fc);

        // near-duplicate rejection of synthetic candidates per talk
        std::vector<ParallelExample> originals, candidates;
        for (const auto& ex : kept)
            (ex.synthetic ? candidates : originals).push_back(ex);
        if (!candidates.empty()) {
            auto dedup = tfidf_filter(originals, candidates, cfg.filter.tfidf_threshold);
            for (std::size_t i = 0; i < dedup.rejected; ++i) report.add_removal("tfidf_duplicate");
            report.warnings += dedup.warnings;
            kept = std::move(originals);
            for (auto& ex : dedup.kept) kept.push_back(std::move(ex));
            report.kept_count = kept.size();
        }
    } else {
        throw ConfigError("filter.mode must be 'st' or 'siamese', got '" + cfg.filter.mode + "'");
    }

    save_manifest(common.out("kept.jsonl").string(), kept);
    std::ofstream js(common.out("filter_report.json"));
    js << report.to_json() << "\n";
    std::ofstream txt(common.out("filter_report.txt"));
    txt << report.to_text();
    std::cout << report.to_text();
    return 0;
}

int run_train_siamese(const CommonArgs& common, const std::string& manifest_path) {
    RunConfig cfg = common.resolve("train-siamese");
    std::vector<SpeechExample> train, val;
    if (manifest_path.empty()) {
        auto corpus = toy::make_speech_corpus(corpus_config(cfg), cfg.seed);
        train.assign(corpus.begin(), corpus.begin() + static_cast<std::ptrdiff_t>(cfg.toy.train_size));
        val.assign(corpus.begin() + static_cast<std::ptrdiff_t>(cfg.toy.train_size), corpus.end());
    } else {
        auto corpus = manifest_speech_examples(manifest_path);
        if (corpus.size() < 2) throw DataError("need at least 2 examples to split train/validation");
        const std::size_t val_count = std::max<std::size_t>(1, corpus.size() / 10);
        val.assign(corpus.end() - static_cast<std::ptrdiff_t>(val_count), corpus.end());
        train.assign(corpus.begin(), corpus.end() - static_cast<std::ptrdiff_t>(val_count));
    }

    Rng init_rng(cfg.seed);
    const Matrix text_embed = toy::bigram_embedding_table(cfg.model.d);
    SiameseModel model(encoder_config(cfg), init_rng, &text_embed);

    SiameseTrainConfig tc;
    tc.max_steps = cfg.train.max_steps;
    tc.val_interval = cfg.train.val_interval;
    tc.patience_steps = cfg.train.patience_steps;
    tc.keep_checkpoints = cfg.train.keep_checkpoints;
    tc.warmup_steps = cfg.optim.warmup_steps;
    tc.adam = {cfg.optim.siamese_lr, cfg.optim.beta1, cfg.optim.beta2, cfg.optim.epsilon};
    tc.seed = cfg.seed;

    auto result = train_siamese(model, train, val, tc);
    write_metrics_csv(common.out("metrics.csv").string(), result.log);
    save_checkpoint(common.out("checkpoint_best.bin").string(), result.best_checkpoints.front().params);
    std::vector<ParamSnapshot> best;
    for (const auto& c : result.best_checkpoints) best.push_back(c.params);
    save_checkpoint(common.out("checkpoint_avg.bin").string(), average_checkpoints(best));

    std::printf("steps: %zu  skipped: %zu  val OT2: %.6f -> %.6f%s\n", result.steps_run,
                result.skipped_examples, result.initial_val_ot2, result.best_val_ot2,
                result.early_stopped ? "  (early stop)" : "");
    return 0;
}

int run_train_st(const CommonArgs& common, const std::string& siamese_ckpt,
                 const std::string& teacher_path) {
    RunConfig cfg = common.resolve("train-st");
    auto corpus = toy::make_st_corpus(corpus_config(cfg), cfg.seed);
    std::vector<toy::StExample> train(corpus.begin(),
                                      corpus.begin() + static_cast<std::ptrdiff_t>(cfg.toy.train_size));
    std::vector<toy::StExample> val(corpus.begin() + static_cast<std::ptrdiff_t>(cfg.toy.train_size),
                                    corpus.end());

    Rng init_rng(cfg.seed + 1);
    const Matrix text_embed = toy::bigram_embedding_table(cfg.model.d);
    DecoderConfig dec;
    dec.max_len = cfg.decode.max_len;
    StModel model(encoder_config(cfg), dec, init_rng, &text_embed);
    if (!siamese_ckpt.empty()) model.load_encoder(load_checkpoint(siamese_ckpt));

    TeacherTable teacher;
    if (cfg.kd.enabled) {
        if (!teacher_path.empty()) {
            teacher = load_teacher_table(teacher_path);
        } else {
            // synthesize the offline teacher and keep it with the run
            auto list = make_synthetic_teacher(train, cfg.kd.k, cfg.toy.teacher_error_rate, cfg.seed + 2);
            save_teacher_table(common.out("teacher.jsonl").string(), list);
            for (auto& t : list) teacher[t.id] = t;
        }
    }

    StTrainConfig tc;
    tc.max_steps = cfg.train.max_steps;
    tc.batch_size = cfg.train.batch_size;
    tc.val_interval = cfg.train.val_interval;
    tc.keep_checkpoints = cfg.train.keep_checkpoints;
    tc.adam = {cfg.optim.st_lr, cfg.optim.beta1, cfg.optim.beta2, cfg.optim.epsilon};
    tc.final_lr_scale = cfg.optim.st_lr > 0 ? cfg.optim.st_final_lr / cfg.optim.st_lr : 1.0;
    tc.constant_fraction = cfg.optim.st_constant_fraction;
    tc.kd = cfg.kd;
    tc.seed = cfg.seed;

    auto result = train_st(model, train, val, cfg.kd.enabled ? &teacher : nullptr, tc);
    write_st_metrics_csv(common.out("metrics.csv").string(), result.log);
    if (result.best_checkpoints.empty()) throw DataError("train-st produced no checkpoints");
    save_checkpoint(common.out("checkpoint_best.bin").string(), result.best_checkpoints.front().params);
    std::vector<ParamSnapshot> best;
    for (const auto& c : result.best_checkpoints) best.push_back(c.params);
    save_checkpoint(common.out("checkpoint_avg.bin").string(), average_checkpoints(best));

    std::printf("steps: %zu  skipped: %zu  best val BLEU: %.2f\n", result.steps_run,
                result.skipped_examples, result.best_val_bleu);
    return 0;
}

int run_decode(const CommonArgs& common, const std::vector<std::string>& model_paths) {
    RunConfig cfg = common.resolve("decode");
    if (model_paths.empty()) throw ConfigError("decode needs at least one --model checkpoint");

    auto corpus = toy::make_st_corpus(corpus_config(cfg), cfg.seed);
    std::vector<toy::StExample> inputs(corpus.begin() + static_cast<std::ptrdiff_t>(cfg.toy.train_size),
                                       corpus.end());

    const Matrix text_embed = toy::bigram_embedding_table(cfg.model.d);
    DecoderConfig dec;
    dec.max_len = cfg.decode.max_len;
    std::vector<std::unique_ptr<StModel>> models;
    for (const auto& path : model_paths) {
        Rng rng(cfg.seed);
        auto model = std::make_unique<StModel>(encoder_config(cfg), dec, rng, &text_embed);
        model->load(load_checkpoint(path));
        models.push_back(std::move(model));
    }

    std::vector<std::string> hyps(inputs.size());
    parallel_for(inputs.size(), cfg.jobs, [&](std::size_t i) {
        std::vector<StModel::StepFn> steps;
        for (auto& m : models) {
            auto ctx = m->make_step_fn(inputs[i].features);
            if (ctx.skipped) {
                hyps[i].clear();
                return;
            }
            steps.push_back(std::move(ctx.step));
        }
        auto step = steps.size() == 1 ? steps[0] : ensemble_step(steps);
        auto hyp = beam_search(step, dec.bos, dec.eos, cfg.decode.beam, cfg.decode.max_len);
        std::vector<int> content;
        for (int tok : hyp.tokens)
            if (tok != dec.eos) content.push_back(tok);
        hyps[i] = toy::target_surface(content);
    });

    std::ofstream os(common.out("hypotheses.txt"));
    for (const auto& h : hyps) os << h << "\n";
    std::vector<std::string> refs;
    for (const auto& ex : inputs) refs.push_back(ex.reference);
    const auto score = corpus_bleu(hyps, refs, 4, BleuSmoothing::AddK);
    std::ofstream js(common.out("score.json"));
    js << score.to_json() << "\n";
    std::printf("decoded %zu inputs with beam %zu (%zu model%s): BLEU %.2f\n", inputs.size(),
                cfg.decode.beam, models.size(), models.size() == 1 ? "" : "s", score.score);
    return 0;
}

int run_segment_sweep(const CommonArgs& common, const std::vector<std::string>& track_paths,
                      long long synthetic_tracks) {
    RunConfig cfg = common.resolve("segment-sweep");
    std::vector<ProbabilityTrack> tracks;
    for (const auto& path : track_paths) tracks.push_back(load_track(path));
    if (synthetic_tracks > 0) {
        Rng rng(cfg.seed);
        for (long long i = 0; i < synthetic_tracks; ++i) {
            ProbabilityTrack t;
            t.frame_rate = 50.0;
            const int frames = rng.uniform_int(1500, 4000);
            t.probabilities.resize(static_cast<std::size_t>(frames));
            for (double& p : t.probabilities) p = rng.uniform(0.0, 1.0);
            tracks.push_back(std::move(t));
        }
    }
    if (tracks.empty()) throw DataError("segment-sweep needs --tracks files or --synthetic > 0");

    std::vector<SegmentationParams> grid;
    for (const auto& p : default_grid(cfg.sweep.max_limit, cfg.sweep.step))
        if (p.min_length >= cfg.sweep.min_start - 1e-12) grid.push_back(p);

    const double target = cfg.sweep.target_mean_length;
    auto scorer = [target](const std::vector<SegmentationResult>& segs) {
        double total = 0.0;
        std::size_t n = 0;
        for (const auto& s : segs)
            for (const auto& seg : s.segments) {
                total += seg.length();
                ++n;
            }
        if (n == 0) throw DataError("no segments");
        return -std::fabs(total / static_cast<double>(n) - target);
    };

    // combinations are independent: evaluate in parallel, then one sort
    SweepResult result;
    result.rows.resize(grid.size());
    parallel_for(grid.size(), cfg.jobs, [&](std::size_t i) {
        auto single = sweep(tracks, {grid[i]}, scorer);
        result.rows[i] = single.rows.front();
    });
    std::stable_sort(result.rows.begin(), result.rows.end(), [](const SweepRow& a, const SweepRow& b) {
        if (a.score.has_value() != b.score.has_value()) return a.score.has_value();
        if (a.score && b.score && *a.score != *b.score) return *a.score > *b.score;
        if (a.max_length != b.max_length) return a.max_length < b.max_length;
        return a.min_length < b.min_length;
    });

    save_sweep_csv(common.out("sweep.csv").string(), result);
    const auto& best = result.best();
    std::printf("swept %zu combinations over %zu tracks; best (min=%g, max=%g) score %.4f\n",
                result.rows.size(), tracks.size(), best.min_length, best.max_length, *best.score);
    return 0;
}

// independent brute-force enumeration used only by the self-check command
double ctc_enumeration_probability(const Matrix& log_probs, const std::vector<int>& target) {
    const std::size_t frames = log_probs.rows(), vocab = log_probs.cols();
    std::vector<int> labeling(frames, 0);
    double total = 0.0;
    while (true) {
        std::vector<int> collapsed;
        int prev = -1;
        for (int l : labeling) {
            if (l != prev && l != kCtcBlank) collapsed.push_back(l);
            prev = l;
        }
        if (collapsed == target) {
            double lp = 0.0;
            for (std::size_t t = 0; t < frames; ++t) lp += log_probs(t, labeling[t]);
            total += std::exp(lp);
        }
        std::size_t pos = 0;
        while (pos < frames && ++labeling[pos] == static_cast<int>(vocab)) labeling[pos++] = 0;
        if (pos == frames) break;
    }
    return total;
}

int run_ctc_check(const CommonArgs& common, long long instances) {
    RunConfig cfg = common.resolve("ctc-check");
    Rng rng(cfg.seed);
    std::printf("%6s %6s %8s %14s %14s %10s\n", "frames", "vocab", "target", "ctc_loss", "-ln(brute)",
                "abs diff");
    double worst = 0.0;
    long long done = 0;
    while (done < instances) {
        const std::size_t frames = static_cast<std::size_t>(rng.uniform_int(1, 5));
        const std::size_t vocab = static_cast<std::size_t>(rng.uniform_int(2, 4));
        const std::size_t len = static_cast<std::size_t>(rng.uniform_int(1, 3));
        std::vector<int> target;
        for (std::size_t i = 0; i < len; ++i)
            target.push_back(rng.uniform_int(1, static_cast<int>(vocab) - 1));
        std::size_t repeats = 0;
        for (std::size_t i = 1; i < target.size(); ++i)
            if (target[i] == target[i - 1]) ++repeats;
        if (frames < len + repeats) continue;

        Matrix lp(frames, vocab);
        for (std::size_t t = 0; t < frames; ++t) {
            double z = 0.0;
            std::vector<double> row(vocab);
            for (auto& v : row) {
                v = rng.uniform(0.05, 1.0);
                z += v;
            }
            for (std::size_t k = 0; k < vocab; ++k) lp(t, k) = std::log(row[k] / z);
        }
        const double loss = ctc_loss(CtcPosterior{Node::constant(lp)}, target)->scalar();
        const double brute = -std::log(ctc_enumeration_probability(lp, target));
        const double diff = std::fabs(loss - brute);
        worst = std::max(worst, diff);
        std::printf("%6zu %6zu %8zu %14.9f %14.9f %10.2e\n", frames, vocab, len, loss, brute, diff);
        ++done;
    }
    std::printf("worst |difference|: %.3e over %lld instances\n", worst, instances);
    if (worst > 1e-9) {
        std::fprintf(stderr, "ctc-check FAILED: enumeration mismatch\n");
        return 1;
    }
    return 0;
}

int run_ot_check(const CommonArgs& common) {
    RunConfig cfg = common.resolve("ot-check");
    Rng rng(cfg.seed);
    std::printf("%3s %12s %12s %12s %10s %8s\n", "n", "sinkhorn", "oracle", "gap", "violation", "iters");
    bool ok = true;
    for (std::size_t n = 2; n <= 6; ++n) {
        Matrix c(n, n);
        for (double& v : c.raw()) v = rng.uniform(0.0, 1.0);
        SinkhornConfig sc{0.01, 2000000, 1e-6};
        auto plan = sinkhorn(c, uniform_marginal(n), uniform_marginal(n), sc);
        const double oracle = exact_ot_oracle(c);
        const double gap = plan.transport_cost - oracle;
        // a plan feasible only to `tolerance` can undercut the exact
        // optimum by at most n * tolerance * max|C|
        double max_cost = 0.0;
        for (double v : c.raw()) max_cost = std::max(max_cost, std::fabs(v));
        const double slack = static_cast<double>(n) * sc.tolerance * max_cost;
        std::printf("%3zu %12.6f %12.6f %12.3e %10.2e %8zu\n", n, plan.transport_cost, oracle, gap,
                    plan.max_violation, plan.iterations_used);
        if (gap < -slack || !plan.converged) ok = false;
    }
    if (!ok) {
        std::fprintf(stderr, "ot-check FAILED: upper bound violated or not converged\n");
        return 1;
    }
    return 0;
}

int run_bleu(const CommonArgs& common, const std::string& hyp_path, const std::string& ref_path) {
    common.resolve("bleu");
    auto read_lines = [](const std::string& path) {
        std::ifstream is(path);
        if (!is) throw DataError("cannot open " + path);
        std::vector<std::string> lines;
        std::string line;
        while (std::getline(is, line)) lines.push_back(line);
        return lines;
    };
    const auto score = corpus_bleu(read_lines(hyp_path), read_lines(ref_path));
    std::cout << score.to_json() << "\n";
    if (!common.out_dir.empty()) {
        std::ofstream os(common.out("score.json"));
        os << score.to_json() << "\n";
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"speech-translation training toolkit"};
    app.require_subcommand(1);
    app.set_version_flag("--version", kVersion);

    CommonArgs filter_args, siamese_args, st_args, decode_args, sweep_args, ctc_args, ot_args, bleu_args;
    std::string manifest_path, siamese_manifest, siamese_ckpt, teacher_path, hyp_path, ref_path;
    std::vector<std::string> model_paths, track_paths;
    long long synthetic_tracks = 0, ctc_instances = 50;

    auto* filter = app.add_subcommand("filter", "normalize and filter a manifest");
    add_common(filter, filter_args);
    filter->add_option("--manifest", manifest_path, "input JSONL manifest")->required();

    auto* train_siamese_cmd = app.add_subcommand("train-siamese", "pretrain the speech encoder");
    add_common(train_siamese_cmd, siamese_args);
    train_siamese_cmd->add_option("--manifest", siamese_manifest,
                                  "JSONL manifest with feature files (omit for the built-in toy corpus)");

    auto* train_st_cmd = app.add_subcommand("train-st", "fine-tune for speech translation");
    add_common(train_st_cmd, st_args);
    train_st_cmd->add_option("--siamese-checkpoint", siamese_ckpt, "encoder initialization");
    train_st_cmd->add_option("--teacher", teacher_path, "teacher table JSONL for distillation");

    auto* decode_cmd = app.add_subcommand("decode", "beam-search decode the toy validation set");
    add_common(decode_cmd, decode_args);
    decode_cmd->add_option("--model", model_paths, "model checkpoint, repeat for an ensemble")->required();

    auto* sweep_cmd = app.add_subcommand("segment-sweep", "grid search over (min,max) segment lengths");
    add_common(sweep_cmd, sweep_args);
    sweep_cmd->add_option("--tracks", track_paths, "probability track CSV files");
    sweep_cmd->add_option("--synthetic", synthetic_tracks, "generate this many random tracks");

    auto* ctc_cmd = app.add_subcommand("ctc-check", "CTC loss vs. brute-force enumeration");
    add_common(ctc_cmd, ctc_args, /*needs_out=*/false);
    ctc_cmd->add_option("--instances", ctc_instances, "random instances to test");

    auto* ot_cmd = app.add_subcommand("ot-check", "Sinkhorn cost vs. exact OT oracle, n = 2..6");
    add_common(ot_cmd, ot_args, /*needs_out=*/false);

    auto* bleu_cmd = app.add_subcommand("bleu", "corpus BLEU of a hypothesis file");
    add_common(bleu_cmd, bleu_args, /*needs_out=*/false);
    bleu_cmd->add_option("--hyp", hyp_path, "hypotheses, one per line")->required();
    bleu_cmd->add_option("--ref", ref_path, "references, one per line")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (filter->parsed()) return run_filter(filter_args, manifest_path);
        if (train_siamese_cmd->parsed()) return run_train_siamese(siamese_args, siamese_manifest);
        if (train_st_cmd->parsed()) return run_train_st(st_args, siamese_ckpt, teacher_path);
        if (decode_cmd->parsed()) return run_decode(decode_args, model_paths);
        if (sweep_cmd->parsed()) return run_segment_sweep(sweep_args, track_paths, synthetic_tracks);
        if (ctc_cmd->parsed()) return run_ctc_check(ctc_args, ctc_instances);
        if (ot_cmd->parsed()) return run_ot_check(ot_args);
        if (bleu_cmd->parsed()) return run_bleu(bleu_args, hyp_path, ref_path);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
