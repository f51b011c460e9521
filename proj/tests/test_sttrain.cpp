#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>

#include "stkit/gradcheck.hpp"
#include "stkit/sttrain.hpp"

using namespace stkit;

namespace {

EncoderConfig tiny_encoder() {
    EncoderConfig cfg;
    cfg.feature_dim = 6;
    cfg.d = 8;
    cfg.adapter_expansion = 2;
    cfg.ff_multiple = 2;
    cfg.max_positions = 48;
    cfg.text_vocab = toy::kTextVocab;
    cfg.sinkhorn.max_iterations = 50;
    return cfg;
}

toy::CorpusConfig tiny_corpus() {
    toy::CorpusConfig cc;
    cc.size = 10;
    cc.min_words = 1;
    cc.max_words = 2;
    cc.min_word_len = 2;
    cc.max_word_len = 4;
    cc.render.feature_dim = 6;
    return cc;
}

} // namespace

TEST_CASE("truncate_topk keeps, renormalizes and breaks ties low") {
    const std::vector<double> dist{0.5, 0.3, 0.1, 0.1};
    auto kept = truncate_topk(dist, 2);
    REQUIRE(kept.size() == 2);
    REQUIRE(kept[0].first == 0);
    REQUIRE(kept[0].second == Catch::Approx(0.625));
    REQUIRE(kept[1].first == 1);
    REQUIRE(kept[1].second == Catch::Approx(0.375));

    // k == vocab is the identity (up to normalization of an already-normal dist)
    auto all = truncate_topk(dist, 4);
    double sum = 0.0;
    for (auto& [i, p] : all) sum += p;
    REQUIRE(sum == Catch::Approx(1.0).margin(1e-12));
    REQUIRE(all[2].first == 2); // tie between indices 2 and 3 resolves low first
    REQUIRE(all[3].first == 3);

    // k beyond the vocabulary clamps
    REQUIRE(truncate_topk(dist, 10).size() == 4);
}

TEST_CASE("soften applies temperature") {
    auto plain = soften({2.0, 0.0}, 1.0);
    const double e2 = std::exp(2.0);
    REQUIRE(plain[0] == Catch::Approx(e2 / (e2 + 1.0)));

    auto warm = soften({2.0, 0.0}, 2.0);
    const double e1 = std::exp(1.0);
    REQUIRE(warm[0] == Catch::Approx(e1 / (e1 + 1.0)).margin(1e-12));
    REQUIRE(warm[1] == Catch::Approx(1.0 / (e1 + 1.0)).margin(1e-12));

    // soften_topk agrees with softening the log-probabilities
    TopK kept{{0, 0.7}, {1, 0.3}};
    auto softened = soften_topk(kept, 1.3);
    auto expected = soften({std::log(0.7), std::log(0.3)}, 1.3);
    REQUIRE(softened[0].second == Catch::Approx(expected[0]).margin(1e-12));
    REQUIRE(softened[1].second == Catch::Approx(expected[1]).margin(1e-12));
}

TEST_CASE("kl_loss values") {
    // teacher equal to the student restricted to the kept set -> 0
    std::vector<TopK> teacher{{{0, 0.5}, {1, 0.5}}};
    Matrix lp(1, 2);
    lp(0, 0) = std::log(0.5);
    lp(0, 1) = std::log(0.5);
    REQUIRE(kl_loss(teacher, Node::constant(lp))->scalar() == Catch::Approx(0.0).margin(1e-9));

    // direct-summation oracle: 0.5 ln(0.5/0.9) + 0.5 ln(0.5/0.1)
    Matrix lp2(1, 2);
    lp2(0, 0) = std::log(0.9);
    lp2(0, 1) = std::log(0.1);
    const double expected = 0.5 * std::log(0.5 / 0.9) + 0.5 * std::log(0.5 / 0.1);
    REQUIRE(kl_loss(teacher, Node::constant(lp2))->scalar() == Catch::Approx(expected).margin(1e-9));
    REQUIRE(expected == Catch::Approx(0.5108).margin(5e-4));
}

TEST_CASE("kl_loss is non-negative for random teacher/student pairs") {
    Rng rng(71);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t vocab = static_cast<std::size_t>(rng.uniform_int(3, 8));
        std::vector<double> teacher_dist(vocab), student_logits(vocab);
        for (auto& v : teacher_dist) v = rng.uniform(0.01, 1.0);
        double z = 0.0;
        for (double v : teacher_dist) z += v;
        for (auto& v : teacher_dist) v /= z;
        for (auto& v : student_logits) v = rng.normal(0.0, 2.0);

        std::vector<TopK> teacher{truncate_topk(teacher_dist, static_cast<std::size_t>(rng.uniform_int(1, static_cast<int>(vocab))))};
        auto student = log_softmax(Node::constant(Matrix::row(student_logits)));
        REQUIRE(kl_loss(teacher, student)->scalar() >= -1e-12);
    }
}

TEST_CASE("topk then soften T=1 then kl against itself is zero") {
    Rng rng(72);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<double> dist(6);
        double z = 0.0;
        for (auto& v : dist) {
            v = rng.uniform(0.01, 1.0);
            z += v;
        }
        for (auto& v : dist) v /= z;
        auto kept = soften_topk(truncate_topk(dist, 3), 1.0);
        Matrix lp(1, 6, -1e9);
        for (const auto& [idx, p] : kept) lp(0, static_cast<std::size_t>(idx)) = std::log(p);
        REQUIRE(kl_loss({kept}, Node::constant(lp))->scalar() == Catch::Approx(0.0).margin(1e-9));
    }
}

TEST_CASE("kl_loss gradient matches finite differences") {
    Rng rng(73);
    std::vector<TopK> teacher{truncate_topk({0.4, 0.3, 0.2, 0.1}, 3),
                              truncate_topk({0.1, 0.2, 0.3, 0.4}, 3)};
    auto report = grad_check(
        [&](const std::vector<NodePtr>& p) { return kl_loss(teacher, log_softmax(p[0])); },
        {rng.gaussian(2, 4, 1.0)});
    REQUIRE(report.max_rel_err <= 1e-4);
}

TEST_CASE("label smoothed cross entropy") {
    // s = 0: standard CE
    Matrix lp(1, 2);
    lp(0, 0) = std::log(0.8);
    lp(0, 1) = std::log(0.2);
    REQUIRE(label_smoothed_ce(Node::constant(lp), {0}, 0.0)->scalar() ==
            Catch::Approx(-std::log(0.8)).margin(1e-12));

    // hand formula: 0.5 * (-ln 0.8) + 0.5 * mean(-ln 0.8, -ln 0.2) = 0.569717...
    const double expected = 0.5 * -std::log(0.8) + 0.5 * 0.5 * (-std::log(0.8) - std::log(0.2));
    REQUIRE(label_smoothed_ce(Node::constant(lp), {0}, 0.5)->scalar() ==
            Catch::Approx(expected).margin(1e-12));
    REQUIRE(expected == Catch::Approx(0.5697171415941824).margin(1e-12));

    REQUIRE_THROWS_AS(label_smoothed_ce(Node::constant(lp), {5}, 0.1), DataError);
    REQUIRE_THROWS_AS(label_smoothed_ce(Node::constant(lp), {0}, 1.0), ConfigError);
}

TEST_CASE("label smoothed CE gradient") {
    Rng rng(74);
    auto report = grad_check(
        [](const std::vector<NodePtr>& p) {
            return label_smoothed_ce(log_softmax(p[0]), {1, 0, 2}, 0.2);
        },
        {rng.gaussian(3, 4, 1.0)});
    REQUIRE(report.max_rel_err <= 1e-4);
}

TEST_CASE("st_loss composition") {
    auto ce = Node::constant(Matrix(1, 1, 2.0));
    auto kl = Node::constant(Matrix(1, 1, 0.4));
    REQUIRE(st_loss(ce, kl, 1.0)->scalar() == 2.0);
    REQUIRE(st_loss(ce, kl, 0.0)->scalar() == 0.4);
    REQUIRE(st_loss(ce, kl, 0.5)->scalar() == Catch::Approx(1.2).margin(1e-12));
    REQUIRE(std::fabs(st_loss(ce, kl, 0.5)->scalar() - (0.5 * 2.0 + 0.5 * 0.4)) <= 1e-9);
    REQUIRE_THROWS_AS(st_loss(ce, kl, 1.5), ConfigError);
}

TEST_CASE("kd defaults") {
    KdConfig kd;
    REQUIRE(kd.k == 8);
    REQUIRE(kd.temperature == 1.3);
    REQUIRE(kd.lambda == 0.5);
    REQUIRE(kd.label_smoothing == 0.2);
}

TEST_CASE("teacher table JSONL round trip") {
    std::vector<TeacherExample> table;
    TeacherExample ex;
    ex.id = "toy-3";
    ex.positions = {{{4, 0.75}, {1, 0.25}}, {{0, 1.0}}};
    table.push_back(ex);
    const auto path = std::filesystem::temp_directory_path() / "stkit_teacher.jsonl";
    save_teacher_table(path.string(), table);
    auto loaded = load_teacher_table(path.string());
    REQUIRE(loaded.size() == 1);
    const auto& got = loaded.at("toy-3");
    REQUIRE(got.positions.size() == 2);
    REQUIRE(got.positions[0][0].first == 4);
    REQUIRE(got.positions[0][0].second == Catch::Approx(0.75));
    std::filesystem::remove(path);
}

namespace {

// hand-set model: next-token log-probs depend only on the last token
StModel::StepFn markov_step(const std::vector<std::vector<double>>& table) {
    return [table](const std::vector<int>& prefix) { return table[prefix.back()]; };
}

std::vector<double> normalized_logprobs(std::vector<double> weights) {
    double z = 0.0;
    for (double w : weights) z += w;
    for (double& w : weights) w = std::log(w / z);
    return weights;
}

// exhaustive search over every sequence up to max_len under the same
// finishing rules as the beam
Hypothesis exhaustive_best(const StModel::StepFn& step, int bos, int eos, std::size_t max_len,
                           std::size_t vocab) {
    Hypothesis best;
    std::vector<std::pair<std::vector<int>, double>> frontier{{{bos}, 0.0}};
    for (std::size_t t = 0; t < max_len; ++t) {
        std::vector<std::pair<std::vector<int>, double>> next;
        for (const auto& [prefix, score] : frontier) {
            const auto lp = step(prefix);
            for (std::size_t v = 0; v < vocab; ++v) {
                auto extended = prefix;
                extended.push_back(static_cast<int>(v));
                const double s = score + lp[v];
                if (static_cast<int>(v) == eos) {
                    Hypothesis h;
                    h.tokens.assign(extended.begin() + 1, extended.end());
                    h.score = s;
                    h.normalized_score = s / static_cast<double>(h.tokens.size());
                    if (h.normalized_score > best.normalized_score) best = h;
                } else {
                    next.emplace_back(std::move(extended), s);
                }
            }
        }
        frontier = std::move(next);
    }
    for (const auto& [prefix, score] : frontier) {
        Hypothesis h;
        h.tokens.assign(prefix.begin() + 1, prefix.end());
        h.score = score;
        h.normalized_score =
            h.tokens.empty() ? -std::numeric_limits<double>::infinity()
                             : score / static_cast<double>(h.tokens.size());
        if (h.normalized_score > best.normalized_score) best = h;
    }
    return best;
}

} // namespace

TEST_CASE("beam 1 equals greedy decoding") {
    Rng rng(75);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<std::vector<double>> table(4);
        for (auto& row : table) {
            std::vector<double> w(4);
            for (auto& x : w) x = rng.uniform(0.05, 1.0);
            row = normalized_logprobs(w);
        }
        auto step = markov_step(table);
        auto beamed = beam_search(step, 0, 3, 1, 6);

        // independent greedy loop
        std::vector<int> prefix{0};
        std::vector<int> greedy;
        double score = 0.0;
        for (std::size_t t = 0; t < 6; ++t) {
            const auto lp = step(prefix);
            int best = 0;
            for (std::size_t v = 1; v < lp.size(); ++v)
                if (lp[v] > lp[best]) best = static_cast<int>(v);
            greedy.push_back(best);
            score += lp[best];
            if (best == 3) break;
            prefix.push_back(best);
        }
        REQUIRE(beamed.tokens == greedy);
        REQUIRE(beamed.score == Catch::Approx(score).margin(1e-12));
    }
}

TEST_CASE("a wide beam matches exhaustive search") {
    Rng rng(76);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<std::vector<double>> table(3);
        for (auto& row : table) {
            std::vector<double> w(3);
            for (auto& x : w) x = rng.uniform(0.05, 1.0);
            row = normalized_logprobs(w);
        }
        auto step = markov_step(table);
        // beam covers every live prefix (2 non-eos tokens, depth 3 -> at most 8)
        auto beamed = beam_search(step, 0, 2, 30, 3);
        auto oracle = exhaustive_best(step, 0, 2, 3, 3);
        // markov tables produce exact score ties between reordered sequences,
        // so the oracle comparison is at the score level
        REQUIRE(beamed.score == Catch::Approx(oracle.score).margin(1e-12));
        REQUIRE(beamed.normalized_score == Catch::Approx(oracle.normalized_score).margin(1e-12));
        REQUIRE(beamed.tokens.size() == oracle.tokens.size());
    }
}

TEST_CASE("wider beams never lose score on fixed instances") {
    Rng rng(77);
    for (int trial = 0; trial < 15; ++trial) {
        std::vector<std::vector<double>> table(5);
        for (auto& row : table) {
            std::vector<double> w(5);
            for (auto& x : w) x = rng.uniform(0.05, 1.0);
            row = normalized_logprobs(w);
        }
        auto step = markov_step(table);
        double prev = -std::numeric_limits<double>::infinity();
        for (std::size_t beam = 1; beam <= 5; ++beam) {
            const auto hyp = beam_search(step, 0, 4, beam, 8);
            REQUIRE(hyp.normalized_score >= prev - 1e-12);
            prev = hyp.normalized_score;
        }
    }
}

TEST_CASE("ensembling identical members changes nothing") {
    Rng rng(78);
    std::vector<std::vector<double>> table(3);
    for (auto& row : table) {
        std::vector<double> w(3);
        for (auto& x : w) x = rng.uniform(0.05, 1.0);
        row = normalized_logprobs(w);
    }
    auto one = markov_step(table);
    auto three = ensemble_step({one, one, one});
    auto a = beam_search(one, 0, 2, 2, 5);
    auto b = beam_search(three, 0, 2, 2, 5);
    REQUIRE(a.tokens == b.tokens);
    REQUIRE(a.score == Catch::Approx(b.score).margin(1e-12));
}

TEST_CASE("cipher task structure") {
    const std::string transcript = "ab cd";
    auto target = toy::cipher_translate(transcript);
    REQUIRE(target.size() == transcript.size());
    // adjacent swap: positions 0/1 exchanged
    REQUIRE(target[0] == toy::cipher_symbol(toy::char_index('b')));
    REQUIRE(target[1] == toy::cipher_symbol(toy::char_index('a')));
    // distinct surfaces per symbol
    std::set<std::string> surfaces;
    for (std::size_t s = 0; s < toy::kTargetVocab; ++s)
        surfaces.insert(toy::target_surface_token(static_cast<int>(s)));
    REQUIRE(surfaces.size() == toy::kTargetVocab);
}

TEST_CASE("st training freezes the acoustic stack and ctc head") {
    auto corpus = toy::make_st_corpus(tiny_corpus(), 80);
    std::vector<toy::StExample> train(corpus.begin(), corpus.begin() + 8);
    std::vector<toy::StExample> val(corpus.begin() + 8, corpus.end());

    Rng rng(81);
    StModel model(tiny_encoder(), DecoderConfig{}, rng);

    ParamSnapshot frozen_before;
    for (const auto& e : model.snapshot().entries)
        if (e.first.rfind("acoustic.", 0) == 0 || e.first.rfind("ctc_head.", 0) == 0)
            frozen_before.entries.push_back(e);

    StTrainConfig tc;
    tc.max_steps = 12;
    tc.val_interval = 6;
    tc.adam.lr = 1e-3;
    auto result = train_st(model, train, val, nullptr, tc);
    REQUIRE(result.steps_run == 12);
    REQUIRE_FALSE(result.log.empty());

    ParamSnapshot frozen_after;
    for (const auto& e : model.snapshot().entries)
        if (e.first.rfind("acoustic.", 0) == 0 || e.first.rfind("ctc_head.", 0) == 0)
            frozen_after.entries.push_back(e);
    REQUIRE(frozen_before.entries.size() == frozen_after.entries.size());
    for (std::size_t i = 0; i < frozen_before.entries.size(); ++i)
        REQUIRE(frozen_before.entries[i].second == frozen_after.entries[i].second);
}

TEST_CASE("with KD disabled the loss is exactly label-smoothed CE") {
    auto corpus = toy::make_st_corpus(tiny_corpus(), 82);
    Rng rng(83);
    StModel model(tiny_encoder(), DecoderConfig{}, rng);
    for (const auto& ex : corpus) {
        auto fwd = model.forward(ex.features, ex.target);
        if (fwd.skipped) continue;
        auto ce = label_smoothed_ce(fwd.logprobs, fwd.expected, 0.2);
        // the trainer computes the same quantity when kd.enabled is false
        REQUIRE(std::isfinite(ce->scalar()));
        REQUIRE(ce->scalar() > 0.0);
        break;
    }
}

TEST_CASE("kd training consumes a teacher table") {
    auto corpus = toy::make_st_corpus(tiny_corpus(), 84);
    std::vector<toy::StExample> train(corpus.begin(), corpus.begin() + 8);
    std::vector<toy::StExample> val(corpus.begin() + 8, corpus.end());
    auto teacher_list = make_synthetic_teacher(train, 8, 0.1, 85);
    TeacherTable teacher;
    for (auto& t : teacher_list) teacher[t.id] = t;

    Rng rng(86);
    StModel model(tiny_encoder(), DecoderConfig{}, rng);
    StTrainConfig tc;
    tc.max_steps = 8;
    tc.val_interval = 4;
    tc.kd.enabled = true;
    auto result = train_st(model, train, val, &teacher, tc);
    REQUIRE(result.steps_run == 8);
    // Eq-2 composition holds on the logged rows
    for (const auto& row : result.log)
        if (row.l_ce != 0.0 || row.l_kl != 0.0)
            REQUIRE(std::fabs(row.combined - (0.5 * row.l_ce + 0.5 * row.l_kl)) <= 1e-9);

    // KD without a teacher is a data error
    StModel model2(tiny_encoder(), DecoderConfig{}, rng);
    REQUIRE_THROWS_AS(train_st(model2, train, val, nullptr, tc), DataError);
}

TEST_CASE("encoder loads a siamese checkpoint, rejecting shape mismatches") {
    Rng rng(87);
    SiameseModel pretrained(tiny_encoder(), rng);
    auto snap = pretrained.params().snapshot();

    Rng rng2(88);
    StModel model(tiny_encoder(), DecoderConfig{}, rng2);
    REQUIRE_NOTHROW(model.load_encoder(snap));
    REQUIRE(model.encoder().params().get("adapter.in.W")->value ==
            pretrained.params().get("adapter.in.W")->value);

    snap.entries[2].second = Matrix(1, 2, 0.5);
    REQUIRE_THROWS_AS(model.load_encoder(snap), LoadError);
}
