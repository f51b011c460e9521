#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <map>

#include "stkit/metrics.hpp"
#include "stkit/rng.hpp"

using namespace stkit;

namespace {

// independent n-gram counting oracle, map-based and deliberately naive
struct OracleCounts {
    std::size_t matched[4] = {0, 0, 0, 0};
    std::size_t total[4] = {0, 0, 0, 0};
    std::size_t hyp_len = 0, ref_len = 0;
};

OracleCounts oracle_counts(const std::vector<std::string>& hyps, const std::vector<std::string>& refs) {
    OracleCounts out;
    for (std::size_t s = 0; s < hyps.size(); ++s) {
        const auto ht = bleu_tokenize(hyps[s]);
        const auto rt = bleu_tokenize(refs[s]);
        out.hyp_len += ht.size();
        out.ref_len += rt.size();
        for (std::size_t n = 1; n <= 4; ++n) {
            std::map<std::vector<std::string>, std::size_t> hc, rc;
            for (std::size_t i = 0; i + n <= ht.size(); ++i)
                ++hc[std::vector<std::string>(ht.begin() + i, ht.begin() + i + n)];
            for (std::size_t i = 0; i + n <= rt.size(); ++i)
                ++rc[std::vector<std::string>(rt.begin() + i, rt.begin() + i + n)];
            for (const auto& [g, c] : hc) {
                out.total[n - 1] += c;
                auto it = rc.find(g);
                if (it != rc.end()) out.matched[n - 1] += std::min(c, it->second);
            }
        }
    }
    return out;
}

const std::vector<std::string> kFixtureHyps{"the cat sat on the mat", "the quick brown fox",
                                            "hello world , friends"};
const std::vector<std::string> kFixtureRefs{"the cat sat on a mat", "the quick brown fox jumps",
                                            "hello world , my friends"};

} // namespace

TEST_CASE("tokenizer lowercases and splits punctuation") {
    REQUIRE(bleu_tokenize("Hello, World!") ==
            std::vector<std::string>{"hello", ",", "world", "!"});
    REQUIRE(bleu_tokenize("  spaced   out  ") == std::vector<std::string>{"spaced", "out"});
    REQUIRE(bleu_tokenize("").empty());
}

TEST_CASE("identity corpus scores 100") {
    auto score = corpus_bleu(kFixtureRefs, kFixtureRefs);
    REQUIRE(score.score == Catch::Approx(100.0).margin(1e-9));
    REQUIRE(score.brevity_penalty == 1.0);
}

TEST_CASE("frozen fixture matches the precomputed brute-force value exactly") {
    const auto oracle = oracle_counts(kFixtureHyps, kFixtureRefs);
    // values derived from the oracle, frozen
    REQUIRE(oracle.matched[0] == 13);
    REQUIRE(oracle.total[0] == 14);
    REQUIRE(oracle.matched[1] == 8);
    REQUIRE(oracle.total[1] == 11);
    REQUIRE(oracle.matched[2] == 5);
    REQUIRE(oracle.total[2] == 8);
    REQUIRE(oracle.matched[3] == 2);
    REQUIRE(oracle.total[3] == 5);
    REQUIRE(oracle.hyp_len == 14);
    REQUIRE(oracle.ref_len == 16);

    const auto score = corpus_bleu(kFixtureHyps, kFixtureRefs);
    REQUIRE(score.hyp_length == oracle.hyp_len);
    REQUIRE(score.ref_length == oracle.ref_len);
    for (std::size_t n = 0; n < 4; ++n)
        REQUIRE(score.precisions[n] ==
                Catch::Approx(static_cast<double>(oracle.matched[n]) / oracle.total[n]).margin(1e-15));
    REQUIRE(score.brevity_penalty == Catch::Approx(0.8668778997501817).margin(1e-15));
    REQUIRE(score.score == Catch::Approx(55.567529398334123).margin(1e-9));
}

TEST_CASE("no 4-gram overlap means zero without smoothing") {
    const std::vector<std::string> hyps{"a b c d"};
    const std::vector<std::string> refs{"w x y z"};
    REQUIRE(corpus_bleu(hyps, refs).score == 0.0);
    // smoothing turns it into a small positive score
    REQUIRE(corpus_bleu(hyps, refs, 4, BleuSmoothing::AddK).score == 0.0); // 1-gram still unsmoothed & zero
    const std::vector<std::string> part{"a b x y"};
    const std::vector<std::string> ref2{"a b c d"};
    REQUIRE(corpus_bleu(part, ref2).score == 0.0);
    REQUIRE(corpus_bleu(part, ref2, 4, BleuSmoothing::AddK).score > 0.0);
}

TEST_CASE("corpus order permutation leaves the score unchanged") {
    Rng rng(112);
    std::vector<std::string> hyps = kFixtureHyps, refs = kFixtureRefs;
    const double base = corpus_bleu(hyps, refs).score;
    std::vector<std::size_t> perm{2, 0, 1};
    std::vector<std::string> h2, r2;
    for (auto i : perm) {
        h2.push_back(hyps[i]);
        r2.push_back(refs[i]);
    }
    REQUIRE(corpus_bleu(h2, r2).score == Catch::Approx(base).margin(1e-12));
}

TEST_CASE("score bounds and numerator monotonicity") {
    Rng rng(113);
    const std::vector<std::string> words{"alpha", "beta", "gamma", "delta", "epsilon"};
    auto sentence = [&](int len) {
        std::string s;
        for (int i = 0; i < len; ++i) {
            if (i) s += ' ';
            s += words[static_cast<std::size_t>(rng.uniform_int(0, 4))];
        }
        return s;
    };
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<std::string> hyps, refs;
        for (int i = 0; i < 4; ++i) {
            hyps.push_back(sentence(rng.uniform_int(3, 9)));
            refs.push_back(sentence(rng.uniform_int(3, 9)));
        }
        auto score = corpus_bleu(hyps, refs, 4, BleuSmoothing::AddK);
        REQUIRE(score.score >= 0.0);
        REQUIRE(score.score <= 100.0);
        REQUIRE(score.brevity_penalty <= 1.0);

        // appending a correct pair never lowers any clipped-count numerator
        const auto before = oracle_counts(hyps, refs);
        hyps.push_back("perfect match sentence");
        refs.push_back("perfect match sentence");
        const auto after = oracle_counts(hyps, refs);
        for (int n = 0; n < 4; ++n) REQUIRE(after.matched[n] >= before.matched[n]);
    }
}

TEST_CASE("empty corpora and mismatched sizes are rejected") {
    REQUIRE_THROWS_AS(corpus_bleu({}, {}), DataError);
    REQUIRE_THROWS_AS(corpus_bleu({"a"}, {"a", "b"}), DataError);
    auto score = corpus_bleu({""}, {"some reference"});
    REQUIRE(score.zero_length);
    REQUIRE(score.score == 0.0);
}

TEST_CASE("json report carries the score") {
    auto score = corpus_bleu(kFixtureHyps, kFixtureRefs);
    const auto json = score.to_json();
    REQUIRE(json.find("\"bleu\"") != std::string::npos);
    REQUIRE(json.find("\"brevity_penalty\"") != std::string::npos);
}
