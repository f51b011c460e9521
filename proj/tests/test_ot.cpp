#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "stkit/gradcheck.hpp"
#include "stkit/ot.hpp"
#include "stkit/rng.hpp"
#include "support/oracles.hpp"

using namespace stkit;

TEST_CASE("cost matrix basics") {
    Rng rng(31);
    Matrix x = rng.gaussian(3, 2, 1.0);
    auto self_cost = cost_matrix(Node::constant(x), Node::constant(x));
    for (std::size_t i = 0; i < 3; ++i) REQUIRE(self_cost->value(i, i) == 0.0);

    auto c = cost_matrix(Node::constant(Matrix::from({{0.0}})), Node::constant(Matrix::from({{3.0}})));
    REQUIRE(c->value(0, 0) == 9.0);

    Matrix y = rng.gaussian(4, 2, 1.0);
    auto full = cost_matrix(Node::constant(x), Node::constant(y));
    REQUIRE(max_abs_diff(full->value, oracles::sqdist_naive(x, y)) <= 1e-12);

    REQUIRE_THROWS_AS(cost_matrix(Node::constant(Matrix(2, 3)), Node::constant(Matrix(2, 4))), ShapeError);
}

TEST_CASE("cost matrix gradient") {
    Rng rng(32);
    Matrix w = rng.gaussian(3, 4, 1.0);
    auto report = grad_check(
        [&](const std::vector<NodePtr>& p) {
            return mean_all(mul(cost_matrix(p[0], p[1]), Node::constant(w)));
        },
        {rng.gaussian(3, 2, 1.0), rng.gaussian(4, 2, 1.0)});
    REQUIRE(report.max_rel_err <= 1e-5);
}

TEST_CASE("1x1 transport is trivial") {
    Matrix c = Matrix::from({{2.5}});
    auto plan = sinkhorn(c, {1.0}, {1.0}, {});
    REQUIRE(plan.plan(0, 0) == Catch::Approx(1.0).margin(1e-9));
    REQUIRE(plan.transport_cost == Catch::Approx(2.5).margin(1e-9));
    REQUIRE(plan.converged);
}

TEST_CASE("small epsilon concentrates on the cheap permutation") {
    Matrix c = Matrix::from({{0.0, 1.0}, {1.0, 0.0}});
    SinkhornConfig cfg{.epsilon = 0.01, .max_iterations = 2000};
    auto plan = sinkhorn(c, uniform_marginal(2), uniform_marginal(2), cfg);
    REQUIRE(plan.converged);
    REQUIRE(plan.plan(0, 0) == Catch::Approx(0.5).margin(1e-3));
    REQUIRE(plan.plan(0, 1) == Catch::Approx(0.0).margin(1e-3));
    REQUIRE(plan.transport_cost <= 1e-3);
}

TEST_CASE("plan marginals match within tolerance") {
    Rng rng(33);
    for (int trial = 0; trial < 10; ++trial) {
        const std::size_t n = static_cast<std::size_t>(rng.uniform_int(2, 5));
        const std::size_t m = static_cast<std::size_t>(rng.uniform_int(2, 5));
        Matrix c(n, m);
        for (double& v : c.raw()) v = rng.uniform(0.0, 2.0);
        auto plan = sinkhorn(c, uniform_marginal(n), uniform_marginal(m), {.epsilon = 0.1, .max_iterations = 5000});
        REQUIRE(plan.converged);
        for (std::size_t i = 0; i < n; ++i) {
            double rs = 0.0;
            for (std::size_t j = 0; j < m; ++j) rs += plan.plan(i, j);
            REQUIRE(std::fabs(rs - 1.0 / static_cast<double>(n)) <= 1e-6);
        }
        for (std::size_t j = 0; j < m; ++j) {
            double cs = 0.0;
            for (std::size_t i = 0; i < n; ++i) cs += plan.plan(i, j);
            REQUIRE(std::fabs(cs - 1.0 / static_cast<double>(m)) <= 1e-6);
        }
    }
}

TEST_CASE("sinkhorn cost upper-bounds the exact OT cost, gap shrinking with epsilon") {
    Rng rng(34);
    for (int trial = 0; trial < 10; ++trial) {
        Matrix c(4, 4);
        for (double& v : c.raw()) v = rng.uniform(0.0, 1.0);
        const double oracle = exact_ot_oracle(c);
        double prev_gap = std::numeric_limits<double>::infinity();
        for (double eps : {1.0, 0.1, 0.01}) {
            // near-degenerate assignment ties make small-eps Sinkhorn slow;
            // iterations are cheap at this size
            auto plan = sinkhorn(c, uniform_marginal(4), uniform_marginal(4),
                                 {.epsilon = eps, .max_iterations = 1000000});
            REQUIRE(plan.converged);
            // feasibility slack: a 1e-6-feasible plan can undercut the
            // exact optimum by up to n * tol * max|C|
            REQUIRE(plan.transport_cost >= oracle - 4e-6);
            const double gap = plan.transport_cost - oracle;
            REQUIRE(gap <= prev_gap + 1e-9);
            prev_gap = gap;
        }
    }
}

TEST_CASE("exact oracle basics") {
    REQUIRE(exact_ot_oracle(Matrix(3, 3, 0.0)) == 0.0);
    REQUIRE(exact_ot_oracle(Matrix::from({{0, 1}, {1, 0}})) == 0.0);

    Rng rng(35);
    Matrix c(3, 3);
    for (double& v : c.raw()) v = rng.uniform(0.0, 1.0);
    // self-check against an independent exhaustive search
    double best = std::numeric_limits<double>::infinity();
    for (int p0 = 0; p0 < 3; ++p0)
        for (int p1 = 0; p1 < 3; ++p1)
            for (int p2 = 0; p2 < 3; ++p2) {
                if (p0 == p1 || p0 == p2 || p1 == p2) continue;
                best = std::min(best, (c(0, p0) + c(1, p1) + c(2, p2)) / 3.0);
            }
    REQUIRE(exact_ot_oracle(c) == Catch::Approx(best).margin(1e-12));

    REQUIRE_THROWS_AS(exact_ot_oracle(Matrix(7, 7, 0.0)), ConfigError);
    REQUIRE_THROWS_AS(exact_ot_oracle(Matrix(2, 3, 0.0)), ShapeError);
}

TEST_CASE("graph-mode cost agrees with the value-mode solver") {
    Rng rng(36);
    Matrix c(4, 5);
    for (double& v : c.raw()) v = rng.uniform(0.0, 3.0);
    const auto a = uniform_marginal(4);
    const auto b = uniform_marginal(5);
    SinkhornConfig cfg{.epsilon = 0.2, .max_iterations = 300};
    auto plan = sinkhorn(c, a, b, cfg);
    auto node = sinkhorn_cost_node(Node::constant(c), a, b, cfg, plan.iterations_used);
    REQUIRE(node->scalar() == Catch::Approx(plan.transport_cost).margin(1e-9));
}

TEST_CASE("identical sequences have near-zero loss") {
    Rng rng(37);
    Matrix x = rng.gaussian(5, 4, 1.0);
    SinkhornConfig cfg{.epsilon = 0.01, .max_iterations = 20000};
    auto res = wasserstein_loss(Node::constant(x), Node::constant(x), cfg, false);
    REQUIRE(res.loss->scalar() >= 0.0);
    REQUIRE(res.loss->scalar() <= 0.05);
}

TEST_CASE("row permutations are invisible without positional encodings, visible with them") {
    Rng rng(38);
    Matrix x = rng.gaussian(5, 4, 1.0);
    Matrix y = rng.gaussian(6, 4, 1.0);
    Matrix x_rev(5, 4);
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 4; ++j) x_rev(i, j) = x(4 - i, j);

    SinkhornConfig cfg{.epsilon = 0.05, .max_iterations = 5000};
    const double plain = wasserstein_loss(Node::constant(x), Node::constant(y), cfg, false).loss->scalar();
    const double plain_rev = wasserstein_loss(Node::constant(x_rev), Node::constant(y), cfg, false).loss->scalar();
    REQUIRE(std::fabs(plain - plain_rev) <= 1e-9);

    const double pe_self = wasserstein_loss(Node::constant(x), Node::constant(x), cfg, true).loss->scalar();
    const double pe_rev = wasserstein_loss(Node::constant(x_rev), Node::constant(x), cfg, true).loss->scalar();
    REQUIRE(pe_rev > pe_self);
}

TEST_CASE("wasserstein gradient w.r.t. the speech side") {
    Rng rng(39);
    SinkhornConfig cfg{.epsilon = 0.5, .max_iterations = 10};
    Matrix text = rng.gaussian(3, 4, 1.0);
    auto report = grad_check(
        [&](const std::vector<NodePtr>& p) {
            return wasserstein_loss(p[0], Node::constant(text), cfg, true).loss;
        },
        {rng.gaussian(3, 4, 1.0)});
    REQUIRE(report.max_rel_err <= 1e-4);
}

TEST_CASE("log-domain scaling survives large costs") {
    // C/epsilon up to 1e7: convergence is hopeless at this ratio, but every
    // quantity must stay finite
    Rng rng(40);
    Matrix c(4, 4);
    for (double& v : c.raw()) v = rng.uniform(0.0, 1e4);
    auto plan = sinkhorn(c, uniform_marginal(4), uniform_marginal(4),
                         {.epsilon = 1e-3, .max_iterations = 500});
    REQUIRE(plan.plan.all_finite());
    REQUIRE(std::isfinite(plan.transport_cost));
    for (double v : plan.plan.raw()) REQUIRE(v >= 0.0);
}

TEST_CASE("non-convergence is flagged but still yields a usable plan") {
    Rng rng(41);
    Matrix c(5, 5);
    for (double& v : c.raw()) v = rng.uniform(0.0, 1.0);
    auto plan = sinkhorn(c, uniform_marginal(5), uniform_marginal(5),
                         {.epsilon = 0.001, .max_iterations = 2});
    REQUIRE_FALSE(plan.converged);
    REQUIRE(plan.iterations_used == 2);
    REQUIRE(plan.plan.all_finite());
    REQUIRE(std::isfinite(plan.transport_cost));
}

TEST_CASE("marginal preconditions are enforced") {
    Matrix c(2, 2, 1.0);
    REQUIRE_THROWS_AS(sinkhorn(c, {0.5, 0.5, 0.0}, {0.5, 0.5}, {}), ShapeError);
    REQUIRE_THROWS_AS(sinkhorn(c, {1.0, 0.0}, {0.5, 0.5}, {}), DataError);
    REQUIRE_THROWS_AS(sinkhorn(c, {0.7, 0.7}, {0.5, 0.5}, {}), DataError);
    SinkhornConfig bad;
    bad.epsilon = 0.0;
    REQUIRE_THROWS_AS(sinkhorn(c, {0.5, 0.5}, {0.5, 0.5}, bad), ConfigError);
}
