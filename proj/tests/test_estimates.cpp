#include <catch_amalgamated.hpp>

#include <cmath>

#include "qbsde/estimates.hpp"
#include "qbsde/qsolver.hpp"

using namespace qbsde;
using Catch::Approx;

TEST_CASE("u-transform identities") {
    for (TransformVariant v : {TransformVariant::lemma5, TransformVariant::thm6}) {
        const TransformKit k = u_transform(1.5, v);
        CHECK(k.rate == (v == TransformVariant::lemma5 ? 1.5 : 12.0));
        CHECK(k.u(0.0) == 0.0);
        CHECK(k.du(0.0) == 0.0);
        CHECK(k.d2u(0.0) == 1.0);
        for (double x = -3.0; x <= 3.0; x += 0.125) {
            CHECK(k.identity_error(x) <= 1e-12);
            CHECK(k.u(x) >= 0.0);
            CHECK(k.du(x) * x >= 0.0);
        }
    }
    CHECK_THROWS_AS(u_transform(0.0), ConfigError);
    CHECK_THROWS_AS(u_transform(-1.0), ConfigError);
}

TEST_CASE("a priori bound arithmetic") {
    AprioriReport r = apriori_bounds(1.0, 0.0, 1.0, 0.0);
    CHECK(r.y_bound == 1.0);
    CHECK(r.bmo_bound == Approx(std::sqrt(2.0 * std::exp(1.0))).epsilon(1e-14));
    r = apriori_bounds(2.0, 1.0, 0.5, 1.0);
    CHECK(r.y_bound == Approx(1.5 * std::exp(1.0)).epsilon(1e-14));
    const double e = std::exp(2.0 * r.y_bound);
    CHECK(r.bmo_bound == Approx(std::sqrt(2.0 * (e / 4.0 + (e / 2.0) * (1.0 + r.y_bound)))).epsilon(1e-14));
    CHECK_THROWS_AS(apriori_bounds(0.0, 0.0, 1.0, 0.0), ConfigError);
}

TEST_CASE("a priori bounds hold on a bounded quadratic problem") {
    LatticeEngine eng(make_driver(1.0, 128, 1, 0));
    BsdeProblem p = make_problem("0.5*norm2z + 0.2*tanh(y) + 0.1", "0", "tanh(w1)", 1.0, 1.0, 0.0, "0.3");
    const LqResult q = solve_lq(p, eng);
    REQUIRE(q.report.converged);
    const AprioriReport r = apriori_bounded(p, eng, q.solution);
    CHECK(r.alpha_total == Approx(0.3).epsilon(1e-12));
    CHECK(r.xi_sup <= 1.0);
    CHECK(r.pass);
    CHECK(r.y_measured <= r.y_bound);
    CHECK(r.bmo_measured <= r.bmo_bound);
    const auto checks = r.checks();
    REQUIRE(checks.size() == 2);
    CHECK(checks[0].functional == "apriori_sup");
    CHECK(checks[0].pass);
    CHECK(checks[1].pass);
}

TEST_CASE("conditional bound on simple data") {
    LatticeEngine eng(make_driver(1.0, 16, 1, 0));
    ConditionalBound x = conditional_bound(make_problem("norm2z", "0", "-0.8", 1.0, 2.0), eng);
    for (const auto& row : x.x)
        for (double v : row) CHECK(v == Approx(0.8).epsilon(1e-14));
    x = conditional_bound(make_problem("norm2z", "0", "0", 1.0, 2.0, 0.0, "1"), eng);
    for (std::size_t i = 0; i <= 16; ++i)
        for (double v : x.x[i]) CHECK(v == Approx(1.0 - eng.t(i)).margin(1e-14));
    x = conditional_bound(make_problem("norm2z", "0", "0", 1.0, 2.0, 1.0, "1"), eng);
    CHECK(x.x[0][0] == Approx(std::exp(1.0) - 1.0).epsilon(0.05));
    CHECK_THROWS_AS(conditional_bound(make_problem("0", "0", "0", 1.0), eng), ConfigError);
}

TEST_CASE("conditional bound for the linear terminal approaches the Gaussian value") {
    const double exact = 0.5 * std::log(2.0 * std::exp(2.0) * 0.5 * std::erfc(-2.0 / std::sqrt(2.0)));
    CHECK(exact == Approx(1.33506).epsilon(1e-5));
    double prev = 1.0;
    for (std::size_t n : {64, 256, 1024}) {
        LatticeEngine eng(make_driver(1.0, n, 1, 0));
        const ConditionalBound x = conditional_bound(make_problem("norm2z", "0", "w1", 1.0, 2.0), eng);
        const double err = std::abs(x.x[0][0] - exact);
        CHECK(err < prev);
        prev = err;
    }
    CHECK(prev <= 2e-3);
}

TEST_CASE("bound violation locates the worst node") {
    DiscreteSolution s;
    s.y = {{0.5}, {1.0, -2.0}};
    const std::vector<std::vector<double>> x{{1.0}, {1.0, 1.5}};
    const BoundViolation b = bound_violation(s, x);
    CHECK(b.worst == Approx(0.5));
    CHECK(b.step == 1);
    CHECK(b.point == 1);
    const std::vector<std::vector<char>> mask{{1}, {1, 0}};
    CHECK(bound_violation(s, x, &mask).worst == 0.0);
}

TEST_CASE("sample statistics") {
    const SampleMean s = sample_mean({1.0, 2.0, 3.0});
    CHECK(s.mean == Approx(2.0));
    CHECK(s.se == Approx(1.0 / std::sqrt(3.0)));
    CHECK(sample_mean({}).mean == 0.0);
    const std::size_t n = 32;
    LatticeEngine eng(make_driver(1.0, n, 1, 0));
    const auto w = terminal_values(make_problem("0", "0", "w1", 1.0).xi, eng);
    CHECK(log_mean_exp(eng, w) == Approx(n * std::log(std::cosh(std::sqrt(1.0 / n)))).epsilon(1e-13));
}

TEST_CASE("BMO norm of a unit integrand") {
    LatticeEngine eng(make_driver(1.0, 32, 1, 0));
    const LqResult r = solve_lq(make_problem("0", "0", "w1", 1.0), eng);
    CHECK(bmo_norm(r.solution, eng) == Approx(1.0).epsilon(1e-12));
}

TEST_CASE("exponential moments of the running maximum") {
    LatticeEngine eng(make_driver(1.0, 64, 1, 0));
    BsdeProblem p = make_problem("norm2z", "0", "tanh(w1)", 1.0, 2.0);
    const DiscreteSolution s = solve_colehopf(p, eng);
    for (double pw : {1.5, 2.0, 4.0}) {
        const ExpMomentReport r = exp_moment_bounds(p, eng, s, pw, 5000, 3);
        CHECK(r.pass);
        CHECK(r.lhs <= r.rhs);
        CHECK(r.rhs == Approx(std::exp(r.log_rhs)));
        CHECK(r.mp_measured > 0.0);
        CHECK(r.fitted_c > 0.0);
    }
    CHECK_THROWS_AS(exp_moment_bounds(p, eng, s, 1.0), ConfigError);
}

TEST_CASE("measure-change threshold") {
    CHECK(kazamaki_threshold(2.0, 2.0) == 1.0);
    CHECK(kazamaki_threshold(1.5, 2.0) == 1.5);
    CHECK(kazamaki_threshold(-2.0, 2.0) == 1.0);
    CHECK_THROWS_AS(kazamaki_threshold(1.0, 2.0), PreconditionError);
}

TEST_CASE("stochastic exponential of the solution's martingale part") {
    LatticeEngine eng(make_driver(1.0, 64, 1, 0));
    const DiscreteSolution s = solve_colehopf(make_problem("norm2z", "0", "w1", 1.0, 2.0), eng);
    const MeasureChangeReport r = kazamaki_check(s, 1.5, 2.0, {0.5}, eng, 20000, 5);
    CHECK(r.pass);
    CHECK(r.q0 == 1.5);
    CHECK(r.n_paths == 20000);
    CHECK(r.telescoping_error <= 1e-12);
    CHECK(std::abs(r.martingale_mean - 1.0) <= 3.0 * r.martingale_se);
    bool has_q0 = false, has_big = false;
    for (const auto& row : r.rows) {
        has_q0 = has_q0 || row.eta == r.q0;
        has_big = has_big || row.eta > 1.0;
        CHECK(std::isfinite(row.lambda_sup));
        CHECK(row.q == Approx(1.5 * row.eta));
    }
    CHECK(has_q0);
    CHECK(has_big);
    const MeasureChangeReport again = kazamaki_check(s, 1.5, 2.0, {0.5}, eng, 20000, 5);
    CHECK(again.martingale_mean == r.martingale_mean);
}
