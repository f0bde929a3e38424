#include <catch_amalgamated.hpp>

#include <cmath>

#include "qbsde/qsolver.hpp"
#include "qbsde/residual.hpp"

using namespace qbsde;
using Catch::Approx;

TEST_CASE("exponential transform on constant and additive data") {
    LatticeEngine eng(make_driver(1.0, 16, 1, 1));
    DiscreteSolution s = solve_colehopf(make_problem("norm2z", "1", "0.7", 1.0, 2.0), eng);
    for (std::size_t i = 0; i <= 16; ++i)
        for (double y : s.y[i]) CHECK(y == Approx(0.7).epsilon(1e-14));
    s = solve_colehopf(make_problem("norm2z + 0.5", "1", "0", 2.0, 2.0), LatticeEngine(make_driver(2.0, 16, 1, 1)));
    CHECK(s.y[0][0] == Approx(1.0).epsilon(1e-14));
}

TEST_CASE("exponential transform matches the closed lattice value") {
    const std::size_t n = 64;
    const double h = 1.0 / n;
    LatticeEngine eng(make_driver(1.0, n, 1, 0));
    const DiscreteSolution s = solve_colehopf(make_problem("norm2z", "0", "w1", 1.0, 2.0), eng);
    CHECK(s.y[0][0] == Approx(0.5 * n * std::log(std::cosh(2.0 * std::sqrt(h)))).epsilon(1e-13));
    CHECK(std::abs(s.y[0][0] - 1.0) <= 2.0 / (3.0 * n) * 1.05);
    for (std::size_t i = 0; i < n; ++i)
        for (double z : s.z[i]) CHECK(std::abs(z - 1.0) <= 4.0 * h);
}

TEST_CASE("exponential transform rejects other generators") {
    LatticeEngine eng(make_driver(1.0, 8, 1, 1));
    CHECK_THROWS_AS(solve_colehopf(make_problem("norm2z + y", "1", "0", 1.0, 2.0), eng), PreconditionError);
    CHECK_THROWS_AS(solve_colehopf(make_problem("2*norm2z", "1", "0", 1.0, 2.0), eng), PreconditionError);
    CHECK_THROWS_AS(solve_colehopf(make_problem("norm2z", "0.5", "0", 1.0, 2.0), eng), PreconditionError);
    CHECK_THROWS_AS(solve_colehopf(make_problem("norm2z", "1", "0", 1.0, 0.0), eng), PreconditionError);
}

TEST_CASE("general quadratic solve reproduces the linear terminal exactly") {
    LatticeEngine eng(make_driver(1.0, 64, 1, 1));
    const QuadraticResult q = solve_quadratic(make_problem("norm2z", "1", "w1", 1.0, 2.0), eng, Ladder{{2, 4, 8}, {2, 4, 8}});
    CHECK(q.ladder.consistent);
    CHECK(q.ladder.converged);
    CHECK(q.solution.y[0][0] == Approx(1.0).epsilon(1e-12));
    CHECK(q.ladder.verdict() == "CONSISTENT");
}

TEST_CASE("ladder is monotone within the lattice comparison range") {
    LatticeEngine eng(make_driver(1.0, 256, 1, 0));
    BsdeProblem p = make_problem("norm2z", "0", "3*tanh(2*w1)", 1.0, 2.0);
    QuadraticOptions o;
    o.truncate = true;
    const QuadraticResult q = solve_quadratic(p, eng, Ladder{{1, 2, 4, 8, 16}, {1, 2, 4, 8, 16}}, o);
    CHECK(q.ladder.consistent);
    CHECK(q.ladder.checks.size() == 2 * 5 * 4);
    for (const auto& c : q.ladder.checks) CHECK(c.violation <= 1e-8);
    CHECK(q.ladder.diagonal.size() == 5);
    CHECK(q.ladder.sup_gaps.size() == 4);
    const LimitReport lim = monotone_limit(q.ladder, p, eng);
    const ResidualReport oracle = residual(p, solve_colehopf(p, eng), eng);
    CHECK(lim.residual <= 5.0 * oracle.max_abs);
    CHECK(lim.sup_gap < lim.sup_gaps.front());
}

TEST_CASE("ladder orders are flagged when they fail") {
    // explicit lattice steps lose discrete comparison once n sqrt(h) exceeds one
    LatticeEngine eng(make_driver(1.0, 64, 1, 0));
    QuadraticOptions o;
    o.truncate = true;
    const QuadraticResult q =
        solve_quadratic(make_problem("norm2z", "0", "3*tanh(2*w1)", 1.0, 2.0), eng, Ladder{{1, 2, 4, 8, 16, 32}, {1, 2, 4, 8, 16, 32}}, o);
    CHECK(!q.ladder.consistent);
    CHECK(q.ladder.verdict() == "INCONSISTENT");
}

TEST_CASE("ladder input validation") {
    LatticeEngine eng(make_driver(1.0, 8, 1, 0));
    BsdeProblem p = make_problem("norm2z", "0", "w1", 1.0, 2.0);
    CHECK_THROWS_AS(solve_quadratic(p, eng, Ladder{{}, {1}}), ConfigError);
    CHECK_THROWS_AS(solve_quadratic(p, eng, Ladder{{0, 1}, {1}}), ConfigError);
    BsdeProblem no_expr = p;
    no_expr.f_expr.reset();
    CHECK_THROWS_AS(solve_quadratic(no_expr, eng, Ladder{{1}, {1}}), ConfigError);
    const QuadraticResult one = solve_quadratic(p, eng, Ladder{{2}, {2}});
    CHECK_THROWS(monotone_limit(one.ladder, p, eng));
}

TEST_CASE("geometric trend of gaps") {
    CHECK(trend_ratio({1.0, 0.5, 0.25, 0.125}) == Approx(0.5).epsilon(1e-12));
    CHECK(trend_ratio({1.0, 2.0}) == Approx(2.0).epsilon(1e-12));
    CHECK(std::isnan(trend_ratio({1.0})));
}

TEST_CASE("pasting agrees across levels for a linear terminal") {
    LatticeEngine eng(make_driver(1.0, 32, 1, 0));
    BsdeProblem p = make_problem("norm2z", "0", "w1", 1.0, 2.0);
    const PastedSolution u = solve_unbounded(p, eng, {3, 2, 4}, Ladder{{4, 8}, {4, 8}});
    REQUIRE(u.levels.size() == 3);
    CHECK(u.levels[0].m == 2.0);
    CHECK(u.levels[2].m == 4.0);
    CHECK(u.verdict() == "PASS");
    for (double g : u.overlap_gaps) CHECK(g <= 1e-6);
    for (std::size_t j = 1; j < u.levels.size(); ++j) CHECK(u.levels[j].domain_nodes >= u.levels[j - 1].domain_nodes);
    CHECK(u.source[0][0] == 0);
    for (std::size_t i = 0; i <= 32; ++i)
        for (std::size_t q = 0; q < eng.size(i); ++q) CHECK(std::abs(u.glued.y[i][q] - (u.ladder.limit.y[i][q])) <= 1e-9);
}

TEST_CASE("pasting reports a fault when level values disagree") {
    LatticeEngine eng(make_driver(1.0, 32, 1, 0));
    BsdeProblem p = make_problem("norm2z", "0", "2*w1", 1.0, 2.0);
    UnboundedOptions o;
    o.sigma_level = 1e9;
    const PastedSolution u = solve_unbounded(p, eng, {4.5, 5.5, 6.5}, Ladder{{1}, {1}}, o);
    CHECK(u.paste_fault);
    CHECK(u.verdict() == "PASTE_FAULT");
}

TEST_CASE("stability under a shifted terminal") {
    LatticeEngine eng(make_driver(1.0, 32, 1, 0));
    BsdeProblem base = make_problem("norm2z", "0", "tanh(w1)", 1.0, 2.0);
    std::vector<StabilityMember> fam;
    for (double n : {1.0, 2.0, 4.0, 8.0})
        fam.push_back({n, make_problem("norm2z", "0", "tanh(w1) + " + std::to_string(1.0 / n), 1.0, 2.0)});
    const StabilityRun run = stability_experiment(
        base, fam, {1.0, 2.0}, eng, [](const BsdeProblem& pr, const ExpectationEngine& e) { return solve_colehopf(pr, e); }, 2000);
    CHECK(run.pass);
    CHECK(run.data_finite);
    REQUIRE(run.rows.size() == 4);
    for (const auto& r : run.rows) {
        CHECK(r.exp_metric[0] == Approx(std::exp(1.0 / r.n)).epsilon(1e-9));
        CHECK(r.exp_metric[1] == Approx(std::exp(2.0 / r.n)).epsilon(1e-9));
        CHECK(r.m2 <= 1e-20);
        CHECK(r.sup_gap == Approx(1.0 / r.n).epsilon(1e-9));
    }
    CHECK_THROWS_AS(stability_experiment(base, fam, {0.5}, eng), ConfigError);
    std::vector<StabilityMember> bad{fam[1], fam[0]};
    CHECK_THROWS_AS(stability_experiment(base, bad, {1.0}, eng), ConfigError);
}
