#include <catch_amalgamated.hpp>

#include <cmath>

#include "qbsde/qsolver.hpp"
#include "qbsde/residual.hpp"
#include "qbsde/verify.hpp"

using namespace qbsde;
using Catch::Approx;

TEST_CASE("comparison mode names") {
    CHECK(parse_comparison_mode(to_string(ComparisonMode::lipschitz)) == ComparisonMode::lipschitz);
    CHECK(parse_comparison_mode(to_string(ComparisonMode::convex_theta)) == ComparisonMode::convex_theta);
    CHECK_THROWS_AS(parse_comparison_mode("bogus"), ConfigError);
}

TEST_CASE("refined driver halves every step") {
    const DriverSpec d = make_driver(2.0, 8, 1, 1);
    const DriverSpec r = refine_driver(d);
    LatticeEngine a(d), b(r);
    CHECK(b.steps() == 16);
    CHECK(b.t(16) == Approx(2.0));
    for (std::size_t i = 0; i <= 8; ++i) {
        CHECK(b.t(2 * i) == Approx(a.t(i)));
        CHECK(b.A(2 * i) == Approx(a.A(i)));
    }
}

TEST_CASE("ordered Lipschitz pair passes") {
    LatticeEngine eng(make_driver(1.0, 64, 1, 1));
    BsdeProblem p1 = make_problem("0.5*tanh(y) + 0.3*z1", "0.1", "tanh(w1)", 1.0, 0.2, 0.5);
    BsdeProblem p2 = make_problem("0.5*tanh(y) + 0.3*z1 + 0.1", "0.1", "tanh(w1) + 0.2*abs(wp1)", 1.0, 0.2, 0.5);
    const ComparisonReport r = check_comparison(p1, p2, eng, ComparisonMode::lipschitz);
    CHECK(r.verdict == "PASS");
    CHECK(r.pass());
    CHECK(r.violation <= 1e-8);
    CHECK(r.tolerance == 1e-8);
    CHECK(!r.hypothesis);
}

TEST_CASE("violated ordering hypotheses are reported with a witness") {
    LatticeEngine eng(make_driver(1.0, 16, 1, 0));
    BsdeProblem p1 = make_problem("0", "0", "w1", 1.0);
    BsdeProblem p2 = make_problem("0", "0", "0.5*w1", 1.0);
    ComparisonReport r = check_comparison(p1, p2, eng, ComparisonMode::lipschitz);
    CHECK(r.verdict == "INVALID_HYPOTHESIS");
    REQUIRE(r.hypothesis);
    CHECK(r.hypothesis->lhs > r.hypothesis->rhs);
    p2 = make_problem("-0.1", "0", "w1", 1.0);
    r = check_comparison(p1, p2, eng, ComparisonMode::lipschitz);
    CHECK(r.verdict == "INVALID_HYPOTHESIS");
    REQUIRE(r.hypothesis);
    CHECK(r.hypothesis->what == "f <= f'");
}

TEST_CASE("refuted certificate invalidates the comparison") {
    LatticeEngine eng(make_driver(1.0, 8, 1, 0));
    BsdeProblem p1 = make_problem("y^2", "0", "0", 1.0, 0.0, 1.0);
    Claim c;
    c.cls = StructureClass::lipschitz;
    c.beta = 1.0;
    p1.cert = certify_structure(*p1.f_expr, *p1.g_expr, c, Box{});
    REQUIRE(!p1.cert->pass);
    const ComparisonReport r = check_comparison(p1, p1, eng, ComparisonMode::lipschitz);
    CHECK(r.verdict == "INVALID_HYPOTHESIS");
}

TEST_CASE("explicit steps beyond the lattice comparison range fail and are triaged") {
    LatticeEngine eng(make_driver(1.0, 16, 1, 0));
    BsdeProblem p1 = make_problem("20*z1", "0", "tanh(w1)", 1.0, 0.0, 20.0);
    BsdeProblem p2 = make_problem("20*z1", "0", "tanh(w1) + neg(w1)", 1.0, 0.0, 20.0);
    const ComparisonReport r = check_comparison(p1, p2, eng, ComparisonMode::lipschitz);
    CHECK(r.verdict == "FAIL");
    CHECK(r.violation > 1e-3);
    REQUIRE(r.refined_violation);
    CHECK((r.triage == "discretization" || r.triage == "persistent"));
}

TEST_CASE("comparison on the regression backend uses a statistical tolerance") {
    LsmcEngine eng(make_driver(1.0, 16, 1, 0), 4000, 11);
    BsdeProblem p1 = make_problem("0.2*y", "0", "tanh(w1)", 1.0, 0.0, 0.2);
    BsdeProblem p2 = make_problem("0.2*y + 0.05", "0", "tanh(w1) + 0.1", 1.0, 0.0, 0.2);
    const ComparisonReport r = check_comparison(p1, p2, eng, ComparisonMode::lipschitz);
    CHECK(r.verdict == "PASS");
    CHECK(r.tolerance >= 1e-8);
}

TEST_CASE("linearization coefficients of an affine generator") {
    LatticeEngine eng(make_driver(1.0, 32, 1, 0));
    BsdeProblem p1 = make_problem("0.7*y + 0.4*z1", "0", "tanh(w1)", 1.0, 0.0, 0.7);
    BsdeProblem p2 = make_problem("0.7*y + 0.4*z1", "0", "tanh(w1) + 0.3*w1^2", 1.0, 0.0, 0.7);
    const DiscreteSolution s1 = solve_lq(p1, eng).solution, s2 = solve_lq(p2, eng).solution;
    const LinearizationTrace tr = linearization_trace(s1, s2, p1, eng);
    CHECK(tr.beta_sup == Approx(0.7).epsilon(1e-9));
    CHECK(tr.beta_bounded);
    CHECK(tr.gamma_finite);
    for (std::size_t i = 0; i < 32; ++i)
        for (std::size_t p = 0; p < eng.size(i); ++p) {
            if (tr.beta[i][p] != 0.0) CHECK(tr.beta[i][p] == Approx(0.7).epsilon(1e-9));
            if (tr.gamma[i][p] != 0.0) CHECK(tr.gamma[i][p] == Approx(0.4).epsilon(1e-9));
        }
    CHECK(tr.lambda_gamma_sup == Approx(0.4).epsilon(1e-9));
    CHECK(tr.gamma_bmo <= 0.4 + 1e-9);
}

TEST_CASE("growth process is a submartingale and an injected fault is caught") {
    LatticeEngine eng(make_driver(1.0, 64, 1, 0));
    BsdeProblem p = make_problem("0.5*norm2z + 0.2*tanh(y) + 0.1", "0", "tanh(2*w1)", 1.0, 1.0, 0.0, "0.3");
    const DiscreteSolution s = solve_lq(p, eng).solution;
    auto h = growth_process(p, eng, s);
    const SubmartingaleResult ok = submartingale_test(h, eng);
    CHECK(ok.pass);
    h[10][3] += 1.0;
    const SubmartingaleResult bad = submartingale_test(h, eng);
    CHECK(!bad.pass);
    CHECK(bad.step == 10);
    CHECK(bad.point == 3);
}

TEST_CASE("theta trace for a convex ordered pair") {
    LatticeEngine eng(make_driver(1.0, 64, 1, 0));
    BsdeProblem p1 = make_problem("0.5*norm2z + 0.1", "0", "tanh(w1)", 1.0, 1.0, 0.0, "0.1");
    BsdeProblem p2 = make_problem("0.5*norm2z + 0.2", "0", "tanh(w1) + 0.1", 1.0, 1.0, 0.0, "0.2");
    const DiscreteSolution s1 = solve_lq(p1, eng).solution, s2 = solve_lq(p2, eng).solution;
    for (double th : {0.5, 0.9, 0.99}) {
        const ThetaTrace tr = theta_trace(p1, p2, s1, s2, th, eng, 1e-8, 500, 3);
        CHECK(tr.rho_bounded);
        CHECK(tr.p_positive);
        CHECK(tr.d_at_least_one);
        CHECK(tr.submartingale);
        CHECK(tr.c == Approx(1.0 / (1.0 - th)));
    }
    const auto sweep = theta_sweep(s1, s2, {0.5, 0.9, 0.99});
    REQUIRE(sweep.size() == 3);
    CHECK(sweep[2] <= sweep[0] + 1e-12);
    CHECK_THROWS_AS(theta_sweep(s1, s2, {1.0}), ConfigError);
    CHECK_THROWS_AS(theta_trace(p1, p2, s1, s2, 0.0, eng), ConfigError);
}

TEST_CASE("residual of the scheme's own solution vanishes") {
    LatticeEngine eng(make_driver(1.0, 32, 1, 1));
    BsdeProblem p = make_problem("norm2z", "1", "tanh(w1) + 0.5*tanh(wp1)", 1.0, 2.0);
    const ResidualReport own = residual(p, solve_lq(p, eng).solution, eng);
    CHECK(own.max_abs <= 1e-12);
    const ResidualReport oracle = residual(p, solve_colehopf(p, eng), eng);
    CHECK(oracle.max_abs > 1e-6);
    CHECK(oracle.r.size() == 32);
}

TEST_CASE("regression residual does not depend on path labels") {
    const DriverSpec drv = make_driver(1.0, 8, 1, 1);
    const PathEnsemble base = simulate_paths(drv, 2000, 21);
    PathEnsemble perm = base;
    std::vector<std::size_t> order(base.n_paths);
    for (std::size_t p = 0; p < order.size(); ++p) order[p] = (p * 7919) % order.size();
    const std::size_t sm = base.steps * base.d_m, sp = base.steps * base.d_perp;
    for (std::size_t p = 0; p < order.size(); ++p) {
        std::copy_n(base.dM.begin() + static_cast<std::ptrdiff_t>(order[p] * sm), sm, perm.dM.begin() + static_cast<std::ptrdiff_t>(p * sm));
        std::copy_n(base.dWp.begin() + static_cast<std::ptrdiff_t>(order[p] * sp), sp, perm.dWp.begin() + static_cast<std::ptrdiff_t>(p * sp));
    }
    LsmcEngine a(drv, base), b(drv, perm);
    BsdeProblem p = make_problem("0.3*tanh(y) + 0.2*z1", "0.1", "tanh(w1) + 0.5*tanh(wp1)", 1.0, 0.2, 0.3);
    LqOptions o;
    o.implicit_y = true;
    const ResidualReport ra = residual(p, solve_lq(p, a, o).solution, a);
    const ResidualReport rb = residual(p, solve_lq(p, b, o).solution, b);
    CHECK(std::abs(ra.max_abs - rb.max_abs) <= 1e-12);
}
