#include <catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "qbsde/envelope.hpp"

using namespace qbsde;
using Catch::Approx;

namespace {

double at(const LipschitzEnvelope& e, double t, double y, std::vector<double> z, const Matrix* l = nullptr) {
    dsl::Env env;
    env.t = t;
    env.a = t;
    env.y = y;
    env.z = z;
    env.lambda = l;
    return e(env);
}

EnvelopeOptions grid_mode() {
    EnvelopeOptions o;
    o.mode = EnvelopeMode::grid;
    return o;
}

}  // namespace

TEST_CASE("quadratic envelope matches the piecewise closed form") {
    const auto f = dsl::parse("0.5*2*norm2z");
    const LipschitzEnvelope closed(f, 4.0, 4.0), grid(f, 4.0, 4.0, grid_mode());
    REQUIRE(closed.closed_form());
    REQUIRE(!grid.closed_form());
    CHECK(at(closed, 0.0, 0.0, {1.0}) == Approx(1.0).margin(1e-14));
    CHECK(at(closed, 0.0, 0.0, {3.0}) == Approx(8.0).margin(1e-14));
    CHECK(at(grid, 0.0, 0.0, {1.0}) == Approx(1.0).margin(1e-6));
    CHECK(at(grid, 0.0, 0.0, {3.0}) == Approx(8.0).margin(1e-6));
    CHECK(at(closed, 0.0, 0.0, {-3.0}) == Approx(8.0).margin(1e-14));
}

TEST_CASE("closed form and grid minimization agree on the recognized families") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(-6.0, 6.0);
    for (const char* src : {"0.5*2*norm2z", "norm2z - 1", "-0.5*norm2z - normz", "1 + 3*normz + 0.25*norm2z", "2*y - 3*z1 + t",
                            "-5*z1 + 0.5"}) {
        const auto f = dsl::parse(src);
        const LipschitzEnvelope closed(f, 4.0, 2.0), grid(f, 4.0, 2.0, grid_mode());
        REQUIRE(closed.closed_form());
        double worst = 0.0;
        for (int s = 0; s < 200; ++s) {
            const double y = u(rng), z = u(rng), t = 0.5;
            worst = std::max(worst, std::abs(at(closed, t, y, {z}) - at(grid, t, y, {z})));
        }
        INFO(src);
        CHECK(worst <= 1e-6);
    }
}

TEST_CASE("affine generators within the budget are unchanged") {
    const auto f = dsl::parse("0.5*y - 0.75*z1 + 2");
    const LipschitzEnvelope e(f, 1.0, 1.0);
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(-5.0, 5.0);
    for (int s = 0; s < 100; ++s) {
        const double y = u(rng), z = u(rng);
        CHECK(at(e, 0.0, y, {z}) == Approx(0.5 * y - 0.75 * z + 2.0).margin(1e-14));
    }
    // slope 3 against budget 1 scales the positive part by 1/3
    const LipschitzEnvelope steep(dsl::parse("3*z1"), 1.0, 2.0);
    CHECK(at(steep, 0.0, 0.0, {2.0}) == Approx(2.0));
    CHECK(at(steep, 0.0, 0.0, {-2.0}) == Approx(-4.0));
}

TEST_CASE("envelope is monotone in n and antitone in k") {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(-4.0, 4.0);
    for (const char* src : {"0.5*2*norm2z", "norm2z - 1", "-0.5*norm2z - normz", "2*y - 5*z1 + 1"}) {
        const auto f = dsl::parse(src);
        const LipschitzEnvelope n4(f, 4.0, 4.0), n8(f, 8.0, 4.0), k8(f, 4.0, 8.0);
        REQUIRE(n4.closed_form());
        for (int s = 0; s < 1000; ++s) {
            const double y = u(rng), z = u(rng);
            CHECK(at(n4, 0.0, y, {z}) <= at(n8, 0.0, y, {z}) + 1e-12);
            CHECK(at(k8, 0.0, y, {z}) <= at(n4, 0.0, y, {z}) + 1e-12);
        }
    }
}

TEST_CASE("grid-mode envelope of a mixed generator is monotone in n and k") {
    std::mt19937_64 rng(8);
    std::uniform_real_distribution<double> u(-2.0, 2.0);
    for (const char* src : {"tanh(y)*norm2z - 0.5*abs(z1)", "0.5*2*norm2z - 0.3*y"}) {
        const auto f = dsl::parse(src);
        const LipschitzEnvelope n2(f, 2.0, 2.0, grid_mode()), n4(f, 4.0, 2.0, grid_mode()), k4(f, 2.0, 4.0, grid_mode());
        for (int s = 0; s < 40; ++s) {
            const double y = u(rng), z = u(rng);
            CHECK(at(n2, 0.0, y, {z}) <= at(n4, 0.0, y, {z}) + 1e-9);
            CHECK(at(k4, 0.0, y, {z}) <= at(n2, 0.0, y, {z}) + 1e-9);
        }
    }
}

TEST_CASE("envelope is (n v k)-Lipschitz in (y, lambda z)") {
    Matrix l(2, 2);
    l << 1.0, 0.5, 0.0, 2.0;
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> u(-5.0, 5.0);
    for (const char* src : {"0.5*2*norm2z", "3*y - dotz(4, 1) + 1", "-norm2z - 2*normz + 1", "norm2z - 1"}) {
        const LipschitzEnvelope e(dsl::parse(src), 3.0, 5.0);
        double worst = 0.0;
        for (int s = 0; s < 10000; ++s) {
            const double y1 = u(rng), y2 = u(rng);
            const std::vector<double> z1{u(rng), u(rng)}, z2{u(rng), u(rng)};
            const Vector dz = l * (Vector(2) << z1[0] - z2[0], z1[1] - z2[1]).finished();
            const double dist = std::abs(y1 - y2) + dz.norm();
            worst = std::max(worst, std::abs(at(e, 0.0, y1, z1, &l) - at(e, 0.0, y2, z2, &l)) / dist);
        }
        INFO(src);
        CHECK(worst <= 5.0 + 1e-6);
    }
}

TEST_CASE("envelope equals f where f is already within the budget") {
    const LipschitzEnvelope e(dsl::parse("0.5*2*norm2z"), 4.0, 4.0);
    for (double z = -2.0; z <= 2.0; z += 0.01) CHECK(at(e, 0.0, 0.0, {z}) == Approx(z * z).margin(1e-14));
}

TEST_CASE("time cutoffs switch the parts off") {
    EnvelopeOptions o;
    o.sigma_n = 0.5;
    const LipschitzEnvelope e(dsl::parse("1 + norm2z"), 4.0, 4.0, o);
    CHECK(at(e, 0.25, 0.0, {1.0}) == Approx(2.0));
    CHECK(at(e, 0.75, 0.0, {1.0}) == 0.0);
}

TEST_CASE("terminal truncation") {
    CHECK(truncate(5.0, 3.0, 1.0) == 3.0);
    CHECK(truncate(-5.0, 3.0, 1.0) == -1.0);
    CHECK(truncate(0.5, 1.0, 1.0) == 0.5);
    const auto v = truncate_terminal(std::vector<double>{-4.0, -0.5, 0.0, 2.0, 9.0}, 2.0, 3.0);
    CHECK(v == std::vector<double>{-3.0, -0.5, 0.0, 2.0, 2.0});
    for (double x = -10.0; x <= 10.0; x += 0.5) {
        CHECK(truncate(x, 2.0, 3.0) <= truncate(x, 4.0, 3.0));
        CHECK(truncate(x, 2.0, 4.0) <= truncate(x, 2.0, 3.0));
        CHECK(std::abs(truncate(x, 2.0, 3.0)) <= 3.0);
    }
}

TEST_CASE("theta scaling") {
    const BsdeProblem p = make_problem("0.5*norm2z + tanh(y) + z1", "1", "w1", 1.0, 1.0, 1.0);
    CHECK_THROWS_AS(theta_scale(p, 0.0), ConfigError);
    const BsdeProblem s8 = theta_scale(p, 8.0);
    CHECK(s8.g(0.3) == Approx(0.125));
    const std::vector<double> w{0.7}, wp{};
    CHECK(s8.xi(w, wp) == Approx(5.6));

    const BsdeProblem lin = make_problem("z1", "0", "0", 1.0);
    const BsdeProblem lin2 = theta_scale(lin, 2.0);
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(-3.0, 3.0);
    for (int s = 0; s < 1000; ++s) {
        const std::vector<double> z{u(rng)};
        dsl::Env env;
        env.t = 0.5;
        env.y = u(rng);
        env.z = z;
        CHECK(lin2.f(env) == Approx(lin.f(env)).epsilon(1e-15));
        const BsdeProblem back = theta_scale(s8, 1.0 / 8.0);
        CHECK(std::abs(back.f(env) - p.f(env)) <= 1e-12 * std::max(1.0, std::abs(p.f(env))));
        // the scaled expression evaluates like the scaled callable
        CHECK(dsl::evaluate(*s8.f_expr, env) == Approx(s8.f(env)).epsilon(1e-13));
    }
}

TEST_CASE("localization with bounded data never stops") {
    LatticeEngine eng(make_driver(1.0, 16, 1, 0));
    BsdeProblem p = make_problem("0.5*norm2z", "0", "max(min(w1, 1), -1)", 1.0, 1.0);
    const auto plan = localization_times(p, eng, 2.0, 10.0, 500, 3);
    for (std::size_t t : plan.tau) CHECK(t == 16);
    for (const auto& row : plan.x)
        for (double x : row) CHECK(x <= 1.0 + 1e-12);
}

TEST_CASE("sigma stops at the first node where the variation of alpha reaches n") {
    LatticeEngine eng(make_driver(1.0, 4, 1, 0));
    BsdeProblem p = make_problem("0", "0", "0", 1.0, 1.0, 0.0, "1");
    const auto plan = localization_times(p, eng, 100.0, 0.5, 10, 1);
    CHECK(plan.sigma_step == 2);
    CHECK(plan.sigma_time == Approx(0.5));
}

TEST_CASE("stopping times and domains are monotone in the level") {
    LatticeEngine eng(make_driver(1.0, 32, 1, 0));
    BsdeProblem p = make_problem("0.5*norm2z", "0", "w1", 1.0, 1.0);
    const auto xb = localization_bound(p, eng);
    const auto av = alpha_variation(p, eng);
    const PathSample ps = eng.sample_paths(2000, 9);
    const auto p2 = localization_plan(xb, av, eng, 1.5, 1.0, &ps), p3 = localization_plan(xb, av, eng, 2.5, 1.0, &ps);
    bool some_stop = false;
    for (std::size_t q = 0; q < ps.n_paths; ++q) {
        CHECK(p2.tau[q] <= p3.tau[q]);
        some_stop = some_stop || p2.tau[q] < 32;
    }
    CHECK(some_stop);
    for (std::size_t i = 0; i <= 32; ++i)
        for (std::size_t q = 0; q < eng.size(i); ++q)
            if (p2.domain[i][q]) CHECK(p3.domain[i][q]);
}
