#include <catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "fuzz_support.hpp"
#include "qbsde/gendsl.hpp"

using namespace qbsde;
using namespace qbsde::dsl;
using Catch::Approx;

TEST_CASE("parse and evaluate a quadratic generator") {
    const Expr e = parse("0.5*2*norm2z - y");
    const std::vector<double> z{3.0};
    Env env;
    env.y = 1.0;
    env.z = z;
    CHECK(evaluate(e, env) == Approx(8.0));
}

TEST_CASE("syntax errors carry the byte offset") {
    try {
        (void)parse("1 +");
        FAIL("expected a parse error");
    } catch (const ParseError& err) {
        CHECK(err.kind == "syntax error");
        CHECK(err.offset == 3);
    }
    CHECK_THROWS_AS(parse("(y"), ParseError);
    CHECK_THROWS_AS(parse("y )"), ParseError);
    CHECK_THROWS_AS(parse("--y"), ParseError);
}

TEST_CASE("unknown identifiers and arity mismatches are reported") {
    try {
        (void)parse("2*q + 1");
        FAIL("expected a parse error");
    } catch (const ParseError& err) {
        CHECK(err.kind == "unknown identifier");
        CHECK(err.offset == 2);
    }
    try {
        (void)parse("max(y)");
        FAIL("expected a parse error");
    } catch (const ParseError& err) {
        CHECK(err.kind == "arity mismatch");
    }
    CHECK_THROWS_AS(parse("abs(y, 1)"), ParseError);
    CHECK_THROWS_AS(parse("z0"), ParseError);
    CHECK_THROWS_AS(parse("exp"), ParseError);
}

TEST_CASE("formatting uses minimal parentheses") {
    CHECK(format(parse("(1+2)*3")) == "(1 + 2)*3");
    CHECK(format(parse("-y")) == "-y");
    CHECK(format(parse("1 - (2 - 3)")) == "1 - (2 - 3)");
    CHECK(format(parse("(1 - 2) - 3")) == "1 - 2 - 3");
    CHECK(format(parse("y/(t*2)")) == "y/(t*2)");
    CHECK(format(parse("-(y*z1)^2")) == "-(y*z1)^2");
    CHECK(format(parse("2^(3^y)")) == "2^(3^y)");
    CHECK(format(parse("(2^3)^y")) == "(2^3)^y");
    CHECK(format(parse("y - -z1")) == "y - -z1");
}

TEST_CASE("domain errors name the subexpression") {
    Env env;
    env.y = -1.0;
    try {
        (void)evaluate(parse("1 + log(y)"), env);
        FAIL("expected a domain error");
    } catch (const EvalError& err) {
        CHECK(err.subexpression == "log(y)");
    }
    CHECK_THROWS_AS(evaluate(parse("sqrt(y)"), env), EvalError);
    CHECK_THROWS_AS(evaluate(parse("1/(y + 1)"), env), EvalError);
    CHECK_THROWS_AS(evaluate(parse("exp(1000*t + 1000)"), env), EvalError);
}

TEST_CASE("vector forms use lambda") {
    Eigen::MatrixXd l(2, 2);
    l << 2.0, 0.0, 1.0, 1.0;
    const std::vector<double> z{1.0, 2.0};
    Env env;
    env.z = z;
    env.lambda = &l;
    // lambda z = (2, 3)
    CHECK(evaluate(parse("norm2z"), env) == Approx(13.0));
    CHECK(evaluate(parse("normz"), env) == Approx(std::sqrt(13.0)));
    CHECK(evaluate(parse("dotz(1, -1)"), env) == Approx(-1.0));
    CHECK(evaluate(parse("z2"), env) == 2.0);
    CHECK_THROWS_AS(evaluate(parse("dotz(1)"), env), EvalError);
    CHECK_THROWS_AS(evaluate(parse("z3"), env), EvalError);
}

TEST_CASE("sign and part functions") {
    Env env;
    CHECK(evaluate(parse("sgn(0)"), env) == 0.0);
    CHECK(evaluate(parse("sgn(-3)"), env) == -1.0);
    CHECK(evaluate(parse("pos(-3) + neg(-3)"), env) == 3.0);
    CHECK(evaluate(parse("min(2, -1)*max(2, -1)"), env) == -2.0);
    CHECK(evaluate(parse("pow(2, 3)"), env) == 8.0);
    CHECK(evaluate(parse("-2^2"), env) == 4.0);
    CHECK(evaluate(parse("-(2^2)"), env) == -4.0);
}

TEST_CASE("format then parse is the identity on 10^4 fuzzed trees") {
    std::mt19937_64 rng(2024);
    for (int n = 0; n < 10000; ++n) {
        const Expr e = fuzz::random_tree(rng, 8);
        const std::string text = format(e);
        const Expr back = parse(text);
        INFO(text);
        REQUIRE(equal(e, back));
        CHECK(format(back) == text);
    }
}

TEST_CASE("compiled evaluation matches the tree walker bit for bit") {
    std::mt19937_64 rng(77);
    std::uniform_real_distribution<double> u(-2.0, 2.0);
    int compared = 0;
    for (int n = 0; n < 400; ++n) {
        const Expr e = fuzz::random_tree(rng, 6);
        const Program prog(e);
        for (int k = 0; k < 25; ++k) {
            const std::vector<double> z{u(rng), u(rng)}, w{u(rng), u(rng)}, wp{u(rng)};
            Env env;
            env.t = 0.5 * (u(rng) + 2.0);
            env.y = u(rng);
            env.a = env.t;
            env.z = z;
            env.w = w;
            env.wp = wp;
            std::optional<double> ref;
            try {
                ref = fuzz::tree_walk(e, env);
            } catch (const EvalError&) {
            }
            if (!ref) {
                CHECK_THROWS_AS(prog(env), EvalError);
                continue;
            }
            const double got = prog(env);
            CHECK(std::bit_cast<std::uint64_t>(got) == std::bit_cast<std::uint64_t>(*ref));
            ++compared;
        }
    }
    CHECK(compared > 5000);
}

TEST_CASE("affine-radial decomposition") {
    auto f = affine_form(parse("0.5*2*norm2z"));
    REQUIRE(f);
    CHECK(f->norm2z == 1.0);
    CHECK(f->radial_only());
    f = affine_form(parse("3*y - dotz(2) + 1 + t"));
    REQUIRE(f);
    CHECK(f->y == 3.0);
    CHECK(f->lz.at(0) == -2.0);
    CHECK(f->linear_only());
    CHECK(!affine_form(parse("y*y")));
    CHECK(!affine_form(parse("w1 + y")));
}
