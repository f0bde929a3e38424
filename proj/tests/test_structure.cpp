#include <catch_amalgamated.hpp>

#include "qbsde/structure.hpp"

using namespace qbsde;
using Catch::Approx;

TEST_CASE("quadratic generator certified against the additive growth class") {
    Claim c;
    c.cls = StructureClass::growth_additive;
    c.gamma = 2.0;
    const auto cert = certify_structure(dsl::parse("0.5*2*norm2z"), dsl::parse("0"), c, Box{}, 5000, 1);
    CHECK(cert.pass);
    CHECK(cert.margin == Approx(0.0).margin(1e-12));
    CHECK(!cert.witness);
}

TEST_CASE("y^2 is refuted as Lipschitz with constant 1 and the witness replays") {
    Claim c;
    c.cls = StructureClass::lipschitz;
    c.beta = 1.0;
    Box box;
    box.y_lo = -2.0;
    box.y_hi = 2.0;
    const auto cert = certify_structure(dsl::parse("y*y"), dsl::parse("0"), c, box, 5000, 3);
    REQUIRE(!cert.pass);
    REQUIRE(cert.witness);
    CHECK(cert.witness->inequality == "lipschitz");
    const auto [lhs, rhs] = replay_witness(dsl::parse("y*y"), dsl::parse("0"), cert);
    CHECK(lhs > rhs);
    CHECK(lhs == cert.witness->lhs);
    CHECK(rhs == cert.witness->rhs);
    // the difference quotient |y + y'| exceeds the claimed constant
    const double q = lhs / std::abs(cert.witness->y - cert.witness->y2);
    CHECK(q > 1.0);
    CHECK(q <= 4.0 + 1e-12);
    // same seed, same witness
    const auto again = certify_structure(dsl::parse("y*y"), dsl::parse("0"), c, box, 5000, 3);
    CHECK(again.witness->y == cert.witness->y);
}

TEST_CASE("g above gamma/2 is refuted") {
    Claim c;
    c.cls = StructureClass::growth_linear;
    c.gamma = 1.0;
    const auto cert = certify_structure(dsl::parse("0.5*norm2z"), dsl::parse("0.75"), c, Box{}, 500, 2);
    CHECK(!cert.pass);
    CHECK(cert.witness->inequality == "g_bound");
}

TEST_CASE("convex class checks midpoint convexity in z") {
    Claim c;
    c.cls = StructureClass::convex;
    c.beta = 1.0;
    c.gamma = 2.0;
    c.alpha = dsl::parse("1");
    CHECK(certify_structure(dsl::parse("norm2z + tanh(y)"), dsl::parse("0.5"), c, Box{}, 3000, 4).pass);
    const auto bad = certify_structure(dsl::parse("-0.5*norm2z"), dsl::parse("0"), c, Box{}, 3000, 4);
    CHECK(!bad.pass);
    CHECK(bad.witness->inequality == "midpoint_convex_z");
}

TEST_CASE("growth class with sign condition") {
    Claim c;
    c.cls = StructureClass::growth;
    c.alpha = dsl::parse("1 + t");
    c.beta = 1.0;
    c.gamma = 1.0;
    c.phi = Phi{Phi::Kind::polynomial, 1.0, 2.0};
    // sgn(y) f <= alpha for f = -y^3 + 0.5 cos-free bounded part
    const auto cert = certify_structure(dsl::parse("-y^3 + 0.5*tanh(z1)"), dsl::parse("0"), c, Box{}, 4000, 5);
    CHECK(!cert.pass);  // |f| grows like |y|^3 > alpha * |y|^2 + alpha on |y| = 2
    c.phi = Phi{Phi::Kind::polynomial, 1.0, 3.0};
    CHECK(certify_structure(dsl::parse("-y^3 + 0.5*tanh(z1)"), dsl::parse("0"), c, Box{}, 4000, 5).pass);
}
