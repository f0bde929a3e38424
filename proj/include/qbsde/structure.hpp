#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "driver.hpp"
#include "errors.hpp"
#include "gendsl.hpp"

namespace qbsde {

/// Structural hypothesis classes a generator can be certified against.
enum class StructureClass { lipschitz, growth, growth_additive, growth_linear, convex };

inline std::string to_string(StructureClass c) {
    switch (c) {
        case StructureClass::lipschitz: return "A1";
        case StructureClass::growth: return "A2";
        case StructureClass::growth_additive: return "A2prime";
        case StructureClass::growth_linear: return "A2doubleprime";
        case StructureClass::convex: return "A3";
    }
    return "?";
}

inline StructureClass parse_structure_class(std::string s) {
    std::erase(s, '.');
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    if (s == "a1") return StructureClass::lipschitz;
    if (s == "a2") return StructureClass::growth;
    if (s == "a2prime" || s == "a2'") return StructureClass::growth_additive;
    if (s == "a2doubleprime" || s == "a2''") return StructureClass::growth_linear;
    if (s == "a3") return StructureClass::convex;
    throw ConfigError("unknown structure class '" + s + "'");
}

/// Growth function phi with phi(0) = 0: c*x^k or c*(exp(r x) - 1).
struct Phi {
    enum class Kind { polynomial, exponential };
    Kind kind = Kind::polynomial;
    double coef = 1.0;
    double param = 1.0;

    double operator()(double x) const {
        return kind == Kind::polynomial ? coef * std::pow(x, param) : coef * std::expm1(param * x);
    }
};

/// Sampling region. lambda defaults to the identity of dimension d.
struct Box {
    double t_lo = 0.0, t_hi = 1.0;
    double y_lo = -2.0, y_hi = 2.0;
    double z_lo = -2.0, z_hi = 2.0;
    double w_lo = -3.0, w_hi = 3.0;
    std::size_t d = 1;
    std::size_t d_w = 1;
    std::size_t d_wp = 1;
    Matrix lambda;
};

struct Claim {
    StructureClass cls = StructureClass::lipschitz;
    dsl::Expr alpha = dsl::number(0.0);
    double beta = 0.0;
    double gamma = 0.0;
    Phi phi;
};

/// Point where an inequality fails; re-evaluating there reproduces lhs > rhs.
struct Witness {
    std::string inequality;
    double t = 0.0, y = 0.0, y2 = 0.0;
    std::vector<double> z, z2, w, wp;
    double lhs = 0.0, rhs = 0.0;
};

struct StructureCert {
    StructureClass cls = StructureClass::lipschitz;
    dsl::Expr alpha;
    double beta = 0.0;
    double gamma = 0.0;
    Phi phi;
    Box box;
    std::size_t samples = 0;
    std::uint64_t seed = 0;
    std::vector<std::pair<std::string, double>> margins;
    double margin = 0.0;
    bool pass = false;
    std::optional<Witness> witness;
};

namespace detail {

struct Sample {
    double t, y, y2;
    std::vector<double> z, z2, zm, w, wp;
};

inline double lambda_norm2(const Matrix& l, const std::vector<double>& z) {
    double s = 0.0;
    for (Eigen::Index r = 0; r < l.rows(); ++r) {
        double acc = 0.0;
        for (Eigen::Index c = 0; c < l.cols(); ++c) acc += l(r, c) * z[static_cast<std::size_t>(c)];
        s += acc * acc;
    }
    return s;
}

inline double lambda_norm(const Matrix& l, const std::vector<double>& z) { return std::sqrt(lambda_norm2(l, z)); }

inline double sgn(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

}  // namespace detail

/// Checks the claimed inequalities at random points of the box. The verdict is
/// REFUTED as soon as some margin (rhs - lhs) drops below -1e-9; the worst
/// point is kept as a witness.
inline StructureCert certify_structure(const dsl::Expr& f, const dsl::Expr& g, const Claim& claim, Box box,
                                       std::size_t n_samples = 20000, std::uint64_t seed = 7) {
    if (box.lambda.size() == 0) box.lambda = Matrix::Identity(static_cast<Eigen::Index>(box.d), static_cast<Eigen::Index>(box.d));
    if (static_cast<std::size_t>(box.lambda.cols()) != box.d) throw ConfigError("lambda size does not match the z dimension");
    if (claim.beta < 0.0 || claim.gamma < 0.0) throw ConfigError("beta and gamma must be nonnegative");
    const dsl::Usage gu = dsl::usage(g);
    if (gu.y || gu.z || gu.random()) throw ConfigError("g must depend on t only");
    const dsl::Program fp(f), gp(g), ap(claim.alpha);

    StructureCert cert;
    cert.cls = claim.cls;
    cert.alpha = claim.alpha;
    cert.beta = claim.beta;
    cert.gamma = claim.gamma;
    cert.phi = claim.phi;
    cert.box = box;
    cert.samples = n_samples;
    cert.seed = seed;

    struct Tracker {
        std::string name;
        double margin = std::numeric_limits<double>::infinity();
        std::optional<Witness> worst;
    };
    std::vector<Tracker> tr;
    auto tracker = [&](const std::string& name) -> Tracker& {
        for (auto& t : tr)
            if (t.name == name) return t;
        tr.push_back(Tracker{name, std::numeric_limits<double>::infinity(), std::nullopt});
        return tr.back();
    };
    auto record = [&](const std::string& name, double lhs, double rhs, const detail::Sample& s, bool pair, bool mid) {
        Tracker& t = tracker(name);
        const double m = rhs - lhs;
        if (m < t.margin) {
            t.margin = m;
            Witness w{name, s.t, s.y, pair ? s.y2 : s.y, s.z, pair || mid ? s.z2 : s.z, s.w, s.wp, lhs, rhs};
            t.worst = w;
        }
    };

    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    auto uni = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };
    const Matrix& lam = box.lambda;

    for (std::size_t n = 0; n < n_samples; ++n) {
        detail::Sample s;
        s.t = uni(box.t_lo, box.t_hi);
        s.y = uni(box.y_lo, box.y_hi);
        s.y2 = uni(box.y_lo, box.y_hi);
        s.z.resize(box.d);
        s.z2.resize(box.d);
        s.zm.resize(box.d);
        for (std::size_t k = 0; k < box.d; ++k) {
            s.z[k] = uni(box.z_lo, box.z_hi);
            s.z2[k] = uni(box.z_lo, box.z_hi);
        }
        s.w.resize(box.d_w);
        s.wp.resize(box.d_wp);
        for (auto& v : s.w) v = uni(box.w_lo, box.w_hi);
        for (auto& v : s.wp) v = uni(box.w_lo, box.w_hi);
        // A few structured points: y = 0, z = 0 and the box corners.
        if (n % 50 == 1) s.y = 0.0;
        if (n % 50 == 2) std::fill(s.z.begin(), s.z.end(), 0.0);
        if (n % 50 == 3) { s.y = box.y_hi; s.y2 = box.y_lo; }
        for (std::size_t k = 0; k < box.d; ++k) s.zm[k] = 0.5 * (s.z[k] + s.z2[k]);

        auto fval = [&](double y, const std::vector<double>& z) {
            dsl::Env e;
            e.t = s.t;
            e.a = s.t;
            e.y = y;
            e.z = z;
            e.w = s.w;
            e.wp = s.wp;
            e.lambda = &lam;
            return fp(e);
        };
        dsl::Env te;
        te.t = s.t;
        te.a = s.t;
        const double alpha = ap(te);
        const double gv = gp(te);
        const double f1 = fval(s.y, s.z);
        const double ay = std::abs(s.y);
        const double quad = 0.5 * claim.gamma * detail::lambda_norm2(lam, s.z);

        record("alpha_nonnegative", -alpha, 0.0, s, false, false);
        record("g_bound", std::abs(gv), 0.5 * claim.gamma, s, false, false);

        switch (claim.cls) {
            case StructureClass::lipschitz: {
                const double f2 = fval(s.y2, s.z2);
                std::vector<double> dz(box.d);
                for (std::size_t k = 0; k < box.d; ++k) dz[k] = s.z[k] - s.z2[k];
                record("lipschitz", std::abs(f1 - f2), claim.beta * std::abs(s.y - s.y2) + claim.gamma * detail::lambda_norm(lam, dz), s,
                       true, false);
                break;
            }
            case StructureClass::growth:
                record("sign_growth", detail::sgn(s.y) * f1, alpha + alpha * claim.beta * ay + quad, s, false, false);
                record("abs_growth", std::abs(f1), alpha + alpha * claim.phi(ay) + quad, s, false, false);
                break;
            case StructureClass::growth_additive:
                record("sign_growth", detail::sgn(s.y) * f1, alpha + claim.beta * ay + quad, s, false, false);
                record("abs_growth", std::abs(f1), alpha + claim.phi(ay) + quad, s, false, false);
                break;
            case StructureClass::growth_linear:
                record("abs_growth", std::abs(f1), alpha + claim.beta * ay + quad, s, false, false);
                break;
            case StructureClass::convex: {
                const double f2 = fval(s.y2, s.z);
                record("lipschitz_y", std::abs(f1 - f2), claim.beta * std::abs(s.y - s.y2), s, true, false);
                const double fa = fval(s.y, s.z2), fm = fval(s.y, s.zm);
                record("midpoint_convex_z", fm, 0.5 * (f1 + fa), s, false, true);
                record("abs_growth", std::abs(f1), alpha + claim.beta * ay + quad, s, false, false);
                break;
            }
        }
    }

    cert.margin = std::numeric_limits<double>::infinity();
    const Tracker* worst = nullptr;
    for (const auto& t : tr) {
        cert.margins.emplace_back(t.name, t.margin);
        if (t.margin < cert.margin) {
            cert.margin = t.margin;
            worst = &t;
        }
    }
    cert.pass = cert.margin >= -1e-9;
    if (!cert.pass && worst) cert.witness = worst->worst;
    return cert;
}

/// Recomputes lhs and rhs of the witnessed inequality.
inline std::pair<double, double> replay_witness(const dsl::Expr& f, const dsl::Expr& g, const StructureCert& cert) {
    if (!cert.witness) throw PreconditionError("certificate has no witness");
    const Witness& w = *cert.witness;
    const Matrix& lam = cert.box.lambda;
    auto fval = [&](double y, const std::vector<double>& z) {
        dsl::Env e;
        e.t = w.t;
        e.a = w.t;
        e.y = y;
        e.z = z;
        e.w = w.w;
        e.wp = w.wp;
        e.lambda = &lam;
        return dsl::evaluate(f, e);
    };
    dsl::Env te;
    te.t = w.t;
    te.a = w.t;
    const double alpha = dsl::evaluate(cert.alpha, te);
    const double ay = std::abs(w.y);
    const double quad = 0.5 * cert.gamma * detail::lambda_norm2(lam, w.z);
    const double f1 = fval(w.y, w.z);
    if (w.inequality == "alpha_nonnegative") return {-alpha, 0.0};
    if (w.inequality == "g_bound") return {std::abs(dsl::evaluate(g, te)), 0.5 * cert.gamma};
    if (w.inequality == "lipschitz") {
        std::vector<double> dz(w.z.size());
        for (std::size_t k = 0; k < dz.size(); ++k) dz[k] = w.z[k] - w.z2[k];
        return {std::abs(f1 - fval(w.y2, w.z2)), cert.beta * std::abs(w.y - w.y2) + cert.gamma * detail::lambda_norm(lam, dz)};
    }
    if (w.inequality == "lipschitz_y") return {std::abs(f1 - fval(w.y2, w.z)), cert.beta * std::abs(w.y - w.y2)};
    if (w.inequality == "midpoint_convex_z") {
        std::vector<double> zm(w.z.size());
        for (std::size_t k = 0; k < zm.size(); ++k) zm[k] = 0.5 * (w.z[k] + w.z2[k]);
        return {fval(w.y, zm), 0.5 * (f1 + fval(w.y, w.z2))};
    }
    if (w.inequality == "sign_growth") {
        const double lin = cert.cls == StructureClass::growth ? alpha * cert.beta * ay : cert.beta * ay;
        return {detail::sgn(w.y) * f1, alpha + lin + quad};
    }
    if (w.inequality == "abs_growth") {
        double extra = cert.beta * ay;
        if (cert.cls == StructureClass::growth) extra = alpha * cert.phi(ay);
        if (cert.cls == StructureClass::growth_additive) extra = cert.phi(ay);
        return {std::abs(f1), alpha + extra + quad};
    }
    throw PreconditionError("unknown inequality '" + w.inequality + "'");
}

}  // namespace qbsde
