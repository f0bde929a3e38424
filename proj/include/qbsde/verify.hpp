#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "driver.hpp"
#include "errors.hpp"
#include "estimates.hpp"
#include "lqsolver.hpp"
#include "problem.hpp"
#include "residual.hpp"
#include "structure.hpp"

namespace qbsde {

enum class ComparisonMode { lipschitz, convex_theta };

inline std::string to_string(ComparisonMode m) { return m == ComparisonMode::lipschitz ? "lipschitz" : "convex-theta"; }

inline ComparisonMode parse_comparison_mode(const std::string& s) {
    if (s == "lipschitz") return ComparisonMode::lipschitz;
    if (s == "convex-theta" || s == "convex_theta" || s == "theta") return ComparisonMode::convex_theta;
    throw ConfigError("unknown comparison mode '" + s + "' (expected lipschitz or convex-theta)");
}

/// Violation of an ordering hypothesis found by sampling.
struct HypothesisWitness {
    std::string what;
    double t = 0.0;
    double y = 0.0;
    std::vector<double> z;
    std::vector<double> w;
    std::vector<double> wp;
    std::size_t point = 0;
    double lhs = 0.0;
    double rhs = 0.0;
};

struct ComparisonReport {
    ComparisonMode mode = ComparisonMode::lipschitz;
    /// PASS, FAIL or INVALID_HYPOTHESIS.
    std::string verdict;
    double violation = 0.0;
    double tolerance = 0.0;
    std::size_t step = 0;
    std::size_t point = 0;
    std::optional<HypothesisWitness> hypothesis;
    /// On FAIL with a lattice: violation after doubling the steps, and the
    /// resulting triage (discretization or persistent).
    std::optional<double> refined_violation;
    std::string triage;
    bool converged = true;
    bool pass() const { return verdict == "PASS"; }
};

struct ComparisonOptions {
    std::size_t hypothesis_samples = 4000;
    std::uint64_t seed = 17;
    LqOptions lq;
    /// Nodewise tolerance; negative selects 1e-8 on the lattice and 3 standard errors on lsmc.
    double tol = -1.0;
    bool refine_on_fail = true;
    std::size_t max_refined_steps = 1024;
};

/// Same grid with every step halved. Table clocks are interpolated linearly.
inline DriverSpec refine_driver(const DriverSpec& d) {
    const auto& t = d.grid.nodes();
    std::vector<double> nt, na;
    const auto& a = d.clock.values();
    for (std::size_t i = 0; i + 1 < t.size(); ++i) {
        nt.push_back(t[i]);
        nt.push_back(0.5 * (t[i] + t[i + 1]));
        na.push_back(a[i]);
        na.push_back(0.5 * (a[i] + a[i + 1]));
    }
    nt.push_back(t.back());
    na.push_back(a.back());
    DriverSpec out = d;
    out.grid = TimeGrid(nt);
    if (d.clock.kind() == ClockKind::identity)
        out.clock = Clock::identity(out.grid);
    else
        out.clock = Clock::table(out.grid, na);
    return out;
}

namespace detail {

/// Samples f1 <= f2 on the box and checks xi1 <= xi2 on terminal points and g1 <= g2 on the grid.
inline std::optional<HypothesisWitness> ordering_hypotheses(const BsdeProblem& a, const BsdeProblem& b,
                                                            const ExpectationEngine& eng, ComparisonMode mode,
                                                            const ComparisonOptions& opt) {
    const std::size_t n = eng.steps();
    const double slack = 1e-12;
    for (std::size_t i = 0; i <= n; ++i) {
        const double ga = a.g(eng.t(i)), gb = b.g(eng.t(i));
        if (ga > gb + slack) {
            HypothesisWitness w;
            w.what = "g <= g'";
            w.t = eng.t(i);
            w.lhs = ga;
            w.rhs = gb;
            return w;
        }
        if (mode == ComparisonMode::convex_theta && gb < -slack) {
            HypothesisWitness w;
            w.what = "g' >= 0";
            w.t = eng.t(i);
            w.lhs = -gb;
            w.rhs = 0.0;
            return w;
        }
    }
    const std::vector<double> xa = terminal_values(a.xi, eng), xb = terminal_values(b.xi, eng);
    for (std::size_t p = 0; p < xa.size(); ++p)
        if (xa[p] > xb[p] + slack * std::max(1.0, std::abs(xb[p]))) {
            HypothesisWitness w;
            w.what = "xi <= xi'";
            w.t = eng.t(n);
            w.point = p;
            w.w.resize(eng.d_m());
            w.wp.resize(eng.d_perp());
            eng.state(n, p, w.w, w.wp);
            w.lhs = xa[p];
            w.rhs = xb[p];
            return w;
        }
    Box box = a.cert ? a.cert->box : Box{};
    std::mt19937_64 rng(opt.seed);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    const std::size_t dm = eng.d_m(), dp = eng.d_perp();
    std::vector<double> z(dm), w(dm), wp(dp);
    for (std::size_t s = 0; s < opt.hypothesis_samples; ++s) {
        const std::size_t i = static_cast<std::size_t>(u01(rng) * static_cast<double>(n + 1)) % (n + 1);
        dsl::Env env;
        env.t = eng.t(i);
        env.a = eng.A(i);
        env.y = box.y_lo + (box.y_hi - box.y_lo) * u01(rng);
        for (auto& v : z) v = box.z_lo + (box.z_hi - box.z_lo) * u01(rng);
        for (auto& v : w) v = box.w_lo + (box.w_hi - box.w_lo) * u01(rng);
        for (auto& v : wp) v = box.w_lo + (box.w_hi - box.w_lo) * u01(rng);
        env.z = z;
        env.w = w;
        env.wp = wp;
        env.lambda = &eng.lambda(i);
        const double fa = a.f(env), fb = b.f(env);
        if (fa > fb + slack * std::max(1.0, std::abs(fb))) {
            HypothesisWitness h;
            h.what = "f <= f'";
            h.t = env.t;
            h.y = env.y;
            h.z = z;
            h.w = w;
            h.wp = wp;
            h.lhs = fa;
            h.rhs = fb;
            return h;
        }
    }
    return std::nullopt;
}

inline double nodewise_violation(const DiscreteSolution& a, const DiscreteSolution& b, const ExpectationEngine& eng,
                                 double tol_in, double& tol_out, std::size_t& step, std::size_t& point) {
    double worst = 0.0;
    tol_out = tol_in;
    if (tol_in < 0.0) {
        if (eng.backend() == Backend::lattice) {
            tol_out = 1e-8;
        } else {
            tol_out = 0.0;
            for (std::size_t i = 0; i < a.y.size(); ++i) {
                std::vector<double> d(a.y[i].size());
                for (std::size_t p = 0; p < d.size(); ++p) d[p] = a.y[i][p] - b.y[i][p];
                tol_out = std::max(tol_out, 3.0 * sample_mean(d).se);
            }
            tol_out = std::max(tol_out, 1e-8);
        }
    }
    for (std::size_t i = 0; i < a.y.size(); ++i)
        for (std::size_t p = 0; p < a.y[i].size(); ++p) {
            const double v = a.y[i][p] - b.y[i][p];
            if (v > worst) {
                worst = v;
                step = i;
                point = p;
            }
        }
    return worst;
}

}  // namespace detail

/// Solves both problems and reports max (Y - Y')^+ over all nodes. The
/// ordering hypotheses are sampled first; problem 1 must carry a passing
/// certificate of the class the mode needs when a certificate is attached.
inline ComparisonReport check_comparison(const BsdeProblem& p1, const BsdeProblem& p2, const ExpectationEngine& eng,
                                         ComparisonMode mode, const ComparisonOptions& opt = {}) {
    ComparisonReport rep;
    rep.mode = mode;
    if (p1.cert) {
        const StructureClass need = mode == ComparisonMode::lipschitz ? StructureClass::lipschitz : StructureClass::convex;
        if (p1.cert->cls != need || !p1.cert->pass) {
            HypothesisWitness w;
            w.what = "structure certificate " + to_string(need);
            if (p1.cert->witness) {
                w.t = p1.cert->witness->t;
                w.y = p1.cert->witness->y;
                w.z = p1.cert->witness->z;
                w.lhs = p1.cert->witness->lhs;
                w.rhs = p1.cert->witness->rhs;
            }
            rep.hypothesis = w;
            rep.verdict = "INVALID_HYPOTHESIS";
            return rep;
        }
    }
    rep.hypothesis = detail::ordering_hypotheses(p1, p2, eng, mode, opt);
    if (rep.hypothesis) {
        rep.verdict = "INVALID_HYPOTHESIS";
        return rep;
    }
    const LqResult a = solve_lq(p1, eng, opt.lq), b = solve_lq(p2, eng, opt.lq);
    rep.converged = a.report.converged && b.report.converged;
    rep.violation = detail::nodewise_violation(a.solution, b.solution, eng, opt.tol, rep.tolerance, rep.step, rep.point);
    rep.verdict = rep.violation <= rep.tolerance ? "PASS" : "FAIL";
    if (!rep.pass() && opt.refine_on_fail && eng.backend() == Backend::lattice &&
        2 * eng.steps() <= opt.max_refined_steps) {
        LatticeEngine fine(refine_driver(eng.driver()), eng.workers());
        const LqResult fa = solve_lq(p1, fine, opt.lq), fb = solve_lq(p2, fine, opt.lq);
        double t2 = 0.0;
        std::size_t s2 = 0, q2 = 0;
        const double v2 = detail::nodewise_violation(fa.solution, fb.solution, fine, opt.tol, t2, s2, q2);
        rep.refined_violation = v2;
        rep.triage = v2 <= 0.6 * rep.violation ? "discretization" : "persistent";
    }
    if (!rep.pass() && !rep.converged) rep.triage = "solver non-convergence";
    return rep;
}

/// beta_s = 1{dY != 0}(f(Y, Z) - f(Y', Z))/dY and
/// gamma_s = 1{lambda dZ != 0}(f(Y', Z) - f(Y', Z')) dZ/|lambda dZ|^2 at every node.
/// Differences below 1e-12 relative are treated as zero.
struct LinearizationTrace {
    std::vector<std::vector<double>> beta;
    std::vector<std::vector<double>> gamma;
    double beta_sup = 0.0;
    double lambda_gamma_sup = 0.0;
    double gamma_bmo = 0.0;
    double certified_beta = 0.0;
    bool beta_bounded = true;
    bool gamma_finite = true;
};

inline LinearizationTrace linearization_trace(const DiscreteSolution& s1, const DiscreteSolution& s2, const BsdeProblem& p1,
                                              const ExpectationEngine& eng) {
    const std::size_t n = eng.steps(), dm = eng.d_m();
    LinearizationTrace tr;
    tr.certified_beta = p1.beta;
    tr.beta.resize(n);
    tr.gamma.resize(n);
    PointState ps(eng);
    std::vector<double> dz(dm);
    for (std::size_t i = 0; i < n; ++i) {
        tr.beta[i].assign(eng.size(i), 0.0);
        tr.gamma[i].assign(eng.size(i) * dm, 0.0);
        for (std::size_t p = 0; p < eng.size(i); ++p) {
            dsl::Env env = ps.env(eng, i, p);
            const double y = s1.y[i][p], yp = s2.y[i][p];
            const auto z = s1.z_at(i, p), zp = s2.z_at(i, p);
            env.z = z;
            env.y = y;
            const double f_yz = p1.f(env);
            env.y = yp;
            const double f_ypz = p1.f(env);
            env.z = zp;
            const double f_ypzp = p1.f(env);
            const double dy = y - yp;
            if (std::abs(dy) > 1e-12 * std::max(1.0, std::max(std::abs(y), std::abs(yp)))) tr.beta[i][p] = (f_yz - f_ypz) / dy;
            double zscale = 0.0;
            for (std::size_t c = 0; c < dm; ++c) {
                dz[c] = z[c] - zp[c];
                zscale = std::max(zscale, std::max(std::abs(z[c]), std::abs(zp[c])));
            }
            const double ln2 = eng.lambda_norm2(i, dz);
            if (std::sqrt(ln2) > 1e-12 * std::max(1.0, zscale))
                for (std::size_t c = 0; c < dm; ++c) tr.gamma[i][p * dm + c] = (f_ypz - f_ypzp) * dz[c] / ln2;
            tr.beta_sup = std::max(tr.beta_sup, std::abs(tr.beta[i][p]));
            const double lg = eng.lambda_norm2(i, std::span<const double>(tr.gamma[i].data() + p * dm, dm));
            if (!std::isfinite(lg)) tr.gamma_finite = false;
            tr.lambda_gamma_sup = std::max(tr.lambda_gamma_sup, std::sqrt(lg));
        }
    }
    const auto sums = conditional_sums(eng, [&](std::size_t i, std::size_t p) {
        return eng.lambda_norm2(i, std::span<const double>(tr.gamma[i].data() + p * dm, dm)) * eng.dA(i);
    });
    double best = 0.0;
    for (const auto& row : sums)
        for (double v : row) best = std::max(best, v);
    tr.gamma_bmo = std::sqrt(best);
    tr.beta_bounded = tr.beta_sup <= p1.beta + 1e-6;
    tr.gamma_finite = tr.gamma_finite && std::isfinite(tr.gamma_bmo);
    return tr;
}

/// Nodewise check E_i[H_{i+1}] >= H_i - tol with tol = tol_rel * max|H|.
struct SubmartingaleResult {
    bool pass = true;
    double tol = 0.0;
    double worst_deficit = 0.0;
    std::size_t step = 0;
    std::size_t point = 0;
};

inline SubmartingaleResult submartingale_test(const std::vector<std::vector<double>>& h, const ExpectationEngine& eng,
                                              double tol_rel = 1e-8) {
    SubmartingaleResult r;
    const double scale = std::max(1.0, sup_abs(h));
    r.tol = tol_rel * scale;
    for (std::size_t i = 0; i + 1 < h.size(); ++i) {
        const std::vector<double> e = eng.expect(i, h[i + 1]);
        for (std::size_t p = 0; p < e.size(); ++p) {
            const double d = h[i][p] - e[p];
            if (d > r.worst_deficit) {
                r.worst_deficit = d;
                r.step = i;
                r.point = p;
            }
        }
    }
    r.pass = r.worst_deficit <= r.tol;
    return r;
}

/// H_t = exp(gamma e^{beta |alpha|_t} |Y_t| + gamma int_0^t e^{beta |alpha|_u} alpha_u dA_u)
/// on every node (alpha deterministic, so H is a node function).
inline std::vector<std::vector<double>> growth_process(const BsdeProblem& prob, const ExpectationEngine& eng,
                                                       const DiscreteSolution& sol) {
    const std::size_t n = eng.steps();
    const std::vector<double> av = alpha_variation(prob, eng);
    std::vector<double> integral(n + 1, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        integral[i + 1] = integral[i] + std::exp(prob.beta * av[i]) * std::abs(prob.alpha(eng.t(i))) * eng.dA(i);
    std::vector<std::vector<double>> h(n + 1);
    for (std::size_t i = 0; i <= n; ++i) {
        h[i].resize(sol.y[i].size());
        const double w = std::exp(prob.beta * av[i]);
        for (std::size_t p = 0; p < h[i].size(); ++p)
            h[i][p] = std::exp(prob.gamma * (w * std::abs(sol.y[i][p]) + integral[i]));
    }
    return h;
}

/// Processes of the convex comparison argument along sampled paths:
/// delta = Y - theta Y', rho = 1{delta != 0}(f(Y, Z) - f(theta Y', Z))/delta,
/// c = gamma e^{beta ||A||}/(1 - theta), P = exp(c e^{|rho|} delta),
/// J = gamma e^{2 beta ||A||}(alpha + 2 beta |Y'|), D = exp(|J|).
/// On the lattice the one-step conditional expectation of DP along each
/// sampled path is exact (the path integrals extend by node values).
struct ThetaTrace {
    double theta = 0.0;
    double c = 0.0;
    double rho_sup = 0.0;
    double log_p_min = 0.0;
    double log_p_max = 0.0;
    double d_min = 1.0;
    double delta_sup = 0.0;
    bool rho_bounded = true;
    bool p_positive = true;
    bool d_at_least_one = true;
    /// Worst relative deficit 1 - E_i[DP_{i+1}]/DP_i over sampled (path, step) pairs.
    double worst_deficit = 0.0;
    std::size_t worst_path = 0;
    std::size_t worst_step = 0;
    double tol = 0.0;
    bool submartingale = true;
    bool pass() const { return rho_bounded && p_positive && d_at_least_one && submartingale; }
};

inline ThetaTrace theta_trace(const BsdeProblem& p1, const BsdeProblem& /*p2*/, const DiscreteSolution& s1,
                              const DiscreteSolution& s2, double theta, const ExpectationEngine& eng, double tol_rel = 1e-8,
                              std::size_t n_paths = 2000, std::uint64_t seed = 3) {
    if (!(theta > 0.0 && theta < 1.0)) throw ConfigError("theta must lie in (0, 1)");
    const std::size_t n = eng.steps();
    const double total = eng.driver().clock.total();
    ThetaTrace tr;
    tr.theta = theta;
    tr.c = p1.gamma * std::exp(p1.beta * total) / (1.0 - theta);
    tr.tol = tol_rel;
    const double jc = p1.gamma * std::exp(2.0 * p1.beta * total);
    PointState ps(eng);
    // node quantities: rho and J
    std::vector<std::vector<double>> rho(n), jn(n);
    for (std::size_t i = 0; i < n; ++i) {
        rho[i].assign(eng.size(i), 0.0);
        jn[i].assign(eng.size(i), 0.0);
        const double al = p1.alpha(eng.t(i));
        for (std::size_t p = 0; p < eng.size(i); ++p) {
            dsl::Env env = ps.env(eng, i, p);
            env.z = s1.z_at(i, p);
            const double d = s1.y[i][p] - theta * s2.y[i][p];
            if (std::abs(d) > 1e-12 * std::max(1.0, std::abs(s1.y[i][p]))) {
                env.y = s1.y[i][p];
                const double fa = p1.f(env);
                env.y = theta * s2.y[i][p];
                rho[i][p] = (fa - p1.f(env)) / d;
            }
            tr.rho_sup = std::max(tr.rho_sup, std::abs(rho[i][p]));
            jn[i][p] = jc * (al + 2.0 * p1.beta * std::abs(s2.y[i][p]));
        }
    }
    tr.rho_bounded = tr.rho_sup <= p1.beta + 1e-6;
    for (std::size_t i = 0; i <= n; ++i)
        for (std::size_t p = 0; p < s1.y[i].size(); ++p)
            tr.delta_sup = std::max(tr.delta_sup, s1.y[i][p] - theta * s2.y[i][p]);

    const PathSample sample = eng.sample_paths(n_paths, seed);
    const bool lattice = eng.backend() == Backend::lattice;
    tr.log_p_min = std::numeric_limits<double>::infinity();
    tr.log_p_max = -std::numeric_limits<double>::infinity();
    auto delta = [&](std::size_t i, std::size_t p) { return s1.y[i][p] - theta * s2.y[i][p]; };
    for (std::size_t k = 0; k < sample.n_paths; ++k) {
        double rv = 0.0, jv = 0.0;
        for (std::size_t i = 0; i <= n; ++i) {
            const std::size_t pt = sample.at(k, i);
            const double lp = tr.c * std::exp(rv) * delta(i, pt);
            tr.log_p_min = std::min(tr.log_p_min, lp);
            tr.log_p_max = std::max(tr.log_p_max, lp);
            tr.d_min = std::min(tr.d_min, std::exp(jv));
            if (!std::isfinite(lp)) tr.p_positive = false;
            if (i == n) break;
            const double rv1 = rv + std::abs(rho[i][pt]) * eng.dA(i);
            const double jv1 = jv + jn[i][pt] * eng.dA(i);
            if (lattice) {
                const Successors s = eng.successors(i, pt);
                const double here = jv + lp;
                double m = -std::numeric_limits<double>::infinity();
                std::array<double, 4> v{};
                for (std::size_t c = 0; c < s.count; ++c) {
                    v[c] = jv1 + tr.c * std::exp(rv1) * delta(i + 1, s.index[c]);
                    m = std::max(m, v[c]);
                }
                double acc = 0.0;
                for (std::size_t c = 0; c < s.count; ++c) acc += std::exp(v[c] - m);
                const double log_e = m + std::log(acc / static_cast<double>(s.count));
                const double deficit = -std::expm1(log_e - here);
                if (deficit > tr.worst_deficit) {
                    tr.worst_deficit = deficit;
                    tr.worst_path = k;
                    tr.worst_step = i;
                }
            }
            rv = rv1;
            jv = jv1;
        }
    }
    if (!lattice) {
        // regression estimate of E_i[DP_{i+1}] / DP_i on the ensemble
        const std::size_t np = sample.n_paths;
        std::vector<double> rv(np, 0.0), jv(np, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            std::vector<double> ratio(np);
            for (std::size_t k = 0; k < np; ++k) {
                const double here = jv[k] + tr.c * std::exp(rv[k]) * delta(i, k);
                const double rv1 = rv[k] + std::abs(rho[i][k]) * eng.dA(i), jv1 = jv[k] + jn[i][k] * eng.dA(i);
                ratio[k] = std::exp(jv1 + tr.c * std::exp(rv1) * delta(i + 1, k) - here);
                rv[k] = rv1;
                jv[k] = jv1;
            }
            const std::vector<double> e = eng.expect(i, ratio);
            for (std::size_t k = 0; k < np; ++k)
                if (1.0 - e[k] > tr.worst_deficit) {
                    tr.worst_deficit = 1.0 - e[k];
                    tr.worst_path = k;
                    tr.worst_step = i;
                }
        }
    }
    tr.d_at_least_one = tr.d_min >= 1.0;
    tr.submartingale = tr.worst_deficit <= tol_rel;
    return tr;
}

/// sup over nodes of (Y - theta Y')^+ for each theta of a sweep.
inline std::vector<double> theta_sweep(const DiscreteSolution& s1, const DiscreteSolution& s2, const std::vector<double>& thetas) {
    std::vector<double> out;
    for (double th : thetas) {
        if (!(th > 0.0 && th < 1.0)) throw ConfigError("theta must lie in (0, 1)");
        double m = 0.0;
        for (std::size_t i = 0; i < s1.y.size(); ++i)
            for (std::size_t p = 0; p < s1.y[i].size(); ++p) m = std::max(m, s1.y[i][p] - th * s2.y[i][p]);
        out.push_back(m);
    }
    return out;
}

}  // namespace qbsde
