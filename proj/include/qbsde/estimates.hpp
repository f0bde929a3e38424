#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "driver.hpp"
#include "envelope.hpp"
#include "errors.hpp"
#include "lqsolver.hpp"
#include "problem.hpp"

namespace qbsde {

/// One bound-versus-measurement comparison.
struct FunctionalCheck {
    std::string functional;
    double bound = 0.0;
    double measured = 0.0;
    double slack = 0.0;
    bool pass = false;
};

inline FunctionalCheck make_check(std::string name, double bound, double measured, double tol) {
    FunctionalCheck c;
    c.functional = std::move(name);
    c.bound = bound;
    c.measured = measured;
    c.slack = bound - measured;
    c.pass = c.slack >= -tol;
    return c;
}

enum class TransformVariant { lemma5, thm6 };

/// u(x) = (e^{cx} - 1 - cx)/c^2 with c = gamma (lemma5) or 8 gamma (thm6),
/// so that u'' = c u' + 1 and u(0) = u'(0) = 0.
struct TransformKit {
    TransformVariant variant = TransformVariant::lemma5;
    double gamma = 1.0;
    double rate = 1.0;

    double u(double x) const { return (std::expm1(rate * x) - rate * x) / (rate * rate); }
    double du(double x) const { return std::expm1(rate * x) / rate; }
    double d2u(double x) const { return std::exp(rate * x); }
    /// |u'' - (c u' + 1)| relative to u''.
    double identity_error(double x) const {
        const double lhs = d2u(x), rhs = rate * du(x) + 1.0;
        return std::abs(lhs - rhs) / std::max(1.0, std::abs(lhs));
    }
};

inline TransformKit u_transform(double gamma, TransformVariant v = TransformVariant::lemma5) {
    if (!(gamma > 0.0) || !std::isfinite(gamma)) throw ConfigError("the u-transform needs gamma > 0");
    TransformKit k;
    k.variant = v;
    k.gamma = gamma;
    k.rate = v == TransformVariant::lemma5 ? gamma : 8.0 * gamma;
    return k;
}

/// max over grid nodes tau of ||E_tau[sum_{j>=tau} |lambda Z_j|^2 dA_j + |perp_j|^2 dt_j]||^{1/2}.
inline double bmo_norm(const DiscreteSolution& sol, const ExpectationEngine& eng, double rho = 0.0) {
    return weighted_norm(eng, sol, rho).bmo;
}

inline double sup_abs(const std::vector<std::vector<double>>& v) {
    double m = 0.0;
    for (const auto& row : v)
        for (double x : row) m = std::max(m, std::abs(x));
    return m;
}

/// Bounded a priori estimates for problems with growth
/// sgn(y) f <= alpha (1 + beta |y|) + gamma/2 |lambda z|^2.
struct AprioriReport {
    double xi_sup = 0.0;
    double alpha_total = 0.0;
    double y_bound = 0.0;
    double bmo_bound = 0.0;
    double y_measured = 0.0;
    double bmo_measured = 0.0;
    double y_slack = 0.0;
    double bmo_slack = 0.0;
    bool pass = false;

    std::vector<FunctionalCheck> checks(double tol = 1e-6) const {
        return {make_check("apriori_sup", y_bound, y_measured, tol), make_check("apriori_bmo", bmo_bound, bmo_measured, tol)};
    }
};

/// y_bound = e^{beta |alpha|_T}(||xi|| + |alpha|_T) and
/// c_b^2 = 2(e^{gamma y}/gamma^2 + (e^{gamma y}/gamma)(1 + beta y)|alpha|_T) at y = y_bound.
inline AprioriReport apriori_bounds(double gamma, double beta, double xi_sup, double alpha_total) {
    if (!(gamma > 0.0)) throw ConfigError("a priori bounds need gamma > 0");
    AprioriReport r;
    r.xi_sup = xi_sup;
    r.alpha_total = alpha_total;
    r.y_bound = std::exp(beta * alpha_total) * (xi_sup + alpha_total);
    const double e = std::exp(gamma * r.y_bound);
    r.bmo_bound = std::sqrt(2.0 * (e / (gamma * gamma) + (e / gamma) * (1.0 + beta * r.y_bound) * alpha_total));
    return r;
}

inline AprioriReport apriori_bounded(const BsdeProblem& prob, const ExpectationEngine& eng, const DiscreteSolution& sol,
                                     double tol = 1e-6) {
    double xs = 0.0;
    for (double v : terminal_values(prob.xi, eng)) xs = std::max(xs, std::abs(v));
    AprioriReport r = apriori_bounds(prob.gamma, prob.beta, xs, alpha_variation(prob, eng).back());
    r.y_measured = sup_abs(sol.y);
    r.bmo_measured = bmo_norm(sol, eng);
    r.y_slack = r.y_bound - r.y_measured;
    r.bmo_slack = r.bmo_bound - r.bmo_measured;
    r.pass = r.y_slack >= -tol && r.bmo_slack >= -tol;
    return r;
}

/// X_s = (1/gamma) ln E_s[exp(gamma e^{beta A_{s,T}} |xi| + gamma int_s^T e^{beta A_{s,u}} alpha_u dA_u)].
/// alpha is deterministic, so the integral leaves the expectation. With
/// beta != 0 the exponent depends on s and one backward pass runs per step.
struct ConditionalBound {
    std::vector<std::vector<double>> x;
    bool clamped = false;
};

inline ConditionalBound conditional_bound(const BsdeProblem& prob, const ExpectationEngine& eng) {
    if (!(prob.gamma > 0.0)) throw ConfigError("the conditional bound needs gamma > 0");
    const std::size_t n = eng.steps();
    const double g = prob.gamma;
    std::vector<double> axi = terminal_values(prob.xi, eng);
    for (double& v : axi) v = std::abs(v);
    std::vector<double> integral(n + 1, 0.0);
    for (std::size_t s = 0; s < n; ++s) {
        double acc = 0.0;
        for (std::size_t j = s; j < n; ++j) acc += std::exp(prob.beta * (eng.A(j) - eng.A(s))) * std::abs(prob.alpha(eng.t(j))) * eng.dA(j);
        integral[s] = acc;
    }
    ConditionalBound out;
    out.x.resize(n + 1);
    auto scaled = [&](double factor) {
        std::vector<double> e(axi.size());
        for (std::size_t q = 0; q < e.size(); ++q) e[q] = g * factor * axi[q];
        return e;
    };
    if (prob.beta == 0.0) {
        LogExpectation le = log_expectation(eng, scaled(1.0));
        out.clamped = le.clamped;
        for (std::size_t s = 0; s <= n; ++s) {
            out.x[s] = std::move(le.values[s]);
            for (double& v : out.x[s]) v = v / g + integral[s];
        }
        return out;
    }
    for (std::size_t s = 0; s <= n; ++s) {
        LogExpectation le = log_expectation(eng, scaled(std::exp(prob.beta * (eng.A(n) - eng.A(s)))), s);
        out.clamped = out.clamped || le.clamped;
        out.x[s] = std::move(le.values[s]);
        for (double& v : out.x[s]) v = v / g + integral[s];
    }
    return out;
}

/// max over nodes of (|Y_i| - X_i)^+, with the worst node.
struct BoundViolation {
    double worst = 0.0;
    std::size_t step = 0;
    std::size_t point = 0;
};

inline BoundViolation bound_violation(const DiscreteSolution& sol, const std::vector<std::vector<double>>& x,
                                      const std::vector<std::vector<char>>* mask = nullptr) {
    BoundViolation b;
    for (std::size_t i = 0; i < sol.y.size(); ++i)
        for (std::size_t p = 0; p < sol.y[i].size(); ++p) {
            if (mask && !(*mask)[i][p]) continue;
            const double v = std::abs(sol.y[i][p]) - x[i][p];
            if (v > b.worst) {
                b.worst = v;
                b.step = i;
                b.point = p;
            }
        }
    return b;
}

/// Mean and standard error of a sample.
struct SampleMean {
    double mean = 0.0;
    double se = 0.0;
};

inline SampleMean sample_mean(const std::vector<double>& v) {
    SampleMean s;
    if (v.empty()) return s;
    double m = 0.0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    double q = 0.0;
    for (double x : v) q += (x - m) * (x - m);
    s.mean = m;
    s.se = v.size() > 1 ? std::sqrt(q / static_cast<double>(v.size() - 1) / static_cast<double>(v.size())) : 0.0;
    return s;
}

/// log E[exp(v)] over the terminal points with the engine's weights.
inline double log_mean_exp(const ExpectationEngine& eng, const std::vector<double>& v) {
    const std::size_t n = eng.steps();
    const auto w = eng.weights(n);
    double m = -std::numeric_limits<double>::infinity();
    for (double x : v) m = std::max(m, x);
    if (!std::isfinite(m)) return m;
    double acc = 0.0;
    for (std::size_t q = 0; q < v.size(); ++q) acc += w[q] * std::exp(v[q] - m);
    return m + std::log(acc);
}

/// E[exp(p gamma Y*)] <= (p/(p-1))^p E[exp(p gamma e^{beta A_T}(|xi| + |alpha|_T))] and
/// E[<Z.M + N>_T^{p/2}] <= c E[exp(4 p gamma e^{beta A_T}(|xi| + |alpha|_T))] with c fitted.
/// Path functionals use sampled paths on the lattice and the ensemble on lsmc;
/// the terminal expectations are exact under the engine's weights.
struct ExpMomentReport {
    double p = 0.0;
    double lhs = 0.0;
    double lhs_se = 0.0;
    double rhs = 0.0;
    double log_rhs = 0.0;
    double slack = 0.0;
    bool pass = false;
    double mp_measured = 0.0;
    double mp_base = 0.0;
    double fitted_c = 0.0;
};

inline ExpMomentReport exp_moment_bounds(const BsdeProblem& prob, const ExpectationEngine& eng, const DiscreteSolution& sol,
                                         double p, std::size_t n_paths = 20000, std::uint64_t seed = 1) {
    if (!(p > 1.0)) throw ConfigError("the exponential moment bound needs p > 1");
    if (!(prob.gamma > 0.0)) throw ConfigError("the exponential moment bound needs gamma > 0");
    const std::size_t n = eng.steps(), dm = eng.d_m();
    const double g = prob.gamma;
    const double scale = std::exp(prob.beta * eng.driver().clock.total());
    const double av = alpha_variation(prob, eng).back();
    std::vector<double> data = terminal_values(prob.xi, eng);
    for (double& v : data) v = scale * (std::abs(v) + av);
    ExpMomentReport r;
    r.p = p;
    std::vector<double> e1(data.size()), e4(data.size());
    for (std::size_t q = 0; q < data.size(); ++q) {
        e1[q] = p * g * data[q];
        e4[q] = 4.0 * p * g * data[q];
    }
    r.log_rhs = p * std::log(p / (p - 1.0)) + log_mean_exp(eng, e1);
    r.rhs = std::exp(r.log_rhs);
    const double log_base = log_mean_exp(eng, e4);
    r.mp_base = std::exp(log_base);

    const PathSample ps = eng.sample_paths(n_paths, seed);
    std::vector<double> sup_term(ps.n_paths), qv_term(ps.n_paths);
    std::vector<double> z(dm);
    for (std::size_t k = 0; k < ps.n_paths; ++k) {
        double ymax = 0.0, qv = 0.0;
        for (std::size_t i = 0; i <= n; ++i) {
            const std::size_t pt = ps.at(k, i);
            ymax = std::max(ymax, std::abs(sol.y[i][pt]));
            if (i == n) break;
            for (std::size_t c = 0; c < dm; ++c) z[c] = sol.z[i][pt * dm + c];
            qv += eng.lambda_norm2(i, z) * eng.dA(i) + sol.perp_norm2(i, pt) * eng.dt(i);
        }
        sup_term[k] = std::exp(p * g * ymax);
        qv_term[k] = std::pow(qv, 0.5 * p);
    }
    const SampleMean a = sample_mean(sup_term), b = sample_mean(qv_term);
    r.lhs = a.mean;
    r.lhs_se = a.se;
    r.slack = r.rhs - r.lhs;
    r.pass = std::isfinite(r.lhs) && r.slack >= -3.0 * r.lhs_se;
    r.mp_measured = b.mean;
    r.fitted_c = r.mp_base > 0.0 && std::isfinite(r.mp_base) ? b.mean / r.mp_base : 0.0;
    return r;
}

/// Integrated martingale part along sampled paths:
/// X_i = sum_{j<i} Z_j . dM_j + perp_j . dW_j and <X>_i = sum |lambda Z_j|^2 dA_j + |perp_j|^2 dt_j.
struct MartingalePaths {
    PathSample paths;
    std::vector<double> x;
    std::vector<double> qv;

    std::size_t steps() const { return paths.steps; }
    double x_at(std::size_t k, std::size_t i) const { return x[k * (paths.steps + 1) + i]; }
    double qv_at(std::size_t k, std::size_t i) const { return qv[k * (paths.steps + 1) + i]; }
};

inline MartingalePaths martingale_paths(const DiscreteSolution& sol, const ExpectationEngine& eng, std::size_t n_paths,
                                        std::uint64_t seed) {
    MartingalePaths mp;
    mp.paths = eng.sample_paths(n_paths, seed);
    const std::size_t n = eng.steps(), dm = eng.d_m(), dp = eng.d_perp(), np = mp.paths.n_paths;
    mp.x.assign(np * (n + 1), 0.0);
    mp.qv.assign(np * (n + 1), 0.0);
    parallel_chunks(np, 1024, eng.workers(), [&](std::size_t, std::size_t b, std::size_t e) {
        std::vector<double> z(dm);
        for (std::size_t k = b; k < e; ++k) {
            double x = 0.0, q = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                const std::size_t pt = mp.paths.at(k, i);
                for (std::size_t c = 0; c < dm; ++c) {
                    z[c] = sol.z[i][pt * dm + c];
                    x += z[c] * mp.paths.dm(k, i, c);
                }
                for (std::size_t c = 0; c < dp; ++c) x += sol.perp[i][pt * dp + c] * mp.paths.dwp(k, i, c);
                q += eng.lambda_norm2(i, z) * eng.dA(i) + sol.perp_norm2(i, pt) * eng.dt(i);
                mp.x[k * (n + 1) + i + 1] = x;
                mp.qv[k * (n + 1) + i + 1] = q;
            }
        }
    });
    return mp;
}

/// Measure-change criterion: q0 = |q~|/(2|q~| - gamma),
/// ln Lambda_tau(eta) = q~ eta X_tau + q~^2 (1/2 - eta) <X>_tau, and the mean of
/// the stochastic exponential E(q~ X)_T.
struct MeasureChangeRow {
    double eta = 0.0;
    double q = 0.0;
    double lambda_sup = 0.0;
    std::size_t lambda_sup_step = 0;
};

struct MeasureChangeReport {
    double q_tilde = 0.0;
    double gamma = 0.0;
    double q0 = 0.0;
    std::vector<MeasureChangeRow> rows;
    double martingale_mean = 0.0;
    double martingale_se = 0.0;
    double telescoping_error = 0.0;
    std::size_t n_paths = 0;
    bool pass = false;
};

inline double kazamaki_threshold(double q_tilde, double gamma) {
    const double a = std::abs(q_tilde);
    if (!(a > 0.5 * gamma)) throw PreconditionError("the measure-change criterion needs |q~| > gamma/2");
    return a / (2.0 * a - gamma);
}

inline MeasureChangeReport kazamaki_check(const DiscreteSolution& sol, double q_tilde, double gamma,
                                          std::vector<double> eta_list, const ExpectationEngine& eng,
                                          std::size_t n_paths = 100000, std::uint64_t seed = 1) {
    MeasureChangeReport r;
    r.q_tilde = q_tilde;
    r.gamma = gamma;
    r.q0 = kazamaki_threshold(q_tilde, gamma);
    const auto has = [&](auto pred) { return std::any_of(eta_list.begin(), eta_list.end(), pred); };
    if (!has([&](double e) { return e == r.q0; })) eta_list.push_back(r.q0);
    if (!has([](double e) { return e > 1.0; })) eta_list.push_back(std::max(2.0, r.q0 + 1.0));
    std::sort(eta_list.begin(), eta_list.end());

    const MartingalePaths mp = martingale_paths(sol, eng, n_paths, seed);
    const std::size_t n = eng.steps(), np = mp.paths.n_paths;
    r.n_paths = np;
    bool finite = true;
    for (double eta : eta_list) {
        MeasureChangeRow row;
        row.eta = eta;
        row.q = q_tilde * eta;
        for (std::size_t i = 0; i <= n; ++i) {
            double acc = 0.0;
            for (std::size_t k = 0; k < np; ++k)
                acc += std::exp(q_tilde * eta * mp.x_at(k, i) + q_tilde * q_tilde * (0.5 - eta) * mp.qv_at(k, i));
            acc /= static_cast<double>(np);
            if (acc > row.lambda_sup) {
                row.lambda_sup = acc;
                row.lambda_sup_step = i;
            }
        }
        finite = finite && std::isfinite(row.lambda_sup);
        r.rows.push_back(row);
    }
    std::vector<double> ex(np);
    for (std::size_t k = 0; k < np; ++k) {
        double prod = 1.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double dx = mp.x_at(k, i + 1) - mp.x_at(k, i), dq = mp.qv_at(k, i + 1) - mp.qv_at(k, i);
            prod *= std::exp(q_tilde * dx - 0.5 * q_tilde * q_tilde * dq);
        }
        const double closed = std::exp(q_tilde * mp.x_at(k, n) - 0.5 * q_tilde * q_tilde * mp.qv_at(k, n));
        r.telescoping_error = std::max(r.telescoping_error, std::abs(prod - closed) / std::max(1.0, std::abs(closed)));
        ex[k] = prod;
    }
    const SampleMean s = sample_mean(ex);
    r.martingale_mean = s.mean;
    r.martingale_se = s.se;
    const double dev = std::abs(s.mean - 1.0);
    r.pass = finite && std::isfinite(s.mean) && (dev <= 3.0 * s.se || dev <= 1e-12);
    return r;
}

}  // namespace qbsde
