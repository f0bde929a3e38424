#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "driver.hpp"
#include "envelope.hpp"
#include "errors.hpp"
#include "estimates.hpp"
#include "lqsolver.hpp"
#include "problem.hpp"
#include "residual.hpp"

namespace qbsde {

/// Regularization indices: generator envelopes f^{n,k} for n in n_list, k in k_list.
struct Ladder {
    std::vector<double> n_list;
    std::vector<double> k_list;
};

struct QuadraticOptions {
    LqOptions lq;
    EnvelopeOptions envelope;
    /// Order tolerance between rungs; negative selects 1e-8 (lattice) or 1e-5 (lsmc).
    double monotone_tol = -1.0;
    /// Also replace xi by xi^+ ^ n - xi^- ^ k on every rung.
    bool truncate = false;
};

struct Rung {
    double n = 0.0;
    double k = 0.0;
    double y0 = 0.0;
    std::vector<std::vector<double>> y;
    ContractionReport report;
};

/// Nodewise order check between two rungs that differ in one index.
struct OrderCheck {
    std::size_t lower = 0;
    std::size_t upper = 0;
    char index = 'n';
    double violation = 0.0;
    std::size_t step = 0;
    std::size_t point = 0;
    bool pass = true;
};

struct MonotoneLadder {
    std::vector<double> n_list;
    std::vector<double> k_list;
    /// Row-major over (n_list, k_list).
    std::vector<Rung> rungs;
    std::vector<OrderCheck> checks;
    /// Rung indices along the diagonal (n_j, k_j), j = 0, 1, ... with the
    /// shorter list held at its last entry.
    std::vector<std::size_t> diagonal;
    std::vector<double> sup_gaps;
    std::vector<double> m2_gaps;
    DiscreteSolution limit;
    DiscreteSolution previous;
    double tolerance = 0.0;
    bool consistent = true;
    bool converged = true;

    std::size_t index(std::size_t a, std::size_t b) const { return a * k_list.size() + b; }
    std::string verdict() const { return consistent ? "CONSISTENT" : "INCONSISTENT"; }
};

struct QuadraticResult {
    DiscreteSolution solution;
    MonotoneLadder ladder;
};

namespace detail {

inline std::vector<double> sorted_levels(std::vector<double> v, const char* what) {
    if (v.empty()) throw ConfigError(std::string(what) + " must not be empty");
    for (double x : v)
        if (!(x > 0.0)) throw ConfigError(std::string(what) + " entries must be positive");
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
    return v;
}

/// max (a - b)^+ over all nodes, with the worst node.
inline OrderCheck order_violation(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b) {
    OrderCheck c;
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t p = 0; p < a[i].size(); ++p) {
            const double v = a[i][p] - b[i][p];
            if (v > c.violation) {
                c.violation = v;
                c.step = i;
                c.point = p;
            }
        }
    return c;
}

}  // namespace detail

/// Solves the envelope problems (f^{n,k}, g, xi) over the ladder, checks that
/// Y^{n,k} is nondecreasing in n and nonincreasing in k, and takes the rung at
/// the largest indices as the solution.
inline QuadraticResult solve_quadratic(const BsdeProblem& prob, const ExpectationEngine& eng, const Ladder& ladder,
                                       QuadraticOptions opt = {}) {
    if (prob.cert && !prob.cert->pass) throw PreconditionError("the structure certificate of the problem was refuted");
    if (!prob.f_expr) throw ConfigError("the quadratic solver needs the generator as an expression");
    if (opt.monotone_tol < 0.0) opt.monotone_tol = eng.backend() == Backend::lattice ? 1e-8 : 1e-5;
    QuadraticResult res;
    MonotoneLadder& lad = res.ladder;
    lad.n_list = detail::sorted_levels(ladder.n_list, "n_list");
    lad.k_list = detail::sorted_levels(ladder.k_list, "k_list");
    lad.tolerance = opt.monotone_tol;
    const std::size_t ln = lad.n_list.size(), lk = lad.k_list.size();
    lad.rungs.resize(ln * lk);

    auto solve_rung = [&](std::size_t a, std::size_t b) {
        BsdeProblem rp = regularized_problem(prob, lad.n_list[a], lad.k_list[b], opt.envelope);
        if (!opt.truncate) rp.xi = prob.xi;
        LqResult r = solve_lq(rp, eng, opt.lq);
        Rung& rung = lad.rungs[lad.index(a, b)];
        rung.n = lad.n_list[a];
        rung.k = lad.k_list[b];
        rung.y0 = weighted_mean(eng, 0, r.solution.y[0]);
        rung.y = r.solution.y;
        rung.report = std::move(r.report);
        if (!rung.report.converged) lad.converged = false;
        return std::move(r.solution);
    };

    const std::size_t dsteps = std::max(ln, lk);
    std::vector<char> done(ln * lk, 0);
    DiscreteSolution prev;
    for (std::size_t j = 0; j < dsteps; ++j) {
        const std::size_t a = std::min(j, ln - 1), b = std::min(j, lk - 1);
        DiscreteSolution cur = solve_rung(a, b);
        done[lad.index(a, b)] = 1;
        lad.diagonal.push_back(lad.index(a, b));
        if (j > 0) {
            lad.sup_gaps.push_back(sup_gap(cur, prev));
            lad.m2_gaps.push_back(m2_distance(eng, cur, prev));
        }
        prev = std::move(cur);
        if (j + 2 == dsteps) lad.previous = prev;
    }
    lad.limit = std::move(prev);
    for (std::size_t a = 0; a < ln; ++a)
        for (std::size_t b = 0; b < lk; ++b)
            if (!done[lad.index(a, b)]) solve_rung(a, b);

    for (std::size_t a = 0; a < ln; ++a)
        for (std::size_t b = 0; b < lk; ++b) {
            if (a + 1 < ln) {
                OrderCheck c = detail::order_violation(lad.rungs[lad.index(a, b)].y, lad.rungs[lad.index(a + 1, b)].y);
                c.lower = lad.index(a, b);
                c.upper = lad.index(a + 1, b);
                c.index = 'n';
                c.pass = c.violation <= lad.tolerance;
                lad.checks.push_back(c);
            }
            if (b + 1 < lk) {
                OrderCheck c = detail::order_violation(lad.rungs[lad.index(a, b + 1)].y, lad.rungs[lad.index(a, b)].y);
                c.lower = lad.index(a, b);
                c.upper = lad.index(a, b + 1);
                c.index = 'k';
                c.pass = c.violation <= lad.tolerance;
                lad.checks.push_back(c);
            }
        }
    for (const auto& c : lad.checks) lad.consistent = lad.consistent && c.pass;
    res.solution = lad.limit;
    return res;
}

/// Geometric trend of a gap sequence: exp of the least-squares slope of the
/// log gaps (NaN with fewer than two positive gaps).
inline double trend_ratio(const std::vector<double>& gaps) {
    std::vector<std::pair<double, double>> pts;
    for (std::size_t k = 0; k < gaps.size(); ++k)
        if (gaps[k] > 0.0 && std::isfinite(gaps[k])) pts.emplace_back(static_cast<double>(k), std::log(gaps[k]));
    if (pts.size() < 2) return std::numeric_limits<double>::quiet_NaN();
    double mx = 0.0, my = 0.0;
    for (auto [x, y] : pts) {
        mx += x;
        my += y;
    }
    mx /= static_cast<double>(pts.size());
    my /= static_cast<double>(pts.size());
    double sxy = 0.0, sxx = 0.0;
    for (auto [x, y] : pts) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
    }
    return std::exp(sxy / sxx);
}

struct LimitReport {
    std::vector<double> sup_gaps;
    std::vector<double> m2_gaps;
    double sup_gap = 0.0;
    double m2_gap = 0.0;
    double trend = std::numeric_limits<double>::quiet_NaN();
    double residual = 0.0;
};

/// The limit is the last rung; the report carries the gaps between the last
/// two diagonal rungs, their trend and the residual against the target problem.
inline LimitReport monotone_limit(const MonotoneLadder& lad, const BsdeProblem& target, const ExpectationEngine& eng) {
    if (lad.diagonal.size() < 2) throw ConfigError("a monotone limit needs at least two rungs on the ladder diagonal");
    LimitReport r;
    r.sup_gaps = lad.sup_gaps;
    r.m2_gaps = lad.m2_gaps;
    r.sup_gap = lad.sup_gaps.back();
    r.m2_gap = lad.m2_gaps.back();
    r.trend = trend_ratio(lad.sup_gaps);
    r.residual = residual(target, lad.limit, eng).max_abs;
    return r;
}

/// Exponential-transform oracle for f = gamma/2 |lambda z|^2 + a(t), g = gamma/2:
/// Y_i = (1/gamma) ln E_i[exp(gamma xi)] + sum_{j>=i} a(t_j) dA_j, with the
/// integrands from projecting exp(gamma Y_{i+1}) and dividing by gamma E_i[exp(gamma Y_{i+1})].
inline DiscreteSolution solve_colehopf(const BsdeProblem& prob, const ExpectationEngine& eng) {
    const double g = prob.gamma;
    if (!(g > 0.0)) throw PreconditionError("the exponential transform needs gamma > 0");
    if (!prob.f_expr) throw PreconditionError("the exponential transform needs the generator as an expression");
    const auto form = dsl::affine_form(*prob.f_expr);
    bool ok = form && form->y == 0.0 && form->normz == 0.0 && std::abs(form->norm2z - 0.5 * g) <= 1e-14 * g;
    if (ok)
        for (double v : form->z) ok = ok && v == 0.0;
    if (ok)
        for (double v : form->lz) ok = ok && v == 0.0;
    if (!ok) throw PreconditionError("generator is not of the form gamma/2 |lambda z|^2 + a(t)");
    const std::size_t n = eng.steps();
    if (eng.d_perp() > 0)
        for (std::size_t i = 0; i <= n; ++i)
            if (std::abs(prob.g(eng.t(i)) - 0.5 * g) > 1e-14 * g) throw PreconditionError("g must equal gamma/2");
    std::vector<double> integral(n + 1, 0.0);
    if (form->constant) {
        const dsl::Program a(form->constant);
        for (std::size_t i = n; i-- > 0;) {
            dsl::Env e;
            e.t = eng.t(i);
            e.a = eng.A(i);
            integral[i] = integral[i + 1] + a(e) * eng.dA(i);
        }
    }
    std::vector<double> ex = terminal_values(prob.xi, eng);
    for (double& v : ex) v *= g;
    LogExpectation le = log_expectation(eng, std::move(ex));
    if (le.clamped) throw NumericalError("exponential transform underflowed; rescale the data");
    DiscreteSolution s = zero_solution(eng);
    const std::size_t dm = s.d_m, dp = s.d_perp;
    for (std::size_t i = 0; i <= n; ++i)
        for (std::size_t p = 0; p < eng.size(i); ++p) s.y[i][p] = le.values[i][p] / g + integral[i];
    s.y[n] = terminal_values(prob.xi, eng);
    for (std::size_t i = 0; i < n; ++i) {
        const auto& next = le.values[i + 1];
        const double m = *std::max_element(next.begin(), next.end());
        std::vector<double> v(next.size());
        for (std::size_t q = 0; q < v.size(); ++q) v[q] = std::exp(next[q] - m);
        const Projection pr = eng.project(i, v);
        for (std::size_t p = 0; p < eng.size(i); ++p) {
            const double den = g * pr.mean[p];
            if (!(den > 0.0) || !std::isfinite(den)) throw NumericalError("exponential transform underflowed at a node", i);
            for (std::size_t c = 0; c < dm; ++c) s.z[i][p * dm + c] = pr.z[p * dm + c] / den;
            for (std::size_t c = 0; c < dp; ++c) s.perp[i][p * dp + c] = pr.perp[p * dp + c] / den;
        }
    }
    return s;
}

struct UnboundedOptions {
    QuadraticOptions quad;
    /// Level for sigma (|alpha| reaching it stops every path); negative uses m.
    double sigma_level = -1.0;
    std::size_t n_paths = 1000;
    std::uint64_t seed = 1;
    /// Overlap tolerance; negative uses ten times the ladder tolerance.
    double paste_tol = -1.0;
};

struct LevelSolution {
    double m = 0.0;
    DiscreteSolution solution;
    ContractionReport report;
    std::vector<std::vector<char>> domain;
    std::vector<std::vector<char>> hit;
    std::vector<std::size_t> tau;
    std::size_t sigma_step = 0;
    /// max over domain nodes of (|Y^m| - X)^+.
    double bound_violation = 0.0;
    /// max over unstopped domain nodes of |alpha| + X - m (negative when X < m strictly).
    double level_excess = -std::numeric_limits<double>::infinity();
    std::size_t domain_nodes = 0;
};

struct PastedSolution {
    std::vector<LevelSolution> levels;
    DiscreteSolution glued;
    /// Level index that defines each node, or -1 for the ladder limit.
    std::vector<std::vector<int>> source;
    /// max |Y^{m_{j+1}} - Y^{m_j}| on the domain of m_j.
    std::vector<double> overlap_gaps;
    double paste_tol = 0.0;
    bool paste_fault = false;
    MonotoneLadder ladder;
    LocalizationBound x;

    std::string verdict() const { return paste_fault ? "PASTE_FAULT" : "PASS"; }
};

/// Localization and pasting. X and the stopping nodes {|alpha| + X >= m} come
/// from the data; the ladder over the whole horizon (with truncated data)
/// supplies values at stopped nodes; each level then solves the original
/// generator on its domain with those values pinned at the stopping nodes.
/// Nodes take the smallest level that reaches them unstopped.
inline PastedSolution solve_unbounded(const BsdeProblem& prob, const ExpectationEngine& eng, std::vector<double> m_list,
                                      const Ladder& ladder, UnboundedOptions opt = {}) {
    if (prob.cert && !prob.cert->pass) throw PreconditionError("the structure certificate of the problem was refuted");
    m_list = detail::sorted_levels(std::move(m_list), "m_list");
    const std::size_t n = eng.steps(), dm = eng.d_m(), dp = eng.d_perp();
    PastedSolution out;
    out.x = localization_bound(prob, eng);
    const std::vector<double> av = alpha_variation(prob, eng);
    QuadraticOptions qo = opt.quad;
    qo.truncate = true;
    QuadraticResult qr = solve_quadratic(prob, eng, ladder, qo);
    out.ladder = std::move(qr.ladder);
    const DiscreteSolution& yr = qr.solution;
    out.paste_tol = opt.paste_tol >= 0.0 ? opt.paste_tol : 10.0 * out.ladder.tolerance;
    const std::vector<double> xi = terminal_values(prob.xi, eng);
    const PathSample ps = eng.sample_paths(opt.n_paths, opt.seed);

    for (double m : m_list) {
        LocalizationPlan plan = localization_plan(out.x, av, eng, m, opt.sigma_level > 0.0 ? opt.sigma_level : m, &ps);
        LevelSolution lv;
        lv.m = m;
        lv.sigma_step = plan.sigma_step;
        lv.tau = std::move(plan.tau);
        for (std::size_t k = 0; k < lv.tau.size(); ++k) lv.tau[k] = std::min(lv.tau[k], plan.sigma_step);
        lv.hit = std::move(plan.hit);
        for (std::size_t i = plan.sigma_step; i <= n; ++i) std::fill(lv.hit[i].begin(), lv.hit[i].end(), 1);
        // domain: nodes reachable through unstopped nodes
        lv.domain.assign(n + 1, {});
        for (std::size_t i = 0; i <= n; ++i) lv.domain[i].assign(eng.size(i), 0);
        std::fill(lv.domain[0].begin(), lv.domain[0].end(), 1);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t p = 0; p < eng.size(i); ++p) {
                if (!lv.domain[i][p] || lv.hit[i][p]) continue;
                const Successors s = eng.successors(i, p);
                for (std::size_t c = 0; c < s.count; ++c) lv.domain[i + 1][s.index[c]] = 1;
            }
        // stopped nodes take the ladder limit, unstopped terminal nodes the data
        StopRule rule;
        rule.stopped = lv.hit;
        std::fill(rule.stopped[n].begin(), rule.stopped[n].end(), 1);
        rule.boundary = yr.y;
        for (std::size_t p = 0; p < eng.size(n); ++p)
            if (!lv.hit[n][p]) rule.boundary[n][p] = xi[p];
        LqOptions lo = opt.quad.lq;
        lo.stop = &rule;
        LqResult r = solve_lq(prob, eng, lo);
        lv.report = std::move(r.report);
        lv.solution = std::move(r.solution);
        for (std::size_t i = 0; i <= n; ++i)
            for (std::size_t p = 0; p < eng.size(i); ++p) {
                if (!lv.domain[i][p]) continue;
                ++lv.domain_nodes;
                lv.bound_violation = std::max(lv.bound_violation, std::abs(lv.solution.y[i][p]) - out.x.x[i][p]);
                if (!lv.hit[i][p]) lv.level_excess = std::max(lv.level_excess, av[i] + out.x.x[i][p] - m);
            }
        out.levels.push_back(std::move(lv));
    }

    for (std::size_t j = 0; j + 1 < out.levels.size(); ++j) {
        const auto& a = out.levels[j];
        const auto& b = out.levels[j + 1];
        double gap = 0.0;
        for (std::size_t i = 0; i <= n; ++i)
            for (std::size_t p = 0; p < eng.size(i); ++p)
                if (a.domain[i][p]) gap = std::max(gap, std::abs(a.solution.y[i][p] - b.solution.y[i][p]));
        out.overlap_gaps.push_back(gap);
        if (gap > out.paste_tol) out.paste_fault = true;
    }

    out.glued = yr;
    out.source.assign(n + 1, {});
    for (std::size_t i = 0; i <= n; ++i) {
        out.source[i].assign(eng.size(i), -1);
        for (std::size_t p = 0; p < eng.size(i); ++p)
            for (std::size_t j = 0; j < out.levels.size(); ++j) {
                const auto& lv = out.levels[j];
                if (!lv.domain[i][p] || lv.hit[i][p]) continue;
                out.source[i][p] = static_cast<int>(j);
                out.glued.y[i][p] = lv.solution.y[i][p];
                if (i < n) {
                    for (std::size_t c = 0; c < dm; ++c) out.glued.z[i][p * dm + c] = lv.solution.z[i][p * dm + c];
                    for (std::size_t c = 0; c < dp; ++c) out.glued.perp[i][p * dp + c] = lv.solution.perp[i][p * dp + c];
                }
                break;
            }
    }
    return out;
}

/// One member of a perturbation family, indexed by n.
struct StabilityMember {
    double n = 0.0;
    BsdeProblem problem;
};

struct StabilityRow {
    double n = 0.0;
    /// E[exp(p max_i |Y^n_i - Y^0_i|)] per p, along sampled paths.
    std::vector<double> exp_metric;
    std::vector<double> exp_metric_se;
    double m2 = 0.0;
    double sup_gap = 0.0;
};

struct StabilityRun {
    std::vector<double> p_list;
    std::vector<StabilityRow> rows;
    /// sup_n ln E[exp(p(|xi^n| + |alpha^n|_T))] per p.
    std::vector<double> data_bound;
    bool data_finite = true;
    bool g_bound_ok = true;
    bool metric_monotone = true;
    bool m2_monotone = true;
    bool pass = false;
};

using SolveFn = std::function<DiscreteSolution(const BsdeProblem&, const ExpectationEngine&)>;

inline DiscreteSolution default_solve(const BsdeProblem& p, const ExpectationEngine& e) { return solve_lq(p, e).solution; }

/// Solves the base problem and each family member and records the distance
/// functionals; the verdict asks both sequences to be nonincreasing in n.
inline StabilityRun stability_experiment(const BsdeProblem& base, const std::vector<StabilityMember>& family,
                                         const std::vector<double>& p_list, const ExpectationEngine& eng,
                                         const SolveFn& solve = default_solve, std::size_t n_paths = 20000,
                                         std::uint64_t seed = 1) {
    if (p_list.empty()) throw ConfigError("p_list must not be empty");
    for (double p : p_list)
        if (!(p >= 1.0)) throw ConfigError("stability exponents must be at least 1");
    for (std::size_t j = 1; j < family.size(); ++j)
        if (!(family[j].n > family[j - 1].n)) throw ConfigError("family indices must increase");
    StabilityRun run;
    run.p_list = p_list;
    const std::size_t n = eng.steps();
    run.data_bound.assign(p_list.size(), -std::numeric_limits<double>::infinity());
    auto account = [&](const BsdeProblem& pr) {
        const double av = alpha_variation(pr, eng).back();
        std::vector<double> d = terminal_values(pr.xi, eng);
        for (std::size_t a = 0; a < p_list.size(); ++a) {
            std::vector<double> e(d.size());
            for (std::size_t q = 0; q < d.size(); ++q) e[q] = p_list[a] * (std::abs(d[q]) + av);
            run.data_bound[a] = std::max(run.data_bound[a], log_mean_exp(eng, e));
        }
        for (std::size_t i = 0; i <= n; ++i)
            if (pr.gamma > 0.0 && std::abs(pr.g(eng.t(i))) > 0.5 * base.gamma + 1e-15) run.g_bound_ok = false;
    };
    account(base);
    for (const auto& m : family) account(m.problem);
    for (double v : run.data_bound) run.data_finite = run.data_finite && std::isfinite(v);

    const DiscreteSolution y0 = solve(base, eng);
    const PathSample ps = eng.sample_paths(n_paths, seed);
    for (const auto& member : family) {
        const DiscreteSolution yn = solve(member.problem, eng);
        StabilityRow row;
        row.n = member.n;
        row.m2 = m2_distance(eng, yn, y0);
        row.sup_gap = sup_gap(yn, y0);
        std::vector<double> pathmax(ps.n_paths);
        for (std::size_t k = 0; k < ps.n_paths; ++k) {
            double mx = 0.0;
            for (std::size_t i = 0; i <= n; ++i) {
                const std::size_t pt = ps.at(k, i);
                mx = std::max(mx, std::abs(yn.y[i][pt] - y0.y[i][pt]));
            }
            pathmax[k] = mx;
        }
        for (double p : p_list) {
            std::vector<double> e(pathmax.size());
            for (std::size_t k = 0; k < e.size(); ++k) e[k] = std::exp(p * pathmax[k]);
            const SampleMean s = sample_mean(e);
            row.exp_metric.push_back(s.mean);
            row.exp_metric_se.push_back(s.se);
        }
        run.rows.push_back(std::move(row));
    }
    for (std::size_t j = 1; j < run.rows.size(); ++j) {
        for (std::size_t a = 0; a < p_list.size(); ++a)
            if (run.rows[j].exp_metric[a] > run.rows[j - 1].exp_metric[a] * (1.0 + 1e-12)) run.metric_monotone = false;
        if (run.rows[j].m2 > run.rows[j - 1].m2 * (1.0 + 1e-12) + 1e-14) run.m2_monotone = false;
    }
    run.pass = run.data_finite && run.g_bound_ok && run.metric_monotone && run.m2_monotone;
    return run;
}

}  // namespace qbsde
