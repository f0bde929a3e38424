#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "driver.hpp"
#include "errors.hpp"
#include "problem.hpp"

namespace qbsde {

/// Both terms of the smallness condition on the data.
struct SmallnessVerdict {
    double xi_sup = 0.0;
    double f0_sup = 0.0;
    double lhs = 0.0;
    double rhs = 0.0;
    double g_sup = 0.0;
    bool holds = false;
    bool g_ok = false;
};

/// ||xi||^2 + 8 ||int |f(.,0,0)| dA||^2 against exp(-||A|| (8 beta^2 ||A|| + 8 gamma^2)) / 64,
/// with the pathwise integral maximized over the points of the engine.
inline SmallnessVerdict check_smallness(const BsdeProblem& prob, const ExpectationEngine& eng) {
    const std::size_t n = eng.steps();
    SmallnessVerdict v;
    for (double x : terminal_values(prob.xi, eng)) v.xi_sup = std::max(v.xi_sup, std::abs(x));
    std::vector<double> acc(eng.size(n), 0.0);
    PointState ps(eng);
    const std::vector<double> zero(eng.d_m(), 0.0);
    for (std::size_t i = n; i-- > 0;) {
        std::vector<double> cur(eng.size(i));
        for (std::size_t p = 0; p < cur.size(); ++p) {
            dsl::Env e = ps.env(eng, i, p);
            e.y = 0.0;
            e.z = zero;
            const Successors s = eng.successors(i, p);
            double best = -std::numeric_limits<double>::infinity();
            for (std::size_t c = 0; c < s.count; ++c) best = std::max(best, acc[s.index[c]]);
            cur[p] = std::abs(prob.f(e)) * eng.dA(i) + best;
        }
        acc = std::move(cur);
    }
    for (double x : acc) v.f0_sup = std::max(v.f0_sup, x);
    for (std::size_t i = 0; i <= n; ++i) v.g_sup = std::max(v.g_sup, std::abs(prob.g(eng.t(i))));
    const double a = eng.driver().clock.total();
    v.lhs = v.xi_sup * v.xi_sup + 8.0 * v.f0_sup * v.f0_sup;
    v.rhs = std::exp(-a * (8.0 * prob.beta * prob.beta * a + 8.0 * prob.gamma * prob.gamma)) / 64.0;
    v.holds = v.lhs <= v.rhs;
    v.g_ok = v.g_sup <= 0.125;
    return v;
}

/// Weight exponent 8 beta^2 ||A|| + 8 gamma^2 of the contraction norm.
inline double contraction_rho(double beta, double gamma, double clock_total) {
    return 8.0 * beta * beta * clock_total + 8.0 * gamma * gamma;
}

struct WeightedNorm {
    double sup = 0.0;
    double bmo = 0.0;
    double total() const { return std::sqrt(sup * sup + bmo * bmo); }
};

/// sup part max e^{rho A_i / 2} |Y_i| and BMO part
/// max E_i[sum_{j>=i} e^{rho A_j} (|lambda Z_j|^2 dA_j + |perp_j|^2 dt_j)]^{1/2},
/// applied to a - b when b is given.
inline WeightedNorm weighted_norm(const ExpectationEngine& eng, const DiscreteSolution& a, double rho,
                                  const DiscreteSolution* b = nullptr) {
    const std::size_t n = eng.steps(), dm = a.d_m, dp = a.d_perp;
    WeightedNorm out;
    for (std::size_t i = 0; i <= n; ++i) {
        const double wgt = std::exp(0.5 * rho * eng.A(i));
        for (std::size_t p = 0; p < a.y[i].size(); ++p) {
            const double d = b ? a.y[i][p] - b->y[i][p] : a.y[i][p];
            out.sup = std::max(out.sup, wgt * std::abs(d));
        }
    }
    std::vector<double> dz(dm);
    double best = 0.0;
    const auto s = conditional_sums(eng, [&](std::size_t i, std::size_t p) {
        for (std::size_t k = 0; k < dm; ++k) dz[k] = a.z[i][p * dm + k] - (b ? b->z[i][p * dm + k] : 0.0);
        double q = 0.0;
        for (std::size_t k = 0; k < dp; ++k) {
            const double d = a.perp[i][p * dp + k] - (b ? b->perp[i][p * dp + k] : 0.0);
            q += d * d;
        }
        return std::exp(rho * eng.A(i)) * (eng.lambda_norm2(i, dz) * eng.dA(i) + q * eng.dt(i));
    });
    for (const auto& row : s)
        for (double v : row) best = std::max(best, v);
    out.bmo = std::sqrt(best);
    return out;
}

/// Least-squares slope of log gaps, reported as a per-iteration ratio.
struct RateFit {
    double rate = std::numeric_limits<double>::quiet_NaN();
    bool defined = false;
    bool contraction_refuted = false;
    std::size_t used = 0;
};

inline RateFit picard_rate(const std::vector<double>& gaps) {
    std::vector<std::pair<double, double>> pts;
    for (std::size_t k = 0; k < gaps.size(); ++k)
        if (gaps[k] > 0.0 && std::isfinite(gaps[k])) pts.emplace_back(static_cast<double>(k), std::log(gaps[k]));
    RateFit r;
    r.used = pts.size();
    if (pts.size() < 3) return r;
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
    r.rate = std::exp(sxy / sxx);
    r.defined = true;
    r.contraction_refuted = r.rate >= 1.0 - 1e-12;
    return r;
}

struct ContractionReport {
    std::vector<double> gaps;
    std::size_t iterations = 0;
    bool converged = false;
    double rho = 0.0;
    bool rho_capped = false;
    bool inner_unconverged = false;
    bool ridge_engaged = false;
    RateFit rate;
};

enum class PicardStart { direct, zero };
enum class QvMode { current, frozen };

/// Nodes where the solution is pinned to given values (stopped problems).
struct StopRule {
    std::vector<std::vector<char>> stopped;
    std::vector<std::vector<double>> boundary;
};

struct LqOptions {
    double picard_tol = -1.0;
    std::size_t picard_max = 100;
    bool implicit_y = false;
    std::size_t inner_max = 50;
    PicardStart start = PicardStart::direct;
    QvMode qv_mode = QvMode::current;
    const StopRule* stop = nullptr;
};

struct LqResult {
    DiscreteSolution solution;
    ContractionReport report;
};

namespace detail {

enum class SweepKind { direct, picard };

inline DiscreteSolution sweep(const BsdeProblem& prob, const ExpectationEngine& eng, const std::vector<double>& terminal,
                              const DiscreteSolution* iter, SweepKind kind, const LqOptions& opt, ContractionReport& rep) {
    const std::size_t n = eng.steps(), dm = eng.d_m(), dp = eng.d_perp();
    DiscreteSolution out;
    out.d_m = dm;
    out.d_perp = dp;
    out.y.resize(n + 1);
    out.z.resize(n);
    out.perp.resize(n);
    out.y[n] = terminal;
    if (opt.stop)
        for (std::size_t p = 0; p < out.y[n].size(); ++p)
            if (opt.stop->stopped[n][p]) out.y[n][p] = opt.stop->boundary[n][p];
    bool inner_fail = false;
    for (std::size_t i = n; i-- > 0;) {
        Projection pr = eng.project(i, out.y[i + 1]);
        if (pr.ridge_engaged) rep.ridge_engaged = true;
        const double t = eng.t(i), da = eng.dA(i), dt = eng.dt(i), gi = prob.g(t);
        std::vector<double> yi(eng.size(i));
        std::vector<char> fail_flags((yi.size() + 2047) / 2048, 0);
        parallel_chunks(yi.size(), 2048, eng.workers(), [&](std::size_t c, std::size_t b, std::size_t e) {
            PointState ps(eng);
            for (std::size_t p = b; p < e; ++p) {
                if (opt.stop && opt.stop->stopped[i][p]) {
                    yi[p] = opt.stop->boundary[i][p];
                    continue;
                }
                dsl::Env env = ps.env(eng, i, p);
                double q = 0.0;
                for (std::size_t k = 0; k < dp; ++k) q += pr.perp[p * dp + k] * pr.perp[p * dp + k];
                double qv = q * dt;
                if (opt.qv_mode == QvMode::frozen && iter) qv = iter->perp_norm2(i, p) * dt;
                const double base = pr.mean[p] + gi * qv;
                const bool use_iter = kind == SweepKind::picard && iter;
                env.z = use_iter ? iter->z_at(i, p) : std::span<const double>(pr.z.data() + p * dm, dm);
                double y;
                if (kind == SweepKind::direct || opt.implicit_y) {
                    y = use_iter ? iter->y[i][p] : base;
                    bool ok = false;
                    for (std::size_t it = 0; it < opt.inner_max; ++it) {
                        env.y = y;
                        const double next = base + prob.f(env) * da;
                        const bool small = std::abs(next - y) <= 1e-15 * std::max(1.0, std::abs(next));
                        y = next;
                        if (small) {
                            ok = true;
                            break;
                        }
                    }
                    if (!ok) fail_flags[c] = 1;
                } else {
                    env.y = iter ? iter->y[i][p] : 0.0;
                    y = base + prob.f(env) * da;
                }
                if (!std::isfinite(y)) throw NumericalError("non-finite value in backward sweep", i);
                yi[p] = y;
            }
        });
        for (char f : fail_flags) inner_fail = inner_fail || f;
        out.y[i] = std::move(yi);
        out.z[i] = std::move(pr.z);
        out.perp[i] = std::move(pr.perp);
    }
    if (inner_fail) rep.inner_unconverged = true;
    return out;
}

}  // namespace detail

/// Picard iteration of the discrete scheme
///   Y_i = E_i Y_{i+1} + f(t_i, y_i, z_i) dA_i + g(t_i) |perp_i|^2 dt_i
/// with (Z_i, perp_i) from projecting Y_{i+1}. Gaps are measured in the
/// weighted norm with rho from (beta, gamma); iteration stops once the gap is
/// below picard_tol relative to max(1, norm of the iterate).
inline LqResult solve_lq(const BsdeProblem& prob, const ExpectationEngine& eng, LqOptions opt = {}) {
    if (!prob.f || !prob.xi) throw ConfigError("problem needs a generator and a terminal condition");
    if (opt.picard_tol < 0.0) opt.picard_tol = eng.backend() == Backend::lattice ? 1e-10 : 1e-6;
    const double total = eng.driver().clock.total();
    LqResult res;
    ContractionReport& rep = res.report;
    rep.rho = contraction_rho(prob.beta, prob.gamma, total);
    if (0.5 * rep.rho * total > 300.0) {
        rep.rho = 600.0 / std::max(total, 1e-300);
        rep.rho_capped = true;
    }
    const std::vector<double> terminal = terminal_values(prob.xi, eng);
    DiscreteSolution cur = opt.start == PicardStart::direct
                               ? detail::sweep(prob, eng, terminal, nullptr, detail::SweepKind::direct, opt, rep)
                               : zero_solution(eng);
    for (std::size_t it = 1; it <= opt.picard_max; ++it) {
        DiscreteSolution next = detail::sweep(prob, eng, terminal, &cur, detail::SweepKind::picard, opt, rep);
        const double gap = weighted_norm(eng, next, rep.rho, &cur).total();
        rep.gaps.push_back(gap);
        rep.iterations = it;
        cur = std::move(next);
        const double scale = std::max(1.0, weighted_norm(eng, cur, rep.rho).total());
        if (gap <= opt.picard_tol * scale) {
            rep.converged = true;
            break;
        }
    }
    rep.rate = picard_rate(rep.gaps);
    res.solution = std::move(cur);
    return res;
}

}  // namespace qbsde
