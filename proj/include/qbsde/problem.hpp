#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <algorithm>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "driver.hpp"
#include "errors.hpp"
#include "gendsl.hpp"
#include "structure.hpp"

namespace qbsde {

using Generator = std::function<double(const dsl::Env&)>;
using TimeFn = std::function<double(double)>;
using Terminal = std::function<double(std::span<const double> w, std::span<const double> wp)>;

/// Data (f, g, xi) plus the structural constants the estimates use.
/// The expression sources are kept when the problem came from text; derived
/// problems (envelopes, scalings) carry callables only.
struct BsdeProblem {
    Generator f;
    TimeFn g = [](double) { return 0.0; };
    Terminal xi;
    TimeFn alpha = [](double) { return 0.0; };
    double beta = 0.0;
    double gamma = 0.0;
    std::optional<dsl::Expr> f_expr;
    std::optional<dsl::Expr> g_expr;
    std::optional<dsl::Expr> xi_expr;
    std::optional<dsl::Expr> alpha_expr;
    std::optional<StructureCert> cert;
};

inline Generator generator_from(const dsl::Expr& e) {
    return [p = dsl::Program(e)](const dsl::Env& env) { return p(env); };
}

inline TimeFn time_function_from(const dsl::Expr& e, const char* what) {
    const dsl::Usage u = dsl::usage(e);
    if (u.y || u.z || u.random()) throw ConfigError(std::string(what) + " must depend on t only");
    return [p = dsl::Program(e)](double t) {
        dsl::Env env;
        env.t = t;
        env.a = t;
        return p(env);
    };
}

inline Terminal terminal_from(const dsl::Expr& e, double horizon) {
    const dsl::Usage u = dsl::usage(e);
    if (u.y || u.z) throw ConfigError("terminal condition may depend on t, w and wp only");
    return [p = dsl::Program(e), horizon](std::span<const double> w, std::span<const double> wp) {
        dsl::Env env;
        env.t = horizon;
        env.a = horizon;
        env.w = w;
        env.wp = wp;
        return p(env);
    };
}

/// Builds a problem from expression text.
inline BsdeProblem make_problem(const std::string& f, const std::string& g, const std::string& xi, double horizon,
                                double gamma = 0.0, double beta = 0.0, const std::string& alpha = "0") {
    BsdeProblem p;
    p.f_expr = dsl::parse(f);
    p.g_expr = dsl::parse(g);
    p.xi_expr = dsl::parse(xi);
    p.alpha_expr = dsl::parse(alpha);
    p.f = generator_from(*p.f_expr);
    p.g = time_function_from(*p.g_expr, "g");
    p.xi = terminal_from(*p.xi_expr, horizon);
    p.alpha = time_function_from(*p.alpha_expr, "alpha");
    p.gamma = gamma;
    p.beta = beta;
    return p;
}

/// Discrete solution on the points of an engine: y on steps 0..n, integrands
/// on steps 0..n-1 stored point-major.
struct DiscreteSolution {
    std::vector<std::vector<double>> y;
    std::vector<std::vector<double>> z;
    std::vector<std::vector<double>> perp;
    std::size_t d_m = 0;
    std::size_t d_perp = 0;

    std::size_t steps() const { return y.empty() ? 0 : y.size() - 1; }
    std::span<const double> z_at(std::size_t i, std::size_t p) const { return {z[i].data() + p * d_m, d_m}; }
    std::span<const double> perp_at(std::size_t i, std::size_t p) const { return {perp[i].data() + p * d_perp, d_perp}; }
    double perp_norm2(std::size_t i, std::size_t p) const {
        double s = 0.0;
        for (std::size_t k = 0; k < d_perp; ++k) s += perp[i][p * d_perp + k] * perp[i][p * d_perp + k];
        return s;
    }
};

inline DiscreteSolution zero_solution(const ExpectationEngine& eng) {
    DiscreteSolution s;
    s.d_m = eng.d_m();
    s.d_perp = eng.d_perp();
    const std::size_t n = eng.steps();
    s.y.resize(n + 1);
    s.z.resize(n);
    s.perp.resize(n);
    for (std::size_t i = 0; i <= n; ++i) s.y[i].assign(eng.size(i), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        s.z[i].assign(eng.size(i) * s.d_m, 0.0);
        s.perp[i].assign(eng.size(i) * s.d_perp, 0.0);
    }
    return s;
}

/// Holds the driver levels of one point for building evaluation environments.
struct PointState {
    std::vector<double> w;
    std::vector<double> wp;

    explicit PointState(const ExpectationEngine& eng) : w(eng.d_m()), wp(eng.d_perp()) {}

    dsl::Env env(const ExpectationEngine& eng, std::size_t i, std::size_t p) {
        eng.state(i, p, w, wp);
        dsl::Env e;
        e.t = eng.t(i);
        e.a = eng.A(i);
        e.w = w;
        e.wp = wp;
        e.lambda = &eng.lambda(i);
        return e;
    }
};

inline std::vector<double> terminal_values(const Terminal& xi, const ExpectationEngine& eng) {
    const std::size_t n = eng.steps();
    std::vector<double> out(eng.size(n));
    parallel_chunks(out.size(), 2048, eng.workers(), [&](std::size_t, std::size_t b, std::size_t e) {
        PointState ps(eng);
        for (std::size_t p = b; p < e; ++p) {
            eng.state(n, p, ps.w, ps.wp);
            const double v = xi(ps.w, ps.wp);
            if (!std::isfinite(v)) throw NumericalError("terminal value is not finite", n);
            out[p] = v;
        }
    });
    return out;
}

/// Probability-weighted mean of point values at step i.
inline double weighted_mean(const ExpectationEngine& eng, std::size_t i, std::span<const double> v) {
    const auto w = eng.weights(i);
    double s = 0.0;
    for (std::size_t p = 0; p < v.size(); ++p) s += w[p] * v[p];
    return s;
}

/// Backward conditional sums S_i = c_i + E_i S_{i+1}, S_n = 0.
template <class Increment>
std::vector<std::vector<double>> conditional_sums(const ExpectationEngine& eng, Increment&& inc) {
    const std::size_t n = eng.steps();
    std::vector<std::vector<double>> s(n + 1);
    s[n].assign(eng.size(n), 0.0);
    for (std::size_t i = n; i-- > 0;) {
        s[i] = eng.expect(i, s[i + 1]);
        for (std::size_t p = 0; p < s[i].size(); ++p) s[i][p] += inc(i, p);
    }
    return s;
}

/// L_i = ln E_i[exp(L_{i+1})] computed backward from L_n = terminal down to
/// step `stop`. The lattice uses an exact per-node log-sum-exp; regression
/// engines shift by the step maximum and flag values the regression cannot
/// represent (underflow or a nonpositive fit), which are clamped.
struct LogExpectation {
    std::vector<std::vector<double>> values;
    bool clamped = false;
};

inline LogExpectation log_expectation(const ExpectationEngine& eng, std::vector<double> terminal, std::size_t stop = 0) {
    const std::size_t n = eng.steps();
    LogExpectation out;
    out.values.resize(n + 1);
    out.values[n] = std::move(terminal);
    for (double v : out.values[n])
        if (!std::isfinite(v)) throw NumericalError("exponent is not finite; the data need rescaling", n);
    for (std::size_t i = n; i-- > stop;) {
        const auto& next = out.values[i + 1];
        std::vector<double> cur(eng.size(i));
        if (eng.backend() == Backend::lattice) {
            parallel_for(cur.size(), eng.workers(), [&](std::size_t p) {
                const Successors s = eng.successors(i, p);
                double m = -std::numeric_limits<double>::infinity();
                for (std::size_t c = 0; c < s.count; ++c) m = std::max(m, next[s.index[c]]);
                double acc = 0.0;
                for (std::size_t c = 0; c < s.count; ++c) acc += std::exp(next[s.index[c]] - m);
                cur[p] = m + std::log(acc / static_cast<double>(s.count));
            });
        } else {
            const double m = *std::max_element(next.begin(), next.end());
            std::vector<double> e(next.size());
            for (std::size_t q = 0; q < e.size(); ++q) e[q] = std::exp(next[q] - m);
            const std::vector<double> ev = eng.expect(i, e);
            double floor = std::numeric_limits<double>::infinity();
            for (double v : ev)
                if (v > 0.0) floor = std::min(floor, v);
            if (!std::isfinite(floor)) floor = std::numeric_limits<double>::min();
            for (std::size_t p = 0; p < cur.size(); ++p) {
                double v = ev[p];
                if (!(v > 0.0)) {
                    v = floor;
                    out.clamped = true;
                }
                cur[p] = m + std::log(v);
            }
        }
        out.values[i] = std::move(cur);
    }
    return out;
}

/// Discrete M^2 distance E[sum |lambda dZ|^2 dA + |d perp|^2 dt] between two solutions.
inline double m2_distance(const ExpectationEngine& eng, const DiscreteSolution& a, const DiscreteSolution& b) {
    const std::size_t dm = a.d_m, dp = a.d_perp;
    std::vector<double> dz(dm);
    const auto s = conditional_sums(eng, [&](std::size_t i, std::size_t p) {
        for (std::size_t k = 0; k < dm; ++k) dz[k] = a.z[i][p * dm + k] - b.z[i][p * dm + k];
        double q = 0.0;
        for (std::size_t k = 0; k < dp; ++k) {
            const double d = a.perp[i][p * dp + k] - b.perp[i][p * dp + k];
            q += d * d;
        }
        return eng.lambda_norm2(i, dz) * eng.dA(i) + q * eng.dt(i);
    });
    return weighted_mean(eng, 0, s[0]);
}

inline double sup_gap(const DiscreteSolution& a, const DiscreteSolution& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.y.size(); ++i)
        for (std::size_t p = 0; p < a.y[i].size(); ++p) m = std::max(m, std::abs(a.y[i][p] - b.y[i][p]));
    return m;
}

}  // namespace qbsde
