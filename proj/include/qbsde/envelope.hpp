#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <vector>

#include "driver.hpp"
#include "errors.hpp"
#include "gendsl.hpp"
#include "problem.hpp"

namespace qbsde {

enum class EnvelopeMode { automatic, closed_form, grid };

inline EnvelopeMode parse_envelope_mode(const std::string& s) {
    if (s == "auto" || s == "automatic") return EnvelopeMode::automatic;
    if (s == "closed" || s == "closed-form" || s == "closed_form") return EnvelopeMode::closed_form;
    if (s == "grid") return EnvelopeMode::grid;
    throw ConfigError("unknown envelope mode '" + s + "' (expected auto, closed-form or grid)");
}

struct EnvelopeOptions {
    EnvelopeMode mode = EnvelopeMode::automatic;
    /// Half-width of the search box around the query point (grid mode).
    double box = 10.0;
    std::size_t grid_points = 41;
    std::size_t golden_iterations = 20;
    std::size_t polish_passes = 8;
    /// The positive part is switched off for t > sigma_n, the negative part for t > sigma_k.
    double sigma_n = std::numeric_limits<double>::infinity();
    double sigma_k = std::numeric_limits<double>::infinity();
};

namespace detail {

inline double positive_root(double a, double c, double q) {
    // root of a + c s + q s^2 = 0 for a < 0, c, q >= 0
    if (q > 0.0) return (-c + std::sqrt(c * c - 4.0 * q * a)) / (2.0 * q);
    if (c > 0.0) return -a / c;
    return std::numeric_limits<double>::infinity();
}

/// Envelope of max(h(|u|), 0) with h(s) = a + c s + q s^2, c, q >= 0.
inline double radial_up(double a, double c, double q, double r, double budget) {
    const double lo = a >= 0.0 ? 0.0 : positive_root(a, c, q);
    if (!std::isfinite(lo) || r <= lo) return std::max(a + c * r + q * r * r, 0.0);
    double s;
    if (!std::isfinite(budget)) s = r;
    else if (q > 0.0) s = std::clamp((budget - c) / (2.0 * q), lo, r);
    else s = c <= budget ? r : lo;
    return std::max(a + c * s + q * s * s, 0.0) + (s < r ? budget * (r - s) : 0.0);
}

/// Envelope of max(-h(|u|), 0) with h as above; the function is nonincreasing in |u|.
inline double radial_down(double a, double c, double q, double r, double budget) {
    if (a >= 0.0) return 0.0;
    const double r0 = positive_root(a, c, q);
    if (r >= r0) return 0.0;
    const double v = -(a + c * r + q * r * r);
    return std::isfinite(budget) && std::isfinite(r0) ? std::min(v, budget * (r0 - r)) : v;
}

}  // namespace detail

/// Lipschitz inf-convolution envelope
///   f^{n,k} = 1{t <= sigma_n} inf{f+(y', z') + n|y - y'| + n|lambda(z - z')|}
///           - 1{t <= sigma_k} inf{f-(y', z') + k|y - y'| + k|lambda(z - z')|}.
/// Affine generators and sign-definite radial ones a + c|lambda z| + q|lambda z|^2
/// use closed forms; everything else is minimized numerically.
class LipschitzEnvelope {
public:
    LipschitzEnvelope(dsl::Expr f, double n, double k, EnvelopeOptions opt = {})
        : f_(std::move(f)), prog_(f_), n_(n), k_(k), opt_(opt), use_(dsl::usage(f_)) {
        if (!(n >= 1.0) || !(k >= 1.0)) throw ConfigError("envelope parameters n and k must be at least 1");
        if (opt_.grid_points < 3) throw ConfigError("envelope grid needs at least 3 points per coordinate");
        if (!(opt_.box > 0.0)) throw ConfigError("envelope search box must be positive");
        if (opt_.mode != EnvelopeMode::grid) classify();
        if (opt_.mode == EnvelopeMode::closed_form && kind_ == Kind::none)
            throw ConfigError("generator '" + dsl::format(f_) + "' has no closed-form envelope; use grid mode");
        if (opt_.mode == EnvelopeMode::grid) kind_ = Kind::none;
    }

    double n() const { return n_; }
    double k() const { return k_; }
    bool closed_form() const { return kind_ != Kind::none; }
    const dsl::Expr& base() const { return f_; }

    double operator()(const dsl::Env& env) const {
        const bool pos_on = env.t <= opt_.sigma_n, neg_on = env.t <= opt_.sigma_k;
        if (!pos_on && !neg_on) return 0.0;
        switch (kind_) {
            case Kind::affine: return affine_value(env, pos_on, neg_on);
            case Kind::radial: return radial_value(env, pos_on, neg_on);
            case Kind::none: break;
        }
        double v = 0.0;
        if (pos_on) v += grid_part(env, 1.0, n_);
        if (neg_on) v -= grid_part(env, -1.0, k_);
        return v;
    }

private:
    enum class Kind { none, affine, radial };

    void classify() {
        const auto form = dsl::affine_form(f_);
        if (!form) return;
        form_ = *form;
        if (form_.constant) const_prog_ = dsl::Program(form_.constant);
        if (form_.linear_only()) {
            kind_ = Kind::affine;
            zc_nonzero_ = std::any_of(form_.z.begin(), form_.z.end(), [](double v) { return v != 0.0; });
            double s = 0.0;
            for (double v : form_.lz) s += v * v;
            lc_norm_ = std::sqrt(s);
            return;
        }
        if (form_.radial_only() && ((form_.normz >= 0.0 && form_.norm2z >= 0.0) || (form_.normz <= 0.0 && form_.norm2z <= 0.0)))
            kind_ = Kind::radial;
    }

    double constant_at(const dsl::Env& env) const {
        if (!form_.constant) return 0.0;
        dsl::Env e;
        e.t = env.t;
        e.a = env.a;
        return const_prog_(e);
    }

    /// Dual norm max(|b|, |lambda^{-T} zc + lc|) of the linear part.
    double dual_norm(const dsl::Env& env) const {
        double lz = lc_norm_;
        if (zc_nonzero_) {
            const std::size_t d = env.z.size();
            Vector zc = Vector::Zero(static_cast<Eigen::Index>(d)), lc = Vector::Zero(static_cast<Eigen::Index>(d));
            for (std::size_t i = 0; i < std::min(d, form_.z.size()); ++i) zc[static_cast<Eigen::Index>(i)] = form_.z[i];
            for (std::size_t i = 0; i < std::min(d, form_.lz.size()); ++i) lc[static_cast<Eigen::Index>(i)] = form_.lz[i];
            const Vector ell = env.lambda ? Vector(env.lambda->transpose().fullPivLu().solve(zc)) : zc;
            lz = (ell + lc).norm();
        }
        return std::max(std::abs(form_.y), lz);
    }

    double affine_value(const dsl::Env& env, bool pos_on, bool neg_on) const {
        const double l = prog_(env);
        const double dn = dual_norm(env);
        auto factor = [&](double budget) { return dn > budget ? budget / dn : 1.0; };
        double v = 0.0;
        if (pos_on && l > 0.0) v += factor(n_) * l;
        if (neg_on && l < 0.0) v += factor(k_) * l;
        return v;
    }

    double radial_value(const dsl::Env& env, bool pos_on, bool neg_on) const {
        const double a = constant_at(env);
        const double r = std::sqrt(dsl::detail::lambda_norm2(env));
        const double c = form_.normz, q = form_.norm2z;
        double pos, neg;
        if (c >= 0.0 && q >= 0.0) {
            pos = pos_on ? detail::radial_up(a, c, q, r, n_) : 0.0;
            neg = neg_on ? detail::radial_down(a, c, q, r, k_) : 0.0;
        } else {
            pos = pos_on ? detail::radial_down(-a, -c, -q, r, n_) : 0.0;
            neg = neg_on ? detail::radial_up(-a, -c, -q, r, k_) : 0.0;
        }
        return pos - neg;
    }

    /// Numerical inf-convolution of max(sign*f, 0). The sum penalty splits
    /// into an outer search over y' and an inner search over u' = lambda z',
    /// done in polar form u' = u + s w so the penalty is linear in s. Each
    /// one-dimensional search is a coarse grid followed by golden-section
    /// polishing on shrinking brackets.
    double grid_part(const dsl::Env& env, double sign, double budget) const {
        const std::size_t d = env.z.size();
        auto part = [&](double y, std::span<const double> z) {
            dsl::Env e = env;
            e.y = y;
            e.z = z;
            try {
                return std::max(sign * prog_(e), 0.0);
            } catch (const dsl::EvalError&) {
                return std::numeric_limits<double>::infinity();
            }
        };
        const double v0 = part(env.y, env.z);
        if (!std::isfinite(v0)) throw NumericalError("generator is not defined at the envelope query point");
        if (v0 == 0.0 || !std::isfinite(budget)) return v0;
        const bool sy = use_.y, sz = use_.z && d > 0;
        if (!sy && !sz) return v0;
        if (sz && d > 3) throw UnsupportedConfiguration("grid-mode envelopes support at most three z components");

        std::vector<double> u0(d);
        Matrix linv;
        if (sz) {
            const Matrix l = env.lambda ? *env.lambda : Matrix::Identity(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
            linv = l.inverse();
            for (std::size_t r = 0; r < d; ++r) u0[r] = dsl::detail::lambda_component(env, r);
        }

        double box = opt_.box;
        for (int attempt = 0; attempt < 2; ++attempt, box *= 2.0) {
            const double radius = std::min(box, v0 / budget);
            const bool limited = box < v0 / budget;
            bool on_boundary = false;
            std::vector<double> zbuf(d), dir(d);

            // inf over u' of part(y', u') + budget |u - u'|
            auto inner = [&](double y) {
                if (!sz) return part(y, env.z);
                auto ray = [&](double s) {
                    for (std::size_t r = 0; r < d; ++r) {
                        double acc = 0.0;
                        for (std::size_t c = 0; c < d; ++c)
                            acc += linv(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) * (u0[c] + s * dir[c]);
                        zbuf[r] = acc;
                    }
                    return part(y, zbuf) + budget * s;
                };
                auto along = [&](double s_lo) {
                    const auto [s, v] = minimize_1d(ray, s_lo, radius);
                    if (limited && s >= radius * (1.0 - 1e-9) && v < part(y, env.z)) on_boundary = true;
                    return std::pair{s, v};
                };
                double best = part(y, env.z);
                if (d == 1) {
                    for (double w : {1.0, -1.0}) {
                        dir[0] = w;
                        best = std::min(best, along(0.0).second);
                    }
                    return best;
                }
                // directions on the sphere: angle grid, then polish the best angle
                auto at_angle = [&](double th, double ph) {
                    dir[0] = std::cos(th) * std::sin(ph);
                    dir[1] = std::sin(th) * std::sin(ph);
                    if (d == 3) dir[2] = std::cos(ph);
                    return along(0.0).second;
                };
                const std::size_t na = 32, np = d == 3 ? 9 : 1;
                double bt = 0.0, bp = 0.5 * std::acos(-1.0);
                for (std::size_t a = 0; a < na; ++a)
                    for (std::size_t b = 0; b < np; ++b) {
                        const double th = 2.0 * std::acos(-1.0) * static_cast<double>(a) / static_cast<double>(na);
                        const double ph = d == 3 ? std::acos(-1.0) * (static_cast<double>(b) + 0.5) / static_cast<double>(np) : bp;
                        const double v = at_angle(th, ph);
                        if (v < best) {
                            best = v;
                            bt = th;
                            bp = ph;
                        }
                    }
                double width = std::acos(-1.0) / static_cast<double>(na) * 2.0;
                for (std::size_t pass = 0; pass < 3; ++pass, width *= 0.1) {
                    const double th = golden([&](double x) { return at_angle(x, bp); }, bt - width, bt + width);
                    const double v = at_angle(th, bp);
                    if (v < best) {
                        best = v;
                        bt = th;
                    }
                    if (d == 3) {
                        const double ph = golden([&](double x) { return at_angle(bt, x); }, bp - width, bp + width);
                        const double w = at_angle(bt, ph);
                        if (w < best) {
                            best = w;
                            bp = ph;
                        }
                    }
                }
                return best;
            };

            double best = inner(env.y);
            if (sy) {
                for (double w : {1.0, -1.0}) {
                    const auto [s, v] = minimize_1d([&](double s) { return inner(env.y + w * s) + budget * s; }, 0.0, radius);
                    if (limited && s >= radius * (1.0 - 1e-9) && v < v0) on_boundary = true;
                    best = std::min(best, v);
                }
            }
            if (!on_boundary) return best;
        }
        throw NumericalError("envelope minimizer lies on the boundary of the widened search box; enlarge [regularization] box");
    }

    template <class F>
    double golden(F&& fn, double lo, double hi) const {
        const double r = 0.5 * (std::sqrt(5.0) - 1.0);
        double a = lo, b = hi;
        double c = b - r * (b - a), d = a + r * (b - a);
        double fc = fn(c), fd = fn(d);
        for (std::size_t it = 0; it < opt_.golden_iterations; ++it) {
            if (fc <= fd) {
                b = d;
                d = c;
                fd = fc;
                c = b - r * (b - a);
                fc = fn(c);
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + r * (b - a);
                fd = fn(d);
            }
        }
        return fc <= fd ? c : d;
    }

    template <class F>
    std::pair<double, double> minimize_1d(F&& fn, double lo, double hi) const {
        const std::size_t g = opt_.grid_points;
        const double cell = (hi - lo) / static_cast<double>(g - 1);
        double bs = lo, bv = fn(lo);
        for (std::size_t j = 1; j < g; ++j) {
            const double s = j + 1 == g ? hi : lo + cell * static_cast<double>(j);
            const double v = fn(s);
            if (v < bv) {
                bv = v;
                bs = s;
            }
        }
        double width = cell;
        for (std::size_t pass = 0; pass < opt_.polish_passes; ++pass) {
            const double s = golden(fn, std::max(lo, bs - width), std::min(hi, bs + width));
            const double v = fn(s);
            if (v < bv) {
                bv = v;
                bs = s;
            }
            width *= 0.05;
            if (width <= 1e-13 * std::max(1.0, std::abs(bs))) break;
        }
        return {bs, bv};
    }

    dsl::Expr f_;
    dsl::Program prog_;
    double n_, k_;
    EnvelopeOptions opt_;
    dsl::Usage use_;
    Kind kind_ = Kind::none;
    dsl::AffineForm form_;
    dsl::Program const_prog_;
    bool zc_nonzero_ = false;
    double lc_norm_ = 0.0;
};

inline Generator lipschitz_envelope(const dsl::Expr& f, double n, double k, const EnvelopeOptions& opt = {}) {
    auto env = std::make_shared<const LipschitzEnvelope>(f, n, k, opt);
    return [env](const dsl::Env& e) { return (*env)(e); };
}

/// xi^+ ^ n - xi^- ^ k.
inline double truncate(double x, double n, double k) { return x >= 0.0 ? std::min(x, n) : -std::min(-x, k); }

inline std::vector<double> truncate_terminal(std::vector<double> xi, double n, double k) {
    for (double& v : xi) v = truncate(v, n, k);
    return xi;
}

inline Terminal truncate_terminal(Terminal xi, double n, double k) {
    return [xi = std::move(xi), n, k](std::span<const double> w, std::span<const double> wp) { return truncate(xi(w, wp), n, k); };
}

/// Problem with generator f^{n,k} and terminal value xi^{n,k}. The structural
/// constants of the original problem are kept.
inline BsdeProblem regularized_problem(const BsdeProblem& prob, double n, double k, const EnvelopeOptions& opt = {}) {
    if (!prob.f_expr) throw ConfigError("regularization needs the generator as an expression");
    BsdeProblem out = prob;
    out.f = lipschitz_envelope(*prob.f_expr, n, k, opt);
    out.xi = truncate_terminal(prob.xi, n, k);
    out.f_expr.reset();
    out.xi_expr.reset();
    return out;
}

/// theta f(t, y/theta, z/theta) as an expression.
inline dsl::Expr scale_expression(const dsl::Expr& e, double theta) {
    if (theta == 1.0) return e;
    std::function<dsl::Expr(const dsl::Expr&)> go = [&](const dsl::Expr& x) -> dsl::Expr {
        using dsl::Op;
        using dsl::Var;
        if (x->op == Op::var) {
            switch (x->var) {
                case Var::y:
                case Var::z:
                case Var::normz: return dsl::binary(Op::div, x, dsl::number(theta));
                case Var::norm2z: return dsl::binary(Op::div, x, dsl::number(theta * theta));
                default: return x;
            }
        }
        if (x->op == Op::call && x->fn == dsl::Fn::dotz) return dsl::binary(Op::div, x, dsl::number(theta));
        if (x->args.empty()) return x;
        std::vector<dsl::Expr> args;
        for (const auto& a : x->args) args.push_back(go(a));
        auto node = std::make_shared<dsl::Node>(*x);
        node->args = std::move(args);
        return node;
    };
    return dsl::binary(dsl::Op::mul, dsl::number(theta), go(e));
}

/// f^theta(t, y, z) = theta f(t, y/theta, z/theta), g/theta, theta xi.
/// (Y, Z, N) solves the original problem iff theta (Y, Z, N) solves the scaled one.
inline BsdeProblem theta_scale(const BsdeProblem& prob, double theta) {
    if (!(theta > 0.0) || !std::isfinite(theta)) throw ConfigError("theta must be positive");
    if (theta == 1.0) return prob;
    BsdeProblem out = prob;
    out.f = [f = prob.f, theta](const dsl::Env& env) {
        std::array<double, 8> buf{};
        std::vector<double> big;
        std::span<double> z;
        if (env.z.size() <= buf.size()) {
            z = std::span<double>(buf.data(), env.z.size());
        } else {
            big.resize(env.z.size());
            z = big;
        }
        for (std::size_t i = 0; i < z.size(); ++i) z[i] = env.z[i] / theta;
        dsl::Env e = env;
        e.y = env.y / theta;
        e.z = z;
        return theta * f(e);
    };
    out.g = [g = prob.g, theta](double t) { return g(t) / theta; };
    out.xi = [xi = prob.xi, theta](std::span<const double> w, std::span<const double> wp) { return theta * xi(w, wp); };
    out.alpha = [a = prob.alpha, theta](double t) { return theta * a(t); };
    if (prob.f_expr) out.f_expr = scale_expression(*prob.f_expr, theta);
    if (prob.g_expr) out.g_expr = dsl::binary(dsl::Op::div, *prob.g_expr, dsl::number(theta));
    if (prob.xi_expr) out.xi_expr = dsl::binary(dsl::Op::mul, dsl::number(theta), *prob.xi_expr);
    if (prob.alpha_expr) out.alpha_expr = dsl::binary(dsl::Op::mul, dsl::number(theta), *prob.alpha_expr);
    return out;
}

/// |alpha|_i = sum_{j < i} |alpha(t_j)| dA_j on every grid node.
inline std::vector<double> alpha_variation(const BsdeProblem& prob, const ExpectationEngine& eng) {
    std::vector<double> v(eng.steps() + 1, 0.0);
    for (std::size_t i = 0; i < eng.steps(); ++i) v[i + 1] = v[i] + std::abs(prob.alpha(eng.t(i))) * eng.dA(i);
    return v;
}

/// X_i = (1/gamma) ln E_i[exp(gamma e^{beta A_T}(|xi| + |alpha|_T))].
struct LocalizationBound {
    std::vector<std::vector<double>> x;
    bool clamped = false;
};

inline LocalizationBound localization_bound(const BsdeProblem& prob, const ExpectationEngine& eng) {
    if (!(prob.gamma > 0.0)) throw ConfigError("localization needs gamma > 0");
    const std::size_t n = eng.steps();
    const double scale = prob.gamma * std::exp(prob.beta * eng.driver().clock.total());
    const double av = alpha_variation(prob, eng)[n];
    std::vector<double> ex = terminal_values(prob.xi, eng);
    for (double& v : ex) v = scale * (std::abs(v) + av);
    LogExpectation le = log_expectation(eng, std::move(ex));
    LocalizationBound out;
    out.clamped = le.clamped;
    out.x = std::move(le.values);
    for (auto& row : out.x)
        for (double& v : row) v /= prob.gamma;
    return out;
}

/// Stopping data for one pair of levels (m, n).
struct LocalizationPlan {
    double m = 0.0;
    double n = 0.0;
    std::vector<std::vector<double>> x;
    std::vector<double> alpha_var;
    /// |alpha|_i + X_i >= m at the node.
    std::vector<std::vector<char>> hit;
    /// Nodes reached while not yet stopped, i.e. {step <= tau_m}.
    std::vector<std::vector<char>> domain;
    std::size_t sigma_step = 0;
    double sigma_time = 0.0;
    PathSample paths;
    std::vector<std::size_t> tau;
    std::vector<std::size_t> sigma;
    bool clamped = false;
};

inline bool reaches(double value, double level) { return value >= level - 1e-12 * std::max(1.0, std::abs(level)); }

inline LocalizationPlan localization_plan(const LocalizationBound& xb, const std::vector<double>& alpha_var,
                                          const ExpectationEngine& eng, double m, double n,
                                          const PathSample* sample = nullptr) {
    if (!(m > 0.0) || !(n > 0.0)) throw ConfigError("localization levels must be positive");
    const std::size_t steps = eng.steps();
    LocalizationPlan plan;
    plan.m = m;
    plan.n = n;
    plan.x = xb.x;
    plan.clamped = xb.clamped;
    plan.alpha_var = alpha_var;
    plan.hit.resize(steps + 1);
    plan.domain.resize(steps + 1);
    for (std::size_t i = 0; i <= steps; ++i) {
        plan.hit[i].assign(eng.size(i), 0);
        for (std::size_t p = 0; p < eng.size(i); ++p) plan.hit[i][p] = reaches(alpha_var[i] + xb.x[i][p], m) ? 1 : 0;
        plan.domain[i].assign(eng.size(i), 0);
    }
    std::fill(plan.domain[0].begin(), plan.domain[0].end(), 1);
    for (std::size_t i = 0; i < steps; ++i)
        for (std::size_t p = 0; p < eng.size(i); ++p) {
            if (!plan.domain[i][p] || plan.hit[i][p]) continue;
            const Successors s = eng.successors(i, p);
            for (std::size_t c = 0; c < s.count; ++c) plan.domain[i + 1][s.index[c]] = 1;
        }
    plan.sigma_step = steps;
    for (std::size_t i = 0; i <= steps; ++i)
        if (reaches(alpha_var[i], n)) {
            plan.sigma_step = i;
            break;
        }
    plan.sigma_time = eng.t(plan.sigma_step);
    if (sample) {
        plan.paths = *sample;
        plan.tau.assign(sample->n_paths, steps);
        plan.sigma.assign(sample->n_paths, plan.sigma_step);
        for (std::size_t p = 0; p < sample->n_paths; ++p)
            for (std::size_t i = 0; i <= steps; ++i)
                if (plan.hit[i][sample->at(p, i)]) {
                    plan.tau[p] = i;
                    break;
                }
    }
    return plan;
}

/// tau_m = first step with |alpha| + X >= m (else the horizon) and
/// sigma_n = first step with |alpha| >= n, per sampled path.
inline LocalizationPlan localization_times(const BsdeProblem& prob, const ExpectationEngine& eng, double m, double n,
                                           std::size_t n_paths = 1000, std::uint64_t seed = 1) {
    const LocalizationBound xb = localization_bound(prob, eng);
    const PathSample ps = eng.sample_paths(n_paths, seed);
    return localization_plan(xb, alpha_variation(prob, eng), eng, m, n, &ps);
}

}  // namespace qbsde
