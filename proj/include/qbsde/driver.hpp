#pragma once

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "errors.hpp"
#include "parallel.hpp"

namespace qbsde {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class Backend { lattice, lsmc };

inline std::string to_string(Backend b) { return b == Backend::lattice ? "lattice" : "lsmc"; }

inline Backend parse_backend(const std::string& s) {
    if (s == "lattice") return Backend::lattice;
    if (s == "lsmc") return Backend::lsmc;
    throw ConfigError("unknown backend '" + s + "' (expected lattice or lsmc)");
}

/// Strictly increasing time nodes t_0 = 0 < t_1 < ... < t_n.
class TimeGrid {
public:
    TimeGrid() = default;

    explicit TimeGrid(std::vector<double> nodes) : t_(std::move(nodes)) {
        if (t_.size() < 2) throw ConfigError("time grid needs at least one step");
        if (t_.front() != 0.0) throw ConfigError("time grid must start at 0");
        for (std::size_t i = 1; i < t_.size(); ++i)
            if (!(t_[i] > t_[i - 1]) || !std::isfinite(t_[i]))
                throw ConfigError("time grid must be strictly increasing (node " + std::to_string(i) + ")");
    }

    static TimeGrid uniform(double horizon, std::size_t steps) {
        if (steps == 0) throw ConfigError("number of steps must be positive");
        if (!(horizon > 0.0) || !std::isfinite(horizon)) throw ConfigError("horizon must be positive");
        std::vector<double> t(steps + 1);
        for (std::size_t i = 0; i <= steps; ++i) t[i] = horizon * static_cast<double>(i) / static_cast<double>(steps);
        t.back() = horizon;
        return TimeGrid(std::move(t));
    }

    std::size_t steps() const { return t_.size() - 1; }
    double operator[](std::size_t i) const { return t_[i]; }
    double dt(std::size_t i) const { return t_[i + 1] - t_[i]; }
    double horizon() const { return t_.back(); }
    const std::vector<double>& nodes() const { return t_; }

private:
    std::vector<double> t_;
};

enum class ClockKind { identity, arctan, table };

/// Deterministic clock A on the grid nodes. For identity and table clocks the
/// martingale runs on A itself; for the arctan clock it runs in real time and
/// the factor lambda absorbs the time change.
class Clock {
public:
    Clock() = default;

    static Clock identity(const TimeGrid& g) { return Clock(ClockKind::identity, g, g.nodes()); }

    static Clock arctan(const TimeGrid& g, double scale = 1.0) {
        if (!(scale > 0.0)) throw ConfigError("arctan clock scale must be positive");
        std::vector<double> a(g.nodes().size());
        for (std::size_t i = 0; i < a.size(); ++i) a[i] = std::atan(scale * g[i]);
        return Clock(ClockKind::arctan, g, std::move(a));
    }

    static Clock table(const TimeGrid& g, std::vector<double> values) {
        if (values.size() != g.nodes().size())
            throw ConfigError("clock table has " + std::to_string(values.size()) + " values for " +
                              std::to_string(g.nodes().size()) + " grid nodes");
        return Clock(ClockKind::table, g, std::move(values));
    }

    ClockKind kind() const { return kind_; }
    double operator()(std::size_t i) const { return a_[i]; }
    double dA(std::size_t i) const { return a_[i + 1] - a_[i]; }
    /// Total variation of the clock over the horizon.
    double total() const { return a_.back() - a_.front(); }
    const std::vector<double>& values() const { return a_; }

    /// Scalar s_i with lambda_i = s_i * sigma.
    double lambda_scale(std::size_t i) const {
        if (kind_ == ClockKind::table) return 1.0;
        const double da = dA(i);
        return da > 0.0 ? std::sqrt(dt_[i] / da) : 1.0;
    }

private:
    Clock(ClockKind k, const TimeGrid& g, std::vector<double> a) : kind_(k), a_(std::move(a)) {
        dt_.resize(g.steps());
        for (std::size_t i = 0; i < g.steps(); ++i) dt_[i] = g.dt(i);
        for (std::size_t i = 0; i < a_.size(); ++i) {
            if (!std::isfinite(a_[i])) throw ConfigError("clock value at node " + std::to_string(i) + " is not finite");
            if (i > 0 && a_[i] < a_[i - 1])
                throw ConfigError("clock must be nondecreasing (node " + std::to_string(i) + ")");
        }
    }

    ClockKind kind_ = ClockKind::identity;
    std::vector<double> a_;
    std::vector<double> dt_;
};

/// Martingale drivers: M (d_m components, d<M> = lambda^T lambda dA) and an
/// orthogonal Brownian motion of dimension d_perp carrying N.
struct DriverSpec {
    TimeGrid grid;
    Clock clock;
    Matrix sigma;
    std::size_t d_perp = 0;

    std::size_t d_m() const { return static_cast<std::size_t>(sigma.rows()); }
    std::size_t steps() const { return grid.steps(); }
    Matrix lambda(std::size_t i) const { return sigma * clock.lambda_scale(i); }

    void validate() const {
        if (sigma.rows() == 0 || sigma.rows() != sigma.cols()) throw ConfigError("lambda must be a nonempty square matrix");
        if (!sigma.allFinite()) throw ConfigError("lambda has non-finite entries");
        if (clock.values().size() != grid.nodes().size()) throw ConfigError("clock and grid sizes differ");
    }
};

inline DriverSpec make_driver(double horizon, std::size_t steps, std::size_t d_m, std::size_t d_perp,
                              ClockKind kind = ClockKind::identity, double clock_scale = 1.0) {
    DriverSpec d;
    d.grid = TimeGrid::uniform(horizon, steps);
    d.clock = kind == ClockKind::arctan ? Clock::arctan(d.grid, clock_scale) : Clock::identity(d.grid);
    d.sigma = Matrix::Identity(static_cast<Eigen::Index>(d_m), static_cast<Eigen::Index>(d_m));
    d.d_perp = d_perp;
    d.validate();
    return d;
}

/// Simulated increments, stored path-major.
struct PathEnsemble {
    std::size_t n_paths = 0;
    std::size_t steps = 0;
    std::size_t d_m = 0;
    std::size_t d_perp = 0;
    std::vector<double> dM;
    std::vector<double> dWp;

    double dm(std::size_t p, std::size_t i, std::size_t j) const { return dM[(p * steps + i) * d_m + j]; }
    double dwp(std::size_t p, std::size_t i, std::size_t j) const { return dWp[(p * steps + i) * d_perp + j]; }
};

namespace detail {

inline constexpr std::size_t rng_chunk = 1024;

inline std::mt19937_64 chunk_rng(std::uint64_t seed, std::size_t chunk) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(chunk), static_cast<std::uint32_t>(chunk >> 32)};
    return std::mt19937_64(seq);
}

}  // namespace detail

/// Gaussian increments dM_i = sqrt(dA_i) lambda_i^T xi and dW_i = sqrt(dt_i) xi'.
/// Each block of 1024 paths has its own seeded stream, so results do not
/// depend on the worker count.
inline PathEnsemble simulate_paths(const DriverSpec& drv, std::size_t n_paths, std::uint64_t seed,
                                   unsigned workers = 1) {
    drv.validate();
    if (n_paths == 0) throw ConfigError("number of paths must be positive");
    PathEnsemble e;
    e.n_paths = n_paths;
    e.steps = drv.steps();
    e.d_m = drv.d_m();
    e.d_perp = drv.d_perp;
    e.dM.assign(n_paths * e.steps * e.d_m, 0.0);
    e.dWp.assign(n_paths * e.steps * e.d_perp, 0.0);
    std::vector<Matrix> mt(e.steps);
    for (std::size_t i = 0; i < e.steps; ++i) mt[i] = drv.lambda(i).transpose() * std::sqrt(drv.clock.dA(i));
    parallel_chunks(n_paths, detail::rng_chunk, workers, [&](std::size_t c, std::size_t b, std::size_t en) {
        auto rng = detail::chunk_rng(seed, c);
        std::normal_distribution<double> normal;
        Vector xi(static_cast<Eigen::Index>(e.d_m));
        for (std::size_t p = b; p < en; ++p) {
            for (std::size_t i = 0; i < e.steps; ++i) {
                for (std::size_t j = 0; j < e.d_m; ++j) xi[static_cast<Eigen::Index>(j)] = normal(rng);
                const Vector dm = mt[i] * xi;
                for (std::size_t j = 0; j < e.d_m; ++j) e.dM[(p * e.steps + i) * e.d_m + j] = dm[static_cast<Eigen::Index>(j)];
                const double sdt = std::sqrt(drv.grid.dt(i));
                for (std::size_t j = 0; j < e.d_perp; ++j) e.dWp[(p * e.steps + i) * e.d_perp + j] = sdt * normal(rng);
            }
        }
    });
    return e;
}

/// Output of one conditional projection at step i: E_i V, the M-integrand and
/// the orthogonal integrand, one row per point of step i.
struct Projection {
    std::vector<double> mean;
    std::vector<double> z;
    std::vector<double> perp;
    bool ridge_engaged = false;
};

struct Successors {
    std::array<std::size_t, 4> index{};
    std::size_t count = 0;
};

/// Paths through the points of an engine together with their increments.
struct PathSample {
    std::size_t n_paths = 0;
    std::size_t steps = 0;
    std::size_t d_m = 0;
    std::size_t d_perp = 0;
    std::vector<std::size_t> point;
    std::vector<double> dM;
    std::vector<double> dWp;

    std::size_t at(std::size_t p, std::size_t i) const { return point[p * (steps + 1) + i]; }
    double dm(std::size_t p, std::size_t i, std::size_t j) const { return dM[(p * steps + i) * d_m + j]; }
    double dwp(std::size_t p, std::size_t i, std::size_t j) const { return dWp[(p * steps + i) * d_perp + j]; }
};

/// Conditional expectation backend. Step i has size(i) points: lattice nodes
/// or simulated paths.
class ExpectationEngine {
public:
    ExpectationEngine(DriverSpec drv, unsigned workers) : drv_(std::move(drv)), workers_(workers == 0 ? 1 : workers) {
        drv_.validate();
        lambda_.reserve(drv_.steps());
        for (std::size_t i = 0; i < drv_.steps(); ++i) lambda_.push_back(drv_.lambda(i));
    }
    virtual ~ExpectationEngine() = default;
    ExpectationEngine(const ExpectationEngine&) = delete;
    ExpectationEngine& operator=(const ExpectationEngine&) = delete;

    virtual Backend backend() const = 0;
    virtual std::size_t size(std::size_t i) const = 0;
    /// Driver levels (M components, then orthogonal components) at a point.
    virtual void state(std::size_t i, std::size_t p, std::span<double> w, std::span<double> wp) const = 0;
    /// Projects values v given at step i+1 onto step i.
    virtual Projection project(std::size_t i, std::span<const double> v) const = 0;
    virtual std::vector<double> expect(std::size_t i, std::span<const double> v) const = 0;
    /// Marginal probabilities of the points of step i.
    virtual std::vector<double> weights(std::size_t i) const = 0;
    virtual Successors successors(std::size_t i, std::size_t p) const = 0;
    virtual PathSample sample_paths(std::size_t n_paths, std::uint64_t seed) const = 0;

    const DriverSpec& driver() const { return drv_; }
    std::size_t steps() const { return drv_.steps(); }
    std::size_t d_m() const { return drv_.d_m(); }
    std::size_t d_perp() const { return drv_.d_perp; }
    double t(std::size_t i) const { return drv_.grid[i]; }
    double dt(std::size_t i) const { return drv_.grid.dt(i); }
    double A(std::size_t i) const { return drv_.clock(i); }
    double dA(std::size_t i) const { return drv_.clock.dA(i); }
    /// lambda on step i; the last node reuses the last step's factor.
    const Matrix& lambda(std::size_t i) const { return lambda_[std::min(i, lambda_.size() - 1)]; }
    unsigned workers() const { return workers_; }
    void set_workers(unsigned w) { workers_ = w == 0 ? 1 : w; }

    /// |lambda_i z|^2 for one row of integrands.
    double lambda_norm2(std::size_t i, std::span<const double> z) const {
        const Matrix& l = lambda(i);
        double s = 0.0;
        for (Eigen::Index r = 0; r < l.rows(); ++r) {
            double acc = 0.0;
            for (Eigen::Index c = 0; c < l.cols(); ++c) acc += l(r, c) * z[static_cast<std::size_t>(c)];
            s += acc * acc;
        }
        return s;
    }

protected:
    DriverSpec drv_;
    std::vector<Matrix> lambda_;
    unsigned workers_ = 1;
};

/// Recombining two-point lattice, one equal-probability binary move per
/// driver dimension. Exact conditional expectations for the discrete model.
class LatticeEngine final : public ExpectationEngine {
public:
    LatticeEngine(DriverSpec drv, unsigned workers = 1, std::size_t max_steps = 4096)
        : ExpectationEngine(std::move(drv), workers) {
        dims_ = d_m() + d_perp();
        if (dims_ > 2)
            throw UnsupportedConfiguration("lattice backend supports at most two driver dimensions (requested " +
                                           std::to_string(dims_) + "); use lsmc");
        const std::size_t cap = dims_ == 2 ? std::min<std::size_t>(max_steps, 1024) : max_steps;
        if (steps() > cap)
            throw UnsupportedConfiguration("lattice with " + std::to_string(steps()) + " steps exceeds the cap of " +
                                           std::to_string(cap));
        const double da = dA(0), h = dt(0);
        for (std::size_t i = 1; i < steps(); ++i) {
            if (std::abs(dA(i) - da) > 1e-12 * std::max(1.0, da) || std::abs(dt(i) - h) > 1e-12 * std::max(1.0, h) ||
                !lambda(i).isApprox(lambda(0), 1e-12))
                throw UnsupportedConfiguration(
                    "lattice backend needs uniform clock increments and a constant lambda; use lsmc");
        }
        if (!(da > 0.0)) throw UnsupportedConfiguration("lattice backend needs a strictly increasing clock");
        const Matrix& l = lambda(0);
        mt_ = l.transpose() * std::sqrt(da);
        const Matrix c = l.transpose() * l * da;
        pz_ = c.completeOrthogonalDecomposition().pseudoInverse() * mt_;
        sqdt_ = std::sqrt(h);
    }

    Backend backend() const override { return Backend::lattice; }

    std::size_t size(std::size_t i) const override { return dims_ == 1 ? i + 1 : (i + 1) * (i + 1); }

    void state(std::size_t i, std::size_t p, std::span<double> w, std::span<double> wp) const override {
        std::array<double, 2> s{};
        levels(i, p, s);
        const std::size_t dm = d_m();
        for (std::size_t r = 0; r < dm; ++r) {
            double acc = 0.0;
            for (std::size_t c = 0; c < dm; ++c) acc += mt_(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) * s[c];
            w[r] = acc;
        }
        for (std::size_t r = 0; r < d_perp(); ++r) wp[r] = sqdt_ * s[dm + r];
    }

    Projection project(std::size_t i, std::span<const double> v) const override {
        const std::size_t n = size(i), dm = d_m(), dp = d_perp();
        Projection out;
        out.mean.resize(n);
        out.z.resize(n * dm);
        out.perp.resize(n * dp);
        parallel_for(n, workers_, [&](std::size_t p) {
            std::array<double, 2> eps{};
            double mean = 0.0;
            const Successors s = successors(i, p);
            const double pr = 1.0 / static_cast<double>(s.count);
            for (std::size_t c = 0; c < s.count; ++c) {
                const double val = v[s.index[c]];
                mean += val;
                for (std::size_t d = 0; d < dims_; ++d) eps[d] += ((c >> (dims_ - 1 - d)) & 1U ? val : -val);
            }
            out.mean[p] = mean * pr;
            for (std::size_t d = 0; d < dims_; ++d) eps[d] *= pr;
            for (std::size_t r = 0; r < dm; ++r) {
                double acc = 0.0;
                for (std::size_t c = 0; c < dm; ++c) acc += pz_(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) * eps[c];
                out.z[p * dm + r] = acc;
            }
            for (std::size_t r = 0; r < dp; ++r) out.perp[p * dp + r] = eps[dm + r] / sqdt_;
        });
        return out;
    }

    std::vector<double> expect(std::size_t i, std::span<const double> v) const override {
        std::vector<double> out(size(i));
        parallel_for(out.size(), workers_, [&](std::size_t p) {
            const Successors s = successors(i, p);
            double acc = 0.0;
            for (std::size_t c = 0; c < s.count; ++c) acc += v[s.index[c]];
            out[p] = acc / static_cast<double>(s.count);
        });
        return out;
    }

    std::vector<double> weights(std::size_t i) const override {
        std::vector<double> b(i + 1);
        for (std::size_t k = 0; k <= i; ++k)
            b[k] = std::exp(std::lgamma(static_cast<double>(i) + 1.0) - std::lgamma(static_cast<double>(k) + 1.0) -
                            std::lgamma(static_cast<double>(i - k) + 1.0) - static_cast<double>(i) * std::log(2.0));
        if (dims_ == 1) return b;
        std::vector<double> w(size(i));
        for (std::size_t k1 = 0; k1 <= i; ++k1)
            for (std::size_t k2 = 0; k2 <= i; ++k2) w[k1 * (i + 1) + k2] = b[k1] * b[k2];
        return w;
    }

    /// Children in move order: bit (dims-1-d) of the move index is the up/down
    /// flag of dimension d.
    Successors successors(std::size_t i, std::size_t p) const override {
        Successors s;
        if (dims_ == 1) {
            s.count = 2;
            s.index = {p, p + 1, 0, 0};
            return s;
        }
        const std::size_t k1 = p / (i + 1), k2 = p % (i + 1), m = i + 2;
        s.count = 4;
        s.index = {k1 * m + k2, k1 * m + k2 + 1, (k1 + 1) * m + k2, (k1 + 1) * m + k2 + 1};
        return s;
    }

    PathSample sample_paths(std::size_t n_paths, std::uint64_t seed) const override {
        PathSample ps;
        ps.n_paths = n_paths;
        ps.steps = steps();
        ps.d_m = d_m();
        ps.d_perp = d_perp();
        ps.point.assign(n_paths * (ps.steps + 1), 0);
        ps.dM.assign(n_paths * ps.steps * ps.d_m, 0.0);
        ps.dWp.assign(n_paths * ps.steps * ps.d_perp, 0.0);
        const std::size_t moves = std::size_t{1} << dims_;
        parallel_chunks(n_paths, detail::rng_chunk, workers_, [&](std::size_t c, std::size_t b, std::size_t e) {
            auto rng = detail::chunk_rng(seed, c);
            std::uniform_int_distribution<std::size_t> pick(0, moves - 1);
            for (std::size_t path = b; path < e; ++path) {
                std::size_t p = 0;
                for (std::size_t i = 0; i < ps.steps; ++i) {
                    const std::size_t mv = pick(rng);
                    std::array<double, 2> eps{};
                    for (std::size_t d = 0; d < dims_; ++d) eps[d] = (mv >> (dims_ - 1 - d)) & 1U ? 1.0 : -1.0;
                    for (std::size_t r = 0; r < ps.d_m; ++r) {
                        double acc = 0.0;
                        for (std::size_t q = 0; q < ps.d_m; ++q)
                            acc += mt_(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(q)) * eps[q];
                        ps.dM[(path * ps.steps + i) * ps.d_m + r] = acc;
                    }
                    for (std::size_t r = 0; r < ps.d_perp; ++r)
                        ps.dWp[(path * ps.steps + i) * ps.d_perp + r] = sqdt_ * eps[ps.d_m + r];
                    p = successors(i, p).index[mv];
                    ps.point[path * (ps.steps + 1) + i + 1] = p;
                }
            }
        });
        return ps;
    }

private:
    void levels(std::size_t i, std::size_t p, std::array<double, 2>& s) const {
        const double ii = static_cast<double>(i);
        if (dims_ == 1) {
            s[0] = 2.0 * static_cast<double>(p) - ii;
        } else {
            s[0] = 2.0 * static_cast<double>(p / (i + 1)) - ii;
            s[1] = 2.0 * static_cast<double>(p % (i + 1)) - ii;
        }
    }

    std::size_t dims_ = 1;
    Matrix mt_;
    Matrix pz_;
    double sqdt_ = 1.0;
};

/// Regression engine on a simulated ensemble: total-degree polynomial basis in
/// the standardized driver levels, ridge-regularized normal equations, fixed
/// reduction order.
class LsmcEngine final : public ExpectationEngine {
public:
    LsmcEngine(DriverSpec drv, std::size_t n_paths, std::uint64_t seed, unsigned workers = 1, int degree = 3,
               double ridge = 1e-10)
        : ExpectationEngine(std::move(drv), workers), degree_(degree), ridge_(ridge) {
        if (degree < 0) throw ConfigError("basis degree must be nonnegative");
        paths_ = simulate_paths(drv_, n_paths, seed, workers_);
        build();
    }

    LsmcEngine(DriverSpec drv, PathEnsemble paths, unsigned workers = 1, int degree = 3, double ridge = 1e-10)
        : ExpectationEngine(std::move(drv), workers), paths_(std::move(paths)), degree_(degree), ridge_(ridge) {
        if (paths_.steps != steps() || paths_.d_m != d_m() || paths_.d_perp != d_perp())
            throw ConfigError("path ensemble does not match the driver");
        build();
    }

    Backend backend() const override { return Backend::lsmc; }
    std::size_t size(std::size_t) const override { return paths_.n_paths; }
    const PathEnsemble& ensemble() const { return paths_; }
    std::size_t basis_size() const { return exps_.size(); }

    void state(std::size_t i, std::size_t p, std::span<double> w, std::span<double> wp) const override {
        const std::size_t dm = d_m();
        for (std::size_t j = 0; j < dm; ++j) w[j] = level(i, p, j);
        for (std::size_t j = 0; j < d_perp(); ++j) wp[j] = level(i, p, dm + j);
    }

    Projection project(std::size_t i, std::span<const double> v) const override {
        const std::size_t dm = d_m(), dp = d_perp(), cols = 1 + dm + dp, n = paths_.n_paths;
        // Integrands are regressed from the residual V - E_i V, which removes
        // the noise a constant part of V would otherwise contribute.
        const Matrix coef_mean = regress(i, 1, [&](std::size_t p, std::size_t) { return v[p]; });
        const std::vector<double> centered_mean = fitted(i, coef_mean);
        const Matrix coef_int = regress(i, cols - 1, [&](std::size_t p, std::size_t col) {
            const double r = v[p] - centered_mean[p];
            if (col < dm) return r * paths_.dm(p, i, col);
            return r * paths_.dwp(p, i, col - dm);
        });
        Matrix coef(coef_mean.rows(), static_cast<Eigen::Index>(cols));
        coef.col(0) = coef_mean.col(0);
        coef.rightCols(static_cast<Eigen::Index>(cols - 1)) = coef_int;
        const Matrix& l = lambda(i);
        const Matrix zmap = (l.transpose() * l * dA(i)).completeOrthogonalDecomposition().pseudoInverse();
        Projection out;
        out.mean.resize(n);
        out.z.resize(n * dm);
        out.perp.resize(n * dp);
        out.ridge_engaged = degenerate_[i];
        const double inv_dt = 1.0 / dt(i);
        parallel_chunks(n, chunk_, workers_, [&](std::size_t, std::size_t pb, std::size_t pe) {
          std::vector<double> b(exps_.size());
          std::vector<double> fit(cols);
          for (std::size_t p = pb; p < pe; ++p) {
            basis(i, p, b);
            std::fill(fit.begin(), fit.end(), 0.0);
            for (std::size_t c = 0; c < cols; ++c)
                for (std::size_t k = 0; k < b.size(); ++k) fit[c] += b[k] * coef(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(c));
            out.mean[p] = fit[0];
            for (std::size_t r = 0; r < dm; ++r) {
                double acc = 0.0;
                for (std::size_t c = 0; c < dm; ++c) acc += zmap(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) * fit[1 + c];
                out.z[p * dm + r] = acc;
            }
            for (std::size_t r = 0; r < dp; ++r) out.perp[p * dp + r] = fit[1 + dm + r] * inv_dt;
          }
        });
        return out;
    }

    std::vector<double> expect(std::size_t i, std::span<const double> v) const override {
        return fitted(i, regress(i, 1, [&](std::size_t p, std::size_t) { return v[p]; }));
    }

    std::vector<double> weights(std::size_t) const override {
        return std::vector<double>(paths_.n_paths, 1.0 / static_cast<double>(paths_.n_paths));
    }

    Successors successors(std::size_t, std::size_t p) const override {
        Successors s;
        s.count = 1;
        s.index[0] = p;
        return s;
    }

    /// The ensemble itself; the requested count and seed are ignored.
    PathSample sample_paths(std::size_t, std::uint64_t) const override {
        PathSample ps;
        ps.n_paths = paths_.n_paths;
        ps.steps = steps();
        ps.d_m = d_m();
        ps.d_perp = d_perp();
        ps.point.resize(ps.n_paths * (ps.steps + 1));
        for (std::size_t p = 0; p < ps.n_paths; ++p)
            for (std::size_t i = 0; i <= ps.steps; ++i) ps.point[p * (ps.steps + 1) + i] = p;
        ps.dM = paths_.dM;
        ps.dWp = paths_.dWp;
        return ps;
    }

private:
    static constexpr std::size_t chunk_ = 4096;

    double level(std::size_t i, std::size_t p, std::size_t j) const { return level_[(i * paths_.n_paths + p) * dims_ + j]; }

    void basis(std::size_t i, std::size_t p, std::span<double> out) const {
        std::array<double, 8> x{};
        for (std::size_t j = 0; j < dims_; ++j) {
            const double sc = scale_[i * dims_ + j];
            x[j] = sc > 0.0 ? (level(i, p, j) - center_[i * dims_ + j]) / sc : 0.0;
        }
        for (std::size_t k = 0; k < exps_.size(); ++k) {
            double b = 1.0;
            for (std::size_t j = 0; j < dims_; ++j)
                for (int e = 0; e < exps_[k][j]; ++e) b *= x[j];
            out[k] = b;
        }
    }

    std::vector<double> fitted(std::size_t i, const Matrix& coef) const {
        std::vector<double> out(paths_.n_paths);
        parallel_chunks(out.size(), chunk_, workers_, [&](std::size_t, std::size_t pb, std::size_t pe) {
            std::vector<double> b(exps_.size());
            for (std::size_t p = pb; p < pe; ++p) {
                basis(i, p, b);
                double acc = 0.0;
                for (std::size_t k = 0; k < b.size(); ++k) acc += b[k] * coef(static_cast<Eigen::Index>(k), 0);
                out[p] = acc;
            }
        });
        return out;
    }

    template <class Column>
    Matrix regress(std::size_t i, std::size_t cols, Column&& column) const {
        const std::size_t k = exps_.size(), n = paths_.n_paths;
        const std::size_t chunks = (n + chunk_ - 1) / chunk_;
        std::vector<Matrix> partial(chunks, Matrix::Zero(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(cols)));
        parallel_chunks(n, chunk_, workers_, [&](std::size_t c, std::size_t b, std::size_t e) {
            std::vector<double> bv(k);
            Matrix& acc = partial[c];
            for (std::size_t p = b; p < e; ++p) {
                basis(i, p, bv);
                for (std::size_t col = 0; col < cols; ++col) {
                    const double r = column(p, col);
                    for (std::size_t q = 0; q < k; ++q) acc(static_cast<Eigen::Index>(q), static_cast<Eigen::Index>(col)) += bv[q] * r;
                }
            }
        });
        Matrix rhs = Matrix::Zero(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(cols));
        for (const auto& m : partial) rhs += m;
        rhs /= static_cast<double>(n);
        return gram_[i].solve(rhs);
    }

    void build() {
        dims_ = d_m() + d_perp();
        if (dims_ > 8) throw UnsupportedConfiguration("lsmc backend supports at most 8 driver dimensions");
        const std::size_t n = paths_.n_paths, st = steps();
        level_.assign((st + 1) * n * dims_, 0.0);
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t i = 0; i < st; ++i)
                for (std::size_t j = 0; j < dims_; ++j) {
                    const double inc = j < d_m() ? paths_.dm(p, i, j) : paths_.dwp(p, i, j - d_m());
                    level_[((i + 1) * n + p) * dims_ + j] = level_[(i * n + p) * dims_ + j] + inc;
                }
        std::vector<int> e(dims_, 0);
        enumerate(0, degree_, e);
        center_.assign((st + 1) * dims_, 0.0);
        scale_.assign((st + 1) * dims_, 0.0);
        degenerate_.assign(st + 1, false);
        for (std::size_t i = 0; i <= st; ++i)
            for (std::size_t j = 0; j < dims_; ++j) {
                double s = 0.0, s2 = 0.0;
                for (std::size_t p = 0; p < n; ++p) s += level(i, p, j);
                const double mu = s / static_cast<double>(n);
                for (std::size_t p = 0; p < n; ++p) s2 += (level(i, p, j) - mu) * (level(i, p, j) - mu);
                const double sd = std::sqrt(s2 / static_cast<double>(n));
                center_[i * dims_ + j] = mu;
                scale_[i * dims_ + j] = sd > 1e-14 ? sd : 0.0;
                if (sd <= 1e-14 && i > 0) degenerate_[i] = true;
            }
        const std::size_t k = exps_.size();
        gram_.reserve(st);
        for (std::size_t i = 0; i < st; ++i) {
            const std::size_t chunks = (n + chunk_ - 1) / chunk_;
            std::vector<Matrix> partial(chunks, Matrix::Zero(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(k)));
            parallel_chunks(n, chunk_, workers_, [&](std::size_t c, std::size_t b, std::size_t en) {
                std::vector<double> bv(k);
                for (std::size_t p = b; p < en; ++p) {
                    basis(i, p, bv);
                    for (std::size_t r = 0; r < k; ++r)
                        for (std::size_t q = 0; q < k; ++q) partial[c](static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(q)) += bv[r] * bv[q];
                }
            });
            Matrix g = Matrix::Zero(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(k));
            for (const auto& m : partial) g += m;
            g /= static_cast<double>(n);
            for (std::size_t r = 1; r < k; ++r) g(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(r)) += ridge_;
            gram_.emplace_back(g);
            const Vector d = gram_.back().vectorD();
            if (d.minCoeff() < 1e-9 * d.maxCoeff() && i > 0) degenerate_[i] = true;
        }
    }

    void enumerate(std::size_t j, int left, std::vector<int>& e) {
        if (j == dims_) {
            exps_.push_back(e);
            return;
        }
        for (int a = 0; a <= left; ++a) {
            e[j] = a;
            enumerate(j + 1, left - a, e);
        }
        e[j] = 0;
    }

    PathEnsemble paths_;
    int degree_ = 3;
    double ridge_ = 1e-10;
    std::size_t dims_ = 1;
    std::vector<double> level_;
    std::vector<std::vector<int>> exps_;
    std::vector<double> center_;
    std::vector<double> scale_;
    std::vector<bool> degenerate_;
    std::vector<Eigen::LDLT<Matrix>> gram_;
};

struct EngineOptions {
    Backend backend = Backend::lattice;
    std::size_t n_paths = 20000;
    std::uint64_t seed = 12345;
    unsigned workers = 1;
    int basis_degree = 3;
    double ridge = 1e-10;
    std::size_t max_lattice_steps = 4096;
};

inline std::unique_ptr<ExpectationEngine> make_engine(DriverSpec drv, const EngineOptions& opt) {
    if (opt.backend == Backend::lattice)
        return std::make_unique<LatticeEngine>(std::move(drv), opt.workers, opt.max_lattice_steps);
    return std::make_unique<LsmcEngine>(std::move(drv), opt.n_paths, opt.seed, opt.workers, opt.basis_degree, opt.ridge);
}

}  // namespace qbsde
