#pragma once

#include <cmath>
#include <vector>

#include "driver.hpp"
#include "problem.hpp"

namespace qbsde {

/// r_i = Y_i - (E_i Y_{i+1} + f(t_i, Y_i, Z_i) dA_i + g(t_i) |perp_i|^2 dt_i)
/// with the integrands stored in the solution.
struct ResidualReport {
    std::vector<std::vector<double>> r;
    double max_abs = 0.0;
    std::size_t worst_step = 0;
    std::size_t worst_point = 0;
};

inline ResidualReport residual(const BsdeProblem& prob, const DiscreteSolution& sol, const ExpectationEngine& eng) {
    const std::size_t n = eng.steps();
    ResidualReport out;
    out.r.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::vector<double> ey = eng.expect(i, sol.y[i + 1]);
        const double da = eng.dA(i), dt = eng.dt(i), gi = prob.g(eng.t(i));
        std::vector<double> ri(eng.size(i));
        parallel_chunks(ri.size(), 2048, eng.workers(), [&](std::size_t, std::size_t b, std::size_t e) {
            PointState ps(eng);
            for (std::size_t p = b; p < e; ++p) {
                dsl::Env env = ps.env(eng, i, p);
                env.y = sol.y[i][p];
                env.z = sol.z_at(i, p);
                ri[p] = sol.y[i][p] - (ey[p] + prob.f(env) * da + gi * sol.perp_norm2(i, p) * dt);
            }
        });
        for (std::size_t p = 0; p < ri.size(); ++p)
            if (std::abs(ri[p]) > out.max_abs) {
                out.max_abs = std::abs(ri[p]);
                out.worst_step = i;
                out.worst_point = p;
            }
        out.r[i] = std::move(ri);
    }
    return out;
}

}  // namespace qbsde
