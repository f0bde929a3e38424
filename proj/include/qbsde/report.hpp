#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "estimates.hpp"
#include "lqsolver.hpp"
#include "problem.hpp"
#include "qsolver.hpp"
#include "structure.hpp"
#include "verify.hpp"

namespace qbsde {

using Json = nlohmann::ordered_json;

/// Fixed 17-significant-digit rendering so identical values give identical bytes.
inline std::string format_double(double v) {
    if (!std::isfinite(v)) return "null";
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

namespace detail {

inline void dump_json(const Json& j, std::string& out, int indent) {
    const std::string pad(static_cast<std::size_t>(indent + 2), ' ');
    const std::string close(static_cast<std::size_t>(indent), ' ');
    switch (j.type()) {
        case Json::value_t::object: {
            if (j.empty()) {
                out += "{}";
                return;
            }
            out += "{\n";
            bool first = true;
            for (auto it = j.begin(); it != j.end(); ++it) {
                if (!first) out += ",\n";
                first = false;
                out += pad + Json(it.key()).dump() + ": ";
                dump_json(it.value(), out, indent + 2);
            }
            out += "\n" + close + "}";
            return;
        }
        case Json::value_t::array: {
            if (j.empty()) {
                out += "[]";
                return;
            }
            bool scalar = true;
            for (const auto& v : j) scalar = scalar && !v.is_structured();
            if (scalar) {
                out += "[";
                for (std::size_t i = 0; i < j.size(); ++i) {
                    if (i) out += ", ";
                    dump_json(j[i], out, indent);
                }
                out += "]";
                return;
            }
            out += "[\n";
            for (std::size_t i = 0; i < j.size(); ++i) {
                if (i) out += ",\n";
                out += pad;
                dump_json(j[i], out, indent + 2);
            }
            out += "\n" + close + "]";
            return;
        }
        case Json::value_t::number_float: out += format_double(j.get<double>()); return;
        default: out += j.dump(); return;
    }
}

}  // namespace detail

inline std::string to_json_text(const Json& j) {
    std::string out;
    detail::dump_json(j, out, 0);
    out += "\n";
    return out;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << text;
}

inline void write_json(const std::filesystem::path& path, const Json& j) { write_text(path, to_json_text(j)); }

inline Json json_number(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }

inline Json json_array(const std::vector<double>& v) {
    Json a = Json::array();
    for (double x : v) a.push_back(json_number(x));
    return a;
}

inline std::string verdict_text(bool pass) { return pass ? "PASS" : "FAIL"; }

/// One named check in the common report schema.
struct CheckRecord {
    std::string functional;
    double bound = 0.0;
    double measured = 0.0;
    double slack = 0.0;
    std::string verdict;
    Json witness;

    bool pass() const { return verdict == "PASS"; }
};

/// Check with slack = bound - measured, passing when measured <= bound + tol.
inline CheckRecord upper_check(std::string name, double bound, double measured, double tol = 0.0) {
    CheckRecord c;
    c.functional = std::move(name);
    c.bound = bound;
    c.measured = measured;
    c.slack = bound - measured;
    c.verdict = verdict_text(std::isfinite(measured) && measured <= bound + tol);
    return c;
}

/// Check with slack = measured - bound, passing when measured >= bound - tol.
inline CheckRecord lower_check(std::string name, double bound, double measured, double tol = 0.0) {
    CheckRecord c = upper_check(std::move(name), bound, measured);
    c.slack = measured - bound;
    c.verdict = verdict_text(std::isfinite(measured) && measured >= bound - tol);
    return c;
}

inline CheckRecord verdict_check(std::string name, std::string verdict, double bound = 0.0, double measured = 0.0) {
    CheckRecord c;
    c.functional = std::move(name);
    c.bound = bound;
    c.measured = measured;
    c.slack = bound - measured;
    c.verdict = std::move(verdict);
    return c;
}

inline CheckRecord from_functional(const FunctionalCheck& f) {
    CheckRecord c;
    c.functional = f.functional;
    c.bound = f.bound;
    c.measured = f.measured;
    c.slack = f.slack;
    c.verdict = verdict_text(f.pass);
    return c;
}

inline Json to_json(const CheckRecord& c, const std::string& config_hash) {
    Json j;
    j["functional"] = c.functional;
    j["bound"] = json_number(c.bound);
    j["measured"] = json_number(c.measured);
    j["slack"] = json_number(c.slack);
    j["verdict"] = c.verdict;
    j["config_hash"] = config_hash;
    if (!c.witness.is_null()) j["witness"] = c.witness;
    return j;
}

inline Json to_json(const RateFit& r) {
    Json j;
    j["rate"] = json_number(r.rate);
    j["defined"] = r.defined;
    j["contraction_refuted"] = r.contraction_refuted;
    j["used"] = r.used;
    return j;
}

inline Json to_json(const ContractionReport& r) {
    Json j;
    j["iterations"] = r.iterations;
    j["converged"] = r.converged;
    j["rho"] = json_number(r.rho);
    j["rho_capped"] = r.rho_capped;
    j["inner_unconverged"] = r.inner_unconverged;
    j["ridge_engaged"] = r.ridge_engaged;
    j["gaps"] = json_array(r.gaps);
    j["rate"] = to_json(r.rate);
    return j;
}

inline Json to_json(const SmallnessVerdict& v) {
    Json j;
    j["xi_sup"] = json_number(v.xi_sup);
    j["f0_sup"] = json_number(v.f0_sup);
    j["g_sup"] = json_number(v.g_sup);
    j["lhs"] = json_number(v.lhs);
    j["rhs"] = json_number(v.rhs);
    j["holds"] = v.holds;
    j["g_ok"] = v.g_ok;
    return j;
}

inline Json to_json(const MonotoneLadder& lad) {
    Json j;
    j["verdict"] = lad.verdict();
    j["n_list"] = json_array(lad.n_list);
    j["k_list"] = json_array(lad.k_list);
    j["tolerance"] = json_number(lad.tolerance);
    j["converged"] = lad.converged;
    Json rungs = Json::array();
    for (const auto& r : lad.rungs) {
        Json x;
        x["n"] = json_number(r.n);
        x["k"] = json_number(r.k);
        x["y0"] = json_number(r.y0);
        x["iterations"] = r.report.iterations;
        x["converged"] = r.report.converged;
        rungs.push_back(x);
    }
    j["rungs"] = rungs;
    Json checks = Json::array();
    for (const auto& c : lad.checks) {
        Json x;
        x["index"] = std::string(1, c.index);
        x["lower"] = c.lower;
        x["upper"] = c.upper;
        x["violation"] = json_number(c.violation);
        x["step"] = c.step;
        x["point"] = c.point;
        x["pass"] = c.pass;
        checks.push_back(x);
    }
    j["order_checks"] = checks;
    j["sup_gaps"] = json_array(lad.sup_gaps);
    j["m2_gaps"] = json_array(lad.m2_gaps);
    return j;
}

inline Json to_json(const LimitReport& l) {
    Json j;
    j["sup_gap"] = json_number(l.sup_gap);
    j["m2_gap"] = json_number(l.m2_gap);
    j["trend"] = json_number(l.trend);
    j["residual"] = json_number(l.residual);
    return j;
}

inline Json to_json(const PastedSolution& u) {
    Json j;
    j["verdict"] = u.verdict();
    j["paste_tol"] = json_number(u.paste_tol);
    j["overlap_gaps"] = json_array(u.overlap_gaps);
    Json levels = Json::array();
    for (const auto& l : u.levels) {
        Json x;
        x["m"] = json_number(l.m);
        x["sigma_step"] = l.sigma_step;
        x["domain_nodes"] = l.domain_nodes;
        x["bound_violation"] = json_number(l.bound_violation);
        x["level_excess"] = json_number(l.level_excess);
        x["iterations"] = l.report.iterations;
        x["converged"] = l.report.converged;
        levels.push_back(x);
    }
    j["levels"] = levels;
    j["ladder"] = to_json(u.ladder);
    j["bound_clamped"] = u.x.clamped;
    return j;
}

inline Json to_json(const StabilityRun& s) {
    Json j;
    j["p_list"] = json_array(s.p_list);
    j["data_bound"] = json_array(s.data_bound);
    j["data_finite"] = s.data_finite;
    j["g_bound_ok"] = s.g_bound_ok;
    j["metric_monotone"] = s.metric_monotone;
    j["m2_monotone"] = s.m2_monotone;
    j["pass"] = s.pass;
    Json rows = Json::array();
    for (const auto& r : s.rows) {
        Json x;
        x["n"] = json_number(r.n);
        x["exp_metric"] = json_array(r.exp_metric);
        x["exp_metric_se"] = json_array(r.exp_metric_se);
        x["m2"] = json_number(r.m2);
        x["sup_gap"] = json_number(r.sup_gap);
        rows.push_back(x);
    }
    j["rows"] = rows;
    return j;
}

inline Json to_json(const Witness& w) {
    Json j;
    j["inequality"] = w.inequality;
    j["t"] = json_number(w.t);
    j["y"] = json_number(w.y);
    j["y2"] = json_number(w.y2);
    j["z"] = json_array(w.z);
    j["z2"] = json_array(w.z2);
    j["w"] = json_array(w.w);
    j["wp"] = json_array(w.wp);
    j["lhs"] = json_number(w.lhs);
    j["rhs"] = json_number(w.rhs);
    return j;
}

inline Json to_json(const HypothesisWitness& w) {
    Json j;
    j["what"] = w.what;
    j["t"] = json_number(w.t);
    j["y"] = json_number(w.y);
    j["z"] = json_array(w.z);
    j["w"] = json_array(w.w);
    j["wp"] = json_array(w.wp);
    j["point"] = w.point;
    j["lhs"] = json_number(w.lhs);
    j["rhs"] = json_number(w.rhs);
    return j;
}

inline Json to_json(const StructureCert& c) {
    Json j;
    j["class"] = to_string(c.cls);
    j["alpha"] = c.alpha ? dsl::format(c.alpha) : std::string("0");
    j["beta"] = json_number(c.beta);
    j["gamma"] = json_number(c.gamma);
    Json phi;
    phi["kind"] = c.phi.kind == Phi::Kind::polynomial ? "poly" : "exp";
    phi["coef"] = json_number(c.phi.coef);
    phi["param"] = json_number(c.phi.param);
    j["phi"] = phi;
    Json box;
    box["t"] = json_array({c.box.t_lo, c.box.t_hi});
    box["y"] = json_array({c.box.y_lo, c.box.y_hi});
    box["z"] = json_array({c.box.z_lo, c.box.z_hi});
    box["w"] = json_array({c.box.w_lo, c.box.w_hi});
    box["d"] = c.box.d;
    j["box"] = box;
    j["samples"] = c.samples;
    j["seed"] = c.seed;
    Json margins = Json::object();
    for (const auto& [k, v] : c.margins) margins[k] = json_number(v);
    j["margins"] = margins;
    j["margin"] = json_number(c.margin);
    j["verdict"] = verdict_text(c.pass);
    j["witness"] = c.witness ? to_json(*c.witness) : Json(nullptr);
    return j;
}

inline Json to_json(const ComparisonReport& r) {
    Json j;
    j["mode"] = to_string(r.mode);
    j["verdict"] = r.verdict;
    j["violation"] = json_number(r.violation);
    j["tolerance"] = json_number(r.tolerance);
    j["step"] = r.step;
    j["point"] = r.point;
    j["converged"] = r.converged;
    if (r.hypothesis) j["hypothesis_witness"] = to_json(*r.hypothesis);
    if (r.refined_violation) {
        j["refined_violation"] = json_number(*r.refined_violation);
        j["triage"] = r.triage;
    }
    return j;
}

inline Json to_json(const MeasureChangeReport& r) {
    Json j;
    j["q_tilde"] = json_number(r.q_tilde);
    j["gamma"] = json_number(r.gamma);
    j["q0"] = json_number(r.q0);
    j["n_paths"] = r.n_paths;
    j["martingale_mean"] = json_number(r.martingale_mean);
    j["martingale_se"] = json_number(r.martingale_se);
    j["telescoping_error"] = json_number(r.telescoping_error);
    Json rows = Json::array();
    for (const auto& x : r.rows) {
        Json o;
        o["eta"] = json_number(x.eta);
        o["q"] = json_number(x.q);
        o["lambda_sup"] = json_number(x.lambda_sup);
        o["lambda_sup_step"] = x.lambda_sup_step;
        rows.push_back(o);
    }
    j["rows"] = rows;
    j["verdict"] = verdict_text(r.pass);
    return j;
}

/// Per-step summary: weighted moments of Y, rms of Z and of the orthogonal
/// integrand, and the expected cumulative quadratic variation of N.
inline std::string solution_csv(const DiscreteSolution& s, const ExpectationEngine& eng) {
    std::string out = "step,t,A,y_mean,y_min,y_max,z_rms,nperp_rms,qvN_cum\n";
    const std::size_t n = eng.steps();
    double qv = 0.0;
    for (std::size_t i = 0; i <= n; ++i) {
        const std::vector<double> w = eng.weights(i);
        double mean = 0.0, lo = std::numeric_limits<double>::infinity(), hi = -lo;
        for (std::size_t p = 0; p < s.y[i].size(); ++p) {
            mean += w[p] * s.y[i][p];
            lo = std::min(lo, s.y[i][p]);
            hi = std::max(hi, s.y[i][p]);
        }
        out += std::to_string(i) + "," + format_double(eng.t(i)) + "," + format_double(eng.A(i)) + "," + format_double(mean) +
               "," + format_double(lo) + "," + format_double(hi) + ",";
        if (i < n) {
            double z2 = 0.0, p2 = 0.0;
            for (std::size_t p = 0; p < s.y[i].size(); ++p) {
                for (double z : s.z_at(i, p)) z2 += w[p] * z * z;
                p2 += w[p] * s.perp_norm2(i, p);
            }
            out += format_double(std::sqrt(z2)) + "," + format_double(std::sqrt(p2)) + "," + format_double(qv) + "\n";
            qv += p2 * eng.dt(i);
        } else {
            out += ",," + format_double(qv) + "\n";
        }
    }
    return out;
}

/// One row per (path, step): increments of M then of the orthogonal motion.
inline std::string ensemble_csv(const PathEnsemble& e) {
    std::string out = "path_id,step";
    for (std::size_t j = 0; j < e.d_m; ++j) out += ",dM" + std::to_string(j + 1);
    for (std::size_t j = 0; j < e.d_perp; ++j) out += ",dWp" + std::to_string(j + 1);
    out += "\n";
    for (std::size_t p = 0; p < e.n_paths; ++p)
        for (std::size_t i = 0; i < e.steps; ++i) {
            out += std::to_string(p) + "," + std::to_string(i);
            for (std::size_t j = 0; j < e.d_m; ++j) out += "," + format_double(e.dm(p, i, j));
            for (std::size_t j = 0; j < e.d_perp; ++j) out += "," + format_double(e.dwp(p, i, j));
            out += "\n";
        }
    return out;
}

}  // namespace qbsde
