#pragma once

#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "config.hpp"
#include "estimates.hpp"
#include "lqsolver.hpp"
#include "qsolver.hpp"
#include "report.hpp"
#include "residual.hpp"
#include "structure.hpp"
#include "verify.hpp"

namespace qbsde::cli {

enum ExitCode : int { exit_pass = 0, exit_verdict = 1, exit_config = 2 };

/// Command-line flags that override config keys before hashing.
struct Overrides {
    std::string backend;
    std::string steps;
    std::optional<unsigned> workers;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> paths;
};

inline void apply_overrides(ConfigFile& cf, const Overrides& o, bool steps_are_list) {
    if (!o.backend.empty()) cf.set("discretization", "backend", o.backend);
    if (!o.steps.empty()) cf.set(steps_are_list ? "converge" : "discretization", "steps", o.steps);
    if (o.workers) cf.set("discretization", "workers", std::to_string(*o.workers));
    if (o.seed) cf.set("discretization", "seed", std::to_string(*o.seed));
    if (o.paths) cf.set("discretization", "paths", std::to_string(*o.paths));
}

/// Output directory: flag, then config, then QBSDE_OUT_DIR, then "out".
inline std::filesystem::path output_directory(const std::string& flag, const RunConfig& rc) {
    if (!flag.empty()) return flag;
    if (!rc.output.directory.empty()) return rc.output.directory;
    if (const char* env = std::getenv("QBSDE_OUT_DIR"); env && *env) return env;
    return "out";
}

inline std::unique_ptr<ExpectationEngine> build_engine(const RunConfig& rc, std::size_t steps) {
    EngineOptions eo;
    eo.backend = rc.disc.backend;
    eo.n_paths = rc.disc.paths;
    eo.seed = rc.disc.seed;
    eo.workers = rc.disc.workers;
    eo.basis_degree = rc.disc.basis;
    eo.ridge = rc.disc.ridge;
    return make_engine(build_driver(rc.driver, steps), eo);
}

inline LqOptions lq_options(const RunConfig& rc) {
    LqOptions o;
    o.picard_tol = rc.disc.picard_tol;
    o.picard_max = rc.disc.picard_max;
    o.implicit_y = rc.disc.implicit_y;
    o.qv_mode = rc.disc.qv_mode;
    return o;
}

inline QuadraticOptions quadratic_options(const RunConfig& rc) {
    QuadraticOptions o;
    o.lq = lq_options(rc);
    o.envelope = rc.reg.envelope;
    o.truncate = rc.reg.truncate;
    return o;
}

/// Solver selection: explicit name, or localization when m levels are given,
/// the monotone ladder when envelope levels are given, and Picard otherwise.
inline std::string resolve_method(const RunConfig& rc, const std::string& requested) {
    if (requested != "auto") return requested;
    if (!rc.loc.m_list.empty()) return "unbounded";
    if (!rc.reg.n_list.empty()) return "quadratic";
    return "lq";
}

struct Solved {
    std::string method;
    DiscreteSolution solution;
    ContractionReport report;
    std::optional<MonotoneLadder> ladder;
    std::optional<PastedSolution> pasted;
};

inline Ladder config_ladder(const RunConfig& rc) {
    if (rc.reg.n_list.empty()) throw ConfigError("[regularization] n_list is required by the quadratic and unbounded solvers");
    return Ladder{rc.reg.n_list, rc.reg.k_list};
}

inline Solved solve_with(const RunConfig& rc, const BsdeProblem& prob, const ExpectationEngine& eng, const std::string& requested) {
    Solved s;
    s.method = resolve_method(rc, requested);
    if (s.method == "lq") {
        LqResult r = solve_lq(prob, eng, lq_options(rc));
        s.solution = std::move(r.solution);
        s.report = std::move(r.report);
    } else if (s.method == "colehopf") {
        s.solution = solve_colehopf(prob, eng);
        s.report.converged = true;
    } else if (s.method == "quadratic") {
        QuadraticResult q = solve_quadratic(prob, eng, config_ladder(rc), quadratic_options(rc));
        s.solution = std::move(q.solution);
        s.report = q.ladder.rungs[q.ladder.diagonal.back()].report;
        s.report.converged = q.ladder.converged;
        s.ladder = std::move(q.ladder);
    } else {
        if (rc.loc.m_list.empty()) throw ConfigError("[localization] m_list is required by the unbounded solver");
        UnboundedOptions o;
        o.quad = quadratic_options(rc);
        o.sigma_level = rc.loc.sigma_level;
        o.paste_tol = rc.loc.paste_tol;
        o.seed = rc.disc.seed;
        PastedSolution u = solve_unbounded(prob, eng, rc.loc.m_list, config_ladder(rc), o);
        s.solution = u.glued;
        s.report = u.ladder.rungs.empty() ? ContractionReport{} : u.ladder.rungs[u.ladder.diagonal.back()].report;
        s.report.converged = u.ladder.converged;
        s.pasted = std::move(u);
    }
    return s;
}

inline double initial_value(const DiscreteSolution& s, const ExpectationEngine& eng) { return weighted_mean(eng, 0, s.y[0]); }

inline std::string fmt_short(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", v);
    return buf;
}

/// Shared state of one command invocation.
class Session {
public:
    Session(RunConfig rc, std::filesystem::path out, std::string command, std::ostream& log)
        : rc_(std::move(rc)), out_(std::move(out)), command_(std::move(command)), log_(log) {
        std::filesystem::create_directories(out_);
    }

    const RunConfig& rc() const { return rc_; }
    const std::string& hash() const { return hash_cache(); }
    std::ostream& log() { return log_; }

    Json header(const std::string& artifact) const {
        Json j;
        j["artifact"] = artifact;
        j["command"] = command_;
        j["config_hash"] = hash();
        j["backend"] = to_string(rc_.disc.backend);
        j["steps"] = rc_.disc.steps;
        j["seed"] = rc_.disc.seed;
        return j;
    }

    void emit_json(const std::string& name, const Json& j) {
        if (!wants("json")) return;
        write_json(out_ / name, j);
        artifacts_.push_back(name);
    }

    void emit_text(const std::string& name, const std::string& text, const char* format = "csv") {
        if (!wants(format)) return;
        write_text(out_ / name, text);
        artifacts_.push_back(name);
    }

    void add(const std::string& group, CheckRecord c) {
        if (!group.empty()) c.functional = group + "." + c.functional;
        log_ << "  " << c.verdict << "  " << c.functional << "  measured=" << fmt_short(c.measured) << " bound=" << fmt_short(c.bound)
             << "\n";
        checks_.push_back(std::move(c));
    }

    void detail(const std::string& key, Json j) { details_[key] = std::move(j); }

    bool all_pass() const {
        for (const auto& c : checks_)
            if (!c.pass()) return false;
        return true;
    }

    /// Writes manifest.json and returns the exit code it implies.
    int finish(const std::string& suite = "") {
        Json m = header("manifest");
        if (!suite.empty()) m["suite"] = suite;
        Json inputs;
        inputs["config_hash"] = hash();
        inputs["canonical_config"] = rc_.file.canonical();
        m["inputs"] = inputs;
        Json list = Json::array();
        for (const auto& c : checks_) list.push_back(to_json(c, hash()));
        m["checks"] = list;
        m["details"] = details_.is_null() ? Json::object() : details_;
        m["verdict"] = verdict_text(all_pass());
        Json arts = Json::array();
        for (const auto& a : artifacts_) arts.push_back(a);
        m["artifacts"] = arts;
        write_json(out_ / "manifest.json", m);
        if (all_pass()) {
            log_ << "PASS: " << checks_.size() << " checks, artifacts in " << out_.string() << "\n";
            return exit_pass;
        }
        log_ << "FAIL: verdict failure, see " << (out_ / "manifest.json").string() << "\n";
        return exit_verdict;
    }

private:
    bool wants(const std::string& format) const {
        const auto& f = rc_.output.formats;
        return std::find(f.begin(), f.end(), format) != f.end();
    }
    const std::string& hash_cache() const {
        if (hash_.empty()) hash_ = rc_.hash();
        return hash_;
    }

    RunConfig rc_;
    std::filesystem::path out_;
    std::string command_;
    std::ostream& log_;
    mutable std::string hash_;
    std::vector<CheckRecord> checks_;
    std::vector<std::string> artifacts_;
    Json details_;
};

inline BsdeProblem primary_problem(const RunConfig& rc) { return build_problem(rc.problem, rc.driver, &rc.certify); }

inline Json witness_node(std::size_t step, std::size_t point) {
    Json w;
    w["step"] = step;
    w["point"] = point;
    return w;
}

inline void record_solve(Session& s, const Solved& sol, const BsdeProblem& prob, const ExpectationEngine& eng, const std::string& group) {
    s.add(group, verdict_check("picard_converged", verdict_text(sol.report.converged), 1.0, sol.report.converged ? 1.0 : 0.0));
    if (sol.ladder) {
        CheckRecord c = verdict_check("ladder_order", sol.ladder->consistent ? "PASS" : "FAIL", sol.ladder->tolerance);
        double worst = 0.0;
        for (const auto& o : sol.ladder->checks) worst = std::max(worst, o.violation);
        c.measured = worst;
        c.slack = c.bound - worst;
        s.add(group, c);
    }
    if (sol.pasted) {
        double worst = 0.0;
        for (double g : sol.pasted->overlap_gaps) worst = std::max(worst, g);
        CheckRecord c = upper_check("pasting_overlap", sol.pasted->paste_tol, worst);
        c.verdict = sol.pasted->verdict();
        s.add(group, c);
    }
    (void)prob;
    (void)eng;
}

// ---- solve ----

inline int cmd_solve(Session& s) {
    const RunConfig& rc = s.rc();
    const auto eng = build_engine(rc, rc.disc.steps);
    const BsdeProblem prob = primary_problem(rc);
    const Solved sol = solve_with(rc, prob, *eng, rc.disc.solver);

    s.emit_text("solution.csv", solution_csv(sol.solution, *eng));
    Json c = s.header("contraction");
    c["method"] = sol.method;
    c["y0"] = json_number(initial_value(sol.solution, *eng));
    c["smallness"] = to_json(check_smallness(prob, *eng));
    c["report"] = to_json(sol.report);
    c["verdict"] = verdict_text(sol.report.converged);
    s.emit_json("contraction.json", c);
    if (sol.ladder) {
        Json l = s.header("ladder");
        l["ladder"] = to_json(*sol.ladder);
        if (sol.ladder->diagonal.size() >= 2) l["limit"] = to_json(monotone_limit(*sol.ladder, prob, *eng));
        s.emit_json("ladder.json", l);
    }
    if (sol.pasted) {
        Json p = s.header("pasting");
        p["pasting"] = to_json(*sol.pasted);
        s.emit_json("pasting.json", p);
    }
    if (const auto* lsmc = dynamic_cast<const LsmcEngine*>(eng.get())) s.emit_text("ensemble.csv", ensemble_csv(lsmc->ensemble()), "ensemble");
    record_solve(s, sol, prob, *eng, "solve");
    return s.finish();
}

// ---- verify suites ----

inline void suite_comparison(Session& s, const ExpectationEngine& eng) {
    const RunConfig& rc = s.rc();
    if (!rc.problem_prime) throw ConfigError("the comparison suite needs a [problem_prime] section");
    const BsdeProblem p1 = primary_problem(rc);
    const BsdeProblem p2 = build_problem(*rc.problem_prime, rc.driver);
    ComparisonOptions opt;
    opt.lq = lq_options(rc);
    opt.hypothesis_samples = rc.comparison.samples;
    Json details = Json::array();
    for (const auto& name : rc.comparison.modes) {
        const ComparisonMode mode = parse_comparison_mode(name);
        const ComparisonReport rep = check_comparison(p1, p2, eng, mode, opt);
        CheckRecord c = upper_check("comparison_" + name, rep.tolerance, rep.violation);
        c.verdict = rep.verdict;
        c.witness = rep.hypothesis ? to_json(*rep.hypothesis) : witness_node(rep.step, rep.point);
        s.add("comparison", c);
        details.push_back(to_json(rep));
        if (rep.verdict == "INVALID_HYPOTHESIS") continue;
        const DiscreteSolution s1 = solve_lq(p1, eng, opt.lq).solution;
        const DiscreteSolution s2 = solve_lq(p2, eng, opt.lq).solution;
        if (mode == ComparisonMode::lipschitz) {
            const LinearizationTrace tr = linearization_trace(s1, s2, p1, eng);
            s.add("comparison", upper_check("linearization_beta", p1.beta, tr.beta_sup, 1e-6));
            s.add("comparison", verdict_check("linearization_gamma_finite", verdict_text(tr.gamma_finite), 0.0, tr.gamma_bmo));
        } else {
            for (double th : rc.comparison.theta_list) {
                const ThetaTrace tr = theta_trace(p1, p2, s1, s2, th, eng, 1e-8, 2000, rc.disc.seed);
                CheckRecord t = upper_check("theta_trace_" + fmt_short(th), tr.tol, tr.worst_deficit);
                t.verdict = verdict_text(tr.pass());
                t.witness = Json{{"path", tr.worst_path}, {"step", tr.worst_step}, {"rho_sup", json_number(tr.rho_sup)},
                                 {"d_min", json_number(tr.d_min)}};
                s.add("comparison", t);
            }
            s.detail("theta_sweep", Json{{"theta", json_array(rc.comparison.theta_list)},
                                         {"slack", json_array(theta_sweep(s1, s2, rc.comparison.theta_list))}});
        }
    }
    s.detail("comparison", details);
}

inline void suite_contraction(Session& s, const ExpectationEngine& eng) {
    const RunConfig& rc = s.rc();
    const BsdeProblem p = primary_problem(rc);
    const SmallnessVerdict sm = check_smallness(p, eng);
    CheckRecord small = upper_check("smallness", sm.rhs, sm.lhs);
    small.verdict = verdict_text(sm.holds && sm.g_ok);
    s.add("contraction", small);
    LqOptions o = lq_options(rc);
    o.start = PicardStart::zero;
    const LqResult r = solve_lq(p, eng, o);
    s.add("contraction", verdict_check("converged", verdict_text(r.report.converged), 1.0, r.report.converged ? 1.0 : 0.0));
    s.add("contraction", lower_check("iterations", 5.0, static_cast<double>(r.report.iterations)));
    CheckRecord rate = upper_check("picard_rate", 0.9, r.report.rate.rate);
    if (!r.report.rate.defined) rate.verdict = "FAIL";
    s.add("contraction", rate);
    Json d = to_json(r.report);
    d["smallness"] = to_json(sm);
    s.detail("contraction", d);
}

inline double max_step(const ExpectationEngine& eng) {
    double h = 0.0;
    for (std::size_t i = 0; i < eng.steps(); ++i) h = std::max(h, eng.dt(i));
    return h;
}

inline void suite_apriori(Session& s, const ExpectationEngine& eng) {
    const RunConfig& rc = s.rc();
    const BsdeProblem p = primary_problem(rc);
    if (!(p.gamma > 0.0)) throw ConfigError("the apriori suite needs gamma > 0");
    const Solved sol = solve_with(rc, p, eng, rc.disc.solver);
    const AprioriReport a = apriori_bounded(p, eng, sol.solution);
    for (const auto& c : a.checks()) s.add("apriori", from_functional(c));
    const auto h = growth_process(p, eng, sol.solution);
    const SubmartingaleResult sub = submartingale_test(h, eng, std::max(1e-8, max_step(eng)));
    CheckRecord c = upper_check("growth_submartingale", sub.tol, sub.worst_deficit);
    c.verdict = verdict_text(sub.pass);
    c.witness = witness_node(sub.step, sub.point);
    s.add("apriori", c);
}

inline void suite_bound(Session& s, const ExpectationEngine& eng) {
    const RunConfig& rc = s.rc();
    const BsdeProblem p = primary_problem(rc);
    if (!(p.gamma > 0.0)) throw ConfigError("the bound suite needs gamma > 0");
    const Solved sol = solve_with(rc, p, eng, rc.disc.solver);
    const ConditionalBound x = conditional_bound(p, eng);
    const BoundViolation bv = bound_violation(sol.solution, x.x);
    CheckRecord c = upper_check("conditional_bound", 0.0, bv.worst, 1e-6);
    c.witness = witness_node(bv.step, bv.point);
    s.add("bound", c);
    if (sol.pasted) {
        double worst = 0.0;
        for (double g : sol.pasted->overlap_gaps) worst = std::max(worst, g);
        s.add("bound", upper_check("pasting_overlap", 1e-6, worst));
    }
    Json moments = Json::array();
    for (double pw : rc.estimates.p_list) {
        const ExpMomentReport m = exp_moment_bounds(p, eng, sol.solution, pw, rc.estimates.paths, rc.disc.seed);
        CheckRecord e = upper_check("exp_moment_p" + fmt_short(pw), m.rhs, m.lhs);
        e.verdict = verdict_text(m.pass);
        s.add("bound", e);
        moments.push_back(Json{{"p", json_number(pw)},
                               {"lhs", json_number(m.lhs)},
                               {"lhs_se", json_number(m.lhs_se)},
                               {"rhs", json_number(m.rhs)},
                               {"mp_measured", json_number(m.mp_measured)},
                               {"fitted_c", json_number(m.fitted_c)}});
    }
    s.detail("exp_moments", moments);
    s.detail("y0", json_number(initial_value(sol.solution, eng)));
    s.detail("x0", json_number(x.x[0][0]));
}

inline void suite_ladder(Session& s, const ExpectationEngine& eng) {
    const RunConfig& rc = s.rc();
    const BsdeProblem p = primary_problem(rc);
    const QuadraticResult q = solve_quadratic(p, eng, config_ladder(rc), quadratic_options(rc));
    double worst = 0.0;
    for (const auto& o : q.ladder.checks) worst = std::max(worst, o.violation);
    CheckRecord c = upper_check("monotone_order", q.ladder.tolerance, worst);
    c.verdict = verdict_text(q.ladder.consistent);
    s.add("ladder", c);
    Json d = to_json(q.ladder);
    if (q.ladder.diagonal.size() >= 2) {
        const LimitReport lim = monotone_limit(q.ladder, p, eng);
        d["limit"] = to_json(lim);
        try {
            const ResidualReport oracle = residual(p, solve_colehopf(p, eng), eng);
            s.add("ladder", upper_check("limit_residual", 5.0 * oracle.max_abs, lim.residual));
            d["oracle_residual"] = json_number(oracle.max_abs);
        } catch (const PreconditionError&) {
            d["oracle_residual"] = nullptr;
        }
    }
    s.detail("ladder", d);
}

inline void suite_kazamaki(Session& s, const ExpectationEngine& eng) {
    const RunConfig& rc = s.rc();
    const BsdeProblem p = primary_problem(rc);
    if (rc.kazamaki.q_tilde == 0.0) throw ConfigError("the kazamaki suite needs [kazamaki] q_tilde");
    const Solved sol = solve_with(rc, p, eng, rc.disc.solver);
    const MeasureChangeReport r =
        kazamaki_check(sol.solution, rc.kazamaki.q_tilde, p.gamma, rc.kazamaki.eta_list, eng, rc.kazamaki.paths, rc.disc.seed);
    CheckRecord c = upper_check("exponential_mean", 3.0 * r.martingale_se, std::abs(r.martingale_mean - 1.0));
    c.verdict = verdict_text(r.pass);
    s.add("kazamaki", c);
    s.add("kazamaki", upper_check("telescoping", 1e-10, r.telescoping_error));
    s.detail("kazamaki", to_json(r));
}

inline void suite_residual(Session& s, const ExpectationEngine& eng) {
    const RunConfig& rc = s.rc();
    const BsdeProblem p = primary_problem(rc);
    const Solved sol = solve_with(rc, p, eng, rc.disc.solver);
    const ResidualReport r = residual(p, sol.solution, eng);
    Json d{{"method", sol.method}, {"max_abs", json_number(r.max_abs)}, {"worst_step", r.worst_step}, {"worst_point", r.worst_point}};
    if (sol.method == "lq") {
        const double tol = rc.disc.picard_tol > 0.0 ? rc.disc.picard_tol : 1e-10;
        CheckRecord c = upper_check("own_solution", tol, r.max_abs);
        c.witness = witness_node(r.worst_step, r.worst_point);
        s.add("residual", c);
    }
    s.detail("residual", d);
}

inline const std::vector<std::string>& suite_names() {
    static const std::vector<std::string> names{"comparison", "contraction", "apriori", "bound", "ladder", "kazamaki", "residual"};
    return names;
}

inline std::vector<std::string> applicable_suites(const RunConfig& rc) {
    std::vector<std::string> out;
    const std::string method = resolve_method(rc, rc.disc.solver);
    if (rc.problem_prime) out.push_back("comparison");
    if (rc.problem.cls ? *rc.problem.cls == StructureClass::lipschitz : method == "lq") out.push_back("contraction");
    if (rc.problem.gamma > 0.0) {
        if (method != "unbounded") out.push_back("apriori");
        out.push_back("bound");
    }
    if (!rc.reg.n_list.empty()) out.push_back("ladder");
    if (rc.kazamaki.q_tilde != 0.0) out.push_back("kazamaki");
    if (method == "lq") out.push_back("residual");
    return out;
}

inline int cmd_verify(Session& s, const std::string& suite) {
    const RunConfig& rc = s.rc();
    std::vector<std::string> suites;
    if (suite == "all") suites = applicable_suites(rc);
    else if (std::find(suite_names().begin(), suite_names().end(), suite) != suite_names().end()) suites = {suite};
    else throw ConfigError("unknown suite '" + suite + "' (expected comparison, contraction, apriori, bound, ladder, kazamaki, residual or all)");
    const auto eng = build_engine(rc, rc.disc.steps);
    static const std::map<std::string, std::function<void(Session&, const ExpectationEngine&)>> run{
        {"comparison", suite_comparison}, {"contraction", suite_contraction}, {"apriori", suite_apriori}, {"bound", suite_bound},
        {"ladder", suite_ladder},         {"kazamaki", suite_kazamaki},       {"residual", suite_residual}};
    for (const auto& name : suites) {
        s.log() << name << "\n";
        run.at(name)(s, *eng);
    }
    return s.finish(suite);
}

// ---- converge ----

inline int cmd_converge(Session& s) {
    const RunConfig& rc = s.rc();
    std::vector<double> steps = rc.converge.steps;
    if (steps.size() < 2) throw ConfigError("converge needs at least two step counts (--steps or [converge] steps)");
    std::sort(steps.begin(), steps.end());
    const BsdeProblem p = primary_problem(rc);
    std::vector<double> y0;
    std::string method;
    for (double n : steps) {
        const auto eng = build_engine(rc, static_cast<std::size_t>(n));
        const Solved sol = solve_with(rc, p, *eng, rc.converge.method);
        method = sol.method;
        y0.push_back(initial_value(sol.solution, *eng));
        s.log() << "  steps=" << static_cast<std::size_t>(n) << "  Y0=" << format_double(y0.back()) << "\n";
    }
    const bool have_oracle = rc.converge.oracle.has_value();
    const double oracle = have_oracle ? *rc.converge.oracle : y0.back();
    const std::size_t rows = have_oracle ? steps.size() : steps.size() - 1;
    std::vector<double> err(steps.size(), std::numeric_limits<double>::quiet_NaN());
    for (std::size_t k = 0; k < rows; ++k) err[k] = std::abs(y0[k] - oracle);
    std::vector<double> ratio(steps.size(), std::numeric_limits<double>::quiet_NaN());
    for (std::size_t k = 1; k < rows; ++k)
        if (err[k] > 0.0) ratio[k] = err[k - 1] / err[k];

    std::string csv = "steps,y0,error,ratio\n";
    Json table = Json::array();
    for (std::size_t k = 0; k < steps.size(); ++k) {
        csv += std::to_string(static_cast<std::size_t>(steps[k])) + "," + format_double(y0[k]) + "," +
               (std::isfinite(err[k]) ? format_double(err[k]) : "") + "," + (std::isfinite(ratio[k]) ? format_double(ratio[k]) : "") + "\n";
        table.push_back(Json{{"steps", static_cast<std::size_t>(steps[k])},
                             {"y0", json_number(y0[k])},
                             {"error", json_number(err[k])},
                             {"ratio", json_number(ratio[k])}});
    }
    s.emit_text("converge.csv", csv);
    Json j = s.header("converge");
    j["method"] = method;
    j["oracle"] = json_number(oracle);
    j["oracle_source"] = have_oracle ? "config" : "finest grid";
    j["table"] = table;
    s.emit_json("converge.json", j);

    bool exact = true;
    for (std::size_t k = 0; k < rows; ++k) exact = exact && err[k] <= 1e-12;
    if (exact) {
        double worst = 0.0;
        for (std::size_t k = 0; k < rows; ++k) worst = std::max(worst, err[k]);
        s.add("converge", upper_check("exact", 1e-12, worst));
    } else {
        for (std::size_t k = 1; k < rows; ++k) {
            const std::string name = "ratio_" + std::to_string(static_cast<std::size_t>(steps[k - 1])) + "_" +
                                     std::to_string(static_cast<std::size_t>(steps[k]));
            CheckRecord c = upper_check(name, rc.converge.ratio_hi, ratio[k]);
            c.verdict = verdict_text(std::isfinite(ratio[k]) && ratio[k] >= rc.converge.ratio_lo && ratio[k] <= rc.converge.ratio_hi);
            s.add("converge", c);
        }
    }
    return s.finish();
}

// ---- stability ----

inline int cmd_stability(Session& s) {
    const RunConfig& rc = s.rc();
    const StabilityConfig& st = rc.stability;
    if (st.n_list.empty()) throw ConfigError("[stability] n_list is required");
    if (st.terminal_family.empty() && st.generator_family.empty() && st.g_family.empty())
        throw ConfigError("[stability] needs terminal_family, generator_family or g_family");
    const auto eng = build_engine(rc, rc.disc.steps);
    const BsdeProblem base = primary_problem(rc);
    std::vector<StabilityMember> family;
    for (double n : st.n_list) {
        ProblemConfig pc = rc.problem;
        if (!st.generator_family.empty()) pc.generator = instantiate_family(st.generator_family, n);
        if (!st.g_family.empty()) pc.g = instantiate_family(st.g_family, n);
        if (!st.terminal_family.empty()) pc.terminal = instantiate_family(st.terminal_family, n);
        family.push_back({n, build_problem(pc, rc.driver)});
    }
    const std::string method = resolve_method(rc, rc.disc.solver);
    SolveFn solve = [&](const BsdeProblem& pr, const ExpectationEngine& e) { return solve_with(rc, pr, e, method).solution; };
    const StabilityRun run = stability_experiment(base, family, st.p_list, *eng, solve, st.paths, rc.disc.seed);
    Json j = s.header("stability");
    j["method"] = method;
    j["run"] = to_json(run);
    s.emit_json("stability.json", j);
    s.add("stability", verdict_check("data_finite", verdict_text(run.data_finite)));
    s.add("stability", verdict_check("g_bound", verdict_text(run.g_bound_ok)));
    s.add("stability", verdict_check("metric_monotone", verdict_text(run.metric_monotone)));
    s.add("stability", verdict_check("m2_monotone", verdict_text(run.m2_monotone)));
    return s.finish();
}

// ---- certify ----

inline int cmd_certify(Session& s) {
    const RunConfig& rc = s.rc();
    if (!rc.problem.cls) throw ConfigError("certify needs [problem] class");
    const BsdeProblem p = primary_problem(rc);
    const StructureCert& cert = *p.cert;
    Json j = s.header("certificate");
    j["generator"] = rc.problem.generator;
    j["g"] = rc.problem.g;
    j["certificate"] = to_json(cert);
    if (cert.witness) {
        const auto [lhs, rhs] = replay_witness(*p.f_expr, *p.g_expr, cert);
        j["replayed"] = Json{{"lhs", json_number(lhs)}, {"rhs", json_number(rhs)}};
    }
    s.emit_json("certificate.json", j);
    CheckRecord c = lower_check("structure_" + to_string(cert.cls), 0.0, cert.margin);
    c.verdict = verdict_text(cert.pass);
    if (cert.witness) c.witness = to_json(*cert.witness);
    s.add("certify", c);
    return s.finish();
}

// ---- entry point ----

inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Quadratic BSDE solver and property checker"};
    app.require_subcommand(1);
    std::string config_path, out_dir, suite = "all";
    Overrides ov;
    std::string steps_list;
    auto common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "Problem config file")->required();
        sub->add_option("--out", out_dir, "Output directory");
        sub->add_option("--backend", ov.backend, "lattice or lsmc");
        sub->add_option("--workers", ov.workers, "Worker threads");
        sub->add_option("--seed", ov.seed, "Random seed");
        sub->add_option("--paths", ov.paths, "Simulated paths");
    };
    CLI::App* solve = app.add_subcommand("solve", "Solve and write solution.csv and contraction.json");
    common(solve);
    solve->add_option("--steps", ov.steps, "Time steps");
    CLI::App* verify = app.add_subcommand("verify", "Run a property suite and write manifest.json");
    common(verify);
    verify->add_option("--steps", ov.steps, "Time steps");
    verify->add_option("--suite", suite, "comparison, contraction, apriori, bound, ladder, kazamaki, residual or all");
    CLI::App* converge = app.add_subcommand("converge", "Refinement study of Y0");
    common(converge);
    converge->add_option("--steps", ov.steps, "Comma-separated step counts");
    CLI::App* stability = app.add_subcommand("stability", "Stability experiment over a data family");
    common(stability);
    stability->add_option("--steps", ov.steps, "Time steps");
    CLI::App* certify = app.add_subcommand("certify", "Sample the structure conditions of the generator");
    common(certify);

    std::vector<std::string> rev(args.rbegin(), args.rend());
    try {
        app.parse(rev);
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return exit_pass;
    } catch (const CLI::ParseError& e) {
        err << "usage error: " << e.what() << "\n";
        return exit_config;
    }
    CLI::App* cmd = app.get_subcommands().front();
    const std::string name = cmd->get_name();
    std::optional<Session> session;
    try {
        ConfigFile cf = ConfigFile::load(config_path);
        apply_overrides(cf, ov, name == "converge");
        RunConfig rc = read_run_config(std::move(cf));
        const std::filesystem::path dir = output_directory(out_dir, rc);
        session.emplace(std::move(rc), dir, name, out);
        if (name == "solve") return cmd_solve(*session);
        if (name == "verify") return cmd_verify(*session, suite);
        if (name == "converge") return cmd_converge(*session);
        if (name == "stability") return cmd_stability(*session);
        return cmd_certify(*session);
    } catch (const NumericalError& e) {
        err << "numerical error: " << e.what() << "\n";
        if (!session) return exit_verdict;
        CheckRecord c = verdict_check("numerical_error", "ERROR");
        c.witness = Json{{"message", e.what()}, {"step", e.step}};
        session->add("", c);
        return session->finish();
    } catch (const std::invalid_argument& e) {
        err << "config error: " << e.what() << "\n";
        return exit_config;
    } catch (const UnsupportedConfiguration& e) {
        err << "config error: " << e.what() << "\n";
        return exit_config;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return exit_verdict;
    }
}

inline int run(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    return run(std::vector<std::string>(argv + 1, argv + argc), out, err);
}

}  // namespace qbsde::cli
