#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "driver.hpp"
#include "envelope.hpp"
#include "errors.hpp"
#include "gendsl.hpp"
#include "lqsolver.hpp"
#include "problem.hpp"
#include "structure.hpp"

namespace qbsde {

/// Config parse or validation failure with the offending position.
struct ConfigParseError : ConfigError {
    ConfigParseError(const std::string& origin_, std::size_t line_, std::size_t column_, const std::string& msg)
        : ConfigError(origin_ + ":" + std::to_string(line_) + (column_ ? ":" + std::to_string(column_) : "") + ": " + msg),
          origin(origin_),
          line(line_),
          column(column_) {}
    std::string origin;
    std::size_t line = 0;
    std::size_t column = 0;
};

/// Flat sectioned key-value file. Values have surrounding quotes and trailing
/// comments removed; keys are kept sorted so the canonical text and hash do
/// not depend on their order in the file.
class ConfigFile {
public:
    using Section = std::map<std::string, std::string>;

    static ConfigFile parse(const std::string& text, const std::string& origin = "<config>") {
        ConfigFile cf;
        cf.origin_ = origin;
        std::istringstream in(text);
        boost::property_tree::ptree pt;
        try {
            boost::property_tree::read_ini(in, pt);
        } catch (const boost::property_tree::ini_parser_error& e) {
            throw ConfigParseError(origin, e.line(), 0, e.message());
        }
        for (const auto& [sec, body] : pt) {
            if (body.empty() && !body.data().empty())
                throw ConfigParseError(origin, cf.find_line(sec, ""), 0, "key '" + sec + "' outside of any section");
            for (const auto& [key, node] : body) cf.sections_[sec][key] = clean(node.data());
        }
        cf.index_lines(text);
        return cf;
    }

    static ConfigFile load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw ConfigParseError(path, 0, 0, "cannot open config file");
        std::ostringstream ss;
        ss << in.rdbuf();
        return parse(ss.str(), path);
    }

    const std::string& origin() const { return origin_; }
    bool has(const std::string& sec, const std::string& key) const {
        const auto s = sections_.find(sec);
        return s != sections_.end() && s->second.count(key);
    }
    bool has_section(const std::string& sec) const { return sections_.count(sec) > 0; }
    const std::map<std::string, Section>& sections() const { return sections_; }

    std::optional<std::string> get(const std::string& sec, const std::string& key) const {
        const auto s = sections_.find(sec);
        if (s == sections_.end()) return std::nullopt;
        const auto k = s->second.find(key);
        if (k == s->second.end()) return std::nullopt;
        return k->second;
    }

    void set(const std::string& sec, const std::string& key, const std::string& value) { sections_[sec][key] = value; }

    std::size_t line_of(const std::string& sec, const std::string& key) const {
        const auto it = lines_.find(sec + "." + key);
        return it == lines_.end() ? 0 : it->second;
    }

    [[noreturn]] void fail(const std::string& sec, const std::string& key, const std::string& msg, std::size_t column = 0) const {
        throw ConfigParseError(origin_, line_of(sec, key), column, "[" + sec + "] " + key + ": " + msg);
    }

    /// Sorted "[section]\nkey=value\n" text; execution-only keys are left out.
    std::string canonical() const {
        std::string out;
        for (const auto& [sec, body] : sections_) {
            out += "[" + sec + "]\n";
            for (const auto& [k, v] : body) {
                if (sec == "discretization" && k == "workers") continue;
                out += k + "=" + v + "\n";
            }
        }
        return out;
    }

    /// 64-bit FNV-1a of the canonical text as 16 hex digits.
    std::string hash() const {
        std::uint64_t h = 14695981039346656037ull;
        for (unsigned char c : canonical()) {
            h ^= c;
            h *= 1099511628211ull;
        }
        char buf[17];
        std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
        return buf;
    }

private:
    static std::string trim(const std::string& s) {
        const auto b = s.find_first_not_of(" \t\r\n");
        if (b == std::string::npos) return "";
        const auto e = s.find_last_not_of(" \t\r\n");
        return s.substr(b, e - b + 1);
    }

    static std::string clean(std::string v) {
        v = trim(v);
        if (v.size() >= 2 && (v.front() == '"' || v.front() == '\'') && v.back() == v.front()) return v.substr(1, v.size() - 2);
        // trailing comment after whitespace
        for (std::size_t i = 1; i < v.size(); ++i)
            if ((v[i] == '#' || v[i] == ';') && (v[i - 1] == ' ' || v[i - 1] == '\t')) {
                v = trim(v.substr(0, i));
                break;
            }
        if (v.size() >= 2 && (v.front() == '"' || v.front() == '\'') && v.back() == v.front()) return v.substr(1, v.size() - 2);
        return v;
    }

    std::size_t find_line(const std::string& sec, const std::string& key) const {
        const auto it = lines_.find(sec + "." + key);
        return it == lines_.end() ? 0 : it->second;
    }

    void index_lines(const std::string& text) {
        std::istringstream in(text);
        std::string line, sec;
        std::size_t no = 0;
        while (std::getline(in, line)) {
            ++no;
            const std::string t = trim(line);
            if (t.empty() || t[0] == '#' || t[0] == ';') continue;
            if (t.front() == '[' && t.back() == ']') {
                sec = trim(t.substr(1, t.size() - 2));
                lines_[sec + "."] = no;
                continue;
            }
            const auto eq = t.find('=');
            if (eq != std::string::npos) lines_.emplace(sec + "." + trim(t.substr(0, eq)), no);
        }
    }

    std::string origin_;
    std::map<std::string, Section> sections_;
    std::map<std::string, std::size_t> lines_;
};

namespace detail {

inline std::vector<std::string> split_list(std::string v) {
    v.erase(std::remove_if(v.begin(), v.end(), [](char c) { return c == '[' || c == ']'; }), v.end());
    std::vector<std::string> out;
    std::string cur;
    std::istringstream in(v);
    while (std::getline(in, cur, ',')) {
        const auto b = cur.find_first_not_of(" \t");
        if (b == std::string::npos) continue;
        const auto e = cur.find_last_not_of(" \t");
        out.push_back(cur.substr(b, e - b + 1));
    }
    return out;
}

}  // namespace detail

/// Typed accessors that report the key's position on failure.
class ConfigReader {
public:
    explicit ConfigReader(const ConfigFile& cf) : cf_(cf) {}

    const ConfigFile& file() const { return cf_; }

    std::string str(const std::string& sec, const std::string& key, std::optional<std::string> def = std::nullopt) const {
        if (auto v = cf_.get(sec, key)) return *v;
        if (def) return *def;
        throw ConfigParseError(cf_.origin(), cf_.line_of(sec, ""), 0, "[" + sec + "] missing required key '" + key + "'");
    }

    double num(const std::string& sec, const std::string& key, std::optional<double> def = std::nullopt) const {
        const auto v = cf_.get(sec, key);
        if (!v) {
            if (def) return *def;
            throw ConfigParseError(cf_.origin(), cf_.line_of(sec, ""), 0, "[" + sec + "] missing required key '" + key + "'");
        }
        return to_double(sec, key, *v);
    }

    double num_in(const std::string& sec, const std::string& key, double def, double lo, double hi) const {
        const double v = num(sec, key, def);
        if (!(v >= lo && v <= hi))
            cf_.fail(sec, key, "value " + format_value(v) + " outside [" + format_value(lo) + ", " + format_value(hi) + "]");
        return v;
    }

    std::size_t count(const std::string& sec, const std::string& key, std::size_t def, std::size_t lo, std::size_t hi) const {
        const double v = num(sec, key, static_cast<double>(def));
        if (v != std::floor(v) || v < static_cast<double>(lo) || v > static_cast<double>(hi))
            cf_.fail(sec, key, "expected an integer in [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
        return static_cast<std::size_t>(v);
    }

    bool flag(const std::string& sec, const std::string& key, bool def) const {
        const auto v = cf_.get(sec, key);
        if (!v) return def;
        if (*v == "true" || *v == "1" || *v == "yes" || *v == "on") return true;
        if (*v == "false" || *v == "0" || *v == "no" || *v == "off") return false;
        cf_.fail(sec, key, "expected a boolean");
    }

    std::vector<double> list(const std::string& sec, const std::string& key, std::vector<double> def = {}) const {
        const auto v = cf_.get(sec, key);
        if (!v) return def;
        std::vector<double> out;
        for (const auto& item : detail::split_list(*v)) out.push_back(to_double(sec, key, item));
        return out;
    }

    std::vector<std::string> words(const std::string& sec, const std::string& key, std::vector<std::string> def = {}) const {
        const auto v = cf_.get(sec, key);
        if (!v) return def;
        return detail::split_list(*v);
    }

    dsl::Expr expr(const std::string& sec, const std::string& key, std::optional<std::string> def = std::nullopt) const {
        const std::string text = str(sec, key, def);
        try {
            return dsl::parse(text);
        } catch (const dsl::ParseError& e) {
            cf_.fail(sec, key, std::string(e.what()), e.offset + 1);
        }
    }

private:
    static std::string format_value(double v) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%g", v);
        return buf;
    }

    double to_double(const std::string& sec, const std::string& key, const std::string& s) const {
        try {
            std::size_t used = 0;
            const double v = std::stod(s, &used);
            if (used != s.size()) throw std::invalid_argument("trailing");
            return v;
        } catch (const std::exception&) {
            cf_.fail(sec, key, "'" + s + "' is not a number");
        }
    }

    const ConfigFile& cf_;
};

struct ProblemConfig {
    std::string generator = "0";
    std::string g = "0";
    std::string terminal = "0";
    std::string alpha = "0";
    double gamma = 0.0;
    double beta = 0.0;
    std::optional<StructureClass> cls;
    Phi phi;
};

struct DriverConfig {
    std::size_t d_m = 1;
    std::size_t d_perp = 0;
    double horizon = 1.0;
    ClockKind clock = ClockKind::identity;
    double clock_scale = 1.0;
    std::vector<double> lambda;
    std::vector<double> clock_table;
};

struct DiscretizationConfig {
    std::size_t steps = 64;
    Backend backend = Backend::lattice;
    std::size_t paths = 20000;
    int basis = 3;
    double ridge = 1e-10;
    double picard_tol = -1.0;
    std::size_t picard_max = 100;
    std::uint64_t seed = 12345;
    unsigned workers = 1;
    bool implicit_y = false;
    QvMode qv_mode = QvMode::current;
    std::string solver = "auto";
};

struct RegularizationConfig {
    std::vector<double> n_list;
    std::vector<double> k_list;
    EnvelopeOptions envelope;
    bool truncate = false;
};

struct LocalizationConfig {
    std::vector<double> m_list;
    double sigma_level = -1.0;
    double paste_tol = -1.0;
};

struct StabilityConfig {
    std::string terminal_family;
    std::string generator_family;
    std::string g_family;
    std::vector<double> n_list;
    std::vector<double> p_list{1.0};
    std::size_t paths = 20000;
};

struct ComparisonConfig {
    std::vector<std::string> modes{"lipschitz"};
    std::vector<double> theta_list{0.5, 0.9, 0.99};
    std::size_t samples = 4000;
};

struct KazamakiConfig {
    double q_tilde = 0.0;
    std::vector<double> eta_list;
    std::size_t paths = 100000;
};

struct CertifyConfig {
    std::size_t samples = 20000;
    std::uint64_t seed = 7;
    Box box;
};

struct ConvergeConfig {
    std::vector<double> steps;
    std::optional<double> oracle;
    double ratio_lo = 1.5;
    double ratio_hi = 2.5;
    std::string method = "auto";
};

struct EstimatesConfig {
    std::vector<double> p_list{2.0};
    std::size_t paths = 20000;
};

struct OutputConfig {
    std::string directory;
    std::vector<std::string> formats{"csv", "json"};
};

/// Everything a run needs, validated against the file.
struct RunConfig {
    ConfigFile file;
    ProblemConfig problem;
    std::optional<ProblemConfig> problem_prime;
    DriverConfig driver;
    DiscretizationConfig disc;
    RegularizationConfig reg;
    LocalizationConfig loc;
    StabilityConfig stability;
    ComparisonConfig comparison;
    KazamakiConfig kazamaki;
    CertifyConfig certify;
    ConvergeConfig converge;
    EstimatesConfig estimates;
    OutputConfig output;

    std::string hash() const { return file.hash(); }
};

namespace detail {

inline void check_usage(const ConfigFile& cf, const std::string& sec, const std::string& key, const dsl::Expr& e,
                        const DriverConfig& d) {
    const dsl::Usage u = dsl::usage(e);
    if (u.z_dim > d.d_m || u.dotz_arity > d.d_m)
        cf.fail(sec, key, "uses z components beyond the " + std::to_string(d.d_m) + " martingale dimensions");
    if (u.w_dim > d.d_m) cf.fail(sec, key, "uses w components beyond the " + std::to_string(d.d_m) + " martingale dimensions");
    if (u.wp_dim > d.d_perp) cf.fail(sec, key, "uses wp components beyond the " + std::to_string(d.d_perp) + " orthogonal dimensions");
}

inline ProblemConfig read_problem(const ConfigReader& r, const std::string& sec, const DriverConfig& d) {
    const ConfigFile& cf = r.file();
    ProblemConfig p;
    auto expr_key = [&](const char* key, std::string def) {
        const dsl::Expr e = r.expr(sec, key, def);
        check_usage(cf, sec, key, e, d);
        return r.str(sec, key, def);
    };
    p.generator = expr_key("generator", "0");
    p.g = expr_key("g", "0");
    p.terminal = expr_key("terminal", "0");
    p.alpha = expr_key("alpha", "0");
    {
        const dsl::Usage u = dsl::usage(dsl::parse(p.g));
        if (u.y || u.z || u.w || u.wp) cf.fail(sec, "g", "g may depend on t and a only");
        const dsl::Usage ua = dsl::usage(dsl::parse(p.alpha));
        if (ua.y || ua.z || ua.w || ua.wp) cf.fail(sec, "alpha", "alpha may depend on t and a only");
        const dsl::Usage ux = dsl::usage(dsl::parse(p.terminal));
        if (ux.y || ux.z) cf.fail(sec, "terminal", "the terminal value may depend on w, wp, t and a only");
    }
    p.gamma = r.num_in(sec, "gamma", 0.0, 0.0, 1e6);
    p.beta = r.num_in(sec, "beta", 0.0, 0.0, 1e6);
    if (auto c = cf.get(sec, "class")) {
        try {
            p.cls = parse_structure_class(*c);
        } catch (const ConfigError& e) {
            cf.fail(sec, "class", e.what());
        }
    }
    if (auto ph = cf.get(sec, "phi")) {
        // "poly:c:k" or "exp:c:r"
        const auto parts = [&] {
            std::vector<std::string> v;
            std::string cur;
            std::istringstream in(*ph);
            while (std::getline(in, cur, ':')) v.push_back(cur);
            return v;
        }();
        if (parts.size() != 3 || (parts[0] != "poly" && parts[0] != "exp"))
            cf.fail(sec, "phi", "expected poly:<coef>:<power> or exp:<coef>:<rate>");
        try {
            p.phi.kind = parts[0] == "poly" ? Phi::Kind::polynomial : Phi::Kind::exponential;
            p.phi.coef = std::stod(parts[1]);
            p.phi.param = std::stod(parts[2]);
        } catch (const std::exception&) {
            cf.fail(sec, "phi", "coefficients must be numbers");
        }
    }
    return p;
}

}  // namespace detail

inline RunConfig read_run_config(ConfigFile cf) {
    RunConfig rc;
    rc.file = std::move(cf);
    const ConfigFile& f = rc.file;
    const ConfigReader r(f);
    static const std::map<std::string, std::vector<std::string>> known{
        {"problem", {"generator", "g", "terminal", "alpha", "gamma", "beta", "class", "phi"}},
        {"problem_prime", {"generator", "g", "terminal", "alpha", "gamma", "beta", "class", "phi"}},
        {"driver", {"dims", "perp_dims", "horizon", "clock", "clock_scale", "lambda", "clock_table"}},
        {"discretization",
         {"steps", "backend", "paths", "basis", "ridge", "picard_tol", "picard_max", "seed", "workers", "implicit_y", "qv_mode",
          "solver"}},
        {"regularization", {"n_list", "k_list", "mode", "box", "grid_points", "truncate"}},
        {"localization", {"m_list", "sigma_level", "paste_tol"}},
        {"stability", {"terminal_family", "generator_family", "g_family", "n_list", "p_list", "paths"}},
        {"comparison", {"mode", "theta_list", "samples"}},
        {"kazamaki", {"q_tilde", "eta_list", "paths"}},
        {"certify", {"samples", "seed", "y_range", "z_range", "w_range"}},
        {"converge", {"steps", "oracle", "ratio_lo", "ratio_hi", "method"}},
        {"estimates", {"p_list", "paths"}},
        {"output", {"directory", "formats"}},
    };
    for (const auto& [sec, body] : f.sections()) {
        const auto k = known.find(sec);
        if (k == known.end())
            throw ConfigParseError(f.origin(), f.line_of(sec, ""), 0, "unknown section [" + sec + "]");
        for (const auto& [key, _] : body)
            if (std::find(k->second.begin(), k->second.end(), key) == k->second.end()) f.fail(sec, key, "unknown key");
    }
    if (!f.has_section("problem")) throw ConfigParseError(f.origin(), 0, 0, "missing [problem] section");

    DriverConfig& d = rc.driver;
    d.d_m = r.count("driver", "dims", 1, 1, 8);
    d.d_perp = r.count("driver", "perp_dims", 0, 0, 8);
    d.horizon = r.num_in("driver", "horizon", 1.0, 1e-12, 1e6);
    const std::string ck = r.str("driver", "clock", "identity");
    if (ck == "identity") d.clock = ClockKind::identity;
    else if (ck == "arctan") d.clock = ClockKind::arctan;
    else if (ck == "table") d.clock = ClockKind::table;
    else f.fail("driver", "clock", "expected identity, arctan or table");
    d.clock_scale = r.num_in("driver", "clock_scale", 1.0, 1e-12, 1e12);
    d.lambda = r.list("driver", "lambda");
    if (!d.lambda.empty() && d.lambda.size() != d.d_m * d.d_m)
        f.fail("driver", "lambda", "expected " + std::to_string(d.d_m * d.d_m) + " entries (row-major)");
    d.clock_table = r.list("driver", "clock_table");
    if (d.clock == ClockKind::table && d.clock_table.empty()) f.fail("driver", "clock", "table clock needs clock_table");

    rc.problem = detail::read_problem(r, "problem", d);
    if (f.has_section("problem_prime")) rc.problem_prime = detail::read_problem(r, "problem_prime", d);

    DiscretizationConfig& c = rc.disc;
    c.steps = r.count("discretization", "steps", 64, 1, 1 << 20);
    try {
        c.backend = parse_backend(r.str("discretization", "backend", "lattice"));
    } catch (const ConfigError& e) {
        f.fail("discretization", "backend", e.what());
    }
    c.paths = r.count("discretization", "paths", 20000, 2, 100000000);
    c.basis = static_cast<int>(r.count("discretization", "basis", 3, 0, 8));
    c.ridge = r.num_in("discretization", "ridge", 1e-10, 0.0, 1.0);
    c.picard_tol = r.num("discretization", "picard_tol", -1.0);
    if (c.picard_tol != -1.0 && !(c.picard_tol > 0.0)) f.fail("discretization", "picard_tol", "must be positive");
    c.picard_max = r.count("discretization", "picard_max", 100, 1, 100000);
    c.seed = r.count("discretization", "seed", 12345, 0, (std::size_t{1} << 53));
    c.workers = static_cast<unsigned>(r.count("discretization", "workers", 1, 1, 256));
    c.implicit_y = r.flag("discretization", "implicit_y", false);
    const std::string qv = r.str("discretization", "qv_mode", "current");
    if (qv == "current") c.qv_mode = QvMode::current;
    else if (qv == "frozen") c.qv_mode = QvMode::frozen;
    else f.fail("discretization", "qv_mode", "expected current or frozen");
    c.solver = r.str("discretization", "solver", "auto");
    static const std::vector<std::string> solvers{"auto", "lq", "quadratic", "colehopf", "unbounded"};
    if (std::find(solvers.begin(), solvers.end(), c.solver) == solvers.end())
        f.fail("discretization", "solver", "expected auto, lq, quadratic, colehopf or unbounded");

    RegularizationConfig& g = rc.reg;
    g.n_list = r.list("regularization", "n_list");
    g.k_list = r.list("regularization", "k_list", g.n_list);
    for (double v : g.n_list)
        if (!(v > 0.0)) f.fail("regularization", "n_list", "levels must be positive");
    for (double v : g.k_list)
        if (!(v > 0.0)) f.fail("regularization", "k_list", "levels must be positive");
    try {
        g.envelope.mode = parse_envelope_mode(r.str("regularization", "mode", "auto"));
    } catch (const ConfigError& e) {
        f.fail("regularization", "mode", e.what());
    }
    g.truncate = r.flag("regularization", "truncate", false);
    g.envelope.box = r.num_in("regularization", "box", 10.0, 1e-6, 1e6);
    g.envelope.grid_points = r.count("regularization", "grid_points", 41, 3, 10001);

    LocalizationConfig& l = rc.loc;
    l.m_list = r.list("localization", "m_list");
    for (double v : l.m_list)
        if (!(v > 0.0)) f.fail("localization", "m_list", "levels must be positive");
    l.sigma_level = r.num("localization", "sigma_level", -1.0);
    l.paste_tol = r.num("localization", "paste_tol", -1.0);

    StabilityConfig& s = rc.stability;
    s.terminal_family = r.str("stability", "terminal_family", "");
    s.generator_family = r.str("stability", "generator_family", "");
    s.g_family = r.str("stability", "g_family", "");
    s.n_list = r.list("stability", "n_list");
    s.p_list = r.list("stability", "p_list", {1.0});
    for (double p : s.p_list)
        if (!(p >= 1.0)) f.fail("stability", "p_list", "exponents must be at least 1");
    s.paths = r.count("stability", "paths", 20000, 1, 100000000);

    ComparisonConfig& cc = rc.comparison;
    cc.modes = r.words("comparison", "mode", {"lipschitz"});
    for (const auto& m : cc.modes)
        if (m != "lipschitz" && m != "convex-theta") f.fail("comparison", "mode", "expected lipschitz and/or convex-theta");
    cc.theta_list = r.list("comparison", "theta_list", {0.5, 0.9, 0.99});
    for (double t : cc.theta_list)
        if (!(t > 0.0 && t < 1.0)) f.fail("comparison", "theta_list", "theta must lie in (0, 1)");
    cc.samples = r.count("comparison", "samples", 4000, 1, 100000000);

    KazamakiConfig& k = rc.kazamaki;
    k.q_tilde = r.num("kazamaki", "q_tilde", 0.0);
    k.eta_list = r.list("kazamaki", "eta_list");
    k.paths = r.count("kazamaki", "paths", 100000, 2, 100000000);

    CertifyConfig& ce = rc.certify;
    ce.samples = r.count("certify", "samples", 20000, 1, 100000000);
    ce.seed = r.count("certify", "seed", 7, 0, (std::size_t{1} << 53));
    auto range = [&](const char* key, double& lo, double& hi) {
        const auto v = r.list("certify", key);
        if (v.empty()) return;
        if (v.size() != 2 || !(v[0] < v[1])) f.fail("certify", key, "expected [lo, hi] with lo < hi");
        lo = v[0];
        hi = v[1];
    };
    range("y_range", ce.box.y_lo, ce.box.y_hi);
    range("z_range", ce.box.z_lo, ce.box.z_hi);
    range("w_range", ce.box.w_lo, ce.box.w_hi);
    ce.box.t_lo = 0.0;
    ce.box.t_hi = d.horizon;
    ce.box.d = d.d_m;
    ce.box.d_w = d.d_m;
    ce.box.d_wp = std::max<std::size_t>(d.d_perp, 1);

    ConvergeConfig& cv = rc.converge;
    cv.steps = r.list("converge", "steps");
    for (double v : cv.steps)
        if (!(v >= 1.0) || v != std::floor(v)) f.fail("converge", "steps", "step counts must be positive integers");
    if (f.has("converge", "oracle")) cv.oracle = r.num("converge", "oracle");
    cv.ratio_lo = r.num("converge", "ratio_lo", 1.5);
    cv.ratio_hi = r.num("converge", "ratio_hi", 2.5);
    cv.method = r.str("converge", "method", "auto");
    if (std::find(solvers.begin(), solvers.end(), cv.method) == solvers.end())
        f.fail("converge", "method", "expected auto, lq, quadratic, colehopf or unbounded");

    EstimatesConfig& es = rc.estimates;
    es.p_list = r.list("estimates", "p_list", {2.0});
    for (double p : es.p_list)
        if (!(p > 1.0)) f.fail("estimates", "p_list", "exponents must exceed 1");
    es.paths = r.count("estimates", "paths", 20000, 2, 100000000);

    OutputConfig& o = rc.output;
    o.directory = r.str("output", "directory", "");
    o.formats = r.words("output", "formats", {"csv", "json"});
    for (const auto& fm : o.formats)
        if (fm != "csv" && fm != "json" && fm != "ensemble") f.fail("output", "formats", "expected csv, json and/or ensemble");
    return rc;
}

inline DriverSpec build_driver(const DriverConfig& d, std::size_t steps) {
    DriverSpec s = make_driver(d.horizon, steps, d.d_m, d.d_perp, d.clock == ClockKind::arctan ? ClockKind::arctan : ClockKind::identity,
                               d.clock_scale);
    if (d.clock == ClockKind::table) {
        if (d.clock_table.size() != steps + 1)
            throw ConfigError("clock_table has " + std::to_string(d.clock_table.size()) + " values but the grid has " +
                              std::to_string(steps + 1) + " nodes");
        s.clock = Clock::table(s.grid, d.clock_table);
    }
    if (!d.lambda.empty()) {
        const auto n = static_cast<Eigen::Index>(d.d_m);
        for (Eigen::Index i = 0; i < n; ++i)
            for (Eigen::Index j = 0; j < n; ++j) s.sigma(i, j) = d.lambda[static_cast<std::size_t>(i * n + j)];
    }
    s.validate();
    return s;
}

inline BsdeProblem build_problem(const ProblemConfig& p, const DriverConfig& d, const CertifyConfig* cert = nullptr) {
    BsdeProblem prob = make_problem(p.generator, p.g, p.terminal, d.horizon, p.gamma, p.beta, p.alpha);
    if (p.cls && cert) {
        Claim c;
        c.cls = *p.cls;
        c.alpha = *prob.alpha_expr;
        c.beta = p.beta;
        c.gamma = p.gamma;
        c.phi = p.phi;
        Box box = cert->box;
        if (!d.lambda.empty()) {
            const auto n = static_cast<Eigen::Index>(d.d_m);
            box.lambda = Matrix(n, n);
            for (Eigen::Index i = 0; i < n; ++i)
                for (Eigen::Index j = 0; j < n; ++j) box.lambda(i, j) = d.lambda[static_cast<std::size_t>(i * n + j)];
        }
        prob.cert = certify_structure(*prob.f_expr, *prob.g_expr, c, box, cert->samples, cert->seed);
    }
    return prob;
}

/// Replaces every "{n}" in a family template by the index.
inline std::string instantiate_family(const std::string& tmpl, double n) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", n);
    std::string out;
    for (std::size_t i = 0; i < tmpl.size(); ++i) {
        if (tmpl.compare(i, 3, "{n}") == 0) {
            out += "(";
            out += buf;
            out += ")";
            i += 2;
        } else {
            out += tmpl[i];
        }
    }
    return out;
}

}  // namespace qbsde
