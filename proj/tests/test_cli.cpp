#include <catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <unistd.h>

#include "qbsde/cli.hpp"

using namespace qbsde;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("qbsde_cli_" + std::to_string(::getpid())) / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

fs::path write_config(const fs::path& dir, const std::string& text) {
    const fs::path p = dir / "run.toml";
    std::ofstream(p) << text;
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::ostringstream s;
    s << f.rdbuf();
    return s.str();
}

struct Outcome {
    int code;
    std::string out;
    std::string err;
};

Outcome run_cli(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = cli::run(args, out, err);
    return {code, out.str(), err.str()};
}

const char* lipschitz_config = R"cfg(# small Lipschitz problem
[problem]
generator = "0.1*tanh(y) + 0.1*tanh(z1)"
g = "0.125"
terminal = "0.05*tanh(w1 + wp1)"
gamma = 0.1
beta = 0.1

[driver]
dims = 1
perp_dims = 1

[discretization]
steps = 32
solver = lq
)cfg";

}  // namespace

TEST_CASE("config values drop quotes and trailing comments") {
    const ConfigFile cf = ConfigFile::parse("[problem]\ngenerator = \"norm2z\"\ngamma = 2   # quadratic\n[regularization]\nn_list = [1, 2, 4]\n");
    CHECK(cf.get("problem", "generator") == "norm2z");
    CHECK(cf.get("problem", "gamma") == "2");
    const ConfigReader r(cf);
    CHECK(r.list("regularization", "n_list") == std::vector<double>{1.0, 2.0, 4.0});
    CHECK(r.num("problem", "gamma") == 2.0);
    CHECK(r.num("problem", "beta", 0.5) == 0.5);
    CHECK(cf.line_of("problem", "gamma") == 3);
}

TEST_CASE("syntax errors carry the line") {
    try {
        (void)ConfigFile::parse("[problem]\ngenerator = \"y\"\nthis line has no separator\n", "bad.toml");
        FAIL("expected a parse error");
    } catch (const ConfigParseError& e) {
        CHECK(e.line == 3);
        CHECK(std::string(e.what()).rfind("bad.toml:3", 0) == 0);
    }
}

TEST_CASE("semantic errors carry the key position") {
    auto expect = [](const std::string& text, std::size_t line, const std::string& needle) {
        try {
            (void)read_run_config(ConfigFile::parse(text, "c.toml"));
            FAIL("expected a config error");
        } catch (const ConfigParseError& e) {
            CHECK(e.line == line);
            CHECK(std::string(e.what()).find(needle) != std::string::npos);
        }
    };
    expect("[problem]\ngenerator = \"y +* 2\"\n", 2, "[problem] generator");
    expect("[problem]\ngenerator = \"y\"\nbogus = 1\n", 3, "unknown key");
    expect("[problem]\ngenerator = \"y\"\n[discretization]\nsteps = -4\n", 4, "steps");
    expect("[problem]\ngenerator = \"z2\"\n[driver]\ndims = 1\n", 2, "z components");
    expect("[problem]\ngenerator = \"y\"\n[discretization]\nbackend = gpu\n", 4, "backend");
    expect("[problem]\ngenerator = \"y\"\n[nonsense]\nx = 1\n", 3, "unknown section");
    expect("[problem]\ng = \"y\"\n", 2, "t and a only");
    // expression errors also give the column of the offending character
    try {
        (void)read_run_config(ConfigFile::parse("[problem]\ngenerator = \"1 + )\"\n", "c.toml"));
        FAIL("expected a config error");
    } catch (const ConfigParseError& e) {
        CHECK(e.column >= 1);
    }
}

TEST_CASE("config hash ignores key order, comments and worker count") {
    const ConfigFile a = ConfigFile::parse("[problem]\ngenerator = y\ngamma = 2\n[discretization]\nsteps = 8\nworkers = 1\n");
    const ConfigFile b = ConfigFile::parse("# comment\n[discretization]\nworkers = 4\nsteps = 8\n[problem]\ngamma = 2\ngenerator = \"y\"\n");
    const ConfigFile c = ConfigFile::parse("[problem]\ngenerator = y\ngamma = 3\n[discretization]\nsteps = 8\n");
    CHECK(a.hash() == b.hash());
    CHECK(a.hash() != c.hash());
    CHECK(a.hash().size() == 16);
}

TEST_CASE("family templates substitute the index") {
    CHECK(instantiate_family("tanh(w1) + 1/{n}", 4.0) == "tanh(w1) + 1/(4)");
    CHECK(dsl::parse(instantiate_family("{n}*y + {n}", 0.5)));
}

TEST_CASE("floating point fields use seventeen significant digits") {
    CHECK(format_double(0.1) == "0.10000000000000001");
    CHECK(format_double(std::nan("")) == "null");
    Json j;
    j["x"] = 1.0 / 3.0;
    j["n"] = json_number(std::numeric_limits<double>::infinity());
    j["v"] = json_array({1.0, 2.5});
    CHECK(to_json_text(j) == "{\n  \"x\": 0.33333333333333331,\n  \"n\": null,\n  \"v\": [1, 2.5]\n}\n");
}

TEST_CASE("solve writes the solution table and contraction report") {
    const fs::path dir = scratch("solve");
    const fs::path cfg = write_config(dir, lipschitz_config);
    const Outcome o = run_cli({"solve", "--config", cfg.string(), "--backend", "lattice", "--steps", "16", "--out", (dir / "out").string()});
    CHECK(o.code == 0);
    REQUIRE(fs::exists(dir / "out" / "solution.csv"));
    REQUIRE(fs::exists(dir / "out" / "contraction.json"));
    const std::string csv = slurp(dir / "out" / "solution.csv");
    CHECK(csv.rfind("step,t,A,y_mean,y_min,y_max,z_rms,nperp_rms,qvN_cum\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 18);
    const Json c = Json::parse(slurp(dir / "out" / "contraction.json"));
    CHECK(c["steps"] == 16);
    CHECK(c["verdict"] == "PASS");
    CHECK(c["config_hash"].get<std::string>().size() == 16);
    const Json m = Json::parse(slurp(dir / "out" / "manifest.json"));
    CHECK(m["verdict"] == "PASS");
    CHECK(m["checks"][0]["config_hash"] == c["config_hash"]);
}

TEST_CASE("config errors exit with code 2 and a position") {
    const fs::path dir = scratch("bad");
    const fs::path cfg = write_config(dir, "[problem]\ngenerator = \"y\"\n[discretization]\nsteps = 1.5\n");
    const Outcome o = run_cli({"solve", "--config", cfg.string(), "--out", (dir / "out").string()});
    CHECK(o.code == 2);
    CHECK(o.err.find("run.toml:4") != std::string::npos);
    CHECK(run_cli({"solve", "--config", (dir / "missing.toml").string()}).code == 2);
    CHECK(run_cli({"launch"}).code == 2);
}

TEST_CASE("verdict failures exit with code 1 and name the manifest") {
    const fs::path dir = scratch("fail");
    const fs::path cfg = write_config(dir, "[problem]\ngenerator = \"y^2\"\nbeta = 1\nclass = A1\n");
    const Outcome o = run_cli({"certify", "--config", cfg.string(), "--out", (dir / "out").string()});
    CHECK(o.code == 1);
    CHECK(o.out.find("manifest.json") != std::string::npos);
    const Json cert = Json::parse(slurp(dir / "out" / "certificate.json"));
    CHECK(cert["certificate"]["verdict"] == "FAIL");
    CHECK(cert["certificate"]["witness"]["lhs"].get<double>() > cert["certificate"]["witness"]["rhs"].get<double>());
    CHECK(cert["replayed"]["lhs"] == cert["certificate"]["witness"]["lhs"]);
}

TEST_CASE("output directory falls back to the environment") {
    const fs::path dir = scratch("env");
    const fs::path cfg = write_config(dir, lipschitz_config);
    ::setenv("QBSDE_OUT_DIR", (dir / "from_env").string().c_str(), 1);
    const Outcome o = run_cli({"solve", "--config", cfg.string()});
    ::unsetenv("QBSDE_OUT_DIR");
    CHECK(o.code == 0);
    CHECK(fs::exists(dir / "from_env" / "solution.csv"));
}

TEST_CASE("comparison suite passes on an ordered pair") {
    const fs::path dir = scratch("pair");
    const fs::path cfg = write_config(dir, R"cfg([problem]
generator = "0.5*tanh(y) + 0.3*z1"
g = "0.1"
terminal = "tanh(w1)"
gamma = 0.3
beta = 0.5
class = A1
[problem_prime]
generator = "0.5*tanh(y) + 0.3*z1 + 0.1"
g = "0.1"
terminal = "tanh(w1) + 0.2*abs(wp1)"
gamma = 0.3
beta = 0.5
[driver]
perp_dims = 1
[discretization]
steps = 32
)cfg");
    const Outcome o = run_cli({"verify", "--suite", "comparison", "--config", cfg.string(), "--out", (dir / "out").string()});
    CHECK(o.code == 0);
    const Json m = Json::parse(slurp(dir / "out" / "manifest.json"));
    CHECK(m["suite"] == "comparison");
    CHECK(m["verdict"] == "PASS");
    CHECK(m["checks"][0]["functional"] == "comparison.comparison_lipschitz");
    CHECK(run_cli({"verify", "--suite", "nope", "--config", cfg.string(), "--out", (dir / "o2").string()}).code == 2);
}

TEST_CASE("converge reports first-order error ratios") {
    const fs::path dir = scratch("converge");
    const fs::path cfg = write_config(dir, R"cfg([problem]
generator = "norm2z"
terminal = "w1"
gamma = 2
[converge]
oracle = 1
method = colehopf
)cfg");
    const Outcome o = run_cli({"converge", "--config", cfg.string(), "--steps", "32,64,128", "--out", (dir / "out").string()});
    CHECK(o.code == 0);
    const Json j = Json::parse(slurp(dir / "out" / "converge.json"));
    REQUIRE(j["table"].size() == 3);
    for (std::size_t k = 1; k < 3; ++k) {
        const double r = j["table"][k]["ratio"].get<double>();
        CHECK(r >= 1.5);
        CHECK(r <= 2.5);
    }
}

TEST_CASE("artifacts are byte-identical across runs and worker counts") {
    const fs::path dir = scratch("determinism");
    const fs::path cfg = write_config(dir, std::string(lipschitz_config) + "paths = 3000\n[output]\nformats = csv, json, ensemble\n");
    std::vector<fs::path> outs;
    for (const char* w : {"1", "4", "1"}) {
        outs.push_back(dir / ("w" + std::string(w) + "_" + std::to_string(outs.size())));
        const Outcome o = run_cli({"solve", "--config", cfg.string(), "--backend", "lsmc", "--workers", w, "--out", outs.back().string()});
        REQUIRE(o.code == 0);
    }
    for (const char* f : {"solution.csv", "contraction.json", "manifest.json", "ensemble.csv"}) {
        const std::string a = slurp(outs[0] / f);
        CHECK(!a.empty());
        CHECK(a == slurp(outs[1] / f));
        CHECK(a == slurp(outs[2] / f));
    }
}
