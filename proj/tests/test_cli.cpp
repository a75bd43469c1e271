#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "qbsde/cli.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace qbsde;

namespace {

// Fresh output directory per test case, wiped on entry so reruns start clean.
fs::path make_out(const std::string& tag) {
    fs::path dir = fs::temp_directory_path() / ("qbsde-cli-" + tag);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spill(const fs::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    out << text;
}

json repr_entropic_config() {
    return json::parse(R"({
        "experiment": "repr-check",
        "name": "repr-entropic",
        "generator": {"family": "Entropic", "beta": 0.5},
        "t": 0.2, "y": 0.1, "z": 1.3,
        "eps": [0.1, 0.05, 0.025],
        "clip": "none",
        "tolerance": 1e-8
    })");
}

json li_timevarying_config() {
    return json::parse(R"({
        "experiment": "li-test",
        "name": "li-timevarying",
        "generator": {"family": "TimeVaryingQuadratic",
                      "k": {"form": "step", "before": 1.0, "after": 0.0, "at": 0.5}},
        "pair": {"kind": "IncrementShift", "phi": {"form": "tanh"},
                 "t1": 0.5, "T": 1.0},
        "tolerance": 1e-3
    })");
}

json tc_linear_config() {
    return json::parse(R"({
        "experiment": "tc-test",
        "name": "tc-linear",
        "measure": {"measure": "shortfall", "loss": {"kind": "linear"}},
        "payoff": {"kind": "Terminal", "phi": {"form": "tanh"}, "T": 1.0},
        "s": 0.5,
        "tolerance": 1e-6
    })");
}

json tc_piecewise_config(int n_nodes) {
    json j = tc_linear_config();
    j["name"] = "tc-piecewise";
    j["measure"]["loss"]["kind"] = "piecewise-convex";
    j["n_nodes"] = n_nodes;
    j["mode"] = "floor";
    j["tolerance"] = 1e-4;
    return j;
}

json cons1_config() {
    return json::parse(R"({
        "experiment": "cons1-check",
        "name": "cons1-entropic",
        "generator": {"family": "Entropic", "beta": 0.5},
        "y": 0.1,
        "paths": {"n_paths": 50, "n_steps": 40, "T": 1.0},
        "tolerance": 1e-6
    })");
}

} // namespace

TEST_CASE("version string and config hash are stable and sensitive") {
    CHECK(cli::version() == std::string("qbsde 0.1.0"));
    const json a = repr_entropic_config();
    json b = a;
    CHECK(cli::config_hash(a) == cli::config_hash(b));
    b["z"] = 1.31;
    CHECK(cli::config_hash(a) != cli::config_hash(b));
}

TEST_CASE("malformed json yields a config error with line and column") {
    const fs::path dir = make_out("parse");
    const fs::path bad = dir / "bad.json";
    spill(bad, "{\n  \"experiment\": \"solve\",\n  \"payoff\": }\n");
    try {
        cli::load_config_file(bad);
        FAIL("expected ConfigError");
    } catch (const cli::ConfigError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("line 3") != std::string::npos);
        CHECK(msg.find("column") != std::string::npos);
    }
    CHECK_THROWS_AS(cli::load_config_file(dir / "missing.json"), cli::ConfigError);
}

TEST_CASE("unknown fields are rejected with the offending key named") {
    json cfg = tc_linear_config();
    cfg["bogus"] = 1;
    cli::RunOptions opts;
    opts.out_dir = make_out("unknown");
    const cli::RunResult r = cli::run(cfg, opts);
    CHECK(r.exit_code == 2);
    CHECK(r.message.find("unknown field \"bogus\"") != std::string::npos);
    // nothing may be written for a config that never validated
    CHECK(!fs::exists(opts.out_dir / "tc-linear.report.json"));

    json nested = tc_linear_config();
    nested["payoff"]["mystery"] = true;
    const cli::RunResult r2 = cli::run(nested, opts);
    CHECK(r2.exit_code == 2);
    CHECK(r2.message.find("mystery") != std::string::npos);

    json badexp = tc_linear_config();
    badexp["experiment"] = "frobnicate";
    const cli::RunResult r3 = cli::run(badexp, opts);
    CHECK(r3.exit_code == 2);
    CHECK(r3.message.find("frobnicate") != std::string::npos);
}

TEST_CASE("repr-check on the entropic generator passes and tabulates slopes") {
    cli::RunOptions opts;
    opts.out_dir = make_out("repr");
    const cli::RunResult r = cli::run(repr_entropic_config(), opts);
    REQUIRE(r.exit_code == 0);
    CHECK(r.pass);

    const json report = json::parse(slurp(r.report_path));
    CHECK(report.at("version") == cli::version());
    CHECK(report.at("verdict").at("pass") == true);
    CHECK(report.at("config").at("seed").is_number());
    CHECK(report.at("config").at("engine").contains("n_steps"));
    // the embedded hash must be the hash of the embedded config
    char want[32];
    std::snprintf(want, sizeof(want), "0x%016llx",
                  static_cast<unsigned long long>(
                      cli::config_hash(report.at("config"))));
    CHECK(report.at("config_hash") == std::string(want));

    const std::string csv = slurp(r.table_path);
    CHECK(csv.rfind("eps,slope,target\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);
    // every slope of the unclipped entropic family is exactly beta z^2
    const double target = 0.5 * 1.3 * 1.3;
    CHECK(std::fabs(report.at("values").at("target").get<double>() - target) <= 1e-12);
    // no stray temp files after atomic rename
    for (const auto& e : fs::directory_iterator(opts.out_dir))
        CHECK(e.path().extension() != ".tmp");
}

TEST_CASE("li-test on a time-varying generator fails with the gap on record") {
    cli::RunOptions opts;
    opts.out_dir = make_out("litv");
    const cli::RunResult r = cli::run(li_timevarying_config(), opts);
    CHECK(r.exit_code == 1);
    CHECK(!r.pass);
    // reports are still written: the gap is the interesting output
    const json report = json::parse(slurp(r.report_path));
    CHECK(report.at("verdict").at("pass") == false);
    const double gap = report.at("values").at("gap").get<double>();
    CHECK(gap > 1e-2);
    CHECK(gap == r.gap);
}

TEST_CASE("reruns with the same config and seed are byte-identical") {
    cli::RunOptions opts;
    opts.out_dir = make_out("det-a");
    const cli::RunResult r1 = cli::run(cons1_config(), opts);
    REQUIRE(r1.exit_code == 0);
    const std::string report1 = slurp(r1.report_path);
    const std::string table1 = slurp(r1.table_path);

    opts.out_dir = make_out("det-b");
    const cli::RunResult r2 = cli::run(cons1_config(), opts);
    REQUIRE(r2.exit_code == 0);
    CHECK(slurp(r2.report_path) == report1);
    CHECK(slurp(r2.table_path) == table1);

    // a seed override changes the resolved config and lands in the report
    opts.seed = 7;
    opts.out_dir = make_out("det-c");
    const cli::RunResult r3 = cli::run(cons1_config(), opts);
    REQUIRE(r3.exit_code == 0);
    const json report3 = json::parse(slurp(r3.report_path));
    CHECK(report3.at("config").at("seed") == 7);
    CHECK(slurp(r3.report_path) != report1);
}

TEST_CASE("tolerance scaling moves verdicts without touching values") {
    // floor semantics: the piecewise shortfall gap sits between 1e-4 and
    // 1e-3, so scaling the floor by ten flips the verdict
    cli::RunOptions opts;
    opts.out_dir = make_out("scale-a");
    const cli::RunResult pass = cli::run(tc_piecewise_config(96), opts);
    CHECK(pass.exit_code == 0);
    CHECK(pass.gap > 1e-4);
    CHECK(pass.gap < 1e-3);

    opts.tolerance_scale = 10.0;
    opts.out_dir = make_out("scale-b");
    const cli::RunResult fail = cli::run(tc_piecewise_config(96), opts);
    CHECK(fail.exit_code == 1);
    CHECK(fail.gap == pass.gap);
    CHECK(fail.tolerance == doctest::Approx(10.0 * pass.tolerance));
}

TEST_CASE("suite continues past failures and reports the max exit code") {
    json bad = tc_linear_config();
    bad["name"] = "tc-broken";
    bad["bogus"] = 1;
    json manifest;
    manifest["experiments"] = json::array({tc_linear_config(), bad,
                                           li_timevarying_config()});
    cli::RunOptions opts;
    opts.out_dir = make_out("suite");
    const auto results = cli::suite(manifest, ".", opts);
    REQUIRE(results.size() == 3);
    CHECK(results[0].exit_code == 0);
    CHECK(results[1].exit_code == 2);
    CHECK(results[2].exit_code == 1);
    CHECK(cli::suite_exit_code(results) == 2);

    const std::string summary = slurp(opts.out_dir / "summary.csv");
    CHECK(summary.rfind("name,verdict,gap,tolerance,seconds\n", 0) == 0);
    CHECK(std::count(summary.begin(), summary.end(), '\n') == 4);
    CHECK(summary.find("tc-linear,pass") != std::string::npos);
    CHECK(summary.find("tc-broken,config-error") != std::string::npos);
    CHECK(summary.find("li-timevarying,fail") != std::string::npos);
}

TEST_CASE("empty manifest produces an empty summary and exit zero") {
    json manifest;
    manifest["experiments"] = json::array();
    cli::RunOptions opts;
    opts.out_dir = make_out("empty");
    const auto results = cli::suite(manifest, ".", opts);
    CHECK(results.empty());
    CHECK(cli::suite_exit_code(results) == 0);
    CHECK(slurp(opts.out_dir / "summary.csv") == "name,verdict,gap,tolerance,seconds\n");
}

TEST_CASE("suite rejects duplicate names and file entries resolve relatively") {
    json manifest;
    manifest["experiments"] = json::array({tc_linear_config(), tc_linear_config()});
    cli::RunOptions opts;
    opts.out_dir = make_out("dup");
    CHECK_THROWS_AS(cli::suite(manifest, ".", opts), cli::ConfigError);

    // a file entry loads against the manifest's own directory
    const fs::path dir = make_out("reldir");
    spill(dir / "inner.json", tc_linear_config().dump());
    json byfile;
    byfile["experiments"] = json::array({json{{"file", "inner.json"}}});
    opts.out_dir = make_out("rel-out");
    const auto results = cli::suite(byfile, dir, opts);
    REQUIRE(results.size() == 1);
    CHECK(results[0].exit_code == 0);
}

TEST_CASE("worker pool reproduces the serial suite byte for byte") {
    json manifest;
    json second = tc_linear_config();
    second["name"] = "tc-linear-s25";
    second["s"] = 0.25;
    json third = repr_entropic_config();
    manifest["experiments"] = json::array({tc_linear_config(), second, third});

    cli::RunOptions serial;
    serial.out_dir = make_out("pool-serial");
    const auto rs = cli::suite(manifest, ".", serial);

    cli::RunOptions parallel;
    parallel.out_dir = make_out("pool-par");
    parallel.threads = 3;
    const auto rp = cli::suite(manifest, ".", parallel);

    REQUIRE(rs.size() == rp.size());
    for (std::size_t i = 0; i < rs.size(); ++i) {
        CHECK(rs[i].exit_code == rp[i].exit_code);
        CHECK(slurp(rs[i].report_path) == slurp(rp[i].report_path));
        CHECK(slurp(rs[i].table_path) == slurp(rp[i].table_path));
    }
}

TEST_CASE("numerical refusals exit three") {
    // an interior-horizon branch swap under the transform generator has no
    // closed-form engine, which is a numerical refusal rather than a config
    // problem
    json cfg = json::parse(R"({
        "experiment": "clli-test",
        "name": "iw-interior",
        "generator": {"family": "ItoWentzell", "amplitude": 0.3},
        "pair": {"kind": "BranchSwap", "c": 1.0, "t_obs": 0.25, "T": 1.0},
        "t_prime": 0.65,
        "tolerance": 1e-3
    })");
    cli::RunOptions opts;
    opts.out_dir = make_out("exit3");
    const cli::RunResult r = cli::run(cfg, opts);
    CHECK(r.exit_code == 3);
    CHECK(!r.message.empty());
}
