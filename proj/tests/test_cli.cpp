#include <catch2/catch_amalgamated.hpp>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "gcgm/gcgm.hpp"

using namespace gcgm;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("gcgm_cli_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

/// Runs the CLI with `args`, stdout and stderr going to files in `dir`; returns the exit status.
int run(const fs::path& dir, const std::string& args) {
    const std::string cmd = std::string(GCGM_CLI_PATH) + " " + args + " >" + (dir / "stdout.txt").string() + " 2>" +
                            (dir / "stderr.txt").string();
    const int status = std::system(cmd.c_str());
    REQUIRE(WIFEXITED(status));
    return WEXITSTATUS(status);
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<std::string> lines(const std::string& text) {
    std::vector<std::string> out;
    std::stringstream ss(text);
    for (std::string line; std::getline(ss, line);) out.push_back(line);
    return out;
}

std::vector<std::string> split(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) out.push_back(cell);
    return out;
}

Json config_of(const std::string& text) {
    const auto ls = lines(text);
    REQUIRE(ls.size() > 1);
    REQUIRE(ls[1].rfind("# config: ", 0) == 0);
    return Json::parse(ls[1].substr(10));
}

std::string simulate(const fs::path& dir, const std::string& extra = "") {
    REQUIRE(run(dir, "--seed 7 --out-dir " + dir.string() + " simulate --side 2 --horizon 3 --N 50 " + extra) == 0);
    return (dir / "dataset.csv").string();
}

}  // namespace

TEST_CASE("simulate writes a reloadable, reproducible dataset", "[cli]") {
    const fs::path a = scratch("sim_a");
    const fs::path b = scratch("sim_b");
    const std::string path = simulate(a);
    simulate(b);
    CHECK(slurp(path) == slurp(b / "dataset.csv"));

    GridConfig c;
    c.side = 2;
    c.horizon = 3;
    c.N = 50;
    c.seed = 7;
    const Dataset expected = generate(c);
    const Columnar file = read_columnar(path);
    CHECK(file.config.at("seed") == 7);
    CHECK(file.config.at("command") == "simulate");
    const Dataset loaded = dataset_from_columnar(file);
    CHECK(loaded.counts.node_counts == expected.counts.node_counts);
    CHECK(loaded.counts.edge_counts == expected.counts.edge_counts);
    for (int t = 0; t < 3; ++t) CHECK(*loaded.observations.values[t] == *expected.observations.values[t]);
}

TEST_CASE("usage errors exit with status 2", "[cli]") {
    const fs::path d = scratch("usage");
    CHECK(run(d, "--out-dir " + d.string() + " simulate --side 1") == 2);
    CHECK(run(d, "simulate --no-such-flag") == 2);
    CHECK(run(d, "") == 2);
    CHECK(run(d, "--damping 1.5 simulate") == 2);
    CHECK(run(d, "--help") == 0);
    CHECK_FALSE(fs::exists(d / "dataset.csv"));
}

TEST_CASE("infer with exact observations returns them", "[cli]") {
    const fs::path d = scratch("exact");
    const std::string data = simulate(d, "--noise exact");
    REQUIRE(run(d, "--out-dir " + d.string() + " infer --data " + data) == 0);
    const Columnar est = read_columnar(d / "estimates.csv");
    const Dataset ds = dataset_from_columnar(read_columnar(data));
    const auto nodes = extract_vectors(est, "node_mean", 3, 4);
    for (int t = 0; t < 3; ++t) CHECK((nodes[t] - *ds.observations.values[t]).cwiseAbs().maxCoeff() < 1e-8);
    const auto edges = extract_tables(est, "edge_mean", 2, 4, 4);
    for (int t = 0; t < 2; ++t) {
        CHECK((edges[t].rowwise().sum() - nodes[t]).cwiseAbs().maxCoeff() < 1e-6);
        CHECK((edges[t].colwise().sum().transpose() - nodes[t + 1]).cwiseAbs().maxCoeff() < 1e-6);
    }
}

TEST_CASE("infer reports the error against a reference and honours the sweep cap", "[cli]") {
    const fs::path d = scratch("infer");
    const std::string data = simulate(d);
    REQUIRE(run(d, "--max-sweeps 2 --out-dir " + d.string() + " infer --data " + data + " --reference " + data) == 0);
    const std::string text = slurp(d / "estimates.csv");
    const Json config = config_of(text);
    CHECK(config.at("diagnostics").at("sweeps").get<int>() <= 2);
    CHECK(config.at("ep").at("max_sweeps") == 2);
    CHECK(config.at("seed") == 7);

    const Columnar est = columnar_from_string(text, "estimates");
    const Dataset ds = dataset_from_columnar(read_columnar(data));
    std::vector<Vector> truth_nodes;
    for (const auto& v : ds.counts.node_counts) truth_nodes.push_back(v.cast<double>());
    std::vector<Matrix> truth_edges;
    for (const auto& m : ds.counts.edge_counts) truth_edges.push_back(m.cast<double>());
    double num = 0.0;
    double den = 0.0;
    const auto nodes = extract_vectors(est, "node_mean", 3, 4);
    for (int t = 0; t < 3; ++t) {
        num += (nodes[t] - truth_nodes[t]).cwiseAbs().sum();
        den += truth_nodes[t].cwiseAbs().sum();
    }
    CHECK(config.at("error").at("node").get<double>() == Catch::Approx(num / den).epsilon(1e-12));
    num = den = 0.0;
    const auto edges = extract_tables(est, "edge_mean", 2, 4, 4);
    for (int t = 0; t < 2; ++t) {
        num += (edges[t] - truth_edges[t]).cwiseAbs().sum();
        den += truth_edges[t].cwiseAbs().sum();
    }
    CHECK(config.at("error").at("edge").get<double>() == Catch::Approx(num / den).epsilon(1e-12));

    // The stdout summary carries the same numbers.
    const Json summary = Json::parse(slurp(d / "stdout.txt"));
    CHECK(summary.at("error").at("node") == config.at("error").at("node"));
}

TEST_CASE("oracle and mcmc agree on a tiny instance", "[cli]") {
    const fs::path d = scratch("oracle");
    REQUIRE(run(d, "--seed 3 --out-dir " + d.string() + " simulate --side 2 --horizon 2 --N 6") == 0);
    const std::string data = (d / "dataset.csv").string();
    REQUIRE(run(d, "--out-dir " + d.string() + " oracle --data " + data) == 0);
    REQUIRE(run(d, "--seed 5 --out-dir " + d.string() + " mcmc --data " + data + " --burn-in 500 --iters 20000") == 0);
    const Columnar exact = read_columnar(d / "oracle.csv");
    const Columnar mc = read_columnar(d / "mcmc.csv");
    CHECK(std::isfinite(exact.config.at("log_evidence").get<double>()));
    CHECK(mc.config.at("seed") == 5);
    const auto e = extract_tables(exact, "edge_mean", 1, 4, 4)[0];
    const auto m = extract_tables(mc, "edge_mean", 1, 4, 4)[0];
    const auto se = extract_tables(mc, "edge_mcse", 1, 4, 4)[0];
    int outside = 0;
    for (Eigen::Index k = 0; k < e.size(); ++k) {
        if (std::abs(e.data()[k] - m.data()[k]) > 4.0 * se.data()[k] + 1e-9) ++outside;
    }
    CHECK(outside <= 1);
}

TEST_CASE("learn writes the EM trace schema", "[cli]") {
    const fs::path d = scratch("learn");
    const std::string data = simulate(d);
    REQUIRE(run(d, "--out-dir " + d.string() + " learn --data " + data + " --max-em-iters 3 --init-w 0.5,1,1,1") == 0);
    const auto ls = lines(slurp(d / "em_trace.csv"));
    REQUIRE(ls.size() >= 4);
    CHECK(ls[0] == "# format: gcgm-em-trace/1");
    CHECK(ls[2] == "iter,w1,w2,w3,w4,rel_error,objective,seconds");
    CHECK(split(ls[3]) == std::vector<std::string>{"0", "0.5", "1", "1", "1", split(ls[3])[5], "nan", "0"});
    CHECK(ls.size() <= 3 + 4);
    const Json config = config_of(slurp(d / "em_trace.csv"));
    CHECK(config.at("true_w") == Json::array({1.0, 2.0, 2.0, 2.0}));
    for (std::size_t k = 3; k < ls.size(); ++k) CHECK(split(ls[k]).size() == 8);
}

TEST_CASE("benchmark emits one timed row per size", "[cli]") {
    const fs::path d = scratch("bench");
    REQUIRE(run(d, "--out-dir " + d.string() + " benchmark --L 16,36 --repeats 1 --horizon 3") == 0);
    const auto ls = lines(slurp(d / "benchmark.csv"));
    REQUIRE(ls.size() == 5);
    CHECK(ls[0] == "# format: gcgm-benchmark/1");
    CHECK(ls[2] == "L,N,node_seconds,total_seconds,error,sweeps,status");
    for (int k = 0; k < 2; ++k) {
        const auto row = split(ls[3 + k]);
        REQUIRE(row.size() == 7);
        CHECK(row[0] == (k == 0 ? "16" : "36"));
        CHECK(row[1] == (k == 0 ? "1600" : "3600"));
        CHECK(std::stod(row[2]) <= std::stod(row[3]));
        CHECK(row[6] == "ok");
    }
    CHECK(run(d, "--out-dir " + d.string() + " benchmark --L 15") == 2);
}

TEST_CASE("IO and numerical failures have their own exit codes", "[cli]") {
    const fs::path d = scratch("codes");
    CHECK(run(d, "infer --data " + (d / "missing.csv").string()) == 4);
    std::ofstream(d / "bad.csv") << "# format: gcgm-columnar/1\n# config: {\"grid\": 3}\nblock,id,i,j,value\n";
    CHECK(run(d, "infer --data " + (d / "bad.csv").string()) == 4);
    CHECK(slurp(d / "stderr.txt").find("grid") != std::string::npos);

    const std::string data = simulate(d);
    CHECK(run(d, "--out-dir " + d.string() + " oracle --data " + data + " --max-work 10") == 3);
}

TEST_CASE("options can come from a config file", "[cli]") {
    const fs::path d = scratch("config");
    std::ofstream(d / "run.toml") << "seed = 7\n[simulate]\nside = 2\nhorizon = 3\nN = 50\n";
    REQUIRE(run(d, "--config " + (d / "run.toml").string() + " --out-dir " + d.string() + " simulate") == 0);
    const fs::path ref = scratch("config_ref");
    simulate(ref);
    CHECK(slurp(d / "dataset.csv") == slurp(ref / "dataset.csv"));
}
