// gcgm: simulate, infer, oracle, mcmc, learn and benchmark from the command line.
//
// Exit codes: 0 success, 2 usage or invalid input, 3 numerical failure, 4 IO or parse failure.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <limits>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "gcgm/gcgm.hpp"

namespace {

using namespace gcgm;
namespace fs = std::filesystem;

constexpr int kExitUsage = 2;
constexpr int kExitNumerical = 3;
constexpr int kExitIo = 4;

struct Shared {
    std::uint64_t seed = 0;
    bool seed_given = false;
    std::string out_dir = ".";
    EpOptions ep;
};

struct SimulateArgs {
    int side = 2;
    int horizon = 5;
    std::int64_t N = 1000;
    double lambda = 1.0;
    std::vector<double> w{1.0, 2.0, 2.0, 2.0};
    std::string noise = "poisson";
    double variance = 1.0;
    std::string out = "dataset.csv";
};

struct InferArgs {
    std::string data;
    std::string reference;
    std::string out = "estimates.csv";
};

struct OracleArgs {
    std::string data;
    std::int64_t max_work = OracleOptions{}.max_work;
    std::string out = "oracle.csv";
};

struct McmcArgs {
    std::string data;
    std::int64_t burn_in = 1000;
    std::int64_t iters = 10000;
    int batches = 50;
    std::string out = "mcmc.csv";
};

struct LearnArgs {
    std::string data;
    std::vector<double> init_w{0.2, 0.4, 0.4, 0.4};
    int max_em_iters = 50;
    double em_tol = 1e-4;
    double mstep_tol = 1e-6;
    int mstep_max_iters = 500;
    std::string out = "em_trace.csv";
};

struct BenchmarkArgs {
    std::vector<int> sizes{16, 36, 64, 100};
    int n_per_state = 100;
    int horizon = 5;
    double lambda = 1.0;
    int repeats = 3;
    std::string out = "benchmark.csv";
};

Weights to_weights(const std::vector<double>& v, const std::string& name) {
    if (v.size() != 4) throw Error(ErrorCode::InvalidArgument, name + " needs exactly 4 values");
    return {v[0], v[1], v[2], v[3]};
}

Json weights_json(const Weights& w) { return Json::array({w(0), w(1), w(2), w(3)}); }

Json ep_json(const EpOptions& o) {
    return Json{{"max_sweeps", o.max_sweeps},           {"tolerance", o.tolerance},
                {"damping", o.damping},                 {"inner_max_iters", o.inner_max_iters},
                {"inner_tol", o.inner_tol},             {"clamp_eps", o.clamp_eps}};
}

Json diagnostics_json(const EpDiagnostics& d) {
    return Json{{"sweeps", d.sweeps},
                {"converged", d.converged},
                {"final_change", std::isfinite(d.final_change) ? Json(d.final_change) : Json(nullptr)},
                {"clamps", d.clamps},
                {"clips", d.clips},
                {"line_search_failures", d.line_search_failures},
                {"nonpd_hessians", d.nonpd_hessians},
                {"seconds", d.seconds},
                {"warnings", d.warnings}};
}

Json run_header(const std::string& command, std::uint64_t seed) {
    return Json{{"command", command}, {"seed", seed}};
}

fs::path output_path(const Shared& shared, const std::string& name) { return fs::path(shared.out_dir) / name; }

struct Loaded {
    Dataset data;
    TreeModel model;
    Json grid;
};

Loaded load(const std::string& path) {
    const Columnar c = read_columnar(path);
    Loaded l;
    l.data = dataset_from_columnar(c);
    l.model = build_chain_model(l.data.config);
    l.grid = c.config.at("grid");
    return l;
}

/// Writes a versioned CSV: a format line, the resolved config, then the rows.
void write_table(const fs::path& path, const std::string& format, const Json& config, const std::string& header,
                 const std::vector<std::vector<std::string>>& rows) {
    std::string text = "# format: " + format + "\n# config: " + config.dump() + "\n" + header + "\n";
    for (const auto& row : rows) {
        for (std::size_t k = 0; k < row.size(); ++k) text += (k ? "," : "") + row[k];
        text += "\n";
    }
    detail::write_text(path, text);
}

void report(const Json& summary) { std::cout << summary.dump() << "\n"; }

int cmd_simulate(const Shared& shared, const SimulateArgs& a) {
    GridConfig g;
    g.side = a.side;
    g.horizon = a.horizon;
    g.N = a.N;
    g.lambda = a.lambda;
    g.w = to_weights(a.w, "--w");
    g.seed = shared.seed;
    const NoiseModel noise = noise_from_string(a.noise, a.noise == "gaussian" ? a.variance : a.lambda);
    const Dataset ds = generate(g, noise);
    Json config = run_header("simulate", shared.seed);
    const fs::path out = output_path(shared, a.out);
    write_columnar(out, dataset_to_columnar(ds, config));
    report({{"command", "simulate"}, {"dataset", out.string()}, {"seed", shared.seed}});
    return 0;
}

int cmd_infer(const Shared& shared, const InferArgs& a) {
    const Loaded l = load(a.data);
    const double N = static_cast<double>(l.data.config.N);
    const GaussianMoments moments = build_moments(l.model, compute_marginals(l.model), N);
    const EpResult r = run_ep(l.model, moments, l.data.observations, shared.ep);
    const std::vector<Matrix> edges = edge_posteriors(moments, r.posterior.means);

    Json config = run_header("infer", shared.seed_given ? shared.seed : l.data.config.seed);
    config["data"] = a.data;
    config["grid"] = l.grid;
    config["noise"] = noise_to_json(l.data.observations.noise);
    config["ep"] = ep_json(shared.ep);
    config["diagnostics"] = diagnostics_json(r.diagnostics);
    bool negative = false;
    for (const Vector& v : r.posterior.full_means) negative = negative || (v.array() < 0.0).any();
    for (const Matrix& m : edges) negative = negative || (m.array() < 0.0).any();
    config["diagnostics"]["negative_means"] = negative;
    if (!a.reference.empty()) {
        const Columnar ref = read_columnar(a.reference);
        const int T = l.model.node_count;
        const int L = l.model.domain_size;
        config["reference"] = a.reference;
        // Either an estimates file (node_mean, edge_mean) or a dataset with its true counts (node, edge).
        const bool estimates = !block_values(ref, "node_mean").empty();
        const std::string node_block = estimates ? "node_mean" : "node";
        const std::string edge_block = estimates ? "edge_mean" : "edge";
        config["error"] = {
            {"node", relative_l1_error(r.posterior.full_means, extract_vectors(ref, node_block, T, L))},
            {"edge", relative_l1_error(edges, extract_tables(ref, edge_block, T - 1, L, L))}};
    }
    const fs::path out = output_path(shared, a.out);
    write_columnar(out, estimates_to_columnar(r.posterior.full_means, edges, config));

    Json summary{{"command", "infer"}, {"estimates", out.string()}, {"diagnostics", config["diagnostics"]}};
    if (config.contains("error")) summary["error"] = config["error"];
    report(summary);
    return 0;
}

int cmd_oracle(const Shared& shared, const OracleArgs& a) {
    const Loaded l = load(a.data);
    OracleOptions opt;
    opt.max_work = a.max_work;
    const PosteriorMeans p = enumerate_posterior(l.model, l.data.observations, l.data.config.N, opt);
    Json config = run_header("oracle", shared.seed_given ? shared.seed : l.data.config.seed);
    config["data"] = a.data;
    config["grid"] = l.grid;
    config["noise"] = noise_to_json(l.data.observations.noise);
    config["max_work"] = a.max_work;
    config["log_evidence"] = p.log_evidence;
    const fs::path out = output_path(shared, a.out);
    write_columnar(out, estimates_to_columnar(p.node_means, p.edge_means, config));
    report({{"command", "oracle"}, {"estimates", out.string()}, {"log_evidence", p.log_evidence}});
    return 0;
}

int cmd_mcmc(const Shared& shared, const McmcArgs& a) {
    const Loaded l = load(a.data);
    BaselineOptions opt;
    opt.burn_in = a.burn_in;
    opt.iterations = a.iters;
    opt.batches = a.batches;
    opt.seed = shared.seed;
    const BaselineResult r = sample_posterior_baseline(l.model, l.data.observations, l.data.config.N, opt);
    Json config = run_header("mcmc", shared.seed);
    config["data"] = a.data;
    config["grid"] = l.grid;
    config["noise"] = noise_to_json(l.data.observations.noise);
    config["burn_in"] = a.burn_in;
    config["iters"] = a.iters;
    config["batches"] = a.batches;
    config["acceptance_rate"] = r.acceptance_rate;
    Columnar c = estimates_to_columnar(r.node_means, r.edge_means, config);
    append_vectors(c, "node_mcse", r.node_mcse);
    append_tables(c, "edge_mcse", r.edge_mcse);
    const fs::path out = output_path(shared, a.out);
    write_columnar(out, c);
    report({{"command", "mcmc"}, {"estimates", out.string()}, {"acceptance_rate", r.acceptance_rate}});
    return 0;
}

int cmd_learn(const Shared& shared, const LearnArgs& a) {
    const Loaded l = load(a.data);
    EMConfig em;
    em.init_w = to_weights(a.init_w, "--init-w");
    em.max_em_iters = a.max_em_iters;
    em.em_tol = a.em_tol;
    em.mstep_tol = a.mstep_tol;
    em.mstep_max_iters = a.mstep_max_iters;
    em.ep = shared.ep;
    em.true_w = l.data.config.w;
    const EMTrace trace = run_em(l.data, em);

    Json config = run_header("learn", shared.seed_given ? shared.seed : l.data.config.seed);
    config["data"] = a.data;
    config["grid"] = l.grid;
    config["init_w"] = weights_json(em.init_w);
    config["true_w"] = weights_json(*em.true_w);
    config["max_em_iters"] = a.max_em_iters;
    config["em_tol"] = a.em_tol;
    config["mstep_tol"] = a.mstep_tol;
    config["mstep_max_iters"] = a.mstep_max_iters;
    config["ep"] = ep_json(shared.ep);
    config["converged"] = trace.converged;
    Json warnings = Json::array();
    std::vector<std::vector<std::string>> rows;
    for (const EMIteration& it : trace.iterations) {
        rows.push_back({std::to_string(it.iter), format_number(it.w(0)), format_number(it.w(1)), format_number(it.w(2)),
                        format_number(it.w(3)), format_number(it.rel_error), format_number(it.objective),
                        format_number(it.seconds)});
        for (const std::string& w : it.warnings) warnings.push_back("iteration " + std::to_string(it.iter) + ": " + w);
    }
    config["warnings"] = warnings;
    const fs::path out = output_path(shared, a.out);
    write_table(out, "gcgm-em-trace/1", config, "iter,w1,w2,w3,w4,rel_error,objective,seconds", rows);
    const EMIteration& last = trace.iterations.back();
    report({{"command", "learn"},
            {"trace", out.string()},
            {"iterations", last.iter},
            {"w", weights_json(last.w)},
            {"rel_error", last.rel_error},
            {"converged", trace.converged}});
    return 0;
}

int cmd_benchmark(const Shared& shared, const BenchmarkArgs& a) {
    using Clock = std::chrono::steady_clock;
    const auto seconds_since = [](Clock::time_point t) {
        return std::chrono::duration<double>(Clock::now() - t).count();
    };
    if (a.repeats < 1) throw Error(ErrorCode::InvalidArgument, "--repeats must be >= 1");
    std::vector<std::vector<std::string>> rows;
    for (int L : a.sizes) {
        const int side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(L))));
        if (side * side != L) throw Error(ErrorCode::InvalidArgument, "benchmark sizes must be square numbers");
        GridConfig g;
        g.side = side;
        g.horizon = a.horizon;
        g.N = static_cast<std::int64_t>(a.n_per_state) * L;
        g.lambda = a.lambda;
        g.seed = shared.seed;
        std::vector<std::string> row{std::to_string(L), std::to_string(g.N)};
        try {
            const Dataset ds = generate(g);
            double node_best = std::numeric_limits<double>::infinity();
            double total_best = std::numeric_limits<double>::infinity();
            double error = 0.0;
            int sweeps = 0;
            for (int rep = 0; rep < a.repeats; ++rep) {
                const auto start = Clock::now();
                const TreeModel model = build_chain_model(ds.config);
                const GaussianMoments moments =
                    build_moments(model, compute_marginals(model), static_cast<double>(g.N));
                const EpResult r = run_ep(model, moments, ds.observations, shared.ep);
                const double node_seconds = seconds_since(start);
                const std::vector<Matrix> edges = edge_posteriors(moments, r.posterior.means);
                const double total_seconds = seconds_since(start);
                node_best = std::min(node_best, node_seconds);
                total_best = std::min(total_best, total_seconds);
                std::vector<Vector> truth;
                for (const CountVec& v : ds.counts.node_counts) truth.push_back(v.cast<double>());
                error = relative_l1_error(r.posterior.full_means, truth);
                sweeps = r.diagnostics.sweeps;
            }
            row.insert(row.end(), {format_number(node_best), format_number(total_best), format_number(error),
                                   std::to_string(sweeps), "ok"});
        } catch (const Error& e) {
            row.insert(row.end(), {"nan", "nan", "nan", "0", to_string(e.code())});
        }
        rows.push_back(std::move(row));
    }
    Json config = run_header("benchmark", shared.seed);
    config["sizes"] = a.sizes;
    config["n_per_state"] = a.n_per_state;
    config["horizon"] = a.horizon;
    config["lambda"] = a.lambda;
    config["repeats"] = a.repeats;
    config["ep"] = ep_json(shared.ep);
    config["error_reference"] = "simulated true node counts";
    const fs::path out = output_path(shared, a.out);
    write_table(out, "gcgm-benchmark/1", config, "L,N,node_seconds,total_seconds,error,sweeps,status", rows);
    report({{"command", "benchmark"}, {"table", out.string()}, {"rows", rows.size()}});
    return 0;
}

int exit_code_for(const Error& e) {
    if (e.code() == ErrorCode::ParseError || e.code() == ErrorCode::IoError) return kExitIo;
    if (e.is_numerical()) return kExitNumerical;
    return kExitUsage;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Gaussian collective graphical model inference and learning"};
    app.require_subcommand(1);
    app.fallthrough();
    app.set_config("--config", "", "TOML or INI file with option values; command-line flags take precedence");

    Shared shared;
    app.add_option("--seed", shared.seed, "Seed for every random stream")->each([&](const std::string&) {
        shared.seed_given = true;
    });
    app.add_option("--out-dir", shared.out_dir, "Directory for output files")->capture_default_str();
    app.add_option("--max-sweeps", shared.ep.max_sweeps, "EP sweep limit")->capture_default_str();
    app.add_option("--ep-tol", shared.ep.tolerance, "EP convergence tolerance on belief change")->capture_default_str();
    app.add_option("--damping", shared.ep.damping, "EP message damping in (0, 1]")->capture_default_str();
    app.add_option("--inner-max-iters", shared.ep.inner_max_iters, "Newton iterations per edge projection")
        ->capture_default_str();
    app.add_option("--inner-tol", shared.ep.inner_tol, "Newton gradient tolerance relative to N")->capture_default_str();

    SimulateArgs sim;
    auto* simulate = app.add_subcommand("simulate", "Simulate a bird migration dataset");
    simulate->add_option("--side", sim.side, "Grid side length (cells = side^2)")->capture_default_str();
    simulate->add_option("--horizon", sim.horizon, "Number of time steps")->capture_default_str();
    simulate->add_option("--N", sim.N, "Population size")->capture_default_str();
    simulate->add_option("--lambda", sim.lambda, "Poisson detection intensity")->capture_default_str();
    simulate->add_option("--w", sim.w, "Four feature weights")->expected(4)->delimiter(',')->capture_default_str();
    simulate->add_option("--noise", sim.noise, "Observation noise")
        ->check(CLI::IsMember({"poisson", "gaussian", "exact"}))
        ->capture_default_str();
    simulate->add_option("--variance", sim.variance, "Variance for Gaussian noise")->capture_default_str();
    simulate->add_option("--out", sim.out, "Dataset file name inside --out-dir")->capture_default_str();

    InferArgs inf;
    auto* infer = app.add_subcommand("infer", "Posterior mean counts by GCGM and expectation propagation");
    infer->add_option("--data", inf.data, "Dataset file")->required();
    infer->add_option("--reference", inf.reference, "Reference estimates for the relative L1 error");
    infer->add_option("--out", inf.out, "Estimates file name inside --out-dir")->capture_default_str();

    OracleArgs orc;
    auto* oracle = app.add_subcommand("oracle", "Exact posterior means by enumeration (tiny instances)");
    oracle->add_option("--data", orc.data, "Dataset file")->required();
    oracle->add_option("--max-work", orc.max_work, "Enumeration guard")->capture_default_str();
    oracle->add_option("--out", orc.out, "Estimates file name inside --out-dir")->capture_default_str();

    McmcArgs mc;
    auto* mcmc = app.add_subcommand("mcmc", "Posterior means by the individual-space MCMC baseline");
    mcmc->add_option("--data", mc.data, "Dataset file")->required();
    mcmc->add_option("--burn-in", mc.burn_in, "Burn-in sweeps")->capture_default_str();
    mcmc->add_option("--iters", mc.iters, "Recorded sweeps")->capture_default_str();
    mcmc->add_option("--batches", mc.batches, "Batches for Monte Carlo standard errors")->capture_default_str();
    mcmc->add_option("--out", mc.out, "Estimates file name inside --out-dir")->capture_default_str();

    LearnArgs lrn;
    auto* learn = app.add_subcommand("learn", "EM estimate of the transition weights");
    learn->add_option("--data", lrn.data, "Dataset file")->required();
    learn->add_option("--init-w", lrn.init_w, "Initial weights")->expected(4)->delimiter(',')->capture_default_str();
    learn->add_option("--max-em-iters", lrn.max_em_iters, "EM iteration limit")->capture_default_str();
    learn->add_option("--em-tol", lrn.em_tol, "Stop when max |w change| falls below this")->capture_default_str();
    learn->add_option("--mstep-tol", lrn.mstep_tol, "M-step gradient tolerance")->capture_default_str();
    learn->add_option("--mstep-max-iters", lrn.mstep_max_iters, "M-step iteration limit")->capture_default_str();
    learn->add_option("--out", lrn.out, "Trace file name inside --out-dir")->capture_default_str();

    BenchmarkArgs bm;
    auto* benchmark = app.add_subcommand("benchmark", "Inference time as a function of the number of cells");
    benchmark->add_option("--L", bm.sizes, "Cell counts (square numbers)")->delimiter(',')->capture_default_str();
    benchmark->add_option("--n-per-state", bm.n_per_state, "Population size per cell")->capture_default_str();
    benchmark->add_option("--horizon", bm.horizon, "Number of time steps")->capture_default_str();
    benchmark->add_option("--lambda", bm.lambda, "Poisson detection intensity")->capture_default_str();
    benchmark->add_option("--repeats", bm.repeats, "Timing repeats; the minimum is reported")->capture_default_str();
    benchmark->add_option("--out", bm.out, "Table file name inside --out-dir")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitUsage;
    }

    try {
        shared.ep.validate();
        if (*simulate) return cmd_simulate(shared, sim);
        if (*infer) return cmd_infer(shared, inf);
        if (*oracle) return cmd_oracle(shared, orc);
        if (*mcmc) return cmd_mcmc(shared, mc);
        if (*learn) return cmd_learn(shared, lrn);
        if (*benchmark) return cmd_benchmark(shared, bm);
    } catch (const Error& e) {
        std::cerr << "gcgm: " << e.what() << "\n";
        return exit_code_for(e);
    } catch (const Json::exception& e) {
        std::cerr << "gcgm: malformed input: " << e.what() << "\n";
        return kExitIo;
    } catch (const std::exception& e) {
        std::cerr << "gcgm: " << e.what() << "\n";
        return kExitNumerical;
    }
    return kExitUsage;
}
