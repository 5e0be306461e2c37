// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit if any fails.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <sstream>
#include <string>

#include "test_support.hpp"

using namespace gcgm;
using namespace gcgm::testing;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, double a) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, a);
    return buf;
}

int failures = 0;

void criterion(int id, const std::string& name, double budget_seconds, const std::function<Outcome()>& body) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
        o = body();
    } catch (const std::exception& e) {
        o = {false, std::string("exception: ") + e.what()};
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (seconds > budget_seconds) {
        o.pass = false;
        o.detail += "; over the " + fmt("%.0f", budget_seconds) + " s budget";
    }
    if (!o.pass) ++failures;
    std::printf("%s  %2d  %s: %s (%.2f s)\n", o.pass ? "PASS" : "FAIL", id, name.c_str(), o.detail.c_str(), seconds);
    std::fflush(stdout);
}

constexpr double kNoBudget = std::numeric_limits<double>::infinity();

std::vector<Vector> as_double(const CountVector& c) {
    std::vector<Vector> out;
    for (const auto& v : c.node_counts) out.push_back(v.cast<double>());
    return out;
}

// Criterion 7's family: a 4-node binary chain with Poisson(n) observations.
struct OracleInstance {
    TreeModel model;
    MarginalSet marginals;
    std::int64_t N = 0;
    ObservationSet y;
};

OracleInstance oracle_instance(std::uint64_t seed, std::int64_t N) {
    std::mt19937_64 rng(seed);
    OracleInstance s;
    s.model = random_chain(4, 2, rng, 1.0);
    s.marginals = compute_marginals(s.model);
    s.N = N;
    const CountVector truth = sufficient_stats(sample_population(s.model, s.marginals, N, 1000 + seed), s.model);
    s.y = poisson_observations(truth, 1.0, rng);
    return s;
}

Outcome reparametrization_identity() {
    std::mt19937_64 rng(1);
    double worst = 0.0;
    int checked = 0;
    for (int rep = 0; rep < 100; ++rep) {
        const TreeModel m = random_tree(1 + rep % 5, 2 + rep % 2, rng, 2.0);
        const MarginalSet mar = compute_marginals(m);
        for (std::int64_t N = 1; N <= 6; ++N) {
            for (int draw = 0; draw < 3; ++draw) {
                const auto seed = static_cast<std::uint64_t>(rep * 100 + N * 10 + draw);
                const CountVector n = sufficient_stats(sample_population(m, N, seed), m);
                worst = std::max(worst, std::abs(log_pmf(m, n, mar.log_partition) - log_pmf_reparam(m, mar, n)));
                ++checked;
            }
        }
    }
    return {worst < 1e-9, std::to_string(checked) + " count vectors, max |diff| " + fmt("%.2e", worst)};
}

Outcome normalization_and_base_measure() {
    std::mt19937_64 rng(2);
    const TreeModel m = random_chain(2, 2, rng, 1.5);
    const double q = compute_marginals(m).log_partition;
    double worst_norm = 0.0;
    double worst_h = 0.0;
    bool same_support = true;
    for (std::int64_t N = 1; N <= 3; ++N) {
        double total = 0.0;
        for_each_supported(m, N, [&](const CountVector& n) { total += std::exp(log_pmf(m, n, q)); });
        worst_norm = std::max(worst_norm, std::abs(total - 1.0));

        // Every ordered sample of N individuals, tallied by its edge table.
        std::map<std::vector<std::int64_t>, double> ordered;
        for_each_assignment(static_cast<int>(2 * N), 2, [&](const std::vector<int>& flat) {
            const CountTable t = counts_of_ordered_sample(m, flat, N).edge_counts[0];
            ordered[{t.data(), t.data() + t.size()}] += 1.0;
        });
        std::size_t seen = 0;
        for_each_supported(m, N, [&](const CountVector& n) {
            ++seen;
            const CountTable& t = n.edge_counts[0];
            const auto it = ordered.find({t.data(), t.data() + t.size()});
            if (it == ordered.end()) {
                same_support = false;
                return;
            }
            worst_h = std::max(worst_h, std::abs(std::exp(log_base_measure(m, n)) - it->second) / it->second);
        });
        same_support = same_support && seen == ordered.size();
    }
    return {worst_norm < 1e-10 && worst_h < 1e-12 && same_support,
            "max |sum - 1| " + fmt("%.2e", worst_norm) + ", max relative h(n) error " + fmt("%.2e", worst_h)};
}

Outcome moment_matching() {
    std::mt19937_64 rng(3);
    const TreeModel m = random_chain(3, 3, rng, 1.0);
    const MarginalSet mar = compute_marginals(m);
    const GaussianMoments mo = build_moments(m, mar, 10.0);
    const int reps = 200000;
    std::vector<Gaussian> blocks;
    for (int e = 0; e < 2; ++e) blocks.push_back(extended_block(mo, e));

    // Per edge: sums of z, z^2 and of w = (z_a - mu_a)(z_b - mu_b) and w^2, centred on the model mean.
    struct Acc {
        Vector s1, s2;
        Matrix w1, w2;
    };
    std::vector<Acc> acc;
    for (const Gaussian& g : blocks) {
        const auto d = g.mean.size();
        acc.push_back({Vector::Zero(d), Vector::Zero(d), Matrix::Zero(d, d), Matrix::Zero(d, d)});
    }
    for (int r = 0; r < reps; ++r) {
        const CountVector c = sufficient_stats(sample_population(m, mar, 10, static_cast<std::uint64_t>(r)), m);
        for (int e = 0; e < 2; ++e) {
            const auto [u, v] = m.edges[e];
            const NodeBasis& bu = mo.basis(u);
            const NodeBasis& bv = mo.basis(v);
            Vector z(blocks[e].mean.size());
            z << reduce_node(bu, c.node_counts[u].cast<double>()), reduce_node(bv, c.node_counts[v].cast<double>()),
                Vector::Zero(bu.dim() * bv.dim());
            const Matrix sub = reduce_edge(bu, bv, Matrix(c.edge_counts[e].cast<double>()));
            for (int a = 0; a < bu.dim(); ++a) {
                for (int b = 0; b < bv.dim(); ++b) z(bu.dim() + bv.dim() + a * bv.dim() + b) = sub(a, b);
            }
            const Vector dz = z - blocks[e].mean;
            const Matrix w = dz * dz.transpose();
            acc[e].s1 += z;
            acc[e].s2 += z.array().square().matrix();
            acc[e].w1 += w;
            acc[e].w2 += w.array().square().matrix();
        }
    }
    double worst = 0.0;
    int coords = 0;
    for (int e = 0; e < 2; ++e) {
        const Gaussian& g = blocks[e];
        for (Eigen::Index a = 0; a < g.mean.size(); ++a) {
            const double mean = acc[e].s1(a) / reps;
            const double se = std::sqrt((acc[e].s2(a) / reps - mean * mean) / reps);
            worst = std::max(worst, std::abs(mean - g.mean(a)) / se);
            ++coords;
            for (Eigen::Index b = 0; b <= a; ++b) {
                const double w = acc[e].w1(a, b) / reps;
                const double wse = std::sqrt((acc[e].w2(a, b) / reps - w * w) / reps);
                worst = std::max(worst, std::abs(w - g.cov(a, b)) / wse);
                ++coords;
            }
        }
    }
    return {worst < 4.0, std::to_string(coords) + " mean and covariance coordinates, worst " + fmt("%.2f", worst) + " SE"};
}

Outcome precision_sparsity() {
    std::mt19937_64 rng(4);
    const TreeModel m = random_chain(5, 3, rng, 1.5);
    const PrecisionReport r = precision_pattern(m, build_moments(m, compute_marginals(m), 100.0));
    double worst = 0.0;
    for (int u = 0; u < 5; ++u) {
        for (int w = 0; w < 5; ++w) {
            if (std::abs(u - w) > 1) worst = std::max(worst, r.block_max(u, w));
        }
    }
    return {worst < 1e-8, "max normalized non-adjacent entry " + fmt("%.2e", worst)};
}

Outcome transform_bijection() {
    std::mt19937_64 rng(5);
    int mismatches = 0;
    for (int rep = 0; rep < 1000; ++rep) {
        const TreeModel m = random_tree(1 + rep % 5, 2 + rep % 3, rng, 1.0);
        const auto N = static_cast<std::int64_t>(1 + rep % 17);
        const CountVector c = sufficient_stats(sample_population(m, N, static_cast<std::uint64_t>(rep)), m);
        const ReductionTransform tr = ReductionTransform::full(m);
        const CountVector back = tr.lift(tr.reduce(c));
        if (back.node_counts != c.node_counts || back.edge_counts != c.edge_counts) ++mismatches;
    }
    std::string ranks;
    bool full_rank = true;
    for (int L : {2, 3, 4}) {
        const Matrix h = edge_reconstruction_matrix(L);
        const auto rank = Eigen::FullPivLU<Matrix>(h).rank();
        full_rank = full_rank && rank == L * L - 1 && h.rows() == L * L - 1;
        ranks += (ranks.empty() ? "" : ", ") + std::to_string(rank) + "/" + std::to_string(L * L - 1);
    }
    return {mismatches == 0 && full_rank,
            std::to_string(mismatches) + " of 1000 round trips differ; reconstruction ranks " + ranks};
}

Outcome ep_exactness() {
    double worst = 0.0;
    int max_sweeps = 0;
    int unconverged = 0;
    const int runs = 60;
    for (int rep = 0; rep < runs; ++rep) {
        std::mt19937_64 rng(600 + rep);
        const int n = 1 + rep % 6;
        const int L = 2 + rep % 3;
        const double N = 20.0 + 40.0 * (rep % 3);
        const double variance = rep % 2 == 0 ? 0.5 : 5.0;
        const TreeModel m = random_tree(n, L, rng, 1.5);
        const MarginalSet mar = compute_marginals(m);
        const GaussianMoments mo = build_moments(m, mar, N);
        const CountVector truth = sufficient_stats(sample_population(m, mar, static_cast<std::int64_t>(N), 7000 + rep), m);
        ObservationSet y = observe_all(as_double(truth), NoiseModel::gaussian(variance));
        if (n > 2 && rep % 3 == 0) y.values[rng() % n].reset();
        const EpResult got = run_ep(m, mo, y);
        const NodePosterior want = condition_exact(factorize(mo, m), y);
        double scale = 1.0;
        for (const Vector& v : want.full_means) scale = std::max(scale, v.cwiseAbs().maxCoeff());
        for (int u = 0; u < n; ++u) worst = std::max(worst, max_abs_diff(got.posterior.full_means[u], want.full_means[u]) / scale);
        max_sweeps = std::max(max_sweeps, got.diagnostics.sweeps);
        if (!got.diagnostics.converged) ++unconverged;
    }
    return {worst < 1e-6 && max_sweeps <= 3 && unconverged == 0,
            std::to_string(runs) + " trees, max relative diff " + fmt("%.2e", worst) + ", max sweeps " +
                std::to_string(max_sweeps) + ", unconverged " + std::to_string(unconverged)};
}

Outcome oracle_accuracy() {
    std::map<std::int64_t, double> node_error;
    std::map<std::int64_t, double> edge_error;
    for (std::int64_t N : {8, 32}) {
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            const OracleInstance s = oracle_instance(seed, N);
            const PosteriorMeans exact = enumerate_posterior(s.model, s.y, N);
            const GaussianMoments mo = build_moments(s.model, s.marginals, static_cast<double>(N));
            const EpResult ep = run_ep(s.model, mo, s.y);
            node_error[N] += relative_l1_error(ep.posterior.full_means, exact.node_means) / 20.0;
            edge_error[N] += relative_l1_error(edge_posteriors(mo, ep.posterior.means), exact.edge_means) / 20.0;
        }
    }
    const bool pass = node_error[8] <= 0.25 && node_error[32] < node_error[8] &&
                      edge_error[32] <= 1.5 * node_error[32] + 0.05;
    return {pass, "node error N=8 " + fmt("%.4f", node_error[8]) + ", N=32 " + fmt("%.4f", node_error[32]) +
                      "; edge error N=8 " + fmt("%.4f", edge_error[8]) + ", N=32 " + fmt("%.4f", edge_error[32])};
}

Outcome baseline_validity() {
    const OracleInstance s = oracle_instance(0, 8);
    const PosteriorMeans exact = enumerate_posterior(s.model, s.y, s.N);
    BaselineOptions opt;
    opt.burn_in = 2000;
    opt.iterations = 20000;
    opt.seed = 11;
    const BaselineResult r = sample_posterior_baseline(s.model, s.y, s.N, opt);
    double worst = 0.0;
    int coords = 0;
    const auto compare = [&](double est, double truth, double mcse) {
        ++coords;
        const double gap = std::abs(est - truth);
        worst = std::max(worst, gap <= 1e-9 ? 0.0 : gap / mcse);
    };
    for (int u = 0; u < 4; ++u) {
        for (Eigen::Index i = 0; i < 2; ++i) compare(r.node_means[u](i), exact.node_means[u](i), r.node_mcse[u](i));
    }
    for (int e = 0; e < 3; ++e) {
        for (Eigen::Index k = 0; k < 4; ++k) {
            compare(r.edge_means[e].data()[k], exact.edge_means[e].data()[k], r.edge_mcse[e].data()[k]);
        }
    }
    return {worst <= 3.0, std::to_string(coords) + " node and edge means, worst " + fmt("%.2f", worst) +
                              " MCSE, acceptance rate " + fmt("%.3f", r.acceptance_rate)};
}

Outcome em_recovery() {
    GridConfig g;
    g.side = 2;
    g.horizon = 5;
    g.N = 2000;
    g.w = Weights(1, 2, 2, 2);
    g.lambda = 1.0;
    g.seed = 1;
    EMConfig cfg;
    cfg.init_w = Weights(0.2, 0.4, 0.4, 0.4);
    cfg.max_em_iters = 20;
    cfg.true_w = g.w;
    const EMTrace trace = run_em(generate(g), cfg);
    const EMIteration& first = trace.iterations.front();
    const EMIteration& last = trace.iterations.back();
    std::ostringstream w;
    w << last.w.transpose();
    return {last.iter <= 20 && last.rel_error <= 0.30 && last.rel_error < first.rel_error,
            "relative error " + fmt("%.4f", first.rel_error) + " -> " + fmt("%.4f", last.rel_error) + " after " +
                std::to_string(last.iter) + " iterations, w = (" + w.str() + ")"};
}

Outcome ep_budget() {
    EpOptions opt;
    opt.max_sweeps = 10;
    opt.tolerance = 1e-6;
    int chain_ok = 0;
    int chain_runs = 0;
    for (std::int64_t N : {8, 32}) {
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            const OracleInstance s = oracle_instance(seed, N);
            const GaussianMoments mo = build_moments(s.model, s.marginals, static_cast<double>(N));
            chain_ok += run_ep(s.model, mo, s.y, opt).diagnostics.converged ? 1 : 0;
            ++chain_runs;
        }
    }
    int grid_ok = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        GridConfig g;
        g.side = 3;
        g.horizon = 6;
        g.N = 500;
        g.seed = seed;
        const Dataset ds = generate(g);
        const TreeModel m = build_chain_model(ds.config);
        const GaussianMoments mo = build_moments(m, compute_marginals(m), 500.0);
        grid_ok += run_ep(m, mo, ds.observations, opt).diagnostics.converged ? 1 : 0;
    }
    return {chain_ok >= 0.9 * chain_runs && grid_ok >= 18,
            "converged within 10 sweeps: chain " + std::to_string(chain_ok) + "/" + std::to_string(chain_runs) +
                ", 3x3 grid " + std::to_string(grid_ok) + "/20"};
}

Outcome scaling() {
    const fs::path dir = fs::temp_directory_path() / "gcgm_acceptance_benchmark";
    fs::remove_all(dir);
    const std::string cmd = std::string(GCGM_CLI_PATH) + " --seed 1 --out-dir " + dir.string() +
                            " benchmark --L 16,36,64,100 --n-per-state 100 --repeats 3 > /dev/null";
    if (std::system(cmd.c_str()) != 0) return {false, "benchmark command failed"};
    std::ifstream in(dir / "benchmark.csv");
    std::string line;
    for (int k = 0; k < 3; ++k) std::getline(in, line);
    std::vector<double> logL;
    std::vector<double> logT;
    std::vector<double> times;
    std::string detail = "node seconds";
    while (std::getline(in, line)) {
        std::vector<std::string> cells;
        std::stringstream ss(line);
        for (std::string c; std::getline(ss, c, ',');) cells.push_back(c);
        if (cells.size() != 7 || cells[6] != "ok") return {false, "row failed: " + line};
        const double L = std::stod(cells[0]);
        const double t = std::stod(cells[2]);
        logL.push_back(std::log(L));
        logT.push_back(std::log(t));
        times.push_back(t);
        detail += " " + cells[0] + ":" + fmt("%.4f", t);
    }
    if (times.size() != 4) return {false, "expected 4 rows"};
    bool monotone = true;
    for (std::size_t k = 1; k < times.size(); ++k) monotone = monotone && times[k] >= times[k - 1];
    const double n = 4.0;
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (std::size_t k = 0; k < 4; ++k) {
        sx += logL[k];
        sy += logT[k];
        sxx += logL[k] * logL[k];
        sxy += logL[k] * logT[k];
    }
    const double slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    return {monotone && slope >= 1.5 && slope <= 3.5,
            detail + "; log-log slope " + fmt("%.2f", slope) + (monotone ? "" : "; not monotone")};
}

}  // namespace

int main() {
    criterion(1, "pmf reparametrization identity", 10, reparametrization_identity);
    criterion(2, "normalization and base measure", 5, normalization_and_base_measure);
    criterion(3, "moment matching", 60, moment_matching);
    criterion(4, "precision sparsity", 1, precision_sparsity);
    criterion(5, "reduction bijection", 5, transform_bijection);
    criterion(6, "EP exact under Gaussian noise", 10, ep_exactness);
    criterion(7, "GCGM+EP oracle accuracy", 120, oracle_accuracy);
    criterion(8, "MCMC baseline validity", 120, baseline_validity);
    criterion(9, "EM recovery", 600, em_recovery);
    criterion(10, "EP convergence budget", kNoBudget, ep_budget);
    criterion(11, "benchmark scaling", kNoBudget, scaling);
    std::printf("%d of 11 criteria failed\n", failures);
    return failures == 0 ? 0 : 1;
}
