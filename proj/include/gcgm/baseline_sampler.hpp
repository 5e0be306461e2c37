#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "gcgm/cgm.hpp"
#include "gcgm/counts.hpp"
#include "gcgm/sampling.hpp"
#include "gcgm/tree_model.hpp"

namespace gcgm {

struct BaselineOptions {
    std::int64_t burn_in = 1000;
    std::int64_t iterations = 10000;
    std::uint64_t seed = 0;
    /// Number of batches for the batch-means standard error.
    int batches = 50;
};

struct BaselineResult {
    std::vector<Vector> node_means;
    std::vector<Matrix> edge_means;
    /// Batch-means Monte Carlo standard errors, same shapes as the means.
    std::vector<Vector> node_mcse;
    std::vector<Matrix> edge_mcse;
    double acceptance_rate = 0.0;
    std::int64_t sweeps = 0;
};

/// Posterior-mean baseline that works in individual space. The state is N
/// explicit trajectories. Each sweep visits every individual once and proposes
/// a fresh trajectory drawn exactly from the individual model; the proposal is
/// accepted with probability min(1, p(y | n') / p(y | n)), since observations
/// couple individuals only through the node counts. When the current state has
/// zero likelihood every proposal is accepted until the support is reached.
///
/// With `iterations == 0` the counts of the initial population are returned.
inline BaselineResult sample_posterior_baseline(const TreeModel& model, const ObservationSet& y, std::int64_t N,
                                                const BaselineOptions& options,
                                                const std::optional<Population>& initial = std::nullopt) {
    validate_tree(model);
    validate_observations(model, y);
    if (N < 1) throw Error(ErrorCode::InvalidArgument, "population size must be >= 1");
    const MarginalSet marginals = compute_marginals(model);
    const AncestralSampler proposal(model, marginals);
    Rng rng(options.seed);

    Population pop;
    if (initial) {
        if (initial->size() != N) throw Error(ErrorCode::ShapeMismatch, "initial population size differs from N");
        pop = *initial;
    } else {
        pop.node_count = model.node_count;
        pop.trajectories.resize(static_cast<std::size_t>(N));
        for (auto& x : pop.trajectories) proposal.sample(rng, x);
    }
    CountVector counts = sufficient_stats(pop, model);

    const int L = model.domain_size;
    std::vector<double> node_ll(model.node_count, 0.0);
    auto node_loglik = [&](int u) {
        return y.values[u] ? observation_log_likelihood(y.noise, *y.values[u], counts.node_counts[u]) : 0.0;
    };
    for (int u = 0; u < model.node_count; ++u) node_ll[u] = node_loglik(u);

    BaselineResult out;
    out.node_means.assign(model.node_count, Vector::Zero(L));
    out.edge_means.assign(model.edges.size(), Matrix::Zero(L, L));
    out.node_mcse.assign(model.node_count, Vector::Zero(L));
    out.edge_mcse.assign(model.edges.size(), Matrix::Zero(L, L));
    if (options.iterations <= 0) {
        for (int u = 0; u < model.node_count; ++u) out.node_means[u] = counts.node_counts[u].cast<double>();
        for (std::size_t e = 0; e < model.edges.size(); ++e) out.edge_means[e] = counts.edge_counts[e].cast<double>();
        return out;
    }

    const int batches = static_cast<int>(std::max<std::int64_t>(1, std::min<std::int64_t>(options.batches, options.iterations)));
    const std::int64_t batch_len = options.iterations / batches;
    std::vector<std::vector<Vector>> batch_nodes(batches, out.node_means);
    std::vector<std::vector<Matrix>> batch_edges(batches, out.edge_means);
    std::vector<std::int64_t> batch_size(batches, 0);

    std::vector<int> candidate;
    std::vector<double> trial(model.node_count);
    std::int64_t accepted = 0;
    std::int64_t proposed = 0;
    const std::int64_t total = options.burn_in + options.iterations;
    for (std::int64_t sweep = 0; sweep < total; ++sweep) {
        for (auto& x : pop.trajectories) {
            proposal.sample(rng, candidate);
            ++proposed;
            double current = 0.0;
            double next = 0.0;
            add_individual(model, x, -1, counts);
            add_individual(model, candidate, 1, counts);
            for (int u = 0; u < model.node_count; ++u) {
                current += node_ll[u];
                trial[u] = (x[u] == candidate[u]) ? node_ll[u] : node_loglik(u);
                next += trial[u];
            }
            bool accept;
            if (current == kNegInf) {
                accept = true;
            } else if (next == kNegInf) {
                accept = false;
            } else {
                accept = std::log(uniform01(rng)) < next - current;
            }
            if (accept) {
                x.swap(candidate);
                node_ll = trial;
                ++accepted;
            } else {
                add_individual(model, candidate, -1, counts);
                add_individual(model, x, 1, counts);
            }
        }
        if (sweep < options.burn_in) continue;
        const std::int64_t k = sweep - options.burn_in;
        const int b = static_cast<int>(std::min<std::int64_t>(k / std::max<std::int64_t>(batch_len, 1), batches - 1));
        for (int u = 0; u < model.node_count; ++u) batch_nodes[b][u] += counts.node_counts[u].cast<double>();
        for (std::size_t e = 0; e < model.edges.size(); ++e) batch_edges[b][e] += counts.edge_counts[e].cast<double>();
        ++batch_size[b];
    }

    // Overall means and batch-means standard errors.
    const double n_samples = static_cast<double>(options.iterations);
    for (int b = 0; b < batches; ++b) {
        for (int u = 0; u < model.node_count; ++u) out.node_means[u] += batch_nodes[b][u] / n_samples;
        for (std::size_t e = 0; e < model.edges.size(); ++e) out.edge_means[e] += batch_edges[b][e] / n_samples;
    }
    if (batches > 1) {
        for (int b = 0; b < batches; ++b) {
            const double m = static_cast<double>(batch_size[b]);
            for (int u = 0; u < model.node_count; ++u) {
                out.node_mcse[u] += (batch_nodes[b][u] / m - out.node_means[u]).array().square().matrix();
            }
            for (std::size_t e = 0; e < model.edges.size(); ++e) {
                out.edge_mcse[e] += (batch_edges[b][e] / m - out.edge_means[e]).array().square().matrix();
            }
        }
        const double scale = 1.0 / (static_cast<double>(batches - 1) * batches);
        for (auto& v : out.node_mcse) v = (v * scale).array().sqrt();
        for (auto& t : out.edge_mcse) t = (t * scale).array().sqrt();
    }
    out.acceptance_rate = proposed > 0 ? static_cast<double>(accepted) / static_cast<double>(proposed) : 0.0;
    out.sweeps = total;
    return out;
}

}  // namespace gcgm
