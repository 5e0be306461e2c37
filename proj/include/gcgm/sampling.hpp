#pragma once

#include <algorithm>
#include <cstdint>
#include <random>
#include <vector>

#include "gcgm/counts.hpp"
#include "gcgm/tree_model.hpp"

namespace gcgm {

/// Every stochastic routine draws from a std::mt19937_64 seeded with the
/// caller's explicit seed. Identical seeds give identical output on the same
/// standard library.
using Rng = std::mt19937_64;

inline double uniform01(Rng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

/// Draws from a cumulative table; the last entry need not be exactly 1.
inline int draw_from_cdf(const std::vector<double>& cdf, Rng& rng) {
    const double u = uniform01(rng) * cdf.back();
    const auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
    return static_cast<int>(std::min<std::ptrdiff_t>(it - cdf.begin(), static_cast<std::ptrdiff_t>(cdf.size()) - 1));
}

/// Exact draws from a tree model: root from its marginal, then each child
/// from the conditional <mu_uv>(i, .) / mu_u(i) in root-first order.
class AncestralSampler {
public:
    AncestralSampler(const TreeModel& model, const MarginalSet& marginals)
        : topo_(make_topology(model)), L_(model.domain_size) {
        root_cdf_ = cumulative(marginals.node_marginals[model.root]);
        child_cdf_.assign(model.node_count, {});
        for (int v : topo_.preorder) {
            if (v == topo_.root) continue;
            const int e = topo_.parent_edge[v];
            const Matrix joint = oriented(marginals.edge_marginals[e], topo_.edge_forward[e]);
            auto& rows = child_cdf_[v];
            rows.resize(static_cast<std::size_t>(L_));
            for (int i = 0; i < L_; ++i) {
                Vector row = joint.row(i).transpose();
                if (row.sum() <= 0.0) row.setConstant(1.0);
                rows[i] = cumulative(row);
            }
        }
    }

    void sample(Rng& rng, std::vector<int>& x) const {
        x.resize(topo_.parent.size());
        for (int v : topo_.preorder) {
            if (v == topo_.root) {
                x[v] = draw_from_cdf(root_cdf_, rng);
            } else {
                x[v] = draw_from_cdf(child_cdf_[v][x[topo_.parent[v]]], rng);
            }
        }
    }

private:
    static std::vector<double> cumulative(const Vector& p) {
        std::vector<double> cdf(static_cast<std::size_t>(p.size()));
        double acc = 0.0;
        for (Eigen::Index i = 0; i < p.size(); ++i) {
            acc += std::max(p(i), 0.0);
            cdf[i] = acc;
        }
        return cdf;
    }

    TreeTopology topo_;
    int L_;
    std::vector<double> root_cdf_;
    std::vector<std::vector<std::vector<double>>> child_cdf_;
};

/// N i.i.d. individual trajectories; trajectories[m][u] is the state of node u.
struct Population {
    int node_count = 0;
    std::vector<std::vector<int>> trajectories;

    [[nodiscard]] std::int64_t size() const { return static_cast<std::int64_t>(trajectories.size()); }
    friend bool operator==(const Population&, const Population&) = default;
};

inline Population sample_population(const TreeModel& model, const MarginalSet& marginals, std::int64_t N,
                                    std::uint64_t seed) {
    if (N < 1) throw Error(ErrorCode::InvalidArgument, "population size must be >= 1");
    AncestralSampler sampler(model, marginals);
    Rng rng(seed);
    Population pop;
    pop.node_count = model.node_count;
    pop.trajectories.resize(static_cast<std::size_t>(N));
    for (auto& x : pop.trajectories) sampler.sample(rng, x);
    return pop;
}

inline Population sample_population(const TreeModel& model, std::int64_t N, std::uint64_t seed) {
    return sample_population(model, compute_marginals(model), N, seed);
}

inline void add_individual(const TreeModel& model, std::span<const int> x, std::int64_t weight, CountVector& n) {
    for (int u = 0; u < model.node_count; ++u) n.node_counts[u](x[u]) += weight;
    for (std::size_t e = 0; e < model.edges.size(); ++e) {
        n.edge_counts[e](x[model.edges[e].first], x[model.edges[e].second]) += weight;
    }
}

inline CountVector sufficient_stats(const Population& pop, const TreeModel& model) {
    if (pop.node_count != model.node_count) {
        throw Error(ErrorCode::ShapeMismatch, "population node_count differs from model");
    }
    CountVector n = zero_counts(model, pop.size());
    for (const auto& x : pop.trajectories) {
        if (static_cast<int>(x.size()) != model.node_count) {
            throw Error(ErrorCode::ShapeMismatch, "trajectory length differs from node_count");
        }
        for (int v : x) {
            if (v < 0 || v >= model.domain_size) throw Error(ErrorCode::ShapeMismatch, "trajectory state out of range");
        }
        add_individual(model, x, 1, n);
    }
    return n;
}

}  // namespace gcgm
