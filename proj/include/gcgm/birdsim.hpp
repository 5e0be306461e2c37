#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "gcgm/counts.hpp"
#include "gcgm/error.hpp"
#include "gcgm/linalg.hpp"
#include "gcgm/sampling.hpp"
#include "gcgm/tree_model.hpp"

namespace gcgm {

using Weights = Eigen::Vector4d;
using Wind = std::array<double, 2>;

/// Grid migration setup. Cells are indexed y * side + x on the integer
/// lattice {0..side-1}^2; cell 0 is the bottom-left start and cell L-1 the
/// upper-right destination. wind[t] drives the transition from step t to t+1.
struct GridConfig {
    int side = 2;
    int horizon = 5;
    Weights w = Weights(1.0, 2.0, 2.0, 2.0);
    double lambda = 1.0;
    std::int64_t N = 1000;
    std::uint64_t seed = 0;
    std::vector<Wind> wind;

    [[nodiscard]] int cells() const { return side * side; }

    void validate() const {
        if (side < 2) throw Error(ErrorCode::InvalidArgument, "grid side must be >= 2");
        if (horizon < 2) throw Error(ErrorCode::InvalidArgument, "horizon must be >= 2");
        if (!(lambda > 0.0)) throw Error(ErrorCode::InvalidArgument, "lambda must be > 0");
        if (N < 1) throw Error(ErrorCode::InvalidArgument, "population size must be >= 1");
        if (!w.allFinite()) throw Error(ErrorCode::NonFinite, "feature weights must be finite");
        if (!wind.empty()) {
            if (static_cast<int>(wind.size()) != horizon - 1) {
                throw Error(ErrorCode::ShapeMismatch, "wind needs one vector per transition (horizon - 1)");
            }
            for (const Wind& v : wind) {
                if (std::abs(std::hypot(v[0], v[1]) - 1.0) > 1e-9) {
                    throw Error(ErrorCode::InvalidArgument, "wind vectors must have unit length");
                }
            }
        }
    }
};

/// Independent seeds for the separate random streams of one run.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint32_t stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), stream};
    std::array<std::uint32_t, 2> out{};
    seq.generate(out.begin(), out.end());
    return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

/// Fills in a seeded wind sequence when none is given.
inline GridConfig resolve_wind(GridConfig config) {
    config.validate();
    if (!config.wind.empty()) return config;
    Rng rng(derive_seed(config.seed, 0));
    for (int t = 0; t + 1 < config.horizon; ++t) {
        const double angle = 2.0 * std::numbers::pi * uniform01(rng);
        config.wind.push_back({std::cos(angle), std::sin(angle)});
    }
    return config;
}

namespace detail {

inline std::array<double, 2> cell_center(int cell, int side) {
    return {static_cast<double>(cell % side), static_cast<double>(cell / side)};
}

inline double cosine(double ax, double ay, double bx, double by) {
    const double na = std::hypot(ax, ay);
    const double nb = std::hypot(bx, by);
    if (na == 0.0 || nb == 0.0) return 0.0;
    return (ax * bx + ay * by) / (na * nb);
}

}  // namespace detail

/// (-distance, cos to destination, cos to wind, stay indicator) for a move i -> j at step t.
inline Weights features(int i, int j, int t, const GridConfig& config) {
    const int L = config.cells();
    if (i < 0 || i >= L || j < 0 || j >= L) throw Error(ErrorCode::InvalidArgument, "cell index outside the grid");
    if (t < 0 || t >= static_cast<int>(config.wind.size())) {
        throw Error(ErrorCode::InvalidArgument, "no wind vector for this step; call resolve_wind first");
    }
    const auto ci = detail::cell_center(i, config.side);
    const auto cj = detail::cell_center(j, config.side);
    const auto dest = detail::cell_center(L - 1, config.side);
    const double mx = cj[0] - ci[0];
    const double my = cj[1] - ci[1];
    Weights f;
    f(0) = -std::hypot(mx, my);
    f(1) = (i == j || i == L - 1) ? 0.0 : detail::cosine(mx, my, dest[0] - ci[0], dest[1] - ci[1]);
    f(2) = i == j ? 0.0 : detail::cosine(mx, my, config.wind[t][0], config.wind[t][1]);
    f(3) = i == j ? 1.0 : 0.0;
    return f;
}

/// Row i holds log p(j | i, t) = w'f(i, j, t) - logsumexp_k w'f(i, k, t).
inline Matrix log_transition_matrix(const GridConfig& config, int t) {
    const int L = config.cells();
    Matrix logits(L, L);
    for (int i = 0; i < L; ++i) {
        for (int j = 0; j < L; ++j) logits(i, j) = config.w.dot(features(i, j, t, config));
    }
    for (int i = 0; i < L; ++i) {
        const double z = log_sum_exp(logits.row(i).transpose());
        logits.row(i).array() -= z;
    }
    return logits;
}

inline Matrix transition_matrix(const GridConfig& config, int t) {
    return log_transition_matrix(config, t).array().exp().matrix();
}

/// Log-potential that pins the first step to the start cell.
inline constexpr double kStartPenalty = -50.0;

/// Chain over `horizon` steps with edges (t, t+1) carrying log transition
/// probabilities; the root table puts essentially all mass on cell 0.
inline TreeModel build_chain_model(const GridConfig& config) {
    const GridConfig c = resolve_wind(config);
    TreeModel m;
    m.node_count = c.horizon;
    m.domain_size = c.cells();
    m.root = 0;
    for (int t = 0; t + 1 < c.horizon; ++t) {
        m.edges.emplace_back(t, t + 1);
        m.log_potentials.push_back(log_transition_matrix(c, t));
    }
    Vector root = Vector::Constant(c.cells(), kStartPenalty);
    root(0) = 0.0;
    m.root_log_potential = root;
    validate_tree(m);
    return m;
}

/// Simulated population counts and their noisy observations.
struct Dataset {
    GridConfig config;
    CountVector counts;
    ObservationSet observations;
};

/// Observations of the simulated counts under `noise`: Poisson draws at the
/// noise intensity, additive Gaussian draws, or the counts themselves.
inline Dataset generate(const GridConfig& config, const NoiseModel& noise) {
    Dataset ds;
    ds.config = resolve_wind(config);
    const TreeModel model = build_chain_model(ds.config);
    const Population pop = sample_population(model, ds.config.N, derive_seed(ds.config.seed, 1));
    ds.counts = sufficient_stats(pop, model);
    ds.observations = ObservationSet::none(model.node_count, noise);
    Rng rng(derive_seed(ds.config.seed, 2));
    for (int t = 0; t < model.node_count; ++t) {
        const Vector n = ds.counts.node_counts[t].cast<double>();
        Vector y(model.domain_size);
        for (int i = 0; i < model.domain_size; ++i) {
            switch (noise.kind) {
                case NoiseModel::Kind::Poisson: {
                    const double rate = noise.parameter * n(i);
                    y(i) = rate > 0.0 ? static_cast<double>(std::poisson_distribution<std::int64_t>(rate)(rng)) : 0.0;
                    break;
                }
                case NoiseModel::Kind::Gaussian:
                    y(i) = n(i) + std::normal_distribution<double>(0.0, std::sqrt(noise.parameter))(rng);
                    break;
                case NoiseModel::Kind::Exact: y(i) = n(i); break;
            }
        }
        ds.observations.values[t] = std::move(y);
    }
    return ds;
}

/// Poisson observations with intensity config.lambda.
inline Dataset generate(const GridConfig& config) { return generate(config, NoiseModel::poisson(config.lambda)); }

}  // namespace gcgm
