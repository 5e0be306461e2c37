#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "gcgm/error.hpp"
#include "gcgm/linalg.hpp"
#include "gcgm/tree_model.hpp"

namespace gcgm {

using CountVec = Eigen::Matrix<std::int64_t, Eigen::Dynamic, 1>;
using CountTable = Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic>;

/// CGM sufficient statistics of a population of size N: one count vector per
/// node and one count table per edge (rows index edges[e].first).
struct CountVector {
    std::int64_t N = 0;
    std::vector<CountVec> node_counts;
    std::vector<CountTable> edge_counts;

    friend bool operator==(const CountVector&, const CountVector&) = default;
};

inline CountVector zero_counts(const TreeModel& model, std::int64_t N) {
    CountVector n;
    n.N = N;
    n.node_counts.assign(model.node_count, CountVec::Zero(model.domain_size));
    n.edge_counts.assign(model.edges.size(), CountTable::Zero(model.domain_size, model.domain_size));
    return n;
}

/// True iff all totals equal N and every edge table marginalizes onto its
/// endpoint node vectors. Integer arithmetic only.
inline bool check_support(const TreeModel& model, const CountVector& n) {
    const int L = model.domain_size;
    if (static_cast<int>(n.node_counts.size()) != model.node_count ||
        n.edge_counts.size() != model.edges.size()) {
        return false;
    }
    for (const auto& c : n.node_counts) {
        if (c.size() != L || (c.array() < 0).any() || c.sum() != n.N) return false;
    }
    for (std::size_t e = 0; e < model.edges.size(); ++e) {
        const CountTable& t = n.edge_counts[e];
        if (t.rows() != L || t.cols() != L || (t.array() < 0).any() || t.sum() != n.N) return false;
        if (t.rowwise().sum() != n.node_counts[model.edges[e].first]) return false;
        if (t.colwise().sum().transpose() != n.node_counts[model.edges[e].second]) return false;
    }
    return true;
}

/// Observation noise attached to node counts.
struct NoiseModel {
    enum class Kind { Exact, Gaussian, Poisson };

    Kind kind = Kind::Poisson;
    /// Variance for Gaussian noise, intensity lambda for Poisson; unused for Exact.
    double parameter = 1.0;

    static NoiseModel exact() { return {Kind::Exact, 0.0}; }
    static NoiseModel gaussian(double variance) {
        if (!(variance > 0.0)) throw Error(ErrorCode::InvalidArgument, "Gaussian noise variance must be > 0");
        return {Kind::Gaussian, variance};
    }
    static NoiseModel poisson(double lambda) {
        if (!(lambda > 0.0)) throw Error(ErrorCode::InvalidArgument, "Poisson intensity must be > 0");
        return {Kind::Poisson, lambda};
    }
};

inline const char* to_string(NoiseModel::Kind kind) {
    switch (kind) {
        case NoiseModel::Kind::Exact: return "exact";
        case NoiseModel::Kind::Gaussian: return "gaussian";
        case NoiseModel::Kind::Poisson: return "poisson";
    }
    return "unknown";
}

/// Node-level observations. Unobserved nodes hold std::nullopt.
struct ObservationSet {
    std::vector<std::optional<Vector>> values;
    NoiseModel noise;

    [[nodiscard]] bool observed(int u) const { return values[u].has_value(); }

    static ObservationSet none(int node_count, NoiseModel noise = NoiseModel::poisson(1.0)) {
        return {std::vector<std::optional<Vector>>(node_count), noise};
    }
};

inline void validate_observations(const TreeModel& model, const ObservationSet& y) {
    if (static_cast<int>(y.values.size()) != model.node_count) {
        throw Error(ErrorCode::ShapeMismatch, "observation set must have one slot per node");
    }
    for (std::size_t u = 0; u < y.values.size(); ++u) {
        if (!y.values[u]) continue;
        const Vector& v = *y.values[u];
        if (v.size() != model.domain_size) {
            throw Error(ErrorCode::ShapeMismatch, "observation for node " + std::to_string(u) + " must have length L");
        }
        if (!v.allFinite() || (v.array() < 0.0).any()) {
            throw Error(ErrorCode::InvalidArgument, "observations must be finite and nonnegative");
        }
        if (y.noise.kind == NoiseModel::Kind::Poisson &&
            (v.array() != v.array().round()).any()) {
            throw Error(ErrorCode::InvalidArgument, "Poisson observations must be integers");
        }
    }
}

/// log p(y_u | n_u) for integer node counts under the given noise model.
inline double observation_log_likelihood(const NoiseModel& noise, const Vector& y, const CountVec& counts) {
    double acc = 0.0;
    for (Eigen::Index i = 0; i < y.size(); ++i) {
        const double n = static_cast<double>(counts(i));
        switch (noise.kind) {
            case NoiseModel::Kind::Exact:
                if (y(i) != n) return kNegInf;
                break;
            case NoiseModel::Kind::Gaussian: {
                const double d = y(i) - n;
                acc += -0.5 * d * d / noise.parameter - 0.5 * std::log(2.0 * std::numbers::pi * noise.parameter);
                break;
            }
            case NoiseModel::Kind::Poisson: {
                const double rate = noise.parameter * n;
                if (rate == 0.0) {
                    if (y(i) != 0.0) return kNegInf;
                } else {
                    acc += y(i) * std::log(rate) - rate - std::lgamma(y(i) + 1.0);
                }
                break;
            }
        }
    }
    return acc;
}

}  // namespace gcgm
