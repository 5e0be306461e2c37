#pragma once

#include <vector>

#include "gcgm/error.hpp"
#include "gcgm/linalg.hpp"
#include "gcgm/reduction.hpp"
#include "gcgm/tree_model.hpp"

namespace gcgm {

struct MomentOptions {
    /// States whose marginal probability is below this are pruned from the
    /// reduced coordinates.
    double prune_threshold = 1e-12;
    /// Relative jitter: delta * N * I is added to any block whose smallest
    /// eigenvalue is below delta * N.
    double jitter = 1e-9;
};

/// Mean and covariance of (z~_first, z~_second) for one edge.
struct EdgeJoint {
    Vector mean;
    Matrix cov;
    bool jittered = false;
};

struct PrunedState {
    int node = 0;
    int state = 0;
    double probability = 0.0;
};

/// Moment-matched Gaussian approximation of the CGM in reduced coordinates:
/// mean N mu~ and covariance N (<mu~> - mu~ mu~^T), stored per node and per
/// edge joint. Full clique-by-clique covariance is never materialized.
struct GaussianMoments {
    double N = 0.0;
    ReductionTransform transform;
    MarginalSet marginals;
    std::vector<Vector> node_means;
    std::vector<Matrix> node_covs;
    std::vector<bool> node_jittered;
    std::vector<EdgeJoint> edge_joints;
    std::vector<PrunedState> pruned;

    [[nodiscard]] const NodeBasis& basis(int u) const { return transform.nodes[u]; }
    [[nodiscard]] int dim(int u) const { return transform.nodes[u].dim(); }
    [[nodiscard]] int node_count() const { return static_cast<int>(transform.nodes.size()); }
};

inline GaussianMoments build_moments(const TreeModel& model, const MarginalSet& marginals, double N,
                                     const MomentOptions& options = {}) {
    if (!(N > 0.0)) throw Error(ErrorCode::InvalidArgument, "population size must be positive");
    GaussianMoments m;
    m.N = N;
    m.marginals = marginals;
    m.transform.edges = model.edges;
    const double floor = options.jitter * N;

    for (int u = 0; u < model.node_count; ++u) {
        const Vector& mu = marginals.node_marginals[u];
        NodeBasis basis = NodeBasis::from_marginal(mu, options.prune_threshold);
        for (int i : basis.pruned) m.pruned.push_back({u, i, mu(i)});
        const Vector mt = reduce_node(basis, mu);
        Matrix cov = N * (Matrix(mt.asDiagonal()) - mt * mt.transpose());
        m.node_jittered.push_back(apply_jitter(cov, floor));
        m.node_means.push_back(N * mt);
        m.node_covs.push_back(std::move(cov));
        m.transform.nodes.push_back(std::move(basis));
    }

    for (std::size_t e = 0; e < model.edges.size(); ++e) {
        const auto [u, v] = model.edges[e];
        const NodeBasis& bu = m.transform.nodes[u];
        const NodeBasis& bv = m.transform.nodes[v];
        const int du = bu.dim();
        const int dv = bv.dim();
        Vector mt(du + dv);
        mt << reduce_node(bu, marginals.node_marginals[u]), reduce_node(bv, marginals.node_marginals[v]);
        Matrix second = Matrix::Zero(du + dv, du + dv);
        second.diagonal() = mt;
        const Matrix cross = reduce_edge(bu, bv, marginals.edge_marginals[e]);
        second.topRightCorner(du, dv) = cross;
        second.bottomLeftCorner(dv, du) = cross.transpose();
        EdgeJoint joint;
        joint.mean = N * mt;
        joint.cov = N * (second - mt * mt.transpose());
        joint.jittered = apply_jitter(joint.cov, floor);
        m.edge_joints.push_back(std::move(joint));
    }
    return m;
}

/// Mean and covariance of (z~_first, z~_second, z~_edge) for one edge, where
/// z~_edge is the free sub-table in row-major order. Materialized on demand;
/// the inference path never needs it.
inline Gaussian extended_block(const GaussianMoments& m, int e) {
    const auto [u, v] = m.transform.edges[e];
    const NodeBasis& bu = m.basis(u);
    const NodeBasis& bv = m.basis(v);
    const int du = bu.dim();
    const int dv = bv.dim();
    const int d = du + dv + du * dv;
    const Matrix& joint = m.marginals.edge_marginals[e];

    Vector mean(d);
    mean << reduce_node(bu, m.marginals.node_marginals[u]), reduce_node(bv, m.marginals.node_marginals[v]),
        Vector::Zero(du * dv);
    for (int a = 0; a < du; ++a) {
        for (int b = 0; b < dv; ++b) mean(du + dv + a * dv + b) = joint(bu.free_states[a], bv.free_states[b]);
    }

    Matrix second = Matrix::Zero(d, d);
    for (int a = 0; a < du; ++a) second(a, a) = mean(a);
    for (int b = 0; b < dv; ++b) second(du + b, du + b) = mean(du + b);
    for (int a = 0; a < du; ++a) {
        for (int b = 0; b < dv; ++b) {
            const int k = du + dv + a * dv + b;
            const double p = mean(k);
            second(a, du + b) = second(du + b, a) = p;
            second(a, k) = second(k, a) = p;
            second(du + b, k) = second(k, du + b) = p;
            second(k, k) = p;
        }
    }
    return {m.N * mean, m.N * (second - mean * mean.transpose())};
}

/// Block sparsity of the precision of the reduced node-level covariance.
struct PrecisionReport {
    Matrix precision;
    /// block_max(u, w) = max |Gamma_uw| / max |Gamma|.
    Matrix block_max;
};

/// Assembles the reduced covariance over all node blocks from exact pairwise
/// marginals (edges marginalized), inverts it and reports per-block magnitudes.
inline PrecisionReport precision_pattern(const TreeModel& model, const GaussianMoments& m) {
    const TreeTopology topo = make_topology(model);
    const int n = model.node_count;
    std::vector<int> offset(n + 1, 0);
    for (int u = 0; u < n; ++u) offset[u + 1] = offset[u] + m.dim(u);
    Matrix cov = Matrix::Zero(offset[n], offset[n]);
    for (int u = 0; u < n; ++u) {
        const Vector mu = reduce_node(m.basis(u), m.marginals.node_marginals[u]);
        for (int w = u; w < n; ++w) {
            const Vector mw = reduce_node(m.basis(w), m.marginals.node_marginals[w]);
            const Matrix pair = reduce_edge(m.basis(u), m.basis(w), pairwise_marginal(topo, m.marginals, u, w));
            const Matrix block = m.N * (pair - mu * mw.transpose());
            cov.block(offset[u], offset[w], m.dim(u), m.dim(w)) = block;
            cov.block(offset[w], offset[u], m.dim(w), m.dim(u)) = block.transpose();
        }
    }
    PrecisionReport report;
    report.precision = spd_inverse(cov, "reduced node-level covariance");
    const double scale = report.precision.cwiseAbs().maxCoeff();
    report.block_max = Matrix::Zero(n, n);
    for (int u = 0; u < n; ++u) {
        for (int w = 0; w < n; ++w) {
            if (m.dim(u) == 0 || m.dim(w) == 0) continue;
            report.block_max(u, w) =
                report.precision.block(offset[u], offset[w], m.dim(u), m.dim(w)).cwiseAbs().maxCoeff() / scale;
        }
    }
    return report;
}

}  // namespace gcgm
