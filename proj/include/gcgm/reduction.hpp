#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "gcgm/counts.hpp"
#include "gcgm/error.hpp"
#include "gcgm/linalg.hpp"
#include "gcgm/tree_model.hpp"

namespace gcgm {

/// Reduced coordinates of one node's count vector. The reference state is
/// dropped and reconstructed from the population total; pruned states carry
/// (near) zero probability and are fixed at zero. Without pruning the
/// reference is the last state L.
struct NodeBasis {
    int domain_size = 0;
    std::vector<int> free_states;
    int reference = 0;
    std::vector<int> pruned;

    [[nodiscard]] int dim() const { return static_cast<int>(free_states.size()); }

    static NodeBasis full(int L) {
        NodeBasis b;
        b.domain_size = L;
        for (int i = 0; i + 1 < L; ++i) b.free_states.push_back(i);
        b.reference = L - 1;
        return b;
    }

    /// Keeps states with probability >= threshold; the last kept state is the reference.
    static NodeBasis from_marginal(const Vector& mu, double threshold) {
        NodeBasis b;
        b.domain_size = static_cast<int>(mu.size());
        std::vector<int> kept;
        for (int i = 0; i < b.domain_size; ++i) {
            (mu(i) >= threshold ? kept : b.pruned).push_back(i);
        }
        if (kept.empty()) throw Error(ErrorCode::DomainError, "every state of a node falls below the pruning threshold");
        b.reference = kept.back();
        kept.pop_back();
        b.free_states = std::move(kept);
        return b;
    }
};

template <class Derived>
auto reduce_node(const NodeBasis& basis, const Eigen::MatrixBase<Derived>& full) {
    using Scalar = typename Derived::Scalar;
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> out(basis.dim());
    for (int k = 0; k < basis.dim(); ++k) out(k) = full(basis.free_states[k]);
    return out;
}

/// Rebuilds the full node vector: free entries copied, the reference entry set
/// to N minus their sum, pruned entries zero.
template <class Derived>
auto lift_node(const NodeBasis& basis, const Eigen::MatrixBase<Derived>& reduced, typename Derived::Scalar N) {
    using Scalar = typename Derived::Scalar;
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> out = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>::Zero(basis.domain_size);
    Scalar rest = N;
    for (int k = 0; k < basis.dim(); ++k) {
        out(basis.free_states[k]) = reduced(k);
        rest -= reduced(k);
    }
    out(basis.reference) = rest;
    return out;
}

/// Jacobian of lift_node: full = lift_matrix * reduced + N * e_reference.
inline Matrix lift_matrix(const NodeBasis& basis) {
    Matrix a = Matrix::Zero(basis.domain_size, basis.dim());
    for (int k = 0; k < basis.dim(); ++k) {
        a(basis.free_states[k], k) = 1.0;
        a(basis.reference, k) = -1.0;
    }
    return a;
}

template <class Derived>
auto reduce_edge(const NodeBasis& first, const NodeBasis& second, const Eigen::MatrixBase<Derived>& table) {
    using Scalar = typename Derived::Scalar;
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> out(first.dim(), second.dim());
    for (int a = 0; a < first.dim(); ++a) {
        for (int b = 0; b < second.dim(); ++b) out(a, b) = table(first.free_states[a], second.free_states[b]);
    }
    return out;
}

/// Rebuilds a full edge table from its reduced sub-table and the two full
/// endpoint vectors: the reference column and row come from row and column
/// sums, and the reference corner from the total N.
template <class Derived, class DerivedU, class DerivedV>
auto lift_edge(const NodeBasis& first, const NodeBasis& second, const Eigen::MatrixBase<Derived>& reduced,
               const Eigen::MatrixBase<DerivedU>& full_first, const Eigen::MatrixBase<DerivedV>& full_second,
               typename Derived::Scalar N) {
    using Scalar = typename Derived::Scalar;
    using Table = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
    Table out = Table::Zero(first.domain_size, second.domain_size);
    const int ru = first.reference;
    const int rv = second.reference;
    Scalar corner = N;
    for (int a = 0; a < first.dim(); ++a) {
        const int i = first.free_states[a];
        Scalar row = full_first(i);
        for (int b = 0; b < second.dim(); ++b) {
            out(i, second.free_states[b]) = reduced(a, b);
            row -= reduced(a, b);
        }
        out(i, rv) = row;
        corner -= full_first(i);
    }
    for (int b = 0; b < second.dim(); ++b) {
        const int j = second.free_states[b];
        Scalar col = full_second(j);
        for (int a = 0; a < first.dim(); ++a) col -= reduced(a, b);
        out(ru, j) = col;
        corner -= col;
    }
    out(ru, rv) = corner;
    return out;
}

/// Reduced representation of a whole count vector.
struct ReducedCounts {
    std::int64_t N = 0;
    std::vector<CountVec> nodes;
    std::vector<CountTable> edges;
};

/// Node bases plus the edge list; maps CountVectors to and from reduced form.
struct ReductionTransform {
    std::vector<NodeBasis> nodes;
    std::vector<std::pair<int, int>> edges;

    static ReductionTransform full(const TreeModel& model) {
        ReductionTransform t;
        t.nodes.assign(model.node_count, NodeBasis::full(model.domain_size));
        t.edges = model.edges;
        return t;
    }

    [[nodiscard]] ReducedCounts reduce(const CountVector& n) const {
        ReducedCounts r;
        r.N = n.N;
        for (std::size_t u = 0; u < nodes.size(); ++u) r.nodes.push_back(reduce_node(nodes[u], n.node_counts[u]));
        for (std::size_t e = 0; e < edges.size(); ++e) {
            r.edges.push_back(reduce_edge(nodes[edges[e].first], nodes[edges[e].second], n.edge_counts[e]));
        }
        return r;
    }

    [[nodiscard]] CountVector lift(const ReducedCounts& r) const {
        CountVector n;
        n.N = r.N;
        for (std::size_t u = 0; u < nodes.size(); ++u) n.node_counts.push_back(lift_node(nodes[u], r.nodes[u], r.N));
        for (std::size_t e = 0; e < edges.size(); ++e) {
            const auto [u, v] = edges[e];
            n.edge_counts.push_back(
                lift_edge(nodes[u], nodes[v], r.edges[e], n.node_counts[u], n.node_counts[v], r.N));
        }
        return n;
    }
};

/// Selector block T_{D,A}(i_D, i_A) = I(i_D agrees with i_A) for an edge
/// clique A = {u, v} with configurations ordered i * L + j. Rows are the
/// reduced indicators of u, then v, then the (L-1) x (L-1) edge sub-table.
inline Matrix edge_clique_transform(int L) {
    const int m = L - 1;
    Matrix t = Matrix::Zero(2 * m + m * m, L * L);
    for (int i = 0; i < L; ++i) {
        for (int j = 0; j < L; ++j) {
            const int col = i * L + j;
            if (i < m) t(i, col) = 1.0;
            if (j < m) t(m + j, col) = 1.0;
            if (i < m && j < m) t(2 * m + i * m + j, col) = 1.0;
        }
    }
    return t;
}

/// The square map from the full edge indicators minus the all-reference
/// configuration to the reduced indicators of the clique and its sub-cliques.
inline Matrix edge_reconstruction_matrix(int L) {
    const Matrix t = edge_clique_transform(L);
    return t.leftCols(L * L - 1);
}

/// Block-diagonal transform over every node and edge block of a model, with
/// the full indicator vector ordered as all node blocks then all edge blocks.
inline Matrix model_transform(const TreeModel& model) {
    const int L = model.domain_size;
    const int n = model.node_count;
    const int E = model.edge_count();
    const int m = L - 1;
    Matrix t = Matrix::Zero(n * m + E * (2 * m + m * m) - E * 2 * m, n * L + E * L * L);
    for (int u = 0; u < n; ++u) {
        for (int i = 0; i < m; ++i) t(u * m + i, u * L + i) = 1.0;
    }
    const Matrix clique = edge_clique_transform(L);
    for (int e = 0; e < E; ++e) {
        t.block(n * m + e * m * m, n * L + e * L * L, m * m, L * L) = clique.bottomRows(m * m);
    }
    return t;
}

}  // namespace gcgm
