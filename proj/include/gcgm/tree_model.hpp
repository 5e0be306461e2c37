#pragma once

#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gcgm/error.hpp"
#include "gcgm/linalg.hpp"

namespace gcgm {

/// Tree-structured discrete model in exponential-family form. Each edge
/// (u, v) carries an L x L log-potential table whose rows index the state of
/// `u` (the first endpoint) and whose columns index the state of `v`. The root
/// optionally carries a length-L log-potential. Node potentials elsewhere are
/// expected to be folded into an incident edge table by the caller.
struct TreeModel {
    int node_count = 0;
    int domain_size = 0;
    int root = 0;
    std::vector<std::pair<int, int>> edges;
    std::vector<Matrix> log_potentials;
    std::optional<Vector> root_log_potential;

    [[nodiscard]] int edge_count() const { return static_cast<int>(edges.size()); }
};

namespace detail {

struct DisjointSets {
    std::vector<int> parent;
    explicit DisjointSets(int n) : parent(static_cast<std::size_t>(n)) {
        std::iota(parent.begin(), parent.end(), 0);
    }
    int find(int x) {
        while (parent[x] != x) {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        return x;
    }
    bool unite(int a, int b) {
        a = find(a);
        b = find(b);
        if (a == b) return false;
        parent[b] = a;
        return true;
    }
};

}  // namespace detail

/// Throws `Error` unless the model is a single connected tree with
/// well-shaped, finite potential tables.
inline void validate_tree(const TreeModel& model) {
    if (model.node_count < 1) {
        throw Error(ErrorCode::ShapeMismatch, "node_count must be >= 1");
    }
    if (model.domain_size < 2) {
        throw Error(ErrorCode::ShapeMismatch, "domain_size must be >= 2");
    }
    if (model.root < 0 || model.root >= model.node_count) {
        throw Error(ErrorCode::ShapeMismatch, "root out of range");
    }
    for (std::size_t e = 0; e < model.edges.size(); ++e) {
        const auto [u, v] = model.edges[e];
        if (u < 0 || v < 0 || u >= model.node_count || v >= model.node_count) {
            throw Error(ErrorCode::ShapeMismatch, "edge " + std::to_string(e) + " endpoint out of range");
        }
    }

    detail::DisjointSets sets(model.node_count);
    for (std::size_t e = 0; e < model.edges.size(); ++e) {
        const auto [u, v] = model.edges[e];
        if (!sets.unite(u, v)) {
            throw Error(ErrorCode::CycleDetected, "edge " + std::to_string(e) + " closes a cycle");
        }
    }
    for (int u = 1; u < model.node_count; ++u) {
        if (sets.find(u) != sets.find(0)) {
            throw Error(ErrorCode::Disconnected, "node " + std::to_string(u) + " is not connected to node 0");
        }
    }

    const int L = model.domain_size;
    if (model.log_potentials.size() != model.edges.size()) {
        throw Error(ErrorCode::ShapeMismatch, "expected one log-potential table per edge");
    }
    for (std::size_t e = 0; e < model.log_potentials.size(); ++e) {
        const Matrix& t = model.log_potentials[e];
        if (t.rows() != L || t.cols() != L) {
            throw Error(ErrorCode::ShapeMismatch, "log_potentials[" + std::to_string(e) + "] must be L x L");
        }
        if (!t.allFinite()) {
            throw Error(ErrorCode::NonFinite, "log_potentials[" + std::to_string(e) + "] has non-finite entries");
        }
    }
    if (model.root_log_potential) {
        if (model.root_log_potential->size() != L) {
            throw Error(ErrorCode::ShapeMismatch, "root_log_potential must have length L");
        }
        if (!model.root_log_potential->allFinite()) {
            throw Error(ErrorCode::NonFinite, "root_log_potential has non-finite entries");
        }
    }
}

/// Orientation of a validated tree away from a root.
struct TreeTopology {
    int root = 0;
    std::vector<int> parent;       // -1 for the root
    std::vector<int> parent_edge;  // -1 for the root
    std::vector<std::vector<int>> child_edges;
    std::vector<std::vector<int>> incident_edges;
    std::vector<int> preorder;      // root-first depth-first order
    std::vector<int> edge_order;    // edges in the order their child appears in `preorder`
    std::vector<bool> edge_forward; // edges[e].first is the parent
    std::vector<std::pair<int, int>> edges;

    [[nodiscard]] int node_count() const { return static_cast<int>(parent.size()); }
    [[nodiscard]] int degree(int u) const { return static_cast<int>(incident_edges[u].size()); }
    [[nodiscard]] int edge_parent(int e) const { return edge_forward[e] ? edges[e].first : edges[e].second; }
    [[nodiscard]] int edge_child(int e) const { return edge_forward[e] ? edges[e].second : edges[e].first; }
    [[nodiscard]] int other_end(int e, int u) const { return edges[e].first == u ? edges[e].second : edges[e].first; }
};

inline TreeTopology make_topology(int node_count, const std::vector<std::pair<int, int>>& edges, int root) {
    TreeTopology topo;
    topo.root = root;
    topo.edges = edges;
    topo.parent.assign(node_count, -1);
    topo.parent_edge.assign(node_count, -1);
    topo.child_edges.assign(node_count, {});
    topo.incident_edges.assign(node_count, {});
    topo.edge_forward.assign(edges.size(), true);
    for (std::size_t e = 0; e < edges.size(); ++e) {
        topo.incident_edges[edges[e].first].push_back(static_cast<int>(e));
        topo.incident_edges[edges[e].second].push_back(static_cast<int>(e));
    }

    std::vector<bool> seen(node_count, false);
    std::vector<int> stack{root};
    seen[root] = true;
    while (!stack.empty()) {
        const int u = stack.back();
        stack.pop_back();
        topo.preorder.push_back(u);
        if (u != root) topo.edge_order.push_back(topo.parent_edge[u]);
        const auto& inc = topo.incident_edges[u];
        for (auto it = inc.rbegin(); it != inc.rend(); ++it) {
            const int e = *it;
            const int v = topo.other_end(e, u);
            if (seen[v]) continue;
            seen[v] = true;
            topo.parent[v] = u;
            topo.parent_edge[v] = e;
            topo.edge_forward[e] = (edges[e].first == u);
            stack.push_back(v);
        }
    }
    for (int u : topo.preorder) {
        for (int e : topo.incident_edges[u]) {
            if (e != topo.parent_edge[u]) topo.child_edges[u].push_back(e);
        }
    }
    return topo;
}

inline TreeTopology make_topology(const TreeModel& model) {
    return make_topology(model.node_count, model.edges, model.root);
}

/// Table oriented with rows indexing the parent endpoint.
inline Matrix oriented(const Matrix& table, bool forward) {
    return forward ? table : Matrix(table.transpose());
}

/// Normalized beliefs from log-space sum-product on a tree.
struct TreeBeliefs {
    std::vector<Vector> node;
    std::vector<Matrix> edge;  // stored edge orientation
    double log_partition = 0.0;
};

/// Exact sum-product on a tree whose variables may have different state
/// counts. `edge_log_tables[e]` has rows indexing the states of edges[e].first.
/// All messages are kept in log space.
inline TreeBeliefs tree_sum_product(const TreeTopology& topo, const std::vector<Vector>& node_log_potentials,
                                    const std::vector<Matrix>& edge_log_tables) {
    const int n = topo.node_count();
    std::vector<Vector> up(topo.edges.size());
    std::vector<Matrix> table(topo.edges.size());
    for (std::size_t e = 0; e < topo.edges.size(); ++e) {
        table[e] = oriented(edge_log_tables[e], topo.edge_forward[e]);
    }

    auto inside_excluding = [&](int u, int skip_edge) {
        Vector acc = node_log_potentials[u];
        for (int e : topo.child_edges[u]) {
            if (e != skip_edge) acc += up[e];
        }
        return acc;
    };

    std::vector<Vector> inside(n);
    for (auto it = topo.preorder.rbegin(); it != topo.preorder.rend(); ++it) {
        const int u = *it;
        inside[u] = inside_excluding(u, -1);
        if (u == topo.root) continue;
        const int e = topo.parent_edge[u];
        const Matrix& t = table[e];
        Vector msg(t.rows());
        for (Eigen::Index i = 0; i < t.rows(); ++i) {
            msg(i) = log_sum_exp(t.row(i).transpose() + inside[u]);
        }
        up[e] = std::move(msg);
    }

    TreeBeliefs out;
    out.log_partition = log_sum_exp(inside[topo.root]);
    const double log_z = out.log_partition;
    if (!std::isfinite(log_z)) {
        throw Error(ErrorCode::NumericalOverflow, "log partition function is not finite");
    }

    std::vector<Vector> outside(n);
    outside[topo.root] = Vector::Zero(inside[topo.root].size());
    out.node.assign(n, Vector());
    out.edge.assign(topo.edges.size(), Matrix());
    for (int u : topo.preorder) {
        Vector belief = (outside[u] + inside[u]).array() - log_z;
        out.node[u] = belief.array().exp();
        out.node[u] /= out.node[u].sum();
        for (int e : topo.child_edges[u]) {
            const int c = topo.other_end(e, u);
            const Vector head = outside[u] + inside_excluding(u, e);
            const Matrix& t = table[e];
            Matrix joint(t.rows(), t.cols());
            for (Eigen::Index i = 0; i < t.rows(); ++i) {
                for (Eigen::Index j = 0; j < t.cols(); ++j) {
                    joint(i, j) = head(i) + t(i, j) + inside[c](j) - log_z;
                }
            }
            Vector out_c(t.cols());
            for (Eigen::Index j = 0; j < t.cols(); ++j) {
                out_c(j) = log_sum_exp(head + t.col(j));
            }
            outside[c] = std::move(out_c);
            Matrix probs = joint.array().exp();
            probs /= probs.sum();
            out.edge[e] = topo.edge_forward[e] ? probs : Matrix(probs.transpose());
        }
    }
    return out;
}

/// Exact node and edge marginals of a tree model plus its log-partition Q.
struct MarginalSet {
    std::vector<Vector> node_marginals;
    std::vector<Matrix> edge_marginals;  // rows index edges[e].first
    double log_partition = 0.0;
};

inline MarginalSet compute_marginals(const TreeModel& model) {
    validate_tree(model);
    const TreeTopology topo = make_topology(model);
    std::vector<Vector> node_pot(model.node_count, Vector::Zero(model.domain_size));
    if (model.root_log_potential) node_pot[model.root] = *model.root_log_potential;
    TreeBeliefs beliefs = tree_sum_product(topo, node_pot, model.log_potentials);
    return {std::move(beliefs.node), std::move(beliefs.edge), beliefs.log_partition};
}

/// log p(x) for a single assignment, given the model's log-partition.
inline double log_prob_individual(const TreeModel& model, std::span<const int> x, double log_partition) {
    if (static_cast<int>(x.size()) != model.node_count) {
        throw Error(ErrorCode::InvalidAssignment, "assignment length differs from node_count");
    }
    for (int v : x) {
        if (v < 0 || v >= model.domain_size) {
            throw Error(ErrorCode::InvalidAssignment, "assignment value out of range");
        }
    }
    double acc = -log_partition;
    for (std::size_t e = 0; e < model.edges.size(); ++e) {
        acc += model.log_potentials[e](x[model.edges[e].first], x[model.edges[e].second]);
    }
    if (model.root_log_potential) acc += (*model.root_log_potential)(x[model.root]);
    return acc;
}

inline double log_prob_individual(const TreeModel& model, std::span<const int> x) {
    return log_prob_individual(model, x, compute_marginals(model).log_partition);
}

/// Joint marginal P(x_u = i, x_w = k), obtained by chaining edge conditionals
/// along the tree path between u and w.
inline Matrix pairwise_marginal(const TreeTopology& topo, const MarginalSet& marginals, int u, int w) {
    if (u == w) return marginals.node_marginals[u].asDiagonal();

    std::vector<int> up_u{u};
    std::vector<int> up_w{w};
    std::vector<int> depth(topo.node_count(), 0);
    for (int v : topo.preorder) {
        if (v != topo.root) depth[v] = depth[topo.parent[v]] + 1;
    }
    int a = u;
    int b = w;
    while (depth[a] > depth[b]) up_u.push_back(a = topo.parent[a]);
    while (depth[b] > depth[a]) up_w.push_back(b = topo.parent[b]);
    while (a != b) {
        up_u.push_back(a = topo.parent[a]);
        up_w.push_back(b = topo.parent[b]);
    }
    std::vector<int> path = up_u;
    for (auto it = up_w.rbegin() + 1; it != up_w.rend(); ++it) path.push_back(*it);

    Matrix joint = marginals.node_marginals[u].asDiagonal();
    for (std::size_t k = 0; k + 1 < path.size(); ++k) {
        const int from = path[k];
        const int to = path[k + 1];
        const int e = topo.parent[to] == from ? topo.parent_edge[to] : topo.parent_edge[from];
        Matrix cond = topo.edges[e].first == from ? marginals.edge_marginals[e]
                                                  : Matrix(marginals.edge_marginals[e].transpose());
        const Vector& mu = marginals.node_marginals[from];
        for (Eigen::Index i = 0; i < cond.rows(); ++i) {
            if (mu(i) > 0.0) {
                cond.row(i) /= mu(i);
            } else {
                cond.row(i).setZero();
            }
        }
        joint = joint * cond;
    }
    return joint;
}

}  // namespace gcgm
