#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "gcgm/counts.hpp"
#include "gcgm/error.hpp"
#include "gcgm/linalg.hpp"
#include "gcgm/moments.hpp"
#include "gcgm/reduction.hpp"
#include "gcgm/tree_model.hpp"

namespace gcgm {

/// p(z~_child | z~_parent) = N(gain * z~_parent + offset, cov).
struct ConditionalFactor {
    int parent = -1;
    int child = -1;
    int edge = -1;
    Matrix gain;
    Vector offset;
    Matrix cov;
};

/// p(z~_r) times one conditional per node below the root, indexed by child.
struct FactoredGaussian {
    double N = 0.0;
    TreeTopology topo;
    std::vector<NodeBasis> bases;
    Gaussian root_marginal;
    std::vector<ConditionalFactor> factors;

    [[nodiscard]] int root() const { return topo.root; }
    [[nodiscard]] int dim(int u) const { return bases[u].dim(); }
};

namespace detail {

/// Splits an edge joint into (parent, child) blocks regardless of stored orientation.
struct OrientedJoint {
    Vector mean_parent;
    Vector mean_child;
    Matrix cov_pp;
    Matrix cov_pc;
    Matrix cov_cc;
};

inline OrientedJoint orient_joint(const EdgeJoint& joint, int d_first, int d_second, bool parent_first) {
    OrientedJoint o;
    const Vector m1 = joint.mean.head(d_first);
    const Vector m2 = joint.mean.tail(d_second);
    const Matrix s11 = joint.cov.topLeftCorner(d_first, d_first);
    const Matrix s12 = joint.cov.topRightCorner(d_first, d_second);
    const Matrix s22 = joint.cov.bottomRightCorner(d_second, d_second);
    if (parent_first) {
        o.mean_parent = m1;
        o.mean_child = m2;
        o.cov_pp = s11;
        o.cov_pc = s12;
        o.cov_cc = s22;
    } else {
        o.mean_parent = m2;
        o.mean_child = m1;
        o.cov_pp = s22;
        o.cov_pc = s12.transpose();
        o.cov_cc = s11;
    }
    return o;
}

inline double gaussian_log_density(const Vector& x, const Vector& mean, const Matrix& cov) {
    if (x.size() == 0) return 0.0;
    const Eigen::LLT<Matrix> llt(cov);
    if (llt.info() != Eigen::Success) throw Error(ErrorCode::SingularBlock, "covariance is not positive definite");
    const Vector r = llt.matrixL().solve(x - mean);
    const double log_det = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
    return -0.5 * (r.squaredNorm() + log_det + static_cast<double>(x.size()) * std::log(2.0 * std::numbers::pi));
}

}  // namespace detail

inline FactoredGaussian factorize(const GaussianMoments& moments, const TreeModel& model, int root) {
    FactoredGaussian f;
    f.N = moments.N;
    f.topo = make_topology(model.node_count, model.edges, root);
    f.bases = moments.transform.nodes;
    f.root_marginal = {moments.node_means[root], moments.node_covs[root]};
    f.factors.resize(model.node_count);
    for (int v : f.topo.preorder) {
        if (v == root) continue;
        const int u = f.topo.parent[v];
        const int e = f.topo.parent_edge[v];
        const bool parent_first = model.edges[e].first == u;
        const int d_first = moments.dim(model.edges[e].first);
        const int d_second = moments.dim(model.edges[e].second);
        const detail::OrientedJoint j = detail::orient_joint(moments.edge_joints[e], d_first, d_second, parent_first);

        ConditionalFactor c;
        c.parent = u;
        c.child = v;
        c.edge = e;
        if (j.cov_pp.size() > 0) {
            const Eigen::LLT<Matrix> llt(j.cov_pp);
            if (llt.info() != Eigen::Success) {
                throw Error(ErrorCode::SingularBlock, "edge " + std::to_string(e) + ": parent block is singular");
            }
            c.gain = llt.solve(j.cov_pc).transpose();
        } else {
            c.gain = Matrix::Zero(j.cov_cc.rows(), 0);
        }
        c.offset = j.mean_child - c.gain * j.mean_parent;
        c.cov = j.cov_cc - c.gain * j.cov_pc;
        c.cov = symmetrize(c.cov);
        if (c.cov.size() > 0 && Eigen::LLT<Matrix>(c.cov).info() != Eigen::Success) {
            throw Error(ErrorCode::SingularBlock,
                        "edge " + std::to_string(e) + ": conditional covariance is not positive definite");
        }
        f.factors[v] = std::move(c);
    }
    return f;
}

inline FactoredGaussian factorize(const GaussianMoments& moments, const TreeModel& model) {
    return factorize(moments, model, model.root);
}

/// Log density of the factored joint at reduced node vectors z[u].
inline double log_density(const FactoredGaussian& f, const std::vector<Vector>& z) {
    double total = detail::gaussian_log_density(z[f.root()], f.root_marginal.mean, f.root_marginal.cov);
    for (int v : f.topo.preorder) {
        if (v == f.root()) continue;
        const ConditionalFactor& c = f.factors[v];
        total += detail::gaussian_log_density(z[v], c.gain * z[c.parent] + c.offset, c.cov);
    }
    return total;
}

/// Node marginals and edge joints implied by the factored density. Edge joints
/// are ordered as the model stores the edge.
struct Recomposition {
    std::vector<Gaussian> nodes;
    std::vector<Gaussian> edges;
};

inline Recomposition recompose(const FactoredGaussian& f) {
    Recomposition r;
    const int n = static_cast<int>(f.bases.size());
    r.nodes.resize(n);
    r.edges.resize(f.topo.edges.size());
    r.nodes[f.root()] = f.root_marginal;
    for (int v : f.topo.preorder) {
        if (v == f.root()) continue;
        const ConditionalFactor& c = f.factors[v];
        const Gaussian& pu = r.nodes[c.parent];
        Gaussian pv;
        pv.mean = c.gain * pu.mean + c.offset;
        pv.cov = c.gain * pu.cov * c.gain.transpose() + c.cov;
        const Matrix cross = pu.cov * c.gain.transpose();  // cov(z_parent, z_child)
        const int du = static_cast<int>(pu.mean.size());
        const int dv = static_cast<int>(pv.mean.size());
        Gaussian joint;
        joint.mean.resize(du + dv);
        joint.cov.resize(du + dv, du + dv);
        if (f.topo.edges[c.edge].first == c.parent) {
            joint.mean << pu.mean, pv.mean;
            joint.cov << pu.cov, cross, cross.transpose(), pv.cov;
        } else {
            joint.mean << pv.mean, pu.mean;
            joint.cov << pv.cov, cross.transpose(), cross, pu.cov;
        }
        r.edges[c.edge] = std::move(joint);
        r.nodes[v] = std::move(pv);
    }
    return r;
}

/// Gaussian evidence on one node in reduced coordinates from an observation of
/// the full count vector with isotropic noise variance `variance`.
inline NaturalGaussian gaussian_evidence(const NodeBasis& basis, const Vector& y, double N, double variance) {
    const Matrix a = lift_matrix(basis);
    Vector offset = y;
    offset(basis.reference) -= N;
    return {a.transpose() * a / variance, a.transpose() * offset / variance};
}

/// Posterior over reduced node vectors plus lifted full-vector means.
struct NodePosterior {
    std::vector<Vector> means;
    std::vector<Matrix> covs;
    std::vector<Vector> full_means;
    std::vector<bool> clamped;
    std::vector<std::string> warnings;
};

namespace detail {

/// Pair factor of p(z_child | z_parent) in information form over (parent, child).
struct PairInfo {
    Matrix j_pp;
    Matrix j_pc;
    Matrix j_cc;
    Vector h_p;
    Vector h_c;
};

inline PairInfo pair_info(const ConditionalFactor& c) {
    const Matrix ci = spd_inverse(c.cov, "conditional covariance");
    PairInfo p;
    const Matrix gt_ci = c.gain.transpose() * ci;
    p.j_pp = gt_ci * c.gain;
    p.j_pc = -gt_ci;
    p.j_cc = ci;
    p.h_p = -gt_ci * c.offset;
    p.h_c = ci * c.offset;
    return p;
}

/// Clamp value in reduced coordinates with consistency warnings.
inline Vector clamp_value(const NodeBasis& basis, const Vector& y, double N, int u, std::vector<std::string>& warnings) {
    if (std::abs(y.sum() - N) > 1e-9 * std::max(1.0, N)) {
        warnings.push_back("node " + std::to_string(u) + ": exact observation does not sum to N");
    }
    for (int i : basis.pruned) {
        if (y(i) != 0.0) warnings.push_back("node " + std::to_string(u) + ": exact observation puts mass on a pruned state");
    }
    if ((y.array() < 0.0).any()) warnings.push_back("node " + std::to_string(u) + ": exact observation is negative");
    return reduce_node(basis, y);
}

}  // namespace detail

/// Closed-form posterior of the factored Gaussian under Exact or Gaussian
/// observations: two-pass message passing in information form. Exactly
/// observed nodes are clamped and split the tree into independent pieces.
inline NodePosterior condition_exact(const FactoredGaussian& f, const ObservationSet& y) {
    if (y.noise.kind == NoiseModel::Kind::Poisson) {
        throw Error(ErrorCode::InvalidArgument, "condition_exact supports only Exact or Gaussian noise");
    }
    const int n = static_cast<int>(f.bases.size());
    if (static_cast<int>(y.values.size()) != n) throw Error(ErrorCode::ShapeMismatch, "observation count differs from node_count");
    const bool exact = y.noise.kind == NoiseModel::Kind::Exact;

    NodePosterior post;
    post.clamped.assign(n, false);
    std::vector<Vector> clamp(n);
    std::vector<NaturalGaussian> local(n);
    for (int u = 0; u < n; ++u) {
        local[u] = NaturalGaussian::zero(f.dim(u));
        if (!y.values[u]) continue;
        if (exact) {
            post.clamped[u] = true;
            clamp[u] = detail::clamp_value(f.bases[u], *y.values[u], f.N, u, post.warnings);
        } else {
            local[u] += gaussian_evidence(f.bases[u], *y.values[u], f.N, y.noise.parameter);
        }
    }

    const int r = f.root();
    if (!post.clamped[r]) local[r] += to_natural(f.root_marginal, "root marginal");

    std::vector<detail::PairInfo> pair(n);
    std::vector<bool> linked(n, false);  // child v shares a live pair factor with its parent
    for (int v : f.topo.preorder) {
        if (v == r) continue;
        const ConditionalFactor& c = f.factors[v];
        const int u = c.parent;
        detail::PairInfo p = detail::pair_info(c);
        if (!post.clamped[u] && !post.clamped[v]) {
            pair[v] = std::move(p);
            linked[v] = true;
        } else if (post.clamped[u] && !post.clamped[v]) {
            local[v].precision += p.j_cc;
            local[v].shift += p.h_c - p.j_pc.transpose() * clamp[u];
        } else if (!post.clamped[u] && post.clamped[v]) {
            local[u].precision += p.j_pp;
            local[u].shift += p.h_p - p.j_pc * clamp[v];
        }
    }

    // Upward pass: message from each linked child to its parent.
    std::vector<NaturalGaussian> up(n);
    std::vector<NaturalGaussian> inside(n);
    for (auto it = f.topo.preorder.rbegin(); it != f.topo.preorder.rend(); ++it) {
        const int v = *it;
        if (post.clamped[v]) continue;
        inside[v] = local[v];
        for (int e : f.topo.child_edges[v]) {
            const int w = f.topo.edge_child(e);
            if (linked[w]) inside[v] += up[w];
        }
        if (!linked[v]) continue;
        const detail::PairInfo& p = pair[v];
        const Matrix k = spd_inverse(Matrix(p.j_cc + inside[v].precision), "upward message");
        up[v].precision = p.j_pp - p.j_pc * k * p.j_pc.transpose();
        up[v].shift = p.h_p - p.j_pc * k * (p.h_c + inside[v].shift);
        up[v].precision = symmetrize(up[v].precision);
    }

    // Downward pass and beliefs.
    std::vector<NaturalGaussian> belief(n);
    for (int u : f.topo.preorder) {
        if (post.clamped[u]) continue;
        belief[u] = inside[u];
        if (linked[u]) {
            const int p = f.topo.parent[u];
            const NaturalGaussian outside = belief[p] - up[u];
            const detail::PairInfo& pi = pair[u];
            const Matrix k = spd_inverse(Matrix(pi.j_pp + outside.precision), "downward message");
            NaturalGaussian down;
            down.precision = pi.j_cc - pi.j_pc.transpose() * k * pi.j_pc;
            down.shift = pi.h_c - pi.j_pc.transpose() * k * (pi.h_p + outside.shift);
            down.precision = symmetrize(down.precision);
            belief[u] += down;
        }
    }

    post.means.resize(n);
    post.covs.resize(n);
    post.full_means.resize(n);
    for (int u = 0; u < n; ++u) {
        if (post.clamped[u]) {
            post.means[u] = clamp[u];
            post.covs[u] = Matrix::Zero(f.dim(u), f.dim(u));
        } else {
            const Gaussian g = to_moments(belief[u], "node belief");
            post.means[u] = g.mean;
            post.covs[u] = g.cov;
        }
        post.full_means[u] = lift_node(f.bases[u], post.means[u], f.N);
    }
    return post;
}

/// Posterior mean of the full edge table given the posterior means of its two
/// endpoint vectors (ordered as the edge is stored). The conditional mean of
/// the edge sub-table given the endpoints is affine, so only the means of q
/// matter. Uses cov(I_uv(i,j), I_u(k)) = mu_uv(i,j) (delta_ik - mu_u(k)) to
/// avoid forming the extended covariance: O(L^2) after one O(L^3) solve.
inline Matrix edge_posterior(const GaussianMoments& m, int e, const Vector& q_first, const Vector& q_second) {
    const auto [u, v] = m.transform.edges[e];
    const NodeBasis& bu = m.basis(u);
    const NodeBasis& bv = m.basis(v);
    const int du = bu.dim();
    const int dv = bv.dim();
    if (q_first.size() != du || q_second.size() != dv) {
        throw Error(ErrorCode::ShapeMismatch, "edge posterior: endpoint dimensions differ from the reduced bases");
    }
    const EdgeJoint& joint = m.edge_joints[e];
    Vector delta(du + dv);
    delta << q_first, q_second;
    delta -= joint.mean;
    Vector w = Vector::Zero(du + dv);
    if (du + dv > 0) {
        const Eigen::LLT<Matrix> llt(joint.cov);
        if (llt.info() != Eigen::Success) {
            throw Error(ErrorCode::SingularBlock, "edge " + std::to_string(e) + ": joint covariance is singular");
        }
        w = llt.solve(delta);
    }
    const Vector mu_u = reduce_node(bu, m.marginals.node_marginals[u]);
    const Vector mu_v = reduce_node(bv, m.marginals.node_marginals[v]);
    const double c = mu_u.dot(w.head(du)) + mu_v.dot(w.tail(dv));
    const Matrix& table = m.marginals.edge_marginals[e];
    Matrix sub(du, dv);
    for (int a = 0; a < du; ++a) {
        for (int b = 0; b < dv; ++b) {
            sub(a, b) = m.N * table(bu.free_states[a], bv.free_states[b]) * (1.0 + w(a) + w(du + b) - c);
        }
    }
    const Vector full_u = lift_node(bu, q_first, m.N);
    const Vector full_v = lift_node(bv, q_second, m.N);
    return lift_edge(bu, bv, sub, full_u, full_v, m.N);
}

/// Edge means for every edge from per-node reduced posterior means.
inline std::vector<Matrix> edge_posteriors(const GaussianMoments& m, const std::vector<Vector>& node_means) {
    std::vector<Matrix> out;
    out.reserve(m.transform.edges.size());
    for (std::size_t e = 0; e < m.transform.edges.size(); ++e) {
        const auto [u, v] = m.transform.edges[e];
        out.push_back(edge_posterior(m, static_cast<int>(e), node_means[u], node_means[v]));
    }
    return out;
}

}  // namespace gcgm
