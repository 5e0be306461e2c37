#pragma once

#include <chrono>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "gcgm/birdsim.hpp"
#include "gcgm/ep.hpp"
#include "gcgm/factored.hpp"
#include "gcgm/moments.hpp"
#include "gcgm/tree_model.hpp"

namespace gcgm {

struct EMConfig {
    Weights init_w = Weights(0.2, 0.4, 0.4, 0.4);
    int max_em_iters = 50;
    /// EM stops once successive iterates differ by less than this in infinity norm.
    double em_tol = 1e-4;
    double mstep_tol = 1e-6;
    int mstep_max_iters = 500;
    EpOptions ep;
    MomentOptions moments;
    std::optional<Weights> true_w;

    void validate() const {
        if (max_em_iters < 1) throw Error(ErrorCode::InvalidArgument, "max_em_iters must be >= 1");
        if (mstep_max_iters < 1) throw Error(ErrorCode::InvalidArgument, "mstep_max_iters must be >= 1");
        if (!init_w.allFinite()) throw Error(ErrorCode::NonFinite, "initial weights must be finite");
        ep.validate();
    }
};

struct EStepResult {
    std::vector<Vector> node_means;
    std::vector<Matrix> edge_means;
    EpDiagnostics diagnostics;
};

/// Posterior expected counts under weights w: GCGM moments, EP for the node
/// posteriors, then edge-count recovery on every edge.
inline EStepResult e_step(const Weights& w, const Dataset& data, const EpOptions& ep = {},
                          const MomentOptions& moment_options = {}) {
    GridConfig config = data.config;
    config.w = w;
    const TreeModel model = build_chain_model(config);
    const MarginalSet marginals = compute_marginals(model);
    const GaussianMoments moments = build_moments(model, marginals, static_cast<double>(config.N), moment_options);
    EpResult r = run_ep(model, moments, data.observations, ep);
    EStepResult out;
    out.edge_means = edge_posteriors(moments, r.posterior.means);
    out.node_means = std::move(r.posterior.full_means);
    out.diagnostics = std::move(r.diagnostics);
    return out;
}

/// Expected-count weights for the M-step: negative entries floored at zero,
/// then each row rescaled to its original mass (a row with nonpositive mass
/// becomes zero).
inline std::vector<Matrix> floor_edge_weights(const std::vector<Matrix>& edge_means) {
    std::vector<Matrix> out;
    out.reserve(edge_means.size());
    for (const Matrix& m : edge_means) {
        if (!m.allFinite()) throw Error(ErrorCode::NonFinite, "expected edge counts contain non-finite values");
        Matrix f = m.cwiseMax(0.0);
        for (Eigen::Index i = 0; i < m.rows(); ++i) {
            const double mass = m.row(i).sum();
            const double floored = f.row(i).sum();
            if (mass <= 0.0 || floored <= 0.0) {
                f.row(i).setZero();
            } else {
                f.row(i) *= mass / floored;
            }
        }
        out.push_back(std::move(f));
    }
    return out;
}

/// Features f(i, j, t) for every step, cell pair and coordinate.
struct FeatureTable {
    int cells = 0;
    /// data[t] is (L*L) x 4 with row i*L + j.
    std::vector<Eigen::Matrix<double, Eigen::Dynamic, 4>> data;

    static FeatureTable build(const GridConfig& config) {
        const GridConfig c = resolve_wind(config);
        FeatureTable ft;
        ft.cells = c.cells();
        for (int t = 0; t + 1 < c.horizon; ++t) {
            Eigen::Matrix<double, Eigen::Dynamic, 4> m(ft.cells * ft.cells, 4);
            for (int i = 0; i < ft.cells; ++i) {
                for (int j = 0; j < ft.cells; ++j) m.row(i * ft.cells + j) = features(i, j, t, c).transpose();
            }
            ft.data.push_back(std::move(m));
        }
        return ft;
    }
};

struct MStepObjective {
    double value = 0.0;
    Weights gradient = Weights::Zero();
    Eigen::Matrix4d neg_hessian = Eigen::Matrix4d::Zero();
};

/// sum_t sum_ij W_t(i,j) log p_w(j | i, t) with gradient and negated Hessian.
inline MStepObjective mstep_objective(const Weights& w, const std::vector<Matrix>& weights, const FeatureTable& ft) {
    MStepObjective o;
    const int L = ft.cells;
    for (std::size_t t = 0; t < weights.size(); ++t) {
        const auto& f = ft.data[t];
        const Vector logits = f * w;
        for (int i = 0; i < L; ++i) {
            const double mass = weights[t].row(i).sum();
            if (mass <= 0.0) continue;
            const Vector row = logits.segment(static_cast<Eigen::Index>(i) * L, L);
            const double lse = log_sum_exp(row);
            const Vector p = (row.array() - lse).exp().matrix();
            const auto fi = f.middleRows(static_cast<Eigen::Index>(i) * L, L);
            const Weights expected = fi.transpose() * p;
            Weights observed = Weights::Zero();
            for (int j = 0; j < L; ++j) {
                const double wij = weights[t](i, j);
                if (wij == 0.0) continue;
                o.value += wij * (row(j) - lse);
                observed += wij * fi.row(j).transpose();
            }
            o.gradient += observed - mass * expected;
            const Eigen::Matrix4d second = fi.transpose() * p.asDiagonal() * fi;
            o.neg_hessian += mass * (second - expected * expected.transpose());
        }
    }
    return o;
}

struct MStepResult {
    Weights w;
    double objective = 0.0;
    double gradient_norm = 0.0;
    int iterations = 0;
    bool converged = false;
    /// False if any accepted step lowered the objective.
    bool monotone = true;
};

/// Weighted softmax regression by Newton ascent with backtracking; stops when
/// the gradient infinity norm is below `tol` or after `max_iters` steps.
inline MStepResult m_step(const std::vector<Matrix>& edge_means, const GridConfig& config, const Weights& init,
                          double tol = 1e-6, int max_iters = 500) {
    const std::vector<Matrix> weights = floor_edge_weights(edge_means);
    const FeatureTable ft = FeatureTable::build(config);
    if (weights.size() != ft.data.size()) throw Error(ErrorCode::ShapeMismatch, "one edge table per transition expected");
    MStepResult res;
    Weights w = init;
    MStepObjective cur = mstep_objective(w, weights, ft);
    for (int it = 0; it < max_iters; ++it) {
        if (!cur.gradient.allFinite()) throw Error(ErrorCode::NonFinite, "M-step gradient is not finite");
        if (cur.gradient.cwiseAbs().maxCoeff() < tol) {
            res.converged = true;
            break;
        }
        Eigen::Matrix4d h = cur.neg_hessian;
        Eigen::LLT<Eigen::Matrix4d> llt(h);
        for (double tau = 1e-10 * std::max(1.0, h.diagonal().maxCoeff()); llt.info() != Eigen::Success; tau *= 10.0) {
            if (!(tau < 1e30)) throw Error(ErrorCode::NonFinite, "M-step Hessian could not be regularized");
            llt.compute(h + tau * Eigen::Matrix4d::Identity());
        }
        const Weights d = llt.solve(cur.gradient);
        const double slope = cur.gradient.dot(d);
        double step = 1.0;
        bool accepted = false;
        MStepObjective next;
        for (int k = 0; k < 60; ++k) {
            next = mstep_objective(w + step * d, weights, ft);
            if (next.value >= cur.value + 1e-4 * step * slope) {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        ++res.iterations;
        if (!accepted) break;
        if (next.value < cur.value) res.monotone = false;
        w += step * d;
        cur = next;
    }
    if (cur.gradient.cwiseAbs().maxCoeff() < tol) res.converged = true;
    res.w = w;
    res.objective = cur.value;
    res.gradient_norm = cur.gradient.cwiseAbs().maxCoeff();
    return res;
}

inline double relative_weight_error(const Weights& learned, const Weights& truth) {
    return (learned - truth).lpNorm<1>() / truth.lpNorm<1>();
}

struct EMIteration {
    int iter = 0;
    Weights w;
    double rel_error = std::numeric_limits<double>::quiet_NaN();
    double objective = std::numeric_limits<double>::quiet_NaN();
    double seconds = 0.0;
    int ep_sweeps = 0;
    std::vector<std::string> warnings;
};

struct EMTrace {
    std::vector<EMIteration> iterations;
    bool converged = false;
};

/// EM from init_w. Row 0 of the trace is the initial point; row k holds the
/// weights after the k-th M-step and the objective that step maximized.
inline EMTrace run_em(const Dataset& data, const EMConfig& config) {
    config.validate();
    const auto start = std::chrono::steady_clock::now();
    const auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(); };
    EMTrace trace;
    EMIteration first;
    first.w = config.init_w;
    if (config.true_w) first.rel_error = relative_weight_error(config.init_w, *config.true_w);
    trace.iterations.push_back(first);

    Weights w = config.init_w;
    for (int k = 1; k <= config.max_em_iters; ++k) {
        EMIteration row;
        row.iter = k;
        const EStepResult e = e_step(w, data, config.ep, config.moments);
        row.ep_sweeps = e.diagnostics.sweeps;
        row.warnings = e.diagnostics.warnings;
        const MStepResult m = m_step(e.edge_means, data.config, w, config.mstep_tol, config.mstep_max_iters);
        if (!m.converged) row.warnings.push_back("M-step stopped before reaching its gradient tolerance");
        const double delta = (m.w - w).cwiseAbs().maxCoeff();
        w = m.w;
        row.w = w;
        row.objective = m.objective;
        if (config.true_w) row.rel_error = relative_weight_error(w, *config.true_w);
        row.seconds = elapsed();
        trace.iterations.push_back(std::move(row));
        if (delta < config.em_tol) {
            trace.converged = true;
            break;
        }
    }
    return trace;
}

}  // namespace gcgm
