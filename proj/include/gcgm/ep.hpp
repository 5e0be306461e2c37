#pragma once

#include <chrono>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "gcgm/counts.hpp"
#include "gcgm/error.hpp"
#include "gcgm/factored.hpp"
#include "gcgm/linalg.hpp"
#include "gcgm/moments.hpp"
#include "gcgm/reduction.hpp"
#include "gcgm/tree_model.hpp"

namespace gcgm {

struct EpOptions {
    int max_sweeps = 50;
    /// Relative change below which a sweep counts as converged.
    double tolerance = 1e-6;
    /// Message damping gamma in (0, 1]; 1 means no damping.
    double damping = 1.0;
    int inner_max_iters = 200;
    /// Inner solve stops when the gradient infinity norm drops below inner_tol * N.
    double inner_tol = 1e-8;
    /// Poisson terms switch to a quadratic extension below clamp_eps * N.
    double clamp_eps = 1e-6;

    void validate() const {
        if (max_sweeps < 1) throw Error(ErrorCode::InvalidArgument, "max_sweeps must be >= 1");
        if (!(tolerance > 0.0)) throw Error(ErrorCode::InvalidArgument, "EP tolerance must be > 0");
        if (!(damping > 0.0 && damping <= 1.0)) throw Error(ErrorCode::InvalidArgument, "damping must lie in (0, 1]");
        if (inner_max_iters < 1) throw Error(ErrorCode::InvalidArgument, "inner_max_iters must be >= 1");
        if (!(inner_tol > 0.0)) throw Error(ErrorCode::InvalidArgument, "inner_tol must be > 0");
        if (!(clamp_eps > 0.0)) throw Error(ErrorCode::InvalidArgument, "clamp_eps must be > 0");
    }
};

/// Value, gradient and Hessian diagonal of sum_i [y_i log(lambda z_i) - lambda z_i - log y_i!].
struct PoissonTerm {
    double value = 0.0;
    Vector gradient;
    Vector hessian_diag;
    int clamps = 0;
};

/// Plain Poisson log-likelihood; entries with y_i > 0 need z_i > 0.
inline PoissonTerm poisson_loglik(const Vector& y, const Vector& z, double lambda) {
    if (y.size() != z.size()) throw Error(ErrorCode::ShapeMismatch, "poisson_loglik: y and z differ in length");
    PoissonTerm t;
    t.gradient.resize(z.size());
    t.hessian_diag.resize(z.size());
    for (Eigen::Index i = 0; i < z.size(); ++i) {
        if (y(i) > 0.0 && !(z(i) > 0.0)) {
            throw Error(ErrorCode::DomainError, "poisson_loglik: nonpositive rate with a positive count");
        }
        const double log_term = y(i) > 0.0 ? y(i) * std::log(lambda * z(i)) : 0.0;
        t.value += log_term - lambda * z(i) - std::lgamma(y(i) + 1.0);
        t.gradient(i) = (y(i) > 0.0 ? y(i) / z(i) : 0.0) - lambda;
        t.hessian_diag(i) = y(i) > 0.0 ? -y(i) / (z(i) * z(i)) : 0.0;
    }
    return t;
}

/// As poisson_loglik, but below `eps` the y log(lambda z) part continues as its
/// second-order expansion at eps, which keeps the term concave and finite for
/// any z. Each extended entry counts as a clamp.
inline PoissonTerm poisson_loglik_extended(const Vector& y, const Vector& z, double lambda, double eps) {
    PoissonTerm t;
    t.gradient.resize(z.size());
    t.hessian_diag.resize(z.size());
    for (Eigen::Index i = 0; i < z.size(); ++i) {
        const double yi = y(i);
        const double zi = z(i);
        t.value += -lambda * zi - std::lgamma(yi + 1.0);
        t.gradient(i) = -lambda;
        t.hessian_diag(i) = 0.0;
        if (yi <= 0.0) continue;
        if (zi >= eps) {
            t.value += yi * std::log(lambda * zi);
            t.gradient(i) += yi / zi;
            t.hessian_diag(i) = -yi / (zi * zi);
        } else {
            const double d = zi - eps;
            t.value += yi * (std::log(lambda * eps) + d / eps - 0.5 * d * d / (eps * eps));
            t.gradient(i) += yi * (1.0 / eps - d / (eps * eps));
            t.hessian_diag(i) = -yi / (eps * eps);
            ++t.clamps;
        }
    }
    return t;
}

/// Log-likelihood of one node's observation as a function of its reduced
/// count vector, with gradient and Hessian in reduced coordinates.
struct NodeTerm {
    double value = 0.0;
    Vector gradient;
    Matrix hessian;
    int clamps = 0;
};

inline NodeTerm node_loglik(const NoiseModel& noise, const Vector& y, const NodeBasis& basis, const Vector& z,
                            double N, double eps) {
    const Vector full = lift_node(basis, z, N);
    const Matrix a = lift_matrix(basis);
    Vector grad_full;
    Vector hess_full;
    NodeTerm t;
    switch (noise.kind) {
        case NoiseModel::Kind::Gaussian: {
            const double var = noise.parameter;
            const Vector r = y - full;
            t.value = -0.5 * r.squaredNorm() / var -
                      0.5 * static_cast<double>(y.size()) * std::log(2.0 * std::numbers::pi * var);
            grad_full = r / var;
            hess_full = Vector::Constant(y.size(), -1.0 / var);
            break;
        }
        case NoiseModel::Kind::Poisson: {
            const PoissonTerm p = poisson_loglik_extended(y, full, noise.parameter, eps);
            t.value = p.value;
            t.clamps = p.clamps;
            grad_full = p.gradient;
            hess_full = p.hessian_diag;
            break;
        }
        case NoiseModel::Kind::Exact: {
            const bool match = (full - y).cwiseAbs().maxCoeff() <= 1e-9 * std::max(1.0, N);
            t.value = match ? 0.0 : kNegInf;
            t.gradient = Vector::Zero(z.size());
            t.hessian = Matrix::Zero(z.size(), z.size());
            return t;
        }
    }
    t.gradient = a.transpose() * grad_full;
    t.hessian = a.transpose() * hess_full.asDiagonal() * a;
    return t;
}

/// Everything EP needs that does not change across sweeps.
struct EpProblem {
    const GaussianMoments* moments = nullptr;
    FactoredGaussian factored;
    ObservationSet y;
    std::vector<bool> clamped;
    std::vector<Vector> clamp;
    /// Information-form pair factor of p(z_child | z_parent), indexed by child.
    std::vector<detail::PairInfo> pair;
    NaturalGaussian root_prior;
    /// The edge whose potential carries p(z_r) and the root likelihood; -1 without edges.
    int root_edge = -1;
    std::vector<std::string> warnings;

    [[nodiscard]] double N() const { return factored.N; }
    [[nodiscard]] const TreeTopology& topo() const { return factored.topo; }
    [[nodiscard]] int dim(int u) const { return factored.dim(u); }
    [[nodiscard]] bool has_likelihood(int u) const {
        return y.observed(u) && !clamped[u] && y.noise.kind != NoiseModel::Kind::Exact;
    }
};

inline EpProblem prepare_ep(const TreeModel& model, const GaussianMoments& moments, const ObservationSet& y) {
    validate_observations(model, y);
    EpProblem pb;
    pb.moments = &moments;
    pb.factored = factorize(moments, model);
    pb.y = y;
    const int n = model.node_count;
    pb.clamped.assign(n, false);
    pb.clamp.resize(n);
    if (y.noise.kind == NoiseModel::Kind::Exact) {
        for (int u = 0; u < n; ++u) {
            if (!y.values[u]) continue;
            pb.clamped[u] = true;
            pb.clamp[u] = detail::clamp_value(pb.factored.bases[u], *y.values[u], moments.N, u, pb.warnings);
        }
    }
    pb.pair.resize(n);
    for (int v : pb.topo().preorder) {
        if (v != pb.topo().root) pb.pair[v] = detail::pair_info(pb.factored.factors[v]);
    }
    pb.root_prior = to_natural(pb.factored.root_marginal, "root marginal");
    if (!pb.topo().edge_order.empty()) pb.root_edge = pb.topo().edge_order.front();
    return pb;
}

/// log psi for one edge: the conditional of the child given the parent, the
/// child likelihood, and on the root edge also p(z_r) and the root likelihood.
/// Arguments follow the stored edge orientation.
class EdgePotential {
public:
    EdgePotential(const EpProblem& pb, int e, double eps) : pb_(&pb), e_(e), eps_(eps) {
        const TreeTopology& t = pb.topo();
        forward_ = t.edge_forward[e];
        parent_ = t.edge_parent(e);
        child_ = t.edge_child(e);
    }

    [[nodiscard]] double value(const Vector& z_first, const Vector& z_second) const {
        return evaluate(z_first, z_second, nullptr);
    }

    [[nodiscard]] Vector gradient(const Vector& z_first, const Vector& z_second) const {
        Vector g;
        evaluate(z_first, z_second, &g);
        return g;
    }

private:
    double evaluate(const Vector& z_first, const Vector& z_second, Vector* grad) const {
        const Vector& zp = forward_ ? z_first : z_second;
        const Vector& zc = forward_ ? z_second : z_first;
        const ConditionalFactor& c = pb_->factored.factors[child_];
        const Matrix ci = spd_inverse(c.cov, "conditional covariance");
        const Vector r = zc - c.gain * zp - c.offset;
        double value = detail::gaussian_log_density(zc, c.gain * zp + c.offset, c.cov);
        Vector gp = c.gain.transpose() * ci * r;
        Vector gc = -ci * r;
        if (e_ == pb_->root_edge) {
            const Gaussian& prior = pb_->factored.root_marginal;
            value += detail::gaussian_log_density(zp, prior.mean, prior.cov);
            gp -= spd_inverse(prior.cov, "root marginal") * (zp - prior.mean);
            if (pb_->y.observed(parent_)) add_term(parent_, zp, value, gp);
        }
        if (pb_->y.observed(child_)) add_term(child_, zc, value, gc);
        if (grad) {
            grad->resize(zp.size() + zc.size());
            if (forward_) {
                *grad << gp, gc;
            } else {
                *grad << gc, gp;
            }
        }
        return value;
    }

    void add_term(int u, const Vector& z, double& value, Vector& grad) const {
        const NodeTerm t = node_loglik(pb_->y.noise, *pb_->y.values[u], pb_->factored.bases[u], z, pb_->N(), eps_);
        value += t.value;
        grad += t.gradient;
    }

    const EpProblem* pb_;
    int e_;
    double eps_;
    bool forward_ = true;
    int parent_ = 0;
    int child_ = 0;
};

inline EdgePotential edge_potential(const EpProblem& pb, int e, const EpOptions& options = {}) {
    return EdgePotential(pb, e, options.clamp_eps * pb.N());
}

/// Gaussian fit of the tilted edge distribution at its mode, over
/// (z~_parent, z~_child). Clamped blocks hold the clamp value and zero covariance.
struct LaplaceResult {
    Vector mode;
    Matrix cov;
    int iterations = 0;
    bool converged = false;
    bool line_search_failure = false;
    bool nonpd_hessian = false;
    /// False if the inner objective ever decreased.
    bool monotone = true;
    int clamps = 0;
    double objective = 0.0;
};

namespace detail {

struct Evaluation {
    double value = 0.0;
    Vector gradient;
    Matrix neg_hessian;
    int clamps = 0;
};

/// Cholesky of a symmetric matrix, adding growing multiples of the identity
/// until it succeeds. Sets `jittered` when any was needed.
inline Eigen::LLT<Matrix> robust_llt(const Matrix& a, bool& jittered) {
    Eigen::LLT<Matrix> llt(a);
    if (llt.info() == Eigen::Success) return llt;
    jittered = true;
    const double scale = std::max(a.diagonal().cwiseAbs().maxCoeff(), 1e-300);
    for (double tau = 1e-12 * scale; tau < 1e12 * scale; tau *= 10.0) {
        llt.compute(a + tau * Matrix::Identity(a.rows(), a.cols()));
        if (llt.info() == Eigen::Success) return llt;
    }
    throw Error(ErrorCode::SingularBlock, "Hessian could not be regularized");
}

struct NewtonOutcome {
    Vector x;
    Evaluation at;
    int iterations = 0;
    bool converged = false;
    bool line_search_failure = false;
    bool nonpd = false;
    bool monotone = true;
};

/// Damped Newton ascent with Armijo backtracking on a concave objective.
template <class Eval>
NewtonOutcome newton_maximize(const Eval& eval, Vector x, int max_iters, double grad_tol) {
    NewtonOutcome out;
    Evaluation ev = eval(x);
    for (int it = 0; it < max_iters; ++it) {
        if (ev.gradient.size() == 0 || ev.gradient.cwiseAbs().maxCoeff() < grad_tol) {
            out.converged = true;
            break;
        }
        const Eigen::LLT<Matrix> llt = robust_llt(ev.neg_hessian, out.nonpd);
        const Vector d = llt.solve(ev.gradient);
        const double slope = ev.gradient.dot(d);
        // At the rounding floor the objective cannot resolve further progress.
        const double floor = 1e3 * std::numeric_limits<double>::epsilon() * (1.0 + std::abs(ev.value));
        if (slope <= floor) {
            out.converged = true;
            break;
        }
        double t = 1.0;
        bool accepted = false;
        Evaluation next;
        Vector xn;
        for (int k = 0; k < 60; ++k) {
            xn = x + t * d;
            next = eval(xn);
            if (std::isfinite(next.value) && next.value >= ev.value + 1e-4 * t * slope) {
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        ++out.iterations;
        if (!accepted) {
            out.line_search_failure = true;
            break;
        }
        if (next.value < ev.value) out.monotone = false;
        x = std::move(xn);
        ev = std::move(next);
    }
    if (!out.converged && ev.gradient.size() > 0 && ev.gradient.cwiseAbs().maxCoeff() < grad_tol) out.converged = true;
    out.x = std::move(x);
    out.at = std::move(ev);
    return out;
}

/// One likelihood term acting on x.segment(offset, dim(node)).
struct LikSlot {
    int node;
    int offset;
};

/// Objective -x'Jx/2 + h'x + sum of node likelihood terms.
inline Evaluation evaluate_quadratic(const EpProblem& pb, const Matrix& J, const Vector& h,
                                     const std::vector<LikSlot>& slots, const Vector& x, double eps) {
    Evaluation ev;
    const Vector jx = J * x;
    ev.value = -0.5 * x.dot(jx) + h.dot(x);
    ev.gradient = h - jx;
    ev.neg_hessian = J;
    for (const LikSlot& s : slots) {
        const int d = pb.dim(s.node);
        const NodeTerm t =
            node_loglik(pb.y.noise, *pb.y.values[s.node], pb.factored.bases[s.node], x.segment(s.offset, d), pb.N(), eps);
        ev.value += t.value;
        ev.gradient.segment(s.offset, d) += t.gradient;
        ev.neg_hessian.block(s.offset, s.offset, d, d) -= t.hessian;
        ev.clamps += t.clamps;
    }
    return ev;
}

inline Vector start_point(const Matrix& J, const Vector& h, const Vector& fallback) {
    if (J.size() == 0) return Vector(0);
    const Eigen::LLT<Matrix> llt(J);
    if (llt.info() == Eigen::Success) return llt.solve(h);
    return fallback;
}

}  // namespace detail

/// Laplace fit of psi_e times the two context messages. On edges whose parent
/// carries no likelihood term the parent block enters only through Gaussian
/// factors and is eliminated in closed form; the profile over the child is then
/// maximized by Newton's method. Otherwise the free blocks are optimized jointly.
inline LaplaceResult laplace_project(const EpProblem& pb, int e, const NaturalGaussian& ctx_parent,
                                     const NaturalGaussian& ctx_child, const EpOptions& options = {}) {
    const TreeTopology& t = pb.topo();
    const int p = t.edge_parent(e);
    const int c = t.edge_child(e);
    const int dp = pb.dim(p);
    const int dc = pb.dim(c);
    const int d = dp + dc;
    const double eps = options.clamp_eps * pb.N();
    const double grad_tol = options.inner_tol * pb.N();

    const detail::PairInfo& pi = pb.pair[c];
    Matrix J(d, d);
    J << pi.j_pp, pi.j_pc, pi.j_pc.transpose(), pi.j_cc;
    Vector h(d);
    h << pi.h_p, pi.h_c;
    J.topLeftCorner(dp, dp) += ctx_parent.precision;
    h.head(dp) += ctx_parent.shift;
    J.bottomRightCorner(dc, dc) += ctx_child.precision;
    h.tail(dc) += ctx_child.shift;
    const bool root_terms = e == pb.root_edge;
    if (root_terms && !pb.clamped[p]) {
        J.topLeftCorner(dp, dp) += pb.root_prior.precision;
        h.head(dp) += pb.root_prior.shift;
    }
    const bool lik_p = root_terms && pb.has_likelihood(p);
    const bool lik_c = pb.has_likelihood(c);

    // Free coordinates and conditioning on clamped blocks.
    std::vector<int> free_idx;
    Vector x_all(d);
    x_all.head(dp) = pb.clamped[p] ? pb.clamp[p] : pb.moments->node_means[p];
    x_all.tail(dc) = pb.clamped[c] ? pb.clamp[c] : pb.moments->node_means[c];
    if (!pb.clamped[p]) {
        for (int k = 0; k < dp; ++k) free_idx.push_back(k);
    }
    if (!pb.clamped[c]) {
        for (int k = 0; k < dc; ++k) free_idx.push_back(dp + k);
    }
    const int df = static_cast<int>(free_idx.size());
    Matrix Jf(df, df);
    Vector hf(df);
    Vector fallback(df);
    for (int a = 0; a < df; ++a) {
        hf(a) = h(free_idx[a]);
        fallback(a) = x_all(free_idx[a]);
        for (int b = 0; b < df; ++b) Jf(a, b) = J(free_idx[a], free_idx[b]);
    }
    if (pb.clamped[p] && dp > 0) {
        for (int a = 0; a < df; ++a) hf(a) -= J.row(free_idx[a]).head(dp).dot(pb.clamp[p]);
    }
    if (pb.clamped[c] && dc > 0) {
        for (int a = 0; a < df; ++a) hf(a) -= J.row(free_idx[a]).tail(dc).dot(pb.clamp[c]);
    }

    std::vector<detail::LikSlot> slots;
    const int off_c = pb.clamped[p] ? 0 : dp;
    if (lik_p) slots.push_back({p, 0});
    if (lik_c) slots.push_back({c, off_c});

    LaplaceResult res;
    Vector xf(df);
    bool eliminated = false;
    detail::NewtonOutcome outcome;
    if (!pb.clamped[p] && !pb.clamped[c] && !lik_p) {
        const Matrix jpp = Jf.topLeftCorner(dp, dp);
        const Eigen::LLT<Matrix> llt_pp(jpp);
        if (dp == 0 || llt_pp.info() == Eigen::Success) {
            eliminated = true;
            const Matrix jpc = Jf.topRightCorner(dp, dc);
            const Matrix k = dp > 0 ? Matrix(llt_pp.solve(jpc)) : Matrix(0, dc);
            const Vector kh = dp > 0 ? Vector(llt_pp.solve(hf.head(dp))) : Vector(0);
            const Matrix S = Jf.bottomRightCorner(dc, dc) - jpc.transpose() * k;
            const Vector s = hf.tail(dc) - jpc.transpose() * kh;
            std::vector<detail::LikSlot> profile_slots;
            if (lik_c) profile_slots.push_back({c, 0});
            const auto eval = [&](const Vector& x) { return detail::evaluate_quadratic(pb, S, s, profile_slots, x, eps); };
            outcome = detail::newton_maximize(eval, detail::start_point(S, s, fallback.tail(dc)),
                                              options.inner_max_iters, grad_tol);
            xf.tail(dc) = outcome.x;
            xf.head(dp) = kh - k * outcome.x;
        }
    }
    if (!eliminated) {
        const auto eval = [&](const Vector& x) { return detail::evaluate_quadratic(pb, Jf, hf, slots, x, eps); };
        outcome = detail::newton_maximize(eval, detail::start_point(Jf, hf, fallback), options.inner_max_iters, grad_tol);
        xf = outcome.x;
    }
    res.iterations = outcome.iterations;
    res.converged = outcome.converged;
    res.line_search_failure = outcome.line_search_failure;
    res.monotone = outcome.monotone;
    res.nonpd_hessian = outcome.nonpd;

    // Curvature of the full free problem at the mode.
    const detail::Evaluation final_ev = detail::evaluate_quadratic(pb, Jf, hf, slots, xf, eps);
    res.objective = final_ev.value;
    res.clamps = final_ev.clamps;
    Matrix cov_f(df, df);
    if (df > 0) {
        const Eigen::LLT<Matrix> llt = detail::robust_llt(final_ev.neg_hessian, res.nonpd_hessian);
        cov_f = symmetrize(llt.solve(Matrix::Identity(df, df)));
    }
    res.mode = x_all;
    res.cov = Matrix::Zero(d, d);
    for (int a = 0; a < df; ++a) {
        res.mode(free_idx[a]) = xf(a);
        for (int b = 0; b < df; ++b) res.cov(free_idx[a], free_idx[b]) = cov_f(a, b);
    }
    return res;
}

struct EpEdgeMessages {
    NaturalGaussian to_parent;
    NaturalGaussian to_child;
};

struct EpDiagnostics {
    int sweeps = 0;
    bool converged = false;
    /// Change measured in the last sweep (see run_ep).
    double final_change = std::numeric_limits<double>::infinity();
    std::vector<double> sweep_changes;
    long clamps = 0;
    long clips = 0;
    long line_search_failures = 0;
    long nonpd_hessians = 0;
    long monotonicity_violations = 0;
    long inner_iterations = 0;
    double seconds = 0.0;
    std::vector<std::string> warnings;
};

struct EpState {
    std::vector<EpEdgeMessages> messages;
    /// Sum of incoming messages per node.
    std::vector<NaturalGaussian> beliefs;
    EpDiagnostics diagnostics;

    static EpState initial(const EpProblem& pb) {
        EpState s;
        const TreeTopology& t = pb.topo();
        for (std::size_t e = 0; e < t.edges.size(); ++e) {
            const int ei = static_cast<int>(e);
            s.messages.push_back({NaturalGaussian::zero(pb.dim(t.edge_parent(ei))),
                                  NaturalGaussian::zero(pb.dim(t.edge_child(ei)))});
        }
        for (std::size_t u = 0; u < t.parent.size(); ++u) s.beliefs.push_back(NaturalGaussian::zero(pb.dim(static_cast<int>(u))));
        return s;
    }
};

namespace detail {

/// Clips negative eigenvalues of a precision to zero; returns true if any were
/// below -1e-10 relative to the largest magnitude.
inline bool clip_precision(Matrix& precision) {
    if (precision.size() == 0) return false;
    const Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrize(precision));
    const Vector ev = es.eigenvalues();
    if (ev.minCoeff() >= 0.0) {
        precision = symmetrize(precision);
        return false;
    }
    const double scale = std::max(ev.cwiseAbs().maxCoeff(), 1e-300);
    const bool significant = ev.minCoeff() < -1e-10 * scale;
    precision = es.eigenvectors() * ev.cwiseMax(0.0).asDiagonal() * es.eigenvectors().transpose();
    precision = symmetrize(precision);
    return significant;
}

inline void update_endpoint(const LaplaceResult& res, int offset, int dim, const NaturalGaussian& context,
                            double damping, NaturalGaussian& message, NaturalGaussian& belief,
                            EpDiagnostics& diag) {
    const Gaussian marginal{res.mode.segment(offset, dim), res.cov.block(offset, offset, dim, dim)};
    NaturalGaussian fresh = to_natural(marginal, "projected marginal") - context;
    if (damping < 1.0) {
        fresh.precision = damping * fresh.precision + (1.0 - damping) * message.precision;
        fresh.shift = damping * fresh.shift + (1.0 - damping) * message.shift;
    }
    if (clip_precision(fresh.precision)) ++diag.clips;
    if (!fresh.precision.allFinite() || !fresh.shift.allFinite()) {
        throw Error(ErrorCode::NonFinite, "EP message became non-finite");
    }
    belief += fresh - message;
    message = std::move(fresh);
}

}  // namespace detail

/// One EP update of edge e: contexts are the endpoint beliefs without this
/// edge's messages; new messages are the Laplace marginals divided by them.
inline void ep_update_edge(const EpProblem& pb, EpState& state, int e, const EpOptions& options = {}) {
    const TreeTopology& t = pb.topo();
    const int p = t.edge_parent(e);
    const int c = t.edge_child(e);
    EpEdgeMessages& msg = state.messages[e];
    const NaturalGaussian ctx_p = state.beliefs[p] - msg.to_parent;
    const NaturalGaussian ctx_c = state.beliefs[c] - msg.to_child;
    const LaplaceResult res = laplace_project(pb, e, ctx_p, ctx_c, options);

    EpDiagnostics& diag = state.diagnostics;
    diag.clamps += res.clamps;
    diag.inner_iterations += res.iterations;
    if (res.line_search_failure) ++diag.line_search_failures;
    if (res.nonpd_hessian) ++diag.nonpd_hessians;
    if (!res.monotone) ++diag.monotonicity_violations;

    if (!pb.clamped[p]) {
        detail::update_endpoint(res, 0, pb.dim(p), ctx_p, options.damping, msg.to_parent, state.beliefs[p], diag);
    }
    if (!pb.clamped[c]) {
        detail::update_endpoint(res, pb.dim(p), pb.dim(c), ctx_c, options.damping, msg.to_child, state.beliefs[c],
                                diag);
    }
}

/// Edge schedule of one sweep: root-first DFS order, then the reverse.
inline std::vector<int> ep_schedule(const EpProblem& pb) {
    std::vector<int> order = pb.topo().edge_order;
    order.insert(order.end(), pb.topo().edge_order.rbegin(), pb.topo().edge_order.rend());
    return order;
}

struct EpResult {
    NodePosterior posterior;
    EpState state;
    EpDiagnostics diagnostics;
};

namespace detail {

inline NodePosterior beliefs_to_posterior(const EpProblem& pb, const EpState& state) {
    const int n = static_cast<int>(pb.clamped.size());
    NodePosterior post;
    post.clamped = pb.clamped;
    post.warnings = pb.warnings;
    post.means.resize(n);
    post.covs.resize(n);
    post.full_means.resize(n);
    for (int u = 0; u < n; ++u) {
        if (pb.clamped[u]) {
            post.means[u] = pb.clamp[u];
            post.covs[u] = Matrix::Zero(pb.dim(u), pb.dim(u));
        } else {
            const Gaussian g = to_moments(state.beliefs[u], "EP belief of node " + std::to_string(u));
            post.means[u] = g.mean;
            post.covs[u] = g.cov;
        }
        post.full_means[u] = lift_node(pb.factored.bases[u], post.means[u], pb.N());
    }
    return post;
}

/// Largest relative change between two sets of beliefs: mean change over N,
/// precision change over the new precision's Frobenius norm.
inline double belief_change(const EpProblem& pb, const std::vector<NaturalGaussian>& before,
                            const std::vector<NaturalGaussian>& after) {
    double change = 0.0;
    for (std::size_t u = 0; u < after.size(); ++u) {
        if (pb.clamped[u] || pb.dim(static_cast<int>(u)) == 0) continue;
        const auto old_inv = try_spd_inverse(before[u].precision);
        const auto new_inv = try_spd_inverse(after[u].precision);
        if (!old_inv || !new_inv) return std::numeric_limits<double>::infinity();
        const Vector m_old = *old_inv * before[u].shift;
        const Vector m_new = *new_inv * after[u].shift;
        change = std::max(change, (m_new - m_old).cwiseAbs().maxCoeff() / pb.N());
        const double scale = std::max(after[u].precision.norm(), 1e-300);
        change = std::max(change, (after[u].precision - before[u].precision).norm() / scale);
    }
    return change;
}

}  // namespace detail

/// Expectation propagation over the tree's edge potentials. A sweep visits
/// edges root-first and then in reverse; iteration stops once the beliefs
/// change by less than `tolerance` across a sweep, or after max_sweeps.
inline EpResult run_ep(const TreeModel& model, const GaussianMoments& moments, const ObservationSet& y,
                       const EpOptions& options = {}) {
    options.validate();
    const auto start = std::chrono::steady_clock::now();
    const EpProblem pb = prepare_ep(model, moments, y);
    EpState state = EpState::initial(pb);
    EpDiagnostics& diag = state.diagnostics;
    diag.warnings = pb.warnings;
    const int r = pb.topo().root;

    if (pb.root_edge < 0) {
        // A single node: the posterior is the Laplace fit of prior times likelihood.
        if (!pb.clamped[r]) {
            std::vector<detail::LikSlot> slots;
            if (pb.has_likelihood(r)) slots.push_back({r, 0});
            const double eps = options.clamp_eps * pb.N();
            const auto eval = [&](const Vector& x) {
                return detail::evaluate_quadratic(pb, pb.root_prior.precision, pb.root_prior.shift, slots, x, eps);
            };
            const detail::NewtonOutcome o = detail::newton_maximize(eval, moments.node_means[r], options.inner_max_iters,
                                                                    options.inner_tol * pb.N());
            diag.clamps += o.at.clamps;
            diag.inner_iterations += o.iterations;
            if (o.line_search_failure) ++diag.line_search_failures;
            bool nonpd = o.nonpd;
            if (pb.dim(r) > 0) {
                detail::robust_llt(o.at.neg_hessian, nonpd);
                state.beliefs[r] = {o.at.neg_hessian, o.at.neg_hessian * o.x};
            }
            if (nonpd) ++diag.nonpd_hessians;
        }
        diag.sweeps = 1;
        diag.converged = true;
        diag.final_change = 0.0;
    } else {
        const std::vector<int> schedule = ep_schedule(pb);
        for (int sweep = 1; sweep <= options.max_sweeps; ++sweep) {
            const std::vector<NaturalGaussian> before = state.beliefs;
            for (int e : schedule) ep_update_edge(pb, state, e, options);
            diag.sweeps = sweep;
            const double change = sweep == 1 ? std::numeric_limits<double>::infinity()
                                             : detail::belief_change(pb, before, state.beliefs);
            diag.sweep_changes.push_back(change);
            diag.final_change = change;
            if (change < options.tolerance) {
                diag.converged = true;
                break;
            }
        }
        if (!diag.converged) diag.warnings.push_back("EP did not converge within max_sweeps");
    }

    EpResult out;
    out.posterior = detail::beliefs_to_posterior(pb, state);
    diag.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    out.diagnostics = diag;
    out.state = std::move(state);
    return out;
}

}  // namespace gcgm
