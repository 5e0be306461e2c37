#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <unordered_map>
#include <vector>

#include "gcgm/counts.hpp"
#include "gcgm/error.hpp"
#include "gcgm/linalg.hpp"
#include "gcgm/tree_model.hpp"

namespace gcgm {

/// Number of junction-tree edges a node separates: degree - 1. Leaves get 0;
/// an isolated single node gets -1, which turns its factorial term into the
/// plain multinomial denominator.
inline std::vector<int> separator_multiplicity(const TreeTopology& topo) {
    std::vector<int> nu(topo.node_count());
    for (int u = 0; u < topo.node_count(); ++u) nu[u] = topo.degree(u) - 1;
    return nu;
}

/// log h(n): log N! + sum_S nu(S) sum log n_S! - sum_C sum log n_C!.
/// Equals the log of the number of ordered samples with statistics n.
inline double log_base_measure(const TreeModel& model, const CountVector& n) {
    const TreeTopology topo = make_topology(model);
    const auto nu = separator_multiplicity(topo);
    double acc = std::lgamma(static_cast<double>(n.N) + 1.0);
    for (int u = 0; u < model.node_count; ++u) {
        if (nu[u] == 0) continue;
        double s = 0.0;
        for (Eigen::Index i = 0; i < n.node_counts[u].size(); ++i) {
            s += std::lgamma(static_cast<double>(n.node_counts[u](i)) + 1.0);
        }
        acc += nu[u] * s;
    }
    for (const auto& t : n.edge_counts) {
        for (Eigen::Index k = 0; k < t.size(); ++k) acc -= std::lgamma(static_cast<double>(t.data()[k]) + 1.0);
    }
    return acc;
}

/// log p(n; theta) = log h(n) + sum theta . n - N Q(theta).
inline double log_pmf(const TreeModel& model, const CountVector& n, double log_partition) {
    if (!check_support(model, n)) {
        throw Error(ErrorCode::UnsupportedCount, "count vector violates the CGM support constraints");
    }
    double acc = log_base_measure(model, n) - static_cast<double>(n.N) * log_partition;
    for (std::size_t e = 0; e < model.edges.size(); ++e) {
        acc += (model.log_potentials[e].array() * n.edge_counts[e].cast<double>().array()).sum();
    }
    if (model.root_log_potential) {
        acc += model.root_log_potential->dot(n.node_counts[model.root].cast<double>());
    }
    return acc;
}

inline double log_pmf(const TreeModel& model, const CountVector& n) {
    return log_pmf(model, n, compute_marginals(model).log_partition);
}

/// The same pmf written through clique and separator marginals:
/// log h(n) + sum_C n_C log mu_C - sum_S nu(S) n_S log mu_S.
inline double log_pmf_reparam(const TreeModel& model, const MarginalSet& marginals, const CountVector& n) {
    if (!check_support(model, n)) {
        throw Error(ErrorCode::UnsupportedCount, "count vector violates the CGM support constraints");
    }
    const TreeTopology topo = make_topology(model);
    const auto nu = separator_multiplicity(topo);
    auto weighted_log = [](double count, double p) {
        if (count == 0.0) return 0.0;
        if (p <= 0.0) throw Error(ErrorCode::ZeroMarginal, "positive count on a zero-probability configuration");
        return count * std::log(p);
    };
    double acc = log_base_measure(model, n);
    for (std::size_t e = 0; e < model.edges.size(); ++e) {
        const CountTable& t = n.edge_counts[e];
        for (Eigen::Index i = 0; i < t.rows(); ++i) {
            for (Eigen::Index j = 0; j < t.cols(); ++j) {
                acc += weighted_log(static_cast<double>(t(i, j)), marginals.edge_marginals[e](i, j));
            }
        }
    }
    for (int u = 0; u < model.node_count; ++u) {
        if (nu[u] == 0) continue;
        for (Eigen::Index i = 0; i < n.node_counts[u].size(); ++i) {
            acc -= nu[u] * weighted_log(static_cast<double>(n.node_counts[u](i)), marginals.node_marginals[u](i));
        }
    }
    return acc;
}

/// All length-`parts` nonnegative integer vectors summing to `total`, in
/// lexicographic order.
inline std::vector<CountVec> compositions(std::int64_t total, int parts) {
    std::vector<CountVec> out;
    CountVec cur = CountVec::Zero(parts);
    std::function<void(int, std::int64_t)> rec = [&](int k, std::int64_t left) {
        if (k == parts - 1) {
            cur(k) = left;
            out.push_back(cur);
            return;
        }
        for (std::int64_t v = left; v >= 0; --v) {
            cur(k) = v;
            rec(k + 1, left - v);
        }
    };
    rec(0, total);
    return out;
}

inline double binomial(std::int64_t n, std::int64_t k) {
    return std::round(std::exp(std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0)));
}

namespace detail {

/// Visits every L x L nonnegative integer table with the given row sums.
/// The callback receives the table.
template <class F>
void for_each_table(const CountVec& row_sums, int L, const std::vector<std::vector<CountVec>>& row_options_cache,
                    F&& f) {
    const int rows = static_cast<int>(row_sums.size());
    std::vector<const std::vector<CountVec>*> options(rows);
    for (int i = 0; i < rows; ++i) options[i] = &row_options_cache[static_cast<std::size_t>(row_sums(i))];
    std::vector<std::size_t> idx(rows, 0);
    CountTable table(rows, L);
    for (int i = 0; i < rows; ++i) table.row(i) = (*options[i])[0].transpose();
    while (true) {
        f(table);
        int k = rows - 1;
        while (k >= 0) {
            if (++idx[k] < options[k]->size()) {
                table.row(k) = (*options[k])[idx[k]].transpose();
                break;
            }
            idx[k] = 0;
            table.row(k) = (*options[k])[0].transpose();
            --k;
        }
        if (k < 0) return;
    }
}

inline std::vector<std::vector<CountVec>> row_option_cache(std::int64_t N, int L) {
    std::vector<std::vector<CountVec>> cache(static_cast<std::size_t>(N + 1));
    for (std::int64_t m = 0; m <= N; ++m) cache[m] = compositions(m, L);
    return cache;
}

}  // namespace detail

/// Depth-first enumeration of every supported count vector: root node counts
/// first, then edge tables in root-first edge order, each constrained by the
/// already-fixed parent counts. Throws TooLarge once more than `limit`
/// vectors have been produced.
template <class F>
void for_each_supported(const TreeModel& model, std::int64_t N, F&& f, std::int64_t limit = 10'000'000) {
    validate_tree(model);
    const TreeTopology topo = make_topology(model);
    const int L = model.domain_size;
    const auto cache = detail::row_option_cache(N, L);
    CountVector n = zero_counts(model, N);
    std::int64_t produced = 0;

    std::function<void(std::size_t)> rec = [&](std::size_t k) {
        if (k == topo.edge_order.size()) {
            if (++produced > limit) {
                throw Error(ErrorCode::TooLarge, "supported count enumeration exceeds the guard bound");
            }
            f(static_cast<const CountVector&>(n));
            return;
        }
        const int e = topo.edge_order[k];
        const int p = topo.edge_parent(e);
        const int c = topo.edge_child(e);
        detail::for_each_table(n.node_counts[p], L, cache, [&](const CountTable& t) {
            n.edge_counts[e] = topo.edge_forward[e] ? t : CountTable(t.transpose());
            n.node_counts[c] = t.colwise().sum().transpose();
            rec(k + 1);
        });
    };
    for (const auto& root_counts : cache[static_cast<std::size_t>(N)]) {
        n.node_counts[topo.root] = root_counts;
        rec(0);
    }
}

/// Posterior expectations of node and edge counts.
struct PosteriorMeans {
    std::vector<Vector> node_means;
    std::vector<Matrix> edge_means;  // rows index edges[e].first
    double log_evidence = 0.0;
};

inline double observation_log_likelihood(const ObservationSet& y, const CountVector& n) {
    double acc = 0.0;
    for (std::size_t u = 0; u < y.values.size(); ++u) {
        if (!y.values[u]) continue;
        acc += observation_log_likelihood(y.noise, *y.values[u], n.node_counts[u]);
        if (acc == kNegInf) return acc;
    }
    return acc;
}

/// Posterior means by flat enumeration of the whole support; practical only
/// for very small instances. Kept as an independent route for checking
/// `enumerate_posterior`.
inline PosteriorMeans enumerate_posterior_flat(const TreeModel& model, const ObservationSet& y, std::int64_t N,
                                               std::int64_t limit = 10'000'000) {
    validate_observations(model, y);
    const double log_q = compute_marginals(model).log_partition;
    const int L = model.domain_size;
    PosteriorMeans out;
    out.node_means.assign(model.node_count, Vector::Zero(L));
    out.edge_means.assign(model.edges.size(), Matrix::Zero(L, L));
    double log_total = kNegInf;
    for_each_supported(
        model, N,
        [&](const CountVector& n) {
            const double ll = observation_log_likelihood(y, n);
            if (ll == kNegInf) return;
            const double w = log_pmf(model, n, log_q) + ll;
            const double next = log_add(log_total, w);
            const double step = std::exp(w - next);
            for (int u = 0; u < model.node_count; ++u) {
                out.node_means[u] += step * (n.node_counts[u].cast<double>() - out.node_means[u]);
            }
            for (std::size_t e = 0; e < model.edges.size(); ++e) {
                out.edge_means[e] += step * (n.edge_counts[e].cast<double>() - out.edge_means[e]);
            }
            log_total = next;
        },
        limit);
    if (log_total == kNegInf) throw Error(ErrorCode::DomainError, "observations have zero probability");
    out.log_evidence = log_total;
    return out;
}

struct OracleOptions {
    /// Upper bound on node-state pairs and on edge tables visited per edge.
    std::int64_t max_work = 10'000'000;
};

/// Exact posterior E[n | y] over every supported count vector. The sum over
/// the support is organized along the tree: the variables are the node count
/// vectors, and each edge factor sums exp(theta . n_uv) / prod n_uv! over every
/// table consistent with its two endpoint vectors. No approximation is made.
inline PosteriorMeans enumerate_posterior(const TreeModel& model, const ObservationSet& y, std::int64_t N,
                                          const OracleOptions& options = {}) {
    validate_tree(model);
    validate_observations(model, y);
    if (N < 1) throw Error(ErrorCode::InvalidArgument, "population size must be >= 1");
    const int L = model.domain_size;
    const double log_q = compute_marginals(model).log_partition;
    const TreeTopology topo = make_topology(model);
    const auto nu = separator_multiplicity(topo);

    const auto cache = detail::row_option_cache(N, L);
    const std::vector<CountVec>& states = cache[static_cast<std::size_t>(N)];
    const auto S = static_cast<std::int64_t>(states.size());
    double table_work = 0.0;
    for (const auto& s : states) {
        double prod = 1.0;
        for (int i = 0; i < L; ++i) prod *= static_cast<double>(cache[static_cast<std::size_t>(s(i))].size());
        table_work += prod;
    }
    if (static_cast<double>(S) * static_cast<double>(S) > static_cast<double>(options.max_work) ||
        table_work > static_cast<double>(options.max_work)) {
        throw Error(ErrorCode::TooLarge, "exact posterior exceeds the guard bound (" + std::to_string(S) +
                                             " node states, " + std::to_string(table_work) + " tables per edge)");
    }

    std::unordered_map<std::uint64_t, int> index;
    auto key = [&](const CountVec& v) {
        std::uint64_t k = 0;
        for (int i = 0; i < L; ++i) k = k * static_cast<std::uint64_t>(N + 1) + static_cast<std::uint64_t>(v(i));
        return k;
    };
    for (int s = 0; s < S; ++s) index.emplace(key(states[s]), s);

    std::vector<Vector> node_pot(model.node_count, Vector::Zero(S));
    for (int u = 0; u < model.node_count; ++u) {
        for (int s = 0; s < S; ++s) {
            double acc = 0.0;
            if (nu[u] != 0) {
                for (int i = 0; i < L; ++i) acc += nu[u] * std::lgamma(static_cast<double>(states[s](i)) + 1.0);
            }
            if (u == model.root && model.root_log_potential) {
                acc += model.root_log_potential->dot(states[s].cast<double>());
            }
            if (y.values[u]) acc += observation_log_likelihood(y.noise, *y.values[u], states[s]);
            node_pot[u](s) = acc;
        }
    }

    // Every table is scored by theta . n_uv - sum log n_uv!.
    auto table_log_weight = [&](const Matrix& theta, const CountTable& t) {
        double w = 0.0;
        for (Eigen::Index k = 0; k < t.size(); ++k) {
            const double c = static_cast<double>(t.data()[k]);
            w += theta.data()[k] * c - std::lgamma(c + 1.0);
        }
        return w;
    };

    std::vector<Matrix> edge_pot(model.edges.size(), Matrix::Constant(S, S, kNegInf));
    for (std::size_t e = 0; e < model.edges.size(); ++e) {
        const Matrix& theta = model.log_potentials[e];
        for (int s = 0; s < S; ++s) {
            detail::for_each_table(states[s], L, cache, [&](const CountTable& t) {
                const int col = index.at(key(t.colwise().sum().transpose()));
                edge_pot[e](s, col) = log_add(edge_pot[e](s, col), table_log_weight(theta, t));
            });
        }
    }

    TreeBeliefs beliefs;
    try {
        beliefs = tree_sum_product(topo, node_pot, edge_pot);
    } catch (const Error&) {
        throw Error(ErrorCode::DomainError, "observations have zero probability under the CGM");
    }

    PosteriorMeans out;
    out.node_means.assign(model.node_count, Vector::Zero(L));
    for (int u = 0; u < model.node_count; ++u) {
        for (int s = 0; s < S; ++s) out.node_means[u] += beliefs.node[u](s) * states[s].cast<double>();
    }
    out.edge_means.assign(model.edges.size(), Matrix::Zero(L, L));
    for (std::size_t e = 0; e < model.edges.size(); ++e) {
        const Matrix& theta = model.log_potentials[e];
        const Matrix& pair = beliefs.edge[e];
        for (int s = 0; s < S; ++s) {
            if (pair.row(s).maxCoeff() <= 0.0) continue;
            detail::for_each_table(states[s], L, cache, [&](const CountTable& t) {
                const int col = index.at(key(t.colwise().sum().transpose()));
                const double p = pair(s, col);
                if (p <= 0.0) return;
                const double weight = p * std::exp(table_log_weight(theta, t) - edge_pot[e](s, col));
                out.edge_means[e] += weight * t.cast<double>();
            });
        }
    }
    out.log_evidence = beliefs.log_partition + std::lgamma(static_cast<double>(N) + 1.0) - N * log_q;
    return out;
}

/// Relative L1 error ||estimate - reference||_1 / ||reference||_1 over a list of blocks.
template <class Block>
double relative_l1_error(const std::vector<Block>& estimate, const std::vector<Block>& reference) {
    double num = 0.0;
    double den = 0.0;
    for (std::size_t k = 0; k < reference.size(); ++k) {
        num += (estimate[k] - reference[k]).cwiseAbs().sum();
        den += reference[k].cwiseAbs().sum();
    }
    return den > 0.0 ? num / den : num;
}

}  // namespace gcgm
