#include <catch2/catch_amalgamated.hpp>

#include "test_support.hpp"

using namespace gcgm;
using namespace gcgm::testing;
using Catch::Approx;

namespace {

TreeModel single_node(const Vector& log_table) {
    TreeModel m;
    m.node_count = 1;
    m.domain_size = static_cast<int>(log_table.size());
    m.root_log_potential = log_table;
    return m;
}

/// Reduced (node u, node v) vector of one population, in model edge order.
Vector reduced_pair(const GaussianMoments& mo, const CountVector& c, int u, int v) {
    Vector out(mo.dim(u) + mo.dim(v));
    out << reduce_node(mo.basis(u), c.node_counts[u].cast<double>()), reduce_node(mo.basis(v), c.node_counts[v].cast<double>());
    return out;
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

}  // namespace

TEST_CASE("single binary node", "[moments]") {
    const TreeModel m = single_node(Vector::Zero(2));
    const GaussianMoments mo = build_moments(m, compute_marginals(m), 100.0);
    REQUIRE(mo.dim(0) == 1);
    CHECK(mo.node_means[0](0) == Approx(50.0));
    CHECK(mo.node_covs[0](0, 0) == Approx(25.0));
    CHECK_THROWS_AS(build_moments(m, compute_marginals(m), 0.0), Error);
}

TEST_CASE("independent nodes have zero cross covariance", "[moments]") {
    const TreeModel m = chain(2, Matrix::Zero(3, 3));
    const GaussianMoments mo = build_moments(m, compute_marginals(m), 40.0);
    CHECK(mo.edge_joints[0].cov.topRightCorner(2, 2).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("edge joints agree on shared nodes", "[moments]") {
    std::mt19937_64 rng(12);
    for (int rep = 0; rep < 30; ++rep) {
        const TreeModel m = random_tree(5, 2 + rep % 3, rng, 2.0);
        const GaussianMoments mo = build_moments(m, compute_marginals(m), 75.0);
        for (std::size_t e = 0; e < m.edges.size(); ++e) {
            const auto [u, v] = m.edges[e];
            const EdgeJoint& j = mo.edge_joints[e];
            const int du = mo.dim(u);
            const int dv = mo.dim(v);
            CHECK(max_abs_diff(j.mean.head(du), mo.node_means[u]) < 1e-10);
            CHECK(max_abs_diff(j.mean.tail(dv), mo.node_means[v]) < 1e-10);
            CHECK(max_abs_diff(j.cov.topLeftCorner(du, du), mo.node_covs[u]) < 1e-10);
            CHECK(max_abs_diff(j.cov.bottomRightCorner(dv, dv), mo.node_covs[v]) < 1e-10);
            CHECK(Eigen::LLT<Matrix>(j.cov).info() == Eigen::Success);
        }
    }
}

TEST_CASE("extended block extends the edge joint", "[moments]") {
    std::mt19937_64 rng(13);
    const TreeModel m = random_tree(3, 3, rng, 1.0);
    const GaussianMoments mo = build_moments(m, compute_marginals(m), 20.0);
    for (std::size_t e = 0; e < m.edges.size(); ++e) {
        const Gaussian g = extended_block(mo, static_cast<int>(e));
        const EdgeJoint& j = mo.edge_joints[e];
        const Eigen::Index d = j.mean.size();
        CHECK(max_abs_diff(g.mean.head(d), j.mean) < 1e-12);
        CHECK(max_abs_diff(g.cov.topLeftCorner(d, d), j.cov) < 1e-12);
        const double p = mo.marginals.edge_marginals[e](0, 0);
        CHECK(g.mean(d) == Approx(20.0 * p));
        CHECK(g.cov(d, d) == Approx(20.0 * p * (1 - p)));
    }
}

TEST_CASE("precision is zero off the tree edges", "[moments]") {
    std::mt19937_64 rng(14);
    const TreeModel m = random_chain(5, 3, rng, 1.5);
    const GaussianMoments mo = build_moments(m, compute_marginals(m), 10.0);
    const PrecisionReport r = precision_pattern(m, mo);
    for (int u = 0; u < 5; ++u) {
        for (int w = 0; w < 5; ++w) {
            if (std::abs(u - w) > 1) CHECK(r.block_max(u, w) < 1e-8);
        }
    }
    CHECK(r.block_max(1, 2) > 1e-4);

    const TreeModel ind = random_tree(4, 3, rng, 0.0);
    const PrecisionReport ri = precision_pattern(ind, build_moments(ind, compute_marginals(ind), 10.0));
    for (int u = 0; u < 4; ++u) {
        for (int w = 0; w < 4; ++w) {
            if (u != w) CHECK(ri.block_max(u, w) < 1e-12);
        }
    }
}

TEST_CASE("moments match sampled populations", "[moments][statistical]") {
    std::mt19937_64 rng(15);
    const TreeModel m = random_chain(3, 3, rng, 1.0);
    const MarginalSet mar = compute_marginals(m);
    const double N = 30.0;
    const GaussianMoments mo = build_moments(m, mar, N);
    const int reps = 4000;
    const int d = mo.dim(0) + mo.dim(1);
    Vector sum = Vector::Zero(d);
    Matrix outer = Matrix::Zero(d, d);
    for (int r = 0; r < reps; ++r) {
        const CountVector c = sufficient_stats(sample_population(m, mar, 30, 1000 + r), m);
        const Vector z = reduced_pair(mo, c, 0, 1);
        sum += z;
        outer += z * z.transpose();
    }
    const Vector mean = sum / reps;
    const Matrix cov = (outer - reps * mean * mean.transpose()) / (reps - 1);
    const EdgeJoint& j = mo.edge_joints[0];
    for (int a = 0; a < d; ++a) {
        CHECK(std::abs(mean(a) - j.mean(a)) < 4.0 * std::sqrt(j.cov(a, a) / reps));
        for (int b = 0; b < d; ++b) {
            // Sample covariance entries: generous bound from their own standard error.
            const double se = std::sqrt((j.cov(a, a) * j.cov(b, b) + j.cov(a, b) * j.cov(a, b)) / reps);
            CHECK(std::abs(cov(a, b) - j.cov(a, b)) < 5.0 * se);
        }
    }
}

TEST_CASE("Gaussian fit to node counts improves with N", "[moments]") {
    std::mt19937_64 rng(16);
    const TreeModel m = random_chain(2, 2, rng, 1.0);
    const MarginalSet mar = compute_marginals(m);
    const double q = mar.log_partition;
    double previous = 1.0;
    for (std::int64_t N : {5, 20, 80}) {
        std::vector<double> pmf(static_cast<std::size_t>(N + 1), 0.0);
        for_each_supported(m, N, [&](const CountVector& n) { pmf[n.node_counts[1](0)] += std::exp(log_pmf(m, n, q)); });
        const GaussianMoments mo = build_moments(m, mar, static_cast<double>(N));
        const double mean = mo.node_means[1](0);
        const double sd = std::sqrt(mo.node_covs[1](0, 0));
        double cdf = 0.0;
        double distance = 0.0;
        for (std::int64_t k = 0; k <= N; ++k) {
            cdf += pmf[k];
            distance = std::max(distance, std::abs(cdf - normal_cdf((k + 0.5 - mean) / sd)));
        }
        CHECK(distance < previous);
        previous = distance;
    }
    CHECK(previous < 0.01);
}

TEST_CASE("pruned states are reported and dropped", "[moments]") {
    Matrix t(3, 3);
    t << 0.0, 0.0, -40.0, 0.0, 0.0, -40.0, -40.0, -40.0, -40.0;
    const TreeModel m = chain(2, t);
    const GaussianMoments mo = build_moments(m, compute_marginals(m), 10.0);
    CHECK(mo.dim(0) == 1);
    CHECK(mo.pruned.size() == 2);
    CHECK(mo.pruned[0].state == 2);
}
