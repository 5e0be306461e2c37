#include <catch2/catch_amalgamated.hpp>

#include "test_support.hpp"

using namespace gcgm;
using namespace gcgm::testing;
using Catch::Approx;

namespace {

GridConfig grid(int side, int horizon, const Weights& w) {
    GridConfig c;
    c.side = side;
    c.horizon = horizon;
    c.w = w;
    c.N = 100;
    c.seed = 3;
    return resolve_wind(c);
}

/// Softmax over the explicit logits w'f(i, j, t), computed independently.
Matrix softmax_oracle(const GridConfig& c, int t, double shift = 0.0) {
    const int L = c.cells();
    Matrix p(L, L);
    for (int i = 0; i < L; ++i) {
        double total = 0.0;
        for (int j = 0; j < L; ++j) {
            p(i, j) = std::exp(c.w.dot(features(i, j, t, c)) + shift);
            total += p(i, j);
        }
        p.row(i) /= total;
    }
    return p;
}

}  // namespace

TEST_CASE("feature values on a 2x2 grid", "[birdsim]") {
    GridConfig c = grid(2, 2, Weights::Zero());
    c.wind = {{1.0, 0.0}};
    const double r = 1.0 / std::sqrt(2.0);
    CHECK((features(0, 1, 0, c) - Weights(-1.0, r, 1.0, 0.0)).cwiseAbs().maxCoeff() < 1e-15);
    CHECK((features(0, 0, 0, c) - Weights(0.0, 0.0, 0.0, 1.0)).cwiseAbs().maxCoeff() < 1e-15);
    CHECK((features(0, 3, 0, c) - Weights(-std::sqrt(2.0), 1.0, r, 0.0)).cwiseAbs().maxCoeff() < 1e-15);
    CHECK((features(3, 2, 0, c) - Weights(-1.0, 0.0, -1.0, 0.0)).cwiseAbs().maxCoeff() < 1e-15);
    CHECK_THROWS_AS(features(0, 4, 0, c), Error);
    CHECK_THROWS_AS(features(0, 1, 1, c), Error);
}

TEST_CASE("transition matrices", "[birdsim]") {
    const GridConfig zero = grid(3, 3, Weights::Zero());
    CHECK(max_abs_diff(transition_matrix(zero, 0), Matrix::Constant(9, 9, 1.0 / 9)) < 1e-15);

    const GridConfig stay = grid(2, 3, Weights(0, 0, 0, 10));
    const Matrix p = transition_matrix(stay, 1);
    for (int i = 0; i < 4; ++i) CHECK(p(i, i) > 0.999);

    const GridConfig migration = grid(3, 4, Weights(1, 2, 2, 2));
    for (int t = 0; t < 3; ++t) {
        const Matrix q = transition_matrix(migration, t);
        CHECK((q.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-14);
        CHECK(max_abs_diff(q, softmax_oracle(migration, t)) < 1e-14);
        // A constant added to every logit of a row leaves the row unchanged.
        CHECK(max_abs_diff(q, softmax_oracle(migration, t, 7.5)) < 1e-14);
    }
}

TEST_CASE("transitions drift toward the destination", "[birdsim]") {
    for (int side : {2, 3, 4}) {
        GridConfig c = grid(side, 2, Weights(1, 2, 2, 2));
        c.wind = {{1.0 / std::sqrt(2.0), 1.0 / std::sqrt(2.0)}};
        const int L = c.cells();
        const Matrix p = transition_matrix(c, 0);
        const auto to_dest = [&](int j) { return std::hypot(side - 1 - j % side, side - 1 - j / side); };
        Eigen::Index mode = 0;
        p.row(0).maxCoeff(&mode);
        CHECK(to_dest(static_cast<int>(mode)) < to_dest(0));
        // The expected move from the start cell points toward the destination.
        double drift = 0.0;
        for (int j = 0; j < L; ++j) drift += p(0, j) * (j % side + j / side);
        CHECK(drift > 0.0);
    }
}

TEST_CASE("chain model marginals", "[birdsim]") {
    const GridConfig c = grid(2, 4, Weights(1, 2, 2, 2));
    const TreeModel m = build_chain_model(c);
    const MarginalSet mar = compute_marginals(m);
    CHECK(mar.node_marginals[0](0) > 1.0 - 1e-15);

    Eigen::RowVectorXd mu = mar.node_marginals[0].transpose();
    for (int t = 0; t + 1 < 4; ++t) {
        mu = mu * transition_matrix(c, t);
        CHECK(max_abs_diff(mu.transpose(), mar.node_marginals[t + 1]) < 1e-12);
    }

    const TreeModel flat = build_chain_model(grid(2, 2, Weights::Zero()));
    CHECK(max_abs_diff(compute_marginals(flat).node_marginals[1], Vector::Constant(4, 0.25)) < 1e-12);
}

TEST_CASE("grid validation", "[birdsim]") {
    GridConfig c;
    c.side = 1;
    CHECK_THROWS_AS(c.validate(), Error);
    c.side = 2;
    c.wind = {{1.0, 1.0}, {1.0, 0.0}, {0.0, 1.0}, {1.0, 0.0}};
    CHECK_THROWS_AS(c.validate(), Error);
    c.wind.pop_back();
    c.wind[0] = {0.6, 0.8};
    CHECK_THROWS_AS(c.validate(), Error);
    c.wind.push_back({1.0, 0.0});
    CHECK_NOTHROW(c.validate());
}

TEST_CASE("generated datasets", "[birdsim]") {
    GridConfig c;
    c.side = 2;
    c.horizon = 3;
    c.N = 50;
    c.seed = 7;
    const Dataset a = generate(c);
    const Dataset b = generate(c);
    CHECK(a.counts.node_counts == b.counts.node_counts);
    CHECK(a.counts.edge_counts == b.counts.edge_counts);
    for (int t = 0; t < 3; ++t) CHECK(*a.observations.values[t] == *b.observations.values[t]);
    CHECK(a.config.wind == b.config.wind);
    CHECK(check_support(build_chain_model(a.config), a.counts));
    CHECK(a.counts.node_counts[0](0) == 50);

    c.seed = 8;
    CHECK(generate(c).counts.edge_counts != a.counts.edge_counts);

    c.lambda = 1e-12;
    const Dataset quiet = generate(c);
    for (int t = 0; t < 3; ++t) CHECK(quiet.observations.values[t]->cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("observations have mean lambda times the counts", "[birdsim][statistical]") {
    GridConfig c;
    c.side = 2;
    c.horizon = 2;
    c.N = 10;
    c.lambda = 0.7;
    c.wind = {{1.0, 0.0}};
    const MarginalSet mar = compute_marginals(build_chain_model(c));
    const int reps = 20000;
    Matrix sum = Matrix::Zero(2, 4);
    Matrix sq = Matrix::Zero(2, 4);
    for (int r = 0; r < reps; ++r) {
        c.seed = static_cast<std::uint64_t>(r);
        const Dataset d = generate(c);
        for (int t = 0; t < 2; ++t) {
            sum.row(t) += d.observations.values[t]->transpose();
            sq.row(t) += d.observations.values[t]->array().square().matrix().transpose();
        }
    }
    for (int t = 0; t < 2; ++t) {
        for (int i = 0; i < 4; ++i) {
            const double mean = sum(t, i) / reps;
            const double var = sq(t, i) / reps - mean * mean;
            const double want = c.lambda * 10.0 * mar.node_marginals[t](i);
            CHECK(std::abs(mean - want) <= 4.0 * std::sqrt(std::max(var, 1e-12) / reps) + 1e-12);
        }
    }
}
