#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "dsdf/matrix.hpp"
#include "dsdf/tree.hpp"

using namespace dsdf;

namespace {

double logit(double p) { return std::log(p / (1.0 - p)); }

/// Independent finite-difference derivative of u . P_T with respect to one
/// head output.
double fd_tree_grad(const TreeTopology& topo, Vector<double> f, const Matrix<double>& pi,
                    const Vector<double>& upstream, std::size_t idx, double h = 1e-6) {
    f[idx] += h;
    const double hi = dot(upstream, tree_predict(topo, f, pi));
    f[idx] -= 2 * h;
    const double lo = dot(upstream, tree_predict(topo, f, pi));
    return (hi - lo) / (2 * h);
}

Matrix<double> random_row_stochastic(std::size_t rows, std::size_t cols, Rng& rng) {
    Matrix<double> pi(rows, cols);
    for (std::size_t r = 0; r < rows; ++r) {
        double sum = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            pi(r, c) = rng.uniform(0.01, 1.0);
            sum += pi(r, c);
        }
        for (std::size_t c = 0; c < cols; ++c) pi(r, c) /= sum;
    }
    return pi;
}

double batch_nll(const Matrix<double>& pi, const Matrix<double>& leaf_mu,
                 const std::vector<int>& labels) {
    double nll = 0.0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        double p = 0.0;
        for (std::size_t l = 0; l < pi.rows(); ++l)
            p += pi(l, static_cast<std::size_t>(labels[i])) * leaf_mu(i, l);
        nll += -std::log(std::max(p, 1e-300));
    }
    return nll;
}

} // namespace

TEST_CASE("split probability matches the sigmoid") {
    REQUIRE(split_probability(0.0) == 0.5);
    REQUIRE(split_probability(50.0) == Catch::Approx(1.0).margin(1e-15));
    REQUIRE(split_probability(std::log(3.0)) == Catch::Approx(0.75).margin(1e-15));
    REQUIRE(split_probability(-std::log(3.0)) == Catch::Approx(0.25).margin(1e-15));
}

TEST_CASE("topology validation rejects bad phi") {
    TreeTopology topo;
    topo.depth = 3;
    topo.phi = {0, 1, 1};
    REQUIRE_THROWS_AS(topo.validate(), ConfigError);
    topo.phi = {0, 1};
    REQUIRE_THROWS_AS(topo.validate(), ConfigError);
    topo.depth = 1;
    REQUIRE_THROWS_AS(topo.validate(), ConfigError);
}

TEST_CASE("single split routes by its sigmoid") {
    const auto topo = TreeTopology::with_identity_phi(2);
    const auto r = route(topo, Vector<double>{logit(0.7)});
    const auto mu = r.leaf_mu(topo);
    REQUIRE(mu[0] == Catch::Approx(0.7).margin(1e-12));
    REQUIRE(mu[1] == Catch::Approx(0.3).margin(1e-12));
}

TEST_CASE("depth-3 routing matches the hand-computed ancestor products") {
    // s = (0.6, 0.5, 0.8) in heap order gives leaves (0.30, 0.30, 0.32, 0.08)
    const auto topo = TreeTopology::with_identity_phi(3);
    const auto r = route(topo, Vector<double>{logit(0.6), 0.0, logit(0.8)});
    const auto mu = r.leaf_mu(topo);
    REQUIRE(mu[0] == Catch::Approx(0.30).margin(1e-12));
    REQUIRE(mu[1] == Catch::Approx(0.30).margin(1e-12));
    REQUIRE(mu[2] == Catch::Approx(0.32).margin(1e-12));
    REQUIRE(mu[3] == Catch::Approx(0.08).margin(1e-12));
}

TEST_CASE("zero head outputs route uniformly") {
    for (int depth : {2, 3, 4}) {
        const auto topo = TreeTopology::with_identity_phi(depth);
        const auto r = route(topo, Vector<double>(static_cast<std::size_t>(topo.split_count()), 0.0));
        for (double mu : r.leaf_mu(topo))
            REQUIRE(mu == Catch::Approx(1.0 / topo.leaf_count()).margin(1e-12));
    }
}

TEST_CASE("route rejects mismatched head size") {
    const auto topo = TreeTopology::with_identity_phi(3);
    REQUIRE_THROWS_AS(route(topo, Vector<double>{0.0}), InputError);
}

TEST_CASE("leaf masses sum to one and parents equal child sums") {
    Rng rng(11);
    for (int depth : {2, 3, 4, 6}) {
        const auto topo = TreeTopology::with_identity_phi(depth);
        for (int trial = 0; trial < 25; ++trial) {
            Vector<double> f(static_cast<std::size_t>(topo.split_count()));
            for (auto& v : f) v = rng.normal(0.0, 3.0);
            const auto r = route(topo, f);
            double total = 0.0;
            for (double mu : r.leaf_mu(topo)) total += mu;
            REQUIRE(std::abs(total - 1.0) < 1e-9);
            for (int n = 0; n < topo.split_count(); ++n) {
                const double parent = r.node_mu[static_cast<std::size_t>(n)];
                const double child_sum =
                    r.node_mu[static_cast<std::size_t>(TreeTopology::left_child(n))] +
                    r.node_mu[static_cast<std::size_t>(TreeTopology::right_child(n))];
                REQUIRE(std::abs(parent - child_sum) < 1e-9);
            }
        }
    }
}

TEST_CASE("one-hot leaves reproduce the routing mass") {
    const auto topo = TreeTopology::with_identity_phi(2);
    const auto pi = Matrix<double>::from_rows({{1.0, 0.0}, {0.0, 1.0}});
    const auto p = tree_predict(topo, Vector<double>{logit(0.7)}, pi);
    REQUIRE(p[0] == Catch::Approx(0.7).margin(1e-12));
    REQUIRE(p[1] == Catch::Approx(0.3).margin(1e-12));
}

TEST_CASE("uniform leaf rows marginalize out the routing") {
    Rng rng(3);
    const auto topo = TreeTopology::with_identity_phi(3);
    const Matrix<double> pi(4, 5, 0.2);
    Vector<double> f(3);
    for (auto& v : f) v = rng.normal(0.0, 2.0);
    for (double p : tree_predict(topo, f, pi))
        REQUIRE(p == Catch::Approx(0.2).margin(1e-12));
}

TEST_CASE("one-hot four-class leaves make the posterior equal leaf masses") {
    const auto topo = TreeTopology::with_identity_phi(3);
    const auto pi = Matrix<double>::from_rows(
        {{1.0, 0.0, 0.0, 0.0}, {0.0, 1.0, 0.0, 0.0}, {0.0, 0.0, 1.0, 0.0}, {0.0, 0.0, 0.0, 1.0}});
    const Vector<double> f{logit(0.6), 0.0, logit(0.8)};
    const auto p = tree_predict(topo, f, pi);
    const auto mu = route(topo, f).leaf_mu(topo);
    for (std::size_t i = 0; i < 4; ++i) REQUIRE(p[i] == Catch::Approx(mu[i]).margin(1e-12));
}

TEST_CASE("tree_predict rejects unnormalized leaf rows") {
    const auto topo = TreeTopology::with_identity_phi(2);
    const auto bad = Matrix<double>::from_rows({{0.6, 0.6}, {0.5, 0.5}});
    REQUIRE_THROWS_AS(tree_predict(topo, Vector<double>{0.0}, bad), InvariantError);
    const auto negative = Matrix<double>::from_rows({{1.2, -0.2}, {0.5, 0.5}});
    REQUIRE_THROWS_AS(tree_predict(topo, Vector<double>{0.0}, negative), InvariantError);
}

TEST_CASE("tree predictions are probability vectors for random instances") {
    Rng rng(19);
    for (int trial = 0; trial < 30; ++trial) {
        const int depth = 2 + static_cast<int>(rng.index(3));
        const auto topo = TreeTopology::with_identity_phi(depth);
        const std::size_t c = 2 + rng.index(5);
        const auto pi = random_row_stochastic(static_cast<std::size_t>(topo.leaf_count()), c, rng);
        Vector<double> f(static_cast<std::size_t>(topo.split_count()));
        for (auto& v : f) v = rng.normal(0.0, 4.0);
        const auto p = tree_predict(topo, f, pi);
        double sum = 0.0;
        for (double v : p) {
            REQUIRE(v >= 0.0);
            sum += v;
        }
        REQUIRE(std::abs(sum - 1.0) < 1e-9);
    }
}

TEST_CASE("zero upstream gives zero gradients") {
    const auto topo = TreeTopology::with_identity_phi(3);
    const Vector<double> f{0.3, -0.2, 1.0};
    const auto routing = route(topo, f);
    Matrix<double> pi(4, 2, 0.5);
    const auto df = tree_backward(topo, routing, pi, Vector<double>{0.0, 0.0});
    for (double g : df) REQUIRE(g == 0.0);
}

TEST_CASE("tree gradients match finite differences at depth 3") {
    Rng rng(23);
    const auto topo = TreeTopology::with_identity_phi(3);
    for (int trial = 0; trial < 10; ++trial) {
        const auto pi = random_row_stochastic(4, 4, rng);
        Vector<double> f(3);
        for (auto& v : f) v = rng.normal(0.0, 2.0);
        Vector<double> upstream(4);
        for (auto& v : upstream) v = rng.normal();
        const auto routing = route(topo, f);
        const auto df = tree_backward(topo, routing, pi, upstream);
        for (std::size_t i = 0; i < f.size(); ++i) {
            const double fd = fd_tree_grad(topo, f, pi, upstream, i);
            const double denom = std::max({std::abs(fd), std::abs(df[i]), 1.0});
            REQUIRE(std::abs(fd - df[i]) / denom < 1e-6);
        }
    }
}

TEST_CASE("an unreachable split node contributes no gradient") {
    const auto topo = TreeTopology::with_identity_phi(3);
    // root sends everything left, so node 2 (right child) has mu = 0
    const auto routing = route_from_probs(topo, Vector<double>{1.0, 0.3, 0.9});
    const auto pi = Matrix<double>::from_rows(
        {{1.0, 0.0}, {0.0, 1.0}, {1.0, 0.0}, {0.0, 1.0}});
    const auto df = tree_backward(topo, routing, pi, Vector<double>{1.0, -1.0});
    REQUIRE(routing.node_mu[2] == 0.0);
    REQUIRE(df[2] == 0.0);
    // node 1 keeps all the mass and an interior split, so its gradient lives
    REQUIRE(df[1] != 0.0);
}

TEST_CASE("node-seeded backward differentiates the reach probability") {
    Rng rng(31);
    const auto topo = TreeTopology::with_identity_phi(4);
    Vector<double> f(static_cast<std::size_t>(topo.split_count()));
    for (auto& v : f) v = rng.normal();
    const auto routing = route(topo, f);
    for (int node : {1, 4, 10, topo.node_count() - 1}) {
        const auto df = tree_backward_node(topo, routing, node);
        const double h = 1e-6;
        for (std::size_t i = 0; i < f.size(); ++i) {
            Vector<double> fp = f;
            fp[i] += h;
            const double hi = route(topo, fp).node_mu[static_cast<std::size_t>(node)];
            fp[i] -= 2 * h;
            const double lo = route(topo, fp).node_mu[static_cast<std::size_t>(node)];
            const double fd = (hi - lo) / (2 * h);
            REQUIRE(std::abs(fd - df[i]) < 1e-6);
        }
    }
}

TEST_CASE("leaf update concentrates mass on the observed label") {
    // one sample routed fully left with label 0: the left leaf becomes
    // one-hot at class 0 and the unreached right leaf keeps its row
    const auto topo = TreeTopology::with_identity_phi(2);
    const Matrix<double> pi(2, 2, 0.5);
    auto leaf_mu = Matrix<double>::from_rows({{1.0, 0.0}});
    const auto next = update_leaf_distributions(topo, pi, leaf_mu, {0});
    REQUIRE(next(0, 0) == Catch::Approx(1.0).margin(1e-12));
    REQUIRE(next(0, 1) == Catch::Approx(0.0).margin(1e-12));
    REQUIRE(next(1, 0) == 0.5);
    REQUIRE(next(1, 1) == 0.5);
}

TEST_CASE("deterministic correct routing is a fixed point of the leaf update") {
    const auto topo = TreeTopology::with_identity_phi(2);
    const auto pi = Matrix<double>::from_rows({{1.0, 0.0}, {0.0, 1.0}});
    const auto leaf_mu = Matrix<double>::from_rows({{1.0, 0.0}, {0.0, 1.0}});
    const auto next = update_leaf_distributions(topo, pi, leaf_mu, {0, 1});
    REQUIRE(next == pi);
}

TEST_CASE("leaf update rejects zero-likelihood samples") {
    const auto topo = TreeTopology::with_identity_phi(2);
    const auto pi = Matrix<double>::from_rows({{1.0, 0.0}, {1.0, 0.0}});
    const auto leaf_mu = Matrix<double>::from_rows({{0.5, 0.5}});
    REQUIRE_THROWS_AS(update_leaf_distributions(topo, pi, leaf_mu, {1}), DegenerateError);
}

TEST_CASE("leaf updates keep rows stochastic and never increase the batch NLL") {
    Rng rng(41);
    for (int trial = 0; trial < 12; ++trial) {
        const int depth = 2 + static_cast<int>(rng.index(3));
        const auto topo = TreeTopology::with_identity_phi(depth);
        const std::size_t classes = 2 + rng.index(4);
        const std::size_t batch = 8 + rng.index(24);
        auto pi = random_row_stochastic(static_cast<std::size_t>(topo.leaf_count()), classes, rng);
        Matrix<double> leaf_mu(batch, static_cast<std::size_t>(topo.leaf_count()));
        std::vector<int> labels(batch);
        for (std::size_t i = 0; i < batch; ++i) {
            Vector<double> f(static_cast<std::size_t>(topo.split_count()));
            for (auto& v : f) v = rng.normal(0.0, 2.0);
            const auto mu = route(topo, f).leaf_mu(topo);
            for (std::size_t l = 0; l < mu.size(); ++l) leaf_mu(i, l) = mu[l];
            labels[i] = static_cast<int>(rng.index(classes));
        }
        double prev = batch_nll(pi, leaf_mu, labels);
        for (int step = 0; step < 5; ++step) {
            pi = update_leaf_distributions(topo, pi, leaf_mu, labels);
            for (std::size_t l = 0; l < pi.rows(); ++l) {
                double sum = 0.0;
                for (std::size_t c = 0; c < pi.cols(); ++c) {
                    REQUIRE(pi(l, c) >= 0.0);
                    sum += pi(l, c);
                }
                REQUIRE(std::abs(sum - 1.0) < 1e-9);
            }
            const double cur = batch_nll(pi, leaf_mu, labels);
            REQUIRE(cur <= prev + 1e-9);
            prev = cur;
        }
    }
}
