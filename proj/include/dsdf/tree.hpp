#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "dsdf/errors.hpp"
#include "dsdf/matrix.hpp"

namespace dsdf {

/// Probability floor used inside logs and divisions.
inline constexpr double kProbFloor = 1e-12;

/// Structure of one full binary decision tree of depth `d`.
///
/// Nodes are laid out heap-style over a single index space of 2^d - 1 slots:
/// indices [0, N) are split nodes (N = 2^(d-1) - 1), indices [N, N + L) are
/// the L = 2^(d-1) leaves. The children of node n are 2n+1 and 2n+2; no edges
/// are stored. `phi` assigns each split node one neuron of the tree's head
/// layer and is a permutation of {0..N-1}.
struct TreeTopology {
    int depth = 2;
    std::vector<int> phi;

    int split_count() const noexcept { return (1 << (depth - 1)) - 1; }
    int leaf_count() const noexcept { return 1 << (depth - 1); }
    int node_count() const noexcept { return (1 << depth) - 1; }

    static int left_child(int n) noexcept { return 2 * n + 1; }
    static int right_child(int n) noexcept { return 2 * n + 2; }
    static int parent(int n) noexcept { return (n - 1) / 2; }

    bool is_split(int node) const noexcept { return node < split_count(); }
    /// Leaf ordinal (0-based) of a global node index in the leaf range.
    int leaf_ordinal(int node) const noexcept { return node - split_count(); }
    int leaf_node(int leaf) const noexcept { return split_count() + leaf; }

    /// A topology with the identity correspondence, useful before hierarchy
    /// learning has produced a real phi.
    static TreeTopology with_identity_phi(int depth) {
        TreeTopology t;
        t.depth = depth;
        t.phi.resize(static_cast<std::size_t>((1 << (depth - 1)) - 1));
        for (std::size_t i = 0; i < t.phi.size(); ++i) t.phi[i] = static_cast<int>(i);
        t.validate();
        return t;
    }

    void validate() const {
        if (depth < 2) throw ConfigError("tree depth must be >= 2, got " + std::to_string(depth));
        const int n = split_count();
        if (static_cast<int>(phi.size()) != n)
            throw ConfigError("phi must have one entry per split node (" + std::to_string(n) +
                              "), got " + std::to_string(phi.size()));
        std::vector<bool> seen(static_cast<std::size_t>(n), false);
        for (int m : phi) {
            if (m < 0 || m >= n || seen[static_cast<std::size_t>(m)])
                throw ConfigError("phi must be a permutation of {0.." + std::to_string(n - 1) + "}");
            seen[static_cast<std::size_t>(m)] = true;
        }
    }
};

/// Per-sample routing state: split probabilities s_n and reach probabilities
/// mu for every node of the tree (leaf entries are the tail of `node_mu`).
template <typename Scalar>
struct RoutingResult {
    Vector<Scalar> split_probs; // size N, s_n = sigmoid(f_phi(n))
    Vector<Scalar> node_mu;     // size 2^d - 1, heap order

    Vector<Scalar> leaf_mu(const TreeTopology& topo) const {
        return Vector<Scalar>(node_mu.begin() + topo.split_count(), node_mu.end());
    }
};

/// Left-branch probability of a split given its neuron output.
template <typename Scalar>
Scalar split_probability(Scalar f) {
    using std::exp;
    if (f >= Scalar(0)) return Scalar(1) / (Scalar(1) + exp(-f));
    const Scalar e = exp(f);
    return e / (Scalar(1) + e);
}

/// Reach probabilities from explicit split probabilities. mu(root) = 1 and
/// each split distributes its mass as mu * s to the left child and
/// mu * (1 - s) to the right child, so mass is conserved level by level.
template <typename Scalar>
RoutingResult<Scalar> route_from_probs(const TreeTopology& topo, const Vector<Scalar>& split_probs) {
    const int n_split = topo.split_count();
    if (static_cast<int>(split_probs.size()) != n_split)
        throw InputError("route_from_probs: expected " + std::to_string(n_split) +
                         " split probabilities, got " + std::to_string(split_probs.size()));
    RoutingResult<Scalar> r;
    r.split_probs = split_probs;
    r.node_mu.assign(static_cast<std::size_t>(topo.node_count()), Scalar(0));
    r.node_mu[0] = Scalar(1);
    for (int n = 0; n < n_split; ++n) {
        const Scalar mu = r.node_mu[static_cast<std::size_t>(n)];
        const Scalar s = split_probs[static_cast<std::size_t>(n)];
        r.node_mu[static_cast<std::size_t>(TreeTopology::left_child(n))] += mu * s;
        r.node_mu[static_cast<std::size_t>(TreeTopology::right_child(n))] += mu * (Scalar(1) - s);
    }
    return r;
}

/// Reach probabilities for a sample given its head outputs f. The split at
/// node n applies sigmoid(f[phi[n]]) as the left-branch probability.
template <typename Scalar>
RoutingResult<Scalar> route(const TreeTopology& topo, const Vector<Scalar>& neuron_outputs) {
    const int n_split = topo.split_count();
    if (static_cast<int>(neuron_outputs.size()) != n_split)
        throw InputError("route: expected " + std::to_string(n_split) + " neuron outputs, got " +
                         std::to_string(neuron_outputs.size()));
    Vector<Scalar> probs(static_cast<std::size_t>(n_split));
    for (int n = 0; n < n_split; ++n)
        probs[static_cast<std::size_t>(n)] =
            split_probability(neuron_outputs[static_cast<std::size_t>(topo.phi[static_cast<std::size_t>(n)])]);
    return route_from_probs(topo, probs);
}

template <typename Scalar>
void check_row_stochastic(const Matrix<Scalar>& pi, double tol = 1e-6) {
    for (std::size_t r = 0; r < pi.rows(); ++r) {
        Scalar sum = Scalar(0);
        for (std::size_t c = 0; c < pi.cols(); ++c) {
            if (pi(r, c) < Scalar(0))
                throw InvariantError("leaf distribution row " + std::to_string(r) +
                                     " has a negative entry");
            sum += pi(r, c);
        }
        if (std::abs(static_cast<double>(sum) - 1.0) > tol)
            throw InvariantError("leaf distribution row " + std::to_string(r) +
                                 " sums to " + std::to_string(static_cast<double>(sum)));
    }
}

/// Class posterior of a single tree: P[y] = sum_leaf pi[leaf][y] * mu(leaf).
template <typename Scalar>
Vector<Scalar> tree_predict(const TreeTopology& topo, const RoutingResult<Scalar>& routing,
                            const Matrix<Scalar>& pi) {
    if (static_cast<int>(pi.rows()) != topo.leaf_count())
        throw InputError("tree_predict: pi must have one row per leaf");
    check_row_stochastic(pi);
    Vector<Scalar> p(pi.cols(), Scalar(0));
    const int n_split = topo.split_count();
    for (int leaf = 0; leaf < topo.leaf_count(); ++leaf) {
        const Scalar mu = routing.node_mu[static_cast<std::size_t>(n_split + leaf)];
        const Scalar* row = pi.row(static_cast<std::size_t>(leaf));
        for (std::size_t c = 0; c < pi.cols(); ++c) p[c] += row[c] * mu;
    }
    return p;
}

template <typename Scalar>
Vector<Scalar> tree_predict(const TreeTopology& topo, const Vector<Scalar>& neuron_outputs,
                            const Matrix<Scalar>& pi) {
    return tree_predict(topo, route(topo, neuron_outputs), pi);
}

/// Reverse sweep of the mu recursion. `node_mu_grad` carries the seeded
/// upstream d/d mu values per node and is consumed in place; returns the
/// gradient with respect to the head outputs f (neuron order).
template <typename Scalar>
Vector<Scalar> backward_through_routing(const TreeTopology& topo,
                                        const RoutingResult<Scalar>& routing,
                                        Vector<Scalar>& node_mu_grad) {
    const int n_split = topo.split_count();
    Vector<Scalar> df(static_cast<std::size_t>(n_split), Scalar(0));
    for (int n = n_split - 1; n >= 0; --n) {
        const Scalar s = routing.split_probs[static_cast<std::size_t>(n)];
        const Scalar d_left = node_mu_grad[static_cast<std::size_t>(TreeTopology::left_child(n))];
        const Scalar d_right = node_mu_grad[static_cast<std::size_t>(TreeTopology::right_child(n))];
        node_mu_grad[static_cast<std::size_t>(n)] += d_left * s + d_right * (Scalar(1) - s);
        const Scalar ds = routing.node_mu[static_cast<std::size_t>(n)] * (d_left - d_right);
        df[static_cast<std::size_t>(topo.phi[static_cast<std::size_t>(n)])] +=
            ds * s * (Scalar(1) - s);
    }
    return df;
}

/// Gradient of the upstream-weighted tree posterior with respect to the head
/// outputs f.
template <typename Scalar>
Vector<Scalar> tree_backward(const TreeTopology& topo, const RoutingResult<Scalar>& routing,
                             const Matrix<Scalar>& pi, const Vector<Scalar>& upstream) {
    if (static_cast<int>(pi.rows()) != topo.leaf_count() || pi.cols() != upstream.size())
        throw InputError("tree_backward: inconsistent pi/upstream shapes");
    Vector<Scalar> mu_grad(static_cast<std::size_t>(topo.node_count()), Scalar(0));
    const int n_split = topo.split_count();
    for (int leaf = 0; leaf < topo.leaf_count(); ++leaf) {
        const Scalar* row = pi.row(static_cast<std::size_t>(leaf));
        Scalar acc = Scalar(0);
        for (std::size_t c = 0; c < upstream.size(); ++c) acc += upstream[c] * row[c];
        mu_grad[static_cast<std::size_t>(n_split + leaf)] = acc;
    }
    return backward_through_routing(topo, routing, mu_grad);
}

/// Gradient of the reach probability mu(node) with respect to the head
/// outputs f. Used for saliency maps seeded at an end-decision node.
template <typename Scalar>
Vector<Scalar> tree_backward_node(const TreeTopology& topo, const RoutingResult<Scalar>& routing,
                                  int node) {
    if (node < 0 || node >= topo.node_count())
        throw InputError("tree_backward_node: node index out of range");
    Vector<Scalar> mu_grad(static_cast<std::size_t>(topo.node_count()), Scalar(0));
    mu_grad[static_cast<std::size_t>(node)] = Scalar(1);
    return backward_through_routing(topo, routing, mu_grad);
}

/// One variational-bounding fixed-point step for the leaf distributions:
///
///   pi'[l][y]  ∝  sum over samples i with label y of
///                 pi[l][y] * mu(l | x_i) / P_T[y | x_i]
///
/// with each leaf row renormalized. Rows that receive no mass keep their
/// previous values. The step never increases the batch NLL of this tree
/// while the network (and hence the routing) is frozen.
template <typename Scalar>
Matrix<Scalar> update_leaf_distributions(const TreeTopology& topo, const Matrix<Scalar>& pi,
                                         const Matrix<Scalar>& batch_leaf_mu,
                                         const std::vector<int>& labels) {
    const std::size_t n_leaves = static_cast<std::size_t>(topo.leaf_count());
    const std::size_t n_classes = pi.cols();
    if (pi.rows() != n_leaves) throw InputError("update_leaf_distributions: pi row count");
    if (batch_leaf_mu.rows() != labels.size() || batch_leaf_mu.rows() == 0)
        throw InputError("update_leaf_distributions: batch must be non-empty and match labels");
    if (batch_leaf_mu.cols() != n_leaves)
        throw InputError("update_leaf_distributions: leaf_mu column count");
    check_row_stochastic(pi);

    Matrix<Scalar> accum(n_leaves, n_classes, Scalar(0));
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const int y = labels[i];
        if (y < 0 || static_cast<std::size_t>(y) >= n_classes)
            throw ValidationError("label out of range in leaf update batch");
        const Scalar* mu = batch_leaf_mu.row(i);
        Scalar p_y = Scalar(0);
        for (std::size_t l = 0; l < n_leaves; ++l)
            p_y += pi(l, static_cast<std::size_t>(y)) * mu[l];
        if (!(p_y > Scalar(0)))
            throw DegenerateError("tree assigns zero likelihood to label " + std::to_string(y) +
                                  " of sample " + std::to_string(i));
        for (std::size_t l = 0; l < n_leaves; ++l)
            accum(l, static_cast<std::size_t>(y)) += pi(l, static_cast<std::size_t>(y)) * mu[l] / p_y;
    }

    Matrix<Scalar> next = pi;
    for (std::size_t l = 0; l < n_leaves; ++l) {
        Scalar z = Scalar(0);
        for (std::size_t c = 0; c < n_classes; ++c) z += accum(l, c);
        if (z > Scalar(0))
            for (std::size_t c = 0; c < n_classes; ++c) next(l, c) = accum(l, c) / z;
    }
    return next;
}

} // namespace dsdf
