#pragma once

#include <algorithm>
#include <cmath>
#include <deque>
#include <string>
#include <vector>

#include "dsdf/backbone.hpp"
#include "dsdf/errors.hpp"
#include "dsdf/matrix.hpp"
#include "dsdf/tree.hpp"

namespace dsdf {

/// Empirical split statistics of one head neuron over a sample set:
/// mean sigmoid output per category and over all samples.
template <typename Scalar>
struct RoutingStats {
    Vector<Scalar> per_category; // E_{x|y=c}[sigmoid(f_m(x))]
    Scalar global = Scalar(0);   // E_x[sigmoid(f_m(x))]
};

/// Per-split-node category significance distribution lambda (sums to 1).
template <typename Scalar>
struct SignificanceState {
    Vector<Scalar> lambda;
    int node = 0;
};

struct HierarchyOptions {
    double gamma = 10.0;
    /// Max samples drawn per category when estimating routing statistics.
    int per_category_cap = 256;
    std::uint64_t subsample_seed = 9277;
    /// Ablation switch: score with S == 1 instead of the cosine similarity.
    bool constant_similarity = false;
};

/// Per-node record kept while learning a hierarchy, for the diagnostics dump.
struct NodeDiagnostics {
    int tree = 0;
    int node = 0;
    int neuron = -1;
    std::vector<std::pair<int, double>> top_q; // best (neuron, Q) pairs, descending
    std::vector<double> lambda;
};

template <typename Scalar>
struct HierarchyResult {
    std::vector<TreeTopology> topologies;
    std::vector<NodeDiagnostics> diagnostics;
    /// Per tree, per category (rows) and split neuron (cols): routing bias
    /// beta = E_c[sigmoid f_m] - E[sigmoid f_m], reused for annotations.
    std::vector<Matrix<Scalar>> beta;
};

/// Cosine similarity between the rows of the pretrained C-way head. The
/// result is symmetric with a unit diagonal and invariant to positive row
/// scaling.
template <typename Scalar>
Matrix<Scalar> category_similarity(const Matrix<Scalar>& omega_weight) {
    const std::size_t c = omega_weight.rows();
    Vector<Scalar> norms(c);
    for (std::size_t i = 0; i < c; ++i) {
        Scalar acc = Scalar(0);
        const Scalar* row = omega_weight.row(i);
        for (std::size_t k = 0; k < omega_weight.cols(); ++k) acc += row[k] * row[k];
        norms[i] = std::sqrt(acc);
        if (!(norms[i] > Scalar(0)))
            throw DegenerateError("category_similarity: weight row " + std::to_string(i) +
                                  " has zero norm");
    }
    Matrix<Scalar> s(c, c);
    for (std::size_t i = 0; i < c; ++i) {
        s(i, i) = Scalar(1);
        for (std::size_t j = i + 1; j < c; ++j) {
            Scalar acc = Scalar(0);
            const Scalar* a = omega_weight.row(i);
            const Scalar* b = omega_weight.row(j);
            for (std::size_t k = 0; k < omega_weight.cols(); ++k) acc += a[k] * b[k];
            const Scalar v = acc / (norms[i] * norms[j]);
            s(i, j) = v;
            s(j, i) = v;
        }
    }
    return s;
}

namespace detail {

/// Deterministic per-category subsample: up to `cap` indices per category,
/// chosen by a seeded shuffle of each category's sample list.
inline std::vector<std::size_t> subsample_indices(const Dataset& data, int cap, std::uint64_t seed) {
    const auto missing = data.missing_categories();
    if (!missing.empty()) {
        std::string list;
        for (int c : missing) list += (list.empty() ? "" : ", ") + std::to_string(c);
        throw CoverageError("dataset lacks samples for categories: " + list);
    }
    std::vector<std::vector<std::size_t>> by_cat(static_cast<std::size_t>(data.num_classes));
    for (std::size_t i = 0; i < data.size(); ++i)
        by_cat[static_cast<std::size_t>(data.labels[i])].push_back(i);
    Rng rng(seed);
    std::vector<std::size_t> chosen;
    for (auto& bucket : by_cat) {
        if (cap > 0 && bucket.size() > static_cast<std::size_t>(cap)) {
            rng.shuffle(bucket);
            bucket.resize(static_cast<std::size_t>(cap));
            std::sort(bucket.begin(), bucket.end());
        }
        chosen.insert(chosen.end(), bucket.begin(), bucket.end());
    }
    return chosen;
}

/// Sigmoid means for every neuron of one head in a single dataset pass.
/// Returns per-category means (C x N) and the overall means (length N).
template <typename Scalar>
std::pair<Matrix<Scalar>, Vector<Scalar>> head_sigmoid_means(const ModelParams<Scalar>& params,
                                                             int tree,
                                                             const Dataset& data,
                                                             const std::vector<std::size_t>& indices) {
    const std::size_t n = params.heads[static_cast<std::size_t>(tree)].weight.rows();
    const std::size_t c = static_cast<std::size_t>(data.num_classes);
    Matrix<Scalar> per_cat(c, n, Scalar(0));
    Vector<Scalar> global(n, Scalar(0));
    std::vector<std::size_t> counts(c, 0);
    for (std::size_t idx : indices) {
        const Vector<Scalar> z =
            extractor_forward(params.config, params.theta, sample_as<Scalar>(data, idx));
        const Vector<Scalar> f = params.heads[static_cast<std::size_t>(tree)].apply(z);
        const std::size_t y = static_cast<std::size_t>(data.labels[idx]);
        ++counts[y];
        for (std::size_t m = 0; m < n; ++m) {
            const Scalar s = split_probability(f[m]);
            per_cat(y, m) += s;
            global[m] += s;
        }
    }
    for (std::size_t yc = 0; yc < c; ++yc)
        for (std::size_t m = 0; m < n; ++m) per_cat(yc, m) /= static_cast<Scalar>(counts[yc]);
    for (std::size_t m = 0; m < n; ++m) global[m] /= static_cast<Scalar>(indices.size());
    return {std::move(per_cat), std::move(global)};
}

} // namespace detail

/// Empirical routing statistics of neuron `m` of tree `tree` over the
/// dataset (subsampled per category by `options`).
template <typename Scalar>
RoutingStats<Scalar> routing_stats(const ModelParams<Scalar>& params, int tree, int neuron,
                                   const Dataset& data, const HierarchyOptions& options = {}) {
    data.validate();
    if (tree < 0 || tree >= params.tree_count()) throw InputError("routing_stats: tree index");
    const auto n = params.heads[static_cast<std::size_t>(tree)].weight.rows();
    if (neuron < 0 || static_cast<std::size_t>(neuron) >= n)
        throw InputError("routing_stats: neuron index out of range");
    const auto indices =
        detail::subsample_indices(data, options.per_category_cap, options.subsample_seed);
    auto [per_cat, global] = detail::head_sigmoid_means(params, tree, data, indices);
    RoutingStats<Scalar> stats;
    stats.per_category.resize(per_cat.rows());
    for (std::size_t c = 0; c < per_cat.rows(); ++c)
        stats.per_category[c] = per_cat(c, static_cast<std::size_t>(neuron));
    stats.global = global[static_cast<std::size_t>(neuron)];
    return stats;
}

/// Pair consistency q between two categories for one neuron: agreement of the
/// (ramped) semantic similarity with the product of routing biases. Positive
/// when the two categories are similar and the neuron routes both to the same
/// side of the average.
template <typename Scalar>
Scalar pair_consistency(Scalar similarity, const RoutingStats<Scalar>& stats, int ci, int cj) {
    const Scalar ramp = similarity > Scalar(0) ? similarity : Scalar(0);
    return ramp * (stats.per_category[static_cast<std::size_t>(ci)] - stats.global) *
           (stats.per_category[static_cast<std::size_t>(cj)] - stats.global);
}

/// Significance-weighted criterion Q = sum over ordered pairs i != j of
/// lambda_i * lambda_j * q(i, j). With uniform lambda this is the plain pair
/// sum scaled by 1/C^2, so the argmax over neurons is unchanged.
template <typename Scalar>
Scalar node_criterion(const Vector<Scalar>& lambda, const Matrix<Scalar>& pair_q) {
    const std::size_t c = lambda.size();
    if (pair_q.rows() != c || pair_q.cols() != c)
        throw InputError("node_criterion: q matrix must be C x C");
    Scalar q = Scalar(0);
    for (std::size_t i = 0; i < c; ++i)
        for (std::size_t j = 0; j < c; ++j)
            if (i != j) q += lambda[i] * lambda[j] * pair_q(i, j);
    return q;
}

/// Child significance distributions: the left child scales each category by
/// gamma^beta, the right by gamma^-beta, both renormalized. beta must be the
/// routing bias of the neuron assigned to the parent.
template <typename Scalar>
std::pair<SignificanceState<Scalar>, SignificanceState<Scalar>> child_significance(
    const SignificanceState<Scalar>& parent, const Vector<Scalar>& beta, double gamma) {
    if (gamma <= 0.0) throw ConfigError("child_significance: gamma must be > 0");
    if (beta.size() != parent.lambda.size())
        throw InputError("child_significance: beta/lambda size mismatch");
    SignificanceState<Scalar> left{Vector<Scalar>(parent.lambda.size()),
                                   TreeTopology::left_child(parent.node)};
    SignificanceState<Scalar> right{Vector<Scalar>(parent.lambda.size()),
                                    TreeTopology::right_child(parent.node)};
    Scalar zl = Scalar(0), zr = Scalar(0);
    for (std::size_t c = 0; c < beta.size(); ++c) {
        const Scalar wl = static_cast<Scalar>(std::pow(gamma, static_cast<double>(beta[c])));
        left.lambda[c] = wl * parent.lambda[c];
        right.lambda[c] = parent.lambda[c] / wl; // gamma^-beta
        zl += left.lambda[c];
        zr += right.lambda[c];
    }
    for (std::size_t c = 0; c < beta.size(); ++c) {
        left.lambda[c] /= zl;
        right.lambda[c] /= zr;
    }
    return {std::move(left), std::move(right)};
}

/// Per-tree routing biases beta(c, m) = E_c[sigma f_m] - E[sigma f_m] over a
/// (subsampled) dataset; rows are categories, columns head neurons.
template <typename Scalar>
std::vector<Matrix<Scalar>> routing_biases(const ModelParams<Scalar>& params, const Dataset& data,
                                           const HierarchyOptions& options = {}) {
    data.validate();
    const auto indices =
        detail::subsample_indices(data, options.per_category_cap, options.subsample_seed);
    std::vector<Matrix<Scalar>> result;
    result.reserve(params.heads.size());
    for (int t = 0; t < params.tree_count(); ++t) {
        auto [per_cat, global] = detail::head_sigmoid_means(params, t, data, indices);
        Matrix<Scalar> beta(per_cat.rows(), per_cat.cols());
        for (std::size_t c = 0; c < per_cat.rows(); ++c)
            for (std::size_t m = 0; m < per_cat.cols(); ++m)
                beta(c, m) = per_cat(c, m) - global[m];
        result.push_back(std::move(beta));
    }
    return result;
}

/// Breadth-first hierarchy learning. Starting from a uniform significance at
/// the root, each split node takes the remaining neuron with the highest
/// criterion (ties broken by the lowest neuron index), then propagates
/// significance to its children using the chosen neuron's routing bias.
/// Every tree scores its own randomly initialized head, so the resulting
/// correspondences differ per tree; each phi is a permutation by
/// construction since chosen neurons leave the pool.
template <typename Scalar>
HierarchyResult<Scalar> learn_hierarchy(const ModelParams<Scalar>& params, const Dataset& data,
                                        int depth, const HierarchyOptions& options = {}) {
    data.validate();
    if (depth < 2) throw ConfigError("learn_hierarchy: depth must be >= 2");
    if (options.gamma <= 0.0) throw ConfigError("learn_hierarchy: gamma must be > 0");
    const int n_split = (1 << (depth - 1)) - 1;
    for (const auto& head : params.heads)
        if (static_cast<int>(head.weight.rows()) != n_split)
            throw ConfigError("learn_hierarchy: head has " + std::to_string(head.weight.rows()) +
                              " neurons, depth " + std::to_string(depth) + " needs " +
                              std::to_string(n_split));

    const std::size_t c_count = static_cast<std::size_t>(data.num_classes);
    Matrix<Scalar> sim;
    if (options.constant_similarity) {
        sim = Matrix<Scalar>(c_count, c_count, Scalar(1));
    } else {
        sim = category_similarity(params.omega.weight);
    }
    const auto indices =
        detail::subsample_indices(data, options.per_category_cap, options.subsample_seed);

    HierarchyResult<Scalar> result;
    for (int t = 0; t < params.tree_count(); ++t) {
        auto [per_cat, global] = detail::head_sigmoid_means(params, t, data, indices);
        // beta(c, m) = E_c[sigma f_m] - E[sigma f_m]
        Matrix<Scalar> beta(c_count, static_cast<std::size_t>(n_split));
        for (std::size_t cc = 0; cc < c_count; ++cc)
            for (std::size_t m = 0; m < static_cast<std::size_t>(n_split); ++m)
                beta(cc, m) = per_cat(cc, m) - global[m];

        // q matrices are fixed per neuron; only lambda changes across nodes
        std::vector<Matrix<Scalar>> pair_q;
        pair_q.reserve(static_cast<std::size_t>(n_split));
        for (int m = 0; m < n_split; ++m) {
            Matrix<Scalar> q(c_count, c_count, Scalar(0));
            for (std::size_t i = 0; i < c_count; ++i)
                for (std::size_t j = 0; j < c_count; ++j) {
                    if (i == j) continue;
                    const Scalar ramp = sim(i, j) > Scalar(0) ? sim(i, j) : Scalar(0);
                    q(i, j) = ramp * beta(i, static_cast<std::size_t>(m)) *
                              beta(j, static_cast<std::size_t>(m));
                }
            pair_q.push_back(std::move(q));
        }
        const auto score = [&](int m, const Vector<Scalar>& lambda) {
            return node_criterion(lambda, pair_q[static_cast<std::size_t>(m)]);
        };

        TreeTopology topo;
        topo.depth = depth;
        topo.phi.assign(static_cast<std::size_t>(n_split), -1);
        std::vector<int> pool(static_cast<std::size_t>(n_split));
        std::iota(pool.begin(), pool.end(), 0);

        std::deque<SignificanceState<Scalar>> queue;
        queue.push_back(SignificanceState<Scalar>{
            Vector<Scalar>(c_count, Scalar(1) / static_cast<Scalar>(c_count)), 0});
        while (!queue.empty()) {
            SignificanceState<Scalar> state = std::move(queue.front());
            queue.pop_front();

            std::vector<std::pair<int, double>> scored;
            scored.reserve(pool.size());
            for (int m : pool) scored.emplace_back(m, static_cast<double>(score(m, state.lambda)));
            int best = scored.front().first;
            double best_q = scored.front().second;
            for (const auto& [m, q] : scored)
                if (q > best_q) { // strict: ties keep the lowest neuron index
                    best = m;
                    best_q = q;
                }
            topo.phi[static_cast<std::size_t>(state.node)] = best;
            pool.erase(std::find(pool.begin(), pool.end(), best));

            NodeDiagnostics diag;
            diag.tree = t;
            diag.node = state.node;
            diag.neuron = best;
            std::sort(scored.begin(), scored.end(),
                      [](const auto& a, const auto& b) {
                          return a.second != b.second ? a.second > b.second : a.first < b.first;
                      });
            scored.resize(std::min<std::size_t>(scored.size(), 5));
            diag.top_q = std::move(scored);
            diag.lambda.assign(state.lambda.begin(), state.lambda.end());
            result.diagnostics.push_back(std::move(diag));

            const int left = TreeTopology::left_child(state.node);
            if (left < n_split) {
                Vector<Scalar> b(c_count);
                for (std::size_t cc = 0; cc < c_count; ++cc)
                    b[cc] = beta(cc, static_cast<std::size_t>(best));
                auto [lstate, rstate] = child_significance(state, b, options.gamma);
                queue.push_back(std::move(lstate));
                queue.push_back(std::move(rstate));
            }
        }
        topo.validate();
        result.topologies.push_back(std::move(topo));
        result.beta.push_back(std::move(beta));
    }
    return result;
}

} // namespace dsdf
