#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dsdf/backbone.hpp"
#include "dsdf/errors.hpp"
#include "dsdf/forest.hpp"
#include "dsdf/matrix.hpp"
#include "dsdf/tree.hpp"

namespace dsdf {

/// A deterministic root-to-leaf (or truncated) decision chain.
/// `per_node_prob[i]` is the probability of taking the branch that leads from
/// `nodes[i]` towards the terminal leaf, so on an untruncated path the
/// product of the entries equals the leaf's reach probability.
struct DecisionPath {
    int tree = 0;
    std::vector<int> nodes;
    std::vector<double> per_node_prob;
    int end_node = 0;
    std::optional<int> terminal_leaf;
};

/// Saliency map seeded at an end-decision node.
struct SaliencyMap {
    Matrix<double> values; // H' x W', non-negative
    int source_node = 0;
    int tree = 0;
};

namespace detail {

/// Root-to-leaf chain for the leaf with the highest reach probability under
/// the given split probabilities (ties resolve to the lowest leaf index).
template <typename Scalar>
DecisionPath path_from_split_probs(const TreeTopology& topo, const Vector<Scalar>& split_probs) {
    const RoutingResult<Scalar> routing = route_from_probs(topo, split_probs);
    const int n_split = topo.split_count();
    int best_leaf = 0;
    Scalar best_mu = routing.node_mu[static_cast<std::size_t>(n_split)];
    for (int leaf = 1; leaf < topo.leaf_count(); ++leaf) {
        const Scalar mu = routing.node_mu[static_cast<std::size_t>(n_split + leaf)];
        if (mu > best_mu) {
            best_mu = mu;
            best_leaf = leaf;
        }
    }

    // climb from the leaf to the root, then reverse
    DecisionPath path;
    path.terminal_leaf = best_leaf;
    std::vector<int> chain;
    int node = topo.leaf_node(best_leaf);
    while (node != 0) {
        const int parent = TreeTopology::parent(node);
        chain.push_back(parent);
        node = parent;
    }
    std::reverse(chain.begin(), chain.end());
    path.nodes = chain;
    path.per_node_prob.resize(chain.size());
    for (std::size_t i = 0; i < chain.size(); ++i) {
        const int n = chain[i];
        const int next = i + 1 < chain.size() ? chain[i + 1] : topo.leaf_node(best_leaf);
        const Scalar s = split_probs[static_cast<std::size_t>(n)];
        path.per_node_prob[i] =
            static_cast<double>(next == TreeTopology::left_child(n) ? s : Scalar(1) - s);
    }
    path.end_node = chain.back();
    return path;
}

} // namespace detail

/// Mean split probability per split node over the samples of one category.
template <typename Scalar>
Vector<Scalar> category_split_stats(const ModelParams<Scalar>& params, const TreeTopology& topo,
                                    int tree, const Dataset& data, int category) {
    data.validate();
    if (tree < 0 || tree >= params.tree_count())
        throw InputError("category_split_stats: tree index out of range");
    const int n_split = topo.split_count();
    Vector<Scalar> mean(static_cast<std::size_t>(n_split), Scalar(0));
    std::size_t count = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        if (data.labels[i] != category) continue;
        const Vector<Scalar> z =
            extractor_forward(params.config, params.theta, sample_as<Scalar>(data, i));
        const Vector<Scalar> f = params.heads[static_cast<std::size_t>(tree)].apply(z);
        for (int n = 0; n < n_split; ++n)
            mean[static_cast<std::size_t>(n)] +=
                split_probability(f[static_cast<std::size_t>(topo.phi[static_cast<std::size_t>(n)])]);
        ++count;
    }
    if (count == 0)
        throw CoverageError("category_split_stats: no samples of category " +
                            std::to_string(category));
    for (auto& v : mean) v /= static_cast<Scalar>(count);
    return mean;
}

/// Deterministic decision path of a category from its statistical split
/// probabilities; the terminal leaf maximizes the ancestor product.
template <typename Scalar>
DecisionPath category_path(const Vector<Scalar>& stats, const TreeTopology& topo, int tree = 0) {
    DecisionPath path = detail::path_from_split_probs(topo, stats);
    path.tree = tree;
    return path;
}

/// Truncates a path at its end-decision node: the first node whose routing
/// probability lies within tau of 0.5. Paths with no such node keep their
/// leaf and end at the last split node.
inline DecisionPath end_decision_node(const DecisionPath& path, double tau) {
    if (tau <= 0.0 || tau >= 0.5) throw ConfigError("end_decision_node: tau must lie in (0, 0.5)");
    DecisionPath out = path;
    for (std::size_t i = 0; i < path.nodes.size(); ++i) {
        if (std::abs(path.per_node_prob[i] - 0.5) < tau) {
            out.nodes.assign(path.nodes.begin(), path.nodes.begin() + static_cast<std::ptrdiff_t>(i + 1));
            out.per_node_prob.assign(path.per_node_prob.begin(),
                                     path.per_node_prob.begin() + static_cast<std::ptrdiff_t>(i + 1));
            out.end_node = path.nodes[i];
            out.terminal_leaf.reset();
            return out;
        }
    }
    out.end_node = path.nodes.back();
    return out;
}

/// Decision path of a single sample on the inference-selected tree, truncated
/// at its end-decision node.
template <typename Scalar>
DecisionPath sample_path(const ModelParams<Scalar>& params,
                         const std::vector<TreeTopology>& topologies, const Vector<Scalar>& x,
                         double tau) {
    check_forest(params, topologies);
    const Activation<Scalar> act = forward(params, x);
    const Vector<Scalar> alpha = tree_selection(params.tsm, act.features);
    std::size_t best = 0;
    for (std::size_t t = 1; t < alpha.size(); ++t)
        if (alpha[t] > alpha[best]) best = t;

    const TreeTopology& topo = topologies[best];
    Vector<Scalar> probs(static_cast<std::size_t>(topo.split_count()));
    for (int n = 0; n < topo.split_count(); ++n)
        probs[static_cast<std::size_t>(n)] = split_probability(
            act.neuron_outputs(best, static_cast<std::size_t>(topo.phi[static_cast<std::size_t>(n)])));
    DecisionPath path = detail::path_from_split_probs(topo, probs);
    path.tree = static_cast<int>(best);
    return end_decision_node(path, tau);
}

/// Saliency computation shared by every CAM entry point: channel weights are
/// the spatially averaged gradients, the map is the rectified weighted sum of
/// the activation maps.
template <typename Scalar>
Matrix<double> cam_from_gradients(const std::vector<Matrix<Scalar>>& grad_maps,
                                  const std::vector<Matrix<Scalar>>& act_maps) {
    if (grad_maps.size() != act_maps.size() || grad_maps.empty())
        throw InputError("cam_from_gradients: gradient/activation map count mismatch");
    const std::size_t h = act_maps.front().rows();
    const std::size_t w = act_maps.front().cols();
    Matrix<double> out(h, w, 0.0);
    const double z = static_cast<double>(h * w);
    for (std::size_t k = 0; k < grad_maps.size(); ++k) {
        if (grad_maps[k].rows() != h || grad_maps[k].cols() != w || act_maps[k].rows() != h ||
            act_maps[k].cols() != w)
            throw InputError("cam_from_gradients: map shape mismatch");
        double gk = 0.0;
        for (const Scalar v : grad_maps[k].data()) gk += static_cast<double>(v);
        gk /= z;
        for (std::size_t i = 0; i < h * w; ++i)
            out.data()[i] += gk * static_cast<double>(act_maps[k].data()[i]);
    }
    for (auto& v : out.data()) v = std::max(v, 0.0);
    return out;
}

/// Decision-tree CAM for one sample on one tree: the saliency of the reach
/// probability of the sample path's end-decision node with respect to the
/// final convolutional activation maps.
template <typename Scalar>
SaliencyMap tree_cam(const ModelParams<Scalar>& params, const TreeTopology& topo, int tree,
                     const Vector<Scalar>& x, double tau) {
    if (params.config.arch != Arch::tiny_conv)
        throw ConfigError("tree_cam: saliency maps require a convolutional extractor");
    if (tree < 0 || tree >= params.tree_count()) throw InputError("tree_cam: tree index");

    ExtractorTrace<Scalar> trace;
    Activation<Scalar> act;
    act.features = extractor_forward(params.config, params.theta, x, &trace);
    const Vector<Scalar> f = params.heads[static_cast<std::size_t>(tree)].apply(act.features);
    const RoutingResult<Scalar> routing = route(topo, f);

    Vector<Scalar> probs = routing.split_probs;
    DecisionPath path = detail::path_from_split_probs(topo, probs);
    path = end_decision_node(path, tau);
    const int e = path.end_node;

    // d mu(e) / d A: through the routing, the head and the pooled projection.
    const Vector<Scalar> df = tree_backward_node(topo, routing, e);
    const Vector<Scalar> dz = matvec_transposed(params.heads[static_cast<std::size_t>(tree)].weight, df);
    const Vector<Scalar> dpooled = matvec_transposed(params.theta.feature.weight, dz);

    const int h = params.config.input_shape.height;
    const int w = params.config.input_shape.width;
    const int k = params.theta.conv.back().out_channels;
    const Scalar inv_area = Scalar(1) / static_cast<Scalar>(h * w);
    std::vector<Matrix<Scalar>> grad_maps;
    std::vector<Matrix<Scalar>> act_maps;
    grad_maps.reserve(static_cast<std::size_t>(k));
    act_maps.reserve(static_cast<std::size_t>(k));
    const auto& maps = trace.conv_post.back();
    for (int c = 0; c < k; ++c) {
        grad_maps.emplace_back(static_cast<std::size_t>(h), static_cast<std::size_t>(w),
                               dpooled[static_cast<std::size_t>(c)] * inv_area);
        Matrix<Scalar> m(static_cast<std::size_t>(h), static_cast<std::size_t>(w));
        for (int i = 0; i < h * w; ++i)
            m.data()[static_cast<std::size_t>(i)] = maps[static_cast<std::size_t>(c * h * w + i)];
        act_maps.push_back(std::move(m));
    }

    SaliencyMap result;
    result.values = cam_from_gradients(grad_maps, act_maps);
    result.source_node = e;
    result.tree = tree;
    return result;
}

// ---- hierarchy exports ---------------------------------------------------------

/// Optional per-tree annotations for exports: leaf class labels from the leaf
/// distributions and per-node category routing biases.
template <typename Scalar>
struct HierarchyAnnotations {
    const std::vector<Matrix<Scalar>>* leaf_dists = nullptr; // per tree, L x C
    const std::vector<Matrix<Scalar>>* beta = nullptr;       // per tree, C x N (neuron-indexed)
};

namespace detail {

template <typename Scalar>
int leaf_argmax_class(const Matrix<Scalar>& pi, int leaf) {
    int best = 0;
    for (std::size_t c = 1; c < pi.cols(); ++c)
        if (pi(static_cast<std::size_t>(leaf), c) > pi(static_cast<std::size_t>(leaf),
                                                       static_cast<std::size_t>(best)))
            best = static_cast<int>(c);
    return best;
}

} // namespace detail

template <typename Scalar = double>
std::string export_hierarchy_json(const std::vector<TreeTopology>& topologies,
                                  const HierarchyAnnotations<Scalar>& ann = {}) {
    nlohmann::json doc;
    doc["version"] = 1;
    doc["trees"] = nlohmann::json::array();
    for (std::size_t t = 0; t < topologies.size(); ++t) {
        const TreeTopology& topo = topologies[t];
        topo.validate();
        nlohmann::json jt;
        jt["tree"] = t;
        jt["depth"] = topo.depth;
        jt["phi"] = topo.phi;
        jt["nodes"] = nlohmann::json::array();
        for (int n = 0; n < topo.split_count(); ++n) {
            nlohmann::json jn;
            jn["node"] = n;
            jn["neuron"] = topo.phi[static_cast<std::size_t>(n)];
            if (ann.beta && t < ann.beta->size()) {
                const auto& beta = (*ann.beta)[t];
                std::vector<double> b(beta.rows());
                for (std::size_t c = 0; c < beta.rows(); ++c)
                    b[c] = static_cast<double>(
                        beta(c, static_cast<std::size_t>(topo.phi[static_cast<std::size_t>(n)])));
                jn["beta"] = b;
            }
            jt["nodes"].push_back(std::move(jn));
        }
        jt["leaves"] = nlohmann::json::array();
        for (int leaf = 0; leaf < topo.leaf_count(); ++leaf) {
            nlohmann::json jl;
            jl["leaf"] = leaf;
            jl["node"] = topo.leaf_node(leaf);
            if (ann.leaf_dists && t < ann.leaf_dists->size())
                jl["class"] = detail::leaf_argmax_class((*ann.leaf_dists)[t], leaf);
            jt["leaves"].push_back(std::move(jl));
        }
        doc["trees"].push_back(std::move(jt));
    }
    return doc.dump(2);
}

/// Rebuilds topologies from an export; inverse of export_hierarchy_json.
inline std::vector<TreeTopology> parse_hierarchy_json(const std::string& text) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("hierarchy json: ") + e.what());
    }
    std::vector<TreeTopology> topologies;
    try {
        for (const auto& jt : doc.at("trees")) {
            TreeTopology topo;
            topo.depth = jt.at("depth").get<int>();
            topo.phi = jt.at("phi").get<std::vector<int>>();
            topo.validate();
            topologies.push_back(std::move(topo));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("hierarchy json: ") + e.what());
    }
    return topologies;
}

template <typename Scalar = double>
std::string export_hierarchy_dot(const std::vector<TreeTopology>& topologies,
                                 const HierarchyAnnotations<Scalar>& ann = {}) {
    std::ostringstream out;
    out << "digraph hierarchy {\n";
    out << "  node [fontname=\"Helvetica\"];\n";
    for (std::size_t t = 0; t < topologies.size(); ++t) {
        const TreeTopology& topo = topologies[t];
        topo.validate();
        const std::string prefix = "t" + std::to_string(t) + "_";
        for (int n = 0; n < topo.split_count(); ++n) {
            out << "  " << prefix << "n" << n << " [shape=ellipse, label=\"node " << n
                << "\\nneuron " << topo.phi[static_cast<std::size_t>(n)] << "\"];\n";
        }
        for (int leaf = 0; leaf < topo.leaf_count(); ++leaf) {
            out << "  " << prefix << "l" << leaf << " [shape=box, label=\"leaf " << leaf;
            if (ann.leaf_dists && t < ann.leaf_dists->size())
                out << "\\nclass " << detail::leaf_argmax_class((*ann.leaf_dists)[t], leaf);
            out << "\"];\n";
        }
        for (int n = 0; n < topo.split_count(); ++n) {
            for (const auto& [child, tag] :
                 {std::pair{TreeTopology::left_child(n), "L"}, {TreeTopology::right_child(n), "R"}}) {
                out << "  " << prefix << "n" << n << " -> " << prefix;
                if (topo.is_split(child))
                    out << "n" << child;
                else
                    out << "l" << topo.leaf_ordinal(child);
                out << " [label=\"" << tag << "\"];\n";
            }
        }
    }
    out << "}\n";
    return out.str();
}

enum class HierarchyFormat { dot, json };

inline HierarchyFormat hierarchy_format_from_name(const std::string& s) {
    if (s == "dot") return HierarchyFormat::dot;
    if (s == "json") return HierarchyFormat::json;
    throw UsageError("unknown hierarchy export format '" + s + "' (expected dot or json)");
}

template <typename Scalar = double>
std::string export_hierarchy(const std::vector<TreeTopology>& topologies, HierarchyFormat format,
                             const HierarchyAnnotations<Scalar>& ann = {}) {
    return format == HierarchyFormat::dot ? export_hierarchy_dot(topologies, ann)
                                          : export_hierarchy_json(topologies, ann);
}

// ---- root routing profile ---------------------------------------------------------

struct ProfilePoint {
    int category = 0;
    double probability = 0.0; // E_{x|y=c}[sigma(f_root(x))]
    double smoothed = 0.0;    // moving average over adjacent category indexes
};

/// Per-category statistical routing probability of the root split, with a
/// centered moving average (window clamped at the category range ends).
template <typename Scalar>
std::vector<ProfilePoint> root_routing_profile(const ModelParams<Scalar>& params,
                                               const TreeTopology& topo, int tree,
                                               const Dataset& data, int smoothing_window) {
    data.validate();
    if (smoothing_window < 1) throw ConfigError("root_routing_profile: window must be >= 1");
    if (smoothing_window > data.num_classes)
        throw ConfigError("root_routing_profile: window " + std::to_string(smoothing_window) +
                          " exceeds category count " + std::to_string(data.num_classes));
    {
        const auto missing = data.missing_categories();
        if (!missing.empty())
            throw CoverageError("root_routing_profile: missing category " +
                                std::to_string(missing.front()));
    }
    const int root_neuron = topo.phi[0];
    std::vector<double> mean(static_cast<std::size_t>(data.num_classes), 0.0);
    std::vector<std::size_t> count(static_cast<std::size_t>(data.num_classes), 0);
    for (std::size_t i = 0; i < data.size(); ++i) {
        const Vector<Scalar> z =
            extractor_forward(params.config, params.theta, sample_as<Scalar>(data, i));
        const Vector<Scalar> f = params.heads[static_cast<std::size_t>(tree)].apply(z);
        mean[static_cast<std::size_t>(data.labels[i])] +=
            static_cast<double>(split_probability(f[static_cast<std::size_t>(root_neuron)]));
        ++count[static_cast<std::size_t>(data.labels[i])];
    }
    std::vector<ProfilePoint> points(static_cast<std::size_t>(data.num_classes));
    for (int c = 0; c < data.num_classes; ++c) {
        points[static_cast<std::size_t>(c)].category = c;
        points[static_cast<std::size_t>(c)].probability =
            mean[static_cast<std::size_t>(c)] / static_cast<double>(count[static_cast<std::size_t>(c)]);
    }
    const int half = smoothing_window / 2;
    for (int c = 0; c < data.num_classes; ++c) {
        const int lo = std::max(0, c - half);
        const int hi = std::min(data.num_classes - 1, c + half);
        double acc = 0.0;
        for (int j = lo; j <= hi; ++j) acc += points[static_cast<std::size_t>(j)].probability;
        points[static_cast<std::size_t>(c)].smoothed = acc / static_cast<double>(hi - lo + 1);
    }
    return points;
}

// ---- plain-text artifacts ------------------------------------------------------------

/// 8-bit ASCII PGM (P2), max-normalized; an all-zero map renders as zeros.
inline std::string saliency_to_pgm(const SaliencyMap& map) {
    double mx = 0.0;
    for (double v : map.values.data()) mx = std::max(mx, v);
    std::ostringstream out;
    out << "P2\n" << map.values.cols() << " " << map.values.rows() << "\n255\n";
    for (std::size_t r = 0; r < map.values.rows(); ++r) {
        for (std::size_t c = 0; c < map.values.cols(); ++c) {
            const int v = mx > 0.0 ? static_cast<int>(std::lround(map.values(r, c) / mx * 255.0)) : 0;
            out << v << (c + 1 < map.values.cols() ? " " : "");
        }
        out << "\n";
    }
    return out.str();
}

inline std::string saliency_to_csv(const SaliencyMap& map) {
    std::ostringstream out;
    out.precision(17);
    for (std::size_t r = 0; r < map.values.rows(); ++r) {
        for (std::size_t c = 0; c < map.values.cols(); ++c)
            out << map.values(r, c) << (c + 1 < map.values.cols() ? "," : "");
        out << "\n";
    }
    return out.str();
}

inline std::string profile_to_csv(const std::vector<ProfilePoint>& points) {
    std::ostringstream out;
    out.precision(17);
    out << "category_index,probability,smoothed\n";
    for (const auto& p : points)
        out << p.category << "," << p.probability << "," << p.smoothed << "\n";
    return out.str();
}

} // namespace dsdf
