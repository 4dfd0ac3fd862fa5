#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "dsdf/backbone.hpp"
#include "dsdf/errors.hpp"
#include "dsdf/matrix.hpp"
#include "dsdf/tree.hpp"

namespace dsdf {

struct ForestConfig {
    int tree_count = 3;   // T
    int depth = 4;        // d
    double gamma = 10.0;  // hierarchy control parameter
    double tau = 0.1;     // end-decision threshold, in (0, 0.5)
    OptimizerSettings optimizer;
    /// Variational-bounding iterations per epoch.
    int pi_iterations = 1;
    /// Cap on routing-buffer samples per pi update phase (0 = all).
    int pi_buffer_cap = 0;

    void validate() const {
        if (tree_count < 1) throw ConfigError("tree_count must be >= 1");
        if (depth < 2) throw ConfigError("depth must be >= 2");
        if (gamma <= 0.0) throw ConfigError("gamma must be > 0");
        if (tau <= 0.0 || tau >= 0.5) throw ConfigError("tau must lie in (0, 0.5)");
        if (pi_iterations < 1) throw ConfigError("pi_iterations must be >= 1");
    }
};

/// Negative log-likelihood with the probability floored at 1e-12.
template <typename Scalar>
double nll_loss(const Vector<Scalar>& p, int label) {
    if (label < 0 || static_cast<std::size_t>(label) >= p.size())
        throw InputError("nll_loss: label out of range");
    const double v = std::max(static_cast<double>(p[static_cast<std::size_t>(label)]), kProbFloor);
    return -std::log(v);
}

// ---- tree selection module ---------------------------------------------------

/// Cached TSM forward state for the backward pass.
template <typename Scalar>
struct TsmTrace {
    Vector<Scalar> input;        // z
    Vector<Scalar> h1_pre, h1;   // first hidden layer
    Vector<Scalar> h2_pre, h2;   // second hidden layer
    Vector<Scalar> logits;       // third layer output
    Vector<Scalar> sigmoids;     // only for the sigmoid_normalize variant
    Vector<Scalar> alpha;
};

/// Tree selection probabilities alpha for a feature vector. Two FC+ReLU
/// layers shrink F to ceil(F/4); the third layer feeds either a softmax
/// (default) or a sigmoid-then-normalize stage. Either way the output sums
/// to 1.
template <typename Scalar>
Vector<Scalar> tree_selection(const TsmParams<Scalar>& tsm, const Vector<Scalar>& features,
                              TsmTrace<Scalar>* trace = nullptr) {
    TsmTrace<Scalar> local;
    TsmTrace<Scalar>* tr = trace ? trace : &local;
    tr->input = features;
    tr->h1_pre = tsm.l1.apply(features);
    tr->h1 = relu_vec(tr->h1_pre);
    tr->h2_pre = tsm.l2.apply(tr->h1);
    tr->h2 = relu_vec(tr->h2_pre);
    tr->logits = tsm.l3.apply(tr->h2);

    const std::size_t t = tr->logits.size();
    tr->alpha.resize(t);
    if (tsm.sigmoid_normalize) {
        tr->sigmoids.resize(t);
        Scalar sum = Scalar(0);
        for (std::size_t i = 0; i < t; ++i) {
            tr->sigmoids[i] = split_probability(tr->logits[i]);
            sum += tr->sigmoids[i];
        }
        for (std::size_t i = 0; i < t; ++i) tr->alpha[i] = tr->sigmoids[i] / sum;
    } else {
        Scalar mx = tr->logits[0];
        for (Scalar v : tr->logits) mx = std::max(mx, v);
        Scalar sum = Scalar(0);
        for (std::size_t i = 0; i < t; ++i) {
            tr->alpha[i] = std::exp(tr->logits[i] - mx);
            sum += tr->alpha[i];
        }
        for (std::size_t i = 0; i < t; ++i) tr->alpha[i] /= sum;
    }
    return tr->alpha;
}

/// Backward through the TSM; accumulates parameter gradients and returns the
/// gradient with respect to the input features.
template <typename Scalar>
Vector<Scalar> tree_selection_backward(const TsmParams<Scalar>& tsm, const TsmTrace<Scalar>& trace,
                                       const Vector<Scalar>& dalpha, TsmParams<Scalar>& grad) {
    const std::size_t t = trace.alpha.size();
    Vector<Scalar> dlogits(t);
    Scalar weighted = Scalar(0);
    for (std::size_t i = 0; i < t; ++i) weighted += dalpha[i] * trace.alpha[i];
    if (tsm.sigmoid_normalize) {
        Scalar sum = Scalar(0);
        for (Scalar v : trace.sigmoids) sum += v;
        for (std::size_t i = 0; i < t; ++i) {
            const Scalar dsig = (dalpha[i] - weighted) / sum;
            dlogits[i] = dsig * trace.sigmoids[i] * (Scalar(1) - trace.sigmoids[i]);
        }
    } else {
        for (std::size_t i = 0; i < t; ++i)
            dlogits[i] = trace.alpha[i] * (dalpha[i] - weighted);
    }

    add_outer(grad.l3.weight, dlogits, trace.h2);
    if (!grad.l3.bias.empty()) axpy(Scalar(1), dlogits, grad.l3.bias);
    Vector<Scalar> dh2 = matvec_transposed(tsm.l3.weight, dlogits);
    for (std::size_t i = 0; i < dh2.size(); ++i)
        if (trace.h2_pre[i] <= Scalar(0)) dh2[i] = Scalar(0);

    add_outer(grad.l2.weight, dh2, trace.h1);
    if (!grad.l2.bias.empty()) axpy(Scalar(1), dh2, grad.l2.bias);
    Vector<Scalar> dh1 = matvec_transposed(tsm.l2.weight, dh2);
    for (std::size_t i = 0; i < dh1.size(); ++i)
        if (trace.h1_pre[i] <= Scalar(0)) dh1[i] = Scalar(0);

    add_outer(grad.l1.weight, dh1, trace.input);
    if (!grad.l1.bias.empty()) axpy(Scalar(1), dh1, grad.l1.bias);
    return matvec_transposed(tsm.l1.weight, dh1);
}

// ---- forest prediction ---------------------------------------------------------

template <typename Scalar>
void check_forest(const ModelParams<Scalar>& params, const std::vector<TreeTopology>& topologies) {
    if (topologies.size() != params.heads.size() || topologies.size() != params.leaf_dists.size())
        throw InputError("forest: params and topologies disagree on tree count");
    for (const auto& topo : topologies) topo.validate();
}

/// Training-time forest output: the alpha-weighted average of tree posteriors.
template <typename Scalar>
Vector<Scalar> forest_predict_train(const ModelParams<Scalar>& params,
                                    const std::vector<TreeTopology>& topologies,
                                    const Vector<Scalar>& x) {
    check_forest(params, topologies);
    const Activation<Scalar> act = forward(params, x);
    const Vector<Scalar> alpha = tree_selection(params.tsm, act.features);
    Vector<Scalar> p(static_cast<std::size_t>(params.config.num_classes), Scalar(0));
    for (std::size_t t = 0; t < topologies.size(); ++t) {
        Vector<Scalar> f(act.neuron_outputs.row(t),
                         act.neuron_outputs.row(t) + act.neuron_outputs.cols());
        const Vector<Scalar> pt = tree_predict(topologies[t], f, params.leaf_dists[t]);
        axpy(alpha[t], pt, p);
    }
    return p;
}

/// Inference-time output: the single tree with the highest selection
/// probability (ties resolved to the lowest index). The returned vector is
/// exactly that tree's posterior, with no re-normalization.
template <typename Scalar>
std::pair<Vector<Scalar>, int> forest_predict_infer(const ModelParams<Scalar>& params,
                                                    const std::vector<TreeTopology>& topologies,
                                                    const Vector<Scalar>& x) {
    check_forest(params, topologies);
    const Activation<Scalar> act = forward(params, x);
    const Vector<Scalar> alpha = tree_selection(params.tsm, act.features);
    std::size_t best = 0;
    for (std::size_t t = 1; t < alpha.size(); ++t)
        if (alpha[t] > alpha[best]) best = t;
    Vector<Scalar> f(act.neuron_outputs.row(best),
                     act.neuron_outputs.row(best) + act.neuron_outputs.cols());
    return {tree_predict(topologies[best], f, params.leaf_dists[best]), static_cast<int>(best)};
}

// ---- gradients -------------------------------------------------------------------

enum class LossKind {
    /// Cross-entropy on the original C-way head (only theta and omega receive
    /// gradients).
    pretrain_cross_entropy,
    /// Negative log-likelihood of the alpha-weighted forest posterior (theta,
    /// heads and TSM receive gradients; leaf distributions are handled by
    /// variational bounding).
    forest_nll,
};

/// Forest-loss reverse pass for one sample; accumulates into `grads` and
/// returns the sample loss.
template <typename Scalar>
double forest_sample_backward(const ModelParams<Scalar>& params,
                              const std::vector<TreeTopology>& topologies, const Vector<Scalar>& x,
                              int label, ModelGradients<Scalar>& grads) {
    ExtractorTrace<Scalar> trace;
    const Vector<Scalar> z = extractor_forward(params.config, params.theta, x, &trace);

    TsmTrace<Scalar> tsm_trace;
    const Vector<Scalar> alpha = tree_selection(params.tsm, z, &tsm_trace);

    const std::size_t t_count = topologies.size();
    std::vector<Vector<Scalar>> head_out(t_count);
    std::vector<RoutingResult<Scalar>> routings(t_count);
    std::vector<Vector<Scalar>> tree_p(t_count);
    Vector<Scalar> p(static_cast<std::size_t>(params.config.num_classes), Scalar(0));
    for (std::size_t t = 0; t < t_count; ++t) {
        head_out[t] = params.heads[t].apply(z);
        routings[t] = route(topologies[t], head_out[t]);
        tree_p[t] = tree_predict(topologies[t], routings[t], params.leaf_dists[t]);
        axpy(alpha[t], tree_p[t], p);
    }
    const double loss = nll_loss(p, label);

    const std::size_t y = static_cast<std::size_t>(label);
    // d loss / d p[y]; zero when the clamp is active (loss locally constant).
    const Scalar dpy = static_cast<double>(p[y]) > kProbFloor
                           ? Scalar(-1) / p[y]
                           : Scalar(0);

    Vector<Scalar> dz(z.size(), Scalar(0));
    Vector<Scalar> dalpha(t_count, Scalar(0));
    Vector<Scalar> upstream(p.size(), Scalar(0));
    for (std::size_t t = 0; t < t_count; ++t) {
        dalpha[t] = dpy * tree_p[t][y];
        upstream[y] = dpy * alpha[t];
        const Vector<Scalar> df =
            tree_backward(topologies[t], routings[t], params.leaf_dists[t], upstream);
        upstream[y] = Scalar(0);
        add_outer(grads.heads[t].weight, df, z);
        if (!grads.heads[t].bias.empty()) axpy(Scalar(1), df, grads.heads[t].bias);
        const Vector<Scalar> dz_head = matvec_transposed(params.heads[t].weight, df);
        axpy(Scalar(1), dz_head, dz);
    }
    const Vector<Scalar> dz_tsm = tree_selection_backward(params.tsm, tsm_trace, dalpha, grads.tsm);
    axpy(Scalar(1), dz_tsm, dz);
    extractor_backward(params.config, params.theta, trace, dz, grads.theta);
    return loss;
}

/// Mean-loss gradients over a batch of dataset indices. Pass an empty
/// `batch` meaning "all samples" is not supported on purpose: callers decide
/// the batch.
template <typename Scalar>
ModelGradients<Scalar> gradients(const ModelParams<Scalar>& params,
                                 const std::vector<TreeTopology>& topologies, const Dataset& data,
                                 const std::vector<std::size_t>& batch, LossKind loss_kind,
                                 double* mean_loss = nullptr) {
    if (batch.empty()) throw InputError("gradients: batch must be non-empty");
    ModelGradients<Scalar> grads = zero_gradients(params);
    double loss = 0.0;
    for (std::size_t idx : batch) {
        const auto x = sample_as<Scalar>(data, idx);
        if (loss_kind == LossKind::forest_nll) {
            check_forest(params, topologies);
            loss += forest_sample_backward(params, topologies, x, data.labels[idx], grads);
        } else {
            loss += pretrain_sample_backward(params, x, data.labels[idx], grads);
        }
    }
    const Scalar inv = Scalar(1) / static_cast<Scalar>(batch.size());
    detail::for_each_gradient_tensor(grads, [&](const std::string&, Vector<Scalar>& g) {
        for (auto& v : g) v *= inv;
    });
    loss /= static_cast<double>(batch.size());
    if (!std::isfinite(loss)) throw NumericError("gradients: loss is not finite");
    if (mean_loss) *mean_loss = loss;
    return grads;
}

// ---- alternated training -----------------------------------------------------------

template <typename Scalar>
using EpochCallback = std::function<void(int epoch, const ModelParams<Scalar>&)>;

namespace detail {

/// Leaf-reach probabilities of every tree over (up to) the whole dataset,
/// used as the routing buffer for the variational-bounding phase.
template <typename Scalar>
std::vector<Matrix<Scalar>> routing_buffer(const ModelParams<Scalar>& params,
                                           const std::vector<TreeTopology>& topologies,
                                           const Dataset& data,
                                           const std::vector<std::size_t>& indices) {
    std::vector<Matrix<Scalar>> buffers;
    buffers.reserve(topologies.size());
    for (const auto& topo : topologies)
        buffers.emplace_back(indices.size(), static_cast<std::size_t>(topo.leaf_count()));
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const Activation<Scalar> act = forward(params, sample_as<Scalar>(data, indices[i]));
        for (std::size_t t = 0; t < topologies.size(); ++t) {
            Vector<Scalar> f(act.neuron_outputs.row(t),
                             act.neuron_outputs.row(t) + act.neuron_outputs.cols());
            const RoutingResult<Scalar> r = route(topologies[t], f);
            const int n_split = topologies[t].split_count();
            for (int leaf = 0; leaf < topologies[t].leaf_count(); ++leaf)
                buffers[t](i, static_cast<std::size_t>(leaf)) =
                    r.node_mu[static_cast<std::size_t>(n_split + leaf)];
        }
    }
    return buffers;
}

} // namespace detail

/// Mean NLL and accuracy of the training-time forest posterior over a dataset.
template <typename Scalar>
std::pair<double, double> evaluate_train_mode(const ModelParams<Scalar>& params,
                                              const std::vector<TreeTopology>& topologies,
                                              const Dataset& data) {
    double nll = 0.0;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const Vector<Scalar> p = forest_predict_train(params, topologies, sample_as<Scalar>(data, i));
        nll += nll_loss(p, data.labels[i]);
        std::size_t best = 0;
        for (std::size_t c = 1; c < p.size(); ++c)
            if (p[c] > p[best]) best = c;
        if (static_cast<int>(best) == data.labels[i]) ++correct;
    }
    return {nll / static_cast<double>(data.size()),
            static_cast<double>(correct) / static_cast<double>(data.size())};
}

/// Alternated optimization: per epoch, (a) SGD with momentum and weight decay
/// on theta, heads and TSM with the leaf distributions frozen, then (b)
/// variational-bounding updates of every tree's leaf distribution with the
/// network frozen. The learning rate decays by `decay_factor` every
/// `decay_every` epochs; when `decay_every` is 0 it defaults to
/// 0.375 * epochs.
template <typename Scalar>
std::vector<EpochMetric<Scalar>> train(ModelParams<Scalar>& params,
                                       const std::vector<TreeTopology>& topologies,
                                       const Dataset& data, const ForestConfig& config,
                                       const EpochCallback<Scalar>& on_epoch = nullptr) {
    config.validate();
    data.validate();
    check_forest(params, topologies);
    if (data.size() == 0) throw ValidationError("train: dataset is empty");
    {
        const auto missing = data.missing_categories();
        if (!missing.empty())
            throw CoverageError("train: dataset lacks samples for category " +
                                std::to_string(missing.front()));
    }

    const OptimizerSettings& opt = config.optimizer;
    int decay_every = opt.decay_every;
    if (decay_every == 0)
        decay_every = std::max(1, static_cast<int>(0.375 * opt.epochs));

    detail::SgdState<Scalar> state;
    Rng shuffle_rng(opt.shuffle_seed);
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    const auto include = [](const std::string& name) {
        return name.rfind("theta", 0) == 0 || name.rfind("head", 0) == 0 ||
               name.rfind("tsm", 0) == 0;
    };

    std::vector<EpochMetric<Scalar>> log;
    double lr = opt.learning_rate;
    for (int epoch = 0; epoch < opt.epochs; ++epoch) {
        if (epoch > 0 && epoch % decay_every == 0) lr *= opt.decay_factor;

        // (a) SGD phase, leaf distributions frozen
        shuffle_rng.shuffle(order);
        for (std::size_t start = 0; start < order.size();
             start += static_cast<std::size_t>(opt.batch_size)) {
            const std::size_t stop =
                std::min(order.size(), start + static_cast<std::size_t>(opt.batch_size));
            const std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(start),
                                                 order.begin() + static_cast<std::ptrdiff_t>(stop));
            double batch_loss = 0.0;
            ModelGradients<Scalar> grads =
                gradients(params, topologies, data, batch, LossKind::forest_nll, &batch_loss);
            if (!std::isfinite(batch_loss))
                throw NumericError("train diverged at epoch " + std::to_string(epoch));
            detail::sgd_step(params, grads, state, lr, opt.momentum, opt.weight_decay, include);
        }
        {
            const auto [nll, acc] = evaluate_train_mode(params, topologies, data);
            if (!std::isfinite(nll))
                throw NumericError("train diverged at epoch " + std::to_string(epoch));
            log.push_back({epoch, "sgd", nll, acc, lr});
        }

        // (b) variational bounding on the leaf distributions, network frozen.
        // A capped buffer takes a prefix of the epoch's shuffled order so it
        // stays representative of every category.
        std::vector<std::size_t> buffer_indices = order;
        if (config.pi_buffer_cap > 0 &&
            buffer_indices.size() > static_cast<std::size_t>(config.pi_buffer_cap))
            buffer_indices.resize(static_cast<std::size_t>(config.pi_buffer_cap));
        std::vector<int> buffer_labels;
        buffer_labels.reserve(buffer_indices.size());
        for (std::size_t idx : buffer_indices) buffer_labels.push_back(data.labels[idx]);
        const auto buffers = detail::routing_buffer(params, topologies, data, buffer_indices);
        for (int it = 0; it < config.pi_iterations; ++it)
            for (std::size_t t = 0; t < topologies.size(); ++t)
                params.leaf_dists[t] = update_leaf_distributions(topologies[t], params.leaf_dists[t],
                                                                 buffers[t], buffer_labels);
        {
            const auto [nll, acc] = evaluate_train_mode(params, topologies, data);
            log.push_back({epoch, "pi", nll, acc, lr});
        }

        if (on_epoch) on_epoch(epoch, params);
    }
    return log;
}

} // namespace dsdf
