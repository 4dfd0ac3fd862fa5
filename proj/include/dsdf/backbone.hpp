#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "dsdf/dataset.hpp"
#include "dsdf/errors.hpp"
#include "dsdf/matrix.hpp"

namespace dsdf {

enum class Arch { mlp, tiny_conv };

inline std::string arch_name(Arch a) { return a == Arch::mlp ? "mlp" : "tiny_conv"; }

inline Arch arch_from_name(const std::string& s) {
    if (s == "mlp") return Arch::mlp;
    if (s == "tiny_conv") return Arch::tiny_conv;
    throw ConfigError("unknown arch '" + s + "'");
}

struct BackboneConfig {
    InputShape input_shape;
    Arch arch = Arch::mlp;
    std::vector<int> hidden_dims{16};
    int feature_dim = 8;  // F
    int num_classes = 2;  // C
    bool head_bias = true;
    std::uint64_t seed = 1;

    void validate() const {
        if (feature_dim < 1) throw ConfigError("feature_dim must be >= 1");
        if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
        if (hidden_dims.empty()) throw ConfigError("hidden_dims must be non-empty");
        for (int h : hidden_dims)
            if (h < 1) throw ConfigError("hidden_dims entries must be positive");
        if (input_shape.flat_dim() < 1) throw ConfigError("input shape has zero dimension");
        if (arch == Arch::tiny_conv && !input_shape.spatial)
            throw ConfigError("tiny_conv requires a spatial (channels,height,width) input");
    }
};

template <typename Scalar>
struct AffineLayer {
    Matrix<Scalar> weight; // out x in
    Vector<Scalar> bias;   // out (empty when the layer has no bias)

    Vector<Scalar> apply(const Vector<Scalar>& x) const {
        Vector<Scalar> y = matvec(weight, x);
        if (!bias.empty()) axpy(Scalar(1), bias, y);
        return y;
    }
};

/// 3x3 stride-1 zero-padded convolution. Weight rows are per output channel,
/// laid out as (in_channel, ky, kx).
template <typename Scalar>
struct ConvLayer {
    int in_channels = 0;
    int out_channels = 0;
    Matrix<Scalar> weight; // out_channels x (in_channels * 9)
    Vector<Scalar> bias;   // out_channels
};

/// Extractor weights Theta. For the MLP the feature map is
///   x -> tanh(affine) ... -> affine -> z;
/// for tiny_conv it is a stack of 3x3 conv + tanh layers whose final maps are
/// globally average-pooled and passed through one affine layer to z.
template <typename Scalar>
struct ExtractorParams {
    std::vector<AffineLayer<Scalar>> dense; // mlp hidden layers
    std::vector<ConvLayer<Scalar>> conv;    // tiny_conv stages
    AffineLayer<Scalar> feature;            // final projection to F
};

template <typename Scalar>
struct TsmParams {
    AffineLayer<Scalar> l1, l2, l3; // F -> ceil(F/4) -> ceil(F/4) -> T
    bool sigmoid_normalize = false; // sigmoid third layer + divide-by-sum instead of softmax
};

/// All trainable state of the transferred model.
template <typename Scalar>
struct ModelParams {
    BackboneConfig config;
    ExtractorParams<Scalar> theta;
    AffineLayer<Scalar> omega;               // original C-way head
    std::vector<AffineLayer<Scalar>> heads;  // per-tree N-neuron heads w^(t)
    TsmParams<Scalar> tsm;
    std::vector<Matrix<Scalar>> leaf_dists;  // per-tree L x C row-stochastic pi

    int tree_count() const noexcept { return static_cast<int>(heads.size()); }
};

/// Per-sample forward results exposed to callers.
template <typename Scalar>
struct Activation {
    Vector<Scalar> features;               // z
    std::vector<Matrix<Scalar>> conv_maps; // A^k, empty for mlp
    Matrix<Scalar> neuron_outputs;         // T x N, row t = f values of head t
};

// ---- elementwise helpers ---------------------------------------------------

template <typename Scalar>
Vector<Scalar> tanh_vec(const Vector<Scalar>& x) {
    Vector<Scalar> y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = std::tanh(x[i]);
    return y;
}

template <typename Scalar>
Vector<Scalar> relu_vec(const Vector<Scalar>& x) {
    Vector<Scalar> y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > Scalar(0) ? x[i] : Scalar(0);
    return y;
}

// ---- extractor forward / backward -----------------------------------------

/// Cached intermediate state of one extractor evaluation, consumed by the
/// reverse pass.
template <typename Scalar>
struct ExtractorTrace {
    // mlp: layer_inputs[i] is the input of dense layer i; post[i] its
    // post-tanh output. The feature layer consumes post.back() (or the raw
    // input when there are no hidden layers).
    std::vector<Vector<Scalar>> layer_inputs;
    std::vector<Vector<Scalar>> post;
    // tiny_conv: per-stage post-tanh maps, channel-major (c * H * W).
    std::vector<Vector<Scalar>> conv_post;
    Vector<Scalar> pooled; // GAP over the final maps
    Vector<Scalar> input;  // flat copy of the sample
    Vector<Scalar> features;
};

namespace detail {

template <typename Scalar>
void conv3x3_forward(const ConvLayer<Scalar>& layer, const Vector<Scalar>& in, int h, int w,
                     Vector<Scalar>& out) {
    out.assign(static_cast<std::size_t>(layer.out_channels) * h * w, Scalar(0));
    for (int oc = 0; oc < layer.out_channels; ++oc) {
        const Scalar* wrow = layer.weight.row(static_cast<std::size_t>(oc));
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                Scalar acc = layer.bias[static_cast<std::size_t>(oc)];
                for (int ic = 0; ic < layer.in_channels; ++ic) {
                    for (int ky = -1; ky <= 1; ++ky) {
                        const int sy = y + ky;
                        if (sy < 0 || sy >= h) continue;
                        for (int kx = -1; kx <= 1; ++kx) {
                            const int sx = x + kx;
                            if (sx < 0 || sx >= w) continue;
                            acc += wrow[(ic * 3 + (ky + 1)) * 3 + (kx + 1)] *
                                   in[static_cast<std::size_t>((ic * h + sy) * w + sx)];
                        }
                    }
                }
                out[static_cast<std::size_t>((oc * h + y) * w + x)] = acc;
            }
        }
    }
}

/// Accumulates weight/bias gradients and returns the input gradient.
template <typename Scalar>
Vector<Scalar> conv3x3_backward(const ConvLayer<Scalar>& layer, const Vector<Scalar>& in, int h,
                                int w, const Vector<Scalar>& dout, ConvLayer<Scalar>& grad) {
    Vector<Scalar> din(in.size(), Scalar(0));
    for (int oc = 0; oc < layer.out_channels; ++oc) {
        const Scalar* wrow = layer.weight.row(static_cast<std::size_t>(oc));
        Scalar* gw = grad.weight.row(static_cast<std::size_t>(oc));
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                const Scalar g = dout[static_cast<std::size_t>((oc * h + y) * w + x)];
                if (g == Scalar(0)) continue;
                grad.bias[static_cast<std::size_t>(oc)] += g;
                for (int ic = 0; ic < layer.in_channels; ++ic) {
                    for (int ky = -1; ky <= 1; ++ky) {
                        const int sy = y + ky;
                        if (sy < 0 || sy >= h) continue;
                        for (int kx = -1; kx <= 1; ++kx) {
                            const int sx = x + kx;
                            if (sx < 0 || sx >= w) continue;
                            const std::size_t widx = (ic * 3 + (ky + 1)) * 3u + (kx + 1);
                            const std::size_t iidx = static_cast<std::size_t>((ic * h + sy) * w + sx);
                            gw[widx] += g * in[iidx];
                            din[iidx] += g * wrow[widx];
                        }
                    }
                }
            }
        }
    }
    return din;
}

} // namespace detail

/// Runs the extractor, filling `trace` for a later backward pass.
template <typename Scalar>
Vector<Scalar> extractor_forward(const BackboneConfig& config, const ExtractorParams<Scalar>& theta,
                                 const Vector<Scalar>& x, ExtractorTrace<Scalar>* trace = nullptr) {
    if (static_cast<int>(x.size()) != config.input_shape.flat_dim())
        throw InputError("forward: input has " + std::to_string(x.size()) + " values, expected " +
                         std::to_string(config.input_shape.flat_dim()));
    if (trace) {
        *trace = ExtractorTrace<Scalar>{};
        trace->input = x;
    }
    if (config.arch == Arch::mlp) {
        Vector<Scalar> cur = x;
        for (const auto& layer : theta.dense) {
            if (trace) trace->layer_inputs.push_back(cur);
            cur = tanh_vec(layer.apply(cur));
            if (trace) trace->post.push_back(cur);
        }
        Vector<Scalar> z = theta.feature.apply(cur);
        if (trace) trace->features = z;
        return z;
    }
    // tiny_conv
    const int h = config.input_shape.height;
    const int w = config.input_shape.width;
    Vector<Scalar> cur = x;
    Vector<Scalar> pre;
    for (const auto& layer : theta.conv) {
        detail::conv3x3_forward(layer, cur, h, w, pre);
        cur.resize(pre.size());
        for (std::size_t i = 0; i < pre.size(); ++i) cur[i] = std::tanh(pre[i]);
        if (trace) trace->conv_post.push_back(cur);
    }
    const int k = theta.conv.back().out_channels;
    Vector<Scalar> pooled(static_cast<std::size_t>(k), Scalar(0));
    const Scalar inv_area = Scalar(1) / static_cast<Scalar>(h * w);
    for (int c = 0; c < k; ++c) {
        Scalar acc = Scalar(0);
        for (int i = 0; i < h * w; ++i) acc += cur[static_cast<std::size_t>(c * h * w + i)];
        pooled[static_cast<std::size_t>(c)] = acc * inv_area;
    }
    if (trace) trace->pooled = pooled;
    Vector<Scalar> z = theta.feature.apply(pooled);
    if (trace) trace->features = z;
    return z;
}

/// Backward through the extractor; accumulates into `grad` and returns
/// nothing (input gradients are not needed by any caller).
template <typename Scalar>
void extractor_backward(const BackboneConfig& config, const ExtractorParams<Scalar>& theta,
                        const ExtractorTrace<Scalar>& trace, const Vector<Scalar>& dz,
                        ExtractorParams<Scalar>& grad) {
    // feature layer
    const Vector<Scalar>& feat_in = config.arch == Arch::mlp
                                        ? (trace.post.empty() ? trace.input : trace.post.back())
                                        : trace.pooled;
    add_outer(grad.feature.weight, dz, feat_in);
    if (!grad.feature.bias.empty()) axpy(Scalar(1), dz, grad.feature.bias);
    Vector<Scalar> dcur = matvec_transposed(theta.feature.weight, dz);

    if (config.arch == Arch::mlp) {
        for (int i = static_cast<int>(theta.dense.size()) - 1; i >= 0; --i) {
            const auto& post = trace.post[static_cast<std::size_t>(i)];
            for (std::size_t j = 0; j < dcur.size(); ++j)
                dcur[j] *= (Scalar(1) - post[j] * post[j]); // tanh'
            const auto& in = trace.layer_inputs[static_cast<std::size_t>(i)];
            auto& glayer = grad.dense[static_cast<std::size_t>(i)];
            add_outer(glayer.weight, dcur, in);
            if (!glayer.bias.empty()) axpy(Scalar(1), dcur, glayer.bias);
            dcur = matvec_transposed(theta.dense[static_cast<std::size_t>(i)].weight, dcur);
        }
        return;
    }

    const int h = config.input_shape.height;
    const int w = config.input_shape.width;
    const int k = theta.conv.back().out_channels;
    // undo GAP: each location of the last maps receives dpooled / (h*w)
    Vector<Scalar> dmaps(static_cast<std::size_t>(k) * h * w);
    const Scalar inv_area = Scalar(1) / static_cast<Scalar>(h * w);
    for (int c = 0; c < k; ++c)
        for (int i = 0; i < h * w; ++i)
            dmaps[static_cast<std::size_t>(c * h * w + i)] = dcur[static_cast<std::size_t>(c)] * inv_area;

    for (int i = static_cast<int>(theta.conv.size()) - 1; i >= 0; --i) {
        const auto& post = trace.conv_post[static_cast<std::size_t>(i)];
        for (std::size_t j = 0; j < dmaps.size(); ++j)
            dmaps[j] *= (Scalar(1) - post[j] * post[j]);
        const Vector<Scalar>& in = i == 0 ? trace.input : trace.conv_post[static_cast<std::size_t>(i - 1)];
        dmaps = detail::conv3x3_backward(theta.conv[static_cast<std::size_t>(i)], in, h, w, dmaps,
                                         grad.conv[static_cast<std::size_t>(i)]);
    }
}

// ---- model construction -----------------------------------------------------

namespace detail {

template <typename Scalar>
AffineLayer<Scalar> init_affine(int out, int in, double scale, bool bias, Rng& rng) {
    AffineLayer<Scalar> layer;
    layer.weight = Matrix<Scalar>(static_cast<std::size_t>(out), static_cast<std::size_t>(in));
    for (auto& v : layer.weight.data()) v = static_cast<Scalar>(rng.normal(0.0, scale));
    if (bias) layer.bias.assign(static_cast<std::size_t>(out), Scalar(0));
    return layer;
}

template <typename Scalar>
ConvLayer<Scalar> init_conv(int out_ch, int in_ch, Rng& rng) {
    ConvLayer<Scalar> layer;
    layer.in_channels = in_ch;
    layer.out_channels = out_ch;
    const double scale = 1.0 / std::sqrt(static_cast<double>(in_ch) * 9.0);
    layer.weight =
        Matrix<Scalar>(static_cast<std::size_t>(out_ch), static_cast<std::size_t>(in_ch) * 9);
    for (auto& v : layer.weight.data()) v = static_cast<Scalar>(rng.normal(0.0, scale));
    layer.bias.assign(static_cast<std::size_t>(out_ch), Scalar(0));
    return layer;
}

} // namespace detail

inline int tsm_hidden_dim(int feature_dim) { return (feature_dim + 3) / 4; }

/// Fresh model: extractor and TSM use zero-mean 1/sqrt(fan_in) weights, the
/// per-tree heads a 1/sqrt(F) scale, and the leaf distributions start uniform.
/// Deterministic for a fixed seed.
template <typename Scalar = double>
ModelParams<Scalar> init_model(const BackboneConfig& config, int tree_count, int depth,
                               std::uint64_t seed) {
    config.validate();
    if (tree_count < 1) throw ConfigError("tree count must be >= 1");
    if (depth < 2) throw ConfigError("tree depth must be >= 2");

    Rng rng(seed);
    ModelParams<Scalar> params;
    params.config = config;
    params.config.seed = seed;

    const int f_dim = config.feature_dim;
    if (config.arch == Arch::mlp) {
        int in = config.input_shape.flat_dim();
        for (int hdim : config.hidden_dims) {
            params.theta.dense.push_back(
                detail::init_affine<Scalar>(hdim, in, 1.0 / std::sqrt(double(in)), true, rng));
            in = hdim;
        }
        params.theta.feature =
            detail::init_affine<Scalar>(f_dim, in, 1.0 / std::sqrt(double(in)), true, rng);
    } else {
        int in_ch = config.input_shape.channels;
        for (int ch : config.hidden_dims) {
            params.theta.conv.push_back(detail::init_conv<Scalar>(ch, in_ch, rng));
            in_ch = ch;
        }
        params.theta.feature =
            detail::init_affine<Scalar>(f_dim, in_ch, 1.0 / std::sqrt(double(in_ch)), true, rng);
    }

    params.omega = detail::init_affine<Scalar>(config.num_classes, f_dim,
                                               1.0 / std::sqrt(double(f_dim)), true, rng);

    const int n_split = (1 << (depth - 1)) - 1;
    const int n_leaves = 1 << (depth - 1);
    params.heads.reserve(static_cast<std::size_t>(tree_count));
    for (int t = 0; t < tree_count; ++t)
        params.heads.push_back(detail::init_affine<Scalar>(
            n_split, f_dim, 1.0 / std::sqrt(double(f_dim)), config.head_bias, rng));

    const int hid = tsm_hidden_dim(f_dim);
    params.tsm.l1 = detail::init_affine<Scalar>(hid, f_dim, 1.0 / std::sqrt(double(f_dim)), true, rng);
    params.tsm.l2 = detail::init_affine<Scalar>(hid, hid, 1.0 / std::sqrt(double(hid)), true, rng);
    params.tsm.l3 = detail::init_affine<Scalar>(tree_count, hid, 1.0 / std::sqrt(double(hid)), true, rng);

    params.leaf_dists.assign(static_cast<std::size_t>(tree_count),
                             Matrix<Scalar>(static_cast<std::size_t>(n_leaves),
                                            static_cast<std::size_t>(config.num_classes),
                                            Scalar(1) / static_cast<Scalar>(config.num_classes)));
    return params;
}

/// Forward pass through extractor and every head. Pure in (params, x).
template <typename Scalar>
Activation<Scalar> forward(const ModelParams<Scalar>& params, const Vector<Scalar>& x,
                           ExtractorTrace<Scalar>* trace = nullptr) {
    ExtractorTrace<Scalar> local;
    ExtractorTrace<Scalar>* tr = trace ? trace : &local;
    Activation<Scalar> act;
    act.features = extractor_forward(params.config, params.theta, x, tr);

    if (params.config.arch == Arch::tiny_conv) {
        const int h = params.config.input_shape.height;
        const int w = params.config.input_shape.width;
        const int k = params.theta.conv.back().out_channels;
        const auto& maps = tr->conv_post.back();
        act.conv_maps.reserve(static_cast<std::size_t>(k));
        for (int c = 0; c < k; ++c) {
            Matrix<Scalar> m(static_cast<std::size_t>(h), static_cast<std::size_t>(w));
            for (int i = 0; i < h * w; ++i) m.data()[static_cast<std::size_t>(i)] =
                maps[static_cast<std::size_t>(c * h * w + i)];
            act.conv_maps.push_back(std::move(m));
        }
    }

    const int t_count = params.tree_count();
    if (t_count > 0) {
        const std::size_t n = params.heads.front().weight.rows();
        act.neuron_outputs = Matrix<Scalar>(static_cast<std::size_t>(t_count), n);
        for (int t = 0; t < t_count; ++t) {
            Vector<Scalar> f = params.heads[static_cast<std::size_t>(t)].apply(act.features);
            std::copy(f.begin(), f.end(), act.neuron_outputs.row(static_cast<std::size_t>(t)));
        }
    }
    return act;
}

// ---- pretraining -------------------------------------------------------------

struct OptimizerSettings {
    double learning_rate = 0.1;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    int epochs = 50;
    int batch_size = 64;
    /// Learning-rate multiplier applied every `decay_every` epochs (0 = never).
    double decay_factor = 0.1;
    int decay_every = 0;
    std::uint64_t shuffle_seed = 1;
};

template <typename Scalar>
struct EpochMetric {
    int epoch = 0;
    std::string phase;
    double nll = 0;
    double accuracy = 0;
    double learning_rate = 0;
};

namespace detail {

/// Visits every trainable tensor of a parameter set in a fixed order.
/// Shared by the SGD update, gradient mirrors and the checkpoint writer.
template <typename Scalar, typename Fn>
void for_each_extractor_tensor(ExtractorParams<Scalar>& theta, const std::string& prefix, Fn&& fn) {
    for (std::size_t i = 0; i < theta.dense.size(); ++i) {
        fn(prefix + ".dense" + std::to_string(i) + ".weight", theta.dense[i].weight.data());
        fn(prefix + ".dense" + std::to_string(i) + ".bias", theta.dense[i].bias);
    }
    for (std::size_t i = 0; i < theta.conv.size(); ++i) {
        fn(prefix + ".conv" + std::to_string(i) + ".weight", theta.conv[i].weight.data());
        fn(prefix + ".conv" + std::to_string(i) + ".bias", theta.conv[i].bias);
    }
    fn(prefix + ".feature.weight", theta.feature.weight.data());
    fn(prefix + ".feature.bias", theta.feature.bias);
}

template <typename Scalar, typename Fn>
void for_each_trainable_tensor(ModelParams<Scalar>& params, Fn&& fn) {
    for_each_extractor_tensor(params.theta, "theta", fn);
    fn(std::string("omega.weight"), params.omega.weight.data());
    fn(std::string("omega.bias"), params.omega.bias);
    for (std::size_t t = 0; t < params.heads.size(); ++t) {
        fn("head" + std::to_string(t) + ".weight", params.heads[t].weight.data());
        fn("head" + std::to_string(t) + ".bias", params.heads[t].bias);
    }
    fn(std::string("tsm.l1.weight"), params.tsm.l1.weight.data());
    fn(std::string("tsm.l1.bias"), params.tsm.l1.bias);
    fn(std::string("tsm.l2.weight"), params.tsm.l2.weight.data());
    fn(std::string("tsm.l2.bias"), params.tsm.l2.bias);
    fn(std::string("tsm.l3.weight"), params.tsm.l3.weight.data());
    fn(std::string("tsm.l3.bias"), params.tsm.l3.bias);
}

} // namespace detail

/// Gradients mirroring ModelParams (leaf distributions excluded: they are
/// updated by variational bounding, not SGD).
template <typename Scalar>
struct ModelGradients {
    ExtractorParams<Scalar> theta;
    AffineLayer<Scalar> omega;
    std::vector<AffineLayer<Scalar>> heads;
    TsmParams<Scalar> tsm;
};

template <typename Scalar>
ModelGradients<Scalar> zero_gradients(const ModelParams<Scalar>& params) {
    ModelGradients<Scalar> g;
    auto zero_affine = [](const AffineLayer<Scalar>& layer) {
        AffineLayer<Scalar> z;
        z.weight = Matrix<Scalar>(layer.weight.rows(), layer.weight.cols());
        z.bias.assign(layer.bias.size(), Scalar(0));
        return z;
    };
    for (const auto& layer : params.theta.dense) g.theta.dense.push_back(zero_affine(layer));
    for (const auto& layer : params.theta.conv) {
        ConvLayer<Scalar> z;
        z.in_channels = layer.in_channels;
        z.out_channels = layer.out_channels;
        z.weight = Matrix<Scalar>(layer.weight.rows(), layer.weight.cols());
        z.bias.assign(layer.bias.size(), Scalar(0));
        g.theta.conv.push_back(std::move(z));
    }
    g.theta.feature = zero_affine(params.theta.feature);
    g.omega = zero_affine(params.omega);
    for (const auto& head : params.heads) g.heads.push_back(zero_affine(head));
    g.tsm.l1 = zero_affine(params.tsm.l1);
    g.tsm.l2 = zero_affine(params.tsm.l2);
    g.tsm.l3 = zero_affine(params.tsm.l3);
    return g;
}

namespace detail {

template <typename Scalar, typename Fn>
void for_each_gradient_tensor(ModelGradients<Scalar>& grads, Fn&& fn) {
    for_each_extractor_tensor(grads.theta, "theta", fn);
    fn(std::string("omega.weight"), grads.omega.weight.data());
    fn(std::string("omega.bias"), grads.omega.bias);
    for (std::size_t t = 0; t < grads.heads.size(); ++t) {
        fn("head" + std::to_string(t) + ".weight", grads.heads[t].weight.data());
        fn("head" + std::to_string(t) + ".bias", grads.heads[t].bias);
    }
    fn(std::string("tsm.l1.weight"), grads.tsm.l1.weight.data());
    fn(std::string("tsm.l1.bias"), grads.tsm.l1.bias);
    fn(std::string("tsm.l2.weight"), grads.tsm.l2.weight.data());
    fn(std::string("tsm.l2.bias"), grads.tsm.l2.bias);
    fn(std::string("tsm.l3.weight"), grads.tsm.l3.weight.data());
    fn(std::string("tsm.l3.bias"), grads.tsm.l3.bias);
}

/// Momentum buffers keyed by tensor name.
template <typename Scalar>
struct SgdState {
    std::vector<std::pair<std::string, Vector<Scalar>>> velocity;

    Vector<Scalar>& buffer(const std::string& name, std::size_t size) {
        for (auto& [n, v] : velocity)
            if (n == name) return v;
        velocity.emplace_back(name, Vector<Scalar>(size, Scalar(0)));
        return velocity.back().second;
    }
};

/// v = momentum * v - lr * (g + wd * p); p += v. `include` filters by tensor
/// name so pretraining can restrict the update to theta and omega.
template <typename Scalar>
void sgd_step(ModelParams<Scalar>& params, ModelGradients<Scalar>& grads, SgdState<Scalar>& state,
              double lr, double momentum, double weight_decay,
              const std::function<bool(const std::string&)>& include) {
    std::vector<std::pair<std::string, Vector<Scalar>*>> grad_ptrs;
    for_each_gradient_tensor(grads, [&](const std::string& name, Vector<Scalar>& data) {
        grad_ptrs.emplace_back(name, &data);
    });
    std::size_t cursor = 0;
    for_each_trainable_tensor(params, [&](const std::string& name, Vector<Scalar>& data) {
        const auto& [gname, gdata] = grad_ptrs[cursor++];
        if (gname != name) throw InvariantError("sgd_step: tensor order mismatch at " + name);
        if (!include(name)) return;
        auto& vel = state.buffer(name, data.size());
        for (std::size_t i = 0; i < data.size(); ++i) {
            vel[i] = static_cast<Scalar>(momentum) * vel[i] -
                     static_cast<Scalar>(lr) * ((*gdata)[i] + static_cast<Scalar>(weight_decay) * data[i]);
            data[i] += vel[i];
        }
    });
}

} // namespace detail

/// Cross-entropy gradients of the original C-way head for one sample;
/// accumulates into `grads` and returns the sample loss.
template <typename Scalar>
double pretrain_sample_backward(const ModelParams<Scalar>& params, const Vector<Scalar>& x, int label,
                                ModelGradients<Scalar>& grads) {
    ExtractorTrace<Scalar> trace;
    Vector<Scalar> z = extractor_forward(params.config, params.theta, x, &trace);
    Vector<Scalar> logits = params.omega.apply(z);
    // stable softmax
    Scalar mx = logits[0];
    for (Scalar v : logits) mx = std::max(mx, v);
    Scalar denom = Scalar(0);
    for (Scalar v : logits) denom += std::exp(v - mx);
    const double loss = -static_cast<double>(logits[static_cast<std::size_t>(label)] - mx) +
                        std::log(static_cast<double>(denom));

    Vector<Scalar> dlogits(logits.size());
    for (std::size_t c = 0; c < logits.size(); ++c)
        dlogits[c] = std::exp(logits[c] - mx) / denom - (static_cast<int>(c) == label ? Scalar(1) : Scalar(0));
    add_outer(grads.omega.weight, dlogits, z);
    if (!grads.omega.bias.empty()) axpy(Scalar(1), dlogits, grads.omega.bias);
    Vector<Scalar> dz = matvec_transposed(params.omega.weight, dlogits);
    extractor_backward(params.config, params.theta, trace, dz, grads.theta);
    return loss;
}

/// Predicted class of the original C-way head.
template <typename Scalar>
int original_head_predict(const ModelParams<Scalar>& params, const Vector<Scalar>& x) {
    Vector<Scalar> z = extractor_forward(params.config, params.theta, x);
    Vector<Scalar> logits = params.omega.apply(z);
    std::size_t best = 0;
    for (std::size_t c = 1; c < logits.size(); ++c)
        if (logits[c] > logits[best]) best = c;
    return static_cast<int>(best);
}

/// Cross-entropy SGD on the extractor and the original head. Heads, TSM and
/// leaf distributions are left untouched. Mini-batch order is a seeded
/// shuffle, so a fixed seed reproduces the run bit-exactly.
template <typename Scalar>
ModelParams<Scalar> pretrain(ModelParams<Scalar> params, const Dataset& data,
                             const OptimizerSettings& opt,
                             std::vector<EpochMetric<Scalar>>* log = nullptr) {
    data.validate();
    if (data.size() == 0) throw ValidationError("pretrain: dataset is empty");
    if (data.num_classes != params.config.num_classes)
        throw ValidationError("pretrain: dataset has " + std::to_string(data.num_classes) +
                              " classes, model expects " + std::to_string(params.config.num_classes));

    detail::SgdState<Scalar> state;
    Rng shuffle_rng(opt.shuffle_seed);
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    double lr = opt.learning_rate;
    const auto include = [](const std::string& name) {
        return name.rfind("theta", 0) == 0 || name.rfind("omega", 0) == 0;
    };

    for (int epoch = 0; epoch < opt.epochs; ++epoch) {
        if (opt.decay_every > 0 && epoch > 0 && epoch % opt.decay_every == 0)
            lr *= opt.decay_factor;
        shuffle_rng.shuffle(order);
        double epoch_loss = 0.0;
        std::size_t correct = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(opt.batch_size)) {
            const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(opt.batch_size));
            ModelGradients<Scalar> grads = zero_gradients(params);
            for (std::size_t i = start; i < stop; ++i) {
                const auto x = sample_as<Scalar>(data, order[i]);
                epoch_loss += pretrain_sample_backward(params, x, data.labels[order[i]], grads);
            }
            const Scalar inv = Scalar(1) / static_cast<Scalar>(stop - start);
            detail::for_each_gradient_tensor(grads, [&](const std::string&, Vector<Scalar>& g) {
                for (auto& v : g) v *= inv;
            });
            detail::sgd_step(params, grads, state, lr, opt.momentum, opt.weight_decay, include);
        }
        epoch_loss /= static_cast<double>(data.size());
        if (!std::isfinite(epoch_loss))
            throw NumericError("pretrain diverged at epoch " + std::to_string(epoch) +
                               ": loss is not finite");
        if (log) {
            for (std::size_t i = 0; i < data.size(); ++i)
                if (original_head_predict(params, sample_as<Scalar>(data, i)) == data.labels[i]) ++correct;
            log->push_back({epoch, "pretrain", epoch_loss,
                            static_cast<double>(correct) / static_cast<double>(data.size()), lr});
        }
    }
    return params;
}

} // namespace dsdf
