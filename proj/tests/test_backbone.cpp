#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "dsdf/backbone.hpp"
#include "dsdf/dataset.hpp"
#include "dsdf/forest.hpp"
#include "support.hpp"

using namespace dsdf;

namespace {

BackboneConfig small_mlp_config(int input_dim = 4, int feature_dim = 4, int classes = 2) {
    BackboneConfig config;
    config.input_shape = InputShape::flat(input_dim);
    config.arch = Arch::mlp;
    config.hidden_dims = {8};
    config.feature_dim = feature_dim;
    config.num_classes = classes;
    return config;
}

/// Plain batch-gradient-descent logistic regression, the independent
/// reference for the pretraining accuracy bar.
double logistic_regression_accuracy(const Dataset& data, int iterations = 300, double lr = 0.1) {
    const std::size_t dim = data.samples.front().size();
    Vector<double> w(dim, 0.0);
    double b = 0.0;
    for (int it = 0; it < iterations; ++it) {
        Vector<double> gw(dim, 0.0);
        double gb = 0.0;
        for (std::size_t i = 0; i < data.size(); ++i) {
            double score = b;
            for (std::size_t j = 0; j < dim; ++j) score += w[j] * data.samples[i][j];
            const double p = 1.0 / (1.0 + std::exp(-score));
            const double err = p - static_cast<double>(data.labels[i]);
            for (std::size_t j = 0; j < dim; ++j) gw[j] += err * data.samples[i][j];
            gb += err;
        }
        for (std::size_t j = 0; j < dim; ++j) w[j] -= lr * gw[j] / static_cast<double>(data.size());
        b -= lr * gb / static_cast<double>(data.size());
    }
    std::size_t correct = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        double score = b;
        for (std::size_t j = 0; j < dim; ++j) score += w[j] * data.samples[i][j];
        if ((score > 0.0 ? 1 : 0) == data.labels[i]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

Dataset two_class_blobs(int n_per_class = 100, std::uint64_t seed = 5) {
    SyntheticSpec spec;
    spec.classes = 2;
    spec.superclasses = {{0}, {1}};
    spec.dim = 4;
    spec.n_per_class = n_per_class;
    spec.separation = 3.0;
    spec.seed = seed;
    return make_synthetic(spec);
}

} // namespace

TEST_CASE("init_model starts leaves uniform") {
    const auto params = init_model(small_mlp_config(), 1, 2, 7);
    REQUIRE(params.leaf_dists.size() == 1);
    REQUIRE(params.leaf_dists[0].rows() == 2);
    REQUIRE(params.leaf_dists[0].cols() == 2);
    for (double v : params.leaf_dists[0].data()) REQUIRE(v == 0.5);
}

TEST_CASE("init_model is bit-identical for a fixed seed") {
    auto a = init_model(small_mlp_config(), 2, 3, 1234);
    auto b = init_model(small_mlp_config(), 2, 3, 1234);
    auto c = init_model(small_mlp_config(), 2, 3, 1235);
    REQUIRE(testsupport::params_equal(a, b));
    REQUIRE(!testsupport::params_equal(a, c));
}

TEST_CASE("head and leaf sizes follow the depth arithmetic") {
    const auto params = init_model(small_mlp_config(), 3, 4, 7);
    REQUIRE(params.heads.size() == 3);
    for (const auto& head : params.heads) {
        REQUIRE(head.weight.rows() == 7); // 2^(4-1) - 1
        REQUIRE(head.weight.cols() == 4);
    }
    for (const auto& pi : params.leaf_dists) REQUIRE(pi.rows() == 8); // 2^(4-1)
}

TEST_CASE("init_model rejects invalid configurations") {
    auto config = small_mlp_config();
    config.feature_dim = 0;
    REQUIRE_THROWS_AS(init_model(config, 1, 2, 1), ConfigError);
    config = small_mlp_config();
    config.num_classes = 1;
    REQUIRE_THROWS_AS(init_model(config, 1, 2, 1), ConfigError);
    config = small_mlp_config();
    config.hidden_dims.clear();
    REQUIRE_THROWS_AS(init_model(config, 1, 2, 1), ConfigError);
    config = small_mlp_config();
    config.arch = Arch::tiny_conv; // flat input
    REQUIRE_THROWS_AS(init_model(config, 1, 2, 1), ConfigError);
    REQUIRE_THROWS_AS(init_model(small_mlp_config(), 0, 2, 1), ConfigError);
    REQUIRE_THROWS_AS(init_model(small_mlp_config(), 1, 1, 1), ConfigError);
}

TEST_CASE("zero-weight heads output their bias") {
    auto params = init_model(small_mlp_config(), 2, 3, 7);
    for (auto& head : params.heads) {
        head.weight.fill(0.0);
        for (auto& b : head.bias) b = 0.25;
    }
    const auto act = forward(params, Vector<double>{0.1, -0.2, 0.3, 0.4});
    for (double f : act.neuron_outputs.data()) REQUIRE(f == 0.25);
}

TEST_CASE("forward is pure and produces finite values of the right shape") {
    const auto params = init_model(small_mlp_config(), 3, 4, 99);
    const Vector<double> x{0.5, -1.0, 2.0, 0.0};
    const auto a = forward(params, x);
    const auto b = forward(params, x);
    REQUIRE(a.features == b.features);
    REQUIRE(a.neuron_outputs == b.neuron_outputs);
    REQUIRE(a.neuron_outputs.rows() == 3);
    REQUIRE(a.neuron_outputs.cols() == 7);
    REQUIRE(a.conv_maps.empty());
    for (double v : a.features) REQUIRE(std::isfinite(v));
    for (double v : a.neuron_outputs.data()) REQUIRE(std::isfinite(v));
}

TEST_CASE("forward rejects inputs of the wrong size") {
    const auto params = init_model(small_mlp_config(), 1, 2, 7);
    REQUIRE_THROWS_AS(forward(params, Vector<double>{1.0}), InputError);
}

TEST_CASE("tiny_conv forward exposes spatial activation maps") {
    BackboneConfig config;
    config.input_shape = InputShape::image(1, 5, 5);
    config.arch = Arch::tiny_conv;
    config.hidden_dims = {2, 3};
    config.feature_dim = 4;
    config.num_classes = 2;
    const auto params = init_model(config, 1, 2, 3);
    Vector<double> x(25);
    Rng rng(2);
    for (auto& v : x) v = rng.uniform();
    const auto act = forward(params, x);
    REQUIRE(act.conv_maps.size() == 3);
    for (const auto& m : act.conv_maps) {
        REQUIRE(m.rows() == 5);
        REQUIRE(m.cols() == 5);
        for (double v : m.data()) REQUIRE(std::isfinite(v));
    }
    REQUIRE(act.features.size() == 4);
}

TEST_CASE("pretraining separates Gaussian blobs at least as well as the target") {
    const Dataset data = two_class_blobs();
    // the independent oracle must clear the bar on the same data
    REQUIRE(logistic_regression_accuracy(data) >= 0.95);

    auto params = init_model(small_mlp_config(), 1, 2, 11);
    OptimizerSettings opt;
    opt.epochs = 50;
    opt.learning_rate = 0.1;
    opt.batch_size = 32;
    opt.shuffle_seed = 17;
    std::vector<EpochMetric<double>> log;
    params = pretrain(std::move(params), data, opt, &log);
    REQUIRE(log.size() == 50);
    REQUIRE(log.back().accuracy >= 0.95);
}

TEST_CASE("pretraining for zero epochs is a no-op") {
    const Dataset data = two_class_blobs(10);
    auto params = init_model(small_mlp_config(), 1, 2, 11);
    auto reference = init_model(small_mlp_config(), 1, 2, 11);
    OptimizerSettings opt;
    opt.epochs = 0;
    params = pretrain(std::move(params), data, opt);
    REQUIRE(testsupport::params_equal(params, reference));
}

TEST_CASE("pretraining is deterministic and leaves forest parameters alone") {
    const Dataset data = two_class_blobs(20);
    OptimizerSettings opt;
    opt.epochs = 5;
    opt.batch_size = 8;
    opt.shuffle_seed = 3;
    auto run = [&] { return pretrain(init_model(small_mlp_config(), 2, 3, 21), data, opt); };
    auto a = run();
    auto b = run();
    REQUIRE(testsupport::params_equal(a, b));

    auto fresh = init_model(small_mlp_config(), 2, 3, 21);
    for (std::size_t t = 0; t < fresh.heads.size(); ++t) {
        REQUIRE(a.heads[t].weight == fresh.heads[t].weight);
        REQUIRE(a.heads[t].bias == fresh.heads[t].bias);
        REQUIRE(a.leaf_dists[t] == fresh.leaf_dists[t]);
    }
    REQUIRE(a.tsm.l1.weight == fresh.tsm.l1.weight);
    REQUIRE(!(a.omega.weight == fresh.omega.weight));
}

TEST_CASE("pretraining reports divergence with the epoch index") {
    const Dataset data = two_class_blobs(10);
    auto params = init_model(small_mlp_config(), 1, 2, 11);
    params.omega.weight(0, 0) = std::numeric_limits<double>::quiet_NaN();
    OptimizerSettings opt;
    opt.epochs = 4;
    try {
        pretrain(std::move(params), data, opt);
        FAIL("expected a NumericError");
    } catch (const NumericError& e) {
        REQUIRE(std::string(e.what()).find("epoch 0") != std::string::npos);
    }
}

TEST_CASE("pretraining rejects foreign labels") {
    Dataset data = two_class_blobs(5);
    data.labels[0] = 7;
    auto params = init_model(small_mlp_config(), 1, 2, 11);
    REQUIRE_THROWS_AS(pretrain(std::move(params), data, OptimizerSettings{}), ValidationError);
}

TEST_CASE("cross-entropy gradients match finite differences (mlp)") {
    const Dataset data = two_class_blobs(6, 8);
    auto params = init_model(small_mlp_config(), 1, 2, 13);
    std::vector<std::size_t> batch{0, 1, 6, 7};
    auto grads = gradients(params, {}, data, batch, LossKind::pretrain_cross_entropy);
    const auto loss = [&] {
        double acc = 0.0;
        ModelGradients<double> scratch = zero_gradients(params);
        for (std::size_t i : batch)
            acc += pretrain_sample_backward(params, sample_as<double>(data, i), data.labels[i], scratch);
        return acc / static_cast<double>(batch.size());
    };
    REQUIRE(testsupport::max_fd_error(params, grads, loss) < 1e-4);
}

TEST_CASE("cross-entropy gradients match finite differences (tiny_conv)") {
    BackboneConfig config;
    config.input_shape = InputShape::image(1, 6, 6);
    config.arch = Arch::tiny_conv;
    config.hidden_dims = {2, 2};
    config.feature_dim = 3;
    config.num_classes = 3;
    auto params = init_model(config, 1, 2, 3);

    Dataset data;
    data.num_classes = 3;
    data.shape = config.input_shape;
    Rng rng(4);
    for (int i = 0; i < 3; ++i) {
        std::vector<double> x(36);
        for (auto& v : x) v = rng.uniform();
        data.samples.push_back(std::move(x));
        data.labels.push_back(i);
    }
    std::vector<std::size_t> batch{0, 1, 2};
    auto grads = gradients(params, {}, data, batch, LossKind::pretrain_cross_entropy);
    const auto loss = [&] {
        double acc = 0.0;
        ModelGradients<double> scratch = zero_gradients(params);
        for (std::size_t i : batch)
            acc += pretrain_sample_backward(params, sample_as<double>(data, i), data.labels[i], scratch);
        return acc / static_cast<double>(batch.size());
    };
    REQUIRE(testsupport::max_fd_error(params, grads, loss) < 1e-4);
}

TEST_CASE("parameters outside the pretraining loss get exactly zero gradient") {
    const Dataset data = two_class_blobs(4, 9);
    auto params = init_model(small_mlp_config(), 2, 3, 13);
    auto grads = gradients(params, {}, data, {0, 1}, LossKind::pretrain_cross_entropy);
    for (const auto& head : grads.heads) {
        for (double v : head.weight.data()) REQUIRE(v == 0.0);
        for (double v : head.bias) REQUIRE(v == 0.0);
    }
    for (double v : grads.tsm.l1.weight.data()) REQUIRE(v == 0.0);
    for (double v : grads.tsm.l3.weight.data()) REQUIRE(v == 0.0);
}

TEST_CASE("a batch gradient is the mean of its per-sample gradients") {
    const Dataset data = two_class_blobs(4, 10);
    auto params = init_model(small_mlp_config(), 1, 2, 29);
    auto g01 = gradients(params, {}, data, {0, 4}, LossKind::pretrain_cross_entropy);
    auto g0 = gradients(params, {}, data, {0}, LossKind::pretrain_cross_entropy);
    auto g1 = gradients(params, {}, data, {4}, LossKind::pretrain_cross_entropy);
    std::vector<Vector<double>*> t01, t0, t1;
    dsdf::detail::for_each_gradient_tensor(g01, [&](const std::string&, Vector<double>& d) { t01.push_back(&d); });
    dsdf::detail::for_each_gradient_tensor(g0, [&](const std::string&, Vector<double>& d) { t0.push_back(&d); });
    dsdf::detail::for_each_gradient_tensor(g1, [&](const std::string&, Vector<double>& d) { t1.push_back(&d); });
    for (std::size_t t = 0; t < t01.size(); ++t)
        for (std::size_t i = 0; i < t01[t]->size(); ++i)
            REQUIRE((*t01[t])[i] ==
                    Catch::Approx(0.5 * ((*t0[t])[i] + (*t1[t])[i])).margin(1e-15));
}

TEST_CASE("the float instantiation runs end to end") {
    BackboneConfig config = small_mlp_config();
    auto params = init_model<float>(config, 2, 3, 7);
    const auto act = forward(params, Vector<float>{0.5f, -1.0f, 2.0f, 0.0f});
    REQUIRE(act.neuron_outputs.rows() == 2);
    for (float v : act.features) REQUIRE(std::isfinite(v));
}
