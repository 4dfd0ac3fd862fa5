#pragma once

// Shared helpers for the test suites: tensor listings, parameter equality and
// the finite-difference gradient harness (the independent oracle used against
// every analytic gradient in the library).

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "dsdf/backbone.hpp"

namespace testsupport {

inline std::vector<std::pair<std::string, dsdf::Vector<double>*>> trainable_tensors(
    dsdf::ModelParams<double>& params) {
    std::vector<std::pair<std::string, dsdf::Vector<double>*>> out;
    dsdf::detail::for_each_trainable_tensor(
        params,
        [&](const std::string& name, dsdf::Vector<double>& data) { out.emplace_back(name, &data); });
    return out;
}

inline std::vector<std::pair<std::string, dsdf::Vector<double>*>> gradient_tensors(
    dsdf::ModelGradients<double>& grads) {
    std::vector<std::pair<std::string, dsdf::Vector<double>*>> out;
    dsdf::detail::for_each_gradient_tensor(
        grads,
        [&](const std::string& name, dsdf::Vector<double>& data) { out.emplace_back(name, &data); });
    return out;
}

inline bool params_equal(dsdf::ModelParams<double>& a, dsdf::ModelParams<double>& b) {
    auto ta = trainable_tensors(a);
    auto tb = trainable_tensors(b);
    if (ta.size() != tb.size()) return false;
    for (std::size_t i = 0; i < ta.size(); ++i)
        if (ta[i].first != tb[i].first || *ta[i].second != *tb[i].second) return false;
    if (a.leaf_dists.size() != b.leaf_dists.size()) return false;
    for (std::size_t t = 0; t < a.leaf_dists.size(); ++t)
        if (!(a.leaf_dists[t] == b.leaf_dists[t])) return false;
    return true;
}

/// Central finite differences against the analytic gradients over every
/// trainable tensor; returns the worst discrepancy under the
/// max(1, |analytic|, |numeric|) denominator.
template <typename LossFn>
double max_fd_error(dsdf::ModelParams<double>& params, dsdf::ModelGradients<double>& grads,
                    LossFn&& loss, double h = 1e-5) {
    auto tensors = trainable_tensors(params);
    auto grad_refs = gradient_tensors(grads);
    double worst = 0.0;
    for (std::size_t t = 0; t < tensors.size(); ++t) {
        dsdf::Vector<double>& data = *tensors[t].second;
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double saved = data[i];
            data[i] = saved + h;
            const double hi = loss();
            data[i] = saved - h;
            const double lo = loss();
            data[i] = saved;
            const double fd = (hi - lo) / (2 * h);
            const double analytic = (*grad_refs[t].second)[i];
            const double denom = std::max({1.0, std::abs(fd), std::abs(analytic)});
            worst = std::max(worst, std::abs(fd - analytic) / denom);
        }
    }
    return worst;
}

} // namespace testsupport
