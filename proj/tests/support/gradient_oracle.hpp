#pragma once

// Central finite differences over every parameter, in double precision.

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "civiclens/model.hpp"

namespace civiclens::testing {

inline model::NetworkSpec small_net(int size, std::vector<model::LayerSpec> layers, int channels = 3) {
  model::NetworkSpec s;
  s.input_height = s.input_width = size;
  s.input_channels = channels;
  s.layers = std::move(layers);
  return s;
}

inline std::vector<double> random_input(const model::NetworkSpec& spec, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> x(spec.input_shape().size());
  for (auto& v : x) v = u(rng);
  return x;
}

/// He weights plus small random biases, so no bias sits exactly at zero.
inline model::Parameters<double> random_params(const model::NetworkSpec& spec, std::uint64_t seed) {
  auto p = model::he_initialize<double>(spec, seed);
  std::mt19937_64 rng(seed + 1);
  std::normal_distribution<double> n(0.0, 0.1);
  for (auto& l : p.layers)
    for (auto& b : l.bias) b = n(rng);
  return p;
}

inline double batch_loss(const model::NetworkSpec& spec, const model::Parameters<double>& p,
                         const std::vector<model::LabeledTensor<double>>& batch) {
  double sum = 0;
  for (const auto& ex : batch) sum -= std::log(model::forward<double>(spec, p, ex.input)[ex.label]);
  return sum / static_cast<double>(batch.size());
}

/// Worst relative error between analytic and central-difference gradients
/// (eps 1e-5; relative to max(|fd|, |analytic|, 1e-6)).
inline double gradient_check(const model::NetworkSpec& spec, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto params = random_params(spec, seed);
  std::vector<model::LabeledTensor<double>> batch;
  for (int i = 0; i < 3; ++i) batch.push_back({random_input(spec, rng), i % 3});
  const auto analytic = model::loss_and_gradients<double>(spec, params, batch);
  constexpr double eps = 1e-5;
  double worst = std::abs(analytic.loss - batch_loss(spec, params, batch)) > 1e-12 ? 1.0 : 0.0;
  auto probe = [&](double& slot, double g) {
    const double keep = slot;
    slot = keep + eps;
    const double up = batch_loss(spec, params, batch);
    slot = keep - eps;
    const double down = batch_loss(spec, params, batch);
    slot = keep;
    const double fd = (up - down) / (2 * eps);
    worst = std::max(worst, std::abs(fd - g) / std::max({1e-6, std::abs(fd), std::abs(g)}));
  };
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    for (std::size_t k = 0; k < params.layers[l].weights.size(); ++k)
      probe(params.layers[l].weights[k], analytic.grads.layers[l].weights[k]);
    for (std::size_t k = 0; k < params.layers[l].bias.size(); ++k)
      probe(params.layers[l].bias[k], analytic.grads.layers[l].bias[k]);
  }
  return worst;
}

/// Every layer variant: strided and unpadded conv, 1x1 and 5x5 kernels,
/// relu on and off, overlapping and non-overlapping pools, hidden dense.
inline std::vector<model::NetworkSpec> gradient_variants() {
  using namespace model;
  return {
      small_net(8, {ConvLayer{2, 3, 1, 1, true}, MaxPoolLayer{2, 2}, FlattenLayer{}, DenseLayer{3, false},
                    SoftmaxOutput{}}),
      small_net(7, {ConvLayer{3, 3, 2, 0, false}, FlattenLayer{}, DenseLayer{3, false}, SoftmaxOutput{}}),
      small_net(6, {ConvLayer{2, 5, 1, 2, true}, MaxPoolLayer{3, 3}, FlattenLayer{}, DenseLayer{4, true},
                    DenseLayer{3, false}, SoftmaxOutput{}}),
      small_net(8, {ConvLayer{2, 1, 1, 0, true}, ConvLayer{2, 3, 1, 1, true}, MaxPoolLayer{2, 1}, FlattenLayer{},
                    DenseLayer{3, false}, SoftmaxOutput{}},
                1),
      small_net(5, {DenseLayer{3, false}, SoftmaxOutput{}}),
      NetworkSpec::reference(8),
  };
}

}  // namespace civiclens::testing
