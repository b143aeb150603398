#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "civiclens/error.hpp"
#include "civiclens/model.hpp"
#include "engine.hpp"

namespace civiclens::model {

namespace {

template <typename... Fs>
struct overloaded : Fs... {
  using Fs::operator()...;
};
template <typename... Fs>
overloaded(Fs...) -> overloaded<Fs...>;

[[noreturn]] void shape_error(std::size_t index, const LayerSpec& layer, const std::string& why) {
  throw Error(ErrorCode::Shape, "layer " + std::to_string(index) + " (" + describe(layer) + "): " + why);
}

// Number of weights and biases a layer owns given its input shape.
std::pair<std::size_t, std::size_t> param_sizes(const LayerSpec& layer, const Shape& in) {
  if (const auto* c = std::get_if<ConvLayer>(&layer)) {
    return {static_cast<std::size_t>(c->out_channels) * in.c * c->kernel * c->kernel,
            static_cast<std::size_t>(c->out_channels)};
  }
  if (const auto* d = std::get_if<DenseLayer>(&layer)) {
    return {static_cast<std::size_t>(d->units) * in.size(), static_cast<std::size_t>(d->units)};
  }
  return {0, 0};
}

std::size_t fan_in(const LayerSpec& layer, const Shape& in) {
  if (const auto* c = std::get_if<ConvLayer>(&layer)) {
    return static_cast<std::size_t>(in.c) * c->kernel * c->kernel;
  }
  return in.size();
}

}  // namespace

std::string describe(const LayerSpec& layer) {
  std::ostringstream os;
  std::visit(overloaded{
                 [&](const ConvLayer& c) {
                   os << "Conv(" << c.out_channels << ", " << c.kernel << "x" << c.kernel << ", stride " << c.stride
                      << ", pad " << c.padding << (c.relu ? ", relu)" : ")");
                 },
                 [&](const MaxPoolLayer& m) { os << "MaxPool(" << m.window << ", stride " << m.stride << ")"; },
                 [&](const FlattenLayer&) { os << "Flatten"; },
                 [&](const DenseLayer& d) { os << "Dense(" << d.units << (d.relu ? ", relu)" : ")"); },
                 [&](const SoftmaxOutput&) { os << "SoftmaxOutput"; },
             },
             layer);
  return os.str();
}

std::vector<Shape> NetworkSpec::propagate() const {
  if (input_height < 1 || input_width < 1 || input_channels < 1) {
    throw Error(ErrorCode::Shape, "input shape must be positive");
  }
  if (layers.empty()) throw Error(ErrorCode::Shape, "network has no layers");
  std::vector<Shape> out;
  out.reserve(layers.size());
  Shape s = input_shape();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& layer = layers[i];
    if (const auto* c = std::get_if<ConvLayer>(&layer)) {
      if (c->kernel < 1 || c->kernel % 2 == 0) shape_error(i, layer, "kernel must be odd");
      if (c->stride < 1) shape_error(i, layer, "stride must be >= 1");
      if (c->padding < 0) shape_error(i, layer, "padding must be >= 0");
      if (c->out_channels < 1) shape_error(i, layer, "out_channels must be >= 1");
      const int h = s.h + 2 * c->padding - c->kernel;
      const int w = s.w + 2 * c->padding - c->kernel;
      if (h < 0 || w < 0) {
        shape_error(i, layer, "kernel larger than padded input " + std::to_string(s.h) + "x" + std::to_string(s.w));
      }
      s = {c->out_channels, h / c->stride + 1, w / c->stride + 1};
    } else if (const auto* m = std::get_if<MaxPoolLayer>(&layer)) {
      if (m->window < 1 || m->stride < 1) shape_error(i, layer, "window and stride must be >= 1");
      if (s.h < m->window || s.w < m->window) {
        shape_error(i, layer, "window larger than input " + std::to_string(s.h) + "x" + std::to_string(s.w));
      }
      s = {s.c, (s.h - m->window) / m->stride + 1, (s.w - m->window) / m->stride + 1};
    } else if (std::holds_alternative<FlattenLayer>(layer)) {
      s = {static_cast<int>(s.size()), 1, 1};
    } else if (const auto* d = std::get_if<DenseLayer>(&layer)) {
      if (d->units < 1) shape_error(i, layer, "units must be >= 1");
      s = {d->units, 1, 1};
    } else {
      if (i + 1 != layers.size()) shape_error(i, layer, "SoftmaxOutput must be the last layer");
      if (s.size() != static_cast<std::size_t>(kNumClasses)) {
        shape_error(i, layer, "expects " + std::to_string(kNumClasses) + " inputs, got " + std::to_string(s.size()));
      }
      s = {kNumClasses, 1, 1};
    }
    out.push_back(s);
  }
  if (!std::holds_alternative<SoftmaxOutput>(layers.back())) {
    throw Error(ErrorCode::Shape, "network must end in SoftmaxOutput");
  }
  return out;
}

NetworkSpec NetworkSpec::reference(int input_size) {
  NetworkSpec spec;
  spec.input_height = input_size;
  spec.input_width = input_size;
  spec.input_channels = 3;
  spec.layers = {ConvLayer{8, 3, 1, 1, true}, MaxPoolLayer{2, 2}, ConvLayer{16, 3, 1, 1, true}, MaxPoolLayer{2, 2},
                 FlattenLayer{},           DenseLayer{32, true}, DenseLayer{3, false},        SoftmaxOutput{}};
  return spec;
}

template <typename T>
std::size_t Parameters<T>::count() const noexcept {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.weights.size() + l.bias.size();
  return n;
}

template <typename T>
bool Parameters<T>::all_finite() const noexcept {
  for (const auto& l : layers) {
    for (T v : l.weights) {
      if (!std::isfinite(v)) return false;
    }
    for (T v : l.bias) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

template <typename T>
Parameters<T> zero_parameters(const NetworkSpec& spec) {
  const auto shapes = spec.propagate();
  Parameters<T> p;
  p.layers.resize(spec.layers.size());
  Shape in = spec.input_shape();
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto [nw, nb] = param_sizes(spec.layers[i], in);
    p.layers[i].weights.assign(nw, T(0));
    p.layers[i].bias.assign(nb, T(0));
    in = shapes[i];
  }
  return p;
}

template <typename T>
Parameters<T> he_initialize(const NetworkSpec& spec, std::uint64_t seed) {
  const auto shapes = spec.propagate();
  Parameters<T> p = zero_parameters<T>(spec);
  std::mt19937_64 rng(seed);
  Shape in = spec.input_shape();
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    if (!p.layers[i].weights.empty()) {
      std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in(spec.layers[i], in))));
      for (auto& w : p.layers[i].weights) w = static_cast<T>(dist(rng));
    }
    in = shapes[i];
  }
  return p;
}

template <typename T>
void check_parameters(const NetworkSpec& spec, const Parameters<T>& params) {
  const auto shapes = spec.propagate();
  if (params.layers.size() != spec.layers.size()) {
    throw Error(ErrorCode::Shape, "parameters cover " + std::to_string(params.layers.size()) + " layers, spec has " +
                                      std::to_string(spec.layers.size()));
  }
  Shape in = spec.input_shape();
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto [nw, nb] = param_sizes(spec.layers[i], in);
    if (params.layers[i].weights.size() != nw || params.layers[i].bias.size() != nb) {
      shape_error(i, spec.layers[i],
                  "expected " + std::to_string(nw) + " weights and " + std::to_string(nb) + " biases, got " +
                      std::to_string(params.layers[i].weights.size()) + " and " +
                      std::to_string(params.layers[i].bias.size()));
    }
    in = shapes[i];
  }
}

template <typename To, typename From>
Parameters<To> convert(const Parameters<From>& p) {
  Parameters<To> out;
  out.layers.resize(p.layers.size());
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    out.layers[i].weights.assign(p.layers[i].weights.begin(), p.layers[i].weights.end());
    out.layers[i].bias.assign(p.layers[i].bias.begin(), p.layers[i].bias.end());
  }
  return out;
}

template <typename T>
std::vector<T> to_tensor(const imaging::RasterImage& img) {
  img.validate();
  if (img.domain != imaging::ValueDomain::Unit) {
    throw Error(ErrorCode::Precondition, "model input must be unit-domain");
  }
  const std::size_t plane = static_cast<std::size_t>(img.width) * img.height;
  std::vector<T> t(plane * img.channels);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      for (int c = 0; c < img.channels; ++c) {
        t[c * plane + static_cast<std::size_t>(y) * img.width + x] = static_cast<T>(img.at(x, y, c));
      }
    }
  }
  return t;
}

template <typename T>
Probabilities forward(const NetworkSpec& spec, const Parameters<T>& params, std::span<const T> input) {
  check_parameters(spec, params);
  if (input.size() != spec.input_shape().size()) {
    throw Error(ErrorCode::Shape, "input: expected " + std::to_string(spec.input_shape().size()) + " values, got " +
                                      std::to_string(input.size()));
  }
  detail::Engine<T> engine(spec);
  const auto out = engine.run(params, input);
  Probabilities p{};
  for (int k = 0; k < kNumClasses; ++k) p[k] = static_cast<double>(out[k]);
  return p;
}

template <typename T>
LossAndGradients<T> loss_and_gradients(const NetworkSpec& spec, const Parameters<T>& params,
                                       std::span<const LabeledTensor<T>> batch) {
  check_parameters(spec, params);
  if (batch.empty()) throw Error(ErrorCode::Precondition, "loss_and_gradients needs a non-empty batch");
  const std::size_t expected = spec.input_shape().size();
  for (const auto& ex : batch) {
    if (ex.label < 0 || ex.label >= kNumClasses) {
      throw Error(ErrorCode::InvalidLabel, "label " + std::to_string(ex.label) + " outside {0,1,2}");
    }
    if (ex.input.size() != expected) {
      throw Error(ErrorCode::Shape, "input: expected " + std::to_string(expected) + " values, got " +
                                        std::to_string(ex.input.size()));
    }
  }
  detail::Engine<T> engine(spec);
  LossAndGradients<T> r;
  r.grads = zero_parameters<T>(spec);
  for (const auto& ex : batch) {
    const auto p = engine.run(params, ex.input);
    r.loss += engine.loss(ex.label);
    const auto best = std::max_element(p.begin(), p.end()) - p.begin();
    if (best == ex.label) ++r.correct;
    engine.backward(params, ex.label, r.grads);
  }
  const T scale = T(1) / static_cast<T>(batch.size());
  for (auto& l : r.grads.layers) {
    for (auto& g : l.weights) g *= scale;
    for (auto& g : l.bias) g *= scale;
  }
  r.loss /= static_cast<double>(batch.size());
  return r;
}

Prediction make_prediction(const Probabilities& p) {
  Prediction out;
  out.probabilities = p;
  int best = 0;
  for (int k = 1; k < kNumClasses; ++k) {
    if (p[k] > p[best]) best = k;
  }
  out.cls = class_from_index(best);
  out.confidence = p[best];
  return out;
}

Probabilities aggregate(std::span<const Probabilities> per_view, std::span<const double> weights) {
  if (per_view.empty()) throw Error(ErrorCode::Precondition, "aggregate needs at least one view");
  if (weights.size() != per_view.size()) throw Error(ErrorCode::Precondition, "one weight per view required");
  double total = 0.0;
  for (double w : weights) total += std::max(w, 0.0);
  Probabilities acc{};
  for (std::size_t v = 0; v < per_view.size(); ++v) {
    const double w = total > 0.0 ? std::max(weights[v], 0.0) : 1.0;
    for (int k = 0; k < kNumClasses; ++k) acc[k] += w * per_view[v][k];
  }
  const double sum = std::accumulate(acc.begin(), acc.end(), 0.0);
  for (auto& a : acc) a /= sum;
  return acc;
}

std::vector<imaging::RasterImage> case_views(const NetworkSpec& spec, const imaging::RasterImage& img,
                                             std::span<const regions::RegionProposal> proposals) {
  if (spec.input_height != spec.input_width) {
    throw Error(ErrorCode::Shape, "predict_case needs a square network input");
  }
  if (img.domain != imaging::ValueDomain::Unit) {
    throw Error(ErrorCode::Precondition, "predict_case needs a unit-domain image");
  }
  std::vector<imaging::RasterImage> views;
  if (proposals.empty()) {
    views.push_back(imaging::resize_to_standard(img, spec.input_height));
    return views;
  }
  views.reserve(proposals.size());
  for (const auto& p : proposals) {
    views.push_back(imaging::resize_to_standard(imaging::crop(img, p.bbox), spec.input_height));
  }
  return views;
}

Prediction predict_case(const NetworkSpec& spec, const Parameters<float>& params, const imaging::RasterImage& img,
                        std::span<const regions::RegionProposal> proposals) {
  check_parameters(spec, params);
  const auto views = case_views(spec, img, proposals);
  detail::Engine<float> engine(spec);
  std::vector<Probabilities> probs;
  std::vector<double> weights;
  for (std::size_t v = 0; v < views.size(); ++v) {
    const auto t = to_tensor<float>(views[v]);
    if (t.size() != spec.input_shape().size()) {
      throw Error(ErrorCode::Shape, "input: channel count does not match the network");
    }
    const auto out = engine.run(params, t);
    probs.push_back({out[0], out[1], out[2]});
    weights.push_back(proposals.empty() ? 1.0 : proposals[v].objectness);
  }
  return make_prediction(aggregate(probs, weights));
}

#define CIVICLENS_INSTANTIATE(T)                                                                            \
  template struct Parameters<T>;                                                                            \
  template Parameters<T> zero_parameters<T>(const NetworkSpec&);                                            \
  template Parameters<T> he_initialize<T>(const NetworkSpec&, std::uint64_t);                               \
  template void check_parameters<T>(const NetworkSpec&, const Parameters<T>&);                              \
  template std::vector<T> to_tensor<T>(const imaging::RasterImage&);                                        \
  template Probabilities forward<T>(const NetworkSpec&, const Parameters<T>&, std::span<const T>);          \
  template LossAndGradients<T> loss_and_gradients<T>(const NetworkSpec&, const Parameters<T>&,              \
                                                     std::span<const LabeledTensor<T>>);

CIVICLENS_INSTANTIATE(float)
CIVICLENS_INSTANTIATE(double)
#undef CIVICLENS_INSTANTIATE

template Parameters<double> convert<double, float>(const Parameters<float>&);
template Parameters<float> convert<float, double>(const Parameters<double>&);

}  // namespace civiclens::model
