#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "civiclens/imaging.hpp"
#include "civiclens/regions.hpp"
#include "civiclens/types.hpp"

namespace civiclens::corpus {
struct DatasetManifest;
}

namespace civiclens::model {

// ---------------------------------------------------------------------------
// Architecture

/// Cross-correlation with zero padding, optional ReLU.
struct ConvLayer {
  int out_channels = 8;
  int kernel = 3;  // odd
  int stride = 1;
  int padding = 1;
  bool relu = true;
  friend bool operator==(const ConvLayer&, const ConvLayer&) = default;
};

struct MaxPoolLayer {
  int window = 2;
  int stride = 2;
  friend bool operator==(const MaxPoolLayer&, const MaxPoolLayer&) = default;
};

struct FlattenLayer {
  friend bool operator==(const FlattenLayer&, const FlattenLayer&) = default;
};

struct DenseLayer {
  int units = 3;
  bool relu = false;
  friend bool operator==(const DenseLayer&, const DenseLayer&) = default;
};

struct SoftmaxOutput {
  friend bool operator==(const SoftmaxOutput&, const SoftmaxOutput&) = default;
};

using LayerSpec = std::variant<ConvLayer, MaxPoolLayer, FlattenLayer, DenseLayer, SoftmaxOutput>;

std::string describe(const LayerSpec& layer);

/// Activation shape, channel-major (C, H, W). Flat vectors use c = n, h = w = 1.
struct Shape {
  int c = 0, h = 0, w = 0;
  std::size_t size() const noexcept { return static_cast<std::size_t>(c) * h * w; }
  friend bool operator==(const Shape&, const Shape&) = default;
};

struct NetworkSpec {
  int input_height = 64;
  int input_width = 64;
  int input_channels = 3;
  std::vector<LayerSpec> layers;

  Shape input_shape() const noexcept { return {input_channels, input_height, input_width}; }

  /// Output shape of every layer. Throws Error(Shape) naming the first layer
  /// whose input it cannot accept, or if the network does not end in a
  /// 3-way SoftmaxOutput.
  std::vector<Shape> propagate() const;

  /// Conv(8,3x3)/relu -> MaxPool(2) -> Conv(16,3x3)/relu -> MaxPool(2) ->
  /// Flatten -> Dense(32)/relu -> Dense(3) -> Softmax.
  static NetworkSpec reference(int input_size = 64);

  friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

template <typename T>
struct LayerParams {
  std::vector<T> weights;  // conv: [out][in][k][k]; dense: [units][inputs]
  std::vector<T> bias;
  friend bool operator==(const LayerParams&, const LayerParams&) = default;
};

/// One entry per layer in the spec; non-parametric layers hold empty arrays.
template <typename T>
struct Parameters {
  std::vector<LayerParams<T>> layers;

  std::size_t count() const noexcept;
  bool all_finite() const noexcept;
  friend bool operator==(const Parameters&, const Parameters&) = default;
};

/// Zero-filled parameters with the shapes the spec requires.
template <typename T>
Parameters<T> zero_parameters(const NetworkSpec& spec);

/// He-normal weights (std = sqrt(2 / fan_in)), zero biases.
template <typename T>
Parameters<T> he_initialize(const NetworkSpec& spec, std::uint64_t seed);

/// Throws Error(Shape) if params do not match the spec.
template <typename T>
void check_parameters(const NetworkSpec& spec, const Parameters<T>& params);

template <typename To, typename From>
Parameters<To> convert(const Parameters<From>& p);

// ---------------------------------------------------------------------------
// Forward / backward

/// Channel-major tensor of the image (must be square-standardized to the
/// spec input already; no resampling happens here).
template <typename T>
std::vector<T> to_tensor(const imaging::RasterImage& img);

using Probabilities = std::array<double, kNumClasses>;

template <typename T>
Probabilities forward(const NetworkSpec& spec, const Parameters<T>& params, std::span<const T> input);

template <typename T>
struct LabeledTensor {
  std::vector<T> input;
  int label = 0;
};

template <typename T>
struct LossAndGradients {
  double loss = 0.0;
  Parameters<T> grads;
  std::size_t correct = 0;  // argmax hits in the batch, as a by-product
};

/// Mean categorical cross-entropy over the batch and its exact gradient.
template <typename T>
LossAndGradients<T> loss_and_gradients(const NetworkSpec& spec, const Parameters<T>& params,
                                       std::span<const LabeledTensor<T>> batch);

// ---------------------------------------------------------------------------
// Predictions

struct Prediction {
  IssueClass cls = IssueClass::InfrastructureDamage;
  double confidence = 0.0;
  Probabilities probabilities{};
};

/// argmax with lowest-index tie-break; confidence = max probability.
Prediction make_prediction(const Probabilities& p);

/// Objectness-weighted mean of per-view probability vectors, renormalized.
/// Zero total weight falls back to an unweighted mean.
Probabilities aggregate(std::span<const Probabilities> per_view, std::span<const double> weights);

/// Classifies each proposal's crop (or the whole image when there are none)
/// and aggregates. img is a standardized unit-domain image.
Prediction predict_case(const NetworkSpec& spec, const Parameters<float>& params, const imaging::RasterImage& img,
                        std::span<const regions::RegionProposal> proposals);

/// Model-input views used by predict_case: one per proposal, or the whole image.
std::vector<imaging::RasterImage> case_views(const NetworkSpec& spec, const imaging::RasterImage& img,
                                             std::span<const regions::RegionProposal> proposals);

// ---------------------------------------------------------------------------
// Training

struct AugmentPolicy {
  bool enabled = true;
  bool quarter_turns = true;
  bool flips = true;
  double zoom_min = 1.0;
  double zoom_max = 1.5;
  /// Chance of training on a ground-truth region crop instead of the whole
  /// frame, so the classifier sees the same kind of input predict_case feeds it.
  double region_view_rate = 0.5;

  static AugmentPolicy none() { return {false, false, false, 1.0, 1.0, 0.0}; }
};

struct TrainConfig {
  double learning_rate = 0.01;
  int batch_size = 16;
  int epochs = 10;
  std::uint64_t seed = 1;
  AugmentPolicy augment;
  // Mean per-example batch loss (nats) treated as a blow-up. The loss is
  // computed stably, so a runaway net can stay finite for many epochs.
  double max_loss = 1e3;

  void validate() const;
};

/// Float copy of a square unit-domain raster at model input size.
struct CompactImage {
  int size = 0;
  int channels = 3;
  std::vector<float> hwc;

  static CompactImage from(const imaging::RasterImage& img);
  imaging::RasterImage to_raster() const;
};

/// views[0] is the whole frame; later views are ground-truth region crops.
struct TrainingExample {
  std::vector<CompactImage> views;
  int label = 0;
};

struct EpochStats {
  int epoch = 0;
  double loss = 0.0;
  double accuracy = 0.0;
};

struct TrainResult {
  Parameters<float> params;
  std::vector<EpochStats> history;
};

using EpochCallback = std::function<void(const EpochStats&, const Parameters<float>&)>;

/// He-init, per-epoch seeded shuffle, online augmentation, plain minibatch
/// gradient descent. Throws Error(TrainingDiverged) on a non-finite loss or one
/// above config.max_loss.
TrainResult train(const NetworkSpec& spec, std::span<const TrainingExample> examples, const TrainConfig& config,
                  const EpochCallback& on_epoch = {});

/// Loads, preprocesses and downsizes every record of a manifest.
std::vector<TrainingExample> build_training_examples(const corpus::DatasetManifest& manifest, const NetworkSpec& spec,
                                                     double blur_sigma = 1.0, int max_region_views = 2);

TrainResult train(const NetworkSpec& spec, const corpus::DatasetManifest& dataset, const TrainConfig& config,
                  double blur_sigma = 1.0);

// ---------------------------------------------------------------------------
// Evaluation

/// Precomputed predict_case inputs for one labeled image.
struct EvalExample {
  std::vector<CompactImage> views;
  std::vector<double> weights;
  int label = 0;
};

std::vector<EvalExample> build_eval_examples(const corpus::DatasetManifest& manifest, const NetworkSpec& spec,
                                             const regions::ProposerSettings& proposer = {}, double blur_sigma = 1.0);

Prediction predict_example(const NetworkSpec& spec, const Parameters<float>& params, const EvalExample& ex);

std::vector<Prediction> predict_all(const NetworkSpec& spec, const Parameters<float>& params,
                                    std::span<const EvalExample> examples);

double accuracy(const NetworkSpec& spec, const Parameters<float>& params, std::span<const EvalExample> examples);

// ---------------------------------------------------------------------------
// Grid search

struct GridSpace {
  std::vector<double> learning_rates;
  std::vector<int> batch_sizes;
  std::vector<int> epoch_counts;

  static GridSpace defaults() { return {{0.003, 0.01, 0.03}, {16, 32}, {10, 30}}; }
  std::size_t cells() const noexcept { return learning_rates.size() * batch_sizes.size() * epoch_counts.size(); }
};

struct GridCell {
  TrainConfig config;
  double val_accuracy = 0.0;
  bool failed = false;
  std::string failure;
  double seconds = 0.0;
};

struct GridResult {
  std::size_t best_index = 0;
  TrainConfig best;
  Parameters<float> best_params;
  std::vector<GridCell> table;  // learning rate major, then batch, then epochs
};

/// Seed for a cell; depends on (lr, batch) only so cells differing in epoch
/// count share a training trajectory.
std::uint64_t cell_seed(std::uint64_t base_seed, double learning_rate, int batch_size) noexcept;

/// Index of the best successful cell: highest accuracy, then fewer epochs,
/// smaller batch, smaller learning rate, then table order.
std::optional<std::size_t> select_best(std::span<const GridCell> table);

using GridProgress = std::function<void(const GridCell&)>;

/// Trains every cell of the Cartesian product (cells that differ only in
/// epoch count are read off one run at the matching epochs) and selects the
/// best by validation accuracy. Throws Error(NoViableConfig) if all fail.
GridResult grid_search(const GridSpace& space, const NetworkSpec& spec, std::span<const TrainingExample> train_set,
                       std::span<const EvalExample> val_set, const TrainConfig& base, const GridProgress& progress = {});

// ---------------------------------------------------------------------------
// Checkpoints: "CLCK" magic, version byte, spec, little-endian float32
// arrays, trailing CRC-32 of everything before it.

inline constexpr std::uint8_t kCheckpointVersion = 1;

std::vector<std::uint8_t> encode_checkpoint(const NetworkSpec& spec, const Parameters<float>& params);
std::pair<NetworkSpec, Parameters<float>> decode_checkpoint(std::span<const std::uint8_t> bytes);

void checkpoint_save(const NetworkSpec& spec, const Parameters<float>& params, const std::filesystem::path& path);
std::pair<NetworkSpec, Parameters<float>> checkpoint_load(const std::filesystem::path& path);

}  // namespace civiclens::model
