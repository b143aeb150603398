#include <bit>
#include <chrono>
#include <cmath>
#include <map>
#include <mutex>
#include <numeric>
#include <random>
#include <tuple>

#include <spdlog/spdlog.h>

#include "civiclens/corpus.hpp"
#include "civiclens/error.hpp"
#include "civiclens/model.hpp"
#include "civiclens/rng.hpp"
#include "engine.hpp"
#include "parallel.hpp"

namespace civiclens::model {

namespace {

void tensor_from_compact(const CompactImage& img, std::vector<float>& out) {
  const std::size_t plane = static_cast<std::size_t>(img.size) * img.size;
  out.resize(plane * img.channels);
  for (std::size_t px = 0; px < plane; ++px) {
    for (int c = 0; c < img.channels; ++c) out[c * plane + px] = img.hwc[px * img.channels + c];
  }
}

void tensor_from_raster(const imaging::RasterImage& img, std::vector<float>& out) {
  const std::size_t plane = static_cast<std::size_t>(img.width) * img.height;
  out.resize(plane * img.channels);
  for (std::size_t px = 0; px < plane; ++px) {
    for (int c = 0; c < img.channels; ++c) {
      out[c * plane + px] = static_cast<float>(img.pixels[px * img.channels + c]);
    }
  }
}

void require_square_input(const NetworkSpec& spec) {
  if (spec.input_height != spec.input_width) throw Error(ErrorCode::Shape, "network input must be square");
}

// Ground-truth boxes are stored in the corpus image frame; the standardized
// image may be a different size.
BoundingBox rescale_box(const BoundingBox& b, int from, int to) {
  if (from == to) return b;
  const double s = static_cast<double>(to) / from;
  BoundingBox r{static_cast<int>(std::floor(b.x * s)), static_cast<int>(std::floor(b.y * s)), 0, 0};
  r.w = std::max(1, std::min(to - r.x, static_cast<int>(std::ceil((b.x + b.w) * s)) - r.x));
  r.h = std::max(1, std::min(to - r.y, static_cast<int>(std::ceil((b.y + b.h) * s)) - r.y));
  return r;
}

}  // namespace

void TrainConfig::validate() const {
  std::string bad;
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) bad += " learning_rate";
  if (batch_size < 1) bad += " batch_size";
  if (epochs < 1) bad += " epochs";
  if (!(max_loss > 0.0)) bad += " max_loss";
  if (augment.enabled && !(augment.zoom_min >= 1.0 && augment.zoom_min <= augment.zoom_max && augment.zoom_max <= 2.0)) {
    bad += " zoom_range";
  }
  if (!(augment.region_view_rate >= 0.0 && augment.region_view_rate <= 1.0)) bad += " region_view_rate";
  if (!bad.empty()) throw Error(ErrorCode::Validation, "invalid training config:" + bad);
}

CompactImage CompactImage::from(const imaging::RasterImage& img) {
  if (img.width != img.height) throw Error(ErrorCode::InvalidImage, "compact image must be square");
  if (img.domain != imaging::ValueDomain::Unit) throw Error(ErrorCode::Precondition, "compact image must be unit-domain");
  CompactImage out;
  out.size = img.width;
  out.channels = img.channels;
  out.hwc.assign(img.pixels.begin(), img.pixels.end());
  return out;
}

imaging::RasterImage CompactImage::to_raster() const {
  imaging::RasterImage img(size, size, channels, imaging::ValueDomain::Unit);
  std::copy(hwc.begin(), hwc.end(), img.pixels.begin());
  return img;
}

TrainResult train(const NetworkSpec& spec, std::span<const TrainingExample> examples, const TrainConfig& config,
                  const EpochCallback& on_epoch) {
  config.validate();
  if (examples.empty()) throw Error(ErrorCode::Precondition, "training set is empty");
  const std::size_t expected = spec.input_shape().size();
  for (const auto& ex : examples) {
    if (ex.label < 0 || ex.label >= kNumClasses) {
      throw Error(ErrorCode::InvalidLabel, "label " + std::to_string(ex.label) + " outside {0,1,2}");
    }
    if (ex.views.empty()) throw Error(ErrorCode::Precondition, "training example without views");
    for (const auto& v : ex.views) {
      if (v.size != spec.input_height || v.size != spec.input_width || v.channels != spec.input_channels ||
          v.hwc.size() != expected) {
        throw Error(ErrorCode::Shape, "input: training view does not match the network input shape");
      }
    }
  }

  TrainResult result;
  result.params = he_initialize<float>(spec, derive_seed(config.seed, 0x1417));
  Parameters<float> grads = zero_parameters<float>(spec);
  detail::Engine<float> engine(spec);
  const AugmentPolicy& aug = config.augment;

  std::vector<std::size_t> order(examples.size());
  std::vector<float> input;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::mt19937_64 rng(derive_seed(config.seed, static_cast<std::uint64_t>(epoch)));
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);

    double loss_sum = 0.0;
    std::size_t correct = 0;
    int batch_no = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      ++batch_no;
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      for (auto& l : grads.layers) {
        std::fill(l.weights.begin(), l.weights.end(), 0.0f);
        std::fill(l.bias.begin(), l.bias.end(), 0.0f);
      }
      double batch_loss = 0.0;
      for (std::size_t j = start; j < stop; ++j) {
        const TrainingExample& ex = examples[order[j]];
        std::uniform_real_distribution<double> unit(0.0, 1.0);
        std::size_t view = 0;
        if (ex.views.size() > 1 && unit(rng) < aug.region_view_rate) {
          view = 1 + static_cast<std::size_t>(rng() % (ex.views.size() - 1));
        }
        imaging::AugmentSpec a;
        if (aug.enabled) {
          if (aug.quarter_turns) a.quarter_turns = static_cast<int>(rng() % 4);
          if (aug.flips) {
            a.flip_horizontal = (rng() & 1) != 0;
            a.flip_vertical = (rng() & 1) != 0;
          }
          a.zoom_factor = aug.zoom_min + (aug.zoom_max - aug.zoom_min) * unit(rng);
        }
        if (a.is_identity()) {
          tensor_from_compact(ex.views[view], input);
        } else {
          tensor_from_raster(imaging::augment(ex.views[view].to_raster(), a, {}).first, input);
        }
        const auto p = engine.run(result.params, input);
        batch_loss += engine.loss(ex.label);
        if (std::max_element(p.begin(), p.end()) - p.begin() == ex.label) ++correct;
        engine.backward(result.params, ex.label, grads);
      }
      if (!std::isfinite(batch_loss)) {
        throw Error(ErrorCode::TrainingDiverged,
                    "loss is not finite at epoch " + std::to_string(epoch) + " batch " + std::to_string(batch_no));
      }
      if (batch_loss / static_cast<double>(stop - start) > config.max_loss) {
        throw Error(ErrorCode::TrainingDiverged, "loss blew up (" + std::to_string(batch_loss / (stop - start)) +
                                                     ") at epoch " + std::to_string(epoch) + " batch " +
                                                     std::to_string(batch_no));
      }
      loss_sum += batch_loss;
      const float step = static_cast<float>(config.learning_rate / static_cast<double>(stop - start));
      for (std::size_t li = 0; li < grads.layers.size(); ++li) {
        auto& w = result.params.layers[li];
        const auto& g = grads.layers[li];
        for (std::size_t k = 0; k < w.weights.size(); ++k) w.weights[k] -= step * g.weights[k];
        for (std::size_t k = 0; k < w.bias.size(); ++k) w.bias[k] -= step * g.bias[k];
      }
    }
    if (!result.params.all_finite()) {
      throw Error(ErrorCode::TrainingDiverged,
                  "parameters overflowed at epoch " + std::to_string(epoch) + " batch " + std::to_string(batch_no));
    }
    EpochStats stats{epoch, loss_sum / static_cast<double>(examples.size()),
                     static_cast<double>(correct) / static_cast<double>(examples.size())};
    result.history.push_back(stats);
    if (on_epoch) on_epoch(stats, result.params);
  }
  return result;
}

std::vector<TrainingExample> build_training_examples(const corpus::DatasetManifest& manifest, const NetworkSpec& spec,
                                                     double blur_sigma, int max_region_views) {
  require_square_input(spec);
  const int input = spec.input_height;
  std::vector<TrainingExample> out(manifest.size());
  civiclens::detail::parallel_for(manifest.size(), [&](std::size_t i) {
    const auto& rec = manifest.records[i];
    const auto raw = imaging::read_pnm(manifest.image_file(rec));
    const auto pre = imaging::equalize_exposure(imaging::preprocess(raw, imaging::kStandardSize, blur_sigma));
    TrainingExample ex;
    ex.label = class_index(rec.cls);
    ex.views.push_back(CompactImage::from(imaging::resize_to_standard(pre, input)));
    const int frame = std::min(raw.width, raw.height);
    for (int r = 0; r < static_cast<int>(rec.regions.size()) && r < max_region_views; ++r) {
      const auto box = rescale_box(rec.regions[r].bbox, frame, imaging::kStandardSize);
      if (!box.fits(pre.width, pre.height)) continue;
      ex.views.push_back(CompactImage::from(imaging::resize_to_standard(imaging::crop(pre, box), input)));
    }
    out[i] = std::move(ex);
  });
  return out;
}

TrainResult train(const NetworkSpec& spec, const corpus::DatasetManifest& dataset, const TrainConfig& config,
                  double blur_sigma) {
  if (dataset.empty()) throw Error(ErrorCode::Precondition, "training manifest is empty");
  const auto examples = build_training_examples(dataset, spec, blur_sigma);
  return train(spec, examples, config);
}

std::vector<EvalExample> build_eval_examples(const corpus::DatasetManifest& manifest, const NetworkSpec& spec,
                                             const regions::ProposerSettings& proposer, double blur_sigma) {
  require_square_input(spec);
  std::vector<EvalExample> out(manifest.size());
  civiclens::detail::parallel_for(manifest.size(), [&](std::size_t i) {
    const auto& rec = manifest.records[i];
    const auto pre =
        imaging::preprocess(imaging::read_pnm(manifest.image_file(rec)), imaging::kStandardSize, blur_sigma);
    // proposer sees raw exposure; the classifier sees what it was trained on
    const auto props = regions::propose_regions(pre, proposer);
    EvalExample ex;
    ex.label = class_index(rec.cls);
    for (auto& v : case_views(spec, imaging::equalize_exposure(pre), props)) ex.views.push_back(CompactImage::from(v));
    if (props.empty()) {
      ex.weights = {1.0};
    } else {
      for (const auto& p : props) ex.weights.push_back(p.objectness);
    }
    out[i] = std::move(ex);
  });
  return out;
}

namespace {

Prediction predict_with(detail::Engine<float>& engine, const Parameters<float>& params, const EvalExample& ex,
                        std::vector<float>& buf) {
  std::vector<Probabilities> probs;
  probs.reserve(ex.views.size());
  for (const auto& v : ex.views) {
    tensor_from_compact(v, buf);
    const auto out = engine.run(params, buf);
    probs.push_back({out[0], out[1], out[2]});
  }
  return make_prediction(aggregate(probs, ex.weights));
}

}  // namespace

Prediction predict_example(const NetworkSpec& spec, const Parameters<float>& params, const EvalExample& ex) {
  check_parameters(spec, params);
  detail::Engine<float> engine(spec);
  std::vector<float> buf;
  return predict_with(engine, params, ex, buf);
}

std::vector<Prediction> predict_all(const NetworkSpec& spec, const Parameters<float>& params,
                                    std::span<const EvalExample> examples) {
  check_parameters(spec, params);
  const std::size_t expected = spec.input_shape().size();
  for (const auto& ex : examples) {
    for (const auto& v : ex.views) {
      if (v.hwc.size() != expected) throw Error(ErrorCode::Shape, "input: evaluation view does not match the network");
    }
  }
  std::vector<Prediction> out(examples.size());
  const unsigned workers = civiclens::detail::worker_count(examples.size());
  civiclens::detail::parallel_for(workers, [&](std::size_t w) {
    detail::Engine<float> engine(spec);
    std::vector<float> buf;
    for (std::size_t i = w; i < examples.size(); i += workers) out[i] = predict_with(engine, params, examples[i], buf);
  });
  return out;
}

double accuracy(const NetworkSpec& spec, const Parameters<float>& params, std::span<const EvalExample> examples) {
  if (examples.empty()) throw Error(ErrorCode::EmptyEvaluation, "no examples to evaluate");
  const auto preds = predict_all(spec, params, examples);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (class_index(preds[i].cls) == examples[i].label) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(examples.size());
}

std::uint64_t cell_seed(std::uint64_t base_seed, double learning_rate, int batch_size) noexcept {
  return derive_seed(derive_seed(base_seed, std::bit_cast<std::uint64_t>(learning_rate)),
                     static_cast<std::uint64_t>(batch_size));
}

std::optional<std::size_t> select_best(std::span<const GridCell> table) {
  std::optional<std::size_t> best;
  auto key = [&](std::size_t i) {
    const auto& c = table[i];
    return std::make_tuple(-c.val_accuracy, c.config.epochs, c.config.batch_size, c.config.learning_rate, i);
  };
  for (std::size_t i = 0; i < table.size(); ++i) {
    if (table[i].failed) continue;
    if (!best || key(i) < key(*best)) best = i;
  }
  return best;
}

GridResult grid_search(const GridSpace& space, const NetworkSpec& spec, std::span<const TrainingExample> train_set,
                       std::span<const EvalExample> val_set, const TrainConfig& base, const GridProgress& progress) {
  if (space.learning_rates.empty() || space.batch_sizes.empty() || space.epoch_counts.empty()) {
    throw Error(ErrorCode::Validation, "grid space lists must be non-empty");
  }
  if (train_set.empty() || val_set.empty()) throw Error(ErrorCode::Precondition, "grid search needs non-empty sets");

  GridResult result;
  for (double lr : space.learning_rates) {
    for (int bs : space.batch_sizes) {
      for (int ep : space.epoch_counts) {
        GridCell cell;
        cell.config = base;
        cell.config.learning_rate = lr;
        cell.config.batch_size = bs;
        cell.config.epochs = ep;
        cell.config.seed = cell_seed(base.seed, lr, bs);
        cell.config.validate();
        result.table.push_back(cell);
      }
    }
  }

  // Cells sharing (lr, batch) share a seed, so a shorter run is a prefix of
  // the longest one; train each trajectory once and snapshot.
  std::map<std::pair<double, int>, std::vector<std::size_t>> groups;
  std::vector<std::pair<double, int>> group_order;
  for (std::size_t i = 0; i < result.table.size(); ++i) {
    const auto key = std::make_pair(result.table[i].config.learning_rate, result.table[i].config.batch_size);
    auto [it, inserted] = groups.try_emplace(key);
    if (inserted) group_order.push_back(key);
    it->second.push_back(i);
  }

  std::vector<Parameters<float>> snapshots(result.table.size());
  std::mutex mu;
  civiclens::detail::parallel_for(group_order.size(), [&](std::size_t g) {
    const auto& cells = groups.at(group_order[g]);
    int longest = 0;
    for (auto i : cells) longest = std::max(longest, result.table[i].config.epochs);
    TrainConfig cfg = result.table[cells.front()].config;
    cfg.epochs = longest;
    const auto t0 = std::chrono::steady_clock::now();
    auto report = [&](std::size_t i) {
      std::lock_guard lock(mu);
      if (progress) progress(result.table[i]);
    };
    int reached = 0;
    try {
      train(spec, train_set, cfg, [&](const EpochStats& stats, const Parameters<float>& params) {
        reached = stats.epoch;
        bool wanted = false;
        for (auto i : cells) wanted = wanted || result.table[i].config.epochs == stats.epoch;
        if (!wanted) return;
        const double acc = accuracy(spec, params, val_set);
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        for (auto i : cells) {
          if (result.table[i].config.epochs != stats.epoch) continue;
          result.table[i].val_accuracy = acc;
          result.table[i].seconds = secs;
          snapshots[i] = params;
          report(i);
        }
      });
    } catch (const Error& e) {
      if (e.code() != ErrorCode::TrainingDiverged) throw;
      for (auto i : cells) {
        if (result.table[i].config.epochs <= reached) continue;
        result.table[i].failed = true;
        result.table[i].failure = e.what();
        report(i);
      }
    }
  });

  const auto best = select_best(result.table);
  if (!best) throw Error(ErrorCode::NoViableConfig, "every grid cell diverged");
  result.best_index = *best;
  result.best = result.table[*best].config;
  result.best_params = std::move(snapshots[*best]);
  return result;
}

}  // namespace civiclens::model
