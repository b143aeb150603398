#pragma once

// Naive reference for the evaluation arithmetic: recounts everything from
// the raw label lists with no shared code.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "civiclens/metrics.hpp"

namespace civiclens::testing {

struct OracleReport {
  std::vector<std::vector<std::uint64_t>> cells;
  double accuracy = 0;
  std::vector<double> precision, recall, f1;
  std::vector<std::uint64_t> support;
  double macro_p = 0, macro_r = 0, macro_f1 = 0;
};

inline OracleReport oracle_report(const std::vector<int>& truths, const std::vector<int>& preds, int k) {
  OracleReport o;
  o.cells.assign(k, std::vector<std::uint64_t>(k, 0));
  for (int t = 0; t < k; ++t)
    for (int p = 0; p < k; ++p)
      for (std::size_t i = 0; i < truths.size(); ++i) o.cells[t][p] += truths[i] == t && preds[i] == p;
  std::uint64_t correct = 0;
  for (std::size_t i = 0; i < truths.size(); ++i) correct += truths[i] == preds[i];
  o.accuracy = truths.empty() ? 0.0 : static_cast<double>(correct) / truths.size();
  for (int c = 0; c < k; ++c) {
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < truths.size(); ++i) {
      tp += truths[i] == c && preds[i] == c;
      fp += truths[i] != c && preds[i] == c;
      fn += truths[i] == c && preds[i] != c;
    }
    const double p = tp + fp > 0 ? tp / (tp + fp) : 0.0;
    const double r = tp + fn > 0 ? tp / (tp + fn) : 0.0;
    o.precision.push_back(p);
    o.recall.push_back(r);
    o.f1.push_back(p + r > 0 ? 2 * p * r / (p + r) : 0.0);
    o.support.push_back(static_cast<std::uint64_t>(tp + fn));
    o.macro_p += p / k;
    o.macro_r += r / k;
    o.macro_f1 += o.f1.back() / k;
  }
  return o;
}

/// Empty string when the library agrees with the oracle to tol, else the
/// first disagreement.
inline std::string compare_with_oracle(const std::vector<int>& truths, const std::vector<int>& preds, int k,
                                       double tol) {
  const auto o = oracle_report(truths, preds, k);
  const auto cm = metrics::confusion_matrix(truths, preds, k);
  for (int t = 0; t < k; ++t)
    for (int p = 0; p < k; ++p)
      if (cm.at(t, p) != o.cells[t][p]) return "cell " + std::to_string(t) + "," + std::to_string(p);
  if (truths.empty()) return {};
  const auto r = metrics::classification_report(cm);
  auto off = [&](double a, double b) { return !(std::abs(a - b) <= tol); };
  if (r.total != truths.size()) return "total";
  if (off(r.accuracy, o.accuracy)) return "accuracy";
  for (int c = 0; c < k; ++c) {
    const auto& m = r.per_class[c];
    if (off(m.precision, o.precision[c])) return "precision " + std::to_string(c);
    if (off(m.recall, o.recall[c])) return "recall " + std::to_string(c);
    if (off(m.f1, o.f1[c])) return "f1 " + std::to_string(c);
    if (m.support != o.support[c]) return "support " + std::to_string(c);
  }
  if (off(r.macro_precision, o.macro_p) || off(r.macro_recall, o.macro_r) || off(r.macro_f1, o.macro_f1)) return "macro";
  return {};
}

/// Random label set; skewed so some classes are rare or absent.
inline void random_labels(std::mt19937_64& rng, int k, std::vector<int>& truths, std::vector<int>& preds) {
  const std::size_t n = 1 + rng() % 400;
  truths.resize(n);
  preds.resize(n);
  const double agree = (rng() % 1000) / 1000.0;
  const int span_t = 1 + static_cast<int>(rng() % k);
  for (std::size_t i = 0; i < n; ++i) {
    truths[i] = static_cast<int>(rng() % span_t);
    preds[i] = (rng() % 1000) / 1000.0 < agree ? truths[i] : static_cast<int>(rng() % k);
  }
}

}  // namespace civiclens::testing
