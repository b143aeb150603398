#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace civiclens::metrics {

/// Rows are true classes, columns predicted classes.
struct ConfusionMatrix {
  int k = 0;
  std::vector<std::uint64_t> counts;  // k * k, row-major

  explicit ConfusionMatrix(int classes = 0);
  std::uint64_t& at(int truth, int pred) { return counts[static_cast<std::size_t>(truth) * k + pred]; }
  std::uint64_t at(int truth, int pred) const { return counts[static_cast<std::size_t>(truth) * k + pred]; }
  std::uint64_t total() const noexcept;
  std::uint64_t trace() const noexcept;
  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;
};

/// Throws Error(Validation) on length mismatch or labels outside [0, k).
ConfusionMatrix confusion_matrix(std::span<const int> truths, std::span<const int> preds, int k);

struct ClassMetrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::uint64_t support = 0;  // true instances
  // Set when the value came from a 0/0 and was defined as 0.
  bool precision_degenerate = false;
  bool recall_degenerate = false;
  bool f1_degenerate = false;
};

struct ClassificationReport {
  std::uint64_t total = 0;
  double accuracy = 0.0;
  std::vector<ClassMetrics> per_class;
  double macro_precision = 0.0;
  double macro_recall = 0.0;
  double macro_f1 = 0.0;

  bool degenerate() const noexcept;
};

/// Harmonic mean; 0 when both inputs are 0.
double f1_score(double precision, double recall) noexcept;

/// Throws Error(EmptyEvaluation) when the matrix holds no samples.
ClassificationReport classification_report(const ConfusionMatrix& cm);

/// (manual - automated) / manual. Throws Error(InvalidParameter) for
/// manual <= 0 or automated < 0, Error(NegativeGain) if automated > manual.
double efficiency_gain(double manual_seconds, double automated_seconds);

/// Round-half-up to an integer percent (0.90497 -> 90, 0.905 -> 91).
int percent(double fraction) noexcept;

/// Fixed-width table for terminals. names[i] labels class i.
std::string format_report(const ClassificationReport& r, const ConfusionMatrix& cm,
                          std::span<const std::string> names);

/// One JSON object per line: a summary line, then one per class, then the matrix.
std::string report_to_jsonl(const ClassificationReport& r, const ConfusionMatrix& cm,
                            std::span<const std::string> names);

}  // namespace civiclens::metrics
