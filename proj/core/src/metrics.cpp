#include "civiclens/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "civiclens/error.hpp"

namespace civiclens::metrics {

namespace {

// 0/0 is defined as 0 and reported through *degenerate.
double ratio(std::uint64_t num, std::uint64_t den, bool* degenerate) {
  if (den == 0) {
    *degenerate = true;
    return 0.0;
  }
  return static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

ConfusionMatrix::ConfusionMatrix(int classes) : k(classes) {
  if (classes < 0) throw Error(ErrorCode::Validation, "class count must be non-negative");
  counts.assign(static_cast<std::size_t>(classes) * classes, 0);
}

std::uint64_t ConfusionMatrix::total() const noexcept {
  return std::accumulate(counts.begin(), counts.end(), std::uint64_t{0});
}

std::uint64_t ConfusionMatrix::trace() const noexcept {
  std::uint64_t t = 0;
  for (int i = 0; i < k; ++i) t += at(i, i);
  return t;
}

ConfusionMatrix confusion_matrix(std::span<const int> truths, std::span<const int> preds, int k) {
  if (k < 1) throw Error(ErrorCode::Validation, "class count must be >= 1");
  if (truths.size() != preds.size()) {
    throw Error(ErrorCode::Validation, "length mismatch: " + std::to_string(truths.size()) + " truths vs " +
                                           std::to_string(preds.size()) + " predictions");
  }
  ConfusionMatrix cm(k);
  for (std::size_t i = 0; i < truths.size(); ++i) {
    if (truths[i] < 0 || truths[i] >= k || preds[i] < 0 || preds[i] >= k) {
      throw Error(ErrorCode::Validation, "label out of range at index " + std::to_string(i));
    }
    ++cm.at(truths[i], preds[i]);
  }
  return cm;
}

bool ClassificationReport::degenerate() const noexcept {
  for (const auto& c : per_class) {
    if (c.precision_degenerate || c.recall_degenerate || c.f1_degenerate) return true;
  }
  return false;
}

double f1_score(double precision, double recall) noexcept {
  const double s = precision + recall;
  return s > 0.0 ? 2.0 * precision * recall / s : 0.0;
}

ClassificationReport classification_report(const ConfusionMatrix& cm) {
  ClassificationReport r;
  r.total = cm.total();
  if (r.total == 0) throw Error(ErrorCode::EmptyEvaluation, "confusion matrix holds no samples");
  r.accuracy = static_cast<double>(cm.trace()) / static_cast<double>(r.total);
  r.per_class.resize(static_cast<std::size_t>(cm.k));
  for (int c = 0; c < cm.k; ++c) {
    std::uint64_t predicted = 0, actual = 0;
    for (int j = 0; j < cm.k; ++j) {
      predicted += cm.at(j, c);
      actual += cm.at(c, j);
    }
    const std::uint64_t tp = cm.at(c, c);
    auto& m = r.per_class[static_cast<std::size_t>(c)];
    m.support = actual;
    m.precision = ratio(tp, predicted, &m.precision_degenerate);
    m.recall = ratio(tp, actual, &m.recall_degenerate);
    m.f1_degenerate = m.precision + m.recall == 0.0;
    m.f1 = f1_score(m.precision, m.recall);
    r.macro_precision += m.precision;
    r.macro_recall += m.recall;
    r.macro_f1 += m.f1;
  }
  r.macro_precision /= cm.k;
  r.macro_recall /= cm.k;
  r.macro_f1 /= cm.k;
  return r;
}

double efficiency_gain(double manual_seconds, double automated_seconds) {
  if (!(manual_seconds > 0.0) || !std::isfinite(manual_seconds)) {
    throw Error(ErrorCode::InvalidParameter, "manual time must be positive");
  }
  if (!(automated_seconds >= 0.0) || !std::isfinite(automated_seconds)) {
    throw Error(ErrorCode::InvalidParameter, "automated time must be non-negative");
  }
  if (automated_seconds > manual_seconds) {
    throw Error(ErrorCode::NegativeGain, "automated time exceeds manual time");
  }
  return (manual_seconds - automated_seconds) / manual_seconds;
}

int percent(double fraction) noexcept {
  // The small nudge keeps products like 0.905 * 100 = 90.49999... on the
  // half-up side.
  return static_cast<int>(std::floor(fraction * 100.0 + 0.5 + 1e-9));
}

std::string format_report(const ClassificationReport& r, const ConfusionMatrix& cm,
                          std::span<const std::string> names) {
  std::ostringstream os;
  char line[256];
  std::snprintf(line, sizeof line, "%-28s %9s %9s %9s %9s\n", "class", "precision", "recall", "f1", "support");
  os << line;
  for (std::size_t c = 0; c < r.per_class.size(); ++c) {
    const auto& m = r.per_class[c];
    const std::string name = c < names.size() ? names[c] : std::to_string(c);
    std::snprintf(line, sizeof line, "%-28s %8d%% %8d%% %8d%% %9llu%s\n", name.c_str(), percent(m.precision),
                  percent(m.recall), percent(m.f1), static_cast<unsigned long long>(m.support),
                  (m.precision_degenerate || m.recall_degenerate) ? "  (0/0)" : "");
    os << line;
  }
  std::snprintf(line, sizeof line, "%-28s %8d%% %8d%% %8d%% %9llu\n", "macro average", percent(r.macro_precision),
                percent(r.macro_recall), percent(r.macro_f1), static_cast<unsigned long long>(r.total));
  os << line;
  std::snprintf(line, sizeof line, "accuracy %.4f (%d%%)\n\nconfusion (rows = truth, cols = predicted)\n", r.accuracy,
                percent(r.accuracy));
  os << line;
  for (int t = 0; t < cm.k; ++t) {
    for (int p = 0; p < cm.k; ++p) {
      std::snprintf(line, sizeof line, "%8llu", static_cast<unsigned long long>(cm.at(t, p)));
      os << line;
    }
    os << '\n';
  }
  return os.str();
}

std::string report_to_jsonl(const ClassificationReport& r, const ConfusionMatrix& cm,
                            std::span<const std::string> names) {
  using nlohmann::json;
  std::string out;
  out += json{{"kind", "summary"},
              {"total", r.total},
              {"accuracy", r.accuracy},
              {"macro_precision", r.macro_precision},
              {"macro_recall", r.macro_recall},
              {"macro_f1", r.macro_f1},
              {"degenerate", r.degenerate()}}
             .dump();
  out += '\n';
  for (std::size_t c = 0; c < r.per_class.size(); ++c) {
    const auto& m = r.per_class[c];
    out += json{{"kind", "class"},
                {"class", c < names.size() ? names[c] : std::to_string(c)},
                {"precision", m.precision},
                {"recall", m.recall},
                {"f1", m.f1},
                {"support", m.support},
                {"precision_degenerate", m.precision_degenerate},
                {"recall_degenerate", m.recall_degenerate}}
               .dump();
    out += '\n';
  }
  json rows = json::array();
  for (int t = 0; t < cm.k; ++t) {
    json row = json::array();
    for (int p = 0; p < cm.k; ++p) row.push_back(cm.at(t, p));
    rows.push_back(row);
  }
  out += json{{"kind", "confusion"}, {"rows", rows}}.dump();
  out += '\n';
  return out;
}

}  // namespace civiclens::metrics
