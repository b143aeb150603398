#pragma once

#include <array>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "civiclens/service.hpp"

namespace civiclens::bench {

inline constexpr std::array<const char*, 5> kStages = {"preprocess", "propose", "classify", "report", "notify"};

/// One case's stage durations (from event payloads) and its submit-to-rest
/// wall time (from event timestamps). Stages a case never ran are absent.
struct CaseLatency {
  std::string case_id;
  std::map<std::string, double> stages_ms;
  double total_ms = 0.0;
  bool resting = false;  // reached Notified, PendingReview or Rejected
};

/// Rebuilds per-case latencies from raw events; cases still in flight are
/// returned with resting = false.
std::vector<CaseLatency> latencies_from_log(std::span<const service::Event> events);

struct Summary {
  std::size_t count = 0;
  double mean_ms = 0.0;
  double p95_ms = 0.0;  // nearest rank
};

Summary summarize(std::vector<double> values);

struct StageLatencies {
  std::size_t cases = 0;
  bool empty_run = true;
  std::map<std::string, Summary> stages;
  Summary total;
  double efficiency_gain = 0.0;  // against manual_baseline_seconds
  double manual_baseline_seconds = 480.0;
};

/// Aggregates resting cases only.
StageLatencies aggregate(std::span<const CaseLatency> cases, double manual_baseline_seconds = 480.0);

/// Closed loop against an in-process service with no worker threads: submit
/// one seeded case, drive it to rest, repeat. Latencies are then read back
/// from the event log. Throws Error(BenchFailure) listing parked case ids.
StageLatencies measure_stage_latencies(service::Service& svc, std::span<const std::vector<std::uint8_t>> images,
                                       std::size_t n_cases, std::uint64_t seed, double manual_baseline_seconds = 480.0);

// ---------------------------------------------------------------------------
// Throughput

struct ThroughputConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  double offered_rate = 500.0;               // cases per hour
  std::chrono::duration<double> duration{600.0};
  std::chrono::duration<double> drain{7.0};  // grace after the last arrival
  std::uint64_t seed = 7;
  service::GeoBox area;
  /// Event log of the service under test; when set, latency figures come
  /// from it, otherwise only counts are reported.
  std::optional<std::filesystem::path> event_log;

  void validate() const;
};

struct BenchResult {
  double nominal_rate = 0.0;    // requested cases/hour
  double offered_rate = 0.0;    // arrivals actually sent, per hour
  double completed_rate = 0.0;  // resting cases per hour
  std::size_t submitted = 0;
  std::size_t completed = 0;
  std::size_t rejected_requests = 0;
  double mean_total_ms = 0.0;
  double p95_total_ms = 0.0;
  bool saturated = false;  // completed < 0.95 x offered
};

/// Arrival offsets (seconds from start) of a Poisson process truncated to
/// the duration. Deterministic for a seed.
std::vector<double> poisson_arrivals(double rate_per_hour, double duration_seconds, std::uint64_t seed);

/// Open-loop load over HTTP. Throws Error(Connectivity) when the service
/// does not answer its health check.
BenchResult run_throughput(const ThroughputConfig& config, std::span<const std::vector<std::uint8_t>> images);

// ---------------------------------------------------------------------------
// Elastic demand

struct LoadModelConfig {
  double base_rate = 100.0;  // cases/hour
  double elasticity = 0.5;
  double manual_baseline_seconds = 480.0;
  int rounds = 5;

  void validate() const;
};

/// rate * (1 + elasticity * (baseline - latency) / baseline), never below rate.
double next_rate(double rate, double elasticity, double latency_seconds, double manual_baseline_seconds);

struct RoundMeasurement {
  double mean_latency_ms = 0.0;
  bool saturated = false;
};

struct JevonsRound {
  int round = 0;
  double offered_rate = 0.0;
  double mean_latency_ms = 0.0;
  bool saturated = false;
};

using RoundRunner = std::function<RoundMeasurement(int round, double offered_rate)>;

/// Runs up to config.rounds rounds, stopping after the first saturated one.
std::vector<JevonsRound> jevons_rounds(const LoadModelConfig& config, const RoundRunner& measure);

// ---------------------------------------------------------------------------
// Output

std::string to_jsonl(const StageLatencies& s);
std::string to_jsonl(const BenchResult& r);
std::string to_jsonl(std::span<const JevonsRound> rounds);
std::string format_table(const StageLatencies& s);
std::string format_table(const BenchResult& r);
std::string format_table(std::span<const JevonsRound> rounds);

}  // namespace civiclens::bench
