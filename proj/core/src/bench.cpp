#include "civiclens/bench.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <thread>

#include <httplib.h>
#include <spdlog/spdlog.h>

#include "civiclens/error.hpp"
#include "civiclens/metrics.hpp"
#include "civiclens/rng.hpp"

namespace civiclens::bench {

using nlohmann::json;
using service::Event;
using service::EventKind;

std::vector<CaseLatency> latencies_from_log(std::span<const Event> events) {
  std::map<std::string, CaseLatency> by_id;
  std::map<std::string, Timestamp> started;
  std::vector<std::string> order;
  for (const auto& e : events) {
    if (e.kind == EventKind::Submitted) {
      by_id[e.case_id].case_id = e.case_id;
      started[e.case_id] = e.at;
      order.push_back(e.case_id);
      continue;
    }
    const auto it = by_id.find(e.case_id);
    if (it == by_id.end()) continue;
    CaseLatency& c = it->second;
    // Once a case rests, later events are human-driven and not pipeline time.
    if (c.resting) continue;
    if (e.payload.contains("timings")) {
      for (const auto& [stage, ms] : e.payload.at("timings").items()) c.stages_ms[stage] += ms.get<double>();
    }
    const bool rests = e.kind == EventKind::Notified || e.kind == EventKind::Rejected ||
                       (e.kind == EventKind::Triaged && e.payload.value("outcome", std::string{}) == "PendingReview");
    if (rests) {
      c.resting = true;
      c.total_ms = std::chrono::duration<double, std::milli>(e.at - started.at(e.case_id)).count();
    }
  }
  std::vector<CaseLatency> out;
  out.reserve(order.size());
  for (const auto& id : order) out.push_back(std::move(by_id.at(id)));
  return out;
}

Summary summarize(std::vector<double> values) {
  Summary s;
  s.count = values.size();
  if (values.empty()) return s;
  s.mean_ms = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  std::sort(values.begin(), values.end());
  const auto rank = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(values.size())));
  s.p95_ms = values[std::max<std::size_t>(rank, 1) - 1];
  return s;
}

StageLatencies aggregate(std::span<const CaseLatency> cases, double manual_baseline_seconds) {
  StageLatencies out;
  out.manual_baseline_seconds = manual_baseline_seconds;
  std::map<std::string, std::vector<double>> per_stage;
  std::vector<double> totals;
  for (const auto& c : cases) {
    if (!c.resting) continue;
    for (const auto& [stage, ms] : c.stages_ms) per_stage[stage].push_back(ms);
    totals.push_back(c.total_ms);
  }
  out.cases = totals.size();
  out.empty_run = totals.empty();
  for (const char* stage : kStages) out.stages[stage] = summarize(per_stage[stage]);
  out.total = summarize(totals);
  if (!out.empty_run) out.efficiency_gain = metrics::efficiency_gain(manual_baseline_seconds, out.total.mean_ms / 1000.0);
  return out;
}

StageLatencies measure_stage_latencies(service::Service& svc, std::span<const std::vector<std::uint8_t>> images,
                                       std::size_t n_cases, std::uint64_t seed, double manual_baseline_seconds) {
  if (n_cases > 0 && images.empty()) throw Error(ErrorCode::InvalidParameter, "no images to submit");
  std::mt19937_64 rng(seed);
  const service::GeoBox area;
  std::uniform_real_distribution<double> lat(area.lat_min, area.lat_max), lon(area.lon_min, area.lon_max);
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < n_cases; ++i) {
    const auto& img = images[rng() % images.size()];
    const auto channel = static_cast<workflow::Channel>(rng() % 3);
    ids.push_back(svc.submit_case(img, {lat(rng), lon(rng)}, channel).id);
    while (svc.process_next()) {
    }
    svc.wait_idle(std::chrono::minutes(1));
  }
  std::vector<std::string> parked;
  for (const auto& id : ids) {
    const auto c = svc.get_case(id);
    if (!c || c->failure) parked.push_back(id);
  }
  if (!parked.empty()) {
    std::string list;
    for (const auto& id : parked) list += (list.empty() ? "" : ", ") + id;
    throw Error(ErrorCode::BenchFailure, std::to_string(parked.size()) + " case(s) parked in error: " + list);
  }
  const auto events = service::read_events(svc.config().data_dir / service::kEventLogFile);
  const std::set<std::string> wanted(ids.begin(), ids.end());
  std::vector<Event> mine;
  for (const auto& e : events) {
    if (wanted.count(e.case_id)) mine.push_back(e);
  }
  const auto lat_cases = latencies_from_log(mine);
  return aggregate(lat_cases, manual_baseline_seconds);
}

// ---------------------------------------------------------------------------
// Throughput

void ThroughputConfig::validate() const {
  if (!(offered_rate > 0.0) || !std::isfinite(offered_rate)) {
    throw Error(ErrorCode::InvalidParameter, "offered_rate must be > 0");
  }
  if (!(duration.count() > 0.0)) throw Error(ErrorCode::InvalidParameter, "duration must be > 0");
  if (drain.count() < 0.0) throw Error(ErrorCode::InvalidParameter, "drain must be >= 0");
}

std::vector<double> poisson_arrivals(double rate_per_hour, double duration_seconds, std::uint64_t seed) {
  if (!(rate_per_hour > 0.0)) throw Error(ErrorCode::InvalidParameter, "arrival rate must be > 0");
  std::mt19937_64 rng(seed);
  std::exponential_distribution<double> gap(rate_per_hour / 3600.0);
  std::vector<double> out;
  for (double t = gap(rng); t < duration_seconds; t += gap(rng)) out.push_back(t);
  return out;
}

BenchResult run_throughput(const ThroughputConfig& config, std::span<const std::vector<std::uint8_t>> images) {
  config.validate();
  if (images.empty()) throw Error(ErrorCode::InvalidParameter, "no images to submit");
  httplib::Client cli(config.host, config.port);
  cli.set_connection_timeout(std::chrono::seconds(5));
  cli.set_read_timeout(std::chrono::seconds(30));
  if (auto res = cli.Get("/healthz"); !res || res->status != 200) {
    throw Error(ErrorCode::Connectivity,
                "service at " + config.host + ":" + std::to_string(config.port) + " is unreachable");
  }

  const double seconds = config.duration.count();
  const auto arrivals = poisson_arrivals(config.offered_rate, seconds, config.seed);
  std::mt19937_64 rng(derive_seed(config.seed, 1));
  std::uniform_real_distribution<double> lat(config.area.lat_min, config.area.lat_max);
  std::uniform_real_distribution<double> lon(config.area.lon_min, config.area.lon_max);

  BenchResult r;
  r.nominal_rate = config.offered_rate;
  std::vector<std::string> ids;
  const auto start = std::chrono::steady_clock::now();
  for (const double t : arrivals) {
    std::this_thread::sleep_until(start + std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                                              std::chrono::duration<double>(t)));
    const auto& img = images[rng() % images.size()];
    char lat_text[32], lon_text[32];
    std::snprintf(lat_text, sizeof lat_text, "%.6f", lat(rng));
    std::snprintf(lon_text, sizeof lon_text, "%.6f", lon(rng));
    static constexpr const char* channels[] = {"mobile_app", "web", "email"};
    const httplib::MultipartFormDataItems items = {
        {"image", std::string(img.begin(), img.end()), "case.pnm", "image/x-portable-anymap"},
        {"lat", lat_text, "", ""},
        {"lon", lon_text, "", ""},
        {"channel", channels[rng() % 3], "", ""},
    };
    ++r.submitted;
    auto res = cli.Post("/cases", items);
    if (!res || (res->status != 201 && res->status != 200)) {
      ++r.rejected_requests;
      continue;
    }
    ids.push_back(json::parse(res->body).at("id").get<std::string>());
  }
  if (!arrivals.empty() && ids.empty()) {
    throw Error(ErrorCode::Connectivity, "every submission failed during the run");
  }
  std::this_thread::sleep_until(start + std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                                            config.duration + config.drain));

  for (const auto& id : ids) {
    auto res = cli.Get("/cases/" + id);
    if (!res || res->status != 200) continue;
    const auto j = json::parse(res->body);
    const auto status = j.at("status").get<std::string>();
    if (j.at("failure").is_null() && (status == "Notified" || status == "PendingReview" || status == "Rejected")) {
      ++r.completed;
    }
  }
  const double hours = seconds / 3600.0;
  r.offered_rate = static_cast<double>(r.submitted) / hours;
  r.completed_rate = static_cast<double>(r.completed) / hours;
  r.saturated = static_cast<double>(r.completed) < 0.95 * static_cast<double>(r.submitted);

  if (config.event_log) {
    const std::set<std::string> wanted(ids.begin(), ids.end());
    std::vector<Event> mine;
    for (const auto& e : service::read_events(*config.event_log)) {
      if (wanted.count(e.case_id)) mine.push_back(e);
    }
    const auto agg = aggregate(latencies_from_log(mine));
    r.mean_total_ms = agg.total.mean_ms;
    r.p95_total_ms = agg.total.p95_ms;
  }
  return r;
}

// ---------------------------------------------------------------------------
// Elastic demand

void LoadModelConfig::validate() const {
  std::string bad;
  if (!(base_rate > 0.0)) bad += " base_rate must be > 0;";
  if (!(elasticity >= 0.0)) bad += " elasticity must be >= 0;";
  if (!(manual_baseline_seconds > 0.0)) bad += " manual_baseline_seconds must be > 0;";
  if (rounds < 1) bad += " rounds must be >= 1;";
  if (!bad.empty()) throw Error(ErrorCode::InvalidParameter, "load model:" + bad);
}

double next_rate(double rate, double elasticity, double latency_seconds, double manual_baseline_seconds) {
  const double grown = rate * (1.0 + elasticity * (manual_baseline_seconds - latency_seconds) / manual_baseline_seconds);
  return std::max(rate, grown);
}

std::vector<JevonsRound> jevons_rounds(const LoadModelConfig& config, const RoundRunner& measure) {
  config.validate();
  std::vector<JevonsRound> out;
  double rate = config.base_rate;
  for (int round = 0; round < config.rounds; ++round) {
    const auto m = measure(round, rate);
    out.push_back({round, rate, m.mean_latency_ms, m.saturated});
    if (m.saturated) break;
    rate = next_rate(rate, config.elasticity, m.mean_latency_ms / 1000.0, config.manual_baseline_seconds);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Output

std::string to_jsonl(const StageLatencies& s) {
  std::string out;
  for (const char* stage : kStages) {
    const auto& v = s.stages.at(stage);
    out += json{{"kind", "stage"}, {"stage", stage}, {"count", v.count}, {"mean_ms", v.mean_ms}, {"p95_ms", v.p95_ms}}
               .dump() +
           "\n";
  }
  out += json{{"kind", "total"},
              {"cases", s.cases},
              {"empty_run", s.empty_run},
              {"mean_total_ms", s.total.mean_ms},
              {"p95_total_ms", s.total.p95_ms},
              {"manual_baseline_seconds", s.manual_baseline_seconds},
              {"efficiency_gain", s.efficiency_gain}}
             .dump() +
         "\n";
  return out;
}

std::string to_jsonl(const BenchResult& r) {
  return json{{"kind", "throughput"},
              {"nominal_rate", r.nominal_rate},
              {"offered_rate", r.offered_rate},
              {"completed_rate", r.completed_rate},
              {"submitted", r.submitted},
              {"completed", r.completed},
              {"rejected_requests", r.rejected_requests},
              {"mean_total_ms", r.mean_total_ms},
              {"p95_total_ms", r.p95_total_ms},
              {"saturated", r.saturated}}
             .dump() +
         "\n";
}

std::string to_jsonl(std::span<const JevonsRound> rounds) {
  std::string out;
  for (const auto& r : rounds) {
    out += json{{"kind", "jevons_round"},
                {"round", r.round},
                {"offered_rate", r.offered_rate},
                {"mean_latency_ms", r.mean_latency_ms},
                {"saturated", r.saturated}}
               .dump() +
           "\n";
  }
  return out;
}

namespace {

std::string line(const char* fmt, auto... args) {
  char buf[256];
  std::snprintf(buf, sizeof buf, fmt, args...);
  return buf;
}

}  // namespace

std::string format_table(const StageLatencies& s) {
  if (s.empty_run) return "empty run: no cases measured\n";
  std::string out = line("%-12s %8s %12s %12s\n", "stage", "count", "mean ms", "p95 ms");
  for (const char* stage : kStages) {
    const auto& v = s.stages.at(stage);
    out += line("%-12s %8zu %12.2f %12.2f\n", stage, v.count, v.mean_ms, v.p95_ms);
  }
  out += line("%-12s %8zu %12.2f %12.2f\n", "total", s.total.count, s.total.mean_ms, s.total.p95_ms);
  out += line("efficiency gain vs %.0f s manual: %.4f\n", s.manual_baseline_seconds, s.efficiency_gain);
  return out;
}

std::string format_table(const BenchResult& r) {
  std::string out;
  out += line("nominal rate     %10.1f cases/h\n", r.nominal_rate);
  out += line("offered rate     %10.1f cases/h (%zu sent, %zu refused)\n", r.offered_rate, r.submitted,
              r.rejected_requests);
  out += line("completed rate   %10.1f cases/h (%zu)\n", r.completed_rate, r.completed);
  out += line("total latency    mean %.1f ms, p95 %.1f ms\n", r.mean_total_ms, r.p95_total_ms);
  out += line("saturated        %s\n", r.saturated ? "yes" : "no");
  return out;
}

std::string format_table(std::span<const JevonsRound> rounds) {
  std::string out = line("%-6s %14s %16s %10s\n", "round", "offered/h", "mean latency ms", "saturated");
  for (const auto& r : rounds) {
    out += line("%-6d %14.1f %16.1f %10s\n", r.round, r.offered_rate, r.mean_latency_ms, r.saturated ? "yes" : "no");
  }
  return out;
}

}  // namespace civiclens::bench
