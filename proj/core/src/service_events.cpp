#include <fcntl.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <fstream>
#include <sstream>

#include <spdlog/spdlog.h>

#include "civiclens/error.hpp"
#include "civiclens/service.hpp"

namespace civiclens::service {

using nlohmann::json;
using workflow::Case;
using workflow::CaseStatus;

// ---------------------------------------------------------------------------
// ULIDs

namespace {

constexpr char kCrockford[] = "0123456789ABCDEFGHJKMNPQRSTVWXYZ";

int crockford_value(char c) noexcept {
  for (int i = 0; i < 32; ++i) {
    if (kCrockford[i] == c) return i;
  }
  return -1;
}

}  // namespace

UlidGenerator::UlidGenerator(std::uint64_t seed) : rng_(seed) {}

std::string UlidGenerator::next(Timestamp now) {
  std::lock_guard lock(mu_);
  auto ms = static_cast<std::uint64_t>(std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count());
  if (ms <= last_ms_) {
    // Same (or earlier, if the clock stepped back) millisecond: keep the old
    // prefix and bump the random tail so order is preserved.
    ms = last_ms_;
    if (++lo_ == 0) ++hi_;
  } else {
    last_ms_ = ms;
    hi_ = static_cast<std::uint16_t>(rng_());
    lo_ = rng_() & ~(std::uint64_t{1} << 63);  // headroom for increments
  }
  std::string out(26, '0');
  for (int i = 9; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = kCrockford[ms & 31];
    ms >>= 5;
  }
  // 80 random bits as 16 base32 digits: hi_ (16 bits) then lo_ (64 bits).
  std::uint64_t lo = lo_;
  std::uint64_t hi = hi_;
  for (int i = 25; i >= 10; --i) {
    out[static_cast<std::size_t>(i)] = kCrockford[lo & 31];
    lo = (lo >> 5) | ((hi & 31) << 59);
    hi >>= 5;
  }
  return out;
}

bool is_ulid(std::string_view s) noexcept {
  if (s.size() != 26) return false;
  if (crockford_value(s[0]) > 7) return false;  // 48-bit timestamp fits 10 digits only up to '7'
  for (char c : s) {
    if (crockford_value(c) < 0) return false;
  }
  return true;
}

std::uint64_t ulid_time_ms(std::string_view id) {
  if (!is_ulid(id)) throw Error(ErrorCode::Validation, "not a case id: " + std::string(id));
  std::uint64_t ms = 0;
  for (int i = 0; i < 10; ++i) ms = (ms << 5) | static_cast<std::uint64_t>(crockford_value(id[static_cast<std::size_t>(i)]));
  return ms;
}

// ---------------------------------------------------------------------------
// Event kinds and lines

std::string_view token(EventKind k) noexcept {
  switch (k) {
    case EventKind::Submitted: return "Submitted";
    case EventKind::Preprocessed: return "Preprocessed";
    case EventKind::Classified: return "Classified";
    case EventKind::Triaged: return "Triaged";
    case EventKind::Overridden: return "Overridden";
    case EventKind::Rejected: return "Rejected";
    case EventKind::Dispatched: return "Dispatched";
    case EventKind::Notified: return "Notified";
    case EventKind::Failed: return "Failed";
  }
  return "?";
}

std::optional<EventKind> parse_event_kind(std::string_view s) noexcept {
  for (auto k : {EventKind::Submitted, EventKind::Preprocessed, EventKind::Classified, EventKind::Triaged,
                 EventKind::Overridden, EventKind::Rejected, EventKind::Dispatched, EventKind::Notified,
                 EventKind::Failed}) {
    if (token(k) == s) return k;
  }
  return std::nullopt;
}

std::string event_to_line(const Event& e) {
  json j = {{"seq", e.seq},
            {"at", to_iso8601(e.at)},
            {"case_id", e.case_id},
            {"kind", std::string(token(e.kind))},
            {"payload", e.payload}};
  return j.dump();
}

Event event_from_line(const std::string& line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception& ex) {
    throw Error(ErrorCode::Parse, std::string("event line is not JSON: ") + ex.what());
  }
  Event e;
  try {
    e.seq = j.at("seq").get<std::uint64_t>();
    e.at = parse_iso8601(j.at("at").get<std::string>());
    e.case_id = j.at("case_id").get<std::string>();
    const auto kind = parse_event_kind(j.at("kind").get<std::string>());
    if (!kind) throw Error(ErrorCode::Parse, "unknown event kind " + j.at("kind").dump());
    e.kind = *kind;
    e.payload = j.value("payload", json::object());
  } catch (const json::exception& ex) {
    throw Error(ErrorCode::Parse, std::string("malformed event: ") + ex.what());
  }
  return e;
}

// ---------------------------------------------------------------------------
// Wire JSON

json to_json(const model::Prediction& p) {
  return {{"class", std::string(class_token(p.cls))},
          {"confidence", p.confidence},
          {"probabilities", {p.probabilities[0], p.probabilities[1], p.probabilities[2]}}};
}

model::Prediction prediction_from_json(const json& j) {
  model::Prediction p;
  const auto cls = parse_class_token(j.at("class").get<std::string>());
  if (!cls) throw Error(ErrorCode::Parse, "unknown class " + j.at("class").dump());
  p.cls = *cls;
  p.confidence = j.at("confidence").get<double>();
  const auto& probs = j.at("probabilities");
  for (int k = 0; k < kNumClasses; ++k) p.probabilities[static_cast<std::size_t>(k)] = probs.at(static_cast<std::size_t>(k)).get<double>();
  return p;
}

json to_json(const regions::RegionProposal& p) {
  return {{"x", p.bbox.x}, {"y", p.bbox.y}, {"w", p.bbox.w}, {"h", p.bbox.h}, {"objectness", p.objectness}};
}

regions::RegionProposal proposal_from_json(const json& j) {
  return {{j.at("x").get<int>(), j.at("y").get<int>(), j.at("w").get<int>(), j.at("h").get<int>()},
          j.at("objectness").get<double>()};
}

json to_json(const workflow::DispatchReport& r) {
  return {{"case_id", r.case_id},
          {"department", r.department},
          {"regulation_citation", r.regulation_citation},
          {"class", std::string(class_token(r.cls))},
          {"confidence", r.confidence},
          {"location", {{"lat", r.location.lat}, {"lon", r.location.lon}}},
          {"priority", std::string(workflow::token(r.priority))},
          {"sla_hours", r.sla_hours},
          {"created_at", to_iso8601(r.created_at)},
          {"narrative", r.narrative}};
}

workflow::DispatchReport report_from_json(const json& j) {
  workflow::DispatchReport r;
  r.case_id = j.at("case_id").get<std::string>();
  r.department = j.at("department").get<std::string>();
  r.regulation_citation = j.at("regulation_citation").get<std::string>();
  const auto cls = parse_class_token(j.at("class").get<std::string>());
  if (!cls) throw Error(ErrorCode::Parse, "unknown class in report");
  r.cls = *cls;
  r.confidence = j.at("confidence").get<double>();
  r.location = {j.at("location").at("lat").get<double>(), j.at("location").at("lon").get<double>()};
  const auto prio = workflow::parse_priority(j.at("priority").get<std::string>());
  if (!prio) throw Error(ErrorCode::Parse, "unknown priority in report");
  r.priority = *prio;
  r.sla_hours = j.at("sla_hours").get<int>();
  r.created_at = parse_iso8601(j.at("created_at").get<std::string>());
  r.narrative = j.at("narrative").get<std::string>();
  return r;
}

json to_json(const workflow::CitizenMessage& m) {
  return {{"case_id", m.case_id}, {"created_at", to_iso8601(m.created_at)}, {"body", m.body}};
}

workflow::CitizenMessage message_from_json(const json& j) {
  return {j.at("case_id").get<std::string>(), parse_iso8601(j.at("created_at").get<std::string>()),
          j.at("body").get<std::string>()};
}

json to_json(const Case& c) {
  json j = {{"id", c.id},
            {"submitted_at", to_iso8601(c.submitted_at)},
            {"channel", std::string(workflow::token(c.channel))},
            {"location", {{"lat", c.location.lat}, {"lon", c.location.lon}}},
            {"image_ref", c.image_ref},
            {"status", std::string(workflow::token(c.status))},
            {"proposals", json::array()},
            {"prediction", nullptr},
            {"triage", nullptr},
            {"override", nullptr},
            {"rejection", nullptr},
            {"final_class", nullptr},
            {"stage_timings", c.stage_timings},
            {"failure", nullptr},
            {"has_report", c.report.has_value()},
            {"has_message", c.message.has_value()}};
  for (const auto& p : c.proposals) j["proposals"].push_back(to_json(p));
  if (c.prediction) j["prediction"] = to_json(*c.prediction);
  if (c.triage) {
    j["triage"] = {{"outcome", std::string(workflow::token(c.triage->outcome))},
                   {"confidence", c.triage->confidence},
                   {"threshold", c.triage->threshold}};
  }
  if (c.override_) {
    j["override"] = {{"class", std::string(class_token(c.override_->cls))},
                     {"operator", c.override_->op},
                     {"at", to_iso8601(c.override_->at)}};
  }
  if (c.rejection) {
    j["rejection"] = {{"operator", c.rejection->op},
                      {"reason", c.rejection->reason},
                      {"at", to_iso8601(c.rejection->at)}};
  }
  if (c.override_ || c.prediction) j["final_class"] = std::string(class_token(workflow::final_class(c)));
  if (c.failure) j["failure"] = *c.failure;
  return j;
}

// ---------------------------------------------------------------------------
// Folding events into cases

namespace {

void move_to(Case& c, CaseStatus to, const Event& e) {
  if (!workflow::is_legal(c.status, to)) {
    throw Error(ErrorCode::Corruption, "event seq " + std::to_string(e.seq) + " (" + std::string(token(e.kind)) +
                                           ") moves case " + c.id + " from " + std::string(workflow::token(c.status)) +
                                           " to " + std::string(workflow::token(to)));
  }
  c.status = to;
}

void record_timings(Case& c, const json& payload) {
  if (!payload.contains("timings")) return;
  for (const auto& [stage, ms] : payload.at("timings").items()) c.stage_timings[stage] = ms.get<double>();
}

}  // namespace

void apply_event(std::map<std::string, Case>& cases, const Event& e) {
  try {
    if (e.kind == EventKind::Submitted) {
      if (cases.count(e.case_id)) {
        throw Error(ErrorCode::Corruption, "event seq " + std::to_string(e.seq) + " resubmits case " + e.case_id);
      }
      Case c;
      c.id = e.case_id;
      c.submitted_at = e.at;
      const auto channel = workflow::parse_channel(e.payload.at("channel").get<std::string>());
      if (!channel) throw Error(ErrorCode::Corruption, "unknown channel at seq " + std::to_string(e.seq));
      c.channel = *channel;
      c.location = {e.payload.at("lat").get<double>(), e.payload.at("lon").get<double>()};
      c.image_ref = e.payload.at("image_ref").get<std::string>();
      cases.emplace(c.id, std::move(c));
      return;
    }
    const auto it = cases.find(e.case_id);
    if (it == cases.end()) {
      throw Error(ErrorCode::Corruption, "event seq " + std::to_string(e.seq) + " names unknown case " + e.case_id);
    }
    Case& c = it->second;
    switch (e.kind) {
      case EventKind::Submitted:
        break;
      case EventKind::Preprocessed:
        move_to(c, CaseStatus::Preprocessed, e);
        c.failure.reset();
        break;
      case EventKind::Classified:
        move_to(c, CaseStatus::Classified, e);
        c.proposals.clear();
        for (const auto& p : e.payload.at("proposals")) c.proposals.push_back(proposal_from_json(p));
        c.prediction = prediction_from_json(e.payload.at("prediction"));
        c.failure.reset();
        break;
      case EventKind::Triaged: {
        if (c.status != CaseStatus::Classified || c.triage) {
          throw Error(ErrorCode::Corruption, "event seq " + std::to_string(e.seq) + " triages case " + c.id + " twice or out of order");
        }
        const auto outcome = workflow::parse_status(e.payload.at("outcome").get<std::string>());
        if (!outcome || (*outcome != CaseStatus::Dispatched && *outcome != CaseStatus::PendingReview)) {
          throw Error(ErrorCode::Corruption, "bad triage outcome at seq " + std::to_string(e.seq));
        }
        c.triage = workflow::TriageDecision{*outcome, e.payload.at("confidence").get<double>(),
                                            e.payload.at("threshold").get<double>()};
        if (*outcome == CaseStatus::PendingReview) move_to(c, CaseStatus::PendingReview, e);
        break;
      }
      case EventKind::Dispatched:
        if (!c.triage || c.triage->outcome != CaseStatus::Dispatched) {
          throw Error(ErrorCode::Corruption, "event seq " + std::to_string(e.seq) + " dispatches untriaged case " + c.id);
        }
        move_to(c, CaseStatus::Dispatched, e);
        c.report = report_from_json(e.payload.at("report"));
        c.failure.reset();
        break;
      case EventKind::Overridden: {
        const auto cls = parse_class_token(e.payload.at("class").get<std::string>());
        if (!cls) throw Error(ErrorCode::Corruption, "unknown class at seq " + std::to_string(e.seq));
        move_to(c, CaseStatus::Dispatched, e);
        c.override_ = workflow::Override{*cls, e.payload.at("operator").get<std::string>(), e.at};
        c.report = report_from_json(e.payload.at("report"));
        break;
      }
      case EventKind::Rejected:
        move_to(c, CaseStatus::Rejected, e);
        c.rejection = workflow::Rejection{e.payload.at("operator").get<std::string>(),
                                          e.payload.value("reason", std::string{}), e.at};
        break;
      case EventKind::Notified:
        move_to(c, CaseStatus::Notified, e);
        c.message = message_from_json(e.payload.at("message"));
        c.failure.reset();
        break;
      case EventKind::Failed:
        c.failure = e.payload.value("stage", std::string("?")) + ": " + e.payload.value("error", std::string{});
        break;
    }
    record_timings(c, e.payload);
  } catch (const json::exception& ex) {
    throw Error(ErrorCode::Corruption, "event seq " + std::to_string(e.seq) + " payload: " + ex.what());
  } catch (const Error& ex) {
    if (ex.code() == ErrorCode::Corruption) throw;
    throw Error(ErrorCode::Corruption, "event seq " + std::to_string(e.seq) + ": " + ex.what());
  }
}

// ---------------------------------------------------------------------------
// Log file

namespace {

struct ScannedLog {
  std::vector<Event> events;
  std::size_t valid_bytes = 0;
  bool torn_tail = false;
};

ScannedLog scan_log(const std::filesystem::path& path) {
  ScannedLog out;
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    if (!std::filesystem::exists(path)) return out;
    throw Error(ErrorCode::Io, "cannot read event log " + path.string());
  }
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::size_t pos = 0;
  std::uint64_t expected = 0;
  while (pos < data.size()) {
    const std::size_t nl = data.find('\n', pos);
    if (nl == std::string::npos) {
      // Final line without its newline: an append torn by a crash.
      spdlog::warn("event log {}: discarding torn final line ({} bytes)", path.string(), data.size() - pos);
      out.torn_tail = true;
      break;
    }
    const std::string line = data.substr(pos, nl - pos);
    if (line.find_first_not_of(" \t\r") == std::string::npos) {
      pos = nl + 1;
      out.valid_bytes = pos;
      continue;
    }
    Event e;
    try {
      e = event_from_line(line);
    } catch (const Error& ex) {
      if (data.find_first_not_of(" \t\r\n", nl + 1) == std::string::npos) {
        spdlog::warn("event log {}: discarding unreadable final line: {}", path.string(), ex.what());
        out.torn_tail = true;
        break;
      }
      throw Error(ErrorCode::Corruption, "event log " + path.string() + " at byte " + std::to_string(pos) +
                                             " (after seq " + std::to_string(expected) + "): " + ex.what());
    }
    if (expected == 0 ? e.seq != 1 : e.seq != expected + 1) {
      throw Error(ErrorCode::Corruption, "event log " + path.string() + ": seq " + std::to_string(e.seq) +
                                             " follows seq " + std::to_string(expected));
    }
    expected = e.seq;
    out.events.push_back(std::move(e));
    pos = nl + 1;
    out.valid_bytes = pos;
  }
  return out;
}

}  // namespace

std::vector<Event> read_events(const std::filesystem::path& log_path) { return scan_log(log_path).events; }

ReplayResult replay(const std::filesystem::path& log_path) {
  auto scanned = scan_log(log_path);
  ReplayResult r;
  r.torn_tail = scanned.torn_tail;
  r.valid_bytes = scanned.valid_bytes;
  for (const auto& e : scanned.events) {
    apply_event(r.cases, e);
    if (e.kind == EventKind::Submitted && e.payload.contains("idempotency_key")) {
      r.idempotency[e.payload.at("idempotency_key").get<std::string>()] = e.case_id;
    }
    r.last_seq = e.seq;
    ++r.events;
  }
  return r;
}

EventLog::EventLog(const std::filesystem::path& path, std::uint64_t next_seq, bool fsync)
    : path_(path), fsync_(fsync), next_seq_(next_seq) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto scanned = scan_log(path);
  if (scanned.torn_tail) {
    std::filesystem::resize_file(path, scanned.valid_bytes);
    spdlog::warn("event log {}: truncated to {} bytes before appending", path.string(), scanned.valid_bytes);
  }
  if (!scanned.events.empty() && scanned.events.back().seq + 1 != next_seq) {
    throw Error(ErrorCode::Corruption, "event log " + path.string() + " ends at seq " +
                                           std::to_string(scanned.events.back().seq) + " but appends would start at " +
                                           std::to_string(next_seq));
  }
  fd_ = ::open(path.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
  if (fd_ < 0) throw Error(ErrorCode::Io, "cannot open event log " + path.string() + ": " + std::strerror(errno));
}

EventLog::~EventLog() {
  if (fd_ >= 0) ::close(fd_);
}

std::uint64_t EventLog::next_seq() const {
  std::lock_guard lock(mu_);
  return next_seq_;
}

Event EventLog::append(Event e) {
  std::lock_guard lock(mu_);
  e.seq = next_seq_;
  if (e.at == Timestamp{}) e.at = now_utc();
  const std::string line = event_to_line(e) + "\n";
  std::size_t done = 0;
  while (done < line.size()) {
    const ssize_t n = ::write(fd_, line.data() + done, line.size() - done);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw Error(ErrorCode::Io, "event log append failed: " + std::string(std::strerror(errno)));
    }
    done += static_cast<std::size_t>(n);
  }
  if (fsync_ && ::fdatasync(fd_) != 0) {
    throw Error(ErrorCode::Io, "event log fdatasync failed: " + std::string(std::strerror(errno)));
  }
  ++next_seq_;
  return e;
}

// ---------------------------------------------------------------------------
// Queries

bool CaseFilter::matches(const Case& c) const {
  if (status && c.status != *status) return false;
  if (cls) {
    if (!c.override_ && !c.prediction) return false;
    if (workflow::final_class(c) != *cls) return false;
  }
  if (since && c.submitted_at < *since) return false;
  if (until && !(c.submitted_at < *until)) return false;
  return true;
}

std::string encode_cursor(const std::string& last_id) {
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  for (unsigned char ch : last_id) {
    out += hex[ch >> 4];
    out += hex[ch & 15];
  }
  return out;
}

std::string decode_cursor(const std::string& cursor) {
  auto nibble = [](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    return -1;
  };
  if (cursor.size() != 52) throw Error(ErrorCode::BadCursor, "malformed cursor");
  std::string id;
  for (std::size_t i = 0; i < cursor.size(); i += 2) {
    const int hi = nibble(cursor[i]), lo = nibble(cursor[i + 1]);
    if (hi < 0 || lo < 0) throw Error(ErrorCode::BadCursor, "malformed cursor");
    id += static_cast<char>(hi * 16 + lo);
  }
  if (!is_ulid(id)) throw Error(ErrorCode::BadCursor, "malformed cursor");
  return id;
}

CasePage page_cases(const std::map<std::string, Case>& cases, const CaseFilter& filter,
                    const std::optional<std::string>& cursor, std::size_t limit) {
  if (limit == 0) throw Error(ErrorCode::Validation, "page size must be >= 1");
  CasePage page;
  auto it = cursor ? cases.upper_bound(decode_cursor(*cursor)) : cases.begin();
  for (; it != cases.end(); ++it) {
    if (!filter.matches(it->second)) continue;
    if (page.items.size() == limit) {
      page.next_cursor = encode_cursor(page.items.back().id);
      break;
    }
    page.items.push_back(it->second);
  }
  return page;
}

HeatmapGrid bin_locations(std::span<const workflow::GeoPoint> points, const GeoBox& bounds, int rows, int cols) {
  if (rows < 1 || cols < 1) throw Error(ErrorCode::Validation, "heatmap rows and cols must be >= 1");
  if (!(bounds.lat_min < bounds.lat_max) || !(bounds.lon_min < bounds.lon_max)) {
    throw Error(ErrorCode::Validation, "heatmap bounds are inverted or empty");
  }
  HeatmapGrid g;
  g.bounds = bounds;
  g.rows = rows;
  g.cols = cols;
  g.cells.assign(static_cast<std::size_t>(rows), std::vector<std::uint64_t>(static_cast<std::size_t>(cols), 0));
  for (const auto& p : points) {
    ++g.matched;
    if (!(p.lat >= bounds.lat_min && p.lat <= bounds.lat_max && p.lon >= bounds.lon_min && p.lon <= bounds.lon_max)) {
      ++g.overflow;
      continue;
    }
    const auto bin = [](double v, double lo, double hi, int n) {
      const int i = static_cast<int>(std::floor((v - lo) / (hi - lo) * n));
      return std::clamp(i, 0, n - 1);
    };
    ++g.cells[static_cast<std::size_t>(bin(p.lat, bounds.lat_min, bounds.lat_max, rows))]
             [static_cast<std::size_t>(bin(p.lon, bounds.lon_min, bounds.lon_max, cols))];
  }
  return g;
}

}  // namespace civiclens::service
