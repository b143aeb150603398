#pragma once

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <set>
#include <shared_mutex>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "civiclens/clock.hpp"
#include "civiclens/error.hpp"
#include "civiclens/corpus.hpp"
#include "civiclens/metrics.hpp"
#include "civiclens/model.hpp"
#include "civiclens/workflow.hpp"

namespace civiclens::service {

// ---------------------------------------------------------------------------
// Configuration

struct ServiceConfig {
  std::filesystem::path data_dir = "data";
  std::filesystem::path checkpoint = "data/model.ckpt";
  std::filesystem::path rules = "config/rules.jsonl";
  std::filesystem::path templates = "config/templates";
  double threshold = 0.80;
  int workers = 1;
  std::string host = "127.0.0.1";
  int port = 8080;
  double blur_sigma = 1.0;
  int page_size = 50;
  bool fsync = false;
  regions::ProposerSettings proposer;  // "proposer.<field>" keys

  /// key = value lines; '#' starts a comment. Relative paths resolve against
  /// the file's directory. CIVICLENS_DATA_DIR overrides data_dir.
  static ServiceConfig load(const std::filesystem::path& path);
  static ServiceConfig parse(const std::string& text, const std::filesystem::path& base = {});
  void apply_environment();
  void validate() const;
};

inline constexpr const char* kDataDirEnv = "CIVICLENS_DATA_DIR";
inline constexpr const char* kEventLogFile = "events.jsonl";
inline constexpr const char* kBlobDir = "blobs";

// ---------------------------------------------------------------------------
// Identifiers

/// 26-character Crockford base32: 48-bit millisecond timestamp then 80 random
/// bits. Ids minted within one millisecond increment the random part, so
/// lexical order is mint order.
class UlidGenerator {
 public:
  explicit UlidGenerator(std::uint64_t seed = std::random_device{}());
  std::string next(Timestamp now);

 private:
  std::mutex mu_;
  std::mt19937_64 rng_;
  std::uint64_t last_ms_ = 0;
  std::uint16_t hi_ = 0;  // top 16 of the 80 random bits
  std::uint64_t lo_ = 0;  // low 64
};

bool is_ulid(std::string_view s) noexcept;
/// Milliseconds since the epoch encoded in the id prefix.
std::uint64_t ulid_time_ms(std::string_view id);

// ---------------------------------------------------------------------------
// Events

enum class EventKind { Submitted, Preprocessed, Classified, Triaged, Overridden, Rejected, Dispatched, Notified, Failed };

std::string_view token(EventKind k) noexcept;
std::optional<EventKind> parse_event_kind(std::string_view s) noexcept;

struct Event {
  std::uint64_t seq = 0;
  Timestamp at{};
  std::string case_id;
  EventKind kind = EventKind::Submitted;
  nlohmann::json payload = nlohmann::json::object();
};

std::string event_to_line(const Event& e);  // no trailing newline
Event event_from_line(const std::string& line);

/// Serialized appender over a JSONL file opened with O_APPEND; one write()
/// per event line.
class EventLog {
 public:
  /// Opens (creating if needed). A torn final line is cut off with a warning
  /// so later appends never follow garbage. next_seq continues after the
  /// last complete event.
  EventLog(const std::filesystem::path& path, std::uint64_t next_seq, bool fsync);
  ~EventLog();
  EventLog(const EventLog&) = delete;
  EventLog& operator=(const EventLog&) = delete;

  /// Assigns seq and, if unset, the timestamp; then writes.
  Event append(Event e);
  std::uint64_t next_seq() const;
  const std::filesystem::path& path() const noexcept { return path_; }

 private:
  std::filesystem::path path_;
  int fd_ = -1;
  bool fsync_ = false;
  mutable std::mutex mu_;
  std::uint64_t next_seq_ = 1;
};

/// Applies one event to the case map; throws Error(Corruption) when the
/// event does not fit the case's state.
void apply_event(std::map<std::string, workflow::Case>& cases, const Event& e);

struct ReplayResult {
  std::map<std::string, workflow::Case> cases;
  std::map<std::string, std::string> idempotency;  // key -> case id
  std::uint64_t last_seq = 0;
  std::size_t events = 0;
  bool torn_tail = false;
  std::size_t valid_bytes = 0;  // prefix length holding complete lines
};

/// Folds the log in seq order. Missing file or empty log gives an empty
/// store. Seq gaps or reordering throw Error(Corruption) citing the seq.
ReplayResult replay(const std::filesystem::path& log_path);

/// Every event in the log, with the same torn-tail rule as replay.
std::vector<Event> read_events(const std::filesystem::path& log_path);

// ---------------------------------------------------------------------------
// Wire formats

nlohmann::json to_json(const workflow::Case& c);
nlohmann::json to_json(const workflow::DispatchReport& r);
nlohmann::json to_json(const workflow::CitizenMessage& m);
nlohmann::json to_json(const model::Prediction& p);
nlohmann::json to_json(const regions::RegionProposal& p);
workflow::DispatchReport report_from_json(const nlohmann::json& j);
workflow::CitizenMessage message_from_json(const nlohmann::json& j);
model::Prediction prediction_from_json(const nlohmann::json& j);
regions::RegionProposal proposal_from_json(const nlohmann::json& j);

// ---------------------------------------------------------------------------
// Queries

struct CaseFilter {
  std::optional<workflow::CaseStatus> status;
  std::optional<IssueClass> cls;  // final class (override, else prediction)
  std::optional<Timestamp> since;  // submitted_at >= since
  std::optional<Timestamp> until;  // submitted_at < until

  bool matches(const workflow::Case& c) const;
};

struct CasePage {
  std::vector<workflow::Case> items;
  std::optional<std::string> next_cursor;
};

std::string encode_cursor(const std::string& last_id);
/// Throws Error(BadCursor).
std::string decode_cursor(const std::string& cursor);

/// Cases after the cursor in id order.
CasePage page_cases(const std::map<std::string, workflow::Case>& cases, const CaseFilter& filter,
                    const std::optional<std::string>& cursor, std::size_t limit);

struct GeoBox {
  double lat_min = 44.35, lat_max = 44.55, lon_min = 26.00, lon_max = 26.20;
};

struct HeatmapGrid {
  GeoBox bounds;
  int rows = 1, cols = 1;
  std::vector<std::vector<std::uint64_t>> cells;  // [row][col], row 0 at lat_min
  std::uint64_t overflow = 0;                     // matching cases outside bounds
  std::uint64_t matched = 0;
};

/// Bins points into rows x cols equal cells, closed on the max edges.
/// Throws Error(Validation) for inverted bounds or non-positive dimensions.
HeatmapGrid bin_locations(std::span<const workflow::GeoPoint> points, const GeoBox& bounds, int rows, int cols);

// ---------------------------------------------------------------------------
// Pipeline and host

struct Pipeline {
  model::NetworkSpec spec;
  model::Parameters<float> params;
  workflow::RuleTable rules;
  workflow::Templates templates;
  regions::ProposerSettings proposer;
  double blur_sigma = 1.0;
  double threshold = 0.80;

  static Pipeline load(const ServiceConfig& config);
};

struct SubmitResult {
  std::string id;
  bool duplicate = false;
};

struct Conflict : Error {
  using Error::Error;
};

class Service {
 public:
  /// Replays the data directory's event log and queues unfinished cases.
  /// Workers start with start().
  Service(ServiceConfig config, Pipeline pipeline);
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  void start();
  void stop();

  /// Validates and stores the image, appends Submitted, enqueues.
  SubmitResult submit_case(std::span<const std::uint8_t> image_bytes, workflow::GeoPoint location,
                           workflow::Channel channel, const std::optional<std::string>& idempotency_key = {});

  /// Runs one queued case to its next resting state on the calling thread.
  /// nullopt when the queue is empty.
  std::optional<std::string> process_next();

  /// Blocks until no case is queued or in flight, or the timeout passes.
  bool wait_idle(std::chrono::milliseconds timeout);

  std::optional<workflow::Case> get_case(const std::string& id) const;
  CasePage query_cases(const CaseFilter& filter, const std::optional<std::string>& cursor,
                       std::optional<std::size_t> limit = {}) const;

  /// First writer wins: a case no longer PendingReview raises Conflict.
  workflow::Case override_case(const std::string& id, IssueClass cls, const std::string& op);
  workflow::Case reject_case(const std::string& id, const std::string& op, const std::string& reason);

  /// Model predictions against operator-verified classes.
  struct ReviewMetrics {
    metrics::ConfusionMatrix confusion{kNumClasses};
    std::optional<metrics::ClassificationReport> report;
    std::map<std::string, std::uint64_t> status_counts;
  };
  ReviewMetrics review_metrics() const;

  HeatmapGrid heatmap(const CaseFilter& filter, const GeoBox& bounds, int rows, int cols) const;

  /// Override and confirmation records at or after `since`, as a corpus
  /// manifest next to `out`. Returns the count written.
  std::size_t export_corrections(Timestamp since, const std::filesystem::path& out) const;

  std::vector<workflow::CorrectionRecord> corrections(Timestamp since) const;

  std::filesystem::path blob_path(const workflow::Case& c) const;
  const ServiceConfig& config() const noexcept { return config_; }
  std::size_t queue_depth() const;
  std::size_t case_count() const;
  std::uint64_t last_seq() const;

 private:
  Event commit(const std::string& case_id, EventKind kind, nlohmann::json payload);
  void enqueue(const std::string& id);
  void worker_loop();
  void process_case(const std::string& id);

  ServiceConfig config_;
  Pipeline pipeline_;
  UlidGenerator ulids_;
  std::unique_ptr<EventLog> log_;

  mutable std::shared_mutex store_mu_;
  std::map<std::string, workflow::Case> cases_;
  std::map<std::string, std::string> idempotency_;

  mutable std::mutex queue_mu_;
  std::condition_variable queue_cv_;
  std::condition_variable idle_cv_;
  std::deque<std::string> queue_;
  std::set<std::string> queued_;
  std::size_t in_flight_ = 0;
  bool stopping_ = false;
  std::vector<std::thread> workers_;
};

/// HTTP/JSON front end over a Service (cpp-httplib underneath).
class HttpApi {
 public:
  explicit HttpApi(Service& service);
  ~HttpApi();

  /// Binds; port 0 picks a free port. Returns the bound port.
  int bind(const std::string& host, int port);
  /// Serves until stop(); call from a dedicated thread.
  void run();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace civiclens::service
