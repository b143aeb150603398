#include <algorithm>
#include <cmath>
#include <cstdlib>
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
// Configuration

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return {};
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw Error(ErrorCode::Configuration, "config key " + key + ": not a number: " + v);
  }
}

long long to_int(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const long long i = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return i;
  } catch (const std::exception&) {
    throw Error(ErrorCode::Configuration, "config key " + key + ": not an integer: " + v);
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw Error(ErrorCode::Configuration, "config key " + key + ": not a boolean: " + v);
}

}  // namespace

ServiceConfig ServiceConfig::parse(const std::string& text, const std::filesystem::path& base) {
  ServiceConfig c;
  auto path_of = [&](const std::string& v) {
    std::filesystem::path p(v);
    return p.is_relative() && !base.empty() ? base / p : p;
  };
  // Relative defaults are anchored the same way as explicit values.
  c.data_dir = path_of(c.data_dir.string());
  c.checkpoint = path_of(c.checkpoint.string());
  c.rules = path_of(c.rules.string());
  c.templates = path_of(c.templates.string());

  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw Error(ErrorCode::Configuration, "config line " + std::to_string(line_no) + ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string v = trim(line.substr(eq + 1));
    if (key == "data_dir") c.data_dir = path_of(v);
    else if (key == "checkpoint") c.checkpoint = path_of(v);
    else if (key == "rules") c.rules = path_of(v);
    else if (key == "templates") c.templates = path_of(v);
    else if (key == "threshold") c.threshold = to_double(key, v);
    else if (key == "workers") c.workers = static_cast<int>(to_int(key, v));
    else if (key == "host") c.host = v;
    else if (key == "port") c.port = static_cast<int>(to_int(key, v));
    else if (key == "blur_sigma") c.blur_sigma = to_double(key, v);
    else if (key == "page_size") c.page_size = static_cast<int>(to_int(key, v));
    else if (key == "fsync") c.fsync = to_bool(key, v);
    else if (key == "proposer.saliency_threshold") c.proposer.saliency_threshold = to_double(key, v);
    else if (key == "proposer.background_window") c.proposer.background_window = static_cast<int>(to_int(key, v));
    else if (key == "proposer.min_area") c.proposer.min_area = to_int(key, v);
    else if (key == "proposer.max_area_fraction") c.proposer.max_area_fraction = to_double(key, v);
    else if (key == "proposer.nms_iou") c.proposer.nms_iou = to_double(key, v);
    else if (key == "proposer.max_proposals") c.proposer.max_proposals = static_cast<int>(to_int(key, v));
    else throw Error(ErrorCode::Configuration, "config line " + std::to_string(line_no) + ": unknown key " + key);
  }
  return c;
}

ServiceConfig ServiceConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Configuration, "cannot read config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  auto c = parse(ss.str(), path.parent_path());
  c.apply_environment();
  return c;
}

void ServiceConfig::apply_environment() {
  if (const char* dir = std::getenv(kDataDirEnv); dir && *dir) data_dir = dir;
}

void ServiceConfig::validate() const {
  std::vector<std::string> bad;
  if (!(threshold > 0.0 && threshold <= 1.0)) bad.push_back("threshold must lie in (0, 1]");
  if (workers < 1 || workers > 64) bad.push_back("workers must be in [1, 64]");
  if (port < 0 || port > 65535) bad.push_back("port must be in [0, 65535]");
  if (blur_sigma < 0.0) bad.push_back("blur_sigma must be >= 0");
  if (page_size < 1) bad.push_back("page_size must be >= 1");
  if (data_dir.empty()) bad.push_back("data_dir is empty");
  if (proposer.background_window < 3 || proposer.background_window % 2 == 0) {
    bad.push_back("proposer.background_window must be odd and >= 3");
  }
  if (proposer.max_proposals < 1) bad.push_back("proposer.max_proposals must be >= 1");
  if (bad.empty()) return;
  std::string msg = "invalid service config:";
  for (const auto& b : bad) msg += " " + b + ";";
  throw Error(ErrorCode::Configuration, msg);
}

Pipeline Pipeline::load(const ServiceConfig& config) {
  Pipeline p;
  auto [spec, params] = model::checkpoint_load(config.checkpoint);
  p.spec = std::move(spec);
  p.params = std::move(params);
  p.rules = workflow::load_rule_table(config.rules);
  for (IssueClass cls : kAllClasses) p.rules.lookup(cls);  // fail at startup, not mid-case
  p.templates = workflow::Templates::load(config.templates);
  p.proposer = config.proposer;
  p.blur_sigma = config.blur_sigma;
  p.threshold = config.threshold;
  return p;
}

// ---------------------------------------------------------------------------
// Service

namespace {

double ms_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

bool wants_work(const Case& c) {
  return !workflow::is_terminal(c.status) && c.status != CaseStatus::PendingReview && !c.failure;
}

void write_file_atomically(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::Io, "cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
      out.close();
      std::filesystem::remove(tmp);
      throw Error(ErrorCode::Io, "short write to " + tmp.string());
    }
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace

Service::Service(ServiceConfig config, Pipeline pipeline)
    : config_(std::move(config)), pipeline_(std::move(pipeline)) {
  config_.validate();
  std::filesystem::create_directories(config_.data_dir / kBlobDir);
  const auto log_path = config_.data_dir / kEventLogFile;
  auto replayed = replay(log_path);
  cases_ = std::move(replayed.cases);
  idempotency_ = std::move(replayed.idempotency);
  log_ = std::make_unique<EventLog>(log_path, replayed.last_seq + 1, config_.fsync);
  std::size_t requeued = 0;
  for (const auto& [id, c] : cases_) {
    if (wants_work(c)) {
      enqueue(id);
      ++requeued;
    }
  }
  spdlog::info("service: {} cases from {} events, {} re-queued", cases_.size(), replayed.events, requeued);
}

Service::~Service() { stop(); }

void Service::start() {
  std::lock_guard lock(queue_mu_);
  if (!workers_.empty()) return;
  stopping_ = false;
  for (int i = 0; i < config_.workers; ++i) workers_.emplace_back([this] { worker_loop(); });
}

void Service::stop() {
  {
    std::lock_guard lock(queue_mu_);
    stopping_ = true;
  }
  queue_cv_.notify_all();
  for (auto& t : workers_) {
    if (t.joinable()) t.join();
  }
  workers_.clear();
}

// Caller holds store_mu_ exclusively. The event is applied to a copy first so
// a payload the fold would reject never reaches the log.
Event Service::commit(const std::string& case_id, EventKind kind, json payload) {
  Event e;
  e.at = now_utc();
  e.case_id = case_id;
  e.kind = kind;
  e.payload = std::move(payload);
  e.seq = log_->next_seq();

  std::map<std::string, Case> scratch;
  if (kind != EventKind::Submitted) {
    const auto it = cases_.find(case_id);
    if (it == cases_.end()) throw Error(ErrorCode::NotFound, "no case " + case_id);
    scratch.emplace(case_id, it->second);
  }
  apply_event(scratch, e);
  e = log_->append(std::move(e));
  cases_[case_id] = std::move(scratch.at(case_id));
  return e;
}

void Service::enqueue(const std::string& id) {
  {
    std::lock_guard lock(queue_mu_);
    if (!queued_.insert(id).second) return;
    queue_.push_back(id);
  }
  queue_cv_.notify_one();
}

SubmitResult Service::submit_case(std::span<const std::uint8_t> image_bytes, workflow::GeoPoint location,
                                  workflow::Channel channel, const std::optional<std::string>& idempotency_key) {
  if (!std::isfinite(location.lat) || location.lat < -90.0 || location.lat > 90.0) {
    throw Error(ErrorCode::Validation, "lat must lie in [-90, 90]");
  }
  if (!std::isfinite(location.lon) || location.lon < -180.0 || location.lon > 180.0) {
    throw Error(ErrorCode::Validation, "lon must lie in [-180, 180]");
  }
  if (idempotency_key && (idempotency_key->empty() || idempotency_key->size() > 200)) {
    throw Error(ErrorCode::Validation, "idempotency key must be 1-200 characters");
  }
  {
    std::shared_lock lock(store_mu_);
    if (idempotency_key) {
      if (const auto it = idempotency_.find(*idempotency_key); it != idempotency_.end()) return {it->second, true};
    }
  }
  // Decoding proves the bytes are a raster we can process later.
  const auto img = imaging::decode_pnm(image_bytes);
  if (img.width < 1 || img.height < 1) throw Error(ErrorCode::InvalidImage, "image has no pixels");

  std::unique_lock lock(store_mu_);
  if (idempotency_key) {
    if (const auto it = idempotency_.find(*idempotency_key); it != idempotency_.end()) return {it->second, true};
  }
  const std::string id = ulids_.next(now_utc());
  const std::string image_ref = std::string(kBlobDir) + "/" + id + ".pnm";
  // Blob first: a crash before the event leaves an orphan file, never a case
  // without its image.
  write_file_atomically(config_.data_dir / image_ref, image_bytes);
  json payload = {{"image_ref", image_ref},
                  {"channel", std::string(workflow::token(channel))},
                  {"lat", location.lat},
                  {"lon", location.lon}};
  if (idempotency_key) payload["idempotency_key"] = *idempotency_key;
  commit(id, EventKind::Submitted, std::move(payload));
  if (idempotency_key) idempotency_[*idempotency_key] = id;
  lock.unlock();
  enqueue(id);
  return {id, false};
}

void Service::worker_loop() {
  while (true) {
    std::string id;
    {
      std::unique_lock lock(queue_mu_);
      queue_cv_.wait(lock, [&] { return stopping_ || !queue_.empty(); });
      if (stopping_) return;
      id = queue_.front();
      queue_.pop_front();
      queued_.erase(id);
      ++in_flight_;
    }
    process_case(id);
    {
      std::lock_guard lock(queue_mu_);
      --in_flight_;
    }
    idle_cv_.notify_all();
  }
}

std::optional<std::string> Service::process_next() {
  std::string id;
  {
    std::lock_guard lock(queue_mu_);
    if (queue_.empty()) return std::nullopt;
    id = queue_.front();
    queue_.pop_front();
    queued_.erase(id);
    ++in_flight_;
  }
  process_case(id);
  {
    std::lock_guard lock(queue_mu_);
    --in_flight_;
  }
  idle_cv_.notify_all();
  return id;
}

bool Service::wait_idle(std::chrono::milliseconds timeout) {
  std::unique_lock lock(queue_mu_);
  return idle_cv_.wait_for(lock, timeout, [&] { return queue_.empty() && in_flight_ == 0; });
}

// Drives one case from wherever it stands to its next resting state. Each
// stage ends in exactly one committed event, so a crash anywhere resumes at
// the last durable status.
void Service::process_case(const std::string& id) {
  auto snapshot = [&]() -> std::optional<Case> {
    std::shared_lock lock(store_mu_);
    const auto it = cases_.find(id);
    if (it == cases_.end()) return std::nullopt;
    return it->second;
  };
  auto record = [&](EventKind kind, json payload) {
    std::unique_lock lock(store_mu_);
    commit(id, kind, std::move(payload));
  };

  imaging::RasterImage pre;
  bool have_pre = false;
  auto load_preprocessed = [&](const Case& c) {
    const auto raw = imaging::read_pnm(config_.data_dir / c.image_ref);
    pre = imaging::preprocess(raw, imaging::kStandardSize, pipeline_.blur_sigma);
    have_pre = true;
  };

  std::string stage = "load";
  try {
    while (true) {
      const auto c = snapshot();
      if (!c || !wants_work(*c)) return;
      switch (c->status) {
        case CaseStatus::Received: {
          stage = "preprocess";
          const auto t0 = std::chrono::steady_clock::now();
          load_preprocessed(*c);
          record(EventKind::Preprocessed, {{"timings", {{"preprocess", ms_since(t0)}}}});
          break;
        }
        case CaseStatus::Preprocessed: {
          if (!have_pre) {
            stage = "preprocess";
            load_preprocessed(*c);
          }
          stage = "propose";
          const auto t0 = std::chrono::steady_clock::now();
          const auto proposals = regions::propose_regions(pre, pipeline_.proposer);
          const double propose_ms = ms_since(t0);
          stage = "classify";
          const auto t1 = std::chrono::steady_clock::now();
          const auto prediction = model::predict_case(pipeline_.spec, pipeline_.params, imaging::equalize_exposure(pre), proposals);
          const double classify_ms = ms_since(t1);
          json props = json::array();
          for (const auto& p : proposals) props.push_back(to_json(p));
          record(EventKind::Classified, {{"proposals", props},
                                         {"prediction", to_json(prediction)},
                                         {"timings", {{"propose", propose_ms}, {"classify", classify_ms}}}});
          break;
        }
        case CaseStatus::Classified: {
          if (!c->triage) {
            stage = "triage";
            const auto d = workflow::triage(*c, *c->prediction, pipeline_.threshold);
            record(EventKind::Triaged, {{"outcome", std::string(workflow::token(d.outcome))},
                                        {"confidence", d.confidence},
                                        {"threshold", d.threshold}});
            break;
          }
          stage = "report";
          const auto t0 = std::chrono::steady_clock::now();
          const auto report = workflow::generate_report(*c, pipeline_.rules, pipeline_.templates, now_utc());
          record(EventKind::Dispatched, {{"report", to_json(report)}, {"timings", {{"report", ms_since(t0)}}}});
          break;
        }
        case CaseStatus::Dispatched: {
          stage = "notify";
          const auto t0 = std::chrono::steady_clock::now();
          const auto message = workflow::draft_citizen_message(*c, *c->report, pipeline_.templates, now_utc());
          record(EventKind::Notified, {{"message", to_json(message)}, {"timings", {{"notify", ms_since(t0)}}}});
          break;
        }
        default:
          return;
      }
    }
  } catch (const std::exception& ex) {
    spdlog::error("case {}: {} failed: {}", id, stage, ex.what());
    try {
      record(EventKind::Failed, {{"stage", stage}, {"error", ex.what()}});
    } catch (const std::exception& again) {
      spdlog::error("case {}: could not record failure: {}", id, again.what());
    }
  }
}

std::optional<Case> Service::get_case(const std::string& id) const {
  std::shared_lock lock(store_mu_);
  const auto it = cases_.find(id);
  if (it == cases_.end()) return std::nullopt;
  return it->second;
}

CasePage Service::query_cases(const CaseFilter& filter, const std::optional<std::string>& cursor,
                              std::optional<std::size_t> limit) const {
  std::shared_lock lock(store_mu_);
  return page_cases(cases_, filter, cursor, limit.value_or(static_cast<std::size_t>(config_.page_size)));
}

Case Service::override_case(const std::string& id, IssueClass cls, const std::string& op) {
  if (op.empty()) throw Error(ErrorCode::Validation, "operator is required");
  Case updated;
  {
    std::unique_lock lock(store_mu_);
    const auto it = cases_.find(id);
    if (it == cases_.end()) throw Error(ErrorCode::NotFound, "no case " + id);
    if (it->second.status != CaseStatus::PendingReview) {
      throw Conflict(ErrorCode::IllegalTransition,
                     "case " + id + " is " + std::string(workflow::token(it->second.status)) + ", not PendingReview");
    }
    const auto at = now_utc();
    const auto result = workflow::apply_override(it->second, cls, op, at);
    const auto report = workflow::generate_report(result.updated, pipeline_.rules, pipeline_.templates, at);
    commit(id, EventKind::Overridden,
           {{"class", std::string(class_token(cls))}, {"operator", op}, {"report", to_json(report)}});
    updated = cases_.at(id);
  }
  enqueue(id);  // still owes the citizen message
  return updated;
}

Case Service::reject_case(const std::string& id, const std::string& op, const std::string& reason) {
  if (op.empty()) throw Error(ErrorCode::Validation, "operator is required");
  std::unique_lock lock(store_mu_);
  const auto it = cases_.find(id);
  if (it == cases_.end()) throw Error(ErrorCode::NotFound, "no case " + id);
  if (it->second.status != CaseStatus::PendingReview) {
    throw Conflict(ErrorCode::IllegalTransition,
                   "case " + id + " is " + std::string(workflow::token(it->second.status)) + ", not PendingReview");
  }
  commit(id, EventKind::Rejected, {{"operator", op}, {"reason", reason}});
  return cases_.at(id);
}

Service::ReviewMetrics Service::review_metrics() const {
  ReviewMetrics m;
  std::vector<int> truths, preds;
  {
    std::shared_lock lock(store_mu_);
    for (auto s : workflow::kAllStatuses) m.status_counts[std::string(workflow::token(s))] = 0;
    for (const auto& [id, c] : cases_) {
      ++m.status_counts[std::string(workflow::token(c.status))];
      if (c.override_ && c.prediction) {
        truths.push_back(class_index(c.override_->cls));
        preds.push_back(class_index(c.prediction->cls));
      }
    }
  }
  m.confusion = metrics::confusion_matrix(truths, preds, kNumClasses);
  if (!truths.empty()) m.report = metrics::classification_report(m.confusion);
  return m;
}

HeatmapGrid Service::heatmap(const CaseFilter& filter, const GeoBox& bounds, int rows, int cols) const {
  std::vector<workflow::GeoPoint> points;
  {
    std::shared_lock lock(store_mu_);
    for (const auto& [id, c] : cases_) {
      if (filter.matches(c)) points.push_back(c.location);
    }
  }
  return bin_locations(points, bounds, rows, cols);
}

std::vector<workflow::CorrectionRecord> Service::corrections(Timestamp since) const {
  std::vector<workflow::CorrectionRecord> out;
  std::shared_lock lock(store_mu_);
  for (const auto& [id, c] : cases_) {
    if (!c.override_ || c.override_->at < since) continue;
    workflow::CorrectionRecord r;
    r.case_id = id;
    r.image_ref = c.image_ref;
    r.corrected_class = c.override_->cls;
    if (c.prediction) r.predicted_class = c.prediction->cls;
    r.confirmation = c.prediction && c.prediction->cls == c.override_->cls;
    r.op = c.override_->op;
    r.at = c.override_->at;
    out.push_back(std::move(r));
  }
  return out;
}

std::size_t Service::export_corrections(Timestamp since, const std::filesystem::path& out) const {
  const auto records = corrections(since);
  const auto dir = out.has_parent_path() ? out.parent_path() : std::filesystem::path(".");
  corpus::DatasetManifest manifest;
  manifest.root = dir;
  for (const auto& r : records) {
    const auto c = get_case(r.case_id);
    const auto blob = std::filesystem::absolute(config_.data_dir / r.image_ref);
    const auto raw = imaging::read_pnm(blob);
    corpus::ManifestRecord m;
    m.image_path = std::filesystem::relative(blob, std::filesystem::absolute(dir)).generic_string();
    m.cls = r.corrected_class;
    m.lat = c->location.lat;
    m.lon = c->location.lon;
    // Top proposal mapped from the standardized frame back to the stored
    // image (center crop, then uniform scale); whole image without one.
    BoundingBox box{0, 0, raw.width, raw.height};
    if (!c->proposals.empty()) {
      const int side = std::min(raw.width, raw.height);
      const int ox = (raw.width - side) / 2, oy = (raw.height - side) / 2;
      const double s = static_cast<double>(side) / imaging::kStandardSize;
      const auto& p = c->proposals.front().bbox;
      const int x0 = ox + static_cast<int>(std::floor(p.x * s));
      const int y0 = oy + static_cast<int>(std::floor(p.y * s));
      const int x1 = std::min(ox + side, ox + static_cast<int>(std::ceil((p.x + p.w) * s)));
      const int y1 = std::min(oy + side, oy + static_cast<int>(std::ceil((p.y + p.h) * s)));
      box = {x0, y0, std::max(1, x1 - x0), std::max(1, y1 - y0)};
    }
    m.regions.push_back({box, r.corrected_class});
    manifest.records.push_back(std::move(m));
  }
  auto tmp = out;
  tmp += ".tmp";
  try {
    if (!dir.empty()) std::filesystem::create_directories(dir);
    corpus::save_manifest(manifest, tmp);
    std::filesystem::rename(tmp, out);
  } catch (...) {
    std::error_code ec;
    std::filesystem::remove(tmp, ec);
    throw;
  }
  return manifest.records.size();
}

std::filesystem::path Service::blob_path(const Case& c) const { return config_.data_dir / c.image_ref; }

std::size_t Service::queue_depth() const {
  std::lock_guard lock(queue_mu_);
  return queue_.size();
}

std::size_t Service::case_count() const {
  std::shared_lock lock(store_mu_);
  return cases_.size();
}

std::uint64_t Service::last_seq() const { return log_->next_seq() - 1; }

}  // namespace civiclens::service
