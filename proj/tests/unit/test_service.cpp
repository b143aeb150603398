#include <gtest/gtest.h>

#include <httplib.h>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <random>
#include <set>
#include <thread>

#include "civiclens/service.hpp"
#include "service_fixture.hpp"
#include "test_support.hpp"

using namespace civiclens;
using namespace civiclens::service;
using civiclens::testing::config_for;
using civiclens::testing::fixed_pipeline;
using civiclens::testing::gray_pnm;
using civiclens::testing::scene_pnm;
using civiclens::testing::TempDir;
using workflow::CaseStatus;
using json = nlohmann::json;

namespace {

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void write_file(const std::filesystem::path& p, const std::string& s) { std::ofstream(p, std::ios::binary) << s; }

const std::string kIdA = "01FZ0000000000000000000000";
const std::string kIdB = "01FZ0000000000000000000001";

std::string line(std::uint64_t seq, const std::string& id, EventKind kind, json payload) {
  Event e;
  e.seq = seq;
  e.at = parse_iso8601("2022-03-01T08:00:00Z") + std::chrono::seconds(seq);
  e.case_id = id;
  e.kind = kind;
  e.payload = std::move(payload);
  return event_to_line(e) + "\n";
}

json submitted(double lat = 44.4, double lon = 26.1) {
  return {{"image_ref", "blobs/x.pnm"}, {"channel", "web"}, {"lat", lat}, {"lon", lon}};
}

workflow::Case make_case(const std::string& id, CaseStatus status, Timestamp at, std::optional<IssueClass> cls = {}) {
  workflow::Case c;
  c.id = id;
  c.status = status;
  c.submitted_at = at;
  if (cls) {
    model::Prediction p;
    p.cls = *cls;
    p.confidence = 0.9;
    c.prediction = p;
  }
  return c;
}

std::size_t count_kind(const std::filesystem::path& log, EventKind kind, const std::string& id = {}) {
  std::size_t n = 0;
  for (const auto& e : read_events(log)) n += e.kind == kind && (id.empty() || e.case_id == id);
  return n;
}

void drain(Service& svc) {
  while (svc.process_next()) {
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Identifiers and events

TEST(Ulid, FormatMonotonicityAndOrder) {
  UlidGenerator gen(1);
  const auto t = parse_iso8601("2022-03-01T08:00:00Z");
  std::vector<std::string> ids;
  for (int i = 0; i < 1000; ++i) ids.push_back(gen.next(t));  // same millisecond
  for (int i = 0; i < 100; ++i) ids.push_back(gen.next(t + std::chrono::milliseconds(1 + i)));
  for (std::size_t i = 0; i < ids.size(); ++i) {
    EXPECT_EQ(ids[i].size(), 26u);
    EXPECT_TRUE(is_ulid(ids[i])) << ids[i];
    if (i > 0) {
      EXPECT_LT(ids[i - 1], ids[i]);
    }
  }
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(t.time_since_epoch()).count();
  EXPECT_EQ(ulid_time_ms(ids[0]), static_cast<std::uint64_t>(ms));
  EXPECT_FALSE(is_ulid("01FZ000000000000000000000"));    // 25 chars
  EXPECT_FALSE(is_ulid("01FZ00000000000000000000IL"));   // excluded letters
  EXPECT_FALSE(is_ulid("81FZ0000000000000000000000"));   // timestamp overflow
  // A clock step backwards still yields increasing ids.
  const auto back = gen.next(t);
  EXPECT_LT(ids.back(), back);
}

TEST(Events, LineRoundTrip) {
  Event e;
  e.seq = 42;
  e.at = parse_iso8601("2022-03-01T08:30:00.123456Z");
  e.case_id = kIdA;
  e.kind = EventKind::Classified;
  e.payload = {{"timings", {{"classify", 1.5}}}, {"note", "x\ny"}};
  const auto text = event_to_line(e);
  EXPECT_EQ(text.find('\n'), std::string::npos);
  const auto back = event_from_line(text);
  EXPECT_EQ(back.seq, e.seq);
  EXPECT_EQ(back.at, e.at);
  EXPECT_EQ(back.case_id, e.case_id);
  EXPECT_EQ(back.kind, e.kind);
  EXPECT_EQ(back.payload, e.payload);
  for (EventKind k : {EventKind::Submitted, EventKind::Preprocessed, EventKind::Classified, EventKind::Triaged,
                      EventKind::Overridden, EventKind::Rejected, EventKind::Dispatched, EventKind::Notified,
                      EventKind::Failed})
    EXPECT_EQ(parse_event_kind(token(k)), k);
  EXPECT_ERROR_CODE(event_from_line("{\"seq\": 1}"), ErrorCode::Parse);
  EXPECT_ERROR_CODE(event_from_line("not json"), ErrorCode::Parse);
}

TEST(Replay, MissingAndEmptyLog) {
  TempDir dir("replay0");
  EXPECT_TRUE(replay(dir / "events.jsonl").cases.empty());
  write_file(dir / "events.jsonl", "");
  const auto r = replay(dir / "events.jsonl");
  EXPECT_TRUE(r.cases.empty());
  EXPECT_EQ(r.last_seq, 0u);
}

TEST(Replay, TornTailIsDiscarded) {
  TempDir dir("replayTorn");
  const std::string full = line(1, kIdA, EventKind::Submitted, submitted()) +
                           line(2, kIdB, EventKind::Submitted, submitted(44.5, 26.0));
  write_file(dir / "complete.jsonl", full.substr(0, full.find('\n') + 1));
  write_file(dir / "torn.jsonl", full.substr(0, full.size() - 10));
  const auto good = replay(dir / "complete.jsonl");
  const auto torn = replay(dir / "torn.jsonl");
  EXPECT_TRUE(torn.torn_tail);
  EXPECT_EQ(torn.cases.size(), 1u);
  EXPECT_EQ(torn.last_seq, 1u);
  EXPECT_EQ(to_json(torn.cases.at(kIdA)), to_json(good.cases.at(kIdA)));

  // Opening the log cuts the torn bytes and continues the sequence.
  {
    EventLog log(dir / "torn.jsonl", torn.last_seq + 1, false);
    Event e;
    e.case_id = kIdB;
    e.kind = EventKind::Submitted;
    e.payload = submitted();
    EXPECT_EQ(log.append(e).seq, 2u);
  }
  const auto after = replay(dir / "torn.jsonl");
  EXPECT_FALSE(after.torn_tail);
  EXPECT_EQ(after.cases.size(), 2u);
}

TEST(Replay, GapAndReorderAreCorruption) {
  TempDir dir("replayGap");
  write_file(dir / "gap.jsonl", line(1, kIdA, EventKind::Submitted, submitted()) +
                                    line(3, kIdB, EventKind::Submitted, submitted()) + "\n");
  try {
    replay(dir / "gap.jsonl");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::Corruption);
    EXPECT_NE(std::string(e.what()).find('3'), std::string::npos);
  }
  write_file(dir / "order.jsonl", line(2, kIdA, EventKind::Submitted, submitted()) +
                                      line(1, kIdB, EventKind::Submitted, submitted()));
  EXPECT_ERROR_CODE(replay(dir / "order.jsonl"), ErrorCode::Corruption);
  // An event that does not fit the case's state.
  write_file(dir / "state.jsonl", line(1, kIdA, EventKind::Submitted, submitted()) +
                                      line(2, kIdA, EventKind::Notified, {{"message", "x"}}));
  EXPECT_ERROR_CODE(replay(dir / "state.jsonl"), ErrorCode::Corruption);
}

// ---------------------------------------------------------------------------
// Configuration

TEST(Config, ParseKeysAndPaths) {
  const auto c = ServiceConfig::parse(
      "# comment\n"
      "data_dir = ../data\n"
      "threshold = 0.65   # trailing\n"
      "workers=3\n"
      "port = 9000\n"
      "fsync = true\n"
      "proposer.min_area = 100\n"
      "proposer.nms_iou = 0.4\n",
      "/etc/civiclens");
  EXPECT_EQ(c.data_dir, std::filesystem::path("/etc/civiclens/../data"));
  EXPECT_EQ(c.rules, std::filesystem::path("/etc/civiclens/config/rules.jsonl"));
  EXPECT_DOUBLE_EQ(c.threshold, 0.65);
  EXPECT_EQ(c.workers, 3);
  EXPECT_EQ(c.port, 9000);
  EXPECT_TRUE(c.fsync);
  EXPECT_EQ(c.proposer.min_area, 100);
  EXPECT_DOUBLE_EQ(c.proposer.nms_iou, 0.4);
  EXPECT_ERROR_CODE(ServiceConfig::parse("colour = blue\n"), ErrorCode::Configuration);
  EXPECT_ERROR_CODE(ServiceConfig::parse("workers = many\n"), ErrorCode::Configuration);
  EXPECT_ERROR_CODE(ServiceConfig::parse("no equals sign\n"), ErrorCode::Configuration);
}

TEST(Config, ShippedFileLoadsAndEnvironmentOverrides) {
  const auto shipped = ServiceConfig::load(civiclens::testing::config_dir() / "civiclens.conf");
  EXPECT_NO_THROW(shipped.validate());
  EXPECT_DOUBLE_EQ(shipped.threshold, 0.80);
  EXPECT_TRUE(std::filesystem::exists(shipped.rules));

  ::setenv(kDataDirEnv, "/tmp/elsewhere", 1);
  const auto overridden = ServiceConfig::load(civiclens::testing::config_dir() / "civiclens.conf");
  ::unsetenv(kDataDirEnv);
  EXPECT_EQ(overridden.data_dir, std::filesystem::path("/tmp/elsewhere"));
}

TEST(Config, ValidateListsEveryProblem) {
  ServiceConfig c;
  c.threshold = 0;
  c.workers = 0;
  c.page_size = 0;
  try {
    c.validate();
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::Configuration);
    for (const char* field : {"threshold", "workers", "page_size"})
      EXPECT_NE(std::string(e.what()).find(field), std::string::npos) << field;
  }
}

// ---------------------------------------------------------------------------
// Queries and heatmap

TEST(Paging, ConcatenationEqualsFullResult) {
  std::map<std::string, workflow::Case> store;
  UlidGenerator gen(3);
  const auto t0 = parse_iso8601("2022-03-01T08:00:00Z");
  for (int i = 0; i < 9; ++i) {
    const auto id = gen.next(t0 + std::chrono::minutes(i));
    store[id] = make_case(id, i % 2 ? CaseStatus::PendingReview : CaseStatus::Notified, t0 + std::chrono::minutes(i),
                          IssueClass::WasteDisposal);
  }
  CaseFilter f;
  f.status = CaseStatus::Notified;  // 5 matches
  const auto all = page_cases(store, f, std::nullopt, 100);
  ASSERT_EQ(all.items.size(), 5u);
  EXPECT_FALSE(all.next_cursor.has_value());

  std::vector<std::string> seen;
  std::optional<std::string> cursor;
  int pages = 0;
  do {
    const auto p = page_cases(store, f, cursor, 2);
    for (const auto& c : p.items) seen.push_back(c.id);
    cursor = p.next_cursor;
    ++pages;
  } while (cursor);
  EXPECT_EQ(pages, 3);
  std::vector<std::string> expect;
  for (const auto& c : all.items) expect.push_back(c.id);
  EXPECT_EQ(seen, expect);
  EXPECT_TRUE(std::is_sorted(seen.begin(), seen.end()));

  EXPECT_TRUE(page_cases({}, {}, std::nullopt, 10).items.empty());
  EXPECT_FALSE(page_cases({}, {}, std::nullopt, 10).next_cursor.has_value());
  EXPECT_ERROR_CODE(page_cases(store, f, std::nullopt, 0), ErrorCode::Validation);
}

TEST(Paging, CursorRules) {
  EXPECT_EQ(decode_cursor(encode_cursor(kIdA)), kIdA);
  EXPECT_ERROR_CODE(decode_cursor("zzz"), ErrorCode::BadCursor);
  EXPECT_ERROR_CODE(decode_cursor(""), ErrorCode::BadCursor);
  EXPECT_ERROR_CODE(decode_cursor(std::string(52, '0')), ErrorCode::BadCursor);
}

TEST(Filter, StatusClassAndTimeRange) {
  const auto t0 = parse_iso8601("2022-03-01T08:00:00Z");
  auto c = make_case(kIdA, CaseStatus::Dispatched, t0, IssueClass::WasteDisposal);
  CaseFilter f;
  EXPECT_TRUE(f.matches(c));
  f.cls = IssueClass::WasteDisposal;
  EXPECT_TRUE(f.matches(c));
  c.override_ = workflow::Override{IssueClass::InfrastructureDamage, "op", t0};
  EXPECT_FALSE(f.matches(c));  // final class wins
  f = {};
  f.since = t0;
  f.until = t0 + std::chrono::seconds(1);
  EXPECT_TRUE(f.matches(c));
  f.until = t0;
  EXPECT_FALSE(f.matches(c));
  f = {};
  f.status = CaseStatus::PendingReview;
  EXPECT_FALSE(f.matches(c));
}

TEST(Heatmap, CenterOfSingleCell) {
  const GeoBox b{0, 2, 0, 2};
  const std::vector<workflow::GeoPoint> pts = {{1, 1}};
  const auto g = bin_locations(pts, b, 1, 1);
  EXPECT_EQ(g.cells, (std::vector<std::vector<std::uint64_t>>{{1}}));
  const auto none = bin_locations({}, b, 3, 2);
  EXPECT_EQ(none.cells, (std::vector<std::vector<std::uint64_t>>(3, std::vector<std::uint64_t>(2, 0))));
}

TEST(Heatmap, UniformPointsMatchBinningOracle) {
  const GeoBox b;
  std::mt19937_64 rng(100);
  std::uniform_real_distribution<double> lat(b.lat_min, b.lat_max), lon(b.lon_min, b.lon_max);
  std::vector<workflow::GeoPoint> pts;
  for (int i = 0; i < 100; ++i) pts.push_back({lat(rng), lon(rng)});
  pts.push_back({b.lat_max, b.lon_max});  // max corner is inside
  pts.push_back({b.lat_min - 0.01, b.lon_min});
  const auto g = bin_locations(pts, b, 2, 2);
  const double mid_lat = (b.lat_min + b.lat_max) / 2, mid_lon = (b.lon_min + b.lon_max) / 2;
  std::uint64_t oracle[2][2] = {};
  std::uint64_t overflow = 0;
  for (const auto& p : pts) {
    if (p.lat < b.lat_min || p.lat > b.lat_max || p.lon < b.lon_min || p.lon > b.lon_max) {
      ++overflow;
      continue;
    }
    ++oracle[p.lat >= mid_lat][p.lon >= mid_lon];
  }
  std::uint64_t sum = 0;
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 2; ++c) {
      EXPECT_EQ(g.cells[r][c], oracle[r][c]);
      sum += g.cells[r][c];
    }
  EXPECT_EQ(sum, 101u);
  EXPECT_EQ(g.overflow, overflow);
  EXPECT_EQ(sum + g.overflow, g.matched);
  EXPECT_ERROR_CODE(bin_locations(pts, GeoBox{1, 0, 0, 1}, 2, 2), ErrorCode::Validation);
  EXPECT_ERROR_CODE(bin_locations(pts, b, 0, 2), ErrorCode::Validation);
}

// ---------------------------------------------------------------------------
// Service in-process

TEST(ServiceHost, HighConfidenceCaseReachesNotified) {
  TempDir dir("svcNotify");
  Service svc(config_for(dir.path()), fixed_pipeline(IssueClass::InfrastructureDamage));
  EXPECT_FALSE(svc.process_next().has_value());
  EXPECT_EQ(svc.last_seq(), 0u);

  const auto r = svc.submit_case(scene_pnm(IssueClass::InfrastructureDamage, 5), {44.43, 26.10},
                                 workflow::Channel::MobileApp);
  EXPECT_FALSE(r.duplicate);
  EXPECT_TRUE(is_ulid(r.id));
  const auto fresh = svc.get_case(r.id);
  ASSERT_TRUE(fresh);
  EXPECT_EQ(fresh->status, CaseStatus::Received);
  EXPECT_TRUE(std::filesystem::exists(svc.blob_path(*fresh)));
  EXPECT_EQ(svc.query_cases({}, std::nullopt).items.size(), 1u);

  EXPECT_EQ(svc.process_next(), r.id);
  drain(svc);
  const auto c = svc.get_case(r.id);
  ASSERT_TRUE(c);
  EXPECT_EQ(c->status, CaseStatus::Notified);
  ASSERT_TRUE(c->report);
  ASSERT_TRUE(c->message);
  EXPECT_EQ(c->report->department, "Roads Department");
  EXPECT_NE(c->message->body.find(r.id), std::string::npos);
  for (const char* stage : {"preprocess", "propose", "classify", "report", "notify"})
    EXPECT_TRUE(c->stage_timings.count(stage)) << stage;
  EXPECT_FALSE(c->failure.has_value());

  const auto log = dir / kEventLogFile;
  EXPECT_EQ(count_kind(log, EventKind::Dispatched, r.id), 1u);
  EXPECT_EQ(count_kind(log, EventKind::Notified, r.id), 1u);

  // Reads append nothing.
  const auto seq = svc.last_seq();
  svc.get_case(r.id);
  svc.query_cases({}, std::nullopt);
  svc.review_metrics();
  svc.heatmap({}, {}, 4, 4);
  EXPECT_EQ(svc.last_seq(), seq);
}

TEST(ServiceHost, IdempotencyAndValidation) {
  TempDir dir("svcIdem");
  Service svc(config_for(dir.path()), fixed_pipeline());
  const auto a = svc.submit_case(gray_pnm(), {44.4, 26.1}, workflow::Channel::Web, "key-1");
  const auto b = svc.submit_case(gray_pnm(), {44.4, 26.1}, workflow::Channel::Web, "key-1");
  EXPECT_EQ(a.id, b.id);
  EXPECT_TRUE(b.duplicate);
  EXPECT_EQ(svc.case_count(), 1u);
  EXPECT_EQ(count_kind(dir / kEventLogFile, EventKind::Submitted), 1u);

  try {
    svc.submit_case(gray_pnm(), {91, 26.1}, workflow::Channel::Web);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::Validation);
    EXPECT_NE(std::string(e.what()).find("lat"), std::string::npos);
  }
  EXPECT_ERROR_CODE(svc.submit_case(gray_pnm(), {44, 181}, workflow::Channel::Web), ErrorCode::Validation);
  const std::string junk = "GIF89a....";
  EXPECT_ERROR_CODE(svc.submit_case(std::span(reinterpret_cast<const std::uint8_t*>(junk.data()), junk.size()),
                                    {44, 26}, workflow::Channel::Web),
                    ErrorCode::UnsupportedEncoding);
  EXPECT_EQ(svc.case_count(), 1u);
}

TEST(ServiceHost, LowConfidenceGoesToReviewThenOverride) {
  TempDir dir("svcReview");
  Service svc(config_for(dir.path()), fixed_pipeline());
  const auto id = svc.submit_case(gray_pnm(), {44.4, 26.1}, workflow::Channel::Email).id;
  drain(svc);
  auto c = svc.get_case(id);
  ASSERT_TRUE(c);
  EXPECT_EQ(c->status, CaseStatus::PendingReview);
  EXPECT_FALSE(c->report.has_value());
  ASSERT_TRUE(c->prediction);
  EXPECT_NEAR(c->prediction->confidence, 1.0 / 3.0, 1e-6);
  EXPECT_EQ(svc.query_cases({CaseStatus::PendingReview, {}, {}, {}}, std::nullopt).items.size(), 1u);

  const auto o = svc.override_case(id, IssueClass::WasteDisposal, "alice");
  EXPECT_EQ(o.status, CaseStatus::Dispatched);
  drain(svc);
  c = svc.get_case(id);
  EXPECT_EQ(c->status, CaseStatus::Notified);
  EXPECT_EQ(c->report->cls, IssueClass::WasteDisposal);
  EXPECT_NE(c->message->body.find("waste disposal"), std::string::npos);

  try {
    svc.override_case(id, IssueClass::InfrastructureDamage, "bob");
    FAIL();
  } catch (const Conflict& e) {
    EXPECT_EQ(e.code(), ErrorCode::IllegalTransition);
  }
  EXPECT_THROW(svc.reject_case(id, "bob", "late"), Conflict);
  EXPECT_ERROR_CODE(svc.override_case("01FZ9999999999999999999999", IssueClass::WasteDisposal, "x"),
                    ErrorCode::NotFound);

  const auto id2 = svc.submit_case(gray_pnm(), {44.4, 26.1}, workflow::Channel::Web).id;
  drain(svc);
  const auto rej = svc.reject_case(id2, "bob", "not an issue");
  EXPECT_EQ(rej.status, CaseStatus::Rejected);
  EXPECT_FALSE(svc.process_next().has_value());

  const auto m = svc.review_metrics();
  EXPECT_EQ(m.confusion.total(), 1u);
  EXPECT_EQ(m.status_counts.at("Notified"), 1u);
  EXPECT_EQ(m.status_counts.at("Rejected"), 1u);
}

TEST(ServiceHost, ExportCorrections) {
  TempDir dir("svcExport");
  Service svc(config_for(dir.path()), fixed_pipeline());
  const auto before = now_utc();
  std::vector<std::string> ids;
  for (int i = 0; i < 3; ++i)
    ids.push_back(svc.submit_case(scene_pnm(IssueClass::WasteDisposal, 10 + i), {44.4, 26.1}, workflow::Channel::Web).id);
  drain(svc);
  // Zero weights predict class 0, so the last override is a confirmation.
  svc.override_case(ids[0], IssueClass::WasteDisposal, "a");
  svc.override_case(ids[1], IssueClass::IllegalParkingMisc, "a");
  svc.override_case(ids[2], IssueClass::InfrastructureDamage, "a");
  const auto recs = svc.corrections(before);
  ASSERT_EQ(recs.size(), 3u);
  EXPECT_EQ(std::count_if(recs.begin(), recs.end(), [](const auto& r) { return r.confirmation; }), 1);

  const auto out = dir / "export" / "corrections.jsonl";
  EXPECT_EQ(svc.export_corrections(before, out), 3u);
  const auto m = corpus::load_manifest(out);
  ASSERT_EQ(m.size(), 3u);
  std::multiset<IssueClass> classes;
  for (const auto& r : m.records) {
    classes.insert(r.cls);
    EXPECT_FALSE(r.regions.empty());
    EXPECT_TRUE(std::filesystem::exists(m.image_file(r)));
  }
  EXPECT_EQ(classes, (std::multiset<IssueClass>{IssueClass::WasteDisposal, IssueClass::IllegalParkingMisc,
                                                IssueClass::InfrastructureDamage}));

  const auto empty_out = dir / "export" / "none.jsonl";
  EXPECT_EQ(svc.export_corrections(now_utc() + std::chrono::hours(24), empty_out), 0u);
  EXPECT_TRUE(std::filesystem::exists(empty_out));
  EXPECT_EQ(read_file(empty_out), "");
}

TEST(ServiceHost, RestartReplaysToTheSameStore) {
  TempDir dir("svcRestart");
  std::vector<json> live;
  std::string queued;
  {
    Service svc(config_for(dir.path()), fixed_pipeline());
    for (int i = 0; i < 4; ++i) svc.submit_case(gray_pnm(64, 64, 0.2 * i), {44.4, 26.1}, workflow::Channel::Web, "k" + std::to_string(i));
    svc.process_next();  // one case runs to rest, the rest stay Received
    queued = svc.submit_case(gray_pnm(), {44.4, 26.1}, workflow::Channel::Web).id;
    for (const auto& c : svc.query_cases({}, std::nullopt, 100).items) live.push_back(to_json(c));
  }
  const auto replayed = replay(dir / kEventLogFile);
  ASSERT_EQ(replayed.cases.size(), live.size());
  std::size_t i = 0;
  for (const auto& [id, c] : replayed.cases) EXPECT_EQ(to_json(c), live[i++]);

  Service again(config_for(dir.path()), fixed_pipeline());
  EXPECT_EQ(again.case_count(), 5u);
  EXPECT_EQ(again.queue_depth(), 4u);
  EXPECT_TRUE(again.submit_case(gray_pnm(), {44.4, 26.1}, workflow::Channel::Web, "k2").duplicate);
  drain(again);
  for (const auto& c : again.query_cases({}, std::nullopt, 100).items)
    EXPECT_EQ(c.status, CaseStatus::PendingReview) << c.id;
}

TEST(ServiceHost, WorkerThreadsDrainTheQueue) {
  TempDir dir("svcWorkers");
  auto cfg = config_for(dir.path());
  cfg.workers = 2;
  Service svc(cfg, fixed_pipeline(IssueClass::IllegalParkingMisc));
  svc.start();
  for (int i = 0; i < 6; ++i) svc.submit_case(gray_pnm(80, 60), {44.4, 26.1}, workflow::Channel::Web);
  ASSERT_TRUE(svc.wait_idle(std::chrono::seconds(60)));
  svc.stop();
  for (const auto& c : svc.query_cases({}, std::nullopt, 100).items) EXPECT_EQ(c.status, CaseStatus::Notified);
  // seq gap-free and strictly increasing
  const auto events = read_events(dir / kEventLogFile);
  for (std::size_t i = 0; i < events.size(); ++i) EXPECT_EQ(events[i].seq, i + 1);
}

// ---------------------------------------------------------------------------
// HTTP surface

class HttpTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = std::make_unique<TempDir>("http");
    svc_ = std::make_unique<Service>(config_for(dir_->path()), fixed_pipeline());
    api_ = std::make_unique<HttpApi>(*svc_);
    port_ = api_->bind("127.0.0.1", 0);
    server_ = std::thread([this] { api_->run(); });
    client_ = std::make_unique<httplib::Client>("127.0.0.1", port_);
    for (int i = 0; i < 50 && !client_->Get("/healthz"); ++i) std::this_thread::sleep_for(std::chrono::milliseconds(20));
  }
  void TearDown() override {
    api_->stop();
    server_.join();
  }

  httplib::Result submit(const std::vector<std::uint8_t>& img, const std::string& lat, const std::string& key = {}) {
    httplib::MultipartFormDataItems items = {
        {"image", std::string(img.begin(), img.end()), "photo.ppm", "image/x-portable-pixmap"},
        {"lat", lat, "", ""},
        {"lon", "26.1", "", ""},
        {"channel", "mobile_app", "", ""}};
    httplib::Headers headers;
    if (!key.empty()) headers.emplace("Idempotency-Key", key);
    return client_->Post("/cases", headers, items);
  }

  std::unique_ptr<TempDir> dir_;
  std::unique_ptr<Service> svc_;
  std::unique_ptr<HttpApi> api_;
  std::thread server_;
  int port_ = 0;
  std::unique_ptr<httplib::Client> client_;
};

TEST_F(HttpTest, SubmitQueryAndReview) {
  auto r = submit(gray_pnm(), "44.41", "abc");
  ASSERT_TRUE(r);
  EXPECT_EQ(r->status, 201);
  const auto id = json::parse(r->body).at("id").get<std::string>();
  r = submit(gray_pnm(), "44.41", "abc");
  EXPECT_EQ(r->status, 200);
  EXPECT_EQ(json::parse(r->body).at("id"), id);
  EXPECT_TRUE(json::parse(r->body).at("duplicate").get<bool>());

  r = submit(gray_pnm(), "91");
  EXPECT_EQ(r->status, 400);
  EXPECT_NE(json::parse(r->body).at("message").get<std::string>().find("lat"), std::string::npos);

  drain(*svc_);
  r = client_->Get("/cases/" + id);
  ASSERT_EQ(r->status, 200);
  const auto c = json::parse(r->body);
  EXPECT_EQ(c.at("status"), "PendingReview");
  EXPECT_EQ(c.at("id"), id);
  EXPECT_EQ(client_->Get("/cases/" + id + "/report")->status, 404);
  EXPECT_EQ(client_->Get("/cases/01FZ9999999999999999999999")->status, 404);
  const auto img = client_->Get("/cases/" + id + "/image");
  EXPECT_EQ(img->status, 200);
  EXPECT_EQ(img->body.substr(0, 2), "P6");

  r = client_->Get("/cases?status=PendingReview&limit=10");
  ASSERT_EQ(r->status, 200);
  EXPECT_EQ(json::parse(r->body).at("items").size(), 1u);
  EXPECT_TRUE(json::parse(r->body).at("next_cursor").is_null());
  EXPECT_EQ(client_->Get("/cases?cursor=nope")->status, 400);
  EXPECT_EQ(client_->Get("/cases?status=Lost")->status, 400);
  EXPECT_EQ(client_->Get("/cases?limit=0")->status, 400);

  r = client_->Post("/cases/" + id + "/override", R"({"class": "WasteDisposal", "operator": "alice"})",
                    "application/json");
  ASSERT_EQ(r->status, 200);
  EXPECT_EQ(json::parse(r->body).at("status"), "Dispatched");
  r = client_->Post("/cases/" + id + "/reject", R"({"operator": "bob", "reason": "x"})", "application/json");
  EXPECT_EQ(r->status, 409);
  EXPECT_EQ(client_->Post("/cases/" + id + "/override", "{bad", "application/json")->status, 400);

  drain(*svc_);
  r = client_->Get("/cases/" + id + "/report");
  ASSERT_EQ(r->status, 200);
  EXPECT_EQ(json::parse(r->body).at("department"), "Sanitation Department");
  r = client_->Get("/cases/" + id + "/message");
  ASSERT_EQ(r->status, 200);
  EXPECT_NE(json::parse(r->body).at("body").get<std::string>().find(id), std::string::npos);

  r = client_->Get("/metrics/classification");
  ASSERT_EQ(r->status, 200);
  const auto m = json::parse(r->body);
  EXPECT_EQ(m.at("reviewed"), 1);
  EXPECT_EQ(m.at("confusion").size(), 3u);
  EXPECT_EQ(m.at("classes").size(), 3u);

  r = client_->Get("/metrics/heatmap?rows=2&cols=2&lat_min=44.35&lat_max=44.55&lon_min=26.0&lon_max=26.2");
  ASSERT_EQ(r->status, 200);
  const auto h = json::parse(r->body);
  EXPECT_EQ(h.at("matched"), 1);
  // lat 44.41 is below the midpoint: row 0 holds the low latitudes.
  EXPECT_EQ(h.at("cells")[0][0].get<int>() + h.at("cells")[0][1].get<int>(), 1);
  EXPECT_EQ(h.at("cells")[1][0].get<int>() + h.at("cells")[1][1].get<int>(), 0);
  EXPECT_EQ(client_->Get("/metrics/heatmap?lat_min=2&lat_max=1")->status, 400);

  r = client_->Get("/config");
  EXPECT_DOUBLE_EQ(json::parse(r->body).at("threshold").get<double>(), 0.80);
  r = client_->Get("/healthz");
  EXPECT_EQ(json::parse(r->body).at("status"), "ok");
  EXPECT_EQ(json::parse(r->body).at("cases"), 1);
}

TEST_F(HttpTest, ConcurrentOverridesFirstWriterWins) {
  const auto id = svc_->submit_case(gray_pnm(), {44.4, 26.1}, workflow::Channel::Web).id;
  drain(*svc_);
  int statuses[2] = {0, 0};
  std::thread a([&] {
    httplib::Client c("127.0.0.1", port_);
    statuses[0] = c.Post("/cases/" + id + "/override", R"({"class": "WasteDisposal", "operator": "a"})",
                         "application/json")->status;
  });
  std::thread b([&] {
    httplib::Client c("127.0.0.1", port_);
    statuses[1] = c.Post("/cases/" + id + "/reject", R"({"operator": "b", "reason": "dup"})", "application/json")->status;
  });
  a.join();
  b.join();
  std::sort(std::begin(statuses), std::end(statuses));
  EXPECT_EQ(statuses[0], 200);
  EXPECT_EQ(statuses[1], 409);
  EXPECT_EQ(count_kind(dir_->path() / kEventLogFile, EventKind::Overridden) +
                count_kind(dir_->path() / kEventLogFile, EventKind::Rejected),
            1u);
}
