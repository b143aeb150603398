#include <spdlog/spdlog.h>

#include <httplib.h>

#include "civiclens/error.hpp"
#include "civiclens/service.hpp"

namespace civiclens::service {

using nlohmann::json;

namespace {

int status_for(const Error& e) {
  if (dynamic_cast<const Conflict*>(&e)) return 409;
  switch (e.code()) {
    case ErrorCode::InvalidImage:
    case ErrorCode::UnsupportedEncoding:
    case ErrorCode::InvalidParameter:
    case ErrorCode::Validation:
    case ErrorCode::Parse:
    case ErrorCode::BadCursor:
      return 400;
    case ErrorCode::NotFound:
      return 404;
    case ErrorCode::IllegalTransition:
      return 409;
    default:
      return 500;
  }
}

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& code, const std::string& message) {
  send_json(res, status, {{"error", code}, {"message", message}});
}

// Wraps a handler so every failure becomes a JSON error body.
template <class F>
httplib::Server::Handler guarded(F f) {
  return [f](const httplib::Request& req, httplib::Response& res) {
    try {
      f(req, res);
    } catch (const Error& e) {
      const int status = status_for(e);
      if (status >= 500) spdlog::error("{} {}: {}", req.method, req.path, e.what());
      send_error(res, status, dynamic_cast<const Conflict*>(&e) ? "Conflict" : to_string(e.code()), e.what());
    } catch (const json::exception& e) {
      send_error(res, 400, "Parse", std::string("bad JSON body: ") + e.what());
    } catch (const std::exception& e) {
      spdlog::error("{} {}: {}", req.method, req.path, e.what());
      send_error(res, 500, "Internal", e.what());
    }
  };
}

std::string form_field(const httplib::Request& req, const std::string& name) {
  if (req.has_file(name)) return req.get_file_value(name).content;
  if (req.has_param(name)) return req.get_param_value(name);
  throw Error(ErrorCode::Validation, "missing field " + name);
}

double number_field(const httplib::Request& req, const std::string& name) {
  const auto text = form_field(req, name);
  try {
    std::size_t used = 0;
    const double v = std::stod(text, &used);
    if (used != text.size()) throw std::invalid_argument(text);
    return v;
  } catch (const std::exception&) {
    throw Error(ErrorCode::Validation, name + " is not a number: " + text);
  }
}

std::optional<std::string> param(const httplib::Request& req, const std::string& name) {
  if (!req.has_param(name)) return std::nullopt;
  auto v = req.get_param_value(name);
  if (v.empty()) return std::nullopt;
  return v;
}

int int_param(const httplib::Request& req, const std::string& name, int fallback, int lo, int hi) {
  const auto v = param(req, name);
  if (!v) return fallback;
  try {
    std::size_t used = 0;
    const int i = std::stoi(*v, &used);
    if (used != v->size() || i < lo || i > hi) throw std::out_of_range(*v);
    return i;
  } catch (const std::exception&) {
    throw Error(ErrorCode::Validation,
                name + " must be an integer in [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
  }
}

double double_param(const httplib::Request& req, const std::string& name, double fallback) {
  const auto v = param(req, name);
  if (!v) return fallback;
  try {
    std::size_t used = 0;
    const double d = std::stod(*v, &used);
    if (used != v->size()) throw std::invalid_argument(*v);
    return d;
  } catch (const std::exception&) {
    throw Error(ErrorCode::Validation, name + " is not a number");
  }
}

CaseFilter filter_from(const httplib::Request& req) {
  CaseFilter f;
  if (const auto s = param(req, "status")) {
    f.status = workflow::parse_status(*s);
    if (!f.status) throw Error(ErrorCode::Validation, "unknown status " + *s);
  }
  if (const auto c = param(req, "class")) {
    f.cls = parse_class_token(*c);
    if (!f.cls) throw Error(ErrorCode::Validation, "unknown class " + *c);
  }
  if (const auto s = param(req, "since")) f.since = parse_iso8601(*s);
  if (const auto u = param(req, "until")) f.until = parse_iso8601(*u);
  return f;
}

json report_json(const Service::ReviewMetrics& m) {
  json j;
  j["status_counts"] = m.status_counts;
  json cm = json::array();
  for (int t = 0; t < m.confusion.k; ++t) {
    json row = json::array();
    for (int p = 0; p < m.confusion.k; ++p) row.push_back(m.confusion.at(t, p));
    cm.push_back(row);
  }
  j["classes"] = json::array();
  for (IssueClass c : kAllClasses) j["classes"].push_back(std::string(class_token(c)));
  j["confusion"] = cm;
  j["reviewed"] = m.confusion.total();
  if (!m.report) {
    j["report"] = nullptr;
    return j;
  }
  const auto& r = *m.report;
  json per = json::array();
  for (std::size_t i = 0; i < r.per_class.size(); ++i) {
    const auto& c = r.per_class[i];
    per.push_back({{"class", std::string(class_token(class_from_index(static_cast<int>(i))))},
                   {"precision", c.precision},
                   {"recall", c.recall},
                   {"f1", c.f1},
                   {"support", c.support},
                   {"degenerate", c.precision_degenerate || c.recall_degenerate || c.f1_degenerate}});
  }
  j["report"] = {{"total", r.total},
                 {"accuracy", r.accuracy},
                 {"per_class", per},
                 {"macro_precision", r.macro_precision},
                 {"macro_recall", r.macro_recall},
                 {"macro_f1", r.macro_f1}};
  return j;
}

}  // namespace

struct HttpApi::Impl {
  Service& service;
  httplib::Server server;

  explicit Impl(Service& s) : service(s) { routes(); }

  void routes() {
    auto& svc = service;
    static const std::string id_re = "([0-9A-HJKMNP-TV-Z]{26})";

    server.Post("/cases", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
                  if (!req.is_multipart_form_data()) throw Error(ErrorCode::Validation, "expected multipart/form-data");
                  if (!req.has_file("image")) throw Error(ErrorCode::Validation, "missing field image");
                  const auto& bytes = req.get_file_value("image").content;
                  const double lat = number_field(req, "lat");
                  const double lon = number_field(req, "lon");
                  const auto channel_text = form_field(req, "channel");
                  const auto channel = workflow::parse_channel(channel_text);
                  if (!channel) throw Error(ErrorCode::Validation, "channel must be mobile_app, web or email");
                  std::optional<std::string> key;
                  if (req.has_header("Idempotency-Key")) key = req.get_header_value("Idempotency-Key");
                  const auto r = svc.submit_case(
                      std::span(reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size()), {lat, lon},
                      *channel, key);
                  send_json(res, r.duplicate ? 200 : 201, {{"id", r.id}, {"duplicate", r.duplicate}});
                }));

    server.Get("/cases", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
                 const auto filter = filter_from(req);
                 const int limit = int_param(req, "limit", svc.config().page_size, 1, 1000);
                 const auto page = svc.query_cases(filter, param(req, "cursor"), static_cast<std::size_t>(limit));
                 json items = json::array();
                 for (const auto& c : page.items) items.push_back(to_json(c));
                 send_json(res, 200, {{"items", items},
                                      {"next_cursor", page.next_cursor ? json(*page.next_cursor) : json(nullptr)}});
               }));

    auto find = [&svc](const httplib::Request& req) {
      auto c = svc.get_case(req.matches[1]);
      if (!c) throw Error(ErrorCode::NotFound, "no case " + std::string(req.matches[1]));
      return *c;
    };

    server.Get("/cases/" + id_re, guarded([find](const httplib::Request& req, httplib::Response& res) {
                 send_json(res, 200, to_json(find(req)));
               }));

    server.Get("/cases/" + id_re + "/report", guarded([find](const httplib::Request& req, httplib::Response& res) {
                 const auto c = find(req);
                 if (!c.report) throw Error(ErrorCode::NotFound, "case " + c.id + " has no dispatch report");
                 send_json(res, 200, to_json(*c.report));
               }));

    server.Get("/cases/" + id_re + "/message", guarded([find](const httplib::Request& req, httplib::Response& res) {
                 const auto c = find(req);
                 if (!c.message) throw Error(ErrorCode::NotFound, "case " + c.id + " has no citizen message");
                 send_json(res, 200, to_json(*c.message));
               }));

    server.Get("/cases/" + id_re + "/image",
               guarded([find, &svc](const httplib::Request& req, httplib::Response& res) {
                 const auto c = find(req);
                 std::ifstream in(svc.blob_path(c), std::ios::binary);
                 if (!in) throw Error(ErrorCode::Io, "blob missing for case " + c.id);
                 std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
                 res.set_content(bytes, "image/x-portable-anymap");
               }));

    server.Post("/cases/" + id_re + "/override",
                guarded([&svc](const httplib::Request& req, httplib::Response& res) {
                  const auto body = json::parse(req.body);
                  if (!body.contains("class")) throw Error(ErrorCode::Validation, "missing field class");
                  if (!body.contains("operator")) throw Error(ErrorCode::Validation, "missing field operator");
                  const auto text = body.at("class").get<std::string>();
                  const auto cls = parse_class_token(text);
                  if (!cls) throw Error(ErrorCode::Validation, "unknown class " + text);
                  const auto c = svc.override_case(req.matches[1], *cls, body.at("operator").get<std::string>());
                  send_json(res, 200, to_json(c));
                }));

    server.Post("/cases/" + id_re + "/reject",
                guarded([&svc](const httplib::Request& req, httplib::Response& res) {
                  const auto body = json::parse(req.body);
                  if (!body.contains("operator")) throw Error(ErrorCode::Validation, "missing field operator");
                  const auto c = svc.reject_case(req.matches[1], body.at("operator").get<std::string>(),
                                                 body.value("reason", std::string{}));
                  send_json(res, 200, to_json(c));
                }));

    server.Get("/metrics/classification", guarded([&svc](const httplib::Request&, httplib::Response& res) {
                 send_json(res, 200, report_json(svc.review_metrics()));
               }));

    server.Get("/metrics/heatmap", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
                 GeoBox b;
                 b.lat_min = double_param(req, "lat_min", b.lat_min);
                 b.lat_max = double_param(req, "lat_max", b.lat_max);
                 b.lon_min = double_param(req, "lon_min", b.lon_min);
                 b.lon_max = double_param(req, "lon_max", b.lon_max);
                 const int rows = int_param(req, "rows", 8, 1, 1000);
                 const int cols = int_param(req, "cols", 8, 1, 1000);
                 const auto g = svc.heatmap(filter_from(req), b, rows, cols);
                 send_json(res, 200,
                           {{"bounds",
                             {{"lat_min", g.bounds.lat_min},
                              {"lat_max", g.bounds.lat_max},
                              {"lon_min", g.bounds.lon_min},
                              {"lon_max", g.bounds.lon_max}}},
                            {"rows", g.rows},
                            {"cols", g.cols},
                            {"cells", g.cells},
                            {"overflow", g.overflow},
                            {"matched", g.matched}});
               }));

    server.Get("/config", guarded([&svc](const httplib::Request&, httplib::Response& res) {
                 const auto& c = svc.config();
                 json classes = json::array();
                 for (IssueClass k : kAllClasses) classes.push_back(std::string(class_token(k)));
                 send_json(res, 200, {{"threshold", c.threshold},
                                      {"page_size", c.page_size},
                                      {"workers", c.workers},
                                      {"classes", classes}});
               }));

    server.Get("/healthz", guarded([&svc](const httplib::Request&, httplib::Response& res) {
                 send_json(res, 200, {{"status", "ok"},
                                      {"cases", svc.case_count()},
                                      {"queue_depth", svc.queue_depth()},
                                      {"last_seq", svc.last_seq()}});
               }));
  }
};

HttpApi::HttpApi(Service& service) : impl_(std::make_unique<Impl>(service)) {}

HttpApi::~HttpApi() { stop(); }

int HttpApi::bind(const std::string& host, int port) {
  if (port == 0) {
    const int p = impl_->server.bind_to_any_port(host);
    if (p <= 0) throw Error(ErrorCode::Io, "cannot bind " + host);
    return p;
  }
  if (!impl_->server.bind_to_port(host, port)) {
    throw Error(ErrorCode::Io, "cannot bind " + host + ":" + std::to_string(port));
  }
  return port;
}

void HttpApi::run() { impl_->server.listen_after_bind(); }

void HttpApi::stop() {
  if (impl_) impl_->server.stop();
}

}  // namespace civiclens::service
