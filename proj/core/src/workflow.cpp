#include "civiclens/workflow.hpp"

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "civiclens/error.hpp"
#include "civiclens/metrics.hpp"

namespace civiclens::workflow {

std::string_view token(CaseStatus s) noexcept {
  switch (s) {
    case CaseStatus::Received: return "Received";
    case CaseStatus::Preprocessed: return "Preprocessed";
    case CaseStatus::Classified: return "Classified";
    case CaseStatus::PendingReview: return "PendingReview";
    case CaseStatus::Dispatched: return "Dispatched";
    case CaseStatus::Notified: return "Notified";
    case CaseStatus::Rejected: return "Rejected";
  }
  return "?";
}

std::string_view token(Channel c) noexcept {
  switch (c) {
    case Channel::MobileApp: return "mobile_app";
    case Channel::Web: return "web";
    case Channel::Email: return "email";
  }
  return "?";
}

std::string_view token(Priority p) noexcept {
  switch (p) {
    case Priority::High: return "high";
    case Priority::Normal: return "normal";
    case Priority::Low: return "low";
  }
  return "?";
}

std::optional<CaseStatus> parse_status(std::string_view s) noexcept {
  for (auto v : kAllStatuses) {
    if (token(v) == s) return v;
  }
  return std::nullopt;
}

std::optional<Channel> parse_channel(std::string_view s) noexcept {
  for (auto v : {Channel::MobileApp, Channel::Web, Channel::Email}) {
    if (token(v) == s) return v;
  }
  return std::nullopt;
}

std::optional<Priority> parse_priority(std::string_view s) noexcept {
  for (auto v : {Priority::High, Priority::Normal, Priority::Low}) {
    if (token(v) == s) return v;
  }
  return std::nullopt;
}

bool is_terminal(CaseStatus s) noexcept { return s == CaseStatus::Notified || s == CaseStatus::Rejected; }

bool is_legal(CaseStatus from, CaseStatus to) noexcept {
  using S = CaseStatus;
  switch (from) {
    case S::Received: return to == S::Preprocessed;
    case S::Preprocessed: return to == S::Classified;
    case S::Classified: return to == S::Dispatched || to == S::PendingReview;
    case S::PendingReview: return to == S::Dispatched || to == S::Rejected;
    case S::Dispatched: return to == S::Notified;
    case S::Notified:
    case S::Rejected: return false;
  }
  return false;
}

void transition(Case& c, CaseStatus to) {
  if (!is_legal(c.status, to)) {
    throw Error(ErrorCode::IllegalTransition, "case " + c.id + ": " + std::string(token(c.status)) + " -> " +
                                                  std::string(token(to)) + " is not allowed");
  }
  c.status = to;
}

IssueClass final_class(const Case& c) {
  if (c.override_) return c.override_->cls;
  if (c.prediction) return c.prediction->cls;
  throw Error(ErrorCode::Precondition, "case " + c.id + " has no class yet");
}

TriageDecision triage(const Case& c, const model::Prediction& prediction, double threshold) {
  if (!(threshold > 0.0 && threshold <= 1.0)) {
    throw Error(ErrorCode::InvalidParameter, "threshold must lie in (0, 1]");
  }
  if (c.status != CaseStatus::Classified) {
    throw Error(ErrorCode::IllegalTransition, "case " + c.id + " cannot be triaged from " + std::string(token(c.status)));
  }
  TriageDecision d;
  d.confidence = prediction.confidence;
  d.threshold = threshold;
  d.outcome = prediction.confidence >= threshold ? CaseStatus::Dispatched : CaseStatus::PendingReview;
  return d;
}

const RegulationRule& RuleTable::lookup(IssueClass cls) const {
  const auto it = rules.find(cls);
  if (it == rules.end()) {
    throw Error(ErrorCode::Configuration, "rule table has no rule for class " + std::string(class_token(cls)));
  }
  return it->second;
}

RuleTable parse_rule_table(const std::string& jsonl) {
  RuleTable table;
  std::istringstream in(jsonl);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = "rule table line " + std::to_string(line_no) + ": ";
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::Configuration, where + e.what());
    }
    RegulationRule rule;
    try {
      const auto cls = parse_class_token(j.at("class").get<std::string>());
      if (!cls) throw Error(ErrorCode::Configuration, where + "unknown class " + j.at("class").dump());
      rule.cls = *cls;
      rule.department = j.at("department").get<std::string>();
      rule.regulation_citation = j.at("citation").get<std::string>();
      const auto prio = parse_priority(j.at("priority").get<std::string>());
      if (!prio) throw Error(ErrorCode::Configuration, where + "unknown priority " + j.at("priority").dump());
      rule.priority = *prio;
      rule.sla_hours = j.at("sla_hours").get<int>();
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::Configuration, where + e.what());
    }
    if (rule.department.empty() || rule.regulation_citation.empty() || rule.sla_hours < 1) {
      throw Error(ErrorCode::Configuration, where + "department, citation and a positive sla_hours are required");
    }
    if (!table.rules.emplace(rule.cls, rule).second) {
      throw Error(ErrorCode::Configuration, where + "second rule for class " + std::string(class_token(rule.cls)));
    }
  }
  return table;
}

namespace {

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Configuration, "cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace

RuleTable load_rule_table(const std::filesystem::path& path) { return parse_rule_table(read_text(path)); }

Templates Templates::load(const std::filesystem::path& dir) {
  return {read_text(dir / "report.txt"), read_text(dir / "message.txt")};
}

std::string render_template(const std::string& text, const std::map<std::string, std::string>& values) {
  std::string out;
  out.reserve(text.size() + 128);
  std::size_t pos = 0;
  while (true) {
    const std::size_t open = text.find("{{", pos);
    if (open == std::string::npos) {
      out.append(text, pos, std::string::npos);
      break;
    }
    const std::size_t close = text.find("}}", open + 2);
    if (close == std::string::npos) throw Error(ErrorCode::Configuration, "unterminated placeholder in template");
    out.append(text, pos, open - pos);
    std::string name = text.substr(open + 2, close - open - 2);
    const auto first = name.find_first_not_of(' ');
    const auto last = name.find_last_not_of(' ');
    name = first == std::string::npos ? "" : name.substr(first, last - first + 1);
    const auto it = values.find(name);
    if (it == values.end()) throw Error(ErrorCode::Configuration, "template placeholder {{" + name + "}} has no value");
    out += it->second;
    pos = close + 2;
  }
  return out;
}

DispatchReport generate_report(const Case& c, const RuleTable& rules, const Templates& templates,
                               Timestamp created_at) {
  const IssueClass cls = final_class(c);
  const RegulationRule& rule = rules.lookup(cls);
  DispatchReport r;
  r.case_id = c.id;
  r.department = rule.department;
  r.regulation_citation = rule.regulation_citation;
  r.cls = cls;
  r.confidence = c.prediction ? c.prediction->confidence : 1.0;
  r.location = c.location;
  r.priority = rule.priority;
  r.sla_hours = rule.sla_hours;
  r.created_at = created_at;
  const std::map<std::string, std::string> values = {
      {"case_id", c.id},
      {"department", rule.department},
      {"citation", rule.regulation_citation},
      {"class", std::string(class_token(cls))},
      {"class_name", std::string(class_plain_name(cls))},
      {"confidence_percent", std::to_string(metrics::percent(r.confidence))},
      {"reviewed", c.override_ ? "yes, by " + c.override_->op : "no"},
      {"lat", fixed(c.location.lat, 6)},
      {"lon", fixed(c.location.lon, 6)},
      {"priority", std::string(token(rule.priority))},
      {"sla_hours", std::to_string(rule.sla_hours)},
      {"submitted_at", to_iso8601(c.submitted_at)},
      {"created_at", to_iso8601(created_at)},
  };
  r.narrative = render_template(templates.report, values);
  return r;
}

CitizenMessage draft_citizen_message(const Case& c, const DispatchReport& report, const Templates& templates,
                                     Timestamp created_at) {
  if (report.case_id != c.id) throw Error(ErrorCode::Precondition, "report belongs to another case");
  const IssueClass cls = final_class(c);
  const std::map<std::string, std::string> values = {
      {"case_id", c.id},
      {"class", std::string(class_token(cls))},
      {"class_name", std::string(class_plain_name(cls))},
      {"department", report.department},
      {"sla_hours", std::to_string(report.sla_hours)},
      {"submitted_at", to_iso8601(c.submitted_at)},
      {"submitted_date", to_iso8601(c.submitted_at).substr(0, 10)},
      {"created_at", to_iso8601(created_at)},
  };
  return {c.id, created_at, render_template(templates.message, values)};
}

OverrideResult apply_override(const Case& c, IssueClass corrected, const std::string& op, Timestamp at) {
  if (c.status != CaseStatus::PendingReview) {
    throw Error(ErrorCode::IllegalTransition,
                "case " + c.id + ": override needs PendingReview, status is " + std::string(token(c.status)));
  }
  if (op.empty()) throw Error(ErrorCode::Validation, "override needs an operator");
  OverrideResult r{c, {}};
  r.updated.override_ = Override{corrected, op, at};
  transition(r.updated, CaseStatus::Dispatched);
  r.correction.case_id = c.id;
  r.correction.image_ref = c.image_ref;
  r.correction.corrected_class = corrected;
  if (c.prediction) r.correction.predicted_class = c.prediction->cls;
  r.correction.confirmation = c.prediction && c.prediction->cls == corrected;
  r.correction.op = op;
  r.correction.at = at;
  return r;
}

Case reject(const Case& c, const std::string& op, const std::string& reason, Timestamp at) {
  if (c.status != CaseStatus::PendingReview) {
    throw Error(ErrorCode::IllegalTransition,
                "case " + c.id + ": reject needs PendingReview, status is " + std::string(token(c.status)));
  }
  if (op.empty()) throw Error(ErrorCode::Validation, "rejection needs an operator");
  Case out = c;
  out.rejection = Rejection{op, reason, at};
  transition(out, CaseStatus::Rejected);
  return out;
}

}  // namespace civiclens::workflow
