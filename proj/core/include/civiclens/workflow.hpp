#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "civiclens/clock.hpp"
#include "civiclens/model.hpp"
#include "civiclens/regions.hpp"
#include "civiclens/types.hpp"

namespace civiclens::workflow {

enum class CaseStatus { Received, Preprocessed, Classified, PendingReview, Dispatched, Notified, Rejected };
enum class Channel { MobileApp, Web, Email };
enum class Priority { High, Normal, Low };

inline constexpr std::array<CaseStatus, 7> kAllStatuses = {
    CaseStatus::Received,   CaseStatus::Preprocessed, CaseStatus::Classified, CaseStatus::PendingReview,
    CaseStatus::Dispatched, CaseStatus::Notified,     CaseStatus::Rejected};

std::string_view token(CaseStatus s) noexcept;
std::string_view token(Channel c) noexcept;
std::string_view token(Priority p) noexcept;
std::optional<CaseStatus> parse_status(std::string_view s) noexcept;
std::optional<Channel> parse_channel(std::string_view s) noexcept;
std::optional<Priority> parse_priority(std::string_view s) noexcept;

bool is_terminal(CaseStatus s) noexcept;  // Notified, Rejected

/// Received->Preprocessed->Classified->{Dispatched|PendingReview};
/// PendingReview->{Dispatched|Rejected}; Dispatched->Notified.
bool is_legal(CaseStatus from, CaseStatus to) noexcept;

struct GeoPoint {
  double lat = 0.0;
  double lon = 0.0;
  friend bool operator==(const GeoPoint&, const GeoPoint&) = default;
};

struct Override {
  IssueClass cls = IssueClass::InfrastructureDamage;
  std::string op;  // operator id
  Timestamp at{};
};

struct Rejection {
  std::string op;
  std::string reason;
  Timestamp at{};
};

struct TriageDecision {
  CaseStatus outcome = CaseStatus::PendingReview;
  double confidence = 0.0;
  double threshold = 0.8;
};

struct DispatchReport {
  std::string case_id;
  std::string department;
  std::string regulation_citation;
  IssueClass cls = IssueClass::InfrastructureDamage;
  double confidence = 0.0;
  GeoPoint location;
  Priority priority = Priority::Normal;
  int sla_hours = 0;
  Timestamp created_at{};
  std::string narrative;
};

struct CitizenMessage {
  std::string case_id;
  Timestamp created_at{};
  std::string body;
};

struct Case {
  std::string id;
  Timestamp submitted_at{};
  Channel channel = Channel::MobileApp;
  GeoPoint location;
  std::string image_ref;  // blob path relative to the data directory
  CaseStatus status = CaseStatus::Received;
  std::vector<regions::RegionProposal> proposals;
  std::optional<model::Prediction> prediction;
  std::optional<TriageDecision> triage;
  std::optional<Override> override_;
  std::optional<Rejection> rejection;
  std::optional<DispatchReport> report;
  std::optional<CitizenMessage> message;
  std::map<std::string, double> stage_timings;  // stage -> milliseconds
  std::optional<std::string> failure;            // set when a stage failed; the case is parked
};

/// Moves c to `to`; throws Error(IllegalTransition) naming both states.
void transition(Case& c, CaseStatus to);

/// Override class if present, else the predicted class. Throws
/// Error(Precondition) when neither exists.
IssueClass final_class(const Case& c);

/// confidence >= threshold dispatches; below goes to review. threshold in (0, 1].
TriageDecision triage(const Case& c, const model::Prediction& prediction, double threshold = 0.80);

struct RegulationRule {
  IssueClass cls = IssueClass::InfrastructureDamage;
  std::string department;
  std::string regulation_citation;
  Priority priority = Priority::Normal;
  int sla_hours = 72;
};

struct RuleTable {
  std::map<IssueClass, RegulationRule> rules;

  /// Throws Error(Configuration) naming the class when it has no rule.
  const RegulationRule& lookup(IssueClass cls) const;
};

/// One JSON object per line: {class, department, citation, priority, sla_hours}.
/// Duplicate classes or malformed lines raise Error(Configuration).
RuleTable parse_rule_table(const std::string& jsonl);
RuleTable load_rule_table(const std::filesystem::path& path);

/// Message text with {{placeholder}} slots.
struct Templates {
  std::string report;
  std::string message;

  /// Reads report.txt and message.txt from dir.
  static Templates load(const std::filesystem::path& dir);
};

/// Substitutes every {{name}}; an unknown name raises Error(Configuration).
std::string render_template(const std::string& text, const std::map<std::string, std::string>& values);

DispatchReport generate_report(const Case& c, const RuleTable& rules, const Templates& templates,
                               Timestamp created_at);

CitizenMessage draft_citizen_message(const Case& c, const DispatchReport& report, const Templates& templates,
                                     Timestamp created_at);

/// Human-verified label for a reviewed case, exportable as training data.
struct CorrectionRecord {
  std::string case_id;
  std::string image_ref;
  IssueClass corrected_class = IssueClass::InfrastructureDamage;
  std::optional<IssueClass> predicted_class;
  bool confirmation = false;  // operator agreed with the model
  std::string op;
  Timestamp at{};
};

struct OverrideResult {
  Case updated;
  CorrectionRecord correction;
};

/// PendingReview -> Dispatched with the operator's class.
OverrideResult apply_override(const Case& c, IssueClass corrected, const std::string& op, Timestamp at);

/// PendingReview -> Rejected.
Case reject(const Case& c, const std::string& op, const std::string& reason, Timestamp at);

}  // namespace civiclens::workflow
