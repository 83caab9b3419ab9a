#pragma once

// Operator suggestions for abnormal results. The rule table is data (see
// data/abnormal_rules.json); nothing here hard-codes a threshold.

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "umphcs/records.hpp"

namespace umphcs::advice {

struct Rule {
  std::string id;
  rec::TestKind kind = rec::TestKind::Temperature;
  std::string field;  // payload field, or "trend" for the weight screen
  std::string op;     // ">", ">=", "<", "<=", "flagged"
  double threshold = 0.0;
  std::string message;
};

/// Throws std::invalid_argument naming the offending rule.
std::vector<Rule> parse_rules(std::string_view json_text);
std::vector<Rule> load_rules(const std::filesystem::path& path);

/// Rules that fire for `record`. Trend rules look at the patient's history in
/// `store` (the record itself included if saved).
std::vector<Rule> evaluate(const std::vector<Rule>& rules, const rec::TestRecord& record,
                           const rec::RecordStore& store, const rec::ScreeningPolicy& policy = {});

}  // namespace umphcs::advice
