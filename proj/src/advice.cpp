#include "umphcs/advice.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

#include "umphcs/error.hpp"

namespace umphcs::advice {

using ojson = nlohmann::ordered_json;

std::vector<Rule> parse_rules(std::string_view text) {
  const ojson doc = ojson::parse(text.begin(), text.end(), nullptr, false);
  if (doc.is_discarded() || !doc.is_array()) throw std::invalid_argument("rule table must be a JSON array");
  std::vector<Rule> rules;
  for (const auto& j : doc) {
    Rule r;
    r.id = j.value("id", "");
    if (r.id.empty()) throw std::invalid_argument("rule without id");
    const auto kind = rec::parse_kind(j.value("kind", ""));
    if (!kind) throw std::invalid_argument("rule " + r.id + ": unknown kind");
    r.kind = *kind;
    r.field = j.value("field", "");
    r.op = j.value("op", "");
    r.message = j.value("message", "");
    if (r.op == "flagged") {
      if (r.kind != rec::TestKind::Weight || r.field != "trend")
        throw std::invalid_argument("rule " + r.id + ": flagged applies to the weight trend only");
    } else if (r.op == ">" || r.op == ">=" || r.op == "<" || r.op == "<=") {
      if (!j.contains("threshold") || !j["threshold"].is_number())
        throw std::invalid_argument("rule " + r.id + ": missing numeric threshold");
      r.threshold = j["threshold"].get<double>();
    } else {
      throw std::invalid_argument("rule " + r.id + ": unknown op \"" + r.op + "\"");
    }
    rules.push_back(std::move(r));
  }
  return rules;
}

std::vector<Rule> load_rules(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("rules-unreadable", "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_rules(ss.str());
}

std::vector<Rule> evaluate(const std::vector<Rule>& rules, const rec::TestRecord& record,
                           const rec::RecordStore& store, const rec::ScreeningPolicy& policy) {
  std::vector<Rule> fired;
  const ojson payload = rec::payload_json(record.payload);
  for (const auto& r : rules) {
    if (r.kind != record.kind) continue;
    bool hit = false;
    if (r.op == "flagged") {
      const auto history = store.history(record.patient_id, rec::TestKind::Weight);
      hit = rec::screen_weight(history, policy).has_value();
    } else if (payload.contains(r.field) && payload[r.field].is_number()) {
      const double v = payload[r.field].get<double>();
      hit = r.op == ">" ? v > r.threshold : r.op == ">=" ? v >= r.threshold : r.op == "<" ? v < r.threshold
                                                                                        : v <= r.threshold;
    }
    if (hit) fired.push_back(r);
  }
  return fired;
}

}  // namespace umphcs::advice
