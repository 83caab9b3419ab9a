#pragma once

// Scripted sessions: patients plus an ordered list of tests, each with its
// simulated ground truth and optional expected outcome. Schema in
// docs/scenario.md.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "umphcs/biosim.hpp"
#include "umphcs/diagnostics.hpp"
#include "umphcs/error.hpp"
#include "umphcs/records.hpp"
#include "umphcs/session.hpp"

namespace umphcs::scn {

/// Syntax or schema error, positioned at the offending value (1-based).
class ScenarioParseError : public Error {
 public:
  ScenarioParseError(std::size_t line, std::size_t column, const std::string& detail);
  std::size_t line() const { return line_; }
  std::size_t column() const { return column_; }

 private:
  std::size_t line_;
  std::size_t column_;
};

struct Tolerance {
  double value = 0.0;
  double tol = 0.0;
};

struct Expectation {
  std::map<std::string, Tolerance> fields;  // result field -> bound
  std::optional<dx::Audiogram> audiogram;   // exact match
  std::optional<std::string> error;         // expected error code
  bool empty() const { return fields.empty() && !audiogram && !error; }
};

struct TestSpec {
  rec::TestKind kind = rec::TestKind::Temperature;
  std::string patient;
  double truth = 0.0;  // degC, kg or lens separation in m
  bio::CuffRunParams cuff;
  bio::HearingProfile hearing;
  std::optional<double> hearing_timeout_s;
  dx::HeightInput height;
  bool cutoff = false;  // safety cutoff held during the test
  Expectation expect;
};

struct Scenario {
  std::uint64_t seed = 0;
  std::string device_id = "dev";
  std::string start_time = "2026-01-01T08:00:00Z";
  std::int64_t step_s = 60;  // taken_at spacing between tests
  ops::LinkConfig link;
  double hearing_timeout_s = 3.0;
  TemperatureCalib temperature_calib;
  TwoPointCalib weight_calib = dx::ideal_weight_calib();
  PotCalib pot;
  dx::LensBench bench;
  std::vector<rec::Patient> patients;
  std::vector<TestSpec> tests;
};

Scenario parse_scenario(std::string_view text);
Scenario load_scenario(const std::filesystem::path& path);

struct TestOutcome {
  std::size_t index = 0;
  rec::TestKind kind = rec::TestKind::Temperature;
  std::string patient;
  std::string status;  // pass | fail | done | error
  std::optional<std::string> record_id;
  nlohmann::ordered_json result;  // payload object, or null
  std::optional<std::string> error;
  std::vector<std::string> failures;
};

struct ScenarioReport {
  std::vector<TestOutcome> tests;
  bool ok() const;
  /// One canonical JSON line per test, then a summary line.
  std::string text() const;
};

/// Runs every test in order against `store`, saving patients first. Domain
/// errors are captured per test; storage errors propagate.
ScenarioReport run_scenario(const Scenario& scenario, rec::RecordStore& store);

}  // namespace umphcs::scn
