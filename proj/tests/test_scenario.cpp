#include "doctest.h"
#include "support.hpp"
#include "umphcs/scenario.hpp"

using namespace umphcs;
using namespace umphcs::scn;

namespace {

std::pair<std::size_t, std::size_t> parse_error_at(const std::string& text) {
  try {
    parse_scenario(text);
  } catch (const ScenarioParseError& e) {
    CHECK(e.code() == "scenario-parse");
    return {e.line(), e.column()};
  }
  FAIL("no parse error for: " << text);
  return {0, 0};
}

const char* kSmall = R"({
  "seed": 3,
  "patients": [{"id": "a", "name": "A", "region": "r"}],
  "tests": [
    {"kind": "temperature", "patient": "a", "true_c": 37.0, "expect": {"value": {"value": 37.0, "tol": 0.5}}},
    {"kind": "weight", "patient": "a", "true_kg": 60.0, "expect": {"value": {"value": 10.0, "tol": 0.2}}},
    {"kind": "temperature", "patient": "a", "true_c": 36.0, "cutoff": true, "expect": {"error": "hub-refused"}},
    {"kind": "height", "patient": "a", "ruler_top": [0, 0], "ruler_bottom": [0, 5], "head": [0, 0], "foot": [0, 9],
     "ruler_len_m": 1},
    {"kind": "eye_power", "patient": "a", "distance_m": 0.03}
  ]
})";

}  // namespace

TEST_SUITE("scenario") {
  TEST_CASE("syntax errors carry line and column") {
    CHECK(parse_error_at("{\n  \"seed\": 1,\n  \"tests\": [\n    {\"kind\": }\n  ]\n}") == std::pair<std::size_t, std::size_t>{4, 14});
    CHECK(parse_error_at("") .first == 1);
  }

  TEST_CASE("schema errors point at the offending value") {
    CHECK(parse_error_at("{\n  \"seed\": \"x\"\n}") == std::pair<std::size_t, std::size_t>{2, 11});
    CHECK(parse_error_at("{\n  \"bogus\": 1\n}").first == 2);
    CHECK(parse_error_at("{\"patients\": [],\n \"tests\": [{\"kind\": \"temperature\", \"patient\": \"nobody\", \"true_c\": 37}]}")
              .first == 2);
    CHECK(parse_error_at(R"({"patients": [{"id": "a", "name": "A", "region": "r"}],
 "tests": [{"kind": "weight", "patient": "a", "true_kg": 60, "module": "lm35"}]})")
              .first == 2);
    CHECK(parse_error_at(R"({"patients": [{"id": "a", "name": "A", "region": "r"}],
 "tests": [{"kind": "hearing", "patient": "a", "cutoff": true, "thresholds": {}}]})")
              .first == 2);
    CHECK(parse_error_at(R"({"link": {"transport": "usb"}})").first == 1);
    CHECK(parse_error_at("[]").first == 1);
  }

  TEST_CASE("empty schedule runs cleanly") {
    testing::TempDir dir;
    rec::RecordStore store(dir / "s.log");
    const auto report = run_scenario(parse_scenario("{}"), store);
    CHECK(report.tests.empty());
    CHECK(report.ok());
    CHECK(report.text() == R"({"type":"summary","tests":0,"pass":0,"fail":0,"error":0,"done":0,"ok":true})" "\n");
  }

  TEST_CASE("outcomes: pass, fail, expected error, unchecked, domain error") {
    testing::TempDir dir;
    rec::RecordStore store(dir / "s.log");
    const auto report = run_scenario(parse_scenario(kSmall), store);
    REQUIRE(report.tests.size() == 5);
    CHECK(report.tests[0].status == "pass");
    CHECK(report.tests[1].status == "fail");
    CHECK(report.tests[1].failures.size() == 1);
    CHECK(report.tests[2].status == "pass");
    CHECK(report.tests[2].error == std::optional<std::string>("hub-refused"));
    CHECK(report.tests[3].status == "error");
    CHECK(report.tests[3].error == std::optional<std::string>("degenerate-ruler"));
    CHECK(report.tests[4].status == "done");
    CHECK_FALSE(report.ok());
    CHECK(store.records().size() == 3);
    CHECK(store.records()[0].taken_at == "2026-01-01T08:01:00Z");
  }

  TEST_CASE("bundled scenarios pass") {
    for (const char* name : {"full_session.json", "faulty_bp.json"}) {
      testing::TempDir dir;
      rec::RecordStore store(dir / "s.log");
      const auto report = run_scenario(load_scenario(std::filesystem::path(UMPHCS_SCENARIOS) / name), store);
      INFO(report.text());
      CHECK(report.ok());
    }
    CHECK_THROWS_AS(load_scenario("/nonexistent/x.json"), Error);
  }

  TEST_CASE("same scenario gives byte-identical store and report") {
    const auto sc = load_scenario(std::filesystem::path(UMPHCS_SCENARIOS) / "full_session.json");
    testing::TempDir a, b;
    std::string ra, rb;
    {
      rec::RecordStore s(a / "s.log");
      ra = run_scenario(sc, s).text();
    }
    {
      rec::RecordStore s(b / "s.log");
      rb = run_scenario(sc, s).text();
    }
    CHECK(ra == rb);
    CHECK(testing::slurp(a / "s.log") == testing::slurp(b / "s.log"));
    CHECK_FALSE(testing::slurp(a / "s.log").empty());
  }
}
