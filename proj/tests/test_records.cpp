#include <filesystem>
#include <fstream>
#include <functional>

#include "doctest.h"
#include "support.hpp"
#include "umphcs/error.hpp"
#include "umphcs/records.hpp"

using namespace umphcs;
using namespace umphcs::rec;

namespace {

std::string error_code(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  return "";
}

Patient alice() { return {"p1", "Alice", "north", "2026-01-01T00:00:00Z"}; }

TestRecord weight(const std::string& id, const std::string& patient, const std::string& at, double kg) {
  return {id, patient, "dev", TestKind::Weight, at, Scalar{kg, "kg", {}}, false};
}

std::string at(int minute) { return format_utc(parse_utc("2026-01-01T08:00:00Z") + 60 * minute); }

}  // namespace

TEST_SUITE("records") {
  TEST_CASE("number formatting") {
    CHECK(format_number(36.6) == "36.6");
    CHECK(format_number(1.0) == "1");
    CHECK(format_number(-0.0000001) == "0");
    CHECK(format_number(-11.666666666) == "-11.666667");
    CHECK(format_number(1e-7) == "0");
    CHECK_THROWS_AS(format_number(NAN), std::invalid_argument);
  }

  TEST_CASE("canonical lines are byte exact") {
    CHECK(canonical_line(alice()) ==
          R"({"type":"patient","patient_id":"p1","name":"Alice","region":"north","created_at":"2026-01-01T00:00:00Z"})");
    TestRecord t{"r1", "p1", "dev", TestKind::Temperature, "2026-01-01T08:01:00Z", Scalar{36.62109375, "degC", {}}, false};
    CHECK(canonical_line(t) ==
          R"({"type":"record","kind":"temperature","record_id":"r1","patient_id":"p1","device_id":"dev",)"
          R"("taken_at":"2026-01-01T08:01:00Z","payload":{"value":36.621094,"unit":"degC"}})");
    TestRecord bp{"r2", "p1", "dev", TestKind::BloodPressure, "2026-01-01T08:02:00Z",
                  dx::BpResult{117.5, 87.25, 100, 72}, false};
    CHECK(canonical_line(bp).ends_with(R"("payload":{"systolic":117.5,"diastolic":87.25,"map":100,"heart_rate":72}})"));
    dx::Audiogram a;
    a.thresholds = {{250, 10}, {500, std::nullopt}};
    TestRecord h{"r3", "p1", "dev", TestKind::Hearing, "2026-01-01T08:03:00Z", a, false};
    CHECK(canonical_line(h).ends_with(R"("payload":{"250":10,"500":null}})"));
    CHECK(canonical_line(SyncMark{false, "r1"}) == R"({"type":"synced","record_id":"r1"})");
  }

  TEST_CASE("parse_line round trips and rejects mismatches") {
    TestRecord t{"r1", "p1", "dev", TestKind::Height, "2026-01-01T08:01:00Z", Scalar{1.7, "m", {"x"}}, false};
    const auto line = canonical_line(t);
    CHECK(canonical_line(std::get<TestRecord>(parse_line(line))) == line);
    CHECK_THROWS_AS(parse_line(R"({"type":"record","kind":"height","record_id":"r","patient_id":"p","device_id":"d",)"
                               R"("taken_at":"2026-01-01T08:01:00Z","payload":{"value":1,"unit":"kg"}})"),
                    std::invalid_argument);
    CHECK_THROWS_AS(parse_line("{\"type\":\"patient\""), std::invalid_argument);
    CHECK_THROWS_AS(parse_line(R"({"type":"other"})"), std::invalid_argument);
    CHECK_THROWS_AS(parse_utc("2026-02-30T00:00:00Z"), std::invalid_argument);
  }

  TEST_CASE("store saves, rejects conflicts and reloads identically") {
    testing::TempDir dir;
    const auto path = dir.path() / "store.log";
    {
      RecordStore s(path);
      s.save(alice());
      CHECK(s.save(alice()) == "p1");  // same content is a no-op
      CHECK(error_code([&] { s.save(Patient{"p1", "Other", "north", "2026-01-01T00:00:00Z"}); }) ==
            "duplicate-patient");
      CHECK(error_code([&] { s.save(weight("w0", "nobody", at(0), 70)); }) == "unknown-patient");
      s.save(weight("w2", "p1", at(2), 69));
      s.save(weight("w1", "p1", at(1), 70));
      CHECK(error_code([&] { s.save(weight("w1", "p1", at(1), 71)); }) == "duplicate-record");
      s.mark_synced(s.records()[0]);
    }
    RecordStore again(path);
    REQUIRE(again.records().size() == 2);
    const auto h = again.history("p1", TestKind::Weight);
    CHECK(h[0].record_id == "w1");
    CHECK(h[1].record_id == "w2");
    CHECK(again.record("w2")->synced);
    CHECK_FALSE(again.record("w1")->synced);
    CHECK(again.unsynced().size() == 1);
    CHECK(error_code([&] { again.history("nobody", TestKind::Weight); }) == "unknown-patient");
  }

  TEST_CASE("truncation at every byte offset keeps all complete lines") {
    testing::TempDir dir;
    const auto full = dir.path() / "full.log";
    std::vector<std::string> lines;
    {
      RecordStore s(full);
      s.save(alice());
      for (int i = 0; i < 4; ++i) s.save(weight("w" + std::to_string(i), "p1", at(i), 70 - i));
    }
    const std::string content = testing::slurp(full);
    for (std::size_t cut = 0; cut <= content.size(); ++cut) {
      const auto p = dir.path() / ("cut" + std::to_string(cut) + ".log");
      {
        std::ofstream(p, std::ios::binary) << content.substr(0, cut);
      }
      std::size_t complete = 0;
      for (std::size_t i = 0; i < cut; ++i) complete += content[i] == '\n';
      // A tail missing only its newline is still a complete entry.
      if (cut < content.size() && content[cut] == '\n') ++complete;
      RecordStore s(p);
      REQUIRE(s.patients().size() + s.records().size() == complete);
      // The file is now clean: appending works and reloads.
      if (!s.patients().empty()) {
        s.save(weight("extra", "p1", at(50), 60));
        RecordStore again(p);
        REQUIRE(again.records().size() == s.records().size());
        REQUIRE(again.warnings().empty());
      }
      std::filesystem::remove(p);
    }
  }

  TEST_CASE("weight decline screening") {
    std::vector<TestRecord> w;
    for (double kg : {70.0, 72.0, 71.0, 69.0, 67.0}) w.push_back(weight("w" + std::to_string(w.size()), "p1", at(w.size()), kg));
    const auto f = screen_weight(w);
    REQUIRE(f);
    CHECK(f->evidence == std::vector<std::string>{"w1", "w2", "w3", "w4"});
    CHECK(f->severity == doctest::Approx(5.0 / 72.0));
    // Exactly five percent qualifies.
    std::vector<TestRecord> edge{weight("a", "p1", at(0), 100), weight("b", "p1", at(1), 98), weight("c", "p1", at(2), 95)};
    CHECK(screen_weight(edge));
    edge[2].payload = Scalar{95.5, "kg", {}};
    CHECK_FALSE(screen_weight(edge));
    // Too short a run.
    CHECK_FALSE(screen_weight(std::span(w).first(2)));
    // A flat step breaks the strictly decreasing run.
    std::vector<TestRecord> flat{weight("a", "p1", at(0), 100), weight("b", "p1", at(1), 90),
                                 weight("c", "p1", at(2), 90)};
    CHECK_FALSE(screen_weight(flat));
  }

  TEST_CASE("regional alert at the twenty percent line") {
    std::vector<Patient> ps;
    std::vector<TestRecord> rs;
    for (int i = 0; i < 5; ++i) {
      const std::string id = "p" + std::to_string(i);
      ps.push_back({id, id, "east", "2026-01-01T00:00:00Z"});
      const bool declining = i == 0;
      for (int k = 0; k < 3; ++k)
        rs.push_back(weight(id + "w" + std::to_string(k), id, at(k), declining ? 80.0 - 3 * k : 80.0 + k));
    }
    ps.push_back({"q", "q", "west", "2026-01-01T00:00:00Z"});
    const auto a = screen_region(ps, rs, "east");
    REQUIRE(a);
    CHECK(a->eligible == 5);
    CHECK(a->flagged == 1);
    CHECK(canonical_json(*a) == R"({"region":"east","eligible":5,"flagged":1,"fraction":0.2})");
    rs.push_back(weight("p0w9", "p0", at(9), 90.0));  // recovery clears the flag
    CHECK_FALSE(screen_region(ps, rs, "east"));
    CHECK_FALSE(screen_region(ps, rs, "west"));  // no eligible patients
  }
}

namespace {

std::vector<TestRecord> series(const std::string& patient, std::initializer_list<double> kgs) {
  std::vector<TestRecord> w;
  for (double kg : kgs) w.push_back(weight(patient + "w" + std::to_string(w.size()), patient, at(static_cast<int>(w.size())), kg));
  return w;
}

}  // namespace

TEST_SUITE("records") {
  TEST_CASE("weight screening examples") {
    const auto f = screen_weight(series("p1", {70, 68, 66}));
    REQUIRE(f);
    CHECK(f->severity == doctest::Approx(0.0571).epsilon(1e-3));
    CHECK_FALSE(screen_weight(series("p1", {70, 71, 69})));
    CHECK_FALSE(screen_weight(series("p1", {70, 69.5, 69})));
  }

  TEST_CASE("regional alert examples over ten patients") {
    for (int declining : {1, 2}) {
      std::vector<Patient> ps;
      std::vector<TestRecord> rs;
      for (int i = 0; i < 10; ++i) {
        const std::string id = "p" + std::to_string(i);
        ps.push_back({id, id, "south", "2026-01-01T00:00:00Z"});
        const auto w = i < declining ? series(id, {70, 68, 66}) : series(id, {70, 70.5, 71});
        rs.insert(rs.end(), w.begin(), w.end());
      }
      const auto a = screen_region(ps, rs, "south");
      CHECK(a.has_value() == (declining == 2));
    }
  }

  TEST_CASE("saving the same record twice keeps one copy") {
    testing::TempDir dir;
    RecordStore s(dir.path() / "store.log");
    s.save(alice());
    CHECK(s.history("p1", TestKind::Weight).empty());
    const auto r = weight("w0", "p1", at(0), 70);
    s.save(r);
    s.save(r);
    CHECK(s.records().size() == 1);
    RecordStore again(dir.path() / "store.log");
    CHECK(again.records().size() == 1);
  }
}
