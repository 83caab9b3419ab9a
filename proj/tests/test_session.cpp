#include <cmath>
#include <functional>
#include <random>

#include "doctest.h"
#include "oracles.hpp"
#include "support.hpp"
#include "umphcs/advice.hpp"
#include "umphcs/error.hpp"
#include "umphcs/session.hpp"

using namespace umphcs;

namespace {

std::string error_code(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  return "";
}

ops::LinkConfig faulty(double drop, double corrupt, std::uint64_t seed) {
  ops::LinkConfig c;
  c.kind = wire::TransportKind::Bluetooth;
  c.latency_ms = 2.0;
  c.faults = wire::FaultProfile{drop, corrupt, seed, 1.0};
  return c;
}

}  // namespace

TEST_SUITE("session") {
  TEST_CASE("scalar measurements over a wired link") {
    ops::HubLink link;
    const auto t = ops::measure_temperature(link, 37.2);
    CHECK(std::abs(t.celsius - 37.2) <= 0.5);
    const auto w = ops::measure_weight(link, 64.3, dx::ideal_weight_calib());
    CHECK(std::abs(w.kg - 64.3) <= 0.2);
    const auto e = ops::measure_eye_power(link, 0.045);
    CHECK(std::abs(e.distance_m - 0.045) <= 6e-5);
    CHECK(e.power_d == doctest::Approx(dx::eye_power(e.distance_m)));
    CHECK(ops::eye_power_from_code(0).power_d == doctest::Approx(-1.3).epsilon(1e-12));
    CHECK(ops::eye_power_from_code(1023).power_d == doctest::Approx(17.5).epsilon(1e-12));
  }

  TEST_CASE("scalar measurements survive a faulty bluetooth link") {
    ops::HubLink link(faulty(0.02, 0.02, 3));
    for (int i = 0; i < 50; ++i) {
      const double truth = 36.0 + 0.05 * i;
      try {
        const auto t = ops::measure_temperature(link, truth);
        // A corrupted digit can still form a valid frame; bounded by the sensor range.
        CHECK(t.celsius >= 0.0);
      } catch (const Error& e) {
        CHECK(e.code() == "link-failure");
      }
    }
    CHECK(link.stats().transactions >= 50);
  }

  TEST_CASE("held cutoff makes every measurement hub-refused") {
    ops::HubLink link;
    link.hold_cutoff(true);
    CHECK(error_code([&] { ops::measure_temperature(link, 37.0); }) == "hub-refused");
    CHECK(error_code([&] { ops::measure_bp(link, {}); }) == "hub-refused");
    link.hold_cutoff(false);
    CHECK_NOTHROW(ops::measure_temperature(link, 37.0));
  }

  TEST_CASE("blood pressure over a clean link") {
    ops::HubLink link;
    bio::CuffRunParams p;
    p.noise_sd = 0.1;
    p.seed = 8;
    std::size_t streamed = 0;
    ops::BpOptions opt;
    opt.on_sample = [&](const ops::StreamSample&) { ++streamed; };
    const auto run = ops::measure_bp(link, p, opt);
    CHECK(std::abs(run.result.systolic - p.systolic_true()) <= 3.0);
    CHECK(std::abs(run.result.diastolic - p.diastolic_true()) <= 3.0);
    CHECK(run.gap_slots == 0);
    CHECK(streamed == run.samples.size() + run.despiked);
    CHECK(run.samples.size() >= 5300);
  }

  TEST_CASE("blood pressure over a faulty link stays within tolerance") {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      ops::HubLink link(faulty(0.02, 0.02, seed));
      bio::CuffRunParams p;
      p.map_true = 95.0 + static_cast<double>(seed);
      p.seed = seed;
      const auto run = ops::measure_bp(link, p);
      CHECK(std::abs(run.result.systolic - p.systolic_true()) <= 3.0);
      CHECK(std::abs(run.result.diastolic - p.diastolic_true()) <= 3.0);
    }
  }

  TEST_CASE("a dead link aborts the cuff run") {
    ops::HubLink link(faulty(1.0, 0.0, 1));
    CHECK(error_code([&] { ops::measure_bp(link, {}); }) == "link-failure");
  }

  TEST_CASE("operator stop ends the stream early") {
    ops::HubLink link;
    std::atomic<bool> stop{false};
    ops::BpOptions opt;
    opt.stop = &stop;
    std::size_t n = 0;
    opt.on_sample = [&](const ops::StreamSample&) {
      if (++n == 300) stop = true;
    };
    CHECK(error_code([&] { ops::measure_bp(link, {}, opt); }) == "too-short");
    CHECK(n == 300);
  }

  TEST_CASE("simulated hearing run") {
    bio::HearingProfile h;
    for (int f : dx::kSweepFrequencies) h.threshold_db[f] = 12.0;
    h.threshold_db[8000] = 110.0;
    int timeouts = 0;
    const auto run = ops::run_hearing(h, 3.0, [&](const ops::HearingStep& s) {
      timeouts += s.event == dx::HearingEvent::Timeout;
    });
    for (int f : dx::kSweepFrequencies)
      CHECK(run.audiogram.thresholds.at(f) == oracle::expected_threshold(h.threshold_db[f]));
    CHECK(run.elapsed_s == doctest::Approx(timeouts * 3.0 + (run.steps - timeouts) * 1.0));
    CHECK(run.steps == 5 * 5 + 18);
  }

  TEST_CASE("record factory allocates fresh ids") {
    testing::TempDir dir;
    rec::RecordStore store(dir / "s.log");
    store.save(rec::Patient{"p", "P", "r", "2026-01-01T00:00:00Z"});
    ops::RecordFactory f("dev9", [] { return std::string("2026-01-01T09:00:00Z"); });
    auto a = f.make(store, "p", rec::TestKind::Weight, ops::scalar_payload(rec::TestKind::Weight, 70));
    CHECK(a.record_id == "dev9-000001");
    store.save(a);
    auto b = f.make(store, "p", rec::TestKind::Weight, ops::scalar_payload(rec::TestKind::Weight, 69));
    CHECK(b.record_id == "dev9-000002");
    CHECK(std::get<rec::Scalar>(b.payload).unit == "kg");
  }

  TEST_CASE("hub session lock is exclusive") {
    testing::TempDir dir;
    const auto path = (dir / "hub.lock").string();
    {
      ops::HubSessionLock a(path);
      CHECK(error_code([&] { ops::HubSessionLock b(path); }) == "hub-busy");
    }
    CHECK_NOTHROW(ops::HubSessionLock{path});
  }
}

TEST_SUITE("advice") {
  TEST_CASE("bundled rules fire on abnormal values only") {
    const auto rules = advice::load_rules(std::filesystem::path(UMPHCS_DATA_DIR) / "abnormal_rules.json");
    REQUIRE(rules.size() == 4);
    testing::TempDir dir;
    rec::RecordStore store(dir / "s.log");
    store.save(rec::Patient{"p", "P", "r", "2026-01-01T00:00:00Z"});
    auto rec_of = [](const std::string& id, rec::TestKind k, rec::Payload pl, int minute) {
      return rec::TestRecord{id, "p", "d", k, rec::format_utc(1767254400 + 60 * minute), std::move(pl), false};
    };
    auto ids = [&](const rec::TestRecord& r) {
      std::vector<std::string> out;
      for (const auto& rule : advice::evaluate(rules, r, store)) out.push_back(rule.id);
      return out;
    };
    CHECK(ids(rec_of("t1", rec::TestKind::Temperature, ops::scalar_payload(rec::TestKind::Temperature, 38.0), 0))
              .empty());
    CHECK(ids(rec_of("t2", rec::TestKind::Temperature, ops::scalar_payload(rec::TestKind::Temperature, 38.1), 0)) ==
          std::vector<std::string>{"fever"});
    CHECK(ids(rec_of("b1", rec::TestKind::BloodPressure, dx::BpResult{150, 95, 110, 70}, 0)) ==
          std::vector<std::string>{"high-systolic", "high-diastolic"});
    CHECK(ids(rec_of("b2", rec::TestKind::BloodPressure, dx::BpResult{120, 80, 95, 70}, 0)).empty());
    for (int i = 0; i < 3; ++i)
      store.save(rec_of("w" + std::to_string(i), rec::TestKind::Weight,
                        ops::scalar_payload(rec::TestKind::Weight, 70.0 - 2.0 * i), i));
    CHECK(ids(*store.record("w2")) == std::vector<std::string>{"weight-decline"});
  }

  TEST_CASE("malformed rule tables are rejected") {
    CHECK_THROWS_AS(advice::parse_rules("{}"), std::invalid_argument);
    CHECK_THROWS_AS(advice::parse_rules(R"([{"id":"x","kind":"nope","field":"value","op":">","threshold":1,"message":"m"}])"),
                    std::invalid_argument);
    CHECK_THROWS_AS(advice::parse_rules(R"([{"id":"x","kind":"temperature","field":"value","op":"~","threshold":1,"message":"m"}])"),
                    std::invalid_argument);
    CHECK(advice::parse_rules("[]").empty());
  }
}
