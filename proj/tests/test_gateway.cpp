#include <chrono>
#include <thread>

#include "doctest.h"
#include "httplib.h"
#include "json.hpp"
#include "support.hpp"
#include "umphcs/gateway.hpp"

using namespace umphcs;
using nlohmann::json;
using namespace std::chrono_literals;

namespace {

struct Fixture {
  testing::TempDir dir;
  gw::GatewayConfig cfg;

  explicit Fixture(double bp_speed = 0.0, double hearing_timeout_s = 3.0) {
    cfg.store_path = dir / "store.log";
    cfg.lock_path = dir / "hub.lock";
    cfg.device_id = "gw";
    cfg.bp_speed = bp_speed;
    cfg.hearing_timeout_s = hearing_timeout_s;
    cfg.rules = advice::load_rules(std::filesystem::path(UMPHCS_DATA_DIR) / "abnormal_rules.json");
    cfg.clock = [] { return std::string("2026-05-01T09:00:00Z"); };
    rec::RecordStore s(cfg.store_path);
    s.save(rec::Patient{"p1", "Nimal", "kandy", "2026-05-01T08:00:00Z"});
  }
};

json body(const gw::Reply& r) { return json::parse(r.body); }

std::string start(const std::string& test, const json& params = json::object()) {
  return json{{"patient", "p1"}, {"test", test}, {"params", params}}.dump();
}

std::vector<json> drain(gw::Gateway& g) {
  std::vector<json> out;
  for (std::size_t i = 0;; ++i) {
    bool ended = false;
    const auto ev = g.event(i, 5s, ended);
    if (!ev) break;
    out.push_back(json::parse(*ev));
  }
  return out;
}

}  // namespace

TEST_SUITE("gateway") {
  TEST_CASE("no session yields 409 everywhere") {
    Fixture f;
    gw::Gateway g(f.cfg);
    for (const auto& r : {g.result(), g.stop(), g.pot(R"({"code":1})"), g.hearing_event(R"({"heard":true})")}) {
      CHECK(r.status == 409);
      CHECK(body(r)["error"] == "no-active-session");
    }
    const auto p = g.patients();
    CHECK(p.status == 200);
    CHECK(body(p)["patients"][0]["patient_id"] == "p1");
  }

  TEST_CASE("bad requests and unknown patients") {
    Fixture f;
    gw::Gateway g(f.cfg);
    CHECK(g.start("nonsense").status == 400);
    CHECK(g.start(R"({"patient":"p1","test":"xray"})").status == 400);
    CHECK(g.start(start("temperature")).status == 400);  // true_c missing
    const auto r = g.start(R"({"patient":"zz","test":"temperature","params":{"true_c":37}})");
    CHECK(r.status == 404);
    CHECK(body(r)["error"] == "unknown-patient");
  }

  TEST_CASE("temperature runs to a saved record with advice") {
    Fixture f;
    gw::Gateway g(f.cfg);
    const auto r = g.start(start("temperature", {{"true_c", 39.0}}));
    REQUIRE(r.status == 200);
    const auto j = body(r);
    CHECK(j["phase"] == "done");
    CHECK(j["record_id"] == "gw-000001");
    CHECK(std::abs(j["result"]["value"].get<double>() - 39.0) <= 0.5);
    CHECK(j["advice"][0]["id"] == "fever");
    const auto ev = drain(g);
    REQUIRE(ev.size() == 1);
    CHECK(ev[0] == json{{"type", "end"}, {"phase", "done"}, {"error", nullptr}});
    rec::RecordStore s(f.cfg.store_path);
    CHECK(s.records().size() == 1);
  }

  TEST_CASE("eye power: pot codes map to the bench range and stop records") {
    Fixture f;
    gw::Gateway g(f.cfg);
    CHECK(body(g.start(start("eye_power")))["phase"] == "awaiting-response");
    CHECK(g.start(start("temperature", {{"true_c", 37.0}})).status == 409);
    CHECK(g.hearing_event(R"({"heard":true})").status == 409);
    CHECK(g.pot(R"({"code":2000})").status == 400);
    const auto lo = body(g.pot(R"({"code":0})"));
    CHECK(lo["power_d"].get<double>() == doctest::Approx(-1.3).epsilon(1e-12));
    const auto hi = body(g.pot(R"({"code":1023})"));
    CHECK(hi["power_d"].get<double>() == doctest::Approx(17.5).epsilon(1e-12));
    const auto done = body(g.stop());
    CHECK(done["phase"] == "done");
    CHECK(done["result"]["value"].get<double>() == doctest::Approx(17.5).epsilon(1e-12));
    CHECK(done["result"]["unit"] == "D");
  }

  TEST_CASE("eye power stop without a reading is an error") {
    Fixture f;
    gw::Gateway g(f.cfg);
    g.start(start("eye_power"));
    const auto j = body(g.stop());
    CHECK(j["phase"] == "error");
    CHECK(j["error"] == "no-pot-reading");
  }

  TEST_CASE("hearing: operator responses drive the sweep") {
    Fixture f;
    gw::Gateway g(f.cfg);
    REQUIRE(g.start(start("hearing")).status == 200);
    int presses = 0;
    for (;;) {
      // Hears from 20 dB up at every frequency.
      const auto st = body(g.result());
      if (st["phase"] != "awaiting-response") break;
      bool ended = false;
      std::string last;
      for (std::size_t i = 0;; ++i) {
        const auto ev = g.event(i, 0ms, ended);
        if (!ev) break;
        last = *ev;
      }
      const auto ev = json::parse(last);
      REQUIRE(ev["state"] == "presenting");
      const bool heard = ev["level_db"].get<int>() >= 20;
      g.hearing_event(heard ? R"({"heard":true})" : R"({"heard":false})");
      ++presses;
    }
    CHECK(presses == 6 * 6);
    const auto j = body(g.result());
    CHECK(j["phase"] == "done");
    for (const char* freq : {"250", "500", "1000", "2000", "4000", "8000"}) CHECK(j["result"][freq] == 20);
    const auto ev = drain(g);
    CHECK(ev.back()["type"] == "end");
    CHECK(ev[1] == json{{"type", "hearing"}, {"freq_hz", 250}, {"level_db", -5}, {"state", "not-heard"}});
  }

  TEST_CASE("hearing: unanswered tones time out") {
    Fixture f(0.0, 0.02);
    gw::Gateway g(f.cfg);
    g.start(start("hearing"));
    g.wait_finished();
    const auto j = body(g.result());
    CHECK(j["phase"] == "done");
    CHECK(j["result"]["8000"].is_null());
    const auto ev = drain(g);
    std::size_t timeouts = 0;
    for (const auto& e : ev) timeouts += e.value("state", "") == "timeout";
    CHECK(timeouts == 108);
  }

  TEST_CASE("blood pressure streams at display rate and stop aborts") {
    Fixture f(1.0);
    gw::Gateway g(f.cfg);
    REQUIRE(g.start(start("blood_pressure", {{"seed", 4}})).status == 200);
    std::this_thread::sleep_for(1s);
    bool ended = false;
    std::size_t n = 0;
    while (g.event(n, 0ms, ended)) ++n;
    CHECK(n >= 10);
    const auto first = json::parse(*g.event(0, 0ms, ended));
    CHECK(first["type"] == "bp");
    CHECK(first.contains("cuff_mmHg"));
    CHECK(first.contains("ow"));
    const auto j = body(g.stop());
    CHECK(j["phase"] == "error");
    CHECK(j["error"] == "stopped");
    CHECK(j["record_id"].is_null());
  }

  TEST_CASE("unpaced blood pressure completes with a result") {
    Fixture f(0.0);
    gw::Gateway g(f.cfg);
    g.start(start("blood_pressure", {{"map", 110}, {"seed", 2}}));
    g.wait_finished();
    const auto j = body(g.result());
    REQUIRE(j["phase"] == "done");
    CHECK(std::abs(j["result"]["systolic"].get<double>() - (110 + 15 * 1.1774100225154747)) <= 3.0);
  }

  TEST_CASE("a second process holding the hub gets hub-busy") {
    Fixture f;
    ops::HubSessionLock other(f.cfg.lock_path.string());
    gw::Gateway g(f.cfg);
    const auto r = g.start(start("temperature", {{"true_c", 37.0}}));
    CHECK(r.status == 409);
    CHECK(body(r)["error"] == "hub-busy");
  }

  TEST_CASE("HTTP routes and the event stream") {
    Fixture f;
    gw::Gateway g(f.cfg);
    const int port = g.listen("127.0.0.1", 0);
    httplib::Client c("127.0.0.1", port);
    auto res = c.Get("/patients");
    REQUIRE(res);
    CHECK(res->status == 200);
    res = c.Get("/session/result");
    REQUIRE(res);
    CHECK(res->status == 409);
    res = c.Post("/session/start", start("weight", {{"true_kg", 72.5}}), "application/json");
    REQUIRE(res);
    CHECK(res->status == 200);
    CHECK(json::parse(res->body)["phase"] == "done");
    res = c.Get("/session/stream");
    REQUIRE(res);
    CHECK(res->get_header_value("Content-Type") == "text/event-stream");
    CHECK(res->body == "id: 0\ndata: {\"type\":\"end\",\"phase\":\"done\",\"error\":null}\n\n");
    g.shutdown();
  }
}
