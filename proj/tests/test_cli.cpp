#include <sys/wait.h>

#include <cstdio>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "support.hpp"
#include "umphcs/records.hpp"
#include "umphcs/sync.hpp"

using nlohmann::json;

namespace {

struct Run {
  int code = -1;
  std::string out;
  std::string err;
};

std::vector<std::string> lines(const std::string& s) {
  std::vector<std::string> v;
  std::istringstream in(s);
  for (std::string l; std::getline(in, l);) v.push_back(l);
  return v;
}

class Cli {
 public:
  Cli() : store_((dir_ / "store.log").string()) {}

  Run operator()(const std::string& args, const std::string& env = "") const {
    const auto err_path = dir_ / "stderr.txt";
    const std::string cmd = env + " " + UMPHCS_CLI + " --store " + store_ + " " + args + " 2>" + err_path.string();
    Run r;
    FILE* p = popen(cmd.c_str(), "r");
    REQUIRE(p != nullptr);
    char buf[4096];
    for (std::size_t n; (n = std::fread(buf, 1, sizeof buf, p)) > 0;) r.out.append(buf, n);
    const int status = pclose(p);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.err = testing::slurp(err_path);
    return r;
  }

  const std::string& store() const { return store_; }
  const testing::TempDir& dir() const { return dir_; }

 private:
  testing::TempDir dir_;
  std::string store_;
};

/// Exactly one JSON object on stderr carrying `code`.
void check_error(const Run& r, int exit_code, const std::string& code) {
  CHECK(r.code == exit_code);
  const auto ls = lines(r.err);
  REQUIRE(ls.size() == 1);
  const auto j = json::parse(ls[0]);
  CHECK(j["error"] == code);
  CHECK(j.contains("detail"));
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("patients and measurements") {
    Cli cli;
    auto r = cli("patient add --id p1 --name Asha --region hill");
    CHECK(r.code == 0);
    CHECK(json::parse(r.out)["patient_id"] == "p1");
    r = cli("measure temperature --patient p1 --true-c 37");
    CHECK(r.code == 0);
    CHECK(r.err.empty());
    const auto rec = json::parse(r.out);
    CHECK(rec["kind"] == "temperature");
    CHECK(std::abs(rec["payload"]["value"].get<double>() - 37.0) <= 0.5);
    r = cli("measure eye_power --patient p1 --distance-m 0.015");
    CHECK(r.code == 0);
    CHECK(json::parse(r.out)["payload"]["value"].get<double>() == doctest::Approx(-1.3).epsilon(1e-9));
    r = cli("patient list");
    CHECK(lines(r.out).size() == 1);
  }

  TEST_CASE("errors are one JSON line with a nonzero exit") {
    Cli cli;
    check_error(cli("measure temperature --patient nobody --true-c 37"), 1, "unknown-patient");
    check_error(cli("frobnicate"), 2, "usage");
    check_error(cli("measure temperature --patient p1 --true-c notanumber"), 2, "usage");
    check_error(cli("audiogram show nothing"), 1, "unknown-record");
    check_error(cli("scenario run /nonexistent.json"), 1, "scenario-unreadable");
    cli("patient add --id p1 --name A --region r");
    check_error(cli("measure temperature --patient p1 --true-c 37 --cutoff"), 1, "hub-refused");
    check_error(cli("sync run", "UMPHCS_SYNC_ENDPOINT=127.0.0.1:1"), 1, "connection-lost");
  }

  TEST_CASE("scenario parse errors report position") {
    Cli cli;
    const auto path = cli.dir() / "bad.json";
    {
      std::ofstream(path) << "{\n  \"seed\": 1,\n  \"tests\": oops\n}\n";
    }
    const auto r = cli("scenario run " + path.string());
    check_error(r, 1, "scenario-parse");
    CHECK(json::parse(r.err)["detail"].get<std::string>().starts_with("3:12:"));
  }

  TEST_CASE("scenario run prints the report and sets the exit code") {
    Cli cli;
    const auto r = cli(std::string("scenario run ") + UMPHCS_SCENARIOS + "/full_session.json");
    CHECK(r.code == 0);
    const auto ls = lines(r.out);
    REQUIRE(!ls.empty());
    CHECK(json::parse(ls.back())["ok"] == true);
  }

  TEST_CASE("sync against a live server") {
    Cli cli;
    cli("patient add --id p1 --name A --region r");
    for (double kg : {70.0, 68.0, 66.0}) cli("measure weight --patient p1 --true-kg " + std::to_string(kg));
    umphcs::sync::ServerStore server;
    umphcs::sync::SyncServer tcp(server, {"127.0.0.1", 0});
    const std::string ep = "127.0.0.1:" + std::to_string(tcp.port());
    auto r = cli("sync run --endpoint " + ep);
    CHECK(r.code == 0);
    CHECK(server.live_records() == 3);
    r = cli("sync run", "UMPHCS_SYNC_ENDPOINT=" + ep);
    CHECK(r.code == 0);
    CHECK(server.live_records() == 3);
    r = cli("screen weight p1");
    CHECK(r.code == 0);
    CHECK(json::parse(r.out)["flagged"] == true);
    tcp.stop();
  }
}

TEST_SUITE("cli") {
  TEST_CASE("measurement examples") {
    Cli cli;
    cli("patient add --id p1 --name A --region r");
    auto r = cli("measure temperature --patient p1 --true-c 38");
    REQUIRE(r.code == 0);
    CHECK(std::abs(json::parse(r.out)["payload"]["value"].get<double>() - 38.0) <= 0.5);
    r = cli("measure blood_pressure --patient p1 --map 100 --sigma 15");
    REQUIRE(r.code == 0);
    const auto bp = json::parse(r.out)["payload"];
    CHECK(std::abs(bp["systolic"].get<double>() - 117.7) <= 2.0);
    CHECK(std::abs(bp["diastolic"].get<double>() - 87.3) <= 2.0);
    CHECK(std::abs(bp["heart_rate"].get<double>() - 72.0) <= 2.0);
    check_error(cli("measure blood_pressure --patient p1 --cutoff"), 1, "hub-refused");
    umphcs::rec::RecordStore store(cli.store());
    CHECK(store.records().size() == 2);
  }

  TEST_CASE("a six-test scenario saves six records") {
    Cli cli;
    const auto r = cli(std::string("scenario run ") + UMPHCS_SCENARIOS + "/full_session.json");
    REQUIRE(r.code == 0);
    const auto ls = lines(r.out);
    REQUIRE(ls.size() == 7);
    for (std::size_t i = 0; i < 6; ++i) CHECK(!json::parse(ls[i])["record_id"].is_null());
    umphcs::rec::RecordStore store(cli.store());
    CHECK(store.records().size() == 6);
  }
}
