// Operator command line. Every failure prints exactly one JSON line on stderr
// ({"error": code, "detail": text}) and exits nonzero.

#include <csignal>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "umphcs/advice.hpp"
#include "umphcs/error.hpp"
#include "umphcs/gateway.hpp"
#include "umphcs/records.hpp"
#include "umphcs/scenario.hpp"
#include "umphcs/session.hpp"
#include "umphcs/sync.hpp"

using namespace umphcs;
using ojson = nlohmann::ordered_json;

namespace {

struct Usage : std::runtime_error {
  using std::runtime_error::runtime_error;
};

int fail(const std::string& code, const std::string& detail) {
  ojson j;
  j["error"] = code;
  j["detail"] = detail;
  std::cerr << rec::canonical_dump(j) << std::endl;
  return code == "usage" ? 2 : 1;
}

std::string env_or(const char* name, const std::string& fallback) {
  const char* v = std::getenv(name);
  return v && *v ? v : fallback;
}

dx::Pixel parse_pixel(const std::string& text, const char* what) {
  double x = 0, y = 0;
  char comma = 0;
  std::istringstream in(text);
  if (!(in >> x >> comma >> y) || comma != ',' || !in.eof())
    throw Usage(std::string(what) + " must be x,y");
  return {x, y};
}

struct Global {
  std::string store = env_or("UMPHCS_STORE", "umphcs.log");
  std::string lock;
  std::string device = "dev";
  std::string rules = std::string(UMPHCS_DATA_DIR) + "/abnormal_rules.json";
  std::string lock_path() const { return lock.empty() ? store + ".lock" : lock; }
};

struct LinkOptions {
  std::string transport = "wired";
  double latency_ms = 1.0;
  double drop = 0.0;
  double corrupt = 0.0;
  std::uint64_t seed = 0;

  ops::LinkConfig config() const {
    ops::LinkConfig c;
    const auto kind = wire::parse_transport(transport);
    if (!kind) throw Usage("transport must be wired or bluetooth");
    c.kind = *kind;
    c.latency_ms = latency_ms;
    if (c.kind == wire::TransportKind::Bluetooth) {
      wire::FaultProfile f{drop, corrupt, seed, latency_ms};
      f.validate();
      c.faults = f;
    } else if (drop > 0.0 || corrupt > 0.0) {
      throw Usage("fault injection needs the bluetooth transport");
    }
    return c;
  }
  void add(CLI::App* app) {
    app->add_option("--transport", transport, "wired | bluetooth")->check(CLI::IsMember({"wired", "bluetooth"}));
    app->add_option("--latency-ms", latency_ms, "bluetooth one-way latency");
    app->add_option("--drop", drop, "per-byte drop probability (bluetooth)");
    app->add_option("--corrupt", corrupt, "per-byte corruption probability (bluetooth)");
  }
};

struct MeasureOptions {
  std::string kind;
  std::string patient;
  LinkOptions link;
  bool cutoff = false;
  double true_c = 37.0;
  double true_kg = 60.0;
  double distance_m = 0.03;
  bio::CuffRunParams cuff;
  std::vector<std::string> thresholds;
  double timeout_s = 3.0;
  std::string ruler_top, ruler_bottom, head, foot;
  double ruler_len_m = 1.0;
};

void print_advice(const Global& g, const rec::TestRecord& r, const rec::RecordStore& store) {
  for (const auto& rule : advice::evaluate(advice::load_rules(g.rules), r, store)) {
    ojson j;
    j["advice"] = rule.id;
    j["message"] = rule.message;
    std::cout << rec::canonical_dump(j) << "\n";
  }
}

int run_measure(const Global& g, MeasureOptions& m) {
  const auto kind = rec::parse_kind(m.kind);
  if (!kind) throw Usage("unknown test kind " + m.kind);
  const auto cfg = m.link.config();
  ops::HubSessionLock lock(g.lock_path());
  rec::RecordStore store(g.store);
  store.patient(m.patient);  // unknown-patient before touching the hub

  ops::HubLink link(cfg);
  link.hold_cutoff(m.cutoff);
  rec::Payload payload;
  switch (*kind) {
    case rec::TestKind::Temperature: {
      const auto r = ops::measure_temperature(link, m.true_c);
      payload = ops::scalar_payload(*kind, r.celsius, r.implausible ? std::vector<std::string>{"implausible"}
                                                                    : std::vector<std::string>{});
      break;
    }
    case rec::TestKind::Weight: {
      const auto r = ops::measure_weight(link, m.true_kg, dx::ideal_weight_calib());
      payload = ops::scalar_payload(*kind, r.kg, r.negative ? std::vector<std::string>{"negative"}
                                                            : std::vector<std::string>{});
      break;
    }
    case rec::TestKind::EyePower:
      payload = ops::scalar_payload(*kind, ops::measure_eye_power(link, m.distance_m).power_d);
      break;
    case rec::TestKind::BloodPressure:
      m.cuff.seed = m.link.seed;
      payload = ops::measure_bp(link, m.cuff).result;
      break;
    case rec::TestKind::Hearing: {
      bio::HearingProfile profile;
      for (const auto& t : m.thresholds) {
        const auto eq = t.find('=');
        if (eq == std::string::npos) throw Usage("--threshold takes HZ=DB");
        try {
          profile.threshold_db[std::stoi(t.substr(0, eq))] = std::stod(t.substr(eq + 1));
        } catch (const std::exception&) {
          throw Usage("--threshold takes HZ=DB");
        }
      }
      payload = ops::run_hearing(profile, m.timeout_s).audiogram;
      break;
    }
    case rec::TestKind::Height: {
      const dx::HeightInput in{parse_pixel(m.ruler_top, "--ruler-top"), parse_pixel(m.ruler_bottom, "--ruler-bottom"),
                               parse_pixel(m.head, "--head"), parse_pixel(m.foot, "--foot"), m.ruler_len_m};
      payload = ops::scalar_payload(*kind, dx::height_from_pixels(in));
      break;
    }
  }
  const ops::RecordFactory factory(g.device, rec::now_utc);
  const auto record = factory.make(store, m.patient, *kind, payload);
  store.save(record);
  std::cout << rec::canonical_line(record) << "\n";
  print_advice(g, record, store);
  return 0;
}

std::string audiogram_plot(const dx::Audiogram& a) {
  std::ostringstream out;
  out << "dB HL ";
  for (const auto& [f, t] : a.thresholds) {
    char col[16];
    std::snprintf(col, sizeof col, "%6d", f);
    out << col;
  }
  out << "\n";
  for (int level = dx::kMinLevelDb; level <= dx::kMaxLevelDb; level += dx::kLevelStepDb) {
    char row[16];
    std::snprintf(row, sizeof row, "%5d ", level);
    out << row;
    for (const auto& [f, t] : a.thresholds) out << (t && *t == level ? "     O" : "     .");
    out << "\n";
  }
  out << "   NR ";
  for (const auto& [f, t] : a.thresholds) out << (t ? "      " : "     X");
  out << "\n";
  return out.str();
}

volatile std::sig_atomic_t g_signal = 0;

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Unified mobile public health care system: operator tool"};
  app.require_subcommand(1);
  Global g;
  app.add_option("--store", g.store, "record store file (env UMPHCS_STORE)");
  app.add_option("--device", g.device, "device id used in record ids");
  app.add_option("--lock", g.lock, "hub session lock file (default <store>.lock)");
  app.add_option("--rules", g.rules, "abnormal-result rule table");

  // patient
  auto* patient = app.add_subcommand("patient", "manage patients");
  patient->require_subcommand(1);
  rec::Patient new_patient;
  auto* patient_add = patient->add_subcommand("add", "register a patient");
  patient_add->add_option("--id", new_patient.patient_id)->required();
  patient_add->add_option("--name", new_patient.name);
  patient_add->add_option("--region", new_patient.region);
  auto* patient_list = patient->add_subcommand("list", "list patients");

  // measure
  MeasureOptions m;
  auto* measure = app.add_subcommand("measure", "run one test against the emulated hub");
  measure->add_option("kind", m.kind, "temperature | blood_pressure | weight | eye_power | hearing | height")
      ->required();
  measure->add_option("--patient", m.patient)->required();
  m.link.add(measure);
  measure->add_option("--seed", m.link.seed, "seed for link faults and cuff noise");
  measure->add_flag("--cutoff", m.cutoff, "hold the safety cutoff switch");
  measure->add_option("--true-c", m.true_c, "temperature: simulated body temperature");
  measure->add_option("--true-kg", m.true_kg, "weight: simulated load");
  measure->add_option("--distance-m", m.distance_m, "eye_power: lens separation where the view is clear");
  measure->add_option("--map", m.cuff.map_true, "blood_pressure: true MAP (mmHg)");
  measure->add_option("--sigma", m.cuff.sigma, "blood_pressure: envelope width (mmHg)");
  measure->add_option("--amp", m.cuff.amp_max, "blood_pressure: oscillation amplitude at MAP (mmHg)");
  measure->add_option("--hr-hz", m.cuff.heart_rate_hz, "blood_pressure: heart rate (Hz)");
  measure->add_option("--noise", m.cuff.noise_sd, "blood_pressure: sensor noise sd (mmHg)");
  measure->add_option("--p-start", m.cuff.p_start, "blood_pressure: inflation pressure (mmHg)");
  measure->add_option("--rate", m.cuff.deflation_rate, "blood_pressure: deflation rate (mmHg/s)");
  measure->add_option("--threshold", m.thresholds, "hearing: HZ=DB, repeatable; absent = never heard");
  measure->add_option("--timeout-s", m.timeout_s, "hearing: tone timeout (simulated s)");
  measure->add_option("--ruler-top", m.ruler_top, "height: x,y pixel");
  measure->add_option("--ruler-bottom", m.ruler_bottom, "height: x,y pixel");
  measure->add_option("--head", m.head, "height: x,y pixel");
  measure->add_option("--foot", m.foot, "height: x,y pixel");
  measure->add_option("--ruler-len-m", m.ruler_len_m, "height: ruler length (m)");

  // screen
  auto* screen = app.add_subcommand("screen", "trend screening");
  screen->require_subcommand(1);
  std::string screen_target;
  auto* screen_weight = screen->add_subcommand("weight", "weight-decline screen for one patient");
  screen_weight->add_option("patient", screen_target)->required();
  auto* screen_region = screen->add_subcommand("region", "regional alert");
  screen_region->add_option("region", screen_target)->required();

  // sync
  auto* sync = app.add_subcommand("sync", "record upload");
  sync->require_subcommand(1);
  std::string endpoint = env_or(sync::kEndpointEnv, "");
  auto* sync_run = sync->add_subcommand("run", "upload unsynced patients and records");
  sync_run->add_option("--endpoint", endpoint, "host:port (env UMPHCS_SYNC_ENDPOINT)");

  // serve
  auto* serve = app.add_subcommand("serve", "long-running services");
  serve->require_subcommand(1);
  int port = 0;
  std::string host = "127.0.0.1";
  std::string server_log;
  auto* serve_sync = serve->add_subcommand("sync", "central record server");
  serve_sync->add_option("--port", port)->required();
  serve_sync->add_option("--host", host);
  serve_sync->add_option("--log", server_log, "server log file (default: memory only)");
  auto* serve_gateway = serve->add_subcommand("gateway", "HTTP gateway for the web console");
  serve_gateway->add_option("--port", port)->required();
  serve_gateway->add_option("--host", host);
  LinkOptions gw_link;
  gw_link.add(serve_gateway);
  serve_gateway->add_option("--seed", gw_link.seed, "link fault seed");
  double bp_speed = 1.0, hearing_timeout = 3.0;
  serve_gateway->add_option("--bp-speed", bp_speed, "simulated seconds per wall second (0 = unpaced)");
  serve_gateway->add_option("--hearing-timeout-s", hearing_timeout, "tone timeout (wall s)");

  // scenario
  auto* scenario = app.add_subcommand("scenario", "scripted sessions");
  scenario->require_subcommand(1);
  std::string scenario_file, report_file;
  auto* scenario_run = scenario->add_subcommand("run", "run a scenario file");
  scenario_run->add_option("file", scenario_file)->required();
  scenario_run->add_option("--report", report_file, "also write the report to this file");

  // audiogram
  auto* audiogram = app.add_subcommand("audiogram", "hearing results");
  audiogram->require_subcommand(1);
  std::string record_id;
  auto* audiogram_show = audiogram->add_subcommand("show", "text plot of a stored audiogram");
  audiogram_show->add_option("record_id", record_id)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what());
  }

  try {
    if (patient_add->parsed()) {
      if (new_patient.patient_id.empty()) throw Usage("--id must not be empty");
      rec::RecordStore store(g.store);
      new_patient.created_at = rec::now_utc();
      if (store.has_patient(new_patient.patient_id)) {
        const auto& old = store.patient(new_patient.patient_id);
        if (old.name == new_patient.name && old.region == new_patient.region) new_patient.created_at = old.created_at;
      }
      store.save(new_patient);
      std::cout << rec::canonical_line(store.patient(new_patient.patient_id)) << "\n";
    } else if (patient_list->parsed()) {
      rec::RecordStore store(g.store);
      for (const auto& p : store.patients()) std::cout << rec::canonical_line(p) << "\n";
    } else if (measure->parsed()) {
      return run_measure(g, m);
    } else if (screen_weight->parsed()) {
      rec::RecordStore store(g.store);
      store.patient(screen_target);
      const auto flag = rec::screen_weight(store.history(screen_target, rec::TestKind::Weight));
      ojson j;
      j["patient_id"] = screen_target;
      j["flagged"] = flag.has_value();
      if (flag) {
        j["rule"] = flag->rule;
        j["evidence"] = flag->evidence;
        j["severity"] = flag->severity;
      }
      std::cout << rec::canonical_dump(j) << "\n";
    } else if (screen_region->parsed()) {
      rec::RecordStore store(g.store);
      const auto alert = rec::screen_region(store, screen_target);
      if (alert) {
        std::cout << rec::canonical_json(*alert) << "\n";
      } else {
        ojson j;
        j["region"] = screen_target;
        j["alert"] = nullptr;
        std::cout << rec::canonical_dump(j) << "\n";
      }
    } else if (sync_run->parsed()) {
      if (endpoint.empty()) throw Usage("no endpoint: pass --endpoint or set UMPHCS_SYNC_ENDPOINT");
      sync::Endpoint ep;
      try {
        ep = sync::parse_endpoint(endpoint);
      } catch (const std::invalid_argument& e) {
        throw Usage(e.what());
      }
      rec::RecordStore store(g.store);
      sync::TcpLineChannel channel(ep);
      const auto summary = sync::client_sync(store, channel);
      ojson j;
      j["uploaded"] = summary.uploaded;
      j["skipped"] = summary.skipped;
      j["patients_uploaded"] = summary.patients_uploaded;
      std::cout << rec::canonical_dump(j) << "\n";
      if (!summary.ok()) return fail(*summary.error, "sync stopped; rerun to resume");
    } else if (serve_sync->parsed()) {
      std::optional<std::filesystem::path> log;
      if (!server_log.empty()) log = server_log;
      sync::ServerStore server_store(log);
      sync::SyncServer server(server_store, {host, static_cast<std::uint16_t>(port)});
      std::cerr << "sync server on " << host << ":" << server.port() << std::endl;
      std::signal(SIGINT, [](int s) { g_signal = s; });
      std::signal(SIGTERM, [](int s) { g_signal = s; });
      while (!g_signal) std::this_thread::sleep_for(std::chrono::milliseconds(200));
      server.stop();
    } else if (serve_gateway->parsed()) {
      gw::GatewayConfig cfg;
      cfg.store_path = g.store;
      cfg.lock_path = g.lock_path();
      cfg.device_id = g.device;
      cfg.link = gw_link.config();
      cfg.bp_speed = bp_speed;
      cfg.hearing_timeout_s = hearing_timeout;
      cfg.rules = advice::load_rules(g.rules);
      gw::Gateway gateway(cfg);
      const int bound = gateway.listen(host, port);
      std::cerr << "gateway on " << host << ":" << bound << std::endl;
      std::signal(SIGINT, [](int s) { g_signal = s; });
      std::signal(SIGTERM, [](int s) { g_signal = s; });
      while (!g_signal) std::this_thread::sleep_for(std::chrono::milliseconds(200));
      gateway.shutdown();
    } else if (scenario_run->parsed()) {
      const auto sc = scn::load_scenario(scenario_file);
      rec::RecordStore store(g.store);
      const auto report = scn::run_scenario(sc, store);
      const std::string text = report.text();
      std::cout << text;
      if (!report_file.empty()) {
        std::ofstream out(report_file, std::ios::binary | std::ios::trunc);
        out << text;
        if (!out) return fail("storage-failure", "cannot write " + report_file);
      }
      if (!report.ok()) return fail("scenario-failed", "one or more tests failed; see report");
    } else if (audiogram_show->parsed()) {
      rec::RecordStore store(g.store);
      const auto r = store.record(record_id);
      if (!r) return fail("unknown-record", "no record " + record_id);
      const auto* a = std::get_if<dx::Audiogram>(&r->payload);
      if (!a) return fail("not-an-audiogram", record_id + " is a " + rec::to_string(r->kind) + " record");
      std::cout << audiogram_plot(*a);
    }
  } catch (const Usage& e) {
    return fail("usage", e.what());
  } catch (const scn::ScenarioParseError& e) {
    return fail(e.code(), e.detail());
  } catch (const Error& e) {
    return fail(e.code(), e.detail());
  } catch (const std::invalid_argument& e) {
    return fail("invalid-argument", e.what());
  } catch (const std::exception& e) {
    return fail("internal", e.what());
  }
  return 0;
}
