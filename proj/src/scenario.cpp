#include "umphcs/scenario.hpp"

#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

namespace umphcs::scn {

using ojson = nlohmann::ordered_json;

ScenarioParseError::ScenarioParseError(std::size_t line, std::size_t column, const std::string& detail)
    : Error("scenario-parse", std::to_string(line) + ":" + std::to_string(column) + ": " + detail),
      line_(line),
      column_(column) {}

namespace {

std::string pointer_token(const std::string& key) {
  std::string out;
  for (char c : key) {
    if (c == '~')
      out += "~0";
    else if (c == '/')
      out += "~1";
    else
      out += c;
  }
  return out;
}

// Byte offset of every value in an already validated document, keyed by JSON
// pointer. nlohmann keeps no source positions, so schema errors need this.
class Positions {
 public:
  explicit Positions(std::string_view text) : t_(text) { value(""); }

  std::size_t offset(const std::string& ptr) const {
    const auto it = map_.find(ptr);
    return it == map_.end() ? 0 : it->second;
  }

 private:
  bool more() const { return i_ < t_.size(); }
  void ws() {
    while (more() && std::strchr(" \t\r\n", t_[i_]) && t_[i_] != '\0') ++i_;
  }
  std::string str() {
    std::string out;
    ++i_;
    while (more() && t_[i_] != '"') {
      if (t_[i_] == '\\' && i_ + 1 < t_.size()) {
        out += t_[i_ + 1];
        i_ += 2;
      } else {
        out += t_[i_++];
      }
    }
    ++i_;
    return out;
  }
  void value(const std::string& ptr) {
    ws();
    if (!more()) return;
    map_[ptr] = i_;
    const char c = t_[i_];
    if (c == '{' || c == '[') {
      const char close = c == '{' ? '}' : ']';
      ++i_;
      for (std::size_t n = 0;; ++n) {
        ws();
        if (!more() || t_[i_] == close) break;
        if (c == '{') {
          const std::string key = str();
          ws();
          ++i_;  // ':'
          value(ptr + "/" + pointer_token(key));
        } else {
          value(ptr + "/" + std::to_string(n));
        }
        ws();
        if (more() && t_[i_] == ',') ++i_;
      }
      ++i_;
    } else if (c == '"') {
      str();
    } else {
      while (more() && !std::strchr(",]} \t\r\n", t_[i_])) ++i_;
    }
  }

  std::string_view t_;
  std::size_t i_ = 0;
  std::map<std::string, std::size_t> map_;
};

std::pair<std::size_t, std::size_t> line_col(std::string_view text, std::size_t offset) {
  std::size_t line = 1, col = 1;
  for (std::size_t i = 0; i < offset && i < text.size(); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return {line, col};
}

class Reader {
 public:
  explicit Reader(std::string_view text) : text_(text), pos_(text) {}

  [[noreturn]] void fail(const std::string& ptr, const std::string& msg) const {
    const auto [l, c] = line_col(text_, pos_.offset(ptr));
    throw ScenarioParseError(l, c, (ptr.empty() ? "/" : ptr) + ": " + msg);
  }

  void only_keys(const ojson& j, const std::string& ptr, std::initializer_list<const char*> keys) const {
    if (!j.is_object()) fail(ptr, "expected an object");
    for (const auto& [k, v] : j.items()) {
      bool known = false;
      for (const char* key : keys) known = known || k == key;
      if (!known) fail(ptr + "/" + pointer_token(k), "unknown key \"" + k + "\"");
    }
  }

  double number(const ojson& j, const std::string& ptr) const {
    if (!j.is_number()) fail(ptr, "expected a number");
    return j.get<double>();
  }
  std::string string(const ojson& j, const std::string& ptr) const {
    if (!j.is_string()) fail(ptr, "expected a string");
    return j.get<std::string>();
  }
  bool boolean(const ojson& j, const std::string& ptr) const {
    if (!j.is_boolean()) fail(ptr, "expected true or false");
    return j.get<bool>();
  }
  std::uint64_t unsigned_int(const ojson& j, const std::string& ptr) const {
    if (!j.is_number_unsigned()) fail(ptr, "expected a nonnegative integer");
    return j.get<std::uint64_t>();
  }
  int integer(const ojson& j, const std::string& ptr) const {
    if (!j.is_number_integer()) fail(ptr, "expected an integer");
    return j.get<int>();
  }

  // Optional members: assign only when present.
  void opt(const ojson& obj, const std::string& ptr, const char* key, double& out) const {
    if (obj.contains(key)) out = number(obj[key], ptr + "/" + key);
  }
  const ojson& req(const ojson& obj, const std::string& ptr, const char* key) const {
    if (!obj.contains(key)) fail(ptr, std::string("missing \"") + key + "\"");
    return obj[key];
  }

  template <class F>
  void checked(const std::string& ptr, F&& f) const {
    try {
      f();
    } catch (const ScenarioParseError&) {
      throw;
    } catch (const std::exception& e) {
      fail(ptr, e.what());
    }
  }

 private:
  std::string_view text_;
  Positions pos_;
};

int frequency_key(const Reader& rd, const std::string& key, const std::string& ptr) {
  std::size_t used = 0;
  int f = 0;
  try {
    f = std::stoi(key, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != key.size() || f <= 0) rd.fail(ptr, "key must be a frequency in Hz");
  return f;
}

dx::Pixel pixel(const Reader& rd, const ojson& j, const std::string& ptr) {
  if (!j.is_array() || j.size() != 2) rd.fail(ptr, "expected [x, y]");
  return {rd.number(j[0], ptr + "/0"), rd.number(j[1], ptr + "/1")};
}

const char* module_of(rec::TestKind k) {
  switch (k) {
    case rec::TestKind::Temperature:
      return "lm35";
    case rec::TestKind::BloodPressure:
      return "cuff";
    case rec::TestKind::Weight:
      return "load_cell";
    case rec::TestKind::EyePower:
      return "slide_pot";
    default:
      return nullptr;
  }
}

Expectation parse_expect(const Reader& rd, const ojson& j, const std::string& ptr, rec::TestKind kind) {
  if (!j.is_object()) rd.fail(ptr, "expected an object");
  Expectation e;
  std::set<std::string> allowed;
  if (kind == rec::TestKind::BloodPressure)
    allowed = {"systolic", "diastolic", "map", "heart_rate"};
  else if (kind != rec::TestKind::Hearing)
    allowed = {"value"};
  for (const auto& [k, v] : j.items()) {
    const std::string p = ptr + "/" + pointer_token(k);
    if (k == "error") {
      e.error = rd.string(v, p);
    } else if (k == "audiogram" && kind == rec::TestKind::Hearing) {
      if (!v.is_object()) rd.fail(p, "expected an object");
      dx::Audiogram a;
      for (const auto& [fk, fv] : v.items()) {
        const std::string fp = p + "/" + pointer_token(fk);
        const int f = frequency_key(rd, fk, fp);
        a.thresholds[f] = fv.is_null() ? std::nullopt : std::optional<int>(rd.integer(fv, fp));
      }
      e.audiogram = a;
    } else if (allowed.count(k)) {
      rd.only_keys(v, p, {"value", "tol"});
      Tolerance t{rd.number(rd.req(v, p, "value"), p + "/value"), rd.number(rd.req(v, p, "tol"), p + "/tol")};
      if (!(t.tol >= 0.0)) rd.fail(p + "/tol", "tolerance must be nonnegative");
      e.fields[k] = t;
    } else {
      rd.fail(p, "unknown expectation \"" + k + "\" for " + rec::to_string(kind));
    }
  }
  return e;
}

TestSpec parse_test(const Reader& rd, const ojson& j, const std::string& ptr, const Scenario& sc, std::size_t index) {
  if (!j.is_object()) rd.fail(ptr, "expected an object");
  TestSpec t;
  const auto kind = rec::parse_kind(rd.string(rd.req(j, ptr, "kind"), ptr + "/kind"));
  if (!kind) rd.fail(ptr + "/kind", "unknown test kind");
  t.kind = *kind;
  t.patient = rd.string(rd.req(j, ptr, "patient"), ptr + "/patient");
  bool known = false;
  for (const auto& p : sc.patients) known = known || p.patient_id == t.patient;
  if (!known) rd.fail(ptr + "/patient", "patient \"" + t.patient + "\" is not defined");

  const char* module = module_of(t.kind);
  if (j.contains("module")) {
    const std::string m = rd.string(j["module"], ptr + "/module");
    if (!module || m != module)
      rd.fail(ptr + "/module", "module \"" + m + "\" cannot run a " + rec::to_string(t.kind) + " test");
  }
  if (j.contains("cutoff")) {
    t.cutoff = rd.boolean(j["cutoff"], ptr + "/cutoff");
    if (t.cutoff && !module) rd.fail(ptr + "/cutoff", "test does not use the hub");
  }
  if (j.contains("expect")) t.expect = parse_expect(rd, j["expect"], ptr + "/expect", t.kind);

  switch (t.kind) {
    case rec::TestKind::Temperature:
      rd.only_keys(j, ptr, {"kind", "patient", "module", "cutoff", "expect", "true_c"});
      t.truth = rd.number(rd.req(j, ptr, "true_c"), ptr + "/true_c");
      break;
    case rec::TestKind::Weight:
      rd.only_keys(j, ptr, {"kind", "patient", "module", "cutoff", "expect", "true_kg"});
      t.truth = rd.number(rd.req(j, ptr, "true_kg"), ptr + "/true_kg");
      break;
    case rec::TestKind::EyePower:
      rd.only_keys(j, ptr, {"kind", "patient", "module", "cutoff", "expect", "distance_m"});
      t.truth = rd.number(rd.req(j, ptr, "distance_m"), ptr + "/distance_m");
      break;
    case rec::TestKind::BloodPressure: {
      rd.only_keys(j, ptr, {"kind", "patient", "module", "cutoff", "expect", "cuff"});
      t.cuff.seed = sc.seed + index;
      if (j.contains("cuff")) {
        const std::string cp = ptr + "/cuff";
        const ojson& c = j["cuff"];
        rd.only_keys(c, cp,
                     {"p_start", "deflation_rate", "map", "amp_max", "sigma", "heart_rate_hz", "noise_sd", "seed"});
        rd.opt(c, cp, "p_start", t.cuff.p_start);
        rd.opt(c, cp, "deflation_rate", t.cuff.deflation_rate);
        rd.opt(c, cp, "map", t.cuff.map_true);
        rd.opt(c, cp, "amp_max", t.cuff.amp_max);
        rd.opt(c, cp, "sigma", t.cuff.sigma);
        rd.opt(c, cp, "heart_rate_hz", t.cuff.heart_rate_hz);
        rd.opt(c, cp, "noise_sd", t.cuff.noise_sd);
        if (c.contains("seed")) t.cuff.seed = rd.unsigned_int(c["seed"], cp + "/seed");
        rd.checked(cp, [&] { t.cuff.validate(); });
      }
      break;
    }
    case rec::TestKind::Hearing: {
      rd.only_keys(j, ptr, {"kind", "patient", "expect", "thresholds", "timeout_s"});
      const std::string hp = ptr + "/thresholds";
      const ojson& h = rd.req(j, ptr, "thresholds");
      if (!h.is_object()) rd.fail(hp, "expected an object");
      for (const auto& [fk, fv] : h.items()) {
        const std::string fp = hp + "/" + pointer_token(fk);
        t.hearing.threshold_db[frequency_key(rd, fk, fp)] = rd.number(fv, fp);
      }
      rd.checked(hp, [&] { t.hearing.validate(); });
      if (j.contains("timeout_s")) {
        t.hearing_timeout_s = rd.number(j["timeout_s"], ptr + "/timeout_s");
        if (!(*t.hearing_timeout_s > 0.0)) rd.fail(ptr + "/timeout_s", "timeout must be positive");
      }
      break;
    }
    case rec::TestKind::Height:
      rd.only_keys(j, ptr, {"kind", "patient", "expect", "ruler_top", "ruler_bottom", "head", "foot", "ruler_len_m"});
      t.height.ruler_top = pixel(rd, rd.req(j, ptr, "ruler_top"), ptr + "/ruler_top");
      t.height.ruler_bottom = pixel(rd, rd.req(j, ptr, "ruler_bottom"), ptr + "/ruler_bottom");
      t.height.head = pixel(rd, rd.req(j, ptr, "head"), ptr + "/head");
      t.height.foot = pixel(rd, rd.req(j, ptr, "foot"), ptr + "/foot");
      t.height.ruler_len = rd.number(rd.req(j, ptr, "ruler_len_m"), ptr + "/ruler_len_m");
      if (!(t.height.ruler_len > 0.0)) rd.fail(ptr + "/ruler_len_m", "ruler length must be positive");
      break;
  }
  return t;
}

}  // namespace

Scenario parse_scenario(std::string_view text) {
  ojson doc;
  try {
    doc = ojson::parse(text.begin(), text.end());
  } catch (const ojson::parse_error& e) {
    const auto [l, c] = line_col(text, e.byte > 0 ? e.byte - 1 : 0);
    std::string msg = e.what();
    if (const auto p = msg.find("syntax error"); p != std::string::npos) msg = msg.substr(p);
    throw ScenarioParseError(l, c, msg);
  }
  const Reader rd(text);
  rd.only_keys(doc, "",
               {"seed", "device_id", "start_time", "step_s", "link", "hearing_timeout_s", "calibration", "bench",
                "patients", "tests"});
  Scenario sc;
  if (doc.contains("seed")) sc.seed = rd.unsigned_int(doc["seed"], "/seed");
  if (doc.contains("device_id")) {
    sc.device_id = rd.string(doc["device_id"], "/device_id");
    if (sc.device_id.empty()) rd.fail("/device_id", "must not be empty");
  }
  if (doc.contains("start_time")) {
    sc.start_time = rd.string(doc["start_time"], "/start_time");
    rd.checked("/start_time", [&] { rec::parse_utc(sc.start_time); });
  }
  if (doc.contains("step_s")) {
    sc.step_s = rd.integer(doc["step_s"], "/step_s");
    if (sc.step_s < 0) rd.fail("/step_s", "must be nonnegative");
  }
  if (doc.contains("hearing_timeout_s")) {
    sc.hearing_timeout_s = rd.number(doc["hearing_timeout_s"], "/hearing_timeout_s");
    if (!(sc.hearing_timeout_s > 0.0)) rd.fail("/hearing_timeout_s", "must be positive");
  }

  if (doc.contains("link")) {
    const ojson& l = doc["link"];
    rd.only_keys(l, "/link", {"transport", "latency_ms", "faults"});
    if (l.contains("transport")) {
      const std::string k = rd.string(l["transport"], "/link/transport");
      const auto kind = wire::parse_transport(k);
      if (!kind) rd.fail("/link/transport", "expected \"wired\" or \"bluetooth\"");
      sc.link.kind = *kind;
    }
    rd.opt(l, "/link", "latency_ms", sc.link.latency_ms);
    if (!(sc.link.latency_ms >= 0.0)) rd.fail("/link/latency_ms", "must be nonnegative");
    if (l.contains("faults")) {
      if (sc.link.kind != wire::TransportKind::Bluetooth) rd.fail("/link/faults", "faults need the bluetooth transport");
      const ojson& f = l["faults"];
      rd.only_keys(f, "/link/faults", {"drop_prob", "corrupt_prob", "seed"});
      wire::FaultProfile fp;
      fp.seed = sc.seed;
      rd.opt(f, "/link/faults", "drop_prob", fp.drop_prob);
      rd.opt(f, "/link/faults", "corrupt_prob", fp.corrupt_prob);
      if (f.contains("seed")) fp.seed = rd.unsigned_int(f["seed"], "/link/faults/seed");
      fp.latency_ms = sc.link.latency_ms;
      rd.checked("/link/faults", [&] { fp.validate(); });
      sc.link.faults = fp;
    }
  }

  if (doc.contains("calibration")) {
    const ojson& c = doc["calibration"];
    rd.only_keys(c, "/calibration", {"temperature_offset_c", "weight", "pot"});
    rd.opt(c, "/calibration", "temperature_offset_c", sc.temperature_calib.offset_c);
    rd.checked("/calibration/temperature_offset_c", [&] { sc.temperature_calib.validate(); });
    if (c.contains("weight")) {
      const ojson& w = c["weight"];
      rd.only_keys(w, "/calibration/weight", {"code_lo", "code_hi", "value_lo", "value_hi"});
      rd.opt(w, "/calibration/weight", "code_lo", sc.weight_calib.code_lo);
      rd.opt(w, "/calibration/weight", "code_hi", sc.weight_calib.code_hi);
      rd.opt(w, "/calibration/weight", "value_lo", sc.weight_calib.value_lo);
      rd.opt(w, "/calibration/weight", "value_hi", sc.weight_calib.value_hi);
      rd.checked("/calibration/weight", [&] { sc.weight_calib.validate(); });
    }
    if (c.contains("pot")) {
      const ojson& p = c["pot"];
      rd.only_keys(p, "/calibration/pot", {"d_min", "d_max"});
      rd.opt(p, "/calibration/pot", "d_min", sc.pot.d_min);
      rd.opt(p, "/calibration/pot", "d_max", sc.pot.d_max);
      rd.checked("/calibration/pot", [&] { sc.pot.validate(); });
    }
  }
  if (doc.contains("bench")) {
    const ojson& b = doc["bench"];
    rd.only_keys(b, "/bench", {"p1", "p2", "l", "spectacle_plane"});
    rd.opt(b, "/bench", "p1", sc.bench.p1);
    rd.opt(b, "/bench", "p2", sc.bench.p2);
    rd.opt(b, "/bench", "l", sc.bench.l);
    rd.opt(b, "/bench", "spectacle_plane", sc.bench.spectacle_plane);
    rd.checked("/bench", [&] { sc.bench.validate(); });
  }

  if (doc.contains("patients")) {
    const ojson& ps = doc["patients"];
    if (!ps.is_array()) rd.fail("/patients", "expected an array");
    std::set<std::string> seen;
    for (std::size_t i = 0; i < ps.size(); ++i) {
      const std::string p = "/patients/" + std::to_string(i);
      rd.only_keys(ps[i], p, {"id", "name", "region"});
      rec::Patient pt;
      pt.patient_id = rd.string(rd.req(ps[i], p, "id"), p + "/id");
      if (pt.patient_id.empty()) rd.fail(p + "/id", "must not be empty");
      if (!seen.insert(pt.patient_id).second) rd.fail(p + "/id", "duplicate patient id");
      pt.name = ps[i].contains("name") ? rd.string(ps[i]["name"], p + "/name") : "";
      pt.region = ps[i].contains("region") ? rd.string(ps[i]["region"], p + "/region") : "";
      pt.created_at = sc.start_time;
      sc.patients.push_back(pt);
    }
  }
  if (doc.contains("tests")) {
    const ojson& ts = doc["tests"];
    if (!ts.is_array()) rd.fail("/tests", "expected an array");
    for (std::size_t i = 0; i < ts.size(); ++i)
      sc.tests.push_back(parse_test(rd, ts[i], "/tests/" + std::to_string(i), sc, i));
  }
  return sc;
}

Scenario load_scenario(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("scenario-unreadable", "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_scenario(ss.str());
}

bool ScenarioReport::ok() const {
  for (const auto& t : tests)
    if (t.status == "fail" || t.status == "error") return false;
  return true;
}

std::string ScenarioReport::text() const {
  std::string out;
  std::vector<std::pair<std::string, std::size_t>> counts{{"pass", 0}, {"fail", 0}, {"error", 0}, {"done", 0}};
  for (const auto& t : tests) {
    for (auto& [k, n] : counts) n += k == t.status;
    ojson j;
    j["type"] = "test";
    j["index"] = t.index;
    j["kind"] = rec::to_string(t.kind);
    j["patient"] = t.patient;
    j["status"] = t.status;
    j["record_id"] = t.record_id ? ojson(*t.record_id) : ojson(nullptr);
    j["result"] = t.result;
    j["error"] = t.error ? ojson(*t.error) : ojson(nullptr);
    j["failures"] = t.failures;
    out += rec::canonical_dump(j) + "\n";
  }
  ojson s;
  s["type"] = "summary";
  s["tests"] = tests.size();
  for (const auto& [k, n] : counts) s[k] = n;
  s["ok"] = ok();
  out += rec::canonical_dump(s) + "\n";
  return out;
}

namespace {

rec::Payload run_test(const Scenario& sc, const TestSpec& t, ops::HubLink& link) {
  using rec::TestKind;
  const ops::RetryPolicy policy;
  switch (t.kind) {
    case TestKind::Temperature: {
      const auto r = ops::measure_temperature(link, t.truth, sc.temperature_calib, policy);
      std::vector<std::string> flags;
      if (r.implausible) flags.push_back("implausible");
      return ops::scalar_payload(t.kind, r.celsius, flags);
    }
    case TestKind::Weight: {
      const auto r = ops::measure_weight(link, t.truth, sc.weight_calib, policy);
      std::vector<std::string> flags;
      if (r.negative) flags.push_back("negative");
      return ops::scalar_payload(t.kind, r.kg, flags);
    }
    case TestKind::EyePower:
      return ops::scalar_payload(t.kind, ops::measure_eye_power(link, t.truth, sc.pot, sc.bench, policy).power_d);
    case TestKind::BloodPressure:
      return ops::measure_bp(link, t.cuff).result;
    case TestKind::Hearing:
      return ops::run_hearing(t.hearing, t.hearing_timeout_s.value_or(sc.hearing_timeout_s)).audiogram;
    case TestKind::Height:
      return ops::scalar_payload(t.kind, dx::height_from_pixels(t.height));
  }
  throw Error("unknown-kind", "unhandled test kind");
}

void check(const TestSpec& t, const rec::Payload& payload, const ojson& result, TestOutcome& out) {
  for (const auto& [field, bound] : t.expect.fields) {
    const double v = result.at(field).get<double>();
    if (!(std::abs(v - bound.value) <= bound.tol))
      out.failures.push_back(field + " " + rec::format_number(v) + " outside " + rec::format_number(bound.value) +
                             " +- " + rec::format_number(bound.tol));
  }
  if (t.expect.audiogram) {
    const auto* a = std::get_if<dx::Audiogram>(&payload);
    if (!a || !(*a == *t.expect.audiogram)) out.failures.push_back("audiogram differs from expectation");
  }
  if (t.expect.error) out.failures.push_back("expected error " + *t.expect.error);
}

}  // namespace

ScenarioReport run_scenario(const Scenario& sc, rec::RecordStore& store) {
  for (const auto& p : sc.patients) store.save(p);
  ops::HubLink link(sc.link);
  const std::int64_t t0 = rec::parse_utc(sc.start_time);

  ScenarioReport report;
  for (std::size_t i = 0; i < sc.tests.size(); ++i) {
    const TestSpec& t = sc.tests[i];
    TestOutcome out;
    out.index = i;
    out.kind = t.kind;
    out.patient = t.patient;
    out.result = nullptr;
    const std::string taken = rec::format_utc(t0 + static_cast<std::int64_t>(i + 1) * sc.step_s);
    const ops::RecordFactory factory(sc.device_id, [&] { return taken; });
    try {
      if (module_of(t.kind)) link.hold_cutoff(t.cutoff);
      const rec::Payload payload = run_test(sc, t, link);
      const auto record = factory.make(store, t.patient, t.kind, payload);
      store.save(record);
      out.record_id = record.record_id;
      out.result = rec::payload_json(payload);
      check(t, payload, out.result, out);
      out.status = !out.failures.empty() ? "fail" : t.expect.empty() ? "done" : "pass";
    } catch (const ScenarioParseError&) {
      throw;
    } catch (const Error& e) {
      if (e.code() == "storage-failure") throw;
      out.error = e.code();
      if (t.expect.error && *t.expect.error == e.code()) {
        out.status = "pass";
      } else {
        out.status = "error";
        out.failures.push_back(e.what());
      }
    }
    report.tests.push_back(std::move(out));
  }
  return report;
}

}  // namespace umphcs::scn
