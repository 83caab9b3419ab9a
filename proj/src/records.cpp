#include "umphcs/records.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstring>
#include <ctime>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "umphcs/error.hpp"

namespace umphcs::rec {

using ojson = nlohmann::ordered_json;

namespace {

void write_canonical(const ojson& j, std::string& out) {
  switch (j.type()) {
    case ojson::value_t::object: {
      out += '{';
      bool first = true;
      for (const auto& [k, v] : j.items()) {
        if (!first) out += ',';
        first = false;
        out += ojson(k).dump(-1, ' ', false, ojson::error_handler_t::strict);
        out += ':';
        write_canonical(v, out);
      }
      out += '}';
      break;
    }
    case ojson::value_t::array: {
      out += '[';
      for (std::size_t i = 0; i < j.size(); ++i) {
        if (i) out += ',';
        write_canonical(j[i], out);
      }
      out += ']';
      break;
    }
    case ojson::value_t::number_float:
      out += format_number(j.get<double>());
      break;
    default:
      out += j.dump(-1, ' ', false, ojson::error_handler_t::strict);
  }
}

constexpr std::array<std::pair<TestKind, const char*>, 6> kKinds{{
    {TestKind::Temperature, "temperature"},
    {TestKind::BloodPressure, "blood_pressure"},
    {TestKind::Weight, "weight"},
    {TestKind::EyePower, "eye_power"},
    {TestKind::Hearing, "hearing"},
    {TestKind::Height, "height"},
}};

bool payload_matches(TestKind k, const Payload& p) {
  switch (k) {
    case TestKind::BloodPressure:
      return std::holds_alternative<dx::BpResult>(p);
    case TestKind::Hearing:
      return std::holds_alternative<dx::Audiogram>(p);
    default:
      return std::holds_alternative<Scalar>(p) && std::get<Scalar>(p).unit == unit_of(k);
  }
}

std::string req_string(const ojson& j, const char* key) {
  if (!j.contains(key) || !j[key].is_string()) throw std::invalid_argument(std::string("missing string field ") + key);
  return j[key].get<std::string>();
}

double req_number(const ojson& j, const char* key) {
  if (!j.contains(key) || !j[key].is_number()) throw std::invalid_argument(std::string("missing number field ") + key);
  return j[key].get<double>();
}

Payload parse_payload(TestKind kind, const ojson& p) {
  if (!p.is_object()) throw std::invalid_argument("payload must be an object");
  switch (kind) {
    case TestKind::BloodPressure:
      return dx::BpResult{req_number(p, "systolic"), req_number(p, "diastolic"), req_number(p, "map"),
                          req_number(p, "heart_rate")};
    case TestKind::Hearing: {
      dx::Audiogram a;
      for (const auto& [k, v] : p.items()) {
        std::size_t used = 0;
        const int f = std::stoi(k, &used);
        if (used != k.size()) throw std::invalid_argument("audiogram key must be a frequency");
        if (v.is_null())
          a.thresholds[f] = std::nullopt;
        else if (v.is_number_integer())
          a.thresholds[f] = v.get<int>();
        else
          throw std::invalid_argument("audiogram threshold must be integer or null");
      }
      return a;
    }
    default: {
      Scalar s{req_number(p, "value"), req_string(p, "unit"), {}};
      if (p.contains("flags")) s.flags = p["flags"].get<std::vector<std::string>>();
      return s;
    }
  }
}

}  // namespace

std::string canonical_dump(const ojson& j) {
  std::string s;
  write_canonical(j, s);
  return s;
}

ojson payload_json(const Payload& payload) {
  ojson p = ojson::object();
  if (const auto* s = std::get_if<Scalar>(&payload)) {
    p["value"] = s->value;
    p["unit"] = s->unit;
    if (!s->flags.empty()) p["flags"] = s->flags;
  } else if (const auto* bp = std::get_if<dx::BpResult>(&payload)) {
    p["systolic"] = bp->systolic;
    p["diastolic"] = bp->diastolic;
    p["map"] = bp->map;
    p["heart_rate"] = bp->heart_rate;
  } else {
    const auto& a = std::get<dx::Audiogram>(payload);
    for (const auto& [f, t] : a.thresholds) p[std::to_string(f)] = t ? ojson(*t) : ojson(nullptr);
  }
  return p;
}

const char* to_string(TestKind k) {
  for (const auto& [kind, name] : kKinds)
    if (kind == k) return name;
  return "?";
}

std::optional<TestKind> parse_kind(std::string_view s) {
  for (const auto& [kind, name] : kKinds)
    if (s == name) return kind;
  return std::nullopt;
}

const char* unit_of(TestKind k) {
  switch (k) {
    case TestKind::Temperature:
      return "degC";
    case TestKind::Weight:
      return "kg";
    case TestKind::EyePower:
      return "D";
    case TestKind::Height:
      return "m";
    default:
      return "";
  }
}

std::string format_number(double v) {
  if (!std::isfinite(v)) throw std::invalid_argument("canonical numbers must be finite");
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  std::string s(buf);
  s.erase(s.find_last_not_of('0') + 1);
  if (s.back() == '.') s.pop_back();
  if (s == "-0") s = "0";
  return s;
}

std::string format_utc(std::int64_t epoch_seconds) {
  const auto t = static_cast<std::time_t>(epoch_seconds);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::int64_t parse_utc(const std::string& ts) {
  std::tm tm{};
  int consumed = 0;
  if (ts.size() != 20 ||
      std::sscanf(ts.c_str(), "%4d-%2d-%2dT%2d:%2d:%2dZ%n", &tm.tm_year, &tm.tm_mon, &tm.tm_mday, &tm.tm_hour,
                  &tm.tm_min, &tm.tm_sec, &consumed) != 6 ||
      consumed != 20)
    throw std::invalid_argument("timestamp must be YYYY-MM-DDTHH:MM:SSZ: " + ts);
  tm.tm_year -= 1900;
  tm.tm_mon -= 1;
  const std::int64_t secs = timegm(&tm);
  if (format_utc(secs) != ts) throw std::invalid_argument("timestamp out of range: " + ts);
  return secs;
}

std::string now_utc() { return format_utc(static_cast<std::int64_t>(std::time(nullptr))); }

std::string canonical_line(const Patient& p) {
  ojson j;
  j["type"] = "patient";
  j["patient_id"] = p.patient_id;
  j["name"] = p.name;
  j["region"] = p.region;
  j["created_at"] = p.created_at;
  return canonical_dump(j);
}

std::string canonical_line(const TestRecord& r) {
  ojson j;
  j["type"] = "record";
  j["kind"] = to_string(r.kind);
  j["record_id"] = r.record_id;
  j["patient_id"] = r.patient_id;
  j["device_id"] = r.device_id;
  j["taken_at"] = r.taken_at;
  j["payload"] = payload_json(r.payload);
  return canonical_dump(j);
}

std::string canonical_line(const SyncMark& m) {
  ojson j;
  j["type"] = "synced";
  j[m.is_patient ? "patient_id" : "record_id"] = m.id;
  return canonical_dump(j);
}

std::string canonical_line(const SupersedeMark& m) {
  ojson j;
  j["type"] = "supersede";
  j[m.is_patient ? "patient_id" : "record_id"] = m.id;
  return canonical_dump(j);
}

LogEntry parse_line(const std::string& line) {
  ojson j;
  try {
    j = ojson::parse(line);
  } catch (const ojson::parse_error& e) {
    throw std::invalid_argument(std::string("unparseable line: ") + e.what());
  }
  if (!j.is_object()) throw std::invalid_argument("line is not an object");
  const std::string type = req_string(j, "type");
  try {
    if (type == "patient") {
      Patient p{req_string(j, "patient_id"), req_string(j, "name"), req_string(j, "region"),
                req_string(j, "created_at")};
      if (p.patient_id.empty() || p.region.empty()) throw std::invalid_argument("patient id and region required");
      parse_utc(p.created_at);
      return p;
    }
    if (type == "record") {
      TestRecord r;
      const auto kind = parse_kind(req_string(j, "kind"));
      if (!kind) throw std::invalid_argument("unknown test kind");
      r.kind = *kind;
      r.record_id = req_string(j, "record_id");
      r.patient_id = req_string(j, "patient_id");
      r.device_id = req_string(j, "device_id");
      r.taken_at = req_string(j, "taken_at");
      parse_utc(r.taken_at);
      if (!j.contains("payload")) throw std::invalid_argument("missing payload");
      r.payload = parse_payload(r.kind, j["payload"]);
      if (!payload_matches(r.kind, r.payload)) throw std::invalid_argument("payload does not match kind");
      return r;
    }
    if (type == "synced") {
      if (j.contains("patient_id")) return SyncMark{true, req_string(j, "patient_id")};
      return SyncMark{false, req_string(j, "record_id")};
    }
    if (type == "supersede") {
      if (j.contains("patient_id")) return SupersedeMark{true, req_string(j, "patient_id")};
      return SupersedeMark{false, req_string(j, "record_id")};
    }
  } catch (const ojson::exception& e) {
    throw std::invalid_argument(e.what());
  }
  throw std::invalid_argument("unknown entry type " + type);
}

// ---- LogFile ---------------------------------------------------------------

LogFile::LogFile(std::filesystem::path path) : path_(std::move(path)) {
  std::string content;
  if (std::filesystem::exists(path_)) {
    std::ifstream in(path_, std::ios::binary);
    if (!in) throw Error("storage-failure", "cannot read " + path_.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    content = ss.str();
  }
  std::size_t start = 0;
  std::size_t keep = 0;  // bytes of intact content
  while (start < content.size()) {
    const auto nl = content.find('\n', start);
    if (nl == std::string::npos) {
      // Torn tail. Keep it only if it is a complete entry.
      std::string tail = content.substr(start);
      bool intact = true;
      try {
        parse_line(tail);
      } catch (const std::invalid_argument&) {
        intact = false;
      }
      if (intact) {
        lines_.push_back(tail);
        keep = content.size();
        warnings_.push_back("final line lacked a newline; terminated it");
      } else {
        warnings_.push_back("discarded truncated final line (" + std::to_string(tail.size()) + " bytes)");
      }
      break;
    }
    lines_.push_back(content.substr(start, nl - start));
    start = nl + 1;
    keep = start;
  }
  if (keep < content.size()) std::filesystem::resize_file(path_, keep);

  file_ = std::fopen(path_.c_str(), "ab");
  if (!file_) throw Error("storage-failure", "cannot open " + path_.string() + ": " + std::strerror(errno));
  if (keep > 0 && content[keep - 1] != '\n') {
    std::fputc('\n', file_);
    std::fflush(file_);
  }
}

LogFile::~LogFile() {
  if (file_) std::fclose(file_);
}

void LogFile::append(const std::string& line) {
  if (std::fwrite(line.data(), 1, line.size(), file_) != line.size() || std::fputc('\n', file_) == EOF ||
      std::fflush(file_) != 0 || ::fsync(::fileno(file_)) != 0)
    throw Error("storage-failure", "write to " + path_.string() + " failed");
}

// ---- RecordStore ----------------------------------------------------------

RecordStore::RecordStore(std::filesystem::path path) : log_(std::move(path)) {
  for (const auto& line : log_.initial_lines()) {
    try {
      apply(parse_line(line));
    } catch (const std::invalid_argument& e) {
      throw Error("storage-failure", std::string("corrupt store line: ") + e.what());
    }
  }
}

void RecordStore::apply(const LogEntry& e) {
  if (const auto* p = std::get_if<Patient>(&e)) {
    patient_index_[p->patient_id] = patients_.size();
    patients_.push_back(*p);
  } else if (const auto* r = std::get_if<TestRecord>(&e)) {
    record_index_[r->record_id] = records_.size();
    records_.push_back(*r);
  } else if (const auto* m = std::get_if<SyncMark>(&e)) {
    if (m->is_patient) {
      synced_patients_.insert(m->id);
    } else if (auto it = record_index_.find(m->id); it != record_index_.end()) {
      records_[it->second].synced = true;
    }
  }
}

std::string RecordStore::save(const Patient& p) {
  if (p.patient_id.empty() || p.region.empty())
    throw std::invalid_argument("patient id and region must be non-empty");
  parse_utc(p.created_at);
  const std::string line = canonical_line(p);
  if (auto it = patient_index_.find(p.patient_id); it != patient_index_.end()) {
    if (canonical_line(patients_[it->second]) == line) return p.patient_id;
    throw Error("duplicate-patient", "patient id " + p.patient_id + " already holds other data");
  }
  log_.append(line);
  apply(p);
  return p.patient_id;
}

std::string RecordStore::save(const TestRecord& r) {
  if (!has_patient(r.patient_id)) throw Error("unknown-patient", "no patient " + r.patient_id);
  if (r.record_id.empty()) throw std::invalid_argument("record id must be non-empty");
  if (!payload_matches(r.kind, r.payload)) throw std::invalid_argument("payload does not match test kind");
  parse_utc(r.taken_at);
  const std::string line = canonical_line(r);
  if (auto it = record_index_.find(r.record_id); it != record_index_.end()) {
    if (canonical_line(records_[it->second]) == line) return r.record_id;
    throw Error("duplicate-record", "record id " + r.record_id + " already holds other data");
  }
  log_.append(line);
  TestRecord stored = r;
  stored.synced = false;
  apply(stored);
  return r.record_id;
}

void RecordStore::mark_synced(const TestRecord& r) {
  auto it = record_index_.find(r.record_id);
  if (it == record_index_.end() || records_[it->second].synced) return;
  log_.append(canonical_line(SyncMark{false, r.record_id}));
  records_[it->second].synced = true;
}

void RecordStore::mark_synced(const Patient& p) {
  if (!has_patient(p.patient_id) || patient_synced(p.patient_id)) return;
  log_.append(canonical_line(SyncMark{true, p.patient_id}));
  synced_patients_.insert(p.patient_id);
}

const Patient& RecordStore::patient(const std::string& id) const {
  auto it = patient_index_.find(id);
  if (it == patient_index_.end()) throw Error("unknown-patient", "no patient " + id);
  return patients_[it->second];
}

std::optional<TestRecord> RecordStore::record(const std::string& record_id) const {
  auto it = record_index_.find(record_id);
  if (it == record_index_.end()) return std::nullopt;
  return records_[it->second];
}

namespace {
void sort_by_time(std::vector<TestRecord>& v) {
  std::stable_sort(v.begin(), v.end(), [](const TestRecord& a, const TestRecord& b) { return a.taken_at < b.taken_at; });
}
}  // namespace

std::vector<TestRecord> RecordStore::history(const std::string& patient_id, TestKind kind) const {
  if (!has_patient(patient_id)) throw Error("unknown-patient", "no patient " + patient_id);
  std::vector<TestRecord> out;
  for (const auto& r : records_)
    if (r.patient_id == patient_id && r.kind == kind) out.push_back(r);
  sort_by_time(out);
  return out;
}

std::vector<TestRecord> RecordStore::unsynced() const {
  std::vector<TestRecord> out;
  for (const auto& r : records_)
    if (!r.synced) out.push_back(r);
  sort_by_time(out);
  return out;
}

// ---- Screening ---------------------------------------------------------------

std::optional<TrendFlag> screen_weight(std::span<const TestRecord> weights, const ScreeningPolicy& policy) {
  if (weights.empty()) return std::nullopt;
  auto value = [](const TestRecord& r) {
    const auto* s = std::get_if<Scalar>(&r.payload);
    if (r.kind != TestKind::Weight || !s) throw std::invalid_argument("screen_weight expects weight records");
    return s->value;
  };
  std::size_t begin = weights.size() - 1;
  while (begin > 0 && value(weights[begin - 1]) > value(weights[begin])) --begin;
  const std::size_t run = weights.size() - begin;
  if (run < policy.min_run) return std::nullopt;
  const double first = value(weights[begin]);
  const double last = value(weights.back());
  if (!(first > 0.0)) return std::nullopt;
  const double drop = (first - last) / first;
  if (drop + 1e-12 < policy.min_drop) return std::nullopt;
  TrendFlag f;
  f.patient_id = weights.back().patient_id;
  f.severity = drop;
  for (std::size_t i = begin; i < weights.size(); ++i) f.evidence.push_back(weights[i].record_id);
  return f;
}

std::optional<RegionAlert> screen_region(std::span<const Patient> patients, std::span<const TestRecord> records,
                                         const std::string& region, const ScreeningPolicy& policy) {
  RegionAlert a;
  a.region = region;
  for (const auto& p : patients) {
    if (p.region != region) continue;
    std::vector<TestRecord> w;
    for (const auto& r : records)
      if (r.patient_id == p.patient_id && r.kind == TestKind::Weight) w.push_back(r);
    if (w.size() < policy.min_run) continue;
    std::stable_sort(w.begin(), w.end(), [](const TestRecord& x, const TestRecord& y) { return x.taken_at < y.taken_at; });
    ++a.eligible;
    if (screen_weight(w, policy)) ++a.flagged;
  }
  if (a.eligible == 0) return std::nullopt;
  a.fraction = static_cast<double>(a.flagged) / static_cast<double>(a.eligible);
  if (static_cast<double>(a.flagged) + 1e-9 < policy.region_fraction * static_cast<double>(a.eligible))
    return std::nullopt;
  return a;
}

std::optional<RegionAlert> screen_region(const RecordStore& store, const std::string& region,
                                         const ScreeningPolicy& policy) {
  return screen_region(store.patients(), store.records(), region, policy);
}

std::string canonical_json(const RegionAlert& a) {
  ojson j;
  j["region"] = a.region;
  j["eligible"] = a.eligible;
  j["flagged"] = a.flagged;
  j["fraction"] = a.fraction;
  return canonical_dump(j);
}

}  // namespace umphcs::rec
