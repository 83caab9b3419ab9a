#pragma once

// Local patient/result store: an append-only log of canonical JSON lines with
// an in-memory index rebuilt on open.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"
#include "umphcs/diagnostics.hpp"

namespace umphcs::rec {

enum class TestKind { Temperature, BloodPressure, Weight, EyePower, Hearing, Height };

const char* to_string(TestKind k);
std::optional<TestKind> parse_kind(std::string_view s);
/// Unit used by scalar payloads of this kind ("" for structured kinds).
const char* unit_of(TestKind k);

struct Scalar {
  double value = 0.0;
  std::string unit;
  std::vector<std::string> flags;  // e.g. "implausible", "negative"
};

using Payload = std::variant<Scalar, dx::BpResult, dx::Audiogram>;

struct Patient {
  std::string patient_id;
  std::string name;
  std::string region;
  std::string created_at;  // UTC, YYYY-MM-DDTHH:MM:SSZ
};

struct TestRecord {
  std::string record_id;
  std::string patient_id;
  std::string device_id;
  TestKind kind = TestKind::Temperature;
  std::string taken_at;
  Payload payload;
  bool synced = false;  // local bookkeeping, not part of the canonical line
};

/// Renders a finite double with at most six decimals, trailing zeros removed.
std::string format_number(double v);

/// Compact JSON with keys in insertion order and floats through format_number.
std::string canonical_dump(const nlohmann::ordered_json& j);

/// Payload object as it appears inside a canonical record line.
nlohmann::ordered_json payload_json(const Payload& payload);

/// UTC timestamp helpers. Timestamps are whole seconds.
std::string format_utc(std::int64_t epoch_seconds);
std::int64_t parse_utc(const std::string& ts);  // throws std::invalid_argument
std::string now_utc();

/// Canonical single-line form; identical input gives identical bytes.
std::string canonical_line(const Patient& p);
std::string canonical_line(const TestRecord& r);

struct SyncMark {
  bool is_patient = false;
  std::string id;
};
struct SupersedeMark {
  bool is_patient = false;
  std::string id;
};
using LogEntry = std::variant<Patient, TestRecord, SyncMark, SupersedeMark>;

std::string canonical_line(const SyncMark& m);
std::string canonical_line(const SupersedeMark& m);

/// Parses one log line. Throws std::invalid_argument on anything that is not
/// a well-formed entry whose payload matches its kind.
LogEntry parse_line(const std::string& line);

/// Append-only file with fsync'd writes. A torn trailing line is dropped on
/// open (and trimmed from the file) with a warning.
class LogFile {
 public:
  explicit LogFile(std::filesystem::path path);
  ~LogFile();
  LogFile(const LogFile&) = delete;
  LogFile& operator=(const LogFile&) = delete;

  /// Complete lines found on open, in file order.
  const std::vector<std::string>& initial_lines() const { return lines_; }
  const std::vector<std::string>& warnings() const { return warnings_; }
  void append(const std::string& line);
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  std::FILE* file_ = nullptr;
  std::vector<std::string> lines_;
  std::vector<std::string> warnings_;
};

class RecordStore {
 public:
  /// Opens (creating if needed) the log at `path`. Throws Error("storage-failure").
  explicit RecordStore(std::filesystem::path path);

  /// Throws Error("duplicate-patient") when the id exists with other content.
  std::string save(const Patient& p);
  /// Throws Error("unknown-patient"), Error("duplicate-record").
  std::string save(const TestRecord& r);

  void mark_synced(const TestRecord& r);
  void mark_synced(const Patient& p);

  bool has_patient(const std::string& id) const { return patient_index_.count(id) != 0; }
  const Patient& patient(const std::string& id) const;  // throws unknown-patient
  const std::vector<Patient>& patients() const { return patients_; }
  const std::vector<TestRecord>& records() const { return records_; }
  std::optional<TestRecord> record(const std::string& record_id) const;
  bool patient_synced(const std::string& id) const { return synced_patients_.count(id) != 0; }

  /// Records of `kind` for the patient, ascending taken_at (stable).
  std::vector<TestRecord> history(const std::string& patient_id, TestKind kind) const;
  /// All unsynced records, ascending taken_at (stable).
  std::vector<TestRecord> unsynced() const;

  const std::vector<std::string>& warnings() const { return log_.warnings(); }
  const std::filesystem::path& path() const { return log_.path(); }

 private:
  void apply(const LogEntry& e);

  LogFile log_;
  std::vector<Patient> patients_;
  std::map<std::string, std::size_t> patient_index_;
  std::vector<TestRecord> records_;
  std::map<std::string, std::size_t> record_index_;
  std::set<std::string> synced_patients_;
};

// ---- Screening ---------------------------------------------------------------

struct ScreeningPolicy {
  std::size_t min_run = 3;
  double min_drop = 0.05;
  double region_fraction = 0.20;
};

struct TrendFlag {
  std::string patient_id;
  std::string rule = "weight-decline";
  std::vector<std::string> evidence;  // record ids of the declining run
  double severity = 0.0;              // (first - last) / first
};

/// Flags a strictly decreasing tail of at least min_run weights whose total
/// relative drop reaches min_drop. Input must be ascending in time.
std::optional<TrendFlag> screen_weight(std::span<const TestRecord> weights, const ScreeningPolicy& policy = {});

struct RegionAlert {
  std::string region;
  std::size_t eligible = 0;  // patients with >= min_run weight records
  std::size_t flagged = 0;
  double fraction = 0.0;
};

/// Evaluates the regional rule over an arbitrary record set.
std::optional<RegionAlert> screen_region(std::span<const Patient> patients, std::span<const TestRecord> records,
                                         const std::string& region, const ScreeningPolicy& policy = {});
std::optional<RegionAlert> screen_region(const RecordStore& store, const std::string& region,
                                         const ScreeningPolicy& policy = {});

std::string canonical_json(const RegionAlert& a);

}  // namespace umphcs::rec
