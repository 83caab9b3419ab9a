#pragma once

// Host side of a measurement: drives the emulated hub over a transport on a
// simulated clock and runs the diagnostics pipelines.

#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "umphcs/biosim.hpp"
#include "umphcs/diagnostics.hpp"
#include "umphcs/hubsim.hpp"
#include "umphcs/records.hpp"
#include "umphcs/wireproto.hpp"

namespace umphcs::ops {

struct LinkConfig {
  wire::TransportKind kind = wire::TransportKind::Wired;
  double latency_ms = 1.0;  // bluetooth only
  std::optional<wire::FaultProfile> faults;  // bluetooth only
};

struct LinkStats {
  std::uint64_t transactions = 0;
  std::uint64_t ok = 0;
  std::uint64_t missing = 0;
  std::uint64_t malformed = 0;
  std::uint64_t hub_errors = 0;
};

/// A host, a link, and a hub sharing one simulated clock.
class HubLink {
 public:
  explicit HubLink(const LinkConfig& config = {}, hub::AdcModel adc = {});

  double now_ms() const { return now_ms_; }
  void advance_to(double t_ms);
  hub::HubEmulator& hub() { return hub_; }
  const LinkStats& stats() const { return stats_; }

  /// Operator module change: cutoff, swap, live again (unless the cutoff
  /// switch is held).
  void swap_module(std::shared_ptr<const hub::VirtualModule> module);
  /// Physical cutoff switch; while held the hub answers ERR.
  void hold_cutoff(bool held);

  struct Reply {
    enum class Status { Ok, HubRefused, Missing, Malformed } status = Status::Missing;
    int code = 0;
    double sample_ms = 0.0;  // hub time the sample was taken
  };
  /// One lockstep request/response. Exactly one well-formed frame counts as a
  /// reply; silence until the deadline is Missing, anything else Malformed.
  Reply transact(wire::HubCommand cmd);

 private:
  wire::Transport transport_;
  hub::HubEmulator hub_;
  wire::ResponseDecoder decoder_;
  double now_ms_ = 0.0;
  bool cutoff_held_ = false;
  LinkStats stats_;
};

struct RetryPolicy {
  int attempts_per_sample = 3;
  int max_failed_slots = 3;    // consecutive empty slots before abort
  double despike_mmhg = 10.0;  // deviation from the local median that marks a bad frame
};

/// Single-shot read with retries. Throws Error("hub-refused") or
/// Error("link-failure").
int sample_once(HubLink& link, const RetryPolicy& policy = {});

dx::TemperatureReading measure_temperature(HubLink& link, double true_c, const TemperatureCalib& calib = {},
                                           const RetryPolicy& policy = {});
dx::WeightReading measure_weight(HubLink& link, double true_kg, const TwoPointCalib& calib,
                                 const RetryPolicy& policy = {});

struct EyeReading {
  int code = 0;
  double distance_m = 0.0;
  double power_d = 0.0;
};
EyeReading eye_power_from_code(int code, const PotCalib& pot = {}, const dx::LensBench& bench = {});
EyeReading measure_eye_power(HubLink& link, double true_d, const PotCalib& pot = {},
                             const dx::LensBench& bench = {}, const RetryPolicy& policy = {});

struct StreamSample {
  double t_s = 0.0;
  double cuff_mmhg = 0.0;
  double ow = 0.0;  // causal band-pass, display only
};

struct BpOptions {
  double interval_ms = 10.0;
  RetryPolicy retry;
  std::function<void(const StreamSample&)> on_sample;
  const std::atomic<bool>* stop = nullptr;  // operator stop
};

struct BpRun {
  std::vector<dx::PressureSample> samples;  // accepted samples after despiking
  std::size_t gap_slots = 0;
  std::size_t despiked = 0;
  dx::BpResult result;
};

/// Streams the cuff at one command per interval from inflation to the 20 mmHg
/// floor, then runs the oscillometric pipeline. Throws the diagnostics errors
/// plus Error("hub-refused") / Error("link-failure").
BpRun measure_bp(HubLink& link, const bio::CuffRunParams& params, const BpOptions& options = {});

struct HearingStep {
  int freq_hz = 0;
  int level_db = 0;
  dx::HearingEvent event = dx::HearingEvent::Timeout;
};

struct HearingRun {
  dx::Audiogram audiogram;
  int steps = 0;
  double elapsed_s = 0.0;  // simulated
};

/// Runs the sweep against a simulated listener: a tone at or above threshold
/// is heard immediately (1 s presentation), otherwise the presentation times
/// out after `timeout_s`.
HearingRun run_hearing(const bio::HearingProfile& profile, double timeout_s = 3.0,
                       const std::function<void(const HearingStep&)>& on_step = {});

/// Record-id allocation and timestamps for a device.
class RecordFactory {
 public:
  RecordFactory(std::string device_id, std::function<std::string()> clock);
  rec::TestRecord make(const rec::RecordStore& store, const std::string& patient_id, rec::TestKind kind,
                       rec::Payload payload) const;
  const std::string& device_id() const { return device_id_; }

 private:
  std::string device_id_;
  std::function<std::string()> clock_;
};

rec::Payload scalar_payload(rec::TestKind kind, double value, std::vector<std::string> flags = {});

/// Session exclusivity on one hub, shared between processes through flock().
class HubSessionLock {
 public:
  explicit HubSessionLock(const std::string& path);  // throws Error("hub-busy")
  ~HubSessionLock();
  HubSessionLock(const HubSessionLock&) = delete;
  HubSessionLock& operator=(const HubSessionLock&) = delete;

 private:
  int fd_ = -1;
};

}  // namespace umphcs::ops
