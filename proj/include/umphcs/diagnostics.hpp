#pragma once

// Conversion of ADC codes and sample streams into medical results.

#include <array>
#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "umphcs/calibration.hpp"

namespace umphcs::dx {

// Shared with the hub model: 10-bit codes over a 5 V reference.
inline constexpr double kVref = 5.0;
inline constexpr double kCodesPerVref = 1024.0;

struct TemperatureReading {
  double celsius = 0.0;
  bool implausible = false;  // outside 30..45 degC for a body reading
};
TemperatureReading temperature_from_code(int code, const TemperatureCalib& calib = {});

struct PressureReading {
  double mmhg = 0.0;
  bool underflow = false;  // sensor below its 0 kPa offset: cuff disconnected
};
PressureReading pressure_from_code(int code);

struct WeightReading {
  double kg = 0.0;
  bool negative = false;  // drift below the zero anchor
};
WeightReading weight_from_code(double code, const TwoPointCalib& calib);

/// Calibration that matches the emulated load cell exactly (0 kg at code 0,
/// capacity at its ideal code).
TwoPointCalib ideal_weight_calib();

double pot_to_distance(int code, const PotCalib& pot = {});

// ---- Eye power -------------------------------------------------------------

/// Two-lens bench. p1: eyepiece lens (D), p2: moving lens (D), l: eye to
/// eyepiece (m), spectacle_plane: where the prescribed lens sits (m).
struct LensBench {
  double p1 = -2.0;
  double p2 = 5.0;
  double l = 0.03;
  double spectacle_plane = 0.015;
  void validate() const;
};

/// Spectacle power for lens separation d.
///   P = (d p2 - l p1 - l p2 + l d p1 p2) / L
double eye_power(double d_m, const LensBench& bench = {});

struct EyePowerTrace {
  double d = 0.0;
  double f_equiv = 0.0;      // F' of the two-lens system
  double alpha = 0.0;        // virtual position of the equivalent lens
  double f_spectacle = 0.0;  // F at the spectacle plane (inf when P == 0)
  double power = 0.0;        // 1/F
};

/// Stepwise route through the equivalent-lens construction with signed eye
/// offset -l. Throws Error("degenerate-lens-system") at the F' pole or when a
/// lens has zero power.
EyePowerTrace eye_power_trace(double d_m, const LensBench& bench = {});

// ---- Height ----------------------------------------------------------------

struct Pixel {
  double x = 0.0;
  double y = 0.0;
};

struct HeightInput {
  Pixel ruler_top;
  Pixel ruler_bottom;
  Pixel head;
  Pixel foot;
  double ruler_len = 0.0;  // m
};

/// (N_B / N_R) * ruler length with Euclidean pixel distances. Throws
/// Error("degenerate-ruler") when N_R < 10 px.
double height_from_pixels(const HeightInput& in);

// ---- Oscillometric blood pressure -------------------------------------------

struct PressureSample {
  double t_s = 0.0;
  double mmhg = 0.0;
};

/// Uniformly resampled cuff pressure and its oscillation waveform.
struct OwSeries {
  double sample_rate = 100.0;
  std::vector<double> t;
  std::vector<double> pressure;
  std::vector<double> ow;
};

/// Second-order Butterworth high-pass at 0.5 Hz cascaded with a second-order
/// low-pass at 5 Hz, run forward and backward. Gaps up to three sample
/// intervals (whole intervals, slot jitter ignored) are bridged by linear interpolation.
/// Errors: "too-short" (< 10 s), "nonuniform-sampling".
OwSeries extract_ow(std::span<const PressureSample> series, double sample_rate = 100.0);

/// Causal version of the same band-pass, for live display only.
class StreamingBandpass {
 public:
  explicit StreamingBandpass(double sample_rate = 100.0);
  double push(double x);

 private:
  double coef_[2][5];  // b0 b1 b2 a1 a2 per section
  double z_[2][2]{};
  bool primed_ = false;
};

struct EnvelopePoint {
  double cuff_mmhg = 0.0;
  double amplitude = 0.0;  // peak-to-trough, mmHg
  double beat_time_s = 0.0;  // midway between the peak and its trough
};

struct OscillationEnvelope {
  std::vector<EnvelopePoint> points;  // ascending time, descending pressure
};

/// One point per detected beat. Throws Error("no-beats") below five beats.
OscillationEnvelope ow_envelope(const OwSeries& ow);

inline constexpr double kSystolicRatio = 0.5;
inline constexpr double kDiastolicRatio = 0.7;

struct BpResult {
  double systolic = 0.0;
  double diastolic = 0.0;
  double map = 0.0;
  double heart_rate = 0.0;  // bpm
};

/// Maximum-amplitude method with fixed characteristic ratios.
/// Errors: "no-beats", "no-systolic-crossing", "no-diastolic-crossing",
/// "implausible-heart-rate".
BpResult estimate_bp(const OscillationEnvelope& env);

// ---- Hearing ---------------------------------------------------------------

inline constexpr std::array<int, 6> kSweepFrequencies{250, 500, 1000, 2000, 4000, 8000};
inline constexpr int kMinLevelDb = -5;
inline constexpr int kMaxLevelDb = 80;
inline constexpr int kLevelStepDb = 5;
inline constexpr int kLevelsPerFrequency = (kMaxLevelDb - kMinLevelDb) / kLevelStepDb + 1;

enum class HearingEvent { Heard, NotHeard, Timeout };

struct HearingState {
  std::size_t freq_index = 0;
  int level_db = kMinLevelDb;
  std::vector<std::optional<int>> results;  // per finished frequency; nullopt = no response
  int steps = 0;

  bool finished() const { return freq_index >= kSweepFrequencies.size(); }
  int current_freq() const;  // throws when finished
};

/// Advances the sweep by one presentation. Throws Error("step-after-finish").
HearingState hearing_step(HearingState state, HearingEvent event);

struct Audiogram {
  std::map<int, std::optional<int>> thresholds;  // Hz -> dB HL, nullopt = no response
  friend bool operator==(const Audiogram&, const Audiogram&) = default;
};

/// Throws Error("not-finished") for an incomplete sweep.
Audiogram audiogram(const HearingState& state);

}  // namespace umphcs::dx
