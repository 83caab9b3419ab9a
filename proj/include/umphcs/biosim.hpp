#pragma once

// Physical ground truth: sensor transfer functions, synthetic cuff deflation
// runs, and a decision-level hearing model. Everything here is deterministic
// for a fixed seed.

#include <cstdint>
#include <map>
#include <memory>
#include <string>

#include "umphcs/calibration.hpp"
#include "umphcs/hubsim.hpp"

namespace umphcs::bio {

struct SensorConstants {
  double lm35_slope = 0.010;         // V/degC
  double mpx_supply = 5.0;           // V
  double mpx_span_kpa = 50.0;
  double mpx_gain = 0.018;           // per kPa, ratiometric
  double mpx_offset = 0.04;          // ratiometric
  double loadcell_fullscale = 0.002; // V/V of excitation
  double loadcell_excitation = 5.0;  // V
  double inamp_gain = 400.0;
  double loadcell_capacity_kg = 150.0;
  double mmhg_per_kpa = 7.50062;

  void validate() const;
};

double lm35_voltage(double temp_c, const SensorConstants& k = {});
double mpx_voltage(double p_mmhg, const SensorConstants& k = {});
double loadcell_voltage(double weight_kg, const SensorConstants& k = {});
double slidepot_voltage(double d_m, const PotCalib& pot = {}, double vref = 5.0);

struct CuffRunParams {
  double p_start = 180.0;       // mmHg
  double deflation_rate = 3.0;  // mmHg/s
  double map_true = 100.0;
  double amp_max = 3.0;         // oscillation amplitude at MAP, mmHg
  double sigma = 15.0;          // envelope width, mmHg
  double heart_rate_hz = 1.2;
  double noise_sd = 0.0;
  std::uint64_t seed = 0;

  void validate() const;  // throws std::invalid_argument
  /// Time to deflate to the 20 mmHg floor.
  double duration_s() const { return (p_start - 20.0) / deflation_rate; }
  /// Pressure where the envelope falls to 50% above MAP.
  double systolic_true() const;
  /// Pressure where the envelope falls to 70% below MAP.
  double diastolic_true() const;
  double heart_rate_bpm() const { return heart_rate_hz * 60.0; }
};

/// Gaussian oscillation envelope A(p).
double envelope_amplitude(const CuffRunParams& params, double p_mmhg);
/// Linear deflation trend p(t).
double cuff_trend(const CuffRunParams& params, double t_s);
/// Observed cuff pressure s(t) = p(t) + A(p(t)) sin(2 pi hr t) + noise(t).
/// Noise is a pure function of (seed, t) at microsecond resolution.
double cuff_signal(const CuffRunParams& params, double t_s);
/// Oscillatory component alone (what an analog band-pass would see).
double cuff_oscillation(const CuffRunParams& params, double t_s);

struct HearingProfile {
  std::map<int, double> threshold_db;  // Hz -> dB HL; absent = never hears
  void validate() const;
};

bool hearing_response(const HearingProfile& profile, int freq_hz, double level_db);

// Virtual sensor modules for the hub emulator.

class TemperatureProbe final : public hub::VirtualModule {
 public:
  explicit TemperatureProbe(double temp_c, SensorConstants k = {});
  double voltage(hub::SensorChannel channel, double clock_ms) const override;
  std::string name() const override { return "temperature"; }

 private:
  double volts_;
};

class LoadCell final : public hub::VirtualModule {
 public:
  explicit LoadCell(double weight_kg, SensorConstants k = {});
  double voltage(hub::SensorChannel channel, double clock_ms) const override;
  std::string name() const override { return "weight"; }

 private:
  double volts_;
};

class SlidePot final : public hub::VirtualModule {
 public:
  explicit SlidePot(double d_m, PotCalib pot = {});
  double voltage(hub::SensorChannel channel, double clock_ms) const override;
  std::string name() const override { return "eye-power"; }

 private:
  double volts_;
};

/// Arm cuff on the MPX pressure sensor. The run starts at `start_ms` hub time;
/// after the deflation floor the cuff holds at 20 mmHg. The filtered channel
/// carries the oscillation centred at 2.5 V with `filter_gain` V/mmHg.
class CuffModule final : public hub::VirtualModule {
 public:
  CuffModule(CuffRunParams params, double start_ms, SensorConstants k = {}, double filter_gain = 0.1);
  double voltage(hub::SensorChannel channel, double clock_ms) const override;
  bool has_filtered_channel() const override { return true; }
  std::string name() const override { return "blood-pressure"; }
  const CuffRunParams& params() const { return params_; }

 private:
  CuffRunParams params_;
  double start_ms_;
  SensorConstants k_;
  double filter_gain_;
};

}  // namespace umphcs::bio
