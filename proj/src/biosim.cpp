#include "umphcs/biosim.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

#include "umphcs/error.hpp"

namespace umphcs {

void TemperatureCalib::validate() const {
  if (!(std::abs(offset_c) <= 5.0)) throw std::invalid_argument("temperature offset must be within +-5 degC");
}

void TwoPointCalib::validate() const {
  if (code_lo == code_hi) throw std::invalid_argument("calibration codes must differ");
}

void PotCalib::validate() const {
  if (!(d_min > 0.0 && d_min < d_max)) throw std::invalid_argument("pot travel needs 0 < d_min < d_max");
}

}  // namespace umphcs

namespace umphcs::bio {

void SensorConstants::validate() const {
  for (double v : {lm35_slope, mpx_supply, mpx_span_kpa, mpx_gain, mpx_offset, loadcell_fullscale,
                   loadcell_excitation, inamp_gain, loadcell_capacity_kg, mmhg_per_kpa})
    if (!(v > 0.0)) throw std::invalid_argument("sensor constants must be positive");
}

double lm35_voltage(double temp_c, const SensorConstants& k) {
  if (!(temp_c >= 0.0 && temp_c <= 150.0))
    throw Error("out-of-sensor-range", "LM35 covers 0..150 degC");
  return k.lm35_slope * temp_c;
}

double mpx_voltage(double p_mmhg, const SensorConstants& k) {
  const double kpa = p_mmhg / k.mmhg_per_kpa;
  if (!(kpa >= 0.0 && kpa <= k.mpx_span_kpa + 1e-9))
    throw Error("out-of-sensor-range", "MPX pressure sensor covers 0..50 kPa");
  return k.mpx_supply * (k.mpx_gain * kpa + k.mpx_offset);
}

double loadcell_voltage(double weight_kg, const SensorConstants& k) {
  if (!(weight_kg >= 0.0 && weight_kg <= k.loadcell_capacity_kg))
    throw Error("out-of-sensor-range", "load cell covers 0..capacity kg");
  return weight_kg / k.loadcell_capacity_kg * k.loadcell_fullscale * k.loadcell_excitation * k.inamp_gain;
}

double slidepot_voltage(double d_m, const PotCalib& pot, double vref) {
  if (!(d_m >= pot.d_min && d_m <= pot.d_max)) throw Error("out-of-travel", "lens position outside pot travel");
  return vref * (d_m - pot.d_min) / (pot.d_max - pot.d_min);
}

void CuffRunParams::validate() const {
  if (!(p_start > map_true && map_true > 0.0)) throw std::invalid_argument("need p_start > map_true > 0");
  if (!(deflation_rate > 0.0)) throw std::invalid_argument("deflation rate must be positive");
  if (!(amp_max >= 0.0)) throw std::invalid_argument("amp_max must be nonnegative");
  if (!(sigma > 0.0)) throw std::invalid_argument("sigma must be positive");
  if (!(heart_rate_hz >= 0.5 && heart_rate_hz <= 5.0)) throw std::invalid_argument("heart rate must be in [0.5, 5] Hz");
  if (!(noise_sd >= 0.0)) throw std::invalid_argument("noise sd must be nonnegative");
}

double CuffRunParams::systolic_true() const { return map_true + sigma * std::sqrt(2.0 * std::log(2.0)); }

double CuffRunParams::diastolic_true() const { return map_true - sigma * std::sqrt(2.0 * std::log(1.0 / 0.7)); }

double envelope_amplitude(const CuffRunParams& params, double p_mmhg) {
  const double z = (p_mmhg - params.map_true) / params.sigma;
  return params.amp_max * std::exp(-0.5 * z * z);
}

double cuff_trend(const CuffRunParams& params, double t_s) { return params.p_start - params.deflation_rate * t_s; }

namespace {

std::uint64_t mix(std::uint64_t z) {
  z += 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

double gaussian_at(std::uint64_t seed, double t_s) {
  const auto key = static_cast<std::uint64_t>(std::llround(t_s * 1e6));
  const std::uint64_t a = mix(seed ^ mix(key));
  const std::uint64_t b = mix(a);
  const double u1 = (static_cast<double>(a >> 11) + 0.5) * 0x1.0p-53;
  const double u2 = static_cast<double>(b >> 11) * 0x1.0p-53;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

void check_time(const CuffRunParams& params, double t_s) {
  if (!(t_s >= 0.0 && t_s <= params.duration_s() + 1e-9))
    throw std::invalid_argument("cuff time outside the deflation run");
}

}  // namespace

double cuff_oscillation(const CuffRunParams& params, double t_s) {
  check_time(params, t_s);
  const double p = cuff_trend(params, t_s);
  double s = envelope_amplitude(params, p) * std::sin(2.0 * std::numbers::pi * params.heart_rate_hz * t_s);
  if (params.noise_sd > 0.0) s += params.noise_sd * gaussian_at(params.seed, t_s);
  return s;
}

double cuff_signal(const CuffRunParams& params, double t_s) {
  return cuff_trend(params, t_s) + cuff_oscillation(params, t_s);
}

void HearingProfile::validate() const {
  for (const auto& [f, db] : threshold_db)
    if (!(db >= -10.0 && db <= 120.0)) throw std::invalid_argument("hearing threshold outside [-10, 120] dB HL");
}

bool hearing_response(const HearingProfile& profile, int freq_hz, double level_db) {
  auto it = profile.threshold_db.find(freq_hz);
  return it != profile.threshold_db.end() && level_db >= it->second;
}

namespace {
void raw_only(hub::SensorChannel c) {
  if (c != hub::SensorChannel::Raw) throw std::logic_error("module has no filtered channel");
}
}  // namespace

TemperatureProbe::TemperatureProbe(double temp_c, SensorConstants k) : volts_(lm35_voltage(temp_c, k)) {}

double TemperatureProbe::voltage(hub::SensorChannel channel, double) const {
  raw_only(channel);
  return volts_;
}

LoadCell::LoadCell(double weight_kg, SensorConstants k) : volts_(loadcell_voltage(weight_kg, k)) {}

double LoadCell::voltage(hub::SensorChannel channel, double) const {
  raw_only(channel);
  return volts_;
}

SlidePot::SlidePot(double d_m, PotCalib pot) : volts_(slidepot_voltage(d_m, pot)) {}

double SlidePot::voltage(hub::SensorChannel channel, double) const {
  raw_only(channel);
  return volts_;
}

CuffModule::CuffModule(CuffRunParams params, double start_ms, SensorConstants k, double filter_gain)
    : params_(params), start_ms_(start_ms), k_(k), filter_gain_(filter_gain) {
  params_.validate();
}

double CuffModule::voltage(hub::SensorChannel channel, double clock_ms) const {
  double t = (clock_ms - start_ms_) / 1000.0;
  if (t < 0.0) t = 0.0;
  if (t > params_.duration_s()) t = params_.duration_s();
  if (channel == hub::SensorChannel::Filtered) return 2.5 + filter_gain_ * cuff_oscillation(params_, t);
  double p = cuff_signal(params_, t);
  const double p_max = k_.mpx_span_kpa * k_.mmhg_per_kpa;
  if (p < 0.0) p = 0.0;
  if (p > p_max) p = p_max;
  return mpx_voltage(p, k_);
}

}  // namespace umphcs::bio
