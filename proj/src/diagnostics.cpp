#include "umphcs/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "umphcs/error.hpp"

namespace umphcs::dx {

namespace {

constexpr double kLm35Slope = 0.010;
constexpr double kMmhgPerKpa = 7.50062;
constexpr double kMpxGain = 0.018;
constexpr double kMpxOffset = 0.04;

void check_code(double code) {
  if (!(code >= 0.0 && code <= 1023.0)) throw std::out_of_range("ADC code outside [0, 1023]");
}

double code_to_volts(double code) { return code * kVref / kCodesPerVref; }

}  // namespace

TemperatureReading temperature_from_code(int code, const TemperatureCalib& calib) {
  check_code(code);
  calib.validate();
  TemperatureReading r;
  r.celsius = code_to_volts(code) / kLm35Slope + calib.offset_c;
  r.implausible = r.celsius < 30.0 || r.celsius > 45.0;
  return r;
}

PressureReading pressure_from_code(int code) {
  check_code(code);
  const double v = code_to_volts(code);
  PressureReading r;
  r.mmhg = kMmhgPerKpa * (v / kVref - kMpxOffset) / kMpxGain;
  if (r.mmhg < 0.0) {
    r.mmhg = 0.0;
    r.underflow = true;
  }
  return r;
}

WeightReading weight_from_code(double code, const TwoPointCalib& calib) {
  check_code(code);
  calib.validate();
  WeightReading r;
  r.kg = calib.value_lo + (code - calib.code_lo) * (calib.value_hi - calib.value_lo) / (calib.code_hi - calib.code_lo);
  r.negative = r.kg < 0.0;
  return r;
}

TwoPointCalib ideal_weight_calib() {
  // 150 kg -> 2 mV/V * 5 V * 400 = 4.0 V -> 4.0 * 1024 / 5 codes.
  TwoPointCalib c;
  c.code_lo = 0.0;
  c.value_lo = 0.0;
  c.code_hi = 4.0 * kCodesPerVref / kVref;
  c.value_hi = 150.0;
  return c;
}

double pot_to_distance(int code, const PotCalib& pot) {
  check_code(code);
  pot.validate();
  return pot.d_min + (static_cast<double>(code) / 1023.0) * (pot.d_max - pot.d_min);
}

void LensBench::validate() const {
  if (!(l > 0.0 && spectacle_plane > 0.0)) throw std::invalid_argument("bench distances must be positive");
}

double eye_power(double d, const LensBench& b) {
  b.validate();
  return (d * b.p2 - b.l * b.p1 - b.l * b.p2 + b.l * d * b.p1 * b.p2) / b.spectacle_plane;
}

EyePowerTrace eye_power_trace(double d, const LensBench& b) {
  b.validate();
  if (b.p1 == 0.0 || b.p2 == 0.0) throw Error("degenerate-lens-system", "a zero-power lens has no focal length");
  const double f1 = 1.0 / b.p1;
  const double f2 = 1.0 / b.p2;
  const double denom = f1 + f2 - d;
  if (std::abs(denom) < 1e-9) throw Error("degenerate-lens-system", "lens separation equals f1 + f2");

  EyePowerTrace tr;
  tr.d = d;
  tr.f_equiv = f1 * f2 / denom;
  tr.alpha = tr.f_equiv * d / f2;
  const double s = -b.l;
  tr.f_spectacle = tr.f_equiv * b.spectacle_plane / (s + tr.alpha);
  tr.power = (s + tr.alpha) / (tr.f_equiv * b.spectacle_plane);
  return tr;
}

double height_from_pixels(const HeightInput& in) {
  auto dist = [](Pixel a, Pixel b) { return std::hypot(a.x - b.x, a.y - b.y); };
  if (!(in.ruler_len > 0.0)) throw std::invalid_argument("ruler length must be positive");
  const double n_r = dist(in.ruler_top, in.ruler_bottom);
  const double n_b = dist(in.head, in.foot);
  if (n_r < 10.0) throw Error("degenerate-ruler", "ruler spans fewer than 10 pixels");
  if (n_b == 0.0) throw std::invalid_argument("head and foot coincide");
  return n_b / n_r * in.ruler_len;
}

// ---- Band-pass ---------------------------------------------------------------

namespace {

// Direct form II transposed biquad, a0 normalised to 1.
struct Biquad {
  double b0, b1, b2, a1, a2;

  // Steady-state internal state for a constant input u.
  std::array<double, 2> steady_state(double u) const {
    const double y = u * (b0 + b1 + b2) / (1.0 + a1 + a2);
    const double z2 = b2 * u - a2 * y;
    const double z1 = b1 * u - a1 * y + z2;
    return {z1, z2};
  }

  void run(std::vector<double>& x) const {
    auto z = steady_state(x.front());
    for (double& v : x) {
      const double in = v;
      const double out = b0 * in + z[0];
      z[0] = b1 * in - a1 * out + z[1];
      z[1] = b2 * in - a2 * out;
      v = out;
    }
  }
};

// Butterworth sections via the bilinear transform with prewarping.
Biquad butter2(double fc, double fs, bool highpass) {
  const double w0 = 2.0 * std::numbers::pi * fc / fs;
  const double cw = std::cos(w0);
  const double alpha = std::sin(w0) / std::numbers::sqrt2;  // Q = 1/sqrt(2)
  const double a0 = 1.0 + alpha;
  Biquad q{};
  if (highpass) {
    q.b0 = (1.0 + cw) / 2.0 / a0;
    q.b1 = -(1.0 + cw) / a0;
    q.b2 = q.b0;
  } else {
    q.b0 = (1.0 - cw) / 2.0 / a0;
    q.b1 = (1.0 - cw) / a0;
    q.b2 = q.b0;
  }
  q.a1 = -2.0 * cw / a0;
  q.a2 = (1.0 - alpha) / a0;
  return q;
}

constexpr double kLowEdgeHz = 0.5;
constexpr double kHighEdgeHz = 5.0;

std::vector<double> bandpass_filtfilt(const std::vector<double>& x, double fs) {
  const std::array<Biquad, 2> sections{butter2(kLowEdgeHz, fs, true), butter2(kHighEdgeHz, fs, false)};
  const std::size_t n = x.size();
  const std::size_t pad = std::min<std::size_t>(static_cast<std::size_t>(3.0 * fs), n - 1);

  // The band-pass blocks straight lines, so removing the least-squares line
  // first only shortens the start-up transient.
  double mean_i = 0.0, mean_x = 0.0;
  for (std::size_t i = 0; i < n; ++i) mean_i += static_cast<double>(i), mean_x += x[i];
  mean_i /= static_cast<double>(n);
  mean_x /= static_cast<double>(n);
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double di = static_cast<double>(i) - mean_i;
    sxy += di * (x[i] - mean_x);
    sxx += di * di;
  }
  const double slope = sxx > 0.0 ? sxy / sxx : 0.0;
  std::vector<double> r(n);
  for (std::size_t i = 0; i < n; ++i) r[i] = x[i] - mean_x - slope * (static_cast<double>(i) - mean_i);

  // Odd extension keeps ramps straight across the edges.
  std::vector<double> y;
  y.reserve(n + 2 * pad);
  for (std::size_t i = pad; i >= 1; --i) y.push_back(2.0 * r.front() - r[i]);
  y.insert(y.end(), r.begin(), r.end());
  for (std::size_t i = 1; i <= pad; ++i) y.push_back(2.0 * r.back() - r[n - 1 - i]);

  for (const auto& s : sections) s.run(y);
  std::reverse(y.begin(), y.end());
  for (const auto& s : sections) s.run(y);
  std::reverse(y.begin(), y.end());
  return {y.begin() + static_cast<std::ptrdiff_t>(pad), y.begin() + static_cast<std::ptrdiff_t>(pad + n)};
}

}  // namespace

StreamingBandpass::StreamingBandpass(double fs) {
  const Biquad sec[2] = {butter2(kLowEdgeHz, fs, true), butter2(kHighEdgeHz, fs, false)};
  for (int i = 0; i < 2; ++i) {
    coef_[i][0] = sec[i].b0;
    coef_[i][1] = sec[i].b1;
    coef_[i][2] = sec[i].b2;
    coef_[i][3] = sec[i].a1;
    coef_[i][4] = sec[i].a2;
  }
}

double StreamingBandpass::push(double x) {
  for (int i = 0; i < 2; ++i) {
    const Biquad q{coef_[i][0], coef_[i][1], coef_[i][2], coef_[i][3], coef_[i][4]};
    if (!primed_) {
      const auto zi = q.steady_state(x);
      z_[i][0] = zi[0];
      z_[i][1] = zi[1];
    }
    const double y = q.b0 * x + z_[i][0];
    z_[i][0] = q.b1 * x - q.a1 * y + z_[i][1];
    z_[i][1] = q.b2 * x - q.a2 * y;
    x = y;
  }
  primed_ = true;
  return x;
}

OwSeries extract_ow(std::span<const PressureSample> series, double fs) {
  if (!(fs > 0.0)) throw std::invalid_argument("sample rate must be positive");
  const double dt = 1.0 / fs;
  if (series.size() < 2 || series.back().t_s - series.front().t_s < 10.0 - 1e-9)
    throw Error("too-short", "need at least 10 s of cuff pressure");
  for (std::size_t i = 1; i < series.size(); ++i) {
    const double gap = series[i].t_s - series[i - 1].t_s;
    // Timestamps jitter inside their slot, so only whole intervals count.
    if (!(gap > 0.0) || std::floor(gap / dt + 1e-9) > 3.0)
      throw Error("nonuniform-sampling", "sample gap exceeds three intervals or time not increasing");
  }

  OwSeries out;
  out.sample_rate = fs;
  const double t0 = series.front().t_s;
  const auto n = static_cast<std::size_t>(std::floor((series.back().t_s - t0) * fs + 1e-9)) + 1;
  out.t.resize(n);
  out.pressure.resize(n);
  std::size_t j = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double t = t0 + static_cast<double>(i) * dt;
    while (j + 2 < series.size() && series[j + 1].t_s <= t) ++j;
    const auto& a = series[j];
    const auto& b = series[j + 1];
    const double w = std::clamp((t - a.t_s) / (b.t_s - a.t_s), 0.0, 1.0);
    out.t[i] = t;
    out.pressure[i] = a.mmhg + w * (b.mmhg - a.mmhg);
  }
  out.ow = bandpass_filtfilt(out.pressure, fs);
  return out;
}

OscillationEnvelope ow_envelope(const OwSeries& s) {
  const std::size_t n = s.ow.size();
  if (n != s.t.size() || n != s.pressure.size()) throw std::invalid_argument("OW and pressure time bases differ");

  // Filter edges carry start-up transients.
  const auto edge = static_cast<std::size_t>(0.5 * s.sample_rate);
  OscillationEnvelope env;
  if (n <= 2 * edge + 7) throw Error("no-beats", "series too short for beat detection");

  double peak_abs = 0.0;
  for (std::size_t i = edge; i < n - edge; ++i) peak_abs = std::max(peak_abs, std::abs(s.ow[i]));

  // Pressure noise from sixth differences, which cancel the smooth pulse.
  std::vector<double> d6;
  d6.reserve(n - 6);
  for (std::size_t i = 0; i + 6 < n; ++i) {
    const auto& p = s.pressure;
    d6.push_back(std::abs(p[i] - 6 * p[i + 1] + 15 * p[i + 2] - 20 * p[i + 3] + 15 * p[i + 4] - 6 * p[i + 5] + p[i + 6]));
  }
  const auto mid = d6.begin() + static_cast<std::ptrdiff_t>(d6.size() / 2);
  std::nth_element(d6.begin(), mid, d6.end());
  const double noise_sd = *mid / (0.6745 * std::sqrt(924.0));
  const double band_noise = noise_sd * std::sqrt(2.0 * (kHighEdgeHz - kLowEdgeHz) / s.sample_rate);
  // Swings under a micro-mmHg are rounding residue, far below one ADC step.
  const double floor_hyst = std::max(std::min(3.0 * band_noise, 0.1 * peak_abs), 1e-6);

  // Hysteresis follows the local swing so small beats far from MAP still count.
  const auto window = static_cast<std::size_t>(s.sample_rate);
  std::vector<double> hyst(n, 0.0);
  for (std::size_t i = edge; i < n - edge; ++i) {
    const std::size_t lo = i >= window ? i - window : 0;
    const std::size_t hi = std::min(n - 1, i + window);
    double local = 0.0;
    for (std::size_t k = lo; k <= hi; ++k) local = std::max(local, std::abs(s.ow[k]));
    hyst[i] = std::max(0.1 * local, floor_hyst);
  }

  // Cuff trend: pressure minus oscillation, lightly smoothed.
  const auto trend_at = [&](std::size_t i) {
    const std::size_t half = 5;
    const std::size_t lo = i >= half ? i - half : 0;
    const std::size_t hi = std::min(n - 1, i + half);
    double acc = 0.0;
    for (std::size_t k = lo; k <= hi; ++k) acc += s.pressure[k] - s.ow[k];
    return acc / static_cast<double>(hi - lo + 1);
  };

  if (peak_abs > 0.0) {
    enum { Searching, Rising, Falling } phase = Searching;
    std::size_t peak = 0, trough = 0;
    for (std::size_t i = edge; i < n - edge; ++i) {
      const double v = s.ow[i];
      const double h = hyst[i];
      if (!(h > 0.0)) continue;
      switch (phase) {
        case Searching:
          if (v < -h) phase = Falling, trough = i, peak = n;
          break;
        case Rising:
          if (v > s.ow[peak]) peak = i;
          if (v < -h) phase = Falling, trough = i;
          break;
        case Falling:
          if (v < s.ow[trough]) trough = i;
          if (v > h) {
            if (peak < n) {
              // The peak-to-trough swing is centred between its two ends.
              const std::size_t centre = (peak + trough) / 2;
              const double t = 0.5 * (s.t[peak] + s.t[trough]);
              env.points.push_back({trend_at(centre), s.ow[peak] - s.ow[trough], t});
            }
            phase = Rising;
            peak = i;
          }
          break;
      }
    }
  }
  if (env.points.size() < 5) throw Error("no-beats", "fewer than five beats detected");
  return env;
}

BpResult estimate_bp(const OscillationEnvelope& env) {
  const auto& pts = env.points;
  if (pts.size() < 5) throw Error("no-beats", "fewer than five beats in envelope");

  std::size_t k = 0;
  for (std::size_t i = 1; i < pts.size(); ++i)
    if (pts[i].amplitude > pts[k].amplitude) k = i;
  const double a_max = pts[k].amplitude;
  if (!(a_max > 0.0)) throw Error("no-beats", "envelope carries no oscillation");

  BpResult r;
  r.map = pts[k].cuff_mmhg;
  if (k > 0 && k + 1 < pts.size()) {
    // Vertex of the parabola through the maximum and its neighbours.
    const double x0 = pts[k - 1].cuff_mmhg, x1 = pts[k].cuff_mmhg, x2 = pts[k + 1].cuff_mmhg;
    const double y0 = pts[k - 1].amplitude, y1 = a_max, y2 = pts[k + 1].amplitude;
    const double den = (x1 - x0) * (y1 - y2) - (x1 - x2) * (y1 - y0);
    if (den != 0.0) {
      const double num = (x1 - x0) * (x1 - x0) * (y1 - y2) - (x1 - x2) * (x1 - x2) * (y1 - y0);
      r.map = std::clamp(x1 - 0.5 * num / den, std::min(x0, x2), std::max(x0, x2));
    }
  }

  // Pressure where the amplitude crosses `level` between points i (below)
  // and j (at or above).
  auto crossing = [&](std::size_t below, std::size_t above, double level) {
    const auto& lo = pts[below];
    const auto& hi = pts[above];
    const double w = (level - lo.amplitude) / (hi.amplitude - lo.amplitude);
    return lo.cuff_mmhg + w * (hi.cuff_mmhg - lo.cuff_mmhg);
  };

  const double sys_level = kSystolicRatio * a_max;
  std::optional<double> sys;
  for (std::size_t i = k; i-- > 0;) {
    if (pts[i].amplitude < sys_level) {
      sys = crossing(i, i + 1, sys_level);
      break;
    }
  }
  if (!sys) throw Error("no-systolic-crossing", "envelope never falls below 50% above MAP");

  const double dia_level = kDiastolicRatio * a_max;
  std::optional<double> dia;
  for (std::size_t i = k + 1; i < pts.size(); ++i) {
    if (pts[i].amplitude < dia_level) {
      dia = crossing(i, i - 1, dia_level);
      break;
    }
  }
  if (!dia) throw Error("no-diastolic-crossing", "envelope never falls below 70% under MAP");
  r.systolic = *sys;
  r.diastolic = *dia;

  std::vector<double> ibi;
  ibi.reserve(pts.size() - 1);
  // Strong beats only; weak ones far from MAP may be noise.
  for (std::size_t i = 1; i < pts.size(); ++i)
    if (std::min(pts[i].amplitude, pts[i - 1].amplitude) >= sys_level)
      ibi.push_back(pts[i].beat_time_s - pts[i - 1].beat_time_s);
  if (ibi.empty()) throw Error("no-beats", "no adjacent strong beats for the heart rate");
  const auto mid = ibi.begin() + static_cast<std::ptrdiff_t>(ibi.size() / 2);
  std::nth_element(ibi.begin(), mid, ibi.end());
  double median = *mid;
  if (ibi.size() % 2 == 0) median = 0.5 * (median + *std::max_element(ibi.begin(), mid));
  r.heart_rate = 60.0 / median;
  if (!(r.heart_rate >= 30.0 && r.heart_rate <= 300.0))
    throw Error("implausible-heart-rate", "median beat interval outside 30..300 bpm");
  return r;
}

// ---- Hearing -----------------------------------------------------------------

int HearingState::current_freq() const {
  if (finished()) throw Error("step-after-finish", "sweep already complete");
  return kSweepFrequencies[freq_index];
}

HearingState hearing_step(HearingState st, HearingEvent event) {
  if (st.finished()) throw Error("step-after-finish", "sweep already complete");
  ++st.steps;
  auto advance = [&](std::optional<int> result) {
    st.results.push_back(result);
    ++st.freq_index;
    st.level_db = kMinLevelDb;
  };
  if (event == HearingEvent::Heard) {
    advance(st.level_db);
  } else if (st.level_db + kLevelStepDb > kMaxLevelDb) {
    advance(std::nullopt);
  } else {
    st.level_db += kLevelStepDb;
  }
  return st;
}

Audiogram audiogram(const HearingState& st) {
  if (!st.finished()) throw Error("not-finished", "hearing sweep still running");
  Audiogram a;
  for (std::size_t i = 0; i < kSweepFrequencies.size(); ++i) a.thresholds[kSweepFrequencies[i]] = st.results.at(i);
  return a;
}

}  // namespace umphcs::dx
