#pragma once

namespace umphcs {

/// Additive correction applied after the LM35 transfer. |offset_c| <= 5.
struct TemperatureCalib {
  double offset_c = 0.0;
  void validate() const;
};

/// Line through two (ADC code, kg) anchors.
struct TwoPointCalib {
  double code_lo = 0.0;
  double code_hi = 1023.0;
  double value_lo = 0.0;
  double value_hi = 0.0;
  void validate() const;
};

/// Slide-pot travel: code 0 sits at d_min, full scale at d_max (meters).
struct PotCalib {
  double d_min = 0.015;
  double d_max = 0.075;
  void validate() const;
};

}  // namespace umphcs
