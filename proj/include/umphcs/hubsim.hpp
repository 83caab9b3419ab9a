#pragma once

// Sensor hub emulator: one attached module, a 10-bit ADC, a safety cutoff.
// The hub does not know which sensor is attached; it only samples voltages.

#include <cstdint>
#include <memory>
#include <string>

#include "umphcs/wireproto.hpp"

namespace umphcs::hub {

struct AdcModel {
  int resolution_bits = 10;
  double vref = 5.0;

  void validate() const;
  int max_code() const { return (1 << resolution_bits) - 1; }
  /// Input span of one code.
  double lsb() const { return vref / static_cast<double>(1 << resolution_bits); }
};

/// floor(v * 2^bits / vref), clamped to [0, 2^bits - 1].
int quantize(const AdcModel& model, double volts);

enum class SensorChannel { Raw, Filtered };

class VirtualModule {
 public:
  virtual ~VirtualModule() = default;
  /// Finite voltage on `channel` at hub time `clock_ms`. Modules without a
  /// filtered channel throw on SensorChannel::Filtered.
  virtual double voltage(SensorChannel channel, double clock_ms) const = 0;
  virtual bool has_filtered_channel() const { return false; }
  virtual std::string name() const = 0;
};

struct HubState {
  std::shared_ptr<const VirtualModule> attached;
  bool safety_enabled = false;  // false: cutoff engaged, no sampling
  double clock_ms = 0.0;

  bool has_filter_channel() const { return attached && attached->has_filtered_channel(); }
};

enum class HubAction { Attach, Detach, SafetyOn, SafetyOff };

/// Applies an operator action. Attach is only legal under cutoff; otherwise
/// throws Error("attach-while-live").
HubState configure(HubState state, HubAction action,
                   std::shared_ptr<const VirtualModule> module = nullptr);

wire::HubResponse serve(const HubState& state, wire::HubCommand cmd, const AdcModel& model);

/// Hub side of a Transport: reads command bytes that have arrived, replies to
/// each valid one in order, ignores unknown bytes.
class HubEmulator {
 public:
  explicit HubEmulator(AdcModel model = {}) : model_(model) { model_.validate(); }

  HubState& state() { return state_; }
  const HubState& state() const { return state_; }
  const AdcModel& model() const { return model_; }

  void apply(HubAction action, std::shared_ptr<const VirtualModule> module = nullptr) {
    state_ = configure(std::move(state_), action, std::move(module));
  }

  /// Processes everything readable at `now_ms`; returns the number of replies sent.
  std::size_t poll(wire::Transport& link, double now_ms);

  std::uint64_t commands_served() const { return served_; }
  std::uint64_t bytes_ignored() const { return ignored_; }

 private:
  AdcModel model_;
  HubState state_;
  std::uint64_t served_ = 0;
  std::uint64_t ignored_ = 0;
};

}  // namespace umphcs::hub
