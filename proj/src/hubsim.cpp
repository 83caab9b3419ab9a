#include "umphcs/hubsim.hpp"

#include <cmath>
#include <stdexcept>

#include "umphcs/error.hpp"

namespace umphcs::hub {

void AdcModel::validate() const {
  if (resolution_bits < 1 || resolution_bits > 24)
    throw std::invalid_argument("ADC resolution must be in [1, 24] bits");
  if (!(vref > 0.0)) throw std::invalid_argument("ADC reference must be positive");
}

int quantize(const AdcModel& model, double volts) {
  if (!std::isfinite(volts)) throw std::invalid_argument("non-finite voltage");
  const double scaled = std::floor(volts * static_cast<double>(1 << model.resolution_bits) / model.vref);
  if (scaled <= 0.0) return 0;
  if (scaled >= model.max_code()) return model.max_code();
  return static_cast<int>(scaled);
}

HubState configure(HubState state, HubAction action, std::shared_ptr<const VirtualModule> module) {
  switch (action) {
    case HubAction::Attach:
      if (state.safety_enabled)
        throw Error("attach-while-live", "modules may only be changed with the safety cutoff engaged");
      if (!module) throw std::invalid_argument("Attach requires a module");
      state.attached = std::move(module);
      break;
    case HubAction::Detach:
      state.attached.reset();
      break;
    case HubAction::SafetyOn:
      state.safety_enabled = true;
      break;
    case HubAction::SafetyOff:
      state.safety_enabled = false;
      break;
  }
  return state;
}

wire::HubResponse serve(const HubState& state, wire::HubCommand cmd, const AdcModel& model) {
  if (!state.safety_enabled || !state.attached) return wire::HubResponse::error();
  auto channel = SensorChannel::Raw;
  if (cmd == wire::HubCommand::SampleFiltered) {
    if (!state.has_filter_channel()) return wire::HubResponse::error();
    channel = SensorChannel::Filtered;
  }
  const double v = state.attached->voltage(channel, state.clock_ms);
  if (!std::isfinite(v)) return wire::HubResponse::error();
  return wire::HubResponse::adc(quantize(model, v));
}

std::size_t HubEmulator::poll(wire::Transport& link, double now_ms) {
  state_.clock_ms = now_ms;
  std::size_t replies = 0;
  for (std::uint8_t b : link.to_hub().read_available(now_ms)) {
    auto cmd = wire::decode_command(b);
    if (!cmd) {
      ++ignored_;
      continue;
    }
    link.to_host().write(wire::format_response(serve(state_, *cmd, model_)), now_ms);
    ++served_;
    ++replies;
  }
  return replies;
}

}  // namespace umphcs::hub
