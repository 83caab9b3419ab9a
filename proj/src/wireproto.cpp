#include "umphcs/wireproto.hpp"

#include <algorithm>
#include <stdexcept>
#include <string_view>

namespace umphcs::wire {

Bytes encode_command(HubCommand cmd) {
  switch (cmd) {
    case HubCommand::SampleRaw:
      return {kCmdSampleRaw};
    case HubCommand::SampleFiltered:
      return {kCmdSampleFiltered};
  }
  return {};
}

std::optional<HubCommand> decode_command(std::uint8_t byte) {
  if (byte == kCmdSampleRaw) return HubCommand::SampleRaw;
  if (byte == kCmdSampleFiltered) return HubCommand::SampleFiltered;
  return std::nullopt;
}

HubResponse HubResponse::adc(int code) {
  if (code < 0 || code > kAdcMax) throw std::out_of_range("ADC code outside [0, 1023]");
  return HubResponse{AdcValue{code}};
}

int HubResponse::code() const {
  if (const auto* v = std::get_if<AdcValue>(&payload_)) return v->code;
  throw std::logic_error("HubError carries no ADC code");
}

Bytes format_response(const HubResponse& r) {
  std::string text = r.is_error() ? std::string("ERR") : std::to_string(r.code());
  Bytes out(text.begin(), text.end());
  out.push_back(kFrameEnd);
  return out;
}

const char* to_string(MalformedReason r) {
  switch (r) {
    case MalformedReason::NonDigit:
      return "non-digit";
    case MalformedReason::OutOfRange:
      return "out-of-range";
    case MalformedReason::TooLong:
      return "too-long";
  }
  return "?";
}

namespace {

constexpr std::string_view kErrText = "ERR";

bool is_digit(std::uint8_t b) { return b >= '0' && b <= '9'; }

// Whether `prefix` followed by `next` can still become a valid frame body.
bool viable(const std::uint8_t* prefix, std::size_t len, std::uint8_t next) {
  bool all_digits = is_digit(next);
  for (std::size_t i = 0; i < len && all_digits; ++i) all_digits = is_digit(prefix[i]);
  if (all_digits) return true;
  if (len + 1 > kErrText.size()) return false;
  for (std::size_t i = 0; i < len; ++i)
    if (prefix[i] != static_cast<std::uint8_t>(kErrText[i])) return false;
  return next == static_cast<std::uint8_t>(kErrText[len]);
}

}  // namespace

DecodeOutcome decode_response(std::span<const std::uint8_t> buffer, DecoderState& st) {
  std::size_t i = 0;
  while (i < buffer.size()) {
    const std::uint8_t b = buffer[i++];
    if (st.skipping_) {
      if (b == kFrameEnd) st.skipping_ = false;
      continue;
    }
    if (b == kFrameEnd) {
      const std::size_t frame = st.len_ + 1;
      std::string_view body(reinterpret_cast<const char*>(st.buf_), st.len_);
      st.len_ = 0;
      if (body == kErrText) return Complete{HubResponse::error(), frame, i};
      if (body.empty() || !std::all_of(body.begin(), body.end(),
                                       [](char c) { return c >= '0' && c <= '9'; }))
        return Malformed{MalformedReason::NonDigit, i};
      long value = 0;
      for (char c : body) value = value * 10 + (c - '0');
      if (value > kAdcMax) return Malformed{MalformedReason::OutOfRange, i};
      return Complete{HubResponse::adc(static_cast<int>(value)), frame, i};
    }
    if (st.len_ >= kMaxFrameBytes) {
      st.len_ = 0;
      st.skipping_ = true;
      return Malformed{MalformedReason::TooLong, i};
    }
    if (!viable(st.buf_, st.len_, b)) {
      st.len_ = 0;
      st.skipping_ = true;
      return Malformed{MalformedReason::NonDigit, i};
    }
    st.buf_[st.len_++] = b;
  }
  return NeedMore{i};
}

std::vector<ResponseDecoder::Event> ResponseDecoder::feed(std::span<const std::uint8_t> bytes) {
  std::vector<Event> events;
  while (!bytes.empty()) {
    auto out = decode_response(bytes, state_);
    if (auto* c = std::get_if<Complete>(&out)) {
      events.push_back({c->response, std::nullopt});
      bytes = bytes.subspan(c->consumed);
    } else if (auto* m = std::get_if<Malformed>(&out)) {
      events.push_back({std::nullopt, m->reason});
      bytes = bytes.subspan(m->consumed);
    } else {
      break;
    }
  }
  return events;
}

void FaultProfile::validate() const {
  auto ok = [](double p) { return p >= 0.0 && p <= 1.0; };
  if (!ok(drop_prob) || !ok(corrupt_prob))
    throw std::invalid_argument("fault probabilities must lie in [0, 1]");
  if (!(latency_ms >= 0.0)) throw std::invalid_argument("latency must be nonnegative");
}

// splitmix64; small, seedable, and identical on every platform.
static std::uint64_t next_u64(std::uint64_t& s) {
  std::uint64_t z = (s += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

FaultInjector::FaultInjector(const FaultProfile& profile) : profile_(profile), state_(profile.seed) {
  profile_.validate();
}

double FaultInjector::uniform() { return static_cast<double>(next_u64(state_) >> 11) * 0x1.0p-53; }

Bytes FaultInjector::apply(std::span<const std::uint8_t> data) {
  Bytes out;
  out.reserve(data.size());
  for (std::uint8_t b : data) {
    // Both draws happen for every byte so the stream position depends only on
    // the byte count.
    const double d = uniform();
    const double c = uniform();
    const auto mask = static_cast<std::uint8_t>(1 + next_u64(state_) % 255);
    if (d < profile_.drop_prob) {
      ++dropped_;
      continue;
    }
    if (c < profile_.corrupt_prob) {
      ++corrupted_;
      b ^= mask;
    }
    out.push_back(b);
  }
  return out;
}

Bytes apply_faults(const FaultProfile& profile, std::span<const std::uint8_t> data) {
  FaultInjector inj(profile);
  return inj.apply(data);
}

Channel::Channel(double latency_ms, std::optional<FaultProfile> faults) : latency_ms_(latency_ms) {
  if (faults) faults_.emplace(*faults);
}

void Channel::write(std::span<const std::uint8_t> bytes, double now_ms) {
  const double at = now_ms + latency_ms_;
  if (faults_) {
    for (std::uint8_t b : faults_->apply(bytes)) queue_.emplace_back(at, b);
  } else {
    for (std::uint8_t b : bytes) queue_.emplace_back(at, b);
  }
}

Bytes Channel::read_available(double now_ms) {
  Bytes out;
  while (!queue_.empty() && queue_.front().first <= now_ms) {
    out.push_back(queue_.front().second);
    queue_.pop_front();
  }
  return out;
}

const char* to_string(TransportKind k) { return k == TransportKind::Wired ? "wired" : "bluetooth"; }

std::optional<TransportKind> parse_transport(const std::string& s) {
  if (s == "wired") return TransportKind::Wired;
  if (s == "bluetooth") return TransportKind::Bluetooth;
  return std::nullopt;
}

Transport::Transport(TransportKind kind, double latency, std::optional<FaultProfile> up,
                     std::optional<FaultProfile> down)
    : kind_(kind), latency_ms_(latency), to_hub_(latency, up), to_host_(latency, down) {}

Transport Transport::wired() { return Transport(TransportKind::Wired, 0.0, std::nullopt, std::nullopt); }

Transport Transport::bluetooth(double latency_ms, std::optional<FaultProfile> faults) {
  if (!(latency_ms >= 0.0)) throw std::invalid_argument("latency must be nonnegative");
  std::optional<FaultProfile> down;
  if (faults) {
    faults->validate();
    down = *faults;
    // Independent stream for the return direction.
    down->seed = faults->seed ^ 0xA5A5A5A5DEADBEEFULL;
  }
  return Transport(TransportKind::Bluetooth, latency_ms, faults, down);
}

}  // namespace umphcs::wire
