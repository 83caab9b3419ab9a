#pragma once

// Hub command/response wire protocol.
//
// Request: one byte, 'S' (raw sample) or 'F' (filtered-channel sample).
// Response: ASCII decimal ADC code terminated by LF, e.g. "512\n", or the
// refusal frame "ERR\n". No padding, no sign, no checksum.

#include <cstddef>
#include <cstdint>
#include <deque>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace umphcs::wire {

using Bytes = std::vector<std::uint8_t>;

inline constexpr std::uint8_t kCmdSampleRaw = 0x53;       // 'S'
inline constexpr std::uint8_t kCmdSampleFiltered = 0x46;  // 'F'
inline constexpr std::uint8_t kFrameEnd = 0x0A;
inline constexpr std::size_t kMaxFrameBytes = 8;
inline constexpr int kAdcMax = 1023;

enum class HubCommand { SampleRaw, SampleFiltered };

Bytes encode_command(HubCommand cmd);
/// Unknown bytes yield nullopt; the hub ignores them.
std::optional<HubCommand> decode_command(std::uint8_t byte);

struct AdcValue {
  int code = 0;
  friend bool operator==(const AdcValue&, const AdcValue&) = default;
};
struct HubError {
  friend bool operator==(const HubError&, const HubError&) = default;
};

/// Reply from the hub. AdcValue codes are always within [0, 1023].
class HubResponse {
 public:
  static HubResponse adc(int code);  // throws std::out_of_range
  static HubResponse error() { return HubResponse{HubError{}}; }

  bool is_error() const { return std::holds_alternative<HubError>(payload_); }
  int code() const;  // throws std::logic_error on HubError
  const std::variant<AdcValue, HubError>& payload() const { return payload_; }

  friend bool operator==(const HubResponse&, const HubResponse&) = default;

 private:
  explicit HubResponse(std::variant<AdcValue, HubError> p) : payload_(p) {}
  std::variant<AdcValue, HubError> payload_;
};

Bytes format_response(const HubResponse& r);

enum class MalformedReason { NonDigit, OutOfRange, TooLong };
const char* to_string(MalformedReason r);

struct Complete {
  HubResponse response;
  std::size_t frame_bytes;  // total length of the frame, terminator included
  std::size_t consumed;     // bytes taken from this call's buffer
};
struct NeedMore {
  std::size_t consumed;  // always the whole buffer
};
struct Malformed {
  MalformedReason reason;
  std::size_t consumed;
};
using DecodeOutcome = std::variant<Complete, NeedMore, Malformed>;

/// Partial-frame state carried between decode_response calls. Holds at most
/// kMaxFrameBytes bytes plus a resync flag.
class DecoderState {
 public:
  void reset() {
    len_ = 0;
    skipping_ = false;
  }
  std::size_t buffered() const { return len_; }
  bool skipping() const { return skipping_; }

 private:
  friend DecodeOutcome decode_response(std::span<const std::uint8_t>, DecoderState&);
  std::uint8_t buf_[kMaxFrameBytes]{};
  std::size_t len_ = 0;
  bool skipping_ = false;  // discarding the tail of a malformed frame
};

/// Decodes at most one frame from `buffer`. Never consumes past the end of the
/// frame it reports. After Malformed, the rest of the bad frame (up to the next
/// LF) is discarded silently by subsequent calls.
DecodeOutcome decode_response(std::span<const std::uint8_t> buffer, DecoderState& state);

/// Convenience wrapper: feeds bytes and collects every finished outcome.
class ResponseDecoder {
 public:
  struct Event {
    std::optional<HubResponse> response;  // empty when malformed
    std::optional<MalformedReason> malformed;
  };
  std::vector<Event> feed(std::span<const std::uint8_t> bytes);
  const DecoderState& state() const { return state_; }
  void reset() { state_.reset(); }

 private:
  DecoderState state_;
};

struct FaultProfile {
  double drop_prob = 0.0;
  double corrupt_prob = 0.0;
  std::uint64_t seed = 0;
  double latency_ms = 0.0;

  void validate() const;  // throws std::invalid_argument
};

/// Stateful fault stream: identical seed yields the identical fault sequence
/// across calls.
class FaultInjector {
 public:
  explicit FaultInjector(const FaultProfile& profile);
  Bytes apply(std::span<const std::uint8_t> data);
  std::uint64_t dropped() const { return dropped_; }
  std::uint64_t corrupted() const { return corrupted_; }

 private:
  double uniform();
  FaultProfile profile_;
  std::uint64_t state_;
  std::uint64_t dropped_ = 0;
  std::uint64_t corrupted_ = 0;
};

/// One-shot form: a fresh injector seeded from `profile`.
Bytes apply_faults(const FaultProfile& profile, std::span<const std::uint8_t> data);

/// One direction of a link. Bytes become readable once the link clock reaches
/// write time + latency. Order is preserved; faults only drop or corrupt.
class Channel {
 public:
  Channel(double latency_ms, std::optional<FaultProfile> faults);
  void write(std::span<const std::uint8_t> bytes, double now_ms);
  Bytes read_available(double now_ms);
  std::size_t in_flight() const { return queue_.size(); }

 private:
  double latency_ms_;
  std::optional<FaultInjector> faults_;
  std::deque<std::pair<double, std::uint8_t>> queue_;
};

enum class TransportKind { Wired, Bluetooth };
const char* to_string(TransportKind k);
std::optional<TransportKind> parse_transport(const std::string& s);

/// Duplex byte link between host and hub. "wired" is lossless with zero
/// latency; "bluetooth" carries configurable latency and an optional fault
/// profile applied independently in each direction.
class Transport {
 public:
  static Transport wired();
  static Transport bluetooth(double latency_ms, std::optional<FaultProfile> faults = std::nullopt);

  TransportKind kind() const { return kind_; }
  double latency_ms() const { return latency_ms_; }

  Channel& to_hub() { return to_hub_; }
  Channel& to_host() { return to_host_; }

 private:
  Transport(TransportKind kind, double latency, std::optional<FaultProfile> up,
            std::optional<FaultProfile> down);
  TransportKind kind_;
  double latency_ms_;
  Channel to_hub_;
  Channel to_host_;
};

}  // namespace umphcs::wire
