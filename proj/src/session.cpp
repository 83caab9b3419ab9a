#include "umphcs/session.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "umphcs/error.hpp"

namespace umphcs::ops {

namespace {

wire::Transport make_transport(const LinkConfig& c) {
  if (c.kind == wire::TransportKind::Wired) return wire::Transport::wired();
  return wire::Transport::bluetooth(c.latency_ms, c.faults);
}

constexpr double kPollStepMs = 0.5;

}  // namespace

HubLink::HubLink(const LinkConfig& config, hub::AdcModel adc) : transport_(make_transport(config)), hub_(adc) {}

void HubLink::advance_to(double t_ms) { now_ms_ = std::max(now_ms_, t_ms); }

void HubLink::swap_module(std::shared_ptr<const hub::VirtualModule> module) {
  hub_.apply(hub::HubAction::SafetyOff);
  hub_.apply(hub::HubAction::Attach, std::move(module));
  if (!cutoff_held_) hub_.apply(hub::HubAction::SafetyOn);
}

void HubLink::hold_cutoff(bool held) {
  cutoff_held_ = held;
  hub_.apply(held ? hub::HubAction::SafetyOff : hub::HubAction::SafetyOn);
}

HubLink::Reply HubLink::transact(wire::HubCommand cmd) {
  ++stats_.transactions;
  // Lockstep: nothing from an earlier exchange may leak into this one.
  transport_.to_host().read_available(now_ms_);
  decoder_.reset();

  transport_.to_hub().write(wire::encode_command(cmd), now_ms_);
  const double deadline = now_ms_ + 2.0 * transport_.latency_ms() + 1.0;
  Reply reply;
  for (double t = now_ms_; t <= deadline + 1e-9; t += kPollStepMs) {
    if (hub_.poll(transport_, t) > 0) reply.sample_ms = t;
    const auto bytes = transport_.to_host().read_available(t);
    if (bytes.empty()) continue;
    now_ms_ = t;
    const auto events = decoder_.feed(bytes);
    const bool clean = events.size() == 1 && events[0].response && decoder_.state().buffered() == 0 &&
                       !decoder_.state().skipping();
    if (!clean) {
      ++stats_.malformed;
      reply.status = Reply::Status::Malformed;
      return reply;
    }
    if (events[0].response->is_error()) {
      ++stats_.hub_errors;
      reply.status = Reply::Status::HubRefused;
      return reply;
    }
    ++stats_.ok;
    reply.status = Reply::Status::Ok;
    reply.code = events[0].response->code();
    return reply;
  }
  now_ms_ = deadline;
  ++stats_.missing;
  reply.status = Reply::Status::Missing;
  return reply;
}

int sample_once(HubLink& link, const RetryPolicy& policy) {
  int refused = 0;
  for (int a = 0; a < policy.attempts_per_sample; ++a) {
    const auto r = link.transact(wire::HubCommand::SampleRaw);
    if (r.status == HubLink::Reply::Status::Ok) return r.code;
    if (r.status == HubLink::Reply::Status::HubRefused) ++refused;
  }
  if (refused == policy.attempts_per_sample) throw Error("hub-refused", "hub answered ERR (safety cutoff or no module)");
  throw Error("link-failure", "no valid reply after retries");
}

dx::TemperatureReading measure_temperature(HubLink& link, double true_c, const TemperatureCalib& calib,
                                           const RetryPolicy& policy) {
  link.swap_module(std::make_shared<bio::TemperatureProbe>(true_c));
  return dx::temperature_from_code(sample_once(link, policy), calib);
}

dx::WeightReading measure_weight(HubLink& link, double true_kg, const TwoPointCalib& calib, const RetryPolicy& policy) {
  link.swap_module(std::make_shared<bio::LoadCell>(true_kg));
  return dx::weight_from_code(sample_once(link, policy), calib);
}

EyeReading eye_power_from_code(int code, const PotCalib& pot, const dx::LensBench& bench) {
  EyeReading r;
  r.code = code;
  r.distance_m = dx::pot_to_distance(code, pot);
  r.power_d = dx::eye_power(r.distance_m, bench);
  return r;
}

EyeReading measure_eye_power(HubLink& link, double true_d, const PotCalib& pot, const dx::LensBench& bench,
                             const RetryPolicy& policy) {
  link.swap_module(std::make_shared<bio::SlidePot>(true_d, pot));
  return eye_power_from_code(sample_once(link, policy), pot, bench);
}

namespace {

// The live plausibility check needs five accepted samples as reference, so
// only the first five are screened afterwards, against the median of ten.
std::size_t despike_head(std::vector<dx::PressureSample>& s, double limit) {
  if (s.size() < 10 || !(limit > 0.0)) return 0;
  double w[10];
  for (std::size_t k = 0; k < 10; ++k) w[k] = s[k].mmhg;
  std::nth_element(w, w + 5, w + 10);
  const double med = w[5];
  std::size_t removed = 0;
  for (std::size_t k = 0, i = 0; k < 5; ++k) {
    if (std::abs(s[i].mmhg - med) > limit) {
      s.erase(s.begin() + static_cast<std::ptrdiff_t>(i));
      ++removed;
    } else {
      ++i;
    }
  }
  return removed;
}

double recent_median(const std::vector<dx::PressureSample>& s) {
  double w[5];
  for (std::size_t k = 0; k < 5; ++k) w[k] = s[s.size() - 5 + k].mmhg;
  std::nth_element(w, w + 2, w + 5);
  return w[2];
}

}  // namespace

BpRun measure_bp(HubLink& link, const bio::CuffRunParams& params, const BpOptions& opt) {
  params.validate();
  const double start = link.now_ms();
  link.swap_module(std::make_shared<bio::CuffModule>(params, start));

  BpRun run;
  dx::StreamingBandpass live(1000.0 / opt.interval_ms);
  const double end = start + params.duration_s() * 1000.0;
  int failed_in_row = 0;
  for (std::size_t k = 0;; ++k) {
    const double slot = start + static_cast<double>(k) * opt.interval_ms;
    if (slot > end + 1e-9) break;
    if (opt.stop && opt.stop->load()) break;
    link.advance_to(slot);

    std::optional<HubLink::Reply> got;
    int refused = 0;
    for (int a = 0; a < opt.retry.attempts_per_sample && !got; ++a) {
      const auto r = link.transact(wire::HubCommand::SampleRaw);
      if (r.status == HubLink::Reply::Status::Ok) {
        // A well-formed frame can still carry a damaged value (a dropped or
        // flipped digit); cuff pressure cannot jump that far in one interval.
        if (run.samples.size() >= 5 &&
            std::abs(dx::pressure_from_code(r.code).mmhg - recent_median(run.samples)) > opt.retry.despike_mmhg) {
          ++run.despiked;
          continue;
        }
        got = r;
      } else if (r.status == HubLink::Reply::Status::HubRefused) {
        ++refused;
      }
    }
    if (!got) {
      if (refused == opt.retry.attempts_per_sample)
        throw Error("hub-refused", "hub answered ERR (safety cutoff or no module)");
      ++run.gap_slots;
      if (++failed_in_row >= opt.retry.max_failed_slots)
        throw Error("link-failure", "too many consecutive missing samples");
      continue;
    }
    failed_in_row = 0;
    const dx::PressureSample s{(got->sample_ms - start) / 1000.0, dx::pressure_from_code(got->code).mmhg};
    run.samples.push_back(s);
    if (opt.on_sample) opt.on_sample({s.t_s, s.mmhg, live.push(s.mmhg)});
  }

  run.despiked += despike_head(run.samples, opt.retry.despike_mmhg);
  const auto ow = dx::extract_ow(run.samples, 1000.0 / opt.interval_ms);
  run.result = dx::estimate_bp(dx::ow_envelope(ow));
  return run;
}

HearingRun run_hearing(const bio::HearingProfile& profile, double timeout_s,
                       const std::function<void(const HearingStep&)>& on_step) {
  profile.validate();
  HearingRun run;
  dx::HearingState st;
  while (!st.finished()) {
    const int f = st.current_freq();
    const bool heard = bio::hearing_response(profile, f, st.level_db);
    const auto ev = heard ? dx::HearingEvent::Heard : dx::HearingEvent::Timeout;
    if (on_step) on_step({f, st.level_db, ev});
    run.elapsed_s += heard ? 1.0 : timeout_s;
    st = dx::hearing_step(std::move(st), ev);
  }
  run.steps = st.steps;
  run.audiogram = dx::audiogram(st);
  return run;
}

RecordFactory::RecordFactory(std::string device_id, std::function<std::string()> clock)
    : device_id_(std::move(device_id)), clock_(std::move(clock)) {}

rec::TestRecord RecordFactory::make(const rec::RecordStore& store, const std::string& patient_id,
                                    rec::TestKind kind, rec::Payload payload) const {
  rec::TestRecord r;
  for (std::size_t n = store.records().size() + 1;; ++n) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "-%06zu", n);
    r.record_id = device_id_ + buf;
    if (!store.record(r.record_id)) break;
  }
  r.patient_id = patient_id;
  r.device_id = device_id_;
  r.kind = kind;
  r.taken_at = clock_();
  r.payload = std::move(payload);
  return r;
}

rec::Payload scalar_payload(rec::TestKind kind, double value, std::vector<std::string> flags) {
  return rec::Scalar{value, rec::unit_of(kind), std::move(flags)};
}

HubSessionLock::HubSessionLock(const std::string& path) {
  fd_ = ::open(path.c_str(), O_CREAT | O_RDWR, 0644);
  if (fd_ < 0) throw Error("storage-failure", "cannot open lock file " + path);
  if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
    ::close(fd_);
    fd_ = -1;
    throw Error("hub-busy", "another session holds the hub");
  }
}

HubSessionLock::~HubSessionLock() {
  if (fd_ >= 0) {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
}

}  // namespace umphcs::ops
