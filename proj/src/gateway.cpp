#include "umphcs/gateway.hpp"

#include <atomic>

#include "httplib.h"
#include "umphcs/error.hpp"

namespace umphcs::gw {

using ojson = nlohmann::ordered_json;
using Clock = std::chrono::steady_clock;

struct Gateway::Session {
  rec::TestKind kind = rec::TestKind::Temperature;
  std::string patient;
  std::string phase = "running";  // running | awaiting-response | done | error
  ojson result = nullptr;
  std::optional<std::string> record_id;
  std::optional<std::string> error;
  std::vector<advice::Rule> advice;
  std::vector<std::string> events;
  bool finished = false;

  dx::HearingState hearing;
  Clock::time_point tone_deadline;
  std::optional<ops::EyeReading> eye;

  std::atomic<bool> stop{false};
  std::thread worker;
  std::unique_ptr<ops::HubSessionLock> lock;
};

namespace {

Reply json_reply(int status, const ojson& j) { return {status, rec::canonical_dump(j)}; }

Reply error_reply(int status, const std::string& code, const std::string& detail) {
  ojson j;
  j["error"] = code;
  j["detail"] = detail;
  return json_reply(status, j);
}

Reply no_session() { return error_reply(409, "no-active-session", "no active session"); }

ojson patient_json(const rec::Patient& p) {
  ojson j;
  j["patient_id"] = p.patient_id;
  j["name"] = p.name;
  j["region"] = p.region;
  j["created_at"] = p.created_at;
  return j;
}

ojson parse_body(const std::string& body) {
  ojson j = ojson::parse(body, nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw std::invalid_argument("body must be a JSON object");
  return j;
}

double param(const ojson& params, const char* key, double fallback) {
  if (!params.contains(key)) return fallback;
  if (!params[key].is_number()) throw std::invalid_argument(std::string("params.") + key + " must be a number");
  return params[key].get<double>();
}

double required(const ojson& params, const char* key) {
  if (!params.contains(key)) throw std::invalid_argument(std::string("params.") + key + " is required");
  return param(params, key, 0.0);
}

dx::Pixel pixel(const ojson& params, const char* key) {
  if (!params.contains(key) || !params[key].is_array() || params[key].size() != 2 || !params[key][0].is_number() ||
      !params[key][1].is_number())
    throw std::invalid_argument(std::string("params.") + key + " must be [x, y]");
  return {params[key][0].get<double>(), params[key][1].get<double>()};
}

const char* event_name(dx::HearingEvent e) {
  switch (e) {
    case dx::HearingEvent::Heard:
      return "heard";
    case dx::HearingEvent::NotHeard:
      return "not-heard";
    case dx::HearingEvent::Timeout:
      return "timeout";
  }
  return "timeout";
}

}  // namespace

Gateway::Gateway(GatewayConfig config) : cfg_(std::move(config)), link_(cfg_.link) {}

Gateway::~Gateway() {
  shutdown();
  std::shared_ptr<Session> s;
  {
    std::lock_guard lk(mu_);
    s = session_;
    if (s && !s->finished) {
      s->stop = true;
      if (s->kind != rec::TestKind::BloodPressure) finish(*s, std::nullopt, "stopped");
    }
    cv_.notify_all();
  }
  if (s) reap(s);
}

void Gateway::push_event(Session& s, const std::string& json) {
  s.events.push_back(json);
  cv_.notify_all();
}

// Caller holds mu_.
void Gateway::finish(Session& s, std::optional<rec::Payload> payload, std::optional<std::string> error) {
  if (s.finished) return;
  if (payload) {
    try {
      rec::RecordStore store(cfg_.store_path);
      const ops::RecordFactory factory(cfg_.device_id, cfg_.clock);
      const auto record = factory.make(store, s.patient, s.kind, *payload);
      store.save(record);
      s.record_id = record.record_id;
      s.result = rec::payload_json(*payload);
      s.advice = advice::evaluate(cfg_.rules, record, store);
    } catch (const Error& e) {
      error = e.code();
    }
  }
  s.error = error;
  s.phase = error ? "error" : "done";
  s.finished = true;
  s.lock.reset();
  ojson ev;
  ev["type"] = "end";
  ev["phase"] = s.phase;
  ev["error"] = error ? ojson(*error) : ojson(nullptr);
  push_event(s, rec::canonical_dump(ev));
}

void Gateway::present_tone(Session& s) {
  s.phase = "awaiting-response";
  s.tone_deadline = Clock::now() + std::chrono::duration_cast<Clock::duration>(
                                       std::chrono::duration<double>(cfg_.hearing_timeout_s));
  ojson ev;
  ev["type"] = "hearing";
  ev["freq_hz"] = s.hearing.current_freq();
  ev["level_db"] = s.hearing.level_db;
  ev["state"] = "presenting";
  push_event(s, rec::canonical_dump(ev));
}

namespace {

// Caller holds the gateway mutex. Returns true when the sweep just ended.
bool hearing_advance(dx::HearingState& st, dx::HearingEvent e, std::vector<std::string>& events) {
  ojson ev;
  ev["type"] = "hearing";
  ev["freq_hz"] = st.current_freq();
  ev["level_db"] = st.level_db;
  ev["state"] = event_name(e);
  events.push_back(rec::canonical_dump(ev));
  st = dx::hearing_step(std::move(st), e);
  return st.finished();
}

}  // namespace

void Gateway::hearing_timer(std::shared_ptr<Session> s) {
  std::unique_lock lk(mu_);
  while (!s->finished) {
    const auto deadline = s->tone_deadline;
    if (cv_.wait_until(lk, deadline, [&] { return s->finished || s->tone_deadline != deadline; })) continue;
    if (hearing_advance(s->hearing, dx::HearingEvent::Timeout, s->events))
      finish(*s, dx::audiogram(s->hearing), std::nullopt);
    else
      present_tone(*s);
  }
}

void Gateway::bp_worker(std::shared_ptr<Session> s, bio::CuffRunParams params) {
  const auto wall0 = Clock::now();
  ops::BpOptions opt;
  opt.stop = &s->stop;
  opt.on_sample = [&](const ops::StreamSample& x) {
    ojson ev;
    ev["type"] = "bp";
    ev["t_s"] = x.t_s;
    ev["cuff_mmHg"] = x.cuff_mmhg;
    ev["ow"] = x.ow;
    {
      std::lock_guard lk(mu_);
      push_event(*s, rec::canonical_dump(ev));
    }
    if (cfg_.bp_speed > 0.0)
      std::this_thread::sleep_until(wall0 + std::chrono::duration_cast<Clock::duration>(
                                                std::chrono::duration<double>(x.t_s / cfg_.bp_speed)));
  };
  std::optional<rec::Payload> payload;
  std::optional<std::string> error;
  try {
    payload = ops::measure_bp(link_, params, opt).result;
  } catch (const Error& e) {
    error = e.code();
  }
  if (s->stop) {
    payload.reset();
    error = "stopped";
  }
  std::lock_guard lk(mu_);
  finish(*s, payload, error);
}

Reply Gateway::patients() {
  try {
    std::lock_guard lk(mu_);
    rec::RecordStore store(cfg_.store_path);
    ojson arr = ojson::array();
    for (const auto& p : store.patients()) arr.push_back(patient_json(p));
    ojson j;
    j["patients"] = arr;
    return json_reply(200, j);
  } catch (const Error& e) {
    return error_reply(500, e.code(), e.detail());
  }
}

Reply Gateway::start(const std::string& body) {
  ojson req;
  std::optional<rec::TestKind> kind;
  std::string patient;
  ojson params = ojson::object();
  try {
    req = parse_body(body);
    if (!req.contains("patient") || !req["patient"].is_string()) throw std::invalid_argument("patient is required");
    if (!req.contains("test") || !req["test"].is_string()) throw std::invalid_argument("test is required");
    patient = req["patient"].get<std::string>();
    kind = rec::parse_kind(req["test"].get<std::string>());
    if (!kind) throw std::invalid_argument("unknown test kind");
    if (req.contains("params")) {
      if (!req["params"].is_object()) throw std::invalid_argument("params must be an object");
      params = req["params"];
    }
  } catch (const std::exception& e) {
    return error_reply(400, "bad-request", e.what());
  }

  std::lock_guard start_lk(start_mu_);
  std::shared_ptr<Session> previous;
  {
    std::lock_guard lk(mu_);
    if (session_ && !session_->finished) return error_reply(409, "session-active", "a session is already running");
    previous = session_;
  }
  if (previous) reap(previous);
  std::unique_lock lk(mu_);
  try {
    rec::RecordStore store(cfg_.store_path);
    if (!store.has_patient(patient)) return error_reply(404, "unknown-patient", "no patient " + patient);
  } catch (const Error& e) {
    return error_reply(500, e.code(), e.detail());
  }

  auto s = std::make_shared<Session>();
  s->kind = *kind;
  s->patient = patient;
  try {
    s->lock = std::make_unique<ops::HubSessionLock>(cfg_.lock_path.string());
  } catch (const Error& e) {
    return error_reply(409, e.code(), e.detail());
  }

  try {
    const ops::RetryPolicy policy;
    switch (*kind) {
      case rec::TestKind::Temperature: {
        const double true_c = required(params, "true_c");
        session_ = s;
        std::optional<rec::Payload> payload;
        std::optional<std::string> error;
        try {
          const auto r = ops::measure_temperature(link_, true_c, cfg_.temperature_calib, policy);
          std::vector<std::string> flags;
          if (r.implausible) flags.push_back("implausible");
          payload = ops::scalar_payload(*kind, r.celsius, flags);
        } catch (const Error& e) {
          error = e.code();
        }
        finish(*s, payload, error);
        break;
      }
      case rec::TestKind::Weight: {
        const double true_kg = required(params, "true_kg");
        session_ = s;
        std::optional<rec::Payload> payload;
        std::optional<std::string> error;
        try {
          const auto r = ops::measure_weight(link_, true_kg, cfg_.weight_calib, policy);
          std::vector<std::string> flags;
          if (r.negative) flags.push_back("negative");
          payload = ops::scalar_payload(*kind, r.kg, flags);
        } catch (const Error& e) {
          error = e.code();
        }
        finish(*s, payload, error);
        break;
      }
      case rec::TestKind::Height: {
        dx::HeightInput in{pixel(params, "ruler_top"), pixel(params, "ruler_bottom"), pixel(params, "head"),
                           pixel(params, "foot"), required(params, "ruler_len_m")};
        session_ = s;
        try {
          finish(*s, ops::scalar_payload(*kind, dx::height_from_pixels(in)), std::nullopt);
        } catch (const Error& e) {
          finish(*s, std::nullopt, e.code());
        }
        break;
      }
      case rec::TestKind::EyePower:
        session_ = s;
        s->phase = "awaiting-response";
        break;
      case rec::TestKind::Hearing:
        session_ = s;
        present_tone(*s);
        s->worker = std::thread(&Gateway::hearing_timer, this, s);
        break;
      case rec::TestKind::BloodPressure: {
        bio::CuffRunParams cp;
        cp.p_start = param(params, "p_start", cp.p_start);
        cp.deflation_rate = param(params, "deflation_rate", cp.deflation_rate);
        cp.map_true = param(params, "map", cp.map_true);
        cp.amp_max = param(params, "amp_max", cp.amp_max);
        cp.sigma = param(params, "sigma", cp.sigma);
        cp.heart_rate_hz = param(params, "heart_rate_hz", cp.heart_rate_hz);
        cp.noise_sd = param(params, "noise_sd", cp.noise_sd);
        cp.seed = static_cast<std::uint64_t>(param(params, "seed", 0.0));
        cp.validate();
        session_ = s;
        s->worker = std::thread(&Gateway::bp_worker, this, s, cp);
        break;
      }
    }
  } catch (const std::invalid_argument& e) {
    if (session_ != s) return error_reply(400, "bad-request", e.what());
    finish(*s, std::nullopt, "bad-request");
  } catch (const Error& e) {
    if (session_ != s) return error_reply(400, e.code(), e.detail());
    finish(*s, std::nullopt, e.code());
  }
  lk.unlock();
  return result();
}

Reply Gateway::hearing_event(const std::string& body) {
  bool heard = false;
  try {
    const ojson j = parse_body(body);
    if (!j.contains("heard") || !j["heard"].is_boolean()) throw std::invalid_argument("heard must be a boolean");
    heard = j["heard"].get<bool>();
  } catch (const std::exception& e) {
    return error_reply(400, "bad-request", e.what());
  }
  std::lock_guard lk(mu_);
  if (!session_ || session_->finished) return no_session();
  Session& s = *session_;
  if (s.kind != rec::TestKind::Hearing) return error_reply(409, "wrong-test", "active session is not a hearing test");
  if (hearing_advance(s.hearing, heard ? dx::HearingEvent::Heard : dx::HearingEvent::NotHeard, s.events))
    finish(s, dx::audiogram(s.hearing), std::nullopt);
  else
    present_tone(s);
  cv_.notify_all();
  ojson j;
  j["phase"] = s.phase;
  j["freq_hz"] = s.finished ? ojson(nullptr) : ojson(s.hearing.current_freq());
  j["level_db"] = s.finished ? ojson(nullptr) : ojson(s.hearing.level_db);
  return json_reply(200, j);
}

Reply Gateway::pot(const std::string& body) {
  int code = 0;
  try {
    const ojson j = parse_body(body);
    if (!j.contains("code") || !j["code"].is_number_integer()) throw std::invalid_argument("code must be an integer");
    code = j["code"].get<int>();
    if (code < 0 || code > 1023) throw std::invalid_argument("code must be within 0..1023");
  } catch (const std::exception& e) {
    return error_reply(400, "bad-request", e.what());
  }
  std::lock_guard lk(mu_);
  if (!session_ || session_->finished) return no_session();
  Session& s = *session_;
  if (s.kind != rec::TestKind::EyePower) return error_reply(409, "wrong-test", "active session is not an eye test");
  try {
    // The knob position goes through the hub like a physical pot would.
    const double d = dx::pot_to_distance(code, cfg_.pot);
    s.eye = ops::measure_eye_power(link_, d, cfg_.pot, cfg_.bench);
  } catch (const Error& e) {
    return error_reply(502, e.code(), e.detail());
  }
  ojson j;
  j["type"] = "pot";
  j["code"] = s.eye->code;
  j["distance_m"] = s.eye->distance_m;
  j["power_d"] = s.eye->power_d;
  const std::string out = rec::canonical_dump(j);
  push_event(s, out);
  return {200, out};
}

Reply Gateway::stop() {
  std::shared_ptr<Session> s;
  {
    std::lock_guard lk(mu_);
    if (!session_ || session_->finished) return no_session();
    s = session_;
    switch (s->kind) {
      case rec::TestKind::BloodPressure:
        s->stop = true;
        break;
      case rec::TestKind::EyePower:
        if (s->eye)
          finish(*s, ops::scalar_payload(s->kind, s->eye->power_d), std::nullopt);
        else
          finish(*s, std::nullopt, "no-pot-reading");
        break;
      default:
        finish(*s, std::nullopt, "stopped");
    }
    cv_.notify_all();
  }
  if (s->kind == rec::TestKind::BloodPressure) wait_finished();
  return result();
}

Reply Gateway::result() {
  std::lock_guard lk(mu_);
  if (!session_) return no_session();
  const Session& s = *session_;
  ojson j;
  j["phase"] = s.phase;
  j["test"] = rec::to_string(s.kind);
  j["patient"] = s.patient;
  j["record_id"] = s.record_id ? ojson(*s.record_id) : ojson(nullptr);
  j["result"] = s.result;
  j["error"] = s.error ? ojson(*s.error) : ojson(nullptr);
  ojson adv = ojson::array();
  for (const auto& r : s.advice) {
    ojson a;
    a["id"] = r.id;
    a["message"] = r.message;
    adv.push_back(a);
  }
  j["advice"] = adv;
  return json_reply(200, j);
}

std::optional<std::string> Gateway::event_of(const std::shared_ptr<Session>& s, std::size_t index,
                                             std::chrono::milliseconds wait, bool& ended) {
  std::unique_lock lk(mu_);
  cv_.wait_for(lk, wait, [&] { return index < s->events.size() || s->finished; });
  if (index < s->events.size()) {
    ended = false;
    return s->events[index];
  }
  ended = s->finished;
  return std::nullopt;
}

std::optional<std::string> Gateway::event(std::size_t index, std::chrono::milliseconds wait, bool& ended) {
  std::shared_ptr<Session> s;
  {
    std::lock_guard lk(mu_);
    s = session_;
  }
  if (!s) {
    ended = true;
    return std::nullopt;
  }
  return event_of(s, index, wait, ended);
}

void Gateway::wait_finished() {
  std::shared_ptr<Session> s;
  {
    std::unique_lock lk(mu_);
    s = session_;
    if (!s) return;
    cv_.wait(lk, [&] { return s->finished; });
  }
  reap(s);
}

void Gateway::reap(const std::shared_ptr<Session>& s) {
  std::lock_guard lk(join_mu_);
  if (s->worker.joinable() && s->worker.get_id() != std::this_thread::get_id()) s->worker.join();
}

void Gateway::install_routes() {
  auto send = [](httplib::Response& res, const Reply& r) {
    res.status = r.status;
    res.set_content(r.body, "application/json");
  };
  http_->Get("/patients", [this, send](const httplib::Request&, httplib::Response& res) { send(res, patients()); });
  http_->Post("/session/start",
              [this, send](const httplib::Request& req, httplib::Response& res) { send(res, start(req.body)); });
  http_->Post("/session/hearing/event", [this, send](const httplib::Request& req, httplib::Response& res) {
    send(res, hearing_event(req.body));
  });
  http_->Post("/session/pot",
              [this, send](const httplib::Request& req, httplib::Response& res) { send(res, pot(req.body)); });
  http_->Post("/session/stop", [this, send](const httplib::Request&, httplib::Response& res) { send(res, stop()); });
  http_->Get("/session/result", [this, send](const httplib::Request&, httplib::Response& res) { send(res, result()); });
  http_->Get("/session/stream", [this, send](const httplib::Request&, httplib::Response& res) {
    std::shared_ptr<Session> s;
    {
      std::lock_guard lk(mu_);
      s = session_;
    }
    if (!s) return send(res, no_session());
    auto next = std::make_shared<std::size_t>(0);
    res.set_header("Cache-Control", "no-cache");
    res.set_chunked_content_provider("text/event-stream", [this, s, next](std::size_t, httplib::DataSink& sink) {
      bool ended = false;
      if (const auto ev = event_of(s, *next, std::chrono::milliseconds(250), ended)) {
        const std::string chunk = "id: " + std::to_string(*next) + "\ndata: " + *ev + "\n\n";
        ++*next;
        return sink.write(chunk.data(), chunk.size());
      }
      if (ended) sink.done();
      return sink.is_writable();
    });
  });
}

int Gateway::listen(const std::string& host, int port) {
  http_ = std::make_unique<httplib::Server>();
  install_routes();
  const int bound = port == 0 ? http_->bind_to_any_port(host) : (http_->bind_to_port(host, port) ? port : -1);
  if (bound < 0) throw Error("bind-failed", "cannot bind " + host + ":" + std::to_string(port));
  http_thread_ = std::thread([this] { http_->listen_after_bind(); });
  http_->wait_until_ready();
  return bound;
}

void Gateway::serve(const std::string& host, int port) {
  listen(host, port);
  if (http_thread_.joinable()) http_thread_.join();
}

void Gateway::shutdown() {
  if (http_) http_->stop();
  if (http_thread_.joinable() && http_thread_.get_id() != std::this_thread::get_id()) http_thread_.join();
}

}  // namespace umphcs::gw
