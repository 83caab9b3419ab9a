#pragma once

// HTTP front end for the web console. Holds at most one live session and
// exposes it as request/response endpoints plus a server-sent event stream:
//
//   GET  /patients
//   POST /session/start         {"patient": id, "test": kind, "params": {...}}
//   POST /session/hearing/event {"heard": bool}
//   POST /session/pot           {"code": 0..1023}
//   POST /session/stop          BP/hearing: abort. Eye power: record.
//   GET  /session/result
//   GET  /session/stream        text/event-stream
//
// Every body is a canonical JSON object. No session yields 409.

#include <chrono>
#include <condition_variable>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "umphcs/advice.hpp"
#include "umphcs/records.hpp"
#include "umphcs/session.hpp"

namespace httplib {
class Server;
}

namespace umphcs::gw {

struct GatewayConfig {
  std::filesystem::path store_path = "umphcs.log";
  std::filesystem::path lock_path = "umphcs.lock";
  std::string device_id = "dev";
  ops::LinkConfig link;
  TemperatureCalib temperature_calib;
  TwoPointCalib weight_calib = dx::ideal_weight_calib();
  PotCalib pot;
  dx::LensBench bench;
  double hearing_timeout_s = 3.0;  // wall clock per tone
  double bp_speed = 1.0;           // simulated seconds per wall second; 0 = unpaced
  std::vector<advice::Rule> rules;
  std::function<std::string()> clock = rec::now_utc;
};

struct Reply {
  int status = 200;
  std::string body;
};

class Gateway {
 public:
  explicit Gateway(GatewayConfig config);
  ~Gateway();
  Gateway(const Gateway&) = delete;
  Gateway& operator=(const Gateway&) = delete;

  // Endpoint handlers, independent of HTTP.
  Reply patients();
  Reply start(const std::string& body);
  Reply hearing_event(const std::string& body);
  Reply pot(const std::string& body);
  Reply stop();
  Reply result();

  /// Event `index` of the latest session, waiting up to `wait` for it.
  /// `ended` is set when the session is over and no such event will come.
  std::optional<std::string> event(std::size_t index, std::chrono::milliseconds wait, bool& ended);

  /// Blocks until the current session (if any) has finished.
  void wait_finished();

  /// Binds and serves in a background thread; returns the bound port.
  int listen(const std::string& host, int port);
  /// Serves on the calling thread until shutdown().
  void serve(const std::string& host, int port);
  void shutdown();

 private:
  struct Session;
  std::optional<std::string> event_of(const std::shared_ptr<Session>& s, std::size_t index,
                                      std::chrono::milliseconds wait, bool& ended);
  void push_event(Session& s, const std::string& json);
  void finish(Session& s, std::optional<rec::Payload> payload, std::optional<std::string> error);
  void present_tone(Session& s);
  void hearing_timer(std::shared_ptr<Session> s);
  void bp_worker(std::shared_ptr<Session> s, bio::CuffRunParams params);
  void install_routes();
  void reap(const std::shared_ptr<Session>& s);

  GatewayConfig cfg_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::mutex start_mu_;  // serializes session starts
  std::mutex join_mu_;
  std::shared_ptr<Session> session_;
  ops::HubLink link_;
  std::unique_ptr<httplib::Server> http_;
  std::thread http_thread_;
};

}  // namespace umphcs::gw
