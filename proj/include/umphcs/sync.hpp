#pragma once

// Line protocol between a field device and the central record server.
//
//   HELLO v1            -> OK v1 | ERR version-mismatch
//   PUT <canonical>     -> OK <id>
//   LIST <patient_id>   -> BEGIN, canonical record lines, END
//   FLAGS <region>      -> ALERT <json> | NONE
//   QUIT                -> BYE
//   anything else       -> ERR unknown-verb | ERR malformed-line | ERR before-hello

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "umphcs/records.hpp"

namespace umphcs::sync {

inline constexpr const char* kProtocolVersion = "v1";
inline constexpr const char* kEndpointEnv = "UMPHCS_SYNC_ENDPOINT";

/// Central store. Live copy per id (last writer wins); every accepted line is
/// kept in the log, superseded ones preceded by a supersede marker.
class ServerStore {
 public:
  explicit ServerStore(std::optional<std::filesystem::path> log_path = std::nullopt,
                       rec::ScreeningPolicy policy = {});

  struct PutResult {
    std::string id;
    bool changed = false;
  };
  /// Throws std::invalid_argument (malformed) or Error("unknown-patient").
  PutResult put(const std::string& canonical_line);

  /// Snapshot of the patient's live record lines, ascending taken_at.
  std::optional<std::vector<std::string>> list(const std::string& patient_id) const;
  std::optional<rec::RegionAlert> flags(const std::string& region) const;

  std::size_t live_records() const;
  std::size_t log_lines() const;

 private:
  struct Live {
    std::string line;
    rec::LogEntry entry;
    std::uint64_t seq;
  };
  void index(const std::string& line, bool write_log);

  mutable std::mutex mu_;
  std::unique_ptr<rec::LogFile> log_;
  rec::ScreeningPolicy policy_;
  std::map<std::string, Live> patients_;
  std::map<std::string, Live> records_;
  std::uint64_t seq_ = 0;
  std::size_t log_lines_ = 0;
};

/// Per-connection protocol state.
class ServerSession {
 public:
  explicit ServerSession(ServerStore& store) : store_(store) {}
  /// One request line in, one reply unit out.
  std::vector<std::string> handle(const std::string& request);
  bool closed() const { return closed_; }

 private:
  ServerStore& store_;
  bool hello_ = false;
  bool closed_ = false;
};

/// Reliable ordered line transport as seen by the client.
class LineChannel {
 public:
  virtual ~LineChannel() = default;
  /// Returns false when the link is gone.
  virtual bool send_line(const std::string& line) = 0;
  /// nullopt when the link is gone.
  virtual std::optional<std::string> recv_line() = 0;
};

/// In-process channel straight into a ServerSession. `cut_after_replies`
/// severs the link once that many reply lines have been delivered.
class LoopbackChannel final : public LineChannel {
 public:
  explicit LoopbackChannel(ServerStore& store, std::optional<std::size_t> cut_after_replies = std::nullopt)
      : session_(store), cut_after_(cut_after_replies) {}
  bool send_line(const std::string& line) override;
  std::optional<std::string> recv_line() override;
  std::size_t requests_sent() const { return requests_; }
  const std::vector<std::string>& sent() const { return sent_; }

 private:
  bool cut() const { return cut_after_ && delivered_ >= *cut_after_; }
  ServerSession session_;
  std::optional<std::size_t> cut_after_;
  std::vector<std::string> pending_;
  std::size_t next_ = 0;
  std::size_t delivered_ = 0;
  std::size_t requests_ = 0;
  std::vector<std::string> sent_;
};

struct Endpoint {
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;
};
/// "host:port". Throws std::invalid_argument.
Endpoint parse_endpoint(const std::string& text);

class TcpLineChannel final : public LineChannel {
 public:
  /// Throws Error("connection-lost") when the connect fails.
  explicit TcpLineChannel(const Endpoint& ep);
  ~TcpLineChannel() override;
  TcpLineChannel(const TcpLineChannel&) = delete;
  TcpLineChannel& operator=(const TcpLineChannel&) = delete;
  bool send_line(const std::string& line) override;
  std::optional<std::string> recv_line() override;

 private:
  int fd_ = -1;
  std::string buf_;
};

/// TCP front end; one thread per session, all sharing one ServerStore.
class SyncServer {
 public:
  SyncServer(ServerStore& store, const Endpoint& bind);
  ~SyncServer();
  SyncServer(const SyncServer&) = delete;
  SyncServer& operator=(const SyncServer&) = delete;

  std::uint16_t port() const { return port_; }
  void stop();

 private:
  void accept_loop();
  void serve_client(int fd);

  ServerStore& store_;
  int listen_fd_ = -1;
  std::uint16_t port_ = 0;
  std::atomic<bool> stopping_{false};
  std::thread acceptor_;
  std::mutex clients_mu_;
  std::vector<std::thread> clients_;
  std::vector<int> client_fds_;
};

struct SyncSummary {
  std::size_t uploaded = 0;           // test records acknowledged this run
  std::size_t skipped = 0;            // records already synced beforehand
  std::size_t patients_uploaded = 0;
  std::optional<std::string> error;   // "connection-lost", "version-mismatch", "server-rejected"
  bool ok() const { return !error.has_value(); }
};

/// Uploads every unsynced patient, then every unsynced record in taken_at
/// order, persisting the synced mark after each OK. Stops at the first
/// failure; a rerun resumes where this one stopped.
SyncSummary client_sync(rec::RecordStore& store, LineChannel& channel);

}  // namespace umphcs::sync
