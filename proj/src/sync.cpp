#include "umphcs/sync.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cstring>
#include <stdexcept>

#include "umphcs/error.hpp"

namespace umphcs::sync {

// ---- ServerStore -------------------------------------------------------------

ServerStore::ServerStore(std::optional<std::filesystem::path> log_path, rec::ScreeningPolicy policy)
    : policy_(policy) {
  if (log_path) {
    log_ = std::make_unique<rec::LogFile>(*log_path);
    for (const auto& line : log_->initial_lines()) {
      if (std::holds_alternative<rec::SupersedeMark>(rec::parse_line(line))) {
        ++log_lines_;
        continue;
      }
      index(line, false);
    }
  }
}

void ServerStore::index(const std::string& line, bool write_log) {
  auto entry = rec::parse_line(line);
  std::map<std::string, Live>* table = nullptr;
  std::string id;
  bool is_patient = false;
  if (const auto* p = std::get_if<rec::Patient>(&entry)) {
    table = &patients_;
    id = p->patient_id;
    is_patient = true;
  } else if (const auto* r = std::get_if<rec::TestRecord>(&entry)) {
    if (!patients_.count(r->patient_id)) throw Error("unknown-patient", r->patient_id);
    table = &records_;
    id = r->record_id;
  } else {
    throw std::invalid_argument("only patient and record lines may be uploaded");
  }
  auto it = table->find(id);
  if (it != table->end() && it->second.line == line) return;
  if (write_log && log_) {
    if (it != table->end()) {
      log_->append(rec::canonical_line(rec::SupersedeMark{is_patient, id}));
      ++log_lines_;
    }
    log_->append(line);
  }
  if (it != table->end()) {
    it->second.line = line;
    it->second.entry = std::move(entry);
  } else {
    table->emplace(id, Live{line, std::move(entry), seq_++});
  }
  ++log_lines_;
}

ServerStore::PutResult ServerStore::put(const std::string& line) {
  std::lock_guard lock(mu_);
  const auto before = log_lines_;
  index(line, true);
  const auto entry = rec::parse_line(line);
  PutResult r;
  r.changed = log_lines_ != before;
  if (const auto* p = std::get_if<rec::Patient>(&entry))
    r.id = p->patient_id;
  else
    r.id = std::get<rec::TestRecord>(entry).record_id;
  return r;
}

std::optional<std::vector<std::string>> ServerStore::list(const std::string& patient_id) const {
  std::vector<const Live*> hits;
  std::lock_guard lock(mu_);
  if (!patients_.count(patient_id)) return std::nullopt;
  for (const auto& [id, live] : records_)
    if (std::get<rec::TestRecord>(live.entry).patient_id == patient_id) hits.push_back(&live);
  std::sort(hits.begin(), hits.end(), [](const Live* a, const Live* b) {
    const auto& ta = std::get<rec::TestRecord>(a->entry).taken_at;
    const auto& tb = std::get<rec::TestRecord>(b->entry).taken_at;
    return ta != tb ? ta < tb : a->seq < b->seq;
  });
  std::vector<std::string> out;
  out.reserve(hits.size());
  for (const auto* h : hits) out.push_back(h->line);
  return out;
}

std::optional<rec::RegionAlert> ServerStore::flags(const std::string& region) const {
  std::vector<rec::Patient> patients;
  std::vector<const Live*> live;
  {
    std::lock_guard lock(mu_);
    for (const auto& [id, p] : patients_) patients.push_back(std::get<rec::Patient>(p.entry));
    for (const auto& [id, r] : records_) live.push_back(&r);
  }
  std::sort(live.begin(), live.end(), [](const Live* a, const Live* b) { return a->seq < b->seq; });
  std::vector<rec::TestRecord> records;
  for (const auto* l : live) records.push_back(std::get<rec::TestRecord>(l->entry));
  return rec::screen_region(patients, records, region, policy_);
}

std::size_t ServerStore::live_records() const {
  std::lock_guard lock(mu_);
  return records_.size();
}

std::size_t ServerStore::log_lines() const {
  std::lock_guard lock(mu_);
  return log_lines_;
}

// ---- ServerSession -----------------------------------------------------------

std::vector<std::string> ServerSession::handle(const std::string& request) {
  const auto sp = request.find(' ');
  const std::string verb = request.substr(0, sp);
  const std::string arg = sp == std::string::npos ? std::string() : request.substr(sp + 1);
  static const char* const kVerbs[] = {"HELLO", "PUT", "LIST", "FLAGS", "QUIT"};
  if (std::find(std::begin(kVerbs), std::end(kVerbs), verb) == std::end(kVerbs)) return {"ERR unknown-verb"};

  if (verb == "QUIT") {
    closed_ = true;
    return {"BYE"};
  }
  if (verb == "HELLO") {
    if (arg.empty()) return {"ERR malformed-line"};
    if (arg != kProtocolVersion) return {"ERR version-mismatch"};
    hello_ = true;
    return {std::string("OK ") + kProtocolVersion};
  }
  if (!hello_) return {"ERR before-hello"};
  if (arg.empty()) return {"ERR malformed-line"};

  if (verb == "PUT") {
    try {
      return {"OK " + store_.put(arg).id};
    } catch (const Error& e) {
      return {"ERR " + e.code()};
    } catch (const std::invalid_argument&) {
      return {"ERR malformed-line"};
    }
  }
  if (verb == "LIST") {
    auto lines = store_.list(arg);
    if (!lines) return {"ERR unknown-patient"};
    std::vector<std::string> out;
    out.reserve(lines->size() + 2);
    out.emplace_back("BEGIN");
    for (auto& l : *lines) out.push_back(std::move(l));
    out.emplace_back("END");
    return out;
  }
  // FLAGS
  auto alert = store_.flags(arg);
  if (!alert) return {"NONE"};
  return {"ALERT " + rec::canonical_json(*alert)};
}

// ---- LoopbackChannel ---------------------------------------------------------

bool LoopbackChannel::send_line(const std::string& line) {
  if (cut()) return false;
  ++requests_;
  sent_.push_back(line);
  for (auto& r : session_.handle(line)) pending_.push_back(std::move(r));
  return true;
}

std::optional<std::string> LoopbackChannel::recv_line() {
  if (cut() || next_ >= pending_.size()) return std::nullopt;
  ++delivered_;
  return pending_[next_++];
}

// ---- TCP -----------------------------------------------------------------------

Endpoint parse_endpoint(const std::string& text) {
  const auto colon = text.rfind(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 == text.size())
    throw std::invalid_argument("endpoint must be host:port");
  Endpoint ep;
  ep.host = text.substr(0, colon);
  const std::string port = text.substr(colon + 1);
  if (!std::all_of(port.begin(), port.end(), [](char c) { return c >= '0' && c <= '9'; }) || port.size() > 5)
    throw std::invalid_argument("endpoint port must be numeric");
  const unsigned long v = std::stoul(port);
  if (v > 65535) throw std::invalid_argument("endpoint port out of range");
  ep.port = static_cast<std::uint16_t>(v);
  return ep;
}

namespace {

bool send_all(int fd, const std::string& data) {
  std::size_t off = 0;
  while (off < data.size()) {
    const ssize_t n = ::send(fd, data.data() + off, data.size() - off, MSG_NOSIGNAL);
    if (n <= 0) {
      if (n < 0 && errno == EINTR) continue;
      return false;
    }
    off += static_cast<std::size_t>(n);
  }
  return true;
}

// Reads one LF-terminated line, buffering extra bytes in `buf`.
std::optional<std::string> read_line(int fd, std::string& buf) {
  for (;;) {
    if (auto nl = buf.find('\n'); nl != std::string::npos) {
      std::string line = buf.substr(0, nl);
      buf.erase(0, nl + 1);
      return line;
    }
    char chunk[4096];
    const ssize_t n = ::recv(fd, chunk, sizeof chunk, 0);
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) return std::nullopt;
    buf.append(chunk, static_cast<std::size_t>(n));
  }
}

}  // namespace

TcpLineChannel::TcpLineChannel(const Endpoint& ep) {
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  const std::string port = std::to_string(ep.port);
  if (::getaddrinfo(ep.host.c_str(), port.c_str(), &hints, &res) != 0 || !res)
    throw Error("connection-lost", "cannot resolve " + ep.host);
  for (addrinfo* ai = res; ai; ai = ai->ai_next) {
    fd_ = ::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol);
    if (fd_ < 0) continue;
    if (::connect(fd_, ai->ai_addr, ai->ai_addrlen) == 0) break;
    ::close(fd_);
    fd_ = -1;
  }
  ::freeaddrinfo(res);
  if (fd_ < 0) throw Error("connection-lost", "cannot connect to " + ep.host + ":" + port);
  int one = 1;
  ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
}

TcpLineChannel::~TcpLineChannel() {
  if (fd_ >= 0) ::close(fd_);
}

bool TcpLineChannel::send_line(const std::string& line) { return send_all(fd_, line + "\n"); }

std::optional<std::string> TcpLineChannel::recv_line() { return read_line(fd_, buf_); }

SyncServer::SyncServer(ServerStore& store, const Endpoint& bind_to) : store_(store) {
  listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (listen_fd_ < 0) throw Error("storage-failure", "socket() failed");
  int one = 1;
  ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(bind_to.port);
  if (::inet_pton(AF_INET, bind_to.host.c_str(), &addr.sin_addr) != 1) {
    ::close(listen_fd_);
    throw std::invalid_argument("bind host must be an IPv4 address");
  }
  if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 || ::listen(listen_fd_, 16) != 0) {
    const std::string why = std::strerror(errno);
    ::close(listen_fd_);
    throw Error("bind-failed", why);
  }
  socklen_t len = sizeof addr;
  ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
  port_ = ntohs(addr.sin_port);
  acceptor_ = std::thread([this] { accept_loop(); });
}

SyncServer::~SyncServer() { stop(); }

void SyncServer::stop() {
  if (stopping_.exchange(true)) return;
  ::shutdown(listen_fd_, SHUT_RDWR);
  ::close(listen_fd_);
  if (acceptor_.joinable()) acceptor_.join();
  std::vector<std::thread> clients;
  {
    std::lock_guard lock(clients_mu_);
    for (int fd : client_fds_) ::shutdown(fd, SHUT_RDWR);
    clients.swap(clients_);
  }
  for (auto& t : clients) t.join();
}

void SyncServer::accept_loop() {
  while (!stopping_) {
    const int fd = ::accept(listen_fd_, nullptr, nullptr);
    if (fd < 0) {
      if (errno == EINTR) continue;
      return;
    }
    std::lock_guard lock(clients_mu_);
    if (stopping_) {
      ::close(fd);
      return;
    }
    client_fds_.push_back(fd);
    clients_.emplace_back([this, fd] { serve_client(fd); });
  }
}

void SyncServer::serve_client(int fd) {
  ServerSession session(store_);
  std::string buf;
  while (auto line = read_line(fd, buf)) {
    if (!line->empty() && line->back() == '\r') line->pop_back();
    std::string out;
    for (const auto& r : session.handle(*line)) out += r + "\n";
    if (!send_all(fd, out) || session.closed()) break;
  }
  ::shutdown(fd, SHUT_RDWR);
  std::lock_guard lock(clients_mu_);
  client_fds_.erase(std::remove(client_fds_.begin(), client_fds_.end(), fd), client_fds_.end());
  ::close(fd);
}

// ---- client --------------------------------------------------------------------

SyncSummary client_sync(rec::RecordStore& store, LineChannel& ch) {
  SyncSummary s;
  auto exchange = [&](const std::string& req) -> std::optional<std::string> {
    if (!ch.send_line(req)) return std::nullopt;
    return ch.recv_line();
  };

  auto hello = exchange(std::string("HELLO ") + kProtocolVersion);
  if (!hello) {
    s.error = "connection-lost";
    return s;
  }
  if (*hello != std::string("OK ") + kProtocolVersion) {
    s.error = "version-mismatch";
    return s;
  }

  const auto pending = store.unsynced();
  s.skipped = store.records().size() - pending.size();

  auto put = [&](const std::string& line, const std::string& id) -> bool {
    auto reply = exchange("PUT " + line);
    if (!reply) {
      s.error = "connection-lost";
      return false;
    }
    if (*reply != "OK " + id) {
      s.error = "server-rejected";
      return false;
    }
    return true;
  };

  for (const auto& p : store.patients()) {
    if (store.patient_synced(p.patient_id)) continue;
    if (!put(rec::canonical_line(p), p.patient_id)) return s;
    store.mark_synced(p);
    ++s.patients_uploaded;
  }
  for (const auto& r : pending) {
    if (!put(rec::canonical_line(r), r.record_id)) return s;
    store.mark_synced(r);
    ++s.uploaded;
  }
  // Everything is acknowledged by now; a lost BYE changes nothing.
  exchange("QUIT");
  return s;
}

}  // namespace umphcs::sync
