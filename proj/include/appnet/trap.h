#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>

#include "appnet/error.h"
#include "appnet/fd.h"
#include "appnet/model.h"
#include "appnet/wire.h"

namespace appnet {

enum class TrapOp : uint8_t {
  Socket = 1,
  Bind = 2,
  Listen = 3,
  Connect = 4,
  Accept = 5,
  GetSockName = 6,
  GetPeerName = 7,
  SendTo = 8,
  RecvFrom = 9,
  Close = 10,
};

std::string_view trap_op_name(TrapOp op);

enum class SocketKind : uint8_t { Stream = 0, Datagram = 1 };
enum class HandleRole : uint8_t { Unbound, Bound, Listening, Connected };

struct VHandle {
  uint32_t id = 0;
  SocketKind kind = SocketKind::Stream;
  HandleRole role = HandleRole::Unbound;
};

inline constexpr uint8_t kTrapVersion = 0x01;
inline constexpr size_t kMaxDatagram = 60000;

// There is deliberately no Read/Write op: data never crosses the trap.
struct TrapRequest {
  TrapOp op = TrapOp::Socket;
  uint32_t handle = 0;                 // 0 only for Socket
  std::optional<SockAddr> addr;        // Bind, Connect, SendTo
  Bytes payload;                       // SendTo
  SocketKind kind = SocketKind::Stream;  // Socket

  bool operator==(const TrapRequest&) const = default;
};

struct TrapReply {
  std::optional<Errc> error;           // nullopt = Ok
  std::optional<uint32_t> handle;      // Socket, Accept
  bool handle_transfer = false;        // a live connection handle accompanies the reply
  std::optional<SockAddr> addr;
  Bytes payload;

  bool ok() const { return !error; }
  bool operator==(const TrapReply&) const = default;
};

/// Request: version, op, handle u32, ip u32, port u16, payload length u32,
/// payload. Socket carries its kind as a one-byte payload.
Bytes encode_request(const TrapRequest& r);
TrapRequest decode_request(std::span<const uint8_t> bytes);
/// Reply: version, status (0 = Ok, else 1 + error code), flags (handle,
/// addr, transfer), handle u32, ip u32, port u16, payload length u32, payload.
Bytes encode_reply(const TrapReply& r);
TrapReply decode_reply(std::span<const uint8_t> bytes);

struct TrapResponse {
  TrapReply reply;
  UniqueFd transferred;
};

/// Generator side of a trap channel.
class TrapChannel {
 public:
  virtual ~TrapChannel() = default;
  virtual TrapResponse call(const TrapRequest& req) = 0;
};

struct ServedReply {
  Bytes reply;
  UniqueFd transferred;
};

/// Handler side: consumes encoded requests for an attached application.
class TrapService {
 public:
  virtual ~TrapService() = default;
  virtual ServedReply serve(const AppId& app, std::span<const uint8_t> request) = 0;
};

/// Generator and handler in one process; the handle is moved across
/// directly instead of through ancillary data.
class InProcessChannel : public TrapChannel {
 public:
  InProcessChannel(TrapService& service, AppId app) : service_(service), app_(std::move(app)) {}
  TrapResponse call(const TrapRequest& req) override;

 private:
  TrapService& service_;
  AppId app_;
};

/// Unix-domain seqpacket channel; handles travel as SCM_RIGHTS.
class UnixTrapChannel : public TrapChannel {
 public:
  explicit UnixTrapChannel(UniqueFd sock) : sock_(std::move(sock)) {}
  static std::unique_ptr<UnixTrapChannel> connect(const std::filesystem::path& path);
  TrapResponse call(const TrapRequest& req) override;

 private:
  UniqueFd sock_;
};

/// Tracks which applications may attach and enforces one channel per app.
class SandboxRegistry {
 public:
  void register_app(const AppId& app) { registered_.insert(app); }
  void unregister_app(const AppId& app);
  /// Throws AttachFailed for unknown or already-attached applications.
  void attach(const AppId& app);
  void detach(const AppId& app) { attached_.erase(app); }
  bool registered(const AppId& app) const { return registered_.count(app) > 0; }
  bool attached(const AppId& app) const { return attached_.count(app) > 0; }

 private:
  std::set<AppId> registered_;
  std::set<AppId> attached_;
};

std::filesystem::path trap_path(const std::filesystem::path& run_dir, const AppId& app);

/// Virtual socket API exposed to applications. Connected handles come back
/// as real descriptors; everything else stays a virtual handle.
class VirtualSockets {
 public:
  explicit VirtualSockets(std::unique_ptr<TrapChannel> channel) : channel_(std::move(channel)) {}

  /// Attaches through APPNET_TRAP (set by `appnet run`).
  static VirtualSockets from_env();

  uint32_t socket(SocketKind kind);
  void bind(uint32_t h, SockAddr addr);
  void listen(uint32_t h);
  /// Returns the connected descriptor (still owned by this object).
  int connect(uint32_t h, SockAddr dest);

  struct Accepted {
    uint32_t handle;
    SockAddr peer;
    int fd;
  };
  Accepted accept(uint32_t h);

  SockAddr getsockname(uint32_t h);
  SockAddr getpeername(uint32_t h);
  void sendto(uint32_t h, SockAddr dest, std::span<const uint8_t> payload);

  struct Datagram {
    SockAddr from;
    Bytes payload;
  };
  Datagram recvfrom(uint32_t h);
  void close(uint32_t h);

  /// Resolves a name through the built-in DNS; nullopt on NXDOMAIN.
  std::optional<Ipv4> resolve(const std::string& name);

  int fd(uint32_t h) const;
  uint64_t trap_calls() const { return calls_; }

 private:
  TrapResponse call(const TrapRequest& req);

  std::unique_ptr<TrapChannel> channel_;
  std::map<uint32_t, UniqueFd> fds_;
  uint64_t calls_ = 0;
  uint16_t dns_id_ = 1;
};

// Seqpacket framing helpers shared by both ends of UnixTrapChannel.
void send_frame(int sock, std::span<const uint8_t> frame, int pass_fd = -1);
/// Returns false on orderly shutdown.
bool recv_frame(int sock, Bytes& frame, UniqueFd* received = nullptr);

}  // namespace appnet
