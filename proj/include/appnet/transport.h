#pragma once

#include <cstdint>
#include <optional>
#include <span>

#include "appnet/fd.h"
#include "appnet/model.h"
#include "appnet/wire.h"

namespace appnet {

/// Client identity sent ahead of every node-to-node stream and datagram.
/// Wire: magic "ASPW" (u32), version, client vip (u32), client port (u16).
struct Preamble {
  Ipv4 vip;
  uint16_t port = 0;

  bool operator==(const Preamble&) const = default;
};

inline constexpr uint32_t kPreambleMagic = 0x41535057;
inline constexpr uint8_t kPreambleVersion = 0x01;
inline constexpr size_t kPreambleSize = 11;

Bytes encode_preamble(const Preamble& p);
/// nullopt when the bytes do not start with a valid preamble.
std::optional<Preamble> decode_preamble(std::span<const uint8_t> bytes);

/// Receives traffic that arrives at a node's real endpoints.
class TransportSink {
 public:
  virtual ~TransportSink() = default;
  /// `preamble` is nullopt for connections that did not identify themselves.
  /// Returns false when the connection is refused.
  virtual bool deliver_stream(RealEndpoint local, UniqueFd conn,
                              std::optional<Preamble> preamble) = 0;
  /// `wire` is the raw datagram, preamble included.
  virtual void deliver_datagram(RealEndpoint local, RealEndpoint from,
                                std::span<const uint8_t> wire) = 0;
};

/// The host-network side of a node: real listeners, outbound streams and
/// datagrams. Implemented over the simulator and over POSIX sockets.
class Transport {
 public:
  virtual ~Transport() = default;

  virtual Ipv4 host_ip() const = 0;
  virtual RealEndpoint open_stream_listener() = 0;
  virtual RealEndpoint open_datagram() = 0;
  virtual void close_endpoint(RealEndpoint ep) = 0;
  /// Throws ConnRefused when the endpoint cannot be reached.
  virtual UniqueFd connect_stream(RealEndpoint to, const Preamble& preamble) = 0;
  virtual void send_datagram(RealEndpoint from, RealEndpoint to, Bytes wire) = 0;
};

}  // namespace appnet
