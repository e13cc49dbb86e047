#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace appnet {

enum class Errc {
  InvalidVip,
  InvalidTag,
  InvalidName,
  InvalidArgument,
  DuplicateAppBinding,
  AmbiguousName,
  DecodeError,
  AttachFailed,
  AddrInUse,
  AddrNotAvailable,
  Unidentified,
  NoSuchService,
  Denied,
  ConnRefused,
  NotConnected,
  MessageTooLong,
  PoolExhausted,
  NoGateway,
  PortUnavailable,
  UnknownApp,
  BadHandle,
  WouldBlock,
  BindFailed,
  JoinUnreachable,
  AssertionFailed,
  Io,
};

std::string_view errc_name(Errc code);

class Error : public std::runtime_error {
 public:
  explicit Error(Errc code) : Error(code, std::string(errc_name(code))) {}
  Error(Errc code, const std::string& what) : std::runtime_error(what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace appnet
