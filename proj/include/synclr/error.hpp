#pragma once

#include <stdexcept>
#include <string>

namespace synclr {

enum class ErrorCode {
  invalid_argument,
  data,
  io,
  checksum,
  version,
  transport,
  timeout,
  quota,
  numerical,
  degenerate,
  convergence,
};

inline const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::invalid_argument: return "invalid_argument";
    case ErrorCode::data: return "data";
    case ErrorCode::io: return "io";
    case ErrorCode::checksum: return "checksum";
    case ErrorCode::version: return "version";
    case ErrorCode::transport: return "transport";
    case ErrorCode::timeout: return "timeout";
    case ErrorCode::quota: return "quota";
    case ErrorCode::numerical: return "numerical";
    case ErrorCode::degenerate: return "degenerate";
    case ErrorCode::convergence: return "convergence";
  }
  return "unknown";
}

// Every failure raised by the library carries a code so callers (notably the
// CLI) can map it onto an exit status without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

  bool retryable() const noexcept {
    return code_ == ErrorCode::transport || code_ == ErrorCode::timeout ||
           code_ == ErrorCode::quota;
  }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) {
  throw Error(code, what);
}

inline void require(bool cond, ErrorCode code, const std::string& what) {
  if (!cond) fail(code, what);
}

}  // namespace synclr
