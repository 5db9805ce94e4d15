#pragma once

#include <stdexcept>
#include <string>

namespace mvb {

// Error classes map one-to-one onto the CLI exit codes (see tools/cli_main.cpp
// and README). Each carries a machine-parseable class tag.
struct InvalidArgument : std::runtime_error {
  using std::runtime_error::runtime_error;
  static constexpr const char* kClass = "invalid-argument";
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
  static constexpr const char* kClass = "config-error";
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
  static constexpr const char* kClass = "io-error";
};

struct InternalError : std::runtime_error {
  using std::runtime_error::runtime_error;
  static constexpr const char* kClass = "internal-error";
};

inline void check_arg(bool cond, const std::string& msg) {
  if (!cond) throw InvalidArgument(msg);
}

inline void check_internal(bool cond, const std::string& msg) {
  if (!cond) throw InternalError(msg);
}

}  // namespace mvb
