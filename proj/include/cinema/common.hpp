#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace cinema {

enum class errc {
  invalid_argument,  // bad parameters, shape mismatches, domain violations
  bad_config,        // malformed or unknown config keys
  io,                // file and container failures
  numerical,         // non-convergence, degenerate systems
};

class error : public std::runtime_error {
public:
  error(errc kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
  errc kind() const { return kind_; }

private:
  errc kind_;
};

[[noreturn]] inline void fail(errc kind, const std::string& msg) { throw error(kind, msg); }

inline void require(bool cond, errc kind, const std::string& msg) {
  if (!cond) fail(kind, msg);
}

}  // namespace cinema
