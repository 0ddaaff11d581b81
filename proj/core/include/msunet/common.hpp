// Copyright (c) 2026 msunet contributors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>

namespace msunet {

/// Error type thrown by every validation failure in the library.
class Error : public std::runtime_error {
public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

namespace detail {
[[noreturn]] inline void throw_check_failure(const char* expr, const std::string& msg) {
  std::ostringstream os;
  os << msg;
  if (*expr != '\0') os << " (check failed: " << expr << ")";
  throw Error(os.str());
}
}  // namespace detail

// MSUNET_CHECK(cond, "message " << value) -- throws msunet::Error on failure.
#define MSUNET_CHECK(cond, msg)                                         \
  do {                                                                  \
    if (!(cond)) {                                                      \
      std::ostringstream msunet_check_os_;                              \
      msunet_check_os_ << msg;                                          \
      ::msunet::detail::throw_check_failure(#cond, msunet_check_os_.str()); \
    }                                                                   \
  } while (0)

#define MSUNET_FAIL(msg)                              \
  do {                                                \
    std::ostringstream msunet_check_os_;              \
    msunet_check_os_ << msg;                          \
    throw ::msunet::Error(msunet_check_os_.str());    \
  } while (0)

namespace runtime {

// MSUNET_DETERMINISTIC=1 switches the whole stack to 64-bit compute and
// single-threaded execution so repeated runs are bit-identical.
bool deterministic();
void set_deterministic(bool on);

// Worker count for the parallel regions inside ops. 1 in deterministic mode.
int num_threads();
void set_num_threads(int n);

}  // namespace runtime

inline constexpr const char* kVersion = "0.1.0";

}  // namespace msunet
