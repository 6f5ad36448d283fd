// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>

namespace occflow {

// All numerics run in double precision: finite-difference tests and metric
// accumulations need the headroom, and desk-scale models are small enough
// that the bandwidth cost does not matter.
using real = double;

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {
struct MsgStream {
  std::ostringstream ss;
  template <class T>
  MsgStream& operator<<(T&& t) {
    ss << std::forward<T>(t);
    return *this;
  }
};
}  // namespace detail

#define OCCFLOW_CHECK(cond, Err, msg)                \
  do {                                               \
    if (!(cond)) {                                   \
      ::occflow::detail::MsgStream ms_;              \
      ms_ << msg;                                    \
      throw Err(ms_.ss.str());                       \
    }                                                \
  } while (0)

}  // namespace occflow
