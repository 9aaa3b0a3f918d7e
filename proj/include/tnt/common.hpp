#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace tnt {

// Error taxonomy, kept flat so the CLI can map failures onto exit codes
// without parsing messages: config_error/usage_error -> 2, format_error -> 3,
// anything else -> 1.
struct shape_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct domain_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
// API misuse: nested tapes, non-scalar loss, training-only op at inference.
struct usage_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct config_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
// Malformed files: containers, checkpoints, keep-set history.
struct format_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct training_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct schedule_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {
inline void msg_cat(std::ostringstream&) {}
template <class T, class... Rest>
void msg_cat(std::ostringstream& os, const T& v, const Rest&... rest) {
  os << v;
  msg_cat(os, rest...);
}
}  // namespace detail

template <class... Args>
std::string msg(const Args&... args) {
  std::ostringstream os;
  detail::msg_cat(os, args...);
  return os.str();
}

// Plain row-major matrix of doubles for results that never need gradients:
// attention rows, collected alpha maps, per-sample scores.
struct Grid {
  int64_t rows = 0;
  int64_t cols = 0;
  std::vector<double> v;

  Grid() = default;
  Grid(int64_t r, int64_t c) : rows(r), cols(c), v(static_cast<size_t>(r * c), 0.0) {}
  double& at(int64_t r, int64_t c) { return v[static_cast<size_t>(r * cols + c)]; }
  double at(int64_t r, int64_t c) const { return v[static_cast<size_t>(r * cols + c)]; }
};

}  // namespace tnt
