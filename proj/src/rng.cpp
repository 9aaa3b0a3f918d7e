#include "tnt/rng.hpp"

#include <cmath>

namespace tnt {

namespace {

// splitmix64 finalizer; full-avalanche bijection on 64 bits.
inline uint64_t mix64(uint64_t x) {
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ull;
  x ^= x >> 27;
  x *= 0x94d049bb133111ebull;
  x ^= x >> 31;
  return x;
}

inline uint64_t hash3(uint64_t seed, uint64_t stream, uint64_t counter) {
  uint64_t h = mix64(seed + 0x9e3779b97f4a7c15ull);
  h = mix64(h ^ (stream + 0xd1b54a32d192ed03ull));
  h = mix64(h ^ (counter + 0x2545f4914f6cdd1dull));
  return h;
}

}  // namespace

uint64_t RngStream::next_u64() { return hash3(seed_, stream_, counter_++); }

double RngStream::uniform() {
  // Top 53 bits -> [0, 1) on the f64 grid.
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RngStream::normal() {
  // u1 in (0, 1] keeps the log finite; each draw burns exactly two counters
  // so positions stay a pure function of the starting counter.
  double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
  double u2 = static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
}

RngStream RngStream::derive(uint64_t label) const {
  return RngStream(seed_, mix64(stream_ ^ mix64(label + 0xa0761d6478bd642full)), 0);
}

}  // namespace tnt
