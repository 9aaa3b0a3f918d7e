#pragma once

#include <cstdint>

namespace tnt {

// Counter-based stream: every output is a pure hash of (seed, stream_id,
// counter), so any draw can be reproduced from those three values alone and
// parallel shards never share mutable generator state. Distinct stream_ids
// give statistically independent sequences.
class RngStream {
 public:
  RngStream(uint64_t seed, uint64_t stream_id, uint64_t counter = 0)
      : seed_(seed), stream_(stream_id), counter_(counter) {}

  uint64_t next_u64();
  double uniform();  // [0, 1)
  double normal();   // Box-Muller; consumes two counters per draw

  // Child stream keyed by `label`, independent of the parent and of siblings
  // derived with other labels.
  RngStream derive(uint64_t label) const;

  uint64_t seed() const { return seed_; }
  uint64_t stream_id() const { return stream_; }
  uint64_t counter() const { return counter_; }

 private:
  uint64_t seed_;
  uint64_t stream_;
  uint64_t counter_;
};

}  // namespace tnt
