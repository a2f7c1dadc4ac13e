#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace uqal {

/// Seeded random stream. Streams are identified by (seed, stream_id) and
/// produce the same draw sequence on every run; independent streams are
/// derived from a global seed plus a purpose tag and an index, so parallel
/// workers never share state.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream_id);

  /// Derives the stream used for `purpose` (e.g. "dropout", "attack") at a
  /// given index (sample id, member id, ...).
  static RngStream derive(std::uint64_t seed, std::string_view purpose,
                          std::uint64_t index);

  std::uint64_t next_u64();
  double uniform();                          // [0, 1)
  double uniform(double lo, double hi);      // [lo, hi)
  double normal(double mean = 0.0, double stddev = 1.0);

  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t next_below(std::uint64_t n);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream_id() const { return stream_id_; }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_id_;
  std::mt19937_64 engine_;
  double spare_normal_ = 0.0;
  bool has_spare_normal_ = false;
};

std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t fnv1a64(std::string_view text);

}  // namespace uqal
