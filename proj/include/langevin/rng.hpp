#pragma once

#include <array>
#include <cmath>
#include <cstdint>

namespace langevin {

/// Philox4x32-10 block function (Salmon et al., Random123).
/// Maps a 128-bit counter and a 64-bit key to 128 pseudo-random bits.
class Philox4x32 {
 public:
  using counter_type = std::array<std::uint32_t, 4>;
  using key_type = std::array<std::uint32_t, 2>;

  static constexpr counter_type generate(counter_type ctr, key_type key) {
    for (int round = 0; round < 10; ++round) {
      ctr = single_round(ctr, key);
      key[0] += kWeyl0;
      key[1] += kWeyl1;
    }
    return ctr;
  }

 private:
  static constexpr std::uint32_t kMul0 = 0xD2511F53u;
  static constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
  static constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
  static constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;

  static constexpr counter_type single_round(const counter_type& c,
                                             const key_type& k) {
    const std::uint64_t p0 = std::uint64_t{kMul0} * c[0];
    const std::uint64_t p1 = std::uint64_t{kMul1} * c[2];
    const auto hi0 = static_cast<std::uint32_t>(p0 >> 32);
    const auto lo0 = static_cast<std::uint32_t>(p0);
    const auto hi1 = static_cast<std::uint32_t>(p1 >> 32);
    const auto lo1 = static_cast<std::uint32_t>(p1);
    return {hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0};
  }
};

/// Random stream keyed by (master_seed, stream_id). Philox4x32-10 hashes the
/// key pair into the 256-bit state of a xoshiro256++ generator; draws then
/// proceed sequentially. The output is a pure function of
/// (master_seed, stream_id, counter), where counter counts 64-bit draws.
///
/// Streams are plain values. Copying one forks an identical sequence, which
/// is how shared-noise couplings are built.
class RngStream {
 public:
  RngStream() : RngStream(0, 0) {}
  RngStream(std::uint64_t master_seed, std::uint64_t stream_id)
      : master_seed_(master_seed), stream_id_(stream_id) {
    const Philox4x32::key_type key{static_cast<std::uint32_t>(master_seed),
                                   static_cast<std::uint32_t>(master_seed >> 32)};
    for (std::uint32_t half = 0; half < 2; ++half) {
      const auto block = Philox4x32::generate(
          {half, 0u, static_cast<std::uint32_t>(stream_id),
           static_cast<std::uint32_t>(stream_id >> 32)},
          key);
      state_[2 * half] = (std::uint64_t{block[0]} << 32) | block[1];
      state_[2 * half + 1] = (std::uint64_t{block[2]} << 32) | block[3];
    }
    if ((state_[0] | state_[1] | state_[2] | state_[3]) == 0) state_[0] = 1;
  }

  std::uint64_t master_seed() const { return master_seed_; }
  std::uint64_t stream_id() const { return stream_id_; }
  /// Number of 64-bit draws consumed so far.
  std::uint64_t counter() const { return counter_; }

  /// Next 64 random bits (xoshiro256++).
  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    ++counter_;
    return result;
  }

  /// Uniform on (0, 1], 53-bit resolution.
  double uniform() {
    return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal by the 256-layer ziggurat (Marsaglia and Tsang).
  double normal();

  double normal(double mean, double sd) { return mean + sd * normal(); }

  /// Uniform integer in [0, n). Rejection keeps it exactly uniform.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t r = next_u64();
    while (r >= limit) r = next_u64();
    return r % n;
  }

  /// Advances by n draws.
  void discard(std::uint64_t n) {
    for (std::uint64_t i = 0; i < n; ++i) next_u64();
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  std::uint64_t master_seed_;
  std::uint64_t stream_id_;
  std::uint64_t counter_ = 0;
  std::array<std::uint64_t, 4> state_{};
};

namespace detail {

struct ZigguratTables {
  static constexpr int kLayers = 256;
  static constexpr double kR = 3.6541528853610088;
  static constexpr double kArea = 4.92867323399e-3;
  std::array<double, kLayers + 1> x{};
  std::array<double, kLayers + 1> fx{};

  ZigguratTables() {
    auto f = [](double t) { return std::exp(-0.5 * t * t); };
    x[0] = kArea / f(kR);
    x[1] = kR;
    for (int i = 1; i < kLayers - 1; ++i) {
      x[i + 1] = std::sqrt(-2.0 * std::log(kArea / x[i] + f(x[i])));
    }
    x[kLayers - 1 + 1] = 0.0;
    for (int i = 0; i <= kLayers; ++i) fx[i] = f(x[i]);
  }
};

inline const ZigguratTables kZiggurat{};

inline const ZigguratTables& ziggurat_tables() { return kZiggurat; }

}  // namespace detail

inline double RngStream::normal() {
  const auto& t = detail::kZiggurat;
  for (;;) {
    const std::uint64_t bits = next_u64();
    const auto layer = static_cast<int>(bits & 0xFF);
    const double sign = (bits & 0x100) ? -1.0 : 1.0;
    const double u = static_cast<double>(static_cast<std::int64_t>(bits >> 11)) * 0x1.0p-53;
    const double x = u * t.x[layer];
    if (x < t.x[layer + 1]) return sign * x;
    if (layer == 0) {
      // Tail beyond R.
      double a, b;
      do {
        a = -std::log(uniform()) / detail::ZigguratTables::kR;
        b = -std::log(uniform());
      } while (2.0 * b < a * a);
      return sign * (detail::ZigguratTables::kR + a);
    }
    const double y = t.fx[layer] + uniform() * (t.fx[layer + 1] - t.fx[layer]);
    if (y < std::exp(-0.5 * x * x)) return sign * x;
  }
}

inline RngStream derive_stream(std::uint64_t master_seed,
                               std::uint64_t stream_id) {
  return RngStream(master_seed, stream_id);
}

/// Stream channels of one trajectory. Driving noise and stochastic-gradient
/// draws live on separate streams so that an SG integrator and its
/// full-gradient twin see the same Brownian increments.
enum class Channel : std::uint64_t { noise = 0, omega = 1, aux = 2 };

inline constexpr std::uint64_t kChannels = 4;

inline std::uint64_t trajectory_stream_id(std::uint64_t trajectory,
                                          Channel channel) {
  return trajectory * kChannels + static_cast<std::uint64_t>(channel);
}

inline RngStream trajectory_stream(std::uint64_t master_seed,
                                   std::uint64_t trajectory, Channel channel) {
  return derive_stream(master_seed, trajectory_stream_id(trajectory, channel));
}

}  // namespace langevin
