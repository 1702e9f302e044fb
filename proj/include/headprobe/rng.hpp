#pragma once

#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string_view>

namespace headprobe {

/// SplitMix64 step, used to derive independent child seeds from one parent.
constexpr std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Seeded generator used for every random draw in the toolkit.
///
/// The engine is SplitMix64 (Steele, Lea & Flood 2014): a counter-based
/// generator whose n-th output is mix_seed(seed, n). It is several times
/// faster than std::mt19937_64, which matters for the per-model latency
/// budget. The uniform and normal transforms are done here rather than via
/// std::*_distribution, whose algorithms vary between standard libraries, so
/// a given seed produces the same probes with any toolchain.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  /// Integer in [0, n), rejection-sampled to avoid modulo bias.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  /// Standard normal via a 256-layer ziggurat (Marsaglia & Tsang 2000).
  /// One 64-bit draw supplies the layer index, the sign and the abscissa.
  double normal() {
    const auto& z = ziggurat();
    for (;;) {
      const std::uint64_t bits = next_u64();
      const std::size_t layer = bits & 0xff;
      const std::uint64_t sign = (bits & 0x100) << 55;  // bit 8 -> IEEE sign bit
      const bool negative = sign != 0;
      const double x = static_cast<double>(bits >> 11) * 0x1.0p-53 * z.x[layer];
      if (x < z.x[layer + 1]) return std::bit_cast<double>(std::bit_cast<std::uint64_t>(x) | sign);
      if (layer == 0) {
        // tail beyond R
        double a, b;
        do {
          a = -std::log(1.0 - uniform01()) / ZigguratTable::kR;
          b = -std::log(1.0 - uniform01());
        } while (b + b < a * a);
        return negative ? -(ZigguratTable::kR + a) : ZigguratTable::kR + a;
      }
      const double y = z.f[layer] + uniform01() * (z.f[layer + 1] - z.f[layer]);
      if (y < std::exp(-0.5 * x * x)) return negative ? -x : x;
    }
  }

  double normal(double sigma) { return sigma * normal(); }

 private:
  struct ZigguratTable {
    static constexpr double kR = 3.6541528853610088;      // start of the tail
    static constexpr double kArea = 0.00492867323399;     // area of every layer
    double x[257];  // layer widths, decreasing; x[256] = 0
    double f[257];  // exp(-x^2 / 2)

    ZigguratTable() {
      x[0] = kArea / std::exp(-0.5 * kR * kR);
      x[1] = kR;
      for (int i = 2; i < 256; ++i)
        x[i] = std::sqrt(-2.0 * std::log(kArea / x[i - 1] + std::exp(-0.5 * x[i - 1] * x[i - 1])));
      x[256] = 0.0;
      for (int i = 0; i < 257; ++i) f[i] = std::exp(-0.5 * x[i] * x[i]);
    }
  };

  static const ZigguratTable& ziggurat() {
    static const ZigguratTable table;
    return table;
  }

  std::uint64_t state_;
};

/// 64-bit FNV-1a. Stable across platforms, unlike std::hash.
constexpr std::uint64_t fnv1a64(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : text) {
    h ^= static_cast<std::uint8_t>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Probe seed for one model of a scan: scan_seed XOR hash(model_id).
constexpr std::uint64_t seed_for_model(std::uint64_t scan_seed, std::string_view model_id) {
  return scan_seed ^ fnv1a64(model_id);
}

}  // namespace headprobe
