#pragma once

#include <algorithm>
#include <cstdint>
#include <string>

#include "headprobe/error.hpp"
#include "headprobe/headspec.hpp"
#include "headprobe/matrix.hpp"
#include "headprobe/rng.hpp"

namespace headprobe {

inline constexpr std::size_t kDefaultProbeCount = 4096;

struct Distribution {
  enum class Kind { Uniform01, Gaussian };

  Kind kind = Kind::Uniform01;
  double sigma = 0.0;  // only meaningful for Gaussian

  static Distribution uniform01() { return {Kind::Uniform01, 0.0}; }
  static Distribution gaussian(double sigma) { return {Kind::Gaussian, sigma}; }

  friend bool operator==(const Distribution&, const Distribution&) = default;
};

struct ProbeConfig {
  Distribution distribution = Distribution::uniform01();
  std::size_t count = kDefaultProbeCount;
  std::uint64_t seed = 0;

  friend bool operator==(const ProbeConfig&, const ProbeConfig&) = default;
};

inline void validate(const ProbeConfig& cfg) {
  if (cfg.count == 0) throw Error(ErrorCode::ConfigInvalid, "probe count must be >= 1");
  if (cfg.distribution.kind == Distribution::Kind::Gaussian &&
      !(cfg.distribution.sigma > 0.0 && std::isfinite(cfg.distribution.sigma)))
    throw Error(ErrorCode::ConfigInvalid, "gaussian sigma must be finite and > 0");
}

/// N probes, one per row. Conv probes are flattened channel-major (c*H*W + y*W + x).
struct ProbeBatch {
  Matrix values;
  InputShape shape;
  ProbeConfig config;
};

/// Picks the probe distribution from the latent range:
///  - conv 1x1 + ReLU + GAP heads always get Gaussian probes,
///  - non-negative latents get U[0,1],
///  - signed latents get N(0, sigma^2) with sigma = abs_max / 3.
/// A degenerate all-zero range falls back to sigma = 1.
inline Distribution choose_distribution(const LatentRangeInfo& range, HeadKind head_kind) {
  const double sigma = range.abs_max > 0.0 ? range.abs_max / 3.0 : 1.0;
  if (head_kind == HeadKind::Conv1x1Gap) return Distribution::gaussian(sigma);
  if (range.nonnegative) return Distribution::uniform01();
  return Distribution::gaussian(sigma);
}

/// Draws probes row by row from one seeded sequence. Filling blocks of any
/// size yields the same values as one generate_probes() call.
class ProbeStream {
 public:
  ProbeStream(const ProbeConfig& cfg, const InputShape& shape) : cfg_(cfg), shape_(shape), rng_(cfg.seed) {
    validate(cfg_);
    if (shape_.flat_size() == 0) throw Error(ErrorCode::ShapeMismatch, "empty probe shape");
  }

  std::size_t remaining() const noexcept { return cfg_.count - produced_; }
  const InputShape& shape() const noexcept { return shape_; }

  /// Next min(max_rows, remaining()) probes, one per row.
  Matrix next(std::size_t max_rows) {
    Matrix block(std::min(max_rows, remaining()), shape_.flat_size());
    if (cfg_.distribution.kind == Distribution::Kind::Uniform01) {
      for (double& v : block.data()) v = rng_.uniform01();
    } else {
      const double sigma = cfg_.distribution.sigma;
      for (double& v : block.data()) v = rng_.normal(sigma);
    }
    produced_ += block.rows();
    return block;
  }

 private:
  ProbeConfig cfg_;
  InputShape shape_;
  Rng rng_;
  std::size_t produced_ = 0;
};

inline ProbeBatch generate_probes(const ProbeConfig& cfg, const InputShape& shape) {
  ProbeStream stream(cfg, shape);
  return {stream.next(cfg.count), shape, cfg};
}

inline std::string to_string(const Distribution& d) {
  if (d.kind == Distribution::Kind::Uniform01) return "uniform01";
  return "gaussian(sigma=" + std::to_string(d.sigma) + ")";
}

}  // namespace headprobe
