#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "headprobe/error.hpp"
#include "headprobe/head_eval.hpp"
#include "headprobe/matrix.hpp"

namespace headprobe {

/// Class-wise response statistics.
///   Mean  - average softmax probability per class
///   L2    - L2 norm of each probability column
///   Ratio - share of probes predicted as each class
///   Max   - largest raw logit per class (works on logits, not probabilities)
enum class IndicatorKind { Mean, L2, Ratio, Max };

inline std::string_view to_string(IndicatorKind kind) {
  switch (kind) {
    case IndicatorKind::Mean: return "mean";
    case IndicatorKind::L2: return "l2";
    case IndicatorKind::Ratio: return "ratio";
    case IndicatorKind::Max: return "max";
  }
  return "mean";
}

inline std::optional<IndicatorKind> indicator_from_string(std::string_view name) {
  if (name == "mean") return IndicatorKind::Mean;
  if (name == "l2") return IndicatorKind::L2;
  if (name == "ratio") return IndicatorKind::Ratio;
  if (name == "max") return IndicatorKind::Max;
  return std::nullopt;
}

/// Mean for most architectures, L2 for PreactResNet18-style heads.
inline IndicatorKind default_indicator_for(std::string_view arch_tag) {
  std::string lowered(arch_tag);
  std::transform(lowered.begin(), lowered.end(), lowered.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return lowered == "preactresnet18" ? IndicatorKind::L2 : IndicatorKind::Mean;
}

struct IndicatorVector {
  IndicatorKind kind = IndicatorKind::Mean;
  Vector values;
  std::size_t probe_count = 0;

  double max_value() const { return *std::max_element(values.begin(), values.end()); }
  std::size_t argmax() const { return headprobe::argmax(values); }
};

namespace detail {

// Exact sum of non-negative doubles, so the result cannot depend on the
// order of the terms. Every double is an integer multiple of 2^-1074; terms
// are added as such integers into a wide fixed-point register and rounded to
// double once at the end.
class ExactSum {
 public:
  void add(double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    const auto exponent = static_cast<unsigned>(bits >> 52);
    std::uint64_t mantissa = bits & ((std::uint64_t{1} << 52) - 1);
    if (mantissa == 0 && exponent == 0) return;
    unsigned shift = 0;
    if (exponent != 0) {
      mantissa |= std::uint64_t{1} << 52;
      shift = exponent - 1;
    }
    const unsigned word = shift / 64, bit = shift % 64;
    add_at(word, mantissa << bit);
    if (bit > 11) add_at(word + 1, mantissa >> (64 - bit));
  }

  double value() const {
    double out = 0.0;
    for (std::size_t i = kWords; i-- > 0;)
      if (words_[i] != 0) out += std::ldexp(static_cast<double>(words_[i]), static_cast<int>(64 * i) - 1074);
    return out;
  }

 private:
  // 2^-1074 up to 2^(64 * kWords - 1074): room for sums far beyond 2^64
  static constexpr std::size_t kWords = 19;

  void add_at(std::size_t i, std::uint64_t x) {
    for (; x != 0 && i < kWords; ++i) {
      words_[i] += x;
      x = words_[i] < x ? 1 : 0;
    }
  }

  std::array<std::uint64_t, kWords> words_{};
};

}  // namespace detail

inline IndicatorVector r_mean(const ResponseSet& resp) {
  const std::size_t n = resp.count();
  std::vector<detail::ExactSum> sums(resp.num_classes());
  for (std::size_t row = 0; row < n; ++row) {
    auto p = resp.probabilities.row(row);
    for (std::size_t i = 0; i < p.size(); ++i) sums[i].add(p[i]);
  }
  IndicatorVector r{IndicatorKind::Mean, Vector(resp.num_classes(), 0.0), n};
  for (std::size_t i = 0; i < sums.size(); ++i) r.values[i] = sums[i].value() / static_cast<double>(n);
  return r;
}

inline IndicatorVector r_l2(const ResponseSet& resp) {
  std::vector<detail::ExactSum> sums(resp.num_classes());
  for (std::size_t row = 0; row < resp.count(); ++row) {
    auto p = resp.probabilities.row(row);
    for (std::size_t i = 0; i < p.size(); ++i) sums[i].add(p[i] * p[i]);
  }
  IndicatorVector r{IndicatorKind::L2, Vector(resp.num_classes(), 0.0), resp.count()};
  for (std::size_t i = 0; i < sums.size(); ++i) r.values[i] = std::sqrt(sums[i].value());
  return r;
}

inline IndicatorVector r_ratio(const ResponseSet& resp) {
  const std::size_t n = resp.count();
  std::vector<std::size_t> hits(resp.num_classes(), 0);
  for (std::size_t label : resp.labels) ++hits[label];
  IndicatorVector r{IndicatorKind::Ratio, Vector(resp.num_classes(), 0.0), n};
  for (std::size_t i = 0; i < hits.size(); ++i)
    r.values[i] = static_cast<double>(hits[i]) / static_cast<double>(n);
  return r;
}

inline IndicatorVector r_max(const ResponseSet& resp) {
  IndicatorVector r{IndicatorKind::Max, Vector(resp.num_classes(), -INFINITY), resp.count()};
  for (std::size_t row = 0; row < resp.count(); ++row) {
    auto z = resp.logits.row(row);
    for (std::size_t i = 0; i < z.size(); ++i) r.values[i] = std::max(r.values[i], z[i]);
  }
  return r;
}

inline IndicatorVector compute_indicator(IndicatorKind kind, const ResponseSet& resp) {
  if (resp.count() == 0) throw Error(ErrorCode::EmptyBatch, "no responses");
  switch (kind) {
    case IndicatorKind::Mean: return r_mean(resp);
    case IndicatorKind::L2: return r_l2(resp);
    case IndicatorKind::Ratio: return r_ratio(resp);
    case IndicatorKind::Max: return r_max(resp);
  }
  return r_mean(resp);
}

}  // namespace headprobe
