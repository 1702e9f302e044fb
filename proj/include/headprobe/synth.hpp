#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "headprobe/error.hpp"
#include "headprobe/head_eval.hpp"
#include "headprobe/headspec.hpp"
#include "headprobe/json_io.hpp"
#include "headprobe/manifest.hpp"
#include "headprobe/matrix.hpp"
#include "headprobe/rng.hpp"

// Synthetic linear heads with known ground truth.
//
// A clean head has one unit prototype per class and weight rows
// w_i = scale * mu_i, b_i = 0. A backdoored head is derived from a clean one
// by making the target logit dominate on poisoned latents h + delta by at
// least a margin, through one or more of: inflating ||w_t||, adding a
// component along delta to w_t, or raising b_t. Every backdoored head is
// checked against its own latent fixtures and ships a certificate.

namespace headprobe::synth {

enum class Mechanism { WeightInflation, DeltaAlignment, BiasShift, Mixed };

inline std::string to_string(Mechanism m) {
  switch (m) {
    case Mechanism::WeightInflation: return "inflate";
    case Mechanism::DeltaAlignment: return "delta";
    case Mechanism::BiasShift: return "bias";
    case Mechanism::Mixed: return "mixed";
  }
  return "mixed";
}

inline std::optional<Mechanism> mechanism_from_string(std::string_view name) {
  if (name == "inflate") return Mechanism::WeightInflation;
  if (name == "delta") return Mechanism::DeltaAlignment;
  if (name == "bias") return Mechanism::BiasShift;
  if (name == "mixed") return Mechanism::Mixed;
  return std::nullopt;
}

inline constexpr double kMaxPrototypeOverlap = 0.2;
inline constexpr double kMinCleanFixtureAccuracy = 0.99;
inline constexpr double kMinBackdooredCleanAccuracy = 0.98;

struct CleanHeadParams {
  std::size_t dim = 512;
  std::size_t classes = 10;
  double prototype_scale = 4.0;
  double noise_scale = 0.1;  // expected L2 norm of the fixture noise
  std::size_t fixtures_per_class = 20;
  // Shift fixtures by a constant so the smallest latent is exactly 0, like a
  // ReLU backbone. Centered prototypes make the logits blind to the shift.
  bool nonnegative_latents = true;
  std::uint64_t seed = 0;
  std::string model_id = "synthetic";
};

struct SynthClean {
  HeadSpec head;
  std::vector<Vector> prototypes;
  bool centered = false;  // prototypes orthogonal to the all-ones vector
  Matrix fixtures;
  std::vector<std::size_t> fixture_labels;
  double latent_offset = 0.0;
  double clean_accuracy = 0.0;
};

struct SynthParams {
  std::size_t target = 0;
  double delta_norm = 1.0;
  bool delta_orthogonal = true;
  double inflate_w = 1.0;
  double bias_shift = 0.0;
  double margin = 1.0;
  Mechanism mechanism = Mechanism::DeltaAlignment;
  std::uint64_t seed = 0;
};

struct SynthCertificate {
  double clean_accuracy = 0.0;
  double attack_success = 0.0;
  double min_poison_margin = 0.0;
};

struct SynthBackdoored {
  HeadSpec head;
  SynthCertificate certificate;
  std::vector<Vector> deltas;         // trigger perturbation per source class
  std::vector<std::size_t> targets;   // target per source class
  double alignment = 0.0;             // coefficient added along delta (all-to-one)
};

namespace detail {

inline Vector gaussian_vector(Rng& rng, std::size_t n) {
  Vector v(n);
  for (double& x : v) x = rng.normal();
  return v;
}

inline void scale_to_unit(Vector& v) {
  const double n = std::sqrt(squared_norm(v));
  for (double& x : v) x /= n;
}

inline void remove_mean(Vector& v) {
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  for (double& x : v) x -= mean;
}

// Removes the components of v along an orthonormal basis (two passes).
inline void project_out(Vector& v, const std::vector<Vector>& basis) {
  for (int pass = 0; pass < 2; ++pass)
    for (const auto& b : basis) {
      const double c = dot(v, b);
      for (std::size_t i = 0; i < v.size(); ++i) v[i] -= c * b[i];
    }
}

inline std::vector<Vector> orthonormal_basis(const std::vector<Vector>& vectors) {
  std::vector<Vector> basis;
  for (Vector v : vectors) {
    project_out(v, basis);
    if (std::sqrt(squared_norm(v)) < 1e-9) continue;
    scale_to_unit(v);
    basis.push_back(std::move(v));
  }
  return basis;
}

// Basis of every direction a trigger perturbation must avoid: the prototypes
// and, for centered heads, the all-ones direction.
inline std::vector<Vector> protected_basis(const SynthClean& clean) {
  auto spans = clean.prototypes;
  if (clean.centered) spans.emplace_back(clean.head.input_shape.channels, 1.0);
  return orthonormal_basis(spans);
}

inline Vector random_orthogonal_unit(Rng& rng, const std::vector<Vector>& basis, std::size_t dim) {
  if (basis.size() >= dim) throw Error(ErrorCode::DimensionTooSmall, "no room for an orthogonal trigger");
  for (int attempt = 0; attempt < 16; ++attempt) {
    Vector v = gaussian_vector(rng, dim);
    project_out(v, basis);
    if (std::sqrt(squared_norm(v)) > 1e-6) {
      scale_to_unit(v);
      return v;
    }
  }
  throw Error(ErrorCode::RetriesExhausted, "orthogonal trigger direction");
}

inline double logit(const AffineLayer& layer, std::size_t cls, std::span<const double> x) {
  return dot(layer.weight.row(cls), x) + layer.bias[cls];
}

// Smallest c >= 0 such that adding c * direction to w_target gives every
// poisoned latent (row + delta) a margin of at least `margin`. Margins are
// affine in c, so each constraint is solved in closed form.
inline double solve_alignment(const AffineLayer& layer, const Matrix& fixtures,
                              const std::vector<std::size_t>& rows, const Vector& delta,
                              const Vector& direction, std::size_t target, double margin) {
  double c = 0.0;
  Vector poisoned(delta.size());
  for (std::size_t r : rows) {
    auto h = fixtures.row(r);
    for (std::size_t d = 0; d < poisoned.size(); ++d) poisoned[d] = h[d] + delta[d];
    const double gain = dot(direction, poisoned);
    const double zt = logit(layer, target, poisoned);
    for (std::size_t j = 0; j < layer.out_width(); ++j) {
      if (j == target) continue;
      const double shortfall = margin - (zt - logit(layer, j, poisoned));
      if (shortfall <= 0.0) continue;
      if (gain <= 0.0)
        throw Error(ErrorCode::MarginUnsatisfiable, "trigger direction cannot raise the target margin");
      c = std::max(c, shortfall / gain);
    }
  }
  return c > 0.0 ? c + 1e-9 * (1.0 + c) : 0.0;
}

inline void add_scaled_row(AffineLayer& layer, std::size_t row, const Vector& v, double scale) {
  auto w = layer.weight.row(row);
  for (std::size_t d = 0; d < w.size(); ++d) w[d] += scale * v[d];
}

inline std::vector<std::size_t> all_rows(const Matrix& m) {
  std::vector<std::size_t> rows(m.rows());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  return rows;
}

inline void require_single_layer(const HeadSpec& h) {
  if (h.layers.size() != 1 || h.head_kind != HeadKind::FullyConnected)
    throw Error(ErrorCode::ConfigInvalid, "synthetic backdoors are implanted into single-layer fc heads");
}

}  // namespace detail

/// Fraction of fixtures classified correctly.
inline double fixture_accuracy(const HeadSpec& h, const Matrix& fixtures,
                               const std::vector<std::size_t>& labels) {
  const auto resp = forward_latents(h, fixtures);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += resp.labels[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

/// Clean accuracy, attack success and the smallest target margin over
/// poisoned fixtures (fixture + deltas[class] should land on targets[class]).
inline SynthCertificate certify(const HeadSpec& h, const SynthClean& clean, const std::vector<Vector>& deltas,
                                const std::vector<std::size_t>& targets) {
  SynthCertificate cert;
  cert.clean_accuracy = fixture_accuracy(h, clean.fixtures, clean.fixture_labels);

  Matrix poisoned = clean.fixtures;
  for (std::size_t r = 0; r < poisoned.rows(); ++r) {
    const auto& delta = deltas[clean.fixture_labels[r]];
    auto row = poisoned.row(r);
    for (std::size_t d = 0; d < row.size(); ++d) row[d] += delta[d];
  }
  const auto resp = forward_latents(h, poisoned);
  std::size_t hits = 0;
  cert.min_poison_margin = INFINITY;
  for (std::size_t r = 0; r < poisoned.rows(); ++r) {
    const std::size_t t = targets[clean.fixture_labels[r]];
    hits += resp.labels[r] == t;
    auto z = resp.logits.row(r);
    double runner_up = -INFINITY;
    for (std::size_t j = 0; j < z.size(); ++j)
      if (j != t) runner_up = std::max(runner_up, z[j]);
    cert.min_poison_margin = std::min(cert.min_poison_margin, z[t] - runner_up);
  }
  cert.attack_success = static_cast<double>(hits) / static_cast<double>(poisoned.rows());
  return cert;
}

inline SynthClean gen_clean_head(const CleanHeadParams& p) {
  if (p.classes == 0 || p.dim == 0) throw Error(ErrorCode::ConfigInvalid, "dim and classes must be positive");
  if (p.classes > p.dim) throw Error(ErrorCode::DimensionTooSmall, "classes > dim");
  if (p.fixtures_per_class == 0) throw Error(ErrorCode::ConfigInvalid, "fixtures_per_class must be >= 1");

  constexpr int kAttempts = 8;
  for (int attempt = 0; attempt < kAttempts; ++attempt) {
    Rng rng(mix_seed(p.seed, static_cast<std::uint64_t>(attempt)));
    SynthClean out;
    out.centered = p.dim > p.classes;

    bool placed = true;
    for (std::size_t i = 0; i < p.classes && placed; ++i) {
      placed = false;
      for (int draw = 0; draw < 1000 && !placed; ++draw) {
        Vector mu = detail::gaussian_vector(rng, p.dim);
        if (out.centered) detail::remove_mean(mu);
        if (std::sqrt(squared_norm(mu)) < 1e-12) continue;
        detail::scale_to_unit(mu);
        placed = std::all_of(out.prototypes.begin(), out.prototypes.end(), [&](const Vector& other) {
          return std::fabs(dot(mu, other)) <= kMaxPrototypeOverlap;
        });
        if (placed) out.prototypes.push_back(std::move(mu));
      }
    }
    if (!placed) continue;

    const double noise_sigma = p.noise_scale / std::sqrt(static_cast<double>(p.dim));
    out.fixtures = Matrix(p.classes * p.fixtures_per_class, p.dim);
    for (std::size_t i = 0; i < p.classes; ++i)
      for (std::size_t m = 0; m < p.fixtures_per_class; ++m) {
        auto row = out.fixtures.row(i * p.fixtures_per_class + m);
        for (std::size_t d = 0; d < p.dim; ++d) row[d] = out.prototypes[i][d] + rng.normal(noise_sigma);
        out.fixture_labels.push_back(i);
      }
    if (p.nonnegative_latents && out.centered) {
      const double lowest = *std::min_element(out.fixtures.data().begin(), out.fixtures.data().end());
      out.latent_offset = std::max(0.0, -lowest);
      for (double& v : out.fixtures.data()) v += out.latent_offset;
    }

    AffineLayer layer{Matrix(p.classes, p.dim), Vector(p.classes, 0.0), Activation::Identity};
    for (std::size_t i = 0; i < p.classes; ++i)
      for (std::size_t d = 0; d < p.dim; ++d) layer.weight(i, d) = p.prototype_scale * out.prototypes[i][d];

    out.head.model_id = p.model_id;
    out.head.head_kind = HeadKind::FullyConnected;
    out.head.input_shape = InputShape::features(p.dim);
    out.head.num_classes = p.classes;
    out.head.layers.push_back(std::move(layer));
    out.head.latent_range = estimate_latent_range(out.fixtures);
    out.head.arch_tag = "synthetic-linear";

    out.clean_accuracy = fixture_accuracy(out.head, out.fixtures, out.fixture_labels);
    if (out.clean_accuracy >= kMinCleanFixtureAccuracy) return out;
  }
  throw Error(ErrorCode::RetriesExhausted, "could not build a clean head meeting the accuracy bound");
}

/// Applies the mechanism without enforcing the certificate bounds.
inline SynthBackdoored implant(const SynthClean& clean, const SynthParams& p) {
  detail::require_single_layer(clean.head);
  const std::size_t classes = clean.head.num_classes;
  const std::size_t dim = clean.head.input_shape.channels;
  if (classes < 2) throw Error(ErrorCode::ConfigInvalid, "a backdoor needs at least two classes");
  if (p.target >= classes) throw Error(ErrorCode::ConfigInvalid, "target out of range");
  if (!(p.margin > 0.0)) throw Error(ErrorCode::ConfigInvalid, "margin must be > 0");
  if (!(p.delta_norm >= 0.0) || !(p.inflate_w > 0.0))
    throw Error(ErrorCode::ConfigInvalid, "delta_norm must be >= 0 and inflate_w > 0");

  Rng rng(p.seed);
  const auto basis = detail::protected_basis(clean);
  const Vector u = detail::random_orthogonal_unit(rng, basis, dim);
  Vector direction = u;
  if (!p.delta_orthogonal) {
    // 45 degrees between the trigger and the target prototype
    const auto& mu = clean.prototypes[p.target];
    for (std::size_t d = 0; d < dim; ++d) direction[d] = std::numbers::sqrt2 / 2.0 * (mu[d] + u[d]);
  }
  Vector delta(dim);
  for (std::size_t d = 0; d < dim; ++d) delta[d] = p.delta_norm * direction[d];

  const bool inflate = p.mechanism == Mechanism::WeightInflation || p.mechanism == Mechanism::Mixed;
  const bool shift = p.mechanism == Mechanism::BiasShift || p.mechanism == Mechanism::Mixed;
  const bool align = p.mechanism == Mechanism::DeltaAlignment || p.mechanism == Mechanism::Mixed;

  SynthBackdoored out;
  out.head = clean.head;
  auto& layer = out.head.layers.front();
  if (inflate)
    for (double& w : layer.weight.row(p.target)) w *= p.inflate_w;
  if (shift) layer.bias[p.target] += p.bias_shift;
  if (align) {
    out.alignment = detail::solve_alignment(layer, clean.fixtures, detail::all_rows(clean.fixtures), delta,
                                            direction, p.target, p.margin);
    detail::add_scaled_row(layer, p.target, direction, out.alignment);
  }
  out.deltas.assign(classes, delta);
  out.targets.assign(classes, p.target);
  out.certificate = certify(out.head, clean, out.deltas, out.targets);
  return out;
}

inline void enforce_certificate(const SynthCertificate& cert, double margin) {
  if (cert.attack_success < 1.0 || cert.clean_accuracy < kMinBackdooredCleanAccuracy ||
      cert.min_poison_margin < margin * (1.0 - 1e-9)) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "attack_success=%.4f clean_accuracy=%.4f min_margin=%.4f (need %.4f)",
                  cert.attack_success, cert.clean_accuracy, cert.min_poison_margin, margin);
    throw Error(ErrorCode::MarginUnsatisfiable, buf);
  }
}

/// All-to-one backdoor whose certificate has attack_success = 1, clean
/// accuracy >= 0.98 and every poisoned margin >= p.margin.
inline SynthBackdoored gen_backdoored_head(const SynthClean& clean, const SynthParams& p) {
  auto out = implant(clean, p);
  enforce_certificate(out.certificate, p.margin);
  return out;
}

struct AllToAllParams {
  double delta_norm = 1.5;   // per-class trigger norms are drawn from [0.5, 1.5] x this
  double bias_shift = 0.8;   // amplitude of the rotated cosine bias profile
  double margin = 1.0;
  std::uint64_t seed = 0;
};

/// All-to-all backdoor: class i with its own trigger delta_i lands on class
/// (i + 1) mod K. Triggers are mutually orthogonal and orthogonal to the
/// prototypes; w_{i+1} gains a component along delta_i, and the biases get a
/// cosine profile rotated by a random offset.
inline SynthBackdoored gen_all_to_all_head(const SynthClean& clean, const AllToAllParams& p) {
  detail::require_single_layer(clean.head);
  const std::size_t classes = clean.head.num_classes;
  const std::size_t dim = clean.head.input_shape.channels;
  if (classes < 2) throw Error(ErrorCode::ConfigInvalid, "a backdoor needs at least two classes");

  Rng rng(p.seed);
  auto basis = detail::protected_basis(clean);
  std::vector<Vector> directions;
  SynthBackdoored out;
  out.head = clean.head;
  for (std::size_t i = 0; i < classes; ++i) {
    directions.push_back(detail::random_orthogonal_unit(rng, basis, dim));
    basis.push_back(directions.back());
    const double norm = p.delta_norm * rng.uniform(0.5, 1.5);
    Vector delta(dim);
    for (std::size_t d = 0; d < dim; ++d) delta[d] = norm * directions.back()[d];
    out.deltas.push_back(std::move(delta));
    out.targets.push_back((i + 1) % classes);
  }

  auto& layer = out.head.layers.front();
  const double rotation = static_cast<double>(rng.below(classes));
  for (std::size_t j = 0; j < classes; ++j)
    layer.bias[j] += p.bias_shift * std::cos(2.0 * std::numbers::pi * (static_cast<double>(j) + rotation) /
                                             static_cast<double>(classes));

  std::vector<std::vector<std::size_t>> rows_of(classes);
  for (std::size_t r = 0; r < clean.fixture_labels.size(); ++r) rows_of[clean.fixture_labels[r]].push_back(r);
  // second pass picks up the (tiny) cross-talk between triggers
  for (int pass = 0; pass < 2; ++pass)
    for (std::size_t i = 0; i < classes; ++i) {
      const double c = detail::solve_alignment(layer, clean.fixtures, rows_of[i], out.deltas[i], directions[i],
                                               out.targets[i], p.margin);
      detail::add_scaled_row(layer, out.targets[i], directions[i], c);
    }
  out.certificate = certify(out.head, clean, out.deltas, out.targets);
  enforce_certificate(out.certificate, p.margin);
  return out;
}

/// Post-hoc norm-equalization proxy for a head-constrained adaptive attacker:
/// w_i <- (1 - beta) w_i + beta * mean(w), b_i <- (1 - gamma) b_i + gamma * mean(b)
/// on the last layer.
inline HeadSpec gen_adaptive_head(const HeadSpec& backdoored, double beta, double gamma) {
  if (!(beta >= 0.0 && beta <= 1.0) || !(gamma >= 0.0 && gamma <= 1.0))
    throw Error(ErrorCode::ConfigInvalid, "beta and gamma must lie in [0, 1]");
  HeadSpec out = backdoored;
  auto& layer = out.layers.back();
  const std::size_t rows = layer.out_width();
  const std::size_t cols = layer.in_width();
  Vector mean_w(cols, 0.0);
  double mean_b = 0.0;
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t d = 0; d < cols; ++d) mean_w[d] += layer.weight(i, d);
    mean_b += layer.bias[i];
  }
  for (double& v : mean_w) v /= static_cast<double>(rows);
  mean_b /= static_cast<double>(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t d = 0; d < cols; ++d) layer.weight(i, d) = (1.0 - beta) * layer.weight(i, d) + beta * mean_w[d];
    layer.bias[i] = (1.0 - gamma) * layer.bias[i] + gamma * mean_b;
  }
  return out;
}

/// Adaptive proxy with the certificate recomputed; attack success may drop.
inline SynthBackdoored gen_adaptive_head(const SynthBackdoored& backdoored, const SynthClean& clean, double beta,
                                         double gamma) {
  SynthBackdoored out = backdoored;
  out.head = gen_adaptive_head(backdoored.head, beta, gamma);
  out.certificate = certify(out.head, clean, out.deltas, out.targets);
  return out;
}

/// Exact two-layer rewrite of a single affine head:
/// relu([W; -W] x) then [I, -I] with the original bias. Logits are
/// bit-identical to the original head.
inline HeadSpec lift_to_two_layer(const HeadSpec& h) {
  detail::require_single_layer(h);
  const auto& src = h.layers.front();
  const std::size_t k = src.out_width();
  const std::size_t d = src.in_width();
  AffineLayer hidden{Matrix(2 * k, d), Vector(2 * k, 0.0), Activation::ReLU};
  AffineLayer output{Matrix(k, 2 * k), src.bias, Activation::Identity};
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t c = 0; c < d; ++c) {
      hidden.weight(i, c) = src.weight(i, c);
      hidden.weight(k + i, c) = -src.weight(i, c);
    }
    output.weight(i, i) = 1.0;
    output.weight(i, k + i) = -1.0;
  }
  HeadSpec out = h;
  out.layers = {std::move(hidden), std::move(output)};
  out.arch_tag = "synthetic-2layer";
  return out;
}

// --- benchmark generation -------------------------------------------------

struct BenchmarkParams {
  std::size_t clean_count = 200;
  std::size_t backdoor_count = 200;
  std::size_t dim = 512;
  std::size_t classes = 10;
  std::string mechanism = "all";  // inflate | delta | bias | mixed | all (round-robin) | all2all
  std::pair<double, double> inflate_range{1.8, 3.0};
  std::pair<double, double> bias_range{1.5, 2.5};
  double delta_norm = 1.5;
  double margin = 1.0;
  double prototype_scale = 4.0;
  double noise_scale = 0.1;
  std::size_t fixtures_per_class = 20;
  bool nonnegative_latents = true;
  std::size_t two_layer_every = 0;  // lift every n-th model to an equivalent 2-layer head; 0 = never
  double adaptive_beta = 0.0;
  double adaptive_gamma = 0.0;
  std::uint64_t seed = 0;
};

struct BenchmarkModel {
  std::string file;
  HeadSpec head;
};

struct Benchmark {
  std::vector<BenchmarkModel> models;
  Manifest manifest;
};

namespace detail {

inline std::string model_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "m%04zu", index + 1);
  return buf;
}

inline void validate(const BenchmarkParams& p) {
  if (p.clean_count + p.backdoor_count == 0) throw Error(ErrorCode::ConfigInvalid, "benchmark needs >= 1 model");
  static const std::vector<std::string> known{"inflate", "delta", "bias", "mixed", "all", "all2all"};
  if (std::find(known.begin(), known.end(), p.mechanism) == known.end())
    throw Error(ErrorCode::ConfigInvalid, "unknown mechanism \"" + p.mechanism + "\"");
  if (p.inflate_range.first > p.inflate_range.second || p.bias_range.first > p.bias_range.second)
    throw Error(ErrorCode::ConfigInvalid, "ranges must be lo:hi with lo <= hi");
}

inline Mechanism mechanism_for(const BenchmarkParams& p, std::size_t backdoor_ordinal) {
  if (p.mechanism == "all") {
    static constexpr Mechanism cycle[] = {Mechanism::WeightInflation, Mechanism::DeltaAlignment,
                                          Mechanism::BiasShift, Mechanism::Mixed};
    return cycle[backdoor_ordinal % 4];
  }
  return *mechanism_from_string(p.mechanism);
}

inline SynthParams sample_params(const BenchmarkParams& bp, Mechanism m, std::size_t target, Rng& rng) {
  SynthParams p;
  p.mechanism = m;
  p.target = target;
  p.margin = bp.margin;
  p.delta_norm = bp.delta_norm;
  p.seed = rng.next_u64();
  switch (m) {
    case Mechanism::WeightInflation:
      p.delta_orthogonal = false;
      p.inflate_w = rng.uniform(bp.inflate_range.first, bp.inflate_range.second);
      break;
    case Mechanism::BiasShift:
      p.delta_orthogonal = false;
      p.bias_shift = rng.uniform(bp.bias_range.first, bp.bias_range.second);
      break;
    case Mechanism::DeltaAlignment:
      p.delta_orthogonal = true;
      break;
    case Mechanism::Mixed:
      p.delta_orthogonal = true;
      p.inflate_w = rng.uniform(bp.inflate_range.first, bp.inflate_range.second);
      p.bias_shift = 0.5 * rng.uniform(bp.bias_range.first, bp.bias_range.second);
      break;
  }
  return p;
}

inline Json describe(const SynthParams& p, const SynthBackdoored& b) {
  Json j;
  if (p.mechanism == Mechanism::WeightInflation || p.mechanism == Mechanism::Mixed) j["inflate_w"] = p.inflate_w;
  if (p.mechanism == Mechanism::BiasShift || p.mechanism == Mechanism::Mixed) j["bias_shift"] = p.bias_shift;
  if (p.mechanism == Mechanism::DeltaAlignment || p.mechanism == Mechanism::Mixed) j["alignment"] = b.alignment;
  j["delta_norm"] = p.delta_norm;
  j["delta_orthogonal"] = p.delta_orthogonal;
  j["margin"] = p.margin;
  j["attack_success"] = b.certificate.attack_success;
  j["clean_accuracy"] = b.certificate.clean_accuracy;
  j["min_poison_margin"] = b.certificate.min_poison_margin;
  return j;
}

}  // namespace detail

/// Builds the benchmark in memory. Clean and backdoored models are shuffled
/// into one file sequence; all-to-one targets go round-robin over classes.
inline Benchmark generate_benchmark(const BenchmarkParams& bp) {
  detail::validate(bp);
  const std::size_t total = bp.clean_count + bp.backdoor_count;
  std::vector<bool> backdoored(total, false);
  std::fill(backdoored.begin(), backdoored.begin() + static_cast<std::ptrdiff_t>(bp.backdoor_count), true);
  Rng order_rng(mix_seed(bp.seed, UINT64_MAX));
  for (std::size_t i = total; i > 1; --i) {
    const std::size_t j = order_rng.below(i);
    const bool tmp = backdoored[i - 1];
    backdoored[i - 1] = backdoored[j];
    backdoored[j] = tmp;
  }

  Benchmark bench;
  std::size_t backdoor_ordinal = 0;
  for (std::size_t i = 0; i < total; ++i) {
    const std::string name = detail::model_name(i);
    const std::uint64_t model_seed = mix_seed(bp.seed, i);
    ManifestEntry entry;
    entry.file = name + ".json";
    entry.backdoored = backdoored[i];
    entry.params["model_id"] = name;
    HeadSpec head;

    constexpr int kAttempts = 6;
    for (int attempt = 0;; ++attempt) {
      Rng rng(mix_seed(model_seed, static_cast<std::uint64_t>(attempt)));
      CleanHeadParams cp{bp.dim, bp.classes, bp.prototype_scale, bp.noise_scale, bp.fixtures_per_class,
                         bp.nonnegative_latents, rng.next_u64(), name};
      try {
        auto clean = gen_clean_head(cp);
        if (!entry.backdoored) {
          entry.mechanism = "none";
          head = std::move(clean.head);
        } else if (bp.mechanism == "all2all") {
          AllToAllParams ap;
          ap.delta_norm = bp.delta_norm;
          ap.margin = bp.margin;
          ap.seed = rng.next_u64();
          auto b = gen_all_to_all_head(clean, ap);
          if (bp.adaptive_beta > 0.0 || bp.adaptive_gamma > 0.0)
            b = gen_adaptive_head(b, clean, bp.adaptive_beta, bp.adaptive_gamma);
          entry.mechanism = "all2all";
          entry.params["attack_success"] = b.certificate.attack_success;
          entry.params["clean_accuracy"] = b.certificate.clean_accuracy;
          entry.params["min_poison_margin"] = b.certificate.min_poison_margin;
          head = std::move(b.head);
        } else {
          const auto mech = detail::mechanism_for(bp, backdoor_ordinal);
          const auto sp = detail::sample_params(bp, mech, backdoor_ordinal % bp.classes, rng);
          auto b = gen_backdoored_head(clean, sp);
          if (bp.adaptive_beta > 0.0 || bp.adaptive_gamma > 0.0) {
            b = gen_adaptive_head(b, clean, bp.adaptive_beta, bp.adaptive_gamma);
            entry.params["adaptive_beta"] = bp.adaptive_beta;
            entry.params["adaptive_gamma"] = bp.adaptive_gamma;
          }
          entry.mechanism = to_string(mech);
          entry.target = sp.target;
          entry.params.update(detail::describe(sp, b));
          head = std::move(b.head);
        }
        break;
      } catch (const Error& e) {
        const bool retryable = e.code() == ErrorCode::MarginUnsatisfiable || e.code() == ErrorCode::RetriesExhausted;
        if (!retryable || attempt + 1 >= kAttempts) throw;
      }
    }
    if (entry.backdoored) ++backdoor_ordinal;
    if (bp.two_layer_every > 0 && (i + 1) % bp.two_layer_every == 0) {
      head = lift_to_two_layer(head);
      entry.params["two_layer"] = true;
    }
    bench.models.push_back({entry.file, std::move(head)});
    bench.manifest.push_back(std::move(entry));
  }
  return bench;
}

inline void write_benchmark(const Benchmark& bench, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::IoError, "cannot create " + dir.string() + ": " + ec.message());
  for (const auto& m : bench.models) save_headspec(m.head, dir / m.file);
  write_text_file(dir / kManifestFileName, dump_canonical(to_json(bench.manifest)));
}

inline Benchmark gen_benchmark(const BenchmarkParams& bp, const std::filesystem::path& dir) {
  auto bench = generate_benchmark(bp);
  write_benchmark(bench, dir);
  return bench;
}

}  // namespace headprobe::synth
