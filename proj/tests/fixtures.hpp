#pragma once

#include <atomic>
#include <chrono>
#include <filesystem>
#include <string>
#include <vector>

#include "headprobe/headprobe.hpp"

namespace fixtures {

using namespace headprobe;

/// Directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    const auto stamp = std::chrono::steady_clock::now().time_since_epoch().count();
    path_ = std::filesystem::temp_directory_path() /
            ("headprobe-" + tag + "-" + std::to_string(stamp) + "-" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline HeadSpec fc_head(const std::vector<Vector>& weight, const Vector& bias,
                        Activation act = Activation::Identity) {
  HeadSpec h;
  h.model_id = "fixture";
  h.head_kind = HeadKind::FullyConnected;
  h.input_shape = InputShape::features(weight.front().size());
  h.num_classes = weight.size();
  h.layers.push_back({Matrix::from_rows(weight), bias, act});
  h.latent_range = LatentRangeInfo::from_bounds(0.0, 1.0, 32);
  return h;
}

inline synth::SynthClean clean_head(std::uint64_t seed, std::size_t dim = 512, std::size_t classes = 10) {
  synth::CleanHeadParams p;
  p.dim = dim;
  p.classes = classes;
  p.seed = seed;
  p.model_id = "clean-" + std::to_string(seed);
  return synth::gen_clean_head(p);
}

inline synth::SynthBackdoored inflated_head(const synth::SynthClean& clean, double inflate, std::size_t target,
                                            std::uint64_t seed) {
  synth::SynthParams p;
  p.mechanism = synth::Mechanism::WeightInflation;
  p.delta_orthogonal = false;
  p.inflate_w = inflate;
  p.target = target;
  p.delta_norm = 1.5;
  p.seed = seed;
  return synth::implant(clean, p);
}

/// Random response set with logits in [-scale, scale].
inline ResponseSet random_responses(Rng& rng, std::size_t n, std::size_t k, double scale = 5.0) {
  ResponseSet r{Matrix(n, k), Matrix(n, k), std::vector<std::size_t>(n)};
  for (double& z : r.logits.data()) z = rng.uniform(-scale, scale);
  for (std::size_t i = 0; i < n; ++i) {
    softmax_row(r.logits.row(i), r.probabilities.row(i));
    r.labels[i] = argmax(r.probabilities.row(i));
  }
  return r;
}

inline ResponseSet permute_rows(const ResponseSet& r, const std::vector<std::size_t>& order) {
  ResponseSet out{Matrix(r.count(), r.num_classes()), Matrix(r.count(), r.num_classes()),
                  std::vector<std::size_t>(r.count())};
  for (std::size_t i = 0; i < order.size(); ++i) {
    std::copy(r.logits.row(order[i]).begin(), r.logits.row(order[i]).end(), out.logits.row(i).begin());
    std::copy(r.probabilities.row(order[i]).begin(), r.probabilities.row(order[i]).end(),
              out.probabilities.row(i).begin());
    out.labels[i] = r.labels[order[i]];
  }
  return out;
}

inline std::vector<std::size_t> shuffled_indices(Rng& rng, std::size_t n) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
  return idx;
}

inline std::vector<std::vector<double>> to_rows(const Matrix& m) {
  std::vector<std::vector<double>> rows;
  for (std::size_t r = 0; r < m.rows(); ++r) rows.emplace_back(m.row(r).begin(), m.row(r).end());
  return rows;
}

/// Targeted config with auto probes.
inline DetectorConfig targeted_config(double tau, std::uint64_t seed = 0,
                                      IndicatorKind kind = IndicatorKind::Mean) {
  DetectorConfig cfg;
  cfg.indicator = kind;
  cfg.tau = tau;
  cfg.probe.seed = seed;
  return cfg;
}

}  // namespace fixtures

#define EXPECT_ERROR_CODE(stmt, expected)                                               \
  do {                                                                                  \
    try {                                                                               \
      stmt;                                                                             \
      ADD_FAILURE() << "expected " << ::headprobe::to_string(expected) << ", no throw"; \
    } catch (const ::headprobe::Error& e_) {                                            \
      EXPECT_EQ(e_.code(), expected) << e_.what();                                      \
    }                                                                                   \
  } while (0)
