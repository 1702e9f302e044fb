#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "headprobe/error.hpp"
#include "headprobe/head_eval.hpp"
#include "headprobe/headspec.hpp"
#include "headprobe/indicators.hpp"
#include "headprobe/json_io.hpp"
#include "headprobe/probe.hpp"

namespace headprobe {

enum class DetectionMode { Targeted, Sim };
enum class SimDirection { FlagAbove, FlagBelow };
enum class Decision { Clean, Backdoored };

/// Probe settings as written in a detector config. An empty distribution
/// means "auto": resolved per head from its latent range at detect time.
struct ProbePlan {
  std::optional<Distribution> distribution;
  std::size_t count = kDefaultProbeCount;
  std::uint64_t seed = 0;
};

struct DetectorConfig {
  IndicatorKind indicator = IndicatorKind::Mean;
  double tau = 0.0;
  ProbePlan probe;
  DetectionMode mode = DetectionMode::Targeted;
  std::optional<Vector> clean_mean;
  std::optional<double> tau_sim;
  SimDirection sim_direction = SimDirection::FlagAbove;
  double fpr_cap = 0.05;
};

struct Verdict {
  std::string model_id;
  Decision decision = Decision::Clean;
  std::optional<std::size_t> target;
  double score = 0.0;
  IndicatorVector indicator;
  double elapsed_ms = 0.0;
};

inline void validate(const DetectorConfig& cfg) {
  if (cfg.probe.count == 0) throw Error(ErrorCode::ConfigInvalid, "probe count must be >= 1");
  if (cfg.probe.distribution) validate(ProbeConfig{*cfg.probe.distribution, cfg.probe.count, 0});
  if (!(cfg.fpr_cap >= 0.0 && cfg.fpr_cap < 1.0))
    throw Error(ErrorCode::ConfigInvalid, "fpr_cap must lie in [0, 1)");
  if (!std::isfinite(cfg.tau)) throw Error(ErrorCode::ConfigInvalid, "tau must be finite");
  if (cfg.mode == DetectionMode::Sim) {
    if (!cfg.clean_mean || cfg.clean_mean->empty())
      throw Error(ErrorCode::ConfigInvalid, "sim mode requires clean_mean");
    if (!cfg.tau_sim || !std::isfinite(*cfg.tau_sim))
      throw Error(ErrorCode::ConfigInvalid, "sim mode requires tau_sim");
  }
}

inline ProbeConfig resolve_probe_config(const HeadSpec& h, const ProbePlan& plan) {
  return {plan.distribution.value_or(choose_distribution(h.latent_range, h.head_kind)), plan.count,
          plan.seed};
}

/// Probes the head and reduces its responses to the configured indicator.
inline IndicatorVector probe_indicator(const HeadSpec& h, const DetectorConfig& cfg) {
  return compute_indicator(cfg.indicator, forward_probes(h, resolve_probe_config(h, cfg.probe)));
}

/// Cosine similarity; throws ZeroVector if either side has zero norm.
inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw Error(ErrorCode::LengthMismatch, "cosine operands differ in length");
  const double na2 = squared_norm(a);
  const double nb2 = squared_norm(b);
  if (na2 == 0.0 || nb2 == 0.0) throw Error(ErrorCode::ZeroVector, "cosine of a zero vector");
  // sqrt(s * s) == s exactly, so cosine(r, r) is exactly 1
  double denom = std::sqrt(na2 * nb2);
  if (!std::isfinite(denom) || denom == 0.0) denom = std::sqrt(na2) * std::sqrt(nb2);
  return dot(a, b) / denom;
}

namespace detail {

using Clock = std::chrono::steady_clock;

inline double elapsed_ms(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

inline void check_head_config(const HeadSpec& h, const DetectorConfig& cfg) {
  validate(cfg);
  if (cfg.clean_mean && cfg.clean_mean->size() != h.num_classes)
    throw Error(ErrorCode::ConfigInvalid, "clean_mean length != num_classes");
}

}  // namespace detail

/// Targeted detection: flag when the largest class indicator exceeds tau
/// (strictly); the arg-max class is reported as the inferred target.
inline Verdict detect(const HeadSpec& h, const DetectorConfig& cfg) {
  const auto start = detail::Clock::now();
  if (cfg.mode != DetectionMode::Targeted)
    throw Error(ErrorCode::ConfigInvalid, "detect() requires targeted mode");
  detail::check_head_config(h, cfg);
  Verdict v;
  v.model_id = h.model_id;
  v.indicator = probe_indicator(h, cfg);
  v.score = v.indicator.max_value();
  if (v.score > cfg.tau) {
    v.decision = Decision::Backdoored;
    v.target = v.indicator.argmax();
  }
  v.elapsed_ms = detail::elapsed_ms(start);
  return v;
}

inline bool sim_flags(double cosine, const DetectorConfig& cfg) {
  return cfg.sim_direction == SimDirection::FlagAbove ? cosine > *cfg.tau_sim : cosine < *cfg.tau_sim;
}

/// Profile-similarity detection: cosine between the model's indicator and
/// the clean mean profile, compared against tau_sim. Never names a target.
inline Verdict sim_detect(const HeadSpec& h, const DetectorConfig& cfg) {
  const auto start = detail::Clock::now();
  if (cfg.mode != DetectionMode::Sim) throw Error(ErrorCode::ConfigInvalid, "sim_detect() requires sim mode");
  detail::check_head_config(h, cfg);
  Verdict v;
  v.model_id = h.model_id;
  v.indicator = probe_indicator(h, cfg);
  v.score = cosine_similarity(v.indicator.values, *cfg.clean_mean);
  v.decision = sim_flags(v.score, cfg) ? Decision::Backdoored : Decision::Clean;
  v.elapsed_ms = detail::elapsed_ms(start);
  return v;
}

inline Verdict run_detection(const HeadSpec& h, const DetectorConfig& cfg) {
  return cfg.mode == DetectionMode::Sim ? sim_detect(h, cfg) : detect(h, cfg);
}

/// Score oriented so that larger always means "more suspicious".
inline double suspicion_score(const Verdict& v, const DetectorConfig& cfg) {
  if (cfg.mode == DetectionMode::Sim && cfg.sim_direction == SimDirection::FlagBelow) return -v.score;
  return v.score;
}

inline Vector mean_clean_profile(const std::vector<IndicatorVector>& indicators) {
  if (indicators.empty()) throw Error(ErrorCode::EmptyConfigSet, "no clean indicators");
  const auto& first = indicators.front();
  Vector mean(first.values.size(), 0.0);
  for (const auto& r : indicators) {
    if (r.kind != first.kind) throw Error(ErrorCode::KindMismatch, "indicator kinds differ");
    if (r.values.size() != mean.size())
      throw Error(ErrorCode::KindMismatch, "indicator lengths differ");
    for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += r.values[i];
  }
  for (double& m : mean) m /= static_cast<double>(indicators.size());
  return mean;
}

struct Calibration {
  double tau = 0.0;
  double tpr = 0.0;
  double fpr = 0.0;
};

/// Fraction of `scores` strictly above `tau`; `sorted` must be ascending.
inline double rate_above(const std::vector<double>& sorted, double tau) {
  const auto first_above = std::upper_bound(sorted.begin(), sorted.end(), tau);
  return static_cast<double>(sorted.end() - first_above) / static_cast<double>(sorted.size());
}

/// Threshold that maximizes TPR subject to FPR <= fpr_cap.
///
/// Candidates are the midpoints between adjacent distinct pooled scores plus
/// one sentinel below the minimum and one above the maximum. Among candidates
/// with the best TPR the lowest FPR wins; (TPR, FPR) pins down a single gap
/// in the pooled order, hence a single candidate.
inline Calibration calibrate(std::vector<double> clean, std::vector<double> backdoor, double fpr_cap) {
  if (clean.empty() || backdoor.empty())
    throw Error(ErrorCode::EmptyConfigSet, "calibration needs clean and backdoored scores");
  if (!(fpr_cap >= 0.0 && fpr_cap < 1.0)) throw Error(ErrorCode::ConfigInvalid, "fpr_cap must lie in [0, 1)");
  auto finite = [](double s) { return std::isfinite(s); };
  if (!std::all_of(clean.begin(), clean.end(), finite) || !std::all_of(backdoor.begin(), backdoor.end(), finite))
    throw Error(ErrorCode::ConfigInvalid, "calibration scores must be finite");

  std::sort(clean.begin(), clean.end());
  std::sort(backdoor.begin(), backdoor.end());
  std::vector<double> pooled(clean);
  pooled.insert(pooled.end(), backdoor.begin(), backdoor.end());
  std::sort(pooled.begin(), pooled.end());
  pooled.erase(std::unique(pooled.begin(), pooled.end()), pooled.end());

  std::vector<double> candidates;
  candidates.reserve(pooled.size() + 1);
  candidates.push_back(pooled.front() - 1.0);
  for (std::size_t i = 0; i + 1 < pooled.size(); ++i)
    candidates.push_back(pooled[i] + (pooled[i + 1] - pooled[i]) / 2.0);
  double above = pooled.back() + 1.0;
  if (!(above > pooled.back())) above = std::nextafter(pooled.back(), INFINITY);
  candidates.push_back(above);

  std::optional<Calibration> best;
  for (double tau : candidates) {
    const Calibration c{tau, rate_above(backdoor, tau), rate_above(clean, tau)};
    if (c.fpr > fpr_cap) continue;
    if (!best || c.tpr > best->tpr || (c.tpr == best->tpr && c.fpr < best->fpr)) best = c;
  }
  return *best;  // the top sentinel always has FPR 0
}

// --- JSON ------------------------------------------------------------------

inline Json to_json(const IndicatorVector& r) {
  return {{"kind", std::string(to_string(r.kind))}, {"values", r.values}};
}

inline Json to_json(const Verdict& v) {
  Json j;
  j["model_id"] = v.model_id;
  j["decision"] = v.decision == Decision::Backdoored ? "backdoored" : "clean";
  j["target"] = v.target ? Json(*v.target) : Json(nullptr);
  j["score"] = v.score;
  j["indicator"] = to_json(v.indicator);
  j["elapsed_ms"] = v.elapsed_ms;
  return j;
}

inline Json to_json(const DetectorConfig& cfg) {
  Json probe;
  if (!cfg.probe.distribution) {
    probe["dist"] = "auto";
  } else if (cfg.probe.distribution->kind == Distribution::Kind::Uniform01) {
    probe["dist"] = "uniform01";
  } else {
    probe["dist"] = "gaussian";
    probe["sigma"] = cfg.probe.distribution->sigma;
  }
  probe["count"] = cfg.probe.count;
  probe["seed"] = cfg.probe.seed;

  Json j;
  j["indicator"] = std::string(to_string(cfg.indicator));
  j["tau"] = cfg.tau;
  j["probe"] = std::move(probe);
  j["mode"] = cfg.mode == DetectionMode::Sim ? "sim" : "targeted";
  if (cfg.clean_mean) j["clean_mean"] = *cfg.clean_mean;
  if (cfg.tau_sim) j["tau_sim"] = *cfg.tau_sim;
  j["sim_direction"] = cfg.sim_direction == SimDirection::FlagBelow ? "below" : "above";
  j["fpr_cap"] = cfg.fpr_cap;
  return j;
}

inline DetectorConfig detector_config_from_json(const Json& j) {
  if (!j.is_object()) throw Error(ErrorCode::MalformedDocument, "detector config must be an object");
  DetectorConfig cfg;
  try {
    if (j.contains("indicator")) {
      auto kind = indicator_from_string(j.at("indicator").get<std::string>());
      if (!kind) throw Error(ErrorCode::ConfigInvalid, "unknown indicator " + j.at("indicator").dump());
      cfg.indicator = *kind;
    }
    if (j.contains("tau")) cfg.tau = j.at("tau").get<double>();
    if (j.contains("probe")) {
      const auto& p = j.at("probe");
      const std::string dist = p.value("dist", std::string("auto"));
      if (dist == "uniform01") {
        cfg.probe.distribution = Distribution::uniform01();
      } else if (dist == "gaussian") {
        if (!p.contains("sigma")) throw Error(ErrorCode::ConfigInvalid, "gaussian probes need sigma");
        cfg.probe.distribution = Distribution::gaussian(p.at("sigma").get<double>());
      } else if (dist != "auto") {
        throw Error(ErrorCode::ConfigInvalid, "unknown probe dist \"" + dist + "\"");
      }
      if (p.contains("count")) cfg.probe.count = p.at("count").get<std::size_t>();
      if (p.contains("seed")) cfg.probe.seed = p.at("seed").get<std::uint64_t>();
    }
    const std::string mode = j.value("mode", std::string("targeted"));
    if (mode == "sim") {
      cfg.mode = DetectionMode::Sim;
    } else if (mode != "targeted") {
      throw Error(ErrorCode::ConfigInvalid, "unknown mode \"" + mode + "\"");
    }
    if (j.contains("clean_mean") && !j.at("clean_mean").is_null())
      cfg.clean_mean = j.at("clean_mean").get<Vector>();
    if (j.contains("tau_sim") && !j.at("tau_sim").is_null()) cfg.tau_sim = j.at("tau_sim").get<double>();
    const std::string direction = j.value("sim_direction", std::string("above"));
    if (direction == "below") {
      cfg.sim_direction = SimDirection::FlagBelow;
    } else if (direction != "above") {
      throw Error(ErrorCode::ConfigInvalid, "unknown sim_direction \"" + direction + "\"");
    }
    if (j.contains("fpr_cap")) cfg.fpr_cap = j.at("fpr_cap").get<double>();
  } catch (const Json::exception& e) {
    throw Error(ErrorCode::MalformedDocument, e.what());
  }
  validate(cfg);
  return cfg;
}

inline DetectorConfig parse_detector_config(std::string_view text) {
  return detector_config_from_json(parse_json_text(text));
}

}  // namespace headprobe
