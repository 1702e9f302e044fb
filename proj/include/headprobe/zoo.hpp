#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "headprobe/detector.hpp"
#include "headprobe/error.hpp"
#include "headprobe/headspec.hpp"
#include "headprobe/json_io.hpp"
#include "headprobe/manifest.hpp"
#include "headprobe/rng.hpp"

namespace headprobe {

/// Average precision over the score-descending ranking. Items with equal
/// scores enter the ranking together as one group.
inline double average_precision(const std::vector<double>& scores, const std::vector<bool>& labels) {
  if (scores.size() != labels.size()) throw Error(ErrorCode::LengthMismatch, "scores vs labels");
  const auto positives = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), true));
  if (positives == 0) throw Error(ErrorCode::NoPositives, "average precision needs a positive");

  std::vector<std::size_t> order(scores.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  double ap = 0.0;
  double prev_recall = 0.0;
  std::size_t seen = 0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      hits += labels[order[j]];
      ++j;
    }
    seen = j;
    const double recall = static_cast<double>(hits) / static_cast<double>(positives);
    const double precision = static_cast<double>(hits) / static_cast<double>(seen);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
    i = j;
  }
  return ap;
}

struct DetectionMetrics {
  std::optional<double> tpr;
  std::optional<double> tpr_target_match;
  std::optional<double> fpr;
  std::optional<double> mtpr;  // indicator arg-max equals the true target, no threshold involved
};

inline DetectionMetrics metrics(const std::vector<Verdict>& verdicts, const std::vector<ManifestEntry>& truth) {
  if (verdicts.size() != truth.size()) throw Error(ErrorCode::LengthMismatch, "verdicts vs ground truth");
  std::size_t backdoored = 0, clean = 0, flagged_bd = 0, flagged_match = 0, flagged_clean = 0, argmax_match = 0;
  for (std::size_t i = 0; i < verdicts.size(); ++i) {
    const auto& v = verdicts[i];
    const bool flagged = v.decision == Decision::Backdoored;
    if (truth[i].backdoored) {
      ++backdoored;
      flagged_bd += flagged;
      flagged_match += flagged && v.target && truth[i].target && *v.target == *truth[i].target;
      argmax_match += truth[i].target && !v.indicator.values.empty() && v.indicator.argmax() == *truth[i].target;
    } else {
      ++clean;
      flagged_clean += flagged;
    }
  }
  auto ratio = [](std::size_t num, std::size_t den) -> std::optional<double> {
    if (den == 0) return std::nullopt;
    return static_cast<double>(num) / static_cast<double>(den);
  };
  return {ratio(flagged_bd, backdoored), ratio(flagged_match, backdoored), ratio(flagged_clean, clean),
          ratio(argmax_match, backdoored)};
}

struct ModelResult {
  std::string file;
  std::string model_id;
  std::uint64_t seed = 0;
  std::optional<Verdict> verdict;
  std::optional<std::string> error;
  std::optional<ManifestEntry> truth;
  double suspicion = 0.0;
};

struct ZooReport {
  std::vector<ModelResult> per_model;  // ordered by model_id
  DetectionMetrics rates;
  std::optional<double> average_precision;
  std::optional<double> mean_latency_ms;
  std::optional<double> p95_latency_ms;
  std::uint64_t scan_seed = 0;
  std::vector<std::pair<std::string, double>> ranking;  // most suspicious first
};

struct ScanOptions {
  std::size_t workers = 1;
  std::optional<std::uint64_t> scan_seed;  // defaults to the config's probe seed
};

/// Config with the probe seed derived for one model of a scan.
inline DetectorConfig config_for_model(DetectorConfig cfg, std::uint64_t scan_seed, std::string_view model_id) {
  cfg.probe.seed = seed_for_model(scan_seed, model_id);
  return cfg;
}

/// Head-spec files of a zoo directory in name order (the manifest is skipped).
inline std::vector<std::filesystem::path> list_head_files(const std::filesystem::path& dir) {
  std::error_code ec;
  if (!std::filesystem::is_directory(dir, ec)) throw Error(ErrorCode::IoError, dir.string() + " is not a directory");
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (!entry.is_regular_file() || entry.path().extension() != ".json") continue;
    if (entry.path().filename() == kManifestFileName) continue;
    files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  return files;
}

/// Runs fn(i) for i in [0, n) on a bounded pool of worker threads.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn&& fn) {
  workers = std::clamp<std::size_t>(workers, 1, std::max<std::size_t>(n, 1));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::jthread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) fn(i);
    });
}

inline double percentile_nearest_rank(std::vector<double> values, double q) {
  std::sort(values.begin(), values.end());
  const auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(values.size())));
  return values[std::max<std::size_t>(rank, 1) - 1];
}

/// Detects every head in `dir`. Parse and detection failures are recorded
/// per file and never abort the scan. With a manifest, the rates and AP are
/// computed over models that have both a verdict and ground truth.
inline ZooReport scan(const std::filesystem::path& dir, const DetectorConfig& cfg,
                      const std::optional<Manifest>& manifest = std::nullopt, const ScanOptions& options = {}) {
  validate(cfg);
  const auto files = list_head_files(dir);
  ZooReport report;
  report.scan_seed = options.scan_seed.value_or(cfg.probe.seed);
  report.per_model.resize(files.size());

  parallel_for(files.size(), options.workers, [&](std::size_t i) {
    auto& result = report.per_model[i];
    result.file = files[i].filename().string();
    result.model_id = files[i].stem().string();
    try {
      const HeadSpec head = load_headspec(files[i]);
      result.model_id = head.model_id;
      const auto model_cfg = config_for_model(cfg, report.scan_seed, head.model_id);
      result.seed = model_cfg.probe.seed;
      result.verdict = run_detection(head, model_cfg);
      result.suspicion = suspicion_score(*result.verdict, cfg);
    } catch (const std::exception& e) {
      result.error = e.what();
    }
  });

  if (manifest) {
    const auto truth = index_by_file(*manifest);
    for (auto& r : report.per_model)
      if (auto it = truth.find(r.file); it != truth.end()) r.truth = it->second;
  }
  std::sort(report.per_model.begin(), report.per_model.end(), [](const ModelResult& a, const ModelResult& b) {
    return a.model_id != b.model_id ? a.model_id < b.model_id : a.file < b.file;
  });

  std::vector<Verdict> verdicts;
  std::vector<ManifestEntry> truths;
  std::vector<double> scores, latencies;
  std::vector<bool> labels;
  for (const auto& r : report.per_model) {
    if (!r.verdict) continue;
    latencies.push_back(r.verdict->elapsed_ms);
    report.ranking.emplace_back(r.model_id, r.suspicion);
    if (!r.truth) continue;
    verdicts.push_back(*r.verdict);
    truths.push_back(*r.truth);
    scores.push_back(r.suspicion);
    labels.push_back(r.truth->backdoored);
  }
  std::stable_sort(report.ranking.begin(), report.ranking.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  if (manifest) {
    report.rates = metrics(verdicts, truths);
    if (std::find(labels.begin(), labels.end(), true) != labels.end())
      report.average_precision = average_precision(scores, labels);
  }
  if (!latencies.empty()) {
    double total = 0.0;
    for (double l : latencies) total += l;
    report.mean_latency_ms = total / static_cast<double>(latencies.size());
    report.p95_latency_ms = percentile_nearest_rank(latencies, 0.95);
  }
  return report;
}

// --- output ----------------------------------------------------------------

inline Json optional_json(const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); }

/// Report JSON. Timing lives only in "latency" and per-model "elapsed_ms".
inline Json to_json(const ZooReport& report) {
  Json j;
  j["scan_seed"] = report.scan_seed;
  j["model_count"] = report.per_model.size();
  j["error_count"] = std::count_if(report.per_model.begin(), report.per_model.end(),
                                   [](const ModelResult& r) { return r.error.has_value(); });
  j["metrics"] = {{"tpr", optional_json(report.rates.tpr)},
                  {"tpr_target_match", optional_json(report.rates.tpr_target_match)},
                  {"fpr", optional_json(report.rates.fpr)},
                  {"mtpr", optional_json(report.rates.mtpr)},
                  {"average_precision", optional_json(report.average_precision)}};
  j["latency"] = {{"mean_ms", optional_json(report.mean_latency_ms)},
                  {"p95_ms", optional_json(report.p95_latency_ms)}};
  Json ranking = Json::array();
  for (const auto& [id, score] : report.ranking) ranking.push_back({{"model_id", id}, {"score", score}});
  j["ranking"] = std::move(ranking);
  Json models = Json::array();
  for (const auto& r : report.per_model) {
    Json m = r.verdict ? to_json(*r.verdict) : Json::object();
    m["file"] = r.file;
    m["model_id"] = r.model_id;
    m["seed"] = r.seed;
    m["error"] = r.error ? Json(*r.error) : Json(nullptr);
    m["truth_label"] = r.truth ? Json(r.truth->backdoored ? "backdoor" : "clean") : Json(nullptr);
    m["truth_target"] = r.truth && r.truth->target ? Json(*r.truth->target) : Json(nullptr);
    models.push_back(std::move(m));
  }
  j["models"] = std::move(models);
  return j;
}

inline std::string format_real(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// CSV: model_id,decision,target,score,truth_label,truth_target,elapsed_ms
inline std::string to_csv(const ZooReport& report) {
  std::string out = "model_id,decision,target,score,truth_label,truth_target,elapsed_ms\n";
  for (const auto& r : report.per_model) {
    out += r.model_id + ',';
    if (r.verdict) {
      out += r.verdict->decision == Decision::Backdoored ? "backdoored," : "clean,";
      out += (r.verdict->target ? std::to_string(*r.verdict->target) : std::string()) + ',';
      out += format_real(r.verdict->score) + ',';
    } else {
      out += "error,,,";
    }
    out += (r.truth ? std::string(r.truth->backdoored ? "backdoor" : "clean") : std::string()) + ',';
    out += (r.truth && r.truth->target ? std::to_string(*r.truth->target) : std::string()) + ',';
    out += r.verdict ? format_real(r.verdict->elapsed_ms) : std::string();
    out += '\n';
  }
  return out;
}

}  // namespace headprobe
