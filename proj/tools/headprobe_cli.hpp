#pragma once

// Command-line front end: detect / calibrate / scan / synth / probe /
// export-indicators.
//
// Exit codes: 0 success, 1 `detect` flagged the model as backdoored,
// 2 usage error, 3 runtime error.

#include <filesystem>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <spdlog/sinks/ostream_sink.h>
#include <spdlog/spdlog.h>

#include "CLI11.hpp"

#include "headprobe/headprobe.hpp"

namespace headprobe::cli {

enum ExitCode : int { kOk = 0, kFlagged = 1, kUsage = 2, kRuntime = 3 };

/// Raised for flag combinations CLI11 cannot check on its own.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct GlobalFlags {
  std::optional<std::uint64_t> seed;
  std::size_t workers = 1;
  bool json = false;
  std::string log_level = "warn";
};

struct ProbeFlags {
  std::string dist = "auto";
  std::optional<double> sigma;
  std::size_t count = kDefaultProbeCount;
};

namespace detail {

inline std::pair<double, double> parse_range(const std::string& text) {
  const auto colon = text.find(':');
  try {
    if (colon == std::string::npos) {
      const double v = std::stod(text);
      return {v, v};
    }
    return {std::stod(text.substr(0, colon)), std::stod(text.substr(colon + 1))};
  } catch (const std::exception&) {
    throw UsageError("expected lo:hi, got \"" + text + "\"");
  }
}

// --sigma on its own implies gaussian probes
inline std::optional<Distribution> probe_distribution(const ProbeFlags& flags) {
  if (flags.dist == "uniform01") return Distribution::uniform01();
  if (flags.dist == "gaussian" || (flags.dist == "auto" && flags.sigma)) {
    if (!flags.sigma) throw UsageError("--dist gaussian requires --sigma");
    return Distribution::gaussian(*flags.sigma);
  }
  return std::nullopt;
}

inline void add_probe_flags(CLI::App* sub, ProbeFlags& flags) {
  sub->add_option("--dist", flags.dist, "Probe distribution")
      ->check(CLI::IsMember({"auto", "uniform01", "gaussian"}))
      ->capture_default_str();
  sub->add_option("--sigma", flags.sigma, "Gaussian probe sigma (overrides the abs_max/3 rule)")
      ->check(CLI::PositiveNumber);
  sub->add_option("--count", flags.count, "Probes per model")->check(CLI::PositiveNumber)->capture_default_str();
}

inline std::string format_verdict(const Verdict& v) {
  std::ostringstream os;
  os << v.model_id << ": " << (v.decision == Decision::Backdoored ? "backdoored" : "clean");
  if (v.target) os << " (target " << *v.target << ")";
  os << " score=" << format_real(v.score) << " indicator=" << to_string(v.indicator.kind);
  return os.str();
}

// Heads of a calibration directory. With a manifest in the directory only
// files carrying the wanted label are used, so one mixed benchmark
// directory can serve as both --clean and --backdoor.
struct LabelledHead {
  HeadSpec head;
  std::optional<std::size_t> target;
};

inline std::vector<LabelledHead> load_labelled(const std::filesystem::path& dir, bool want_backdoored) {
  std::optional<std::map<std::string, ManifestEntry>> truth;
  if (std::filesystem::exists(dir / kManifestFileName)) truth = index_by_file(load_manifest(dir / kManifestFileName));
  std::vector<LabelledHead> out;
  for (const auto& file : list_head_files(dir)) {
    std::optional<std::size_t> target;
    if (truth) {
      auto it = truth->find(file.filename().string());
      if (it == truth->end() || it->second.backdoored != want_backdoored) continue;
      target = it->second.target;
    }
    out.push_back({load_headspec(file), target});
  }
  return out;
}

inline void write_or_print(const std::optional<std::string>& path, const std::string& text, std::ostream& out) {
  if (path) {
    write_text_file(*path, text);
  } else {
    out << text;
  }
}

inline std::string csv_row(std::span<const double> values) {
  std::string line;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) line += ',';
    line += format_real(values[i]);
  }
  return line + '\n';
}

}  // namespace detail

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Data-free backdoor auditing of classifier heads by random probing", "headprobe"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);
  GlobalFlags global;
  app.add_option("--seed", global.seed, "Base seed for every random draw");
  app.add_option("--workers", global.workers, "Worker threads for scan/calibrate")->check(CLI::PositiveNumber);
  app.add_flag("--json", global.json, "Machine-readable stdout");
  app.add_option("--log-level", global.log_level, "trace|debug|info|warn|error|off")
      ->check(CLI::IsMember({"trace", "debug", "info", "warn", "error", "off"}));

  // detect
  auto* detect_cmd = app.add_subcommand("detect", "Audit one head; exit 1 if it is flagged as backdoored");
  std::string detect_model, detect_config;
  std::optional<std::string> detect_out;
  detect_cmd->add_option("--model", detect_model, "Head-spec JSON")->required()->check(CLI::ExistingFile);
  detect_cmd->add_option("--config", detect_config, "Detector-config JSON")->required()->check(CLI::ExistingFile);
  detect_cmd->add_option("--out", detect_out, "Write the verdict JSON here");

  // calibrate
  auto* calibrate_cmd = app.add_subcommand("calibrate", "Pick tau on a labelled configuration set");
  std::string cal_clean, cal_backdoor, cal_out, cal_indicator = "mean", cal_mode = "targeted", cal_direction = "above";
  double cal_fpr_cap = 0.05;
  ProbeFlags cal_probe;
  calibrate_cmd->add_option("--clean", cal_clean, "Directory of clean head specs")->required()->check(CLI::ExistingDirectory);
  calibrate_cmd->add_option("--backdoor", cal_backdoor, "Directory of backdoored head specs")
      ->required()
      ->check(CLI::ExistingDirectory);
  calibrate_cmd->add_option("--indicator", cal_indicator)->check(CLI::IsMember({"mean", "l2", "ratio", "max"}))
      ->capture_default_str();
  calibrate_cmd->add_option("--fpr-cap", cal_fpr_cap)->check(CLI::Range(0.0, 0.999999))->capture_default_str();
  calibrate_cmd->add_option("--mode", cal_mode)->check(CLI::IsMember({"targeted", "sim"}))->capture_default_str();
  calibrate_cmd->add_option("--sim-direction", cal_direction)->check(CLI::IsMember({"above", "below"}))
      ->capture_default_str();
  calibrate_cmd->add_option("--out", cal_out, "Detector-config JSON to write")->required();
  detail::add_probe_flags(calibrate_cmd, cal_probe);

  // scan
  auto* scan_cmd = app.add_subcommand("scan", "Audit every head in a directory");
  std::string scan_zoo, scan_config;
  std::optional<std::string> scan_manifest, scan_out, scan_csv;
  scan_cmd->add_option("--zoo", scan_zoo, "Directory of head specs")->required()->check(CLI::ExistingDirectory);
  scan_cmd->add_option("--config", scan_config)->required()->check(CLI::ExistingFile);
  scan_cmd->add_option("--manifest", scan_manifest, "Ground truth (default: ZOO/manifest.json if present)")
      ->check(CLI::ExistingFile);
  scan_cmd->add_option("--out", scan_out, "Report JSON");
  scan_cmd->add_option("--csv", scan_csv, "Per-model CSV");

  // synth
  auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic benchmark of clean and backdoored heads");
  synth::BenchmarkParams bp;
  bp.clean_count = 0;
  bp.backdoor_count = 0;
  std::string synth_out, inflate_range = "1.8:3.0", bias_range = "1.5:2.5";
  bool signed_latents = false;
  synth_cmd->add_option("--clean", bp.clean_count)->capture_default_str();
  synth_cmd->add_option("--backdoor", bp.backdoor_count)->capture_default_str();
  synth_cmd->add_option("--dim", bp.dim)->check(CLI::PositiveNumber)->capture_default_str();
  synth_cmd->add_option("--classes", bp.classes)->check(CLI::PositiveNumber)->capture_default_str();
  synth_cmd->add_option("--mechanism", bp.mechanism, "inflate|delta|bias|mixed|all|all2all")
      ->check(CLI::IsMember({"inflate", "delta", "bias", "mixed", "all", "all2all"}))
      ->capture_default_str();
  synth_cmd->add_option("--inflate", inflate_range, "Target weight inflation range lo:hi")->capture_default_str();
  synth_cmd->add_option("--bias-shift", bias_range, "Target bias shift range lo:hi")->capture_default_str();
  synth_cmd->add_option("--delta-norm", bp.delta_norm)->check(CLI::NonNegativeNumber)->capture_default_str();
  synth_cmd->add_option("--margin", bp.margin)->check(CLI::PositiveNumber)->capture_default_str();
  synth_cmd->add_option("--scale", bp.prototype_scale)->check(CLI::PositiveNumber)->capture_default_str();
  synth_cmd->add_option("--noise", bp.noise_scale)->check(CLI::NonNegativeNumber)->capture_default_str();
  synth_cmd->add_option("--fixtures", bp.fixtures_per_class)->check(CLI::PositiveNumber)->capture_default_str();
  synth_cmd->add_flag("--signed-latents", signed_latents, "Keep fixtures zero-centred (signed latent range)");
  synth_cmd->add_option("--two-layer-every", bp.two_layer_every, "Lift every n-th head to two layers")
      ->capture_default_str();
  synth_cmd->add_option("--adaptive-beta", bp.adaptive_beta)->check(CLI::Range(0.0, 1.0))->capture_default_str();
  synth_cmd->add_option("--adaptive-gamma", bp.adaptive_gamma)->check(CLI::Range(0.0, 1.0))->capture_default_str();
  synth_cmd->add_option("--out", synth_out)->required();

  // probe
  auto* probe_cmd = app.add_subcommand("probe", "Dump a probe batch as CSV, one probe per row");
  std::optional<std::string> probe_model, probe_out;
  std::optional<std::size_t> probe_dim;
  ProbeFlags probe_flags;
  probe_cmd->add_option("--model", probe_model, "Head spec (for shape and auto distribution)")
      ->check(CLI::ExistingFile);
  probe_cmd->add_option("--dim", probe_dim, "Feature width when no --model is given")->check(CLI::PositiveNumber);
  probe_cmd->add_option("--out", probe_out, "CSV path (default stdout)");
  detail::add_probe_flags(probe_cmd, probe_flags);

  // export-indicators
  auto* export_cmd = app.add_subcommand("export-indicators", "Dump logits, probabilities or the indicator as CSV");
  std::string export_model, export_config, export_what = "indicator";
  std::optional<std::string> export_out;
  export_cmd->add_option("--model", export_model)->required()->check(CLI::ExistingFile);
  export_cmd->add_option("--config", export_config)->required()->check(CLI::ExistingFile);
  export_cmd->add_option("--what", export_what)
      ->check(CLI::IsMember({"logits", "probabilities", "indicator"}))
      ->capture_default_str();
  export_cmd->add_option("--out", export_out, "CSV path (default stdout)");

  for (auto* sub : app.get_subcommands({})) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  auto logger = std::make_shared<spdlog::logger>("headprobe", std::make_shared<spdlog::sinks::ostream_sink_mt>(err));
  logger->set_level(spdlog::level::from_str(global.log_level));
  logger->set_pattern("[%l] %v");

  try {
    if (detect_cmd->parsed()) {
      const auto cfg = parse_detector_config(read_text_file(detect_config));
      const auto head = load_headspec(detect_model);
      const auto seed = global.seed.value_or(cfg.probe.seed);
      const auto verdict = run_detection(head, config_for_model(cfg, seed, head.model_id));
      logger->info("{} probes in {:.2f} ms", cfg.probe.count, verdict.elapsed_ms);
      const std::string doc = dump_canonical(to_json(verdict));
      if (detect_out) write_text_file(*detect_out, doc);
      out << (global.json ? doc : detail::format_verdict(verdict) + '\n');
      return verdict.decision == Decision::Backdoored ? kFlagged : kOk;
    }

    if (calibrate_cmd->parsed()) {
      DetectorConfig cfg;
      cfg.indicator = *indicator_from_string(cal_indicator);
      cfg.probe = {detail::probe_distribution(cal_probe), cal_probe.count, global.seed.value_or(0)};
      cfg.mode = cal_mode == "sim" ? DetectionMode::Sim : DetectionMode::Targeted;
      cfg.sim_direction = cal_direction == "below" ? SimDirection::FlagBelow : SimDirection::FlagAbove;
      cfg.fpr_cap = cal_fpr_cap;

      const auto clean = detail::load_labelled(cal_clean, false);
      const auto backdoor = detail::load_labelled(cal_backdoor, true);
      if (clean.empty() || backdoor.empty())
        throw Error(ErrorCode::EmptyConfigSet, "calibration needs at least one clean and one backdoored head");
      logger->info("calibrating on {} clean / {} backdoored heads", clean.size(), backdoor.size());

      auto indicators_of = [&](const std::vector<detail::LabelledHead>& set) {
        std::vector<IndicatorVector> r(set.size());
        parallel_for(set.size(), global.workers, [&](std::size_t i) {
          r[i] = probe_indicator(set[i].head, config_for_model(cfg, cfg.probe.seed, set[i].head.model_id));
        });
        return r;
      };
      const auto clean_ind = indicators_of(clean);
      const auto backdoor_ind = indicators_of(backdoor);

      std::vector<double> clean_scores, backdoor_scores;
      if (cfg.mode == DetectionMode::Targeted) {
        for (const auto& r : clean_ind) clean_scores.push_back(r.max_value());
        for (const auto& r : backdoor_ind) backdoor_scores.push_back(r.max_value());
      } else {
        cfg.clean_mean = mean_clean_profile(clean_ind);
        const double orient = cfg.sim_direction == SimDirection::FlagBelow ? -1.0 : 1.0;
        for (const auto& r : clean_ind) clean_scores.push_back(orient * cosine_similarity(r.values, *cfg.clean_mean));
        for (const auto& r : backdoor_ind)
          backdoor_scores.push_back(orient * cosine_similarity(r.values, *cfg.clean_mean));
      }
      const auto cal = calibrate(clean_scores, backdoor_scores, cfg.fpr_cap);
      if (cfg.mode == DetectionMode::Targeted) {
        cfg.tau = cal.tau;
      } else {
        cfg.tau_sim = cfg.sim_direction == SimDirection::FlagBelow ? -cal.tau : cal.tau;
      }

      std::size_t known = 0, matched = 0;
      for (std::size_t i = 0; i < backdoor.size(); ++i) {
        if (!backdoor[i].target) continue;
        ++known;
        matched += backdoor_scores[i] > cal.tau && backdoor_ind[i].argmax() == *backdoor[i].target;
      }
      write_text_file(cal_out, dump_canonical(to_json(cfg)));
      Json summary{{"tau", cfg.mode == DetectionMode::Targeted ? cfg.tau : *cfg.tau_sim},
                   {"tpr", cal.tpr},
                   {"fpr", cal.fpr},
                   {"tpr_target_match", known ? Json(static_cast<double>(matched) / static_cast<double>(known))
                                              : Json(nullptr)}};
      if (global.json) {
        out << dump_canonical(summary);
      } else {
        out << "tau=" << format_real(summary["tau"].get<double>()) << " tpr=" << format_real(cal.tpr)
            << " fpr=" << format_real(cal.fpr) << '\n';
      }
      return kOk;
    }

    if (scan_cmd->parsed()) {
      const auto cfg = parse_detector_config(read_text_file(scan_config));
      std::optional<Manifest> manifest;
      if (scan_manifest) {
        manifest = load_manifest(*scan_manifest);
      } else if (std::filesystem::exists(std::filesystem::path(scan_zoo) / kManifestFileName)) {
        manifest = load_manifest(std::filesystem::path(scan_zoo) / kManifestFileName);
      }
      const auto report = scan(scan_zoo, cfg, manifest, {global.workers, global.seed});
      for (const auto& r : report.per_model)
        if (r.error) logger->warn("{}: {}", r.file, *r.error);
      const std::string doc = dump_canonical(to_json(report));
      if (scan_out) write_text_file(*scan_out, doc);
      if (scan_csv) write_text_file(*scan_csv, to_csv(report));
      if (global.json) {
        out << doc;
      } else {
        std::size_t flagged = 0;
        for (const auto& r : report.per_model) flagged += r.verdict && r.verdict->decision == Decision::Backdoored;
        auto show = [](const std::optional<double>& v) { return v ? format_real(*v) : std::string("null"); };
        out << report.per_model.size() << " models, " << flagged << " flagged";
        if (manifest)
          out << "; tpr=" << show(report.rates.tpr) << " tpr_target_match=" << show(report.rates.tpr_target_match)
              << " fpr=" << show(report.rates.fpr) << " ap=" << show(report.average_precision)
              << " mtpr=" << show(report.rates.mtpr);
        out << '\n';
      }
      return kOk;
    }

    if (synth_cmd->parsed()) {
      bp.inflate_range = detail::parse_range(inflate_range);
      bp.bias_range = detail::parse_range(bias_range);
      bp.nonnegative_latents = !signed_latents;
      bp.seed = global.seed.value_or(0);
      const auto bench = synth::gen_benchmark(bp, synth_out);
      logger->info("wrote {} heads to {}", bench.models.size(), synth_out);
      if (global.json) {
        out << dump_canonical({{"out", synth_out}, {"models", bench.models.size()}});
      } else {
        out << "wrote " << bench.models.size() << " heads and " << kManifestFileName << " to " << synth_out << '\n';
      }
      return kOk;
    }

    if (probe_cmd->parsed()) {
      ProbeConfig cfg{Distribution::uniform01(), probe_flags.count, global.seed.value_or(0)};
      InputShape shape;
      const auto dist = detail::probe_distribution(probe_flags);
      if (probe_model) {
        const auto head = load_headspec(*probe_model);
        shape = head.input_shape;
        cfg.distribution = dist.value_or(choose_distribution(head.latent_range, head.head_kind));
      } else {
        if (!probe_dim) throw UsageError("probe needs --model or --dim");
        if (!dist) throw UsageError("--dist auto needs --model");
        shape = InputShape::features(*probe_dim);
        cfg.distribution = *dist;
      }
      logger->info("{} probes, {}", cfg.count, to_string(cfg.distribution));
      std::string csv;
      ProbeStream stream(cfg, shape);
      while (stream.remaining() > 0) {
        const auto block = stream.next(256);
        for (std::size_t r = 0; r < block.rows(); ++r) csv += detail::csv_row(block.row(r));
      }
      detail::write_or_print(probe_out, csv, out);
      return kOk;
    }

    if (export_cmd->parsed()) {
      const auto cfg = parse_detector_config(read_text_file(export_config));
      const auto head = load_headspec(export_model);
      const auto model_cfg = config_for_model(cfg, global.seed.value_or(cfg.probe.seed), head.model_id);
      const auto resp = forward_probes(head, resolve_probe_config(head, model_cfg.probe));
      std::string csv;
      if (export_what == "indicator") {
        const auto r = compute_indicator(cfg.indicator, resp);
        csv = "class," + std::string(to_string(r.kind)) + '\n';
        for (std::size_t i = 0; i < r.values.size(); ++i) csv += std::to_string(i) + ',' + format_real(r.values[i]) + '\n';
      } else {
        const Matrix& m = export_what == "logits" ? resp.logits : resp.probabilities;
        csv = "probe";
        for (std::size_t k = 0; k < m.cols(); ++k) csv += ",c" + std::to_string(k);
        csv += '\n';
        for (std::size_t n = 0; n < m.rows(); ++n) csv += std::to_string(n) + ',' + detail::csv_row(m.row(n));
      }
      detail::write_or_print(export_out, csv, out);
      return kOk;
    }
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n' << app.help();
    return kUsage;
  } catch (const std::exception& e) {
    logger->error("{}", e.what());
    return kRuntime;
  }
  return kUsage;
}

}  // namespace headprobe::cli
