// Acceptance suite: one PASS/FAIL line per headline criterion, with the
// measured value and the pinned tolerance. Exit status is the FAIL count.

#include <chrono>
#include <cstdio>
#include <functional>
#include <sstream>

#include "fixtures.hpp"
#include "headprobe_cli.hpp"
#include "oracles.hpp"

using namespace headprobe;

namespace {

struct Outcome {
  bool pass;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

synth::BenchmarkParams bench_params(std::size_t clean, std::size_t backdoor, std::uint64_t seed) {
  synth::BenchmarkParams bp;
  bp.clean_count = clean;
  bp.backdoor_count = backdoor;
  bp.dim = 512;
  bp.classes = 10;
  bp.mechanism = "all";
  bp.inflate_range = {1.8, 3.0};
  bp.margin = 1.0;
  bp.seed = seed;
  return bp;
}

// Targeted Mean config with tau picked on an in-memory calibration benchmark,
// scored exactly as a scan with `scan_seed` would score it.
DetectorConfig calibrated_config(const synth::Benchmark& cal, std::uint64_t scan_seed, double fpr_cap = 0.05) {
  DetectorConfig cfg;
  cfg.probe.seed = scan_seed;
  cfg.fpr_cap = fpr_cap;
  std::vector<double> clean, backdoor;
  for (std::size_t i = 0; i < cal.models.size(); ++i) {
    const auto& h = cal.models[i].head;
    const double s = probe_indicator(h, config_for_model(cfg, scan_seed, h.model_id)).max_value();
    (cal.manifest[i].backdoored ? backdoor : clean).push_back(s);
  }
  cfg.tau = calibrate(clean, backdoor, fpr_cap).tau;
  return cfg;
}

Outcome benchmark_detection() {
  fixtures::TempDir dir("accept-bench");
  synth::gen_benchmark(bench_params(200, 200, 1001), dir.path());
  const auto cfg = calibrated_config(synth::generate_benchmark(bench_params(40, 40, 2002)), 7);
  const auto t0 = Clock::now();
  const auto report = scan(dir.path(), cfg, load_manifest(dir / kManifestFileName), {1, std::nullopt});
  const double elapsed = seconds_since(t0);
  const double match = report.rates.tpr_target_match.value_or(0.0);
  const double fpr = report.rates.fpr.value_or(1.0);
  return {match >= 0.95 && fpr <= 0.05 && elapsed < 60.0,
          fmt("tpr_target_match=%.4f (>=0.95) fpr=%.4f (<=0.05) scan=%.1fs (<60s, 1 worker) tau=%.5f tpr=%.4f mtpr=%.4f",
              match, fpr, elapsed, cfg.tau, report.rates.tpr.value_or(0.0), report.rates.mtpr.value_or(0.0))};
}

Outcome latency() {
  const auto clean = fixtures::clean_head(1);
  const auto b = fixtures::inflated_head(clean, 2.0, 3, 1);
  auto cfg = fixtures::targeted_config(0.15);
  cfg.probe.count = 4096;
  std::vector<double> ms;
  for (std::uint64_t i = 0; i < 100; ++i) {
    cfg.probe.seed = i;
    ms.push_back(detect(b.head, cfg).elapsed_ms);
  }
  std::sort(ms.begin(), ms.end());
  const double median = (ms[49] + ms[50]) / 2.0;
  cfg.probe.distribution = Distribution::gaussian(1.0);
  std::vector<double> gauss;
  for (std::uint64_t i = 0; i < 100; ++i) {
    cfg.probe.seed = i;
    gauss.push_back(detect(b.head, cfg).elapsed_ms);
  }
  std::sort(gauss.begin(), gauss.end());
  return {median < 50.0,
          fmt("median=%.2fms over 100 runs (<50ms, hard cap 100ms; published GPU figure 12.69ms/model) "
              "D=512 K=10 N=4096 uniform probes; gaussian probes median=%.2fms",
              median, (gauss[49] + gauss[50]) / 2.0)};
}

Outcome three_sigma() {
  std::string detail;
  bool pass = true;
  for (double sigma : {0.5, 1.0, 3.0}) {
    const auto batch = generate_probes({Distribution::gaussian(sigma), 4096, 31}, InputShape::features(512));
    std::size_t inside = 0;
    for (double v : batch.values.data()) inside += std::fabs(v) <= 3.0 * sigma;
    const double frac = static_cast<double>(inside) / static_cast<double>(batch.values.data().size());
    pass = pass && std::fabs(frac - 0.9974) <= 0.0005;
    detail += fmt("sigma=%.1f: %.5f ", sigma, frac);
  }
  return {pass, detail + "(target 0.9974 +/- 0.0005, N*D=2097152)"};
}

Outcome indicator_invariants() {
  Rng rng(4242);
  double worst_mean_sum = 0.0, worst_ratio_sum = 0.0, worst_oracle = 0.0;
  bool l2_range = true, permutation = true, exact_ratio_max = true;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng.below(300), k = 1 + rng.below(16);
    const auto r = fixtures::random_responses(rng, n, k, rng.uniform(0.1, 25.0));
    const auto mean = r_mean(r).values, l2 = r_l2(r).values, ratio = r_ratio(r).values, mx = r_max(r).values;
    double ms = 0.0, rs = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
      ms += mean[i];
      rs += ratio[i];
      l2_range = l2_range && l2[i] >= 0.0 && l2[i] <= std::sqrt(static_cast<double>(n));
    }
    worst_mean_sum = std::max(worst_mean_sum, std::fabs(ms - 1.0));
    worst_ratio_sum = std::max(worst_ratio_sum, std::fabs(rs - 1.0));

    const auto p = fixtures::to_rows(r.probabilities);
    const auto om = oracle::column_mean(p), ol = oracle::column_l2(p),
               orat = oracle::label_share(r.labels, k), omax = oracle::column_max(fixtures::to_rows(r.logits));
    for (std::size_t i = 0; i < k; ++i) {
      worst_oracle = std::max({worst_oracle, std::fabs(mean[i] - om[i]), std::fabs(l2[i] - ol[i]),
                               std::fabs(ratio[i] - orat[i]), std::fabs(mx[i] - omax[i])});
      exact_ratio_max = exact_ratio_max && ratio[i] == orat[i] && mx[i] == omax[i];
    }

    const auto shuffled = fixtures::permute_rows(r, fixtures::shuffled_indices(rng, n));
    permutation = permutation && r_mean(shuffled).values == mean && r_l2(shuffled).values == l2 &&
                  r_ratio(shuffled).values == ratio && r_max(shuffled).values == mx;
  }
  const bool pass = worst_mean_sum <= 1e-6 && worst_ratio_sum <= 1e-9 && l2_range && permutation &&
                    worst_oracle <= 1e-12;
  return {pass, fmt("1000 sets: |sum mean-1|=%.2e (<=1e-6) |sum ratio-1|=%.2e (<=1e-9) l2 in [0,sqrt N]=%s "
                    "permutation exact=%s max oracle gap=%.2e (<=1e-12)",
                    worst_mean_sum, worst_ratio_sum, l2_range ? "yes" : "no", permutation ? "yes" : "no",
                    worst_oracle)};
}

Outcome calibration_oracle() {
  Rng rng(77);
  int agree = 0;
  bool capped = true;
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> clean(2 + rng.below(49)), backdoor(2 + rng.below(49));
    const bool coarse = trial % 4 == 0;
    const double shift = rng.uniform(0.0, 2.0);
    for (double& s : clean) s = coarse ? static_cast<double>(rng.below(10)) : rng.normal();
    for (double& s : backdoor) s = coarse ? static_cast<double>(rng.below(10)) + 2.0 : rng.normal() + shift;
    const double cap = trial % 5 == 0 ? 0.0 : rng.uniform(0.0, 0.25);
    const auto c = calibrate(clean, backdoor, cap);
    const auto best = oracle::best_operating_point(clean, backdoor, cap);
    const bool achieved = oracle::fraction_above(backdoor, c.tau) == best.first &&
                          oracle::fraction_above(clean, c.tau) == best.second;
    agree += achieved && c.tpr == best.first && c.fpr == best.second;
    capped = capped && oracle::fraction_above(clean, c.tau) <= cap;
  }
  return {agree == 200 && capped, fmt("%d/200 instances match the exhaustive scan; FPR<=cap always=%s", agree,
                                      capped ? "yes" : "no")};
}

Outcome ap_oracle() {
  Rng rng(99);
  double worst = 0.0;
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = 1 + rng.below(80);
    std::vector<double> scores(n);
    std::vector<bool> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
      scores[i] = trial % 3 == 0 ? static_cast<double>(rng.below(6)) : rng.normal();
      labels[i] = rng.below(3) == 0;
    }
    labels[rng.below(n)] = true;
    worst = std::max(worst, std::fabs(average_precision(scores, labels) - oracle::average_precision(scores, labels)));
  }
  const double perfect = average_precision({5.0, 4.0, 3.0, 1.0, 0.5}, {true, true, true, false, false});
  return {worst <= 1e-12 && perfect == 1.0,
          fmt("max |AP-oracle|=%.2e over 500 (<=1e-12); perfect separation AP=%.17g (==1)", worst, perfect)};
}

Outcome zoo_ranking() {
  const auto cfg = calibrated_config(synth::generate_benchmark(bench_params(40, 40, 3003)), 11);
  const std::pair<std::size_t, std::size_t> ratios[] = {{10, 100}, {40, 100}, {70, 10}, {100, 100}};
  bool pass = true;
  std::string detail;
  std::uint64_t seed = 4000;
  for (const auto& [bd, clean] : ratios) {
    fixtures::TempDir dir("accept-zoo");
    synth::gen_benchmark(bench_params(clean, bd, seed++), dir.path());
    const auto report = scan(dir.path(), cfg, load_manifest(dir / kManifestFileName));
    const double ap = report.average_precision.value_or(0.0);
    pass = pass && ap >= 0.95;
    detail += fmt("%zu/%zu AP=%.4f; ", bd, clean, ap);
  }
  return {pass, detail + "(each >= 0.95)"};
}

Outcome sim_variant() {
  Rng rng(5);
  bool self_one = true;
  double worst_scale = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    Vector r(1 + rng.below(50)), m(r.size());
    for (double& v : r) v = rng.uniform01();
    for (double& v : m) v = rng.uniform01();
    self_one = self_one && cosine_similarity(r, r) == 1.0;
    Vector scaled(r);
    const double c = std::exp(rng.uniform(-20.0, 20.0));
    for (double& v : scaled) v *= c;
    worst_scale = std::max(worst_scale, std::fabs(cosine_similarity(scaled, m) - cosine_similarity(r, m)));
  }

  // clean profile from one set, scored on disjoint clean and all-to-all sets
  DetectorConfig cfg;
  cfg.probe.seed = 21;
  const auto profile_bench = synth::generate_benchmark(bench_params(40, 0, 5005));
  std::vector<IndicatorVector> profile;
  for (const auto& m : profile_bench.models)
    profile.push_back(probe_indicator(m.head, config_for_model(cfg, 21, m.head.model_id)));
  const auto mean = mean_clean_profile(profile);

  auto bp = bench_params(50, 50, 6006);
  bp.mechanism = "all2all";
  const auto test = synth::generate_benchmark(bp);
  std::vector<double> clean, attacked;
  for (std::size_t i = 0; i < test.models.size(); ++i) {
    const auto& h = test.models[i].head;
    // lower similarity is more suspicious for this family
    const double s = -cosine_similarity(probe_indicator(h, config_for_model(cfg, 21, h.model_id)).values, mean);
    (test.manifest[i].backdoored ? attacked : clean).push_back(s);
  }
  const double auc = oracle::auc(clean, attacked);
  return {self_one && worst_scale <= 1e-12 && auc >= 0.95,
          fmt("cos(r,r)==1 exactly=%s; max scaling drift=%.2e (<=1e-12); all-to-all vs clean AUC=%.4f (>=0.95, "
              "flag-below orientation)",
              self_one ? "yes" : "no", worst_scale, auc)};
}

Outcome adaptive_degradation() {
  const auto cfg = calibrated_config(synth::generate_benchmark(bench_params(40, 40, 7007)), 13);
  const auto attacked = synth::generate_benchmark(bench_params(0, 50, 8008));
  std::vector<double> tprs;
  std::string detail;
  for (double beta : {0.0, 0.25, 0.5, 0.75, 1.0}) {
    std::size_t flagged = 0;
    for (const auto& m : attacked.models) {
      const auto h = synth::gen_adaptive_head(m.head, beta, beta);
      flagged += detect(h, config_for_model(cfg, 13, h.model_id)).decision == Decision::Backdoored;
    }
    tprs.push_back(static_cast<double>(flagged) / 50.0);
    detail += fmt("beta=%.2f TPR=%.2f; ", beta, tprs.back());
  }
  const bool monotone = std::is_sorted(tprs.rbegin(), tprs.rend());
  const bool chance = tprs.back() <= cfg.fpr_cap;
  return {monotone && chance,
          detail + fmt("non-increasing=%s; TPR at beta=1 <= fpr_cap %.2f (chance)=%s", monotone ? "yes" : "no",
                       cfg.fpr_cap, chance ? "yes" : "no")};
}

int run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "headprobe");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  return cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
}

std::string strip_timing(const std::filesystem::path& path) {
  auto j = Json::parse(read_text_file(path));
  j.erase("elapsed_ms");
  j.erase("latency");
  if (j.contains("models"))
    for (auto& m : j["models"]) m.erase("elapsed_ms");
  return dump_canonical(j);
}

Outcome determinism() {
  fixtures::TempDir dir("accept-det");
  auto p = [&](const std::string& name) { return (dir / name).string(); };
  std::vector<std::string> mismatched;
  for (int i = 0; i < 2; ++i) {
    const std::string t = std::to_string(i);
    run_cli({"--seed", "17", "synth", "--clean", "20", "--backdoor", "20", "--two-layer-every", "7", "--out", p("z" + t)});
    run_cli({"calibrate", "--clean", p("z0"), "--backdoor", p("z0"), "--seed", "3", "--out", p("c" + t + ".json")});
    run_cli({"calibrate", "--clean", p("z0"), "--backdoor", p("z0"), "--seed", "3", "--mode", "sim", "--sim-direction",
             "below", "--out", p("s" + t + ".json")});
    run_cli({"scan", "--zoo", p("z0"), "--config", p("c0.json"), "--workers", i == 0 ? "1" : "4", "--out",
             p("r" + t + ".json"), "--csv", p("r" + t + ".csv")});
    run_cli({"detect", "--model", p("z0/m0003.json"), "--config", p("c0.json"), "--out", p("d" + t + ".json")});
    run_cli({"probe", "--model", p("z0/m0001.json"), "--count", "64", "--seed", "5", "--out", p("p" + t + ".csv")});
    run_cli({"export-indicators", "--model", p("z0/m0002.json"), "--config", p("c0.json"), "--what", "logits",
             "--out", p("e" + t + ".csv")});
  }
  std::size_t compared = 0;
  for (const auto& e : std::filesystem::directory_iterator(dir / "z0")) {
    ++compared;
    if (read_text_file(e.path()) != read_text_file(dir / "z1" / e.path().filename()))
      mismatched.push_back("synth/" + e.path().filename().string());
  }
  for (const char* f : {"c%d.json", "s%d.json", "p%d.csv", "e%d.csv"}) {
    ++compared;
    if (read_text_file(dir / fmt(f, 0)) != read_text_file(dir / fmt(f, 1))) mismatched.push_back(fmt(f, 0));
  }
  for (const char* f : {"r%d.json", "d%d.json"}) {
    ++compared;
    if (strip_timing(dir / fmt(f, 0)) != strip_timing(dir / fmt(f, 1))) mismatched.push_back(fmt(f, 0));
  }
  // CSV minus its elapsed_ms column
  auto csv_body = [](const std::filesystem::path& path) {
    std::istringstream in(read_text_file(path));
    std::string line, out;
    while (std::getline(in, line)) out += line.substr(0, line.rfind(',')) + '\n';
    return out;
  };
  ++compared;
  if (csv_body(dir / "r0.csv") != csv_body(dir / "r1.csv")) mismatched.push_back("r0.csv");

  std::string detail = fmt("%zu outputs compared across reruns (scan: 1 vs 4 workers; elapsed_ms/latency excluded)",
                           compared);
  for (const auto& m : mismatched) detail += " MISMATCH " + m;
  return {mismatched.empty() && compared > 40, detail};
}

}  // namespace

int main() {
  const std::pair<const char*, std::function<Outcome()>> criteria[] = {
      {"synthetic-benchmark detection", benchmark_detection},
      {"latency", latency},
      {"three-sigma coverage", three_sigma},
      {"indicator invariants", indicator_invariants},
      {"calibration oracle equivalence", calibration_oracle},
      {"AP oracle equivalence", ap_oracle},
      {"poisoned-zoo ranking", zoo_ranking},
      {"SIM variant", sim_variant},
      {"adaptive-proxy degradation", adaptive_degradation},
      {"determinism", determinism},
  };
  int failures = 0;
  for (const auto& [name, check] : criteria) {
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("%s  %s: %s\n", o.pass ? "PASS" : "FAIL", name, o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(std::size(criteria)) - failures, std::size(criteria));
  return failures;
}
