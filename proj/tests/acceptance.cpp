// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and exits
// nonzero if any fails.
//
//   acceptance [work_dir]
//
// The ablation (9 training runs at the desk config) dominates the runtime.

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include "bayeseg/config.hpp"
#include "bayeseg/harness.hpp"
#include "bayeseg/networks.hpp"
#include "bayeseg/oracles.hpp"
#include "bayeseg/synth_data.hpp"

using namespace bayeseg;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

constexpr const char* kHardest = "contrast-inverted";
constexpr double kMaxOracleSeconds = 120;
constexpr double kMaxAblateSeconds = 45 * 60;
constexpr double kMinSourceDice = 85;
constexpr double kMinGain = 5;
constexpr double kStochasticBand = 3;

int failures = 0;

void report(int n, bool ok, const std::string& what) {
  if (!ok) ++failures;
  std::cout << (ok ? "PASS" : "FAIL") << " criterion " << n << ": " << what << std::endl;
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::string fmt(double v, int prec = 2) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(prec);
  os << v;
  return os.str();
}

std::string sci(double v) {
  std::ostringstream os;
  os.precision(3);
  os << v;
  return os.str();
}

// Byte comparison of every regular file under two directories.
bool same_tree(const fs::path& a, const fs::path& b, std::size_t& files) {
  files = 0;
  std::vector<fs::path> rel;
  for (const auto& e : fs::recursive_directory_iterator(a))
    if (e.is_regular_file()) rel.push_back(fs::relative(e.path(), a));
  std::size_t nb = 0;
  for (const auto& e : fs::recursive_directory_iterator(b)) nb += e.is_regular_file();
  if (rel.size() != nb) return false;
  for (const auto& r : rel) {
    // dataset.cfg records the output directory itself.
    if (r == "dataset.cfg") continue;
    if (!fs::exists(b / r) || slurp(a / r) != slurp(b / r)) return false;
    ++files;
  }
  return true;
}

struct FamilyOutcome {
  bool passed = true;
  std::size_t oracles = 0, min_instances = 0;
  double worst_ratio = 0;  // max_error / tolerance
  double seconds = 0;
  std::string first_failure;
};

FamilyOutcome run_family(const std::string& family) {
  FamilyOutcome f;
  auto t0 = Clock::now();
  auto results = run_oracle_family(family);
  f.seconds = seconds_since(t0);
  f.min_instances = results.empty() ? 0 : results.front().instances;
  for (const auto& r : results) {
    ++f.oracles;
    f.min_instances = std::min(f.min_instances, r.instances);
    f.worst_ratio = std::max(f.worst_ratio, r.tolerance > 0 ? r.max_error / r.tolerance : 0.0);
    if (!r.passed) {
      if (f.passed) f.first_failure = r.name + " err=" + sci(r.max_error) + " tol=" + sci(r.tolerance);
      f.passed = false;
    }
  }
  if (results.empty()) f.passed = false;
  return f;
}

std::string describe(const FamilyOutcome& f) {
  std::string s = std::to_string(f.oracles) + " oracles, >= " + std::to_string(f.min_instances) +
                  " instances each, worst err/tol " + sci(f.worst_ratio) + ", " + fmt(f.seconds, 1) + " s";
  if (!f.passed) s += "; first failure: " + f.first_failure;
  return s;
}

const ArmResult& arm(const std::vector<ArmResult>& rs, const std::string& name) {
  for (const auto& r : rs)
    if (r.arm == name) return r;
  throw std::runtime_error("missing arm " + name);
}

double arm_value(const ArmResult& r, const std::vector<double>& v, const std::string& domain) {
  for (std::size_t i = 0; i < r.domains.size(); ++i)
    if (r.domains[i] == domain) return v[i];
  throw std::runtime_error("arm " + r.arm + " has no domain " + domain);
}

int run_cli(const std::string& args) {
  std::string cmd = std::string(BAYESEG_CLI) + " " + args + " > /dev/null 2>&1";
  return std::system(cmd.c_str());
}

}  // namespace

int main(int argc, char** argv) {
  fs::path work = argc > 1 ? fs::path(argv[1]) : fs::current_path() / "acceptance_work";
  fs::remove_all(work);
  fs::create_directories(work);
  std::cout << "work directory " << work.string() << std::endl;

  // 1-4: numerical oracles.
  {
    auto f = run_family("conjugacy");
    bool ok = f.passed && f.seconds <= kMaxOracleSeconds && f.min_instances >= 100;
    report(1, ok, "conjugate posterior means vs quadrature and loop oracles: " + describe(f));
  }
  {
    auto f = run_family("c_k_monte_carlo");
    report(2, f.passed, "digamma difference vs Beta Monte-Carlo: " + describe(f));
  }
  {
    auto d = run_family("fd_gradients_double");
    auto s = run_family("fd_gradients_single");
    bool ok = d.passed && s.passed && d.min_instances >= 20 && s.min_instances >= 20;
    report(3, ok, "finite differences, double: " + describe(d) + "; single: " + describe(s));
  }
  {
    auto f = run_family("minimizers");
    report(4, f.passed, "analytic variance minimizers: " + describe(f));
  }

  // Benchmark, generated twice for the determinism check.
  const fs::path data = work / "data", data_again = work / "data_again";
  bool gen_ok = run_cli("gen-data data.dir=" + data.string()) == 0 &&
                run_cli("gen-data data.dir=" + data_again.string()) == 0;
  std::size_t data_files = 0;
  bool data_same = gen_ok && same_tree(data, data_again, data_files);

  auto cfg = KeyValueConfig::load(fs::path(BAYESEG_SOURCE_DIR) / "configs" / "desk.cfg");
  cfg.set("data.dir", data.string());
  cfg.set("out.dir", (work / "ablate").string());
  RunConfig base = RunConfig::from_config(cfg);
  cfg.check_all_used();
  base.validate();

  AblateConfig ab;
  ab.suite = "table5";
  ab.seeds = {0, 1, 2};

  std::vector<ArmResult> results;
  double ablate_seconds = 0;
  std::string ablate_error;
  if (gen_ok) {
    try {
      auto t0 = Clock::now();
      results = ablate(base, ab, &std::cerr);
      ablate_seconds = seconds_since(t0);
    } catch (const std::exception& e) {
      ablate_error = e.what();
    }
  } else {
    ablate_error = "gen-data failed";
  }

  // 5-6: directional ablation.
  if (!results.empty()) {
    const auto& full = arm(results, "proposed");
    const auto& erm = arm(results, "erm");
    const auto& so = arm(results, "stochastic-only");
    double src = arm_value(full, full.mean, kSourceDomain);
    double full_hard = arm_value(full, full.mean, kHardest);
    double erm_hard = arm_value(erm, erm.mean, kHardest);
    double so_hard = arm_value(so, so.mean, kHardest);
    double full_drop = arm_value(full, full.drop, kHardest);
    double erm_drop = arm_value(erm, erm.drop, kHardest);
    bool ok = src >= kMinSourceDice && full_hard - erm_hard >= kMinGain && full_drop < erm_drop &&
              ablate_seconds <= kMaxAblateSeconds;
    report(5, ok,
           "full source " + fmt(src) + " (>= 85), " + kHardest + " full " + fmt(full_hard) + " vs ERM " +
               fmt(erm_hard) + " (gain >= 5), drop " + fmt(full_drop) + " vs " + fmt(erm_drop) +
               " (strictly smaller), ablation " + fmt(ablate_seconds / 60, 1) + " min (<= 45)");
    report(6, std::abs(so_hard - erm_hard) <= kStochasticBand,
           kHardest + std::string(" stochastic-only ") + fmt(so_hard) + " vs ERM " + fmt(erm_hard) +
               " (within 3)");
    std::cout << "ablation table:\n" << slurp(work / "ablate" / "ablation_report.txt");
  } else {
    report(5, false, "ablation did not run: " + ablate_error);
    report(6, false, "ablation did not run: " + ablate_error);
  }

  const fs::path ckpt = work / "ablate" / "proposed" / "seed_0" / "checkpoint.bsckpt";

  // 7: shape-boundary posterior is small on structure boundaries.
  if (!results.empty()) {
    auto manifest = read_manifest(data);
    auto it = std::find_if(manifest.begin(), manifest.end(), [](const ManifestEntry& e) {
      return e.domain == kSourceDomain && e.split == "test";
    });
    auto y = load_case_image(data, *it);
    auto labels = load_case_labels(data, *it, base.net.classes);
    auto d = decompose(ckpt, y);
    write_decomposition(d, work / "decompose");
    const std::size_t H = d.height, W = d.width;
    std::vector<double> sorted = d.upsilon.data;
    std::sort(sorted.begin(), sorted.end());
    // Nearest-rank 10th percentile.
    double p10 = sorted[static_cast<std::size_t>(0.1 * static_cast<double>(sorted.size() - 1))];
    double median = sorted[sorted.size() / 2];
    std::vector<double> boundary;
    for (std::size_t r = 0; r < H; ++r)
      for (std::size_t c = 0; c < W; ++c) {
        auto l = labels[r * W + c];
        bool edge = (r > 0 && labels[(r - 1) * W + c] != l) || (r + 1 < H && labels[(r + 1) * W + c] != l) ||
                    (c > 0 && labels[r * W + c - 1] != l) || (c + 1 < W && labels[r * W + c + 1] != l);
        if (edge) boundary.push_back(d.upsilon[r * W + c]);
      }
    std::size_t below = std::count_if(boundary.begin(), boundary.end(), [&](double v) { return v < p10; });
    std::sort(boundary.begin(), boundary.end());
    double bmedian = boundary.empty() ? 0 : boundary[boundary.size() / 2];
    bool ok = !boundary.empty() && below == boundary.size();
    report(7, ok,
           "case " + it->case_id + ": " + std::to_string(below) + "/" + std::to_string(boundary.size()) +
               " boundary pixels below the 10th percentile of upsilon (" + sci(p10) +
               "); boundary median / image median " + sci(bmedian / median));
  } else {
    report(7, false, "no trained model: " + ablate_error);
  }

  // 8: reruns reproduce metrics byte for byte.
  if (!results.empty()) {
    RunConfig again = base;
    again.seed = 0;
    again.ablation = ablation_preset("proposed");
    again.out_dir = work / "rerun";
    auto tr = train(again, &std::cerr);
    const fs::path first = ckpt.parent_path(), second = again.out_dir;
    bool metrics_same = !slurp(first / "metrics.csv").empty() &&
                        slurp(first / "metrics.csv") == slurp(second / "metrics.csv");
    // The echo differs in out.dir, so compare the stored tensors.
    auto ca = load_checkpoint(second / "checkpoint.bsckpt"), cb = load_checkpoint(ckpt);
    bool ckpt_same = ca.tensors.size() == cb.tensors.size();
    for (std::size_t i = 0; ckpt_same && i < ca.tensors.size(); ++i)
      ckpt_same = ca.tensors[i].first == cb.tensors[i].first && ca.tensors[i].second.data == cb.tensors[i].second.data;
    // The rerun's snapshots, evaluated twice, against the ablation's own evaluation.
    evaluate(tr.checkpoints, data, {}, work / "eval_a");
    evaluate(tr.checkpoints, data, {}, work / "eval_b");
    bool eval_same = true;
    for (const char* f : {"eval_cases.csv", "eval_summary.csv"}) {
      auto a = slurp(work / "eval_a" / f);
      eval_same = eval_same && !a.empty() && a == slurp(work / "eval_b" / f) && a == slurp(first / f);
    }
    bool ok = data_same && metrics_same && ckpt_same && eval_same;
    report(8, ok,
           std::string("gen-data ") + (data_same ? "identical" : "DIFFERS") + " (" + std::to_string(data_files) +
               " files), train metrics.csv " + (metrics_same ? "identical" : "DIFFERS") + ", checkpoint tensors " +
               (ckpt_same ? "identical" : "DIFFERS") + ", eval CSVs " + (eval_same ? "identical" : "DIFFER"));
  } else {
    report(8, false, "no trained model: " + ablate_error);
  }

  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed")
            << std::endl;
  return failures == 0 ? 0 : 1;
}
