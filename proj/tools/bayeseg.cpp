// bayeseg command-line entry point.
//
//   bayeseg gen-data     [--config FILE] [key=value ...]
//   bayeseg train        [--config FILE] [--ablation PRESET] [key=value ...]
//   bayeseg eval         --checkpoint CKPT [--checkpoint CKPT ...] [key=value ...]
//   bayeseg decompose    --checkpoint CKPT (--case ID | --image FILE) [key=value ...]
//   bayeseg ablate       [--config FILE] [--suite table5|table8] [key=value ...]
//   bayeseg oracle-check
//
// Exit codes: 0 ok, 1 oracle failure or unexpected error, 2 configuration
// error, 3 I/O error, 4 numerical abort.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>

#include "bayeseg/config.hpp"
#include "bayeseg/errors.hpp"
#include "bayeseg/harness.hpp"
#include "bayeseg/oracles.hpp"
#include "bayeseg/serialize.hpp"
#include "bayeseg/synth_data.hpp"

namespace fs = std::filesystem;
using namespace bayeseg;

namespace {

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config_path, "key=value config file");
  cmd->add_option("overrides", c.overrides, "key=value overrides applied after the config file");
  cmd->add_option("--set", c.overrides, "key=value override (repeatable)")->allow_extra_args(false);
}

KeyValueConfig resolve(const Common& c) {
  KeyValueConfig cfg;
  if (!c.config_path.empty()) cfg = KeyValueConfig::load(c.config_path);
  for (const auto& o : c.overrides) cfg.apply_override(o);
  return cfg;
}

void write_file(const fs::path& path, const std::string& text) {
  std::error_code ec;
  if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os << text;
}

// Every command reads the run keys too, so one config file can drive all of them.
std::string echo_of(const KeyValueConfig& cfg) { return cfg.to_text(); }

int cmd_gen_data(const Common& c) {
  auto cfg = resolve(c);
  fs::path dir = cfg.get_string("data.dir", "data");
  auto spec = BenchmarkSpec::from_config(cfg);
  RunConfig::from_config(cfg);
  cfg.check_all_used();

  KeyValueConfig resolved;
  spec.to_config(resolved);
  resolved.set("data.dir", dir.string());
  std::cerr << "[gen-data] writing " << spec.total_cases() << " cases to " << dir << std::endl;
  auto manifest = build_benchmark(spec, dir);
  write_file(dir / "dataset.cfg", echo_of(resolved));

  std::map<std::pair<std::string, std::string>, std::size_t> counts;
  for (const auto& e : manifest) ++counts[{e.domain, e.split}];
  std::cout << "manifest " << (dir / kManifestName).string() << ": " << manifest.size() << " cases\n";
  for (const auto& [key, n] : counts)
    std::cout << "  " << key.first << " / " << key.second << ": " << n << "\n";
  return 0;
}

int cmd_train(const Common& c, const std::string& ablation) {
  auto cfg = resolve(c);
  if (!ablation.empty()) {
    ablation_preset(ablation);
    cfg.set("ablation.preset", ablation);
  }
  auto rc = RunConfig::from_config(cfg);
  BenchmarkSpec::from_config(cfg);
  cfg.check_all_used();
  auto result = train(rc, &std::cerr);
  std::cerr << "[train] wrote " << (rc.out_dir / "checkpoint.bsckpt").string() << std::endl;
  (void)result;
  return 0;
}

int cmd_eval(const Common& c, std::vector<std::string> checkpoints) {
  auto cfg = resolve(c);
  auto rc = RunConfig::from_config(cfg);
  BenchmarkSpec::from_config(cfg);
  auto listed = cfg.get_list("eval.checkpoints", {});
  checkpoints.insert(checkpoints.end(), listed.begin(), listed.end());
  auto domains = cfg.get_list("eval.domains", {});
  fs::path out = cfg.get_string("eval.out", (rc.out_dir / "eval").string());
  cfg.check_all_used();
  if (checkpoints.empty()) throw ConfigError("eval needs --checkpoint (or eval.checkpoints)");

  KeyValueConfig resolved;
  resolved.set("data.dir", rc.data_dir.string());
  resolved.set("eval.checkpoints", join(checkpoints));
  if (!domains.empty()) resolved.set("eval.domains", join(domains));
  resolved.set("eval.out", out.string());
  write_file(out / "eval.cfg", echo_of(resolved));

  std::vector<fs::path> paths(checkpoints.begin(), checkpoints.end());
  std::cerr << "[eval] " << paths.size() << " checkpoint(s) on " << rc.data_dir << std::endl;
  auto summary = evaluate(paths, rc.data_dir, domains, out);
  std::cout << format_report({{"model", summary}});
  return 0;
}

int cmd_decompose(const Common& c, const std::string& checkpoint, const std::string& case_id,
                  const std::string& image) {
  auto cfg = resolve(c);
  auto rc = RunConfig::from_config(cfg);
  BenchmarkSpec::from_config(cfg);
  fs::path out = cfg.get_string("decompose.out", (rc.out_dir / "decompose").string());
  cfg.check_all_used();
  if (checkpoint.empty()) throw ConfigError("decompose needs --checkpoint");
  if (case_id.empty() == image.empty()) throw ConfigError("decompose needs exactly one of --case, --image");

  Array<double> y;
  if (!image.empty()) {
    y = load_tensor<double>(image);
  } else {
    auto manifest = read_manifest(rc.data_dir);
    auto it = std::find_if(manifest.begin(), manifest.end(),
                           [&](const ManifestEntry& e) { return e.case_id == case_id; });
    if (it == manifest.end()) throw DataError("case '" + case_id + "' is not in the manifest");
    y = load_case_image(rc.data_dir, *it);
  }
  if (y.dims.size() == 2) y.dims = Dims{1, 1, y.dims[0], y.dims[1]};

  KeyValueConfig resolved;
  resolved.set("data.dir", rc.data_dir.string());
  resolved.set("decompose.out", out.string());
  resolved.set("decompose.checkpoint", checkpoint);
  resolved.set(image.empty() ? "decompose.case" : "decompose.image", image.empty() ? case_id : image);
  write_file(out / "decompose.cfg", echo_of(resolved));

  auto d = decompose(checkpoint, y);
  auto files = write_decomposition(d, out);
  for (const auto& f : files) std::cout << f.string() << "\n";
  return 0;
}

int cmd_ablate(const Common& c, const std::string& suite) {
  auto cfg = resolve(c);
  if (!suite.empty()) cfg.set("ablate.suite", suite);
  auto rc = RunConfig::from_config(cfg);
  auto ab = AblateConfig::from_config(cfg);
  BenchmarkSpec::from_config(cfg);
  cfg.check_all_used();

  KeyValueConfig resolved;
  rc.to_config(resolved);
  ab.to_config(resolved);
  write_file(rc.out_dir / "ablate.cfg", echo_of(resolved));
  auto results = ablate(rc, ab, &std::cerr);
  std::ifstream report(rc.out_dir / "ablation_report.txt");
  std::cout << report.rdbuf();
  return 0;
}

int cmd_oracle_check() {
  bool ok = true;
  std::string first_failure;
  auto results = run_all_oracles([&](const OracleResult& r) {
    std::cout << (r.passed ? "PASS " : "FAIL ") << r.family << " / " << r.name
              << "  max_err=" << r.max_error << "  tol=" << r.tolerance;
    if (!r.detail.empty()) std::cout << "  (" << r.detail << ")";
    std::cout << std::endl;
    if (!r.passed && ok) {
      ok = false;
      first_failure = r.family + " / " + r.name;
    }
  });
  std::size_t families = count_families(results);
  std::cout << results.size() << " oracles in " << families << " families: "
            << (ok ? "all passed" : "FAILED") << "\n";
  if (!ok) {
    std::cerr << "oracle-check: first failing oracle: " << first_failure << std::endl;
    return 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hierarchical Bayesian segmentation: data, training, evaluation, ablation"};
  app.require_subcommand(1);

  Common common;
  auto* gen = app.add_subcommand("gen-data", "generate the synthetic multi-domain benchmark");
  add_common(gen, common);

  auto* tr = app.add_subcommand("train", "train the inference networks");
  add_common(tr, common);
  std::string ablation;
  tr->add_option("--ablation", ablation, "preset: proposed, stochastic-only, erm, pgm1..pgm7");

  auto* ev = app.add_subcommand("eval", "evaluate checkpoints per domain");
  add_common(ev, common);
  std::vector<std::string> checkpoints;
  ev->add_option("--checkpoint", checkpoints, "checkpoint file (repeat to average)")->allow_extra_args(false);

  auto* de = app.add_subcommand("decompose", "export posterior fields of one image");
  add_common(de, common);
  std::string de_ckpt, de_case, de_image;
  de->add_option("--checkpoint", de_ckpt, "checkpoint file");
  de->add_option("--case", de_case, "case id from the dataset manifest");
  de->add_option("--image", de_image, "image tensor file");

  auto* ab = app.add_subcommand("ablate", "run an ablation suite");
  add_common(ab, common);
  std::string suite;
  ab->add_option("--suite", suite, "table5 or table8");

  auto* oc = app.add_subcommand("oracle-check", "run the numerical oracle suite");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*gen) return cmd_gen_data(common);
    if (*tr) return cmd_train(common, ablation);
    if (*ev) return cmd_eval(common, checkpoints);
    if (*de) return cmd_decompose(common, de_ckpt, de_case, de_image);
    if (*ab) return cmd_ablate(common, suite);
    if (*oc) return cmd_oracle_check();
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << std::endl;
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << std::endl;
    return 2;
  } catch (const IoError& e) {
    std::cerr << "I/O error: " << e.what() << std::endl;
    return 3;
  } catch (const FormatError& e) {
    std::cerr << "I/O error: " << e.what() << std::endl;
    return 3;
  } catch (const NumericalError& e) {
    std::cerr << "numerical abort: " << e.what() << std::endl;
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
  return 1;
}
