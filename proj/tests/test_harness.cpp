#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <iterator>

#include "bayeseg/harness.hpp"

using namespace bayeseg;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

fs::path fresh_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / "bayeseg_tests" / name;
  fs::remove_all(dir);
  return dir;
}

// 20 source training cases, tiny test splits, two target domains.
const fs::path& toy_dataset() {
  static const fs::path dir = [] {
    auto d = fresh_dir("toy_data");
    BenchmarkSpec spec;
    spec.scene.height = spec.scene.width = 32;
    spec.scene.center_jitter = 3;
    spec.scene.inner_radius_min = 4;
    spec.scene.inner_radius_max = 6;
    spec.scene.thickness_min = 2;
    spec.scene.thickness_max = 3;
    spec.train = 20;
    spec.val = 2;
    spec.test = 4;
    spec.target_test = 3;
    spec.targets = {builtin_domain("mild-noise"), builtin_domain("contrast-inverted")};
    build_benchmark(spec, d);
    return d;
  }();
  return dir;
}

RunConfig toy_run(const std::string& out, const std::string& preset = "proposed") {
  RunConfig rc;
  rc.data_dir = toy_dataset();
  rc.out_dir = fresh_dir(out);
  rc.net.width = 4;
  rc.net.res_blocks_shape = 1;
  rc.net.res_blocks_app = 1;
  rc.train.steps = 20;
  rc.train.batch_size = 4;
  rc.train.log_every = 5;
  rc.hyper.lambda = 1e-5;
  rc.ablation = ablation_preset(preset);
  return rc;
}

Array<float> toy_batch(std::vector<std::uint8_t>& labels, Array<float>& onehot) {
  const auto& dir = toy_dataset();
  auto m = read_manifest(dir);
  auto split = load_split(dir, m, "train", kSourceDomain, 3);
  const std::size_t N = 2, P = split.height * split.width;
  Array<float> y({N, 1, split.height, split.width});
  onehot = Array<float>({N, 3, split.height, split.width});
  labels.clear();
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t i = 0; i < P; ++i) {
      y[n * P + i] = static_cast<float>(split.images[n][i]);
      onehot[(n * 3 + split.labels[n][i]) * P + i] = 1;
    }
    labels.insert(labels.end(), split.labels[n].begin(), split.labels[n].end());
  }
  return y;
}

}  // namespace

TEST_CASE("dice examples") {
  std::vector<std::uint8_t> g(24, 0), p(24, 0);
  for (int i = 0; i < 16; ++i) g[i] = 1;
  for (int i = 0; i < 8; ++i) p[i] = 1;
  CHECK(dice(p, g, 1) == doctest::Approx(200.0 / 3));
  CHECK(dice(g, g, 1) == 100.0);
  std::vector<std::uint8_t> q(24, 0);
  for (int i = 16; i < 24; ++i) q[i] = 1;
  CHECK(dice(q, g, 1) == 0.0);
  std::vector<std::uint8_t> empty(24, 0);
  CHECK(dice(empty, empty, 1) == 100.0);
  auto s = dice_scores(g, g, 3);
  CHECK(s.mean_foreground == 100.0);
}

TEST_CASE("ablation presets") {
  auto erm = ablation_preset("erm");
  CHECK_FALSE(erm.stochastic_mapping);
  CHECK_FALSE(erm.variational_loss);
  auto so = ablation_preset("stochastic-only");
  CHECK(so.stochastic_mapping);
  CHECK_FALSE(so.variational_loss);
  CHECK(ablation_preset("proposed") == ablation_preset("pgm1"));
  CHECK(ablation_preset("full") == ablation_preset("proposed"));
  CHECK(suite_arms("table5").size() == 3);
  CHECK(suite_arms("table8").size() == 7);
  CHECK_THROWS_AS(ablation_preset("nope"), ConfigError);
}

TEST_CASE("run config echo round trip and validation") {
  auto rc = toy_run("echo");
  rc.hyper.rho.rate = 3e-7;
  rc.seed = 42;
  auto back = run_config_from_echo(rc.echo());
  CHECK(back.echo() == rc.echo());
  CHECK(back.hyper.rho.rate == 3e-7);
  CHECK(back.ablation == rc.ablation);

  auto cfg = KeyValueConfig::parse("train.steps = 0\n");
  CHECK_THROWS_AS(RunConfig::from_config(cfg).validate(), ConfigError);
}

TEST_CASE("ERM flags reduce the step to cross-entropy") {
  std::vector<std::uint8_t> labels;
  Array<float> u;
  auto y = toy_batch(labels, u);
  Trainer<float> t(toy_run("erm_step", "erm"));
  auto st = t.step(y, u, labels);
  CHECK(st.total == st.ce);
  CHECK(st.var == 0.0);
  for (double v : st.terms) CHECK(v == 0.0);
}

TEST_CASE("one step is bit-reproducible") {
  std::vector<std::uint8_t> labels;
  Array<float> u;
  auto y = toy_batch(labels, u);
  Trainer<float> a(toy_run("rep_a")), b(toy_run("rep_b"));
  auto sa = a.step(y, u, labels);
  auto sb = b.step(y, u, labels);
  CHECK(sa.total == sb.total);
  CHECK(sa.terms == sb.terms);
  for (std::size_t i = 0; i < a.nets().params().size(); ++i)
    CHECK(a.nets().params().entries()[i].second.data() == b.nets().params().entries()[i].second.data());
}

TEST_CASE("predict: dominant background channel gives an all-background map") {
  NetConfig nc;
  nc.width = 4;
  nc.classes = 2;
  nc.res_blocks_shape = 1;
  nc.res_blocks_app = 1;
  nc.stochastic_segmentation = false;
  BayeSegNets<float> nets(nc);
  for (auto& v : nets.params().at("seg.out.weight").mutable_data()) v = 0;
  auto& bias = nets.params().at("seg.out.bias").mutable_data();
  bias[0] = 5;
  bias[1] = -5;
  Rng rng(1);
  auto y = standard_normal_field<float>({2, 1, 8, 8}, rng);
  auto p = predict(nets, y);
  REQUIRE(p.size() == 2);
  for (const auto& m : p)
    for (auto v : m) CHECK(v == 0);
  CHECK(predict(nets, y) == p);
}

TEST_CASE("short training run: artifacts, determinism and evaluation") {
  auto rc = toy_run("train_a");
  rc.train.snapshots = 2;
  rc.train.snapshot_interval = 10;
  auto res = train(rc);
  REQUIRE(res.checkpoints.size() == 2);
  for (const char* f : {"resolved.cfg", "run_meta.txt", "metrics.csv", "timing.csv", "checkpoint.bsckpt"})
    CHECK(fs::exists(rc.out_dir / f));

  auto again = rc;
  again.out_dir = fresh_dir("train_b");
  train(again);
  CHECK(slurp(rc.out_dir / "metrics.csv") == slurp(again.out_dir / "metrics.csv"));

  auto e1 = fresh_dir("eval_a"), e2 = fresh_dir("eval_b");
  auto s = evaluate(res.checkpoints, rc.data_dir, {}, e1);
  evaluate(res.checkpoints, rc.data_dir, {}, e2);
  CHECK(slurp(e1 / "eval_cases.csv") == slurp(e2 / "eval_cases.csv"));
  CHECK(slurp(e1 / "eval_summary.csv") == slurp(e2 / "eval_summary.csv"));
  CHECK(s.domains.front().domain == kSourceDomain);
  CHECK(s.get(kSourceDomain).drop == 0.0);
  CHECK(s.domains.size() == 3);
  CHECK_THROWS_AS(evaluate(res.checkpoints, rc.data_dir, {"no-such-domain"}, std::nullopt), DataError);
}

TEST_CASE("decomposition writes 6+K images") {
  auto rc = toy_run("decomp");
  rc.train.steps = 2;
  auto res = train(rc);
  auto m = read_manifest(rc.data_dir);
  auto y = load_case_image(rc.data_dir, m.front());
  auto d = decompose(res.checkpoints.back(), y);
  CHECK(d.omega.dims == Dims{3, 32, 32});
  for (double v : d.upsilon.data) CHECK(v > 0);
  auto out = fresh_dir("decomp_out");
  auto files = write_decomposition(d, out);
  CHECK(files.size() == 6 + 3);
  auto d2 = decompose(res.checkpoints.back(), y);
  CHECK(d2.upsilon.data == d.upsilon.data);
  CHECK(d2.a.data == d.a.data);
}

TEST_CASE("smoke run: loss decreases over 200 steps") {
  auto rc = toy_run("smoke");
  rc.train.steps = 200;
  rc.train.log_every = 20;
  auto res = train(rc);
  CHECK(res.final_window_loss < res.first_loss);
}

TEST_CASE("code hash is a 40-digit hex SHA-1") {
  auto h = code_hash();
  CHECK(h.size() == 40);
  CHECK(h.find_first_not_of("0123456789abcdef") == std::string::npos);
}
