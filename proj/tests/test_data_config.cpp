#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include "bayeseg/config.hpp"
#include "bayeseg/image_io.hpp"
#include "bayeseg/synth_data.hpp"

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

DomainSpec identity_domain() {
  DomainSpec d = source_domain();
  d.name = "identity";
  return d;
}

}  // namespace

TEST_CASE("config parsing, typed reads and unknown keys") {
  auto cfg = KeyValueConfig::parse("# c\n a.b = 3\nflag=true\nlist = x, y,,z\nnum=1e-6\n");
  CHECK(cfg.get_int("a.b", 0) == 3);
  CHECK(cfg.get_bool("flag", false));
  CHECK(cfg.get_list("list", {}) == std::vector<std::string>{"x", "y", "z"});
  CHECK(cfg.get_double("num", 0) == 1e-6);
  CHECK_NOTHROW(cfg.check_all_used());

  auto typo = KeyValueConfig::parse("train.stesp = 5\n");
  typo.get_uint("train.steps", 1);
  CHECK_THROWS_AS(typo.check_all_used(), ConfigError);
  CHECK_THROWS_AS(KeyValueConfig::parse("novalue\n"), ConfigError);
  CHECK_THROWS_AS(KeyValueConfig::parse("x = abc\n").get_double("x", 0), ConfigError);
  CHECK_THROWS_AS(KeyValueConfig::parse("x = -1\n").get_uint("x", 0), ConfigError);

  KeyValueConfig o;
  o.apply_override("hyper.lambda=0.5");
  o.apply_override("hyper.lambda=2");
  CHECK(o.get_double("hyper.lambda", 0) == 2);
  CHECK_THROWS_AS(o.apply_override("nonsense"), ConfigError);
}

TEST_CASE("number formatting round-trips") {
  for (double v : {0.1, 1e-8, 3.0, -2.5e300, 1.0 / 3})
    CHECK(std::stod(format_double(v)) == v);
}

TEST_CASE("echo round trip") {
  auto cfg = KeyValueConfig::parse("b = 2\na = 1\n");
  auto again = KeyValueConfig::parse(cfg.to_text());
  CHECK(again.values() == cfg.values());
  CHECK(cfg.to_text() == "a = 1\nb = 2\n");
}

TEST_CASE("pgm round trip") {
  GrayImage img;
  img.height = 3;
  img.width = 2;
  img.maxval = 2;
  img.pixels = {0, 1, 2, 2, 1, 0};
  auto p = fresh_dir("pgm") / "a.pgm";
  fs::create_directories(p.parent_path());
  write_pgm(p, img);
  auto back = read_pgm(p);
  CHECK(back.pixels == img.pixels);
  CHECK(back.maxval == 2);
  double vals[4] = {1, 10, 100, 1000};
  auto g = to_gray8(vals, 2, 2, true);
  CHECK(g.pixels.front() == 0);
  CHECK(g.pixels.back() == 255);
  CHECK(std::abs(int(g.pixels[1]) - 85) <= 1);
}

TEST_CASE("base render has exact class means without texture") {
  SceneSpec scene;
  Rng rng(1);
  auto pose = sample_pose(scene, rng);
  auto labels = rasterize(scene, pose);
  DomainSpec d = source_domain();
  d.class_means = {0.2, 0.5, 0.8};
  d.class_stds = {0, 0, 0};
  auto img = render_base(scene, labels, d, rng);
  for (std::size_t i = 0; i < labels.size(); ++i) CHECK(img[i] == d.class_means[labels[i]]);
}

TEST_CASE("label areas match the ellipse formulas within 3%") {
  SceneSpec scene;
  Rng rng(2);
  for (int t = 0; t < 50; ++t) {
    auto pose = sample_pose(scene, rng);
    auto labels = rasterize(scene, pose);
    double disk = 0, ring = 0;
    for (auto l : labels) {
      disk += l == 1;
      ring += l == 2;
    }
    CHECK(std::abs(disk - disk_area(pose)) / disk_area(pose) <= 0.03);
    CHECK(std::abs(ring - ring_area(pose)) / ring_area(pose) <= 0.03);
  }
}

TEST_CASE("same seed gives identical case, labels invariant across domains") {
  SceneSpec scene;
  Rng a(5), b(5), c(5);
  auto x = generate_case(scene, source_domain(), a);
  auto y = generate_case(scene, source_domain(), b);
  CHECK(x.image.data == y.image.data);
  CHECK(x.labels == y.labels);
  auto z = generate_case(scene, builtin_domain("contrast-inverted"), c);
  CHECK(z.labels == x.labels);
  CHECK(x.image.dims == Dims{1, 1, 64, 64});
}

TEST_CASE("domain shift: identity and affine invariance") {
  SceneSpec scene;
  Rng rng(7);
  auto pose = sample_pose(scene, rng);
  auto img = zscore(render_base(scene, rasterize(scene, pose), source_domain(), rng));
  auto same = apply_domain_shift(img, identity_domain(), rng);
  for (std::size_t i = 0; i < img.size(); ++i) CHECK(std::abs(same[i] - img[i]) <= 1e-12);

  DomainSpec affine = identity_domain();
  affine.contrast_scale_min = affine.contrast_scale_max = 2.5;
  affine.contrast_offset_min = affine.contrast_offset_max = 0.3;
  auto shifted = apply_domain_shift(img, affine, rng);
  for (std::size_t i = 0; i < img.size(); ++i) CHECK(std::abs(shifted[i] - img[i]) <= 1e-12);

  CHECK_THROWS_AS(zscore(Array<double>({4, 4}, 1.0)), DataError);
}

TEST_CASE("bias field makes row means spread") {
  Array<double> flat({64, 64}, 0.5);
  for (std::size_t i = 0; i < flat.size(); i += 2) flat[i] = 0.4;
  DomainSpec d = identity_domain();
  d.bias_amplitude = 0.3;
  d.bias_length = 48;
  Rng rng(3);
  auto out = apply_domain_shift(flat, d, rng);
  double lo = 1e9, hi = -1e9;
  for (std::size_t r = 0; r < 64; ++r) {
    double m = 0;
    for (std::size_t c = 0; c < 64; ++c) m += out[r * 64 + c];
    m /= 64;
    lo = std::min(lo, m);
    hi = std::max(hi, m);
  }
  CHECK(hi - lo >= 0.1);
}

TEST_CASE("benchmark on disk: counts, manifest, byte-identical regeneration") {
  BenchmarkSpec spec;
  spec.train = 4;
  spec.val = 2;
  spec.test = 3;
  spec.target_test = 2;
  auto d1 = fresh_dir("bench1"), d2 = fresh_dir("bench2");
  auto m = build_benchmark(spec, d1);
  build_benchmark(spec, d2);
  CHECK(m.size() == 4 + 2 + 3 + 2 * 4);
  CHECK(read_manifest(d1).size() == m.size());
  CHECK(slurp(d1 / kManifestName) == slurp(d2 / kManifestName));
  std::size_t files = 0;
  for (const auto& e : m) {
    CHECK(fs::exists(d1 / e.image_path));
    CHECK(fs::exists(d1 / e.label_path));
    CHECK(slurp(d1 / e.image_path) == slurp(d2 / e.image_path));
    ++files;
  }
  CHECK(files == m.size());
  auto labels = load_case_labels(d1, m[0], 3);
  CHECK(labels.size() == 64 * 64);

  BenchmarkSpec defaults;
  CHECK(defaults.total_cases() == 200 + 20 + 30 + 120);
}

TEST_CASE("benchmark config round trip") {
  BenchmarkSpec spec;
  spec.seed = 17;
  spec.targets.pop_back();
  KeyValueConfig cfg;
  spec.to_config(cfg);
  auto back = BenchmarkSpec::from_config(cfg);
  CHECK_NOTHROW(cfg.check_all_used());
  CHECK(back.seed == 17);
  CHECK(back.targets.size() == 3);
  KeyValueConfig again;
  back.to_config(again);
  CHECK(again.to_text() == cfg.to_text());
}
