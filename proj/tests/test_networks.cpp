#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "bayeseg/networks.hpp"
#include "bayeseg/serialize.hpp"

using namespace bayeseg;
namespace fs = std::filesystem;

namespace {

NetConfig small_net(std::size_t classes = 3) {
  NetConfig nc;
  nc.width = 4;
  nc.res_blocks_shape = 2;
  nc.res_blocks_app = 1;
  nc.classes = classes;
  nc.seed = 3;
  return nc;
}

Tensor<float> random_image(std::size_t n, std::size_t h, std::size_t w, std::uint64_t seed) {
  Rng rng(seed);
  return Tensor<float>(standard_normal_field<float>({n, 1, h, w}, rng));
}

fs::path temp_path(const std::string& name) {
  auto dir = fs::temp_directory_path() / "bayeseg_tests";
  fs::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("shape and appearance heads: two channels, positive std") {
  BayeSegNets<float> nets(small_net());
  auto y = random_image(2, 8, 12, 1);
  auto s = nets.shape_forward(y);
  CHECK(s.mean.dims() == Dims{2, 1, 8, 12});
  REQUIRE(s.std);
  for (float v : s.std->data()) CHECK(v > 0);
  auto a = nets.appearance_forward(y);
  REQUIRE(a.std);
  CHECK(a.mean.dims() == Dims{2, 1, 8, 12});
  for (float v : a.std->data()) CHECK(v > 0);
}

TEST_CASE("segmentation head emits 2K channels, K when deterministic") {
  BayeSegNets<float> nets(small_net(3));
  auto raw = nets.seg_forward(random_image(1, 8, 8, 2));
  CHECK(raw.dims() == Dims{1, 6, 8, 8});
  auto g = nets.split_seg_output(raw);
  REQUIRE(g.std);
  for (float v : g.std->data()) CHECK(v > 0);

  auto nc = small_net(3);
  nc.stochastic_segmentation = false;
  nc.stochastic_appearance = false;
  BayeSegNets<float> det(nc);
  CHECK(det.seg_forward(random_image(1, 8, 8, 2)).dims() == Dims{1, 3, 8, 8});
  CHECK_FALSE(det.appearance_forward(random_image(1, 8, 8, 2)).std.has_value());
  CHECK_THROWS_AS(nets.seg_forward(random_image(1, 6, 8, 2)), ShapeError);
}

TEST_CASE("same seed gives identical parameters") {
  BayeSegNets<float> a(small_net()), b(small_net());
  for (std::size_t i = 0; i < a.params().size(); ++i)
    CHECK(a.params().entries()[i].second.data() == b.params().entries()[i].second.data());
}

TEST_CASE("sample_appearance limits") {
  Array<float> m({4}, {1, 2, 3, 4}), eps({4}, {0.5f, -1, 2, 0});
  auto big = sample_appearance(m, Array<float>({4}, 1e12f), eps);
  for (std::size_t i = 0; i < 4; ++i) CHECK(big[i] == doctest::Approx(m[i]).epsilon(1e-5));
  auto zero = sample_appearance(m, Array<float>({4}, 3.0f), Array<float>({4}));
  CHECK(zero.data == m.data);

  Rng rng(12);
  const std::size_t n = 100000;
  auto noise = standard_normal_field<double>({n}, rng);
  auto draws = sample_appearance(Array<double>({n}, 0.0), Array<double>({n}, 4.0), noise);
  double v = 0;
  for (double x : draws.data) v += x * x;
  CHECK(v / n == doctest::Approx(0.25).epsilon(0.02));
}

TEST_CASE("tensor file round trip and corruption") {
  Rng rng(4);
  auto a = standard_normal_field<float>({2, 3, 4}, rng);
  auto path = temp_path("t.bsten");
  save_tensor(path, a);
  auto b = load_tensor<float>(path);
  CHECK(b.dims == a.dims);
  CHECK(b.data == a.data);

  std::stringstream ss;
  write_tensor(ss, a);
  std::string bytes = ss.str();
  CHECK(bytes.substr(0, 5) == "BSTEN");
  std::stringstream truncated(bytes.substr(0, bytes.size() - 3));
  CHECK_THROWS_AS(read_tensor<float>(truncated), FormatError);
  std::string bad = bytes;
  bad[0] = 'X';
  std::stringstream badmagic(bad);
  CHECK_THROWS_AS(read_tensor<float>(badmagic), FormatError);
  CHECK_THROWS_AS(load_tensor<float>(temp_path("missing.bsten")), IoError);
}

TEST_CASE("checkpoint round trip is bit exact, including optimiser state") {
  BayeSegNets<float> a(small_net());
  Adam<float> opt;
  for (auto& [n, p] : a.params().entries()) opt.add_param(p);
  auto y = random_image(1, 8, 8, 5);
  auto s = a.shape_forward(y);
  sum(s.mean).backward();
  opt.step();

  auto path = temp_path("c.bsckpt");
  save_checkpoint(path, "net.width = 4\n", a.params(), &opt);
  auto nc = small_net();
  nc.seed = 99;
  BayeSegNets<float> b(nc);
  Adam<float> opt2;
  for (auto& [n, p] : b.params().entries()) opt2.add_param(p);
  auto ck = load_checkpoint(path);
  CHECK(ck.config_echo == "net.width = 4\n");
  restore_params(ck, b.params(), &opt2);
  for (std::size_t i = 0; i < a.params().size(); ++i) {
    CHECK(a.params().entries()[i].second.data() == b.params().entries()[i].second.data());
    CHECK(opt.first_moment(i) == opt2.first_moment(i));
    CHECK(opt.second_moment(i) == opt2.second_moment(i));
  }
  CHECK(opt2.steps() == opt.steps());

  BayeSegNets<float> other(small_net(2));
  CHECK_THROWS_AS(restore_params(ck, other.params()), FormatError);
}
