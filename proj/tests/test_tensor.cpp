#include <doctest.h>

#include <cmath>
#include <random>

#include "bayeseg/adam.hpp"
#include "bayeseg/oracles.hpp"
#include "bayeseg/tensor.hpp"

using namespace bayeseg;

namespace {

Tensor<double> leaf(Dims d, std::vector<double> v, bool grad = true) {
  return Tensor<double>(Array<double>(std::move(d), std::move(v)), grad);
}

Array<double> random_array(const Dims& d, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1, 1);
  Array<double> a(d);
  for (auto& v : a.data) v = u(rng);
  return a;
}

}  // namespace

TEST_CASE("conv2d all-ones sum and identity kernel") {
  auto x = Tensor<double>(Array<double>({1, 1, 3, 3}, 1.0));
  auto k = Tensor<double>(Array<double>({1, 1, 3, 3}, 1.0));
  auto y = conv2d(x, k, 1, Padding{1, PadMode::Zero});
  CHECK(y.dims() == Dims{1, 1, 3, 3});
  CHECK(y.data()[4] == doctest::Approx(9.0));
  CHECK(y.data()[0] == doctest::Approx(4.0));

  std::mt19937_64 rng(1);
  auto in = Tensor<double>(random_array({2, 1, 5, 4}, rng));
  Array<double> id({1, 1, 3, 3});
  id[4] = 1;
  auto out = conv2d(in, Tensor<double>(id), 1, Padding{1, PadMode::Replicate});
  for (std::size_t i = 0; i < in.numel(); ++i) CHECK(out.data()[i] == in.data()[i]);
}

TEST_CASE("conv2d input gradient matches finite differences") {
  std::mt19937_64 rng(7);
  auto xa = random_array({1, 2, 5, 5}, rng);
  auto ka = random_array({3, 2, 3, 3}, rng);
  auto wa = random_array({1, 3, 5, 5}, rng);
  auto loss_of = [&](const Array<double>& x) {
    return sum(mul(conv2d(Tensor<double>(x), Tensor<double>(ka), 1, Padding{1, PadMode::Zero}),
                   Tensor<double>(wa)))
        .item();
  };
  Tensor<double> x(xa, true);
  sum(mul(conv2d(x, Tensor<double>(ka), 1, Padding{1, PadMode::Zero}), Tensor<double>(wa))).backward();
  std::vector<double> num;
  const double h = 1e-5;
  for (std::size_t i = 0; i < xa.size(); ++i) {
    auto p = xa, m = xa;
    p[i] += h;
    m[i] -= h;
    num.push_back((loss_of(p) - loss_of(m)) / (2 * h));
  }
  CHECK(relative_error(x.grad(), num) < 1e-6);
}

TEST_CASE("conv2d rejects mismatched channels") {
  auto x = Tensor<double>(Array<double>({1, 2, 4, 4}));
  auto k = Tensor<double>(Array<double>({1, 3, 3, 3}));
  CHECK_THROWS_AS(conv2d(x, k), ShapeError);
}

TEST_CASE("elementwise examples") {
  auto x = leaf({2}, {-1, 2});
  CHECK(relu(x).data() == std::vector<double>{0, 2});
  CHECK(softplus(leaf({1}, {0})).item() == doctest::Approx(std::log(2.0)));
  auto s = leaf({1}, {3});
  square(s).backward();
  CHECK(s.grad()[0] == doctest::Approx(6.0));
  CHECK_THROWS_AS(log(leaf({2}, {1, -1})), DomainError);
  CHECK_THROWS_AS(div(leaf({1}, {1}), leaf({1}, {0})), DomainError);
}

TEST_CASE("broadcasting follows trailing-dimension rules") {
  auto a = leaf({2, 3}, {1, 2, 3, 4, 5, 6});
  auto b = leaf({3}, {10, 20, 30});
  auto c = add(a, b);
  CHECK(c.data() == std::vector<double>{11, 22, 33, 14, 25, 36});
  sum(c).backward();
  CHECK(b.grad() == std::vector<double>{2, 2, 2});
  CHECK_THROWS_AS(add(a, leaf({2}, {1, 2})), ShapeError);
}

TEST_CASE("channel softmax is symmetric and stable") {
  auto p = channel_softmax(leaf({1, 3, 1, 1}, {0.5, 0.5, 0.5}));
  for (double v : p.data()) CHECK(v == doctest::Approx(1.0 / 3));
  auto q = channel_softmax(leaf({1, 2, 1, 1}, {1000, 0}));
  CHECK(q.data()[0] == doctest::Approx(1.0));
  CHECK(q.data()[1] == doctest::Approx(0.0));
  CHECK(std::isfinite(q.data()[1]));
}

TEST_CASE("reductions") {
  CHECK(weighted_sq_norm(leaf({2}, {1, 2}), leaf({2}, {1, 1})).item() == doctest::Approx(5.0));
  CHECK(weighted_sq_norm(leaf({2}, {1, 2}), leaf({2}, {0, 0})).item() == 0.0);
  std::mt19937_64 rng(3);
  auto v = random_array({4, 5}, rng), w = random_array({4, 5}, rng);
  for (auto& x : w.data) x = std::abs(x);
  double loop = 0;
  for (std::size_t i = 0; i < v.size(); ++i) loop += w[i] * v[i] * v[i];
  CHECK(weighted_sq_norm(Tensor<double>(v), Tensor<double>(w)).item() == doctest::Approx(loop).epsilon(1e-14));
  CHECK(mean(leaf({4}, {1, 2, 3, 4})).item() == doctest::Approx(2.5));
  CHECK_THROWS_AS(weighted_sq_norm(leaf({1}, {1}), leaf({1}, {-1})), DomainError);
}

TEST_CASE("backward trivial cases") {
  auto x = leaf({3}, {1, 2, 3});
  auto c = mul(x, Tensor<double>(Array<double>({3}, 0.0)));
  sum(c).backward();
  CHECK(x.grad() == std::vector<double>{0, 0, 0});

  auto y = leaf({3}, {1, 2, 3});
  auto w = Tensor<double>(Array<double>({3}, {0.5, -1, 4}));
  sum(mul(w, y)).backward();
  CHECK(y.grad() == std::vector<double>{0.5, -1, 4});
}

TEST_CASE("shared sub-expressions accumulate gradients once per use") {
  auto x = leaf({1}, {2});
  auto s = square(x);
  add(s, s).backward();  // d/dx 2x^2 = 4x
  CHECK(x.grad()[0] == doctest::Approx(8.0));
}

TEST_CASE("backward requires a scalar root") {
  auto x = leaf({2}, {1, 2});
  CHECK_THROWS(square(x).backward());
}

TEST_CASE("pooling and upsampling shapes") {
  auto x = leaf({1, 1, 4, 4}, std::vector<double>(16, 1.0));
  CHECK(avg_pool2(x).dims() == Dims{1, 1, 2, 2});
  CHECK(upsample2(avg_pool2(x)).dims() == Dims{1, 1, 4, 4});
  CHECK_THROWS_AS(avg_pool2(leaf({1, 1, 3, 4}, std::vector<double>(12, 1.0))), ShapeError);
}

TEST_CASE("instance norm gives zero mean and unit variance per channel") {
  std::mt19937_64 rng(5);
  auto x = Tensor<double>(random_array({2, 3, 6, 6}, rng));
  auto y = instance_norm(x);
  for (std::size_t p = 0; p < 6; ++p) {
    double m = 0, v = 0;
    for (std::size_t i = 0; i < 36; ++i) m += y.data()[p * 36 + i];
    m /= 36;
    for (std::size_t i = 0; i < 36; ++i) v += std::pow(y.data()[p * 36 + i] - m, 2);
    CHECK(std::abs(m) < 1e-12);
    CHECK(v / 36 == doctest::Approx(1.0).epsilon(1e-3));
  }
}

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
  Tensor<double> w(Array<double>({2}, {1.0, -2.0}), true);
  Adam<double> opt({0.1});
  opt.add_param(w);
  for (int i = 0; i < 3; ++i) opt.step();
  CHECK(w.data() == std::vector<double>{1.0, -2.0});
}

TEST_CASE("adam: constant gradient gives steps of size lr") {
  Tensor<double> w(Array<double>({1}, {0.0}), true);
  Adam<double> opt({0.01});
  opt.add_param(w);
  double prev = 0;
  for (int i = 0; i < 200; ++i) {
    opt.zero_grad();
    mul(w, Tensor<double>::scalar(3.0)).backward();  // gradient 3
    opt.step();
    double step = w.data()[0] - prev;
    prev = w.data()[0];
    if (i > 100) CHECK(step == doctest::Approx(-0.01).epsilon(1e-4));
  }
}

TEST_CASE("adam: w^2 strictly decreases over 10 steps") {
  Tensor<double> w(Array<double>({1}, {1.0}), true);
  Adam<double> opt({0.1});
  opt.add_param(w);
  double f = 1.0;
  for (int i = 0; i < 10; ++i) {
    opt.zero_grad();
    auto loss = square(w);
    sum(loss).backward();
    opt.step();
    double next = w.data()[0] * w.data()[0];
    CHECK(next < f);
    f = next;
  }
}
