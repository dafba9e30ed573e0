#include <doctest.h>

#include <cmath>

#include "bayeseg/bayes.hpp"
#include "bayeseg/oracles.hpp"
#include "bayeseg/sar.hpp"

using namespace bayeseg;

namespace {

Array<double> random_array(const Dims& d, Rng& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  Array<double> a(d);
  for (auto& v : a.data) v = u(rng);
  return a;
}

Array<double> flat_simplex(std::size_t N, std::size_t K, std::size_t H, std::size_t W) {
  return Array<double>({N, K, H, W}, 1.0 / static_cast<double>(K));
}

}  // namespace

TEST_CASE("D annihilates constants and has the 5-point impulse response") {
  Array<double> c({5, 6}, 3.7);
  for (double v : sar::apply_D(c).data) CHECK(v == 0.0);

  Array<double> imp({5, 5});
  imp[2 * 5 + 2] = 1;
  auto d = sar::apply_D(imp);
  CHECK(d[12] == 1.0);
  for (std::size_t n : {7u, 11u, 13u, 17u}) CHECK(d[n] == -0.25);
  double rest = 0;
  for (std::size_t i = 0; i < 25; ++i)
    if (i != 12 && i != 7 && i != 11 && i != 13 && i != 17) rest += std::abs(d[i]);
  CHECK(rest == 0.0);
}

TEST_CASE("D matches the dense matrix, D^T its transpose") {
  Rng rng(2);
  for (std::size_t H : {2u, 5u, 9u})
    for (std::size_t W : {3u, 8u}) {
      auto f = random_array({H, W}, rng, -1, 1);
      auto M = sar_dense_matrix(H, W);
      const std::size_t P = H * W;
      std::vector<double> d(P), dt(P);
      sar::apply_D(f.data.data(), H, W, d.data());
      sar::apply_D_transpose(f.data.data(), H, W, dt.data());
      for (std::size_t r = 0; r < P; ++r) {
        double mf = 0, mtf = 0;
        for (std::size_t c = 0; c < P; ++c) {
          mf += M[r * P + c] * f[c];
          mtf += M[c * P + r] * f[c];
        }
        CHECK(std::abs(d[r] - mf) <= 1e-12);
        CHECK(std::abs(dt[r] - mtf) <= 1e-12);
      }
    }
  CHECK_THROWS_AS(sar::apply_D(Array<double>({1, 4})), ShapeError);
}

TEST_CASE("sar quadratic") {
  Tensor<double> c(Array<double>({1, 1, 4, 4}, 2.0));
  CHECK(sar::sar_quadratic(c, Tensor<double>(Array<double>({1, 1, 4, 4}, 1.0))).item() == 0.0);
  Array<double> imp({1, 1, 5, 5});
  imp[12] = 1;
  CHECK(sar::sar_quadratic(Tensor<double>(imp), Tensor<double>(Array<double>({1, 1, 5, 5}, 1.0))).item() ==
        doctest::Approx(0.625));
}

TEST_CASE("update_rho plug-in values") {
  HyperParams h;
  h.rho = {2, 0.5};
  Array<double> y({1, 1, 2, 2}, 1.0), x({1, 1, 2, 2}, 0.25), m({1, 1, 2, 2}, 0.75);
  for (double v : update_rho(y, x, m, h).data) CHECK(v == doctest::Approx(5.0));
  h.rho = {2, 1e-6};
  for (double v : update_rho(y, x, m, h).data) CHECK(v == doctest::Approx(2.5e6));
  CHECK_THROWS_AS(update_rho(y, Array<double>({1, 1, 2, 3}), m, h), ShapeError);
}

TEST_CASE("update_upsilon plug-in values") {
  HyperParams h;
  const double s = 0.3;
  Array<double> mu_x({1, 1, 4, 4}, 1.2), sig({1, 1, 4, 4}, std::sqrt(s));
  auto ups = update_upsilon(flat_simplex(1, 3, 4, 4), mu_x, sig, h);
  for (double v : ups.data) CHECK(v == doctest::Approx((2 * 2.0 + 3) / (2 * s + 2e-8)));
  auto lim = update_upsilon(flat_simplex(1, 3, 4, 4), mu_x, Array<double>({1, 1, 4, 4}), h);
  for (double v : lim.data) CHECK(v == doctest::Approx(3.5e8));
}

TEST_CASE("update_omega plug-in and monotonicity") {
  HyperParams h;
  auto z = flat_simplex(1, 2, 4, 4);
  Array<double> c({1, 2}, 1.0);
  auto om = update_omega(z, Array<double>({1, 2, 4, 4}), c, h);
  for (double v : om.data) CHECK(v == doctest::Approx(2.5e4));

  Rng rng(8);
  auto zr = random_array({1, 2, 4, 4}, rng, 0, 1);
  auto sz = random_array({1, 2, 4, 4}, rng, 0.1, 1);
  auto a = update_omega(zr, sz, c, h);
  Array<double> c2({1, 2}, 2.0);
  auto b = update_omega(zr, sz, c2, h);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(b[i] < a[i]);
}

TEST_CASE("update_pi plug-in and monotonicity") {
  HyperParams h;
  auto pi = update_pi(Array<double>({1, 3, 4, 4}, 5.0), flat_simplex(1, 3, 4, 4),
                      Array<double>({1, 3, 4, 4}), h);
  for (std::size_t k = 0; k < 3; ++k) {
    CHECK(pi.beta[k] == doctest::Approx(2.0));
    CHECK(pi.alpha[k] == doctest::Approx(10.0));
    CHECK(pi.c[k] == doctest::Approx(expected_neg_log1m({10, 2})));
  }
  Rng rng(3);
  auto z = random_array({1, 2, 4, 4}, rng, 0, 1);
  auto om = random_array({1, 2, 4, 4}, rng, 0.1, 3);
  auto sz = random_array({1, 2, 4, 4}, rng, 0.1, 1);
  auto base = update_pi(om, z, sz, h);
  sz[5] *= 1.5;
  auto more = update_pi(om, z, sz, h);
  CHECK(more.beta[0] > base.beta[0]);
  CHECK(more.beta[1] == base.beta[1]);
}

TEST_CASE("loss term examples") {
  HyperParams h;
  Tensor<double> zero(Array<double>({2, 1, 3, 3}));
  CHECK(loss_mu_m(zero, h).item() == 0.0);
  Tensor<double> ones(Array<double>({2, 1, 3, 3}, 1.0));
  CHECK(loss_sigma_m(ones, h).item() == doctest::Approx(4.5));  // d_y / 2 per image

  CHECK(total_loss(Tensor<double>::scalar(0.7), Tensor<double>::scalar(0.0), 100).item() ==
        doctest::Approx(0.7));
  CHECK(total_loss(Tensor<double>::scalar(0.7), Tensor<double>::scalar(3.0), 0).item() ==
        doctest::Approx(0.7));
  CHECK(total_loss(Tensor<double>::scalar(0.7), Tensor<double>::scalar(3.0), 100).item() ==
        doctest::Approx(300.7));
  CHECK(h.lambda == 100.0);
}

TEST_CASE("cross entropy") {
  Array<double> u({1, 2, 2, 2});
  for (std::size_t i = 0; i < 4; ++i) u[i] = 1;
  CHECK(cross_entropy(u, Tensor<double>(u)).item() == doctest::Approx(0.0));
  CHECK(cross_entropy(u, Tensor<double>(Array<double>({1, 2, 2, 2}, 0.5))).item() ==
        doctest::Approx(std::log(2.0)));
  Array<double> bad = u;
  bad[4] = 1;
  CHECK_THROWS_AS(cross_entropy(bad, Tensor<double>(Array<double>({1, 2, 2, 2}, 0.5))), DataError);
  Array<double> frac = u;
  frac[0] = 0.5;
  CHECK_THROWS_AS(check_one_hot(frac), DataError);
}

TEST_CASE("loss mask drops terms") {
  Rng rng(1);
  HyperParams h;
  const Dims one{1, 1, 4, 4}, cls{1, 2, 4, 4};
  Array<double> z = flat_simplex(1, 2, 4, 4);
  VariationalState<double> s{Tensor<double>(random_array(one, rng, -1, 1)),
                             Tensor<double>(random_array(one, rng, 0.2, 1)),
                             Tensor<double>(random_array(one, rng, -1, 1)),
                             Tensor<double>(random_array(one, rng, 0.2, 1)),
                             Tensor<double>(z),
                             Tensor<double>(random_array(cls, rng, 0.2, 1)),
                             random_array(one, rng, 0.5, 2),
                             random_array(one, rng, 0.5, 2),
                             random_array(cls, rng, 0.5, 2),
                             prior_pi<double>(1, 2, 16, h)};
  Tensor<double> y(random_array(one, rng, -1, 1)), xs(random_array(one, rng, -1, 1)),
      ms(random_array(one, rng, -1, 1));
  auto full = variational_loss(y, s, xs, ms, h);
  LossMask mask;
  mask.set(LossTerm::Y, false);
  auto part = variational_loss(y, s, xs, ms, h, mask);
  CHECK(part.terms[0] == 0.0);
  CHECK(part.total.item() == doctest::Approx(full.total.item() - full.terms[0]));
}

TEST_CASE("hyper-parameter validation") {
  HyperParams h;
  CHECK_NOTHROW(h.validate());
  h.rho.rate = 0;
  CHECK_THROWS(h.validate());
  HyperParams g;
  g.lambda = -1;
  CHECK_THROWS(g.validate());
}
