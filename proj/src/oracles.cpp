#include "bayeseg/oracles.hpp"

#include <boost/math/quadrature/exp_sinh.hpp>
#include <boost/math/tools/minima.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <set>

#include "bayeseg/bayes.hpp"
#include "bayeseg/distributions.hpp"
#include "bayeseg/networks.hpp"
#include "bayeseg/sar.hpp"
#include "bayeseg/tensor.hpp"

namespace bayeseg {

namespace {

constexpr double kEulerGamma = 0.57721566490153286061;

OracleResult make(const std::string& family, const std::string& name, double err, double tol,
                  std::size_t n, std::string detail = {}) {
  OracleResult r;
  r.family = family;
  r.name = name;
  r.max_error = err;
  r.tolerance = tol;
  r.passed = std::isfinite(err) && err <= tol;
  r.instances = n;
  r.detail = std::move(detail);
  return r;
}

double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

double log_uniform(Rng& rng, double lo, double hi) {
  return std::exp(uniform(rng, std::log(lo), std::log(hi)));
}

Array<double> random_array(const Dims& d, Rng& rng, double lo, double hi) {
  Array<double> a(d);
  for (auto& v : a.data) v = uniform(rng, lo, hi);
  return a;
}

// Random positive simplex over dim 1 of [N,K,H,W].
Array<double> random_simplex(const Dims& d, Rng& rng) {
  Array<double> a(d);
  std::size_t N = d[0], K = d[1], P = d[2] * d[3];
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t i = 0; i < P; ++i) {
      double s = 0;
      for (std::size_t k = 0; k < K; ++k) s += a[(n * K + k) * P + i] = uniform(rng, 0.05, 1.0);
      for (std::size_t k = 0; k < K; ++k) a[(n * K + k) * P + i] /= s;
    }
  return a;
}

// Replicate-padded 5-point stencil written out neighbour by neighbour.
double stencil_at(const double* f, std::size_t H, std::size_t W, std::size_t i, std::size_t j) {
  auto at = [&](long r, long c) {
    r = std::clamp<long>(r, 0, static_cast<long>(H) - 1);
    c = std::clamp<long>(c, 0, static_cast<long>(W) - 1);
    return f[static_cast<std::size_t>(r) * W + static_cast<std::size_t>(c)];
  };
  long r = static_cast<long>(i), c = static_cast<long>(j);
  return at(r, c) - 0.25 * (at(r - 1, c) + at(r + 1, c) + at(r, c - 1) + at(r, c + 1));
}

std::vector<double> loop_D(const double* f, std::size_t H, std::size_t W) {
  std::vector<double> out(H * W);
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j) out[i * W + j] = stencil_at(f, H, W, i, j);
  return out;
}

double rel_scalar(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-300});
}

// ---------------------------------------------------------------------------
// digamma

std::vector<OracleResult> digamma_family(Rng& rng) {
  const std::string fam = "digamma";
  std::vector<OracleResult> out;
  double e = 0;
  e = std::max(e, std::abs(digamma(1.0) + kEulerGamma));
  e = std::max(e, std::abs(digamma(2.0) - (1.0 - kEulerGamma)));
  e = std::max(e, std::abs(digamma(0.5) - (-kEulerGamma - 2 * std::numbers::ln2)));
  out.push_back(make(fam, "known values psi(1), psi(2), psi(1/2)", e, 1e-10, 3));

  e = 0;
  for (int t = 0; t < 100; ++t) {
    double x = uniform(rng, 0.5, 100.0);
    e = std::max(e, std::abs(digamma(x + 1) - digamma(x) - 1.0 / x));
  }
  out.push_back(make(fam, "recurrence psi(x+1)-psi(x)=1/x", e, 1e-10, 100));

  e = 0;
  for (int t = 0; t < 100; ++t) {
    double x = uniform(rng, 0.05, 0.95);
    double lhs = digamma(1 - x) - digamma(x);
    double rhs = std::numbers::pi / std::tan(std::numbers::pi * x);
    e = std::max(e, std::abs(lhs - rhs) / std::max(1.0, std::abs(rhs)));
  }
  out.push_back(make(fam, "reflection psi(1-x)-psi(x)=pi cot(pi x)", e, 1e-10, 100));

  // c = Psi(a+b) - Psi(b) strictly decreasing in b.
  std::size_t violations = 0, n = 0;
  for (double a = 0.5; a <= 10; a += 0.5) {
    double prev = std::numeric_limits<double>::infinity();
    for (double b = 0.5; b <= 20; b += 0.25, ++n) {
      double c = expected_neg_log1m({a, b});
      if (!(c < prev) || !(c > 0)) ++violations;
      prev = c;
    }
  }
  out.push_back(make(fam, "c(alpha,beta) positive and decreasing in beta", static_cast<double>(violations),
                     0, n));
  return out;
}

// ---------------------------------------------------------------------------
// Conjugate posterior means by quadrature

std::vector<OracleResult> conjugacy_family(Rng& rng) {
  const std::string fam = "conjugacy";
  std::vector<OracleResult> out;
  const std::size_t H = 6, W = 7, P = H * W;

  // rho: likelihood N(r | 0, 1/rho) per pixel.
  {
    double err = 0;
    std::size_t n = 0;
    while (n < 120) {
      HyperParams h;
      h.rho = {uniform(rng, 0.5, 5.0), log_uniform(rng, 1e-8, 1.0)};
      auto y = random_array({1, 1, H, W}, rng, -3, 3);
      auto x = random_array({1, 1, H, W}, rng, -2, 2);
      auto m = random_array({1, 1, H, W}, rng, -1, 1);
      auto rho = update_rho(y, x, m, h);
      for (std::size_t t = 0; t < 10; ++t, ++n) {
        std::size_t i = std::uniform_int_distribution<std::size_t>(0, P - 1)(rng);
        double r = y[i] - x[i] - m[i];
        double q = gamma_posterior_mean_quadrature(h.rho.shape, h.rho.rate, {r * r});
        err = std::max(err, rel_scalar(rho[i], q));
      }
    }
    out.push_back(make(fam, "rho update vs quadrature", err, 1e-6, n));
  }

  // upsilon: K factors (z_k upsilon)^{1/2} exp(-z_k upsilon E/2), E = (D mu_x)^2 + 2 sigma_x^2.
  {
    double err = 0;
    std::size_t n = 0;
    while (n < 120) {
      HyperParams h;
      h.upsilon = {uniform(rng, 0.5, 5.0), log_uniform(rng, 1e-8, 1.0)};
      std::size_t K = 2 + n % 3;
      auto mu_x = random_array({1, 1, H, W}, rng, -2, 2);
      auto sig_x = random_array({1, 1, H, W}, rng, 0.01, 1.0);
      auto mu_z = random_simplex({1, K, H, W}, rng);
      auto ups = update_upsilon(mu_z, mu_x, sig_x, h);
      auto d = loop_D(mu_x.data.data(), H, W);
      for (std::size_t t = 0; t < 10; ++t, ++n) {
        std::size_t i = std::uniform_int_distribution<std::size_t>(0, P - 1)(rng);
        double E = d[i] * d[i] + 2 * sig_x[i] * sig_x[i];
        std::vector<double> q;
        for (std::size_t k = 0; k < K; ++k) q.push_back(mu_z[k * P + i] * E);
        double ref = gamma_posterior_mean_quadrature(h.upsilon.shape, h.upsilon.rate, q);
        err = std::max(err, rel_scalar(ups[i], ref));
      }
    }
    out.push_back(make(fam, "upsilon update vs quadrature", err, 1e-6, n));
  }

  // omega: one factor with E = c_k [(D mu_z)^2 + 2 sigma_z^2].
  {
    double err = 0;
    std::size_t n = 0;
    while (n < 120) {
      HyperParams h;
      h.omega = {uniform(rng, 0.5, 5.0), log_uniform(rng, 1e-8, 1.0)};
      const std::size_t K = 3;
      auto mu_z = random_simplex({1, K, H, W}, rng);
      auto sig_z = random_array({1, K, H, W}, rng, 0.01, 1.0);
      auto c = random_array({1, K}, rng, 0.1, 5.0);
      auto om = update_omega(mu_z, sig_z, c, h);
      for (std::size_t t = 0; t < 10; ++t, ++n) {
        std::size_t k = std::uniform_int_distribution<std::size_t>(0, K - 1)(rng);
        std::size_t i = std::uniform_int_distribution<std::size_t>(0, P - 1)(rng);
        auto d = loop_D(mu_z.data.data() + k * P, H, W);
        double E = d[i] * d[i] + 2 * sig_z[k * P + i] * sig_z[k * P + i];
        double ref = gamma_posterior_mean_quadrature(h.omega.shape, h.omega.rate, {c[k] * E});
        err = std::max(err, rel_scalar(om[k * P + i], ref));
      }
    }
    out.push_back(make(fam, "omega update vs quadrature", err, 1e-6, n));
  }

  // pi: beta by explicit loops; alpha and c from their definitions.
  {
    double err = 0;
    std::size_t n = 0;
    for (int t = 0; t < 40; ++t) {
      HyperParams h;
      h.pi = {uniform(rng, 0.5, 5.0), uniform(rng, 0.5, 5.0)};
      const std::size_t N = 2, K = 3;
      auto mu_z = random_simplex({N, K, H, W}, rng);
      auto sig_z = random_array({N, K, H, W}, rng, 0.0, 1.0);
      auto om = random_array({N, K, H, W}, rng, 0.1, 100.0);
      auto pi = update_pi(om, mu_z, sig_z, h);
      for (std::size_t nk = 0; nk < N * K; ++nk, ++n) {
        const double* z = mu_z.data.data() + nk * P;
        double beta = 0;
        for (std::size_t i = 0; i < H; ++i)
          for (std::size_t j = 0; j < W; ++j) {
            std::size_t p = i * W + j;
            double dz = stencil_at(z, H, W, i, j);
            double s = sig_z[nk * P + p];
            beta += om[nk * P + p] * (dz * dz + 2 * s * s);
          }
        beta = 0.5 * beta + h.pi.beta;
        double alpha = h.pi.alpha + 0.5 * static_cast<double>(P);
        err = std::max(err, rel_scalar(pi.beta[nk], beta));
        err = std::max(err, rel_scalar(pi.alpha[nk], alpha));
      }
    }
    out.push_back(make(fam, "pi beta/alpha vs loop sum", err, 1e-12, n));
  }
  return out;
}

// ---------------------------------------------------------------------------
// c_k by Monte-Carlo

std::vector<OracleResult> ck_family(Rng& rng) {
  const std::string fam = "c_k_monte_carlo";
  std::vector<OracleResult> out;
  out.push_back(make(fam, "exact value at Beta(1,1)", std::abs(expected_neg_log1m({1, 1}) - 1.0),
                     1e-12, 1));
  out.push_back(make(fam, "exact value at Beta(2,2)",
                     std::abs(expected_neg_log1m({2, 2}) - (0.5 + 1.0 / 3.0)), 1e-12, 1));
  double worst = 0;
  const std::size_t draws = 1000000;
  for (int t = 0; t < 10; ++t) {
    BetaParams b{uniform(rng, 0.5, 10.0), uniform(rng, 0.5, 10.0)};
    double s = 0, s2 = 0;
    for (std::size_t i = 0; i < draws; ++i) {
      double v = -std::log1p(-sample_beta(b, rng));
      s += v;
      s2 += v * v;
    }
    double mean = s / draws;
    double se = std::sqrt((s2 / draws - mean * mean) / draws);
    worst = std::max(worst, std::abs(mean - expected_neg_log1m(b)) / se);
  }
  out.push_back(make(fam, "Psi(a+b)-Psi(b) vs 1e6-draw mean (in standard errors)", worst, 3.0, 10));
  return out;
}

// ---------------------------------------------------------------------------
// Finite-difference gradients

template <typename T>
using OpFn = std::function<Tensor<T>(const std::vector<Tensor<T>>&)>;

struct OpCase {
  std::string name;
  std::function<std::vector<Array<double>>(Rng&)> inputs;
  std::vector<bool> wrt;  // which inputs are differentiated
  OpFn<double> f64;
  OpFn<float> f32;
};

// Same expression in both precisions.
#define BAYESEG_OP(expr) \
  OpFn<double>([=](const std::vector<Tensor<double>>& v) { using T = double; (void)sizeof(T); return expr; }), \
  OpFn<float>([=](const std::vector<Tensor<float>>& v) { using T = float; (void)sizeof(T); return expr; })

Array<double> away_from_zero(const Dims& d, Rng& rng, double lo, double hi) {
  Array<double> a(d);
  for (auto& v : a.data) v = uniform(rng, lo, hi) * (uniform(rng, 0, 1) < 0.5 ? -1 : 1);
  return a;
}


// Relative error between the analytic vector-Jacobian product of <w, f(inputs)>
// in precision T and central differences of the same expression in double.
template <typename T>
double fd_error(const OpFn<T>& f, const OpFn<double>& f64, const std::vector<Array<double>>& inputs,
                const std::vector<bool>& wrt, Rng& rng, double h) {
  auto leaves_of = [&]<typename U>(const std::vector<Array<double>>& in, bool grad) {
    std::vector<Tensor<U>> v;
    for (std::size_t i = 0; i < in.size(); ++i) v.emplace_back(in[i].cast<U>(), grad && wrt[i]);
    return v;
  };
  Dims out_dims = f64(leaves_of.template operator()<double>(inputs, false)).dims();
  Array<double> w(out_dims);
  for (auto& x : w.data) x = uniform(rng, -1, 1);

  auto leaves = leaves_of.template operator()<T>(inputs, true);
  auto loss = sum(mul(f(leaves), Tensor<T>(w.cast<T>(), false)));
  loss.backward();

  auto project = [&](const std::vector<Array<double>>& in) {
    return sum(mul(f64(leaves_of.template operator()<double>(in, false)), Tensor<double>(w, false))).item();
  };
  std::vector<double> analytic, numeric;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!wrt[i]) continue;
    const auto& g = leaves[i].grad();
    for (std::size_t j = 0; j < inputs[i].size(); ++j) {
      analytic.push_back(g.empty() ? 0.0 : static_cast<double>(g[j]));
      auto plus = inputs, minus = inputs;
      plus[i][j] += h;
      minus[i][j] -= h;
      numeric.push_back((project(plus) - project(minus)) / (2 * h));
    }
  }
  return relative_error(analytic, numeric);
}

std::vector<OpCase> op_cases() {
  std::vector<OpCase> ops;
  auto A = [](Dims d, double lo, double hi) {
    return [=](Rng& r) { return random_array(d, r, lo, hi); };
  };
  auto gen = [](std::vector<std::function<Array<double>(Rng&)>> g) {
    return [=](Rng& r) {
      std::vector<Array<double>> v;
      for (auto& fn : g) v.push_back(fn(r));
      return v;
    };
  };
  auto nz = [](Dims d, double lo, double hi) {
    return [=](Rng& r) { return away_from_zero(d, r, lo, hi); };
  };
  auto simplex = [](Dims d) { return [=](Rng& r) { return random_simplex(d, r); }; };

  ops.push_back({"add (broadcast)", gen({A({2, 3, 4}, -1, 1), A({3, 1}, -1, 1)}), {true, true}, BAYESEG_OP(add(v[0], v[1]))});
  ops.push_back({"sub (broadcast)", gen({A({2, 3}, -1, 1), A({2, 1}, -1, 1)}), {true, true}, BAYESEG_OP(sub(v[0], v[1]))});
  ops.push_back({"mul (broadcast)", gen({A({2, 3, 4}, -1, 1), A({4}, -1, 1)}), {true, true}, BAYESEG_OP(mul(v[0], v[1]))});
  ops.push_back({"div", gen({A({3, 4}, -1, 1), nz({3, 4}, 0.5, 2)}), {true, true}, BAYESEG_OP(div(v[0], v[1]))});
  ops.push_back({"neg", gen({A({5}, -1, 1)}), {true}, BAYESEG_OP(neg(v[0]))});
  ops.push_back({"scale", gen({A({5}, -1, 1)}), {true}, BAYESEG_OP(scale(v[0], T(1.7)))});
  ops.push_back({"add_scalar", gen({A({5}, -1, 1)}), {true}, BAYESEG_OP(add_scalar(v[0], T(0.3)))});
  ops.push_back({"exp", gen({A({6}, -2, 2)}), {true}, BAYESEG_OP(exp(v[0]))});
  ops.push_back({"log", gen({A({6}, 0.2, 3)}), {true}, BAYESEG_OP(log(v[0]))});
  ops.push_back({"square", gen({A({6}, -2, 2)}), {true}, BAYESEG_OP(square(v[0]))});
  ops.push_back({"relu", gen({nz({8}, 0.05, 2)}), {true}, BAYESEG_OP(relu(v[0]))});
  ops.push_back({"softplus", gen({A({8}, -4, 4)}), {true}, BAYESEG_OP(softplus(v[0]))});
  ops.push_back({"clamp_min", gen({nz({8}, 0.05, 2)}), {true}, BAYESEG_OP(clamp_min(v[0], T(0)))});
  ops.push_back({"sum", gen({A({3, 4}, -1, 1)}), {true}, BAYESEG_OP(sum(v[0]))});
  ops.push_back({"mean", gen({A({3, 4}, -1, 1)}), {true}, BAYESEG_OP(mean(v[0]))});
  ops.push_back({"weighted_sq_norm", gen({A({3, 4}, -1, 1), A({3, 4}, 0, 2)}), {true, false},
                 BAYESEG_OP(weighted_sq_norm(v[0], v[1]))});
  ops.push_back({"reshape", gen({A({2, 6}, -1, 1)}), {true}, BAYESEG_OP(square(reshape(v[0], Dims{3, 4})))});
  ops.push_back({"slice_channels", gen({A({2, 4, 3}, -1, 1)}), {true}, BAYESEG_OP(slice_channels(v[0], 1, 2))});
  ops.push_back({"concat_channels", gen({A({2, 1, 3}, -1, 1), A({2, 2, 3}, -1, 1)}), {true, true},
                 BAYESEG_OP(concat_channels(std::vector{v[0], v[1]}))});
  ops.push_back({"channel_softmax", gen({A({2, 3, 2, 2}, -3, 3)}), {true}, BAYESEG_OP(channel_softmax(v[0]))});
  ops.push_back({"conv2d zero pad", gen({A({1, 2, 5, 5}, -1, 1), A({3, 2, 3, 3}, -1, 1)}), {true, true},
                 BAYESEG_OP(conv2d(v[0], v[1], 1, Padding{1, PadMode::Zero}))});
  ops.push_back({"conv2d replicate pad stride 2", gen({A({2, 2, 6, 5}, -1, 1), A({2, 2, 3, 3}, -1, 1)}),
                 {true, true}, BAYESEG_OP(conv2d(v[0], v[1], 2, Padding{1, PadMode::Replicate}))});
  ops.push_back({"instance_norm", gen({A({2, 2, 4, 4}, -2, 2)}), {true}, BAYESEG_OP(instance_norm(v[0]))});
  ops.push_back({"avg_pool2", gen({A({1, 2, 4, 6}, -1, 1)}), {true}, BAYESEG_OP(avg_pool2(v[0]))});
  ops.push_back({"upsample2", gen({A({1, 2, 3, 2}, -1, 1)}), {true}, BAYESEG_OP(upsample2(v[0]))});
  ops.push_back({"sar apply_D", gen({A({2, 1, 4, 5}, -1, 1)}), {true}, BAYESEG_OP(sar::apply_D(v[0]))});
  ops.push_back({"sar_quadratic", gen({A({1, 2, 4, 4}, -1, 1), A({1, 2, 4, 4}, 0, 2)}), {true, false},
                 BAYESEG_OP(sar::sar_quadratic(v[0], v[1]))});
  ops.push_back({"sample_gaussian_reparam", gen({A({1, 1, 3, 3}, -1, 1), A({1, 1, 3, 3}, 0.1, 1), A({1, 1, 3, 3}, -2, 2)}),
                 {true, true, false}, BAYESEG_OP(sample_gaussian_reparam(v[0], v[1], v[2].value()))});

  // Variational loss terms and cross-entropy. Hyper-posterior means are
  // constants (non-differentiated inputs).
  const Dims one{2, 1, 4, 4}, cls{2, 3, 4, 4};
  ops.push_back({"L_y", gen({A(one, -2, 2), A(one, -2, 2), A(one, -1, 1), A(one, 0.1, 5)}), {false, true, true, false},
                 BAYESEG_OP(loss_y(v[0], v[1], v[2], v[3].value()))});
  ops.push_back({"L_mu_z", gen({simplex(cls), A(cls, 0.1, 5), A({2, 3}, 0.1, 3)}), {true, false, false},
                 BAYESEG_OP(loss_mu_z(v[0], v[1].value(), v[2].value()))});
  ops.push_back({"L_sigma_z", gen({A(cls, 0.2, 1.5), A(cls, 0.1, 5), A({2, 3}, 0.1, 3)}), {true, false, false},
                 BAYESEG_OP(loss_sigma_z(v[0], v[1].value(), v[2].value()))});
  ops.push_back({"L_mu_x", gen({A(one, -2, 2), simplex(cls), A(one, 0.1, 5)}), {true, true, false},
                 BAYESEG_OP(loss_mu_x(v[0], v[1], v[2].value()))});
  ops.push_back({"L_sigma_x", gen({A(one, 0.2, 1.5), simplex(cls), A(one, 0.1, 5)}), {true, true, false},
                 BAYESEG_OP(loss_sigma_x(v[0], v[1], v[2].value()))});
  ops.push_back({"L_mu_m", gen({A(one, -2, 2)}), {true}, BAYESEG_OP(loss_mu_m(v[0], HyperParams{}))});
  ops.push_back({"L_sigma_m", gen({A(one, 0.2, 1.5)}), {true}, BAYESEG_OP(loss_sigma_m(v[0], HyperParams{}))});
  ops.push_back({"L_ce (cross-entropy)",
                 [](Rng& r) {
                   auto z = random_simplex({2, 3, 4, 4}, r);
                   Array<double> u({2, 3, 4, 4});
                   for (std::size_t n = 0; n < 2; ++n)
                     for (std::size_t i = 0; i < 16; ++i)
                       u[(n * 3 + std::uniform_int_distribution<std::size_t>(0, 2)(r)) * 16 + i] = 1;
                   return std::vector<Array<double>>{z, u};
                 },
                 {true, false}, BAYESEG_OP(cross_entropy(v[1].value(), v[0]))});
  return ops;
}

#undef BAYESEG_OP

// Single-precision network gradient w.r.t. one parameter against central
// differences of a double-precision copy with identical weights.
double net_fd_error(const NetConfig& nc, const std::string& param, int which, Rng& rng) {
  BayeSegNets<float> nets(nc);
  BayeSegNets<double> ref(nc);
  for (auto& [name, t] : ref.params().entries()) {
    const auto& src = nets.params().at(name).data();
    t.mutable_data().assign(src.begin(), src.end());
  }
  auto y = random_array({1, 1, 8, 8}, rng, -2, 2);
  auto forward = [which]<typename U>(const BayeSegNets<U>& n, const Tensor<U>& in) {
    if (which == 2) return n.seg_forward(in);
    auto g = which == 0 ? n.shape_forward(in) : n.appearance_forward(in);
    return concat_channels(std::vector{g.mean, *g.std});
  };
  auto out_dims = forward(ref, Tensor<double>(y)).dims();
  Array<double> w(out_dims);
  for (auto& x : w.data) x = uniform(rng, -1, 1);

  nets.params().zero_grad();
  sum(mul(forward(nets, Tensor<float>(y.cast<float>())), Tensor<float>(w.cast<float>()))).backward();
  const auto& g = nets.params().at(param).grad();

  auto& theta = ref.params().at(param).mutable_data();
  std::vector<double> analytic, numeric;
  const double h = 1e-5;
  for (std::size_t j = 0; j < theta.size(); ++j) {
    analytic.push_back(g.empty() ? 0.0 : g[j]);
    double keep = theta[j];
    theta[j] = keep + h;
    double lp = sum(mul(forward(ref, Tensor<double>(y)), Tensor<double>(w))).item();
    theta[j] = keep - h;
    double lm = sum(mul(forward(ref, Tensor<double>(y)), Tensor<double>(w))).item();
    theta[j] = keep;
    numeric.push_back((lp - lm) / (2 * h));
  }
  return relative_error(analytic, numeric);
}

std::vector<OracleResult> fd_family(Rng& rng, bool single) {
  const std::string fam = single ? "fd_gradients_single" : "fd_gradients_double";
  const double tol = single ? 1e-3 : 1e-6;
  std::vector<OracleResult> out;
  for (const auto& op : op_cases()) {
    double err = 0;
    for (int t = 0; t < 20; ++t) {
      auto in = op.inputs(rng);
      double e = single ? fd_error<float>(op.f32, op.f64, in, op.wrt, rng, 1e-5)
                        : fd_error<double>(op.f64, op.f64, in, op.wrt, rng, 1e-5);
      err = std::max(err, e);
    }
    out.push_back(make(fam, op.name, err, tol, 20));
  }
  if (single) {
    NetConfig nc;
    nc.width = 4;
    nc.res_blocks_shape = 1;
    nc.res_blocks_app = 1;
    nc.classes = 3;
    struct Probe {
      const char* name;
      const char* param;
      int which;
    };
    for (const Probe& p : {Probe{"shape net, input kernel", "shape.in.weight", 0},
                           Probe{"shape net, output kernel", "shape.out.weight", 0},
                           Probe{"appearance net, input kernel", "app.in.weight", 1},
                           Probe{"appearance net, output kernel", "app.out.weight", 1},
                           Probe{"segmentation net, input kernel", "seg.enc1a.weight", 2},
                           Probe{"segmentation net, bottleneck bias", "seg.midb.bias", 2}}) {
      double err = 0;
      const int n = 20;
      for (int t = 0; t < n; ++t) {
        nc.seed = static_cast<std::uint64_t>(t);
        err = std::max(err, net_fd_error(nc, p.param, p.which, rng));
      }
      out.push_back(make(fam, p.name, err, tol, n));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Loss terms against scalar loops

std::vector<OracleResult> loss_loop_family(Rng& rng) {
  const std::string fam = "loss_loops";
  std::vector<OracleResult> out;
  const std::size_t N = 2, K = 3, H = 5, W = 6, P = H * W;
  std::array<double, kLossTermCount + 2> err{};
  const int trials = 20;
  for (int t = 0; t < trials; ++t) {
    HyperParams h;
    h.mu_m0 = uniform(rng, -0.5, 0.5);
    h.sigma_m0 = uniform(rng, 0.5, 2.0);
    auto y = random_array({N, 1, H, W}, rng, -2, 2);
    auto xs = random_array({N, 1, H, W}, rng, -2, 2);
    auto ms = random_array({N, 1, H, W}, rng, -1, 1);
    auto mu_x = random_array({N, 1, H, W}, rng, -2, 2);
    auto sig_x = random_array({N, 1, H, W}, rng, 0.1, 1.0);
    auto mu_m = random_array({N, 1, H, W}, rng, -1, 1);
    auto sig_m = random_array({N, 1, H, W}, rng, 0.1, 1.0);
    auto mu_z = random_simplex({N, K, H, W}, rng);
    auto sig_z = random_array({N, K, H, W}, rng, 0.1, 1.0);
    auto rho = random_array({N, 1, H, W}, rng, 0.1, 10);
    auto ups = random_array({N, 1, H, W}, rng, 0.1, 10);
    auto om = random_array({N, K, H, W}, rng, 0.1, 10);
    auto c = random_array({N, K}, rng, 0.1, 3);
    Array<double> u({N, K, H, W});
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t i = 0; i < P; ++i)
        u[(n * K + std::uniform_int_distribution<std::size_t>(0, K - 1)(rng)) * P + i] = 1;

    std::array<double, kLossTermCount + 1> ref{};
    for (std::size_t n = 0; n < N; ++n) {
      auto dx = loop_D(mu_x.data.data() + n * P, H, W);
      for (std::size_t i = 0; i < P; ++i) {
        std::size_t p = n * P + i;
        double r = y[p] - xs[p] - ms[p];
        ref[0] += 0.5 * rho[p] * r * r;
        double zsum = 0;
        for (std::size_t k = 0; k < K; ++k) zsum += mu_z[(n * K + k) * P + i];
        ref[3] += 0.5 * zsum * ups[p] * dx[i] * dx[i];
        double vx = sig_x[p] * sig_x[p];
        ref[4] += 0.5 * (2 * zsum * ups[p] * vx - std::log(vx));
        ref[5] += 0.5 * h.sigma_m0 * (mu_m[p] - h.mu_m0) * (mu_m[p] - h.mu_m0);
        double vm = sig_m[p] * sig_m[p];
        ref[6] += 0.5 * (h.sigma_m0 * vm - std::log(vm));
      }
      for (std::size_t k = 0; k < K; ++k) {
        std::size_t nk = n * K + k;
        auto dz = loop_D(mu_z.data.data() + nk * P, H, W);
        for (std::size_t i = 0; i < P; ++i) {
          double wgt = c[nk] * om[nk * P + i];
          ref[1] += 0.5 * wgt * dz[i] * dz[i];
          double vz = sig_z[nk * P + i] * sig_z[nk * P + i];
          ref[2] += 0.5 * (2 * wgt * vz - std::log(vz));
          if (u[nk * P + i] == 1) ref[7] -= std::log(mu_z[nk * P + i]);
        }
      }
    }
    for (auto& v : ref) v /= static_cast<double>(N);
    ref[7] /= static_cast<double>(P);

    using Td = Tensor<double>;
    std::array<double, kLossTermCount + 1> got{
        loss_y(Td(y), Td(xs), Td(ms), rho).item(),
        loss_mu_z(Td(mu_z), om, c).item(),
        loss_sigma_z(Td(sig_z), om, c).item(),
        loss_mu_x(Td(mu_x), Td(mu_z), ups).item(),
        loss_sigma_x(Td(sig_x), Td(mu_z), ups).item(),
        loss_mu_m(Td(mu_m), h).item(),
        loss_sigma_m(Td(sig_m), h).item(),
        cross_entropy(u, Td(mu_z)).item()};
    for (std::size_t i = 0; i < got.size(); ++i) err[i] = std::max(err[i], rel_scalar(got[i], ref[i]));

    // The aggregate must equal the sum of its parts.
    VariationalState<double> s{Td(mu_x), Td(sig_x), Td(mu_m), Td(sig_m), Td(mu_z), Td(sig_z),
                               rho, ups, om, PiPosterior<double>{c, c, c}};
    auto var = variational_loss(Td(y), s, Td(xs), Td(ms), h);
    double parts = 0;
    for (std::size_t i = 0; i < kLossTermCount; ++i) parts += ref[i];
    err[kLossTermCount + 1] = std::max(err[kLossTermCount + 1], rel_scalar(var.total.item(), parts));
  }
  for (std::size_t i = 0; i < kLossTermCount; ++i)
    out.push_back(make(fam, kLossTermNames[i], err[i], 1e-10, trials));
  out.push_back(make(fam, "L_ce", err[kLossTermCount], 1e-10, trials));
  out.push_back(make(fam, "L_var = sum of terms", err[kLossTermCount + 1], 1e-10, trials));
  return out;
}

// ---------------------------------------------------------------------------
// SAR operator against a dense matrix

std::vector<OracleResult> sar_family(Rng& rng) {
  const std::string fam = "sar_matrix";
  std::vector<OracleResult> out;
  double e_fwd = 0, e_adj = 0, e_const = 0, e_imp = 0;
  std::size_t n = 0;
  for (std::size_t H = 2; H <= 16; H += 2)
    for (std::size_t W : {2ul, 3ul, 7ul, 16ul}) {
      ++n;
      auto M = sar_dense_matrix(H, W);
      const std::size_t P = H * W;
      auto f = random_array({H, W}, rng, -1, 1);
      std::vector<double> mf(P, 0), mtf(P, 0), d(P), dt(P);
      for (std::size_t r = 0; r < P; ++r)
        for (std::size_t c = 0; c < P; ++c) {
          mf[r] += M[r * P + c] * f[c];
          mtf[c] += M[r * P + c] * f[r];
        }
      sar::apply_D(f.data.data(), H, W, d.data());
      sar::apply_D_transpose(f.data.data(), H, W, dt.data());
      e_fwd = std::max(e_fwd, relative_error(d, mf));
      e_adj = std::max(e_adj, relative_error(dt, mtf));

      std::vector<double> k(P, uniform(rng, -5, 5)), dk(P);
      sar::apply_D(k.data(), H, W, dk.data());
      for (double v : dk) e_const = std::max(e_const, std::abs(v));

      // Interior impulse: centre 1, four neighbours -1/4, zero elsewhere.
      if (H >= 3 && W >= 3) {
        std::vector<double> imp(P, 0), di(P);
        std::size_t ci = H / 2, cj = W / 2;
        imp[ci * W + cj] = 1;
        sar::apply_D(imp.data(), H, W, di.data());
        for (std::size_t i = 0; i < H; ++i)
          for (std::size_t j = 0; j < W; ++j) {
            double expect = 0;
            if (i == ci && j == cj) expect = 1;
            else if ((i == ci && (j + 1 == cj || j == cj + 1)) || (j == cj && (i + 1 == ci || i == ci + 1)))
              expect = -0.25;
            e_imp = std::max(e_imp, std::abs(di[i * W + j] - expect));
          }
      }
    }
  out.push_back(make(fam, "D vs dense matrix", e_fwd, 1e-12, n));
  out.push_back(make(fam, "D^T vs dense transpose", e_adj, 1e-12, n));
  out.push_back(make(fam, "constant field annihilated", e_const, 1e-12, n));
  out.push_back(make(fam, "interior impulse response", e_imp, 1e-12, n));
  return out;
}

// ---------------------------------------------------------------------------
// Variance terms at their analytic minimisers

std::vector<OracleResult> minimizer_family(Rng& rng) {
  const std::string fam = "minimizers";
  std::vector<OracleResult> out;
  using Td = Tensor<double>;
  const std::size_t N = 1, K = 3, H = 4, W = 4, P = H * W;

  {
    HyperParams h;
    double v = loss_sigma_m(Td(Array<double>({N, 1, H, W}, 1.0)), h).item();
    out.push_back(make(fam, "L_sigma_m = d_y/2 at sigma^2 = 1", std::abs(v - 0.5 * P), 1e-12, 1));
  }

  // Each term is a sum of per-pixel 1/2 (a s^2 - ln s^2), minimised at s^2 = 1/a.
  std::size_t violations = 0, checks = 0;
  double grad_err = 0;
  for (int t = 0; t < 20; ++t) {
    auto mu_z = random_simplex({N, K, H, W}, rng);
    auto ups = random_array({N, 1, H, W}, rng, 0.1, 10);
    auto om = random_array({N, K, H, W}, rng, 0.1, 10);
    auto c = random_array({N, K}, rng, 0.1, 3);
    HyperParams h;
    h.sigma_m0 = uniform(rng, 0.2, 5);

    Array<double> sx({N, 1, H, W}), sz({N, K, H, W}), sm({N, 1, H, W});
    for (std::size_t i = 0; i < P; ++i) {
      double zsum = 0;
      for (std::size_t k = 0; k < K; ++k) zsum += mu_z[k * P + i];
      sx[i] = std::sqrt(1 / (2 * zsum * ups[i]));
      sm[i] = std::sqrt(1 / h.sigma_m0);
      for (std::size_t k = 0; k < K; ++k) sz[k * P + i] = std::sqrt(1 / (2 * c[k] * om[k * P + i]));
    }
    auto eval = [&](int which, const Array<double>& s) {
      Td ts(s, true);
      Td l = which == 0 ? loss_sigma_x(ts, Td(mu_z), ups)
                        : which == 1 ? loss_sigma_z(ts, om, c) : loss_sigma_m(ts, h);
      l.backward();
      for (double g : ts.grad()) grad_err = std::max(grad_err, std::abs(g));
      return l.item();
    };
    const Array<double>* opt[3] = {&sx, &sz, &sm};
    for (int which = 0; which < 3; ++which) {
      double best = eval(which, *opt[which]);
      for (double f : {0.9, 1.1}) {
        Array<double> p = *opt[which];
        std::size_t j = std::uniform_int_distribution<std::size_t>(0, p.size() - 1)(rng);
        p[j] *= f;
        Td ts(p);
        double v = which == 0 ? loss_sigma_x(ts, Td(mu_z), ups).item()
                              : which == 1 ? loss_sigma_z(ts, om, c).item() : loss_sigma_m(ts, h).item();
        ++checks;
        if (!(v > best)) ++violations;
      }
    }
  }
  out.push_back(make(fam, "gradient vanishes at s^2 = 1/a", grad_err, 1e-9, 60));
  out.push_back(make(fam, "+/-10% perturbation increases the term", static_cast<double>(violations), 0,
                     checks));
  return out;
}

using FamilyFn = std::vector<OracleResult> (*)(Rng&);

std::vector<OracleResult> fd_double(Rng& rng) { return fd_family(rng, false); }
std::vector<OracleResult> fd_single(Rng& rng) { return fd_family(rng, true); }

const std::vector<std::pair<std::string, FamilyFn>>& families() {
  static const std::vector<std::pair<std::string, FamilyFn>> f = {
      {"digamma", digamma_family},           {"conjugacy", conjugacy_family},
      {"c_k_monte_carlo", ck_family},        {"fd_gradients_double", fd_double},
      {"fd_gradients_single", fd_single},    {"loss_loops", loss_loop_family},
      {"sar_matrix", sar_family},            {"minimizers", minimizer_family}};
  return f;
}

}  // namespace

double gamma_posterior_mean_quadrature(double shape, double rate, const std::vector<double>& q) {
  // Log of the unnormalised posterior, accumulated factor by factor.
  auto log_post = [&](double t) {
    double v = (shape - 1) * std::log(t) - rate * t;
    for (double qj : q) v += 0.5 * std::log(t) - 0.5 * qj * t;
    return v;
  };
  // Locate the mode in log t so the integrand is O(1) near u = 1.
  auto [log_mode, neg_peak] = boost::math::tools::brent_find_minima(
      [&](double s) { return -log_post(std::exp(s)); }, -80.0, 80.0, 52);
  const double scale = std::exp(log_mode), peak = -neg_peak;
  auto density = [&](double u) {
    if (u <= 0) return 0.0;
    return std::exp(log_post(scale * u) - peak);
  };
  boost::math::quadrature::exp_sinh<double> integrator;
  double z0 = integrator.integrate(density, 0.0, std::numeric_limits<double>::infinity());
  double z1 = integrator.integrate([&](double u) { return u * density(u); }, 0.0,
                                   std::numeric_limits<double>::infinity());
  return scale * z1 / z0;
}

std::vector<double> sar_dense_matrix(std::size_t H, std::size_t W) {
  const std::size_t P = H * W;
  std::vector<double> M(P * P, 0.0);
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j) {
      std::size_t r = i * W + j;
      M[r * P + r] += 1.0;
      // Replicate padding: an out-of-range neighbour is the pixel itself.
      std::size_t up = i > 0 ? i - 1 : i, down = i + 1 < H ? i + 1 : i;
      std::size_t left = j > 0 ? j - 1 : j, right = j + 1 < W ? j + 1 : j;
      M[r * P + up * W + j] -= 0.25;
      M[r * P + down * W + j] -= 0.25;
      M[r * P + i * W + left] -= 0.25;
      M[r * P + i * W + right] -= 0.25;
    }
  return M;
}

double relative_error(const std::vector<double>& a, const std::vector<double>& b, double floor) {
  if (a.size() != b.size()) throw ShapeError("relative_error: size mismatch");
  double d = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    d += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(d) / std::max({std::sqrt(na), std::sqrt(nb), floor});
}

std::vector<std::string> oracle_families() {
  std::vector<std::string> names;
  for (const auto& [name, fn] : families()) names.push_back(name);
  return names;
}

std::vector<OracleResult> run_oracle_family(const std::string& family, std::uint64_t seed) {
  const auto& all = families();
  for (std::size_t i = 0; i < all.size(); ++i)
    if (all[i].first == family) {
      Rng rng(derive_seed(seed, i));
      return all[i].second(rng);
    }
  throw UsageError("unknown oracle family '" + family + "'");
}

std::vector<OracleResult> run_all_oracles(const OracleCallback& on_result, std::uint64_t seed) {
  std::vector<OracleResult> all;
  for (const auto& name : oracle_families())
    for (auto& r : run_oracle_family(name, seed)) {
      if (on_result) on_result(r);
      all.push_back(std::move(r));
    }
  return all;
}

std::size_t count_families(const std::vector<OracleResult>& results) {
  std::set<std::string> s;
  for (const auto& r : results) s.insert(r.family);
  return s.size();
}

}  // namespace bayeseg
