#include "bayeseg/distributions.hpp"

#include <cmath>
#include <limits>
#include <string>

namespace bayeseg {

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
  // splitmix64 over a mix of both inputs
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

void validate(const GammaParams& g) {
  if (!(g.shape > 0) || !(g.rate > 0))
    throw std::domain_error("Gamma parameters must be positive (shape " + std::to_string(g.shape) +
                            ", rate " + std::to_string(g.rate) + ")");
}

void validate(const BetaParams& b) {
  if (!(b.alpha > 0) || !(b.beta > 0))
    throw std::domain_error("Beta parameters must be positive (alpha " + std::to_string(b.alpha) +
                            ", beta " + std::to_string(b.beta) + ")");
}

double digamma(double x) {
  if (!(x > 0) || !std::isfinite(x))
    throw std::domain_error("digamma argument must be positive and finite, got " +
                            std::to_string(x));
  double shift = 0.0;
  while (x < 6.0) {
    shift -= 1.0 / x;
    x += 1.0;
  }
  // ln x - 1/(2x) - sum_{n=1..6} B_{2n} / (2n x^{2n})
  const double r = 1.0 / x;
  const double r2 = r * r;
  double series =
      r2 * (1.0 / 12 -
            r2 * (1.0 / 120 -
                  r2 * (1.0 / 252 - r2 * (1.0 / 240 - r2 * (1.0 / 132 - r2 * (691.0 / 32760))))));
  return shift + std::log(x) - 0.5 * r - series;
}

double expected_neg_log1m(const BetaParams& b) {
  validate(b);
  return digamma(b.alpha + b.beta) - digamma(b.beta);
}

template <typename T>
Tensor<T> sample_gaussian_reparam(const Tensor<T>& mean, const Tensor<T>& std,
                                  const Array<T>& noise) {
  if (noise.dims != mean.dims())
    throw ShapeError("noise dims " + dims_to_string(noise.dims) + " do not match mean dims " +
                     dims_to_string(mean.dims()));
  return add(mean, mul(std, Tensor<T>(noise)));
}

double sample_gamma(const GammaParams& g, Rng& rng) {
  validate(g);
  std::gamma_distribution<double> dist(g.shape, 1.0 / g.rate);
  double v;
  do v = dist(rng);
  while (!(v > 0));
  return v;
}

double sample_beta(const BetaParams& b, Rng& rng) {
  validate(b);
  for (;;) {
    double x = sample_gamma({b.alpha, 1.0}, rng);
    double y = sample_gamma({b.beta, 1.0}, rng);
    double v = x / (x + y);
    if (v > 0 && v < 1) return v;
  }
}

template <typename T>
Array<T> standard_normal_field(const Dims& dims, Rng& rng) {
  Array<T> a(dims);
  std::normal_distribution<double> nd(0.0, 1.0);
  for (auto& v : a.data) v = static_cast<T>(nd(rng));
  return a;
}

template Tensor<float> sample_gaussian_reparam(const Tensor<float>&, const Tensor<float>&,
                                               const Array<float>&);
template Tensor<double> sample_gaussian_reparam(const Tensor<double>&, const Tensor<double>&,
                                                const Array<double>&);
template Array<float> standard_normal_field(const Dims&, Rng&);
template Array<double> standard_normal_field(const Dims&, Rng&);

}  // namespace bayeseg
