#pragma once

#include <cstdint>
#include <random>

#include "bayeseg/tensor.hpp"

namespace bayeseg {

using Rng = std::mt19937_64;

// Independent stream seed for item `index` of a run seeded with `seed`.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index);

// Gamma with shape `shape` (gamma) and rate `rate` (phi); mean = shape / rate.
struct GammaParams {
  double shape;
  double rate;
  double mean() const { return shape / rate; }
};

struct BetaParams {
  double alpha;
  double beta;
};

void validate(const GammaParams& g);
void validate(const BetaParams& b);

// Psi(x) for x > 0: upward recurrence to x >= 6, then asymptotic series.
double digamma(double x);

// E[-ln(1 - pi)] for pi ~ Beta(alpha, beta) = Psi(alpha + beta) - Psi(beta).
double expected_neg_log1m(const BetaParams& b);

// mean + std * noise, differentiable in mean and std.
template <typename T>
Tensor<T> sample_gaussian_reparam(const Tensor<T>& mean, const Tensor<T>& std,
                                  const Array<T>& noise);

double sample_gamma(const GammaParams& g, Rng& rng);
double sample_beta(const BetaParams& b, Rng& rng);

template <typename T>
Array<T> standard_normal_field(const Dims& dims, Rng& rng);

}  // namespace bayeseg
