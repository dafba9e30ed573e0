#pragma once

// Independent numerical oracles for the closed-form updates, special functions,
// gradients and loss terms. Each oracle recomputes its target by a different
// route (quadrature, Monte-Carlo, finite differences, explicit loops or a
// dense matrix) and reports the worst error against a tolerance.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace bayeseg {

struct OracleResult {
  std::string family;
  std::string name;
  double max_error = 0;
  double tolerance = 0;
  bool passed = false;
  std::size_t instances = 0;
  std::string detail;
};

using OracleCallback = std::function<void(const OracleResult&)>;

// Families, in run order.
std::vector<std::string> oracle_families();
std::vector<OracleResult> run_oracle_family(const std::string& family, std::uint64_t seed = 2024);
// Runs every family, reporting each result as it completes.
std::vector<OracleResult> run_all_oracles(const OracleCallback& on_result = {},
                                          std::uint64_t seed = 2024);
std::size_t count_families(const std::vector<OracleResult>& results);

// Building blocks, exposed for unit tests.

// Posterior mean of a Gamma(shape, rate) prior times prod_j lik_j(t), each
// likelihood factor being t^{1/2} exp(-t * q_j / 2), by adaptive quadrature.
double gamma_posterior_mean_quadrature(double shape, double rate, const std::vector<double>& q);

// D = I - B as a dense (H*W)^2 row-major matrix with replicate boundaries.
std::vector<double> sar_dense_matrix(std::size_t H, std::size_t W);

// Relative error ||a - b|| / max(||a||, ||b||, floor).
double relative_error(const std::vector<double>& a, const std::vector<double>& b,
                      double floor = 1e-12);

}  // namespace bayeseg
