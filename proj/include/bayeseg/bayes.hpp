#pragma once

// Closed-form hyper-posterior updates, the unfolded variational loss and the
// combined training objective.
//
// Layout conventions: single-channel fields (y, x, m, rho, upsilon) are
// [N,1,H,W]; class fields (z, omega) are [N,K,H,W]; per-class scalars of
// q(pi) are [N,K]. Every sum below runs over the pixels of one image; batch
// values are averaged over N.

#include <array>
#include <optional>
#include <string>

#include "bayeseg/distributions.hpp"
#include "bayeseg/tensor.hpp"

namespace bayeseg {

struct HyperParams {
  GammaParams rho{2.0, 1e-6};
  GammaParams upsilon{2.0, 1e-8};
  GammaParams omega{2.0, 1e-4};
  BetaParams pi{2.0, 2.0};
  double mu_m0 = 0.0;
  // Precision of the Gaussian prior on m.
  double sigma_m0 = 1.0;
  double lambda = 100.0;

  void validate() const;
};

template <typename T>
struct PiPosterior {
  Array<T> alpha;  // [N,K]
  Array<T> beta;   // [N,K]
  Array<T> c;      // [N,K], c = Psi(alpha + beta) - Psi(beta)
};

// All inputs are treated as constants; results enter the loss without gradient.
template <typename T>
Array<T> update_rho(const Array<T>& y, const Array<T>& x_sample, const Array<T>& m_sample,
                    const HyperParams& h);

template <typename T>
Array<T> update_upsilon(const Array<T>& mu_z, const Array<T>& mu_x, const Array<T>& sigma_x,
                        const HyperParams& h);

template <typename T>
Array<T> update_omega(const Array<T>& mu_z, const Array<T>& sigma_z, const Array<T>& c,
                      const HyperParams& h);

template <typename T>
PiPosterior<T> update_pi(const Array<T>& mu_omega, const Array<T>& mu_z, const Array<T>& sigma_z,
                         const HyperParams& h);

// q(pi) for a flat segmentation (beta at its prior value). Seeds the
// omega <-> pi fixed-point iteration.
template <typename T>
PiPosterior<T> prior_pi(std::size_t batch, std::size_t classes, std::size_t pixels,
                        const HyperParams& h);

// Posterior parameters for one batch. Network-produced fields are tensors so
// the loss can differentiate through them; hyper-posterior means are plain
// arrays. Absent sigmas mean the corresponding variable is deterministic.
template <typename T>
struct VariationalState {
  Tensor<T> mu_x, sigma_x;
  Tensor<T> mu_m;
  std::optional<Tensor<T>> sigma_m;
  Tensor<T> mu_z;  // on the K-simplex per pixel
  std::optional<Tensor<T>> sigma_z;
  Array<T> mu_rho, mu_upsilon, mu_omega;
  PiPosterior<T> pi;
};

enum class LossTerm { Y, MuZ, SigmaZ, MuX, SigmaX, MuM, SigmaM };
inline constexpr std::size_t kLossTermCount = 7;
inline constexpr std::array<const char*, kLossTermCount> kLossTermNames = {
    "L_y", "L_mu_z", "L_sigma_z", "L_mu_x", "L_sigma_x", "L_mu_m", "L_sigma_m"};

// Which terms participate; pruned variables drop their terms.
struct LossMask {
  std::array<bool, kLossTermCount> enabled{true, true, true, true, true, true, true};
  bool operator[](LossTerm t) const { return enabled[static_cast<std::size_t>(t)]; }
  void set(LossTerm t, bool on) { enabled[static_cast<std::size_t>(t)] = on; }
};

template <typename T>
struct VariationalLoss {
  Tensor<T> total;
  std::array<double, kLossTermCount> terms{};
};

template <typename T>
Tensor<T> loss_y(const Tensor<T>& y, const Tensor<T>& x_sample, const Tensor<T>& m_sample,
                 const Array<T>& mu_rho);
template <typename T>
Tensor<T> loss_mu_z(const Tensor<T>& mu_z, const Array<T>& mu_omega, const Array<T>& c);
template <typename T>
Tensor<T> loss_sigma_z(const Tensor<T>& sigma_z, const Array<T>& mu_omega, const Array<T>& c);
template <typename T>
Tensor<T> loss_mu_x(const Tensor<T>& mu_x, const Tensor<T>& mu_z, const Array<T>& mu_upsilon);
template <typename T>
Tensor<T> loss_sigma_x(const Tensor<T>& sigma_x, const Tensor<T>& mu_z,
                       const Array<T>& mu_upsilon);
template <typename T>
Tensor<T> loss_mu_m(const Tensor<T>& mu_m, const HyperParams& h);
template <typename T>
Tensor<T> loss_sigma_m(const Tensor<T>& sigma_m, const HyperParams& h);

// Sum of the enabled terms, averaged over the batch.
template <typename T>
VariationalLoss<T> variational_loss(const Tensor<T>& y, const VariationalState<T>& s,
                                    const Tensor<T>& x_sample, const Tensor<T>& m_sample,
                                    const HyperParams& h, const LossMask& mask = {});

// L_ce + lambda * L_var.
template <typename T>
Tensor<T> total_loss(const Tensor<T>& ce, const Tensor<T>& var, double lambda);

// Pixel-averaged -sum_k u_k ln z_k; z is clamped to >= 1e-12 before the log.
template <typename T>
Tensor<T> cross_entropy(const Array<T>& u_onehot, const Tensor<T>& z);

// Throws DataError unless every pixel of a [N,K,...] array is one-hot.
template <typename T>
void check_one_hot(const Array<T>& u);

}  // namespace bayeseg
