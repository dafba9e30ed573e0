#include "bayeseg/bayes.hpp"

#include <cmath>

#include "bayeseg/sar.hpp"

namespace bayeseg {

void HyperParams::validate() const {
  bayeseg::validate(rho);
  bayeseg::validate(upsilon);
  bayeseg::validate(omega);
  bayeseg::validate(pi);
  if (!(sigma_m0 > 0)) throw std::domain_error("sigma_m0 must be positive");
  if (!(lambda >= 0)) throw std::domain_error("lambda must be nonnegative");
}

namespace {

struct FieldLayout {
  std::size_t batch, channels, height, width;
  std::size_t pixels() const { return height * width; }
};

FieldLayout layout_of(const Dims& d, const char* what) {
  if (d.size() != 4)
    throw ShapeError(std::string(what) + " must be [N,C,H,W], got " + dims_to_string(d));
  return {d[0], d[1], d[2], d[3]};
}

void require_same(const Dims& a, const Dims& b, const char* what) {
  if (a != b)
    throw ShapeError(std::string(what) + ": dims " + dims_to_string(a) + " vs " +
                     dims_to_string(b));
}

// Per-image spatial dims must agree; channel counts may differ.
void require_spatial(const Dims& a, const Dims& b, const char* what) {
  if (a.size() != 4 || b.size() != 4 || a[0] != b[0] || a[2] != b[2] || a[3] != b[3])
    throw ShapeError(std::string(what) + ": dims " + dims_to_string(a) + " vs " +
                     dims_to_string(b));
}

template <typename T>
Tensor<T> constant(const Array<T>& a) {
  return Tensor<T>(a, false);
}

}  // namespace

template <typename T>
Array<T> update_rho(const Array<T>& y, const Array<T>& x_sample, const Array<T>& m_sample,
                    const HyperParams& h) {
  require_same(y.dims, x_sample.dims, "update_rho");
  require_same(y.dims, m_sample.dims, "update_rho");
  const double num = 2 * h.rho.shape + 1;
  Array<T> out(y.dims);
  for (std::size_t i = 0; i < y.size(); ++i) {
    double r = static_cast<double>(y[i]) - (static_cast<double>(x_sample[i]) + m_sample[i]);
    out[i] = static_cast<T>(num / (r * r + 2 * h.rho.rate));
  }
  return out;
}

template <typename T>
Array<T> update_upsilon(const Array<T>& mu_z, const Array<T>& mu_x, const Array<T>& sigma_x,
                        const HyperParams& h) {
  auto L = layout_of(mu_z.dims, "mu_z");
  require_same(mu_x.dims, sigma_x.dims, "update_upsilon");
  require_spatial(mu_z.dims, mu_x.dims, "update_upsilon");
  const std::size_t P = L.pixels(), K = L.channels;
  Array<T> dx = sar::apply_D(mu_x);
  Array<T> out(mu_x.dims);
  const double num = 2 * h.upsilon.shape + static_cast<double>(K);
  for (std::size_t n = 0; n < L.batch; ++n)
    for (std::size_t i = 0; i < P; ++i) {
      double d = dx[n * P + i];
      double s = sigma_x[n * P + i];
      double bracket = d * d + 2 * s * s;
      double wsum = 0;
      for (std::size_t k = 0; k < K; ++k) wsum += mu_z[(n * K + k) * P + i];
      out[n * P + i] = static_cast<T>(num / (wsum * bracket + 2 * h.upsilon.rate));
    }
  return out;
}

template <typename T>
Array<T> update_omega(const Array<T>& mu_z, const Array<T>& sigma_z, const Array<T>& c,
                      const HyperParams& h) {
  auto L = layout_of(mu_z.dims, "mu_z");
  require_same(mu_z.dims, sigma_z.dims, "update_omega");
  if (c.dims != Dims{L.batch, L.channels})
    throw ShapeError("update_omega: c must be [N,K], got " + dims_to_string(c.dims));
  const std::size_t P = L.pixels();
  Array<T> dz = sar::apply_D(mu_z);
  Array<T> out(mu_z.dims);
  const double num = 2 * h.omega.shape + 1;
  for (std::size_t nk = 0; nk < L.batch * L.channels; ++nk) {
    double ck = c[nk];
    for (std::size_t i = 0; i < P; ++i) {
      double d = dz[nk * P + i];
      double s = sigma_z[nk * P + i];
      out[nk * P + i] = static_cast<T>(num / (ck * (d * d + 2 * s * s) + 2 * h.omega.rate));
    }
  }
  return out;
}

template <typename T>
PiPosterior<T> update_pi(const Array<T>& mu_omega, const Array<T>& mu_z, const Array<T>& sigma_z,
                         const HyperParams& h) {
  auto L = layout_of(mu_z.dims, "mu_z");
  require_same(mu_z.dims, mu_omega.dims, "update_pi");
  require_same(mu_z.dims, sigma_z.dims, "update_pi");
  const std::size_t P = L.pixels();
  Array<T> dz = sar::apply_D(mu_z);
  PiPosterior<T> out{Array<T>({L.batch, L.channels}), Array<T>({L.batch, L.channels}),
                     Array<T>({L.batch, L.channels})};
  const double alpha = h.pi.alpha + 0.5 * static_cast<double>(P);
  for (std::size_t nk = 0; nk < L.batch * L.channels; ++nk) {
    double acc = 0;
    for (std::size_t i = 0; i < P; ++i) {
      double d = dz[nk * P + i];
      double s = sigma_z[nk * P + i];
      acc += static_cast<double>(mu_omega[nk * P + i]) * (d * d + 2 * s * s);
    }
    double beta = 0.5 * acc + h.pi.beta;
    out.alpha[nk] = static_cast<T>(alpha);
    out.beta[nk] = static_cast<T>(beta);
    out.c[nk] = static_cast<T>(expected_neg_log1m({alpha, beta}));
  }
  return out;
}

template <typename T>
PiPosterior<T> prior_pi(std::size_t batch, std::size_t classes, std::size_t pixels,
                        const HyperParams& h) {
  const double alpha = h.pi.alpha + 0.5 * static_cast<double>(pixels);
  const double c = expected_neg_log1m({alpha, h.pi.beta});
  return {Array<T>({batch, classes}, static_cast<T>(alpha)),
          Array<T>({batch, classes}, static_cast<T>(h.pi.beta)),
          Array<T>({batch, classes}, static_cast<T>(c))};
}

// ---------------------------------------------------------------------------
// Loss terms

template <typename T>
Tensor<T> loss_y(const Tensor<T>& y, const Tensor<T>& x_sample, const Tensor<T>& m_sample,
                 const Array<T>& mu_rho) {
  require_same(y.dims(), x_sample.dims(), "loss_y");
  require_same(y.dims(), m_sample.dims(), "loss_y");
  require_same(y.dims(), mu_rho.dims, "loss_y");
  const T n = static_cast<T>(y.dim(0));
  auto r = sub(y, add(x_sample, m_sample));
  return scale(weighted_sq_norm(r, constant(mu_rho)), T(0.5) / n);
}

template <typename T>
Tensor<T> loss_mu_z(const Tensor<T>& mu_z, const Array<T>& mu_omega, const Array<T>& c) {
  auto L = layout_of(mu_z.dims(), "mu_z");
  require_same(mu_z.dims(), mu_omega.dims, "loss_mu_z");
  const std::size_t P = L.pixels();
  Array<T> w(mu_omega.dims);
  for (std::size_t nk = 0; nk < L.batch * L.channels; ++nk)
    for (std::size_t i = 0; i < P; ++i) w[nk * P + i] = c[nk] * mu_omega[nk * P + i];
  return scale(sar::sar_quadratic(mu_z, constant(w)), T(1) / static_cast<T>(L.batch));
}

template <typename T>
Tensor<T> loss_sigma_z(const Tensor<T>& sigma_z, const Array<T>& mu_omega, const Array<T>& c) {
  auto L = layout_of(sigma_z.dims(), "sigma_z");
  require_same(sigma_z.dims(), mu_omega.dims, "loss_sigma_z");
  const std::size_t P = L.pixels();
  Array<T> w(mu_omega.dims);
  for (std::size_t nk = 0; nk < L.batch * L.channels; ++nk)
    for (std::size_t i = 0; i < P; ++i) w[nk * P + i] = T(2) * c[nk] * mu_omega[nk * P + i];
  auto var = square(sigma_z);
  auto quad = sum(mul(constant(w), var));
  auto ent = sum(log(var));
  return scale(sub(quad, ent), T(0.5) / static_cast<T>(L.batch));
}

template <typename T>
Tensor<T> loss_mu_x(const Tensor<T>& mu_x, const Tensor<T>& mu_z, const Array<T>& mu_upsilon) {
  require_same(mu_x.dims(), mu_upsilon.dims, "loss_mu_x");
  require_spatial(mu_x.dims(), mu_z.dims(), "loss_mu_x");
  auto dx2 = square(sar::apply_D(mu_x));
  auto w = mul(mu_z, constant(mu_upsilon));
  return scale(sum(mul(w, dx2)), T(0.5) / static_cast<T>(mu_x.dim(0)));
}

template <typename T>
Tensor<T> loss_sigma_x(const Tensor<T>& sigma_x, const Tensor<T>& mu_z,
                       const Array<T>& mu_upsilon) {
  require_same(sigma_x.dims(), mu_upsilon.dims, "loss_sigma_x");
  require_spatial(sigma_x.dims(), mu_z.dims(), "loss_sigma_x");
  auto var = square(sigma_x);
  auto w = scale(mul(mu_z, constant(mu_upsilon)), T(2));
  auto quad = sum(mul(w, var));
  auto ent = sum(log(var));
  return scale(sub(quad, ent), T(0.5) / static_cast<T>(sigma_x.dim(0)));
}

template <typename T>
Tensor<T> loss_mu_m(const Tensor<T>& mu_m, const HyperParams& h) {
  auto centred = add_scalar(mu_m, static_cast<T>(-h.mu_m0));
  return scale(sum(square(centred)),
               static_cast<T>(0.5 * h.sigma_m0) / static_cast<T>(mu_m.dim(0)));
}

template <typename T>
Tensor<T> loss_sigma_m(const Tensor<T>& sigma_m, const HyperParams& h) {
  auto var = square(sigma_m);
  auto quad = scale(sum(var), static_cast<T>(h.sigma_m0));
  auto ent = sum(log(var));
  return scale(sub(quad, ent), T(0.5) / static_cast<T>(sigma_m.dim(0)));
}

template <typename T>
VariationalLoss<T> variational_loss(const Tensor<T>& y, const VariationalState<T>& s,
                                    const Tensor<T>& x_sample, const Tensor<T>& m_sample,
                                    const HyperParams& h, const LossMask& mask) {
  std::array<std::optional<Tensor<T>>, kLossTermCount> parts;
  auto put = [&](LossTerm t, auto&& make) {
    if (mask[t]) parts[static_cast<std::size_t>(t)] = make();
  };
  put(LossTerm::Y, [&] { return loss_y(y, x_sample, m_sample, s.mu_rho); });
  put(LossTerm::MuZ, [&] { return loss_mu_z(s.mu_z, s.mu_omega, s.pi.c); });
  if (s.sigma_z)
    put(LossTerm::SigmaZ, [&] { return loss_sigma_z(*s.sigma_z, s.mu_omega, s.pi.c); });
  put(LossTerm::MuX, [&] { return loss_mu_x(s.mu_x, s.mu_z, s.mu_upsilon); });
  put(LossTerm::SigmaX, [&] { return loss_sigma_x(s.sigma_x, s.mu_z, s.mu_upsilon); });
  put(LossTerm::MuM, [&] { return loss_mu_m(s.mu_m, h); });
  if (s.sigma_m) put(LossTerm::SigmaM, [&] { return loss_sigma_m(*s.sigma_m, h); });

  VariationalLoss<T> out{Tensor<T>::scalar(T(0)), {}};
  for (std::size_t i = 0; i < kLossTermCount; ++i) {
    if (!parts[i]) continue;
    out.terms[i] = static_cast<double>(parts[i]->item());
    out.total = add(out.total, *parts[i]);
  }
  return out;
}

template <typename T>
Tensor<T> total_loss(const Tensor<T>& ce, const Tensor<T>& var, double lambda) {
  if (!(lambda >= 0)) throw std::domain_error("lambda must be nonnegative");
  if (lambda == 0) return ce;
  return add(ce, scale(var, static_cast<T>(lambda)));
}

template <typename T>
void check_one_hot(const Array<T>& u) {
  if (u.rank() < 2) throw ShapeError("label map must be [N,K,...], got " + dims_to_string(u.dims));
  const std::size_t N = u.dims[0], K = u.dims[1], P = u.size() / (N * K);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t i = 0; i < P; ++i) {
      int ones = 0;
      for (std::size_t k = 0; k < K; ++k) {
        T v = u[(n * K + k) * P + i];
        if (v == T(1)) {
          ++ones;
        } else if (v != T(0)) {
          throw DataError("label value " + std::to_string(static_cast<double>(v)) +
                          " is not 0/1 at image " + std::to_string(n) + ", pixel " +
                          std::to_string(i));
        }
      }
      if (ones != 1)
        throw DataError("label is not one-hot at image " + std::to_string(n) + ", pixel " +
                        std::to_string(i));
    }
}

template <typename T>
Tensor<T> cross_entropy(const Array<T>& u_onehot, const Tensor<T>& z) {
  require_same(u_onehot.dims, z.dims(), "cross_entropy");
  check_one_hot(u_onehot);
  const std::size_t pixels = u_onehot.size() / u_onehot.dims[1];
  auto lz = log(clamp_min(z, static_cast<T>(1e-12)));
  return scale(sum(mul(constant(u_onehot), lz)), T(-1) / static_cast<T>(pixels));
}

#define BAYESEG_INSTANTIATE(T)                                                                    \
  template Array<T> update_rho(const Array<T>&, const Array<T>&, const Array<T>&,                \
                               const HyperParams&);                                               \
  template Array<T> update_upsilon(const Array<T>&, const Array<T>&, const Array<T>&,            \
                                   const HyperParams&);                                           \
  template Array<T> update_omega(const Array<T>&, const Array<T>&, const Array<T>&,              \
                                 const HyperParams&);                                             \
  template PiPosterior<T> update_pi(const Array<T>&, const Array<T>&, const Array<T>&,           \
                                    const HyperParams&);                                          \
  template PiPosterior<T> prior_pi(std::size_t, std::size_t, std::size_t, const HyperParams&);  \
  template Tensor<T> loss_y(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,                \
                            const Array<T>&);                                                     \
  template Tensor<T> loss_mu_z(const Tensor<T>&, const Array<T>&, const Array<T>&);              \
  template Tensor<T> loss_sigma_z(const Tensor<T>&, const Array<T>&, const Array<T>&);           \
  template Tensor<T> loss_mu_x(const Tensor<T>&, const Tensor<T>&, const Array<T>&);             \
  template Tensor<T> loss_sigma_x(const Tensor<T>&, const Tensor<T>&, const Array<T>&);          \
  template Tensor<T> loss_mu_m(const Tensor<T>&, const HyperParams&);                            \
  template Tensor<T> loss_sigma_m(const Tensor<T>&, const HyperParams&);                         \
  template VariationalLoss<T> variational_loss(const Tensor<T>&, const VariationalState<T>&,     \
                                               const Tensor<T>&, const Tensor<T>&,               \
                                               const HyperParams&, const LossMask&);              \
  template Tensor<T> total_loss(const Tensor<T>&, const Tensor<T>&, double);                     \
  template void check_one_hot(const Array<T>&);                                                   \
  template Tensor<T> cross_entropy(const Array<T>&, const Tensor<T>&);

BAYESEG_INSTANTIATE(float)
BAYESEG_INSTANTIATE(double)

#undef BAYESEG_INSTANTIATE

}  // namespace bayeseg
