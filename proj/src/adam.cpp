#include "bayeseg/adam.hpp"

#include <cmath>

namespace bayeseg {

template <typename T>
Adam<T>::Adam(AdamSettings settings) : settings_(settings) {
  if (!(settings_.lr > 0)) throw UsageError("Adam learning rate must be positive");
}

template <typename T>
void Adam<T>::add_param(Tensor<T> param) {
  if (!param.is_leaf() || !param.requires_grad())
    throw UsageError("Adam parameters must be leaves with requires_grad");
  std::size_t n = param.numel();
  slots_.push_back(Slot{std::move(param), std::vector<T>(n, T(0)), std::vector<T>(n, T(0))});
}

template <typename T>
void Adam<T>::set_lr(double lr) {
  if (!(lr > 0)) throw UsageError("Adam learning rate must be positive");
  settings_.lr = lr;
}

template <typename T>
void Adam<T>::step() {
  ++t_;
  const double b1 = settings_.beta1, b2 = settings_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  const T step_size = static_cast<T>(settings_.lr / c1);
  const T inv_c2 = static_cast<T>(1.0 / c2);
  const T eps = static_cast<T>(settings_.eps);
  for (auto& s : slots_) {
    const auto& g = s.param.grad();
    auto& w = s.param.mutable_data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      T gi = g.empty() ? T(0) : g[i];
      s.m[i] = static_cast<T>(b1) * s.m[i] + static_cast<T>(1 - b1) * gi;
      s.v[i] = static_cast<T>(b2) * s.v[i] + static_cast<T>(1 - b2) * gi * gi;
      w[i] -= step_size * s.m[i] / (std::sqrt(s.v[i] * inv_c2) + eps);
    }
  }
}

template <typename T>
void Adam<T>::zero_grad() {
  for (auto& s : slots_) s.param.zero_grad();
}

template class Adam<float>;
template class Adam<double>;

}  // namespace bayeseg
