#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bayeseg/tensor.hpp"

namespace bayeseg {

struct AdamSettings {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction. Moment buffers are kept per registered parameter
// and are part of the checkpointed network state.
template <typename T>
class Adam {
 public:
  explicit Adam(AdamSettings settings = {});

  void add_param(Tensor<T> param);
  std::size_t size() const { return slots_.size(); }

  // One update from the gradients currently held by the parameters. Parameters
  // without a gradient are treated as having a zero gradient.
  void step();
  void zero_grad();

  void set_lr(double lr);
  double lr() const { return settings_.lr; }
  const AdamSettings& settings() const { return settings_; }
  std::uint64_t steps() const { return t_; }
  void set_steps(std::uint64_t t) { t_ = t; }

  std::vector<T>& first_moment(std::size_t i) { return slots_.at(i).m; }
  std::vector<T>& second_moment(std::size_t i) { return slots_.at(i).v; }

 private:
  struct Slot {
    Tensor<T> param;
    std::vector<T> m, v;
  };
  AdamSettings settings_;
  std::vector<Slot> slots_;
  std::uint64_t t_ = 0;
};

}  // namespace bayeseg
