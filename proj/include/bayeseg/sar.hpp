#pragma once

// Spatial difference operator D = I - B of the simultaneous autoregressive
// priors: a 5-point stencil (centre 1, 4-neighbours -1/4) with replicate
// padding, so constant fields are annihilated exactly, borders included.

#include "bayeseg/tensor.hpp"

namespace bayeseg::sar {

inline constexpr double kCentreWeight = 1.0;
inline constexpr double kNeighbourWeight = -0.25;

// One H x W plane. Requires H, W >= 2.
template <typename T>
void apply_D(const T* field, std::size_t H, std::size_t W, T* out);

// Adjoint D^T of the replicate-padded stencil.
template <typename T>
void apply_D_transpose(const T* field, std::size_t H, std::size_t W, T* out);

// Applies D to every H x W plane of an array whose last two dims are H, W.
template <typename T>
Array<T> apply_D(const Array<T>& field);

// Differentiable version; backward applies D^T.
template <typename T>
Tensor<T> apply_D(const Tensor<T>& field);

// 1/2 sum_i w_i (D field)_i^2, differentiable in field.
template <typename T>
Tensor<T> sar_quadratic(const Tensor<T>& field, const Tensor<T>& weights);

}  // namespace bayeseg::sar
