#include "bayeseg/sar.hpp"

namespace bayeseg::sar {

namespace {

void check_plane(const Dims& d) {
  if (d.size() < 2 || d[d.size() - 1] < 2 || d[d.size() - 2] < 2)
    throw ShapeError("SAR operator needs planes of at least 2x2, got " + dims_to_string(d));
}

}  // namespace

template <typename T>
void apply_D(const T* f, std::size_t H, std::size_t W, T* out) {
  const T q = static_cast<T>(kNeighbourWeight);
  for (std::size_t y = 0; y < H; ++y) {
    const T* row = f + y * W;
    const T* up = f + (y == 0 ? 0 : y - 1) * W;
    const T* dn = f + (y + 1 == H ? y : y + 1) * W;
    T* o = out + y * W;
    for (std::size_t x = 0; x < W; ++x) {
      T l = row[x == 0 ? 0 : x - 1];
      T r = row[x + 1 == W ? x : x + 1];
      o[x] = row[x] + q * (up[x] + dn[x] + l + r);
    }
  }
}

template <typename T>
void apply_D_transpose(const T* g, std::size_t H, std::size_t W, T* out) {
  // Scatter form of the adjoint: each output i of D reads f[nb(i)] with weight q.
  const T q = static_cast<T>(kNeighbourWeight);
  for (std::size_t i = 0; i < H * W; ++i) out[i] = g[i];
  for (std::size_t y = 0; y < H; ++y) {
    std::size_t yu = y == 0 ? 0 : y - 1;
    std::size_t yd = y + 1 == H ? y : y + 1;
    for (std::size_t x = 0; x < W; ++x) {
      std::size_t xl = x == 0 ? 0 : x - 1;
      std::size_t xr = x + 1 == W ? x : x + 1;
      T v = q * g[y * W + x];
      out[yu * W + x] += v;
      out[yd * W + x] += v;
      out[y * W + xl] += v;
      out[y * W + xr] += v;
    }
  }
}

template <typename T>
Array<T> apply_D(const Array<T>& field) {
  check_plane(field.dims);
  const std::size_t H = field.dims[field.rank() - 2], W = field.dims[field.rank() - 1];
  const std::size_t planes = field.size() / (H * W);
  Array<T> out(field.dims);
  for (std::size_t p = 0; p < planes; ++p)
    apply_D(field.data.data() + p * H * W, H, W, out.data.data() + p * H * W);
  return out;
}

template <typename T>
Tensor<T> apply_D(const Tensor<T>& field) {
  Array<T> out = apply_D(field.value());
  const Dims d = field.dims();
  return Tensor<T>::from_op(std::move(out), {field}, [d](detail::Node<T>& n) {
    const std::size_t H = d[d.size() - 2], W = d[d.size() - 1];
    const std::size_t planes = numel(d) / (H * W);
    auto& gp = n.parents[0]->ensure_grad();
    std::vector<T> tmp(H * W);
    for (std::size_t p = 0; p < planes; ++p) {
      apply_D_transpose(n.grad.data() + p * H * W, H, W, tmp.data());
      for (std::size_t i = 0; i < H * W; ++i) gp[p * H * W + i] += tmp[i];
    }
  });
}

template <typename T>
Tensor<T> sar_quadratic(const Tensor<T>& field, const Tensor<T>& weights) {
  return scale(weighted_sq_norm(apply_D(field), weights), T(0.5));
}

template void apply_D(const float*, std::size_t, std::size_t, float*);
template void apply_D(const double*, std::size_t, std::size_t, double*);
template void apply_D_transpose(const float*, std::size_t, std::size_t, float*);
template void apply_D_transpose(const double*, std::size_t, std::size_t, double*);
template Array<float> apply_D(const Array<float>&);
template Array<double> apply_D(const Array<double>&);
template Tensor<float> apply_D(const Tensor<float>&);
template Tensor<double> apply_D(const Tensor<double>&);
template Tensor<float> sar_quadratic(const Tensor<float>&, const Tensor<float>&);
template Tensor<double> sar_quadratic(const Tensor<double>&, const Tensor<double>&);

}  // namespace bayeseg::sar
