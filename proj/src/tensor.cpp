#include "bayeseg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include <Eigen/Core>

namespace bayeseg {

std::size_t numel(const Dims& dims) {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
}

std::string dims_to_string(const Dims& dims) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < dims.size(); ++i) os << (i ? "," : "") << dims[i];
  os << ']';
  return os.str();
}

template <typename T>
Array<T>::Array(Dims d, std::vector<T> values) : dims(std::move(d)), data(std::move(values)) {
  if (data.size() != numel(dims))
    throw ShapeError("array of " + std::to_string(data.size()) + " values cannot have dims " +
                     dims_to_string(dims));
}

// ---------------------------------------------------------------------------
// Tensor handle

template <typename T>
Tensor<T>::Tensor() : node_(std::make_shared<Node>()) {}

template <typename T>
Tensor<T>::Tensor(Array<T> value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(const Dims& dims, bool requires_grad) {
  return Tensor(Array<T>(dims), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(const Dims& dims, T value, bool requires_grad) {
  return Tensor(Array<T>(dims, value), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return Tensor(Array<T>(Dims{1}, value), requires_grad);
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor with dims " + dims_to_string(dims()));
  return node_->value.data[0];
}

template <typename T>
std::vector<T>& Tensor<T>::mutable_data() {
  if (!node_->is_leaf) throw UsageError("mutable_data() on a non-leaf tensor");
  return node_->value.data;
}

template <typename T>
void Tensor<T>::set_requires_grad(bool on) {
  if (!node_->is_leaf) throw UsageError("set_requires_grad() on a non-leaf tensor");
  node_->requires_grad = on;
}

template <typename T>
Tensor<T> Tensor<T>::from_op(Array<T> value, std::vector<Tensor> parents,
                             std::function<void(Node&)> bw) {
  Tensor out(std::move(value), false);
  out.node_->is_leaf = false;
  bool any = std::any_of(parents.begin(), parents.end(),
                         [](const Tensor& p) { return p.requires_grad(); });
  if (any) {
    out.node_->requires_grad = true;
    out.node_->parents.reserve(parents.size());
    for (auto& p : parents) out.node_->parents.push_back(p.node_);
    out.node_->backward = std::move(bw);
  }
  return out;
}

template <typename T>
void Tensor<T>::backward() const {
  if (numel() != 1)
    throw UsageError("backward() needs a scalar root, got dims " + dims_to_string(dims()));
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order (parents before children).
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  // Interior grads belong to this pass only; leaves accumulate across calls.
  for (Node* n : order)
    if (!n->is_leaf) n->grad.assign(n->value.data.size(), T(0));
  node_->ensure_grad()[0] += T(1);

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!n->is_leaf && n->backward) n->backward(*n);
  }
  for (Node* n : order)
    if (!n->is_leaf) {
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
}

// ---------------------------------------------------------------------------
// Broadcasting helpers

namespace {

Dims broadcast_dims(const Dims& a, const Dims& b) {
  std::size_t r = std::max(a.size(), b.size());
  Dims out(r);
  for (std::size_t i = 0; i < r; ++i) {
    std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1)
      throw ShapeError("cannot broadcast " + dims_to_string(a) + " with " + dims_to_string(b));
    out[i] = std::max(da, db);
  }
  return out;
}

// Strides of `d` expressed in the index space of `out`, 0 along broadcast axes.
std::vector<std::size_t> broadcast_strides(const Dims& d, const Dims& out) {
  std::size_t r = out.size();
  std::vector<std::size_t> s(r, 0);
  std::size_t stride = 1;
  for (std::size_t i = d.size(); i-- > 0;) {
    std::size_t oi = i + (r - d.size());
    s[oi] = d[i] == 1 ? 0 : stride;
    stride *= d[i];
  }
  return s;
}

// Calls f(out_index, a_index, b_index) for every element of the broadcast result.
template <typename F>
void for_each_broadcast(const Dims& out, const Dims& a, const Dims& b, F&& f) {
  std::size_t total = numel(out);
  if (a == out && b == out) {
    for (std::size_t i = 0; i < total; ++i) f(i, i, i);
    return;
  }
  if (a == out && numel(b) == 1) {
    for (std::size_t i = 0; i < total; ++i) f(i, i, std::size_t{0});
    return;
  }
  if (b == out && numel(a) == 1) {
    for (std::size_t i = 0; i < total; ++i) f(i, std::size_t{0}, i);
    return;
  }
  auto sa = broadcast_strides(a, out);
  auto sb = broadcast_strides(b, out);
  std::size_t r = out.size();
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t o = 0; o < total; ++o) {
    f(o, ia, ib);
    for (std::size_t k = r; k-- > 0;) {
      ++idx[k];
      ia += sa[k];
      ib += sb[k];
      if (idx[k] < out[k]) break;
      ia -= sa[k] * out[k];
      ib -= sb[k] * out[k];
      idx[k] = 0;
    }
  }
}

enum class BinOp { Add, Sub, Mul, Div };

template <typename T>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, BinOp op) {
  Dims od = broadcast_dims(a.dims(), b.dims());
  Array<T> out(od);
  const auto& av = a.data();
  const auto& bv = b.data();
  if (op == BinOp::Div) {
    for (std::size_t i = 0; i < bv.size(); ++i)
      if (bv[i] == T(0)) throw DomainError("division by zero", i);
  }
  for_each_broadcast(od, a.dims(), b.dims(), [&](std::size_t o, std::size_t ia, std::size_t ib) {
    switch (op) {
      case BinOp::Add: out.data[o] = av[ia] + bv[ib]; break;
      case BinOp::Sub: out.data[o] = av[ia] - bv[ib]; break;
      case BinOp::Mul: out.data[o] = av[ia] * bv[ib]; break;
      case BinOp::Div: out.data[o] = av[ia] / bv[ib]; break;
    }
  });
  Dims ad = a.dims(), bd = b.dims();
  return Tensor<T>::from_op(std::move(out), {a, b}, [op, od, ad, bd](detail::Node<T>& n) {
    auto& pa = *n.parents[0];
    auto& pb = *n.parents[1];
    const auto& g = n.grad;
    const auto& avv = pa.value.data;
    const auto& bvv = pb.value.data;
    T* ga = pa.requires_grad ? pa.ensure_grad().data() : nullptr;
    T* gb = pb.requires_grad ? pb.ensure_grad().data() : nullptr;
    for_each_broadcast(od, ad, bd, [&](std::size_t o, std::size_t ia, std::size_t ib) {
      switch (op) {
        case BinOp::Add:
          if (ga) ga[ia] += g[o];
          if (gb) gb[ib] += g[o];
          break;
        case BinOp::Sub:
          if (ga) ga[ia] += g[o];
          if (gb) gb[ib] -= g[o];
          break;
        case BinOp::Mul:
          if (ga) ga[ia] += g[o] * bvv[ib];
          if (gb) gb[ib] += g[o] * avv[ia];
          break;
        case BinOp::Div:
          if (ga) ga[ia] += g[o] / bvv[ib];
          if (gb) gb[ib] -= g[o] * avv[ia] / (bvv[ib] * bvv[ib]);
          break;
      }
    });
  });
}

// Pointwise op with derivative computed from (input, output).
template <typename T, typename Fwd, typename Deriv>
Tensor<T> unary(const Tensor<T>& a, Fwd fwd, Deriv deriv) {
  Array<T> out(a.dims());
  const auto& av = a.data();
  for (std::size_t i = 0; i < av.size(); ++i) out.data[i] = fwd(av[i]);
  return Tensor<T>::from_op(std::move(out), {a}, [deriv](detail::Node<T>& n) {
    auto& p = *n.parents[0];
    auto& gp = p.ensure_grad();
    const auto& x = p.value.data;
    const auto& y = n.value.data;
    for (std::size_t i = 0; i < x.size(); ++i) gp[i] += n.grad[i] * deriv(x[i], y[i]);
  });
}

}  // namespace

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) { return binary(a, b, BinOp::Add); }
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) { return binary(a, b, BinOp::Sub); }
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) { return binary(a, b, BinOp::Mul); }
template <typename T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) { return binary(a, b, BinOp::Div); }

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  return unary(a, [](T x) { return -x; }, [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  return unary(a, [factor](T x) { return factor * x; }, [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T offset) {
  return unary(a, [offset](T x) { return x + offset; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  return unary(a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  const auto& av = a.data();
  for (std::size_t i = 0; i < av.size(); ++i)
    if (!(av[i] > T(0))) throw DomainError("log of non-positive value", i);
  return unary(a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
Tensor<T> square(const Tensor<T>& a) {
  return unary(a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return unary(a, [](T x) { return x > T(0) ? x : T(0); },
               [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& a) {
  return unary(
      a,
      [](T x) { return x > T(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); },
      [](T x, T) { return T(1) / (T(1) + std::exp(-x)); });
}

template <typename T>
Tensor<T> clamp_min(const Tensor<T>& a, T floor) {
  return unary(a, [floor](T x) { return x < floor ? floor : x; },
               [floor](T x, T) { return x < floor ? T(0) : T(1); });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T s = 0;
  for (T v : a.data()) s += v;
  return Tensor<T>::from_op(Array<T>(Dims{1}, s), {a}, [](detail::Node<T>& n) {
    auto& gp = n.parents[0]->ensure_grad();
    T g = n.grad[0];
    for (auto& v : gp) v += g;
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  if (a.numel() == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <typename T>
Tensor<T> weighted_sq_norm(const Tensor<T>& v, const Tensor<T>& w) {
  if (v.dims() != w.dims())
    throw ShapeError("weighted_sq_norm dims " + dims_to_string(v.dims()) + " vs " +
                     dims_to_string(w.dims()));
  const auto& vv = v.data();
  const auto& wv = w.data();
  T s = 0;
  for (std::size_t i = 0; i < vv.size(); ++i) {
    if (wv[i] < T(0)) throw DomainError("negative weight", i);
    s += wv[i] * vv[i] * vv[i];
  }
  return Tensor<T>::from_op(Array<T>(Dims{1}, s), {v, w}, [](detail::Node<T>& n) {
    auto& pv = *n.parents[0];
    auto& pw = *n.parents[1];
    T g = n.grad[0];
    const auto& x = pv.value.data;
    const auto& ww = pw.value.data;
    if (pv.requires_grad) {
      auto& gv = pv.ensure_grad();
      for (std::size_t i = 0; i < x.size(); ++i) gv[i] += g * T(2) * ww[i] * x[i];
    }
    if (pw.requires_grad) {
      auto& gw = pw.ensure_grad();
      for (std::size_t i = 0; i < x.size(); ++i) gw[i] += g * x[i] * x[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Layout ops

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, const Dims& dims) {
  if (numel(dims) != a.numel())
    throw ShapeError("cannot reshape " + dims_to_string(a.dims()) + " to " + dims_to_string(dims));
  return Tensor<T>::from_op(Array<T>(dims, a.data()), {a}, [](detail::Node<T>& n) {
    auto& gp = n.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += n.grad[i];
  });
}

namespace {

struct ChannelLayout {
  std::size_t batch, channels, inner;
};

ChannelLayout channel_layout(const Dims& d, const char* op) {
  if (d.size() < 2) throw ShapeError(std::string(op) + " needs rank >= 2, got " + dims_to_string(d));
  std::size_t inner = 1;
  for (std::size_t i = 2; i < d.size(); ++i) inner *= d[i];
  return {d[0], d[1], inner};
}

}  // namespace

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& a, std::size_t begin, std::size_t count) {
  auto L = channel_layout(a.dims(), "slice_channels");
  if (begin + count > L.channels || count == 0)
    throw ShapeError("channel slice [" + std::to_string(begin) + "," +
                     std::to_string(begin + count) + ") out of " + dims_to_string(a.dims()));
  Dims od = a.dims();
  od[1] = count;
  Array<T> out(od);
  const auto& av = a.data();
  for (std::size_t n = 0; n < L.batch; ++n)
    std::copy_n(av.begin() + (n * L.channels + begin) * L.inner, count * L.inner,
                out.data.begin() + n * count * L.inner);
  return Tensor<T>::from_op(std::move(out), {a}, [L, begin, count](detail::Node<T>& node) {
    auto& gp = node.parents[0]->ensure_grad();
    for (std::size_t n = 0; n < L.batch; ++n) {
      const T* src = node.grad.data() + n * count * L.inner;
      T* dst = gp.data() + (n * L.channels + begin) * L.inner;
      for (std::size_t i = 0; i < count * L.inner; ++i) dst[i] += src[i];
    }
  });
}

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels of nothing");
  auto L0 = channel_layout(parts[0].dims(), "concat_channels");
  std::size_t total_c = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    auto L = channel_layout(p.dims(), "concat_channels");
    if (L.batch != L0.batch || L.inner != L0.inner ||
        p.dims().size() != parts[0].dims().size())
      throw ShapeError("concat_channels mismatch: " + dims_to_string(p.dims()) + " vs " +
                       dims_to_string(parts[0].dims()));
    offsets.push_back(total_c);
    total_c += L.channels;
  }
  Dims od = parts[0].dims();
  od[1] = total_c;
  Array<T> out(od);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    std::size_t c = parts[k].dim(1);
    for (std::size_t n = 0; n < L0.batch; ++n)
      std::copy_n(parts[k].data().begin() + n * c * L0.inner, c * L0.inner,
                  out.data.begin() + (n * total_c + offsets[k]) * L0.inner);
  }
  return Tensor<T>::from_op(std::move(out), parts, [L0, total_c, offsets](detail::Node<T>& node) {
    for (std::size_t k = 0; k < node.parents.size(); ++k) {
      auto& p = *node.parents[k];
      if (!p.requires_grad) continue;
      auto& gp = p.ensure_grad();
      std::size_t c = p.value.dims[1];
      for (std::size_t n = 0; n < L0.batch; ++n) {
        const T* src = node.grad.data() + (n * total_c + offsets[k]) * L0.inner;
        T* dst = gp.data() + n * c * L0.inner;
        for (std::size_t i = 0; i < c * L0.inner; ++i) dst[i] += src[i];
      }
    }
  });
}

template <typename T>
Tensor<T> channel_softmax(const Tensor<T>& logits) {
  auto L = channel_layout(logits.dims(), "channel_softmax");
  if (L.channels == 0) throw ShapeError("channel_softmax needs at least one channel");
  Array<T> out(logits.dims());
  const auto& x = logits.data();
  for (std::size_t n = 0; n < L.batch; ++n) {
    std::size_t base = n * L.channels * L.inner;
    for (std::size_t i = 0; i < L.inner; ++i) {
      T mx = x[base + i];
      for (std::size_t c = 1; c < L.channels; ++c) mx = std::max(mx, x[base + c * L.inner + i]);
      T z = 0;
      for (std::size_t c = 0; c < L.channels; ++c) {
        T e = std::exp(x[base + c * L.inner + i] - mx);
        out.data[base + c * L.inner + i] = e;
        z += e;
      }
      for (std::size_t c = 0; c < L.channels; ++c) out.data[base + c * L.inner + i] /= z;
    }
  }
  return Tensor<T>::from_op(std::move(out), {logits}, [L](detail::Node<T>& node) {
    auto& gp = node.parents[0]->ensure_grad();
    const auto& s = node.value.data;
    const auto& g = node.grad;
    for (std::size_t n = 0; n < L.batch; ++n) {
      std::size_t base = n * L.channels * L.inner;
      for (std::size_t i = 0; i < L.inner; ++i) {
        T dot = 0;
        for (std::size_t c = 0; c < L.channels; ++c) {
          std::size_t j = base + c * L.inner + i;
          dot += g[j] * s[j];
        }
        for (std::size_t c = 0; c < L.channels; ++c) {
          std::size_t j = base + c * L.inner + i;
          gp[j] += s[j] * (g[j] - dot);
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Convolution

namespace {

// Copies one H x W plane into a (H+2p) x (W+2p) buffer.
template <typename T>
void pad_plane(const T* src, std::size_t H, std::size_t W, Padding pad, T* dst) {
  std::size_t p = pad.size, PW = W + 2 * p, PH = H + 2 * p;
  for (std::size_t y = 0; y < PH; ++y) {
    T* row = dst + y * PW;
    bool inside_y = y >= p && y < H + p;
    if (!inside_y && pad.mode == PadMode::Zero) {
      std::fill_n(row, PW, T(0));
      continue;
    }
    std::size_t sy = inside_y ? y - p : (y < p ? 0 : H - 1);
    const T* srow = src + sy * W;
    for (std::size_t x = 0; x < p; ++x) row[x] = pad.mode == PadMode::Zero ? T(0) : srow[0];
    std::copy_n(srow, W, row + p);
    for (std::size_t x = 0; x < p; ++x)
      row[p + W + x] = pad.mode == PadMode::Zero ? T(0) : srow[W - 1];
  }
}

// Adjoint of pad_plane: folds a padded-plane gradient back onto the source plane.
template <typename T>
void unpad_plane_add(const T* gpad, std::size_t H, std::size_t W, Padding pad, T* gsrc) {
  std::size_t p = pad.size, PW = W + 2 * p, PH = H + 2 * p;
  for (std::size_t y = 0; y < PH; ++y) {
    const T* row = gpad + y * PW;
    bool inside_y = y >= p && y < H + p;
    if (!inside_y && pad.mode == PadMode::Zero) continue;
    std::size_t sy = inside_y ? y - p : (y < p ? 0 : H - 1);
    T* srow = gsrc + sy * W;
    for (std::size_t x = 0; x < W; ++x) srow[x] += row[p + x];
    if (pad.mode == PadMode::Replicate) {
      for (std::size_t x = 0; x < p; ++x) {
        srow[0] += row[x];
        srow[W - 1] += row[p + W + x];
      }
    }
  }
}

}  // namespace

namespace {

// Column matrix [Ci*KH*KW, OH*OW] of one padded image.
template <typename T>
void im2col(const T* padded, std::size_t Ci, std::size_t PH, std::size_t PW, std::size_t KH,
            std::size_t KW, std::size_t stride, std::size_t OH, std::size_t OW, T* cols) {
  const std::size_t P = OH * OW;
  for (std::size_t ci = 0; ci < Ci; ++ci)
    for (std::size_t ky = 0; ky < KH; ++ky)
      for (std::size_t kx = 0; kx < KW; ++kx) {
        T* dst = cols + ((ci * KH + ky) * KW + kx) * P;
        const T* src = padded + ci * PH * PW;
        for (std::size_t y = 0; y < OH; ++y) {
          const T* row = src + (y * stride + ky) * PW + kx;
          T* d = dst + y * OW;
          if (stride == 1) {
            std::copy_n(row, OW, d);
          } else {
            for (std::size_t x = 0; x < OW; ++x) d[x] = row[x * stride];
          }
        }
      }
}

// Adjoint of im2col: scatters column gradients onto the padded image.
template <typename T>
void col2im_add(const T* cols, std::size_t Ci, std::size_t PH, std::size_t PW, std::size_t KH,
                std::size_t KW, std::size_t stride, std::size_t OH, std::size_t OW, T* padded) {
  const std::size_t P = OH * OW;
  for (std::size_t ci = 0; ci < Ci; ++ci)
    for (std::size_t ky = 0; ky < KH; ++ky)
      for (std::size_t kx = 0; kx < KW; ++kx) {
        const T* src = cols + ((ci * KH + ky) * KW + kx) * P;
        T* dst = padded + ci * PH * PW;
        for (std::size_t y = 0; y < OH; ++y) {
          T* row = dst + (y * stride + ky) * PW + kx;
          const T* s = src + y * OW;
          if (stride == 1) {
            for (std::size_t x = 0; x < OW; ++x) row[x] += s[x];
          } else {
            for (std::size_t x = 0; x < OW; ++x) row[x * stride] += s[x];
          }
        }
      }
}

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, std::size_t stride,
                 Padding padding) {
  const Dims& id = input.dims();
  const Dims& kd = kernel.dims();
  if (id.size() != 4 || kd.size() != 4)
    throw ShapeError("conv2d expects rank-4 input and kernel, got " + dims_to_string(id) + " and " +
                     dims_to_string(kd));
  if (kd[1] != id[1])
    throw ShapeError("conv2d kernel " + dims_to_string(kd) + " does not match input channels " +
                     dims_to_string(id));
  if (stride == 0) throw ShapeError("conv2d stride must be positive");
  const std::size_t N = id[0], Ci = id[1], H = id[2], W = id[3];
  const std::size_t Co = kd[0], KH = kd[2], KW = kd[3];
  const std::size_t p = padding.size;
  const std::size_t PH = H + 2 * p, PW = W + 2 * p;
  if (PH < KH || PW < KW) throw ShapeError("conv2d kernel larger than padded input");
  const std::size_t OH = (PH - KH) / stride + 1, OW = (PW - KW) / stride + 1;
  const std::size_t P = OH * OW, CK = Ci * KH * KW;
  const auto ei = [](std::size_t v) { return static_cast<Eigen::Index>(v); };

  // The padded input is kept for the backward pass; columns are rebuilt there.
  auto padded = std::make_shared<std::vector<T>>(N * Ci * PH * PW);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < Ci; ++c)
      pad_plane(input.data().data() + (n * Ci + c) * H * W, H, W, padding,
                padded->data() + (n * Ci + c) * PH * PW);

  Array<T> out(Dims{N, Co, OH, OW});
  {
    Eigen::Map<const RowMat<T>> wm(kernel.data().data(), ei(Co), ei(CK));
    RowMat<T> cols(ei(CK), ei(P));
    for (std::size_t n = 0; n < N; ++n) {
      im2col(padded->data() + n * Ci * PH * PW, Ci, PH, PW, KH, KW, stride, OH, OW, cols.data());
      Eigen::Map<RowMat<T>> om(out.data.data() + n * Co * P, ei(Co), ei(P));
      om.noalias() = wm * cols;
    }
  }

  return Tensor<T>::from_op(
      std::move(out), {input, kernel},
      [=](detail::Node<T>& node) {
        auto& pin = *node.parents[0];
        auto& pk = *node.parents[1];
        Eigen::Map<const RowMat<T>> wm(pk.value.data.data(), ei(Co), ei(CK));
        RowMat<T> cols(ei(CK), ei(P));
        RowMat<T> gk_acc;
        if (pk.requires_grad) gk_acc = RowMat<T>::Zero(ei(Co), ei(CK));
        std::vector<T> gpad(pin.requires_grad ? Ci * PH * PW : 0);
        for (std::size_t n = 0; n < N; ++n) {
          Eigen::Map<const RowMat<T>> gm(node.grad.data() + n * Co * P, ei(Co), ei(P));
          if (pk.requires_grad) {
            im2col(padded->data() + n * Ci * PH * PW, Ci, PH, PW, KH, KW, stride, OH, OW,
                   cols.data());
            gk_acc.noalias() += gm * cols.transpose();
          }
          if (pin.requires_grad) {
            cols.noalias() = wm.transpose() * gm;
            std::fill(gpad.begin(), gpad.end(), T(0));
            col2im_add(cols.data(), Ci, PH, PW, KH, KW, stride, OH, OW, gpad.data());
            auto& gi = pin.ensure_grad();
            for (std::size_t c = 0; c < Ci; ++c)
              unpad_plane_add(gpad.data() + c * PH * PW, H, W, padding,
                              gi.data() + (n * Ci + c) * H * W);
          }
        }
        if (pk.requires_grad) {
          auto& gk = pk.ensure_grad();
          for (std::size_t i = 0; i < Co * CK; ++i) gk[i] += gk_acc.data()[i];
        }
      });
}

template <typename T>
Tensor<T> instance_norm(const Tensor<T>& a, T eps) {
  auto L = channel_layout(a.dims(), "instance_norm");
  const std::size_t planes = L.batch * L.channels, M = L.inner;
  Array<T> out(a.dims());
  auto inv_std = std::make_shared<std::vector<T>>(planes);
  const auto& x = a.data();
  for (std::size_t p = 0; p < planes; ++p) {
    const T* xp = x.data() + p * M;
    T mu = 0;
    for (std::size_t i = 0; i < M; ++i) mu += xp[i];
    mu /= static_cast<T>(M);
    T var = 0;
    for (std::size_t i = 0; i < M; ++i) var += (xp[i] - mu) * (xp[i] - mu);
    var /= static_cast<T>(M);
    T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[p] = is;
    for (std::size_t i = 0; i < M; ++i) out.data[p * M + i] = (xp[i] - mu) * is;
  }
  return Tensor<T>::from_op(std::move(out), {a}, [planes, M, inv_std](detail::Node<T>& node) {
    auto& gp = node.parents[0]->ensure_grad();
    const auto& xh = node.value.data;
    const auto& g = node.grad;
    for (std::size_t p = 0; p < planes; ++p) {
      T gm = 0, gx = 0;
      for (std::size_t i = 0; i < M; ++i) {
        gm += g[p * M + i];
        gx += g[p * M + i] * xh[p * M + i];
      }
      gm /= static_cast<T>(M);
      gx /= static_cast<T>(M);
      T is = (*inv_std)[p];
      for (std::size_t i = 0; i < M; ++i)
        gp[p * M + i] += is * (g[p * M + i] - gm - xh[p * M + i] * gx);
    }
  });
}

template <typename T>
Tensor<T> avg_pool2(const Tensor<T>& a) {
  const Dims& d = a.dims();
  if (d.size() != 4 || d[2] % 2 || d[3] % 2)
    throw ShapeError("avg_pool2 needs rank-4 input with even H,W, got " + dims_to_string(d));
  const std::size_t planes = d[0] * d[1], H = d[2], W = d[3], OH = H / 2, OW = W / 2;
  Array<T> out(Dims{d[0], d[1], OH, OW});
  const auto& x = a.data();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = 0; y < OH; ++y)
      for (std::size_t xx = 0; xx < OW; ++xx) {
        const T* s = x.data() + p * H * W + 2 * y * W + 2 * xx;
        out.data[(p * OH + y) * OW + xx] = T(0.25) * (s[0] + s[1] + s[W] + s[W + 1]);
      }
  return Tensor<T>::from_op(std::move(out), {a}, [planes, H, W, OH, OW](detail::Node<T>& node) {
    auto& gp = node.parents[0]->ensure_grad();
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t y = 0; y < OH; ++y)
        for (std::size_t xx = 0; xx < OW; ++xx) {
          T g = T(0.25) * node.grad[(p * OH + y) * OW + xx];
          T* s = gp.data() + p * H * W + 2 * y * W + 2 * xx;
          s[0] += g;
          s[1] += g;
          s[W] += g;
          s[W + 1] += g;
        }
  });
}

template <typename T>
Tensor<T> upsample2(const Tensor<T>& a) {
  const Dims& d = a.dims();
  if (d.size() != 4) throw ShapeError("upsample2 needs rank-4 input, got " + dims_to_string(d));
  const std::size_t planes = d[0] * d[1], H = d[2], W = d[3], OH = 2 * H, OW = 2 * W;
  Array<T> out(Dims{d[0], d[1], OH, OW});
  const auto& x = a.data();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = 0; y < OH; ++y)
      for (std::size_t xx = 0; xx < OW; ++xx)
        out.data[(p * OH + y) * OW + xx] = x[p * H * W + (y / 2) * W + xx / 2];
  return Tensor<T>::from_op(std::move(out), {a}, [planes, H, W, OH, OW](detail::Node<T>& node) {
    auto& gp = node.parents[0]->ensure_grad();
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t y = 0; y < OH; ++y)
        for (std::size_t xx = 0; xx < OW; ++xx)
          gp[p * H * W + (y / 2) * W + xx / 2] += node.grad[(p * OH + y) * OW + xx];
  });
}

// ---------------------------------------------------------------------------

#define BAYESEG_INSTANTIATE(T)                                                               \
  template struct Array<T>;                                                                  \
  template class Tensor<T>;                                                                  \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> neg(const Tensor<T>&);                                                  \
  template Tensor<T> scale(const Tensor<T>&, T);                                             \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                        \
  template Tensor<T> exp(const Tensor<T>&);                                                  \
  template Tensor<T> log(const Tensor<T>&);                                                  \
  template Tensor<T> square(const Tensor<T>&);                                               \
  template Tensor<T> relu(const Tensor<T>&);                                                 \
  template Tensor<T> softplus(const Tensor<T>&);                                             \
  template Tensor<T> clamp_min(const Tensor<T>&, T);                                         \
  template Tensor<T> sum(const Tensor<T>&);                                                  \
  template Tensor<T> mean(const Tensor<T>&);                                                 \
  template Tensor<T> weighted_sq_norm(const Tensor<T>&, const Tensor<T>&);                   \
  template Tensor<T> reshape(const Tensor<T>&, const Dims&);                                 \
  template Tensor<T> slice_channels(const Tensor<T>&, std::size_t, std::size_t);             \
  template Tensor<T> concat_channels(const std::vector<Tensor<T>>&);                         \
  template Tensor<T> channel_softmax(const Tensor<T>&);                                      \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, std::size_t, Padding);       \
  template Tensor<T> instance_norm(const Tensor<T>&, T);                                     \
  template Tensor<T> avg_pool2(const Tensor<T>&);                                            \
  template Tensor<T> upsample2(const Tensor<T>&);

BAYESEG_INSTANTIATE(float)
BAYESEG_INSTANTIATE(double)

#undef BAYESEG_INSTANTIATE

}  // namespace bayeseg
