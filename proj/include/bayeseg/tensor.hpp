#pragma once

// Dense tensors with tape-free reverse-mode differentiation.
//
// A Tensor is a cheap handle to a graph node. Operations build new nodes that
// remember their parents and a closure propagating the output gradient back.
// backward() topologically sorts the reachable sub-graph from a scalar root
// and runs each closure once.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "bayeseg/errors.hpp"

namespace bayeseg {

using Dims = std::vector<std::size_t>;

std::size_t numel(const Dims& dims);
std::string dims_to_string(const Dims& dims);

// Plain dense storage, row-major.
template <typename T>
struct Array {
  Dims dims;
  std::vector<T> data;

  Array() = default;
  explicit Array(Dims d, T fill = T(0)) : dims(std::move(d)), data(numel(dims), fill) {}
  Array(Dims d, std::vector<T> values);

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return dims.size(); }
  std::size_t dim(std::size_t i) const { return dims.at(i); }
  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }

  template <typename U>
  Array<U> cast() const {
    Array<U> out;
    out.dims = dims;
    out.data.assign(data.begin(), data.end());
    return out;
  }
};

namespace detail {

template <typename T>
struct Node {
  Array<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  bool is_leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into parents' grads.
  std::function<void(Node&)> backward;

  std::vector<T>& ensure_grad() {
    if (grad.size() != value.data.size()) grad.assign(value.data.size(), T(0));
    return grad;
  }
};

}  // namespace detail

template <typename T>
class Tensor {
 public:
  using Node = detail::Node<T>;

  Tensor();
  explicit Tensor(Array<T> value, bool requires_grad = false);

  static Tensor zeros(const Dims& dims, bool requires_grad = false);
  static Tensor full(const Dims& dims, T value, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  const Dims& dims() const { return node_->value.dims; }
  std::size_t dim(std::size_t i) const { return node_->value.dims.at(i); }
  std::size_t numel() const { return node_->value.data.size(); }
  const std::vector<T>& data() const { return node_->value.data; }
  const Array<T>& value() const { return node_->value; }
  T item() const;

  // Only valid on leaves; used by optimizers and checkpoint loading.
  std::vector<T>& mutable_data();

  bool requires_grad() const { return node_->requires_grad; }
  // Leaves only; frozen leaves keep the graph from recording backward closures.
  void set_requires_grad(bool on);
  bool is_leaf() const { return node_->is_leaf; }
  // Empty when no gradient has reached this tensor yet.
  const std::vector<T>& grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  // Accumulates d(this)/d(leaf) into every reachable leaf with requires_grad.
  void backward() const;

  // Same values, cut from the graph.
  Tensor detach() const { return Tensor(node_->value, false); }

  const std::shared_ptr<Node>& node() const { return node_; }

  // Builds an op result; `bw` is only kept when some parent needs a gradient.
  static Tensor from_op(Array<T> value, std::vector<Tensor> parents,
                        std::function<void(Node&)> bw);

 private:
  std::shared_ptr<Node> node_;
};

enum class PadMode { Zero, Replicate };

struct Padding {
  std::size_t size = 0;
  PadMode mode = PadMode::Zero;
};

// Elementwise, numpy-style right-aligned broadcasting.
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);

template <typename T> Tensor<T> neg(const Tensor<T>& a);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T factor);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& a, T offset);
template <typename T> Tensor<T> exp(const Tensor<T>& a);
template <typename T> Tensor<T> log(const Tensor<T>& a);
template <typename T> Tensor<T> square(const Tensor<T>& a);
template <typename T> Tensor<T> relu(const Tensor<T>& a);
template <typename T> Tensor<T> softplus(const Tensor<T>& a);
// Values below `floor` are clamped and receive no gradient.
template <typename T> Tensor<T> clamp_min(const Tensor<T>& a, T floor);

template <typename T> Tensor<T> sum(const Tensor<T>& a);
template <typename T> Tensor<T> mean(const Tensor<T>& a);
// sum_i w_i v_i^2; w must be nonnegative and have the dims of v.
template <typename T> Tensor<T> weighted_sq_norm(const Tensor<T>& v, const Tensor<T>& w);

template <typename T> Tensor<T> reshape(const Tensor<T>& a, const Dims& dims);
// Channel (dim 1) slicing and concatenation of N,C,... tensors.
template <typename T> Tensor<T> slice_channels(const Tensor<T>& a, std::size_t begin, std::size_t count);
template <typename T> Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts);
// Softmax over dim 1, max-subtracted.
template <typename T> Tensor<T> channel_softmax(const Tensor<T>& logits);

// input N,Cin,H,W; kernel Cout,Cin,kh,kw.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, std::size_t stride = 1,
                 Padding padding = {});
// Per-(n,c) normalisation over H,W without affine parameters.
template <typename T> Tensor<T> instance_norm(const Tensor<T>& a, T eps = T(1e-5));
template <typename T> Tensor<T> avg_pool2(const Tensor<T>& a);
template <typename T> Tensor<T> upsample2(const Tensor<T>& a);

}  // namespace bayeseg
