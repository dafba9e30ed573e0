#pragma once

// Amortised inference networks:
//   shape net f_s      y -> (mu_x, ln sigma_x^2)          residual blocks Conv-ReLU-Conv
//   appearance net f_a y -> (mu_m, ln sigma_m^2)          residual blocks Conv-Norm-ReLU-Conv-Norm
//   segmentation net g x -> (K raw means, K ln sigma_z^2) two-level encoder-decoder

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "bayeseg/adam.hpp"
#include "bayeseg/distributions.hpp"
#include "bayeseg/tensor.hpp"

namespace bayeseg {

enum class NormMode { None, Instance };

std::string to_string(NormMode m);
NormMode parse_norm_mode(const std::string& s);

struct NetConfig {
  std::size_t width = 16;
  std::size_t res_blocks_shape = 10;
  std::size_t res_blocks_app = 6;
  std::size_t classes = 3;
  NormMode norm = NormMode::Instance;
  std::uint64_t seed = 0;
  // Pruned variants emit only a mean channel (deterministic a or z).
  bool stochastic_appearance = true;
  bool stochastic_segmentation = true;

  void validate() const;
};

inline constexpr double kLogVarBiasInit = -2.0;

// Named leaf tensors in registration order.
template <typename T>
class NetParams {
 public:
  Tensor<T>& add(const std::string& name, Array<T> init);
  const Tensor<T>& at(const std::string& name) const;
  Tensor<T>& at(const std::string& name);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  std::size_t size() const { return entries_.size(); }
  std::size_t scalar_count() const;
  const std::vector<std::pair<std::string, Tensor<T>>>& entries() const { return entries_; }
  std::vector<std::pair<std::string, Tensor<T>>>& entries() { return entries_; }
  void zero_grad();

 private:
  std::vector<std::pair<std::string, Tensor<T>>> entries_;
  std::map<std::string, std::size_t> index_;
};

// Gaussian posterior field from a two-channel head; std = exp(log_var / 2).
// Without a variance head (pruned), log_var/std are absent.
template <typename T>
struct GaussianField {
  Tensor<T> mean;
  std::optional<Tensor<T>> log_var;
  std::optional<Tensor<T>> std;
};

template <typename T>
class BayeSegNets {
 public:
  explicit BayeSegNets(const NetConfig& config);

  const NetConfig& config() const { return config_; }
  NetParams<T>& params() { return params_; }
  const NetParams<T>& params() const { return params_; }

  // y: [N,1,H,W]
  GaussianField<T> shape_forward(const Tensor<T>& y) const;
  GaussianField<T> appearance_forward(const Tensor<T>& y) const;
  // x: [N,1,H,W] with H, W divisible by 4. Returns [N,2K,H,W] (or [N,K,H,W]
  // when segmentation is deterministic): raw means, then ln sigma_z^2.
  Tensor<T> seg_forward(const Tensor<T>& x) const;
  GaussianField<T> split_seg_output(const Tensor<T>& raw) const;

  // Parameters belonging to one sub-network ("shape.", "app.", "seg.").
  std::vector<Tensor<T>> params_with_prefix(const std::string& prefix) const;

 private:
  Tensor<T> conv(const Tensor<T>& x, const std::string& name, bool with_bias = true) const;
  Tensor<T> norm(const Tensor<T>& x, const std::string& name) const;
  void add_conv(const std::string& name, std::size_t cin, std::size_t cout, std::size_t k,
                Rng& rng, double gain = 1.0);
  void add_norm(const std::string& name, std::size_t channels);
  GaussianField<T> head_split(const Tensor<T>& out, std::size_t mean_channels) const;

  NetConfig config_;
  NetParams<T> params_;
};

// a = m + mu_rho^{-1/2} * eps, for visualising the appearance component.
template <typename T>
Array<T> sample_appearance(const Array<T>& m_sample, const Array<T>& mu_rho, const Array<T>& eps);

// Checkpoint: "BSCKPT" | u32 echo length | config echo bytes | u32 tensor count |
// per tensor: u16 name length, name bytes, BSTEN tensor.
struct Checkpoint {
  std::string config_echo;
  std::vector<std::pair<std::string, Array<double>>> tensors;
  const Array<double>* find(const std::string& name) const;
};

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const std::string& config_echo,
                     const NetParams<T>& params, Adam<T>* optimizer = nullptr);
Checkpoint load_checkpoint(const std::filesystem::path& path);
// Copies tensors into matching parameters (and optimizer moments when given).
template <typename T>
void restore_params(const Checkpoint& ckpt, NetParams<T>& params, Adam<T>* optimizer = nullptr);

}  // namespace bayeseg
