#include "bayeseg/networks.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "bayeseg/serialize.hpp"

namespace bayeseg {

std::string to_string(NormMode m) { return m == NormMode::Instance ? "instance" : "none"; }

NormMode parse_norm_mode(const std::string& s) {
  if (s == "instance") return NormMode::Instance;
  if (s == "none") return NormMode::None;
  throw ConfigError("unknown norm mode '" + s + "' (expected none|instance)");
}

void NetConfig::validate() const {
  if (width < 1) throw ConfigError("net.width must be >= 1");
  if (res_blocks_shape < 1) throw ConfigError("net.res_blocks_shape must be >= 1");
  if (res_blocks_app < 1) throw ConfigError("net.res_blocks_app must be >= 1");
  if (classes < 2) throw ConfigError("number of classes must be >= 2");
}

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T>& NetParams<T>::add(const std::string& name, Array<T> init) {
  if (index_.count(name)) throw UsageError("duplicate parameter " + name);
  index_[name] = entries_.size();
  entries_.emplace_back(name, Tensor<T>(std::move(init), true));
  return entries_.back().second;
}

template <typename T>
const Tensor<T>& NetParams<T>::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw UsageError("unknown parameter " + name);
  return entries_[it->second].second;
}

template <typename T>
Tensor<T>& NetParams<T>::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw UsageError("unknown parameter " + name);
  return entries_[it->second].second;
}

template <typename T>
std::size_t NetParams<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.second.numel();
  return n;
}

template <typename T>
void NetParams<T>::zero_grad() {
  for (auto& e : entries_) e.second.zero_grad();
}

// ---------------------------------------------------------------------------

template <typename T>
void BayeSegNets<T>::add_conv(const std::string& name, std::size_t cin, std::size_t cout,
                              std::size_t k, Rng& rng, double gain) {
  Array<T> w({cout, cin, k, k});
  const double std = gain * std::sqrt(2.0 / static_cast<double>(cin * k * k));
  std::normal_distribution<double> nd(0.0, std);
  for (auto& v : w.data) v = static_cast<T>(nd(rng));
  params_.add(name + ".weight", std::move(w));
  params_.add(name + ".bias", Array<T>({cout}));
}

template <typename T>
void BayeSegNets<T>::add_norm(const std::string& name, std::size_t channels) {
  params_.add(name + ".scale", Array<T>({channels}, T(1)));
  params_.add(name + ".shift", Array<T>({channels}));
}

template <typename T>
BayeSegNets<T>::BayeSegNets(const NetConfig& config) : config_(config) {
  config_.validate();
  Rng rng(config_.seed);
  const std::size_t w = config_.width, K = config_.classes;
  // Residual branches end in a down-scaled conv so deep stacks start near identity.
  const double branch_gain = 0.1;

  add_conv("shape.in", 1, w, 3, rng);
  for (std::size_t b = 0; b < config_.res_blocks_shape; ++b) {
    std::string p = "shape.block" + std::to_string(b);
    add_conv(p + ".conv1", w, w, 3, rng);
    add_conv(p + ".conv2", w, w, 3, rng, branch_gain);
  }
  add_conv("shape.out", w, 2, 3, rng, 0.1);
  params_.at("shape.out.bias").mutable_data()[1] = static_cast<T>(kLogVarBiasInit);

  add_conv("app.in", 1, w, 3, rng);
  for (std::size_t b = 0; b < config_.res_blocks_app; ++b) {
    std::string p = "app.block" + std::to_string(b);
    add_conv(p + ".conv1", w, w, 3, rng);
    if (config_.norm == NormMode::Instance) add_norm(p + ".norm1", w);
    add_conv(p + ".conv2", w, w, 3, rng, branch_gain);
    if (config_.norm == NormMode::Instance) add_norm(p + ".norm2", w);
  }
  const std::size_t app_out = config_.stochastic_appearance ? 2 : 1;
  add_conv("app.out", w, app_out, 3, rng, 0.1);
  if (config_.stochastic_appearance)
    params_.at("app.out.bias").mutable_data()[1] = static_cast<T>(kLogVarBiasInit);

  add_conv("seg.enc1a", 1, w, 3, rng);
  add_conv("seg.enc1b", w, w, 3, rng);
  add_conv("seg.enc2a", w, 2 * w, 3, rng);
  add_conv("seg.enc2b", 2 * w, 2 * w, 3, rng);
  add_conv("seg.mida", 2 * w, 4 * w, 3, rng);
  add_conv("seg.midb", 4 * w, 4 * w, 3, rng);
  add_conv("seg.dec2a", 6 * w, 2 * w, 3, rng);
  add_conv("seg.dec2b", 2 * w, 2 * w, 3, rng);
  add_conv("seg.dec1a", 3 * w, w, 3, rng);
  add_conv("seg.dec1b", w, w, 3, rng);
  const std::size_t seg_out = config_.stochastic_segmentation ? 2 * K : K;
  add_conv("seg.out", w, seg_out, 1, rng);
  if (config_.stochastic_segmentation) {
    auto& bias = params_.at("seg.out.bias").mutable_data();
    for (std::size_t k = K; k < 2 * K; ++k) bias[k] = static_cast<T>(kLogVarBiasInit);
  }
}

template <typename T>
Tensor<T> BayeSegNets<T>::conv(const Tensor<T>& x, const std::string& name, bool with_bias) const {
  const auto& w = params_.at(name + ".weight");
  const std::size_t k = w.dim(2);
  auto y = conv2d(x, w, 1, Padding{k / 2, PadMode::Zero});
  if (!with_bias) return y;
  const auto& b = params_.at(name + ".bias");
  return add(y, reshape(b, Dims{1, b.numel(), 1, 1}));
}

template <typename T>
Tensor<T> BayeSegNets<T>::norm(const Tensor<T>& x, const std::string& name) const {
  if (config_.norm == NormMode::None) return x;
  const auto& s = params_.at(name + ".scale");
  const auto& b = params_.at(name + ".shift");
  Dims cd{1, s.numel(), 1, 1};
  return add(mul(instance_norm(x), reshape(s, cd)), reshape(b, cd));
}

template <typename T>
GaussianField<T> BayeSegNets<T>::head_split(const Tensor<T>& out, std::size_t mean_channels) const {
  GaussianField<T> g{slice_channels(out, 0, mean_channels), std::nullopt, std::nullopt};
  if (out.dim(1) == 2 * mean_channels) {
    g.log_var = slice_channels(out, mean_channels, mean_channels);
    g.std = exp(scale(*g.log_var, T(0.5)));
  }
  return g;
}

template <typename T>
GaussianField<T> BayeSegNets<T>::shape_forward(const Tensor<T>& y) const {
  if (y.dims().size() != 4 || y.dim(1) != 1)
    throw ShapeError("shape net expects [N,1,H,W], got " + dims_to_string(y.dims()));
  auto h = conv(y, "shape.in");
  for (std::size_t b = 0; b < config_.res_blocks_shape; ++b) {
    std::string p = "shape.block" + std::to_string(b);
    auto r = conv(relu(conv(h, p + ".conv1")), p + ".conv2");
    h = add(h, r);
  }
  auto g = head_split(conv(h, "shape.out"), 1);
  // Input skip: the shape mean is a correction of the observed image.
  g.mean = add(g.mean, y);
  return g;
}

template <typename T>
GaussianField<T> BayeSegNets<T>::appearance_forward(const Tensor<T>& y) const {
  if (y.dims().size() != 4 || y.dim(1) != 1)
    throw ShapeError("appearance net expects [N,1,H,W], got " + dims_to_string(y.dims()));
  auto h = conv(y, "app.in");
  for (std::size_t b = 0; b < config_.res_blocks_app; ++b) {
    std::string p = "app.block" + std::to_string(b);
    auto r = norm(conv(h, p + ".conv1"), p + ".norm1");
    r = norm(conv(relu(r), p + ".conv2"), p + ".norm2");
    h = add(h, r);
  }
  return head_split(conv(h, "app.out"), 1);
}

template <typename T>
Tensor<T> BayeSegNets<T>::seg_forward(const Tensor<T>& x) const {
  if (x.dims().size() != 4 || x.dim(1) != 1)
    throw ShapeError("segmentation net expects [N,1,H,W], got " + dims_to_string(x.dims()));
  if (x.dim(2) % 4 || x.dim(3) % 4)
    throw ShapeError("segmentation net needs H and W divisible by 4, got " +
                     dims_to_string(x.dims()));
  auto e1 = relu(conv(relu(conv(x, "seg.enc1a")), "seg.enc1b"));
  auto e2 = relu(conv(relu(conv(avg_pool2(e1), "seg.enc2a")), "seg.enc2b"));
  auto m = relu(conv(relu(conv(avg_pool2(e2), "seg.mida")), "seg.midb"));
  auto d2 = concat_channels<T>({upsample2(m), e2});
  d2 = relu(conv(relu(conv(d2, "seg.dec2a")), "seg.dec2b"));
  auto d1 = concat_channels<T>({upsample2(d2), e1});
  d1 = relu(conv(relu(conv(d1, "seg.dec1a")), "seg.dec1b"));
  return conv(d1, "seg.out");
}

template <typename T>
GaussianField<T> BayeSegNets<T>::split_seg_output(const Tensor<T>& raw) const {
  return head_split(raw, config_.classes);
}

template <typename T>
std::vector<Tensor<T>> BayeSegNets<T>::params_with_prefix(const std::string& prefix) const {
  std::vector<Tensor<T>> out;
  for (const auto& [name, t] : params_.entries())
    if (name.rfind(prefix, 0) == 0) out.push_back(t);
  return out;
}

template <typename T>
Array<T> sample_appearance(const Array<T>& m_sample, const Array<T>& mu_rho, const Array<T>& eps) {
  if (m_sample.dims != mu_rho.dims || m_sample.dims != eps.dims)
    throw ShapeError("sample_appearance dims mismatch");
  Array<T> a(m_sample.dims);
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!(mu_rho[i] > T(0))) throw DomainError("non-positive appearance precision", i);
    a[i] = m_sample[i] + eps[i] / std::sqrt(mu_rho[i]);
  }
  return a;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {
constexpr char kCkptMagic[6] = {'B', 'S', 'C', 'K', 'P', 'T'};
}

const Array<double>* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, a] : tensors)
    if (n == name) return &a;
  return nullptr;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const std::string& config_echo,
                     const NetParams<T>& params, Adam<T>* optimizer) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os.write(kCkptMagic, sizeof(kCkptMagic));
  write_u32(os, static_cast<std::uint32_t>(config_echo.size()));
  os.write(config_echo.data(), static_cast<std::streamsize>(config_echo.size()));

  std::vector<std::pair<std::string, Array<T>>> all;
  for (const auto& [name, t] : params.entries()) all.emplace_back(name, t.value());
  if (optimizer) {
    if (optimizer->size() != params.size())
      throw UsageError("optimizer does not cover every parameter");
    std::size_t i = 0;
    for (const auto& [name, t] : params.entries()) {
      all.emplace_back("adam.m/" + name, Array<T>(t.dims(), optimizer->first_moment(i)));
      all.emplace_back("adam.v/" + name, Array<T>(t.dims(), optimizer->second_moment(i)));
      ++i;
    }
    all.emplace_back("adam.step", Array<T>({1}, static_cast<T>(optimizer->steps())));
  }
  write_u32(os, static_cast<std::uint32_t>(all.size()));
  for (const auto& [name, a] : all) {
    write_u16(os, static_cast<std::uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_tensor(os, a);
  }
  if (!os) throw IoError("write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  char magic[6];
  if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kCkptMagic, sizeof(magic)) != 0)
    throw FormatError(path.string() + ": not a checkpoint (bad magic)");
  Checkpoint ck;
  try {
    auto len = read_u32(is);
    ck.config_echo.resize(len);
    if (!is.read(ck.config_echo.data(), len)) throw FormatError("truncated config echo");
    auto count = read_u32(is);
    for (std::uint32_t i = 0; i < count; ++i) {
      auto nlen = read_u16(is);
      std::string name(nlen, '\0');
      if (!is.read(name.data(), nlen)) throw FormatError("truncated tensor name");
      ck.tensors.emplace_back(std::move(name), read_tensor<double>(is));
    }
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return ck;
}

template <typename T>
void restore_params(const Checkpoint& ckpt, NetParams<T>& params, Adam<T>* optimizer) {
  std::size_t i = 0;
  for (auto& [name, t] : params.entries()) {
    const auto* a = ckpt.find(name);
    if (!a) throw FormatError("checkpoint lacks parameter " + name);
    if (a->dims != t.dims())
      throw FormatError("checkpoint parameter " + name + " has dims " + dims_to_string(a->dims) +
                        ", expected " + dims_to_string(t.dims()));
    auto& dst = t.mutable_data();
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = static_cast<T>(a->data[j]);
    if (optimizer) {
      const auto* m = ckpt.find("adam.m/" + name);
      const auto* v = ckpt.find("adam.v/" + name);
      if (!m || !v) throw FormatError("checkpoint lacks optimizer state for " + name);
      auto& om = optimizer->first_moment(i);
      auto& ov = optimizer->second_moment(i);
      for (std::size_t j = 0; j < om.size(); ++j) {
        om[j] = static_cast<T>(m->data[j]);
        ov[j] = static_cast<T>(v->data[j]);
      }
    }
    ++i;
  }
  if (optimizer) {
    const auto* s = ckpt.find("adam.step");
    if (!s) throw FormatError("checkpoint lacks adam.step");
    optimizer->set_steps(static_cast<std::uint64_t>(s->data.at(0)));
  }
}

template class NetParams<float>;
template class NetParams<double>;
template class BayeSegNets<float>;
template class BayeSegNets<double>;
template Array<float> sample_appearance(const Array<float>&, const Array<float>&,
                                        const Array<float>&);
template Array<double> sample_appearance(const Array<double>&, const Array<double>&,
                                         const Array<double>&);
template void save_checkpoint(const std::filesystem::path&, const std::string&,
                              const NetParams<float>&, Adam<float>*);
template void save_checkpoint(const std::filesystem::path&, const std::string&,
                              const NetParams<double>&, Adam<double>*);
template void restore_params(const Checkpoint&, NetParams<float>&, Adam<float>*);
template void restore_params(const Checkpoint&, NetParams<double>&, Adam<double>*);

}  // namespace bayeseg
