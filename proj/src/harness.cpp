#include "bayeseg/harness.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>

#include "bayeseg/errors.hpp"
#include "bayeseg/image_io.hpp"
#include "bayeseg/serialize.hpp"

namespace bayeseg {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Ablation presets

AblationFlags ablation_preset(const std::string& name) {
  AblationFlags f;
  auto pgm = [&](bool an, bool al, bool zn, bool zl) {
    f.app_network = an;
    f.app_loss = al;
    f.seg_network = zn;
    f.seg_loss = zl;
  };
  if (name == "proposed" || name == "full" || name == "pgm1") return f;
  if (name == "stochastic-only") {
    f.variational_loss = false;
    return f;
  }
  if (name == "erm") {
    f.stochastic_mapping = false;
    f.variational_loss = false;
    return f;
  }
  if (name == "pgm2") pgm(false, true, true, true);
  else if (name == "pgm3") pgm(true, false, true, true);
  else if (name == "pgm4") pgm(false, false, true, true);
  else if (name == "pgm5") pgm(true, true, false, true);
  else if (name == "pgm6") pgm(true, true, true, false);
  else if (name == "pgm7") pgm(true, true, false, false);
  else throw ConfigError("unknown ablation preset '" + name + "'");
  return f;
}

std::vector<std::string> suite_arms(const std::string& suite) {
  if (suite == "table5") return {"erm", "stochastic-only", "proposed"};
  if (suite == "table8") return {"pgm1", "pgm2", "pgm3", "pgm4", "pgm5", "pgm6", "pgm7"};
  throw ConfigError("unknown ablation suite '" + suite + "' (table5, table8)");
}

// ---------------------------------------------------------------------------
// Run configuration

RunConfig RunConfig::from_config(const KeyValueConfig& cfg) {
  RunConfig r;
  r.data_dir = cfg.get_string("data.dir", "data");
  r.out_dir = cfg.get_string("out.dir", "run");
  r.seed = cfg.get_uint("run.seed", r.seed);

  NetConfig& n = r.net;
  n.width = cfg.get_uint("net.width", n.width);
  n.res_blocks_shape = cfg.get_uint("net.res_blocks_shape", n.res_blocks_shape);
  n.res_blocks_app = cfg.get_uint("net.res_blocks_app", n.res_blocks_app);
  n.classes = cfg.get_uint("net.classes", n.classes);
  n.norm = parse_norm_mode(cfg.get_string("net.norm", to_string(n.norm)));

  HyperParams& h = r.hyper;
  h.rho.shape = cfg.get_double("hyper.gamma_rho", h.rho.shape);
  h.rho.rate = cfg.get_double("hyper.phi_rho", h.rho.rate);
  h.upsilon.shape = cfg.get_double("hyper.gamma_upsilon", h.upsilon.shape);
  h.upsilon.rate = cfg.get_double("hyper.phi_upsilon", h.upsilon.rate);
  h.omega.shape = cfg.get_double("hyper.gamma_omega", h.omega.shape);
  h.omega.rate = cfg.get_double("hyper.phi_omega", h.omega.rate);
  h.pi.alpha = cfg.get_double("hyper.alpha_pi", h.pi.alpha);
  h.pi.beta = cfg.get_double("hyper.beta_pi", h.pi.beta);
  h.mu_m0 = cfg.get_double("hyper.mu_m0", h.mu_m0);
  h.sigma_m0 = cfg.get_double("hyper.sigma_m0", h.sigma_m0);
  h.lambda = cfg.get_double("hyper.lambda", h.lambda);

  TrainSettings& t = r.train;
  t.steps = cfg.get_uint("train.steps", t.steps);
  t.batch_size = cfg.get_uint("train.batch_size", t.batch_size);
  t.lr = cfg.get_double("train.lr", t.lr);
  t.lr_decay_at = cfg.get_double("train.lr_decay_at", t.lr_decay_at);
  t.lr_decay_factor = cfg.get_double("train.lr_decay_factor", t.lr_decay_factor);
  t.log_every = cfg.get_uint("train.log_every", t.log_every);
  t.omega_pi_iters = cfg.get_uint("train.omega_pi_iters", t.omega_pi_iters);
  t.precision = cfg.get_string("train.precision", t.precision);
  t.snapshots = cfg.get_uint("eval.average", t.snapshots);
  t.snapshot_interval = cfg.get_uint("eval.interval", t.snapshot_interval);

  AblationFlags& f = r.ablation;
  f = ablation_preset(cfg.get_string("ablation.preset", "proposed"));
  if (cfg.get_bool("ablation.deterministic_appearance", false)) f.app_network = f.app_loss = false;
  if (cfg.get_bool("ablation.deterministic_segmentation", false)) f.seg_network = f.seg_loss = false;
  f.stochastic_mapping = cfg.get_bool("ablation.stochastic_mapping", f.stochastic_mapping);
  f.variational_loss = cfg.get_bool("ablation.variational_loss", f.variational_loss);
  f.app_network = cfg.get_bool("ablation.app_network", f.app_network);
  f.app_loss = cfg.get_bool("ablation.app_loss", f.app_loss);
  f.seg_network = cfg.get_bool("ablation.seg_network", f.seg_network);
  f.seg_loss = cfg.get_bool("ablation.seg_loss", f.seg_loss);
  r.validate();
  return r;
}

void RunConfig::to_config(KeyValueConfig& cfg) const {
  cfg.set("data.dir", data_dir.string());
  cfg.set("out.dir", out_dir.string());
  cfg.set("run.seed", std::to_string(seed));
  cfg.set("net.width", std::to_string(net.width));
  cfg.set("net.res_blocks_shape", std::to_string(net.res_blocks_shape));
  cfg.set("net.res_blocks_app", std::to_string(net.res_blocks_app));
  cfg.set("net.classes", std::to_string(net.classes));
  cfg.set("net.norm", to_string(net.norm));
  cfg.set("hyper.gamma_rho", format_double(hyper.rho.shape));
  cfg.set("hyper.phi_rho", format_double(hyper.rho.rate));
  cfg.set("hyper.gamma_upsilon", format_double(hyper.upsilon.shape));
  cfg.set("hyper.phi_upsilon", format_double(hyper.upsilon.rate));
  cfg.set("hyper.gamma_omega", format_double(hyper.omega.shape));
  cfg.set("hyper.phi_omega", format_double(hyper.omega.rate));
  cfg.set("hyper.alpha_pi", format_double(hyper.pi.alpha));
  cfg.set("hyper.beta_pi", format_double(hyper.pi.beta));
  cfg.set("hyper.mu_m0", format_double(hyper.mu_m0));
  cfg.set("hyper.sigma_m0", format_double(hyper.sigma_m0));
  cfg.set("hyper.lambda", format_double(hyper.lambda));
  cfg.set("train.steps", std::to_string(train.steps));
  cfg.set("train.batch_size", std::to_string(train.batch_size));
  cfg.set("train.lr", format_double(train.lr));
  cfg.set("train.lr_decay_at", format_double(train.lr_decay_at));
  cfg.set("train.lr_decay_factor", format_double(train.lr_decay_factor));
  cfg.set("train.log_every", std::to_string(train.log_every));
  cfg.set("train.omega_pi_iters", std::to_string(train.omega_pi_iters));
  cfg.set("train.precision", train.precision);
  cfg.set("eval.average", std::to_string(train.snapshots));
  cfg.set("eval.interval", std::to_string(train.snapshot_interval));
  cfg.set("ablation.stochastic_mapping", format_bool(ablation.stochastic_mapping));
  cfg.set("ablation.variational_loss", format_bool(ablation.variational_loss));
  cfg.set("ablation.app_network", format_bool(ablation.app_network));
  cfg.set("ablation.app_loss", format_bool(ablation.app_loss));
  cfg.set("ablation.seg_network", format_bool(ablation.seg_network));
  cfg.set("ablation.seg_loss", format_bool(ablation.seg_loss));
}

std::string RunConfig::echo() const {
  KeyValueConfig cfg;
  to_config(cfg);
  return cfg.to_text();
}

void RunConfig::validate() const {
  effective_net().validate();
  try {
    hyper.validate();
  } catch (const std::exception& e) {
    throw ConfigError(std::string("hyper: ") + e.what());
  }
  if (train.steps == 0) throw ConfigError("train.steps must be positive");
  if (train.batch_size == 0) throw ConfigError("train.batch_size must be positive");
  if (!(train.lr > 0)) throw ConfigError("train.lr must be positive");
  if (train.lr_decay_at < 0 || train.lr_decay_at > 1)
    throw ConfigError("train.lr_decay_at must be in [0,1]");
  if (!(train.lr_decay_factor > 0)) throw ConfigError("train.lr_decay_factor must be positive");
  if (train.log_every == 0) throw ConfigError("train.log_every must be positive");
  if (train.omega_pi_iters == 0) throw ConfigError("train.omega_pi_iters must be positive");
  if (train.precision != "float" && train.precision != "double")
    throw ConfigError("train.precision must be float or double");
  if (train.snapshots == 0) throw ConfigError("eval.average must be positive");
  if (train.snapshots > 1 && train.snapshot_interval == 0)
    throw ConfigError("eval.interval must be positive");
  if (train.snapshots > 1 && (train.snapshots - 1) * train.snapshot_interval >= train.steps)
    throw ConfigError("eval.average * eval.interval exceeds the training schedule");
}

NetConfig RunConfig::effective_net() const {
  NetConfig n = net;
  n.seed = seed;
  n.stochastic_appearance = ablation.app_network;
  n.stochastic_segmentation = ablation.seg_network;
  return n;
}

LossMask RunConfig::loss_mask() const {
  LossMask m;
  if (!ablation.app_loss) {
    m.set(LossTerm::Y, false);
    m.set(LossTerm::MuM, false);
    m.set(LossTerm::SigmaM, false);
  }
  if (!ablation.app_network) m.set(LossTerm::SigmaM, false);
  if (!ablation.seg_loss) {
    m.set(LossTerm::MuZ, false);
    m.set(LossTerm::SigmaZ, false);
  }
  if (!ablation.seg_network) m.set(LossTerm::SigmaZ, false);
  return m;
}

RunConfig run_config_from_echo(const std::string& echo) {
  auto cfg = KeyValueConfig::parse(echo, "<config echo>");
  auto r = RunConfig::from_config(cfg);
  cfg.check_all_used();
  return r;
}

// ---------------------------------------------------------------------------
// Data

LoadedSplit load_split(const fs::path& dir, const std::vector<ManifestEntry>& manifest,
                       const std::string& split, const std::string& domain, std::size_t classes) {
  LoadedSplit s;
  for (const auto& e : manifest) {
    if (e.split != split || e.domain != domain) continue;
    auto img = load_case_image(dir, e);
    auto lab = load_case_labels(dir, e, classes);
    std::size_t H = img.dims[2], W = img.dims[3];
    if (lab.size() != H * W) throw DataError(e.label_path + ": label size does not match image");
    if (s.entries.empty()) {
      s.height = H;
      s.width = W;
    } else if (H != s.height || W != s.width) {
      throw DataError(e.image_path + ": image size differs from the rest of the split");
    }
    s.entries.push_back(e);
    s.images.push_back(std::move(img));
    s.labels.push_back(std::move(lab));
  }
  if (s.entries.empty())
    throw DataError("no cases for split '" + split + "' of domain '" + domain + "' in " +
                    (dir / kManifestName).string());
  return s;
}

namespace {

template <typename T>
Array<T> stack_images(const LoadedSplit& s, const std::vector<std::size_t>& idx) {
  Array<T> y(Dims{idx.size(), 1, s.height, s.width});
  std::size_t P = s.height * s.width;
  for (std::size_t b = 0; b < idx.size(); ++b)
    for (std::size_t i = 0; i < P; ++i) y[b * P + i] = static_cast<T>(s.images[idx[b]].data[i]);
  return y;
}

template <typename T>
Array<T> one_hot(const std::vector<std::uint8_t>& labels, std::size_t batch, std::size_t classes,
                 std::size_t H, std::size_t W) {
  Array<T> u(Dims{batch, classes, H, W});
  std::size_t P = H * W;
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < P; ++i) {
      std::size_t k = labels[b * P + i];
      if (k >= classes) throw DataError("label " + std::to_string(k) + " outside class range");
      u[(b * classes + k) * P + i] = T(1);
    }
  return u;
}

template <typename T>
std::vector<std::uint8_t> argmax_channels(const Array<T>& z, std::size_t n) {
  std::size_t K = z.dims[1], P = z.dims[2] * z.dims[3];
  std::vector<std::uint8_t> out(P);
  for (std::size_t i = 0; i < P; ++i) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < K; ++k)
      if (z[(n * K + k) * P + i] > z[(n * K + best) * P + i]) best = k;
    out[i] = static_cast<std::uint8_t>(best);
  }
  return out;
}

std::string fmt(double v, int prec = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os << text;
  if (!os) throw IoError("write failed for " + path.string());
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

}  // namespace

// ---------------------------------------------------------------------------
// Metrics

double dice(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& gt,
            std::uint8_t k) {
  if (pred.size() != gt.size()) throw ShapeError("dice: prediction and label sizes differ");
  std::size_t p = 0, g = 0, both = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    bool a = pred[i] == k, b = gt[i] == k;
    p += a;
    g += b;
    both += a && b;
  }
  if (p + g == 0) return 100.0;
  return 100.0 * 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

DiceScores dice_scores(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& gt,
                       std::size_t classes) {
  DiceScores d;
  for (std::size_t k = 0; k < classes; ++k)
    d.per_class.push_back(dice(pred, gt, static_cast<std::uint8_t>(k)));
  double s = 0;
  for (std::size_t k = 1; k < classes; ++k) s += d.per_class[k];
  d.mean_foreground = classes > 1 ? s / static_cast<double>(classes - 1) : d.per_class[0];
  return d;
}

std::string metrics_header(std::size_t classes) {
  std::string h = "step,split,domain,lr";
  for (std::size_t k = 0; k < classes; ++k) h += ",dice_c" + std::to_string(k);
  h += ",dice_mean,loss_total,L_ce,L_var";
  for (auto name : kLossTermNames) h += std::string(",") + name;
  return h;
}

// ---------------------------------------------------------------------------
// Training step

namespace {

template <typename T>
Tensor<T> constant_tensor(const Array<T>& a) {
  return Tensor<T>(a, false);
}

// omega <-> pi fixed point starting from the flat-segmentation q(pi).
template <typename T>
std::pair<Array<T>, PiPosterior<T>> omega_pi(const Array<T>& mu_z, const Array<T>& sigma_z,
                                             const HyperParams& h, std::size_t iters) {
  std::size_t N = mu_z.dims[0], K = mu_z.dims[1], P = mu_z.dims[2] * mu_z.dims[3];
  auto pi = prior_pi<T>(N, K, P, h);
  Array<T> omega;
  for (std::size_t it = 0; it < iters; ++it) {
    omega = update_omega(mu_z, sigma_z, pi.c, h);
    if (it + 1 < iters) pi = update_pi(omega, mu_z, sigma_z, h);
  }
  return {omega, pi};
}

std::string term_dump(const StepStats& s) {
  std::ostringstream os;
  os << "loss_total=" << s.total << " L_ce=" << s.ce << " L_var=" << s.var;
  for (std::size_t i = 0; i < kLossTermCount; ++i) os << ' ' << kLossTermNames[i] << '=' << s.terms[i];
  return os.str();
}

}  // namespace

template <typename T>
struct Trainer<T>::Impl {
  RunConfig cfg;
  BayeSegNets<T> nets;
  Adam<T> opt;
  Rng noise_rng;
  LossMask mask;

  explicit Impl(const RunConfig& c)
      : cfg(c),
        nets(c.effective_net()),
        opt(AdamSettings{c.train.lr, 0.9, 0.999, 1e-8}),
        noise_rng(derive_seed(c.seed, 0x5EED0002)),
        mask(c.loss_mask()) {
    for (auto& [name, p] : nets.params().entries()) opt.add_param(p);
  }

  Tensor<T> sample(const Tensor<T>& mean, const std::optional<Tensor<T>>& std) {
    if (!cfg.ablation.stochastic_mapping || !std) return mean;
    return sample_gaussian_reparam(mean, *std, standard_normal_field<T>(mean.dims(), noise_rng));
  }

  StepStats step(const Array<T>& y, const Array<T>& u, const std::vector<std::uint8_t>& labels) {
    const auto& flags = cfg.ablation;
    const HyperParams& h = cfg.hyper;
    const std::size_t N = y.dims[0], K = cfg.net.classes;
    Tensor<T> yt(y, false);

    auto shape = nets.shape_forward(yt);
    auto x_sample = sample(shape.mean, shape.std);

    auto seg = nets.split_seg_output(nets.seg_forward(x_sample));
    auto mu_z = channel_softmax(seg.mean);
    Tensor<T> z_sample = mu_z;
    if (flags.stochastic_mapping && seg.std) z_sample = channel_softmax(sample(seg.mean, seg.std));
    auto ce = cross_entropy(u, z_sample);

    StepStats st;
    Tensor<T> total = ce;
    if (flags.variational_loss) {
      const bool need_app = mask[LossTerm::Y] || mask[LossTerm::MuM] || mask[LossTerm::SigmaM];
      Tensor<T> mu_m = Tensor<T>::zeros(y.dims);
      std::optional<Tensor<T>> sigma_m;
      Tensor<T> m_sample = mu_m;
      if (need_app) {
        auto app = nets.appearance_forward(yt);
        mu_m = app.mean;
        sigma_m = app.std;
        m_sample = sample(app.mean, app.std);
      }
      const Array<T>& muz = mu_z.value();
      Array<T> sz = seg.std ? seg.std->value() : Array<T>(muz.dims, T(0));
      VariationalState<T> vs{shape.mean,
                             *shape.std,
                             mu_m,
                             sigma_m,
                             mu_z,
                             seg.std,
                             need_app ? update_rho(y, x_sample.value(), m_sample.value(), h)
                                      : Array<T>(y.dims, T(1)),
                             update_upsilon(muz, shape.mean.value(), shape.std->value(), h),
                             Array<T>(muz.dims, T(1)),
                             prior_pi<T>(N, K, muz.dims[2] * muz.dims[3], h)};
      if (mask[LossTerm::MuZ] || mask[LossTerm::SigmaZ]) {
        auto [omega, pi] = omega_pi(muz, sz, h, cfg.train.omega_pi_iters);
        vs.mu_omega = std::move(omega);
        vs.pi = std::move(pi);
      }
      auto vl = variational_loss(yt, vs, x_sample, m_sample, h, mask);
      st.terms = vl.terms;
      st.var = static_cast<double>(vl.total.item());
      total = total_loss(ce, vl.total, h.lambda);
    }
    st.ce = static_cast<double>(ce.item());
    st.total = static_cast<double>(total.item());
    if (!std::isfinite(st.total))
      throw NumericalError("non-finite training loss: " + term_dump(st));

    opt.zero_grad();
    total.backward();
    opt.step();

    // Training-batch Dice from the segmentation mean.
    std::vector<double> acc(K + 1, 0.0);
    const std::size_t P = y.dims[2] * y.dims[3];
    for (std::size_t n = 0; n < N; ++n) {
      std::vector<std::uint8_t> gt(labels.begin() + static_cast<std::ptrdiff_t>(n * P),
                                   labels.begin() + static_cast<std::ptrdiff_t>((n + 1) * P));
      auto d = dice_scores(argmax_channels(mu_z.value(), n), gt, K);
      for (std::size_t k = 0; k < K; ++k) acc[k] += d.per_class[k];
      acc[K] += d.mean_foreground;
    }
    for (auto& a : acc) a /= static_cast<double>(N);
    st.dice = acc;
    return st;
  }
};

template <typename T>
Trainer<T>::Trainer(const RunConfig& cfg) : impl_(new Impl(cfg)) {}
template <typename T>
Trainer<T>::~Trainer() {
  delete impl_;
}
template <typename T>
StepStats Trainer<T>::step(const Array<T>& y, const Array<T>& u,
                           const std::vector<std::uint8_t>& labels) {
  try {
    return impl_->step(y, u, labels);
  } catch (const DomainError& e) {
    // A variance head underflowed to zero, or similar; same class as a NaN loss.
    throw NumericalError(e.what());
  }
}
template <typename T>
BayeSegNets<T>& Trainer<T>::nets() {
  return impl_->nets;
}
template <typename T>
Adam<T>& Trainer<T>::optimizer() {
  return impl_->opt;
}

template class Trainer<float>;
template class Trainer<double>;

// ---------------------------------------------------------------------------
// Training loop

namespace {

template <typename F>
decltype(auto) with_precision(const std::string& precision, F&& f) {
  if (precision == "double") return f.template operator()<double>();
  if (precision == "float") return f.template operator()<float>();
  throw ConfigError("unknown precision '" + precision + "'");
}

std::string run_metadata(const RunConfig& cfg) {
  std::ostringstream os;
  os << "code_version=" << code_version() << '\n';
  os << "code_hash=" << code_hash() << '\n';
  os << "precision=" << cfg.train.precision << '\n';
  os << "schedule=steps " << cfg.train.steps << ", batch " << cfg.train.batch_size << ", lr "
     << format_double(cfg.train.lr) << " x" << format_double(cfg.train.lr_decay_factor) << " after "
     << format_double(cfg.train.lr_decay_at * 100) << "% of steps\n";
  os << "deviation.schedule=desk-scale step schedule instead of the full-size epoch schedule\n";
  if (cfg.net.norm == NormMode::Instance)
    os << "deviation.norm=instance normalisation replaces batch normalisation in f_a\n";
  else
    os << "deviation.norm=normalisation layers removed from f_a\n";
  os << "deviation.backbone=two-level encoder-decoder segmentation network, width "
     << cfg.net.width << '\n';
  os << "deviation.simplex=segmentation means pass through a channel softmax\n";
  os << "deviation.sigma_x=the upsilon update uses the shape variance 2*sigma_x^2\n";
  return os.str();
}

std::string snapshot_name(std::size_t step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "step_%06zu.bsckpt", step);
  return buf;
}

template <typename T>
TrainResult train_impl(const RunConfig& cfg, std::ostream* progress) {
  using clock = std::chrono::steady_clock;
  const auto manifest = read_manifest(cfg.data_dir);
  const auto data = load_split(cfg.data_dir, manifest, "train", kSourceDomain, cfg.net.classes);
  if (data.height % 4 || data.width % 4)
    throw DataError("image size must be divisible by 4 for the segmentation network");

  ensure_dir(cfg.out_dir);
  ensure_dir(cfg.out_dir / "snapshots");
  const std::string echo = cfg.echo();
  write_text(cfg.out_dir / "resolved.cfg", echo);
  write_text(cfg.out_dir / "run_meta.txt", run_metadata(cfg));

  Trainer<T> trainer(cfg);
  Rng batch_rng(derive_seed(cfg.seed, 0x5EED0001));
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();

  const auto& ts = cfg.train;
  const std::size_t K = cfg.net.classes, B = ts.batch_size;
  const std::size_t decay_step =
      static_cast<std::size_t>(std::floor(ts.lr_decay_at * static_cast<double>(ts.steps)));
  std::set<std::size_t> snapshot_steps;
  for (std::size_t i = 0; i < ts.snapshots; ++i) snapshot_steps.insert(ts.steps - i * ts.snapshot_interval);

  std::ofstream metrics(cfg.out_dir / "metrics.csv", std::ios::binary);
  std::ofstream timing(cfg.out_dir / "timing.csv", std::ios::binary);
  if (!metrics || !timing) throw IoError("cannot write metrics under " + cfg.out_dir.string());
  metrics << metrics_header(K) << '\n';
  timing << "step,seconds\n";

  TrainResult result;
  StepStats window{};
  window.dice.assign(K + 1, 0.0);
  std::size_t in_window = 0;
  auto t0 = clock::now();

  for (std::size_t step = 1; step <= ts.steps; ++step) {
    double lr = step > decay_step ? ts.lr * ts.lr_decay_factor : ts.lr;
    trainer.optimizer().set_lr(lr);

    std::vector<std::size_t> idx;
    while (idx.size() < B) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), batch_rng);
        cursor = 0;
      }
      idx.push_back(order[cursor++]);
    }
    auto y = stack_images<T>(data, idx);
    std::vector<std::uint8_t> labels;
    for (auto i : idx) labels.insert(labels.end(), data.labels[i].begin(), data.labels[i].end());
    auto u = one_hot<T>(labels, B, K, data.height, data.width);

    StepStats st;
    try {
      st = trainer.step(y, u, labels);
    } catch (const NumericalError& e) {
      write_text(cfg.out_dir / "nan_dump.txt",
                 "step=" + std::to_string(step) + "\n" + std::string(e.what()) + "\n");
      throw NumericalError("step " + std::to_string(step) + ": " + e.what());
    }
    if (step == 1) result.first_loss = st.total;
    result.last = st;

    window.total += st.total;
    window.ce += st.ce;
    window.var += st.var;
    for (std::size_t i = 0; i < kLossTermCount; ++i) window.terms[i] += st.terms[i];
    for (std::size_t k = 0; k <= K; ++k) window.dice[k] += st.dice[k];
    ++in_window;

    if (step % ts.log_every == 0 || step == ts.steps) {
      double c = static_cast<double>(in_window);
      metrics << step << ",train," << kSourceDomain << ',' << format_double(lr);
      for (std::size_t k = 0; k <= K; ++k) metrics << ',' << fmt(window.dice[k] / c, 4);
      metrics << ',' << fmt(window.total / c) << ',' << fmt(window.ce / c) << ','
              << fmt(window.var / c);
      for (std::size_t i = 0; i < kLossTermCount; ++i) metrics << ',' << fmt(window.terms[i] / c);
      metrics << '\n';
      double secs = std::chrono::duration<double>(clock::now() - t0).count();
      timing << step << ',' << fmt(secs, 3) << '\n';
      result.final_window_loss = window.total / c;
      if (progress)
        *progress << "[train] step " << step << "/" << ts.steps << " loss " << fmt(window.total / c, 4)
                  << " ce " << fmt(window.ce / c, 4) << " dice " << fmt(window.dice[K] / c, 2)
                  << " (" << fmt(secs, 1) << " s)" << std::endl;
      window = StepStats{};
      window.dice.assign(K + 1, 0.0);
      in_window = 0;
    }

    if (snapshot_steps.count(step)) {
      auto path = cfg.out_dir / "snapshots" / snapshot_name(step);
      save_checkpoint(path, echo, trainer.nets().params(), &trainer.optimizer());
      result.checkpoints.push_back(path);
    }
  }
  auto final_path = cfg.out_dir / "checkpoint.bsckpt";
  save_checkpoint(final_path, echo, trainer.nets().params(), &trainer.optimizer());
  if (!metrics || !timing) throw IoError("write failed for metrics under " + cfg.out_dir.string());
  return result;
}

}  // namespace

TrainResult train(const RunConfig& cfg, std::ostream* progress) {
  cfg.validate();
  return with_precision(cfg.train.precision,
                        [&]<typename T>() { return train_impl<T>(cfg, progress); });
}

// ---------------------------------------------------------------------------
// Inference and evaluation

template <typename T>
std::vector<std::vector<std::uint8_t>> predict(const BayeSegNets<T>& nets, const Array<T>& y) {
  Tensor<T> yt(y, false);
  auto shape = nets.shape_forward(yt);
  auto seg = nets.split_seg_output(nets.seg_forward(shape.mean.detach()));
  auto z = channel_softmax(seg.mean.detach());
  std::vector<std::vector<std::uint8_t>> out;
  for (std::size_t n = 0; n < y.dims[0]; ++n) out.push_back(argmax_channels(z.value(), n));
  return out;
}

template std::vector<std::vector<std::uint8_t>> predict(const BayeSegNets<float>&, const Array<float>&);
template std::vector<std::vector<std::uint8_t>> predict(const BayeSegNets<double>&, const Array<double>&);

const DomainSummary& EvalSummary::get(const std::string& domain) const {
  for (const auto& d : domains)
    if (d.domain == domain) return d;
  throw DataError("no evaluation results for domain '" + domain + "'");
}

namespace {

template <typename T>
std::unique_ptr<BayeSegNets<T>> load_nets(const Checkpoint& ckpt, const RunConfig& rc) {
  auto nets = std::make_unique<BayeSegNets<T>>(rc.effective_net());
  restore_params(ckpt, nets->params());
  // Inference never needs parameter gradients.
  for (auto& [name, p] : nets->params().entries()) p.set_requires_grad(false);
  return nets;
}

double sample_std(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

std::string summary_csv(const EvalSummary& s, std::size_t classes) {
  std::string out = "domain,cases";
  for (std::size_t k = 0; k < classes; ++k) out += ",dice_c" + std::to_string(k);
  out += ",dice_mean,dice_std,drop\n";
  for (const auto& d : s.domains) {
    out += d.domain + "," + std::to_string(d.cases);
    for (double v : d.per_class_mean) out += "," + fmt(v, 4);
    out += "," + fmt(d.mean, 4) + "," + fmt(d.std, 4) + "," + fmt(d.drop, 4) + "\n";
  }
  return out;
}

}  // namespace

EvalSummary evaluate(const std::vector<fs::path>& checkpoints, const fs::path& data_dir,
                     const std::vector<std::string>& domains,
                     const std::optional<fs::path>& out_dir) {
  if (checkpoints.empty()) throw ConfigError("evaluate needs at least one checkpoint");
  const auto manifest = read_manifest(data_dir);

  std::vector<std::string> wanted = {kSourceDomain};
  std::vector<std::string> available;
  for (const auto& e : manifest)
    if (e.split == "test" && std::find(available.begin(), available.end(), e.domain) == available.end())
      available.push_back(e.domain);
  if (std::find(available.begin(), available.end(), kSourceDomain) == available.end())
    throw DataError("manifest has no source test split");
  for (const auto& d : domains.empty() ? available : domains) {
    if (std::find(available.begin(), available.end(), d) == available.end())
      throw DataError("domain '" + d + "' is not in the manifest test splits");
    if (d != kSourceDomain) wanted.push_back(d);
  }

  std::vector<Checkpoint> ckpts;
  for (const auto& p : checkpoints) ckpts.push_back(load_checkpoint(p));
  const RunConfig rc = run_config_from_echo(ckpts.front().config_echo);
  const std::size_t K = rc.net.classes;

  // dice[domain][case][class..., mean], summed over checkpoints
  std::vector<LoadedSplit> splits;
  for (const auto& d : wanted) splits.push_back(load_split(data_dir, manifest, "test", d, K));
  std::vector<std::vector<std::vector<double>>> acc(wanted.size());
  for (std::size_t di = 0; di < wanted.size(); ++di)
    acc[di].assign(splits[di].size(), std::vector<double>(K + 1, 0.0));

  with_precision(rc.train.precision, [&]<typename T>() {
    for (const auto& ck : ckpts) {
      auto nets = load_nets<T>(ck, run_config_from_echo(ck.config_echo));
      for (std::size_t di = 0; di < wanted.size(); ++di) {
        const auto& s = splits[di];
        const std::size_t chunk = 16;
        for (std::size_t b = 0; b < s.size(); b += chunk) {
          std::vector<std::size_t> idx;
          for (std::size_t i = b; i < std::min(s.size(), b + chunk); ++i) idx.push_back(i);
          auto preds = predict(*nets, stack_images<T>(s, idx));
          for (std::size_t j = 0; j < idx.size(); ++j) {
            auto d = dice_scores(preds[j], s.labels[idx[j]], K);
            auto& a = acc[di][idx[j]];
            for (std::size_t k = 0; k < K; ++k) a[k] += d.per_class[k];
            a[K] += d.mean_foreground;
          }
        }
      }
    }
    return 0;
  });

  EvalSummary summary;
  std::string cases_csv = "case_id,domain";
  for (std::size_t k = 0; k < K; ++k) cases_csv += ",dice_c" + std::to_string(k);
  cases_csv += ",dice_mean\n";
  const double nck = static_cast<double>(ckpts.size());
  for (std::size_t di = 0; di < wanted.size(); ++di) {
    DomainSummary ds;
    ds.domain = wanted[di];
    ds.cases = splits[di].size();
    ds.per_class_mean.assign(K, 0.0);
    std::vector<double> means;
    for (std::size_t c = 0; c < ds.cases; ++c) {
      auto& a = acc[di][c];
      for (auto& v : a) v /= nck;
      cases_csv += splits[di].entries[c].case_id + "," + ds.domain;
      for (std::size_t k = 0; k <= K; ++k) cases_csv += "," + fmt(a[k], 4);
      cases_csv += "\n";
      for (std::size_t k = 0; k < K; ++k) ds.per_class_mean[k] += a[k] / static_cast<double>(ds.cases);
      means.push_back(a[K]);
    }
    ds.mean = std::accumulate(means.begin(), means.end(), 0.0) / static_cast<double>(means.size());
    ds.std = sample_std(means);
    summary.domains.push_back(std::move(ds));
  }
  for (auto& d : summary.domains) d.drop = summary.domains.front().mean - d.mean;

  if (out_dir) {
    ensure_dir(*out_dir);
    write_text(*out_dir / "eval_cases.csv", cases_csv);
    write_text(*out_dir / "eval_summary.csv", summary_csv(summary, K));
    write_text(*out_dir / "eval_report.txt", format_report({{"model", summary}}));
  }
  return summary;
}

std::string format_report(const std::vector<std::pair<std::string, EvalSummary>>& rows) {
  if (rows.empty()) return {};
  const auto& cols = rows.front().second.domains;
  std::size_t name_w = 6;
  for (const auto& [name, s] : rows) name_w = std::max(name_w, name.size());
  std::size_t col_w = 14;
  for (const auto& c : cols) col_w = std::max(col_w, c.domain.size() + 2);
  auto pad = [](std::string s, std::size_t w) {
    if (s.size() < w) s.insert(0, w - s.size(), ' ');
    return s;
  };
  std::string out = pad("arm", name_w);
  for (const auto& c : cols) out += pad(c.domain, col_w);
  out += "\n";
  for (const auto& [name, s] : rows) {
    out += pad(name, name_w);
    for (const auto& c : cols) {
      const auto& d = s.get(c.domain);
      out += pad(fmt(d.mean, 1) + " +/- " + fmt(d.std, 1), col_w);
    }
    out += "\n" + pad("drop", name_w);
    for (const auto& c : cols) out += pad(fmt(s.get(c.domain).drop, 1), col_w);
    out += "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Ablation

AblateConfig AblateConfig::from_config(const KeyValueConfig& cfg) {
  AblateConfig a;
  a.suite = cfg.get_string("ablate.suite", a.suite);
  a.arms = cfg.get_list("ablate.arms", {});
  std::vector<std::string> seed_strs;
  for (auto s : a.seeds) seed_strs.push_back(std::to_string(s));
  seed_strs = cfg.get_list("ablate.seeds", seed_strs);
  a.seeds.clear();
  for (const auto& s : seed_strs) {
    try {
      std::size_t pos = 0;
      a.seeds.push_back(std::stoull(s, &pos));
      if (pos != s.size()) throw std::invalid_argument(s);
    } catch (const std::exception&) {
      throw ConfigError("ablate.seeds: '" + s + "' is not a seed");
    }
  }
  if (a.seeds.empty()) throw ConfigError("ablate.seeds must not be empty");
  a.sweep_key = cfg.get_string("ablate.sweep_key", "");
  a.sweep_values = cfg.get_list("ablate.sweep_values", {});
  if (a.sweep_key.empty() != a.sweep_values.empty())
    throw ConfigError("ablate.sweep_key and ablate.sweep_values go together");
  if (a.arms.empty() && a.sweep_key.empty()) suite_arms(a.suite);  // validates the name
  for (const auto& arm : a.arms) ablation_preset(arm);
  return a;
}

void AblateConfig::to_config(KeyValueConfig& cfg) const {
  cfg.set("ablate.suite", suite);
  if (!arms.empty()) cfg.set("ablate.arms", join(arms));
  std::vector<std::string> s;
  for (auto v : seeds) s.push_back(std::to_string(v));
  cfg.set("ablate.seeds", join(s));
  if (!sweep_key.empty()) {
    cfg.set("ablate.sweep_key", sweep_key);
    cfg.set("ablate.sweep_values", join(sweep_values));
  }
}

std::vector<ArmResult> ablate(const RunConfig& base, const AblateConfig& ab, std::ostream* progress) {
  struct Arm {
    std::string name;
    RunConfig cfg;
  };
  std::vector<Arm> arms;
  if (!ab.sweep_key.empty()) {
    for (const auto& v : ab.sweep_values) {
      KeyValueConfig kv;
      base.to_config(kv);
      if (!kv.has(ab.sweep_key)) throw ConfigError("ablate.sweep_key '" + ab.sweep_key + "' is not a run key");
      kv.set(ab.sweep_key, v);
      arms.push_back({ab.sweep_key + "=" + v, RunConfig::from_config(kv)});
    }
  } else {
    for (const auto& name : ab.arms.empty() ? suite_arms(ab.suite) : ab.arms) {
      RunConfig c = base;
      c.ablation = ablation_preset(name);
      arms.push_back({name, c});
    }
  }

  ensure_dir(base.out_dir);
  std::vector<ArmResult> results;
  std::string csv = "arm,seed,domain,cases,dice_mean,dice_std,drop\n";
  std::vector<std::pair<std::string, EvalSummary>> report_rows;
  for (auto& arm : arms) {
    ArmResult r;
    r.arm = arm.name;
    r.flags = arm.cfg.ablation;
    std::string dir_name = arm.name;
    std::replace(dir_name.begin(), dir_name.end(), '=', '_');
    for (auto seed : ab.seeds) {
      RunConfig c = arm.cfg;
      c.seed = seed;
      c.out_dir = base.out_dir / dir_name / ("seed_" + std::to_string(seed));
      if (progress) *progress << "[ablate] arm " << arm.name << " seed " << seed << std::endl;
      auto tr = train(c, progress);
      auto s = evaluate(tr.checkpoints, c.data_dir, {}, c.out_dir);
      for (const auto& d : s.domains)
        csv += arm.name + "," + std::to_string(seed) + "," + d.domain + "," + std::to_string(d.cases) +
               "," + fmt(d.mean, 4) + "," + fmt(d.std, 4) + "," + fmt(d.drop, 4) + "\n";
      r.per_seed.push_back(std::move(s));
    }
    EvalSummary agg;
    for (std::size_t di = 0; di < r.per_seed.front().domains.size(); ++di) {
      DomainSummary d;
      d.domain = r.per_seed.front().domains[di].domain;
      std::vector<double> means, drops;
      for (const auto& s : r.per_seed) {
        means.push_back(s.domains[di].mean);
        drops.push_back(s.domains[di].drop);
        d.cases += s.domains[di].cases;
      }
      d.mean = std::accumulate(means.begin(), means.end(), 0.0) / static_cast<double>(means.size());
      d.std = sample_std(means);
      d.drop = std::accumulate(drops.begin(), drops.end(), 0.0) / static_cast<double>(drops.size());
      r.domains.push_back(d.domain);
      r.mean.push_back(d.mean);
      r.std.push_back(d.std);
      r.drop.push_back(d.drop);
      csv += arm.name + ",all," + d.domain + "," + std::to_string(d.cases) + "," + fmt(d.mean, 4) +
             "," + fmt(d.std, 4) + "," + fmt(d.drop, 4) + "\n";
      agg.domains.push_back(std::move(d));
    }
    report_rows.emplace_back(arm.name, std::move(agg));
    results.push_back(std::move(r));
  }
  write_text(base.out_dir / "ablation.csv", csv);
  write_text(base.out_dir / "ablation_report.txt",
             "Mean foreground Dice over seeds (+/- std across seeds); drop = source - domain\n\n" +
                 format_report(report_rows));
  return results;
}

// ---------------------------------------------------------------------------
// Decomposition

namespace {

template <typename T>
Array<double> plane(const Array<T>& a, std::size_t channel = 0) {
  std::size_t H = a.dims[2], W = a.dims[3], P = H * W;
  Array<double> out(Dims{H, W});
  for (std::size_t i = 0; i < P; ++i) out.data[i] = static_cast<double>(a[channel * P + i]);
  return out;
}

template <typename T>
Decomposition decompose_impl(const Checkpoint& ckpt, const RunConfig& rc, const Array<double>& y64) {
  auto nets = load_nets<T>(ckpt, rc);
  const HyperParams& h = rc.hyper;
  const std::size_t K = rc.net.classes;
  Array<T> y = y64.cast<T>();
  Tensor<T> yt(y, false);

  auto shape = nets->shape_forward(yt);
  auto app = nets->appearance_forward(yt);
  auto seg = nets->split_seg_output(nets->seg_forward(shape.mean));
  auto mu_z = channel_softmax(seg.mean).value();
  Array<T> sz = seg.std ? seg.std->value() : Array<T>(mu_z.dims, T(0));

  auto rho = update_rho(y, shape.mean.value(), app.mean.value(), h);
  auto ups = update_upsilon(mu_z, shape.mean.value(), shape.std->value(), h);
  auto [omega, pi] = omega_pi(mu_z, sz, h, rc.train.omega_pi_iters);
  Rng rng(derive_seed(rc.seed, 0x5EED0003));
  auto eps = standard_normal_field<T>(y.dims, rng);
  auto a = sample_appearance(app.mean.value(), rho, eps);

  Decomposition d;
  d.height = y.dims[2];
  d.width = y.dims[3];
  d.classes = K;
  d.x = plane(shape.mean.value());
  d.a = plane(a);
  d.m = plane(app.mean.value());
  d.rho = plane(rho);
  d.upsilon = plane(ups);
  auto labels = argmax_channels(mu_z, 0);
  d.z = Array<double>(Dims{d.height, d.width});
  for (std::size_t i = 0; i < labels.size(); ++i) d.z.data[i] = labels[i];
  d.omega = Array<double>(Dims{K, d.height, d.width});
  for (std::size_t i = 0; i < omega.size(); ++i) d.omega.data[i] = static_cast<double>(omega[i]);
  return d;
}

}  // namespace

Decomposition decompose(const fs::path& checkpoint, const Array<double>& y) {
  if (y.dims.size() != 4 || y.dims[0] != 1 || y.dims[1] != 1)
    throw ShapeError("decompose expects one [1,1,H,W] image, got " + dims_to_string(y.dims));
  auto ckpt = load_checkpoint(checkpoint);
  auto rc = run_config_from_echo(ckpt.config_echo);
  return with_precision(rc.train.precision,
                        [&]<typename T>() { return decompose_impl<T>(ckpt, rc, y); });
}

std::vector<fs::path> write_decomposition(const Decomposition& d, const fs::path& out_dir) {
  ensure_dir(out_dir / "raw");
  std::vector<fs::path> written;
  auto emit = [&](const std::string& name, const double* v, bool log_scale) {
    auto path = out_dir / (name + ".pgm");
    write_pgm(path, to_gray8(v, d.height, d.width, log_scale));
    Array<double> raw(Dims{d.height, d.width}, std::vector<double>(v, v + d.height * d.width));
    save_tensor(out_dir / "raw" / (name + ".bsten"), raw);
    written.push_back(path);
  };
  emit("x", d.x.data.data(), false);
  emit("a", d.a.data.data(), false);
  emit("m", d.m.data.data(), false);
  emit("rho", d.rho.data.data(), true);
  emit("upsilon", d.upsilon.data.data(), true);
  emit("z", d.z.data.data(), false);
  const std::size_t P = d.height * d.width;
  for (std::size_t k = 0; k < d.classes; ++k)
    emit("omega_" + std::to_string(k), d.omega.data.data() + k * P, true);
  return written;
}

// ---------------------------------------------------------------------------
// Version

std::string code_version() { return "bayeseg 0.1.0"; }

std::string code_hash() {
  std::string v = code_version();
  std::string blob = "blob " + std::to_string(v.size()) + std::string(1, '\0') + v;
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(blob.data(), blob.size(), md, &len, EVP_sha1(), nullptr) != 1)
    throw std::runtime_error("SHA-1 digest failed");
  std::string hex;
  char buf[3];
  for (unsigned i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", md[i]);
    hex += buf;
  }
  return hex;
}

}  // namespace bayeseg
