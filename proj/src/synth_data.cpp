#include "bayeseg/synth_data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "bayeseg/errors.hpp"
#include "bayeseg/image_io.hpp"
#include "bayeseg/serialize.hpp"

namespace bayeseg {

namespace fs = std::filesystem;

void SceneSpec::validate() const {
  if (height < 8 || width < 8) throw ConfigError("scene must be at least 8x8");
  if (classes != 2 && classes != 3) throw ConfigError("scene.classes must be 2 or 3");
  if (!(inner_radius_min > 0) || inner_radius_max < inner_radius_min)
    throw ConfigError("scene inner radius range is invalid");
  if (classes == 3 && (!(thickness_min > 0) || thickness_max < thickness_min))
    throw ConfigError("scene thickness range is invalid");
  if (eccentricity_max < 0 || eccentricity_max >= 1)
    throw ConfigError("scene.eccentricity_max must be in [0,1)");
  if (center_jitter < 0 || margin < 0) throw ConfigError("scene jitter and margin must be >= 0");
}

void DomainSpec::validate(std::size_t classes) const {
  if (class_means.size() != classes || class_stds.size() != classes)
    throw ConfigError("domain " + name + ": expected " + std::to_string(classes) +
                      " class means and stds");
  for (double s : class_stds)
    if (s < 0) throw ConfigError("domain " + name + ": class std must be >= 0");
  if (!(gamma_min > 0) || gamma_max < gamma_min)
    throw ConfigError("domain " + name + ": gamma range must be positive and ordered");
  if (contrast_scale_max < contrast_scale_min || contrast_offset_max < contrast_offset_min)
    throw ConfigError("domain " + name + ": contrast ranges must be ordered");
  if (contrast_scale_min <= 0 && contrast_scale_max >= 0 && contrast_scale_min != contrast_scale_max)
    throw ConfigError("domain " + name + ": contrast scale range must not contain 0");
  if (contrast_scale_min == 0) throw ConfigError("domain " + name + ": contrast scale is 0");
  if (bias_amplitude < 0 || bias_amplitude >= 1)
    throw ConfigError("domain " + name + ": bias amplitude must be in [0,1)");
  if (!(bias_length > 0)) throw ConfigError("domain " + name + ": bias length must be > 0");
  if (noise_std < 0) throw ConfigError("domain " + name + ": noise std must be >= 0");
}

DomainSpec source_domain(std::size_t classes) {
  DomainSpec d;
  d.name = kSourceDomain;
  // background, ventricle (bright blood pool), myocardium
  d.class_means = {0.25, 0.8, 0.5};
  d.class_stds = {0.05, 0.05, 0.05};
  d.class_means.resize(classes);
  d.class_stds.resize(classes);
  return d;
}

std::vector<std::string> default_target_names() {
  return {"mild-noise", "gamma-0.5", "strong-bias-field", "contrast-inverted"};
}

DomainSpec builtin_domain(const std::string& name, std::size_t classes) {
  DomainSpec d = source_domain(classes);
  d.name = name;
  if (name == kSourceDomain) return d;
  if (name == "mild-noise") {
    d.noise_std = 0.05;
  } else if (name == "gamma-0.5") {
    d.gamma_min = d.gamma_max = 0.5;
  } else if (name == "strong-bias-field") {
    d.bias_amplitude = 0.5;
    d.bias_length = 48;
  } else if (name == "contrast-inverted") {
    d.contrast_scale_min = d.contrast_scale_max = -1;
    d.contrast_offset_min = d.contrast_offset_max = 1;
  } else {
    throw ConfigError("unknown built-in domain '" + name + "'");
  }
  return d;
}

namespace {

double outer_extent(const SceneSpec& scene, const Pose& p) {
  double r = scene.classes == 3 ? p.inner_radius + p.thickness : p.inner_radius;
  return r * (1 + p.eccentricity);
}

bool inside_ellipse(double dy, double dx, double r, double e, double theta) {
  double u = dx * std::cos(theta) + dy * std::sin(theta);
  double v = -dx * std::sin(theta) + dy * std::cos(theta);
  double a = r * (1 + e), b = r * (1 - e);
  return (u * u) / (a * a) + (v * v) / (b * b) <= 1.0;
}

}  // namespace

Pose sample_pose(const SceneSpec& scene, Rng& rng) {
  scene.validate();
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
  for (int attempt = 0; attempt < 100; ++attempt) {
    Pose p;
    p.cy = (static_cast<double>(scene.height) - 1) / 2 + uniform(-scene.center_jitter, scene.center_jitter);
    p.cx = (static_cast<double>(scene.width) - 1) / 2 + uniform(-scene.center_jitter, scene.center_jitter);
    p.inner_radius = uniform(scene.inner_radius_min, scene.inner_radius_max);
    p.thickness = scene.classes == 3 ? uniform(scene.thickness_min, scene.thickness_max) : 0.0;
    p.eccentricity = uniform(0.0, scene.eccentricity_max);
    p.rotation = uniform(0.0, std::numbers::pi);
    double ext = outer_extent(scene, p);
    double lo = scene.margin;
    double hy = static_cast<double>(scene.height) - 1 - scene.margin;
    double hx = static_cast<double>(scene.width) - 1 - scene.margin;
    if (p.cy - ext >= lo && p.cy + ext <= hy && p.cx - ext >= lo && p.cx + ext <= hx) return p;
  }
  throw GenerationError("no pose fits a " + std::to_string(scene.height) + "x" +
                        std::to_string(scene.width) + " grid after 100 attempts");
}

std::vector<std::uint8_t> rasterize(const SceneSpec& scene, const Pose& p) {
  std::vector<std::uint8_t> labels(scene.height * scene.width, 0);
  double outer = p.inner_radius + p.thickness;
  for (std::size_t i = 0; i < scene.height; ++i)
    for (std::size_t j = 0; j < scene.width; ++j) {
      double dy = static_cast<double>(i) - p.cy, dx = static_cast<double>(j) - p.cx;
      auto& l = labels[i * scene.width + j];
      if (inside_ellipse(dy, dx, p.inner_radius, p.eccentricity, p.rotation))
        l = 1;
      else if (scene.classes == 3 && inside_ellipse(dy, dx, outer, p.eccentricity, p.rotation))
        l = 2;
    }
  return labels;
}

double disk_area(const Pose& p) {
  return std::numbers::pi * p.inner_radius * p.inner_radius * (1 - p.eccentricity * p.eccentricity);
}

double ring_area(const Pose& p) {
  double outer = p.inner_radius + p.thickness;
  return std::numbers::pi * (outer * outer - p.inner_radius * p.inner_radius) *
         (1 - p.eccentricity * p.eccentricity);
}

Array<double> render_base(const SceneSpec& scene, const std::vector<std::uint8_t>& labels,
                          const DomainSpec& domain, Rng& rng) {
  domain.validate(scene.classes);
  if (labels.size() != scene.height * scene.width)
    throw ShapeError("label map does not match the scene grid");
  Array<double> img(Dims{scene.height, scene.width});
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    std::size_t k = labels[i];
    double texture = normal(rng);
    img.data[i] = domain.class_means.at(k) + domain.class_stds.at(k) * texture;
  }
  return img;
}

Array<double> bias_field(std::size_t height, std::size_t width, double length, Rng& rng) {
  std::uniform_real_distribution<double> phase(0.0, 2 * std::numbers::pi);
  double py = phase(rng), px = phase(rng);
  Array<double> f(Dims{height, width});
  for (std::size_t i = 0; i < height; ++i)
    for (std::size_t j = 0; j < width; ++j)
      f.data[i * width + j] = 0.5 * (std::cos(std::numbers::pi * static_cast<double>(i) / length + py) +
                                     std::cos(std::numbers::pi * static_cast<double>(j) / length + px));
  return f;
}

Array<double> zscore(const Array<double>& img) {
  std::size_t n = img.data.size();
  if (n == 0) throw ShapeError("z-score of an empty image");
  double mean = 0;
  for (double v : img.data) mean += v;
  mean /= static_cast<double>(n);
  double var = 0;
  for (double v : img.data) var += (v - mean) * (v - mean);
  var /= static_cast<double>(n);
  if (!(var > 0)) throw DataError("cannot z-score a constant image");
  double inv = 1.0 / std::sqrt(var);
  Array<double> out(img.dims);
  for (std::size_t i = 0; i < n; ++i) out.data[i] = (img.data[i] - mean) * inv;
  return out;
}

Array<double> apply_domain_shift(const Array<double>& img, const DomainSpec& domain, Rng& rng) {
  if (img.dims.size() < 2) throw ShapeError("domain shift needs an image, got " + dims_to_string(img.dims));
  std::size_t height = img.dims[img.dims.size() - 2], width = img.dims.back();
  if (img.data.size() != height * width)
    throw ShapeError("domain shift works on one image, got " + dims_to_string(img.dims));

  Array<double> v = img;
  auto [lo, hi] = std::minmax_element(v.data.begin(), v.data.end());
  double a = *lo, range = *hi - *lo;
  for (auto& x : v.data) x = range > 0 ? (x - a) / range : 0.0;

  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double l, double h) { return l + (h - l) * unit(rng); };
  double gamma = uniform(domain.gamma_min, domain.gamma_max);
  double scale = uniform(domain.contrast_scale_min, domain.contrast_scale_max);
  double offset = uniform(domain.contrast_offset_min, domain.contrast_offset_max);

  if (gamma != 1.0)
    for (auto& x : v.data) x = std::pow(x, gamma);
  for (auto& x : v.data) x = scale * x + offset;
  if (domain.bias_amplitude > 0) {
    auto f = bias_field(height, width, domain.bias_length, rng);
    for (std::size_t i = 0; i < v.data.size(); ++i) v.data[i] *= 1 + domain.bias_amplitude * f.data[i];
  }
  if (domain.noise_std > 0) {
    std::normal_distribution<double> normal(0.0, domain.noise_std);
    for (auto& x : v.data) x += normal(rng);
  }
  return zscore(v);
}

SyntheticCase generate_case(const SceneSpec& scene, const DomainSpec& domain, Rng& rng) {
  SyntheticCase c;
  c.pose = sample_pose(scene, rng);
  c.labels = rasterize(scene, c.pose);
  auto base = render_base(scene, c.labels, domain, rng);
  c.image = apply_domain_shift(base, domain, rng);
  c.image.dims = Dims{1, 1, scene.height, scene.width};
  return c;
}

// ---------------------------------------------------------------------------
// Benchmark configuration

BenchmarkSpec::BenchmarkSpec() : source(source_domain()) {
  for (const auto& n : default_target_names()) targets.push_back(builtin_domain(n));
}

namespace {

const std::vector<std::string> kDomainFields = {
    "class_means",        "class_stds",         "gamma_min",           "gamma_max",
    "contrast_scale_min", "contrast_scale_max", "contrast_offset_min", "contrast_offset_max",
    "bias_amplitude",     "bias_length",        "noise_std"};

DomainSpec read_domain(const KeyValueConfig& cfg, const std::string& name, std::size_t classes) {
  DomainSpec d;
  bool builtin = true;
  try {
    d = builtin_domain(name, classes);
  } catch (const ConfigError&) {
    builtin = false;
    d = source_domain(classes);
    d.name = name;
  }
  std::string p = "domain." + name + ".";
  if (!builtin && cfg.keys_with_prefix("domain." + name).empty())
    throw ConfigError("domain '" + name + "' is neither built in nor defined by domain." + name +
                      ".* keys");
  d.class_means = cfg.get_double_list(p + "class_means", d.class_means);
  d.class_stds = cfg.get_double_list(p + "class_stds", d.class_stds);
  d.gamma_min = cfg.get_double(p + "gamma_min", d.gamma_min);
  d.gamma_max = cfg.get_double(p + "gamma_max", d.gamma_max);
  d.contrast_scale_min = cfg.get_double(p + "contrast_scale_min", d.contrast_scale_min);
  d.contrast_scale_max = cfg.get_double(p + "contrast_scale_max", d.contrast_scale_max);
  d.contrast_offset_min = cfg.get_double(p + "contrast_offset_min", d.contrast_offset_min);
  d.contrast_offset_max = cfg.get_double(p + "contrast_offset_max", d.contrast_offset_max);
  d.bias_amplitude = cfg.get_double(p + "bias_amplitude", d.bias_amplitude);
  d.bias_length = cfg.get_double(p + "bias_length", d.bias_length);
  d.noise_std = cfg.get_double(p + "noise_std", d.noise_std);
  d.validate(classes);
  return d;
}

void write_domain(KeyValueConfig& cfg, const DomainSpec& d) {
  std::string p = "domain." + d.name + ".";
  cfg.set(p + "class_means", join_doubles(d.class_means));
  cfg.set(p + "class_stds", join_doubles(d.class_stds));
  cfg.set(p + "gamma_min", format_double(d.gamma_min));
  cfg.set(p + "gamma_max", format_double(d.gamma_max));
  cfg.set(p + "contrast_scale_min", format_double(d.contrast_scale_min));
  cfg.set(p + "contrast_scale_max", format_double(d.contrast_scale_max));
  cfg.set(p + "contrast_offset_min", format_double(d.contrast_offset_min));
  cfg.set(p + "contrast_offset_max", format_double(d.contrast_offset_max));
  cfg.set(p + "bias_amplitude", format_double(d.bias_amplitude));
  cfg.set(p + "bias_length", format_double(d.bias_length));
  cfg.set(p + "noise_std", format_double(d.noise_std));
}

}  // namespace

BenchmarkSpec BenchmarkSpec::from_config(const KeyValueConfig& cfg) {
  BenchmarkSpec b;
  SceneSpec& s = b.scene;
  s.height = cfg.get_uint("scene.height", s.height);
  s.width = cfg.get_uint("scene.width", s.width);
  s.classes = cfg.get_uint("scene.classes", s.classes);
  s.center_jitter = cfg.get_double("scene.center_jitter", s.center_jitter);
  s.inner_radius_min = cfg.get_double("scene.inner_radius_min", s.inner_radius_min);
  s.inner_radius_max = cfg.get_double("scene.inner_radius_max", s.inner_radius_max);
  s.thickness_min = cfg.get_double("scene.thickness_min", s.thickness_min);
  s.thickness_max = cfg.get_double("scene.thickness_max", s.thickness_max);
  s.eccentricity_max = cfg.get_double("scene.eccentricity_max", s.eccentricity_max);
  s.margin = cfg.get_double("scene.margin", s.margin);
  s.validate();

  b.train = cfg.get_uint("data.train", b.train);
  b.val = cfg.get_uint("data.val", b.val);
  b.test = cfg.get_uint("data.test", b.test);
  b.target_test = cfg.get_uint("data.target_test", b.target_test);
  b.seed = cfg.get_uint("data.seed", b.seed);

  b.source = read_domain(cfg, kSourceDomain, s.classes);
  b.targets.clear();
  for (const auto& name : cfg.get_list("data.targets", default_target_names())) {
    if (name == kSourceDomain) throw ConfigError("data.targets must not list the source domain");
    b.targets.push_back(read_domain(cfg, name, s.classes));
  }
  return b;
}

void BenchmarkSpec::to_config(KeyValueConfig& cfg) const {
  cfg.set("scene.height", std::to_string(scene.height));
  cfg.set("scene.width", std::to_string(scene.width));
  cfg.set("scene.classes", std::to_string(scene.classes));
  cfg.set("scene.center_jitter", format_double(scene.center_jitter));
  cfg.set("scene.inner_radius_min", format_double(scene.inner_radius_min));
  cfg.set("scene.inner_radius_max", format_double(scene.inner_radius_max));
  cfg.set("scene.thickness_min", format_double(scene.thickness_min));
  cfg.set("scene.thickness_max", format_double(scene.thickness_max));
  cfg.set("scene.eccentricity_max", format_double(scene.eccentricity_max));
  cfg.set("scene.margin", format_double(scene.margin));
  cfg.set("data.train", std::to_string(train));
  cfg.set("data.val", std::to_string(val));
  cfg.set("data.test", std::to_string(test));
  cfg.set("data.target_test", std::to_string(target_test));
  cfg.set("data.seed", std::to_string(seed));
  std::vector<std::string> names;
  for (const auto& d : targets) names.push_back(d.name);
  cfg.set("data.targets", join(names));
  write_domain(cfg, source);
  for (const auto& d : targets) write_domain(cfg, d);
}

// ---------------------------------------------------------------------------
// Dataset on disk

std::vector<ManifestEntry> build_benchmark(const BenchmarkSpec& spec, const fs::path& dir) {
  spec.scene.validate();
  spec.source.validate(spec.scene.classes);
  for (const auto& d : spec.targets) d.validate(spec.scene.classes);

  std::error_code ec;
  fs::create_directories(dir / "images", ec);
  if (!ec) fs::create_directories(dir / "labels", ec);
  if (ec) throw IoError("cannot create dataset directory " + dir.string() + ": " + ec.message());

  struct Job {
    const DomainSpec* domain;
    std::string split;
    std::size_t count;
  };
  std::vector<Job> jobs = {{&spec.source, "train", spec.train},
                           {&spec.source, "val", spec.val},
                           {&spec.source, "test", spec.test}};
  for (const auto& d : spec.targets) jobs.push_back({&d, "test", spec.target_test});

  std::vector<ManifestEntry> manifest;
  std::uint64_t index = 0;
  for (const auto& job : jobs)
    for (std::size_t i = 0; i < job.count; ++i, ++index) {
      ManifestEntry e;
      char num[16];
      std::snprintf(num, sizeof num, "%04zu", i);
      e.case_id = job.domain->name + "-" + job.split + "-" + num;
      e.split = job.split;
      e.domain = job.domain->name;
      e.seed = derive_seed(spec.seed, index);
      e.image_path = "images/" + e.case_id + ".bsten";
      e.label_path = "labels/" + e.case_id + ".pgm";

      Rng rng(e.seed);
      auto c = generate_case(spec.scene, *job.domain, rng);
      save_tensor(dir / e.image_path, c.image);
      GrayImage lab;
      lab.height = spec.scene.height;
      lab.width = spec.scene.width;
      lab.maxval = static_cast<unsigned>(spec.scene.classes - 1);
      lab.pixels = c.labels;
      write_pgm(dir / e.label_path, lab);
      manifest.push_back(std::move(e));
    }

  std::ofstream os(dir / kManifestName);
  if (!os) throw IoError("cannot write " + (dir / kManifestName).string());
  os << "case_id,split,domain,seed,image_path,label_path\n";
  for (const auto& e : manifest)
    os << e.case_id << ',' << e.split << ',' << e.domain << ',' << e.seed << ',' << e.image_path
       << ',' << e.label_path << '\n';
  if (!os) throw IoError("write failed for " + (dir / kManifestName).string());
  return manifest;
}

std::vector<ManifestEntry> read_manifest(const fs::path& dir) {
  fs::path path = dir / kManifestName;
  std::ifstream is(path);
  if (!is) throw IoError("cannot read manifest " + path.string());
  std::string line;
  std::getline(is, line);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "case_id,split,domain,seed,image_path,label_path")
    throw FormatError(path.string() + ": unexpected manifest header");
  std::vector<ManifestEntry> out;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string item;
    while (std::getline(ss, item, ',')) f.push_back(item);
    if (f.size() != 6)
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected 6 columns");
    ManifestEntry e{f[0], f[1], f[2], 0, f[4], f[5]};
    try {
      e.seed = std::stoull(f[3]);
    } catch (const std::exception&) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": bad seed");
    }
    out.push_back(std::move(e));
  }
  return out;
}

Array<double> load_case_image(const fs::path& dir, const ManifestEntry& e) {
  auto img = load_tensor<double>(dir / e.image_path);
  if (img.dims.size() == 2) img.dims = Dims{1, 1, img.dims[0], img.dims[1]};
  if (img.dims.size() != 4 || img.dims[0] != 1 || img.dims[1] != 1)
    throw DataError(e.image_path + ": expected a single-channel image, got " +
                    dims_to_string(img.dims));
  return img;
}

std::vector<std::uint8_t> load_case_labels(const fs::path& dir, const ManifestEntry& e,
                                           std::size_t classes) {
  auto img = read_pgm(dir / e.label_path);
  for (auto v : img.pixels)
    if (v >= classes)
      throw DataError(e.label_path + ": label " + std::to_string(v) + " outside 0.." +
                      std::to_string(classes - 1));
  return img.pixels;
}

}  // namespace bayeseg
