#pragma once

// Synthetic multi-domain segmentation benchmark. A scene is a background with
// a filled ellipse ("ventricle", class 1) nested inside an elliptic ring
// ("myocardium", class 2). Domains differ only in how intensities are
// rendered, so labels are identical across domains for the same case seed.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "bayeseg/config.hpp"
#include "bayeseg/distributions.hpp"
#include "bayeseg/tensor.hpp"

namespace bayeseg {

struct SceneSpec {
  std::size_t height = 64, width = 64;
  std::size_t classes = 3;  // 2 drops the ring
  double center_jitter = 8.0;  // centre offset from the grid centre, pixels
  double inner_radius_min = 7.0, inner_radius_max = 11.0;
  double thickness_min = 3.0, thickness_max = 6.0;
  double eccentricity_max = 0.25;  // semi-axes r(1+e), r(1-e)
  double margin = 2.0;             // minimum gap between the ring and the grid border

  void validate() const;
};

struct Pose {
  double cy = 0, cx = 0;
  double inner_radius = 0, thickness = 0;
  double eccentricity = 0, rotation = 0;
};

struct DomainSpec {
  std::string name;
  std::vector<double> class_means;  // base intensities in [0,1]
  std::vector<double> class_stds;   // per-pixel texture
  double gamma_min = 1, gamma_max = 1;
  double contrast_scale_min = 1, contrast_scale_max = 1;
  double contrast_offset_min = 0, contrast_offset_max = 0;
  double bias_amplitude = 0;
  double bias_length = 64;  // half-period of the bias field, pixels
  double noise_std = 0;

  void validate(std::size_t classes) const;
};

inline constexpr const char* kSourceDomain = "source";

DomainSpec source_domain(std::size_t classes = 3);
// mild-noise, gamma-0.5, strong-bias-field, contrast-inverted (increasing severity).
std::vector<std::string> default_target_names();
DomainSpec builtin_domain(const std::string& name, std::size_t classes = 3);

// Rejection-samples a pose that fits the grid; GenerationError after 100 tries.
Pose sample_pose(const SceneSpec& scene, Rng& rng);
// Class index per pixel; a pixel belongs to a structure when its centre is inside.
std::vector<std::uint8_t> rasterize(const SceneSpec& scene, const Pose& pose);
double disk_area(const Pose& pose);
double ring_area(const Pose& pose);

// Base render: class mean plus Gaussian texture, [H,W], before any normalisation.
Array<double> render_base(const SceneSpec& scene, const std::vector<std::uint8_t>& labels,
                          const DomainSpec& domain, Rng& rng);
// Min-max to [0,1], then gamma -> contrast affine -> bias field -> noise -> z-score.
Array<double> apply_domain_shift(const Array<double>& img, const DomainSpec& domain, Rng& rng);
Array<double> zscore(const Array<double>& img);
// Smooth field in [-1,1] with the given half-period.
Array<double> bias_field(std::size_t height, std::size_t width, double length, Rng& rng);

struct SyntheticCase {
  Array<double> image;                // [1,1,H,W], z-scored
  std::vector<std::uint8_t> labels;   // [H*W] class indices
  Pose pose;
};

SyntheticCase generate_case(const SceneSpec& scene, const DomainSpec& domain, Rng& rng);

struct BenchmarkSpec {
  SceneSpec scene;
  DomainSpec source;
  std::vector<DomainSpec> targets;
  std::size_t train = 200, val = 20, test = 30, target_test = 30;
  std::uint64_t seed = 0;

  BenchmarkSpec();
  // Reads "data.*", "scene.*" and "domain.<name>.*" keys.
  static BenchmarkSpec from_config(const KeyValueConfig& cfg);
  void to_config(KeyValueConfig& cfg) const;
  std::size_t total_cases() const { return train + val + test + target_test * targets.size(); }
};

struct ManifestEntry {
  std::string case_id, split, domain;
  std::uint64_t seed = 0;
  std::string image_path, label_path;  // relative to the dataset directory
};

inline constexpr const char* kManifestName = "manifest.csv";

// Writes images/, labels/ and manifest.csv under `dir` (created if missing).
std::vector<ManifestEntry> build_benchmark(const BenchmarkSpec& spec,
                                           const std::filesystem::path& dir);
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& dir);

// Loaders for one case of a dataset directory.
Array<double> load_case_image(const std::filesystem::path& dir, const ManifestEntry& e);
std::vector<std::uint8_t> load_case_labels(const std::filesystem::path& dir,
                                           const ManifestEntry& e, std::size_t classes);

}  // namespace bayeseg
