#pragma once

// Training, evaluation, ablation and decomposition workflows.

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "bayeseg/bayes.hpp"
#include "bayeseg/config.hpp"
#include "bayeseg/networks.hpp"
#include "bayeseg/synth_data.hpp"

namespace bayeseg {

// Per-variable switches. The two headline flags are stochastic_mapping (sample
// x, m, z instead of using means) and variational_loss (add lambda * L_var).
// The four PGM switches prune the stochastic a / z network heads and their
// loss terms independently.
struct AblationFlags {
  bool stochastic_mapping = true;
  bool variational_loss = true;
  bool app_network = true;  // f_a emits a variance channel
  bool app_loss = true;     // L_y, L_mu_m, L_sigma_m
  bool seg_network = true;  // g emits K variance channels
  bool seg_loss = true;     // L_mu_z, L_sigma_z

  bool operator==(const AblationFlags&) const = default;
};

// Presets: "proposed" (alias "full"), "stochastic-only", "erm", "pgm1".."pgm7".
AblationFlags ablation_preset(const std::string& name);
std::vector<std::string> suite_arms(const std::string& suite);  // "table5" or "table8"

struct TrainSettings {
  std::size_t steps = 2000;
  std::size_t batch_size = 8;
  double lr = 1e-3;
  double lr_decay_at = 0.8;  // fraction of steps after which lr is scaled
  double lr_decay_factor = 0.1;
  std::size_t log_every = 50;
  std::size_t omega_pi_iters = 2;
  std::string precision = "float";  // or "double"
  // Checkpoints kept at the end of training for averaged evaluation:
  // steps, steps - interval, ... (snapshots of them).
  std::size_t snapshots = 1;
  std::size_t snapshot_interval = 100;
};

struct RunConfig {
  std::filesystem::path data_dir;
  std::filesystem::path out_dir;
  std::uint64_t seed = 0;
  NetConfig net;
  HyperParams hyper;
  TrainSettings train;
  AblationFlags ablation;

  // Reads data.dir, out.dir, run.seed and the net.*, hyper.*, train.*, eval.*
  // and ablation.* namespaces. Does not check for unknown keys.
  static RunConfig from_config(const KeyValueConfig& cfg);
  void to_config(KeyValueConfig& cfg) const;
  std::string echo() const;
  void validate() const;

  // Network layout implied by the flags (variance heads, seed).
  NetConfig effective_net() const;
  LossMask loss_mask() const;
};

// Parses an echo (checkpoint or resolved config file) back into a RunConfig.
RunConfig run_config_from_echo(const std::string& echo);

// ---------------------------------------------------------------------------
// Data

struct LoadedSplit {
  std::vector<ManifestEntry> entries;
  std::vector<Array<double>> images;               // [1,1,H,W]
  std::vector<std::vector<std::uint8_t>> labels;   // [H*W]
  std::size_t height = 0, width = 0;
  std::size_t size() const { return entries.size(); }
};

// Cases of one split and domain; DataError when none exist.
LoadedSplit load_split(const std::filesystem::path& dir, const std::vector<ManifestEntry>& manifest,
                       const std::string& split, const std::string& domain, std::size_t classes);

// ---------------------------------------------------------------------------
// Metrics

// 100 * 2|P n G| / (|P| + |G|) for class k; 100 when both are empty.
double dice(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& gt,
            std::uint8_t k);
// Per-class Dice and the mean over foreground classes 1..K-1.
struct DiceScores {
  std::vector<double> per_class;
  double mean_foreground = 0;
};
DiceScores dice_scores(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& gt,
                       std::size_t classes);

// Columns of the per-step training metrics CSV (no wall-clock, so reruns are
// byte-identical; timings go to timing.csv).
std::string metrics_header(std::size_t classes);

// ---------------------------------------------------------------------------
// Training

struct StepStats {
  double total = 0, ce = 0, var = 0;
  std::array<double, kLossTermCount> terms{};
  std::vector<double> dice;  // per class on the training batch, then foreground mean
};

struct TrainResult {
  std::vector<std::filesystem::path> checkpoints;  // oldest first; last is final
  StepStats last;
  double first_loss = 0;
  double final_window_loss = 0;  // mean total loss over the last log window
};

// Runs the full schedule, writing under cfg.out_dir:
//   resolved.cfg, run_meta.txt, metrics.csv, timing.csv, checkpoint.bsckpt,
//   snapshots/step_NNNNNN.bsckpt
// Throws NumericalError on a non-finite loss (after writing nan_dump.txt).
TrainResult train(const RunConfig& cfg, std::ostream* progress = nullptr);

// One training step on explicit data, for tests. Labels are one-hot [N,K,H,W].
template <typename T>
class Trainer {
 public:
  explicit Trainer(const RunConfig& cfg);
  ~Trainer();
  Trainer(const Trainer&) = delete;
  Trainer& operator=(const Trainer&) = delete;

  StepStats step(const Array<T>& y, const Array<T>& u_onehot, const std::vector<std::uint8_t>& labels);
  BayeSegNets<T>& nets();
  Adam<T>& optimizer();

 private:
  struct Impl;
  Impl* impl_;
};

// ---------------------------------------------------------------------------
// Inference

// Argmax of the channel-softmaxed segmentation means, computed from the
// shape mean (no sampling). y: [N,1,H,W]; returns N label maps.
template <typename T>
std::vector<std::vector<std::uint8_t>> predict(const BayeSegNets<T>& nets, const Array<T>& y);

struct DomainSummary {
  std::string domain;
  std::size_t cases = 0;
  std::vector<double> per_class_mean;
  double mean = 0, std = 0;  // foreground-mean Dice over cases
  double drop = 0;           // source mean - this mean
};

struct EvalSummary {
  std::vector<DomainSummary> domains;  // source first
  const DomainSummary& get(const std::string& domain) const;
};

// Evaluates one or more checkpoints of the same run (per-case Dice averaged
// over checkpoints) on the source test split and every listed target domain
// (all test domains in the manifest when `domains` is empty). Writes
// eval_cases.csv, eval_summary.csv and eval_report.txt to out_dir when given.
EvalSummary evaluate(const std::vector<std::filesystem::path>& checkpoints,
                     const std::filesystem::path& data_dir, const std::vector<std::string>& domains,
                     const std::optional<std::filesystem::path>& out_dir);

std::string format_report(const std::vector<std::pair<std::string, EvalSummary>>& rows);

// ---------------------------------------------------------------------------
// Ablation

struct AblateConfig {
  std::string suite = "table5";
  std::vector<std::string> arms;        // presets; overrides the suite when set
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::string sweep_key;                // e.g. hyper.gamma_rho
  std::vector<std::string> sweep_values;

  static AblateConfig from_config(const KeyValueConfig& cfg);
  void to_config(KeyValueConfig& cfg) const;
};

struct ArmResult {
  std::string arm;
  AblationFlags flags;
  std::vector<EvalSummary> per_seed;
  // Per domain: mean and std over seeds of the seed-level mean Dice.
  std::vector<std::string> domains;
  std::vector<double> mean, std, drop;
};

// Trains and evaluates every arm x seed under out_dir/<arm>/seed_<s>, then
// writes ablation.csv and ablation_report.txt.
std::vector<ArmResult> ablate(const RunConfig& base, const AblateConfig& ab,
                              std::ostream* progress = nullptr);

// ---------------------------------------------------------------------------
// Decomposition

struct Decomposition {
  std::size_t height = 0, width = 0, classes = 0;
  Array<double> x, a, m, rho, upsilon, z;  // [H,W]; z is the class-index map
  Array<double> omega;                     // [K,H,W]
};

// Posterior fields for one image [1,1,H,W] from means (no sampling; a uses
// one draw of eps seeded from the run seed).
Decomposition decompose(const std::filesystem::path& checkpoint, const Array<double>& y);
// Writes x, a, m, rho, upsilon, z and omega_<k> as 8-bit PGM (hyper-posterior
// means on a log scale) plus raw/<name>.bsten. Returns the PGM paths.
std::vector<std::filesystem::path> write_decomposition(const Decomposition& d,
                                                       const std::filesystem::path& out_dir);

// Content hash of the library version string ("blob <len>\0<text>", SHA-1).
std::string code_version();
std::string code_hash();

}  // namespace bayeseg
