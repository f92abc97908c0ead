#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "maskdiff/checkpoint.hpp"
#include "maskdiff/conditioning.hpp"
#include "maskdiff/datapipe.hpp"
#include "maskdiff/metrics.hpp"
#include "maskdiff/schedules.hpp"
#include "maskdiff/training.hpp"

namespace maskdiff {

enum class Profile { desk, paper };
std::string to_string(Profile p);
Profile parse_profile(const std::string& s);

struct DiffusionStageConfig {
  int resolution = 16;
  Parameterization parameterization = Parameterization::eps;
  int base_width = 16;
  int depth = 2;
  int pretrain_steps = 1500;
  int finetune_steps = 500;
  int batch_size = 16;
  double lr = 1e-3;
  double finetune_lr = 5e-4;
  double clip_norm = 1.0;
  Weighting weighting = Weighting::uniform_eps;
  double cond_dropout_p = 0.1;
  int num_steps = 64;  // sampling steps
  double guidance_weight = 1.0;
  double cond_aug_level = 0.1;  // sampling-time low-res noise level
  double train_aug_max = 0.2;   // training draws t_aug ~ U(0, train_aug_max)
};

struct SegPhaseConfig {
  int epochs = 40;
  int iterations_per_epoch = 16;
  int batch_size = 8;
  double lr = 1e-3;
};

struct ExperimentConfig {
  Profile profile = Profile::desk;
  std::uint64_t seed = 0;

  // Real data: a manifest path, or generated toy data when empty.
  std::string real_manifest;
  int num_classes = 4;
  int toy_resolution = 32;
  int toy_train = 64;
  int toy_val = 16;
  int toy_test = 32;

  std::vector<DiffusionStageConfig> cascade;
  int n1 = 64;
  int k = 2;
  std::vector<std::string> variants = {"1", "1a", "2", "3", "4", "5"};
  double real_fraction = 0.3;           // subset for 1a, 5 and the fine-tune phases
  double finetune_cond_fraction = 0.3;  // labelled subset for conditional diffusion fine-tuning
  bool variant2_full_real = false;      // variant 2 mixes synthetic with all real data instead of the subset
  std::vector<CovariateRange> covariates;
  int sample_batch = 16;

  int seg_width = 16;
  int seg_depth = 2;
  SegPhaseConfig seg_train;
  SegPhaseConfig seg_finetune;
  double seg_lr_floor = 3e-6;
  int plateau_patience = 15;
  double plateau_tolerance = 1e-4;
  double seg_beta = 0.5;

  static ExperimentConfig desk();
  static ExperimentConfig paper();

  [[nodiscard]] int final_resolution() const { return cascade.back().resolution; }
  [[nodiscard]] int scalar_dim() const { return 2 * static_cast<int>(covariates.size()); }
  void validate() const;
};

nlohmann::json to_json(const ExperimentConfig& cfg);
// Fields present in j override the defaults of the profile named in j (desk when absent).
ExperimentConfig config_from_json(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);
std::string config_hash(const ExperimentConfig& cfg);

bool is_known_variant(const std::string& v);

struct PipelineState {
  std::string config_hash;
  std::map<std::string, bool> done;
  std::map<std::string, std::string> artifacts;
  std::map<std::string, std::string> lineage;  // variant -> hash of the checkpoint it was initialized from

  [[nodiscard]] bool is_done(const std::string& stage) const {
    auto it = done.find(stage);
    return it != done.end() && it->second;
  }
};

nlohmann::json to_json(const PipelineState& s);
PipelineState state_from_json(const nlohmann::json& j);

// Stage names in dependency order.
inline const std::vector<std::string> kStages = {"data",     "pretrain", "finetune_cond", "seg_real",
                                                 "build_d1", "build_d2", "variants"};

// One run directory:
//   config.json state.json checkpoints/ manifests/{real,d1,d2}.json
//   reports/{table.txt,table.csv} logs/*.csv data/
class Pipeline {
 public:
  // Creates the run directory or resumes it. A config.json already present
  // must hash to the same value as cfg.
  Pipeline(std::filesystem::path run_dir, ExperimentConfig cfg);
  // Resumes from the run directory's config.json.
  static Pipeline open(const std::filesystem::path& run_dir);

  [[nodiscard]] const ExperimentConfig& config() const { return cfg_; }
  [[nodiscard]] const PipelineState& state() const { return state_; }
  [[nodiscard]] const std::filesystem::path& dir() const { return dir_; }

  void set_logger(std::function<void(const std::string&)> log) { log_ = std::move(log); }

  // Each stage is a no-op when already complete and runs its prerequisites first.
  void prepare_data();
  void pretrain_unconditional();
  void finetune_conditional();
  void train_real_segmenter();  // variant 1, used as M_theta
  void build_d1();
  void build_d2();
  void run_variants();
  void run_all();

  // Test manifest evaluation of every trained variant, in variant order.
  [[nodiscard]] std::vector<EvalReport> reports() const;

  [[nodiscard]] std::filesystem::path path(const std::string& rel) const { return dir_ / rel; }
  [[nodiscard]] std::filesystem::path cascade_path(const std::string& name) const;  // "dphi" or "dxi"
  [[nodiscard]] std::filesystem::path seg_checkpoint(const std::string& variant) const;
  [[nodiscard]] Manifest real_manifest() const;

 private:
  void save_state();
  void mark_done(const std::string& stage);
  void log(const std::string& msg) const;
  [[nodiscard]] std::vector<std::size_t> real_subset(const Manifest& train, double fraction,
                                                     std::uint64_t stream) const;
  void train_variant(const std::string& variant);
  void write_reports();

  std::filesystem::path dir_;
  ExperimentConfig cfg_;
  PipelineState state_;
  std::function<void(const std::string&)> log_;
};

// Seeded shuffle then prefix of ceil(fraction * n) indices, returned sorted.
std::vector<std::size_t> deterministic_subset(std::size_t n, double fraction, std::uint64_t seed);

// Records of a manifest loaded as segmentation examples at the given resolution.
std::vector<SegExample> load_seg_examples(const Manifest& m, int resolution);

// Samples one image per conditioning entry in fixed-size batches. masks may
// be empty for unconditional sampling (count images are drawn then).
std::vector<Tensor<float>> generate_images(const LoadedCascade& cascade, const Schedule& schedule,
                                           std::span<const LabelMap> masks, int count,
                                           std::span<const std::vector<double>> scalars, std::uint64_t seed,
                                           int batch_size);

}  // namespace maskdiff
