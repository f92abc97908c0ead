#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "maskdiff/denoiser.hpp"
#include "maskdiff/sampler.hpp"
#include "maskdiff/segmenter.hpp"

namespace maskdiff {

inline constexpr const char* kCheckpointMagic = "MASKDIFF-CKPT-1";

// File layout: magic line, little-endian uint64 header length, JSON header,
// then raw little-endian tensor data at the offsets listed in the header.
struct CheckpointTensor {
  std::string name;
  Shape shape;
  bool f64 = false;  // float32 unless set
  std::vector<double> data;
};

struct Checkpoint {
  std::string model_kind;  // "denoiser" or "segmenter"
  nlohmann::json config;
  long long step = 0;
  nlohmann::json extra = nlohmann::json::object();
  std::vector<CheckpointTensor> tensors;

  [[nodiscard]] const CheckpointTensor* find(const std::string& name) const;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

nlohmann::json to_json(const DenoiserConfig& cfg);
DenoiserConfig denoiser_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const SegConfig& cfg);
SegConfig seg_config_from_json(const nlohmann::json& j);

// Optimizer moments are stored as adam.m/<name> and adam.v/<name> in float64.
void save_denoiser(const std::filesystem::path& path, const Denoiser<float>& model,
                   const nn::Adam<float>* optimizer = nullptr);
Denoiser<float> load_denoiser(const std::filesystem::path& path, nn::Adam<float>* optimizer = nullptr);

void save_segmodel(const std::filesystem::path& path, const SegModel<float>& model);
SegModel<float> load_segmodel(const std::filesystem::path& path);

// Ordered diffusion stages; checkpoint paths are relative to the spec file.
struct CascadeStageSpec {
  std::string checkpoint;
  int resolution = 16;
  Parameterization parameterization = Parameterization::eps;
  int num_steps = 64;
  double guidance_weight = 1.0;
  double cond_aug_level = 0.1;
};

struct CascadeSpec {
  std::vector<CascadeStageSpec> stages;
};

void save_cascade_spec(const std::filesystem::path& path, const CascadeSpec& spec);
CascadeSpec load_cascade_spec(const std::filesystem::path& path);

// Loaded weights plus stage descriptors pointing into them.
struct LoadedCascade {
  std::vector<Denoiser<float>> models;
  std::vector<CascadeStage<Denoiser<float>>> stages;

  LoadedCascade() = default;
  LoadedCascade(const LoadedCascade&) = delete;
  LoadedCascade& operator=(const LoadedCascade&) = delete;
  LoadedCascade(LoadedCascade&&) noexcept = default;
  LoadedCascade& operator=(LoadedCascade&&) noexcept = default;

  [[nodiscard]] int resolution() const { return models.back().config().resolution; }
  [[nodiscard]] int num_classes() const { return models.front().config().num_classes; }
};

// Fails with ValidationError when a checkpoint is missing or disagrees with its
// stage's declared resolution or parameterization.
LoadedCascade load_cascade(const std::filesystem::path& spec_path);

}  // namespace maskdiff
