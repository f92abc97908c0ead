#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "maskdiff/datapipe.hpp"
#include "maskdiff/denoiser.hpp"
#include "maskdiff/schedules.hpp"
#include "maskdiff/segmenter.hpp"

namespace maskdiff {

// ---- diffusion -------------------------------------------------------------

struct DiffusionExample {
  Tensor<float> image;           // (1,3,H,W) at the stage resolution
  std::optional<LabelMap> mask;  // absent or ignored for unconditional training
  std::vector<double> scalars;   // encoded covariates, scalar_dim entries
};

struct DiffusionTrainOptions {
  int steps = 1000;
  int batch_size = 16;
  double lr = 1e-3;
  Weighting weighting = Weighting::uniform_eps;
  bool use_masks = true;  // false: every sample gets the empty-mask bundle
  double lowres_aug_max = 0.2;  // super-resolution stages only
  int lowres_resolution = 0;    // source resolution of the low-res input; 0 = half the stage resolution
  std::uint64_t seed = 0;
  bool augment = true;  // random quarter turns and flips
};

struct LossPoint {
  long long step = 0;
  double loss = 0.0;
};

// Adam on the denoising objective. Returns the per-step loss history.
std::vector<LossPoint> train_diffusion(Denoiser<float>& model, nn::Adam<float>& optimizer, const Schedule& schedule,
                                       std::span<const DiffusionExample> data, const DiffusionTrainOptions& opts);

// ---- segmentation ----------------------------------------------------------

struct SegExample {
  Tensor<float> image;  // (1,3,H,W)
  LabelMap mask;
};

struct SegTrainOptions {
  int epochs = 40;
  int iterations_per_epoch = 0;  // minibatches per epoch; 0 = one pass over the data
  int batch_size = 8;
  double lr = 1e-3;
  double lr_floor = 3e-6;
  int plateau_patience = 15;
  double plateau_tolerance = 1e-4;
  SegLossConfig loss;
  std::vector<AugmentOp> augment = {AugmentOp::rotate90, AugmentOp::flip, AugmentOp::color_shift};
  AugmentParams augment_params;
  std::uint64_t seed = 0;
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lr = 0.0;
};

// Mean total loss over examples without gradient or augmentation.
double evaluate_seg_loss(const SegModel<float>& model, std::span<const SegExample> data, const SegLossConfig& loss,
                         int batch_size = 16);

// Continues from model.epoch and the model's optimizer state. The learning
// rate drops from lr to lr_floor once val loss has not improved by
// plateau_tolerance for plateau_patience epochs.
std::vector<EpochRecord> train_segmenter(SegModel<float>& model, std::span<const SegExample> train,
                                         std::span<const SegExample> val, const SegTrainOptions& opts);

std::string history_csv(std::span<const EpochRecord> history);

LabelMap predict_mask(const SegModel<float>& model, const Tensor<float>& image);
std::vector<LabelMap> predict_masks(const SegModel<float>& model, std::span<const Tensor<float>> images,
                                    int batch_size = 16);

}  // namespace maskdiff
