#include "maskdiff/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "maskdiff/sampler.hpp"

namespace maskdiff {

namespace {

const AugmentOp kDiffusionAugment[] = {AugmentOp::rotate90, AugmentOp::flip};

}  // namespace

std::vector<LossPoint> train_diffusion(Denoiser<float>& model, nn::Adam<float>& optimizer, const Schedule& schedule,
                                       std::span<const DiffusionExample> data, const DiffusionTrainOptions& opts) {
  const auto& cfg = model.config();
  if (opts.steps < 0 || opts.batch_size < 1) throw ValidationError("diffusion training needs steps >= 0, batch >= 1");
  if (opts.steps > 0 && data.empty()) throw ValidationError("diffusion training set is empty");
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& ex = data[i];
    if (ex.image.shape() != Shape{1, cfg.in_channels, cfg.resolution, cfg.resolution}) {
      throw ShapeError("diffusion example " + std::to_string(i) + " has shape " + ex.image.shape().str() +
                       ", stage expects resolution " + std::to_string(cfg.resolution));
    }
    if (opts.use_masks && cfg.num_classes > 1 && !ex.mask) {
      throw ValidationError("diffusion example " + std::to_string(i) + " has no mask");
    }
    if (cfg.scalar_dim > 0 && static_cast<int>(ex.scalars.size()) != cfg.scalar_dim) {
      throw ValidationError("diffusion example " + std::to_string(i) + " has the wrong number of covariates");
    }
  }
  const int low_res = opts.lowres_resolution > 0 ? opts.lowres_resolution : cfg.resolution / 2;
  if (cfg.lowres_input && (low_res < 1 || cfg.resolution % low_res)) {
    throw ValidationError("low-res input resolution must divide the stage resolution");
  }
  optimizer.set_lr(opts.lr);
  Rng rng(opts.seed);
  std::vector<LossPoint> history;
  history.reserve(opts.steps);
  const int bs = opts.batch_size;
  for (int step = 0; step < opts.steps; ++step) {
    std::vector<Tensor<float>> images;
    std::vector<LabelMap> masks;
    std::vector<const DiffusionExample*> chosen;
    for (int b = 0; b < bs; ++b) {
      const auto& ex = data[rng.uniform_int(0, static_cast<int>(data.size()) - 1)];
      chosen.push_back(&ex);
      const bool with_mask = opts.use_masks && ex.mask.has_value();
      std::optional<LabelMap> m = with_mask ? ex.mask : std::nullopt;
      if (opts.augment) {
        auto pair = augment(ex.image, m, kDiffusionAugment, rng);
        images.push_back(std::move(pair.image));
        m = std::move(pair.mask);
      } else {
        images.push_back(ex.image);
      }
      masks.push_back(m ? *m : LabelMap(cfg.resolution, cfg.resolution));
    }
    const Tensor<float> x0 = stack<float>(images);
    auto cond = opts.use_masks ? mask_bundle<float>(masks, cfg.num_classes, cfg.scalar_dim)
                               : empty_bundle<float>(bs, cfg.num_classes, cfg.resolution, cfg.scalar_dim);
    if (cfg.scalar_dim > 0 && opts.use_masks) {
      for (int b = 0; b < bs; ++b)
        for (int k = 0; k < cfg.scalar_dim; ++k) cond.scalars.at(b, k, 0, 0) = static_cast<float>(chosen[b]->scalars[k]);
    }
    if (cfg.lowres_input) {
      const Tensor<float> low = downsample_area(x0, cfg.resolution / low_res);
      cond.lowres = lowres_conditioning_random(schedule, low, cfg.resolution, opts.lowres_aug_max, rng);
    }
    model.params().zero_grad();
    const auto r = training_loss<float>(model, schedule, x0, cond, rng, {opts.weighting, true});
    optimizer.step(model.params());
    ++model.step;
    history.push_back({model.step, r.loss});
  }
  return history;
}

double evaluate_seg_loss(const SegModel<float>& model, std::span<const SegExample> data, const SegLossConfig& loss,
                         int batch_size) {
  if (data.empty()) throw ValidationError("cannot evaluate segmentation loss on an empty set");
  nn::NoGradGuard guard;
  double sum = 0.0;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t end = std::min(data.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<Tensor<float>> images;
    std::vector<LabelMap> masks;
    for (std::size_t i = start; i < end; ++i) {
      images.push_back(data[i].image);
      masks.push_back(data[i].mask);
    }
    const auto heads = model.forward(stack<float>(images));
    sum += static_cast<double>(total_loss<float>(heads, masks, loss)->value[0]) * static_cast<double>(end - start);
  }
  return sum / static_cast<double>(data.size());
}

namespace {

void check_seg_examples(const SegModel<float>& model, std::span<const SegExample> data, const char* what) {
  const auto& cfg = model.config();
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data[i].image.shape() != Shape{1, cfg.in_channels, cfg.resolution, cfg.resolution}) {
      throw ShapeError(std::string(what) + " example " + std::to_string(i) + " has shape " +
                       data[i].image.shape().str() + ", model resolution is " + std::to_string(cfg.resolution));
    }
    if (data[i].mask.height != cfg.resolution || data[i].mask.width != cfg.resolution) {
      throw ShapeError(std::string(what) + " example " + std::to_string(i) + " mask does not match its image");
    }
  }
}

}  // namespace

std::vector<EpochRecord> train_segmenter(SegModel<float>& model, std::span<const SegExample> train,
                                         std::span<const SegExample> val, const SegTrainOptions& opts) {
  if (opts.epochs < 0 || opts.batch_size < 1) throw ValidationError("segmentation training needs epochs >= 0");
  std::vector<EpochRecord> history;
  if (opts.epochs == 0) return history;
  if (train.empty()) throw ValidationError("segmentation training set is empty");
  if (val.empty()) throw ValidationError("segmentation validation set is empty");
  check_seg_examples(model, train, "training");
  check_seg_examples(model, val, "validation");
  const int res = model.config().resolution;
  const int n = static_cast<int>(train.size());
  const int bs = std::min(opts.batch_size, n);
  const int iterations = opts.iterations_per_epoch > 0 ? opts.iterations_per_epoch : (n + bs - 1) / bs;

  Rng rng(opts.seed);
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  auto next_index = [&] {
    if (cursor == order.size()) {
      std::shuffle(order.begin(), order.end(), rng.engine());
      cursor = 0;
    }
    return order[cursor++];
  };

  model.optimizer.set_lr(opts.lr);
  double best = std::numeric_limits<double>::infinity();
  int since_best = 0;
  bool dropped = false;
  for (int e = 0; e < opts.epochs; ++e) {
    const double lr = model.optimizer.lr();
    double sum = 0.0;
    for (int it = 0; it < iterations; ++it) {
      std::vector<Tensor<float>> images;
      std::vector<LabelMap> masks;
      for (int b = 0; b < bs; ++b) {
        const auto& ex = train[next_index()];
        auto pair = augment(ex.image, ex.mask, opts.augment, rng, opts.augment_params);
        if (pair.image.h() != res || pair.image.w() != res) {
          pair.image = resize(pair.image, res, ResizeMode::bilinear_image);
          pair.mask = resize(*pair.mask, res, ResizeMode::nearest_mask);
        }
        images.push_back(std::move(pair.image));
        masks.push_back(std::move(*pair.mask));
      }
      model.params().zero_grad();
      const auto heads = model.forward(stack<float>(images));
      auto loss = total_loss<float>(heads, masks, opts.loss);
      const double v = static_cast<double>(loss->value[0]);
      if (!std::isfinite(v)) {
        throw TrainingError("non-finite segmentation loss at epoch " + std::to_string(model.epoch + 1) + ", batch " +
                            std::to_string(it));
      }
      nn::backward(loss);
      model.optimizer.step(model.params());
      sum += v;
    }
    const double val_loss = evaluate_seg_loss(model, val, opts.loss);
    if (val_loss < best - opts.plateau_tolerance) {
      best = val_loss;
      since_best = 0;
    } else if (++since_best >= opts.plateau_patience && !dropped) {
      model.optimizer.set_lr(opts.lr_floor);
      dropped = true;
    }
    ++model.epoch;
    history.push_back({model.epoch, sum / iterations, val_loss, lr});
  }
  return history;
}

std::string history_csv(std::span<const EpochRecord> history) {
  std::ostringstream os;
  os << "epoch,train_loss,val_loss,lr\n";
  char buf[128];
  for (const auto& h : history) {
    std::snprintf(buf, sizeof buf, "%d,%.8g,%.8g,%.8g\n", h.epoch, h.train_loss, h.val_loss, h.lr);
    os << buf;
  }
  return os.str();
}

LabelMap predict_mask(const SegModel<float>& model, const Tensor<float>& image) {
  const auto& cfg = model.config();
  if (image.shape() != Shape{1, cfg.in_channels, cfg.resolution, cfg.resolution}) {
    throw ShapeError("predict_mask: image " + image.shape().str() + " does not match model resolution " +
                     std::to_string(cfg.resolution));
  }
  return argmax_labels(model.logits(image)).front();
}

std::vector<LabelMap> predict_masks(const SegModel<float>& model, std::span<const Tensor<float>> images,
                                    int batch_size) {
  std::vector<LabelMap> out;
  for (std::size_t start = 0; start < images.size(); start += batch_size) {
    const std::size_t end = std::min(images.size(), start + static_cast<std::size_t>(batch_size));
    for (std::size_t i = start; i < end; ++i) {
      const auto& cfg = model.config();
      if (images[i].shape() != Shape{1, cfg.in_channels, cfg.resolution, cfg.resolution}) {
        throw ShapeError("predict_masks: image " + std::to_string(i) + " does not match model resolution");
      }
    }
    auto labels = argmax_labels(model.logits(stack<float>(images.subspan(start, end - start))));
    for (auto& m : labels) out.push_back(std::move(m));
  }
  return out;
}

}  // namespace maskdiff
