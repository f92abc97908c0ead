#include <gtest/gtest.h>

#include <fstream>

#include "checks.hpp"
#include "maskdiff/checkpoint.hpp"
#include "maskdiff/training.hpp"
#include "temp_dir.hpp"

using namespace maskdiff;

namespace {

DenoiserConfig small_denoiser() {
  DenoiserConfig cfg;
  cfg.resolution = 8;
  cfg.depth = 1;
  cfg.base_width = 4;
  cfg.num_classes = 3;
  cfg.scalar_dim = 2;
  cfg.init_seed = 4;
  return cfg;
}

template <typename Store>
void expect_same_params(const Store& a, const Store& b) {
  ASSERT_EQ(a.entries().size(), b.entries().size());
  for (std::size_t i = 0; i < a.entries().size(); ++i) {
    EXPECT_EQ(a.entries()[i].first, b.entries()[i].first);
    EXPECT_EQ(a.entries()[i].second->value, b.entries()[i].second->value) << a.entries()[i].first;
  }
}

}  // namespace

TEST(Checkpoint, RawRoundTrip) {
  oracle::TempDir dir;
  Checkpoint c;
  c.model_kind = "denoiser";
  c.config = {{"a", 1}};
  c.step = 12;
  c.extra["note"] = "x";
  c.tensors.push_back({"w", Shape{1, 2, 1, 1}, false, {0.5, -1.25}});
  c.tensors.push_back({"m", Shape{1, 1, 1, 1}, true, {1.0 / 3.0}});
  write_checkpoint(dir / "c.ckpt", c);
  std::ifstream in(dir / "c.ckpt", std::ios::binary);
  std::string magic;
  std::getline(in, magic);
  EXPECT_EQ(magic, "MASKDIFF-CKPT-1");
  const auto back = read_checkpoint(dir / "c.ckpt");
  EXPECT_EQ(back.model_kind, "denoiser");
  EXPECT_EQ(back.step, 12);
  EXPECT_EQ(back.extra["note"], "x");
  ASSERT_EQ(back.tensors.size(), 2u);
  EXPECT_EQ(back.tensors[0].data, c.tensors[0].data);
  EXPECT_EQ(back.tensors[1].data[0], 1.0 / 3.0);
  EXPECT_FALSE(std::filesystem::exists(dir / "c.ckpt.tmp"));
}

TEST(Checkpoint, RejectsForeignOrTruncatedFiles) {
  oracle::TempDir dir;
  std::ofstream(dir / "junk.ckpt") << "hello\n";
  EXPECT_THROW(read_checkpoint(dir / "junk.ckpt"), IoError);
  EXPECT_THROW(read_checkpoint(dir / "missing.ckpt"), ValidationError);
  Denoiser<float> m(small_denoiser());
  save_denoiser(dir / "d.ckpt", m);
  const auto size = std::filesystem::file_size(dir / "d.ckpt");
  std::filesystem::resize_file(dir / "d.ckpt", size - 16);
  EXPECT_THROW(load_denoiser(dir / "d.ckpt"), IoError);
}

TEST(Checkpoint, DenoiserWithOptimizerState) {
  oracle::TempDir dir;
  Denoiser<float> m(small_denoiser());
  nn::Adam<float> opt;
  Rng rng(1);
  std::vector<DiffusionExample> data;
  for (int i = 0; i < 2; ++i) {
    Tensor<float> img(Shape{1, 3, 8, 8});
    for (auto& v : img.values()) v = static_cast<float>(rng.uniform(-1, 1));
    data.push_back({img, oracle::random_blob_mask(8, 3, rng), {0.1, 1.0}});
  }
  DiffusionTrainOptions opts;
  opts.steps = 3;
  opts.batch_size = 2;
  train_diffusion(m, opt, Schedule{}, data, opts);
  save_denoiser(dir / "d.ckpt", m, &opt);
  nn::Adam<float> opt2;
  const auto back = load_denoiser(dir / "d.ckpt", &opt2);
  EXPECT_EQ(back.step, 3);
  EXPECT_EQ(back.config().scalar_dim, 2);
  EXPECT_EQ(back.config().num_classes, 3);
  expect_same_params(m.params(), back.params());
  EXPECT_EQ(opt2.steps(), opt.steps());
  EXPECT_EQ(opt2.moments(), opt.moments());
  EXPECT_EQ(read_checkpoint(dir / "d.ckpt").model_kind, "denoiser");
}

TEST(Checkpoint, SegmenterRoundTrip) {
  oracle::TempDir dir;
  SegConfig cfg;
  cfg.resolution = 8;
  cfg.num_classes = 3;
  cfg.base_width = 4;
  SegModel<float> m(cfg);
  m.epoch = 7;
  save_segmodel(dir / "s.ckpt", m);
  const auto back = load_segmodel(dir / "s.ckpt");
  EXPECT_EQ(back.epoch, 7);
  expect_same_params(m.params(), back.params());
  EXPECT_THROW(load_denoiser(dir / "s.ckpt"), ValidationError);
}

TEST(Checkpoint, ConfigJsonRoundTrip) {
  auto cfg = small_denoiser();
  cfg.parameterization = Parameterization::v;
  cfg.lowres_input = true;
  const auto back = denoiser_config_from_json(to_json(cfg));
  EXPECT_EQ(back.parameterization, Parameterization::v);
  EXPECT_TRUE(back.lowres_input);
  EXPECT_EQ(back.scalar_dim, 2);
  EXPECT_EQ(to_json(back), to_json(cfg));
}

TEST(Cascade, SpecLoadsAndValidates) {
  oracle::TempDir dir;
  auto base_cfg = small_denoiser();
  base_cfg.scalar_dim = 0;
  auto sr_cfg = base_cfg;
  sr_cfg.resolution = 16;
  sr_cfg.parameterization = Parameterization::v;
  sr_cfg.lowres_input = true;
  save_denoiser(dir / "s0.ckpt", Denoiser<float>(base_cfg));
  save_denoiser(dir / "s1.ckpt", Denoiser<float>(sr_cfg));
  CascadeSpec spec;
  spec.stages = {{"s0.ckpt", 8, Parameterization::eps, 4, 1.0, 0.1}, {"s1.ckpt", 16, Parameterization::v, 2, 1.0, 0.1}};
  save_cascade_spec(dir / "cascade.json", spec);
  const auto loaded = load_cascade(dir / "cascade.json");
  EXPECT_EQ(loaded.resolution(), 16);
  EXPECT_EQ(loaded.num_classes(), 3);
  ASSERT_EQ(loaded.stages.size(), 2u);
  EXPECT_EQ(loaded.stages[1].num_steps, 2);

  spec.stages[1].parameterization = Parameterization::eps;
  save_cascade_spec(dir / "bad.json", spec);
  EXPECT_THROW(load_cascade(dir / "bad.json"), ValidationError);
  spec.stages[1] = {"nope.ckpt", 16, Parameterization::v, 2, 1.0, 0.1};
  save_cascade_spec(dir / "missing.json", spec);
  EXPECT_THROW(load_cascade(dir / "missing.json"), ValidationError);
}
