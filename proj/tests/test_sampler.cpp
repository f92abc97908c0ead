#include <gtest/gtest.h>

#include "checks.hpp"

using namespace maskdiff;
using oracle::make_oracle;

namespace {

// Returns fixed outputs for conditional and null inputs.
struct StubModel {
  DenoiserConfig cfg;
  double cond_value = 0.2;
  double null_value = 0.1;
  [[nodiscard]] const DenoiserConfig& config() const { return cfg; }
  [[nodiscard]] Parameterization parameterization() const { return cfg.parameterization; }
  Tensor<double> predict(const Tensor<double>& z, std::span<const double>, const ConditioningBundle<double>& c) const {
    return Tensor<double>(z.shape(), c.is_null[0] ? null_value : cond_value);
  }
};

class SamplerGrid : public ::testing::TestWithParam<std::tuple<int, Parameterization>> {};

}  // namespace

TEST_P(SamplerGrid, OracleRecoversTarget) {
  const auto [steps, p] = GetParam();
  EXPECT_LT(oracle::oracle_sample_error(steps, p, 17), 1e-3);
}

INSTANTIATE_TEST_SUITE_P(Grids, SamplerGrid,
                         ::testing::Combine(::testing::Values(1, 8, 64),
                                            ::testing::Values(Parameterization::eps, Parameterization::v)));

TEST(Sampler, SemigroupOnOracle) {
  EXPECT_LT(oracle::semigroup_error(Parameterization::eps, 3), 1e-5);
  EXPECT_LT(oracle::semigroup_error(Parameterization::v, 3), 1e-5);
}

TEST(Sampler, StepMatchesForwardMarginal) {
  Schedule sch;
  for (auto p : {Parameterization::eps, Parameterization::v}) {
    const auto o = make_oracle(p, 4);
    Rng rng(8);
    const auto eps = rng.normal_tensor<double>(o.target.shape());
    const double t = 0.7, s = 0.3;
    const auto z = forward_marginal(sch, o.target, t, eps);
    const double l[1] = {log_snr(sch, t)};
    const auto pred = o.predict(z, l, empty_bundle<double>(1, 1, 8, 0));
    EXPECT_LT(max_abs_diff(ddim_step(sch, z, pred, t, s, p), forward_marginal(sch, o.target, s, eps)), 1e-5);
  }
}

TEST(Sampler, ParameterizationAgnostic) {
  Schedule sch;
  const auto oe = make_oracle(Parameterization::eps, 4);
  const auto ov = make_oracle(Parameterization::v, 4);
  Rng rng(2);
  const auto z = forward_marginal(sch, oe.target, 0.6, rng.normal_tensor<double>(oe.target.shape()));
  const double l[1] = {log_snr(sch, 0.6)};
  const auto c = empty_bundle<double>(1, 1, 8, 0);
  const auto a = ddim_step(sch, z, oe.predict(z, l, c), 0.6, 0.2, Parameterization::eps);
  const auto b = ddim_step(sch, z, ov.predict(z, l, c), 0.6, 0.2, Parameterization::v);
  EXPECT_LT(max_abs_diff(a, b), 1e-6);
}

TEST(Sampler, RejectsBadStepOrderAndGrid) {
  Schedule sch;
  Tensor<double> z(Shape{1, 1, 1, 1});
  EXPECT_THROW(ddim_step(sch, z, z, 0.3, 0.3, Parameterization::eps), DomainError);
  EXPECT_THROW(ddim_step(sch, z, z, 0.3, 0.5, Parameterization::eps), DomainError);
  EXPECT_THROW(uniform_grid(0), DomainError);
  EXPECT_THROW(validate_grid(std::vector<double>{1.0, 0.5, 0.6, 0.0}), DomainError);
  EXPECT_THROW(validate_grid(std::vector<double>{0.9, 0.0}), DomainError);
}

TEST(Sampler, SameSeedSameBits) {
  const auto model = oracle::random_denoiser(Parameterization::eps, 5);
  Rng rng(1);
  std::vector<LabelMap> masks{oracle::random_blob_mask(8, 3, rng)};
  const auto cond = mask_bundle<double>(masks, 3, 0);
  SamplerRun<double> a, b;
  a.seed = b.seed = 42;
  a.grid = b.grid = uniform_grid(4);
  EXPECT_EQ(sample<double>(model, Schedule{}, cond, a, 1.0), sample<double>(model, Schedule{}, cond, b, 1.0));
  SamplerRun<double> c = a;
  c.seed = 43;
  EXPECT_NE(sample<double>(model, Schedule{}, cond, a, 1.0), sample<double>(model, Schedule{}, cond, c, 1.0));
}

TEST(Sampler, TraceHasOneEntryPerStep) {
  const auto o = make_oracle(Parameterization::v, 1);
  SamplerRun<double> run;
  run.grid = uniform_grid(5);
  run.keep_trace = true;
  sample<double>(o, Schedule{}, empty_bundle<double>(1, 1, 8, 0), run, 0.0);
  EXPECT_EQ(run.trace.size(), 5u);
}

TEST(Guidance, ScalarStub) {
  StubModel m;
  Tensor<double> z(Shape{1, 1, 1, 1});
  ConditioningBundle<double> cond;
  cond.is_null = {0};
  EXPECT_NEAR(guided_prediction<double>(m, z, 0.0, cond, 1.0)[0], 0.3, 1e-12);
  EXPECT_EQ(guided_prediction<double>(m, z, 0.0, cond, 0.0)[0], 0.2);
  EXPECT_THROW(guided_prediction<double>(m, z, 0.0, cond, -1.0), DomainError);
}

TEST(Guidance, IdentityFixedPointAndLinearity) {
  const auto e = oracle::guidance_errors(21);
  EXPECT_LT(e.identity, 1e-6);
  EXPECT_LT(e.fixed_point, 1e-6);
  EXPECT_LT(e.collinear, 1e-6);
}

TEST(TrainingLoss, ZeroModelExpectsUnitLoss) {
  DenoiserConfig cfg;
  cfg.resolution = 8;
  cfg.depth = 1;
  cfg.base_width = 4;
  cfg.num_classes = 1;
  Denoiser<double> model(cfg);  // output conv starts at zero
  Schedule sch;
  Rng rng(99);
  Tensor<double> x0(Shape{50, 3, 8, 8});
  for (auto& v : x0.values()) v = rng.uniform(-1, 1);
  const auto cond = empty_bundle<double>(50, 1, 8, 0);
  double total = 0;
  const int rounds = 200;  // 10k draws
  for (int i = 0; i < rounds; ++i) {
    const auto r = training_loss<double>(model, sch, x0, cond, rng, {Weighting::uniform_eps, false});
    EXPECT_GE(r.loss, 0.0);
    total += r.loss;
  }
  EXPECT_NEAR(total / rounds, 1.0, 0.05);
}

TEST(TrainingLoss, GradientsMatchFiniteDifferences) {
  EXPECT_LE(oracle::diffusion_gradcheck(Parameterization::eps, 1), 1e-3);
  EXPECT_LE(oracle::diffusion_gradcheck(Parameterization::v, 2), 1e-3);
}

TEST(TrainingLoss, BatchMismatchThrows) {
  const auto model = oracle::random_denoiser(Parameterization::eps, 5);
  Rng rng(1);
  Tensor<double> x0(Shape{2, 3, 8, 8});
  EXPECT_THROW(training_loss<double>(model, Schedule{}, x0, empty_bundle<double>(1, 3, 8, 0), rng), ShapeError);
}

TEST(Conditioning, DropoutNullsWholeBundle) {
  Rng rng(3);
  std::vector<LabelMap> masks{oracle::random_blob_mask(8, 3, rng), oracle::random_blob_mask(8, 3, rng)};
  auto cond = mask_bundle<double>(masks, 3, 2);
  cond.scalars.fill(0.5);
  const std::vector<double> u{0.05, 0.9};
  const auto out = drop_conditioning<double>(cond, u, 0.1);
  EXPECT_EQ(out.is_null[0], 1);
  EXPECT_EQ(out.is_null[1], 0);
  EXPECT_EQ(out.scalars.at(0, 1, 0, 0), 0.0);
  EXPECT_EQ(out.scalars.at(1, 1, 0, 0), 0.5);
  EXPECT_EQ(out.mask.sample(1), cond.mask.sample(1));
  double s = 0;
  const auto first = out.mask.sample(0);
  for (double v : first.values()) s += v;
  EXPECT_EQ(s, 0.0);
}

TEST(Conditioning, CovariatePresenceEncoding) {
  const std::vector<CovariateRange> ranges{{"age", 0, 100}, {"creatinine", 0.5, 3.0}};
  const auto enc = encode_covariates({{"age", 75}}, ranges);
  ASSERT_EQ(enc.size(), 4u);
  EXPECT_NEAR(enc[0], 0.5, 1e-12);
  EXPECT_EQ(enc[1], 1.0);
  EXPECT_EQ(enc[2], 0.0);
  EXPECT_EQ(enc[3], -1.0);
}

TEST(Cascade, SingleStageEqualsSample) {
  const auto model = oracle::random_denoiser(Parameterization::eps, 8);
  Rng rng(1);
  std::vector<LabelMap> masks{oracle::random_blob_mask(8, 3, rng)};
  const auto cond = mask_bundle<double>(masks, 3, 0);
  std::vector<CascadeStage<Denoiser<double>>> stages{{&model, 6, 1.0, 0.1}};
  const auto a = cascade_sample<double>(std::span<const CascadeStage<Denoiser<double>>>(stages), Schedule{}, cond, 77);
  SamplerRun<double> run;
  run.seed = derive_seed(77, 0);
  run.grid = uniform_grid(6);
  EXPECT_EQ(a, sample<double>(model, Schedule{}, cond, run, 1.0));
}

TEST(Cascade, TwoStageOracleReproducesFinalTarget) {
  auto base = make_oracle(Parameterization::eps, 1, 16);
  auto sr = make_oracle(Parameterization::v, 2, 32);
  sr.cfg.lowres_input = true;
  std::vector<CascadeStage<oracle::OracleDenoiser>> stages{{&base, 8, 1.0, 0.1}, {&sr, 8, 1.0, 0.1}};
  const auto cond = empty_bundle<double>(1, 1, 32, 0);
  const auto out = cascade_sample<double>(std::span<const CascadeStage<oracle::OracleDenoiser>>(stages), Schedule{}, cond, 3);
  EXPECT_LT(max_abs_diff(out, sr.target), 1e-3);
}

TEST(Cascade, RejectsBadStages) {
  auto base = make_oracle(Parameterization::eps, 1, 16);
  auto sr = make_oracle(Parameterization::v, 2, 24);
  sr.cfg.lowres_input = true;
  std::vector<CascadeStage<oracle::OracleDenoiser>> stages{{&base, 8, 1.0, 0.1}, {&sr, 8, 1.0, 0.1}};
  EXPECT_THROW(validate_stages(std::span<const CascadeStage<oracle::OracleDenoiser>>(stages)), ValidationError);
  sr.cfg.resolution = 32;
  sr.cfg.lowres_input = false;
  EXPECT_THROW(validate_stages(std::span<const CascadeStage<oracle::OracleDenoiser>>(stages)), ValidationError);
  EXPECT_THROW(validate_stages(std::span<const CascadeStage<oracle::OracleDenoiser>>()), ValidationError);
}
