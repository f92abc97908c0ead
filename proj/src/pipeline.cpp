#include "maskdiff/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>

#include "maskdiff/hash.hpp"
#include "maskdiff/png_io.hpp"
#include "maskdiff/sampler.hpp"

namespace maskdiff {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Seed streams per pipeline stage.
constexpr std::uint64_t kStreamDiffInit = 100;
constexpr std::uint64_t kStreamPretrain = 200;
constexpr std::uint64_t kStreamFinetune = 250;
constexpr std::uint64_t kStreamSegInit = 300;
constexpr std::uint64_t kStreamSegTrain = 350;
constexpr std::uint64_t kStreamD1 = 400;
constexpr std::uint64_t kStreamD2 = 500;
constexpr std::uint64_t kStreamSubset = 600;
constexpr std::uint64_t kStreamToy = 700;

const std::vector<std::string> kVariantOrder = {"1", "1a", "2", "3", "4", "5"};

void write_text(const fs::path& path, const std::string& text) {
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string weighting_name(Weighting w) { return w == Weighting::snr_truncated ? "snr_truncated" : "uniform_eps"; }

json stage_to_json(const DiffusionStageConfig& s) {
  return {{"resolution", s.resolution},
          {"parameterization", to_string(s.parameterization)},
          {"base_width", s.base_width},
          {"depth", s.depth},
          {"pretrain_steps", s.pretrain_steps},
          {"finetune_steps", s.finetune_steps},
          {"batch_size", s.batch_size},
          {"lr", s.lr},
          {"finetune_lr", s.finetune_lr},
          {"clip_norm", s.clip_norm},
          {"weighting", weighting_name(s.weighting)},
          {"cond_dropout_p", s.cond_dropout_p},
          {"num_steps", s.num_steps},
          {"guidance_weight", s.guidance_weight},
          {"cond_aug_level", s.cond_aug_level},
          {"train_aug_max", s.train_aug_max}};
}

template <typename V>
void read_field(const json& j, const char* key, V& out) {
  if (j.contains(key)) out = j.at(key).get<V>();
}

DiffusionStageConfig stage_from_json(const json& j, DiffusionStageConfig s) {
  read_field(j, "resolution", s.resolution);
  if (j.contains("parameterization")) s.parameterization = parse_parameterization(j["parameterization"].get<std::string>());
  read_field(j, "base_width", s.base_width);
  read_field(j, "depth", s.depth);
  read_field(j, "pretrain_steps", s.pretrain_steps);
  read_field(j, "finetune_steps", s.finetune_steps);
  read_field(j, "batch_size", s.batch_size);
  read_field(j, "lr", s.lr);
  read_field(j, "finetune_lr", s.finetune_lr);
  read_field(j, "clip_norm", s.clip_norm);
  if (j.contains("weighting")) s.weighting = parse_weighting(j["weighting"].get<std::string>());
  read_field(j, "cond_dropout_p", s.cond_dropout_p);
  read_field(j, "num_steps", s.num_steps);
  read_field(j, "guidance_weight", s.guidance_weight);
  read_field(j, "cond_aug_level", s.cond_aug_level);
  read_field(j, "train_aug_max", s.train_aug_max);
  return s;
}

json phase_to_json(const SegPhaseConfig& p) {
  return {{"epochs", p.epochs},
          {"iterations_per_epoch", p.iterations_per_epoch},
          {"batch_size", p.batch_size},
          {"lr", p.lr}};
}

SegPhaseConfig phase_from_json(const json& j, SegPhaseConfig p) {
  read_field(j, "epochs", p.epochs);
  read_field(j, "iterations_per_epoch", p.iterations_per_epoch);
  read_field(j, "batch_size", p.batch_size);
  read_field(j, "lr", p.lr);
  return p;
}

Tensor<float> image_to_resolution(const Tensor<float>& image, int res) {
  if (image.h() == res && image.w() == res) return image;
  if (image.h() == image.w() && image.h() > res && image.h() % res == 0) return downsample_area(image, image.h() / res);
  return resize_bilinear(image, res, res);
}

Tensor<float> quantize(const Tensor<float>& image) {
  Tensor<float> out(image.shape());
  for (std::size_t i = 0; i < image.size(); ++i) out[i] = from_byte(to_byte(image[i]));
  return out;
}

std::string rel_ref(const fs::path& target, const fs::path& base_dir) {
  return fs::relative(target, base_dir).generic_string();
}

}  // namespace

std::string to_string(Profile p) { return p == Profile::desk ? "desk" : "paper"; }

Profile parse_profile(const std::string& s) {
  if (s == "desk") return Profile::desk;
  if (s == "paper" || s == "paper-scale") return Profile::paper;
  throw ValidationError("unknown profile: " + s + " (expected desk or paper)");
}

bool is_known_variant(const std::string& v) {
  return std::find(kVariantOrder.begin(), kVariantOrder.end(), v) != kVariantOrder.end();
}

ExperimentConfig ExperimentConfig::desk() {
  ExperimentConfig c;
  c.profile = Profile::desk;
  DiffusionStageConfig base;
  base.resolution = 16;
  base.parameterization = Parameterization::eps;
  base.base_width = 16;
  base.depth = 2;
  base.pretrain_steps = 1500;
  base.finetune_steps = 600;
  base.batch_size = 16;
  base.lr = 1e-3;
  base.finetune_lr = 5e-4;
  base.num_steps = 64;
  DiffusionStageConfig sr = base;
  sr.resolution = 32;
  sr.parameterization = Parameterization::v;
  sr.pretrain_steps = 600;
  sr.finetune_steps = 300;
  sr.batch_size = 8;
  sr.num_steps = 32;
  c.cascade = {base, sr};
  c.seg_train = {40, 16, 8, 1e-3};
  c.seg_finetune = {10, 16, 8, 1e-3};
  return c;
}

ExperimentConfig ExperimentConfig::paper() {
  ExperimentConfig c;
  c.profile = Profile::paper;
  c.toy_resolution = 1024;
  c.toy_train = 1600;
  c.toy_val = 200;
  c.toy_test = 200;
  DiffusionStageConfig base;
  base.resolution = 64;
  base.parameterization = Parameterization::eps;
  base.base_width = 128;
  base.depth = 4;
  base.pretrain_steps = 120000;
  base.finetune_steps = 20000;
  base.batch_size = 32;
  base.lr = 1e-4;
  base.finetune_lr = 1e-4;
  base.num_steps = 1024;
  DiffusionStageConfig sr1 = base;
  sr1.resolution = 256;
  sr1.parameterization = Parameterization::v;
  sr1.num_steps = 256;
  sr1.batch_size = 8;
  DiffusionStageConfig sr2 = sr1;
  sr2.resolution = 1024;
  sr2.base_width = 64;
  sr2.depth = 5;
  c.cascade = {base, sr1, sr2};
  c.n1 = 5000;
  c.k = 2;
  c.seg_width = 32;
  c.seg_depth = 5;
  c.seg_train = {200, 250, 2, 1e-3};
  c.seg_finetune = {25, 250, 2, 1e-3};
  return c;
}

void ExperimentConfig::validate() const {
  if (cascade.empty()) throw ValidationError("config: cascade needs at least one stage");
  for (std::size_t i = 0; i < cascade.size(); ++i) {
    const auto& s = cascade[i];
    const std::string at = "config: cascade stage " + std::to_string(i);
    if (s.resolution < 8 || (s.resolution & (s.resolution - 1))) throw ValidationError(at + " resolution must be a power of two >= 8");
    if (i > 0 && (s.resolution <= cascade[i - 1].resolution || s.resolution % cascade[i - 1].resolution)) {
      throw ValidationError(at + " resolution must be a larger multiple of the previous stage");
    }
    if (s.pretrain_steps < 0 || s.finetune_steps < 0) throw ValidationError(at + " step counts must be >= 0");
    if (s.batch_size < 1 || s.num_steps < 1) throw ValidationError(at + " needs batch_size >= 1 and num_steps >= 1");
    if (s.guidance_weight < 0) throw ValidationError(at + " guidance weight must be >= 0");
    if (s.cond_aug_level < 0 || s.cond_aug_level > 1) throw ValidationError(at + " cond_aug_level must be in [0,1]");
  }
  if (n1 < 1) throw ValidationError("config: N1 must be >= 1");
  if (k < 1) throw ValidationError("config: k must be >= 1");
  if (!(real_fraction > 0 && real_fraction <= 1)) throw ValidationError("config: real_fraction must be in (0,1]");
  if (!(finetune_cond_fraction > 0 && finetune_cond_fraction <= 1)) {
    throw ValidationError("config: finetune_cond_fraction must be in (0,1]");
  }
  if (num_classes < 2) throw ValidationError("config: num_classes must be >= 2");
  if (variants.empty()) throw ValidationError("config: variant list is empty");
  std::set<std::string> seen;
  for (const auto& v : variants) {
    if (!is_known_variant(v)) throw ValidationError("config: unknown variant '" + v + "' (expected 1, 1a, 2, 3, 4, 5)");
    if (!seen.insert(v).second) throw ValidationError("config: duplicate variant '" + v + "'");
  }
  if (real_manifest.empty()) {
    if (toy_train < 1 || toy_val < 1 || toy_test < 1) throw ValidationError("config: toy split sizes must be >= 1");
  }
  for (const auto* p : {&seg_train, &seg_finetune}) {
    if (p->epochs < 0 || p->batch_size < 1 || p->iterations_per_epoch < 0 || p->lr <= 0) {
      throw ValidationError("config: invalid segmentation phase settings");
    }
  }
  if (sample_batch < 1) throw ValidationError("config: sample_batch must be >= 1");
  SegConfig{final_resolution(), 3, num_classes, seg_width, seg_depth, 0}.validate();
}

json to_json(const ExperimentConfig& c) {
  json j;
  j["profile"] = to_string(c.profile);
  j["seed"] = c.seed;
  j["real_manifest"] = c.real_manifest;
  j["num_classes"] = c.num_classes;
  j["toy"] = {{"resolution", c.toy_resolution}, {"train", c.toy_train}, {"val", c.toy_val}, {"test", c.toy_test}};
  j["cascade"] = json::array();
  for (const auto& s : c.cascade) j["cascade"].push_back(stage_to_json(s));
  j["n1"] = c.n1;
  j["k"] = c.k;
  j["variants"] = c.variants;
  j["real_fraction"] = c.real_fraction;
  j["finetune_cond_fraction"] = c.finetune_cond_fraction;
  j["variant2_full_real"] = c.variant2_full_real;
  j["covariates"] = json::array();
  for (const auto& cv : c.covariates) j["covariates"].push_back({{"key", cv.key}, {"lo", cv.lo}, {"hi", cv.hi}});
  j["sample_batch"] = c.sample_batch;
  j["segmentation"] = {{"width", c.seg_width},
                       {"depth", c.seg_depth},
                       {"train", phase_to_json(c.seg_train)},
                       {"finetune", phase_to_json(c.seg_finetune)},
                       {"lr_floor", c.seg_lr_floor},
                       {"plateau_patience", c.plateau_patience},
                       {"plateau_tolerance", c.plateau_tolerance},
                       {"beta", c.seg_beta}};
  return j;
}

ExperimentConfig config_from_json(const json& j) {
  try {
    const Profile profile = parse_profile(j.value("profile", std::string("desk")));
    ExperimentConfig c = profile == Profile::desk ? ExperimentConfig::desk() : ExperimentConfig::paper();
    read_field(j, "seed", c.seed);
    read_field(j, "real_manifest", c.real_manifest);
    read_field(j, "num_classes", c.num_classes);
    if (j.contains("toy")) {
      const auto& t = j["toy"];
      read_field(t, "resolution", c.toy_resolution);
      read_field(t, "train", c.toy_train);
      read_field(t, "val", c.toy_val);
      read_field(t, "test", c.toy_test);
    }
    if (j.contains("cascade")) {
      const auto defaults = c.cascade;
      c.cascade.clear();
      for (std::size_t i = 0; i < j["cascade"].size(); ++i) {
        const auto& base = i < defaults.size() ? defaults[i] : defaults.back();
        c.cascade.push_back(stage_from_json(j["cascade"][i], base));
      }
    }
    read_field(j, "n1", c.n1);
    read_field(j, "k", c.k);
    read_field(j, "variants", c.variants);
    read_field(j, "real_fraction", c.real_fraction);
    read_field(j, "finetune_cond_fraction", c.finetune_cond_fraction);
    read_field(j, "variant2_full_real", c.variant2_full_real);
    if (j.contains("covariates")) {
      c.covariates.clear();
      for (const auto& cv : j["covariates"]) {
        c.covariates.push_back({cv.at("key").get<std::string>(), cv.value("lo", 0.0), cv.value("hi", 1.0)});
      }
    }
    read_field(j, "sample_batch", c.sample_batch);
    if (j.contains("segmentation")) {
      const auto& s = j["segmentation"];
      read_field(s, "width", c.seg_width);
      read_field(s, "depth", c.seg_depth);
      if (s.contains("train")) c.seg_train = phase_from_json(s["train"], c.seg_train);
      if (s.contains("finetune")) c.seg_finetune = phase_from_json(s["finetune"], c.seg_finetune);
      read_field(s, "lr_floor", c.seg_lr_floor);
      read_field(s, "plateau_patience", c.plateau_patience);
      read_field(s, "plateau_tolerance", c.plateau_tolerance);
      read_field(s, "beta", c.seg_beta);
    }
    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed config: ") + e.what());
  }
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot read config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ValidationError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

std::string config_hash(const ExperimentConfig& cfg) { return sha256_hex(to_json(cfg).dump()); }

json to_json(const PipelineState& s) {
  return {{"config_hash", s.config_hash}, {"done", s.done}, {"artifacts", s.artifacts}, {"lineage", s.lineage}};
}

PipelineState state_from_json(const json& j) {
  PipelineState s;
  s.config_hash = j.value("config_hash", std::string());
  s.done = j.value("done", std::map<std::string, bool>{});
  s.artifacts = j.value("artifacts", std::map<std::string, std::string>{});
  s.lineage = j.value("lineage", std::map<std::string, std::string>{});
  return s;
}

std::vector<std::size_t> deterministic_subset(std::size_t n, double fraction, std::uint64_t seed) {
  if (!(fraction > 0 && fraction <= 1)) throw ValidationError("subset fraction must be in (0,1]");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  // Fisher-Yates with our own draws so the permutation is library-independent.
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i) - 1));
    std::swap(idx[i - 1], idx[j]);
  }
  const auto keep = std::min(n, static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n) - 1e-9)));
  idx.resize(std::max<std::size_t>(keep, n > 0 ? 1 : 0));
  std::sort(idx.begin(), idx.end());
  return idx;
}

std::vector<SegExample> load_seg_examples(const Manifest& m, int resolution) {
  std::vector<SegExample> out;
  std::vector<std::string> missing;
  for (auto& s : load_samples(m)) {
    if (!s.mask) {
      missing.push_back(s.image_ref);
      continue;
    }
    out.push_back({image_to_resolution(s.image, resolution), resize_nearest(*s.mask, resolution, resolution)});
  }
  if (!missing.empty()) {
    std::string list;
    for (const auto& r : missing) list += (list.empty() ? "" : ", ") + r;
    throw ValidationError("records without masks: " + list);
  }
  return out;
}

std::vector<Tensor<float>> generate_images(const LoadedCascade& cascade, const Schedule& schedule,
                                           std::span<const LabelMap> masks, int count,
                                           std::span<const std::vector<double>> scalars, std::uint64_t seed,
                                           int batch_size) {
  const int res = cascade.resolution();
  const int classes = cascade.num_classes();
  const int scalar_dim = cascade.models.front().config().scalar_dim;
  const bool conditional = !masks.empty();
  const int total = conditional ? static_cast<int>(masks.size()) : count;
  std::vector<Tensor<float>> out;
  out.reserve(total);
  for (int start = 0, batch = 0; start < total; start += batch_size, ++batch) {
    const int n = std::min(batch_size, total - start);
    ConditioningBundle<float> cond;
    if (conditional) {
      std::vector<LabelMap> part;
      for (int i = start; i < start + n; ++i) {
        part.push_back(masks[i].height == res ? masks[i] : resize_nearest(masks[i], res, res));
      }
      cond = mask_bundle<float>(part, classes, scalar_dim);
      if (scalar_dim > 0 && !scalars.empty()) {
        for (int i = 0; i < n; ++i)
          for (int k = 0; k < scalar_dim; ++k) cond.scalars.at(i, k, 0, 0) = static_cast<float>(scalars[start + i][k]);
      }
    } else {
      cond = empty_bundle<float>(n, classes, res, scalar_dim);
    }
    Tensor<float> images;
    try {
      images = cascade_sample<float>(std::span(cascade.stages), schedule, cond, derive_seed(seed, batch));
    } catch (const SamplingError& e) {
      throw SamplingError("sampling records " + std::to_string(start) + ".." + std::to_string(start + n - 1) +
                          " failed: " + e.what());
    }
    for (int i = 0; i < n; ++i) out.push_back(images.sample(i));
  }
  return out;
}

// ---- Pipeline ---------------------------------------------------------------

Pipeline::Pipeline(fs::path run_dir, ExperimentConfig cfg) : dir_(std::move(run_dir)), cfg_(std::move(cfg)) {
  cfg_.validate();
  const std::string hash = config_hash(cfg_);
  fs::create_directories(dir_);
  const fs::path cfg_path = dir_ / "config.json";
  if (fs::exists(cfg_path)) {
    const auto existing = load_config(cfg_path);
    if (config_hash(existing) != hash) {
      throw ValidationError("run directory " + dir_.string() + " holds a different configuration (config hash mismatch)");
    }
  } else {
    write_text(cfg_path, to_json(cfg_).dump(2) + "\n");
  }
  const fs::path state_path = dir_ / "state.json";
  if (fs::exists(state_path)) {
    std::ifstream in(state_path);
    state_ = state_from_json(json::parse(in));
    if (state_.config_hash != hash) throw ValidationError("state.json config hash does not match config.json");
  } else {
    state_.config_hash = hash;
    save_state();
  }
}

Pipeline Pipeline::open(const fs::path& run_dir) {
  const fs::path cfg_path = run_dir / "config.json";
  if (!fs::exists(cfg_path)) throw ValidationError("no config.json in " + run_dir.string() + "; pass --config");
  return Pipeline(run_dir, load_config(cfg_path));
}

void Pipeline::save_state() { write_text(dir_ / "state.json", to_json(state_).dump(2) + "\n"); }

void Pipeline::mark_done(const std::string& stage) {
  state_.done[stage] = true;
  save_state();
}

void Pipeline::log(const std::string& msg) const {
  if (log_) log_(msg);
}

fs::path Pipeline::cascade_path(const std::string& name) const { return dir_ / "checkpoints" / (name + ".json"); }

fs::path Pipeline::seg_checkpoint(const std::string& variant) const {
  return dir_ / "checkpoints" / ("seg_" + variant + ".ckpt");
}

Manifest Pipeline::real_manifest() const { return load_manifest(dir_ / "manifests" / "real.json"); }

std::vector<std::size_t> Pipeline::real_subset(const Manifest& train, double fraction, std::uint64_t stream) const {
  return deterministic_subset(train.records.size(), fraction, derive_seed(cfg_.seed, stream));
}

void Pipeline::prepare_data() {
  if (state_.is_done("data")) return;
  const fs::path manifests = dir_ / "manifests";
  fs::create_directories(manifests);
  Manifest src;
  if (cfg_.real_manifest.empty()) {
    log("generating toy dataset");
    ToySpec spec;
    spec.n = cfg_.toy_train + cfg_.toy_val + cfg_.toy_test;
    spec.n_val = cfg_.toy_val;
    spec.n_test = cfg_.toy_test;
    spec.resolution = cfg_.toy_resolution;
    spec.num_classes = cfg_.num_classes;
    spec.seed = derive_seed(cfg_.seed, kStreamToy);
    src = make_toy_dataset(spec, dir_ / "data" / "real");
  } else {
    src = load_manifest(cfg_.real_manifest);
    if (src.num_classes != cfg_.num_classes) {
      throw ValidationError("real manifest has " + std::to_string(src.num_classes) + " classes, config expects " +
                            std::to_string(cfg_.num_classes));
    }
  }
  Manifest real = src;
  real.base_dir = manifests;
  for (auto& r : real.records) {
    r.image = rel_ref(fs::absolute(src.resolve(r.image)), fs::absolute(manifests));
    if (r.mask) r.mask = rel_ref(fs::absolute(src.resolve(*r.mask)), fs::absolute(manifests));
  }
  if (real.filter(Split::train).records.empty() || real.filter(Split::val).records.empty() ||
      real.filter(Split::test).records.empty()) {
    throw ValidationError("real manifest needs train, val and test records");
  }
  save_manifest(real, manifests / "real.json");
  state_.artifacts["manifest_real"] = "manifests/real.json";
  mark_done("data");
}

void Pipeline::pretrain_unconditional() {
  if (state_.is_done("pretrain")) return;
  prepare_data();
  const Manifest train = real_manifest().filter(Split::train);
  const auto samples = load_samples(train);
  const Schedule schedule;
  CascadeSpec spec;
  fs::create_directories(dir_ / "checkpoints");
  fs::create_directories(dir_ / "logs");
  for (std::size_t i = 0; i < cfg_.cascade.size(); ++i) {
    const auto& st = cfg_.cascade[i];
    DenoiserConfig dc;
    dc.resolution = st.resolution;
    dc.num_classes = cfg_.num_classes;
    dc.parameterization = st.parameterization;
    dc.base_width = st.base_width;
    dc.depth = st.depth;
    dc.scalar_dim = cfg_.scalar_dim();
    dc.cond_dropout_p = st.cond_dropout_p;
    dc.lowres_input = i > 0;
    dc.init_seed = derive_seed(cfg_.seed, kStreamDiffInit + i);
    Denoiser<float> model(dc);
    std::vector<DiffusionExample> data;
    for (const auto& s : samples) {
      data.push_back({image_to_resolution(s.image, st.resolution), std::nullopt,
                      std::vector<double>(static_cast<std::size_t>(dc.scalar_dim), 0.0)});
    }
    nn::Adam<float> opt(nn::AdamOptions{st.lr, 0.9, 0.999, 1e-8, st.clip_norm});
    DiffusionTrainOptions o;
    o.steps = st.pretrain_steps;
    o.batch_size = st.batch_size;
    o.lr = st.lr;
    o.weighting = st.weighting;
    o.use_masks = false;
    o.lowres_aug_max = st.train_aug_max;
    o.lowres_resolution = i > 0 ? cfg_.cascade[i - 1].resolution : 0;
    o.seed = derive_seed(cfg_.seed, kStreamPretrain + i);
    log("pretraining unconditional stage " + std::to_string(i) + " (" + std::to_string(st.resolution) + " px, " +
        std::to_string(o.steps) + " steps)");
    const auto hist = train_diffusion(model, opt, schedule, data, o);
    std::string csv = "step,loss\n";
    for (const auto& p : hist) csv += std::to_string(p.step) + "," + std::to_string(p.loss) + "\n";
    write_text(dir_ / "logs" / ("pretrain_stage" + std::to_string(i) + ".csv"), csv);
    const std::string name = "dphi_stage" + std::to_string(i) + ".ckpt";
    save_denoiser(dir_ / "checkpoints" / name, model, &opt);
    spec.stages.push_back({name, st.resolution, st.parameterization, st.num_steps, st.guidance_weight,
                           st.cond_aug_level});
  }
  save_cascade_spec(cascade_path("dphi"), spec);
  state_.artifacts["cascade_dphi"] = "checkpoints/dphi.json";
  mark_done("pretrain");
}

void Pipeline::finetune_conditional() {
  if (state_.is_done("finetune_cond")) return;
  pretrain_unconditional();
  const Manifest train = real_manifest().filter(Split::train);
  std::vector<std::string> offenders;
  for (const auto& r : train.records)
    if (!r.mask) offenders.push_back(r.image);
  if (!offenders.empty()) {
    std::string list;
    for (const auto& o : offenders) list += (list.empty() ? "" : ", ") + o;
    throw ValidationError("conditional fine-tuning needs masks; records without masks: " + list);
  }
  Manifest labelled = train;
  labelled.records.clear();
  for (auto i : real_subset(train, cfg_.finetune_cond_fraction, kStreamSubset)) labelled.records.push_back(train.records[i]);
  const auto samples = load_samples(labelled);
  const Schedule schedule;
  const CascadeSpec dphi = load_cascade_spec(cascade_path("dphi"));
  CascadeSpec spec;
  for (std::size_t i = 0; i < cfg_.cascade.size(); ++i) {
    const auto& st = cfg_.cascade[i];
    nn::Adam<float> opt(nn::AdamOptions{st.finetune_lr, 0.9, 0.999, 1e-8, st.clip_norm});
    Denoiser<float> model = load_denoiser(dir_ / "checkpoints" / dphi.stages[i].checkpoint);
    std::vector<DiffusionExample> data;
    for (const auto& s : samples) {
      data.push_back({image_to_resolution(s.image, st.resolution), resize_nearest(*s.mask, st.resolution, st.resolution),
                      encode_covariates(s.metadata, cfg_.covariates)});
    }
    DiffusionTrainOptions o;
    o.steps = st.finetune_steps;
    o.batch_size = st.batch_size;
    o.lr = st.finetune_lr;
    o.weighting = st.weighting;
    o.use_masks = true;
    o.lowres_aug_max = st.train_aug_max;
    o.lowres_resolution = i > 0 ? cfg_.cascade[i - 1].resolution : 0;
    o.seed = derive_seed(cfg_.seed, kStreamFinetune + i);
    log("fine-tuning conditional stage " + std::to_string(i) + " on " + std::to_string(data.size()) +
        " labelled records (" + std::to_string(o.steps) + " steps)");
    const auto hist = train_diffusion(model, opt, schedule, data, o);
    std::string csv = "step,loss\n";
    for (const auto& p : hist) csv += std::to_string(p.step) + "," + std::to_string(p.loss) + "\n";
    write_text(dir_ / "logs" / ("finetune_stage" + std::to_string(i) + ".csv"), csv);
    const std::string name = "dxi_stage" + std::to_string(i) + ".ckpt";
    save_denoiser(dir_ / "checkpoints" / name, model, &opt);
    spec.stages.push_back({name, st.resolution, st.parameterization, st.num_steps, st.guidance_weight,
                           st.cond_aug_level});
  }
  save_cascade_spec(cascade_path("dxi"), spec);
  state_.artifacts["cascade_dxi"] = "checkpoints/dxi.json";
  mark_done("finetune_cond");
}

void Pipeline::train_real_segmenter() {
  if (state_.is_done("seg_real")) return;
  prepare_data();
  train_variant("1");
  mark_done("seg_real");
}

void Pipeline::build_d1() {
  if (state_.is_done("build_d1")) return;
  pretrain_unconditional();
  train_real_segmenter();
  const LoadedCascade dphi = load_cascade(cascade_path("dphi"));
  const SegModel<float> m_theta = load_segmodel(seg_checkpoint("1"));
  const Schedule schedule;
  log("building d1: " + std::to_string(cfg_.n1) + " unconditional samples");
  const auto images = generate_images(dphi, schedule, {}, cfg_.n1, {}, derive_seed(cfg_.seed, kStreamD1),
                                      cfg_.sample_batch);
  const fs::path manifests = dir_ / "manifests";
  const fs::path out = dir_ / "data" / "d1";
  Manifest m;
  m.num_classes = cfg_.num_classes;
  m.class_names = real_manifest().class_names;
  m.base_dir = manifests;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const Tensor<float> img = quantize(images[i]);
    const LabelMap mask = predict_mask(m_theta, image_to_resolution(img, m_theta.config().resolution));
    char name[32];
    std::snprintf(name, sizeof name, "%05zu.png", i);
    write_image(out / "images" / name, img);
    write_mask(out / "masks" / name, mask);
    DatasetRecord r;
    r.image = rel_ref(out / "images" / name, manifests);
    r.mask = rel_ref(out / "masks" / name, manifests);
    r.split = Split::train;
    r.provenance = Provenance::d1;
    m.records.push_back(std::move(r));
  }
  save_manifest(m, manifests / "d1.json");
  state_.artifacts["manifest_d1"] = "manifests/d1.json";
  mark_done("build_d1");
}

void Pipeline::build_d2() {
  if (state_.is_done("build_d2")) return;
  build_d1();
  finetune_conditional();
  const LoadedCascade dxi = load_cascade(cascade_path("dxi"));
  const Manifest d1 = load_manifest(dir_ / "manifests" / "d1.json");
  std::vector<LabelMap> masks;
  std::vector<std::vector<double>> scalars;
  for (const auto& r : d1.records) {
    if (!r.mask) throw ValidationError("d1 record " + r.image + " has no mask");
    masks.push_back(read_mask(d1.resolve(*r.mask)));
    scalars.push_back(encode_covariates(r.metadata, cfg_.covariates));
  }
  const Schedule schedule;
  const fs::path manifests = dir_ / "manifests";
  const fs::path out = dir_ / "data" / "d2";
  Manifest m;
  m.num_classes = cfg_.num_classes;
  m.class_names = d1.class_names;
  m.base_dir = manifests;
  for (int j = 0; j < cfg_.k; ++j) {
    log("building d2: round " + std::to_string(j + 1) + "/" + std::to_string(cfg_.k) + ", " +
        std::to_string(masks.size()) + " conditional samples");
    const auto images = generate_images(dxi, schedule, masks, 0, scalars,
                                        derive_seed(cfg_.seed, kStreamD2 + static_cast<std::uint64_t>(j)),
                                        cfg_.sample_batch);
    for (std::size_t i = 0; i < images.size(); ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "%05zu_%d.png", i, j);
      write_image(out / "images" / name, quantize(images[i]));
      DatasetRecord r;
      r.image = rel_ref(out / "images" / name, manifests);
      r.mask = d1.records[i].mask;  // shared with the d1 record
      r.split = Split::train;
      r.provenance = Provenance::d2;
      r.metadata = d1.records[i].metadata;
      m.records.push_back(std::move(r));
    }
  }
  save_manifest(m, manifests / "d2.json");
  state_.artifacts["manifest_d2"] = "manifests/d2.json";
  mark_done("build_d2");
}

void Pipeline::train_variant(const std::string& v) {
  const std::string key = "variant:" + v;
  if (state_.is_done(key)) return;
  const int res = cfg_.final_resolution();
  const Manifest real = real_manifest();
  const Manifest train = real.filter(Split::train);
  const auto val = load_seg_examples(real.filter(Split::val), res);
  auto subset_of = [&] {
    Manifest sub = train;
    sub.records.clear();
    for (auto i : real_subset(train, cfg_.real_fraction, kStreamSubset)) sub.records.push_back(train.records[i]);
    return load_seg_examples(sub, res);
  };
  auto synthetic = [&] { return load_seg_examples(load_manifest(dir_ / "manifests" / "d2.json"), res); };

  std::string parent;
  if (v == "2" || v == "3") parent = "1";
  if (v == "5") parent = "4";
  if (!parent.empty()) {
    train_variant(parent);
    if (!fs::exists(seg_checkpoint(parent))) {
      throw ValidationError("variant " + v + " needs the variant " + parent + " checkpoint");
    }
  }
  if ((v == "2" || v == "3" || v == "4") && !state_.is_done("build_d2")) build_d2();

  const auto idx = std::find(kVariantOrder.begin(), kVariantOrder.end(), v) - kVariantOrder.begin();
  SegModel<float> model = parent.empty()
                              ? SegModel<float>(SegConfig{res, 3, cfg_.num_classes, cfg_.seg_width, cfg_.seg_depth,
                                                          derive_seed(cfg_.seed, kStreamSegInit + idx)})
                              : load_segmodel(seg_checkpoint(parent));
  if (!parent.empty()) {
    model.optimizer = nn::Adam<float>();
    state_.lineage[v] = file_sha256(seg_checkpoint(parent));
  }
  std::vector<SegExample> data;
  if (v == "1") {
    data = load_seg_examples(train, res);
  } else if (v == "1a" || v == "5") {
    data = subset_of();
  } else if (v == "2") {
    data = synthetic();
    const auto real_part = cfg_.variant2_full_real ? load_seg_examples(train, res) : subset_of();
    data.insert(data.end(), real_part.begin(), real_part.end());
  } else {
    data = synthetic();
  }
  const SegPhaseConfig& phase = parent.empty() ? cfg_.seg_train : cfg_.seg_finetune;
  SegTrainOptions o;
  o.epochs = phase.epochs;
  o.iterations_per_epoch = phase.iterations_per_epoch;
  o.batch_size = phase.batch_size;
  o.lr = phase.lr;
  o.lr_floor = cfg_.seg_lr_floor;
  o.plateau_patience = cfg_.plateau_patience;
  o.plateau_tolerance = cfg_.plateau_tolerance;
  o.loss.beta = cfg_.seg_beta;
  o.seed = derive_seed(cfg_.seed, kStreamSegTrain + idx);
  log("training segmentation variant (" + v + ") on " + std::to_string(data.size()) + " records" +
      (parent.empty() ? "" : ", initialized from (" + parent + ")"));
  const auto hist = train_segmenter(model, data, val, o);
  fs::create_directories(dir_ / "logs");
  write_text(dir_ / "logs" / ("seg_" + v + ".csv"), history_csv(hist));
  fs::create_directories(dir_ / "checkpoints");
  save_segmodel(seg_checkpoint(v), model);
  state_.artifacts["seg_" + v] = "checkpoints/seg_" + v + ".ckpt";
  mark_done(key);
}

void Pipeline::run_variants() {
  if (state_.is_done("variants")) return;
  prepare_data();
  for (const auto& v : kVariantOrder) {
    if (std::find(cfg_.variants.begin(), cfg_.variants.end(), v) == cfg_.variants.end()) continue;
    if (v == "1") {
      train_real_segmenter();
    } else {
      train_variant(v);
    }
  }
  write_reports();
  mark_done("variants");
}

std::vector<EvalReport> Pipeline::reports() const {
  const int res = cfg_.final_resolution();
  const Manifest test = real_manifest().filter(Split::test);
  if (test.records.empty()) throw ValidationError("test split is empty");
  const auto samples = load_samples(test);
  std::vector<Tensor<float>> images;
  std::vector<LabelMap> gts;
  std::set<std::string> tags;
  for (const auto& s : samples) {
    if (!s.mask) throw ValidationError("test record " + s.image_ref + " has no mask");
    images.push_back(image_to_resolution(s.image, res));
    gts.push_back(resize_nearest(*s.mask, res, res));
    if (!s.tag.empty()) tags.insert(s.tag);
  }
  std::vector<EvalReport> out;
  for (const auto& v : kVariantOrder) {
    if (std::find(cfg_.variants.begin(), cfg_.variants.end(), v) == cfg_.variants.end()) continue;
    if (!fs::exists(seg_checkpoint(v))) continue;
    const SegModel<float> model = load_segmodel(seg_checkpoint(v));
    const auto preds = predict_masks(model, images);
    for (const auto& tag : tags) {
      std::vector<LabelMap> p, g;
      for (std::size_t i = 0; i < samples.size(); ++i) {
        if (samples[i].tag != tag) continue;
        p.push_back(preds[i]);
        g.push_back(gts[i]);
      }
      out.push_back(evaluate(v, tag, p, g, cfg_.num_classes));
    }
    out.push_back(evaluate(v, "all", preds, gts, cfg_.num_classes));
  }
  return out;
}

void Pipeline::write_reports() {
  const auto reps = reports();
  const auto names = real_manifest().class_names;
  fs::create_directories(dir_ / "reports");
  write_text(dir_ / "reports" / "table.txt", render_table(reps, names));
  write_text(dir_ / "reports" / "table.csv", render_csv(reps));
  state_.artifacts["report_table"] = "reports/table.txt";
  state_.artifacts["report_csv"] = "reports/table.csv";
  save_state();
}

void Pipeline::run_all() {
  prepare_data();
  pretrain_unconditional();
  finetune_conditional();
  train_real_segmenter();
  build_d1();
  build_d2();
  run_variants();
}

}  // namespace maskdiff
