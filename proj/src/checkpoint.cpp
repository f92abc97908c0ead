#include "maskdiff/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "maskdiff/png_io.hpp"

namespace maskdiff {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

const CheckpointTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  json header;
  header["model_kind"] = ckpt.model_kind;
  header["config"] = ckpt.config;
  header["step"] = ckpt.step;
  header["extra"] = ckpt.extra;
  header["tensors"] = json::array();
  std::vector<std::uint8_t> blob;
  for (const auto& t : ckpt.tensors) {
    if (t.data.size() != t.shape.size()) throw ShapeError("checkpoint tensor " + t.name + " size mismatch");
    const std::size_t offset = blob.size();
    if (t.f64) {
      blob.resize(offset + t.data.size() * sizeof(double));
      std::memcpy(blob.data() + offset, t.data.data(), t.data.size() * sizeof(double));
    } else {
      std::vector<float> f(t.data.begin(), t.data.end());
      blob.resize(offset + f.size() * sizeof(float));
      std::memcpy(blob.data() + offset, f.data(), f.size() * sizeof(float));
    }
    header["tensors"].push_back({{"name", t.name},
                                 {"shape", {t.shape.n, t.shape.c, t.shape.h, t.shape.w}},
                                 {"dtype", t.f64 ? "f64" : "f32"},
                                 {"offset", offset},
                                 {"count", t.data.size()}});
  }
  const std::string head = header.dump();
  std::vector<std::uint8_t> out;
  const std::string magic = std::string(kCheckpointMagic) + "\n";
  out.insert(out.end(), magic.begin(), magic.end());
  const std::uint64_t len = head.size();
  const auto* lp = reinterpret_cast<const std::uint8_t*>(&len);
  out.insert(out.end(), lp, lp + sizeof len);
  out.insert(out.end(), head.begin(), head.end());
  out.insert(out.end(), blob.begin(), blob.end());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  write_file(tmp, out);
  std::filesystem::rename(tmp, path);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ValidationError("missing checkpoint: " + path.string());
  const auto bytes = read_file(path);
  const std::string magic = std::string(kCheckpointMagic) + "\n";
  if (bytes.size() < magic.size() + 8 || std::memcmp(bytes.data(), magic.data(), magic.size()) != 0) {
    throw IoError("not a " + std::string(kCheckpointMagic) + " file: " + path.string());
  }
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data() + magic.size(), sizeof len);
  const std::size_t head_at = magic.size() + sizeof len;
  if (len > bytes.size() - head_at) throw IoError("truncated checkpoint header: " + path.string());
  const std::size_t blob_at = head_at + len;
  Checkpoint c;
  try {
    const json header = json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(head_at),
                                    bytes.begin() + static_cast<std::ptrdiff_t>(blob_at));
    c.model_kind = header.at("model_kind").get<std::string>();
    c.config = header.at("config");
    c.step = header.at("step").get<long long>();
    c.extra = header.value("extra", json::object());
    for (const auto& t : header.at("tensors")) {
      CheckpointTensor ct;
      ct.name = t.at("name").get<std::string>();
      const auto s = t.at("shape").get<std::vector<int>>();
      if (s.size() != 4) throw IoError("checkpoint tensor " + ct.name + " has a malformed shape");
      ct.shape = Shape{s[0], s[1], s[2], s[3]};
      ct.f64 = t.at("dtype").get<std::string>() == "f64";
      const auto offset = t.at("offset").get<std::size_t>();
      const auto count = t.at("count").get<std::size_t>();
      const std::size_t width = ct.f64 ? sizeof(double) : sizeof(float);
      if (count != ct.shape.size() || blob_at + offset + count * width > bytes.size()) {
        throw IoError("checkpoint tensor " + ct.name + " is truncated or inconsistent");
      }
      ct.data.resize(count);
      const std::uint8_t* src = bytes.data() + blob_at + offset;
      if (ct.f64) {
        std::memcpy(ct.data.data(), src, count * sizeof(double));
      } else {
        std::vector<float> f(count);
        std::memcpy(f.data(), src, count * sizeof(float));
        std::copy(f.begin(), f.end(), ct.data.begin());
      }
      c.tensors.push_back(std::move(ct));
    }
  } catch (const json::exception& e) {
    throw IoError("malformed checkpoint header in " + path.string() + ": " + e.what());
  }
  return c;
}

json to_json(const DenoiserConfig& cfg) {
  return {{"resolution", cfg.resolution},
          {"in_channels", cfg.in_channels},
          {"num_classes", cfg.num_classes},
          {"parameterization", to_string(cfg.parameterization)},
          {"base_width", cfg.base_width},
          {"depth", cfg.depth},
          {"scalar_dim", cfg.scalar_dim},
          {"cond_dropout_p", cfg.cond_dropout_p},
          {"lowres_input", cfg.lowres_input},
          {"init_seed", cfg.init_seed}};
}

DenoiserConfig denoiser_config_from_json(const json& j) {
  DenoiserConfig c;
  c.resolution = j.at("resolution").get<int>();
  c.in_channels = j.value("in_channels", 3);
  c.num_classes = j.at("num_classes").get<int>();
  c.parameterization = parse_parameterization(j.at("parameterization").get<std::string>());
  c.base_width = j.at("base_width").get<int>();
  c.depth = j.at("depth").get<int>();
  c.scalar_dim = j.value("scalar_dim", 0);
  c.cond_dropout_p = j.value("cond_dropout_p", 0.1);
  c.lowres_input = j.value("lowres_input", false);
  c.init_seed = j.value("init_seed", std::uint64_t{0});
  return c;
}

json to_json(const SegConfig& cfg) {
  return {{"resolution", cfg.resolution}, {"in_channels", cfg.in_channels}, {"num_classes", cfg.num_classes},
          {"base_width", cfg.base_width}, {"depth", cfg.depth},             {"init_seed", cfg.init_seed}};
}

SegConfig seg_config_from_json(const json& j) {
  SegConfig c;
  c.resolution = j.at("resolution").get<int>();
  c.in_channels = j.value("in_channels", 3);
  c.num_classes = j.at("num_classes").get<int>();
  c.base_width = j.at("base_width").get<int>();
  c.depth = j.at("depth").get<int>();
  c.init_seed = j.value("init_seed", std::uint64_t{0});
  return c;
}

namespace {

template <typename T>
void put_params(Checkpoint& c, const nn::ParamStore<T>& params) {
  for (const auto& [name, v] : params.entries()) {
    c.tensors.push_back({name, v->value.shape(), false, std::vector<double>(v->value.values().begin(), v->value.values().end())});
  }
}

template <typename T>
void put_adam(Checkpoint& c, const nn::Adam<T>& opt, const nn::ParamStore<T>& params) {
  c.extra["adam_step"] = opt.steps();
  c.extra["adam_lr"] = opt.lr();
  for (const auto& [name, mv] : opt.moments()) {
    const Shape s = params.get(name)->value.shape();
    c.tensors.push_back({"adam.m/" + name, s, true, mv.first});
    c.tensors.push_back({"adam.v/" + name, s, true, mv.second});
  }
}

template <typename T>
void take_params(const Checkpoint& c, nn::ParamStore<T>& params, const std::string& what) {
  for (const auto& [name, v] : params.entries()) {
    const auto* t = c.find(name);
    if (!t) throw ValidationError(what + ": checkpoint lacks parameter " + name);
    if (t->shape != v->value.shape()) {
      throw ValidationError(what + ": parameter " + name + " has shape " + t->shape.str() + ", model expects " +
                            v->value.shape().str());
    }
    for (std::size_t i = 0; i < t->data.size(); ++i) v->value[i] = static_cast<T>(t->data[i]);
  }
}

template <typename T>
void take_adam(const Checkpoint& c, nn::Adam<T>& opt, const nn::ParamStore<T>& params) {
  std::map<std::string, typename nn::Adam<T>::Moments> moments;
  for (const auto& [name, v] : params.entries()) {
    const auto* m = c.find("adam.m/" + name);
    const auto* s = c.find("adam.v/" + name);
    if (m && s) moments[name] = {m->data, s->data};
  }
  opt.restore(c.extra.value("adam_step", 0LL), std::move(moments));
  if (c.extra.contains("adam_lr")) opt.set_lr(c.extra["adam_lr"].get<double>());
}

}  // namespace

void save_denoiser(const std::filesystem::path& path, const Denoiser<float>& model, const nn::Adam<float>* optimizer) {
  Checkpoint c;
  c.model_kind = "denoiser";
  c.config = to_json(model.config());
  c.step = model.step;
  put_params(c, model.params());
  if (optimizer) put_adam(c, *optimizer, model.params());
  write_checkpoint(path, c);
}

Denoiser<float> load_denoiser(const std::filesystem::path& path, nn::Adam<float>* optimizer) {
  const Checkpoint c = read_checkpoint(path);
  if (c.model_kind != "denoiser") {
    throw ValidationError(path.string() + " holds a " + c.model_kind + " checkpoint, expected denoiser");
  }
  Denoiser<float> model(denoiser_config_from_json(c.config));
  take_params(c, model.params(), path.string());
  model.step = c.step;
  if (optimizer) take_adam(c, *optimizer, model.params());
  return model;
}

void save_segmodel(const std::filesystem::path& path, const SegModel<float>& model) {
  Checkpoint c;
  c.model_kind = "segmenter";
  c.config = to_json(model.config());
  c.step = model.epoch;
  put_params(c, model.params());
  put_adam(c, model.optimizer, model.params());
  write_checkpoint(path, c);
}

SegModel<float> load_segmodel(const std::filesystem::path& path) {
  const Checkpoint c = read_checkpoint(path);
  if (c.model_kind != "segmenter") {
    throw ValidationError(path.string() + " holds a " + c.model_kind + " checkpoint, expected segmenter");
  }
  SegModel<float> model(seg_config_from_json(c.config));
  take_params(c, model.params(), path.string());
  model.epoch = static_cast<int>(c.step);
  take_adam(c, model.optimizer, model.params());
  return model;
}

void save_cascade_spec(const std::filesystem::path& path, const CascadeSpec& spec) {
  json j;
  j["stages"] = json::array();
  for (const auto& s : spec.stages) {
    j["stages"].push_back({{"checkpoint", s.checkpoint},
                           {"resolution", s.resolution},
                           {"parameterization", to_string(s.parameterization)},
                           {"num_steps", s.num_steps},
                           {"guidance_weight", s.guidance_weight},
                           {"cond_aug_level", s.cond_aug_level}});
  }
  const std::string text = j.dump(2) + "\n";
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

CascadeSpec load_cascade_spec(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("missing cascade spec: " + path.string());
  CascadeSpec spec;
  try {
    const json j = json::parse(in);
    for (const auto& s : j.at("stages")) {
      CascadeStageSpec st;
      st.checkpoint = s.at("checkpoint").get<std::string>();
      st.resolution = s.at("resolution").get<int>();
      st.parameterization = parse_parameterization(s.at("parameterization").get<std::string>());
      st.num_steps = s.value("num_steps", 64);
      st.guidance_weight = s.value("guidance_weight", 1.0);
      st.cond_aug_level = s.value("cond_aug_level", 0.1);
      spec.stages.push_back(st);
    }
  } catch (const json::exception& e) {
    throw ValidationError("malformed cascade spec " + path.string() + ": " + e.what());
  }
  if (spec.stages.empty()) throw ValidationError("cascade spec " + path.string() + " has no stages");
  return spec;
}

LoadedCascade load_cascade(const std::filesystem::path& spec_path) {
  const CascadeSpec spec = load_cascade_spec(spec_path);
  LoadedCascade out;
  out.models.reserve(spec.stages.size());
  for (std::size_t i = 0; i < spec.stages.size(); ++i) {
    const auto& st = spec.stages[i];
    auto model = load_denoiser(spec_path.parent_path() / st.checkpoint);
    if (model.config().resolution != st.resolution) {
      throw ValidationError("cascade stage " + std::to_string(i) + " declares resolution " +
                            std::to_string(st.resolution) + " but its checkpoint has " +
                            std::to_string(model.config().resolution));
    }
    if (model.parameterization() != st.parameterization) {
      throw ValidationError("cascade stage " + std::to_string(i) + " parameterization mismatch");
    }
    out.models.push_back(std::move(model));
  }
  for (std::size_t i = 0; i < spec.stages.size(); ++i) {
    const auto& st = spec.stages[i];
    out.stages.push_back({&out.models[i], st.num_steps, st.guidance_weight, st.cond_aug_level});
  }
  validate_stages(std::span<const CascadeStage<Denoiser<float>>>(out.stages));
  return out;
}

}  // namespace maskdiff
