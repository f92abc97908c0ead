#include "maskdiff/genservice.hpp"

#include <openssl/evp.h>

#include <chrono>
#include <fstream>
#include <random>

#include "httplib.h"
#include "maskdiff/datapipe.hpp"
#include "maskdiff/hash.hpp"
#include "maskdiff/png_io.hpp"
#include "maskdiff/sampler.hpp"

namespace maskdiff {

using nlohmann::json;
namespace fs = std::filesystem;

std::string to_string(JobStatus s) {
  switch (s) {
    case JobStatus::queued: return "queued";
    case JobStatus::running: return "running";
    case JobStatus::done: return "done";
    case JobStatus::failed: return "failed";
  }
  return "queued";
}

std::string make_ulid() {
  static const char* alphabet = "0123456789ABCDEFGHJKMNPQRSTVWXYZ";
  static std::mutex mu;
  static std::mt19937_64 gen{std::random_device{}()};
  const auto ms = static_cast<std::uint64_t>(
      std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::system_clock::now().time_since_epoch())
          .count());
  std::uint64_t hi, lo;
  {
    std::lock_guard lock(mu);
    hi = gen() & 0xFFFF;  // top 16 of the 80 random bits
    lo = gen();
  }
  std::string out(26, '0');
  // 10 chars of time (50 bits, top 2 always zero for 48-bit time)
  std::uint64_t t = ms & ((1ULL << 48) - 1);
  for (int i = 9; i >= 0; --i) {
    out[i] = alphabet[t & 31];
    t >>= 5;
  }
  // 16 chars of randomness (80 bits) from hi:lo
  for (int i = 25; i >= 10; --i) {
    out[i] = alphabet[lo & 31];
    lo = (lo >> 5) | ((hi & 31) << 59);
    hi >>= 5;
  }
  return out;
}

std::string result_key(const std::string& model_id, std::span<const std::uint8_t> mask_png, std::uint64_t seed,
                       double guidance) {
  std::string buf = model_id;
  buf.push_back('\0');
  buf.append(reinterpret_cast<const char*>(mask_png.data()), mask_png.size());
  char tail[64];
  std::snprintf(tail, sizeof tail, "|%llu|%.17g", static_cast<unsigned long long>(seed), guidance);
  buf += tail;
  return sha256_hex(buf);
}

namespace {

std::optional<std::vector<std::uint8_t>> decode_base64(const std::string& text) {
  std::string s;
  for (char c : text)
    if (!std::isspace(static_cast<unsigned char>(c))) s.push_back(c);
  if (s.empty() || s.size() % 4 != 0) return std::nullopt;
  std::vector<std::uint8_t> out(s.size() / 4 * 3);
  const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(s.data()), static_cast<int>(s.size()));
  if (n < 0) return std::nullopt;
  std::size_t pad = 0;
  if (s.back() == '=') ++pad;
  if (s.size() > 1 && s[s.size() - 2] == '=') ++pad;
  out.resize(static_cast<std::size_t>(n) - pad);
  return out;
}

GenerationService::Response error_response(int status, const std::string& msg) {
  return {status, json{{"error", msg}}.dump(), "application/json"};
}

}  // namespace

GenerationService::GenerationService(ServiceOptions opts) : opts_(std::move(opts)) {
  if (opts_.queue_bound < 1) throw ValidationError("queue bound must be >= 1");
  if (opts_.workers < 1) throw ValidationError("worker count must be >= 1");
  const fs::path real = opts_.run_dir / "manifests" / "real.json";
  if (fs::exists(real)) class_names_ = load_manifest(real).class_names;
}

GenerationService::~GenerationService() { stop(); }

std::map<std::string, fs::path> GenerationService::discover_models() const {
  std::map<std::string, fs::path> out;
  const fs::path dir = opts_.run_dir / "checkpoints";
  if (!fs::is_directory(dir)) return out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.path().extension() == ".json") out[entry.path().stem().string()] = entry.path();
  }
  return out;
}

const LoadedCascade& GenerationService::model(const std::string& id) {
  std::lock_guard lock(model_mu_);
  auto it = models_.find(id);
  if (it != models_.end()) return *it->second;
  const auto known = discover_models();
  auto spec = known.find(id);
  if (spec == known.end()) throw ValidationError("unknown model: " + id);
  auto loaded = std::make_unique<LoadedCascade>(load_cascade(spec->second));
  return *models_.emplace(id, std::move(loaded)).first->second;
}

GenerationService::Response GenerationService::generate(const std::string& body) {
  json req;
  try {
    req = json::parse(body);
  } catch (const json::exception&) {
    return error_response(400, "request body is not valid JSON");
  }
  if (!req.is_object() || !req.contains("model_id") || !req["model_id"].is_string()) {
    return error_response(400, "model_id (string) is required");
  }
  if (!req.contains("mask_png_base64") || !req["mask_png_base64"].is_string()) {
    return error_response(400, "mask_png_base64 (string) is required");
  }
  GenerationJob job;
  job.model_id = req["model_id"].get<std::string>();
  if (!discover_models().count(job.model_id)) return error_response(404, "unknown model: " + job.model_id);
  const LoadedCascade* cascade = nullptr;
  try {
    cascade = &model(job.model_id);
  } catch (const std::exception& e) {
    return error_response(500, "model " + job.model_id + " failed to load: " + e.what());
  }
  auto bytes = decode_base64(req["mask_png_base64"].get<std::string>());
  if (!bytes || !has_png_signature(*bytes)) return error_response(400, "malformed mask: not a base64-encoded PNG");
  try {
    job.mask = decode_png_mask(*bytes);
  } catch (const std::exception& e) {
    return error_response(400, std::string("malformed mask: ") + e.what());
  }
  job.mask_png = std::move(*bytes);
  const int classes = cascade->num_classes();
  const int bad = job.mask.max_label();
  if (bad >= classes) {
    return error_response(400, "mask contains class index " + std::to_string(bad) + " but model " + job.model_id +
                                   " has " + std::to_string(classes) + " classes");
  }
  if (job.mask.height != job.mask.width || job.mask.height < cascade->resolution()) {
    return error_response(400, "mask must be square and at least " + std::to_string(cascade->resolution()) + " px");
  }
  if (req.contains("seed")) {
    if (!req["seed"].is_number_integer() || req["seed"].get<long long>() < 0) {
      return error_response(400, "seed must be a non-negative integer");
    }
    job.seed = req["seed"].get<std::uint64_t>();
  }
  if (req.contains("guidance") && !req["guidance"].is_null()) {
    if (!req["guidance"].is_number() || req["guidance"].get<double>() < 0) {
      return error_response(400, "guidance must be a number >= 0");
    }
    job.guidance = req["guidance"].get<double>();
  }
  if (req.contains("stages") && !req["stages"].is_null()) {
    const int n = static_cast<int>(cascade->stages.size());
    if (!req["stages"].is_number_integer() || req["stages"].get<int>() < 1 || req["stages"].get<int>() > n) {
      return error_response(400, "stages must be an integer in [1, " + std::to_string(n) + "]");
    }
    job.stages = req["stages"].get<int>();
  }
  std::lock_guard lock(mu_);
  std::size_t queued = 0;
  for (const auto& id : queue_)
    if (jobs_.at(id).status == JobStatus::queued) ++queued;
  if (queued >= opts_.queue_bound) {
    return error_response(429, "queue full (" + std::to_string(opts_.queue_bound) + " jobs waiting)");
  }
  job.id = make_ulid();
  while (jobs_.count(job.id)) job.id = make_ulid();
  const std::string id = job.id;
  jobs_.emplace(id, std::move(job));
  queue_.push_back(id);
  cv_.notify_one();
  return {202, json{{"job_id", id}, {"status", "queued"}}.dump(), "application/json"};
}

GenerationService::Response GenerationService::job_status(const std::string& id) {
  std::lock_guard lock(mu_);
  auto it = jobs_.find(id);
  if (it == jobs_.end()) return error_response(404, "unknown job: " + id);
  const auto& j = it->second;
  json out{{"job_id", j.id}, {"status", to_string(j.status)}, {"model_id", j.model_id}, {"seed", j.seed}};
  if (j.guidance) out["guidance"] = *j.guidance;
  if (j.stages) out["stages"] = *j.stages;
  if (j.status == JobStatus::done) out["result"] = "/v1/jobs/" + j.id + "/result";
  if (j.status == JobStatus::failed) out["error"] = j.error;
  return {200, out.dump(), "application/json"};
}

GenerationService::Response GenerationService::job_result(const std::string& id) {
  std::string ref;
  {
    std::lock_guard lock(mu_);
    auto it = jobs_.find(id);
    if (it == jobs_.end()) return error_response(404, "unknown job: " + id);
    if (it->second.status != JobStatus::done) {
      return error_response(409, "job " + id + " is " + to_string(it->second.status));
    }
    ref = it->second.result_ref;
  }
  const auto bytes = read_file(opts_.run_dir / "generated" / ref);
  return {200, std::string(bytes.begin(), bytes.end()), "image/png"};
}

GenerationService::Response GenerationService::models() {
  json list = json::array();
  for (const auto& [id, path] : discover_models()) {
    json entry{{"id", id}, {"class_names", class_names_}};
    try {
      const auto spec = load_cascade_spec(path);
      json stages = json::array();
      for (const auto& s : spec.stages) {
        stages.push_back({{"resolution", s.resolution},
                          {"parameterization", to_string(s.parameterization)},
                          {"num_steps", s.num_steps},
                          {"guidance_weight", s.guidance_weight}});
      }
      entry["resolution"] = spec.stages.back().resolution;
      entry["stages"] = stages;
      const auto first = read_checkpoint(path.parent_path() / spec.stages.front().checkpoint);
      entry["num_classes"] = first.config.at("num_classes");
      if (class_names_.empty()) {
        json names = json::array();
        for (int c = 0; c < first.config.at("num_classes").get<int>(); ++c) names.push_back("class" + std::to_string(c));
        entry["class_names"] = names;
      }
    } catch (const std::exception& e) {
      entry["error"] = e.what();
    }
    list.push_back(entry);
  }
  return {200, json{{"models", list}}.dump(), "application/json"};
}

void GenerationService::start_workers() {
  std::lock_guard lock(mu_);
  stopping_ = false;
  while (static_cast<int>(workers_.size()) < opts_.workers) workers_.emplace_back([this] { worker_loop(); });
}

void GenerationService::stop() {
  {
    std::lock_guard lock(mu_);
    stopping_ = true;
  }
  cv_.notify_all();
  if (server_) server_->stop();
  for (auto& t : workers_)
    if (t.joinable()) t.join();
  workers_.clear();
}

bool GenerationService::wait_for(const std::string& id, std::chrono::milliseconds timeout) {
  std::unique_lock lock(mu_);
  return done_cv_.wait_for(lock, timeout, [&] {
    auto it = jobs_.find(id);
    return it == jobs_.end() || it->second.status == JobStatus::done || it->second.status == JobStatus::failed;
  });
}

void GenerationService::worker_loop() {
  for (;;) {
    std::string id;
    {
      std::unique_lock lock(mu_);
      cv_.wait(lock, [&] { return stopping_ || !queue_.empty(); });
      if (stopping_) return;
      id = queue_.front();
      queue_.pop_front();
      jobs_.at(id).status = JobStatus::running;
    }
    run_job(id);
    done_cv_.notify_all();
  }
}

void GenerationService::run_job(const std::string& id) {
  GenerationJob job;
  {
    std::lock_guard lock(mu_);
    job = jobs_.at(id);
  }
  try {
    const LoadedCascade& cascade = model(job.model_id);
    std::vector<CascadeStage<Denoiser<float>>> stages = cascade.stages;
    if (job.stages) stages.resize(static_cast<std::size_t>(*job.stages));
    if (job.guidance)
      for (auto& s : stages) s.guidance_weight = *job.guidance;
    const double w = stages.front().guidance_weight;
    std::string model_key = job.model_id;
    if (job.stages) model_key += "@" + std::to_string(*job.stages);
    const std::string name = result_key(model_key, job.mask_png, job.seed, w) + ".png";
    const fs::path out = opts_.run_dir / "generated" / name;
    if (!fs::exists(out)) {
      const int scalar_dim = cascade.models.front().config().scalar_dim;
      const LabelMap masks[1] = {job.mask};
      const auto cond = mask_bundle<float>(masks, cascade.num_classes(), scalar_dim);
      const Tensor<float> image = cascade_sample<float>(std::span<const CascadeStage<Denoiser<float>>>(stages),
                                                        Schedule{}, cond, job.seed);
      const auto png = encode_png_rgb(image);
      const fs::path tmp = out.string() + "." + id + ".tmp";
      write_file(tmp, png);
      fs::rename(tmp, out);
    }
    std::lock_guard lock(mu_);
    auto& j = jobs_.at(id);
    j.result_ref = name;
    j.status = JobStatus::done;
  } catch (const std::exception& e) {
    std::lock_guard lock(mu_);
    auto& j = jobs_.at(id);
    j.error = e.what();
    j.status = JobStatus::failed;
  }
}

void GenerationService::register_routes(httplib::Server& server) {
  auto reply = [](httplib::Response& res, const Response& r) {
    res.status = r.status;
    res.set_content(r.body, r.content_type);
  };
  server.Post("/v1/generate", [this, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, generate(req.body));
  });
  server.Get(R"(/v1/jobs/([^/]+)/result)", [this, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, job_result(req.matches[1]));
  });
  server.Get(R"(/v1/jobs/([^/]+))", [this, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, job_status(req.matches[1]));
  });
  server.Get("/v1/models", [this, reply](const httplib::Request&, httplib::Response& res) { reply(res, models()); });
}

bool GenerationService::listen() {
  server_ = std::make_unique<httplib::Server>();
  register_routes(*server_);
  start_workers();
  return server_->listen(opts_.host, opts_.port);
}

}  // namespace maskdiff
