#include <gtest/gtest.h>
#include <openssl/evp.h>

#include <regex>
#include <thread>

#include "checks.hpp"
#include "httplib.h"
#include "json.hpp"
#include "maskdiff/genservice.hpp"
#include "maskdiff/png_io.hpp"
#include "temp_dir.hpp"

using namespace maskdiff;
using nlohmann::json;

namespace {

std::string base64(const std::vector<std::uint8_t>& bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(), static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

// A run directory holding one two-stage cascade "dxi" (8 -> 16 px, 4 classes).
class ServiceTest : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto ck = dir_ / "checkpoints";
    std::filesystem::create_directories(ck);
    DenoiserConfig base;
    base.resolution = 8;
    base.depth = 1;
    base.base_width = 4;
    base.num_classes = 4;
    auto sr = base;
    sr.resolution = 16;
    sr.parameterization = Parameterization::v;
    sr.lowres_input = true;
    save_denoiser(ck / "s0.ckpt", oracle_weights(base));
    save_denoiser(ck / "s1.ckpt", oracle_weights(sr));
    CascadeSpec spec;
    spec.stages = {{"s0.ckpt", 8, Parameterization::eps, 3, 1.0, 0.1}, {"s1.ckpt", 16, Parameterization::v, 2, 1.0, 0.1}};
    save_cascade_spec(ck / "dxi.json", spec);
    opts_.run_dir = dir_.path();
  }

  static Denoiser<float> oracle_weights(const DenoiserConfig& cfg) {
    Denoiser<float> m(cfg);
    Rng rng(cfg.resolution);
    for (auto& [name, v] : m.params().entries())
      for (auto& x : v->value.values()) x += static_cast<float>(rng.uniform(-0.05, 0.05));
    return m;
  }

  std::string request(const LabelMap& mask, std::uint64_t seed = 1, const std::string& model = "dxi") {
    return json{{"model_id", model}, {"mask_png_base64", base64(encode_png_mask(mask))}, {"seed", seed}}.dump();
  }

  LabelMap valid_mask() {
    Rng rng(4);
    return oracle::random_blob_mask(16, 4, rng);
  }

  oracle::TempDir dir_{"maskdiff-service"};
  ServiceOptions opts_;
};

const std::regex kUlid("^[0-9A-Z]{26}$");

}  // namespace

TEST(Ulid, FormatAndUniqueness) {
  std::set<std::string> seen;
  for (int i = 0; i < 200; ++i) {
    const auto id = make_ulid();
    EXPECT_TRUE(std::regex_match(id, kUlid)) << id;
    for (char c : std::string("ILOU")) EXPECT_EQ(id.find(c), std::string::npos);
    seen.insert(id);
  }
  EXPECT_EQ(seen.size(), 200u);
}

TEST(ResultKey, DependsOnEveryInput) {
  const std::vector<std::uint8_t> a{1, 2, 3}, b{1, 2, 4};
  const auto k = result_key("dxi", a, 1, 1.0);
  EXPECT_EQ(k, result_key("dxi", a, 1, 1.0));
  EXPECT_NE(k, result_key("dphi", a, 1, 1.0));
  EXPECT_NE(k, result_key("dxi", b, 1, 1.0));
  EXPECT_NE(k, result_key("dxi", a, 2, 1.0));
  EXPECT_NE(k, result_key("dxi", a, 1, 2.0));
}

TEST_F(ServiceTest, AcceptsValidMask) {
  GenerationService svc(opts_);
  const auto r = svc.generate(request(valid_mask()));
  EXPECT_EQ(r.status, 202);
  const auto j = json::parse(r.body);
  EXPECT_TRUE(std::regex_match(j["job_id"].get<std::string>(), kUlid));
  EXPECT_EQ(j["status"], "queued");
}

TEST_F(ServiceTest, RejectsOutOfRangeClass) {
  GenerationService svc(opts_);
  auto mask = valid_mask();
  mask.at(3, 3) = 9;
  const auto r = svc.generate(request(mask));
  EXPECT_EQ(r.status, 400);
  EXPECT_NE(r.body.find("class index 9"), std::string::npos) << r.body;
}

TEST_F(ServiceTest, RejectsMalformedRequests) {
  GenerationService svc(opts_);
  EXPECT_EQ(svc.generate("{oops").status, 400);
  EXPECT_EQ(svc.generate(json{{"mask_png_base64", "x"}}.dump()).status, 400);
  EXPECT_EQ(svc.generate(json{{"model_id", "dxi"}, {"mask_png_base64", "!!!"}}.dump()).status, 400);
  EXPECT_EQ(svc.generate(request(LabelMap(8, 8))).status, 400);   // smaller than the cascade output
  EXPECT_EQ(svc.generate(request(LabelMap(16, 20))).status, 400);  // not square
  auto j = json::parse(request(valid_mask()));
  j["seed"] = -3;
  EXPECT_EQ(svc.generate(j.dump()).status, 400);
  j["seed"] = 1;
  j["stages"] = 3;
  EXPECT_EQ(svc.generate(j.dump()).status, 400);
  j["stages"] = 1;
  j["guidance"] = -1;
  EXPECT_EQ(svc.generate(j.dump()).status, 400);
}

TEST_F(ServiceTest, UnknownModelAndJob) {
  GenerationService svc(opts_);
  EXPECT_EQ(svc.generate(request(valid_mask(), 1, "nope")).status, 404);
  EXPECT_EQ(svc.job_status("01ARZ3NDEKTSV4RRFFQ69G5FAV").status, 404);
  EXPECT_EQ(svc.job_result("01ARZ3NDEKTSV4RRFFQ69G5FAV").status, 404);
}

TEST_F(ServiceTest, QueueBoundReturns429) {
  GenerationService svc(opts_);  // workers not started, so nothing drains
  for (int i = 0; i < 16; ++i) ASSERT_EQ(svc.generate(request(valid_mask(), i)).status, 202) << i;
  const auto r = svc.generate(request(valid_mask(), 99));
  EXPECT_EQ(r.status, 429);
}

TEST_F(ServiceTest, ResultNotReadyIs409) {
  GenerationService svc(opts_);
  const auto id = json::parse(svc.generate(request(valid_mask())).body)["job_id"].get<std::string>();
  EXPECT_EQ(svc.job_result(id).status, 409);
  EXPECT_EQ(json::parse(svc.job_status(id).body)["status"], "queued");
}

TEST_F(ServiceTest, CompletedJobReturnsPngAndIsDeterministic) {
  GenerationService svc(opts_);
  svc.start_workers();
  const auto a = json::parse(svc.generate(request(valid_mask(), 5)).body)["job_id"].get<std::string>();
  ASSERT_TRUE(svc.wait_for(a, std::chrono::seconds(60)));
  const auto st = json::parse(svc.job_status(a).body);
  EXPECT_EQ(st["status"], "done");
  EXPECT_EQ(st["result"], "/v1/jobs/" + a + "/result");
  const auto ra = svc.job_result(a);
  ASSERT_EQ(ra.status, 200);
  EXPECT_EQ(ra.content_type, "image/png");
  const std::vector<std::uint8_t> bytes(ra.body.begin(), ra.body.end());
  EXPECT_TRUE(has_png_signature(bytes));
  EXPECT_EQ(decode_png_rgb(bytes).h(), 16);

  // a fresh service (no shared cache in memory) must reproduce the bytes
  std::filesystem::remove_all(dir_ / "generated");
  GenerationService again(opts_);
  again.start_workers();
  const auto b = json::parse(again.generate(request(valid_mask(), 5)).body)["job_id"].get<std::string>();
  ASSERT_TRUE(again.wait_for(b, std::chrono::seconds(60)));
  EXPECT_EQ(again.job_result(b).body, ra.body);
  const auto c = json::parse(again.generate(request(valid_mask(), 6)).body)["job_id"].get<std::string>();
  ASSERT_TRUE(again.wait_for(c, std::chrono::seconds(60)));
  EXPECT_NE(again.job_result(c).body, ra.body);
}

TEST_F(ServiceTest, EmptyMaskIsValidConditioning) {
  GenerationService svc(opts_);
  svc.start_workers();
  const auto r = svc.generate(request(LabelMap(16, 16)));
  ASSERT_EQ(r.status, 202);
  const auto id = json::parse(r.body)["job_id"].get<std::string>();
  ASSERT_TRUE(svc.wait_for(id, std::chrono::seconds(60)));
  EXPECT_EQ(json::parse(svc.job_status(id).body)["status"], "done");
}

TEST_F(ServiceTest, ModelListing) {
  GenerationService svc(opts_);
  const auto j = json::parse(svc.models().body);
  ASSERT_EQ(j["models"].size(), 1u);
  const auto& m = j["models"][0];
  EXPECT_EQ(m["id"], "dxi");
  EXPECT_EQ(m["resolution"], 16);
  EXPECT_EQ(m["num_classes"], 4);
  EXPECT_EQ(m["stages"].size(), 2u);
  EXPECT_EQ(m["class_names"].size(), 4u);
}

TEST_F(ServiceTest, HttpRoundTrip) {
  GenerationService svc(opts_);
  httplib::Server server;
  svc.register_routes(server);
  const int port = server.bind_to_any_port("127.0.0.1");
  ASSERT_GT(port, 0);
  std::thread th([&] { server.listen_after_bind(); });
  svc.start_workers();
  httplib::Client cli("127.0.0.1", port);
  auto post = cli.Post("/v1/generate", request(valid_mask(), 2), "application/json");
  ASSERT_TRUE(post);
  EXPECT_EQ(post->status, 202);
  const auto id = json::parse(post->body)["job_id"].get<std::string>();
  ASSERT_TRUE(svc.wait_for(id, std::chrono::seconds(60)));
  auto status = cli.Get("/v1/jobs/" + id);
  ASSERT_TRUE(status);
  EXPECT_EQ(json::parse(status->body)["status"], "done");
  auto result = cli.Get("/v1/jobs/" + id + "/result");
  ASSERT_TRUE(result);
  EXPECT_EQ(result->status, 200);
  EXPECT_EQ(result->get_header_value("Content-Type"), "image/png");
  EXPECT_EQ(result->body.substr(1, 3), "PNG");
  auto models = cli.Get("/v1/models");
  ASSERT_TRUE(models);
  EXPECT_EQ(models->status, 200);
  auto missing = cli.Get("/v1/jobs/NOPE");
  ASSERT_TRUE(missing);
  EXPECT_EQ(missing->status, 404);
  server.stop();
  th.join();
  svc.stop();
}
