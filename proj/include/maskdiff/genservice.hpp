#pragma once

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "maskdiff/checkpoint.hpp"

namespace httplib {
class Server;
}

namespace maskdiff {

enum class JobStatus { queued, running, done, failed };
std::string to_string(JobStatus s);

struct GenerationJob {
  std::string id;
  std::string model_id;
  std::vector<std::uint8_t> mask_png;
  LabelMap mask;
  std::uint64_t seed = 0;
  std::optional<double> guidance;  // overrides every stage's weight when set
  std::optional<int> stages;       // run only the first n stages
  JobStatus status = JobStatus::queued;
  std::string result_ref;  // file name under <run_dir>/generated
  std::string error;
};

struct ServiceOptions {
  std::filesystem::path run_dir;
  std::string host = "127.0.0.1";
  int port = 8642;
  std::size_t queue_bound = 16;
  int workers = 1;
};

// 26 characters of Crockford base32: 48-bit millisecond time then 80 random bits.
std::string make_ulid();

// Content address of a generation result.
std::string result_key(const std::string& model_id, std::span<const std::uint8_t> mask_png, std::uint64_t seed,
                       double guidance);

class GenerationService {
 public:
  struct Response {
    int status = 200;
    std::string body;
    std::string content_type = "application/json";
  };

  explicit GenerationService(ServiceOptions opts);
  ~GenerationService();
  GenerationService(const GenerationService&) = delete;
  GenerationService& operator=(const GenerationService&) = delete;

  // Cascade specs found in <run_dir>/checkpoints: id -> spec path.
  [[nodiscard]] std::map<std::string, std::filesystem::path> discover_models() const;

  Response generate(const std::string& body);
  Response job_status(const std::string& id);
  Response job_result(const std::string& id);
  Response models();

  void start_workers();
  void stop();
  // Blocks until the job leaves queued/running or the timeout passes.
  bool wait_for(const std::string& id, std::chrono::milliseconds timeout);

  void register_routes(httplib::Server& server);
  // Serves until stop() is called from another thread or the process exits.
  bool listen();

 private:
  const LoadedCascade& model(const std::string& id);
  void worker_loop();
  void run_job(const std::string& id);

  ServiceOptions opts_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::condition_variable done_cv_;
  std::deque<std::string> queue_;
  std::map<std::string, GenerationJob> jobs_;
  bool stopping_ = false;
  std::vector<std::thread> workers_;

  std::mutex model_mu_;
  std::map<std::string, std::unique_ptr<LoadedCascade>> models_;
  std::vector<std::string> class_names_;

  std::unique_ptr<httplib::Server> server_;
};

}  // namespace maskdiff
