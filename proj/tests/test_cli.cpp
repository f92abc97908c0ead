#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdio>
#include <fstream>

#include "json.hpp"
#include "maskdiff/png_io.hpp"
#include "temp_dir.hpp"
#include "tiny_config.hpp"

using namespace maskdiff;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string output;
};

// Runs the CLI with stderr folded into the captured output.
Result cli(const std::string& args) {
  const std::string cmd = std::string(MASKDIFF_CLI) + " " + args + " 2>&1";
  Result r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof buf, pipe)) > 0) r.output.append(buf, n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string manifest_hash(const std::string& out) {
  const auto pos = out.find("sha256 ");
  return pos == std::string::npos ? "" : out.substr(pos + 7, 64);
}

}  // namespace

TEST(Cli, NoSubcommandIsUsageError) {
  const auto r = cli("");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("Usage"), std::string::npos) << r.output;
}

TEST(Cli, UnknownFlagIsUsageError) {
  EXPECT_EQ(cli("report --frobnicate").code, 1);
  EXPECT_EQ(cli("toygen --n -4 --out /tmp/x").code, 1);
}

TEST(Cli, MissingConfigNamesTheFlag) {
  oracle::TempDir dir("maskdiff-cli");
  const auto r = cli("pretrain --out " + (dir / "run").string());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("--config"), std::string::npos) << r.output;
}

TEST(Cli, BadProfileRejected) {
  oracle::TempDir dir("maskdiff-cli");
  const auto r = cli("pretrain --profile laptop --out " + (dir / "run").string());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("laptop"), std::string::npos) << r.output;
}

TEST(Cli, ToygenIsDeterministic) {
  oracle::TempDir dir("maskdiff-cli");
  const auto a = cli("toygen --n 6 --resolution 16 --seed 9 --out " + (dir / "a").string());
  const auto b = cli("toygen --n 6 --resolution 16 --seed 9 --out " + (dir / "b").string());
  const auto c = cli("toygen --n 6 --resolution 16 --seed 10 --out " + (dir / "c").string());
  ASSERT_EQ(a.code, 0) << a.output;
  ASSERT_EQ(manifest_hash(a.output).size(), 64u);
  EXPECT_EQ(manifest_hash(a.output), manifest_hash(b.output));
  EXPECT_NE(manifest_hash(a.output), manifest_hash(c.output));
}

TEST(Cli, ReportOnRunWithoutVariantsFails) {
  oracle::TempDir dir("maskdiff-cli");
  const auto r = cli("report --out " + (dir / "nothing").string());
  EXPECT_NE(r.code, 0);
}

TEST(Cli, TinyRunReportAndSample) {
  oracle::TempDir dir("maskdiff-cli");
  const fs::path cfg = dir / "config.json";
  std::ofstream(cfg) << to_json(oracle::tiny_config()).dump(2);
  const std::string out = (dir / "run").string();

  const auto run = cli("run --config " + cfg.string() + " --out " + out);
  ASSERT_EQ(run.code, 0) << run.output;
  EXPECT_NE(run.output.find("(5)"), std::string::npos) << run.output;

  const auto csv = cli("report --csv --out " + out);
  ASSERT_EQ(csv.code, 0) << csv.output;
  std::ifstream in(fs::path(out) / "reports" / "table.csv");
  std::ostringstream file;
  file << in.rdbuf();
  EXPECT_EQ(csv.output, file.str());

  const auto png = (dir / "s.png").string();
  const auto s = cli("sample --cascade dxi --out " + out + " --output " + png);
  ASSERT_EQ(s.code, 0) << s.output;
  EXPECT_EQ(read_image(png).w(), 16);

  const auto conflict = cli("report --profile paper --out " + out);
  EXPECT_EQ(conflict.code, 0);  // report ignores the profile
  const auto p = cli("pretrain --profile paper --out " + out);
  EXPECT_EQ(p.code, 1);
  EXPECT_NE(p.output.find("conflicts"), std::string::npos) << p.output;
}
