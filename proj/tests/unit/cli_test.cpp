#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <sys/wait.h>

#include <json.hpp>

#include "neuronscope/activation_store.hpp"
#include "support/oracles.hpp"

namespace fs = std::filesystem;

namespace nscope {
namespace {

struct RunResult {
  int status = -1;
  std::string out;
};

// Runs the CLI with stderr folded into stdout.
RunResult run(const std::string& args) {
  const std::string cmd = std::string(NSCOPE_CLI_PATH) + " " + args + " 2>&1";
  RunResult r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  char buf[4096];
  while (const auto n = std::fread(buf, 1, sizeof(buf), pipe)) r.out.append(buf, n);
  const int raw = pclose(pipe);
  r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

fs::path only_file(const fs::path& dir, const std::string& suffix) {
  fs::path found;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().string().ends_with(suffix)) {
      EXPECT_TRUE(found.empty()) << "several " << suffix << " files";
      found = e.path();
    }
  return found;
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("nscope_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  fs::path dir_;
};

TEST_F(Cli, UnknownFlagPrintsUsage) {
  const auto r = run("ap --no-such-flag x --out-dir " + path("o"));
  EXPECT_NE(r.status, 0);
  EXPECT_NE(r.out.find("Usage"), std::string::npos) << r.out;
}

TEST_F(Cli, UnknownSubcommandFails) { EXPECT_NE(run("frobnicate").status, 0); }

TEST_F(Cli, HelpListsSubcommands) {
  const auto r = run("--help");
  EXPECT_EQ(r.status, 0);
  for (const char* sub : {"corpus-build", "probe", "ap", "expertise", "gamma-search", "layer-dist", "hist",
                          "expert-sets", "neighbors", "condition", "verify-formats"})
    EXPECT_NE(r.out.find(sub), std::string::npos) << sub;
}

TEST_F(Cli, ApMatchesOracleOnFixture) {
  ActivationMatrix m;
  m.concept_id = "fixture%1:00:00";
  m.catalog = UnitCatalog(2, 1);
  std::mt19937_64 rng(3);
  for (int r = 0; r < 40; ++r) m.labels.push_back(r % 3 == 0 ? 1 : 0);
  m.responses.resize(40 * m.catalog.total_units());
  // Coarse values so that ties occur.
  for (auto& v : m.responses) v = static_cast<float>(rng() % 7) * 0.5f;
  write_activations_file(m, path("fixture.nsac"));

  const auto ok = run("ap " + path("fixture.nsac") + " --out-dir " + path("ap"));
  ASSERT_EQ(ok.status, 0) << ok.out;

  const auto csv = only_file(path("ap"), ".ap.csv");
  ASSERT_FALSE(csv.empty());
  std::istringstream lines(slurp(csv));
  std::string line;
  std::getline(lines, line);
  EXPECT_EQ(line, "block,kind,channel,ap");
  for (std::uint64_t col = 0; col < m.cols(); ++col) {
    ASSERT_TRUE(std::getline(lines, line));
    const auto unit = m.catalog.unflatten(col);
    const auto prefix = "0," + std::string(to_string(unit.kind)) + "," + std::to_string(unit.channel) + ",";
    ASSERT_EQ(line.rfind(prefix, 0), 0u) << line;
    std::vector<double> scores;
    for (std::size_t row = 0; row < m.rows(); ++row) scores.push_back(m.at(row, col));
    const double expected = testing::brute_force_ap(scores, m.labels);
    EXPECT_NEAR(std::stod(line.substr(prefix.size())), expected, 1e-12) << line;
  }
  EXPECT_FALSE(std::getline(lines, line));

  const auto manifest = nlohmann::json::parse(slurp(fs::path(path("ap")) / "manifest.json"));
  EXPECT_EQ(manifest["command"], "ap");
  EXPECT_TRUE(manifest.contains("config_hash"));

  const auto verify = run("verify-formats " + path("fixture.nsac") + " " + csv.string());
  EXPECT_EQ(verify.status, 0) << verify.out;
}

TEST_F(Cli, VerifyFormatsFlagsDamage) {
  ActivationMatrix m;
  m.concept_id = "c";
  m.catalog = UnitCatalog(1, 1);
  m.labels = {1, 0, 1};
  m.responses.assign(3 * 9, 0.25f);
  write_activations_file(m, path("good.nsac"));
  auto bytes = slurp(path("good.nsac"));
  bytes[bytes.size() / 2] ^= 0x5a;
  std::ofstream(path("bad.nsac"), std::ios::binary) << bytes;

  EXPECT_EQ(run("verify-formats " + path("good.nsac")).status, 0);
  const auto r = run("verify-formats " + path("good.nsac") + " " + path("bad.nsac"));
  EXPECT_EQ(r.status, 3) << r.out;
  EXPECT_NE(r.out.find("bad.nsac"), std::string::npos);
}

TEST_F(Cli, MissingInputIsBadInput) {
  const auto r = run("ap " + path("absent.nsac") + " --out-dir " + path("o"));
  EXPECT_EQ(r.status, 2) << r.out;
  EXPECT_NE(r.out.find("\"error\""), std::string::npos);
}

// Tiny end-to-end pipeline: train, probe, AP, then compare K=0 conditioning
// with plain generation.
TEST_F(Cli, ConditionWithZeroExpertsEqualsGenerate) {
  auto r = run("train-toy --out-dir " + path("m") +
               " --dim 8 --blocks 1 --heads 2 --steps 5 --batch 4 --sentences 12 --max-per-side 20");
  ASSERT_EQ(r.status, 0) << r.out;
  for (const char* f : {"model.nsck", "vocab.txt", "corpus.jsonl", "loss.csv", "manifest.json"})
    EXPECT_TRUE(fs::exists(fs::path(path("m")) / f)) << f;
  r = run("probe --model " + path("m/model.nsck") + " --vocab " + path("m/vocab.txt") + " --corpus " +
          path("m/corpus.jsonl") + " --out-dir " + path("act") + " --concept toy:birds");
  ASSERT_EQ(r.status, 0) << r.out;
  const auto nsac = only_file(path("act"), ".nsac");
  r = run("ap " + nsac.string() + " --out-dir " + path("ap"));
  ASSERT_EQ(r.status, 0) << r.out;
  const auto csv = only_file(path("ap"), ".ap.csv");

  const std::string common = " --model " + path("m/model.nsck") + " --vocab " + path("m/vocab.txt") +
                             " --context the --seed 3 --seeds 2 --max-new 8";
  r = run("condition" + common + " --ap-table " + csv.string() + " --activations " + nsac.string() +
          " --k 0 --k 4 --toy-topic birds --out-dir " + path("c"));
  ASSERT_EQ(r.status, 0) << r.out;
  r = run("generate" + common + " --out-dir " + path("g"));
  ASSERT_EQ(r.status, 0) << r.out;
  for (int seed : {3, 4}) {
    const auto name = "gen_k0_s" + std::to_string(seed) + ".txt";
    EXPECT_EQ(slurp(fs::path(path("c")) / name), slurp(fs::path(path("g")) / name)) << name;
    const auto trace = nlohmann::json::parse(
        slurp(fs::path(path("c")) / ("gen_k4_s" + std::to_string(seed) + ".json")));
    EXPECT_EQ(trace["K"], 4);
  }
  const auto sweep = slurp(fs::path(path("c")) / "sweep.csv");
  EXPECT_EQ(sweep.rfind("K,percent_forced,seed,concept_frequency,text_path\n", 0), 0u);
  EXPECT_TRUE(fs::exists(fs::path(path("c")) / "manifest.json"));

  r = run("verify-formats " + path("m/model.nsck") + " " + path("m/corpus.jsonl") + " " + nsac.string());
  EXPECT_EQ(r.status, 0) << r.out;
}

}  // namespace
}  // namespace nscope
