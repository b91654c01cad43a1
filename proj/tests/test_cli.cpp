#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "fixture.hpp"
#include "modex/experiment.hpp"

using namespace modex;
namespace fs = std::filesystem;

namespace {

// One directory per test so parallel ctest processes never share files.
const fs::path& work() {
  static const fs::path dir = [] {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    fs::path p = fs::path(MODEX_TEST_SCRATCH_DIR) / (info ? info->name() : "shared");
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return dir;
}

struct Run {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream f(p);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

Run cli(const std::string& args) {
  const fs::path out = work() / "stdout.txt", err = work() / "stderr.txt";
  const std::string cmd = std::string("\"") + MODEX_CLI_PATH + "\" " + args + " >\"" + out.string() + "\" 2>\"" +
                          err.string() + "\"";
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

std::string p(const fs::path& path) { return "\"" + path.string() + "\""; }

std::vector<std::vector<std::string>> csv_rows(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream is(text);
  for (std::string line; std::getline(is, line);) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ls(line);
    for (std::string c; std::getline(ls, c, ',');) cells.push_back(c);
    rows.push_back(cells);
  }
  return rows;
}

// Model and token files shared by the pipeline tests.
const fs::path& model_dir() {
  static const fs::path dir = [] {
    const fs::path d = work() / "model";
    const auto r = cli("gen-model --out " + p(d) + " --seed 5");
    EXPECT_EQ(r.code, 0) << r.err;
    const auto t = cli("gen-tokens --model " + p(d) + " --out " + p(work() / "tokens.bin") + " --count 384 --seq-len 128 --seed 6");
    EXPECT_EQ(t.code, 0) << t.err;
    return d;
  }();
  return dir;
}

}  // namespace

TEST(Cli, UsageErrors) {
  EXPECT_EQ(cli("").code, exit_config);
  EXPECT_EQ(cli("frobnicate").code, exit_config);
  EXPECT_EQ(cli("--help").code, exit_ok);
  EXPECT_EQ(cli("verify-bounds --n notanumber").code, exit_config);
}

TEST(Cli, GenModelIsDeterministic) {
  ASSERT_EQ(cli("gen-model --out " + p(work() / "g1") + " --seed 11").code, 0);
  ASSERT_EQ(cli("gen-model --out " + p(work() / "g2") + " --seed 11").code, 0);
  EXPECT_EQ(slurp(work() / "g1" / "weights.exq"), slurp(work() / "g2" / "weights.exq"));
  const auto loaded = load_model(work() / "g1");
  EXPECT_EQ(loaded.embedding, random_model(fixture_config(), 0.01, 20.0, 11).embedding);
  std::ofstream(work() / "badcfg.json") << R"({"d_model": 128, "heads": 4})";
  EXPECT_EQ(cli("gen-model --out " + p(work() / "g3") + " --config " + p(work() / "badcfg.json")).code, exit_config);
}

TEST(Cli, QuantizeThenEvalAgree) {
  const auto& dir = model_dir();
  const auto r = cli("quantize --model-path " + p(dir) + " --calib-tokens " + p(work() / "tokens.bin") +
                     " --n-samples 2 --seq-len 128 --r4-expanded-dim 480 --run-id cli --output-path " + p(work() / "q"));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rows = csv_rows(r.out);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0][0], "run_id");
  EXPECT_EQ(rows[1][0], "cli");
  EXPECT_EQ(rows[1][4], "1.25");
  const auto e = cli("eval --model " + p(work() / "q") + " --tokens " + p(work() / "tokens.bin") + " --seq-len 128");
  ASSERT_EQ(e.code, 0) << e.err;
  EXPECT_EQ(std::stod(e.out), std::stod(rows[1][5]));
}

TEST(Cli, QuantizeConfigFileAndErrors) {
  const auto& dir = model_dir();
  nlohmann::json cfg = {{"model_path", dir.string()},
                        {"scheme", "mxfp4"},
                        {"r1", "identity"},
                        {"calib", {{"tokens_path", (work() / "tokens.bin").string()}, {"n_samples", 2}, {"seq_len", 128}}}};
  write_json(work() / "exp.json", cfg);
  const auto ok = cli("quantize --config " + p(work() / "exp.json") + " --report " + p(work() / "rep.csv"));
  ASSERT_EQ(ok.code, 0) << ok.err;
  EXPECT_EQ(csv_rows(slurp(work() / "rep.csv")).size(), 2u);

  cfg["bogus"] = 1;
  write_json(work() / "bad.json", cfg);
  const auto bad = cli("quantize --config " + p(work() / "bad.json"));
  EXPECT_EQ(bad.code, exit_config);
  EXPECT_NE(bad.err.find("bogus"), std::string::npos);

  const auto missing = cli("quantize --model-path " + p(work() / "nowhere") + " --calib-tokens " + p(work() / "tokens.bin"));
  EXPECT_EQ(missing.code, exit_config);
  EXPECT_NE(missing.err.find("load"), std::string::npos);

  const auto small = cli("quantize --model-path " + p(dir) + " --calib-tokens " + p(work() / "tokens.bin") +
                         " --r4-expanded-dim 100 --seq-len 128");
  EXPECT_EQ(small.code, exit_config);
}

TEST(Cli, NumericFailureExitCode) {
  auto m = fixture::model();
  m.layers[1].w_up(0, 0) = std::numeric_limits<double>::infinity();
  save_model(work() / "inf_model", m);
  write_tokens(work() / "few.bin", std::span<const std::uint32_t>(fixture::tokens()).subspan(0, 128));
  const auto r = cli("quantize --model-path " + p(work() / "inf_model") + " --calib-tokens " + p(work() / "few.bin") +
                     " --n-samples 1 --seq-len 64 --r1 identity");
  EXPECT_EQ(r.code, exit_numeric) << r.err;
}

TEST(Cli, VerifyBoundsSquareRatiosAreOne) {
  const auto r = cli("verify-bounds --n 16 --m 16 --d 32 --seeds 5");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rows = csv_rows(r.out);
  ASSERT_EQ(rows.size(), 6u);
  EXPECT_EQ(rows[0].back(), "ratio");
  for (std::size_t i = 1; i < rows.size(); ++i) {
    EXPECT_EQ(rows[i][8], "true");
    EXPECT_EQ(std::stod(rows[i][9]), 1.0);
  }
}

TEST(Cli, VerifyBoundsExpanded) {
  const auto r = cli("verify-bounds --n 32 --m 64 --d 128 --seeds 20 --out " + p(work() / "b.csv"));
  EXPECT_EQ(r.code, 0) << r.err;
  const auto rows = csv_rows(slurp(work() / "b.csv"));
  ASSERT_EQ(rows.size(), 21u);
  for (std::size_t i = 1; i < rows.size(); ++i) EXPECT_EQ(rows[i][8], "true");
  EXPECT_EQ(cli("verify-bounds --n 32 --m 64 --d 128 --seeds 20 --scheme mxfp4").code, 0);
}

TEST(Cli, VerifyBoundsViolationExitCode) {
  // The in-range Δ for MXFP4 ignores saturation at the top code; with it
  // the sweep finds violations.
  const auto r = cli("verify-bounds --n 32 --m 64 --d 128 --seeds 30 --scheme mxfp4 --delta-rule in-range");
  EXPECT_EQ(r.code, exit_bound_violation);
  EXPECT_NE(r.out.find("false"), std::string::npos);
}

TEST(Cli, VerifyBoundsPreconditions) {
  const auto r = cli("verify-bounds --n 32 --m 64 --d 16");
  EXPECT_EQ(r.code, exit_config);
  EXPECT_NE(r.err.find("d >= n"), std::string::npos);
  EXPECT_EQ(cli("verify-bounds --n 32 --m 16").code, exit_config);
  EXPECT_EQ(cli("verify-bounds --n 32 --m 50").code, exit_config);
  EXPECT_EQ(cli("verify-bounds --reading sideways").code, exit_config);
}

TEST(Cli, SweepAndPareto) {
  const auto& dir = model_dir();
  nlohmann::json spec = {
      {"base",
       {{"run_id", "s"},
        {"model_path", dir.string()},
        {"calib", {{"tokens_path", (work() / "tokens.bin").string()}, {"n_samples", 2}, {"seq_len", 128}}}}},
      {"grid", {{"r4_expanded_dim", {nullptr, 480}}}}};
  write_json(work() / "sweep.json", spec);
  const auto s = cli("sweep --spec " + p(work() / "sweep.json") + " --report " + p(work() / "sweep.csv"));
  ASSERT_EQ(s.code, 0) << s.err;
  EXPECT_EQ(csv_rows(slurp(work() / "sweep.csv")).size(), 3u);

  std::ofstream(work() / "points.csv") << "run_id,volume_bits,perplexity\na,1,10\nb,2,9\nc,2,11\n";
  const auto f = cli("pareto --in " + p(work() / "points.csv"));
  ASSERT_EQ(f.code, 0) << f.err;
  const auto rows = csv_rows(f.out);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[1][0], "a");
  EXPECT_EQ(rows[2][0], "b");
  std::ofstream(work() / "broken.csv") << "run_id,volume_bits\na,1\n";
  EXPECT_EQ(cli("pareto --in " + p(work() / "broken.csv")).code, exit_config);
}

TEST(Cli, DumpHadamard) {
  const auto r = cli("dump-hadamard --n 8192 --m 9728");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("k=7 b=76"), std::string::npos) << r.out;
  const auto m = cli("dump-hadamard --n 4 --m 12 --matrix");
  ASSERT_EQ(m.code, 0);
  const auto rows = csv_rows(m.out);
  ASSERT_EQ(rows.size(), 5u);
  for (std::size_t i = 1; i < rows.size(); ++i) {
    ASSERT_EQ(rows[i].size(), 12u);
    for (const auto& c : rows[i]) EXPECT_TRUE(c == "1" || c == "-1") << c;
  }
  EXPECT_EQ(cli("dump-hadamard --n 4 --m 50").code, exit_config);
}
