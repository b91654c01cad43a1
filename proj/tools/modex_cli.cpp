// modex command-line harness.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "modex/modex.hpp"

namespace {

using namespace modex;

std::ostream& open_out(const std::string& path, std::ofstream& file) {
  if (path.empty() || path == "-") return std::cout;
  file.open(path);
  if (!file) throw io_error("cannot open " + path + " for writing");
  return file;
}

struct GenModelArgs {
  std::string out;
  std::string config_path;
  TinyLlmConfig cfg = fixture_config();
  double outlier_frac = 0.01;
  double outlier_gain = 20.0;
  std::uint64_t seed = 0;
};

struct GenTokensArgs {
  std::string model;
  std::string out;
  std::size_t count = 4096;
  std::size_t seq_len = 128;
  std::uint64_t seed = 0;
};

struct QuantizeArgs {
  std::string config_path;
  std::string model_path, calib_path, eval_path, output_path, run_id, scheme, r1, report;
  std::optional<std::size_t> r2, r4, n_samples, seq_len, seed, cayley_iters, cayley_samples;
  std::optional<double> cayley_lr;
  std::optional<bool> use_gptq, act_order, act_quant;
};

struct EvalArgs {
  std::string model;
  std::string tokens;
  std::size_t seq_len = 2048;
};

struct BoundsArgs {
  std::size_t n = 32, m = 64, d = 128, seeds = 100;
  std::uint64_t base_seed = 0;
  std::string scheme = "int4";
  std::string out;
  std::string reading = "rotated";
  std::string delta_rule = "saturating";
  bool no_act_order = false;
  double damping = 0.01;
};

struct SweepArgs {
  std::string spec_path;
  std::string report;
};

struct ParetoArgs {
  std::string in;
  std::string out;
};

struct DumpArgs {
  std::size_t n = 0, m = 0;
  bool matrix = false;
};

ExperimentConfig build_config(const QuantizeArgs& a) {
  nlohmann::json j = nlohmann::json::object();
  if (!a.config_path.empty()) {
    std::ifstream f(a.config_path);
    if (!f) throw invalid_argument("cannot open config " + a.config_path);
    try {
      j = nlohmann::json::parse(f);
    } catch (const nlohmann::json::exception& e) {
      throw invalid_argument(a.config_path + ": " + e.what());
    }
  }
  auto set = [&](const char* key, const auto& v) {
    if (v) j[key] = *v;
  };
  auto set_str = [&](const char* key, const std::string& v) {
    if (!v.empty()) j[key] = v;
  };
  set_str("model_path", a.model_path);
  set_str("eval_tokens_path", a.eval_path);
  set_str("output_path", a.output_path);
  set_str("run_id", a.run_id);
  set_str("scheme", a.scheme);
  set_str("r1", a.r1);
  set("r2_expanded_dim", a.r2);
  set("r4_expanded_dim", a.r4);
  set("seed", a.seed);
  set("use_gptq", a.use_gptq);
  set("act_order", a.act_order);
  set("quantize_activations", a.act_quant);
  if (!a.calib_path.empty()) j["calib"]["tokens_path"] = a.calib_path;
  if (a.n_samples) j["calib"]["n_samples"] = *a.n_samples;
  if (a.seq_len) j["calib"]["seq_len"] = *a.seq_len;
  if (a.cayley_iters) j["cayley"]["iters"] = *a.cayley_iters;
  if (a.cayley_lr) j["cayley"]["lr"] = *a.cayley_lr;
  if (a.cayley_samples) j["cayley"]["n_samples"] = *a.cayley_samples;
  return experiment_from_json(j);
}

void emit_reports(const std::string& path, const std::vector<ExperimentReport>& rows) {
  std::ofstream file;
  write_report_csv(open_out(path, file), rows);
}

QuantScheme weight_scheme(const std::string& s) {
  if (s == "int4") return QuantScheme::int4_sym();
  if (s == "mxfp4") return QuantScheme::mxfp4(GroupAxis::rows);
  throw invalid_argument("scheme must be int4 or mxfp4");
}

int run_verify_bounds(const BoundsArgs& a) {
  if (a.d < a.n) throw invalid_argument("verify-bounds requires d >= n (d=" + std::to_string(a.d) + ", n=" + std::to_string(a.n) + ")");
  if (a.m < a.n) throw invalid_argument("verify-bounds requires m >= n");
  BoundOptions opt;
  opt.act_order = !a.no_act_order;
  opt.damping = a.damping;
  if (a.reading == "original") opt.reading = ProjectionReading::original;
  else if (a.reading != "rotated") throw invalid_argument("--reading must be rotated or original");
  if (a.delta_rule == "in-range") opt.delta_rule = DeltaRule::in_range;
  else if (a.delta_rule != "saturating") throw invalid_argument("--delta-rule must be saturating or in-range");
  const auto rows = bound_sweep(a.d, a.n, a.m, weight_scheme(a.scheme), a.seeds, a.base_seed, opt);
  std::ofstream file;
  write_bound_csv(open_out(a.out, file), rows);
  std::size_t violations = 0;
  for (const auto& r : rows) violations += !r.report.satisfied;
  std::cerr << "verify-bounds: " << rows.size() << " instances, " << violations << " violations\n";
  return violations ? exit_bound_violation : exit_ok;
}

int run_dump(const DumpArgs& a) {
  const std::size_t m = a.m ? a.m : a.n;
  const ExpandedRotation rot(a.n, m);
  std::cout << "n=" << rot.n() << " m=" << rot.m() << " k=" << rot.factorization().k << " b=" << rot.factorization().b
            << " gamma=" << rot.gamma() << '\n';
  if (a.matrix) {
    for (std::size_t i = 0; i < rot.n(); ++i) {
      for (std::size_t j = 0; j < rot.m(); ++j) std::cout << (j ? "," : "") << rot.full_entry(i, j);
      std::cout << '\n';
    }
  }
  return exit_ok;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"modex: post-training model expansion with Hadamard incoherence processing"};
  app.require_subcommand(1);

  GenModelArgs gm;
  auto* c_gen = app.add_subcommand("gen-model", "Write a random fixture model directory");
  c_gen->add_option("--out", gm.out, "Output directory")->required();
  c_gen->add_option("--config", gm.config_path, "Model config JSON (defaults to the fixture config)");
  c_gen->add_option("--outlier-frac", gm.outlier_frac, "Fraction of value/FFN channels scaled as outliers");
  c_gen->add_option("--outlier-gain", gm.outlier_gain, "Outlier channel gain");
  c_gen->add_option("--seed", gm.seed, "Seed");

  GenTokensArgs gt;
  auto* c_tok = app.add_subcommand("gen-tokens", "Sample a token file from a model");
  c_tok->add_option("--model", gt.model, "Model directory")->required();
  c_tok->add_option("--out", gt.out, "Output token file (u32 little-endian)")->required();
  c_tok->add_option("--count", gt.count, "Number of tokens");
  c_tok->add_option("--seq-len", gt.seq_len, "Length of each sampled sequence");
  c_tok->add_option("--seed", gt.seed, "Seed");

  QuantizeArgs qa;
  auto* c_q = app.add_subcommand("quantize", "Run the rewrite/quantize/eval pipeline");
  c_q->add_option("--config", qa.config_path, "Experiment config JSON; flags override its fields");
  c_q->add_option("--model-path", qa.model_path);
  c_q->add_option("--calib-tokens", qa.calib_path);
  c_q->add_option("--eval-tokens", qa.eval_path);
  c_q->add_option("--output-path", qa.output_path, "Directory for the quantized artifact");
  c_q->add_option("--run-id", qa.run_id);
  c_q->add_option("--scheme", qa.scheme, "int4 | mxfp4");
  c_q->add_option("--r1", qa.r1, "identity | hadamard | cayley");
  c_q->add_option("--r2-expanded-dim", qa.r2);
  c_q->add_option("--r4-expanded-dim", qa.r4);
  c_q->add_option("--n-samples", qa.n_samples);
  c_q->add_option("--seq-len", qa.seq_len);
  c_q->add_option("--seed", qa.seed);
  c_q->add_option("--use-gptq", qa.use_gptq);
  c_q->add_option("--act-order", qa.act_order);
  c_q->add_option("--quantize-activations", qa.act_quant);
  c_q->add_option("--cayley-iters", qa.cayley_iters);
  c_q->add_option("--cayley-lr", qa.cayley_lr);
  c_q->add_option("--cayley-samples", qa.cayley_samples);
  c_q->add_option("--report", qa.report, "Report CSV path (default stdout)");

  EvalArgs ev;
  auto* c_eval = app.add_subcommand("eval", "Perplexity of a model or quantized artifact");
  c_eval->add_option("--model", ev.model, "Model directory")->required();
  c_eval->add_option("--tokens", ev.tokens, "Token file")->required();
  c_eval->add_option("--seq-len", ev.seq_len, "Window length");

  BoundsArgs ba;
  auto* c_b = app.add_subcommand("verify-bounds", "Randomized GPTQ error-bound sweep");
  c_b->add_option("--n", ba.n);
  c_b->add_option("--m", ba.m);
  c_b->add_option("--d", ba.d);
  c_b->add_option("--scheme", ba.scheme, "int4 | mxfp4");
  c_b->add_option("--seeds", ba.seeds);
  c_b->add_option("--base-seed", ba.base_seed);
  c_b->add_option("--damping", ba.damping);
  c_b->add_option("--reading", ba.reading, "rotated | original");
  c_b->add_option("--delta-rule", ba.delta_rule, "saturating | in-range");
  c_b->add_flag("--no-act-order", ba.no_act_order);
  c_b->add_option("--out", ba.out, "CSV path (default stdout)");

  SweepArgs sa;
  auto* c_s = app.add_subcommand("sweep", "Run a grid of experiments");
  c_s->add_option("--spec", sa.spec_path, "Sweep spec JSON {base, grid}")->required();
  c_s->add_option("--report", sa.report, "Report CSV path (default stdout)");

  ParetoArgs pa;
  auto* c_p = app.add_subcommand("pareto", "Extract the volume/perplexity Pareto frontier");
  c_p->add_option("--in", pa.in, "Report CSV")->required();
  c_p->add_option("--out", pa.out, "Frontier CSV (default stdout)");

  DumpArgs da;
  auto* c_d = app.add_subcommand("dump-hadamard", "Show the factorization (and entries) of an expanded rotation");
  c_d->add_option("--n", da.n)->required();
  c_d->add_option("--m", da.m, "Expanded size (default n)");
  c_d->add_flag("--matrix", da.matrix, "Print the unscaled +-1 entries");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? exit_ok : exit_config;
  }

  try {
    if (c_gen->parsed()) {
      if (!gm.config_path.empty()) gm.cfg = config_from_json(read_json(gm.config_path));
      gen_model(gm.out, gm.cfg, gm.outlier_frac, gm.outlier_gain, gm.seed);
      return exit_ok;
    }
    if (c_tok->parsed()) {
      const ModelGraph m = load_model(gt.model);
      write_tokens(gt.out, sample_tokens(m, gt.count, gt.seq_len, gt.seed));
      return exit_ok;
    }
    if (c_q->parsed()) {
      const auto res = run_quantize(build_config(qa));
      emit_reports(qa.report, {res.report});
      return exit_ok;
    }
    if (c_eval->parsed()) {
      const ModelGraph m = load_model(ev.model);
      const auto tokens = read_tokens(ev.tokens);
      std::printf("%.17g\n", perplexity(m, tokens, ev.seq_len));
      return exit_ok;
    }
    if (c_b->parsed()) return run_verify_bounds(ba);
    if (c_s->parsed()) {
      const auto configs = expand_sweep(read_json(sa.spec_path));
      std::vector<ExperimentReport> rows;
      for (const auto& c : configs) rows.push_back(run_quantize(c).report);
      emit_reports(sa.report, rows);
      return exit_ok;
    }
    if (c_p->parsed()) {
      std::ifstream f(pa.in);
      if (!f) throw io_error("cannot open " + pa.in);
      emit_reports(pa.out, pareto_frontier(read_report_csv(f)));
      return exit_ok;
    }
    if (c_d->parsed()) return run_dump(da);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code_for(e);
  }
  return exit_config;
}
