#pragma once

// End-to-end runs: experiment configs, the rewrite/quantize/evaluate
// pipeline, report rows, sweeps and Pareto frontiers.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <istream>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <tuple>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "modex/cayley.hpp"
#include "modex/container.hpp"
#include "modex/errors.hpp"
#include "modex/hadamard.hpp"
#include "modex/model_graph.hpp"
#include "modex/quantizers.hpp"
#include "modex/rng.hpp"

namespace modex {

enum class R1Kind { identity, hadamard, cayley };

inline std::string to_string(R1Kind k) {
  switch (k) {
    case R1Kind::identity: return "identity";
    case R1Kind::hadamard: return "hadamard";
    case R1Kind::cayley: return "cayley";
  }
  return "?";
}

struct CalibConfig {
  std::string tokens_path;
  std::size_t n_samples = 128;
  std::size_t seq_len = 2048;
};

struct CayleyConfig {
  std::size_t iters = 100;
  double lr = 1.5;
  std::size_t n_samples = 800;
};

struct ExperimentConfig {
  std::string run_id;
  std::string model_path;
  std::string eval_tokens_path;  // empty: evaluate on the calibration tokens
  std::string output_path;       // empty: do not write the quantized artifact
  std::string scheme = "int4";   // int4 | mxfp4
  bool use_gptq = true;
  bool act_order = true;
  bool quantize_activations = true;
  R1Kind r1 = R1Kind::hadamard;
  std::optional<std::size_t> r2_expanded_dim;
  std::optional<std::size_t> r4_expanded_dim;
  CalibConfig calib;
  CayleyConfig cayley;
  std::uint64_t seed = 0;
};

/// Error raised inside a pipeline stage; keeps the stage name and the exit
/// code class of the original failure.
class pipeline_error : public error {
 public:
  pipeline_error(std::string stage, const std::string& what, int exit_code)
      : error(stage + ": " + what), stage_(std::move(stage)), exit_code_(exit_code) {}
  const std::string& stage() const { return stage_; }
  int exit_code() const { return exit_code_; }

 private:
  std::string stage_;
  int exit_code_;
};

inline constexpr int exit_ok = 0;
inline constexpr int exit_config = 2;
inline constexpr int exit_bound_violation = 3;
inline constexpr int exit_numeric = 4;

/// Exit code class for an exception thrown by the library.
inline int exit_code_for(const std::exception& e) {
  if (auto* p = dynamic_cast<const pipeline_error*>(&e)) return p->exit_code();
  if (dynamic_cast<const numeric_error*>(&e) || dynamic_cast<const cholesky_failure*>(&e) ||
      dynamic_cast<const rank_deficient*>(&e))
    return exit_numeric;
  return exit_config;
}

// ---------------------------------------------------------------------------
// Config JSON
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
void read_field(const nlohmann::json& j, const char* key, T& out) {
  if (!j.contains(key) || j[key].is_null()) return;
  try {
    out = j[key].get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw invalid_argument(std::string("config field '") + key + "': " + e.what());
  }
}

inline void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> known, const char* where) {
  if (!j.is_object()) throw invalid_argument(std::string(where) + " must be a JSON object");
  for (const auto& [k, _] : j.items())
    if (std::none_of(known.begin(), known.end(), [&](const char* n) { return k == n; }))
      throw invalid_argument(std::string(where) + ": unknown field '" + k + "'");
}

}  // namespace detail

inline R1Kind parse_r1(const std::string& s) {
  if (s == "identity") return R1Kind::identity;
  if (s == "hadamard") return R1Kind::hadamard;
  if (s == "cayley") return R1Kind::cayley;
  throw invalid_argument("r1 must be identity, hadamard or cayley (got '" + s + "')");
}

inline ModelQuantConfig quant_config_for(const ExperimentConfig& cfg) {
  ModelQuantConfig q;
  if (cfg.scheme == "int4") q = ModelQuantConfig::int4();
  else if (cfg.scheme == "mxfp4") q = ModelQuantConfig::mxfp4();
  else throw invalid_argument("scheme must be int4 or mxfp4 (got '" + cfg.scheme + "')");
  q.use_gptq = cfg.use_gptq;
  q.act_order = cfg.act_order;
  q.quantize_activations = cfg.quantize_activations;
  return q;
}

inline void validate(const ExperimentConfig& c) {
  quant_config_for(c);
  if (c.calib.n_samples == 0 || c.calib.seq_len < 2) throw invalid_argument("calib: n_samples >= 1 and seq_len >= 2 required");
  if (c.r1 == R1Kind::cayley && (c.cayley.iters == 0 || !(c.cayley.lr > 0.0) || c.cayley.n_samples == 0))
    throw invalid_argument("cayley: iters, lr and n_samples must be positive");
}

inline ExperimentConfig experiment_from_json(const nlohmann::json& j) {
  detail::reject_unknown(j,
                         {"run_id", "model_path", "eval_tokens_path", "output_path", "scheme", "use_gptq", "act_order",
                          "quantize_activations", "r1", "r2_expanded_dim", "r4_expanded_dim", "calib", "cayley", "seed"},
                         "experiment config");
  ExperimentConfig c;
  detail::read_field(j, "run_id", c.run_id);
  detail::read_field(j, "model_path", c.model_path);
  detail::read_field(j, "eval_tokens_path", c.eval_tokens_path);
  detail::read_field(j, "output_path", c.output_path);
  detail::read_field(j, "scheme", c.scheme);
  detail::read_field(j, "use_gptq", c.use_gptq);
  detail::read_field(j, "act_order", c.act_order);
  detail::read_field(j, "quantize_activations", c.quantize_activations);
  std::string r1 = to_string(c.r1);
  detail::read_field(j, "r1", r1);
  c.r1 = parse_r1(r1);
  if (j.contains("r2_expanded_dim") && !j["r2_expanded_dim"].is_null()) {
    std::size_t v = 0;
    detail::read_field(j, "r2_expanded_dim", v);
    c.r2_expanded_dim = v;
  }
  if (j.contains("r4_expanded_dim") && !j["r4_expanded_dim"].is_null()) {
    std::size_t v = 0;
    detail::read_field(j, "r4_expanded_dim", v);
    c.r4_expanded_dim = v;
  }
  if (j.contains("calib")) {
    const auto& cj = j["calib"];
    detail::reject_unknown(cj, {"tokens_path", "n_samples", "seq_len"}, "calib");
    detail::read_field(cj, "tokens_path", c.calib.tokens_path);
    detail::read_field(cj, "n_samples", c.calib.n_samples);
    detail::read_field(cj, "seq_len", c.calib.seq_len);
  }
  if (j.contains("cayley")) {
    const auto& cj = j["cayley"];
    detail::reject_unknown(cj, {"iters", "lr", "n_samples"}, "cayley");
    detail::read_field(cj, "iters", c.cayley.iters);
    detail::read_field(cj, "lr", c.cayley.lr);
    detail::read_field(cj, "n_samples", c.cayley.n_samples);
  }
  detail::read_field(j, "seed", c.seed);
  validate(c);
  return c;
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json j = {{"run_id", c.run_id},
                      {"model_path", c.model_path},
                      {"eval_tokens_path", c.eval_tokens_path},
                      {"output_path", c.output_path},
                      {"scheme", c.scheme},
                      {"use_gptq", c.use_gptq},
                      {"act_order", c.act_order},
                      {"quantize_activations", c.quantize_activations},
                      {"r1", to_string(c.r1)},
                      {"r2_expanded_dim", nullptr},
                      {"r4_expanded_dim", nullptr},
                      {"calib", {{"tokens_path", c.calib.tokens_path}, {"n_samples", c.calib.n_samples}, {"seq_len", c.calib.seq_len}}},
                      {"cayley", {{"iters", c.cayley.iters}, {"lr", c.cayley.lr}, {"n_samples", c.cayley.n_samples}}},
                      {"seed", c.seed}};
  if (c.r2_expanded_dim) j["r2_expanded_dim"] = *c.r2_expanded_dim;
  if (c.r4_expanded_dim) j["r4_expanded_dim"] = *c.r4_expanded_dim;
  return j;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

struct ExperimentReport {
  std::string run_id;
  std::uint64_t params = 0;
  std::uint64_t volume_bits = 0;
  double expansion_ratio_model = 1.0;
  double expansion_ratio_layer = 1.0;
  double perplexity = 0.0;
  double mean_layer_mse = 0.0;
  double wall_seconds = 0.0;

  /// Equality on everything a rerun must reproduce (wall time excluded).
  bool same_result(const ExperimentReport& o) const {
    return run_id == o.run_id && params == o.params && volume_bits == o.volume_bits &&
           expansion_ratio_model == o.expansion_ratio_model && expansion_ratio_layer == o.expansion_ratio_layer &&
           perplexity == o.perplexity && mean_layer_mse == o.mean_layer_mse;
  }
};

inline constexpr const char* report_csv_header =
    "run_id,params,volume_bits,expansion_ratio_model,expansion_ratio_layer,perplexity,mean_layer_mse,wall_seconds";

inline void write_report_row(std::ostream& os, const ExperimentReport& r) {
  const auto old = os.precision(17);
  os << r.run_id << ',' << r.params << ',' << r.volume_bits << ',' << r.expansion_ratio_model << ','
     << r.expansion_ratio_layer << ',' << r.perplexity << ',' << r.mean_layer_mse << ',' << r.wall_seconds << '\n';
  os.precision(old);
}

inline void write_report_csv(std::ostream& os, const std::vector<ExperimentReport>& rows) {
  os << report_csv_header << '\n';
  for (const auto& r : rows) write_report_row(os, r);
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  return out;
}

inline double parse_double(const std::string& s, std::size_t line_no) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw invalid_argument("report csv line " + std::to_string(line_no) + ": bad number '" + s + "'");
  }
}

}  // namespace detail

/// Parses a report CSV. Only the header columns are required, in any order;
/// volume_bits and perplexity must be present.
inline std::vector<ExperimentReport> read_report_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw invalid_argument("report csv: empty input");
  const auto header = detail::split_csv_line(line);
  auto col = [&](const char* name) -> std::optional<std::size_t> {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) return std::nullopt;
    return static_cast<std::size_t>(it - header.begin());
  };
  const auto c_vol = col("volume_bits");
  const auto c_ppl = col("perplexity");
  if (!c_vol || !c_ppl) throw invalid_argument("report csv: header needs volume_bits and perplexity columns");
  std::vector<ExperimentReport> rows;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto f = detail::split_csv_line(line);
    if (f.size() != header.size())
      throw invalid_argument("report csv line " + std::to_string(line_no) + ": expected " + std::to_string(header.size()) +
                             " fields, got " + std::to_string(f.size()));
    ExperimentReport r;
    auto num = [&](const char* name, auto& out) {
      if (auto c = col(name)) out = static_cast<std::remove_reference_t<decltype(out)>>(detail::parse_double(f[*c], line_no));
    };
    if (auto c = col("run_id")) r.run_id = f[*c];
    num("params", r.params);
    num("volume_bits", r.volume_bits);
    num("expansion_ratio_model", r.expansion_ratio_model);
    num("expansion_ratio_layer", r.expansion_ratio_layer);
    num("perplexity", r.perplexity);
    num("mean_layer_mse", r.mean_layer_mse);
    num("wall_seconds", r.wall_seconds);
    rows.push_back(std::move(r));
  }
  return rows;
}

/// Rows not strictly dominated: a row is dropped only if another row has
/// both strictly lower volume and strictly lower perplexity. Sorted by
/// volume ascending (stable for ties).
inline std::vector<ExperimentReport> pareto_frontier(const std::vector<ExperimentReport>& rows) {
  std::vector<ExperimentReport> out;
  for (const auto& r : rows) {
    const bool dominated = std::any_of(rows.begin(), rows.end(), [&](const ExperimentReport& o) {
      return o.volume_bits < r.volume_bits && o.perplexity < r.perplexity;
    });
    if (!dominated) out.push_back(r);
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const ExperimentReport& a, const ExperimentReport& b) { return a.volume_bits < b.volume_bits; });
  return out;
}

// ---------------------------------------------------------------------------
// Volume
// ---------------------------------------------------------------------------

/// Stored bits of a quantized model: quantized linears at 4 bits plus
/// metadata, everything else (embedding, norms, untied LM head) in BF16.
inline std::uint64_t model_volume_bits(const QuantizedModel& qm) {
  std::vector<VolumeEntry> entries;
  const ModelGraph& m = qm.model;
  std::uint64_t hp = m.embedding.size() + m.final_norm.size();
  for (const auto& L : m.layers) hp += L.attn_norm.size() + L.mlp_norm.size();
  if (!m.config.tied_embeddings && m.lm_head) hp += m.lm_head->size();
  entries.push_back({hp, std::nullopt, 0, 0});
  for (const auto& [_, q] : qm.weights) {
    VolumeEntry e{q.rows() * q.cols(), q.scheme(), 0, 0};
    if (q.scheme().kind == QuantKind::int4_sym_per_channel) e.channels = q.cols();
    if (q.scheme().kind == QuantKind::mxfp4) e.groups = q.group_count();
    entries.push_back(e);
  }
  return volume_bits(entries);
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

/// Seeded choice of up to n_samples non-overlapping windows of seq_len,
/// concatenated.
inline std::vector<std::uint32_t> select_windows(std::span<const std::uint32_t> tokens, std::size_t n_samples,
                                                 std::size_t seq_len, std::uint64_t seed) {
  const std::size_t available = tokens.size() / seq_len;
  if (available == 0) return {tokens.begin(), tokens.end()};
  std::vector<std::size_t> idx(available);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  for (std::size_t i = available; i > 1; --i) std::swap(idx[i - 1], idx[rng.index(i)]);
  idx.resize(std::min(n_samples, available));
  std::sort(idx.begin(), idx.end());
  std::vector<std::uint32_t> out;
  out.reserve(idx.size() * seq_len);
  for (auto w : idx) out.insert(out.end(), tokens.begin() + w * seq_len, tokens.begin() + (w + 1) * seq_len);
  return out;
}

struct PipelineResult {
  ExperimentReport report;
  QuantizedModel quantized;
  std::optional<CayleyOptState> cayley;
};

namespace detail {

template <class F>
auto run_stage(const char* stage, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const pipeline_error&) {
    throw;
  } catch (const std::exception& e) {
    throw pipeline_error(stage, e.what(), exit_code_for(e));
  }
}

}  // namespace detail

/// fold → R2/R4 expansion → R1 (identity, Hadamard, or Cayley-optimized from
/// float calibration statistics) → calibration capture → GPTQ/RTN → eval.
inline PipelineResult run_pipeline(const ModelGraph& base, std::span<const std::uint32_t> calib_tokens,
                                   std::span<const std::uint32_t> eval_tokens, const ExperimentConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  validate(cfg);
  const ModelQuantConfig qc = quant_config_for(cfg);
  const TinyLlmConfig& mc = base.config;
  if (cfg.r2_expanded_dim && *cfg.r2_expanded_dim < mc.head_dim)
    throw pipeline_error("config", "r2_expanded_dim must be >= head_dim", exit_config);
  if (cfg.r4_expanded_dim && *cfg.r4_expanded_dim < mc.d_ffn)
    throw pipeline_error("config", "r4_expanded_dim must be >= d_ffn", exit_config);

  PipelineResult out;
  ModelGraph m = detail::run_stage("fold", [&] { return fold_norm_weights(base); });
  m = detail::run_stage("expand", [&] {
    ModelGraph r = m;
    if (cfg.r2_expanded_dim) r = expand_r2(std::move(r), *cfg.r2_expanded_dim);
    if (cfg.r4_expanded_dim) r = expand_r4(std::move(r), *cfg.r4_expanded_dim);
    return r;
  });
  m = detail::run_stage("r1", [&] {
    switch (cfg.r1) {
      case R1Kind::identity: return m;
      case R1Kind::hadamard: return merge_r1(m, hadamard_matrix(mc.d_model));
      case R1Kind::cayley: {
        const auto tokens = select_windows(calib_tokens, cfg.cayley.n_samples, cfg.calib.seq_len, cfg.seed + 1);
        const auto hs = capture_hessians(m, tokens, cfg.cayley.n_samples, cfg.calib.seq_len);
        CayleyOptions opt;
        opt.iters = cfg.cayley.iters;
        opt.lr = cfg.cayley.lr;
        out.cayley = optimize_r1(m, hs, qc.weights, opt);
        return merge_r1(m, out.cayley->r);
      }
    }
    return m;
  });
  const auto hessians = detail::run_stage("calibrate", [&] {
    const auto tokens = select_windows(calib_tokens, cfg.calib.n_samples, cfg.calib.seq_len, cfg.seed);
    return capture_hessians(m, tokens, cfg.calib.n_samples, cfg.calib.seq_len);
  });
  out.quantized = detail::run_stage("quantize", [&] { return quantize_model(m, qc, hessians); });
  const double ppl = detail::run_stage("eval", [&] {
    const auto ev = eval_tokens.empty() ? calib_tokens : eval_tokens;
    return perplexity(out.quantized.model, ev, cfg.calib.seq_len);
  });

  auto& r = out.report;
  r.run_id = cfg.run_id;
  r.params = count_params(out.quantized.model);
  r.volume_bits = model_volume_bits(out.quantized);
  r.expansion_ratio_model = static_cast<double>(r.params) / static_cast<double>(count_params(mc));
  r.expansion_ratio_layer = std::max(m.plan.r2_ratio(), m.plan.r4_ratio());
  r.perplexity = ppl;
  r.mean_layer_mse = mean_layer_mse(out.quantized);
  r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

/// File-based run: loads the model and token files named in the config,
/// runs the pipeline and optionally writes the quantized artifact.
inline PipelineResult run_quantize(const ExperimentConfig& cfg) {
  const auto [model, calib, eval] = detail::run_stage("load", [&] {
    if (cfg.model_path.empty()) throw invalid_argument("model_path is required");
    if (cfg.calib.tokens_path.empty()) throw invalid_argument("calib.tokens_path is required");
    ModelGraph m = load_model(cfg.model_path);
    auto c = read_tokens(cfg.calib.tokens_path);
    std::vector<std::uint32_t> e;
    if (!cfg.eval_tokens_path.empty()) e = read_tokens(cfg.eval_tokens_path);
    return std::tuple{std::move(m), std::move(c), std::move(e)};
  });
  PipelineResult res = run_pipeline(model, calib, eval, cfg);
  if (!cfg.output_path.empty()) detail::run_stage("write", [&] { save_quantized(cfg.output_path, res.quantized); });
  return res;
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

/// Cartesian product over the listed axes applied to a base config. Axes:
/// scheme, r1, r2_expanded_dim, r4_expanded_dim (null = none), seed, use_gptq.
inline std::vector<ExperimentConfig> expand_sweep(const nlohmann::json& spec) {
  detail::reject_unknown(spec, {"base", "grid"}, "sweep spec");
  if (!spec.contains("base")) throw invalid_argument("sweep spec needs a 'base' config");
  const ExperimentConfig base = experiment_from_json(spec["base"]);
  std::vector<ExperimentConfig> out{base};
  if (!spec.contains("grid")) return out;
  const auto& grid = spec["grid"];
  detail::reject_unknown(grid, {"scheme", "r1", "r2_expanded_dim", "r4_expanded_dim", "seed", "use_gptq"}, "sweep grid");
  for (const char* axis : {"scheme", "r1", "r2_expanded_dim", "r4_expanded_dim", "seed", "use_gptq"}) {
    if (!grid.contains(axis)) continue;
    if (!grid[axis].is_array() || grid[axis].empty()) throw invalid_argument(std::string("sweep grid '") + axis + "' must be a non-empty array");
    std::vector<ExperimentConfig> next;
    for (const auto& c : out)
      for (const auto& v : grid[axis]) {
        nlohmann::json j = to_json(c);
        j[axis] = v;
        next.push_back(experiment_from_json(j));
      }
    out = std::move(next);
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    auto& c = out[i];
    std::ostringstream id;
    id << (base.run_id.empty() ? "run" : base.run_id) << '-' << i << '-' << c.scheme << "-r1" << to_string(c.r1);
    if (c.r2_expanded_dim) id << "-r2e" << *c.r2_expanded_dim;
    if (c.r4_expanded_dim) id << "-r4e" << *c.r4_expanded_dim;
    id << "-s" << c.seed;
    c.run_id = id.str();
    if (!c.output_path.empty()) c.output_path = (std::filesystem::path(c.output_path) / c.run_id).string();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Fixtures
// ---------------------------------------------------------------------------

/// Writes a random model directory (see random_model).
inline ModelGraph gen_model(const std::filesystem::path& dir, const TinyLlmConfig& cfg, double outlier_frac,
                            double outlier_gain, std::uint64_t seed) {
  if (outlier_frac < 0.0 || outlier_frac > 1.0) throw invalid_argument("outlier_frac must be in [0, 1]");
  if (!(outlier_gain > 0.0)) throw invalid_argument("outlier_gain must be > 0");
  ModelGraph m = random_model(cfg, outlier_frac, outlier_gain, seed);
  save_model(dir, m);
  return m;
}

/// max / median of the per-output-channel L2 norms of a weight (in×out).
inline double channel_norm_ratio(const Tensor& w) {
  std::vector<double> norms(w.cols(), 0.0);
  for (std::size_t r = 0; r < w.rows(); ++r)
    for (std::size_t c = 0; c < w.cols(); ++c) norms[c] += w(r, c) * w(r, c);
  for (double& v : norms) v = std::sqrt(v);
  std::vector<double> sorted = norms;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  const double median = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  return sorted.back() / median;
}

}  // namespace modex
