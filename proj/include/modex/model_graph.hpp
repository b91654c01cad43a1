#pragma once

// Tiny Llama-style decoder plus the rotation rewrites: norm folding, merged
// R1, merged (expanded) R2 on the value/output-projection path, and online
// (expanded) R4 on the down-projection input.
//
// Linear weights are stored in×out, so a layer computes y = x·W.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numbers>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "modex/errors.hpp"
#include "modex/gptq.hpp"
#include "modex/hadamard.hpp"
#include "modex/numerics.hpp"
#include "modex/quantizers.hpp"
#include "modex/rng.hpp"

namespace modex {

struct TinyLlmConfig {
  std::size_t n_layers = 4;
  std::size_t d_model = 128;
  std::size_t n_heads = 4;
  std::size_t n_kv_heads = 2;
  std::size_t head_dim = 32;
  std::size_t d_ffn = 384;
  std::size_t vocab_size = 512;
  double rope_theta = 10000.0;
  bool tied_embeddings = true;

  void validate() const {
    if (n_layers == 0 || d_model == 0 || n_heads == 0 || n_kv_heads == 0 || head_dim == 0 ||
        d_ffn == 0 || vocab_size == 0)
      throw invalid_argument("config: all sizes must be >= 1");
    if (d_model != n_heads * head_dim)
      throw invalid_argument("config: d_model must equal n_heads * head_dim");
    if (n_heads % n_kv_heads != 0)
      throw invalid_argument("config: n_heads must be divisible by n_kv_heads");
    if (head_dim % 2 != 0) throw invalid_argument("config: head_dim must be even for RoPE");
    if (!(rope_theta > 0.0)) throw invalid_argument("config: rope_theta must be > 0");
  }

  bool operator==(const TinyLlmConfig&) const = default;
};

/// Desk-scale fixture used by the tests and the CLI defaults.
inline TinyLlmConfig fixture_config() { return {}; }

inline constexpr double rms_norm_eps = 1e-5;

struct LayerWeights {
  std::vector<double> attn_norm;
  Tensor wq, wk, wv, wo;
  std::vector<double> mlp_norm;
  Tensor w_gate, w_up, w_down;
};

struct RotationPlan {
  std::optional<Tensor> r1;
  std::optional<ExpandedRotation> r2;
  std::optional<ExpandedRotation> r4;

  double r2_ratio() const { return r2 ? double(r2->m()) / double(r2->n()) : 1.0; }
  double r4_ratio() const { return r4 ? double(r4->m()) / double(r4->n()) : 1.0; }
};

/// Names of the linear layers in one decoder block, in forward order.
inline constexpr std::string_view linear_names[] = {"wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down"};

/// Input sites: every linear reads one of these activations.
inline std::string_view input_site_of(std::string_view linear) {
  if (linear == "wq" || linear == "wk" || linear == "wv") return "attn_in";
  if (linear == "wo") return "wo_in";
  if (linear == "w_gate" || linear == "w_up") return "mlp_in";
  if (linear == "w_down") return "down_in";
  throw invalid_argument("unknown linear " + std::string(linear));
}

inline std::string layer_key(std::size_t layer, std::string_view name) {
  return "layers." + std::to_string(layer) + "." + std::string(name);
}

struct ModelGraph {
  TinyLlmConfig config;
  Tensor embedding;  // vocab × d_model
  std::vector<LayerWeights> layers;
  std::vector<double> final_norm;
  std::optional<Tensor> lm_head;  // d_model × vocab; absent means embeddingᵀ
  RotationPlan plan;
  std::optional<QuantScheme> act_quant;  // fake-quant at every linear input

  std::size_t value_head_dim() const { return plan.r2 ? plan.r2->m() : config.head_dim; }
  std::size_t down_in_dim() const { return plan.r4 ? plan.r4->m() : config.d_ffn; }

  Tensor& linear(std::size_t layer, std::string_view name) {
    auto& l = layers.at(layer);
    if (name == "wq") return l.wq;
    if (name == "wk") return l.wk;
    if (name == "wv") return l.wv;
    if (name == "wo") return l.wo;
    if (name == "w_gate") return l.w_gate;
    if (name == "w_up") return l.w_up;
    if (name == "w_down") return l.w_down;
    throw invalid_argument("unknown linear " + std::string(name));
  }
  const Tensor& linear(std::size_t layer, std::string_view name) const {
    return const_cast<ModelGraph*>(this)->linear(layer, name);
  }

  /// Throws dimension_mismatch if any tensor disagrees with the config/plan.
  void check_shapes() const {
    const auto& c = config;
    const std::size_t d = c.d_model;
    const std::size_t hv = value_head_dim();
    auto expect = [](const Tensor& t, std::size_t r, std::size_t cc, const std::string& what) {
      if (t.rows() != r || t.cols() != cc)
        throw dimension_mismatch(what + ": expected " + std::to_string(r) + "x" +
                                 std::to_string(cc) + ", got " + std::to_string(t.rows()) + "x" +
                                 std::to_string(t.cols()));
    };
    expect(embedding, c.vocab_size, d, "embedding");
    if (layers.size() != c.n_layers) throw dimension_mismatch("layer count != n_layers");
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& l = layers[i];
      if (l.attn_norm.size() != d || l.mlp_norm.size() != d)
        throw dimension_mismatch(layer_key(i, "norm") + ": wrong length");
      expect(l.wq, d, c.n_heads * c.head_dim, layer_key(i, "wq"));
      expect(l.wk, d, c.n_kv_heads * c.head_dim, layer_key(i, "wk"));
      expect(l.wv, d, c.n_kv_heads * hv, layer_key(i, "wv"));
      expect(l.wo, c.n_heads * hv, d, layer_key(i, "wo"));
      expect(l.w_gate, d, c.d_ffn, layer_key(i, "w_gate"));
      expect(l.w_up, d, c.d_ffn, layer_key(i, "w_up"));
      expect(l.w_down, down_in_dim(), d, layer_key(i, "w_down"));
    }
    if (final_norm.size() != d) throw dimension_mismatch("final_norm: wrong length");
    if (lm_head) expect(*lm_head, d, c.vocab_size, "lm_head");
  }
};

// ---------------------------------------------------------------------------
// Construction
// ---------------------------------------------------------------------------

/// Random fixture weights. Linears use N(0, 1/fan_in); norm weights are
/// 1 + N(0, 0.1²). A fraction `outlier_frac` of value channels (wv columns)
/// and FFN channels (w_up columns) per layer is scaled by `outlier_gain`.
inline ModelGraph random_model(const TinyLlmConfig& cfg, double outlier_frac, double outlier_gain,
                               std::uint64_t seed, double embedding_std = 0.25) {
  cfg.validate();
  Rng rng(seed);
  ModelGraph m;
  m.config = cfg;
  const std::size_t d = cfg.d_model;
  m.embedding = random_normal(cfg.vocab_size, d, rng, embedding_std);
  auto norm_vec = [&] {
    std::vector<double> v(d);
    for (double& x : v) x = 1.0 + 0.1 * rng.normal();
    return v;
  };
  auto linear = [&](std::size_t in, std::size_t out) {
    return random_normal(in, out, rng, 1.0 / std::sqrt(static_cast<double>(in)));
  };
  auto inject = [&](Tensor& w) {
    if (outlier_frac <= 0.0) return;
    const std::size_t n = w.cols();
    const std::size_t count =
        std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(outlier_frac * n)));
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t i = 0; i < count; ++i) {
      std::swap(idx[i], idx[i + rng.index(n - i)]);
      for (std::size_t r = 0; r < w.rows(); ++r) w(r, idx[i]) *= outlier_gain;
    }
  };
  for (std::size_t i = 0; i < cfg.n_layers; ++i) {
    LayerWeights l;
    l.attn_norm = norm_vec();
    l.wq = linear(d, cfg.n_heads * cfg.head_dim);
    l.wk = linear(d, cfg.n_kv_heads * cfg.head_dim);
    l.wv = linear(d, cfg.n_kv_heads * cfg.head_dim);
    l.wo = linear(cfg.n_heads * cfg.head_dim, d);
    l.mlp_norm = norm_vec();
    l.w_gate = linear(d, cfg.d_ffn);
    l.w_up = linear(d, cfg.d_ffn);
    l.w_down = linear(cfg.d_ffn, d);
    inject(l.wv);
    inject(l.w_up);
    m.layers.push_back(std::move(l));
  }
  m.final_norm = norm_vec();
  if (!cfg.tied_embeddings) m.lm_head = linear(d, cfg.vocab_size);
  return m;
}

/// All linears zero, norms one, zero embedding.
inline ModelGraph zero_model(const TinyLlmConfig& cfg) {
  cfg.validate();
  ModelGraph m;
  m.config = cfg;
  const std::size_t d = cfg.d_model;
  m.embedding = Tensor(cfg.vocab_size, d);
  for (std::size_t i = 0; i < cfg.n_layers; ++i) {
    LayerWeights l;
    l.attn_norm.assign(d, 1.0);
    l.mlp_norm.assign(d, 1.0);
    l.wq = Tensor(d, cfg.n_heads * cfg.head_dim);
    l.wk = Tensor(d, cfg.n_kv_heads * cfg.head_dim);
    l.wv = Tensor(d, cfg.n_kv_heads * cfg.head_dim);
    l.wo = Tensor(cfg.n_heads * cfg.head_dim, d);
    l.w_gate = Tensor(d, cfg.d_ffn);
    l.w_up = Tensor(d, cfg.d_ffn);
    l.w_down = Tensor(cfg.d_ffn, d);
    m.layers.push_back(std::move(l));
  }
  m.final_norm.assign(d, 1.0);
  if (!cfg.tied_embeddings) m.lm_head = Tensor(d, cfg.vocab_size);
  return m;
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

/// Called with the (pre-quantization) input of every linear site.
using ActivationObserver =
    std::function<void(std::size_t layer, std::string_view site, const Tensor& x)>;

/// Keys and values of the positions processed so far.
struct KvCache {
  std::vector<std::vector<double>> k;  // per layer, row-major (positions × n_kv·head_dim)
  std::vector<std::vector<double>> v;  // per layer, row-major (positions × n_kv·value_dim)
  std::size_t length = 0;

  explicit KvCache(std::size_t n_layers) : k(n_layers), v(n_layers) {}
};

namespace detail {

inline Tensor rms_normalize(const Tensor& x, std::span<const double> weight) {
  Tensor out(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double ss = 0.0;
    for (double v : x.row(r)) ss += v * v;
    const double inv = 1.0 / std::sqrt(ss / static_cast<double>(x.cols()) + rms_norm_eps);
    for (std::size_t c = 0; c < x.cols(); ++c) out(r, c) = x(r, c) * inv * weight[c];
  }
  return out;
}

inline void apply_rope(Tensor& x, std::size_t heads, std::size_t head_dim, std::size_t pos0,
                       double theta) {
  const std::size_t half = head_dim / 2;
  for (std::size_t t = 0; t < x.rows(); ++t) {
    const double pos = static_cast<double>(pos0 + t);
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::pow(theta, -2.0 * static_cast<double>(i) / double(head_dim));
      const double cs = std::cos(pos * freq);
      const double sn = std::sin(pos * freq);
      for (std::size_t h = 0; h < heads; ++h) {
        double& a = x(t, h * head_dim + i);
        double& b = x(t, h * head_dim + i + half);
        const double x1 = a;
        const double x2 = b;
        a = x1 * cs - x2 * sn;
        b = x2 * cs + x1 * sn;
      }
    }
  }
}

inline Tensor maybe_quantize(const Tensor& x, const std::optional<QuantScheme>& scheme) {
  return scheme ? fake_quantize(x, *scheme) : x;
}

inline double silu(double v) { return v / (1.0 + std::exp(-v)); }

}  // namespace detail

/// Runs `tokens` at positions cache.length.. and appends to the cache.
/// Returns logits (tokens × vocab).
inline Tensor forward_chunk(const ModelGraph& model, KvCache& cache,
                            std::span<const std::uint32_t> tokens,
                            const ActivationObserver& observe = {}) {
  const auto& cfg = model.config;
  const std::size_t d = cfg.d_model;
  const std::size_t T = tokens.size();
  const std::size_t hd = cfg.head_dim;
  const std::size_t hv = model.value_head_dim();
  const std::size_t kv_width = cfg.n_kv_heads * hd;
  const std::size_t v_width = cfg.n_kv_heads * hv;
  const std::size_t group = cfg.n_heads / cfg.n_kv_heads;
  const std::size_t pos0 = cache.length;
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(hd));

  Tensor h(T, d);
  for (std::size_t t = 0; t < T; ++t) {
    if (tokens[t] >= cfg.vocab_size)
      throw invalid_argument("token " + std::to_string(tokens[t]) + " out of vocabulary range");
    std::copy(model.embedding.row(tokens[t]).begin(), model.embedding.row(tokens[t]).end(),
              h.row(t).begin());
  }
  const auto& aq = model.act_quant;

  for (std::size_t li = 0; li < model.layers.size(); ++li) {
    const auto& L = model.layers[li];
    const Tensor a = detail::rms_normalize(h, L.attn_norm);
    if (observe) observe(li, "attn_in", a);
    const Tensor a_q = detail::maybe_quantize(a, aq);
    Tensor q = matmul(a_q, L.wq);
    Tensor k = matmul(a_q, L.wk);
    const Tensor v = matmul(a_q, L.wv);
    detail::apply_rope(q, cfg.n_heads, hd, pos0, cfg.rope_theta);
    detail::apply_rope(k, cfg.n_kv_heads, hd, pos0, cfg.rope_theta);
    auto& kc = cache.k[li];
    auto& vc = cache.v[li];
    kc.insert(kc.end(), k.data().begin(), k.data().end());
    vc.insert(vc.end(), v.data().begin(), v.data().end());

    Tensor o(T, cfg.n_heads * hv);
    std::vector<double> scores(pos0 + T);
    for (std::size_t hh = 0; hh < cfg.n_heads; ++hh) {
      const std::size_t g = hh / group;
      for (std::size_t t = 0; t < T; ++t) {
        const std::size_t upto = pos0 + t + 1;
        const double* qt = &q(t, hh * hd);
        double mx = -INFINITY;
        for (std::size_t s = 0; s < upto; ++s) {
          const double* ks = kc.data() + s * kv_width + g * hd;
          double dot = 0.0;
          for (std::size_t i = 0; i < hd; ++i) dot += qt[i] * ks[i];
          scores[s] = dot * att_scale;
          mx = std::max(mx, scores[s]);
        }
        double denom = 0.0;
        for (std::size_t s = 0; s < upto; ++s) {
          scores[s] = std::exp(scores[s] - mx);
          denom += scores[s];
        }
        double* ot = &o(t, hh * hv);
        for (std::size_t s = 0; s < upto; ++s) {
          const double p = scores[s] / denom;
          const double* vs = vc.data() + s * v_width + g * hv;
          for (std::size_t i = 0; i < hv; ++i) ot[i] += p * vs[i];
        }
      }
    }
    if (observe) observe(li, "wo_in", o);
    const Tensor attn_out = matmul(detail::maybe_quantize(o, aq), L.wo);
    for (std::size_t i = 0; i < h.size(); ++i) h.data()[i] += attn_out.data()[i];

    const Tensor mlp_in = detail::rms_normalize(h, L.mlp_norm);
    if (observe) observe(li, "mlp_in", mlp_in);
    const Tensor m_q = detail::maybe_quantize(mlp_in, aq);
    const Tensor gate = matmul(m_q, L.w_gate);
    Tensor z = matmul(m_q, L.w_up);
    for (std::size_t i = 0; i < z.size(); ++i) z.data()[i] *= detail::silu(gate.data()[i]);
    if (model.plan.r4) z = apply_right(z, *model.plan.r4);
    if (observe) observe(li, "down_in", z);
    const Tensor mlp_out = matmul(detail::maybe_quantize(z, aq), L.w_down);
    for (std::size_t i = 0; i < h.size(); ++i) h.data()[i] += mlp_out.data()[i];
  }
  cache.length += T;

  const Tensor f = detail::rms_normalize(h, model.final_norm);
  if (model.lm_head) return matmul(f, *model.lm_head);
  Tensor logits(T, cfg.vocab_size);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t vtok = 0; vtok < cfg.vocab_size; ++vtok) {
      double s = 0.0;
      const auto e = model.embedding.row(vtok);
      for (std::size_t i = 0; i < d; ++i) s += f(t, i) * e[i];
      logits(t, vtok) = s;
    }
  return logits;
}

/// Logits (len × vocab) for one sequence, causal.
inline Tensor forward_logits(const ModelGraph& model, std::span<const std::uint32_t> tokens,
                             const ActivationObserver& observe = {}) {
  KvCache cache(model.layers.size());
  return forward_chunk(model, cache, tokens, observe);
}

/// Independent sequences; no state is shared between them.
inline std::vector<Tensor> forward_batch(const ModelGraph& model,
                                         const std::vector<std::vector<std::uint32_t>>& batch) {
  std::vector<Tensor> out;
  out.reserve(batch.size());
  for (const auto& seq : batch) out.push_back(forward_logits(model, seq));
  return out;
}

/// exp(mean next-token NLL) over non-overlapping windows of seq_len. The NLL
/// is accumulated in bits, so a uniform predictor over 2^k tokens gives 2^k exactly.
inline double perplexity(const ModelGraph& model, std::span<const std::uint32_t> tokens,
                         std::size_t seq_len = 2048) {
  if (tokens.size() < 2) throw invalid_argument("perplexity: need at least 2 tokens");
  if (seq_len < 2) throw invalid_argument("perplexity: seq_len must be >= 2");
  double nll = 0.0;
  std::size_t count = 0;
  for (std::size_t start = 0; start + 1 < tokens.size(); start += seq_len) {
    const std::size_t len = std::min(seq_len, tokens.size() - start);
    if (len < 2) break;
    const Tensor logits = forward_logits(model, tokens.subspan(start, len));
    for (std::size_t t = 0; t + 1 < len; ++t) {
      const auto row = logits.row(t);
      const double mx = *std::max_element(row.begin(), row.end());
      double se = 0.0;
      for (double v : row) se += std::exp(v - mx);
      nll += std::log2(se) + (mx - row[tokens[start + t + 1]]) * std::numbers::log2e;
      ++count;
    }
  }
  return std::exp2(nll / static_cast<double>(count));
}

/// Samples `count` tokens from the model at temperature 1, in independent
/// sequences of seq_len each starting from a uniformly drawn token.
inline std::vector<std::uint32_t> sample_tokens(const ModelGraph& model, std::size_t count,
                                                std::size_t seq_len, std::uint64_t seed) {
  if (seq_len == 0) throw invalid_argument("sample_tokens: seq_len must be >= 1");
  Rng rng(seed);
  std::vector<std::uint32_t> out;
  out.reserve(count);
  const std::size_t vocab = model.config.vocab_size;
  while (out.size() < count) {
    KvCache cache(model.layers.size());
    std::uint32_t tok = static_cast<std::uint32_t>(rng.index(vocab));
    for (std::size_t t = 0; t < seq_len && out.size() < count; ++t) {
      out.push_back(tok);
      const std::uint32_t in[1] = {tok};
      const Tensor logits = forward_chunk(model, cache, in);
      const auto row = logits.row(0);
      const double mx = *std::max_element(row.begin(), row.end());
      double se = 0.0;
      for (double v : row) se += std::exp(v - mx);
      double u = rng.uniform() * se;
      std::uint32_t pick = static_cast<std::uint32_t>(vocab - 1);
      for (std::size_t j = 0; j < vocab; ++j) {
        u -= std::exp(row[j] - mx);
        if (u < 0.0) {
          pick = static_cast<std::uint32_t>(j);
          break;
        }
      }
      tok = pick;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Rewrites
// ---------------------------------------------------------------------------

namespace detail {

inline void scale_rows(Tensor& w, std::span<const double> s) {
  for (std::size_t r = 0; r < w.rows(); ++r)
    for (double& v : w.row(r)) v *= s[r];
}

inline bool all_ones(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return x == 1.0; });
}

}  // namespace detail

/// Absorbs every RMSNorm weight into the linear(s) that read it. With tied
/// embeddings and a non-unit final norm the LM head is materialized.
inline ModelGraph fold_norm_weights(ModelGraph model) {
  for (auto& L : model.layers) {
    detail::scale_rows(L.wq, L.attn_norm);
    detail::scale_rows(L.wk, L.attn_norm);
    detail::scale_rows(L.wv, L.attn_norm);
    std::fill(L.attn_norm.begin(), L.attn_norm.end(), 1.0);
    detail::scale_rows(L.w_gate, L.mlp_norm);
    detail::scale_rows(L.w_up, L.mlp_norm);
    std::fill(L.mlp_norm.begin(), L.mlp_norm.end(), 1.0);
  }
  if (!detail::all_ones(model.final_norm)) {
    if (!model.lm_head) model.lm_head = transpose(model.embedding);
    detail::scale_rows(*model.lm_head, model.final_norm);
    std::fill(model.final_norm.begin(), model.final_norm.end(), 1.0);
  }
  return model;
}

inline bool norms_folded(const ModelGraph& model) {
  if (!detail::all_ones(model.final_norm)) return false;
  return std::all_of(model.layers.begin(), model.layers.end(), [](const LayerWeights& L) {
    return detail::all_ones(L.attn_norm) && detail::all_ones(L.mlp_norm);
  });
}

/// Rotates the residual stream by r1 and merges it into the weights:
/// E ← E·r1, residual readers ← r1ᵀ·W, residual writers ← W·r1.
inline ModelGraph merge_r1(ModelGraph model, const Tensor& r1) {
  const std::size_t d = model.config.d_model;
  detail::require_dims(r1.rows() == d && r1.cols() == d, "merge_r1: rotation must be d_model x d_model");
  if (orthogonality_defect(r1) > 1e-6) throw invalid_argument("merge_r1: r1 is not orthogonal");
  if (!norms_folded(model))
    throw invalid_argument("merge_r1: fold_norm_weights must be applied first");
  const Tensor r1t = transpose(r1);
  model.embedding = matmul(model.embedding, r1);
  for (auto& L : model.layers) {
    L.wq = matmul(r1t, L.wq);
    L.wk = matmul(r1t, L.wk);
    L.wv = matmul(r1t, L.wv);
    L.w_gate = matmul(r1t, L.w_gate);
    L.w_up = matmul(r1t, L.w_up);
    L.wo = matmul(L.wo, r1);
    L.w_down = matmul(L.w_down, r1);
  }
  if (model.lm_head) model.lm_head = matmul(r1t, *model.lm_head);
  model.plan.r1 = model.plan.r1 ? matmul(*model.plan.r1, r1) : r1;
  return model;
}

/// Applies a per-head value-space map T (head_dim × e, T·Tᵀ = I) to every
/// layer: each KV head's value projection becomes V_g·T and each query
/// head's slice of the output projection becomes Tᵀ·O_h.
inline void apply_value_transform(ModelGraph& model, std::size_t layer, const Tensor& t) {
  const auto& cfg = model.config;
  auto& L = model.layers.at(layer);
  const std::size_t hv = L.wv.cols() / cfg.n_kv_heads;
  detail::require_dims(t.rows() == hv, "value transform: rows must equal current value head dim");
  const std::size_t e = t.cols();
  const std::size_t d = cfg.d_model;
  Tensor wv(d, cfg.n_kv_heads * e);
  for (std::size_t g = 0; g < cfg.n_kv_heads; ++g) {
    const Tensor vg = matmul(column_block(L.wv, g * hv, (g + 1) * hv), t);
    for (std::size_t r = 0; r < d; ++r)
      std::copy(vg.row(r).begin(), vg.row(r).end(), wv.row(r).begin() + g * e);
  }
  Tensor wo(cfg.n_heads * e, d);
  const Tensor tt = transpose(t);
  for (std::size_t h = 0; h < cfg.n_heads; ++h) {
    Tensor oh(hv, d);
    for (std::size_t r = 0; r < hv; ++r)
      std::copy(L.wo.row(h * hv + r).begin(), L.wo.row(h * hv + r).end(), oh.row(r).begin());
    const Tensor ph = matmul(tt, oh);
    for (std::size_t r = 0; r < e; ++r)
      std::copy(ph.row(r).begin(), ph.row(r).end(), wo.row(h * e + r).begin());
  }
  L.wv = std::move(wv);
  L.wo = std::move(wo);
}

/// Merges the (possibly expanded) Hadamard R2 into every layer's value and
/// output projections.
inline ModelGraph expand_r2(ModelGraph model, std::size_t expanded_head_dim) {
  if (model.plan.r2) throw invalid_argument("expand_r2: R2 already applied");
  if (expanded_head_dim < model.config.head_dim)
    throw invalid_argument("expand_r2: expanded head dim smaller than head_dim");
  const ExpandedRotation rot(model.config.head_dim, expanded_head_dim);
  const Tensor hhat = rot.materialize();
  for (std::size_t i = 0; i < model.layers.size(); ++i) apply_value_transform(model, i, hhat);
  model.plan.r2 = rot;
  return model;
}

/// Per-layer square value rotations (e.g. Cayley-optimized), merged like R2.
inline ModelGraph merge_value_rotations(ModelGraph model, const std::vector<Tensor>& per_layer) {
  if (per_layer.size() != model.layers.size())
    throw dimension_mismatch("merge_value_rotations: need one rotation per layer");
  for (std::size_t i = 0; i < per_layer.size(); ++i) {
    if (per_layer[i].rows() != per_layer[i].cols() || orthogonality_defect(per_layer[i]) > 1e-6)
      throw invalid_argument("merge_value_rotations: rotation is not square orthogonal");
    apply_value_transform(model, i, per_layer[i]);
  }
  return model;
}

/// Inserts the online rotation Ĥ (d_ffn → expanded_ffn) in front of every
/// down projection and replaces W_down by ĤᵀW_down.
inline ModelGraph expand_r4(ModelGraph model, std::size_t expanded_ffn) {
  if (model.plan.r4) throw invalid_argument("expand_r4: R4 already applied");
  if (expanded_ffn < model.config.d_ffn)
    throw invalid_argument("expand_r4: expanded size smaller than d_ffn");
  const ExpandedRotation rot(model.config.d_ffn, expanded_ffn);
  for (auto& L : model.layers) L.w_down = apply_left_transpose(L.w_down, rot);
  model.plan.r4 = rot;
  return model;
}

// ---------------------------------------------------------------------------
// Parameter counting
// ---------------------------------------------------------------------------

struct ParamCountOptions {
  std::optional<std::uint64_t> value_head_dim;  // expanded R2 width, default head_dim
  std::optional<std::uint64_t> down_in_dim;     // expanded R4 width, default d_ffn
  bool exclude_lm_head = false;                 // also drop an untied LM head
};

/// Closed-form parameter count. A tied LM head is never counted.
inline std::uint64_t count_params(const TinyLlmConfig& c, const ParamCountOptions& opt = {}) {
  const std::uint64_t d = c.d_model;
  const std::uint64_t hv = opt.value_head_dim.value_or(c.head_dim);
  const std::uint64_t fin = opt.down_in_dim.value_or(c.d_ffn);
  const std::uint64_t per_layer = 2 * d                            // norms
                                  + d * c.n_heads * c.head_dim      // wq
                                  + d * c.n_kv_heads * c.head_dim   // wk
                                  + d * c.n_kv_heads * hv           // wv
                                  + c.n_heads * hv * d              // wo
                                  + 2 * d * c.d_ffn                 // gate, up
                                  + fin * d;                        // down
  std::uint64_t total = std::uint64_t(c.vocab_size) * d + c.n_layers * per_layer + d;
  if (!c.tied_embeddings && !opt.exclude_lm_head) total += d * c.vocab_size;
  return total;
}

/// Reference architectures, used only for size arithmetic.
inline TinyLlmConfig llama_3_2_1b_config() { return {16, 2048, 32, 8, 64, 8192, 128256, 500000.0, true}; }
inline TinyLlmConfig llama_3_2_3b_config() { return {28, 3072, 24, 8, 128, 8192, 128256, 500000.0, true}; }
inline TinyLlmConfig llama_3_1_8b_config() { return {32, 4096, 32, 8, 128, 14336, 128256, 500000.0, false}; }

/// Parameter count of a materialized model, summed over its tensors.
inline std::uint64_t count_params(const ModelGraph& m) {
  std::uint64_t total = m.embedding.size() + m.final_norm.size();
  for (const auto& L : m.layers) {
    total += L.attn_norm.size() + L.mlp_norm.size();
    total += L.wq.size() + L.wk.size() + L.wv.size() + L.wo.size();
    total += L.w_gate.size() + L.w_up.size() + L.w_down.size();
  }
  if (!m.config.tied_embeddings && m.lm_head) total += m.lm_head->size();
  return total;
}

// ---------------------------------------------------------------------------
// Calibration capture
// ---------------------------------------------------------------------------

/// Splits `tokens` into up to n_samples windows of seq_len (the trailing
/// partial window is dropped unless it is the only one).
inline std::vector<std::span<const std::uint32_t>> calibration_windows(
    std::span<const std::uint32_t> tokens, std::size_t n_samples, std::size_t seq_len) {
  std::vector<std::span<const std::uint32_t>> out;
  for (std::size_t s = 0; s + seq_len <= tokens.size() && out.size() < n_samples; s += seq_len)
    out.push_back(tokens.subspan(s, seq_len));
  if (out.empty() && !tokens.empty()) out.push_back(tokens.subspan(0, std::min(seq_len, tokens.size())));
  return out;
}

inline std::string site_key(std::size_t layer, std::string_view site) { return layer_key(layer, site); }

/// Float (unquantized) input activations of every linear site, stacked over
/// the calibration windows. Keys are "layers.<i>.<site>".
inline std::map<std::string, Tensor> capture_layer_inputs(const ModelGraph& model,
                                                          std::span<const std::uint32_t> tokens,
                                                          std::size_t n_samples = 128,
                                                          std::size_t seq_len = 2048) {
  ModelGraph fp = model;
  fp.act_quant.reset();
  std::map<std::string, std::vector<double>> acc;
  std::map<std::string, std::size_t> width;
  for (auto window : calibration_windows(tokens, n_samples, seq_len)) {
    forward_logits(fp, window, [&](std::size_t layer, std::string_view site, const Tensor& x) {
      const std::string key = site_key(layer, site);
      auto& buf = acc[key];
      buf.insert(buf.end(), x.data().begin(), x.data().end());
      width[key] = x.cols();
    });
  }
  std::map<std::string, Tensor> out;
  for (auto& [key, buf] : acc) {
    const std::size_t w = width[key];
    const std::size_t rows = buf.size() / w;
    out.emplace(key, Tensor(rows, w, std::move(buf)));
  }
  return out;
}

/// Streaming variant: Σ XᵀX per site without keeping the activations.
inline std::map<std::string, HessianState> capture_hessians(const ModelGraph& model,
                                                            std::span<const std::uint32_t> tokens,
                                                            std::size_t n_samples,
                                                            std::size_t seq_len) {
  ModelGraph fp = model;
  fp.act_quant.reset();
  std::map<std::string, HessianState> out;
  for (auto window : calibration_windows(tokens, n_samples, seq_len)) {
    forward_logits(fp, window, [&](std::size_t layer, std::string_view site, const Tensor& x) {
      const std::string key = site_key(layer, site);
      auto it = out.find(key);
      if (it == out.end()) it = out.emplace(key, HessianState(x.cols())).first;
      it->second.add_batch(x);
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Quantization
// ---------------------------------------------------------------------------

/// Weight and activation schemes for one of the two supported configurations.
struct ModelQuantConfig {
  QuantScheme weights = QuantScheme::int4_sym();
  QuantScheme activations = QuantScheme::int4_asym();
  bool quantize_activations = true;
  bool use_gptq = true;
  bool act_order = true;
  double damping = 0.01;
  std::size_t block = 128;

  static ModelQuantConfig int4() { return {}; }
  static ModelQuantConfig mxfp4() {
    ModelQuantConfig c;
    c.weights = QuantScheme::mxfp4(GroupAxis::rows);
    c.activations = QuantScheme::mxfp4(GroupAxis::cols);
    return c;
  }
};

struct QuantizedModel {
  ModelGraph model;                                 // dequantized weights, act_quant set
  std::map<std::string, QuantizedTensor> weights;   // "layers.<i>.<linear>"
  std::map<std::string, double> layer_mse;          // ‖X(W − Q)‖²_F / (rows·cols), float inputs
};

/// Quantizes every decoder linear (embedding, norms and a tied LM head stay
/// in high precision). `hessians` supplies calibration statistics per site;
/// it is required for GPTQ and for the per-layer error report.
inline QuantizedModel quantize_model(const ModelGraph& model, const ModelQuantConfig& qc,
                                     const std::map<std::string, HessianState>& hessians) {
  QuantizedModel out{model, {}, {}};
  for (std::size_t li = 0; li < model.layers.size(); ++li) {
    for (std::string_view name : linear_names) {
      const std::string key = layer_key(li, name);
      const Tensor& w = model.linear(li, name);
      const auto hit = hessians.find(site_key(li, input_site_of(name)));
      QuantizedTensor q;
      if (qc.use_gptq) {
        if (hit == hessians.end())
          throw invalid_argument("quantize_model: no calibration data for " + key);
        q = gptq_quantize(w, finalize(hit->second, qc.damping), qc.weights, qc.act_order, qc.block);
      } else {
        q = quantize(w, qc.weights);
      }
      Tensor deq = dequantize(q);
      if (hit != hessians.end() && hit->second.nsamples > 0) {
        const double err = gram_weighted_error(hit->second.mean_gram(), w - deq);
        out.layer_mse[key] = err / static_cast<double>(w.cols());
      }
      out.model.linear(li, name) = std::move(deq);
      out.weights.emplace(key, std::move(q));
    }
  }
  if (qc.quantize_activations) out.model.act_quant = qc.activations;
  return out;
}

inline double mean_layer_mse(const QuantizedModel& qm) {
  if (qm.layer_mse.empty()) return 0.0;
  double s = 0.0;
  for (const auto& [_, v] : qm.layer_mse) s += v;
  return s / static_cast<double>(qm.layer_mse.size());
}

}  // namespace modex
