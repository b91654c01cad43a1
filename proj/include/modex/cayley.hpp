#pragma once

// Cayley-transform descent on square rotations against a layer-wise weight
// quantization objective, with straight-through gradients through the
// quantizer.

#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "modex/errors.hpp"
#include "modex/gptq.hpp"
#include "modex/hadamard.hpp"
#include "modex/model_graph.hpp"
#include "modex/numerics.hpp"
#include "modex/quantizers.hpp"

namespace modex {

/// A = g·rᵀ − r·gᵀ.
inline Tensor skew_project(const Tensor& g, const Tensor& r) {
  detail::require_dims(g.rows() == g.cols() && r.rows() == r.cols() && g.rows() == r.rows(),
                       "skew_project: g and r must be square and the same size");
  const Tensor a = matmul(g, transpose(r));
  const std::size_t n = a.rows();
  Tensor out(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) out(i, j) = a(i, j) - a(j, i);
  return out;
}

/// r′ = (I − (lr/2)·a)⁻¹ (I + (lr/2)·a) · r.
inline Tensor cayley_update(const Tensor& r, const Tensor& a, double lr) {
  detail::require_dims(a.rows() == a.cols() && a.rows() == r.rows(), "cayley_update: shape mismatch");
  const std::size_t n = a.rows();
  Tensor lhs = Tensor::identity(n);
  Tensor rhs = Tensor::identity(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      lhs(i, j) -= 0.5 * lr * a(i, j);
      rhs(i, j) += 0.5 * lr * a(i, j);
    }
  return solve(std::move(lhs), matmul(rhs, r));
}

/// One quantized linear affected by the rotation. The weight is stored in×out
/// in the unrotated basis and `gram` is XᵀX of its (unrotated) input.
/// The rotation acts blockwise: B = I_blocks ⊗ R.
///   reader: the layer input is rotated, weight becomes Bᵀ·W
///   writer: the layer output is rotated, weight becomes W·B
struct CayleyTerm {
  Tensor w;
  Tensor gram;
  bool reader = true;
  std::size_t blocks = 1;
};

/// Sum of tr(ΔᵀGΔ) over terms. No scheme means the quantizer is replaced by
/// the identity (a smooth surrogate used for gradient audits).
struct CayleyProblem {
  std::vector<CayleyTerm> terms;
  std::optional<QuantScheme> scheme;
};

namespace detail {

inline Tensor block_diag(const Tensor& r, std::size_t blocks) {
  const std::size_t k = r.rows();
  Tensor b(k * blocks, k * blocks);
  for (std::size_t p = 0; p < blocks; ++p)
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < k; ++j) b(p * k + i, p * k + j) = r(i, j);
  return b;
}

inline Tensor sum_diag_blocks(const Tensor& g, std::size_t blocks) {
  const std::size_t k = g.rows() / blocks;
  Tensor out(k, k);
  for (std::size_t p = 0; p < blocks; ++p)
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < k; ++j) out(i, j) += g(p * k + i, p * k + j);
  return out;
}

/// Quantized value and the straight-through mask (1 where the quantizer is
/// treated as the identity, 0 where it clips).
struct SteResult {
  Tensor q;
  Tensor mask;
};

inline SteResult ste_quantize(const Tensor& v, const std::optional<QuantScheme>& scheme) {
  if (!scheme) return {v, Tensor(v.rows(), v.cols(), 1.0)};
  const QuantizedTensor qt = quantize(v, *scheme);
  SteResult out{dequantize(qt), Tensor(v.rows(), v.cols())};
  for (std::size_t r = 0; r < v.rows(); ++r)
    for (std::size_t c = 0; c < v.cols(); ++c) {
      const double s = qt.step_scale(r, c);
      bool inside = true;
      switch (scheme->kind) {
        case QuantKind::int4_sym_per_channel: {
          const double u = v(r, c) / s;
          inside = u >= -8.5 && u <= 7.5;
          break;
        }
        case QuantKind::int4_asym_per_token: {
          const double u = v(r, c) / s + qt.zero_points()[r];
          inside = u >= -0.5 && u <= 15.5;
          break;
        }
        case QuantKind::mxfp4: inside = std::abs(v(r, c) / s) <= 7.0; break;
      }
      out.mask(r, c) = inside ? 1.0 : 0.0;
    }
  return out;
}

inline Tensor hadamard_product(const Tensor& a, const Tensor& b) {
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] *= b.data()[i];
  return out;
}

struct TermEval {
  double value = 0.0;
  Tensor grad_b;  // only filled when requested
};

inline TermEval eval_term(const CayleyTerm& t, const Tensor& r, const std::optional<QuantScheme>& scheme,
                          bool want_grad) {
  const Tensor b = block_diag(r, t.blocks);
  TermEval out;
  if (t.reader) {
    detail::require_dims(b.rows() == t.w.rows(), "cayley reader term: rotation size != weight rows");
    const Tensor v = matmul_tn(b, t.w);
    const SteResult q = ste_quantize(v, scheme);
    const Tensor delta = matmul(b, q.q) - t.w;
    const Tensor gd = matmul(t.gram, delta);
    for (std::size_t i = 0; i < gd.size(); ++i) out.value += gd.data()[i] * delta.data()[i];
    if (want_grad) {
      const Tensor c = matmul_tn(b, gd);
      out.grad_b = 2.0 * (matmul(gd, transpose(q.q)) +
                          matmul(t.w, transpose(hadamard_product(q.mask, c))));
    }
  } else {
    detail::require_dims(b.rows() == t.w.cols(), "cayley writer term: rotation size != weight cols");
    const Tensor v = matmul(t.w, b);
    const SteResult q = ste_quantize(v, scheme);
    const Tensor delta = matmul(q.q, transpose(b)) - t.w;
    const Tensor gd = matmul(t.gram, delta);
    for (std::size_t i = 0; i < gd.size(); ++i) out.value += gd.data()[i] * delta.data()[i];
    if (want_grad) {
      const Tensor c = matmul(gd, b);
      out.grad_b = 2.0 * (matmul_tn(t.w, hadamard_product(q.mask, c)) + matmul_tn(delta, matmul(t.gram, q.q)));
    }
  }
  return out;
}

}  // namespace detail

inline double cayley_objective(const CayleyProblem& p, const Tensor& r) {
  double f = 0.0;
  for (const auto& t : p.terms) f += detail::eval_term(t, r, p.scheme, false).value;
  return f;
}

/// Straight-through gradient of the objective with respect to r.
inline Tensor cayley_gradient(const CayleyProblem& p, const Tensor& r) {
  Tensor g(r.rows(), r.cols());
  for (const auto& t : p.terms) {
    const auto e = detail::eval_term(t, r, p.scheme, true);
    g = g + detail::sum_diag_blocks(e.grad_b, t.blocks);
  }
  return g;
}

/// Σ tr(WᵀGW): the objective's scale when every weight is quantized to zero.
inline double cayley_reference_scale(const CayleyProblem& p) {
  double s = 0.0;
  for (const auto& t : p.terms) s += gram_weighted_error(t.gram, t.w);
  return s;
}

struct CayleyOptions {
  std::size_t iters = 100;
  double lr = 1.5;
  std::size_t max_backtracks = 5;
};

struct CayleyOptState {
  Tensor r;
  double lr = 0.0;
  std::size_t iter = 0;
  std::vector<double> objective_trace;  // objective at the initial and every accepted iterate
};

class cayley_divergence : public numeric_error {
 public:
  cayley_divergence(const std::string& what, std::vector<double> trace)
      : numeric_error(what), trace_(std::move(trace)) {}
  const std::vector<double>& trace() const { return trace_; }

 private:
  std::vector<double> trace_;
};

/// Descends from `init`. The step uses the gradient of the objective divided
/// by Σ tr(WᵀGW), so `lr` is scale free. A step that raises the objective is
/// retried with half the learning rate, at most max_backtracks times; if none
/// is accepted the iterate stays put.
inline CayleyOptState optimize_rotation(const CayleyProblem& p, const Tensor& init,
                                        const CayleyOptions& opt = {}) {
  detail::require_dims(init.rows() == init.cols(), "optimize_rotation: init must be square");
  if (orthogonality_defect(init) > 1e-6)
    throw invalid_argument("optimize_rotation: init is not orthogonal");
  CayleyOptState st{init, opt.lr, 0, {}};
  double f = cayley_objective(p, st.r);
  st.objective_trace.push_back(f);
  if (!std::isfinite(f)) throw cayley_divergence("cayley: objective is not finite at init", st.objective_trace);
  const double ref = cayley_reference_scale(p);
  const double norm = ref > 0.0 ? 1.0 / ref : 1.0;
  for (std::size_t it = 0; it < opt.iters; ++it) {
    st.iter = it + 1;
    if (f == 0.0) break;
    const Tensor g = (-norm) * cayley_gradient(p, st.r);
    if (!all_finite(g)) throw cayley_divergence("cayley: gradient is not finite", st.objective_trace);
    const Tensor a = skew_project(g, st.r);
    double lr = opt.lr;
    for (std::size_t bt = 0; bt <= opt.max_backtracks; ++bt, lr *= 0.5) {
      const Tensor cand = cayley_update(st.r, a, lr);
      const double fc = cayley_objective(p, cand);
      if (std::isnan(fc)) {
        st.objective_trace.push_back(fc);
        throw cayley_divergence("cayley: objective became NaN", st.objective_trace);
      }
      if (fc <= f) {
        st.r = cand;
        f = fc;
        st.objective_trace.push_back(f);
        break;
      }
    }
    st.lr = lr;
  }
  return st;
}

// ---------------------------------------------------------------------------
// Model-level targets
// ---------------------------------------------------------------------------

namespace detail {

inline const HessianState& site_state(const std::map<std::string, HessianState>& h, std::size_t layer,
                                      std::string_view site) {
  auto it = h.find(site_key(layer, site));
  if (it == h.end()) throw invalid_argument("cayley: no calibration statistics for " + site_key(layer, site));
  return it->second;
}

}  // namespace detail

/// R1 problem: every residual reader and writer of every layer. `model` must
/// have folded norms and no R1 merged yet; `hessians` are captured from it.
inline CayleyProblem r1_problem(const ModelGraph& model, const std::map<std::string, HessianState>& hessians,
                                std::optional<QuantScheme> scheme) {
  CayleyProblem p{{}, scheme};
  for (std::size_t li = 0; li < model.layers.size(); ++li) {
    for (std::string_view name : linear_names) {
      const bool reader = name != "wo" && name != "w_down";
      const Tensor g = detail::site_state(hessians, li, input_site_of(name)).mean_gram();
      p.terms.push_back({model.linear(li, name), g, reader, 1});
    }
  }
  return p;
}

/// Square R2 problem for one layer: wv writes the value space (one block per
/// KV head) and wo reads it (one block per query head).
inline CayleyProblem r2_problem(const ModelGraph& model, std::size_t layer,
                                const std::map<std::string, HessianState>& hessians,
                                std::optional<QuantScheme> scheme) {
  const auto& c = model.config;
  const auto& L = model.layers.at(layer);
  CayleyProblem p{{}, scheme};
  p.terms.push_back({L.wv, detail::site_state(hessians, layer, "attn_in").mean_gram(), false, c.n_kv_heads});
  p.terms.push_back({L.wo, detail::site_state(hessians, layer, "wo_in").mean_gram(), true, c.n_heads});
  return p;
}

/// Hadamard-initialized R1 optimization.
inline CayleyOptState optimize_r1(const ModelGraph& model, const std::map<std::string, HessianState>& hessians,
                                  std::optional<QuantScheme> scheme, const CayleyOptions& opt = {}) {
  return optimize_rotation(r1_problem(model, hessians, scheme), hadamard_matrix(model.config.d_model), opt);
}

/// Hadamard-initialized square R2 rotations, one per layer.
inline std::vector<Tensor> optimize_r2(const ModelGraph& model, const std::map<std::string, HessianState>& hessians,
                                       std::optional<QuantScheme> scheme, const CayleyOptions& opt = {}) {
  if (model.plan.r2) throw invalid_argument("optimize_r2: model already carries an R2 rotation");
  std::vector<Tensor> out;
  const Tensor init = hadamard_matrix(model.config.head_dim);
  for (std::size_t li = 0; li < model.layers.size(); ++li)
    out.push_back(optimize_rotation(r2_problem(model, li, hessians, scheme), init, opt).r);
  return out;
}

}  // namespace modex
