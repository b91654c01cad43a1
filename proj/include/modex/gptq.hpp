#pragma once

// GPTQ: column-sequential weight quantization with inverse-Hessian error
// feedback. Weights are stored in×out, so the "columns" GPTQ walks over are
// the rows of W (input channels).

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "modex/errors.hpp"
#include "modex/numerics.hpp"
#include "modex/quantizers.hpp"

namespace modex {

/// Running Σ XᵀX over calibration rows.
struct HessianState {
  Tensor h;
  std::size_t nsamples = 0;

  HessianState() = default;
  explicit HessianState(std::size_t n) : h(n, n) {}

  std::size_t dim() const { return h.rows(); }

  void add_batch(const Tensor& x) {
    detail::require_dims(x.cols() == h.rows(), "hessian accumulate: batch has " +
                                                   std::to_string(x.cols()) + " columns, expected " +
                                                   std::to_string(h.rows()));
    const Tensor g = matmul_tn(x, x);
    for (std::size_t i = 0; i < h.size(); ++i) h.data()[i] += g.data()[i];
    nsamples += x.rows();
  }

  /// Σ XᵀX / nsamples.
  Tensor mean_gram() const {
    if (nsamples == 0) throw invalid_argument("hessian: no samples accumulated");
    return (1.0 / static_cast<double>(nsamples)) * h;
  }
};

inline HessianState accumulate(HessianState state, const Tensor& x_batch) {
  state.add_batch(x_batch);
  return state;
}

/// Mean Gram plus λI with λ = damping_frac·mean(diag). Channels that never
/// saw a non-zero input get a unit diagonal first, as in reference GPTQ.
inline Tensor finalize(const HessianState& state, double damping_frac = 0.01) {
  Tensor h = state.mean_gram();
  const std::size_t n = h.rows();
  for (std::size_t i = 0; i < n; ++i)
    if (h(i, i) == 0.0) h(i, i) = 1.0;
  double mean_diag = 0.0;
  for (std::size_t i = 0; i < n; ++i) mean_diag += h(i, i);
  mean_diag /= static_cast<double>(std::max<std::size_t>(n, 1));
  const double lambda = damping_frac * mean_diag;
  for (std::size_t i = 0; i < n; ++i) h(i, i) += lambda;
  cholesky_lower(h);  // throws cholesky_failure on degenerate calibration data
  return h;
}

/// Indices sorted by diag(h) descending, ties by ascending index.
inline std::vector<std::size_t> act_order_permutation(const Tensor& h) {
  detail::require_dims(h.rows() == h.cols(), "act_order_permutation: h not square");
  std::vector<std::size_t> perm(h.rows());
  std::iota(perm.begin(), perm.end(), 0);
  std::stable_sort(perm.begin(), perm.end(),
                   [&](std::size_t a, std::size_t b) { return h(a, a) > h(b, b); });
  return perm;
}

/// Quantizes w (N×N′) against the Hessian h (N×N, positive definite).
/// Scales come from the original w and stay fixed during the sweep. With
/// act_order the rows are visited in descending Hessian-diagonal order; the
/// result is always stored in the original row order.
inline QuantizedTensor gptq_quantize(const Tensor& w, const Tensor& h, const QuantScheme& scheme,
                                     bool act_order, std::size_t block = 128) {
  detail::require_dims(h.rows() == h.cols() && h.rows() == w.rows(),
                       "gptq_quantize: w is " + std::to_string(w.rows()) + "x" +
                           std::to_string(w.cols()) + ", h is " + std::to_string(h.rows()) + "x" +
                           std::to_string(h.cols()));
  if (block == 0) throw invalid_argument("gptq_quantize: block must be >= 1");
  const std::size_t n = w.rows();
  const std::size_t cols = w.cols();

  QuantizedTensor q = quantize(w, scheme);

  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  if (act_order) perm = act_order_permutation(h);

  Tensor work = select_rows(w, perm);
  Tensor hp(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) hp(i, j) = h(perm[i], perm[j]);

  // Upper factor U of H⁻¹ = UᵀU.
  const Tensor lower = cholesky_lower(spd_inverse(hp));
  auto u = [&lower](std::size_t i, std::size_t k) { return lower(k, i); };

  Tensor err(std::min(block, n), cols);
  for (std::size_t i1 = 0; i1 < n; i1 += block) {
    const std::size_t i2 = std::min(i1 + block, n);
    for (std::size_t i = i1; i < i2; ++i) {
      const double d = u(i, i);
      double* e = err.row(i - i1).data();
      for (std::size_t c = 0; c < cols; ++c) {
        const double x = work(i, c);
        const int code = q.encode_value(perm[i], c, x);
        q.set_code(perm[i], c, code);
        e[c] = (x - q.dequant_value(perm[i], c)) / d;
      }
      for (std::size_t k = i + 1; k < i2; ++k) {
        const double uik = u(i, k);
        if (uik == 0.0) continue;
        double* wk = work.row(k).data();
        for (std::size_t c = 0; c < cols; ++c) wk[c] -= uik * e[c];
      }
    }
    for (std::size_t k = i2; k < n; ++k) {
      double* wk = work.row(k).data();
      for (std::size_t i = i1; i < i2; ++i) {
        const double uik = u(i, k);
        if (uik == 0.0) continue;
        const double* e = err.row(i - i1).data();
        for (std::size_t c = 0; c < cols; ++c) wk[c] -= uik * e[c];
      }
    }
  }
  return q;
}

struct ReconstructionError {
  std::vector<double> per_column;  // ‖X(w_c − q_c)‖₂ per output column
  double frobenius = 0.0;
};

/// ‖X·W − X·dequant(q)‖.
inline ReconstructionError reconstruction_error(const Tensor& x, const Tensor& w,
                                                const QuantizedTensor& q) {
  detail::require_dims(x.cols() == w.rows() && w.rows() == q.rows() && w.cols() == q.cols(),
                       "reconstruction_error: shape mismatch");
  const Tensor diff = matmul(x, w - dequantize(q));
  ReconstructionError out;
  out.per_column.assign(diff.cols(), 0.0);
  for (std::size_t r = 0; r < diff.rows(); ++r)
    for (std::size_t c = 0; c < diff.cols(); ++c) out.per_column[c] += diff(r, c) * diff(r, c);
  double total = 0.0;
  for (double& v : out.per_column) {
    total += v;
    v = std::sqrt(v);
  }
  out.frobenius = std::sqrt(total);
  return out;
}

/// tr(Δᵀ·G·Δ) for Δ = w − dequant(q): the squared Frobenius error ‖XΔ‖²
/// when G = XᵀX, without needing X itself.
inline double gram_weighted_error(const Tensor& gram, const Tensor& delta) {
  detail::require_dims(gram.rows() == delta.rows(), "gram_weighted_error: shape mismatch");
  const Tensor gd = matmul(gram, delta);
  double s = 0.0;
  for (std::size_t i = 0; i < gd.size(); ++i) s += gd.data()[i] * delta.data()[i];
  return s;
}

}  // namespace modex
