#pragma once

// Numerical checks of the nullspace growth and GPTQ error-bound claims for
// expanded rotations.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "modex/errors.hpp"
#include "modex/gptq.hpp"
#include "modex/hadamard.hpp"
#include "modex/numerics.hpp"
#include "modex/quantizers.hpp"
#include "modex/rng.hpp"

namespace modex {

// ---------------------------------------------------------------------------
// Nullspace growth
// ---------------------------------------------------------------------------

struct NullityReport {
  std::size_t rank_x = 0;
  std::size_t nullity_x = 0;
  std::size_t rank_xh = 0;
  std::size_t nullity_xh = 0;
  std::size_t n = 0;
  std::size_t m = 0;

  bool rank_preserved() const { return rank_x == rank_xh; }
  bool nullity_growth_exact() const { return nullity_xh - nullity_x == m - n && nullity_xh >= nullity_x; }
  bool holds() const { return rank_preserved() && nullity_growth_exact(); }
};

inline NullityReport nullity_report(const Tensor& x, const ExpandedRotation& rot, double rel_tol = 1e-8) {
  detail::require_dims(x.cols() == rot.n(), "nullity_report: x.cols must equal rot.n");
  const Tensor xh = apply_right(x, rot);
  NullityReport r;
  r.n = rot.n();
  r.m = rot.m();
  r.rank_x = numeric_rank(x, rel_tol);
  r.nullity_x = x.cols() - r.rank_x;
  r.rank_xh = numeric_rank(xh, rel_tol);
  r.nullity_xh = xh.cols() - r.rank_xh;
  return r;
}

// ---------------------------------------------------------------------------
// Projection terms
// ---------------------------------------------------------------------------

/// Which matrix supplies the trailing columns X_{≥j+1} of the projector.
enum class ProjectionReading {
  rotated,   // columns after j of XH, in GPTQ processing order
  original,  // columns after j of X, in natural order (j ≥ n gives the identity)
};

namespace detail {

/// Incrementally grown orthonormal basis (modified Gram–Schmidt, two passes).
class TrailingBasis {
 public:
  explicit TrailingBasis(std::size_t dim) : dim_(dim) {}

  /// Residual of v after projecting out the current basis.
  std::vector<double> residual(std::span<const double> v) const {
    std::vector<double> r(v.begin(), v.end());
    for (int pass = 0; pass < 2; ++pass)
      for (const auto& q : basis_) {
        double dot = 0.0;
        for (std::size_t i = 0; i < dim_; ++i) dot += q[i] * r[i];
        for (std::size_t i = 0; i < dim_; ++i) r[i] -= dot * q[i];
      }
    return r;
  }

  /// Adds v's direction unless it is (numerically) inside the span already.
  void add(std::span<const double> v, double rel_tol = 1e-10) {
    std::vector<double> r = residual(v);
    const double rn = norm2(r);
    if (rn <= rel_tol * std::max(norm2(v), 1e-300) || rn == 0.0) return;
    for (double& e : r) e /= rn;
    basis_.push_back(std::move(r));
  }

  /// (I − QQᵀ)·a, column by column.
  Tensor project(const Tensor& a) const {
    Tensor out(a.rows(), a.cols());
    for (std::size_t c = 0; c < a.cols(); ++c) {
      const Tensor col = column(a, c);
      const auto r = residual(col.data());
      for (std::size_t i = 0; i < a.rows(); ++i) out(i, c) = r[i];
    }
    return out;
  }

  std::size_t size() const { return basis_.size(); }

 private:
  std::size_t dim_;
  std::vector<std::vector<double>> basis_;
};

}  // namespace detail

/// Per-column projected norms ‖P⊥_{≥j+1}(XH)_j‖₂. `order` is the GPTQ
/// processing order over the columns of xh (identity if empty); entry j of
/// the result refers to column j of xh, not to its position in the order.
inline std::vector<double> projected_column_norms(const Tensor& xh, std::span<const std::size_t> order = {},
                                                  ProjectionReading reading = ProjectionReading::rotated,
                                                  const Tensor* x = nullptr) {
  const std::size_t cols = xh.cols();
  std::vector<std::size_t> perm(cols);
  std::iota(perm.begin(), perm.end(), 0);
  if (!order.empty()) {
    detail::require_dims(order.size() == cols, "projected_column_norms: order length mismatch");
    perm.assign(order.begin(), order.end());
  }
  std::vector<double> out(cols, 0.0);
  detail::TrailingBasis basis(xh.rows());
  if (reading == ProjectionReading::rotated) {
    for (std::size_t p = cols; p-- > 0;) {
      const Tensor col = column(xh, perm[p]);
      out[perm[p]] = norm2(basis.residual(col.data()));
      basis.add(col.data());
    }
    return out;
  }
  if (x == nullptr) throw invalid_argument("projected_column_norms: original reading needs x");
  // Column j of xh against span of x columns j+1..n-1.
  const std::size_t n = x->cols();
  for (std::size_t j = cols; j-- > 0;) {
    if (j + 1 < n) {
      const Tensor xc = column(*x, j + 1);
      basis.add(xc.data());
    }
    const Tensor col = column(xh, j);
    out[j] = norm2(basis.residual(col.data()));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Bound reports
// ---------------------------------------------------------------------------

struct BoundReport {
  double delta = 0.0;
  double term_max_proj = 0.0;
  double term_energy = 0.0;
  double bound = 0.0;
  double empirical_error = 0.0;
  bool satisfied = true;

  // Per output column: Δ of that column, its bound and its measured error.
  std::vector<double> column_delta;
  std::vector<double> column_bound;
  std::vector<double> column_error;
};

/// Which Δ enters the bound.
enum class DeltaRule {
  saturating,  // worst error over the scale's whole design range (max_saturating_error)
  in_range,    // half the widest local step, clamping excluded (max_rounding_error)
};

struct BoundOptions {
  bool act_order = true;  // processing order for the projections (and GPTQ)
  double damping = 0.01;
  ProjectionReading reading = ProjectionReading::rotated;
  DeltaRule delta_rule = DeltaRule::saturating;
};

namespace detail {

inline void require_full_column_rank(const Tensor& x) {
  if (x.rows() < x.cols())
    throw rank_deficient("bound requires D >= N (D=" + std::to_string(x.rows()) + ", N=" + std::to_string(x.cols()) + ")");
  const std::size_t r = numeric_rank(x);
  if (r != x.cols())
    throw rank_deficient("bound requires full column rank (rank " + std::to_string(r) + " of " +
                         std::to_string(x.cols()) + ")");
}

inline std::vector<std::size_t> processing_order(const Tensor& xh, bool act_order) {
  if (!act_order) {
    std::vector<std::size_t> p(xh.cols());
    std::iota(p.begin(), p.end(), 0);
    return p;
  }
  return act_order_permutation(matmul_tn(xh, xh));
}

}  // namespace detail

/// Right-hand side Δ√N·min{max_j ‖P⊥_{≥j+1}(XH)_j‖, √(‖X‖²_F/N)} for a
/// general h (N×M with orthonormal rows).
inline BoundReport gptq_bound(const Tensor& x, const Tensor& h, double delta, const BoundOptions& opt = {}) {
  detail::require_dims(x.cols() == h.rows(), "gptq_bound: x.cols must equal h.rows");
  if (!(delta > 0.0)) throw invalid_argument("gptq_bound: delta must be > 0");
  detail::require_full_column_rank(x);
  const Tensor xh = matmul(x, h);
  const auto order = detail::processing_order(xh, opt.act_order);
  const auto norms = projected_column_norms(xh, order, opt.reading, &x);
  BoundReport r;
  r.delta = delta;
  r.term_max_proj = *std::max_element(norms.begin(), norms.end());
  const double n = static_cast<double>(x.cols());
  r.term_energy = std::sqrt(frobenius_norm(x) * frobenius_norm(x) / n);
  r.bound = delta * std::sqrt(n) * std::min(r.term_max_proj, r.term_energy);
  return r;
}

inline BoundReport gptq_bound(const Tensor& x, const ExpandedRotation& rot, double delta,
                              const BoundOptions& opt = {}) {
  return gptq_bound(x, rot.materialize(), delta, opt);
}

namespace detail {

/// Δ per output column: the largest rounding error any entry of that column can see.
inline std::vector<double> column_deltas(const QuantizedTensor& q, DeltaRule rule) {
  double unit = 0.5;
  if (q.scheme().kind == QuantKind::mxfp4)
    unit = rule == DeltaRule::saturating ? 8.0 - e2m1_magnitudes[7]
                                         : 0.5 * (e2m1_magnitudes[7] - e2m1_magnitudes[6]);
  std::vector<double> d(q.cols(), 0.0);
  for (std::size_t r = 0; r < q.rows(); ++r)
    for (std::size_t c = 0; c < q.cols(); ++c) d[c] = std::max(d[c], unit * q.step_scale(r, c));
  return d;
}

}  // namespace detail

/// Quantizes Ĥᵀ·W with GPTQ against the Hessian of X·Ĥ and checks every
/// output column's error ‖XĤ(ŵ − q)‖₂ against its bound.
inline BoundReport empirical_vs_bound(const Tensor& x, const Tensor& w, const Tensor& h, const QuantScheme& scheme,
                                      const BoundOptions& opt = {}) {
  detail::require_dims(x.cols() == h.rows() && w.rows() == h.rows(), "empirical_vs_bound: shape mismatch");
  detail::require_full_column_rank(x);
  const Tensor xh = matmul(x, h);
  const Tensor wh = matmul_tn(h, w);
  HessianState hs(xh.cols());
  hs.add_batch(xh);
  const QuantizedTensor q = gptq_quantize(wh, finalize(hs, opt.damping), scheme, opt.act_order);
  const ReconstructionError err = reconstruction_error(xh, wh, q);

  const auto order = detail::processing_order(xh, opt.act_order);
  const auto norms = projected_column_norms(xh, order, opt.reading, &x);
  const double n = static_cast<double>(x.cols());
  const double max_proj = *std::max_element(norms.begin(), norms.end());
  const double energy = std::sqrt(frobenius_norm(x) * frobenius_norm(x) / n);
  const double factor = std::sqrt(n) * std::min(max_proj, energy);

  BoundReport r;
  r.column_delta = detail::column_deltas(q, opt.delta_rule);
  r.delta = *std::max_element(r.column_delta.begin(), r.column_delta.end());
  r.term_max_proj = max_proj;
  r.term_energy = energy;
  r.bound = r.delta * factor;
  r.column_error = err.per_column;
  r.empirical_error = *std::max_element(err.per_column.begin(), err.per_column.end());
  r.satisfied = true;
  for (std::size_t c = 0; c < q.cols(); ++c) {
    r.column_bound.push_back(r.column_delta[c] * factor);
    if (!(r.column_error[c] <= r.column_bound[c] * (1.0 + 1e-8))) r.satisfied = false;
  }
  return r;
}

inline BoundReport empirical_vs_bound(const Tensor& x, const Tensor& w, const ExpandedRotation& rot,
                                      const QuantScheme& scheme, const BoundOptions& opt = {}) {
  return empirical_vs_bound(x, w, rot.materialize(), scheme, opt);
}

// ---------------------------------------------------------------------------
// Supremum factor
// ---------------------------------------------------------------------------

struct SupremumReport {
  std::vector<double> ratios;  // term_max_proj(expanded) / term_max_proj(square), per seed
  double mean_ratio = 0.0;
  double min_ratio = 0.0;
  double max_ratio = 0.0;
  double factor = 1.0;             // √(n/m)
  double max_column_norm_error = 0.0;  // max_j |‖Ĥ_j‖₂ − √(n/m)|
  bool chain_holds = true;         // per-column and max-level spectral ceilings
  std::size_t instances = 0;
};

/// ‖P⊥_{≥j+1}·X·Ĥ_j‖ ≤ ‖P⊥_{≥j+1}·X‖₂·‖Ĥ_j‖₂ for every j, and the max over j
/// of the left side ≤ √(n/m)·max_j ‖P⊥_{≥j+1}·X‖₂. Natural column order.
inline bool spectral_chain_holds(const Tensor& x, const Tensor& h, double slack = 1e-10) {
  const Tensor xh = matmul(x, h);
  const std::size_t cols = xh.cols();
  const double factor = std::sqrt(double(h.rows()) / double(h.cols()));
  detail::TrailingBasis basis(xh.rows());
  double lhs_max = 0.0;
  double rhs_max = 0.0;
  bool ok = true;
  for (std::size_t j = cols; j-- > 0;) {
    const Tensor col = column(xh, j);
    const double lhs = norm2(basis.residual(col.data()));
    const double px = spectral_norm(basis.project(x));
    const double hj = frobenius_norm(column(h, j));
    if (lhs > px * hj * (1.0 + slack) + 1e-300) ok = false;
    lhs_max = std::max(lhs_max, lhs);
    rhs_max = std::max(rhs_max, px);
    basis.add(col.data());
  }
  return ok && lhs_max <= factor * rhs_max * (1.0 + slack);
}

/// Over `seeds` Gaussian X (d×n): ratio of the projection term under Ĥ(n, m)
/// to that under the square H(n), plus the analytic checks.
inline SupremumReport supremum_factor_check(std::size_t d, std::size_t n, std::size_t m, std::size_t seeds,
                                            std::uint64_t base_seed = 0) {
  if (m < n) throw invalid_argument("supremum_factor_check: m must be >= n");
  if (d < n) throw invalid_argument("supremum_factor_check: d must be >= n");
  const Tensor he = ExpandedRotation(n, m).materialize();
  const Tensor hs = ExpandedRotation(n, n).materialize();
  SupremumReport rep;
  rep.factor = std::sqrt(double(n) / double(m));
  for (std::size_t j = 0; j < m; ++j)
    rep.max_column_norm_error = std::max(rep.max_column_norm_error, std::abs(frobenius_norm(column(he, j)) - rep.factor));
  for (std::size_t s = 0; s < seeds; ++s) {
    Rng rng(base_seed + s);
    const Tensor x = random_normal(d, n, rng);
    const auto ne = projected_column_norms(matmul(x, he));
    const auto ns = projected_column_norms(matmul(x, hs));
    const double te = *std::max_element(ne.begin(), ne.end());
    const double ts = *std::max_element(ns.begin(), ns.end());
    rep.ratios.push_back(te / ts);
    if (!spectral_chain_holds(x, he)) rep.chain_holds = false;
    ++rep.instances;
  }
  if (!rep.ratios.empty()) {
    rep.mean_ratio = std::accumulate(rep.ratios.begin(), rep.ratios.end(), 0.0) / double(rep.ratios.size());
    rep.min_ratio = *std::min_element(rep.ratios.begin(), rep.ratios.end());
    rep.max_ratio = *std::max_element(rep.ratios.begin(), rep.ratios.end());
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Randomized sweep
// ---------------------------------------------------------------------------

struct SweepRow {
  std::uint64_t seed = 0;
  std::size_t n = 0;
  std::size_t m = 0;
  BoundReport report;
  double ratio = 1.0;  // term_max_proj(Ĥ(n, m)) / term_max_proj(H(n)) for the same X
};

/// One instance: X ~ N(0,1) of d×n, W ~ Student-t(3) of n×n.
inline SweepRow bound_instance(std::size_t d, std::size_t n, std::size_t m, const QuantScheme& scheme,
                               std::uint64_t seed, const BoundOptions& opt = {}) {
  if (d < n) throw invalid_argument("verify-bounds requires d >= n (d=" + std::to_string(d) + ", n=" + std::to_string(n) + ")");
  if (m < n) throw invalid_argument("verify-bounds requires m >= n");
  Rng rng(seed);
  const Tensor x = random_normal(d, n, rng);
  const Tensor w = random_student_t(n, n, rng);
  const Tensor he = ExpandedRotation(n, m).materialize();
  SweepRow row{seed, n, m, empirical_vs_bound(x, w, he, scheme, opt), 1.0};
  if (m != n) {
    const Tensor hs = ExpandedRotation(n, n).materialize();
    const Tensor xs = matmul(x, hs);
    const auto ns = projected_column_norms(xs, detail::processing_order(xs, opt.act_order), opt.reading, &x);
    row.ratio = row.report.term_max_proj / *std::max_element(ns.begin(), ns.end());
  }
  return row;
}

inline std::vector<SweepRow> bound_sweep(std::size_t d, std::size_t n, std::size_t m, const QuantScheme& scheme,
                                         std::size_t seeds, std::uint64_t base_seed = 0,
                                         const BoundOptions& opt = {}) {
  std::vector<SweepRow> rows;
  for (std::size_t s = 0; s < seeds; ++s) rows.push_back(bound_instance(d, n, m, scheme, base_seed + s, opt));
  return rows;
}

inline constexpr const char* bound_csv_header = "seed,n,m,delta,term_max_proj,term_energy,bound,empirical,satisfied,ratio";

inline void write_bound_csv(std::ostream& os, const std::vector<SweepRow>& rows) {
  os << bound_csv_header << '\n';
  const auto old = os.precision(17);
  for (const auto& r : rows) {
    const auto& b = r.report;
    os << r.seed << ',' << r.n << ',' << r.m << ',' << b.delta << ',' << b.term_max_proj << ',' << b.term_energy << ','
       << b.bound << ',' << b.empirical_error << ',' << (b.satisfied ? "true" : "false") << ',' << r.ratio << '\n';
  }
  os.precision(old);
}

}  // namespace modex
