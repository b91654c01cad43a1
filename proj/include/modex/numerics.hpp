#pragma once

// Dense row-major double matrices and the handful of factorizations the rest
// of the library needs. Everything here is a pure function of its inputs.

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "modex/errors.hpp"

namespace modex {

class Tensor {
 public:
  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Tensor(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    detail::require_dims(data_.size() == rows_ * cols_,
                         "Tensor: data length != rows * cols");
  }

  static Tensor identity(std::size_t n) {
    Tensor t(n, n);
    for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
    return t;
  }

  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    Tensor t(r, c);
    std::size_t i = 0;
    for (const auto& row : rows) {
      detail::require_dims(row.size() == c, "Tensor::from_rows: ragged rows");
      std::copy(row.begin(), row.end(), t.row(i++).begin());
    }
    return t;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) {
    assert(r < rows_ && c < cols_);
    return data_[r * cols_ + c];
  }
  double operator()(std::size_t r, std::size_t c) const {
    assert(r < rows_ && c < cols_);
    return data_[r * cols_ + c];
  }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  const std::vector<double>& storage() const { return data_; }

  bool operator==(const Tensor&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline bool all_finite(const Tensor& t) {
  return std::all_of(t.data().begin(), t.data().end(),
                     [](double v) { return std::isfinite(v); });
}

/// Fixed i-k-j loop order, so results are bit-reproducible.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_dims(a.cols() == b.rows(),
                       "matmul: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                           " * " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  Tensor out(a.rows(), b.cols());
  const std::size_t n = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double* o = out.row(i).data();
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      const double* bk = b.row(k).data();
      for (std::size_t j = 0; j < n; ++j) o[j] += aik * bk[j];
    }
  }
  return out;
}

inline Tensor transpose(const Tensor& a) {
  Tensor t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

/// aᵀ·b without materializing the transpose.
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  detail::require_dims(a.rows() == b.rows(), "matmul_tn: row counts differ");
  Tensor out(a.cols(), b.cols());
  for (std::size_t k = 0; k < a.rows(); ++k) {
    const double* bk = b.row(k).data();
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = a(k, i);
      if (aki == 0.0) continue;
      double* o = out.row(i).data();
      for (std::size_t j = 0; j < b.cols(); ++j) o[j] += aki * bk[j];
    }
  }
  return out;
}

inline Tensor operator+(const Tensor& a, const Tensor& b) {
  detail::require_dims(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] += b.data()[i];
  return out;
}

inline Tensor operator-(const Tensor& a, const Tensor& b) {
  detail::require_dims(a.rows() == b.rows() && a.cols() == b.cols(), "sub: shape mismatch");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] -= b.data()[i];
  return out;
}

inline Tensor operator*(double s, const Tensor& a) {
  Tensor out = a;
  for (double& v : out.data()) v *= s;
  return out;
}

inline double frobenius_norm(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v * v;
  return std::sqrt(s);
}

inline double max_abs(const Tensor& a) {
  double m = 0.0;
  for (double v : a.data()) m = std::max(m, std::abs(v));
  return m;
}

inline double norm2(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

inline Tensor column(const Tensor& a, std::size_t c) {
  Tensor out(a.rows(), 1);
  for (std::size_t i = 0; i < a.rows(); ++i) out(i, 0) = a(i, c);
  return out;
}

/// Columns [begin, end) of `a`.
inline Tensor column_block(const Tensor& a, std::size_t begin, std::size_t end) {
  detail::require_dims(begin <= end && end <= a.cols(), "column_block: bad range");
  Tensor out(a.rows(), end - begin);
  for (std::size_t i = 0; i < a.rows(); ++i)
    std::copy(a.row(i).begin() + begin, a.row(i).begin() + end, out.row(i).begin());
  return out;
}

inline Tensor select_columns(const Tensor& a, std::span<const std::size_t> idx) {
  Tensor out(a.rows(), idx.size());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < idx.size(); ++j) out(i, j) = a(i, idx[j]);
  return out;
}

inline Tensor select_rows(const Tensor& a, std::span<const std::size_t> idx) {
  Tensor out(idx.size(), a.cols());
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy(a.row(idx[i]).begin(), a.row(idx[i]).end(), out.row(i).begin());
  return out;
}

inline Tensor vstack(const Tensor& top, const Tensor& bottom) {
  if (top.empty() && top.rows() == 0) return bottom;
  detail::require_dims(top.cols() == bottom.cols(), "vstack: column counts differ");
  std::vector<double> d(top.data().begin(), top.data().end());
  d.insert(d.end(), bottom.data().begin(), bottom.data().end());
  return Tensor(top.rows() + bottom.rows(), top.cols(), std::move(d));
}

// ---------------------------------------------------------------------------
// Householder QR
// ---------------------------------------------------------------------------

struct QrResult {
  Tensor q;  // rows x cols, orthonormal columns
  Tensor r;  // cols x cols, upper triangular
};

namespace detail {

struct Householder {
  std::size_t start;      // first row the reflector touches
  std::vector<double> v;  // unit vector of length rows - start
};

inline void apply_reflector(const Householder& h, Tensor& a, std::size_t col_begin) {
  for (std::size_t j = col_begin; j < a.cols(); ++j) {
    double dot = 0.0;
    for (std::size_t i = 0; i < h.v.size(); ++i) dot += h.v[i] * a(h.start + i, j);
    dot *= 2.0;
    if (dot == 0.0) continue;
    for (std::size_t i = 0; i < h.v.size(); ++i) a(h.start + i, j) -= dot * h.v[i];
  }
}

struct RankRevealingQr {
  std::vector<Householder> reflectors;
  std::vector<std::size_t> pivots;  // input column owning each reflector
  Tensor reduced;                   // H_r ... H_1 · a
};

// Householder sweep that skips columns already (numerically) in the span of
// the earlier ones. Independent columns get a reflector each.
inline RankRevealingQr householder_sweep(const Tensor& a, double rel_tol) {
  RankRevealingQr out;
  out.reduced = a;
  Tensor& w = out.reduced;
  const std::size_t m = a.rows();
  double scale = 0.0;
  for (std::size_t j = 0; j < a.cols(); ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < m; ++i) s += a(i, j) * a(i, j);
    scale = std::max(scale, std::sqrt(s));
  }
  const double tol = rel_tol * scale;
  std::size_t r = 0;
  for (std::size_t k = 0; k < a.cols() && r < m; ++k) {
    double nrm = 0.0;
    for (std::size_t i = r; i < m; ++i) nrm += w(i, k) * w(i, k);
    nrm = std::sqrt(nrm);
    if (nrm <= tol || nrm == 0.0) continue;
    const double alpha = w(r, k) >= 0.0 ? -nrm : nrm;
    Householder h{r, std::vector<double>(m - r)};
    for (std::size_t i = r; i < m; ++i) h.v[i - r] = w(i, k);
    h.v[0] -= alpha;
    const double vn = norm2(h.v);
    for (double& x : h.v) x /= vn;
    apply_reflector(h, w, k);
    out.reflectors.push_back(std::move(h));
    out.pivots.push_back(k);
    ++r;
  }
  return out;
}

// Q·[I_k; 0] for the accumulated reflectors.
inline Tensor accumulate_q(const std::vector<Householder>& refl, std::size_t m, std::size_t k) {
  Tensor q(m, k);
  for (std::size_t i = 0; i < k; ++i) q(i, i) = 1.0;
  for (auto it = refl.rbegin(); it != refl.rend(); ++it) apply_reflector(*it, q, 0);
  return q;
}

}  // namespace detail

/// Thin QR via Householder reflections. A column numerically in the span of
/// the preceding ones does not get a reflector; its coefficients land in the
/// rows of the earlier independent columns and the trailing rows of R stay
/// zero. Q always has orthonormal columns. Signs are normalized so the pivot
/// entries of R are non-negative.
inline QrResult qr_thin(const Tensor& a, double rel_tol = 1e-12) {
  detail::require_dims(a.rows() >= a.cols(), "qr_thin: requires rows >= cols");
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  auto sweep = detail::householder_sweep(a, rel_tol);
  QrResult out{detail::accumulate_q(sweep.reflectors, m, n), Tensor(n, n)};
  const std::size_t rank = sweep.reflectors.size();
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t p = sweep.pivots[i];
    const double sign = sweep.reduced(i, p) < 0.0 ? -1.0 : 1.0;
    for (std::size_t j = p; j < n; ++j) out.r(i, j) = sign * sweep.reduced(i, j);
    if (sign < 0.0)
      for (std::size_t row = 0; row < m; ++row) out.q(row, i) = -out.q(row, i);
  }
  return out;
}

/// Orthonormal basis (as columns) of the column space of `a`; works for any
/// shape, including zero columns.
inline Tensor orthonormal_basis(const Tensor& a, double rel_tol = 1e-12) {
  if (a.cols() == 0) return Tensor(a.rows(), 0);
  auto sweep = detail::householder_sweep(a, rel_tol);
  return detail::accumulate_q(sweep.reflectors, a.rows(), sweep.reflectors.size());
}

/// P = I − QQᵀ for an orthonormal basis Q of span(cols).
inline Tensor orth_complement_projector(const Tensor& cols, double rel_tol = 1e-12) {
  const std::size_t n = cols.rows();
  Tensor p = Tensor::identity(n);
  const Tensor q = orthonormal_basis(cols, rel_tol);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < q.cols(); ++k) s += q(i, k) * q(j, k);
      p(i, j) -= s;
    }
  return p;
}

// ---------------------------------------------------------------------------
// Singular values (one-sided Jacobi), rank, spectral norm
// ---------------------------------------------------------------------------

/// Singular values in descending order. One-sided Jacobi rotations on the
/// columns of the taller orientation; converges to high relative accuracy.
inline std::vector<double> singular_values(const Tensor& a) {
  Tensor u = a.rows() >= a.cols() ? a : transpose(a);
  const std::size_t m = u.rows();
  const std::size_t n = u.cols();
  if (n == 0) return {};
  // Column-major copy makes the pairwise rotations contiguous.
  std::vector<std::vector<double>> col(n, std::vector<double>(m));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) col[j][i] = u(i, j);

  constexpr double eps = 1e-15;
  for (int sweep = 0; sweep < 80; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
          alpha += col[p][i] * col[p][i];
          beta += col[q][i] * col[q][i];
          gamma += col[p][i] * col[q][i];
        }
        if (gamma == 0.0 || std::abs(gamma) <= eps * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          const double xp = col[p][i];
          const double xq = col[q][i];
          col[p][i] = c * xp - s * xq;
          col[q][i] = s * xp + c * xq;
        }
      }
    }
    if (!rotated) break;
  }
  std::vector<double> sv(n);
  for (std::size_t j = 0; j < n; ++j) sv[j] = norm2(col[j]);
  std::sort(sv.begin(), sv.end(), std::greater<>());
  return sv;
}

/// Number of singular values above rel_tol·σ_max.
inline std::size_t numeric_rank(const Tensor& a, double rel_tol = 1e-8) {
  if (!(rel_tol > 0.0)) throw invalid_argument("numeric_rank: tol must be > 0");
  const auto sv = singular_values(a);
  if (sv.empty() || sv.front() == 0.0) return 0;
  const double cut = rel_tol * sv.front();
  return static_cast<std::size_t>(
      std::count_if(sv.begin(), sv.end(), [cut](double s) { return s > cut; }));
}

inline std::size_t numeric_nullity(const Tensor& a, double rel_tol = 1e-8) {
  return a.cols() - numeric_rank(a, rel_tol);
}

inline double spectral_norm(const Tensor& a) {
  const auto sv = singular_values(a);
  return sv.empty() ? 0.0 : sv.front();
}

// ---------------------------------------------------------------------------
// Cholesky and dense solves
// ---------------------------------------------------------------------------

/// Lower-triangular L with L·Lᵀ = h.
inline Tensor cholesky_lower(const Tensor& h) {
  detail::require_dims(h.rows() == h.cols(), "cholesky: matrix not square");
  const std::size_t n = h.rows();
  Tensor l(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    double d = h(j, j);
    for (std::size_t k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
    if (!(d > 0.0) || !std::isfinite(d))
      throw cholesky_failure("cholesky: matrix not positive definite at pivot " +
                             std::to_string(j));
    const double ljj = std::sqrt(d);
    l(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = h(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      l(i, j) = s / ljj;
    }
  }
  return l;
}

/// Inverse of a lower-triangular matrix.
inline Tensor lower_triangular_inverse(const Tensor& l) {
  const std::size_t n = l.rows();
  Tensor inv(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    inv(j, j) = 1.0 / l(j, j);
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = 0.0;
      for (std::size_t k = j; k < i; ++k) s += l(i, k) * inv(k, j);
      inv(i, j) = -s / l(i, i);
    }
  }
  return inv;
}

/// h⁻¹ for symmetric positive definite h.
inline Tensor spd_inverse(const Tensor& h) {
  const Tensor linv = lower_triangular_inverse(cholesky_lower(h));
  return matmul_tn(linv, linv);
}

/// Solves a·x = b by Gaussian elimination with partial pivoting.
inline Tensor solve(Tensor a, Tensor b) {
  detail::require_dims(a.rows() == a.cols() && a.rows() == b.rows(), "solve: shape mismatch");
  const std::size_t n = a.rows();
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t piv = k;
    for (std::size_t i = k + 1; i < n; ++i)
      if (std::abs(a(i, k)) > std::abs(a(piv, k))) piv = i;
    if (a(piv, k) == 0.0) throw numeric_error("solve: singular matrix");
    if (piv != k) {
      std::swap_ranges(a.row(k).begin(), a.row(k).end(), a.row(piv).begin());
      std::swap_ranges(b.row(k).begin(), b.row(k).end(), b.row(piv).begin());
    }
    for (std::size_t i = k + 1; i < n; ++i) {
      const double f = a(i, k) / a(k, k);
      if (f == 0.0) continue;
      for (std::size_t j = k; j < n; ++j) a(i, j) -= f * a(k, j);
      for (std::size_t j = 0; j < b.cols(); ++j) b(i, j) -= f * b(k, j);
    }
  }
  for (std::size_t kk = n; kk-- > 0;) {
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = b(kk, j);
      for (std::size_t i = kk + 1; i < n; ++i) s -= a(kk, i) * b(i, j);
      b(kk, j) = s / a(kk, kk);
    }
  }
  return b;
}

/// ‖aᵀa − I‖_F.
inline double orthogonality_defect(const Tensor& a) {
  return frobenius_norm(matmul_tn(a, a) - Tensor::identity(a.cols()));
}

}  // namespace modex
