#pragma once

// Square and expanded (row-selected) Hadamard rotations.
//
// An order-m Hadamard matrix is built as the Kronecker product S ⊗ B of a
// Sylvester matrix S of order 2^k and a bundled base matrix B of order b,
// m = 2^k·b. The expanded rotation keeps the first n rows and scales by
// 1/√m, so it has orthonormal rows and its transpose is a left inverse.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "modex/errors.hpp"
#include "modex/hadamard_tables.hpp"
#include "modex/numerics.hpp"

namespace modex {

/// ±1 base matrices decoded from the embedded tables.
class BaseHadamardSet {
 public:
  static const BaseHadamardSet& instance() {
    static const BaseHadamardSet set;
    return set;
  }

  bool contains(std::size_t order) const { return tables_.count(order) != 0; }

  /// Row-major ±1 entries; throws unsupported_order for unknown orders.
  const std::vector<std::int8_t>& matrix(std::size_t order) const {
    auto it = tables_.find(order);
    if (it == tables_.end())
      throw unsupported_order("no bundled Hadamard matrix of order " + std::to_string(order));
    return it->second;
  }

  std::vector<std::size_t> orders() const {
    std::vector<std::size_t> out;
    for (const auto& [b, _] : tables_) out.push_back(b);
    return out;
  }

 private:
  BaseHadamardSet() {
    for (const auto& table : detail::base_hadamard_tables) {
      const std::size_t b = table.order;
      std::vector<std::int8_t> m(b * b);
      for (std::size_t i = 0; i < b; ++i) {
        const std::string_view hex = table.rows[i];
        for (std::size_t j = 0; j < b; ++j) {
          const char ch = hex[j / 4];
          const int nibble = ch <= '9' ? ch - '0' : ch - 'a' + 10;
          const bool bit = (nibble >> (3 - j % 4)) & 1;
          m[i * b + j] = bit ? 1 : -1;
        }
      }
      tables_.emplace(b, std::move(m));
    }
  }

  std::map<std::size_t, std::vector<std::int8_t>> tables_;
};

struct HadamardFactorization {
  std::size_t k = 0;  // Sylvester exponent
  std::size_t b = 1;  // base order, 1 or a bundled order

  bool operator==(const HadamardFactorization&) const = default;
};

/// m = 2^k·b with the largest k such that b is 1 or a bundled base order.
inline HadamardFactorization factorize_order(std::size_t m) {
  if (m == 0) throw unsupported_order("Hadamard order must be >= 1");
  const auto& base = BaseHadamardSet::instance();
  for (int k = std::countr_zero(m); k >= 0; --k) {
    const std::size_t b = m >> k;
    if (b == 1 || base.contains(b)) return {static_cast<std::size_t>(k), b};
  }
  throw unsupported_order("no Hadamard construction for order " + std::to_string(m));
}

inline bool is_supported_order(std::size_t m) {
  try {
    factorize_order(m);
    return true;
  } catch (const unsupported_order&) {
    return false;
  }
}

inline bool is_power_of_two(std::size_t v) { return v != 0 && (v & (v - 1)) == 0; }

/// Unnormalized Walsh–Hadamard butterfly on every row.
inline Tensor& fwht_inplace(Tensor& rows) {
  const std::size_t w = rows.cols();
  if (!is_power_of_two(w))
    throw invalid_argument("fwht: width " + std::to_string(w) + " is not a power of two");
  for (std::size_t r = 0; r < rows.rows(); ++r) {
    double* v = rows.row(r).data();
    for (std::size_t len = 1; len < w; len <<= 1)
      for (std::size_t i = 0; i < w; i += len << 1)
        for (std::size_t j = i; j < i + len; ++j) {
          const double a = v[j];
          const double b = v[j + len];
          v[j] = a + b;
          v[j + len] = a - b;
        }
  }
  return rows;
}

class ExpandedRotation {
 public:
  ExpandedRotation(std::size_t n, std::size_t m, std::optional<std::vector<double>> sign_flips = {})
      : n_(n), m_(m), fact_(factorize_order(m)), sign_flips_(std::move(sign_flips)) {
    if (n == 0 || m < n)
      throw invalid_argument("expanded rotation needs m >= n >= 1 (n=" + std::to_string(n) +
                             ", m=" + std::to_string(m) + ")");
    if (sign_flips_) {
      if (sign_flips_->size() != m)
        throw dimension_mismatch("sign_flips must have length m");
      for (double s : *sign_flips_)
        if (s != 1.0 && s != -1.0) throw invalid_argument("sign_flips entries must be +-1");
    }
    gamma_ = 1.0 / std::sqrt(static_cast<double>(m));
  }

  std::size_t n() const { return n_; }
  std::size_t m() const { return m_; }
  double gamma() const { return gamma_; }
  bool square() const { return n_ == m_; }
  const HadamardFactorization& factorization() const { return fact_; }
  const std::optional<std::vector<double>>& sign_flips() const { return sign_flips_; }

  /// Entry (i, j) of the unscaled m×m matrix S ⊗ B.
  int full_entry(std::size_t i, std::size_t j) const {
    const std::size_t b = fact_.b;
    const int s = (std::popcount((i / b) & (j / b)) & 1) ? -1 : 1;
    if (b == 1) return s;
    return s * BaseHadamardSet::instance().matrix(b)[(i % b) * b + (j % b)];
  }

  /// Dense n×m Ĥ, built entry by entry from the Kronecker definition.
  Tensor materialize() const {
    Tensor h(n_, m_);
    for (std::size_t i = 0; i < n_; ++i)
      for (std::size_t j = 0; j < m_; ++j) {
        double v = gamma_ * full_entry(i, j);
        if (sign_flips_) v *= (*sign_flips_)[j];
        h(i, j) = v;
      }
    return h;
  }

 private:
  std::size_t n_;
  std::size_t m_;
  HadamardFactorization fact_;
  std::optional<std::vector<double>> sign_flips_;
  double gamma_ = 1.0;
};

inline ExpandedRotation build_expanded(std::size_t n, std::size_t m,
                                       std::optional<std::vector<double>> sign_flips = {}) {
  return ExpandedRotation(n, m, std::move(sign_flips));
}

/// Square orthogonal Hadamard rotation of order n (dense).
inline Tensor hadamard_matrix(std::size_t n) { return build_expanded(n, n).materialize(); }

/// X·Ĥ (D×m): zero-pad to width m, multiply each base block by B, then run
/// the butterfly across blocks.
inline Tensor apply_right(const Tensor& x, const ExpandedRotation& rot) {
  detail::require_dims(x.cols() == rot.n(), "apply_right: x has " + std::to_string(x.cols()) +
                                                " columns, rotation expects " +
                                                std::to_string(rot.n()));
  const std::size_t m = rot.m();
  const std::size_t b = rot.factorization().b;
  const std::size_t blocks = m / b;
  const std::size_t live_blocks = (rot.n() + b - 1) / b;
  const std::int8_t* base = b > 1 ? BaseHadamardSet::instance().matrix(b).data() : nullptr;
  Tensor out(x.rows(), m);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto xin = x.row(r);
    double* y = out.row(r).data();
    for (std::size_t p = 0; p < live_blocks; ++p) {
      const std::size_t lo = p * b;
      const std::size_t hi = std::min(lo + b, rot.n());
      double* yb = y + lo;
      if (b == 1) {
        yb[0] = xin[lo];
        continue;
      }
      for (std::size_t i = lo; i < hi; ++i) {
        const double xi = xin[i];
        if (xi == 0.0) continue;
        const std::int8_t* brow = base + (i - lo) * b;
        for (std::size_t c = 0; c < b; ++c) yb[c] += brow[c] > 0 ? xi : -xi;
      }
    }
    for (std::size_t len = 1; len < blocks; len <<= 1)
      for (std::size_t i = 0; i < blocks; i += len << 1)
        for (std::size_t j = i; j < i + len; ++j) {
          double* u = y + j * b;
          double* v = y + (j + len) * b;
          for (std::size_t c = 0; c < b; ++c) {
            const double a = u[c];
            const double d = v[c];
            u[c] = a + d;
            v[c] = a - d;
          }
        }
    const double g = rot.gamma();
    if (rot.sign_flips()) {
      const auto& s = *rot.sign_flips();
      for (std::size_t j = 0; j < m; ++j) y[j] *= g * s[j];
    } else {
      for (std::size_t j = 0; j < m; ++j) y[j] *= g;
    }
  }
  return out;
}

/// Ĥᵀ·W (m×N′), computed as (Wᵀ·Ĥ)ᵀ on the fast path.
inline Tensor apply_left_transpose(const Tensor& w, const ExpandedRotation& rot) {
  detail::require_dims(w.rows() == rot.n(), "apply_left_transpose: w has " +
                                                std::to_string(w.rows()) +
                                                " rows, rotation expects " +
                                                std::to_string(rot.n()));
  return transpose(apply_right(transpose(w), rot));
}

/// X̂·Ĥᵀ (D×n): the left inverse applied to an expanded activation.
inline Tensor apply_right_transpose(const Tensor& xhat, const ExpandedRotation& rot) {
  detail::require_dims(xhat.cols() == rot.m(), "apply_right_transpose: width mismatch");
  return matmul(xhat, transpose(rot.materialize()));
}

}  // namespace modex
