#pragma once

#include <stdexcept>
#include <string>

namespace modex {

class error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class dimension_mismatch : public error {
 public:
  using error::error;
};

class unsupported_order : public error {
 public:
  using error::error;
};

class cholesky_failure : public error {
 public:
  using error::error;
};

class rank_deficient : public error {
 public:
  using error::error;
};

/// Non-finite input or a divergent iteration.
class numeric_error : public error {
 public:
  using error::error;
};

class invalid_argument : public error {
 public:
  using error::error;
};

class io_error : public error {
 public:
  using error::error;
};

namespace detail {

inline void require_dims(bool ok, const std::string& what) {
  if (!ok) throw dimension_mismatch(what);
}

}  // namespace detail
}  // namespace modex
