#pragma once

#include <cstddef>
#include <span>
#include <utility>

#include "ifpn/array.hpp"
#include "ifpn/map.hpp"

namespace ifpn {

/// G(z) = A z + c with theta = (A row-major, c). Small reference map with
/// closed-form fixed points, used to check the solvers.
class AffineMap {
 public:
  using Trace = Vec;  // the input z

  AffineMap(std::size_t dim, Vec a, Vec c) : dim_(dim), a_(std::move(a)), c_(std::move(c)) {
    if (a_.size() != dim_ * dim_ || c_.size() != dim_) throw ShapeError("AffineMap: bad sizes");
  }

  /// Scalar map z -> theta * z.
  static AffineMap scalar(double theta) { return AffineMap(1, {theta}, {0.0}); }

  std::size_t state_size() const { return dim_; }
  std::size_t param_size() const { return dim_ * dim_ + dim_; }
  const Vec& matrix() const { return a_; }
  const Vec& offset() const { return c_; }

  Vec apply(std::span<const double> z) const {
    if (z.size() != dim_) throw ShapeError("AffineMap: input size mismatch");
    Vec r(c_);
    for (std::size_t i = 0; i < dim_; ++i)
      for (std::size_t j = 0; j < dim_; ++j) r[i] += a_[i * dim_ + j] * z[j];
    return r;
  }

  Trace record(std::span<const double> z) const { return Vec(z.begin(), z.end()); }
  Vec output(const Trace& t) const { return apply(t); }

  MapVjp pullback(const Trace& z, std::span<const double> u) const {
    if (u.size() != dim_) throw ShapeError("AffineMap: cotangent size mismatch");
    MapVjp r{Vec(dim_, 0.0), Vec(param_size(), 0.0)};
    for (std::size_t i = 0; i < dim_; ++i) {
      for (std::size_t j = 0; j < dim_; ++j) {
        r.d_input[j] += a_[i * dim_ + j] * u[i];
        r.d_theta[i * dim_ + j] = u[i] * z[j];
      }
      r.d_theta[dim_ * dim_ + i] = u[i];
    }
    return r;
  }

 private:
  std::size_t dim_;
  Vec a_;
  Vec c_;
};

static_assert(DifferentiableMap<AffineMap>);

}  // namespace ifpn
