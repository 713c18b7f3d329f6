#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace ifpn {

using Vec = std::vector<double>;

/// Thrown whenever two operands disagree on layout.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Shape4 {
  std::size_t n = 0;  // batch
  std::size_t c = 0;  // channels
  std::size_t h = 0;
  std::size_t w = 0;

  constexpr std::size_t volume() const { return n * c * h * w; }
  constexpr std::size_t plane() const { return h * w; }
  friend constexpr bool operator==(const Shape4&, const Shape4&) = default;

  std::string str() const {
    std::ostringstream os;
    os << "(" << n << "," << c << "," << h << "," << w << ")";
    return os.str();
  }
};

/// Dense row-major NCHW array of doubles.
class Array4 {
 public:
  Array4() = default;
  explicit Array4(Shape4 s, double fill = 0.0) : shape_(s), data_(s.volume(), fill) {}
  Array4(Shape4 s, Vec data) : shape_(s), data_(std::move(data)) {
    if (data_.size() != shape_.volume()) {
      throw ShapeError("Array4: data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_.str());
    }
  }

  const Shape4& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }

  double& operator()(std::size_t n, std::size_t c, std::size_t y, std::size_t x) {
    return data_[((n * shape_.c + c) * shape_.h + y) * shape_.w + x];
  }
  double operator()(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    return data_[((n * shape_.c + c) * shape_.h + y) * shape_.w + x];
  }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  /// Pointer to the (n, c) plane.
  double* plane(std::size_t n, std::size_t c) { return data_.data() + (n * shape_.c + c) * shape_.plane(); }
  const double* plane(std::size_t n, std::size_t c) const {
    return data_.data() + (n * shape_.c + c) * shape_.plane();
  }

  std::span<double> span() { return data_; }
  std::span<const double> span() const { return data_; }
  const Vec& vec() const { return data_; }
  Vec& vec() { return data_; }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Array4&, const Array4&) = default;

 private:
  Shape4 shape_{};
  Vec data_;
};

inline void require_same_shape(const Shape4& a, const Shape4& b, const char* what) {
  if (a != b) {
    throw ShapeError(std::string(what) + ": shape mismatch " + a.str() + " vs " + b.str());
  }
}

// ---------------------------------------------------------------------------
// Flat vector helpers used by the solvers.

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

/// y += alpha * x
inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  if (x.size() != y.size()) throw ShapeError("axpy: length mismatch");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

inline Vec sub(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("sub: length mismatch");
  Vec r(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) r[i] = a[i] - b[i];
  return r;
}

inline Vec add(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("add: length mismatch");
  Vec r(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) r[i] = a[i] + b[i];
  return r;
}

// ---------------------------------------------------------------------------
// Pyramids.

/// Ordered feature levels; level 0 is the finest. Each coarser level halves
/// height and width exactly and all levels share batch and channel counts.
class Pyramid {
 public:
  Pyramid() = default;
  explicit Pyramid(std::vector<Array4> levels) : levels_(std::move(levels)) { validate(); }

  /// Zero pyramid with `levels` levels and base spatial size h x w.
  static Pyramid zeros(std::size_t batch, std::size_t channels, std::size_t h, std::size_t w,
                       std::size_t levels) {
    std::vector<Array4> ls;
    for (std::size_t l = 0; l < levels; ++l) {
      if (l > 0) {
        if (h % 2 != 0 || w % 2 != 0) {
          throw ShapeError("Pyramid: base dims not divisible by 2^(levels-1)");
        }
        h /= 2;
        w /= 2;
      }
      ls.emplace_back(Shape4{batch, channels, h, w});
    }
    return Pyramid(std::move(ls));
  }

  static Pyramid zeros_like(const Pyramid& p) {
    std::vector<Array4> ls;
    for (const auto& a : p.levels_) ls.emplace_back(a.shape());
    return Pyramid(std::move(ls));
  }

  std::size_t num_levels() const { return levels_.size(); }
  Array4& operator[](std::size_t l) { return levels_[l]; }
  const Array4& operator[](std::size_t l) const { return levels_[l]; }
  const std::vector<Array4>& levels() const { return levels_; }

  std::vector<Shape4> shapes() const {
    std::vector<Shape4> s;
    for (const auto& a : levels_) s.push_back(a.shape());
    return s;
  }

  std::size_t total_size() const {
    std::size_t t = 0;
    for (const auto& a : levels_) t += a.size();
    return t;
  }

  friend bool operator==(const Pyramid&, const Pyramid&) = default;

 private:
  void validate() const {
    for (std::size_t l = 1; l < levels_.size(); ++l) {
      const Shape4& a = levels_[l - 1].shape();
      const Shape4& b = levels_[l].shape();
      if (a.n != b.n || a.c != b.c) {
        throw ShapeError("Pyramid: level " + std::to_string(l) + " batch/channels " + b.str() +
                         " differ from " + a.str());
      }
      if (a.h % 2 != 0 || a.w % 2 != 0 || b.h * 2 != a.h || b.w * 2 != a.w) {
        throw ShapeError("Pyramid: level " + std::to_string(l) + " shape " + b.str() +
                         " is not half of " + a.str());
      }
    }
  }

  std::vector<Array4> levels_;
};

inline void require_same_layout(const Pyramid& a, const Pyramid& b, const char* what) {
  if (a.num_levels() != b.num_levels()) {
    throw ShapeError(std::string(what) + ": level count mismatch " + std::to_string(a.num_levels()) +
                     " vs " + std::to_string(b.num_levels()));
  }
  for (std::size_t l = 0; l < a.num_levels(); ++l) require_same_shape(a[l].shape(), b[l].shape(), what);
}

// ---------------------------------------------------------------------------
// Flat vectors with a named segment layout.

struct Segment {
  std::string name;
  Shape4 shape;

  friend bool operator==(const Segment&, const Segment&) = default;
};

using Layout = std::vector<Segment>;

inline std::size_t layout_volume(const Layout& layout) {
  std::size_t t = 0;
  for (const auto& s : layout) t += s.shape.volume();
  return t;
}

struct FlatVector {
  Vec data;
  Layout layout;
};

inline Layout pyramid_layout(const Pyramid& p) {
  Layout layout;
  for (std::size_t l = 0; l < p.num_levels(); ++l) {
    layout.push_back({"level" + std::to_string(l + 1), p[l].shape()});
  }
  return layout;
}

inline FlatVector pack(const Pyramid& p) {
  FlatVector v{{}, pyramid_layout(p)};
  v.data.reserve(p.total_size());
  for (const auto& a : p.levels()) v.data.insert(v.data.end(), a.vec().begin(), a.vec().end());
  return v;
}

inline Pyramid unpack(std::span<const double> data, const Layout& layout) {
  if (layout_volume(layout) != data.size()) {
    throw ShapeError("unpack: layout volume " + std::to_string(layout_volume(layout)) +
                     " does not match vector length " + std::to_string(data.size()));
  }
  std::vector<Array4> ls;
  std::size_t off = 0;
  for (const auto& seg : layout) {
    const std::size_t n = seg.shape.volume();
    ls.emplace_back(seg.shape, Vec(data.begin() + off, data.begin() + off + n));
    off += n;
  }
  return Pyramid(std::move(ls));
}

inline Pyramid unpack(const FlatVector& v) { return unpack(v.data, v.layout); }

}  // namespace ifpn
