#pragma once

// Forward primitives and their vector-Jacobian products. Conventions:
//   - activations are NCHW, kernels are (Cout, Cin, K, K), per-channel
//     vectors (bias, gain, gamma, beta) are (1, C, 1, 1);
//   - convolution is cross-correlation with zero padding (K-1)/2;
//   - bilinear upsampling uses half-pixel centers (align_corners = false).

#include <cmath>
#include <cstddef>
#include <vector>

#include "ifpn/array.hpp"

namespace ifpn {

inline constexpr double kGroupNormEps = 1e-5;

inline Shape4 channel_vector_shape(std::size_t c) { return {1, c, 1, 1}; }

// ---------------------------------------------------------------------------
// conv2d

inline Shape4 conv2d_output_shape(const Shape4& x, const Shape4& w, std::size_t stride) {
  if (w.h != w.w || (w.h != 1 && w.h != 3)) {
    throw ShapeError("conv2d: kernel must be 1x1 or 3x3, got " + w.str());
  }
  if (w.c != x.c) {
    throw ShapeError("conv2d: kernel " + w.str() + " expects " + std::to_string(w.c) +
                     " input channels, input is " + x.str());
  }
  if (stride != 1 && stride != 2) throw ShapeError("conv2d: stride must be 1 or 2");
  if (stride == 2 && (x.h % 2 != 0 || x.w % 2 != 0)) {
    throw ShapeError("conv2d: stride 2 needs even spatial dims, input is " + x.str());
  }
  return {x.n, w.n, x.h / stride, x.w / stride};
}

inline void check_bias(const Array4& b, std::size_t cout) {
  if (b.shape() != channel_vector_shape(cout)) {
    throw ShapeError("conv2d: bias " + b.shape().str() + " does not match " + std::to_string(cout) +
                     " output channels");
  }
}

inline Array4 conv2d(const Array4& x, const Array4& w, const Array4& b, std::size_t stride = 1) {
  const Shape4 ys = conv2d_output_shape(x.shape(), w.shape(), stride);
  check_bias(b, ys.c);
  const Shape4& xs = x.shape();
  const std::size_t k = w.shape().h;
  const long pad = static_cast<long>(k - 1) / 2;
  Array4 y(ys);
  for (std::size_t n = 0; n < ys.n; ++n) {
    for (std::size_t co = 0; co < ys.c; ++co) {
      double* out = y.plane(n, co);
      std::fill(out, out + ys.plane(), b[co]);
      for (std::size_t ci = 0; ci < xs.c; ++ci) {
        const double* in = x.plane(n, ci);
        for (std::size_t ky = 0; ky < k; ++ky) {
          for (std::size_t kx = 0; kx < k; ++kx) {
            const double wv = w(co, ci, ky, kx);
            if (wv == 0.0) continue;
            for (std::size_t oy = 0; oy < ys.h; ++oy) {
              const long iy = static_cast<long>(oy * stride + ky) - pad;
              if (iy < 0 || iy >= static_cast<long>(xs.h)) continue;
              const double* row = in + static_cast<std::size_t>(iy) * xs.w;
              double* orow = out + oy * ys.w;
              for (std::size_t ox = 0; ox < ys.w; ++ox) {
                const long ix = static_cast<long>(ox * stride + kx) - pad;
                if (ix < 0 || ix >= static_cast<long>(xs.w)) continue;
                orow[ox] += wv * row[ix];
              }
            }
          }
        }
      }
    }
  }
  return y;
}

struct Conv2dGrads {
  Array4 dx;
  Array4 dw;
  Array4 db;
};

inline Conv2dGrads conv2d_vjp(const Array4& x, const Array4& w, std::size_t stride, const Array4& dy) {
  const Shape4 ys = conv2d_output_shape(x.shape(), w.shape(), stride);
  require_same_shape(ys, dy.shape(), "conv2d_vjp cotangent");
  const Shape4& xs = x.shape();
  const std::size_t k = w.shape().h;
  const long pad = static_cast<long>(k - 1) / 2;
  Conv2dGrads g{Array4(xs), Array4(w.shape()), Array4(channel_vector_shape(ys.c))};
  for (std::size_t n = 0; n < ys.n; ++n) {
    for (std::size_t co = 0; co < ys.c; ++co) {
      const double* go = dy.plane(n, co);
      double bsum = 0.0;
      for (std::size_t i = 0; i < ys.plane(); ++i) bsum += go[i];
      g.db[co] += bsum;
      for (std::size_t ci = 0; ci < xs.c; ++ci) {
        const double* in = x.plane(n, ci);
        double* gin = g.dx.plane(n, ci);
        for (std::size_t ky = 0; ky < k; ++ky) {
          for (std::size_t kx = 0; kx < k; ++kx) {
            const double wv = w(co, ci, ky, kx);
            double wacc = 0.0;
            for (std::size_t oy = 0; oy < ys.h; ++oy) {
              const long iy = static_cast<long>(oy * stride + ky) - pad;
              if (iy < 0 || iy >= static_cast<long>(xs.h)) continue;
              const std::size_t roff = static_cast<std::size_t>(iy) * xs.w;
              const double* grow = go + oy * ys.w;
              for (std::size_t ox = 0; ox < ys.w; ++ox) {
                const long ix = static_cast<long>(ox * stride + kx) - pad;
                if (ix < 0 || ix >= static_cast<long>(xs.w)) continue;
                wacc += in[roff + ix] * grow[ox];
                gin[roff + ix] += wv * grow[ox];
              }
            }
            g.dw(co, ci, ky, kx) += wacc;
          }
        }
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// upsampling by a factor of two

enum class UpsampleMode { Nearest, Bilinear };

namespace detail {

// Source taps for one output coordinate of a 2x bilinear upsample.
struct Taps {
  std::size_t i0, i1;
  double w0, w1;
};

inline std::vector<Taps> bilinear_taps(std::size_t in_len) {
  std::vector<Taps> taps(in_len * 2);
  for (std::size_t o = 0; o < taps.size(); ++o) {
    double src = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
    if (src < 0.0) src = 0.0;
    const auto i0 = static_cast<std::size_t>(std::floor(src));
    const std::size_t i1 = std::min(i0 + 1, in_len - 1);
    const double frac = src - static_cast<double>(i0);
    taps[o] = {i0, i1, 1.0 - frac, frac};
  }
  return taps;
}

}  // namespace detail

inline Array4 upsample2(const Array4& x, UpsampleMode mode) {
  const Shape4& xs = x.shape();
  const Shape4 ys{xs.n, xs.c, xs.h * 2, xs.w * 2};
  Array4 y(ys);
  if (mode == UpsampleMode::Nearest) {
    for (std::size_t n = 0; n < xs.n; ++n)
      for (std::size_t c = 0; c < xs.c; ++c)
        for (std::size_t oy = 0; oy < ys.h; ++oy)
          for (std::size_t ox = 0; ox < ys.w; ++ox) y(n, c, oy, ox) = x(n, c, oy / 2, ox / 2);
    return y;
  }
  const auto ty = detail::bilinear_taps(xs.h);
  const auto tx = detail::bilinear_taps(xs.w);
  for (std::size_t n = 0; n < xs.n; ++n)
    for (std::size_t c = 0; c < xs.c; ++c)
      for (std::size_t oy = 0; oy < ys.h; ++oy)
        for (std::size_t ox = 0; ox < ys.w; ++ox) {
          const auto& a = ty[oy];
          const auto& b = tx[ox];
          y(n, c, oy, ox) = a.w0 * (b.w0 * x(n, c, a.i0, b.i0) + b.w1 * x(n, c, a.i0, b.i1)) +
                            a.w1 * (b.w0 * x(n, c, a.i1, b.i0) + b.w1 * x(n, c, a.i1, b.i1));
        }
  return y;
}

inline Array4 upsample2_vjp(const Shape4& xs, UpsampleMode mode, const Array4& dy) {
  require_same_shape(Shape4{xs.n, xs.c, xs.h * 2, xs.w * 2}, dy.shape(), "upsample2_vjp cotangent");
  Array4 dx(xs);
  const Shape4& ys = dy.shape();
  if (mode == UpsampleMode::Nearest) {
    for (std::size_t n = 0; n < xs.n; ++n)
      for (std::size_t c = 0; c < xs.c; ++c)
        for (std::size_t oy = 0; oy < ys.h; ++oy)
          for (std::size_t ox = 0; ox < ys.w; ++ox) dx(n, c, oy / 2, ox / 2) += dy(n, c, oy, ox);
    return dx;
  }
  const auto ty = detail::bilinear_taps(xs.h);
  const auto tx = detail::bilinear_taps(xs.w);
  for (std::size_t n = 0; n < xs.n; ++n)
    for (std::size_t c = 0; c < xs.c; ++c)
      for (std::size_t oy = 0; oy < ys.h; ++oy)
        for (std::size_t ox = 0; ox < ys.w; ++ox) {
          const auto& a = ty[oy];
          const auto& b = tx[ox];
          const double g = dy(n, c, oy, ox);
          dx(n, c, a.i0, b.i0) += a.w0 * b.w0 * g;
          dx(n, c, a.i0, b.i1) += a.w0 * b.w1 * g;
          dx(n, c, a.i1, b.i0) += a.w1 * b.w0 * g;
          dx(n, c, a.i1, b.i1) += a.w1 * b.w1 * g;
        }
  return dx;
}

// ---------------------------------------------------------------------------
// group normalization

struct GroupNormResult {
  Array4 y;
  Array4 xhat;           // normalized input, saved for the backward pass
  std::vector<double> inv_std;  // one per (sample, group)
};

inline GroupNormResult group_norm_full(const Array4& x, std::size_t groups, const Array4& gamma,
                                       const Array4& beta, double eps = kGroupNormEps) {
  const Shape4& s = x.shape();
  if (groups == 0 || s.c % groups != 0) {
    throw ShapeError("group_norm: " + std::to_string(groups) + " groups do not divide " +
                     std::to_string(s.c) + " channels");
  }
  require_same_shape(gamma.shape(), channel_vector_shape(s.c), "group_norm gamma");
  require_same_shape(beta.shape(), channel_vector_shape(s.c), "group_norm beta");
  const std::size_t cpg = s.c / groups;
  const std::size_t count = cpg * s.plane();
  GroupNormResult r{Array4(s), Array4(s), std::vector<double>(s.n * groups)};
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t g = 0; g < groups; ++g) {
      const double* in = x.plane(n, g * cpg);
      double mean = 0.0;
      for (std::size_t i = 0; i < count; ++i) mean += in[i];
      mean /= static_cast<double>(count);
      double var = 0.0;
      for (std::size_t i = 0; i < count; ++i) var += (in[i] - mean) * (in[i] - mean);
      var /= static_cast<double>(count);
      const double inv = 1.0 / std::sqrt(var + eps);
      r.inv_std[n * groups + g] = inv;
      for (std::size_t c = g * cpg; c < (g + 1) * cpg; ++c) {
        const double* xc = x.plane(n, c);
        double* xh = r.xhat.plane(n, c);
        double* out = r.y.plane(n, c);
        for (std::size_t i = 0; i < s.plane(); ++i) {
          xh[i] = (xc[i] - mean) * inv;
          out[i] = gamma[c] * xh[i] + beta[c];
        }
      }
    }
  }
  return r;
}

inline Array4 group_norm(const Array4& x, std::size_t groups, const Array4& gamma, const Array4& beta,
                         double eps = kGroupNormEps) {
  return group_norm_full(x, groups, gamma, beta, eps).y;
}

struct GroupNormGrads {
  Array4 dx;
  Array4 dgamma;
  Array4 dbeta;
};

inline GroupNormGrads group_norm_vjp(const Array4& xhat, const std::vector<double>& inv_std,
                                     std::size_t groups, const Array4& gamma, const Array4& dy) {
  const Shape4& s = xhat.shape();
  require_same_shape(s, dy.shape(), "group_norm_vjp cotangent");
  const std::size_t cpg = s.c / groups;
  const double count = static_cast<double>(cpg * s.plane());
  GroupNormGrads g{Array4(s), Array4(channel_vector_shape(s.c)), Array4(channel_vector_shape(s.c))};
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t grp = 0; grp < groups; ++grp) {
      double mean_d = 0.0;
      double mean_dx = 0.0;
      for (std::size_t c = grp * cpg; c < (grp + 1) * cpg; ++c) {
        const double* go = dy.plane(n, c);
        const double* xh = xhat.plane(n, c);
        for (std::size_t i = 0; i < s.plane(); ++i) {
          const double d = go[i] * gamma[c];
          mean_d += d;
          mean_dx += d * xh[i];
          g.dgamma[c] += go[i] * xh[i];
          g.dbeta[c] += go[i];
        }
      }
      mean_d /= count;
      mean_dx /= count;
      const double inv = inv_std[n * groups + grp];
      for (std::size_t c = grp * cpg; c < (grp + 1) * cpg; ++c) {
        const double* go = dy.plane(n, c);
        const double* xh = xhat.plane(n, c);
        double* gx = g.dx.plane(n, c);
        for (std::size_t i = 0; i < s.plane(); ++i) {
          gx[i] = inv * (go[i] * gamma[c] - mean_d - xh[i] * mean_dx);
        }
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// element-wise

inline Array4 relu(const Array4& x) {
  Array4 y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
  return y;
}

inline Array4 relu_vjp(const Array4& x, const Array4& dy) {
  require_same_shape(x.shape(), dy.shape(), "relu_vjp");
  Array4 dx(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) dx[i] = x[i] > 0.0 ? dy[i] : 0.0;
  return dx;
}

inline Array4 add(const Array4& a, const Array4& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  Array4 y(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) y[i] = a[i] + b[i];
  return y;
}

inline Array4 scale(const Array4& a, double s) {
  Array4 y(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) y[i] = a[i] * s;
  return y;
}

/// Multiplies every (n, c) plane by mask(n, c); the mask has shape (N, C, 1, 1).
inline Array4 channel_mul(const Array4& x, const Array4& mask) {
  const Shape4& s = x.shape();
  require_same_shape(mask.shape(), Shape4{s.n, s.c, 1, 1}, "channel_mul mask");
  Array4 y(s);
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      const double m = mask(n, c, 0, 0);
      const double* in = x.plane(n, c);
      double* out = y.plane(n, c);
      for (std::size_t i = 0; i < s.plane(); ++i) out[i] = m * in[i];
    }
  return y;
}

inline Pyramid add(const Pyramid& a, const Pyramid& b) {
  require_same_layout(a, b, "pyramid add");
  std::vector<Array4> ls;
  for (std::size_t l = 0; l < a.num_levels(); ++l) ls.push_back(add(a[l], b[l]));
  return Pyramid(std::move(ls));
}

inline Pyramid scale(const Pyramid& a, double s) {
  std::vector<Array4> ls;
  for (const auto& lvl : a.levels()) ls.push_back(scale(lvl, s));
  return Pyramid(std::move(ls));
}

// ---------------------------------------------------------------------------
// weight normalization: w[o] = g[o] * v[o] / |v[o]|

inline std::vector<double> direction_norms(const Array4& v) {
  const std::size_t per = v.size() / v.shape().n;
  std::vector<double> norms(v.shape().n);
  for (std::size_t o = 0; o < v.shape().n; ++o) {
    double s = 0.0;
    for (std::size_t i = 0; i < per; ++i) s += v[o * per + i] * v[o * per + i];
    norms[o] = std::sqrt(s);
  }
  return norms;
}

inline Array4 weight_normalize(const Array4& v, const Array4& gain) {
  const std::size_t cout = v.shape().n;
  require_same_shape(gain.shape(), channel_vector_shape(cout), "weight_normalize gain");
  const auto norms = direction_norms(v);
  const std::size_t per = v.size() / cout;
  Array4 w(v.shape());
  for (std::size_t o = 0; o < cout; ++o) {
    if (!(norms[o] > 0.0)) {
      throw std::invalid_argument("weight_normalize: direction for output channel " + std::to_string(o) +
                                  " has zero norm");
    }
    const double s = gain[o] / norms[o];
    for (std::size_t i = 0; i < per; ++i) w[o * per + i] = s * v[o * per + i];
  }
  return w;
}

struct WeightNormGrads {
  Array4 dv;
  Array4 dgain;
};

inline WeightNormGrads weight_normalize_vjp(const Array4& v, const Array4& gain, const Array4& dw) {
  require_same_shape(v.shape(), dw.shape(), "weight_normalize_vjp cotangent");
  const std::size_t cout = v.shape().n;
  const std::size_t per = v.size() / cout;
  const auto norms = direction_norms(v);
  WeightNormGrads g{Array4(v.shape()), Array4(gain.shape())};
  for (std::size_t o = 0; o < cout; ++o) {
    double proj = 0.0;
    for (std::size_t i = 0; i < per; ++i) proj += dw[o * per + i] * v[o * per + i];
    const double nrm = norms[o];
    g.dgain[o] = proj / nrm;
    const double s = gain[o] / nrm;
    const double t = gain[o] * proj / (nrm * nrm * nrm);
    for (std::size_t i = 0; i < per; ++i) g.dv[o * per + i] = s * dw[o * per + i] - t * v[o * per + i];
  }
  return g;
}

}  // namespace ifpn
