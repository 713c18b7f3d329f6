#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "ifpn/transform.hpp"

using namespace ifpn;

namespace {

constexpr Variant kVariants[] = {Variant::DenseFPN, Variant::ResDense, Variant::ResPyramidConv};

double max_abs_diff(const Pyramid& a, const Pyramid& b) {
  EXPECT_EQ(a.shapes(), b.shapes());
  const Vec x = pack(a).data, y = pack(b).data;
  double m = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) m = std::max(m, std::abs(x[i] - y[i]));
  return m;
}

// Randomizes every parameter, including biases and norm affines.
ParamSet random_params(const TransformConfig& cfg, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, 0.5);
  ParamSet p;
  for (const auto& seg : param_layout(cfg)) {
    Array4 a(seg.shape);
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = nd(rng);
    p.add(seg.name, std::move(a));
  }
  return p;
}

// ---------------------------------------------------------------------------
// Independent single-image evaluator for two levels of the adjacent-level
// fusion variant. Images are (C, H, W) in plain vectors.

struct Img {
  std::size_t c = 0, h = 0, w = 0;
  std::vector<double> d;
  Img(std::size_t c_, std::size_t h_, std::size_t w_) : c(c_), h(h_), w(w_), d(c_ * h_ * w_, 0.0) {}
  double& at(std::size_t k, std::size_t y, std::size_t x) { return d[(k * h + y) * w + x]; }
  double at(std::size_t k, std::size_t y, std::size_t x) const { return d[(k * h + y) * w + x]; }
};

Img from_level(const Array4& a) {
  Img im(a.shape().c, a.shape().h, a.shape().w);
  for (std::size_t k = 0; k < im.c; ++k)
    for (std::size_t y = 0; y < im.h; ++y)
      for (std::size_t x = 0; x < im.w; ++x) im.at(k, y, x) = a(0, k, y, x);
  return im;
}

// Effective 3x3 kernel of a weight-normalized conv, as [out][in][ky][kx].
std::vector<double> kernel(const ParamSet& p, const std::string& prefix, std::size_t c) {
  const Array4& v = p[prefix + ".v"];
  const Array4& g = p[prefix + ".g"];
  std::vector<double> k(c * c * 9);
  for (std::size_t o = 0; o < c; ++o) {
    double ss = 0.0;
    for (std::size_t i = 0; i < c * 9; ++i) ss += v[o * c * 9 + i] * v[o * c * 9 + i];
    for (std::size_t i = 0; i < c * 9; ++i) k[o * c * 9 + i] = g[o] * v[o * c * 9 + i] / std::sqrt(ss);
  }
  return k;
}

Img conv3(const Img& in, const ParamSet& p, const std::string& prefix, std::size_t stride) {
  const std::size_t c = in.c;
  const auto k = kernel(p, prefix, c);
  const Array4& b = p[prefix + ".b"];
  Img out(c, in.h / stride, in.w / stride);
  for (std::size_t o = 0; o < c; ++o)
    for (std::size_t y = 0; y < out.h; ++y)
      for (std::size_t x = 0; x < out.w; ++x) {
        double s = b[o];
        for (std::size_t i = 0; i < c; ++i)
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
              const long yy = static_cast<long>(y * stride) + dy;
              const long xx = static_cast<long>(x * stride) + dx;
              if (yy < 0 || xx < 0 || yy >= static_cast<long>(in.h) || xx >= static_cast<long>(in.w)) continue;
              s += k[((o * c + i) * 3 + static_cast<std::size_t>(dy + 1)) * 3 + static_cast<std::size_t>(dx + 1)] *
                   in.at(i, static_cast<std::size_t>(yy), static_cast<std::size_t>(xx));
            }
        out.at(o, y, x) = s;
      }
  return out;
}

// Single-group normalization over all channels and pixels.
Img gn(const Img& in, const Array4& gamma, const Array4& beta) {
  double m = 0.0;
  for (double v : in.d) m += v;
  m /= static_cast<double>(in.d.size());
  double var = 0.0;
  for (double v : in.d) var += (v - m) * (v - m);
  var /= static_cast<double>(in.d.size());
  Img out = in;
  for (std::size_t k = 0; k < in.c; ++k)
    for (std::size_t y = 0; y < in.h; ++y)
      for (std::size_t x = 0; x < in.w; ++x)
        out.at(k, y, x) = gamma[k] * (in.at(k, y, x) - m) / std::sqrt(var + 1e-5) + beta[k];
  return out;
}

Img relu(Img a) {
  for (double& v : a.d) v = v > 0.0 ? v : 0.0;
  return a;
}

Img plus(Img a, const Img& b) {
  for (std::size_t i = 0; i < a.d.size(); ++i) a.d[i] += b.d[i];
  return a;
}

// Bilinear x2, half-pixel aligned, edge clamped.
Img bilinear(const Img& in) {
  Img out(in.c, in.h * 2, in.w * 2);
  auto src = [](std::size_t o, std::size_t n, std::size_t& i0, std::size_t& i1, double& f) {
    double s = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
    if (s < 0) s = 0;
    i0 = static_cast<std::size_t>(s);
    f = s - static_cast<double>(i0);
    i1 = std::min(i0 + 1, n - 1);
  };
  for (std::size_t k = 0; k < in.c; ++k)
    for (std::size_t y = 0; y < out.h; ++y)
      for (std::size_t x = 0; x < out.w; ++x) {
        std::size_t y0, y1, x0, x1;
        double fy, fx;
        src(y, in.h, y0, y1, fy);
        src(x, in.w, x0, x1, fx);
        out.at(k, y, x) = (1 - fy) * ((1 - fx) * in.at(k, y0, x0) + fx * in.at(k, y0, x1)) +
                          fy * ((1 - fx) * in.at(k, y1, x0) + fx * in.at(k, y1, x1));
      }
  return out;
}

Img residual(const Img& z, const ParamSet& p, const std::string& r) {
  Img h = relu(gn(conv3(z, p, r + ".conv1", 1), p[r + ".gn1.gamma"], p[r + ".gn1.beta"]));
  h = gn(conv3(h, p, r + ".conv2", 1), p[r + ".gn2.gamma"], p[r + ".gn2.beta"]);
  return relu(plus(z, h));
}

}  // namespace

// ---------------------------------------------------------------------------

TEST(Transform, MatchesStraightLineOracleTwoLevels) {
  TransformConfig cfg{.levels = 2, .channels = 2, .variant = Variant::ResPyramidConv, .groups = 1};
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 3; ++trial) {
    const ParamSet p = random_params(cfg, rng);
    const Pyramid z = random_pyramid(1, 2, 8, 6, 2, 1.0, rng);
    const Pyramid got = PyramidTransform(cfg, p).apply(z);

    const Img r1 = residual(from_level(z[0]), p, "res1");
    const Img r2 = residual(from_level(z[1]), p, "res2");
    const Img o1 = relu(plus(conv3(r1, p, "fuse1_1", 1), bilinear(conv3(r2, p, "fuse1_2", 1))));
    const Img o2 = relu(plus(conv3(r1, p, "fuse2_1", 2), conv3(r2, p, "fuse2_2", 1)));

    const Img want[2] = {o1, o2};
    for (std::size_t l = 0; l < 2; ++l) {
      const Img g = from_level(got[l]);
      ASSERT_EQ(g.d.size(), want[l].d.size());
      for (std::size_t i = 0; i < g.d.size(); ++i) EXPECT_NEAR(g.d[i], want[l].d[i], 1e-12) << "level " << l;
    }
  }
}

TEST(Transform, ZeroGainsAndBiasesGiveZeroOutput) {
  std::mt19937_64 rng(2);
  for (Variant v : kVariants) {
    TransformConfig cfg{.levels = 3, .channels = 2, .variant = v};
    ParamSet p = random_params(cfg, rng);
    for (std::size_t s = 0; s < p.num_segments(); ++s) {
      const std::string& n = p.name(s);
      if (n.ends_with(".g") || n.ends_with(".b") || n.ends_with(".beta")) p.at(s) = Array4(p.at(s).shape());
    }
    const Pyramid z = random_pyramid(2, 2, 8, 8, 3, 1.0, rng);
    for (double x : pack(PyramidTransform(cfg, p).apply(z)).data) EXPECT_EQ(x, 0.0) << variant_name(v);
  }
}

TEST(Transform, ZeroInputWithZeroBiasesGivesZero) {
  for (Variant v : kVariants) {
    TransformConfig cfg{.levels = 3, .channels = 4, .variant = v, .groups = 2};
    const PyramidTransform g = make_transform(cfg, 3);
    const Pyramid z = Pyramid::zeros(1, 4, 8, 8, 3);
    for (double x : pack(g.apply(z)).data) EXPECT_EQ(x, 0.0) << variant_name(v);
  }
}

TEST(Transform, FusionScaledByZeroIsZeroMap) {
  std::mt19937_64 rng(4);
  for (Variant v : kVariants) {
    TransformConfig cfg{.levels = 2, .channels = 2, .variant = v};
    ParamSet p = init_params(cfg, 4);
    scale_fusion_output(cfg, p, 0.0);
    const Pyramid z = random_pyramid(1, 2, 4, 4, 2, 1.0, rng);
    for (double x : pack(PyramidTransform(cfg, p).apply(z)).data) EXPECT_EQ(x, 0.0);
  }
}

TEST(Transform, AdjacentFusionClipsAtBoundaries) {
  for (std::size_t n : {2, 3, 4, 5}) {
    TransformConfig cfg{.levels = n, .channels = 1, .variant = Variant::ResPyramidConv};
    for (std::size_t i = 1; i <= n; ++i) {
      std::size_t terms = 0;
      for (std::size_t j = 1; j <= n; ++j) terms += cfg.connects(i, j) ? 1 : 0;
      const std::size_t lo = i > 1 ? i - 1 : 1;
      EXPECT_EQ(terms, std::min(i + 1, n) - lo + 1) << "n=" << n << " i=" << i;
    }
  }
  TransformConfig three{.levels = 3, .channels = 1, .variant = Variant::ResPyramidConv};
  std::size_t level2 = 0, level1 = 0;
  for (std::size_t j = 1; j <= 3; ++j) {
    level1 += three.connects(1, j) ? 1 : 0;
    level2 += three.connects(2, j) ? 1 : 0;
  }
  EXPECT_EQ(level1, 2u);
  EXPECT_EQ(level2, 3u);
  ParamSet p = init_params(three, 1);
  EXPECT_FALSE(p.contains("fuse1_3.v"));
  EXPECT_FALSE(p.contains("fuse3_1.v"));
  EXPECT_TRUE(p.contains("fuse2_3.v"));
}

TEST(Transform, DistantLevelsDoNotReachAdjacentFusion) {
  std::mt19937_64 rng(5);
  TransformConfig cfg{.levels = 3, .channels = 2, .variant = Variant::ResPyramidConv};
  const PyramidTransform g(cfg, random_params(cfg, rng));
  Pyramid z = random_pyramid(1, 2, 8, 8, 3, 1.0, rng);
  const Pyramid a = g.apply(z);
  for (std::size_t i = 0; i < z[2].size(); ++i) z[2][i] += 1.0;
  const Pyramid b = g.apply(z);
  EXPECT_EQ(a[0], b[0]);
  EXPECT_NE(a[1], b[1]);

  TransformConfig dense{.levels = 3, .channels = 2, .variant = Variant::DenseFPN};
  const PyramidTransform d(dense, random_params(dense, rng));
  Pyramid y = random_pyramid(1, 2, 8, 8, 3, 1.0, rng);
  const Pyramid c = d.apply(y);
  for (std::size_t i = 0; i < y[2].size(); ++i) y[2][i] += 1.0;
  EXPECT_NE(c[0], d.apply(y)[0]);
}

TEST(Transform, PreservesLayoutAcrossConfigs) {
  std::mt19937_64 rng(6);
  for (Variant v : kVariants)
    for (std::size_t n : {2, 3, 4})
      for (std::size_t c : {1, 2, 4}) {
        TransformConfig cfg{.levels = n, .channels = c, .variant = v, .groups = c >= 2 ? 2u : 1u};
        const PyramidTransform g(cfg, random_params(cfg, rng));
        const std::size_t unit = std::size_t{1} << (n - 1);
        for (std::size_t batch : {1, 2}) {
          const Pyramid z = random_pyramid(batch, c, 2 * unit, 3 * unit, n, 1.0, rng);
          const Pyramid out = g.apply(z);
          EXPECT_EQ(out.shapes(), z.shapes());
          for (double x : pack(out).data) ASSERT_TRUE(std::isfinite(x));
        }
      }
}

TEST(Transform, RejectsLayoutMismatch) {
  TransformConfig cfg{.levels = 3, .channels = 2};
  const PyramidTransform g = make_transform(cfg, 1);
  EXPECT_THROW(g.apply(Pyramid::zeros(1, 2, 8, 8, 2)), ShapeError);
  EXPECT_THROW(g.apply(Pyramid::zeros(1, 3, 8, 8, 3)), ShapeError);
  TransformConfig other{.levels = 2, .channels = 2};
  EXPECT_THROW(PyramidTransform(other, init_params(cfg, 1)), ShapeError);
}

TEST(Transform, ConfigValidation) {
  EXPECT_THROW((TransformConfig{.levels = 1}).validate(), std::invalid_argument);
  EXPECT_THROW((TransformConfig{.channels = 0}).validate(), std::invalid_argument);
  EXPECT_THROW((TransformConfig{.channels = 6, .groups = 4}).validate(), std::invalid_argument);
  EXPECT_THROW((TransformConfig{.dropout_rate = 1.0}).validate(), std::invalid_argument);
  EXPECT_THROW((TransformConfig{.dropout_rate = -0.1}).validate(), std::invalid_argument);
  EXPECT_NO_THROW((TransformConfig{.channels = 6, .groups = 3, .dropout_rate = 0.5}).validate());
  EXPECT_THROW(parse_variant("nas_fpn"), std::invalid_argument);
  for (Variant v : kVariants) EXPECT_EQ(parse_variant(variant_name(v)), v);
}

TEST(Transform, ParameterShapesFollowConfig) {
  TransformConfig cfg{.levels = 3, .channels = 4, .variant = Variant::DenseFPN};
  const ParamSet p = init_params(cfg, 1);
  EXPECT_EQ(p["fuse1_1.v"].shape(), (Shape4{4, 4, 1, 1}));
  EXPECT_EQ(p["fuse1_3.v"].shape(), (Shape4{4, 4, 1, 1}));
  EXPECT_EQ(p["fuse3_1.down1.v"].shape(), (Shape4{4, 4, 3, 3}));
  EXPECT_TRUE(p.contains("fuse3_1.down2.v"));
  EXPECT_FALSE(p.contains("fuse3_1.down3.v"));
  EXPECT_FALSE(p.contains("res1.conv1.v"));
  cfg.weight_norm = false;
  EXPECT_TRUE(init_params(cfg, 1).contains("fuse1_1.w"));
}

// ---------------------------------------------------------------------------
// init_params

TEST(InitParams, SameSeedIsBitwiseIdentical) {
  for (Variant v : kVariants) {
    TransformConfig cfg{.levels = 3, .channels = 2, .variant = v};
    EXPECT_EQ(init_params(cfg, 42), init_params(cfg, 42));
    EXPECT_NE(init_params(cfg, 42), init_params(cfg, 43));
  }
}

TEST(InitParams, BiasesZeroNormAffinesIdentity) {
  const ParamSet p = init_params({.levels = 3, .channels = 2, .variant = Variant::ResDense}, 7);
  for (std::size_t s = 0; s < p.num_segments(); ++s) {
    const std::string& n = p.name(s);
    const double want = n.ends_with(".gamma") ? 1.0 : 0.0;
    if (n.ends_with(".b") || n.ends_with(".beta") || n.ends_with(".gamma")) {
      for (double x : p.at(s).vec()) EXPECT_EQ(x, want) << n;
    }
  }
}

TEST(InitParams, SampledLipschitzBelowOne) {
  for (Variant v : kVariants)
    for (std::size_t n : {2, 3})
      for (std::size_t c : {2, 4}) {
        TransformConfig cfg{.levels = n, .channels = c, .variant = v};
        const PyramidTransform g = make_transform(cfg, 100 + n * c);
        ProbeOptions fresh;
        fresh.seed = 987654;
        const double lip = sampled_lipschitz(g, fresh);
        EXPECT_LT(lip, 1.0) << variant_name(v) << " n=" << n << " c=" << c;
        EXPECT_GT(lip, 0.0);
      }
}

// ---------------------------------------------------------------------------
// weight normalization

TEST(WeightNorm, GainEqualToNormReturnsDirection) {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> nd;
  Array4 v(Shape4{3, 2, 3, 3});
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = nd(rng);
  const auto norms = direction_norms(v);
  Array4 g(channel_vector_shape(3), Vec(norms.begin(), norms.end()));
  const Array4 w = weight_normalize(v, g);
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_NEAR(w[i], v[i], 1e-14 * std::max(1.0, std::abs(v[i])));
}

TEST(WeightNorm, DirectionScaleDoesNotMatter) {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> nd;
  Array4 v(Shape4{2, 2, 3, 3}), g(channel_vector_shape(2));
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = nd(rng);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = nd(rng);
  const Array4 a = weight_normalize(v, g);
  for (double s : {10.0, 1e-3, 7.5}) {
    const Array4 b = weight_normalize(scale(v, s), g);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-15);
  }
}

TEST(WeightNorm, RowNormsEqualAbsoluteGain) {
  std::mt19937_64 rng(10);
  std::normal_distribution<double> nd;
  Array4 v(Shape4{4, 3, 3, 3}), g(channel_vector_shape(4));
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = nd(rng);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = 3.0 * nd(rng);
  const auto norms = direction_norms(weight_normalize(v, g));
  for (std::size_t o = 0; o < 4; ++o) EXPECT_NEAR(norms[o], std::abs(g[o]), 1e-12);
}

TEST(WeightNorm, ZeroDirectionRejected) {
  Array4 v(Shape4{2, 1, 1, 1}, Vec{1.0, 0.0});
  EXPECT_THROW(weight_normalize(v, Array4(channel_vector_shape(2), 1.0)), std::invalid_argument);
}

TEST(WeightNorm, ApplyInvariantToDirectionRescaling) {
  std::mt19937_64 rng(11);
  for (Variant v : kVariants) {
    TransformConfig cfg{.levels = 3, .channels = 2, .variant = v};
    const PyramidTransform g = make_transform(cfg, 11);
    const Pyramid z = random_pyramid(1, 2, 8, 8, 3, 1.0, rng);
    const Pyramid ref = g.apply(z);
    for (std::size_t s = 0; s < g.params().num_segments(); ++s) {
      if (!g.params().name(s).ends_with(".v")) continue;
      ParamSet p = g.params();
      p.at(s) = scale(p.at(s), 10.0);
      EXPECT_LE(max_abs_diff(PyramidTransform(cfg, p).apply(z), ref), 1e-10) << g.params().name(s);
    }
  }
}

// ---------------------------------------------------------------------------
// dropout

TEST(Dropout, RequiresMaskWhenEnabled) {
  TransformConfig cfg{.levels = 2, .channels = 2, .dropout_rate = 0.5};
  const PyramidTransform g = make_transform(cfg, 1);
  const Pyramid z = Pyramid::zeros(1, 2, 4, 4, 2);
  EXPECT_THROW(g.apply(z), std::invalid_argument);
  const DropoutMask m = sample_dropout_mask(cfg, 1, 5);
  EXPECT_NO_THROW(g.apply(z, &m));
}

TEST(Dropout, MaskIsDeterministicAndScaled) {
  TransformConfig cfg{.levels = 3, .channels = 8, .dropout_rate = 0.25};
  const DropoutMask a = sample_dropout_mask(cfg, 2, 77);
  EXPECT_EQ(a, sample_dropout_mask(cfg, 2, 77));
  ASSERT_EQ(a.size(), 3u);
  for (const auto& m : a) {
    EXPECT_EQ(m.shape(), (Shape4{2, 8, 1, 1}));
    for (double x : m.vec()) EXPECT_TRUE(x == 0.0 || std::abs(x - 1.0 / 0.75) < 1e-15);
  }
}

TEST(Dropout, FixedMaskGivesRepeatableOutput) {
  std::mt19937_64 rng(12);
  TransformConfig cfg{.levels = 2, .channels = 4, .dropout_rate = 0.5};
  const PyramidTransform g = make_transform(cfg, 12);
  const Pyramid z = random_pyramid(1, 4, 8, 8, 2, 1.0, rng);
  const DropoutMask m = sample_dropout_mask(cfg, 1, 3);
  const Pyramid a = g.apply(z, &m);
  EXPECT_EQ(a, g.apply(z, &m));
  for (std::size_t l = 0; l < 2; ++l)
    for (std::size_t c = 0; c < 4; ++c)
      if (m[l][c] == 0.0) {
        for (std::size_t i = 0; i < a[l].shape().h * a[l].shape().w; ++i) EXPECT_EQ(a[l].plane(0, c)[i], 0.0);
      }
}

TEST(Dropout, ZeroRateIsDeterministic) {
  std::mt19937_64 rng(13);
  const PyramidTransform g = make_transform({.levels = 3, .channels = 2}, 13);
  const Pyramid z = random_pyramid(2, 2, 8, 8, 3, 1.0, rng);
  EXPECT_EQ(g.apply(z), g.apply(z));
}
