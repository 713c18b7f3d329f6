#pragma once

// The nonlinear pyramid transformation whose equilibrium defines the
// implicit pyramid. Three fusion topologies are supported:
//
//   DenseFPN        every output level sums all input levels: 1x1 lateral
//                   conv on the same level, 1x1 conv + nearest upsampling
//                   from coarser levels, chained stride-2 3x3 convs from
//                   finer levels.
//   ResDense        per-level residual block, then DenseFPN fusion.
//   ResPyramidConv  per-level residual block, then fusion over adjacent
//                   levels only: 3x3 conv (same level), 3x3 conv + bilinear
//                   upsampling (next coarser), stride-2 3x3 conv (next finer).
//
// Each fused level is passed through ReLU. Convolutions are weight
// normalized when configured (kernel = gain * direction / |direction|).

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "ifpn/array.hpp"
#include "ifpn/map.hpp"
#include "ifpn/ops.hpp"
#include "ifpn/tape.hpp"

namespace ifpn {

enum class Variant { DenseFPN, ResDense, ResPyramidConv };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::DenseFPN: return "dense_fpn";
    case Variant::ResDense: return "res_dense";
    case Variant::ResPyramidConv: return "res_pyramid_conv";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  if (s == "dense_fpn") return Variant::DenseFPN;
  if (s == "res_dense") return Variant::ResDense;
  if (s == "res_pyramid_conv") return Variant::ResPyramidConv;
  throw std::invalid_argument("unknown transform variant '" + s + "'");
}

struct TransformConfig {
  std::size_t levels = 3;
  std::size_t channels = 4;
  Variant variant = Variant::ResPyramidConv;
  std::size_t groups = 1;
  bool weight_norm = true;
  double dropout_rate = 0.0;

  void validate() const {
    if (levels < 2) throw std::invalid_argument("TransformConfig: need at least 2 levels");
    if (channels == 0) throw std::invalid_argument("TransformConfig: channels must be positive");
    if (groups == 0 || channels % groups != 0) {
      throw std::invalid_argument("TransformConfig: groups must divide channels");
    }
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
      throw std::invalid_argument("TransformConfig: dropout_rate must lie in [0, 1)");
    }
  }

  bool has_res_blocks() const { return variant != Variant::DenseFPN; }

  /// True when source level j (1-based) feeds output level i.
  bool connects(std::size_t i, std::size_t j) const {
    if (variant == Variant::ResPyramidConv) return (j + 1 >= i) && (j <= i + 1);
    return true;
  }

  friend bool operator==(const TransformConfig&, const TransformConfig&) = default;
};

/// One channel-wise mask per level, shape (N, C, 1, 1), fixed for a whole solve.
using DropoutMask = std::vector<Array4>;

inline DropoutMask sample_dropout_mask(const TransformConfig& cfg, std::size_t batch, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution keep(1.0 - cfg.dropout_rate);
  const double s = 1.0 / (1.0 - cfg.dropout_rate);
  DropoutMask m;
  for (std::size_t l = 0; l < cfg.levels; ++l) {
    Array4 a(Shape4{batch, cfg.channels, 1, 1});
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = keep(rng) ? s : 0.0;
    m.push_back(std::move(a));
  }
  return m;
}

// ---------------------------------------------------------------------------
// Parameter layout.

namespace detail {

inline std::string lvl(std::size_t l) { return std::to_string(l); }

struct ConvSpec {
  std::string prefix;
  std::size_t k;
  bool final_stage;  // last linear stage of a fusion path
};

/// All convolutions of the transform, in parameter order.
inline std::vector<ConvSpec> conv_specs(const TransformConfig& cfg) {
  std::vector<ConvSpec> specs;
  const std::size_t n = cfg.levels;
  if (cfg.has_res_blocks()) {
    for (std::size_t l = 1; l <= n; ++l) {
      specs.push_back({"res" + lvl(l) + ".conv1", 3, false});
      specs.push_back({"res" + lvl(l) + ".conv2", 3, false});
    }
  }
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= n; ++j) {
      if (!cfg.connects(i, j)) continue;
      const std::string p = "fuse" + lvl(i) + "_" + lvl(j);
      if (cfg.variant == Variant::ResPyramidConv) {
        specs.push_back({p, 3, true});
      } else if (j >= i) {
        specs.push_back({p, 1, true});
      } else {
        for (std::size_t s = 1; s <= i - j; ++s) specs.push_back({p + ".down" + lvl(s), 3, s == i - j});
      }
    }
  }
  return specs;
}

}  // namespace detail

inline Layout param_layout(const TransformConfig& cfg) {
  cfg.validate();
  const std::size_t c = cfg.channels;
  Layout layout;
  for (const auto& spec : detail::conv_specs(cfg)) {
    if (cfg.weight_norm) {
      layout.push_back({spec.prefix + ".v", {c, c, spec.k, spec.k}});
      layout.push_back({spec.prefix + ".g", channel_vector_shape(c)});
    } else {
      layout.push_back({spec.prefix + ".w", {c, c, spec.k, spec.k}});
    }
    layout.push_back({spec.prefix + ".b", channel_vector_shape(c)});
  }
  if (cfg.has_res_blocks()) {
    for (std::size_t l = 1; l <= cfg.levels; ++l) {
      for (const char* gn : {".gn1", ".gn2"}) {
        layout.push_back({"res" + detail::lvl(l) + gn + ".gamma", channel_vector_shape(c)});
        layout.push_back({"res" + detail::lvl(l) + gn + ".beta", channel_vector_shape(c)});
      }
    }
  }
  return layout;
}

struct GradBundle {
  ParamSet d_theta;
  Pyramid d_input;
};

// ---------------------------------------------------------------------------

class PyramidTransform {
 public:
  /// Everything recorded while evaluating the transform once.
  struct Record {
    Tape tape;
    std::vector<Var> inputs;
    std::vector<Var> params;
    std::vector<Var> outputs;
  };

  PyramidTransform(TransformConfig cfg, ParamSet params) : cfg_(cfg), params_(std::move(params)) {
    cfg_.validate();
    const Layout expected = param_layout(cfg_);
    const Layout got = params_.layout();
    bool ok = expected.size() == got.size();
    for (std::size_t i = 0; ok && i < expected.size(); ++i) {
      ok = expected[i].name == got[i].name && expected[i].shape == got[i].shape;
    }
    if (!ok) throw ShapeError("PyramidTransform: parameter layout does not match configuration");
  }

  const TransformConfig& config() const { return cfg_; }
  const ParamSet& params() const { return params_; }
  ParamSet& params() { return params_; }

  void check_input(const Pyramid& z) const {
    if (z.num_levels() != cfg_.levels) {
      throw ShapeError("PyramidTransform: expected " + std::to_string(cfg_.levels) + " levels, got " +
                       std::to_string(z.num_levels()));
    }
    if (z[0].shape().c != cfg_.channels) {
      throw ShapeError("PyramidTransform: expected " + std::to_string(cfg_.channels) + " channels, got " +
                       std::to_string(z[0].shape().c));
    }
  }

  Record record(const Pyramid& z, const DropoutMask* mask = nullptr) const {
    check_input(z);
    if (cfg_.dropout_rate > 0.0 && mask == nullptr) {
      throw std::invalid_argument("PyramidTransform: dropout enabled but no mask supplied");
    }
    Record r;
    Tape& t = r.tape;
    for (std::size_t l = 0; l < z.num_levels(); ++l) r.inputs.push_back(t.leaf(z[l]));
    for (std::size_t s = 0; s < params_.num_segments(); ++s) r.params.push_back(t.leaf(params_.at(s)));

    auto p = [&](const std::string& name) { return r.params[params_.index_of(name)]; };
    auto conv = [&](Var x, const std::string& prefix, std::size_t stride) {
      Var w = cfg_.weight_norm ? t.weight_norm(p(prefix + ".v"), p(prefix + ".g")) : p(prefix + ".w");
      return t.conv2d(x, w, p(prefix + ".b"), stride);
    };

    const std::size_t n = cfg_.levels;
    std::vector<Var> feats = r.inputs;
    if (cfg_.has_res_blocks()) {
      for (std::size_t l = 1; l <= n; ++l) {
        const std::string rb = "res" + detail::lvl(l);
        Var h = conv(feats[l - 1], rb + ".conv1", 1);
        h = t.relu(t.group_norm(h, cfg_.groups, p(rb + ".gn1.gamma"), p(rb + ".gn1.beta")));
        h = conv(h, rb + ".conv2", 1);
        h = t.group_norm(h, cfg_.groups, p(rb + ".gn2.gamma"), p(rb + ".gn2.beta"));
        feats[l - 1] = t.relu(t.add(feats[l - 1], h));
      }
    }

    for (std::size_t i = 1; i <= n; ++i) {
      std::optional<Var> sum;
      for (std::size_t j = 1; j <= n; ++j) {
        if (!cfg_.connects(i, j)) continue;
        const std::string fp = "fuse" + detail::lvl(i) + "_" + detail::lvl(j);
        Var x = feats[j - 1];
        if (cfg_.variant == Variant::ResPyramidConv) {
          if (j == i) {
            x = conv(x, fp, 1);
          } else if (j > i) {
            x = t.upsample2(conv(x, fp, 1), UpsampleMode::Bilinear);
          } else {
            x = conv(x, fp, 2);
          }
        } else {
          if (j >= i) {
            x = conv(x, fp, 1);
            for (std::size_t s = 0; s < j - i; ++s) x = t.upsample2(x, UpsampleMode::Nearest);
          } else {
            for (std::size_t s = 1; s <= i - j; ++s) {
              x = conv(x, fp + ".down" + detail::lvl(s), 2);
              if (s < i - j) x = t.relu(x);
            }
          }
        }
        sum = sum ? t.add(*sum, x) : x;
      }
      Var out = t.relu(*sum);
      if (mask != nullptr) out = t.channel_mul(out, t.leaf(mask->at(i - 1)));
      r.outputs.push_back(out);
    }
    return r;
  }

  Pyramid output(const Record& r) const {
    std::vector<Array4> ls;
    for (Var v : r.outputs) ls.push_back(r.tape.value(v));
    return Pyramid(std::move(ls));
  }

  Pyramid apply(const Pyramid& z, const DropoutMask* mask = nullptr) const { return output(record(z, mask)); }

  /// Pulls an output cotangent back through a recorded evaluation.
  GradBundle pullback(const Record& r, const Pyramid& u) const {
    if (u.num_levels() != r.outputs.size()) throw ShapeError("pullback: cotangent level count mismatch");
    std::vector<std::pair<Var, Array4>> seeds;
    for (std::size_t l = 0; l < r.outputs.size(); ++l) {
      require_same_shape(r.tape.value(r.outputs[l]).shape(), u[l].shape(), "pullback cotangent");
      seeds.emplace_back(r.outputs[l], u[l]);
    }
    auto grads = r.tape.backward(seeds);
    GradBundle g{ParamSet::zeros_like(params_), {}};
    for (std::size_t s = 0; s < r.params.size(); ++s) {
      if (grads[r.params[s].id].size() != 0) g.d_theta.at(s) = std::move(grads[r.params[s].id]);
    }
    std::vector<Array4> din;
    for (Var v : r.inputs) {
      din.push_back(grads[v.id].size() != 0 ? std::move(grads[v.id]) : Array4(r.tape.value(v).shape()));
    }
    g.d_input = Pyramid(std::move(din));
    return g;
  }

 private:
  TransformConfig cfg_;
  ParamSet params_;
};

/// u^T dG/dz and u^T dG/dtheta at z.
inline GradBundle vjp_transform(const PyramidTransform& g, const Pyramid& z, const Pyramid& u,
                                const DropoutMask* mask = nullptr) {
  require_same_layout(z, u, "vjp_transform");
  return g.pullback(g.record(z, mask), u);
}

// ---------------------------------------------------------------------------
// Flat adapter used by the solvers.

class TransformMap {
 public:
  using Trace = PyramidTransform::Record;

  TransformMap(const PyramidTransform& g, Layout layout, const DropoutMask* mask = nullptr)
      : g_(&g), layout_(std::move(layout)), mask_(mask) {}

  std::size_t state_size() const { return layout_volume(layout_); }
  std::size_t param_size() const { return g_->params().size(); }
  const Layout& layout() const { return layout_; }

  Vec apply(std::span<const double> z) const { return pack(g_->apply(unpack(z, layout_), mask_)).data; }
  Trace record(std::span<const double> z) const { return g_->record(unpack(z, layout_), mask_); }
  Vec output(const Trace& t) const { return pack(g_->output(t)).data; }
  MapVjp pullback(const Trace& t, std::span<const double> u) const {
    GradBundle b = g_->pullback(t, unpack(u, layout_));
    return {pack(b.d_input).data, b.d_theta.flat()};
  }

 private:
  const PyramidTransform* g_;
  Layout layout_;
  const DropoutMask* mask_;
};

static_assert(DifferentiableMap<TransformMap>);

// ---------------------------------------------------------------------------
// Initialization and Lipschitz probes.

inline Pyramid random_pyramid(std::size_t batch, std::size_t channels, std::size_t h, std::size_t w,
                              std::size_t levels, double rms, std::mt19937_64& rng) {
  Pyramid p = Pyramid::zeros(batch, channels, h, w, levels);
  std::normal_distribution<double> nd(0.0, rms);
  for (std::size_t l = 0; l < levels; ++l)
    for (std::size_t i = 0; i < p[l].size(); ++i) p[l][i] = nd(rng);
  return p;
}

struct ProbeOptions {
  std::size_t base = 16;      // base spatial size of probe pyramids
  std::size_t pairs = 100;    // random pairs for the sampled probe
  std::size_t points = 3;     // base points for the power iteration
  std::size_t power_iters = 20;
  std::uint64_t seed = 0x5eed;
};

inline std::size_t probe_base(const TransformConfig& cfg, std::size_t requested) {
  const std::size_t minimum = std::size_t{1} << (cfg.levels - 1);
  std::size_t b = std::max(requested, 2 * minimum);
  return (b / minimum) * minimum;
}

/// max over random pairs of |G(z1) - G(z2)| / |z1 - z2| with z1 of unit RMS
/// and z2 a perturbation of z1 at a random relative scale in [1e-3, 1].
inline double sampled_lipschitz(const PyramidTransform& g, const ProbeOptions& opt = {}) {
  const auto& cfg = g.config();
  const std::size_t base = probe_base(cfg, opt.base);
  std::mt19937_64 rng(opt.seed);
  std::uniform_real_distribution<double> logscale(-3.0, 0.0);
  double best = 0.0;
  for (std::size_t k = 0; k < opt.pairs; ++k) {
    Pyramid z1 = random_pyramid(1, cfg.channels, base, base, cfg.levels, 1.0, rng);
    Pyramid d = random_pyramid(1, cfg.channels, base, base, cfg.levels, std::pow(10.0, logscale(rng)), rng);
    Pyramid z2 = add(z1, d);
    auto f1 = pack(g.apply(z1)).data;
    auto f2 = pack(g.apply(z2)).data;
    best = std::max(best, norm2(sub(f1, f2)) / norm2(pack(d).data));
  }
  return best;
}

/// Largest local Jacobian norm found by power iteration on J^T J at a few
/// random unit-RMS points (J v by central differences, J^T u by the tape).
inline double jacobian_norm_probe(const PyramidTransform& g, const ProbeOptions& opt = {}) {
  const auto& cfg = g.config();
  const std::size_t base = probe_base(cfg, opt.base);
  std::mt19937_64 rng(opt.seed ^ 0x9e3779b97f4a7c15ULL);
  double best = 0.0;
  for (std::size_t k = 0; k < opt.points; ++k) {
    Pyramid z = random_pyramid(1, cfg.channels, base, base, cfg.levels, 1.0, rng);
    const Layout layout = pyramid_layout(z);
    TransformMap map(g, layout);
    const Vec zf = pack(z).data;
    Vec v = pack(random_pyramid(1, cfg.channels, base, base, cfg.levels, 1.0, rng)).data;
    auto trace = map.record(zf);
    double sigma = 0.0;
    for (std::size_t it = 0; it < opt.power_iters; ++it) {
      const double vn = norm2(v);
      if (vn == 0.0) break;
      for (double& x : v) x /= vn;
      const double h = 1e-6;
      Vec zp = zf, zm = zf;
      axpy(h, v, zp);
      axpy(-h, v, zm);
      Vec jv = sub(map.apply(zp), map.apply(zm));
      for (double& x : jv) x /= 2 * h;
      sigma = norm2(jv);
      v = map.pullback(trace, jv).d_input;
    }
    best = std::max(best, sigma);
  }
  return best;
}

/// Scales the final linear stage of every fusion path by s. With zero fusion
/// biases the transform is positively homogeneous in these stages, so the
/// whole map scales by s.
inline void scale_fusion_output(const TransformConfig& cfg, ParamSet& params, double s) {
  for (const auto& spec : detail::conv_specs(cfg)) {
    if (!spec.final_stage) continue;
    Array4& a = params[spec.prefix + (cfg.weight_norm ? ".g" : ".w")];
    a = scale(a, s);
  }
}

inline constexpr double kInitContraction = 0.9;

/// Random initialization: fan-in scaled uniform directions, gains equal to
/// the direction norms, zero biases, unit GN gains. The fusion output stages
/// are then rescaled so the probed Lipschitz constant is kInitContraction.
inline ParamSet init_params(const TransformConfig& cfg, std::uint64_t seed, const ProbeOptions& probe = {}) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  ParamSet p;
  for (const auto& seg : param_layout(cfg)) {
    Array4 a(seg.shape);
    const std::string& nm = seg.name;
    auto ends_with = [&](const char* suf) {
      const std::string s(suf);
      return nm.size() >= s.size() && nm.compare(nm.size() - s.size(), s.size(), s) == 0;
    };
    if (ends_with(".v") || ends_with(".w")) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(seg.shape.c * seg.shape.h * seg.shape.w));
      std::uniform_real_distribution<double> ud(-bound, bound);
      for (std::size_t i = 0; i < a.size(); ++i) a[i] = ud(rng);
    } else if (ends_with(".gamma")) {
      a = Array4(seg.shape, 1.0);
    }
    p.add(nm, std::move(a));
  }
  if (cfg.weight_norm) {
    for (const auto& spec : detail::conv_specs(cfg)) {
      const auto norms = direction_norms(p[spec.prefix + ".v"]);
      Array4& gain = p[spec.prefix + ".g"];
      for (std::size_t o = 0; o < norms.size(); ++o) gain[o] = norms[o];
    }
  }
  TransformConfig probe_cfg = cfg;
  probe_cfg.dropout_rate = 0.0;
  PyramidTransform gp(probe_cfg, p);
  const double lip = std::max(sampled_lipschitz(gp, probe), jacobian_norm_probe(gp, probe));
  if (lip > 0.0) scale_fusion_output(cfg, p, kInitContraction / lip);
  return p;
}

inline PyramidTransform make_transform(const TransformConfig& cfg, std::uint64_t seed) {
  return PyramidTransform(cfg, init_params(cfg, seed));
}

}  // namespace ifpn
