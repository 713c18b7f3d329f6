#pragma once

// Gradient verification: central differences against pullbacks, the
// dot-product test, implicit gradients against finite differences of a
// re-solved loss, and implicit against deep-unrolled gradients.
//
// Relative error of a coordinate is |got - expected| / max(|expected|, floor),
// where floor = kFdFloor * max_i |expected_i|. Coordinates whose true
// derivative is numerically zero would otherwise dominate the comparison.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "ifpn/implicit.hpp"
#include "ifpn/map.hpp"
#include "ifpn/solver.hpp"
#include "ifpn/transform.hpp"

namespace ifpn::harness {

inline constexpr double kFdFloor = 1e-3;

struct CoordMismatch {
  std::string what;  // "d_input" or "d_theta"
  std::size_t index = 0;
  double got = 0.0;
  double expected = 0.0;
  double rel_error = 0.0;
};

struct CheckResult {
  std::string name;
  bool pass = true;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::optional<CoordMismatch> worst;  // worst coordinate, set whenever anything was compared
  std::string detail;

  std::string summary() const {
    std::ostringstream os;
    os << (pass ? "PASS " : "FAIL ") << name << ": " << checked << " coords, max rel err " << max_rel_error;
    if (!pass && worst) {
      os << " at " << worst->what << "[" << worst->index << "] (got " << worst->got << ", expected "
         << worst->expected << ")";
    }
    if (!detail.empty()) os << "; " << detail;
    return os.str();
  }
};

namespace detail {

inline double inf_norm(std::span<const double> v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

/// Folds one block of coordinates into `r`.
inline void compare(CheckResult& r, const std::string& what, std::span<const double> got,
                    std::span<const double> expected, const std::vector<std::size_t>& indices, double tol) {
  const double floor = std::max(kFdFloor * inf_norm(expected), 1e-300);
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const std::size_t i = indices[k];
    const double e = expected[k];
    const double g = got[i];
    const double rel = std::abs(g - e) / std::max(std::abs(e), floor);
    ++r.checked;
    if (!r.worst || rel > r.max_rel_error || !std::isfinite(rel)) {
      r.max_rel_error = std::isfinite(rel) ? std::max(r.max_rel_error, rel) : rel;
      r.worst = CoordMismatch{what, i, g, e, rel};
    }
    if (!(rel <= tol)) r.pass = false;
  }
}

/// Up to `limit` indices from [0, n), evenly spread; all of them when limit is 0.
inline std::vector<std::size_t> pick(std::size_t n, std::size_t limit) {
  std::vector<std::size_t> idx;
  if (limit == 0 || limit >= n) {
    for (std::size_t i = 0; i < n; ++i) idx.push_back(i);
    return idx;
  }
  for (std::size_t k = 0; k < limit; ++k) idx.push_back(k * n / limit);
  return idx;
}

inline Vec random_vec(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  Vec v(n);
  for (double& x : v) x = nd(rng);
  return v;
}

}  // namespace detail

struct FdOptions {
  double step = 1e-5;
  double tol = 1e-5;
  std::size_t max_coords = 0;  // per block; 0 checks every coordinate
};

/// Evaluates the map at (z, theta) without touching any shared state.
using ApplyWithTheta = std::function<Vec(std::span<const double> z, std::span<const double> theta)>;

/// Central differences of <u, G(z; theta)> against map.pullback.
template <DifferentiableMap M>
CheckResult check_vjp_fd(const M& map, const ApplyWithTheta& apply, std::span<const double> theta,
                         std::span<const double> z, std::span<const double> u, const FdOptions& opt = {}) {
  CheckResult r;
  r.name = "vjp vs finite differences";
  const MapVjp got = vjp(map, z, u);
  auto objective = [&](std::span<const double> zz, std::span<const double> th) { return dot(u, apply(zz, th)); };

  const auto zi = detail::pick(z.size(), opt.max_coords);
  Vec expected;
  Vec zp(z.begin(), z.end());
  for (std::size_t i : zi) {
    const double z0 = zp[i];
    zp[i] = z0 + opt.step;
    const double fp = objective(zp, theta);
    zp[i] = z0 - opt.step;
    const double fm = objective(zp, theta);
    zp[i] = z0;
    expected.push_back((fp - fm) / (2.0 * opt.step));
  }
  detail::compare(r, "d_input", got.d_input, expected, zi, opt.tol);

  const auto ti = detail::pick(theta.size(), opt.max_coords);
  expected.clear();
  Vec tp(theta.begin(), theta.end());
  for (std::size_t i : ti) {
    const double t0 = tp[i];
    tp[i] = t0 + opt.step;
    const double fp = objective(z, tp);
    tp[i] = t0 - opt.step;
    const double fm = objective(z, tp);
    tp[i] = t0;
    expected.push_back((fp - fm) / (2.0 * opt.step));
  }
  detail::compare(r, "d_theta", got.d_theta, expected, ti, opt.tol);
  return r;
}

/// Dot-product test: <u, J v> with J v from a central difference along v,
/// against <J^T u, v> from the pullback, for `trials` random (u, v).
template <DifferentiableMap M>
CheckResult dot_product_test(const M& map, std::span<const double> z, std::size_t trials, std::uint64_t seed,
                             double step = 1e-5, double tol = 1e-6) {
  CheckResult r;
  r.name = "dot-product test";
  std::mt19937_64 rng(seed);
  const std::size_t n = map.state_size();
  for (std::size_t t = 0; t < trials; ++t) {
    const Vec u = detail::random_vec(n, rng);
    const Vec v = detail::random_vec(n, rng);
    Vec zp(z.begin(), z.end());
    Vec zm(z.begin(), z.end());
    axpy(step, v, zp);
    axpy(-step, v, zm);
    const double jv = (dot(u, map.apply(zp)) - dot(u, map.apply(zm))) / (2.0 * step);
    const double jtu = dot(vjp(map, z, u).d_input, v);
    const double rel = std::abs(jtu - jv) / std::max({std::abs(jv), std::abs(jtu), 1e-12});
    ++r.checked;
    if (!r.worst || rel > r.max_rel_error) {
      r.max_rel_error = rel;
      r.worst = CoordMismatch{"trial", t, jtu, jv, rel};
    }
    if (!(rel <= tol)) r.pass = false;
  }
  return r;
}

/// Wraps a map and adds `delta` to one coordinate of every pullback. The
/// checks above must catch it; used to test the checkers themselves.
template <DifferentiableMap M>
class CorruptedVjp {
 public:
  using Trace = typename M::Trace;

  CorruptedVjp(const M& inner, bool theta, std::size_t index, double delta)
      : inner_(&inner), theta_(theta), index_(index), delta_(delta) {}

  std::size_t state_size() const { return inner_->state_size(); }
  std::size_t param_size() const { return inner_->param_size(); }
  Vec apply(std::span<const double> z) const { return inner_->apply(z); }
  Trace record(std::span<const double> z) const { return inner_->record(z); }
  Vec output(const Trace& t) const { return inner_->output(t); }
  MapVjp pullback(const Trace& t, std::span<const double> u) const {
    MapVjp v = inner_->pullback(t, u);
    (theta_ ? v.d_theta : v.d_input).at(index_) += delta_;
    return v;
  }

 private:
  const M* inner_;
  bool theta_;
  std::size_t index_;
  double delta_;
};

// ---------------------------------------------------------------------------
// Implicit gradients on a pyramid instance.

struct ImplicitCheckOptions {
  double solve_tol = 1e-11;
  std::size_t solve_iters = 200;
  double fd_step = 1e-5;
  double fd_tol = 1e-4;
  std::size_t max_coords = 0;
};

/// Tight Broyden settings for reference solves.
inline SolverConfig reference_solver(double tol, std::size_t iters) {
  SolverConfig c;
  c.method = Method::Broyden;
  c.tol = tol;
  c.max_iters = iters;
  c.memory = iters;
  return c;
}

/// L(theta, B) = <c, P*(theta, B)>: implicit d_theta and d_B against central
/// differences, re-solving the fixed point for every perturbed evaluation.
inline CheckResult check_implicit_fd(const PyramidTransform& g, const Pyramid& b, const Pyramid& c,
                                     const ImplicitCheckOptions& opt = {}) {
  CheckResult r;
  r.name = "implicit gradients vs finite differences of the solved loss";
  const SolverConfig sc = reference_solver(opt.solve_tol, opt.solve_iters);
  const Pyramid p0 = Pyramid::zeros_like(b);
  auto loss = [&](const PyramidTransform& gg, const Pyramid& bb, bool& ok) {
    auto s = broyden_solve(gg, bb, p0, sc);
    ok = ok && s.report.converged;
    return dot(pack(c).data, pack(s.p).data);
  };

  bool ok = true;
  auto star = broyden_solve(g, b, p0, sc);
  ok = star.report.converged;
  const auto ig = implicit_grads(g, star.p, b, c, sc);
  ok = ok && ig.adjoint.converged;

  const Vec theta = g.params().flat();
  const Layout pl = g.params().layout();
  const auto ti = detail::pick(theta.size(), opt.max_coords);
  Vec expected;
  Vec tp = theta;
  for (std::size_t i : ti) {
    const double t0 = tp[i];
    tp[i] = t0 + opt.fd_step;
    const double fp = loss(PyramidTransform(g.config(), ParamSet::from_flat(tp, pl)), b, ok);
    tp[i] = t0 - opt.fd_step;
    const double fm = loss(PyramidTransform(g.config(), ParamSet::from_flat(tp, pl)), b, ok);
    tp[i] = t0;
    expected.push_back((fp - fm) / (2.0 * opt.fd_step));
  }
  detail::compare(r, "d_theta", ig.grads.d_theta.flat(), expected, ti, opt.fd_tol);

  const Layout bl = pyramid_layout(b);
  const Vec bflat = pack(b).data;
  const auto bi = detail::pick(bflat.size(), opt.max_coords);
  expected.clear();
  Vec bp = bflat;
  for (std::size_t i : bi) {
    const double b0 = bp[i];
    bp[i] = b0 + opt.fd_step;
    const double fp = loss(g, unpack(bp, bl), ok);
    bp[i] = b0 - opt.fd_step;
    const double fm = loss(g, unpack(bp, bl), ok);
    bp[i] = b0;
    expected.push_back((fp - fm) / (2.0 * opt.fd_step));
  }
  detail::compare(r, "d_input", pack(ig.grads.d_input).data, expected, bi, opt.fd_tol);

  if (!ok) {
    r.pass = false;
    r.detail = "a reference solve did not reach tolerance";
  }
  return r;
}

struct AgreementResult {
  bool pass = false;
  double cosine = 0.0;
  double rel_l2 = 0.0;
  bool solves_converged = false;
  std::string summary() const {
    std::ostringstream os;
    os << (pass ? "PASS " : "FAIL ") << "implicit vs unrolled(T=50): cosine " << cosine << ", rel L2 " << rel_l2;
    if (!solves_converged) os << "; forward solve did not converge";
    return os.str();
  }
};

inline constexpr double kAgreementCosine = 0.999;
inline constexpr double kAgreementRelL2 = 1e-3;

inline double cosine(std::span<const double> a, std::span<const double> b) {
  const double d = norm2(a) * norm2(b);
  return d > 0.0 ? dot(a, b) / d : 0.0;
}

inline double rel_l2(std::span<const double> got, std::span<const double> ref) {
  return norm2(sub(got, ref)) / std::max(norm2(ref), kResidualFloor);
}

/// d_theta from implicit differentiation against backprop through `steps`
/// Picard steps from zero, for the loss <c, P*>.
inline AgreementResult check_implicit_vs_unrolled(const PyramidTransform& g, const Pyramid& b, const Pyramid& c,
                                                  std::size_t steps = 50, double solve_tol = 1e-10) {
  AgreementResult r;
  const SolverConfig sc = reference_solver(solve_tol, 200);
  auto star = broyden_solve(g, b, Pyramid::zeros_like(b), sc);
  const auto ig = implicit_grads(g, star.p, b, c, sc);
  const auto un = unroll_solve(g, b, Pyramid::zeros_like(b), steps);
  const auto ug = unrolled_grads(g, un, c);
  r.solves_converged = star.report.converged && ig.adjoint.converged;
  const Vec a = ig.grads.d_theta.flat();
  const Vec u = ug.d_theta.flat();
  r.cosine = cosine(a, u);
  r.rel_l2 = rel_l2(a, u);
  r.pass = r.solves_converged && r.cosine >= kAgreementCosine && r.rel_l2 <= kAgreementRelL2;
  return r;
}

// ---------------------------------------------------------------------------
// Suite used by the `gradcheck` command.

struct GradcheckConfig {
  TransformConfig transform{.levels = 2, .channels = 1, .variant = Variant::ResPyramidConv};
  std::size_t base = 8;
  std::size_t batch = 1;
  std::uint64_t seed = 1;
  double fd_step = 1e-5;
  double fd_tol = 1e-4;
  double vjp_tol = 1e-5;
  std::size_t max_coords = 0;
  std::size_t unroll_steps = 50;
};

/// A transform with small random biases. With zero biases, inputs that are
/// themselves ReLU outputs put pre-activations exactly on the kink, where
/// central differences and the pullback legitimately disagree.
inline PyramidTransform gradcheck_instance(const TransformConfig& cfg, std::uint64_t seed, std::mt19937_64& rng) {
  ParamSet p = init_params(cfg, seed);
  std::normal_distribution<double> nd(0.0, 0.1);
  for (std::size_t s = 0; s < p.num_segments(); ++s) {
    const std::string& name = p.name(s);
    if (name.ends_with(".b") || name.ends_with(".beta")) {
      for (std::size_t i = 0; i < p.at(s).size(); ++i) p.at(s)[i] += nd(rng);
    }
  }
  return PyramidTransform(cfg, std::move(p));
}

struct GradcheckReport {
  std::vector<std::string> lines;
  bool pass = true;
};

inline GradcheckReport run_gradcheck(const GradcheckConfig& cfg) {
  GradcheckReport rep;
  auto note = [&](bool ok, std::string line) {
    rep.pass = rep.pass && ok;
    rep.lines.push_back(std::move(line));
  };
  std::mt19937_64 rng(cfg.seed * 7919 + 1);
  const PyramidTransform g = gradcheck_instance(cfg.transform, cfg.seed, rng);
  auto rnd = [&] {
    return random_pyramid(cfg.batch, cfg.transform.channels, cfg.base, cfg.base, cfg.transform.levels, 1.0, rng);
  };
  const Pyramid b = rnd();
  const Pyramid z = rnd();
  const Pyramid c = rnd();
  const Layout layout = pyramid_layout(b);
  TransformMap map(g, layout);

  ApplyWithTheta apply = [&](std::span<const double> zz, std::span<const double> th) {
    PyramidTransform gg(g.config(), ParamSet::from_flat(th, g.params().layout()));
    return pack(gg.apply(unpack(zz, layout))).data;
  };
  const Vec theta = g.params().flat();
  const FdOptions fd{cfg.fd_step, cfg.vjp_tol, cfg.max_coords};
  const Vec zf = pack(z).data;
  const Vec uf = pack(c).data;

  auto vr = check_vjp_fd(map, apply, theta, zf, uf, fd);
  note(vr.pass, vr.summary());

  auto dr = dot_product_test(map, zf, 5, cfg.seed);
  note(dr.pass, dr.summary());

  // The checker must reject a pullback with one corrupted coordinate.
  CorruptedVjp<TransformMap> bad(map, true, theta.size() / 2, 1e-2 * (1.0 + detail::inf_norm(vjp(map, zf, uf).d_theta)));
  auto br = check_vjp_fd(bad, apply, theta, zf, uf, fd);
  const bool caught = !br.pass && br.worst && br.worst->what == "d_theta" && br.worst->index == theta.size() / 2;
  note(caught, std::string(caught ? "PASS " : "FAIL ") + "corrupted pullback detected at d_theta[" +
                   std::to_string(br.worst ? br.worst->index : 0) + "]");

  ImplicitCheckOptions io;
  io.fd_step = cfg.fd_step;
  io.fd_tol = cfg.fd_tol;
  io.max_coords = cfg.max_coords;
  auto ir = check_implicit_fd(g, b, c, io);
  note(ir.pass, ir.summary());

  auto ar = check_implicit_vs_unrolled(g, b, c, cfg.unroll_steps);
  note(ar.pass, ar.summary());
  return rep;
}

}  // namespace ifpn::harness
