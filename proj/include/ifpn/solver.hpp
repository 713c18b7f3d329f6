#pragma once

// Forward solvers for the equilibrium P* = G(P* + B).
//
// The root-finding residual is Q(P) = G(P + B) - P. Convergence is measured
// by the relative residual |Q(P)| / max(|P|, eps). Every solver returns the
// iterate whose residual it last measured, so the reported residual can be
// recomputed from the returned point.

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ifpn/array.hpp"
#include "ifpn/map.hpp"
#include "ifpn/transform.hpp"

namespace ifpn {

enum class Method { Picard, Unroll, Broyden };

inline const char* method_name(Method m) {
  switch (m) {
    case Method::Picard: return "picard";
    case Method::Unroll: return "unroll";
    case Method::Broyden: return "broyden";
  }
  return "?";
}

inline Method parse_method(const std::string& s) {
  if (s == "picard") return Method::Picard;
  if (s == "unroll") return Method::Unroll;
  if (s == "broyden") return Method::Broyden;
  throw std::invalid_argument("unknown solver method '" + s + "'");
}

inline constexpr double kResidualFloor = 1e-8;
inline constexpr double kBroydenBreakdown = 1e-12;

struct SolverConfig {
  Method method = Method::Broyden;
  std::size_t unroll_steps = 0;     // T for Method::Unroll
  double tol = 1e-6;
  std::size_t max_iters = 15;
  double step_size = 1.0;           // alpha
  std::optional<std::size_t> memory;  // Broyden rank cap; defaults to max_iters
  std::optional<std::size_t> eval_iters;
  std::size_t max_halvings = 4;
  double divergence_factor = 1e3;

  std::size_t broyden_memory() const { return memory.value_or(max_iters); }

  void validate() const {
    if (!(tol > 0.0)) throw std::invalid_argument("SolverConfig: tol must be positive");
    if (max_iters < 1) throw std::invalid_argument("SolverConfig: max_iters must be at least 1");
    if (!(step_size > 0.0)) throw std::invalid_argument("SolverConfig: step size must be positive");
    if (method == Method::Broyden && broyden_memory() < 1) {
      throw std::invalid_argument("SolverConfig: Broyden memory must be at least 1");
    }
    if (eval_iters && *eval_iters < 1) throw std::invalid_argument("SolverConfig: eval_iters must be at least 1");
  }

  static SolverConfig unroll(std::size_t t) {
    SolverConfig c;
    c.method = Method::Unroll;
    c.unroll_steps = t;
    return c;
  }
};

enum class SolverStatus { Converged, MaxIters, Diverged, NonFinite };

inline const char* status_name(SolverStatus s) {
  switch (s) {
    case SolverStatus::Converged: return "converged";
    case SolverStatus::MaxIters: return "max_iters";
    case SolverStatus::Diverged: return "diverged";
    case SolverStatus::NonFinite: return "non_finite";
  }
  return "?";
}

struct SolverReport {
  bool converged = false;
  SolverStatus status = SolverStatus::MaxIters;
  std::size_t iterations_used = 0;   // updates leading to the returned iterate
  std::size_t iterations_attempted = 0;
  std::size_t evaluations = 0;       // calls of the map
  Vec residual_history;              // iterations_used + 1 entries
  double final_rel_residual = std::numeric_limits<double>::infinity();
  std::string diagnostic;
};

/// Line-oriented record: a header line, then one "iter residual" line per entry.
inline void write_report(std::ostream& os, const SolverReport& r) {
  os << "# status=" << status_name(r.status) << " converged=" << (r.converged ? 1 : 0)
     << " iterations=" << r.iterations_used << " evaluations=" << r.evaluations
     << " final_rel_residual=" << r.final_rel_residual << "\n";
  const auto prec = os.precision(17);
  for (std::size_t k = 0; k < r.residual_history.size(); ++k) os << k << " " << r.residual_history[k] << "\n";
  os.precision(prec);
}

inline double relative_residual(std::span<const double> q, std::span<const double> x) {
  return norm2(q) / std::max(norm2(x), kResidualFloor);
}

inline bool all_finite(std::span<const double> v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Limited-memory inverse-Jacobian approximation M = -I + sum_k u_k v_k^T.

class BroydenState {
 public:
  explicit BroydenState(std::size_t memory) : memory_(memory) {}

  /// M x
  Vec apply(std::span<const double> x) const {
    Vec r(x.begin(), x.end());
    for (double& v : r) v = -v;
    for (std::size_t k = 0; k < us_.size(); ++k) axpy(dot(vs_[k], x), us_[k], r);
    return r;
  }

  /// M^T x
  Vec apply_transpose(std::span<const double> x) const {
    Vec r(x.begin(), x.end());
    for (double& v : r) v = -v;
    for (std::size_t k = 0; k < us_.size(); ++k) axpy(dot(us_[k], x), vs_[k], r);
    return r;
  }

  /// Rank-one "good Broyden" update enforcing M_new dq = dx. Returns false
  /// (and leaves M unchanged) when the secant denominator breaks down.
  bool update(std::span<const double> dx, std::span<const double> dq) {
    Vec mdq = apply(dq);
    const double denom = dot(dx, mdq);
    if (!(std::abs(denom) >= kBroydenBreakdown)) return false;
    Vec u = sub(dx, mdq);
    for (double& v : u) v /= denom;
    Vec v = apply_transpose(dx);
    us_.push_back(std::move(u));
    vs_.push_back(std::move(v));
    if (us_.size() > memory_) {
      us_.erase(us_.begin());
      vs_.erase(vs_.begin());
    }
    return true;
  }

  std::size_t rank() const { return us_.size(); }
  std::size_t memory() const { return memory_; }

 private:
  std::size_t memory_;
  std::vector<Vec> us_;
  std::vector<Vec> vs_;
};

// ---------------------------------------------------------------------------
// Generic fixed-point solvers for x = F(x).

using FixedPointFn = std::function<Vec(std::span<const double>)>;

struct FlatSolve {
  Vec x;
  SolverReport report;
};

namespace detail {

// Tracks the residual history plus the last and best iterates.
struct Trajectory {
  Vec last;
  Vec best_point;
  SolverReport report;
  std::size_t best = 0;
  double q0 = 0.0;

  void push(const Vec& x, double rel) {
    if (report.residual_history.empty() || rel < report.residual_history[best]) {
      best = report.residual_history.size();
      best_point = x;
    }
    report.residual_history.push_back(rel);
    last = x;
  }

  FlatSolve finish(SolverStatus status, std::string diag = {}) {
    report.status = status;
    report.converged = status == SolverStatus::Converged;
    report.iterations_attempted = report.residual_history.size() - 1;
    std::size_t k = report.residual_history.size() - 1;
    Vec* x = &last;
    if (status == SolverStatus::Diverged || status == SolverStatus::NonFinite) {
      k = best;
      x = &best_point;
      report.residual_history.resize(k + 1);
    }
    report.iterations_used = k;
    report.final_rel_residual = report.residual_history[k];
    report.diagnostic = std::move(diag);
    return {std::move(*x), std::move(report)};
  }
};

}  // namespace detail

inline FlatSolve picard_fixed_point(const FixedPointFn& f, Vec x, const SolverConfig& cfg) {
  detail::Trajectory tr;
  for (std::size_t k = 0;; ++k) {
    Vec fx = f(x);
    ++tr.report.evaluations;
    Vec q = sub(fx, x);
    const double qn = norm2(q);
    const double rel = relative_residual(q, x);
    if (k == 0) tr.q0 = qn;
    tr.push(x, rel);
    if (!all_finite(fx) || !std::isfinite(rel)) {
      return tr.finish(SolverStatus::NonFinite, "non-finite iterate at step " + std::to_string(k));
    }
    if (rel <= cfg.tol) return tr.finish(SolverStatus::Converged);
    if (k > 0 && qn >= cfg.divergence_factor * tr.q0) {
      return tr.finish(SolverStatus::Diverged, "residual grew by more than " +
                                                   std::to_string(cfg.divergence_factor) + "x");
    }
    if (k == cfg.max_iters) return tr.finish(SolverStatus::MaxIters);
    x = std::move(fx);
  }
}

inline FlatSolve broyden_fixed_point(const FixedPointFn& f, Vec x, const SolverConfig& cfg) {
  detail::Trajectory tr;
  BroydenState m(cfg.broyden_memory());
  Vec q = sub(f(x), x);
  ++tr.report.evaluations;
  double qn = norm2(q);
  tr.q0 = qn;
  for (std::size_t k = 0;; ++k) {
    const double rel = relative_residual(q, x);
    tr.push(x, rel);
    if (!all_finite(x) || !all_finite(q)) {
      return tr.finish(SolverStatus::NonFinite, "non-finite iterate at step " + std::to_string(k));
    }
    if (rel <= cfg.tol) return tr.finish(SolverStatus::Converged);
    if (k > 0 && qn >= cfg.divergence_factor * tr.q0) {
      return tr.finish(SolverStatus::Diverged, "residual grew by more than " +
                                                   std::to_string(cfg.divergence_factor) + "x");
    }
    if (k == cfg.max_iters) return tr.finish(SolverStatus::MaxIters);

    // Quasi-Newton direction -M q; backtrack until the residual decreases.
    Vec dir = m.apply(q);
    for (double& v : dir) v = -v;
    double alpha = cfg.step_size;
    Vec x_new, q_new;
    double qn_new = 0.0;
    for (std::size_t h = 0;; ++h) {
      x_new = x;
      axpy(alpha, dir, x_new);
      q_new = sub(f(x_new), x_new);
      ++tr.report.evaluations;
      qn_new = norm2(q_new);
      if (qn_new < qn || h >= cfg.max_halvings || !std::isfinite(qn_new)) break;
      alpha *= 0.5;
    }
    m.update(sub(x_new, x), sub(q_new, q));
    x = std::move(x_new);
    q = std::move(q_new);
    qn = qn_new;
  }
}

inline FlatSolve fixed_point(const FixedPointFn& f, Vec x0, const SolverConfig& cfg) {
  cfg.validate();
  switch (cfg.method) {
    case Method::Picard: return picard_fixed_point(f, std::move(x0), cfg);
    case Method::Broyden: return broyden_fixed_point(f, std::move(x0), cfg);
    case Method::Unroll: {
      detail::Trajectory tr;
      Vec x = std::move(x0);
      for (std::size_t k = 0;; ++k) {
        Vec fx = f(x);
        ++tr.report.evaluations;
        tr.push(x, relative_residual(sub(fx, x), x));
        if (k == cfg.unroll_steps) {
          return tr.finish(tr.report.residual_history.back() <= cfg.tol ? SolverStatus::Converged
                                                                         : SolverStatus::MaxIters);
        }
        x = std::move(fx);
      }
    }
  }
  throw std::invalid_argument("fixed_point: unknown method");
}

// ---------------------------------------------------------------------------
// Solvers over a differentiable map: P = G(P + B).

template <DifferentiableMap M>
FixedPointFn equilibrium_fn(const M& map, std::span<const double> b) {
  Vec bb(b.begin(), b.end());
  return [&map, bb = std::move(bb)](std::span<const double> p) { return map.apply(add(p, bb)); };
}

template <DifferentiableMap M>
struct UnrollSolve {
  Vec x;
  std::vector<typename M::Trace> traces;  // trace k records G at P_k + B
  SolverReport report;
};

/// Exactly T applications of P <- G(P + B), keeping every trace.
template <DifferentiableMap M>
UnrollSolve<M> unroll_map(const M& map, std::span<const double> b, Vec p0, std::size_t steps, double tol = 1e-6) {
  if (p0.size() != map.state_size() || b.size() != map.state_size()) throw ShapeError("unroll: size mismatch");
  UnrollSolve<M> out;
  Vec x = std::move(p0);
  for (std::size_t k = 0; k < steps; ++k) {
    auto trace = map.record(add(x, b));
    Vec fx = map.output(trace);
    out.report.residual_history.push_back(relative_residual(sub(fx, x), x));
    out.traces.push_back(std::move(trace));
    x = std::move(fx);
  }
  Vec fx = map.apply(add(x, b));
  out.report.residual_history.push_back(relative_residual(sub(fx, x), x));
  out.report.evaluations = steps + 1;
  out.report.iterations_used = out.report.iterations_attempted = steps;
  out.report.final_rel_residual = out.report.residual_history.back();
  out.report.converged = out.report.final_rel_residual <= tol;
  out.report.status = out.report.converged ? SolverStatus::Converged : SolverStatus::MaxIters;
  out.x = std::move(x);
  return out;
}

template <DifferentiableMap M>
FlatSolve solve_map(const M& map, std::span<const double> b, Vec p0, const SolverConfig& cfg) {
  if (p0.size() != map.state_size() || b.size() != map.state_size()) throw ShapeError("solve: size mismatch");
  return fixed_point(equilibrium_fn(map, b), std::move(p0), cfg);
}

// ---------------------------------------------------------------------------
// Pyramid front end.

struct PyramidSolve {
  Pyramid p;
  SolverReport report;
};

/// Q(P) = G(P + B) - P
inline Pyramid residual(const PyramidTransform& g, const Pyramid& p, const Pyramid& b,
                        const DropoutMask* mask = nullptr) {
  require_same_layout(p, b, "residual");
  return add(g.apply(add(p, b), mask), scale(p, -1.0));
}

inline double relative_residual(const PyramidTransform& g, const Pyramid& p, const Pyramid& b,
                                const DropoutMask* mask = nullptr) {
  return relative_residual(pack(residual(g, p, b, mask)).data, pack(p).data);
}

namespace detail {

inline PyramidSolve run(const PyramidTransform& g, const Pyramid& b, const Pyramid& p0, const SolverConfig& cfg,
                        const DropoutMask* mask) {
  require_same_layout(p0, b, "solve");
  const Layout layout = pyramid_layout(b);
  TransformMap map(g, layout, mask);
  auto r = solve_map(map, pack(b).data, pack(p0).data, cfg);
  return {unpack(r.x, layout), std::move(r.report)};
}

}  // namespace detail

inline PyramidSolve picard_solve(const PyramidTransform& g, const Pyramid& b, const Pyramid& p0,
                                 SolverConfig cfg, const DropoutMask* mask = nullptr) {
  cfg.method = Method::Picard;
  return detail::run(g, b, p0, cfg, mask);
}

inline PyramidSolve broyden_solve(const PyramidTransform& g, const Pyramid& b, const Pyramid& p0,
                                  SolverConfig cfg, const DropoutMask* mask = nullptr) {
  cfg.method = Method::Broyden;
  return detail::run(g, b, p0, cfg, mask);
}

struct PyramidUnroll {
  Pyramid p;
  std::vector<PyramidTransform::Record> traces;
  SolverReport report;
};

inline PyramidUnroll unroll_solve(const PyramidTransform& g, const Pyramid& b, const Pyramid& p0, std::size_t steps,
                                  const DropoutMask* mask = nullptr, double tol = 1e-6) {
  require_same_layout(p0, b, "unroll_solve");
  const Layout layout = pyramid_layout(b);
  TransformMap map(g, layout, mask);
  auto r = unroll_map(map, pack(b).data, pack(p0).data, steps, tol);
  return {unpack(r.x, layout), std::move(r.traces), std::move(r.report)};
}

enum class SolveMode { Train, Eval };

/// Dispatches on cfg.method starting from P0 = 0. In Eval mode a configured
/// eval_iters replaces max_iters.
inline PyramidSolve solve(const PyramidTransform& g, const Pyramid& b, SolverConfig cfg,
                          SolveMode mode = SolveMode::Train, const DropoutMask* mask = nullptr) {
  cfg.validate();
  if (mode == SolveMode::Eval && cfg.eval_iters) cfg.max_iters = *cfg.eval_iters;
  const Pyramid p0 = Pyramid::zeros_like(b);
  if (cfg.method == Method::Unroll) {
    auto r = unroll_solve(g, b, p0, cfg.unroll_steps, mask, cfg.tol);
    return {std::move(r.p), std::move(r.report)};
  }
  return detail::run(g, b, p0, cfg, mask);
}

}  // namespace ifpn
