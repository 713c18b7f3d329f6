#pragma once

// Backward pass through the equilibrium.
//
// With z* = P* + B and g = dL/dP*, the implicit function theorem gives
//   dL/dtheta = u^T dG/dtheta,   dL/dB = u^T dG/dz,
// where u = (I - J_G^T)^{-1} g, i.e. the fixed point of the linear map
// u -> J_G^T u + g. Only vector-Jacobian products of G at z* are needed,
// and the evaluation at z* is recorded once and reused for all of them.

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "ifpn/map.hpp"
#include "ifpn/solver.hpp"
#include "ifpn/transform.hpp"

namespace ifpn {

struct AdjointState {
  Vec u;
  SolverReport report;
  bool converged = false;
};

/// Solves u = J_G^T u + g for a recorded evaluation of G at z*.
template <DifferentiableMap M>
AdjointState adjoint_solve_recorded(const M& map, const typename M::Trace& at_equilibrium,
                                    std::span<const double> g, SolverConfig cfg) {
  if (g.size() != map.state_size()) throw ShapeError("adjoint_solve: cotangent size mismatch");
  if (cfg.method == Method::Unroll) cfg.method = Method::Picard;
  Vec gg(g.begin(), g.end());
  FixedPointFn f = [&](std::span<const double> u) {
    Vec r = map.pullback(at_equilibrium, u).d_input;
    axpy(1.0, gg, r);
    return r;
  };
  auto r = fixed_point(f, Vec(g.size(), 0.0), cfg);
  const bool ok = r.report.converged;
  return {std::move(r.x), std::move(r.report), ok};
}

template <DifferentiableMap M>
AdjointState adjoint_solve(const M& map, std::span<const double> p_star, std::span<const double> b,
                           std::span<const double> g, const SolverConfig& cfg) {
  return adjoint_solve_recorded(map, map.record(add(p_star, b)), g, cfg);
}

/// |u - J_G^T u - g| / max(|u|, eps), recomputed from scratch.
template <DifferentiableMap M>
double adjoint_residual(const M& map, std::span<const double> p_star, std::span<const double> b,
                        std::span<const double> g, std::span<const double> u) {
  Vec r = sub(u, vjp(map, add(p_star, b), u).d_input);
  axpy(-1.0, g, r);
  return norm2(r) / std::max(norm2(u), kResidualFloor);
}

struct ImplicitGrads {
  MapVjp grads;  // d_input is dL/dB
  AdjointState adjoint;
};

template <DifferentiableMap M>
ImplicitGrads implicit_grads(const M& map, std::span<const double> p_star, std::span<const double> b,
                             std::span<const double> g, const SolverConfig& cfg) {
  auto trace = map.record(add(p_star, b));
  AdjointState adj = adjoint_solve_recorded(map, trace, g, cfg);
  MapVjp grads = map.pullback(trace, adj.u);
  return {std::move(grads), std::move(adj)};
}

/// Exact reverse-mode backprop through the recorded unrolled iterations.
/// With no iterations B never enters the output and both gradients are zero.
template <DifferentiableMap M>
MapVjp unrolled_grads(const M& map, const std::vector<typename M::Trace>& traces, std::span<const double> g) {
  if (g.size() != map.state_size()) throw ShapeError("unrolled_grads: cotangent size mismatch");
  MapVjp out{Vec(map.state_size(), 0.0), Vec(map.param_size(), 0.0)};
  Vec cot(g.begin(), g.end());
  for (std::size_t k = traces.size(); k-- > 0;) {
    MapVjp step = map.pullback(traces[k], cot);
    axpy(1.0, step.d_theta, out.d_theta);
    axpy(1.0, step.d_input, out.d_input);
    cot = std::move(step.d_input);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pyramid front end.

struct PyramidGrads {
  GradBundle grads;
  AdjointState adjoint;
};

inline GradBundle to_bundle(const PyramidTransform& g, const Layout& layout, const MapVjp& v) {
  return {ParamSet::from_flat(v.d_theta, g.params().layout()), unpack(v.d_input, layout)};
}

inline AdjointState adjoint_solve(const PyramidTransform& g, const Pyramid& p_star, const Pyramid& b,
                                  const Pyramid& cot, const SolverConfig& cfg, const DropoutMask* mask = nullptr) {
  require_same_layout(p_star, b, "adjoint_solve");
  require_same_layout(p_star, cot, "adjoint_solve");
  TransformMap map(g, pyramid_layout(b), mask);
  return adjoint_solve(map, pack(p_star).data, pack(b).data, pack(cot).data, cfg);
}

inline PyramidGrads implicit_grads(const PyramidTransform& g, const Pyramid& p_star, const Pyramid& b,
                                   const Pyramid& cot, const SolverConfig& cfg, const DropoutMask* mask = nullptr) {
  require_same_layout(p_star, b, "implicit_grads");
  require_same_layout(p_star, cot, "implicit_grads");
  const Layout layout = pyramid_layout(b);
  TransformMap map(g, layout, mask);
  auto r = implicit_grads(map, pack(p_star).data, pack(b).data, pack(cot).data, cfg);
  return {to_bundle(g, layout, r.grads), std::move(r.adjoint)};
}

inline GradBundle unrolled_grads(const PyramidTransform& g, const PyramidUnroll& unrolled, const Pyramid& cot,
                                 const DropoutMask* mask = nullptr) {
  const Layout layout = pyramid_layout(cot);
  TransformMap map(g, layout, mask);
  return to_bundle(g, layout, unrolled_grads(map, unrolled.traces, pack(cot).data));
}

}  // namespace ifpn
