#pragma once

#include <concepts>
#include <cstddef>
#include <span>

#include "ifpn/array.hpp"

namespace ifpn {

/// Cotangents of a map z -> G(z; theta) with respect to z and theta.
struct MapVjp {
  Vec d_input;
  Vec d_theta;
};

/// A parameterized map on flat vectors that can record an evaluation and
/// pull a cotangent back through it. The equilibrium solvers and the
/// implicit backward pass are written against this interface.
template <class M>
concept DifferentiableMap = requires(const M& m, std::span<const double> z, std::span<const double> u,
                                     const typename M::Trace& t) {
  { m.state_size() } -> std::convertible_to<std::size_t>;
  { m.param_size() } -> std::convertible_to<std::size_t>;
  { m.apply(z) } -> std::convertible_to<Vec>;
  { m.record(z) } -> std::same_as<typename M::Trace>;
  { m.output(t) } -> std::convertible_to<Vec>;
  { m.pullback(t, u) } -> std::same_as<MapVjp>;
};

template <DifferentiableMap M>
MapVjp vjp(const M& map, std::span<const double> z, std::span<const double> u) {
  return map.pullback(map.record(z), u);
}

}  // namespace ifpn
