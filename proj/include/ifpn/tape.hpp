#pragma once

// Reverse-mode differentiation over the fixed primitive set in ops.hpp.
//
// A Tape records every executed primitive together with whatever the
// backward pass needs (its input values live on the tape; group norm also
// keeps the normalized input and inverse deviations). Backward replays the
// entries in reverse, calling vjp_primitive on each exactly once.

#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ifpn/array.hpp"
#include "ifpn/ops.hpp"

namespace ifpn {

// ---------------------------------------------------------------------------
// Named parameter segments.

class ParamSet {
 public:
  /// Appends a segment; names must be unique.
  void add(std::string name, Array4 value) {
    if (index_.contains(name)) throw std::invalid_argument("ParamSet: duplicate segment '" + name + "'");
    index_.emplace(name, values_.size());
    names_.push_back(std::move(name));
    values_.push_back(std::move(value));
  }

  bool contains(const std::string& name) const { return index_.contains(name); }
  std::size_t index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("ParamSet: no segment '" + name + "'");
    return it->second;
  }
  Array4& operator[](const std::string& name) { return values_[index_of(name)]; }
  const Array4& operator[](const std::string& name) const { return values_[index_of(name)]; }
  Array4& at(std::size_t i) { return values_[i]; }
  const Array4& at(std::size_t i) const { return values_[i]; }
  const std::string& name(std::size_t i) const { return names_[i]; }
  std::size_t num_segments() const { return values_.size(); }

  std::size_t size() const {
    std::size_t t = 0;
    for (const auto& v : values_) t += v.size();
    return t;
  }

  Layout layout() const {
    Layout l;
    for (std::size_t i = 0; i < values_.size(); ++i) l.push_back({names_[i], values_[i].shape()});
    return l;
  }

  Vec flat() const {
    Vec out;
    out.reserve(size());
    for (const auto& v : values_) out.insert(out.end(), v.vec().begin(), v.vec().end());
    return out;
  }

  FlatVector to_flat() const { return {flat(), layout()}; }

  /// Overwrites all values from a flat vector in segment order.
  void assign_flat(std::span<const double> data) {
    if (data.size() != size()) {
      throw ShapeError("ParamSet::assign_flat: expected " + std::to_string(size()) + " values, got " +
                       std::to_string(data.size()));
    }
    std::size_t off = 0;
    for (auto& v : values_) {
      std::copy(data.begin() + off, data.begin() + off + v.size(), v.vec().begin());
      off += v.size();
    }
  }

  static ParamSet from_flat(std::span<const double> data, const Layout& layout) {
    if (layout_volume(layout) != data.size()) throw ShapeError("ParamSet::from_flat: layout/length mismatch");
    ParamSet p;
    std::size_t off = 0;
    for (const auto& seg : layout) {
      const std::size_t n = seg.shape.volume();
      p.add(seg.name, Array4(seg.shape, Vec(data.begin() + off, data.begin() + off + n)));
      off += n;
    }
    return p;
  }

  /// Same segments, all zero.
  static ParamSet zeros_like(const ParamSet& p) {
    ParamSet z;
    for (std::size_t i = 0; i < p.num_segments(); ++i) z.add(p.name(i), Array4(p.at(i).shape()));
    return z;
  }

  friend bool operator==(const ParamSet&, const ParamSet&) = default;

 private:
  std::vector<std::string> names_;
  std::vector<Array4> values_;
  std::map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Tape.

enum class Prim : int {
  Conv2d = 0,
  Upsample,
  GroupNorm,
  Relu,
  Add,
  Scale,
  ChannelMul,
  WeightNorm,
};

inline const char* prim_name(Prim p) {
  switch (p) {
    case Prim::Conv2d: return "conv2d";
    case Prim::Upsample: return "upsample";
    case Prim::GroupNorm: return "group_norm";
    case Prim::Relu: return "relu";
    case Prim::Add: return "add";
    case Prim::Scale: return "scale";
    case Prim::ChannelMul: return "channel_mul";
    case Prim::WeightNorm: return "weight_norm";
  }
  return "unknown";
}

struct Var {
  std::size_t id;
};

struct TapeEntry {
  Prim op;
  std::vector<std::size_t> args;
  std::size_t out = 0;
  std::size_t stride = 1;
  UpsampleMode mode = UpsampleMode::Nearest;
  std::size_t groups = 1;
  double scalar = 0.0;
  Array4 saved{};
  std::vector<double> saved_stats{};
};

/// Cotangents for each argument of `e`, given the cotangent of its output.
/// Arguments that are not differentiable (the dropout mask) get an empty array.
inline std::vector<Array4> vjp_primitive(const TapeEntry& e, const std::vector<Array4>& values,
                                         const Array4& cot) {
  auto arg = [&](std::size_t k) -> const Array4& { return values.at(e.args.at(k)); };
  switch (e.op) {
    case Prim::Conv2d: {
      auto g = conv2d_vjp(arg(0), arg(1), e.stride, cot);
      return {std::move(g.dx), std::move(g.dw), std::move(g.db)};
    }
    case Prim::Upsample:
      return {upsample2_vjp(arg(0).shape(), e.mode, cot)};
    case Prim::GroupNorm: {
      auto g = group_norm_vjp(e.saved, e.saved_stats, e.groups, arg(1), cot);
      return {std::move(g.dx), std::move(g.dgamma), std::move(g.dbeta)};
    }
    case Prim::Relu:
      return {relu_vjp(arg(0), cot)};
    case Prim::Add:
      require_same_shape(arg(0).shape(), cot.shape(), "add vjp");
      return {cot, cot};
    case Prim::Scale:
      return {scale(cot, e.scalar)};
    case Prim::ChannelMul:
      return {channel_mul(cot, arg(1)), Array4()};
    case Prim::WeightNorm: {
      auto g = weight_normalize_vjp(arg(0), arg(1), cot);
      return {std::move(g.dv), std::move(g.dgain)};
    }
  }
  throw std::invalid_argument("vjp_primitive: unknown primitive id " + std::to_string(static_cast<int>(e.op)));
}

class Tape {
 public:
  /// A value the caller may want gradients for (input or parameter).
  Var leaf(Array4 value) { return push_value(std::move(value)); }

  const Array4& value(Var v) const { return values_.at(v.id); }
  const std::vector<TapeEntry>& entries() const { return entries_; }
  const std::vector<Array4>& values() const { return values_; }

  Var conv2d(Var x, Var w, Var b, std::size_t stride = 1) {
    TapeEntry e{Prim::Conv2d, {x.id, w.id, b.id}};
    e.stride = stride;
    return record(std::move(e), ifpn::conv2d(value(x), value(w), value(b), stride));
  }

  Var upsample2(Var x, UpsampleMode mode) {
    TapeEntry e{Prim::Upsample, {x.id}};
    e.mode = mode;
    return record(std::move(e), ifpn::upsample2(value(x), mode));
  }

  Var group_norm(Var x, std::size_t groups, Var gamma, Var beta) {
    auto r = group_norm_full(value(x), groups, value(gamma), value(beta));
    TapeEntry e{Prim::GroupNorm, {x.id, gamma.id, beta.id}};
    e.groups = groups;
    e.saved = std::move(r.xhat);
    e.saved_stats = std::move(r.inv_std);
    return record(std::move(e), std::move(r.y));
  }

  Var relu(Var x) { return record({Prim::Relu, {x.id}}, ifpn::relu(value(x))); }

  Var add(Var a, Var b) { return record({Prim::Add, {a.id, b.id}}, ifpn::add(value(a), value(b))); }

  Var scale(Var a, double s) {
    TapeEntry e{Prim::Scale, {a.id}};
    e.scalar = s;
    return record(std::move(e), ifpn::scale(value(a), s));
  }

  /// `mask` is treated as a constant.
  Var channel_mul(Var x, Var mask) {
    return record({Prim::ChannelMul, {x.id, mask.id}}, ifpn::channel_mul(value(x), value(mask)));
  }

  Var weight_norm(Var v, Var gain) {
    return record({Prim::WeightNorm, {v.id, gain.id}}, weight_normalize(value(v), value(gain)));
  }

  /// Reverse sweep from the given (variable, cotangent) seeds. Returns one
  /// cotangent per tape value; values unreachable from the seeds stay empty.
  /// `visit` is called with each entry index as it is replayed.
  std::vector<Array4> backward(const std::vector<std::pair<Var, Array4>>& seeds,
                               const std::function<void(std::size_t)>& visit = {}) const {
    std::vector<Array4> grads(values_.size());
    for (const auto& [v, g] : seeds) accumulate(grads, v.id, g);
    for (std::size_t k = entries_.size(); k-- > 0;) {
      const TapeEntry& e = entries_[k];
      if (visit) visit(k);
      if (grads[e.out].size() == 0) continue;
      auto in = vjp_primitive(e, values_, grads[e.out]);
      for (std::size_t a = 0; a < e.args.size(); ++a) {
        if (in[a].size() != 0) accumulate(grads, e.args[a], in[a]);
      }
    }
    return grads;
  }

 private:
  Var push_value(Array4 v) {
    values_.push_back(std::move(v));
    return {values_.size() - 1};
  }

  Var record(TapeEntry e, Array4 out) {
    Var o = push_value(std::move(out));
    e.out = o.id;
    entries_.push_back(std::move(e));
    return o;
  }

  static void accumulate(std::vector<Array4>& grads, std::size_t id, const Array4& g) {
    if (grads[id].size() == 0 && grads[id].shape().volume() == 0) {
      grads[id] = g;
      return;
    }
    require_same_shape(grads[id].shape(), g.shape(), "tape accumulate");
    for (std::size_t i = 0; i < g.size(); ++i) grads[id][i] += g[i];
  }

  std::vector<Array4> values_;
  std::vector<TapeEntry> entries_;
};

}  // namespace ifpn
