#pragma once

// Experiment configuration and its JSON form. Every field has a default, so
// a config file only needs the keys it overrides:
//
//   {
//     "seed": 1,
//     "transform": {"levels": 3, "channels": 4, "variant": "res_pyramid_conv", ...},
//     "solver":    {"method": "broyden", "tol": 1e-6, "max_iters": 15, ...},
//     "backward":  {"method": "broyden", "tol": 1e-6, "max_iters": 15},
//     "task":      {"height": 16, "width": 16, "blobs_min": 1, ...},
//     "optimizer": {"learning_rate": 0.01, "iterations": 2000, ...}
//   }

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "ifpn/solver.hpp"
#include "ifpn/transform.hpp"

namespace ifpn::harness {

using json = nlohmann::json;

struct SyntheticTaskSpec {
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t levels = 3;
  std::size_t channels = 4;
  std::size_t blobs_min = 1;
  std::size_t blobs_max = 3;
  double noise = 0.05;
  std::size_t samples = 64;
  std::size_t holdout = 64;
  std::uint64_t seed = 2024;  // data only; model seeds vary independently

  void validate() const {
    if (levels < 2) throw std::invalid_argument("task: need at least 2 levels");
    const std::size_t div = std::size_t{1} << (levels - 1);
    if (height == 0 || width == 0 || height % div != 0 || width % div != 0) {
      throw std::invalid_argument("task: image size must be divisible by 2^(levels-1)");
    }
    if (blobs_min > blobs_max) throw std::invalid_argument("task: blobs_min exceeds blobs_max");
    if (noise < 0.0) throw std::invalid_argument("task: noise must be non-negative");
    if (samples == 0) throw std::invalid_argument("task: need at least one training sample");
  }
};

struct OptimizerConfig {
  double learning_rate = 0.01;
  double momentum = 0.9;
  std::size_t iterations = 2000;
  std::size_t warmup = 100;
  std::vector<double> decay_at = {0.6, 0.85};  // fractions of training
  double decay_factor = 0.1;
  std::size_t batch_size = 2;
  double grad_clip = 0.0;  // global norm; 0 disables

  double lr_at(std::size_t step) const {
    double lr = learning_rate;
    if (warmup > 0 && step < warmup) lr *= static_cast<double>(step + 1) / static_cast<double>(warmup);
    for (double f : decay_at) {
      if (static_cast<double>(step) >= f * static_cast<double>(iterations)) lr *= decay_factor;
    }
    return lr;
  }

  void validate() const {
    if (learning_rate < 0.0) throw std::invalid_argument("optimizer: negative learning rate");
    if (momentum < 0.0 || momentum >= 1.0) throw std::invalid_argument("optimizer: momentum must lie in [0, 1)");
    if (batch_size == 0) throw std::invalid_argument("optimizer: batch size must be positive");
  }
};

struct ExperimentConfig {
  TransformConfig transform;
  SolverConfig solver;
  SolverConfig backward;
  SyntheticTaskSpec task;
  OptimizerConfig optimizer;
  std::uint64_t seed = 1;

  void validate() const {
    transform.validate();
    solver.validate();
    backward.validate();
    task.validate();
    optimizer.validate();
    if (task.levels != transform.levels || task.channels != transform.channels) {
      throw std::invalid_argument("config: task and transform disagree on levels/channels");
    }
  }
};

// ---------------------------------------------------------------------------
// JSON

inline json to_json(const TransformConfig& c) {
  return {{"levels", c.levels},       {"channels", c.channels},         {"variant", variant_name(c.variant)},
          {"groups", c.groups},       {"weight_norm", c.weight_norm},   {"dropout_rate", c.dropout_rate}};
}

inline json to_json(const SolverConfig& c) {
  json j = {{"method", method_name(c.method)}, {"unroll_steps", c.unroll_steps}, {"tol", c.tol},
            {"max_iters", c.max_iters},        {"step_size", c.step_size},       {"max_halvings", c.max_halvings},
            {"divergence_factor", c.divergence_factor}};
  j["memory"] = c.memory ? json(*c.memory) : json(nullptr);
  j["eval_iters"] = c.eval_iters ? json(*c.eval_iters) : json(nullptr);
  return j;
}

inline json to_json(const SyntheticTaskSpec& t) {
  return {{"height", t.height}, {"width", t.width},   {"levels", t.levels},   {"channels", t.channels},
          {"blobs_min", t.blobs_min}, {"blobs_max", t.blobs_max}, {"noise", t.noise},
          {"samples", t.samples}, {"holdout", t.holdout}, {"seed", t.seed}};
}

inline json to_json(const OptimizerConfig& o) {
  return {{"learning_rate", o.learning_rate}, {"momentum", o.momentum},     {"iterations", o.iterations},
          {"warmup", o.warmup},               {"decay_at", o.decay_at},     {"decay_factor", o.decay_factor},
          {"batch_size", o.batch_size},       {"grad_clip", o.grad_clip}};
}

inline json to_json(const ExperimentConfig& c) {
  return {{"seed", c.seed},
          {"transform", to_json(c.transform)},
          {"solver", to_json(c.solver)},
          {"backward", to_json(c.backward)},
          {"task", to_json(c.task)},
          {"optimizer", to_json(c.optimizer)}};
}

namespace detail {

template <class T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline void read_opt(const json& j, const char* key, std::optional<std::size_t>& out) {
  if (!j.contains(key)) return;
  if (j.at(key).is_null()) {
    out.reset();
  } else {
    out = j.at(key).get<std::size_t>();
  }
}

}  // namespace detail

inline void from_json(const json& j, TransformConfig& c) {
  detail::read(j, "levels", c.levels);
  detail::read(j, "channels", c.channels);
  if (j.contains("variant")) c.variant = parse_variant(j.at("variant").get<std::string>());
  detail::read(j, "groups", c.groups);
  detail::read(j, "weight_norm", c.weight_norm);
  detail::read(j, "dropout_rate", c.dropout_rate);
}

inline void from_json(const json& j, SolverConfig& c) {
  if (j.contains("method")) c.method = parse_method(j.at("method").get<std::string>());
  detail::read(j, "unroll_steps", c.unroll_steps);
  detail::read(j, "tol", c.tol);
  detail::read(j, "max_iters", c.max_iters);
  detail::read(j, "step_size", c.step_size);
  detail::read(j, "max_halvings", c.max_halvings);
  detail::read(j, "divergence_factor", c.divergence_factor);
  detail::read_opt(j, "memory", c.memory);
  detail::read_opt(j, "eval_iters", c.eval_iters);
}

inline void from_json(const json& j, SyntheticTaskSpec& t) {
  detail::read(j, "height", t.height);
  detail::read(j, "width", t.width);
  detail::read(j, "levels", t.levels);
  detail::read(j, "channels", t.channels);
  detail::read(j, "blobs_min", t.blobs_min);
  detail::read(j, "blobs_max", t.blobs_max);
  detail::read(j, "noise", t.noise);
  detail::read(j, "samples", t.samples);
  detail::read(j, "holdout", t.holdout);
  detail::read(j, "seed", t.seed);
}

inline void from_json(const json& j, OptimizerConfig& o) {
  detail::read(j, "learning_rate", o.learning_rate);
  detail::read(j, "momentum", o.momentum);
  detail::read(j, "iterations", o.iterations);
  detail::read(j, "warmup", o.warmup);
  detail::read(j, "decay_at", o.decay_at);
  detail::read(j, "decay_factor", o.decay_factor);
  detail::read(j, "batch_size", o.batch_size);
  detail::read(j, "grad_clip", o.grad_clip);
}

/// Applies the keys present in `j` on top of `c`. Task levels/channels
/// follow the transform unless the task section sets them.
inline void from_json(const json& j, ExperimentConfig& c) {
  detail::read(j, "seed", c.seed);
  if (j.contains("transform")) from_json(j.at("transform"), c.transform);
  if (j.contains("solver")) {
    from_json(j.at("solver"), c.solver);
    if (!j.contains("backward")) {
      c.backward.tol = c.solver.tol;
      c.backward.max_iters = c.solver.max_iters;
    }
  }
  if (j.contains("backward")) from_json(j.at("backward"), c.backward);
  c.task.levels = c.transform.levels;
  c.task.channels = c.transform.channels;
  if (j.contains("task")) from_json(j.at("task"), c.task);
  if (j.contains("optimizer")) from_json(j.at("optimizer"), c.optimizer);
}

inline ExperimentConfig default_config() {
  ExperimentConfig c;
  c.transform.groups = 2;
  c.solver.tol = 1e-4;
  c.backward = c.solver;
  c.backward.method = Method::Broyden;
  c.task.samples = 512;
  c.optimizer.batch_size = 4;
  return c;
}

inline ExperimentConfig parse_config(const std::string& text) {
  ExperimentConfig c = default_config();
  from_json(json::parse(text), c);
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

/// 64-bit FNV-1a of the canonical JSON dump.
inline std::uint64_t config_digest(const ExperimentConfig& c) {
  const std::string s = to_json(c).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace ifpn::harness
