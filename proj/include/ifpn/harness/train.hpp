#pragma once

// Training loop: encode -> equilibrium solve -> head/loss -> implicit (or
// unrolled) backward -> momentum SGD on encoder, transform and head.

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <istream>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "ifpn/harness/checkpoint.hpp"
#include "ifpn/harness/config.hpp"
#include "ifpn/harness/dataset.hpp"
#include "ifpn/harness/model.hpp"
#include "ifpn/implicit.hpp"
#include "ifpn/solver.hpp"
#include "ifpn/transform.hpp"

namespace ifpn::harness {

struct Model {
  ParamSet encoder;
  PyramidTransform transform;
  ParamSet head;
};

inline Model init_model(const ExperimentConfig& cfg) {
  const std::uint64_t s = cfg.seed * 0x9e3779b97f4a7c15ULL;
  return {init_encoder(cfg.transform.levels, cfg.transform.channels, s + 1),
          make_transform(cfg.transform, s + 2),
          init_head(cfg.transform.levels, cfg.transform.channels, s + 3)};
}

inline Model model_from_checkpoint(const Checkpoint& c) {
  return {c.encoder, PyramidTransform(c.config.transform, c.transform), c.head};
}

inline Checkpoint make_checkpoint(const ExperimentConfig& cfg, const Model& m, std::uint64_t step) {
  return {cfg, step, m.encoder, m.transform.params(), m.head};
}

/// Relative agreement demanded between a solver's reported residual and an
/// independent recomputation at the returned iterate.
inline constexpr double kCertificateAgreement = 1e-12;

/// True when `report` is consistent with a fresh evaluation of the residual at `p`
/// (and, when `require_converged`, the solve reached its tolerance).
inline bool certify(const PyramidTransform& g, const Pyramid& p, const Pyramid& b, const SolverReport& report,
                    bool require_converged, const DropoutMask* mask = nullptr) {
  const double rr = relative_residual(g, p, b, mask);
  if (!std::isfinite(rr) || !std::isfinite(report.final_rel_residual)) return false;
  if (std::abs(rr - report.final_rel_residual) > kCertificateAgreement * std::max(1.0, rr)) return false;
  return !require_converged || report.converged;
}

struct Forward {
  EncoderRecord encoder;
  Pyramid b;
  Pyramid p;
  SolverReport report;
  std::optional<PyramidUnroll> unrolled;  // kept when the solver is Unroll
};

inline Forward forward(const Model& m, const Array4& images, const SolverConfig& solver, SolveMode mode,
                       const DropoutMask* mask) {
  Forward f{encoder_record(m.encoder, images), {}, {}, {}, std::nullopt};
  f.b = encoder_output(f.encoder);
  if (solver.method == Method::Unroll) {
    f.unrolled = unroll_solve(m.transform, f.b, Pyramid::zeros_like(f.b), solver.unroll_steps, mask, solver.tol);
    f.p = f.unrolled->p;
    f.report = f.unrolled->report;
  } else {
    auto s = solve(m.transform, f.b, solver, mode, mask);
    f.p = std::move(s.p);
    f.report = std::move(s.report);
  }
  return f;
}

inline DropoutMask ones_mask(const TransformConfig& cfg, std::size_t batch) {
  DropoutMask m;
  for (std::size_t l = 0; l < cfg.levels; ++l) m.emplace_back(Shape4{batch, cfg.channels, 1, 1}, 1.0);
  return m;
}

/// Per-sample held-out losses (batch of one, no dropout).
inline std::vector<double> evaluate(const Model& m, const std::vector<Sample>& samples, const SolverConfig& solver,
                                    SolveMode mode = SolveMode::Eval) {
  std::vector<double> losses;
  const DropoutMask ones = ones_mask(m.transform.config(), 1);
  const DropoutMask* mask = m.transform.config().dropout_rate > 0.0 ? &ones : nullptr;
  for (const Sample& s : samples) {
    auto [images, target] = stack({&s});
    Forward f = forward(m, images, solver, mode, mask);
    losses.push_back(head_and_loss(m.head, f.p, target).loss);
  }
  return losses;
}

inline double mean(const std::vector<double>& v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// ---------------------------------------------------------------------------
// Metrics.

struct StepMetrics {
  std::size_t step = 0;
  double loss = 0.0;
  std::size_t fwd_iters = 0;
  double fwd_residual = 0.0;
  std::size_t bwd_iters = 0;
  double bwd_residual = 0.0;
  double lr = 0.0;
  bool skipped = false;
  double wall_time = 0.0;  // seconds; the only non-deterministic field

  /// Equality on every field except wall time.
  bool same_run_as(const StepMetrics& o) const {
    auto bits = [](double d) { return std::bit_cast<std::uint64_t>(d); };
    return step == o.step && bits(loss) == bits(o.loss) && fwd_iters == o.fwd_iters &&
           bits(fwd_residual) == bits(o.fwd_residual) && bwd_iters == o.bwd_iters &&
           bits(bwd_residual) == bits(o.bwd_residual) && bits(lr) == bits(o.lr) && skipped == o.skipped;
  }
};

inline json to_json(const StepMetrics& m) {
  return {{"step", m.step},           {"loss", m.loss},         {"fwd_iters", m.fwd_iters},
          {"fwd_residual", m.fwd_residual}, {"bwd_iters", m.bwd_iters}, {"bwd_residual", m.bwd_residual},
          {"lr", m.lr},               {"skipped", m.skipped},   {"wall_time", m.wall_time}};
}

inline StepMetrics metrics_from_json(const json& j) {
  StepMetrics m;
  m.step = j.at("step").get<std::size_t>();
  m.loss = j.at("loss").get<double>();
  m.fwd_iters = j.at("fwd_iters").get<std::size_t>();
  m.fwd_residual = j.at("fwd_residual").get<double>();
  m.bwd_iters = j.at("bwd_iters").get<std::size_t>();
  m.bwd_residual = j.at("bwd_residual").get<double>();
  m.lr = j.value("lr", 0.0);
  m.skipped = j.value("skipped", false);
  m.wall_time = j.value("wall_time", 0.0);
  return m;
}

/// One JSON object per line.
inline void write_metrics(std::ostream& os, const std::vector<StepMetrics>& ms) {
  for (const auto& m : ms) os << to_json(m).dump() << "\n";
}

inline std::vector<StepMetrics> read_metrics(std::istream& is) {
  std::vector<StepMetrics> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    out.push_back(metrics_from_json(json::parse(line)));
  }
  return out;
}

inline void write_metrics_csv(std::ostream& os, const std::vector<StepMetrics>& ms) {
  os << "step,loss,fwd_iters,fwd_residual,bwd_iters,bwd_residual,lr,skipped,wall_time\n";
  const auto prec = os.precision(17);
  for (const auto& m : ms) {
    os << m.step << "," << m.loss << "," << m.fwd_iters << "," << m.fwd_residual << "," << m.bwd_iters << ","
       << m.bwd_residual << "," << m.lr << "," << (m.skipped ? 1 : 0) << "," << m.wall_time << "\n";
  }
  os.precision(prec);
}

// ---------------------------------------------------------------------------
// Training.

/// Fraction of skipped steps at which a run is abandoned.
inline constexpr double kMaxSkipFraction = 0.2;

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<StepMetrics> metrics;
  std::size_t skipped = 0;
  bool aborted = false;
  std::string abort_reason;
};

struct TrainOptions {
  std::function<void(const StepMetrics&)> on_step;  // streaming sink, optional
  const Dataset* dataset = nullptr;                 // reuse a prebuilt task
};

namespace detail {

inline void sgd_update(ParamSet& params, ParamSet& velocity, const ParamSet& grad, double lr, double momentum,
                       double grad_scale) {
  for (std::size_t s = 0; s < params.num_segments(); ++s) {
    Array4& p = params.at(s);
    Array4& v = velocity.at(s);
    const Array4& g = grad.at(s);
    for (std::size_t i = 0; i < p.size(); ++i) {
      v[i] = momentum * v[i] + grad_scale * g[i];
      p[i] -= lr * v[i];
    }
  }
}

inline double sq_norm(const ParamSet& p) {
  double s = 0.0;
  for (std::size_t k = 0; k < p.num_segments(); ++k)
    for (double v : p.at(k).vec()) s += v * v;
  return s;
}

}  // namespace detail

inline TrainResult train(const ExperimentConfig& cfg, const TrainOptions& opts = {}) {
  cfg.validate();
  Dataset owned;
  if (opts.dataset == nullptr) owned = make_task(cfg.task);
  const Dataset& data = opts.dataset ? *opts.dataset : owned;

  Model m = init_model(cfg);
  ParamSet v_enc = ParamSet::zeros_like(m.encoder);
  ParamSet v_tr = ParamSet::zeros_like(m.transform.params());
  ParamSet v_head = ParamSet::zeros_like(m.head);

  std::mt19937_64 rng(cfg.seed ^ 0x7f4a7c159e3779b9ULL);
  std::vector<std::size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();

  const auto& oc = cfg.optimizer;
  const bool unroll = cfg.solver.method == Method::Unroll;
  const std::size_t max_skips =
      static_cast<std::size_t>(std::ceil(kMaxSkipFraction * static_cast<double>(oc.iterations)));

  TrainResult result;
  for (std::size_t step = 0; step < oc.iterations; ++step) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<const Sample*> batch;
    for (std::size_t k = 0; k < oc.batch_size; ++k) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      batch.push_back(&data.train[order[cursor++]]);
    }
    auto [images, target] = stack(batch);

    std::optional<DropoutMask> mask;
    if (cfg.transform.dropout_rate > 0.0) mask = sample_dropout_mask(cfg.transform, batch.size(), rng());
    const DropoutMask* mp = mask ? &*mask : nullptr;

    StepMetrics sm;
    sm.step = step;
    sm.lr = oc.lr_at(step);

    Forward f = forward(m, images, cfg.solver, SolveMode::Train, mp);
    sm.fwd_iters = f.report.iterations_used;
    sm.fwd_residual = f.report.final_rel_residual;
    HeadLoss hl = head_and_loss(m.head, f.p, target);
    sm.loss = hl.loss;

    const bool ok = std::isfinite(hl.loss) && certify(m.transform, f.p, f.b, f.report, !unroll, mp);
    if (!ok) {
      sm.skipped = true;
      ++result.skipped;
    } else {
      GradBundle gb;
      if (unroll) {
        gb = unrolled_grads(m.transform, *f.unrolled, hl.d_p, mp);
        sm.bwd_iters = cfg.solver.unroll_steps;
      } else {
        auto ig = implicit_grads(m.transform, f.p, f.b, hl.d_p, cfg.backward, mp);
        gb = std::move(ig.grads);
        sm.bwd_iters = ig.adjoint.report.iterations_used;
        sm.bwd_residual = ig.adjoint.report.final_rel_residual;
      }
      ParamSet g_enc = encoder_backward(m.encoder, f.encoder, gb.d_input);

      double scale = 1.0;
      if (oc.grad_clip > 0.0) {
        const double gn = std::sqrt(detail::sq_norm(g_enc) + detail::sq_norm(gb.d_theta) + detail::sq_norm(hl.d_head));
        if (gn > oc.grad_clip) scale = oc.grad_clip / gn;
      }
      detail::sgd_update(m.encoder, v_enc, g_enc, sm.lr, oc.momentum, scale);
      detail::sgd_update(m.transform.params(), v_tr, gb.d_theta, sm.lr, oc.momentum, scale);
      detail::sgd_update(m.head, v_head, hl.d_head, sm.lr, oc.momentum, scale);
    }
    sm.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (opts.on_step) opts.on_step(sm);
    result.metrics.push_back(sm);
    if (result.skipped >= max_skips && max_skips > 0) {
      result.aborted = true;
      result.abort_reason = std::to_string(result.skipped) + " of " + std::to_string(step + 1) +
                            " steps skipped (fixed-point certificate failed)";
      result.checkpoint = make_checkpoint(cfg, m, step + 1);
      return result;
    }
  }
  result.checkpoint = make_checkpoint(cfg, m, oc.iterations);
  return result;
}

}  // namespace ifpn::harness
