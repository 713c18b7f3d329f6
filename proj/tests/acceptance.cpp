// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fail.
//
//   acceptance            run everything
//   acceptance 2 5 8      run the listed criteria only

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "ifpn/affine_map.hpp"
#include "ifpn/harness/checkpoint.hpp"
#include "ifpn/harness/gradcheck.hpp"
#include "ifpn/harness/train.hpp"
#include "ifpn/harness/trend.hpp"
#include "ifpn/implicit.hpp"
#include "ifpn/solver.hpp"
#include "ifpn/transform.hpp"

using namespace ifpn;
using namespace ifpn::harness;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(3);
  os << v;
  return os.str();
}

// (I - A)^{-1} c by Gaussian elimination with partial pivoting.
Vec closed_form(std::size_t n, const Vec& a, const Vec& c) {
  std::vector<Vec> m(n, Vec(n + 1));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) m[i][j] = (i == j ? 1.0 : 0.0) - a[i * n + j];
    m[i][n] = c[i];
  }
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t piv = k;
    for (std::size_t i = k + 1; i < n; ++i)
      if (std::abs(m[i][k]) > std::abs(m[piv][k])) piv = i;
    std::swap(m[k], m[piv]);
    for (std::size_t i = k + 1; i < n; ++i) {
      const double f = m[i][k] / m[k][k];
      for (std::size_t j = k; j <= n; ++j) m[i][j] -= f * m[k][j];
    }
  }
  Vec x(n);
  for (std::size_t i = n; i-- > 0;) {
    double s = m[i][n];
    for (std::size_t j = i + 1; j < n; ++j) s -= m[i][j] * x[j];
    x[i] = s / m[i][i];
  }
  return x;
}

// Largest singular value by power iteration on A^T A.
double spectral_norm(std::size_t n, const Vec& a) {
  Vec v(n, 1.0);
  double sigma = 0.0;
  for (int it = 0; it < 500; ++it) {
    Vec av(n, 0.0), w(n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) av[i] += a[i * n + j] * v[j];
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) w[j] += a[i * n + j] * av[i];
    const double nw = norm2(w);
    sigma = std::sqrt(nw / norm2(v));
    for (std::size_t i = 0; i < n; ++i) v[i] = w[i] / nw;
  }
  return sigma;
}

// ---------------------------------------------------------------------------

Outcome affine_oracle() {
  std::mt19937_64 rng(20240611);
  std::normal_distribution<double> nd;
  std::uniform_int_distribution<std::size_t> dim(1, 8);
  std::uniform_real_distribution<double> radius(0.1, 0.89);
  std::size_t ok = 0;
  std::size_t worst_iters = 0;
  std::size_t worst_dim = 0;
  double worst_err = 0.0;
  for (int k = 0; k < 20; ++k) {
    const std::size_t n = dim(rng);
    Vec a(n * n), c(n);
    for (double& x : a) x = nd(rng);
    for (double& x : c) x = nd(rng);
    const double s = radius(rng) / (1.001 * spectral_norm(n, a));
    for (double& x : a) x *= s;  // spectral norm bounds the spectral radius
    const AffineMap g(n, a, c);

    SolverConfig cfg;
    cfg.method = Method::Broyden;
    cfg.tol = 1e-14;
    cfg.max_iters = n + 1;
    cfg.memory = n + 1;
    const auto r = solve_map(g, Vec(n, 0.0), Vec(n, 0.0), cfg);
    const Vec want = closed_form(n, a, c);
    const double err = norm2(sub(r.x, want)) / std::max(norm2(want), kResidualFloor);

    // How many iterations the same solver needs when allowed to continue.
    SolverConfig open = cfg;
    open.tol = 1e-12;
    open.max_iters = 100;
    open.memory = 100;
    const auto full = solve_map(g, Vec(n, 0.0), Vec(n, 0.0), open);

    if (err <= 1e-8) ++ok;
    if (err > worst_err) {
      worst_err = err;
      worst_dim = n;
      worst_iters = full.report.iterations_used;
    }
  }
  return {ok == 20, std::to_string(ok) + "/20 maps within 1e-8 after dim+1 iterations; worst rel error " +
                        fmt(worst_err) + " at dim " + std::to_string(worst_dim) + " (that map needs " +
                        std::to_string(worst_iters) + " iterations)"};
}

Outcome forward_certificate() {
  const double tol = 1e-6;
  std::size_t total = 0;
  std::size_t ok = 0;
  double worst = 0.0;
  std::string failed;
  std::uint64_t seed = 100;
  for (std::size_t levels : {2, 3}) {
    for (std::size_t channels : {4, 8}) {
      for (Variant v : {Variant::DenseFPN, Variant::ResDense, Variant::ResPyramidConv}) {
        const TransformConfig tc{.levels = levels, .channels = channels, .variant = v};
        ++seed;
        const PyramidTransform g = make_transform(tc, seed);
        std::mt19937_64 rng(seed);
        const Pyramid b = random_pyramid(1, channels, 16, 16, levels, 1.0, rng);
        SolverConfig picard;
        picard.method = Method::Picard;
        picard.tol = tol;
        picard.max_iters = 200;
        SolverConfig broyden = picard;
        broyden.method = Method::Broyden;
        broyden.memory = 200;
        SolverConfig unroll = SolverConfig::unroll(200);
        unroll.tol = tol;
        for (const SolverConfig& sc : {picard, broyden, unroll}) {
          ++total;
          const auto s = solve(g, b, sc);
          const double rr = relative_residual(g, s.p, b);
          worst = std::max(worst, rr);
          if (rr <= tol && certify(g, s.p, b, s.report, true)) {
            ++ok;
          } else if (failed.empty()) {
            failed = std::string("; first failure: ") + method_name(sc.method) + " " + variant_name(v) +
                     " n=" + std::to_string(levels) + " C=" + std::to_string(channels) + " residual " + fmt(rr);
          }
        }
      }
    }
  }
  return {ok == total, std::to_string(ok) + "/" + std::to_string(total) +
                           " solves certified (picard, broyden, unroll T=200); worst recomputed residual " +
                           fmt(worst) + failed};
}

struct GradInstance {
  PyramidTransform g;
  Pyramid b;
  Pyramid c;
};

GradInstance grad_instance(const TransformConfig& cfg, std::uint64_t seed, std::size_t base = 8) {
  std::mt19937_64 rng(seed);
  PyramidTransform g = gradcheck_instance(cfg, seed, rng);
  Pyramid b = random_pyramid(1, cfg.channels, base, base, cfg.levels, 1.0, rng);
  Pyramid c = random_pyramid(1, cfg.channels, base, base, cfg.levels, 1.0, rng);
  return {std::move(g), std::move(b), std::move(c)};
}

Outcome gradient_exactness() {
  const std::vector<TransformConfig> configs = {
      {.levels = 2, .channels = 1, .variant = Variant::ResPyramidConv},
      {.levels = 2, .channels = 2, .variant = Variant::DenseFPN},
      {.levels = 2, .channels = 1, .variant = Variant::ResDense},
      {.levels = 3, .channels = 1, .variant = Variant::ResPyramidConv},
  };
  bool pass = true;
  std::size_t coords = 0;
  double worst = 0.0;
  std::string notes;
  std::uint64_t seed = 30;
  for (const auto& tc : configs) {
    GradInstance in = grad_instance(tc, ++seed);
    if (in.g.params().size() > 200) {
      pass = false;
      notes += "; instance exceeds 200 parameters";
      continue;
    }
    ImplicitCheckOptions opt;
    opt.solve_tol = 1e-11;
    opt.fd_tol = 1e-4;
    const CheckResult r = check_implicit_fd(in.g, in.b, in.c, opt);
    coords += r.checked;
    if (r.worst) worst = std::max(worst, r.worst->rel_error);
    if (!r.pass) {
      pass = false;
      notes += "; " + r.summary();
    }
  }
  return {pass, std::to_string(coords) + " coordinates of d_theta and d_B over " + std::to_string(configs.size()) +
                    " instances; worst rel error " + fmt(worst) + notes};
}

Outcome implicit_vs_unrolled() {
  bool pass = true;
  double min_cos = 1.0;
  double max_rel = 0.0;
  std::size_t count = 0;
  std::string notes;
  std::uint64_t seed = 50;
  for (std::size_t levels : {2, 3, 4}) {
    for (std::size_t channels : {2, 4, 8}) {
      for (Variant v : {Variant::DenseFPN, Variant::ResDense, Variant::ResPyramidConv}) {
        GradInstance in = grad_instance({.levels = levels, .channels = channels, .variant = v}, ++seed);
        const AgreementResult r = check_implicit_vs_unrolled(in.g, in.b, in.c, 50, 1e-10);
        ++count;
        min_cos = std::min(min_cos, r.cosine);
        max_rel = std::max(max_rel, r.rel_l2);
        if (!r.pass) {
          pass = false;
          if (notes.empty()) notes = "; first failure " + std::string(variant_name(v)) + ": " + r.summary();
        }
      }
    }
  }
  return {pass, std::to_string(count) + " instances; min cosine " + fmt(min_cos) + ", max rel L2 " + fmt(max_rel) +
                    notes};
}

Outcome solver_efficiency() {
  BenchOptions o;
  o.instances = 10;
  o.tol = 1e-10;
  const BenchResult r = run_bench(o);
  std::string iters;
  for (const auto& row : r.rows) {
    iters += " " + std::to_string(row.broyden_iters) + "/" + std::to_string(row.picard_iters);
  }
  const bool pass = r.not_worse >= 9 && r.strictly_fewer >= 7;
  return {pass, "broyden <= picard on " + std::to_string(r.not_worse) + "/10, strictly fewer on " +
                    std::to_string(r.strictly_fewer) + "/10 (broyden/picard:" + iters + ")"};
}

Outcome trend_ordering() {
  const ExperimentConfig base = default_config();
  TrendOptions o;
  o.seeds = {1, 2, 3};
  o.jobs = std::max(1u, std::thread::hardware_concurrency());
  const TrendResult r = run_trend(base, o);
  std::string d;
  for (const auto& s : r.summaries) d += s.label + " " + fmt(s.mean) + "±" + fmt(s.sd) + "  ";
  for (const auto& c : r.checks) {
    d += std::string(c.pass ? "[ok] " : "[violated] ") + c.description + "  ";
  }
  return {r.pass, d};
}

Outcome reduced_eval_iterations() {
  ExperimentConfig cfg = default_config();
  cfg.solver.method = Method::Broyden;
  cfg.solver.max_iters = 15;
  const TrainResult tr = train(cfg);
  if (tr.aborted) return {false, "training aborted: " + tr.abort_reason};
  const Model m = model_from_checkpoint(tr.checkpoint);
  const Dataset data = make_task(cfg.task);

  // A tolerance no solve reaches, so each evaluation spends its whole budget.
  SolverConfig full = cfg.solver;
  full.tol = 1e-14;
  SolverConfig reduced = full;
  reduced.eval_iters = 7;
  const auto l15 = evaluate(m, data.holdout, full);
  const auto l7 = evaluate(m, data.holdout, reduced);
  double worst = 0.0;
  std::size_t within = 0;
  for (std::size_t i = 0; i < l15.size(); ++i) {
    const double rel = std::abs(l7[i] - l15[i]) / std::max(std::abs(l15[i]), 1e-300);
    worst = std::max(worst, rel);
    if (rel <= 0.01) ++within;
  }
  return {within == l15.size(), std::to_string(within) + "/" + std::to_string(l15.size()) +
                                    " held-out samples within 1%; worst rel change " + fmt(worst) + " (mean loss " +
                                    fmt(mean(l15)) + " vs " + fmt(mean(l7)) + ")"};
}

Outcome weight_norm_invariance() {
  double worst = 0.0;
  std::size_t directions = 0;
  std::uint64_t seed = 70;
  for (Variant v : {Variant::DenseFPN, Variant::ResDense, Variant::ResPyramidConv}) {
    for (std::size_t levels : {2, 3}) {
      const TransformConfig tc{.levels = levels, .channels = 4, .variant = v};
      std::mt19937_64 rng(++seed);
      const PyramidTransform g = gradcheck_instance(tc, seed, rng);
      const Pyramid z = random_pyramid(2, 4, 16, 16, levels, 1.0, rng);
      const Vec ref = pack(g.apply(z)).data;
      for (std::size_t s = 0; s < g.params().num_segments(); ++s) {
        if (!g.params().name(s).ends_with(".v")) continue;
        ParamSet p = g.params();
        for (std::size_t i = 0; i < p.at(s).size(); ++i) p.at(s)[i] *= 10.0;
        const Vec out = pack(PyramidTransform(tc, std::move(p)).apply(z)).data;
        ++directions;
        for (std::size_t i = 0; i < out.size(); ++i) worst = std::max(worst, std::abs(out[i] - ref[i]));
      }
    }
  }
  return {directions > 0 && worst <= 1e-10,
          std::to_string(directions) + " direction tensors scaled by 10; max output change " + fmt(worst)};
}

Outcome determinism_and_persistence() {
  ExperimentConfig cfg = default_config();
  cfg.optimizer.iterations = 100;
  cfg.optimizer.warmup = 10;
  cfg.transform.dropout_rate = 0.1;
  const TrainResult a = train(cfg);
  const TrainResult b = train(cfg);
  bool same = a.metrics.size() == b.metrics.size() && a.checkpoint == b.checkpoint;
  for (std::size_t i = 0; same && i < a.metrics.size(); ++i) same = a.metrics[i].same_run_as(b.metrics[i]);
  std::ostringstream ma, mb;
  write_metrics_csv(ma, a.metrics);
  write_metrics_csv(mb, b.metrics);

  const auto path = std::filesystem::temp_directory_path() / "ifpn_acceptance_ckpt.bin";
  save_checkpoint(path.string(), a.checkpoint);
  const Checkpoint loaded = load_checkpoint(path.string());
  std::filesystem::remove(path);
  const bool round_trip = loaded == a.checkpoint;

  const Model m0 = model_from_checkpoint(a.checkpoint);
  const Model m1 = model_from_checkpoint(loaded);
  const Dataset data = make_task(cfg.task);
  const DropoutMask ones = ones_mask(cfg.transform, 1);
  bool resolve = true;
  for (std::size_t k = 0; k < 8; ++k) {
    auto [img, tgt] = stack({&data.holdout[k]});
    const Forward f0 = forward(m0, img, cfg.solver, SolveMode::Eval, &ones);
    const Forward f1 = forward(m1, img, cfg.solver, SolveMode::Eval, &ones);
    resolve = resolve && f0.p == f1.p && f0.report.iterations_used == f1.report.iterations_used;
  }
  return {same && round_trip && resolve && !a.aborted,
          std::string("metrics ") + (same ? "bitwise identical" : "DIFFER") + " over " +
              std::to_string(a.metrics.size()) + " steps; checkpoint round trip " +
              (round_trip ? "identical" : "DIFFERS") + "; re-solve " + (resolve ? "bitwise identical" : "DIFFERS")};
}

struct Criterion {
  int id;
  const char* name;
  double limit_seconds;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all = {
      {1, "affine fixed-point oracle", 1.0, affine_oracle},
      {2, "forward certificate", 30.0, forward_certificate},
      {3, "implicit gradients vs finite differences", 120.0, gradient_exactness},
      {4, "implicit vs unrolled(T=50) gradients", 120.0, implicit_vs_unrolled},
      {5, "broyden vs picard iterations", 60.0, solver_efficiency},
      {6, "unrolling-depth loss ordering", 1800.0, trend_ordering},
      {7, "reduced eval iterations", 0.0, reduced_eval_iterations},
      {8, "weight-norm scale invariance", 0.0, weight_norm_invariance},
      {9, "determinism and persistence", 0.0, determinism_and_persistence},
  };
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));

  int failures = 0;
  for (const auto& c : all) {
    if (!wanted.empty() && !wanted.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::string timing = fmt(secs) + " s";
    if (c.limit_seconds > 0.0) {
      timing += " of " + fmt(c.limit_seconds) + " s";
      if (secs > c.limit_seconds) {
        o.pass = false;
        timing += ", over the limit";
      }
    }
    if (!o.pass) ++failures;
    std::cout << (o.pass ? "PASS" : "FAIL") << " [" << c.id << "] " << c.name << ": " << o.detail << " (" << timing
              << ")" << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
