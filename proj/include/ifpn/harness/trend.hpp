#pragma once

// Unrolling-depth experiment and the Broyden-vs-Picard benchmark.
//
// The trend experiment trains one model per (setting, seed) on a shared
// task and scores each on the held-out split with the solver it was
// trained with. Orderings are judged on seed means with a margin of one
// pooled standard deviation of the two settings being compared.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <future>
#include <mutex>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "ifpn/harness/train.hpp"

namespace ifpn::harness {

struct TrendSetting {
  std::string label;
  SolverConfig solver;
};

inline std::vector<TrendSetting> default_trend_settings(const SolverConfig& broyden) {
  SolverConfig b = broyden;
  b.method = Method::Broyden;
  return {{"unroll0", SolverConfig::unroll(0)},
          {"unroll1", SolverConfig::unroll(1)},
          {"unroll2", SolverConfig::unroll(2)},
          {"broyden", b}};
}

struct TrendRun {
  std::string label;
  std::uint64_t seed = 0;
  double eval_loss = 0.0;
  double train_tail_loss = 0.0;  // mean over the last 10% of steps
  std::size_t skipped = 0;
  bool aborted = false;
  double seconds = 0.0;
};

struct TrendSummary {
  std::string label;
  double mean = 0.0;
  double sd = 0.0;  // sample standard deviation over seeds
  std::size_t runs = 0;
};

struct OrderingCheck {
  std::string description;
  bool pass = false;
  double lhs = 0.0;
  double rhs = 0.0;
  double margin = 0.0;
};

struct TrendResult {
  std::vector<TrendRun> runs;
  std::vector<TrendSummary> summaries;
  std::vector<OrderingCheck> checks;
  bool pass = false;
};

inline TrendSummary summarize(const std::string& label, const std::vector<double>& xs) {
  TrendSummary s{label, mean(xs), 0.0, xs.size()};
  if (xs.size() > 1) {
    double v = 0.0;
    for (double x : xs) v += (x - s.mean) * (x - s.mean);
    s.sd = std::sqrt(v / static_cast<double>(xs.size() - 1));
  }
  return s;
}

inline double pooled_sd(const TrendSummary& a, const TrendSummary& b) {
  const double na = static_cast<double>(a.runs);
  const double nb = static_cast<double>(b.runs);
  if (na + nb <= 2.0) return 0.0;
  return std::sqrt(((na - 1.0) * a.sd * a.sd + (nb - 1.0) * b.sd * b.sd) / (na + nb - 2.0));
}

/// a.mean > b.mean + pooled sd.
inline OrderingCheck strictly_worse(const TrendSummary& a, const TrendSummary& b) {
  const double m = pooled_sd(a, b);
  return {a.label + " > " + b.label, a.mean > b.mean + m, a.mean, b.mean, m};
}

/// a.mean <= b.mean + pooled sd.
inline OrderingCheck no_worse(const TrendSummary& a, const TrendSummary& b) {
  const double m = pooled_sd(a, b);
  return {a.label + " <= " + b.label + " + margin", a.mean <= b.mean + m, a.mean, b.mean, m};
}

struct TrendOptions {
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  std::vector<TrendSetting> settings;  // empty: default_trend_settings(base.solver)
  std::size_t jobs = 1;
  std::function<void(const TrendRun&)> on_run;
};

inline TrendRun trend_run(const ExperimentConfig& base, const TrendSetting& setting, std::uint64_t seed,
                          const Dataset& data) {
  ExperimentConfig cfg = base;
  cfg.seed = seed;
  cfg.solver = setting.solver;
  const auto t0 = std::chrono::steady_clock::now();
  TrainOptions opts;
  opts.dataset = &data;
  TrainResult r = train(cfg, opts);
  TrendRun run;
  run.label = setting.label;
  run.seed = seed;
  run.skipped = r.skipped;
  run.aborted = r.aborted;
  run.eval_loss = mean(evaluate(model_from_checkpoint(r.checkpoint), data.holdout, cfg.solver));
  const std::size_t from = r.metrics.size() - std::max<std::size_t>(1, r.metrics.size() / 10);
  std::vector<double> tail;
  for (std::size_t i = from; i < r.metrics.size(); ++i) tail.push_back(r.metrics[i].loss);
  run.train_tail_loss = mean(tail);
  run.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return run;
}

/// The first three settings must strictly improve in order and the last must
/// be no worse than the third. With other setting lists only the strict
/// chain over all but the last one is checked.
inline TrendResult run_trend(const ExperimentConfig& base, TrendOptions opts = {}) {
  base.validate();
  if (opts.settings.empty()) opts.settings = default_trend_settings(base.solver);
  if (opts.settings.size() < 2) throw std::invalid_argument("trend: need at least two settings");
  const Dataset data = make_task(base.task);

  struct Job {
    std::size_t setting;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (std::size_t s = 0; s < opts.settings.size(); ++s)
    for (std::uint64_t seed : opts.seeds) jobs.push_back({s, seed});

  TrendResult out;
  out.runs.resize(jobs.size());
  std::mutex report_mu;
  auto work = [&](std::size_t k) {
    out.runs[k] = trend_run(base, opts.settings[jobs[k].setting], jobs[k].seed, data);
    if (opts.on_run) {
      std::lock_guard lock(report_mu);
      opts.on_run(out.runs[k]);
    }
  };
  const std::size_t workers = std::max<std::size_t>(1, std::min(opts.jobs, jobs.size()));
  if (workers == 1) {
    for (std::size_t k = 0; k < jobs.size(); ++k) work(k);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::future<void>> fs;
    for (std::size_t w = 0; w < workers; ++w) {
      fs.push_back(std::async(std::launch::async, [&] {
        for (std::size_t k = next++; k < jobs.size(); k = next++) work(k);
      }));
    }
    for (auto& f : fs) f.get();
  }

  for (const auto& setting : opts.settings) {
    std::vector<double> xs;
    for (const auto& r : out.runs)
      if (r.label == setting.label) xs.push_back(r.eval_loss);
    out.summaries.push_back(summarize(setting.label, xs));
  }
  const auto& s = out.summaries;
  for (std::size_t k = 0; k + 2 < s.size(); ++k) out.checks.push_back(strictly_worse(s[k], s[k + 1]));
  out.checks.push_back(no_worse(s.back(), s[s.size() - 2]));

  out.pass = std::all_of(out.checks.begin(), out.checks.end(), [](const OrderingCheck& c) { return c.pass; });
  for (const auto& r : out.runs) out.pass = out.pass && !r.aborted;
  return out;
}

inline void write_trend_csv(std::ostream& os, const TrendResult& r) {
  os << "setting,seed,eval_loss,train_tail_loss,skipped,aborted,seconds\n";
  os.precision(17);
  for (const auto& run : r.runs) {
    os << run.label << ',' << run.seed << ',' << run.eval_loss << ',' << run.train_tail_loss << ',' << run.skipped
       << ',' << (run.aborted ? 1 : 0) << ',' << run.seconds << '\n';
  }
}

inline void write_trend_summary(std::ostream& os, const TrendResult& r) {
  for (const auto& s : r.summaries) {
    os << s.label << ": mean " << s.mean << ", sd " << s.sd << " over " << s.runs << " seeds\n";
  }
  for (const auto& c : r.checks) {
    os << (c.pass ? "PASS " : "FAIL ") << c.description << " (" << c.lhs << " vs " << c.rhs << ", margin " << c.margin
       << ")\n";
  }
  for (const auto& run : r.runs) {
    if (run.aborted) os << "FAIL run " << run.label << " seed " << run.seed << " aborted\n";
  }
}

// ---------------------------------------------------------------------------
// Broyden vs Picard on random contractive transforms.

struct BenchRow {
  std::size_t instance = 0;
  std::size_t picard_iters = 0;
  std::size_t broyden_iters = 0;
  bool picard_converged = false;
  bool broyden_converged = false;
};

struct BenchResult {
  std::vector<BenchRow> rows;
  std::size_t not_worse = 0;
  std::size_t strictly_fewer = 0;
};

struct BenchOptions {
  TransformConfig transform;
  std::size_t instances = 10;
  std::size_t base = 16;
  std::size_t batch = 1;
  double tol = 1e-10;
  std::size_t max_iters = 200;
  std::uint64_t seed = 1;
};

inline BenchResult run_bench(const BenchOptions& o) {
  BenchResult out;
  for (std::size_t k = 0; k < o.instances; ++k) {
    const std::uint64_t seed = o.seed * 1000003 + k;
    const PyramidTransform g = make_transform(o.transform, seed);
    std::mt19937_64 rng(seed ^ 0xb5ad4eceda1ce2a9ULL);
    const Pyramid b = random_pyramid(o.batch, o.transform.channels, o.base, o.base, o.transform.levels, 1.0, rng);
    SolverConfig sc;
    sc.tol = o.tol;
    sc.max_iters = o.max_iters;
    sc.memory = o.max_iters;
    const auto p = picard_solve(g, b, Pyramid::zeros_like(b), sc);
    const auto q = broyden_solve(g, b, Pyramid::zeros_like(b), sc);
    BenchRow row{k, p.report.iterations_used, q.report.iterations_used, p.report.converged, q.report.converged};
    const bool ok = row.broyden_converged;
    const bool pic = row.picard_converged;
    if (ok && (!pic || row.broyden_iters <= row.picard_iters)) ++out.not_worse;
    if (ok && (!pic || row.broyden_iters < row.picard_iters)) ++out.strictly_fewer;
    out.rows.push_back(row);
  }
  return out;
}

inline void write_bench_csv(std::ostream& os, const BenchResult& r) {
  os << "instance,picard_iters,picard_converged,broyden_iters,broyden_converged\n";
  for (const auto& row : r.rows) {
    os << row.instance << ',' << row.picard_iters << ',' << (row.picard_converged ? 1 : 0) << ','
       << row.broyden_iters << ',' << (row.broyden_converged ? 1 : 0) << '\n';
  }
}

}  // namespace ifpn::harness
