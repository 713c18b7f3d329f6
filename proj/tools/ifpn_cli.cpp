// ifpn: command-line front end for the implicit feature pyramid library.
//
//   ifpn train     --config exp.json --metrics run.ndjson --checkpoint run.ckpt
//   ifpn solve     --checkpoint run.ckpt --sample 3
//   ifpn solve     --checkpoint run.ckpt --input image.tens
//   ifpn gradcheck --variant dense_fpn --channels 2
//   ifpn trend     --csv trend.csv
//   ifpn bench     --instances 10
//   ifpn report    --metrics run.ndjson --csv run.csv
//   ifpn export    --sample 3 --output image.tens

#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"

#include "ifpn/harness/checkpoint.hpp"
#include "ifpn/harness/config.hpp"
#include "ifpn/harness/gradcheck.hpp"
#include "ifpn/harness/train.hpp"
#include "ifpn/harness/trend.hpp"

namespace {

using namespace ifpn;
using namespace ifpn::harness;

// Flags that override fields of the experiment config after --config is loaded.
struct Overrides {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> eval_iters;
  std::optional<std::string> variant;
  std::optional<std::size_t> levels;
  std::optional<std::size_t> channels;
  std::optional<std::string> method;
  std::optional<std::size_t> unroll_steps;
  std::optional<double> tol;
  std::optional<std::size_t> max_iters;
  std::optional<std::size_t> iterations;
  std::optional<double> learning_rate;
  std::optional<std::size_t> batch_size;

  void attach(CLI::App* app) {
    app->add_option("--config", config_path, "JSON experiment config")->check(CLI::ExistingFile);
    app->add_option("--seed", seed, "model seed");
    app->add_option("--eval-iters", eval_iters, "solver iteration budget at inference");
    app->add_option("--variant", variant, "dense_fpn | res_dense | res_pyramid_conv");
    app->add_option("--levels", levels, "pyramid levels");
    app->add_option("--channels", channels, "channels per level");
    app->add_option("--method", method, "forward solver: picard | unroll | broyden");
    app->add_option("--unroll-steps", unroll_steps, "steps for --method unroll");
    app->add_option("--tol", tol, "forward and backward relative residual tolerance");
    app->add_option("--max-iters", max_iters, "forward and backward iteration budget");
    app->add_option("--iterations", iterations, "training steps");
    app->add_option("--lr", learning_rate, "base learning rate");
    app->add_option("--batch-size", batch_size, "training batch size");
  }

  ExperimentConfig resolve() const {
    ExperimentConfig c = config_path.empty() ? default_config() : load_config(config_path);
    if (seed) c.seed = *seed;
    if (eval_iters) c.solver.eval_iters = *eval_iters;
    if (variant) c.transform.variant = parse_variant(*variant);
    if (levels) c.transform.levels = c.task.levels = *levels;
    if (channels) c.transform.channels = c.task.channels = *channels;
    if (method) c.solver.method = parse_method(*method);
    if (unroll_steps) c.solver.unroll_steps = *unroll_steps;
    if (tol) c.solver.tol = c.backward.tol = *tol;
    if (max_iters) c.solver.max_iters = c.backward.max_iters = *max_iters;
    if (iterations) c.optimizer.iterations = *iterations;
    if (learning_rate) c.optimizer.learning_rate = *learning_rate;
    if (batch_size) c.optimizer.batch_size = *batch_size;
    c.validate();
    return c;
  }
};

std::ofstream open_out(const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write '" + path + "'");
  return os;
}

int cmd_train(const Overrides& ov, const std::string& metrics_path, const std::string& ckpt_path,
              const std::string& csv_path, bool quiet) {
  const ExperimentConfig cfg = ov.resolve();
  std::optional<std::ofstream> ndjson;
  if (!metrics_path.empty()) ndjson = open_out(metrics_path);
  TrainOptions opts;
  opts.on_step = [&](const StepMetrics& m) {
    if (ndjson) *ndjson << to_json(m).dump() << '\n';
    const std::size_t every = std::max<std::size_t>(1, cfg.optimizer.iterations / 20);
    if (!quiet && (m.step % every == 0 || m.skipped)) {
      std::cout << "step " << m.step << " loss " << m.loss << " fwd " << m.fwd_iters << " bwd " << m.bwd_iters
                << (m.skipped ? " skipped" : "") << '\n';
    }
  };
  TrainResult r = train(cfg, opts);
  if (!ckpt_path.empty()) save_checkpoint(ckpt_path, r.checkpoint);
  if (!csv_path.empty()) {
    auto os = open_out(csv_path);
    write_metrics_csv(os, r.metrics);
  }
  const Dataset data = make_task(cfg.task);
  const double eval = mean(evaluate(model_from_checkpoint(r.checkpoint), data.holdout, cfg.solver));
  std::cout << "steps " << r.metrics.size() << " skipped " << r.skipped << " held-out loss " << eval << '\n';
  if (r.aborted) {
    std::cerr << "aborted: " << r.abort_reason << '\n';
    return 2;
  }
  return 0;
}

int cmd_solve(const Overrides& ov, const std::string& ckpt_path, const std::string& input_path,
              std::optional<std::size_t> sample, bool train_mode) {
  Checkpoint ck = load_checkpoint(ckpt_path);
  // Overrides apply to the solver only; the architecture comes from the checkpoint.
  ExperimentConfig cfg = ck.config;
  if (ov.eval_iters) cfg.solver.eval_iters = *ov.eval_iters;
  if (ov.method) cfg.solver.method = parse_method(*ov.method);
  if (ov.unroll_steps) cfg.solver.unroll_steps = *ov.unroll_steps;
  if (ov.tol) cfg.solver.tol = *ov.tol;
  if (ov.max_iters) cfg.solver.max_iters = *ov.max_iters;
  cfg.solver.validate();
  const Model m = model_from_checkpoint(ck);

  Array4 image;
  if (!input_path.empty()) {
    ParamSet t = load_tensors(input_path);
    if (!t.contains("image")) throw std::runtime_error("tensor file has no 'image' entry");
    image = t["image"];
  } else {
    const Dataset data = make_task(cfg.task);
    const std::size_t k = sample.value_or(0);
    if (k >= data.holdout.size()) throw std::out_of_range("sample index beyond held-out set");
    image = data.holdout[k].image;
  }
  const DropoutMask ones = ones_mask(cfg.transform, image.shape().n);
  const DropoutMask* mask = cfg.transform.dropout_rate > 0.0 ? &ones : nullptr;
  Forward f = forward(m, image, cfg.solver, train_mode ? SolveMode::Train : SolveMode::Eval, mask);
  write_report(std::cout, f.report);
  return f.report.converged || cfg.solver.method == Method::Unroll ? 0 : 3;
}

int cmd_export(const Overrides& ov, std::size_t sample, const std::string& out) {
  const ExperimentConfig cfg = ov.resolve();
  const Dataset data = make_task(cfg.task);
  if (sample >= data.holdout.size()) throw std::out_of_range("sample index beyond held-out set");
  ParamSet t;
  t.add("image", data.holdout[sample].image);
  save_tensors(out, t);
  return 0;
}

int cmd_report(const std::string& metrics_path, const std::string& csv_path) {
  std::ifstream is(metrics_path);
  if (!is) throw std::runtime_error("cannot read '" + metrics_path + "'");
  const auto ms = read_metrics(is);
  if (csv_path.empty()) {
    write_metrics_csv(std::cout, ms);
  } else {
    auto os = open_out(csv_path);
    write_metrics_csv(os, ms);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Implicit feature pyramid: equilibrium solves, implicit gradients, experiments"};
  app.require_subcommand(1);

  Overrides ov;
  std::string metrics_path, ckpt_path, csv_path, input_path, output_path;
  std::optional<std::size_t> sample;
  bool quiet = false, train_mode = false;

  auto* train_cmd = app.add_subcommand("train", "train encoder, transform and head on the synthetic task");
  ov.attach(train_cmd);
  train_cmd->add_option("--metrics", metrics_path, "per-step metrics, one JSON object per line");
  train_cmd->add_option("--checkpoint", ckpt_path, "final checkpoint");
  train_cmd->add_option("--csv", csv_path, "per-step metrics as CSV");
  train_cmd->add_flag("--quiet", quiet);

  auto* solve_cmd = app.add_subcommand("solve", "one forward solve from a checkpoint; prints the solver report");
  ov.attach(solve_cmd);
  solve_cmd->add_option("--checkpoint", ckpt_path)->required()->check(CLI::ExistingFile);
  auto* in_opt = solve_cmd->add_option("--input", input_path, "tensor file with an 'image' entry")
                     ->check(CLI::ExistingFile);
  solve_cmd->add_option("--sample", sample, "held-out sample index")->excludes(in_opt);
  solve_cmd->add_flag("--train-mode", train_mode, "use the training budget instead of --eval-iters");

  GradcheckConfig gc;
  std::string gc_variant = variant_name(gc.transform.variant);
  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference and unrolled checks of all gradients");
  grad_cmd->add_option("--variant", gc_variant);
  grad_cmd->add_option("--levels", gc.transform.levels);
  grad_cmd->add_option("--channels", gc.transform.channels);
  grad_cmd->add_option("--groups", gc.transform.groups);
  grad_cmd->add_option("--base", gc.base, "finest level height and width");
  grad_cmd->add_option("--batch", gc.batch);
  grad_cmd->add_option("--seed", gc.seed);
  grad_cmd->add_option("--fd-step", gc.fd_step);
  grad_cmd->add_option("--fd-tol", gc.fd_tol, "relative tolerance for the re-solved loss");
  grad_cmd->add_option("--vjp-tol", gc.vjp_tol, "relative tolerance for a single pullback");
  grad_cmd->add_option("--max-coords", gc.max_coords, "coordinates per block, 0 for all");
  grad_cmd->add_option("--unroll-steps", gc.unroll_steps);

  TrendOptions topt;
  auto* trend_cmd = app.add_subcommand("trend", "unroll(0), unroll(1), unroll(2) and broyden over several seeds");
  ov.attach(trend_cmd);
  trend_cmd->add_option("--seeds", topt.seeds, "model seeds")->expected(1, -1);
  trend_cmd->add_option("--jobs", topt.jobs, "runs in parallel");
  trend_cmd->add_option("--csv", csv_path, "one row per run");

  BenchOptions bo;
  std::string bench_variant = variant_name(bo.transform.variant);
  auto* bench_cmd = app.add_subcommand("bench", "iterations to tolerance, broyden vs picard");
  bench_cmd->add_option("--variant", bench_variant);
  bench_cmd->add_option("--levels", bo.transform.levels);
  bench_cmd->add_option("--channels", bo.transform.channels);
  bench_cmd->add_option("--instances", bo.instances);
  bench_cmd->add_option("--base", bo.base);
  bench_cmd->add_option("--tol", bo.tol);
  bench_cmd->add_option("--max-iters", bo.max_iters);
  bench_cmd->add_option("--seed", bo.seed);
  bench_cmd->add_option("--csv", csv_path);

  auto* report_cmd = app.add_subcommand("report", "convert a metrics NDJSON file to CSV");
  report_cmd->add_option("--metrics", metrics_path)->required()->check(CLI::ExistingFile);
  report_cmd->add_option("--csv", csv_path, "output file (stdout if omitted)");

  std::size_t export_sample = 0;
  auto* export_cmd = app.add_subcommand("export", "write a held-out image as a tensor file for solve --input");
  ov.attach(export_cmd);
  export_cmd->add_option("--sample", export_sample);
  export_cmd->add_option("--output", output_path)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (train_cmd->parsed()) return cmd_train(ov, metrics_path, ckpt_path, csv_path, quiet);
    if (solve_cmd->parsed()) return cmd_solve(ov, ckpt_path, input_path, sample, train_mode);
    if (export_cmd->parsed()) return cmd_export(ov, export_sample, output_path);
    if (report_cmd->parsed()) return cmd_report(metrics_path, csv_path);
    if (grad_cmd->parsed()) {
      gc.transform.variant = parse_variant(gc_variant);
      const auto rep = run_gradcheck(gc);
      for (const auto& line : rep.lines) std::cout << line << '\n';
      return rep.pass ? 0 : 1;
    }
    if (trend_cmd->parsed()) {
      const ExperimentConfig cfg = ov.resolve();
      topt.on_run = [](const TrendRun& r) {
        std::cout << r.label << " seed " << r.seed << ": held-out " << r.eval_loss << ", skipped " << r.skipped
                  << ", " << r.seconds << " s" << std::endl;
      };
      const TrendResult r = run_trend(cfg, topt);
      write_trend_summary(std::cout, r);
      if (!csv_path.empty()) {
        auto os = open_out(csv_path);
        write_trend_csv(os, r);
      }
      return r.pass ? 0 : 1;
    }
    if (bench_cmd->parsed()) {
      bo.transform.variant = parse_variant(bench_variant);
      const BenchResult r = run_bench(bo);
      write_bench_csv(std::cout, r);
      if (!csv_path.empty()) {
        auto os = open_out(csv_path);
        write_bench_csv(os, r);
      }
      std::cout << "broyden no worse on " << r.not_worse << "/" << r.rows.size() << ", strictly fewer on "
                << r.strictly_fewer << "/" << r.rows.size() << '\n';
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
