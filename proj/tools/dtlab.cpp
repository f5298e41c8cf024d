// Command-line front end: dataset generation, training, sweeps, perturbation
// experiments, convergence measurement, and report aggregation.
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dtlab/analysis.hpp"
#include "dtlab/config.hpp"
#include "dtlab/harness.hpp"
#include "dtlab/model.hpp"
#include "dtlab/problems.hpp"
#include "dtlab/training.hpp"

namespace fs = std::filesystem;
using namespace dtlab;

namespace {

struct KvCli {
  std::string config_file;
  std::vector<std::string> sets;

  KvConfig resolve() const {
    KvConfig kv;
    if (!config_file.empty()) kv = load_kv_file(config_file);
    for (const std::string& s : sets) apply_override(kv, s);
    return kv;
  }
};

void add_kv_options(CLI::App* cmd, KvCli& kv) {
  cmd->add_option("--config", kv.config_file,
                  "flat key=value config file (CLI flags win)");
  cmd->add_option("--set", kv.sets, "override as key=value (repeatable)");
}

int cmd_gen_data(const std::string& task, int difficulty, int count,
                 uint64_t seed, const std::string& out) {
  Dataset data;
  if (task_from_name(task) == TaskKind::prefix_sum) {
    data = gen_prefix_sum_dataset(difficulty, count, seed);
  } else {
    data = gen_maze_dataset(difficulty, count, seed);
  }
  save_dataset(data, out);
  std::cout << "wrote " << out << ": task=" << task
            << " difficulty=" << difficulty << " count=" << count
            << " seed=" << seed << "\n";
  return 0;
}

int cmd_train(const KvCli& kv_cli, const std::string& out_dir) {
  KvConfig kv = kv_cli.resolve();
  if (!out_dir.empty()) kv["out"] = out_dir;
  ExperimentPlan plan = plan_from_kv(kv);
  plan.validate();

  if (plan.kind == "ablate-alpha") {
    auto rows = run_alpha_grid(plan);
    std::cout << "alpha   runs  conv  mean_peak  std_peak  mean_peak_iter\n";
    for (const auto& r : rows) {
      std::printf("%5.3f  %5d %5d  %9.4f %9.4f  %14.1f\n", r.alpha, r.runs,
                  r.converged, r.mean_peak, r.std_peak, r.mean_peak_iteration);
    }
    return 0;
  }
  if (plan.kind == "ablate-width-depth") {
    auto rows = run_width_depth(plan);
    std::cout << "width  m    converged  peak_acc  peak_iter\n";
    for (const auto& r : rows) {
      std::printf("%5d  %-4d %-9s  %8.4f  %9d\n", r.width, r.m,
                  r.converged ? "yes" : "no", r.peak_accuracy, r.peak_iteration);
    }
    return 0;
  }
  if (plan.kind != "train")
    throw std::runtime_error("train: unsupported plan kind '" + plan.kind + "'");

  const Dataset train_set = load_dataset(plan.train_data);
  std::optional<Dataset> eval_set;
  if (!plan.eval_data.empty()) eval_set = load_dataset(plan.eval_data);
  int failures = 0;
  for (uint64_t seed : plan.seeds) {
    TrainConfig config = plan.config;
    config.seed = seed;
    TrainedRun run = run_single(plan, plan.spec, config, "seed_" + std::to_string(seed),
                                train_set, eval_set ? &*eval_set : nullptr);
    const RunRecord& rec = run.record;
    std::cout << "run " << run.dir << ": best_val=" << rec.best_val_acc
              << " converged=" << (rec.converged ? "yes" : "no")
              << (rec.failed ? " FAILED (non-finite loss)" : "") << "\n";
    if (rec.failed) ++failures;
  }
  return failures == 0 ? 0 : 1;
}

int cmd_sweep(const std::string& checkpoint, const std::string& data_path,
              const std::string& easy_path, int iters,
              const std::string& out_dir) {
  fs::create_directories(out_dir);
  if (!easy_path.empty()) {
    ExperimentPlan plan;
    plan.kind = "hard-to-easy";
    plan.checkpoint = checkpoint;
    plan.eval_data = data_path;
    plan.easy_data = easy_path;
    plan.out_dir = out_dir;
    plan.sweep_iters = iters;
    HardToEasyResult result = run_hard_to_easy(plan);
    std::cout << "training difficulty: peak_acc=" << result.hard.peak_accuracy
              << " at iteration " << result.hard.peak_iteration << "\n"
              << "easier set:          peak_acc=" << result.easy.peak_accuracy
              << " at iteration " << result.easy.peak_iteration << "\n";
    return 0;
  }
  uint64_t hash = 0;
  ModelState state = load_checkpoint(checkpoint, &hash);
  const Dataset data = load_dataset(data_path);
  SweepResult sweep = iteration_sweep(state, data, iters);
  sweep.model_id = checkpoint;
  write_sweep_csv(sweep, out_dir + "/sweep.csv", hash);
  write_sweep_json(sweep, out_dir + "/sweep.json", hash);
  std::cout << "peak_acc=" << sweep.peak_accuracy << " at iteration "
            << sweep.peak_iteration << " (" << sweep.accuracy.size()
            << " iterations swept)\n";
  return 0;
}

int cmd_perturb(const std::string& checkpoint, const std::string& data_path,
                const std::string& kind, int iter, float sigma, float mu,
                int index, int example, int example_b, int extra,
                uint64_t noise_seed, const std::string& out_dir) {
  uint64_t hash = 0;
  ModelState state = load_checkpoint(checkpoint, &hash);
  const Dataset data = load_dataset(data_path);
  fs::create_directories(out_dir);

  PerturbationReport report;
  if (kind == "noise" || kind == "zeros") {
    std::vector<int64_t> idx(data.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int64_t>(i);
    Tensor x = input_batch(data, idx);
    Labels y = target_batch(data, idx);
    report = kind == "noise"
                 ? perturb_features_noise(state, x, y, iter, sigma, mu, extra,
                                          noise_seed)
                 : perturb_features_zero(state, x, y, iter, extra);
  } else if (kind == "bitflip") {
    if (data.header.task != TaskKind::prefix_sum)
      throw std::runtime_error("perturb: bitflip needs a prefix-sum dataset");
    const auto& inst = data.prefix.at(static_cast<size_t>(example));
    report = perturb_input_bitflip(state, inst, index, iter, extra);
  } else if (kind == "endpoint") {
    if (data.header.task != TaskKind::maze)
      throw std::runtime_error("perturb: endpoint needs a maze dataset");
    report = perturb_maze_endpoint(
        state, data.mazes.at(static_cast<size_t>(example)), iter, extra);
  } else if (kind == "swap") {
    if (data.header.task != TaskKind::maze)
      throw std::runtime_error("perturb: swap needs a maze dataset");
    report = swap_features(state, data.mazes.at(static_cast<size_t>(example)),
                           data.mazes.at(static_cast<size_t>(example_b)), iter,
                           extra);
  } else {
    throw std::runtime_error("perturb: unknown kind '" + kind + "'");
  }

  write_perturbation_csv(report, out_dir + "/perturb.csv", hash);
  write_perturbation_json(report, out_dir + "/perturb.json", hash);
  std::cout << "kind=" << report.kind << " t=" << report.intervention_iteration
            << " recovered=" << report.recovered_fraction() * 100.0 << "%"
            << " mean_recovery=" << report.mean_recovery_time() << "\n";
  return 0;
}

int cmd_delta_phi(const std::string& checkpoint, const std::string& data_path,
                  bool noise, int size, int iters, int examples, uint64_t seed,
                  const std::string& out_dir) {
  uint64_t hash = 0;
  ModelState state = load_checkpoint(checkpoint, &hash);
  fs::create_directories(out_dir);
  std::vector<std::vector<double>> curves;
  if (noise) {
    curves = delta_phi_on_noise(state, size, iters, examples, seed);
  } else {
    if (data_path.empty())
      throw std::runtime_error("delta-phi: need --data or --noise");
    const Dataset data = load_dataset(data_path);
    const int64_t take =
        std::min<int64_t>(examples, static_cast<int64_t>(data.size()));
    std::vector<int64_t> idx(static_cast<size_t>(take));
    for (int64_t i = 0; i < take; ++i) idx[static_cast<size_t>(i)] = i;
    curves = delta_phi_curve(state, input_batch(data, idx), iters);
  }
  write_delta_phi_csv(curves, out_dir + "/delta_phi.csv", hash);
  double first = 0.0, last = 0.0;
  for (const auto& c : curves) {
    first += c.front();
    last += c.back();
  }
  std::cout << "delta_phi: first=" << first / static_cast<double>(curves.size())
            << " last=" << last / static_cast<double>(curves.size()) << " ("
            << curves[0].size() << " steps)\n";
  return 0;
}

int cmd_report(const std::string& root, const std::string& out_file) {
  std::vector<ReportGroup> groups = report_scan(root);
  std::cout << format_report_table(groups);
  if (!out_file.empty()) write_report(groups, out_file);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dtlab: recurrent networks that learn scalable algorithms"};
  app.require_subcommand(1);

  // gen-data
  std::string gd_task = "prefix", gd_out;
  int gd_len = 32, gd_n = 9, gd_count = 1000;
  uint64_t gd_seed = 1;
  CLI::App* gen = app.add_subcommand("gen-data", "generate a dataset file");
  gen->add_option("--task", gd_task, "prefix or maze")->required();
  gen->add_option("--len", gd_len, "bit-string length (prefix)");
  gen->add_option("--n", gd_n, "maze cells per side (maze)");
  gen->add_option("--count", gd_count, "number of instances")->required();
  gen->add_option("--seed", gd_seed, "generator seed");
  gen->add_option("-o,--out", gd_out, "output file")->required();

  // train
  KvCli train_kv;
  std::string train_out;
  CLI::App* train_cmd =
      app.add_subcommand("train", "train models (single runs or grids)");
  add_kv_options(train_cmd, train_kv);
  train_cmd->add_option("-o,--out", train_out, "output directory");

  // sweep
  std::string sw_ckpt, sw_data, sw_easy, sw_out = ".";
  int sw_iters = 200;
  CLI::App* sweep_cmd =
      app.add_subcommand("sweep", "accuracy vs. iteration for a checkpoint");
  sweep_cmd->add_option("--checkpoint", sw_ckpt)->required();
  sweep_cmd->add_option("--data", sw_data)->required();
  sweep_cmd->add_option("--easy-data", sw_easy,
                        "also sweep an easier dataset (hard-to-easy)");
  sweep_cmd->add_option("--iters", sw_iters, "iterations to sweep");
  sweep_cmd->add_option("-o,--out", sw_out, "output directory");

  // perturb
  std::string pb_ckpt, pb_data, pb_kind = "noise", pb_out = ".";
  int pb_iter = 50, pb_index = 0, pb_example = 0, pb_example_b = 1;
  int pb_extra = kDefaultRecoveryCap;
  float pb_sigma = 1.0f, pb_mu = 0.0f;
  uint64_t pb_noise_seed = 0;
  CLI::App* perturb_cmd =
      app.add_subcommand("perturb", "feature/input interventions mid-run");
  perturb_cmd->add_option("--checkpoint", pb_ckpt)->required();
  perturb_cmd->add_option("--data", pb_data)->required();
  perturb_cmd->add_option("--kind", pb_kind,
                          "noise | zeros | bitflip | endpoint | swap");
  perturb_cmd->add_option("--iter", pb_iter, "intervention iteration");
  perturb_cmd->add_option("--sigma", pb_sigma, "noise std deviation");
  perturb_cmd->add_option("--mu", pb_mu, "noise mean");
  perturb_cmd->add_option("--index", pb_index, "bit index to flip");
  perturb_cmd->add_option("--example", pb_example, "instance index");
  perturb_cmd->add_option("--example-b", pb_example_b,
                          "second instance (swap source)");
  perturb_cmd->add_option("--extra", pb_extra, "post-intervention budget");
  perturb_cmd->add_option("--noise-seed", pb_noise_seed);
  perturb_cmd->add_option("-o,--out", pb_out, "output directory");

  // delta-phi
  std::string dp_ckpt, dp_data, dp_out = ".";
  bool dp_noise = false;
  int dp_size = 32, dp_iters = 200, dp_examples = 16;
  uint64_t dp_seed = 0;
  CLI::App* dp_cmd = app.add_subcommand(
      "delta-phi", "successive-iteration feature movement");
  dp_cmd->add_option("--checkpoint", dp_ckpt)->required();
  dp_cmd->add_option("--data", dp_data, "dataset to measure on");
  dp_cmd->add_flag("--noise", dp_noise, "use uniform-noise inputs instead");
  dp_cmd->add_option("--size", dp_size, "noise input size (length or cells)");
  dp_cmd->add_option("--iters", dp_iters);
  dp_cmd->add_option("--examples", dp_examples);
  dp_cmd->add_option("--seed", dp_seed);
  dp_cmd->add_option("-o,--out", dp_out, "output directory");

  // report
  std::string rp_root, rp_out;
  CLI::App* report_cmd =
      app.add_subcommand("report", "aggregate run directories into a table");
  report_cmd->add_option("--root", rp_root)->required();
  report_cmd->add_option("-o,--out", rp_out, "summary JSON path");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      const int difficulty =
          task_from_name(gd_task) == TaskKind::prefix_sum ? gd_len : gd_n;
      return cmd_gen_data(gd_task, difficulty, gd_count, gd_seed, gd_out);
    }
    if (train_cmd->parsed()) return cmd_train(train_kv, train_out);
    if (sweep_cmd->parsed())
      return cmd_sweep(sw_ckpt, sw_data, sw_easy, sw_iters, sw_out);
    if (perturb_cmd->parsed())
      return cmd_perturb(pb_ckpt, pb_data, pb_kind, pb_iter, pb_sigma, pb_mu,
                         pb_index, pb_example, pb_example_b, pb_extra,
                         pb_noise_seed, pb_out);
    if (dp_cmd->parsed())
      return cmd_delta_phi(dp_ckpt, dp_data, dp_noise, dp_size, dp_iters,
                           dp_examples, dp_seed, dp_out);
    if (report_cmd->parsed()) return cmd_report(rp_root, rp_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
