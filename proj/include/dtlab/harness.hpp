#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dtlab/analysis.hpp"
#include "dtlab/config.hpp"
#include "dtlab/training.hpp"

namespace dtlab {

// A named experiment: single runs, grids over alpha / width / depth, or a
// hard-to-easy evaluation. Parsed from a flat key=value plan plus overrides.
struct ExperimentPlan {
  std::string kind = "train";  // train | sweep | perturb | ablate-alpha |
                               // ablate-width-depth | hard-to-easy
  ModelSpec spec;
  TrainConfig config;
  std::vector<uint64_t> seeds{1};
  std::vector<double> alphas;
  std::vector<int> widths;
  std::vector<int> depths;
  std::string train_data;
  std::string eval_data;
  std::string easy_data;
  std::string checkpoint;
  std::string out_dir;
  int sweep_iters = 200;
  int workers = 1;

  void validate() const;
};

ExperimentPlan plan_from_kv(const KvConfig& kv);
const std::set<std::string>& plan_keys();

// The merged key=value identity of one run; its hash is embedded in every
// artifact the run writes.
KvConfig run_identity(const ExperimentPlan& plan, const ModelSpec& spec,
                      const TrainConfig& config);

struct TrainedRun {
  std::string dir;
  RunRecord record;
  std::optional<SweepResult> sweep;
};

// Trains one configuration under plan.out_dir/<name>, snapshotting the
// config, streaming metrics, and sweeping eval_data when present.
TrainedRun run_single(const ExperimentPlan& plan, const ModelSpec& spec,
                      const TrainConfig& config, const std::string& name,
                      const Dataset& train_set, const Dataset* eval_set);

struct AlphaGridRow {
  double alpha = 0.0;
  int runs = 0;
  int converged = 0;
  double mean_peak = 0.0;  // over converged runs
  double std_peak = 0.0;
  double mean_peak_iteration = 0.0;
};

// One train+sweep per (alpha, seed); converged runs aggregate to mean +- std
// of the sweep peak per alpha. Unconverged runs are reported, never fatal.
std::vector<AlphaGridRow> run_alpha_grid(const ExperimentPlan& plan);

struct HardToEasyResult {
  SweepResult hard;  // the training difficulty
  SweepResult easy;
};

// Sweeps a trained checkpoint on its training difficulty and on an easier
// dataset; peak iterations are compared by the caller.
HardToEasyResult run_hard_to_easy(const ExperimentPlan& plan);

struct WidthDepthRow {
  int width = 0;
  int m = 0;
  bool converged = false;
  double peak_accuracy = 0.0;
  int peak_iteration = 0;
};

std::vector<WidthDepthRow> run_width_depth(const ExperimentPlan& plan);

// ---------------------------------------------------------------------------
// Artifact files. Every writer embeds the producing config hash and a format
// version; readers refuse mismatched versions.

inline constexpr uint16_t kArtifactFormatVersion = 1;

void write_sweep_csv(const SweepResult& sweep, const std::string& path,
                     uint64_t hash);
void write_sweep_json(const SweepResult& sweep, const std::string& path,
                      uint64_t hash);
SweepResult load_sweep_json(const std::string& path, uint64_t* hash = nullptr);

void write_perturbation_csv(const PerturbationReport& report,
                            const std::string& path, uint64_t hash);
void write_perturbation_json(const PerturbationReport& report,
                             const std::string& path, uint64_t hash);

void write_delta_phi_csv(const std::vector<std::vector<double>>& curves,
                         const std::string& path, uint64_t hash);

// Aggregation over a directory tree of runs (metrics.jsonl + sweep.json),
// grouped by architecture and alpha, with the convergence filter applied.
struct ReportGroup {
  std::string model;  // "ff", "dt", or "dt_recall"
  double alpha = 0.0;
  int runs = 0;
  int converged = 0;
  double mean_best_val = 0.0;
  double mean_peak = 0.0;
  double std_peak = 0.0;
  double mean_peak_iteration = 0.0;
};

std::vector<ReportGroup> report_scan(const std::string& root);
void write_report(const std::vector<ReportGroup>& groups,
                  const std::string& path);
std::string format_report_table(const std::vector<ReportGroup>& groups);

double mean_of(const std::vector<double>& v);
double std_of(const std::vector<double>& v);  // sample standard deviation

}  // namespace dtlab
