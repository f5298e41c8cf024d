#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dtlab/model.hpp"
#include "dtlab/optim.hpp"
#include "dtlab/problems.hpp"
#include "dtlab/rng.hpp"

namespace dtlab {

inline constexpr uint16_t kMetricsFormatVersion = 1;

// Training-accuracy threshold below which a run is excluded from aggregates.
inline constexpr double kConvergenceThreshold = 0.99;

struct TrainConfig {
  int m = 30;            // training-regime iteration cap
  float alpha = 1.0f;    // progressive-loss weight in [0, 1]
  OptimKind optimizer = OptimKind::adam;
  float lr = 1e-3f;
  std::vector<int> decay_epochs;
  float decay_factor = 1.0f;
  int warmup_epochs = 0;
  int epochs = 50;
  std::optional<float> clip_norm;
  float weight_decay = 2e-4f;
  int batch_size = 128;
  uint64_t seed = 1;
  bool force_n_zero = false;  // ablation: never resume mid-stream
  float val_fraction = 0.2f;  // held out from the end of the training data
  int blas_threads = 1;
  // Accepted in configs as a recognized option but not implemented.
  bool runtime_penalty = false;

  void validate() const;
  LrSchedule schedule() const;
  OptimizerConfig optimizer_config() const;
};

struct EpochMetrics {
  int epoch = 0;
  float lr = 0.0f;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double val_acc = 0.0;
};

struct RunRecord {
  TrainConfig config;
  ModelSpec spec;
  std::string dataset_ref;
  uint64_t config_hash = 0;
  std::vector<EpochMetrics> epochs;
  int best_epoch = -1;
  double best_val_acc = 0.0;
  std::string checkpoint_path;
  bool converged = false;  // final train accuracy >= 99%
  bool failed = false;     // loss became non-finite
};

// n uniform on {0..m-1}, k uniform on {1..m-n}; with force_n_zero, n = 0 and
// k uniform on {1..m}. Always n + k <= m.
std::pair<int, int> sample_progressive_split(int m, Rng& rng, bool force_n_zero);

// One weighted loss evaluation with gradients populated:
//   (1-alpha) * full m-iteration unroll + alpha * (resume k iterations from
//   the detached features of n untracked iterations). Either branch is
//   skipped entirely when its weight is zero.
// Returns the combined loss value.
float progressive_loss_step(const ModelState& state, const Tensor& x,
                            const Labels& y, const TrainConfig& config,
                            Rng& rng);

// Fraction of examples decoded to the target at every position, at T iters.
double exact_match_accuracy(const ModelState& state, const Dataset& data, int T,
                            int eval_batch = 256);
double exact_match_accuracy(const ModelState& state, const Dataset& data,
                            std::span<const int64_t> indices, int T,
                            int eval_batch = 256);

// Epochs of shuffled minibatches, per-epoch validation at T = m, best-
// validation checkpoint persisted under out_dir (when non-empty) along with a
// line-oriented JSON metrics file.
RunRecord train(ModelState& state, const Dataset& data, const TrainConfig& config,
                const std::string& out_dir, uint64_t config_hash = 0);

void save_run_record(const RunRecord& record, const std::string& path);
RunRecord load_run_record(const std::string& path);

}  // namespace dtlab
