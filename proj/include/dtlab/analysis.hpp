#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dtlab/model.hpp"
#include "dtlab/problems.hpp"

namespace dtlab {

struct SweepResult {
  std::string model_id;
  uint32_t difficulty = 0;
  std::vector<double> accuracy;  // accuracy[i] = exact match at iteration i+1
  double peak_accuracy = 0.0;
  int peak_iteration = 0;  // 1-based, smallest argmax

  void recompute_peak();
};

// Exact-match accuracy at every iteration 1..T_max, one recorded pass per
// example batch. Feed-forward models sweep their fixed 30 blocks.
SweepResult iteration_sweep(const ModelState& state, const Dataset& data,
                            int T_max, int eval_batch = 128);

// The iteration whose decoded output has the highest confidence score, per
// example; ties break toward the earliest iteration.
struct ExitChoice {
  std::vector<int> iteration;  // 1-based, per example
  Tensor logits;               // chosen output per example
};
ExitChoice max_confidence_exit(const IterationTrace& trace);

struct PerturbationReport {
  std::string kind;
  int intervention_iteration = 0;
  // Set for input-side interventions on models without recall: the input
  // plays no role after projection, so the trajectory cannot react.
  bool input_unused = false;
  // accuracy[j] = exact match against the post-intervention target after j
  // additional iterations (j = 0 decodes the state at the intervention point).
  std::vector<double> accuracy;
  // Smallest j with an exact match, per example; nullopt = did not recover
  // within the cap.
  std::vector<std::optional<int>> recovery;

  double recovered_fraction() const;
  double mean_recovery_time() const;  // over recovered examples only
};

// Interventions are run for at most this many extra iterations by default;
// non-recovery is reported explicitly rather than as a number.
inline constexpr int kDefaultRecoveryCap = 500;

// Adds i.i.d. N(mu, sigma^2) to the features after t iterations, then resumes.
PerturbationReport perturb_features_noise(const ModelState& state,
                                          const Tensor& x, const Labels& y,
                                          int t, float sigma = 1.0f,
                                          float mu = 0.0f,
                                          int extra_iters = kDefaultRecoveryCap,
                                          uint64_t noise_seed = 0);

// Replaces the features after t iterations with zeros, then resumes.
PerturbationReport perturb_features_zero(const ModelState& state,
                                         const Tensor& x, const Labels& y,
                                         int t,
                                         int extra_iters = kDefaultRecoveryCap);

// Flips input bits at the given indices after t iterations; recovery is
// measured against the flipped strings' targets.
PerturbationReport perturb_input_bitflip(
    const ModelState& state, const std::vector<BitStringInstance>& instances,
    const std::vector<int>& flip_index, int t,
    int extra_iters = kDefaultRecoveryCap);
PerturbationReport perturb_input_bitflip(const ModelState& state,
                                         const BitStringInstance& instance,
                                         int index, int t,
                                         int extra_iters = kDefaultRecoveryCap);

// Moves the maze's end two path-cells toward the start after t iterations.
// Requires the original path to be longer than 2 steps.
PerturbationReport perturb_maze_endpoint(const ModelState& state,
                                         const MazeInstance& maze, int t,
                                         int extra_iters = kDefaultRecoveryCap);
// The modified instance itself (exposed for tests and reporting).
MazeInstance move_endpoint_two_steps(const MazeInstance& maze);

// Runs instance B for t iterations, then resumes with A's input concatenated;
// scored against A's target.
PerturbationReport swap_features(const ModelState& state, const Tensor& x_a,
                                 const Labels& y_a, const Tensor& x_b, int t,
                                 int extra_iters = kDefaultRecoveryCap);
PerturbationReport swap_features(const ModelState& state,
                                 const MazeInstance& maze_a,
                                 const MazeInstance& maze_b, int t,
                                 int extra_iters = kDefaultRecoveryCap);

// ||phi_n - phi_{n-1}||_2 per example for consecutive trace entries.
std::vector<std::vector<double>> delta_phi(const IterationTrace& trace);

// Streaming variant: runs T iterations and returns the T-1 successive-step
// feature distances per example, without retaining the trace.
std::vector<std::vector<double>> delta_phi_curve(const ModelState& state,
                                                 const Tensor& x, int T);

// Same, with inputs drawn i.i.d. uniform in [0,1) per channel-pixel.
// size is the bit-string length or the maze cell count per side.
std::vector<std::vector<double>> delta_phi_on_noise(const ModelState& state,
                                                    int size, int T,
                                                    int examples,
                                                    uint64_t seed);

}  // namespace dtlab
