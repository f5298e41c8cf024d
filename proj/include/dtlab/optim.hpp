#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "dtlab/tensor.hpp"

namespace dtlab {

// Base rate scaled by an exponential warm-up and a step decay. The warm-up
// multiplier follows a geometric curve from 0.01 at epoch 0 to exactly 1.0 at
// the last warm-up epoch; from then on only the decay factor applies.
struct LrSchedule {
  float base_rate = 1e-3f;
  int warmup_epochs = 0;
  std::vector<int> decay_epochs;  // strictly increasing
  float decay_factor = 1.0f;      // in (0, 1]

  void validate() const;
  float warmup_multiplier(int epoch) const;
  float at(int epoch) const;
};

enum class OptimKind : uint8_t { adam = 0, sgd_momentum = 1 };

struct OptimizerConfig {
  OptimKind kind = OptimKind::adam;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float momentum = 0.9f;
  float weight_decay = 2e-4f;                // decoupled, applied at update time
  std::optional<float> clip_norm;            // global gradient-norm threshold
};

// Adam or SGD+momentum over a fixed parameter list. Weight decay is decoupled
// from the loss: update = step(moments) + weight_decay * param, param -= lr * update.
class Optimizer {
 public:
  Optimizer(OptimizerConfig cfg, const std::vector<Tensor>& params);

  // Rescales all gradients so their global l2 norm is at most clip_norm,
  // then applies one update with the given learning rate.
  void step(std::vector<Tensor>& params, float lr);
  void step(std::vector<Tensor>& params, const LrSchedule& schedule, int epoch);

  int64_t step_count() const { return step_count_; }
  const OptimizerConfig& config() const { return cfg_; }

  // Returns the pre-clip global norm of the last step's gradients.
  double last_grad_norm() const { return last_grad_norm_; }

 private:
  OptimizerConfig cfg_;
  std::vector<std::vector<float>> moment1_;
  std::vector<std::vector<float>> moment2_;  // unused for sgd_momentum
  int64_t step_count_ = 0;
  double last_grad_norm_ = 0.0;
};

void zero_grads(std::vector<Tensor>& params);

}  // namespace dtlab
