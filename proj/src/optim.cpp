#include "dtlab/optim.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace dtlab {

void LrSchedule::validate() const {
  if (base_rate <= 0.0f) throw std::invalid_argument("schedule: base rate must be positive");
  if (warmup_epochs < 0) throw std::invalid_argument("schedule: negative warm-up");
  if (!(decay_factor > 0.0f && decay_factor <= 1.0f))
    throw std::invalid_argument("schedule: decay factor must be in (0, 1]");
  for (size_t i = 1; i < decay_epochs.size(); ++i) {
    if (decay_epochs[i] <= decay_epochs[i - 1])
      throw std::invalid_argument("schedule: decay epochs must be strictly increasing");
  }
}

float LrSchedule::warmup_multiplier(int epoch) const {
  if (epoch >= warmup_epochs - 1 || warmup_epochs <= 1) return 1.0f;
  // 0.01 at epoch 0, rising geometrically to exactly 1.0 at epoch warmup-1.
  const double expo = static_cast<double>(warmup_epochs - 1 - epoch) /
                      static_cast<double>(warmup_epochs - 1);
  return static_cast<float>(std::pow(0.01, expo));
}

float LrSchedule::at(int epoch) const {
  float lr = base_rate * warmup_multiplier(epoch);
  for (int d : decay_epochs) {
    if (epoch >= d) lr *= decay_factor;
  }
  return lr;
}

Optimizer::Optimizer(OptimizerConfig cfg, const std::vector<Tensor>& params)
    : cfg_(cfg) {
  moment1_.reserve(params.size());
  for (const Tensor& p : params)
    moment1_.emplace_back(static_cast<size_t>(p.numel()), 0.0f);
  if (cfg_.kind == OptimKind::adam) {
    moment2_.reserve(params.size());
    for (const Tensor& p : params)
      moment2_.emplace_back(static_cast<size_t>(p.numel()), 0.0f);
  }
}

void Optimizer::step(std::vector<Tensor>& params, const LrSchedule& schedule,
                     int epoch) {
  step(params, schedule.at(epoch));
}

void Optimizer::step(std::vector<Tensor>& params, float lr) {
  if (params.size() != moment1_.size())
    throw std::invalid_argument("optimizer: parameter list changed size");
  for (size_t i = 0; i < params.size(); ++i) {
    if (!params[i].has_grad())
      throw std::invalid_argument("optimizer: parameter " + std::to_string(i) +
                                  " has no gradient");
    if (params[i].grad().size() != moment1_[i].size())
      throw std::invalid_argument("optimizer: parameter " + std::to_string(i) +
                                  " changed shape");
  }

  double sq = 0.0;
  for (Tensor& p : params) {
    for (float g : p.grad()) sq += static_cast<double>(g) * g;
  }
  last_grad_norm_ = std::sqrt(sq);
  if (cfg_.clip_norm && std::isfinite(*cfg_.clip_norm) &&
      last_grad_norm_ > *cfg_.clip_norm) {
    const float s = static_cast<float>(*cfg_.clip_norm / last_grad_norm_);
    for (Tensor& p : params) {
      for (float& g : p.mutable_grad()) g *= s;
    }
  }

  ++step_count_;
  if (cfg_.kind == OptimKind::adam) {
    const float b1 = cfg_.beta1, b2 = cfg_.beta2;
    const float c1 = 1.0f - static_cast<float>(std::pow(b1, step_count_));
    const float c2 = 1.0f - static_cast<float>(std::pow(b2, step_count_));
    for (size_t i = 0; i < params.size(); ++i) {
      auto v = params[i].mutable_values();
      auto g = params[i].grad();
      auto& m1 = moment1_[i];
      auto& m2 = moment2_[i];
      for (size_t j = 0; j < v.size(); ++j) {
        m1[j] = b1 * m1[j] + (1.0f - b1) * g[j];
        m2[j] = b2 * m2[j] + (1.0f - b2) * g[j] * g[j];
        const float mhat = m1[j] / c1;
        const float vhat = m2[j] / c2;
        const float update =
            mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * v[j];
        v[j] -= lr * update;
      }
    }
  } else {
    for (size_t i = 0; i < params.size(); ++i) {
      auto v = params[i].mutable_values();
      auto g = params[i].grad();
      auto& vel = moment1_[i];
      for (size_t j = 0; j < v.size(); ++j) {
        vel[j] = cfg_.momentum * vel[j] + g[j];
        v[j] -= lr * (vel[j] + cfg_.weight_decay * v[j]);
      }
    }
  }
}

void zero_grads(std::vector<Tensor>& params) {
  for (Tensor& p : params) p.zero_grad();
}

}  // namespace dtlab
