#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dtlab/problems.hpp"
#include "dtlab/tensor.hpp"

namespace dtlab {

// Effective depth of the unshared feed-forward baseline, in block applications.
inline constexpr int kFeedForwardBlocks = 30;

inline constexpr uint16_t kCheckpointFormatVersion = 1;
inline constexpr char kCheckpointMagic[4] = {'D', 'T', 'C', 'K'};

struct ModelSpec {
  TaskKind task = TaskKind::prefix_sum;
  int width = 64;           // filters per layer
  bool recall = false;      // concatenate the raw input before every step
  bool feed_forward = false;
  int max_iters = 30;       // m, the training regime
  std::vector<int> head_channels;  // output plan of the 3 head convolutions

  int input_channels() const { return task == TaskKind::maze ? 3 : 1; }
  int conv_dims() const { return task == TaskKind::maze ? 2 : 1; }
  void validate() const;

  // Head plans follow the task family: the 1D task tapers from the full
  // width, images use a fixed narrow funnel.
  static std::vector<int> default_head(TaskKind task, int width);
  static ModelSpec make(TaskKind task, int width, bool recall, bool feed_forward,
                        int max_iters);
};

struct ConvParam {
  Tensor weights;
  Tensor bias;
};

// One residual block: conv-relu-conv, add the block input, relu, then the
// same again with the half-way activation as the second skip source.
struct BlockParams {
  std::array<ConvParam, 4> convs;
};

struct ModelState {
  ModelSpec spec;
  ConvParam projection;
  std::optional<ConvParam> recall_adapter;  // present iff spec.recall
  std::vector<BlockParams> blocks;          // 1 shared, or 30 unshared for FF
  std::vector<ConvParam> head;              // 3 convolutions

  static ModelState init(const ModelSpec& spec, uint64_t seed);

  std::vector<Tensor> parameters() const;
  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  int64_t parameter_count() const;
};

// phi_0 = relu(conv(x)); w channels, spatial size preserved.
Tensor project(const ModelState& state, const Tensor& x);

// One recurrent application. With recall the raw input is concatenated onto
// the features and mapped back to w channels first. Stationary: no iteration
// index enters anywhere.
Tensor recur_step(const ModelState& state, const Tensor& phi, const Tensor& x);

// Decoding head: three convolutions with ReLUs after the first and second.
Tensor head_apply(const ModelState& state, const Tensor& phi);

struct IterationTrace {
  int iters = 0;
  std::vector<Tensor> phi;     // phi_1..phi_T (detached), w x spatial each
  std::vector<Tensor> logits;  // y_1..y_T (detached), 2 x spatial each
  std::vector<std::vector<float>> confidence;  // [iter][example]
};

// Training fast path: head applied only after the last iteration; the result
// carries the full graph. Feed-forward models require iters == 30.
Tensor forward_logits(const ModelState& state, const Tensor& x, int iters);

// Recorded pass for analysis: head after every iteration, no gradients.
IterationTrace forward(const ModelState& state, const Tensor& x, int iters,
                       bool record_phi = true);

// Resumes the recurrence from arbitrary features. forward(state, x, T) is
// exactly forward_from(state, project(x), x, T).
IterationTrace forward_from(const ModelState& state, const Tensor& phi_start,
                            const Tensor& x, int iters, bool record_phi = true);

// Mean over positions of the softmax probability of the argmax class.
std::vector<float> confidence(const Tensor& logits);

// Argmax class per position; ties decode to class 0.
std::vector<int32_t> decode(const Tensor& logits);
bool exact_match(const Tensor& logits, const Labels& target, int64_t example);

void save_checkpoint(const ModelState& state, const std::string& path,
                     uint64_t config_hash = 0);
ModelState load_checkpoint(const std::string& path,
                           uint64_t* config_hash = nullptr);

}  // namespace dtlab
