#include "dtlab/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "dtlab/rng.hpp"

namespace dtlab {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

int64_t spatial_numel(const Tensor& t) {
  int64_t s = 1;
  for (size_t ax = 2; ax < t.rank(); ++ax) s *= t.extent(ax);
  return s;
}

// Resumes the recurrence from phi (already past `t` iterations under the old
// regime) with input x and target y, recording per-example exact match for
// j = 0..extra_iters. Shared engine behind every perturbation operation.
PerturbationReport resume_and_score(const ModelState& state, Tensor phi,
                                    const Tensor& x, const Labels& y, int t,
                                    int extra_iters, const std::string& kind) {
  if (extra_iters < 0) fail("perturb: extra iteration budget must be >= 0");
  NoGradGuard ng;
  const int64_t B = phi.extent(0);
  PerturbationReport report;
  report.kind = kind;
  report.intervention_iteration = t;
  report.accuracy.reserve(static_cast<size_t>(extra_iters) + 1);
  report.recovery.assign(static_cast<size_t>(B), std::nullopt);

  for (int j = 0; j <= extra_iters; ++j) {
    if (j > 0) phi = recur_step(state, phi, x);
    Tensor logits = head_apply(state, phi);
    int64_t correct = 0;
    for (int64_t b = 0; b < B; ++b) {
      if (exact_match(logits, y, b)) {
        ++correct;
        if (!report.recovery[static_cast<size_t>(b)])
          report.recovery[static_cast<size_t>(b)] = j;
      }
    }
    report.accuracy.push_back(static_cast<double>(correct) /
                              static_cast<double>(B));
  }
  return report;
}

Tensor run_iterations(const ModelState& state, const Tensor& x, int t) {
  NoGradGuard ng;
  Tensor phi = project(state, x);
  for (int i = 0; i < t; ++i) phi = recur_step(state, phi, x);
  return phi;
}

std::vector<double> example_norms(const Tensor& a, const Tensor& b) {
  const int64_t B = a.extent(0);
  const int64_t per = a.numel() / B;
  std::vector<double> out(static_cast<size_t>(B));
  const float* pa = a.values().data();
  const float* pb = b.values().data();
  for (int64_t e = 0; e < B; ++e) {
    double acc = 0.0;
    for (int64_t i = 0; i < per; ++i) {
      const double d = static_cast<double>(pa[e * per + i]) - pb[e * per + i];
      acc += d * d;
    }
    out[static_cast<size_t>(e)] = std::sqrt(acc);
  }
  return out;
}

}  // namespace

void SweepResult::recompute_peak() {
  peak_accuracy = 0.0;
  peak_iteration = 0;
  for (size_t i = 0; i < accuracy.size(); ++i) {
    if (accuracy[i] > peak_accuracy) {
      peak_accuracy = accuracy[i];
      peak_iteration = static_cast<int>(i) + 1;
    }
  }
  if (peak_iteration == 0 && !accuracy.empty()) peak_iteration = 1;
}

SweepResult iteration_sweep(const ModelState& state, const Dataset& data,
                            int T_max, int eval_batch) {
  if (T_max < 1) fail("iteration_sweep: T_max must be >= 1");
  const int iters =
      state.spec.feed_forward ? kFeedForwardBlocks : T_max;
  SweepResult result;
  result.difficulty = data.header.difficulty;
  result.accuracy.assign(static_cast<size_t>(iters), 0.0);

  NoGradGuard ng;
  const int64_t total = static_cast<int64_t>(data.size());
  std::vector<int64_t> indices(static_cast<size_t>(total));
  std::iota(indices.begin(), indices.end(), 0);
  std::vector<int64_t> correct(static_cast<size_t>(iters), 0);

  for (int64_t off = 0; off < total; off += eval_batch) {
    const size_t take =
        static_cast<size_t>(std::min<int64_t>(eval_batch, total - off));
    std::span<const int64_t> chunk(indices.data() + off, take);
    Tensor x = input_batch(data, chunk);
    Labels y = target_batch(data, chunk);
    if (state.spec.feed_forward) {
      IterationTrace trace =
          forward(state, x, kFeedForwardBlocks, /*record_phi=*/false);
      for (int i = 0; i < iters; ++i)
        for (int64_t b = 0; b < static_cast<int64_t>(take); ++b)
          if (exact_match(trace.logits[static_cast<size_t>(i)], y, b))
            ++correct[static_cast<size_t>(i)];
    } else {
      Tensor phi = project(state, x);
      for (int i = 0; i < iters; ++i) {
        phi = recur_step(state, phi, x);
        Tensor logits = head_apply(state, phi);
        for (int64_t b = 0; b < static_cast<int64_t>(take); ++b)
          if (exact_match(logits, y, b)) ++correct[static_cast<size_t>(i)];
      }
    }
  }
  for (int i = 0; i < iters; ++i)
    result.accuracy[static_cast<size_t>(i)] =
        static_cast<double>(correct[static_cast<size_t>(i)]) /
        static_cast<double>(total);
  result.recompute_peak();
  return result;
}

ExitChoice max_confidence_exit(const IterationTrace& trace) {
  if (trace.logits.empty()) fail("max_confidence_exit: empty trace");
  const int64_t B = trace.logits[0].extent(0);
  ExitChoice choice;
  choice.iteration.assign(static_cast<size_t>(B), 1);
  std::vector<float> best(static_cast<size_t>(B),
                          -std::numeric_limits<float>::infinity());
  for (size_t t = 0; t < trace.confidence.size(); ++t) {
    for (int64_t b = 0; b < B; ++b) {
      const float c = trace.confidence[t][static_cast<size_t>(b)];
      if (c > best[static_cast<size_t>(b)]) {  // ties keep the earliest
        best[static_cast<size_t>(b)] = c;
        choice.iteration[static_cast<size_t>(b)] = static_cast<int>(t) + 1;
      }
    }
  }
  Tensor out = Tensor::zeros(trace.logits[0].shape());
  const int64_t per = trace.logits[0].numel() / B;
  auto dst = out.mutable_values();
  for (int64_t b = 0; b < B; ++b) {
    const auto& src =
        trace.logits[static_cast<size_t>(choice.iteration[static_cast<size_t>(b)] - 1)];
    std::copy_n(src.values().data() + b * per, per, dst.data() + b * per);
  }
  choice.logits = out;
  return choice;
}

double PerturbationReport::recovered_fraction() const {
  if (recovery.empty()) return 0.0;
  int64_t n = 0;
  for (const auto& r : recovery)
    if (r) ++n;
  return static_cast<double>(n) / static_cast<double>(recovery.size());
}

double PerturbationReport::mean_recovery_time() const {
  int64_t n = 0;
  double acc = 0.0;
  for (const auto& r : recovery) {
    if (r) {
      acc += *r;
      ++n;
    }
  }
  return n > 0 ? acc / static_cast<double>(n) : 0.0;
}

PerturbationReport perturb_features_noise(const ModelState& state,
                                          const Tensor& x, const Labels& y,
                                          int t, float sigma, float mu,
                                          int extra_iters, uint64_t noise_seed) {
  if (t < 1) fail("perturb_features_noise: intervention iteration must be >= 1");
  Tensor phi = run_iterations(state, x, t);
  if (sigma != 0.0f || mu != 0.0f) {
    // Dedicated stream: reproducible independently of data/model seeds.
    Rng rng(Rng::substream(noise_seed, 0x6e6f6973));
    for (float& v : phi.mutable_values()) v += rng.normal(mu, sigma);
  }
  return resume_and_score(state, phi, x, y, t, extra_iters, "noise");
}

PerturbationReport perturb_features_zero(const ModelState& state,
                                         const Tensor& x, const Labels& y,
                                         int t, int extra_iters) {
  if (t < 1) fail("perturb_features_zero: intervention iteration must be >= 1");
  Tensor phi = run_iterations(state, x, t);
  std::fill(phi.mutable_values().begin(), phi.mutable_values().end(), 0.0f);
  return resume_and_score(state, phi, x, y, t, extra_iters, "zeros");
}

PerturbationReport perturb_input_bitflip(
    const ModelState& state, const std::vector<BitStringInstance>& instances,
    const std::vector<int>& flip_index, int t, int extra_iters) {
  if (instances.empty()) fail("perturb_input_bitflip: no instances");
  if (instances.size() != flip_index.size())
    fail("perturb_input_bitflip: one flip index per instance required");
  if (state.spec.task != TaskKind::prefix_sum)
    fail("perturb_input_bitflip: prefix-sum models only");

  std::vector<BitStringInstance> flipped = instances;
  for (size_t i = 0; i < flipped.size(); ++i) {
    auto& inst = flipped[i];
    const int idx = flip_index[i];
    if (idx < 0 || idx >= static_cast<int>(inst.bits.size()))
      fail("perturb_input_bitflip: index " + std::to_string(idx) +
           " out of range for length " + std::to_string(inst.bits.size()));
    inst.bits[static_cast<size_t>(idx)] ^= 1;
    inst.target = prefix_sum_target(inst.bits);
  }

  std::vector<const BitStringInstance*> orig_ptrs, new_ptrs;
  for (const auto& inst : instances) orig_ptrs.push_back(&inst);
  for (const auto& inst : flipped) new_ptrs.push_back(&inst);
  Tensor x_orig = encode_prefix_input(orig_ptrs);
  Tensor x_new = encode_prefix_input(new_ptrs);

  const int64_t B = static_cast<int64_t>(instances.size());
  const int64_t L = static_cast<int64_t>(instances[0].bits.size());
  Labels y_new{{B, L}, {}};
  y_new.values.reserve(static_cast<size_t>(B * L));
  for (const auto& inst : flipped)
    for (uint8_t bit : inst.target) y_new.values.push_back(bit);

  Tensor phi = run_iterations(state, x_orig, t);
  PerturbationReport report =
      resume_and_score(state, phi, x_new, y_new, t, extra_iters, "bit_flip");
  report.input_unused = !state.spec.recall;
  return report;
}

PerturbationReport perturb_input_bitflip(const ModelState& state,
                                         const BitStringInstance& instance,
                                         int index, int t, int extra_iters) {
  return perturb_input_bitflip(state, std::vector<BitStringInstance>{instance},
                               std::vector<int>{index}, t, extra_iters);
}

MazeInstance move_endpoint_two_steps(const MazeInstance& maze) {
  std::vector<int> path = maze_oracle_path(maze);
  if (path.size() <= 3)
    fail("move_endpoint_two_steps: path has " +
         std::to_string(path.size() ? path.size() - 1 : 0) +
         " steps, need more than 2");
  MazeInstance moved = maze;
  moved.end = path[path.size() - 3];  // two path-cells toward the start
  MazeRender render = render_maze(moved);
  moved.image = std::move(render.image);
  moved.target = std::move(render.target);
  return moved;
}

PerturbationReport perturb_maze_endpoint(const ModelState& state,
                                         const MazeInstance& maze, int t,
                                         int extra_iters) {
  if (t < 1) fail("perturb_maze_endpoint: intervention iteration must be >= 1");
  if (state.spec.task != TaskKind::maze)
    fail("perturb_maze_endpoint: maze models only");
  MazeInstance moved = move_endpoint_two_steps(maze);

  std::vector<const MazeInstance*> orig{&maze}, changed{&moved};
  Tensor x_orig = encode_maze_input(orig);
  Tensor x_new = encode_maze_input(changed);
  const int64_t side = maze.side();
  Labels y_new{{1, side, side}, {}};
  y_new.values.reserve(moved.target.size());
  for (uint8_t v : moved.target) y_new.values.push_back(v);

  Tensor phi = run_iterations(state, x_orig, t);
  PerturbationReport report =
      resume_and_score(state, phi, x_new, y_new, t, extra_iters, "endpoint_move");
  report.input_unused = !state.spec.recall;
  return report;
}

PerturbationReport swap_features(const ModelState& state, const Tensor& x_a,
                                 const Labels& y_a, const Tensor& x_b, int t,
                                 int extra_iters) {
  if (t < 1) fail("swap_features: intervention iteration must be >= 1");
  if (x_a.shape() != x_b.shape())
    fail("swap_features: instance sizes differ (" + shape_str(x_a.shape()) +
         " vs " + shape_str(x_b.shape()) + ")");
  Tensor phi = run_iterations(state, x_b, t);
  PerturbationReport report =
      resume_and_score(state, phi, x_a, y_a, t, extra_iters, "feature_swap");
  report.input_unused = !state.spec.recall;
  return report;
}

PerturbationReport swap_features(const ModelState& state,
                                 const MazeInstance& maze_a,
                                 const MazeInstance& maze_b, int t,
                                 int extra_iters) {
  if (maze_a.side() != maze_b.side())
    fail("swap_features: maze sizes differ (" + std::to_string(maze_a.n) +
         " vs " + std::to_string(maze_b.n) + ")");
  std::vector<const MazeInstance*> pa{&maze_a}, pb{&maze_b};
  Tensor x_a = encode_maze_input(pa);
  Tensor x_b = encode_maze_input(pb);
  const int64_t side = maze_a.side();
  Labels y_a{{1, side, side}, {}};
  y_a.values.reserve(maze_a.target.size());
  for (uint8_t v : maze_a.target) y_a.values.push_back(v);
  return swap_features(state, x_a, y_a, x_b, t, extra_iters);
}

std::vector<std::vector<double>> delta_phi(const IterationTrace& trace) {
  if (trace.phi.size() < 2)
    fail("delta_phi: trace must record at least 2 iterations of features");
  const int64_t B = trace.phi[0].extent(0);
  std::vector<std::vector<double>> out(static_cast<size_t>(B));
  for (auto& seq : out) seq.reserve(trace.phi.size() - 1);
  for (size_t i = 1; i < trace.phi.size(); ++i) {
    std::vector<double> norms = example_norms(trace.phi[i], trace.phi[i - 1]);
    for (int64_t b = 0; b < B; ++b)
      out[static_cast<size_t>(b)].push_back(norms[static_cast<size_t>(b)]);
  }
  return out;
}

std::vector<std::vector<double>> delta_phi_curve(const ModelState& state,
                                                 const Tensor& x, int T) {
  if (T < 2) fail("delta_phi_curve: need at least 2 iterations");
  NoGradGuard ng;
  const int64_t B = x.extent(0);
  std::vector<std::vector<double>> out(static_cast<size_t>(B));
  for (auto& seq : out) seq.reserve(static_cast<size_t>(T) - 1);
  Tensor prev = recur_step(state, project(state, x), x);
  for (int i = 1; i < T; ++i) {
    Tensor next = recur_step(state, prev, x);
    std::vector<double> norms = example_norms(next, prev);
    for (int64_t b = 0; b < B; ++b)
      out[static_cast<size_t>(b)].push_back(norms[static_cast<size_t>(b)]);
    prev = next;
  }
  return out;
}

std::vector<std::vector<double>> delta_phi_on_noise(const ModelState& state,
                                                    int size, int T,
                                                    int examples,
                                                    uint64_t seed) {
  if (examples < 1) fail("delta_phi_on_noise: need at least one example");
  Rng rng(Rng::substream(seed, 0x64656c74));
  Tensor x;
  if (state.spec.task == TaskKind::prefix_sum) {
    x = Tensor::zeros({examples, 1, size});
  } else {
    const int side = 3 * size + 1;
    x = Tensor::zeros({examples, 3, side, side});
  }
  for (float& v : x.mutable_values()) v = rng.uniform01();
  return delta_phi_curve(state, x, T);
}

}  // namespace dtlab
