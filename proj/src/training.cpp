#include "dtlab/training.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "json.hpp"

extern "C" void openblas_set_num_threads(int);

namespace dtlab {

using nlohmann::json;

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

json config_json(const TrainConfig& c) {
  json j;
  j["m"] = c.m;
  j["alpha"] = c.alpha;
  j["optimizer"] = c.optimizer == OptimKind::adam ? "adam" : "sgd_momentum";
  j["lr"] = c.lr;
  j["decay_epochs"] = c.decay_epochs;
  j["decay_factor"] = c.decay_factor;
  j["warmup_epochs"] = c.warmup_epochs;
  j["warmup_curve"] = "geometric 0.01 -> 1.0 over warmup epochs";
  j["epochs"] = c.epochs;
  if (c.clip_norm) j["clip_norm"] = *c.clip_norm;
  j["weight_decay"] = c.weight_decay;
  j["adam_beta1"] = 0.9;
  j["adam_beta2"] = 0.999;
  j["adam_eps"] = 1e-8;
  j["momentum"] = 0.9;
  j["batch_size"] = c.batch_size;
  j["seed"] = c.seed;
  j["force_n_zero"] = c.force_n_zero;
  j["val_fraction"] = c.val_fraction;
  j["blas_threads"] = c.blas_threads;
  j["runtime_penalty"] = c.runtime_penalty;
  return j;
}

TrainConfig config_from_json(const json& j) {
  TrainConfig c;
  c.m = j.at("m").get<int>();
  c.alpha = j.at("alpha").get<float>();
  c.optimizer = j.at("optimizer").get<std::string>() == "adam"
                    ? OptimKind::adam
                    : OptimKind::sgd_momentum;
  c.lr = j.at("lr").get<float>();
  c.decay_epochs = j.at("decay_epochs").get<std::vector<int>>();
  c.decay_factor = j.at("decay_factor").get<float>();
  c.warmup_epochs = j.at("warmup_epochs").get<int>();
  c.epochs = j.at("epochs").get<int>();
  if (j.contains("clip_norm")) c.clip_norm = j.at("clip_norm").get<float>();
  c.weight_decay = j.at("weight_decay").get<float>();
  c.batch_size = j.at("batch_size").get<int>();
  c.seed = j.at("seed").get<uint64_t>();
  c.force_n_zero = j.at("force_n_zero").get<bool>();
  c.val_fraction = j.at("val_fraction").get<float>();
  c.blas_threads = j.at("blas_threads").get<int>();
  c.runtime_penalty = j.at("runtime_penalty").get<bool>();
  return c;
}

json spec_json(const ModelSpec& s) {
  json j;
  j["task"] = task_name(s.task);
  j["width"] = s.width;
  j["recall"] = s.recall;
  j["feed_forward"] = s.feed_forward;
  j["max_iters"] = s.max_iters;
  j["head_channels"] = s.head_channels;
  return j;
}

ModelSpec spec_from_json(const json& j) {
  ModelSpec s;
  s.task = task_from_name(j.at("task").get<std::string>());
  s.width = j.at("width").get<int>();
  s.recall = j.at("recall").get<bool>();
  s.feed_forward = j.at("feed_forward").get<bool>();
  s.max_iters = j.at("max_iters").get<int>();
  s.head_channels = j.at("head_channels").get<std::vector<int>>();
  return s;
}

std::string header_line(const RunRecord& r) {
  json j;
  j["type"] = "run";
  j["format_version"] = kMetricsFormatVersion;
  j["config"] = config_json(r.config);
  j["config_hash"] = r.config_hash;
  j["dataset"] = r.dataset_ref;
  j["model"] = spec_json(r.spec);
  return j.dump();
}

std::string epoch_line(const EpochMetrics& e) {
  json j;
  j["type"] = "epoch";
  j["epoch"] = e.epoch;
  j["lr"] = e.lr;
  j["train_loss"] = e.train_loss;
  j["train_acc"] = e.train_acc;
  j["val_acc"] = e.val_acc;
  return j.dump();
}

std::string final_line(const RunRecord& r) {
  json j;
  j["type"] = "final";
  j["best_epoch"] = r.best_epoch;
  j["best_val_acc"] = r.best_val_acc;
  // Stored relative to the run directory so reruns into different
  // directories still produce byte-identical metrics.
  j["checkpoint"] =
      std::filesystem::path(r.checkpoint_path).filename().string();
  j["converged"] = r.converged;
  j["failed"] = r.failed;
  return j.dump();
}

}  // namespace

void TrainConfig::validate() const {
  if (m < 1) fail("train config: m must be >= 1");
  if (!(alpha >= 0.0f && alpha <= 1.0f))
    fail("train config: alpha must be in [0, 1]");
  if (epochs < 1) fail("train config: epochs must be >= 1");
  if (batch_size < 1) fail("train config: batch_size must be >= 1");
  if (!(val_fraction >= 0.0f && val_fraction < 1.0f))
    fail("train config: val_fraction must be in [0, 1)");
  if (blas_threads < 1) fail("train config: blas_threads must be >= 1");
  schedule().validate();
}

LrSchedule TrainConfig::schedule() const {
  LrSchedule s;
  s.base_rate = lr;
  s.warmup_epochs = warmup_epochs;
  s.decay_epochs = decay_epochs;
  s.decay_factor = decay_factor;
  return s;
}

OptimizerConfig TrainConfig::optimizer_config() const {
  OptimizerConfig oc;
  oc.kind = optimizer;
  oc.weight_decay = weight_decay;
  oc.clip_norm = clip_norm;
  return oc;
}

std::pair<int, int> sample_progressive_split(int m, Rng& rng, bool force_n_zero) {
  if (m < 1) fail("sample_progressive_split: m must be >= 1");
  const int n = force_n_zero ? 0 : static_cast<int>(rng.uniform_int(0, m - 1));
  const int k = static_cast<int>(rng.uniform_int(1, m - n));
  return {n, k};
}

float progressive_loss_step(const ModelState& state, const Tensor& x,
                            const Labels& y, const TrainConfig& config,
                            Rng& rng) {
  if (state.spec.feed_forward) {
    Tensor loss = cross_entropy_per_position(
        forward_logits(state, x, kFeedForwardBlocks), y);
    backward(loss);
    return loss.item();
  }
  const float alpha = config.alpha;
  Tensor loss_max, loss_prog;
  if (alpha < 1.0f) {
    loss_max =
        cross_entropy_per_position(forward_logits(state, x, config.m), y);
  }
  if (alpha > 0.0f) {
    auto [n, k] = sample_progressive_split(config.m, rng, config.force_n_zero);
    Tensor phi_n;
    {
      NoGradGuard ng;
      phi_n = project(state, x);
      for (int i = 0; i < n; ++i) phi_n = recur_step(state, phi_n, x);
    }
    Tensor phi = phi_n.detach();
    for (int i = 0; i < k; ++i) phi = recur_step(state, phi, x);
    loss_prog = cross_entropy_per_position(head_apply(state, phi), y);
  }
  Tensor total;
  if (alpha <= 0.0f) {
    total = loss_max;
  } else if (alpha >= 1.0f) {
    total = loss_prog;
  } else {
    total = add(scale(loss_max, 1.0f - alpha), scale(loss_prog, alpha));
  }
  backward(total);
  return total.item();
}

double exact_match_accuracy(const ModelState& state, const Dataset& data, int T,
                            int eval_batch) {
  std::vector<int64_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), 0);
  return exact_match_accuracy(state, data, idx, T, eval_batch);
}

double exact_match_accuracy(const ModelState& state, const Dataset& data,
                            std::span<const int64_t> indices, int T,
                            int eval_batch) {
  if (T < 1) fail("exact_match_accuracy: T must be >= 1");
  if (indices.empty()) return 0.0;
  NoGradGuard ng;
  int64_t correct = 0;
  for (size_t off = 0; off < indices.size();
       off += static_cast<size_t>(eval_batch)) {
    const size_t take = std::min(static_cast<size_t>(eval_batch),
                                 indices.size() - off);
    auto chunk = indices.subspan(off, take);
    Tensor x = input_batch(data, chunk);
    Labels y = target_batch(data, chunk);
    Tensor logits = forward_logits(state, x, T);
    for (int64_t b = 0; b < static_cast<int64_t>(take); ++b)
      if (exact_match(logits, y, b)) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(indices.size());
}

RunRecord train(ModelState& state, const Dataset& data,
                const TrainConfig& config, const std::string& out_dir,
                uint64_t config_hash) {
  config.validate();
  if (config.runtime_penalty)
    fail("train: the run-time-penalty loss variant is not implemented");
  if (data.size() == 0) fail("train: dataset is empty");
  if (state.spec.feed_forward && config.m != kFeedForwardBlocks)
    fail("train: feed-forward models require m == " +
         std::to_string(kFeedForwardBlocks));
  openblas_set_num_threads(config.blas_threads);

  RunRecord record;
  record.config = config;
  record.spec = state.spec;
  record.config_hash = config_hash;
  record.dataset_ref = task_name(data.header.task) + "/d" +
                       std::to_string(data.header.difficulty) + "/n" +
                       std::to_string(data.header.count) + "/s" +
                       std::to_string(data.header.seed);

  const int64_t total = static_cast<int64_t>(data.size());
  const int64_t n_val =
      static_cast<int64_t>(std::llround(config.val_fraction * total));
  const int64_t n_train = total - n_val;
  if (n_train < 1) fail("train: no training examples after validation split");

  std::vector<int64_t> train_idx(static_cast<size_t>(n_train));
  std::iota(train_idx.begin(), train_idx.end(), 0);
  std::vector<int64_t> val_idx(static_cast<size_t>(n_val));
  std::iota(val_idx.begin(), val_idx.end(), n_train);

  std::vector<Tensor> params = state.parameters();
  Optimizer opt(config.optimizer_config(), params);
  const LrSchedule sched = config.schedule();
  Rng shuffle_rng(Rng::substream(config.seed, 1));
  Rng nk_rng(Rng::substream(config.seed, 2));

  std::ofstream metrics;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    record.checkpoint_path = out_dir + "/checkpoint.dtck";
    metrics.open(out_dir + "/metrics.jsonl", std::ios::trunc);
    if (!metrics) fail("train: cannot write metrics in " + out_dir);
    metrics << header_line(record) << "\n" << std::flush;
  }

  const int eval_T = state.spec.feed_forward ? kFeedForwardBlocks : config.m;
  for (int epoch = 0; epoch < config.epochs && !record.failed; ++epoch) {
    const float lr = sched.at(epoch);
    shuffle_rng.shuffle(train_idx);
    double loss_sum = 0.0;
    int64_t batches = 0;
    for (int64_t off = 0; off < n_train; off += config.batch_size) {
      const size_t take = static_cast<size_t>(
          std::min<int64_t>(config.batch_size, n_train - off));
      std::span<const int64_t> chunk(train_idx.data() + off, take);
      Tensor x = input_batch(data, chunk);
      Labels y = target_batch(data, chunk);
      zero_grads(params);
      const float loss = progressive_loss_step(state, x, y, config, nk_rng);
      if (!std::isfinite(loss)) {
        record.failed = true;
        break;
      }
      opt.step(params, lr);
      loss_sum += loss;
      ++batches;
    }

    EpochMetrics em;
    em.epoch = epoch;
    em.lr = lr;
    em.train_loss = batches > 0 ? loss_sum / static_cast<double>(batches) : 0.0;
    em.train_acc = exact_match_accuracy(state, data, train_idx, eval_T);
    em.val_acc = n_val > 0 ? exact_match_accuracy(state, data, val_idx, eval_T)
                           : em.train_acc;
    record.epochs.push_back(em);
    if (metrics.is_open()) metrics << epoch_line(em) << "\n" << std::flush;

    if (em.val_acc > record.best_val_acc || record.best_epoch < 0) {
      record.best_val_acc = em.val_acc;
      record.best_epoch = epoch;
      if (!record.checkpoint_path.empty())
        save_checkpoint(state, record.checkpoint_path, config_hash);
    }
  }

  record.converged = !record.failed && !record.epochs.empty() &&
                     record.epochs.back().train_acc >= kConvergenceThreshold;
  if (metrics.is_open()) metrics << final_line(record) << "\n" << std::flush;
  return record;
}

void save_run_record(const RunRecord& record, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) fail("save_run_record: cannot open " + path);
  f << header_line(record) << "\n";
  for (const EpochMetrics& e : record.epochs) f << epoch_line(e) << "\n";
  f << final_line(record) << "\n";
}

RunRecord load_run_record(const std::string& path) {
  std::ifstream f(path);
  if (!f) fail("load_run_record: cannot open " + path);
  RunRecord r;
  bool have_header = false, have_final = false;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    const std::string type = j.at("type").get<std::string>();
    if (type == "run") {
      const auto version = j.at("format_version").get<uint16_t>();
      if (version != kMetricsFormatVersion)
        fail(path + ": metrics format version " + std::to_string(version) +
             ", expected " + std::to_string(kMetricsFormatVersion));
      r.config = config_from_json(j.at("config"));
      r.config_hash = j.at("config_hash").get<uint64_t>();
      r.dataset_ref = j.at("dataset").get<std::string>();
      r.spec = spec_from_json(j.at("model"));
      have_header = true;
    } else if (type == "epoch") {
      EpochMetrics e;
      e.epoch = j.at("epoch").get<int>();
      e.lr = j.at("lr").get<float>();
      e.train_loss = j.at("train_loss").get<double>();
      e.train_acc = j.at("train_acc").get<double>();
      e.val_acc = j.at("val_acc").get<double>();
      r.epochs.push_back(e);
    } else if (type == "final") {
      r.best_epoch = j.at("best_epoch").get<int>();
      r.best_val_acc = j.at("best_val_acc").get<double>();
      r.checkpoint_path = j.at("checkpoint").get<std::string>();
      r.converged = j.at("converged").get<bool>();
      r.failed = j.at("failed").get<bool>();
      have_final = true;
    } else {
      fail(path + ": unknown record type '" + type + "'");
    }
  }
  if (!have_header) fail(path + ": missing run header line");
  if (!have_final) fail(path + ": missing final line (incomplete run)");
  return r;
}

}  // namespace dtlab
