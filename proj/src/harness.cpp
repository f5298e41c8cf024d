#include "dtlab/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "json.hpp"

namespace dtlab {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

void require_path(const std::string& path, const std::string& what) {
  if (path.empty()) fail("plan: missing " + what);
  if (!fs::exists(path)) fail("plan: " + what + " '" + path + "' does not resolve");
}

std::ofstream open_out(const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) fail("cannot write " + path);
  return f;
}

std::string model_tag(const ModelSpec& spec) {
  if (spec.feed_forward) return "ff";
  return spec.recall ? "dt_recall" : "dt";
}

}  // namespace

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double acc = 0.0;
  for (double x : v) acc += x;
  return acc / static_cast<double>(v.size());
}

double std_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double acc = 0.0;
  for (double x : v) acc += (x - m) * (x - m);
  return std::sqrt(acc / static_cast<double>(v.size() - 1));
}

void ExperimentPlan::validate() const {
  static const std::set<std::string> kinds{
      "train", "sweep", "perturb", "ablate-alpha", "ablate-width-depth",
      "hard-to-easy"};
  if (!kinds.count(kind)) fail("plan: unknown experiment kind '" + kind + "'");
  if (seeds.empty()) fail("plan: seed list must be nonempty");
  if (out_dir.empty()) fail("plan: missing output directory");
  if (kind == "train" || kind == "ablate-alpha" || kind == "ablate-width-depth")
    require_path(train_data, "training dataset");
  if (kind == "ablate-alpha" && alphas.empty())
    fail("plan: ablate-alpha needs a nonempty alpha list");
  if (kind == "ablate-width-depth" && widths.empty() && depths.empty())
    fail("plan: ablate-width-depth needs widths or depths");
  if (kind == "hard-to-easy") {
    require_path(checkpoint, "checkpoint");
    require_path(eval_data, "training-difficulty dataset");
    require_path(easy_data, "easier dataset");
  }
  if (!eval_data.empty()) require_path(eval_data, "evaluation dataset");
  if (sweep_iters < 1) fail("plan: sweep_iters must be >= 1");
  if (workers < 1) fail("plan: workers must be >= 1");
}

const std::set<std::string>& plan_keys() {
  static std::set<std::string> keys = [] {
    std::set<std::string> k{"kind",      "seeds",     "alphas",     "widths",
                            "depths",    "train_data", "eval_data", "easy_data",
                            "checkpoint", "out",       "sweep_iters", "workers"};
    k.insert(model_keys().begin(), model_keys().end());
    k.insert(train_keys().begin(), train_keys().end());
    return k;
  }();
  return keys;
}

ExperimentPlan plan_from_kv(const KvConfig& kv) {
  check_known_keys(kv, plan_keys(), "experiment plan");
  ExperimentPlan plan;
  if (kv.count("kind")) plan.kind = kv.at("kind");
  plan.spec = model_spec_from_kv([&] {
    KvConfig sub;
    for (const auto& k : model_keys())
      if (kv.count(k)) sub[k] = kv.at(k);
    return sub;
  }());
  plan.config = train_config_from_kv([&] {
    KvConfig sub;
    for (const auto& k : train_keys())
      if (kv.count(k)) sub[k] = kv.at(k);
    return sub;
  }());
  plan.seeds.clear();
  for (int s : kv_int_list(kv, "seeds")) plan.seeds.push_back(static_cast<uint64_t>(s));
  if (plan.seeds.empty()) plan.seeds.push_back(plan.config.seed);
  plan.alphas = kv_double_list(kv, "alphas");
  plan.widths = kv_int_list(kv, "widths");
  plan.depths = kv_int_list(kv, "depths");
  if (kv.count("train_data")) plan.train_data = kv.at("train_data");
  if (kv.count("eval_data")) plan.eval_data = kv.at("eval_data");
  if (kv.count("easy_data")) plan.easy_data = kv.at("easy_data");
  if (kv.count("checkpoint")) plan.checkpoint = kv.at("checkpoint");
  if (kv.count("out")) plan.out_dir = kv.at("out");
  plan.sweep_iters = static_cast<int>(kv_int(kv, "sweep_iters", 200));
  plan.workers = static_cast<int>(kv_int(kv, "workers", 1));
  return plan;
}

KvConfig run_identity(const ExperimentPlan& plan, const ModelSpec& spec,
                      const TrainConfig& config) {
  KvConfig kv = kv_from_model_spec(spec);
  KvConfig train_kv = kv_from_train_config(config);
  kv.insert(train_kv.begin(), train_kv.end());
  kv["train_data"] = plan.train_data;
  if (!plan.eval_data.empty()) kv["eval_data"] = plan.eval_data;
  kv["sweep_iters"] = std::to_string(plan.sweep_iters);
  return kv;
}

TrainedRun run_single(const ExperimentPlan& plan, const ModelSpec& spec,
                      const TrainConfig& config, const std::string& name,
                      const Dataset& train_set, const Dataset* eval_set) {
  TrainedRun out;
  out.dir = plan.out_dir + "/" + name;
  fs::create_directories(out.dir);
  const KvConfig identity = run_identity(plan, spec, config);
  const uint64_t hash = config_hash(identity);
  write_kv_file(identity, out.dir + "/config.kv");

  ModelState state = ModelState::init(spec, config.seed);
  out.record = train(state, train_set, config, out.dir, hash);

  if (eval_set != nullptr && !out.record.failed) {
    // Sweep the best checkpoint, not the final parameters.
    ModelState best = load_checkpoint(out.record.checkpoint_path);
    SweepResult sweep = iteration_sweep(best, *eval_set, plan.sweep_iters);
    sweep.model_id = name;
    write_sweep_csv(sweep, out.dir + "/sweep.csv", hash);
    write_sweep_json(sweep, out.dir + "/sweep.json", hash);
    out.sweep = std::move(sweep);
  }
  return out;
}

namespace {

// Runs one job per (variant, seed) over a small thread pool. Each job trains
// an independent model; shared state is read-only.
void parallel_for_jobs(int workers, int total,
                       const std::function<void(int)>& job) {
  if (workers <= 1) {
    for (int i = 0; i < total; ++i) job(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  const int n = std::min(workers, total);
  pool.reserve(static_cast<size_t>(n));
  for (int w = 0; w < n; ++w) {
    pool.emplace_back([&] {
      for (int i = next.fetch_add(1); i < total; i = next.fetch_add(1)) job(i);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace

std::vector<AlphaGridRow> run_alpha_grid(const ExperimentPlan& plan) {
  plan.validate();
  const Dataset train_set = load_dataset(plan.train_data);
  std::optional<Dataset> eval_set;
  if (!plan.eval_data.empty()) eval_set = load_dataset(plan.eval_data);

  struct Job {
    double alpha;
    uint64_t seed;
    TrainedRun result;
  };
  std::vector<Job> jobs;
  for (double alpha : plan.alphas)
    for (uint64_t seed : plan.seeds) jobs.push_back({alpha, seed, {}});

  parallel_for_jobs(plan.workers, static_cast<int>(jobs.size()), [&](int i) {
    Job& job = jobs[static_cast<size_t>(i)];
    ModelSpec spec = plan.spec;
    TrainConfig config = plan.config;
    config.alpha = static_cast<float>(job.alpha);
    config.seed = job.seed;
    std::ostringstream name;
    name << "alpha_" << job.alpha << "/seed_" << job.seed;
    job.result = run_single(plan, spec, config, name.str(), train_set,
                            eval_set ? &*eval_set : nullptr);
  });

  std::vector<AlphaGridRow> rows;
  for (double alpha : plan.alphas) {
    AlphaGridRow row;
    row.alpha = alpha;
    std::vector<double> peaks, peak_iters;
    for (const Job& job : jobs) {
      if (job.alpha != alpha) continue;
      ++row.runs;
      if (!job.result.record.converged) continue;  // convergence filter
      ++row.converged;
      if (job.result.sweep) {
        peaks.push_back(job.result.sweep->peak_accuracy);
        peak_iters.push_back(job.result.sweep->peak_iteration);
      } else {
        peaks.push_back(job.result.record.best_val_acc);
      }
    }
    row.mean_peak = mean_of(peaks);
    row.std_peak = std_of(peaks);
    row.mean_peak_iteration = mean_of(peak_iters);
    rows.push_back(row);
  }

  json summary;
  summary["format_version"] = kArtifactFormatVersion;
  summary["kind"] = "ablate-alpha";
  json grid = json::array();
  for (const AlphaGridRow& row : rows) {
    json r;
    r["alpha"] = row.alpha;
    r["runs"] = row.runs;
    r["converged"] = row.converged;
    r["mean_peak"] = row.mean_peak;
    r["std_peak"] = row.std_peak;
    r["mean_peak_iteration"] = row.mean_peak_iteration;
    grid.push_back(r);
  }
  summary["grid"] = grid;
  open_out(plan.out_dir + "/alpha_grid.json") << summary.dump(2) << "\n";
  return rows;
}

HardToEasyResult run_hard_to_easy(const ExperimentPlan& plan) {
  plan.validate();
  uint64_t hash = 0;
  ModelState state = load_checkpoint(plan.checkpoint, &hash);
  const Dataset hard = load_dataset(plan.eval_data);
  const Dataset easy = load_dataset(plan.easy_data);
  HardToEasyResult out;
  out.hard = iteration_sweep(state, hard, plan.sweep_iters);
  out.hard.model_id = plan.checkpoint;
  out.easy = iteration_sweep(state, easy, plan.sweep_iters);
  out.easy.model_id = plan.checkpoint;
  fs::create_directories(plan.out_dir);
  write_sweep_csv(out.hard, plan.out_dir + "/sweep_hard.csv", hash);
  write_sweep_json(out.hard, plan.out_dir + "/sweep_hard.json", hash);
  write_sweep_csv(out.easy, plan.out_dir + "/sweep_easy.csv", hash);
  write_sweep_json(out.easy, plan.out_dir + "/sweep_easy.json", hash);
  return out;
}

std::vector<WidthDepthRow> run_width_depth(const ExperimentPlan& plan) {
  plan.validate();
  const Dataset train_set = load_dataset(plan.train_data);
  std::optional<Dataset> eval_set;
  if (!plan.eval_data.empty()) eval_set = load_dataset(plan.eval_data);

  struct Variant {
    int width;
    int m;
  };
  std::vector<Variant> variants;
  const std::vector<int>& ws =
      plan.widths.empty() ? std::vector<int>{plan.spec.width} : plan.widths;
  const std::vector<int>& ms =
      plan.depths.empty() ? std::vector<int>{plan.config.m} : plan.depths;
  for (int w : ws)
    for (int m : ms) variants.push_back({w, m});

  struct Job {
    Variant variant;
    uint64_t seed;
    TrainedRun result;
  };
  std::vector<Job> jobs;
  for (const Variant& v : variants)
    for (uint64_t seed : plan.seeds) jobs.push_back({v, seed, {}});

  parallel_for_jobs(plan.workers, static_cast<int>(jobs.size()), [&](int i) {
    Job& job = jobs[static_cast<size_t>(i)];
    ModelSpec spec = plan.spec;
    spec.width = job.variant.width;
    spec.max_iters = job.variant.m;
    spec.head_channels = ModelSpec::default_head(spec.task, spec.width);
    TrainConfig config = plan.config;
    config.m = job.variant.m;
    config.seed = job.seed;
    std::ostringstream name;
    name << "w" << job.variant.width << "_m" << job.variant.m << "/seed_"
         << job.seed;
    job.result = run_single(plan, spec, config, name.str(), train_set,
                            eval_set ? &*eval_set : nullptr);
  });

  std::vector<WidthDepthRow> rows;
  for (const Job& job : jobs) {
    WidthDepthRow row;
    row.width = job.variant.width;
    row.m = job.variant.m;
    row.converged = job.result.record.converged;
    if (job.result.sweep) {
      row.peak_accuracy = job.result.sweep->peak_accuracy;
      row.peak_iteration = job.result.sweep->peak_iteration;
    } else {
      row.peak_accuracy = job.result.record.best_val_acc;
    }
    rows.push_back(row);
  }

  json summary;
  summary["format_version"] = kArtifactFormatVersion;
  summary["kind"] = "ablate-width-depth";
  json arr = json::array();
  for (const WidthDepthRow& row : rows) {
    json r;
    r["width"] = row.width;
    r["m"] = row.m;
    r["converged"] = row.converged;
    r["peak_accuracy"] = row.peak_accuracy;
    r["peak_iteration"] = row.peak_iteration;
    arr.push_back(r);
  }
  summary["rows"] = arr;
  open_out(plan.out_dir + "/width_depth.json") << summary.dump(2) << "\n";
  return rows;
}

// ---------------------------------------------------------------------------
// Artifact files

namespace {

std::string csv_header(uint64_t hash) {
  return "# config_hash=" + hash_hex(hash) +
         " format_version=" + std::to_string(kArtifactFormatVersion) + "\n";
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(10);
  os << v;
  return os.str();
}

}  // namespace

void write_sweep_csv(const SweepResult& sweep, const std::string& path,
                     uint64_t hash) {
  std::ofstream f = open_out(path);
  f << csv_header(hash) << "iteration,accuracy\n";
  for (size_t i = 0; i < sweep.accuracy.size(); ++i)
    f << (i + 1) << "," << fmt(sweep.accuracy[i]) << "\n";
}

void write_sweep_json(const SweepResult& sweep, const std::string& path,
                      uint64_t hash) {
  json j;
  j["format_version"] = kArtifactFormatVersion;
  j["config_hash"] = hash;
  j["model_id"] = sweep.model_id;
  j["difficulty"] = sweep.difficulty;
  j["iterations"] = sweep.accuracy.size();
  j["peak_accuracy"] = sweep.peak_accuracy;
  j["peak_iteration"] = sweep.peak_iteration;
  j["accuracy"] = sweep.accuracy;
  open_out(path) << j.dump(2) << "\n";
}

SweepResult load_sweep_json(const std::string& path, uint64_t* hash) {
  std::ifstream f(path);
  if (!f) fail("cannot open " + path);
  json j = json::parse(f);
  const auto version = j.at("format_version").get<uint16_t>();
  if (version != kArtifactFormatVersion)
    fail(path + ": artifact format version " + std::to_string(version) +
         ", expected " + std::to_string(kArtifactFormatVersion));
  if (hash) *hash = j.at("config_hash").get<uint64_t>();
  SweepResult sweep;
  sweep.model_id = j.at("model_id").get<std::string>();
  sweep.difficulty = j.at("difficulty").get<uint32_t>();
  sweep.accuracy = j.at("accuracy").get<std::vector<double>>();
  sweep.peak_accuracy = j.at("peak_accuracy").get<double>();
  sweep.peak_iteration = j.at("peak_iteration").get<int>();
  return sweep;
}

void write_perturbation_csv(const PerturbationReport& report,
                            const std::string& path, uint64_t hash) {
  std::ofstream f = open_out(path);
  f << csv_header(hash) << "iteration,accuracy\n";
  for (size_t j = 0; j < report.accuracy.size(); ++j)
    f << (report.intervention_iteration + static_cast<int>(j)) << ","
      << fmt(report.accuracy[j]) << "\n";
}

void write_perturbation_json(const PerturbationReport& report,
                             const std::string& path, uint64_t hash) {
  json j;
  j["format_version"] = kArtifactFormatVersion;
  j["config_hash"] = hash;
  j["kind"] = report.kind;
  j["intervention_iteration"] = report.intervention_iteration;
  j["input_unused"] = report.input_unused;
  j["recovered_fraction"] = report.recovered_fraction();
  j["mean_recovery_time"] = report.mean_recovery_time();
  json rec = json::array();
  for (const auto& r : report.recovery) {
    if (r) {
      rec.push_back(*r);
    } else {
      rec.push_back(nullptr);  // did not recover within the cap
    }
  }
  j["recovery"] = rec;
  j["final_accuracy"] =
      report.accuracy.empty() ? 0.0 : report.accuracy.back();
  j["peak_accuracy"] =
      report.accuracy.empty()
          ? 0.0
          : *std::max_element(report.accuracy.begin(), report.accuracy.end());
  open_out(path) << j.dump(2) << "\n";
}

void write_delta_phi_csv(const std::vector<std::vector<double>>& curves,
                         const std::string& path, uint64_t hash) {
  if (curves.empty()) fail("write_delta_phi_csv: no curves");
  std::ofstream f = open_out(path);
  f << csv_header(hash) << "iteration,delta_phi\n";
  const size_t T = curves[0].size();
  for (size_t i = 0; i < T; ++i) {
    double acc = 0.0;
    for (const auto& c : curves) acc += c[i];
    f << (i + 2) << "," << fmt(acc / static_cast<double>(curves.size())) << "\n";
  }
}

std::vector<ReportGroup> report_scan(const std::string& root) {
  if (!fs::exists(root)) fail("report: '" + root + "' does not exist");
  struct Entry {
    RunRecord record;
    std::optional<SweepResult> sweep;
  };
  std::vector<Entry> entries;
  for (const auto& item : fs::recursive_directory_iterator(root)) {
    if (!item.is_regular_file() || item.path().filename() != "metrics.jsonl")
      continue;
    Entry e;
    e.record = load_run_record(item.path().string());
    const fs::path sweep_path = item.path().parent_path() / "sweep.json";
    if (fs::exists(sweep_path))
      e.sweep = load_sweep_json(sweep_path.string());
    entries.push_back(std::move(e));
  }

  std::map<std::pair<std::string, double>, std::vector<const Entry*>> groups;
  for (const Entry& e : entries)
    groups[{model_tag(e.record.spec), e.record.config.alpha}].push_back(&e);

  std::vector<ReportGroup> out;
  for (const auto& [key, members] : groups) {
    ReportGroup g;
    g.model = key.first;
    g.alpha = key.second;
    g.runs = static_cast<int>(members.size());
    std::vector<double> best_vals, peaks, peak_iters;
    for (const Entry* e : members) {
      if (!e->record.converged) continue;  // convergence filter
      ++g.converged;
      best_vals.push_back(e->record.best_val_acc);
      if (e->sweep) {
        peaks.push_back(e->sweep->peak_accuracy);
        peak_iters.push_back(e->sweep->peak_iteration);
      }
    }
    g.mean_best_val = mean_of(best_vals);
    g.mean_peak = mean_of(peaks);
    g.std_peak = std_of(peaks);
    g.mean_peak_iteration = mean_of(peak_iters);
    out.push_back(g);
  }
  return out;
}

void write_report(const std::vector<ReportGroup>& groups,
                  const std::string& path) {
  json j;
  j["format_version"] = kArtifactFormatVersion;
  json arr = json::array();
  for (const ReportGroup& g : groups) {
    json r;
    r["model"] = g.model;
    r["alpha"] = g.alpha;
    r["runs"] = g.runs;
    r["converged"] = g.converged;
    r["mean_best_val"] = g.mean_best_val;
    r["mean_peak"] = g.mean_peak;
    r["std_peak"] = g.std_peak;
    r["mean_peak_iteration"] = g.mean_peak_iteration;
    arr.push_back(r);
  }
  j["groups"] = arr;
  open_out(path) << j.dump(2) << "\n";
}

std::string format_report_table(const std::vector<ReportGroup>& groups) {
  std::ostringstream os;
  os << "model       alpha   runs  conv  best_val   peak_acc (+- std)   peak_iter\n";
  for (const ReportGroup& g : groups) {
    char line[160];
    std::snprintf(line, sizeof(line),
                  "%-10s %6.3f  %5d %5d  %8.4f   %8.4f +- %.4f   %9.1f\n",
                  g.model.c_str(), g.alpha, g.runs, g.converged, g.mean_best_val,
                  g.mean_peak, g.std_peak, g.mean_peak_iteration);
    os << line;
  }
  return os.str();
}

}  // namespace dtlab
