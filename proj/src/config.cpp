#include "dtlab/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace dtlab {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  size_t b = s.find_last_not_of(" \t\r");
  return a == std::string::npos ? "" : s.substr(a, b - a + 1);
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

int64_t parse_int(const std::string& key, const std::string& v) {
  int64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    fail("config: key '" + key + "' has non-integer value '" + v + "'");
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    double out = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    fail("config: key '" + key + "' has non-numeric value '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  fail("config: key '" + key + "' has non-boolean value '" + v + "'");
}

std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

KvConfig load_kv_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) fail("config: cannot open " + path);
  KvConfig kv;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      fail("config: " + path + ":" + std::to_string(lineno) +
           ": expected key=value, got '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    if (key.empty())
      fail("config: " + path + ":" + std::to_string(lineno) + ": empty key");
    kv[key] = trim(line.substr(eq + 1));
  }
  return kv;
}

void apply_override(KvConfig& kv, const std::string& assignment) {
  const size_t eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    fail("config: override '" + assignment + "' is not key=value");
  kv[trim(assignment.substr(0, eq))] = trim(assignment.substr(eq + 1));
}

std::string canonical_text(const KvConfig& kv) {
  std::string out;
  for (const auto& [k, v] : kv) {
    out += k;
    out += '=';
    out += v;
    out += '\n';
  }
  return out;
}

void write_kv_file(const KvConfig& kv, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) fail("config: cannot write " + path);
  f << canonical_text(kv);
}

uint64_t config_hash(const KvConfig& kv) {
  const std::string text = canonical_text(kv);
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hash_hex(uint64_t hash) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<size_t>(i)] = digits[hash & 0xf];
    hash >>= 4;
  }
  return out;
}

void check_known_keys(const KvConfig& kv, const std::set<std::string>& allowed,
                      const std::string& context) {
  for (const auto& [k, _] : kv) {
    if (!allowed.count(k))
      fail("config: unknown key '" + k + "' for " + context);
  }
}

const std::set<std::string>& model_keys() {
  static const std::set<std::string> keys{
      "task", "width", "recall", "feed_forward", "m", "head_channels"};
  return keys;
}

const std::set<std::string>& train_keys() {
  static const std::set<std::string> keys{
      "m",          "alpha",        "optimizer",    "lr",
      "decay_epochs", "decay_factor", "warmup",       "epochs",
      "clip_norm",  "weight_decay", "batch_size",   "seed",
      "force_n_zero", "val_fraction", "blas_threads", "runtime_penalty"};
  return keys;
}

int64_t kv_int(const KvConfig& kv, const std::string& key, int64_t fallback) {
  auto it = kv.find(key);
  return it == kv.end() ? fallback : parse_int(key, it->second);
}

double kv_double(const KvConfig& kv, const std::string& key, double fallback) {
  auto it = kv.find(key);
  return it == kv.end() ? fallback : parse_double(key, it->second);
}

bool kv_bool(const KvConfig& kv, const std::string& key, bool fallback) {
  auto it = kv.find(key);
  return it == kv.end() ? fallback : parse_bool(key, it->second);
}

std::vector<int> kv_int_list(const KvConfig& kv, const std::string& key) {
  std::vector<int> out;
  auto it = kv.find(key);
  if (it == kv.end()) return out;
  for (const std::string& item : split_csv(it->second))
    out.push_back(static_cast<int>(parse_int(key, item)));
  return out;
}

std::vector<double> kv_double_list(const KvConfig& kv, const std::string& key) {
  std::vector<double> out;
  auto it = kv.find(key);
  if (it == kv.end()) return out;
  for (const std::string& item : split_csv(it->second))
    out.push_back(parse_double(key, item));
  return out;
}

ModelSpec model_spec_from_kv(const KvConfig& kv) {
  ModelSpec spec;
  auto it = kv.find("task");
  spec.task = task_from_name(it == kv.end() ? "prefix" : it->second);
  spec.width = static_cast<int>(kv_int(kv, "width", 64));
  spec.recall = kv_bool(kv, "recall", false);
  spec.feed_forward = kv_bool(kv, "feed_forward", false);
  spec.max_iters = static_cast<int>(kv_int(kv, "m", 30));
  std::vector<int> head = kv_int_list(kv, "head_channels");
  spec.head_channels =
      head.empty() ? ModelSpec::default_head(spec.task, spec.width) : head;
  spec.validate();
  return spec;
}

TrainConfig train_config_from_kv(const KvConfig& kv) {
  TrainConfig c;
  c.m = static_cast<int>(kv_int(kv, "m", c.m));
  c.alpha = static_cast<float>(kv_double(kv, "alpha", c.alpha));
  auto it = kv.find("optimizer");
  if (it != kv.end()) {
    if (it->second == "adam") {
      c.optimizer = OptimKind::adam;
    } else if (it->second == "sgd" || it->second == "sgd_momentum") {
      c.optimizer = OptimKind::sgd_momentum;
    } else {
      fail("config: unknown optimizer '" + it->second + "'");
    }
  }
  c.lr = static_cast<float>(kv_double(kv, "lr", c.lr));
  c.decay_epochs = kv_int_list(kv, "decay_epochs");
  c.decay_factor = static_cast<float>(kv_double(kv, "decay_factor", 1.0));
  c.warmup_epochs = static_cast<int>(kv_int(kv, "warmup", 0));
  c.epochs = static_cast<int>(kv_int(kv, "epochs", c.epochs));
  if (kv.count("clip_norm"))
    c.clip_norm = static_cast<float>(kv_double(kv, "clip_norm", 0.0));
  c.weight_decay = static_cast<float>(kv_double(kv, "weight_decay", c.weight_decay));
  c.batch_size = static_cast<int>(kv_int(kv, "batch_size", c.batch_size));
  c.seed = static_cast<uint64_t>(kv_int(kv, "seed", 1));
  c.force_n_zero = kv_bool(kv, "force_n_zero", false);
  c.val_fraction = static_cast<float>(kv_double(kv, "val_fraction", c.val_fraction));
  c.blas_threads = static_cast<int>(kv_int(kv, "blas_threads", 1));
  c.runtime_penalty = kv_bool(kv, "runtime_penalty", false);
  c.validate();
  return c;
}

KvConfig kv_from_model_spec(const ModelSpec& spec) {
  KvConfig kv;
  kv["task"] = task_name(spec.task);
  kv["width"] = std::to_string(spec.width);
  kv["recall"] = spec.recall ? "true" : "false";
  kv["feed_forward"] = spec.feed_forward ? "true" : "false";
  kv["m"] = std::to_string(spec.max_iters);
  std::string head;
  for (size_t i = 0; i < spec.head_channels.size(); ++i) {
    if (i) head += ",";
    head += std::to_string(spec.head_channels[i]);
  }
  kv["head_channels"] = head;
  return kv;
}

KvConfig kv_from_train_config(const TrainConfig& c) {
  KvConfig kv;
  kv["m"] = std::to_string(c.m);
  kv["alpha"] = format_double(c.alpha);
  kv["optimizer"] = c.optimizer == OptimKind::adam ? "adam" : "sgd_momentum";
  kv["lr"] = format_double(c.lr);
  std::string decay;
  for (size_t i = 0; i < c.decay_epochs.size(); ++i) {
    if (i) decay += ",";
    decay += std::to_string(c.decay_epochs[i]);
  }
  kv["decay_epochs"] = decay;
  kv["decay_factor"] = format_double(c.decay_factor);
  kv["warmup"] = std::to_string(c.warmup_epochs);
  kv["epochs"] = std::to_string(c.epochs);
  if (c.clip_norm) kv["clip_norm"] = format_double(*c.clip_norm);
  kv["weight_decay"] = format_double(c.weight_decay);
  kv["batch_size"] = std::to_string(c.batch_size);
  kv["seed"] = std::to_string(c.seed);
  kv["force_n_zero"] = c.force_n_zero ? "true" : "false";
  kv["val_fraction"] = format_double(c.val_fraction);
  kv["blas_threads"] = std::to_string(c.blas_threads);
  kv["runtime_penalty"] = c.runtime_penalty ? "true" : "false";
  return kv;
}

}  // namespace dtlab
