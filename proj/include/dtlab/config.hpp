#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "dtlab/model.hpp"
#include "dtlab/training.hpp"

namespace dtlab {

// Flat key=value configuration: '#' comments, blank lines ignored, later
// assignments win. CLI flags are applied on top the same way.
using KvConfig = std::map<std::string, std::string>;

KvConfig load_kv_file(const std::string& path);
void apply_override(KvConfig& kv, const std::string& assignment);  // "key=value"
std::string canonical_text(const KvConfig& kv);
void write_kv_file(const KvConfig& kv, const std::string& path);

// FNV-1a over the canonical text; embedded in every artifact a run produces.
uint64_t config_hash(const KvConfig& kv);
std::string hash_hex(uint64_t hash);

void check_known_keys(const KvConfig& kv, const std::set<std::string>& allowed,
                      const std::string& context);

// Key sets understood by the model/training parsers.
const std::set<std::string>& model_keys();
const std::set<std::string>& train_keys();

ModelSpec model_spec_from_kv(const KvConfig& kv);
TrainConfig train_config_from_kv(const KvConfig& kv);
KvConfig kv_from_model_spec(const ModelSpec& spec);
KvConfig kv_from_train_config(const TrainConfig& config);

// Typed accessors with diagnostics naming the key.
int64_t kv_int(const KvConfig& kv, const std::string& key, int64_t fallback);
double kv_double(const KvConfig& kv, const std::string& key, double fallback);
bool kv_bool(const KvConfig& kv, const std::string& key, bool fallback);
std::vector<int> kv_int_list(const KvConfig& kv, const std::string& key);
std::vector<double> kv_double_list(const KvConfig& kv, const std::string& key);

}  // namespace dtlab
