#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "treebench/errors.hpp"
#include "treebench/listops.hpp"
#include "treebench/num/optimizer.hpp"

namespace treebench::harness {

using KeyValues = std::map<std::string, std::string>;

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

// Flat `key = value` lines; `#` starts a comment; blank lines ignored.
inline KeyValues parse_config_text(std::string_view text) {
  KeyValues kv;
  std::size_t line_no = 0;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ContractError("config line " + std::to_string(line_no) + ": expected key = value");
    std::string key = trim(std::string_view(t).substr(0, eq));
    if (key.empty()) throw ContractError("config line " + std::to_string(line_no) + ": empty key");
    kv[key] = trim(std::string_view(t).substr(eq + 1));
  }
  return kv;
}

inline KeyValues read_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ContractError("cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

inline std::vector<std::string> split_list(std::string_view s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = s.find(',', start);
    std::string item = trim(s.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
    if (!item.empty()) out.push_back(std::move(item));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

namespace detail {

inline std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  unsigned long long x = 0;
  try {
    if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
    x = std::stoull(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos == 0 || pos != v.size()) throw ContractError("config " + key + ": expected a non-negative integer, got '" + v + "'");
  return x;
}

inline double to_double(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  double x = 0;
  try {
    x = std::stod(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos == 0 || pos != v.size()) throw ContractError("config " + key + ": expected a number, got '" + v + "'");
  return x;
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw ContractError("config " + key + ": expected a boolean, got '" + v + "'");
}

inline std::string fmt(double v) {
  std::ostringstream o;
  o.precision(17);
  o << v;
  return o.str();
}

}  // namespace detail

inline const std::vector<std::string>& model_kinds() {
  static const std::vector<std::string> k{"lstm", "gru", "tree_lstm", "tree_gru", "ordered_memory", "latent_parser"};
  return k;
}

struct TrainConfig {
  std::string run_id = "run";
  std::string model = "tree_lstm";
  std::size_t embed_dim = 32;
  std::size_t hidden_dim = 32;
  double dropout = 0.0;
  std::size_t om_slots = 5;
  double om_temperature = 1.0;
  double rl_entropy = 0.0;
  bool rl_self_critical = true;
  bool rl_ppo = false;
  double rl_clip = 0.2;
  std::size_t rl_ppo_epochs = 4;
  num::OptimizerKind optimizer = num::OptimizerKind::kAdadelta;
  double lr = 0.0;  // 0 selects the optimizer's conventional rate
  std::size_t batch_size = 64;
  std::size_t max_epochs = 10;
  bool early_stop = false;
  double clip_norm = 5.0;
  std::uint64_t seed = 0;
  // Files take precedence over generation when data.train is set.
  std::string train_path, valid_path, test_path;
  std::size_t subset = 0;  // 0 keeps the full training file
  std::string dataset_id;
  listops::GenConfig gen;
  std::size_t test_size = 2000;

  TrainConfig() { gen.size = 20000; }

  num::OptimizerConfig optimizer_config() const {
    auto c = num::OptimizerConfig::defaults(optimizer);
    if (lr > 0) c.lr = lr;
    return c;
  }

  std::string resolved_dataset_id() const {
    if (!dataset_id.empty()) return dataset_id;
    if (!train_path.empty()) {
      auto slash = train_path.find_last_of('/');
      std::string base = slash == std::string::npos ? train_path : train_path.substr(slash + 1);
      return subset ? base + "@" + std::to_string(subset) : base;
    }
    std::string id = std::string(listops::to_string(gen.ops)) + "-d" + std::to_string(gen.max_depth) + "-n" +
                     std::to_string(gen.size);
    return subset ? id + "@" + std::to_string(subset) : id;
  }

  void validate() const {
    bool known = false;
    for (const auto& k : model_kinds()) known = known || k == model;
    if (!known) throw ContractError("unknown model kind: " + model);
    if (batch_size < 1) throw ContractError("train.batch_size must be >= 1");
    if (max_epochs < 1) throw ContractError("train.max_epochs must be >= 1");
    if (lr < 0) throw ContractError("optim.lr must be positive");
    if (embed_dim < 1 || hidden_dim < 1) throw ContractError("model dimensions must be >= 1");
    if (!(dropout >= 0 && dropout < 1)) throw ContractError("model.dropout must lie in [0,1)");
    if (om_slots < 2) throw ContractError("om.slots must be >= 2");
    if (!(om_temperature > 0)) throw ContractError("om.temperature must be positive");
    if (!(rl_entropy >= 0)) throw ContractError("rl.entropy must be >= 0");
    if (!(rl_clip > 0 && rl_clip < 1)) throw ContractError("rl.clip must lie in (0,1)");
    if (train_path.empty()) {
      gen.validate();
      if (gen.size < 1) throw ContractError("gen.train_size must be >= 1");
      if (test_size < 1) throw ContractError("gen.test_size must be >= 1");
    } else if (test_path.empty()) {
      throw ContractError("data.test is required when data.train is set");
    }
  }

  KeyValues to_kv() const {
    using detail::fmt;
    return {
        {"run.id", run_id},
        {"model.kind", model},
        {"model.embed_dim", std::to_string(embed_dim)},
        {"model.hidden_dim", std::to_string(hidden_dim)},
        {"model.dropout", fmt(dropout)},
        {"om.slots", std::to_string(om_slots)},
        {"om.temperature", fmt(om_temperature)},
        {"rl.entropy", fmt(rl_entropy)},
        {"rl.self_critical", rl_self_critical ? "true" : "false"},
        {"rl.ppo", rl_ppo ? "true" : "false"},
        {"rl.clip", fmt(rl_clip)},
        {"rl.ppo_epochs", std::to_string(rl_ppo_epochs)},
        {"optim.kind", std::string(num::to_string(optimizer))},
        {"optim.lr", fmt(optimizer_config().lr)},
        {"train.batch_size", std::to_string(batch_size)},
        {"train.max_epochs", std::to_string(max_epochs)},
        {"train.early_stop", early_stop ? "true" : "false"},
        {"train.clip_norm", fmt(clip_norm)},
        {"train.seed", std::to_string(seed)},
        {"data.train", train_path},
        {"data.valid", valid_path},
        {"data.test", test_path},
        {"data.subset", std::to_string(subset)},
        {"data.id", resolved_dataset_id()},
        {"gen.ops", std::string(listops::to_string(gen.ops))},
        {"gen.max_depth", std::to_string(gen.max_depth)},
        {"gen.max_args", std::to_string(gen.max_args)},
        {"gen.branch_prob", fmt(gen.branch_prob)},
        {"gen.max_length", std::to_string(gen.max_length)},
        {"gen.train_size", std::to_string(gen.size)},
        {"gen.test_size", std::to_string(test_size)},
        {"gen.seed", std::to_string(gen.seed)},
    };
  }

  // Applies keys on top of the current values; unknown keys are an error.
  void apply(const KeyValues& kv) {
    using namespace detail;
    for (const auto& [k, v] : kv) {
      if (k == "run.id") run_id = v;
      else if (k == "model.kind") model = v;
      else if (k == "model.embed_dim") embed_dim = to_u64(k, v);
      else if (k == "model.hidden_dim") hidden_dim = to_u64(k, v);
      else if (k == "model.dropout") dropout = to_double(k, v);
      else if (k == "om.slots") om_slots = to_u64(k, v);
      else if (k == "om.temperature") om_temperature = to_double(k, v);
      else if (k == "rl.entropy") rl_entropy = to_double(k, v);
      else if (k == "rl.self_critical") rl_self_critical = to_bool(k, v);
      else if (k == "rl.ppo") rl_ppo = to_bool(k, v);
      else if (k == "rl.clip") rl_clip = to_double(k, v);
      else if (k == "rl.ppo_epochs") rl_ppo_epochs = to_u64(k, v);
      else if (k == "optim.kind") optimizer = num::parse_optimizer(v);
      else if (k == "optim.lr") lr = to_double(k, v);
      else if (k == "train.batch_size") batch_size = to_u64(k, v);
      else if (k == "train.max_epochs") max_epochs = to_u64(k, v);
      else if (k == "train.early_stop") early_stop = to_bool(k, v);
      else if (k == "train.clip_norm") clip_norm = to_double(k, v);
      else if (k == "train.seed") seed = to_u64(k, v);
      else if (k == "data.train") train_path = v;
      else if (k == "data.valid") valid_path = v;
      else if (k == "data.test") test_path = v;
      else if (k == "data.subset") subset = to_u64(k, v);
      else if (k == "data.id") dataset_id = v;
      else if (k == "gen.ops") gen.ops = listops::parse_operator_set(v);
      else if (k == "gen.max_depth") gen.max_depth = static_cast<int>(to_u64(k, v));
      else if (k == "gen.max_args") gen.max_args = static_cast<int>(to_u64(k, v));
      else if (k == "gen.branch_prob") gen.branch_prob = to_double(k, v);
      else if (k == "gen.max_length") gen.max_length = static_cast<int>(to_u64(k, v));
      else if (k == "gen.train_size") gen.size = to_u64(k, v);
      else if (k == "gen.test_size") test_size = to_u64(k, v);
      else if (k == "gen.seed") gen.seed = to_u64(k, v);
      else throw ContractError("unknown config key: " + k);
    }
  }

  static TrainConfig from_kv(const KeyValues& kv) {
    TrainConfig c;
    c.apply(kv);
    return c;
  }
};

}  // namespace treebench::harness
