#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "treebench/errors.hpp"
#include "treebench/harness/config.hpp"
#include "treebench/harness/record.hpp"
#include "treebench/harness/stats.hpp"
#include "treebench/harness/train.hpp"

namespace treebench::harness {

inline const std::vector<std::string>& sweep_axes() {
  static const std::vector<std::string> a{"optimizer", "batch_size", "subset_size", "dataset", "seed"};
  return a;
}

// Config key an axis value is written to. The dataset axis takes operator
// set ids (d20s, d5c) for generated data.
inline std::string axis_key(const std::string& axis) {
  if (axis == "optimizer") return "optim.kind";
  if (axis == "batch_size") return "train.batch_size";
  if (axis == "subset_size") return "data.subset";
  if (axis == "dataset") return "gen.ops";
  if (axis == "seed") return "train.seed";
  throw ContractError("unknown sweep axis: " + axis);
}

struct SweepGroup {
  std::string value;
  std::vector<double> accuracies;
  double mean = 0, stddev = 0;
};

struct SweepResult {
  std::string axis;
  std::vector<RunRecord> records;
  std::vector<SweepGroup> groups;  // one per axis value, in the given order
  std::optional<AnovaResult> anova;
};

// One configuration per axis value, each repeated `repeats` times with seeds
// base.seed, base.seed + 1, ... (the seed axis ignores repeats). Optimizer
// values reset the learning rate to the optimizer's default.
inline std::vector<TrainConfig> sweep_configs(const TrainConfig& base, const std::string& axis,
                                              const std::vector<std::string>& values, std::size_t repeats = 1) {
  const std::string key = axis_key(axis);
  if (values.empty()) throw ContractError("sweep: no axis values");
  if (repeats < 1) throw ContractError("sweep: repeats must be >= 1");
  std::vector<TrainConfig> out;
  const std::size_t n = axis == "seed" ? 1 : repeats;
  for (const auto& v : values) {
    for (std::size_t r = 0; r < n; ++r) {
      TrainConfig c = base;
      if (axis == "optimizer") c.lr = 0;
      c.apply({{key, v}});
      if (axis != "seed") c.seed = base.seed + r;
      c.run_id = base.run_id + "-" + axis + "=" + v + (n > 1 ? "-r" + std::to_string(r) : "");
      c.dataset_id.clear();
      c.validate();
      out.push_back(std::move(c));
    }
  }
  return out;
}

inline SweepResult run_sweep(const TrainConfig& base, const std::string& axis, const std::vector<std::string>& values,
                             std::size_t repeats = 1,
                             const std::function<void(const RunRecord&)>& on_run = {}) {
  SweepResult res;
  res.axis = axis;
  const auto configs = sweep_configs(base, axis, values, repeats);
  const std::size_t per_value = axis == "seed" ? 1 : repeats;
  std::map<std::string, Splits> cache;  // datasets shared across runs with equal data settings
  for (const auto& c : configs) {
    auto kv = c.to_kv();
    std::string data_key;
    for (const auto& [k, v] : kv)
      if (k.rfind("data.", 0) == 0 || k.rfind("gen.", 0) == 0) data_key += k + "=" + v + ";";
    auto it = cache.find(data_key);
    if (it == cache.end()) it = cache.emplace(data_key, load_splits(c)).first;
    auto rec = train(c, it->second).record;
    rec.block = axis;
    if (on_run) on_run(rec);
    res.records.push_back(std::move(rec));
  }
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (axis == "seed" && i > 0) break;
    SweepGroup g;
    g.value = axis == "seed" ? "all" : values[i];
    const std::size_t first = axis == "seed" ? 0 : i * per_value;
    const std::size_t count = axis == "seed" ? res.records.size() : per_value;
    for (std::size_t k = first; k < first + count; ++k) g.accuracies.push_back(res.records[k].test_accuracy);
    g.mean = mean(g.accuracies);
    g.stddev = stddev(g.accuracies);
    res.groups.push_back(std::move(g));
  }
  if (res.groups.size() >= 2 && per_value >= 2) {
    std::vector<std::vector<double>> groups;
    for (const auto& g : res.groups) groups.push_back(g.accuracies);
    res.anova = anova_oneway(groups);
  }
  return res;
}

namespace detail {
inline std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}
}  // namespace detail

// Markdown table grouped into blocks (RunRecord::block, first-appearance
// order). The best accuracy of each block is bolded; ties bold every match.
inline std::string write_report(std::span<const RunRecord> records) {
  if (records.empty()) throw ContractError("write_report: no records");
  std::vector<std::string> blocks;
  for (const auto& r : records)
    if (std::find(blocks.begin(), blocks.end(), r.block) == blocks.end()) blocks.push_back(r.block);
  std::ostringstream o;
  o << "| Block | Run | Model | Dataset | Accuracy (%) | Epochs | Time (min) |\n";
  o << "|---|---|---|---|---:|---:|---:|\n";
  for (const auto& b : blocks) {
    std::string best;
    double best_v = -1;
    for (const auto& r : records) {
      if (r.block != b) continue;
      const std::string shown = detail::fixed(100 * r.test_accuracy, 2);
      if (std::stod(shown) > best_v) {
        best_v = std::stod(shown);
        best = shown;
      }
    }
    for (const auto& r : records) {
      if (r.block != b) continue;
      const std::string shown = detail::fixed(100 * r.test_accuracy, 2);
      o << "| " << (b.empty() ? "-" : b) << " | " << r.run_id << " | " << r.model << " | " << r.dataset_id << " | "
        << (shown == best ? "**" + shown + "**" : shown) << " | " << r.epochs_run << " | "
        << detail::fixed(r.wall_minutes, 2) << " |\n";
    }
  }
  return o.str();
}

// Per-value mean/std table plus the ANOVA line when repeats allow it.
inline std::string write_sweep_summary(const SweepResult& s) {
  std::ostringstream o;
  o << "| " << s.axis << " | n | Mean accuracy (%) | Std (%) |\n|---|---:|---:|---:|\n";
  for (const auto& g : s.groups)
    o << "| " << g.value << " | " << g.accuracies.size() << " | " << detail::fixed(100 * g.mean, 2) << " | "
      << detail::fixed(100 * g.stddev, 2) << " |\n";
  if (s.anova)
    o << "\nOne-way ANOVA: F(" << s.anova->df_between << ", " << s.anova->df_within
      << ") = " << detail::fixed(s.anova->f, 4) << ", p = " << detail::fixed(s.anova->p, 4) << "\n";
  return o.str();
}

}  // namespace treebench::harness
