#pragma once

#include <cstdio>
#include <fstream>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "treebench/errors.hpp"
#include "treebench/harness/config.hpp"

namespace treebench::harness {

struct BatchMetric {
  std::size_t epoch = 0;  // 1-based
  std::size_t batch = 0;  // 1-based within the epoch
  double accuracy = 0;
  double loss = 0;
  bool operator==(const BatchMetric&) const = default;
};

struct RunRecord {
  KeyValues config;  // resolved TrainConfig
  std::string run_id, model, dataset_id, block;
  std::vector<BatchMetric> batches;
  std::vector<double> valid_accuracy;  // per epoch
  std::vector<double> valid_f1;        // per epoch; structure-inducing models only
  std::size_t epochs_run = 0;
  std::size_t best_epoch = 0;
  bool stopped_early = false;
  double test_accuracy = 0;
  std::optional<double> test_f1;
  double wall_minutes = 0;

  nlohmann::json to_json(bool include_timing = true) const {
    nlohmann::json j;
    j["config"] = config;
    j["run_id"] = run_id;
    j["model"] = model;
    j["dataset_id"] = dataset_id;
    j["block"] = block;
    auto& b = j["batches"] = nlohmann::json::array();
    for (const auto& m : batches) b.push_back({m.epoch, m.batch, m.accuracy, m.loss});
    j["valid_accuracy"] = valid_accuracy;
    j["valid_f1"] = valid_f1;
    j["epochs_run"] = epochs_run;
    j["best_epoch"] = best_epoch;
    j["stopped_early"] = stopped_early;
    j["test_accuracy"] = test_accuracy;
    j["test_f1"] = test_f1 ? nlohmann::json(*test_f1) : nlohmann::json(nullptr);
    if (include_timing) j["wall_minutes"] = wall_minutes;
    return j;
  }

  static RunRecord from_json(const nlohmann::json& j) {
    RunRecord r;
    try {
      r.config = j.at("config").get<KeyValues>();
      r.run_id = j.at("run_id").get<std::string>();
      r.model = j.at("model").get<std::string>();
      r.dataset_id = j.at("dataset_id").get<std::string>();
      r.block = j.value("block", std::string());
      for (const auto& m : j.at("batches"))
        r.batches.push_back({m.at(0).get<std::size_t>(), m.at(1).get<std::size_t>(), m.at(2).get<double>(),
                             m.at(3).get<double>()});
      r.valid_accuracy = j.at("valid_accuracy").get<std::vector<double>>();
      r.valid_f1 = j.at("valid_f1").get<std::vector<double>>();
      r.epochs_run = j.at("epochs_run").get<std::size_t>();
      r.best_epoch = j.at("best_epoch").get<std::size_t>();
      r.stopped_early = j.at("stopped_early").get<bool>();
      r.test_accuracy = j.at("test_accuracy").get<double>();
      if (!j.at("test_f1").is_null()) r.test_f1 = j.at("test_f1").get<double>();
      r.wall_minutes = j.value("wall_minutes", 0.0);
    } catch (const nlohmann::json::exception& e) {
      throw ContractError(std::string("malformed run record: ") + e.what());
    }
    return r;
  }

  // Equality of everything except wall-clock time.
  bool same_results(const RunRecord& o) const { return to_json(false) == o.to_json(false); }
};

inline void save_record(const std::string& path, const RunRecord& r) {
  std::ofstream out(path);
  if (!out) throw ContractError("cannot write " + path);
  out << r.to_json().dump(2) << '\n';
}

inline RunRecord load_record(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ContractError("cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ContractError(path + ": " + e.what());
  }
  return RunRecord::from_json(j);
}

inline constexpr const char* kMetricsHeader = "run_id,phase,epoch,batch,metric,value";

// One row per training batch (accuracy), per epoch (validation accuracy and,
// for structure-inducing models, parsing_f1), plus the test result.
inline void write_metrics_csv(std::ostream& out, std::span<const RunRecord> records, bool header = true) {
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  if (header) out << kMetricsHeader << '\n';
  for (const auto& r : records) {
    for (const auto& b : r.batches)
      out << r.run_id << ",train," << b.epoch << ',' << b.batch << ",accuracy," << num(b.accuracy) << '\n';
    for (std::size_t e = 0; e < r.valid_accuracy.size(); ++e)
      out << r.run_id << ",valid," << e + 1 << ",,accuracy," << num(r.valid_accuracy[e]) << '\n';
    for (std::size_t e = 0; e < r.valid_f1.size(); ++e)
      out << r.run_id << ",valid," << e + 1 << ",,parsing_f1," << num(r.valid_f1[e]) << '\n';
    out << r.run_id << ",test," << r.best_epoch << ",,accuracy," << num(r.test_accuracy) << '\n';
    if (r.test_f1) out << r.run_id << ",test," << r.best_epoch << ",,parsing_f1," << num(*r.test_f1) << '\n';
  }
}

}  // namespace treebench::harness
