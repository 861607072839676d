#pragma once

#include <algorithm>
#include <chrono>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "treebench/errors.hpp"
#include "treebench/harness/config.hpp"
#include "treebench/harness/record.hpp"
#include "treebench/harness/stats.hpp"
#include "treebench/latent_parser.hpp"
#include "treebench/listops.hpp"
#include "treebench/models.hpp"
#include "treebench/num/optimizer.hpp"
#include "treebench/ordered_memory.hpp"

namespace treebench::harness {

using listops::Dataset;

struct Splits {
  Dataset train, valid, test;
};

inline void check_vocabulary(const Dataset& d, const char* split) {
  for (const auto& e : d)
    for (int t : e.tokens)
      if (t < 0 || t >= listops::kVocabSize)
        throw ContractError(std::string(split) + ": token id " + std::to_string(t) + " outside vocabulary");
}

// Training data (optionally the first `subset` examples), a validation split
// (the file, or else the last 5% of training data) and the test split.
// Generated test examples continue the training stream's index sequence.
inline Splits load_splits(const TrainConfig& cfg) {
  Splits s;
  if (!cfg.train_path.empty()) {
    s.train = listops::read_dataset(cfg.train_path);
    s.test = listops::read_dataset(cfg.test_path);
    if (!cfg.valid_path.empty()) s.valid = listops::read_dataset(cfg.valid_path);
  } else {
    s.train = listops::generate(cfg.gen);
    s.test.reserve(cfg.test_size);
    for (std::size_t i = 0; i < cfg.test_size; ++i) s.test.push_back(listops::generate_one(cfg.gen, cfg.gen.size + i));
  }
  if (cfg.subset) s.train = listops::subset(s.train, cfg.subset);
  if (s.valid.empty()) {
    const std::size_t hold = std::max<std::size_t>(1, s.train.size() / 20);
    if (s.train.size() < 2) throw ContractError("training set too small to hold out validation data");
    s.valid.assign(s.train.end() - static_cast<std::ptrdiff_t>(hold), s.train.end());
    s.train.resize(s.train.size() - hold);
  }
  check_vocabulary(s.train, "train");
  check_vocabulary(s.valid, "valid");
  check_vocabulary(s.test, "test");
  if (s.test.empty()) throw ContractError("test split is empty");
  return s;
}

inline std::unique_ptr<models::Model> make_model(const TrainConfig& cfg) {
  cfg.validate();
  if (cfg.model == "ordered_memory") {
    ordered_memory::OMConfig c;
    c.slots = cfg.om_slots;
    c.hidden_dim = cfg.hidden_dim;
    c.embed_dim = cfg.embed_dim;
    c.temperature = cfg.om_temperature;
    c.dropout = cfg.dropout;
    c.seed = cfg.seed;
    return std::make_unique<ordered_memory::OrderedMemory>(c);
  }
  if (cfg.model == "latent_parser") {
    latent_parser::LatentConfig c;
    c.embed_dim = cfg.embed_dim;
    c.hidden_dim = cfg.hidden_dim;
    c.dropout = cfg.dropout;
    c.seed = cfg.seed;
    c.rl.entropy_coef = cfg.rl_entropy;
    c.rl.self_critical = cfg.rl_self_critical;
    c.rl.ppo = cfg.rl_ppo;
    c.rl.clip = cfg.rl_clip;
    c.rl.ppo_epochs = cfg.rl_ppo_epochs;
    return std::make_unique<latent_parser::LatentParser>(c);
  }
  models::ModelConfig c;
  c.embed_dim = cfg.embed_dim;
  c.hidden_dim = cfg.hidden_dim;
  c.dropout = cfg.dropout;
  c.cell = models::parse_cell_kind(cfg.model);
  c.seed = cfg.seed;
  if (c.cell == models::CellKind::kLstm || c.cell == models::CellKind::kGru)
    return std::make_unique<models::SequenceModel>(c);
  return std::make_unique<models::GoldTreeModel>(c);
}

inline bool induces_structure(const std::string& model) {
  return model == "ordered_memory" || model == "latent_parser";
}

// Fraction of argmax predictions equal to the label. Never mutates the model.
inline double evaluate(models::Model& m, const Dataset& d) {
  if (d.empty()) throw ContractError("evaluate: empty dataset");
  std::size_t correct = 0;
  for (const auto& e : d) correct += m.predict(e) == e.label;
  return static_cast<double>(correct) / static_cast<double>(d.size());
}

// Mean parsing F1 of induced trees against the token-level gold trees, or
// nullopt for models that do not induce structure.
inline std::optional<double> mean_parsing_f1(models::Model& m, const Dataset& d) {
  if (d.empty()) throw ContractError("parsing F1: empty dataset");
  double total = 0;
  for (const auto& e : d) {
    auto t = m.induced_tree(e);
    if (!t) return std::nullopt;
    total += parsing_f1(*t, listops::token_tree(e.gold_tree));
  }
  return total / static_cast<double>(d.size());
}

struct TrainResult {
  RunRecord record;
  std::unique_ptr<models::Model> model;  // restored to the best-validation epoch
};

// Called after every epoch with the record so far; used for progress output.
using EpochCallback = std::function<void(const RunRecord&)>;

inline TrainResult train(const TrainConfig& cfg, const Splits& data, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (data.train.empty() || data.valid.empty() || data.test.empty())
    throw ContractError("train: every split must be non-empty");
  const auto start = std::chrono::steady_clock::now();
  TrainResult out;
  out.model = make_model(cfg);
  models::Model& m = *out.model;
  RunRecord& rec = out.record;
  rec.config = cfg.to_kv();
  rec.run_id = cfg.run_id;
  rec.model = cfg.model;
  rec.dataset_id = cfg.resolved_dataset_id();

  auto groups = m.param_groups();
  std::vector<std::unique_ptr<num::Optimizer>> opts;
  std::vector<num::Optimizer*> opt_ptrs;
  for (auto* g : groups) {
    opts.push_back(std::make_unique<num::Optimizer>(*g, cfg.optimizer_config()));
    opt_ptrs.push_back(opts.back().get());
  }
  std::mt19937_64 shuffle_rng(listops::mix_seed(cfg.seed, 1));
  std::mt19937_64 noise_rng(listops::mix_seed(cfg.seed, 2));
  models::StepContext sc{&noise_rng, cfg.clip_norm};
  const bool structured = induces_structure(cfg.model);

  std::vector<std::size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<std::vector<num::Tensor>> best;
  double best_acc = -1;
  std::vector<const listops::Example*> batch;
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    std::size_t b = 0;
    for (std::size_t lo = 0; lo < order.size(); lo += cfg.batch_size) {
      batch.clear();
      for (std::size_t k = lo; k < std::min(order.size(), lo + cfg.batch_size); ++k)
        batch.push_back(&data.train[order[k]]);
      const auto r = m.train_batch(batch, opt_ptrs, sc);
      rec.batches.push_back({epoch, ++b, static_cast<double>(r.correct) / static_cast<double>(r.count), r.loss});
    }
    const double acc = evaluate(m, data.valid);
    rec.valid_accuracy.push_back(acc);
    if (structured) {
      if (auto f1 = mean_parsing_f1(m, data.valid)) rec.valid_f1.push_back(*f1);
    }
    rec.epochs_run = epoch;
    if (acc > best_acc) {
      best_acc = acc;
      rec.best_epoch = epoch;
      best.clear();
      for (auto* g : groups) best.push_back(g->snapshot());
    }
    if (on_epoch) on_epoch(rec);
    if (cfg.early_stop && early_stop_check(rec.valid_accuracy)) {
      rec.stopped_early = true;
      break;
    }
  }
  for (std::size_t g = 0; g < groups.size(); ++g) groups[g]->restore(best[g]);
  rec.test_accuracy = evaluate(m, data.test);
  if (structured) rec.test_f1 = mean_parsing_f1(m, data.test);
  rec.wall_minutes = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count() / 60.0;
  return out;
}

inline TrainResult train(const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  return train(cfg, load_splits(cfg), on_epoch);
}

// Checkpoint = resolved config as metadata + every parameter group.
inline void save_model(const std::string& path, const TrainConfig& cfg, models::Model& m) {
  models::save_checkpoint(path, cfg.to_kv(), m.param_groups());
}

inline std::pair<TrainConfig, std::unique_ptr<models::Model>> load_model(const std::string& path) {
  auto meta = models::read_checkpoint_meta(path);
  // Empty metadata values (e.g. unset paths) are written as bare keys.
  TrainConfig cfg = TrainConfig::from_kv(meta);
  auto m = make_model(cfg);
  models::load_checkpoint(path, m->param_groups());
  return {cfg, std::move(m)};
}

}  // namespace treebench::harness
