// treebench: dataset generation, training, sweeps, evaluation and reports.
//
// Exit status: 0 success, 1 usage/config/input error, 2 runtime or numeric failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "treebench/harness/config.hpp"
#include "treebench/harness/record.hpp"
#include "treebench/harness/stats.hpp"
#include "treebench/harness/sweep.hpp"
#include "treebench/harness/train.hpp"

namespace fs = std::filesystem;
namespace hs = treebench::harness;
namespace lo = treebench::listops;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Flags that map one-to-one onto config keys. Each is registered as an option
// on the subcommands that accept a configuration.
const std::vector<std::pair<std::string, std::string>> kKeyFlags{
    {"--run-id", "run.id"},           {"--model", "model.kind"},         {"--embed-dim", "model.embed_dim"},
    {"--hidden-dim", "model.hidden_dim"}, {"--dropout", "model.dropout"}, {"--slots", "om.slots"},
    {"--temperature", "om.temperature"}, {"--entropy", "rl.entropy"},   {"--ppo", "rl.ppo"},
    {"--optimizer", "optim.kind"},    {"--lr", "optim.lr"},              {"--batch-size", "train.batch_size"},
    {"--epochs", "train.max_epochs"}, {"--early-stop", "train.early_stop"}, {"--clip-norm", "train.clip_norm"},
    {"--seed", "train.seed"},         {"--train", "data.train"},         {"--valid", "data.valid"},
    {"--test", "data.test"},          {"--subset", "data.subset"},       {"--ops", "gen.ops"},
    {"--max-depth", "gen.max_depth"}, {"--max-args", "gen.max_args"},   {"--max-length", "gen.max_length"},
    {"--branch-prob", "gen.branch_prob"}, {"--size", "gen.train_size"}, {"--test-size", "gen.test_size"},
    {"--gen-seed", "gen.seed"},
};

struct ConfigOptions {
  std::string file;
  std::vector<std::string> sets;
  std::map<std::string, std::string> flags;  // key -> value, filled by CLI11

  void attach(CLI::App* app) {
    app->add_option("-c,--config", file, "key = value config file")->check(CLI::ExistingFile);
    app->add_option("--set", sets, "override any config key (key=value), repeatable");
    for (const auto& [flag, key] : kKeyFlags) app->add_option(flag, flags[key], "sets " + key);
  }

  // File values, then named flags, then --set, each layer overriding the last.
  hs::KeyValues resolve() const {
    hs::KeyValues kv = file.empty() ? hs::KeyValues{} : hs::read_config_file(file);
    for (const auto& [k, v] : flags)
      if (!v.empty()) kv[k] = v;
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos || eq == 0) throw UsageError("--set expects key=value, got '" + s + "'");
      kv[hs::trim(s.substr(0, eq))] = hs::trim(s.substr(eq + 1));
    }
    return kv;
  }
};

// Removes and returns the keys under `prefix`, which the train config does not know.
hs::KeyValues take_prefixed(hs::KeyValues& kv, const std::string& prefix) {
  hs::KeyValues out;
  for (auto it = kv.begin(); it != kv.end();) {
    if (it->first.rfind(prefix, 0) == 0) {
      out.emplace(it->first.substr(prefix.size()), it->second);
      it = kv.erase(it);
    } else {
      ++it;
    }
  }
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw treebench::ContractError("cannot write " + path.string());
  out << text;
}

void write_csv(const fs::path& path, std::span<const hs::RunRecord> records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw treebench::ContractError("cannot write " + path.string());
  hs::write_metrics_csv(out, records);
}

void progress(const hs::RunRecord& r) {
  const std::size_t e = r.epochs_run;
  std::fprintf(stderr, "[%s] epoch %zu valid accuracy %.4f", r.run_id.c_str(), e, r.valid_accuracy.back());
  if (!r.valid_f1.empty()) std::fprintf(stderr, " parsing_f1 %.4f", r.valid_f1.back());
  std::fprintf(stderr, "\n");
}

lo::Dataset eval_data(const std::string& data, const hs::TrainConfig& cfg) {
  if (!data.empty()) return lo::read_dataset(data);
  return hs::load_splits(cfg).test;
}

int cmd_gen(const ConfigOptions& co, const std::string& out) {
  hs::TrainConfig cfg;
  cfg.apply(co.resolve());
  lo::write_dataset(out, lo::generate(cfg.gen));
  std::printf("wrote %zu examples to %s\n", cfg.gen.size, out.c_str());
  return 0;
}

int cmd_train(const ConfigOptions& co, const fs::path& out_dir) {
  auto cfg = hs::TrainConfig::from_kv(co.resolve());
  cfg.validate();
  auto res = hs::train(cfg, progress);
  fs::create_directories(out_dir);
  const auto stem = out_dir / cfg.run_id;
  hs::save_record(stem.string() + ".json", res.record);
  write_csv(stem.string() + ".metrics.csv", std::span(&res.record, 1));
  hs::save_model(stem.string() + ".ckpt", cfg, *res.model);
  std::printf("%s test accuracy %.4f", cfg.run_id.c_str(), res.record.test_accuracy);
  if (res.record.test_f1) std::printf(" parsing_f1 %.4f", *res.record.test_f1);
  std::printf(" (best epoch %zu of %zu)\n", res.record.best_epoch, res.record.epochs_run);
  return 0;
}

int cmd_sweep(const ConfigOptions& co, std::string axis, std::string values, std::size_t repeats,
              const fs::path& out_dir) {
  auto kv = co.resolve();
  auto sweep_kv = take_prefixed(kv, "sweep.");
  if (axis.empty() && sweep_kv.count("axis")) axis = sweep_kv.at("axis");
  if (values.empty() && sweep_kv.count("values")) values = sweep_kv.at("values");
  if (repeats == 0) repeats = sweep_kv.count("repeats") ? hs::detail::to_u64("sweep.repeats", sweep_kv.at("repeats")) : 1;
  for (const auto& [k, v] : sweep_kv)
    if (k != "axis" && k != "values" && k != "repeats") throw UsageError("unknown config key: sweep." + k);
  if (axis.empty() || values.empty()) throw UsageError("sweep needs an axis and values");
  const auto base = hs::TrainConfig::from_kv(kv);
  fs::create_directories(out_dir);
  const auto res = hs::run_sweep(base, axis, hs::split_list(values), repeats, [&](const hs::RunRecord& r) {
    hs::save_record((out_dir / (r.run_id + ".json")).string(), r);
    std::fprintf(stderr, "[%s] test accuracy %.4f\n", r.run_id.c_str(), r.test_accuracy);
  });
  write_csv(out_dir / "metrics.csv", res.records);
  write_text(out_dir / "report.md", hs::write_report(res.records));
  const auto summary = hs::write_sweep_summary(res);
  write_text(out_dir / "summary.md", summary);
  std::cout << summary;
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& data) {
  auto [cfg, model] = hs::load_model(checkpoint);
  const auto d = eval_data(data, cfg);
  std::printf("accuracy %.6f\n", hs::evaluate(*model, d));
  if (auto f1 = hs::mean_parsing_f1(*model, d)) std::printf("parsing_f1 %.6f\n", *f1);
  return 0;
}

int cmd_report(const std::vector<std::string>& files, const std::string& out, const std::string& csv) {
  std::vector<hs::RunRecord> records;
  for (const auto& f : files) records.push_back(hs::load_record(f));
  const auto table = hs::write_report(records);
  if (out.empty()) std::cout << table;
  else write_text(out, table);
  if (!csv.empty()) write_csv(csv, records);
  return 0;
}

int cmd_trees(const std::string& checkpoint, const std::string& data, const std::string& out) {
  auto [cfg, model] = hs::load_model(checkpoint);
  if (!hs::induces_structure(cfg.model)) throw UsageError(cfg.model + " does not induce trees");
  const auto d = eval_data(data, cfg);
  std::ofstream file;
  if (!out.empty()) {
    file.open(out);
    if (!file) throw treebench::ContractError("cannot write " + out);
  }
  std::ostream& os = out.empty() ? std::cout : file;
  double total = 0;
  for (const auto& e : d) {
    const auto t = *model->induced_tree(e);
    os << lo::to_sexpr(t) << '\n';
    total += hs::parsing_f1(t, lo::token_tree(e.gold_tree));
  }
  std::fprintf(stderr, "parsing_f1 %.6f over %zu examples\n", total / static_cast<double>(d.size()), d.size());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"treebench: ListOps structure-learning workbench"};
  app.require_subcommand(1);

  ConfigOptions gen_co, train_co, sweep_co;
  std::string gen_out, checkpoint, data, out, csv, axis, values;
  std::size_t repeats = 0;
  std::vector<std::string> record_files;
  fs::path out_dir = ".";

  auto* gen = app.add_subcommand("gen", "generate a dataset file");
  gen_co.attach(gen);
  gen->add_option("-o,--out", gen_out, "output dataset (label TAB tokens)")->required();

  auto* train = app.add_subcommand("train", "train one model");
  train_co.attach(train);
  train->add_option("-o,--out-dir", out_dir, "directory for record, metrics and checkpoint");

  auto* sweep = app.add_subcommand("sweep", "train once per axis value");
  sweep_co.attach(sweep);
  sweep->add_option("--axis", axis, "optimizer | batch_size | subset_size | dataset | seed");
  sweep->add_option("--values", values, "comma-separated axis values");
  sweep->add_option("--repeats", repeats, "runs per value with consecutive seeds");
  sweep->add_option("-o,--out-dir", out_dir, "directory for records, metrics.csv and report.md");

  auto* eval = app.add_subcommand("eval", "accuracy of a checkpoint");
  eval->add_option("checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  eval->add_option("-d,--data", data, "dataset file (default: the checkpoint's test split)");

  auto* report = app.add_subcommand("report", "markdown table from run records");
  report->add_option("records", record_files)->required()->check(CLI::ExistingFile);
  report->add_option("-o,--out", out, "write the table here instead of stdout");
  report->add_option("--csv", csv, "also write the combined metrics CSV");

  auto* trees = app.add_subcommand("trees", "export induced trees as s-expressions");
  trees->add_option("checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  trees->add_option("-d,--data", data, "dataset file (default: the checkpoint's test split)");
  trees->add_option("-o,--out", out, "output file (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (*gen) return cmd_gen(gen_co, gen_out);
    if (*train) return cmd_train(train_co, out_dir);
    if (*sweep) return cmd_sweep(sweep_co, axis, values, repeats, out_dir);
    if (*eval) return cmd_eval(checkpoint, data);
    if (*report) return cmd_report(record_files, out, csv);
    if (*trees) return cmd_trees(checkpoint, data, out);
  } catch (const UsageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const treebench::ContractError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const treebench::ParseError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "failure: %s\n", e.what());
    return 2;
  }
  return 1;
}
