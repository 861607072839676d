#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <sstream>

#include "treebench/harness/config.hpp"
#include "treebench/harness/record.hpp"
#include "treebench/harness/stats.hpp"
#include "treebench/harness/sweep.hpp"
#include "treebench/harness/train.hpp"

namespace tb = treebench;
namespace hs = treebench::harness;
namespace lo = treebench::listops;

namespace {

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("treebench_h_" + name);
}

hs::TrainConfig small_config(const std::string& model = "tree_lstm") {
  hs::TrainConfig c;
  c.model = model;
  c.embed_dim = 6;
  c.hidden_dim = 6;
  c.optimizer = tb::num::OptimizerKind::kAdam;
  c.lr = 0.01;
  c.batch_size = 16;
  c.max_epochs = 2;
  c.gen.max_depth = 3;
  c.gen.size = 120;
  c.gen.seed = 4;
  c.test_size = 40;
  c.seed = 9;
  return c;
}

lo::Dataset gen(std::size_t n, std::uint64_t seed, int depth = 3) {
  lo::GenConfig g;
  g.size = n;
  g.seed = seed;
  g.max_depth = depth;
  return lo::generate(g);
}

std::size_t count_rows(const std::string& csv, const std::string& needle) {
  std::size_t n = 0;
  std::istringstream in(csv);
  std::string line;
  while (std::getline(in, line)) n += line.find(needle) != std::string::npos;
  return n;
}

hs::RunRecord record(const std::string& id, double acc, const std::string& block = "") {
  hs::RunRecord r;
  r.run_id = id;
  r.model = "ordered_memory";
  r.dataset_id = "d20s";
  r.block = block;
  r.test_accuracy = acc;
  r.epochs_run = 3;
  return r;
}

}  // namespace

TEST(EarlyStop, Examples) {
  EXPECT_TRUE(hs::early_stop_check(std::vector<double>{0.50, 0.60, 0.59, 0.58}));
  EXPECT_FALSE(hs::early_stop_check(std::vector<double>{0.50, 0.60, 0.55, 0.61}));
  EXPECT_FALSE(hs::early_stop_check(std::vector<double>{0.50}));
  EXPECT_FALSE(hs::early_stop_check(std::vector<double>{0.60, 0.59}));
  EXPECT_FALSE(hs::early_stop_check(std::vector<double>{0.60, 0.59, 0.59}));
}

TEST(Anova, HandComputedExample) {
  const auto r = hs::anova_oneway({{1, 2, 3}, {2, 3, 4}});
  EXPECT_NEAR(r.f, 1.5, 1e-12);
  EXPECT_EQ(r.df_between, 1u);
  EXPECT_EQ(r.df_within, 4u);
  EXPECT_GT(r.p, 0.0);
  EXPECT_LT(r.p, 1.0);
}

TEST(Anova, PValueMatchesClosedForm) {
  // With 2 numerator degrees of freedom, P(F > f) = (1 + 2 f / d2)^(-d2 / 2).
  const auto r = hs::anova_oneway({{1, 2, 3}, {2, 3, 4}, {3, 4, 6}});
  ASSERT_EQ(r.df_between, 2u);
  ASSERT_EQ(r.df_within, 6u);
  EXPECT_NEAR(r.p, std::pow(1 + 2 * r.f / 6.0, -3.0), 1e-12);
}

TEST(Anova, IdenticalGroupsGiveZero) {
  EXPECT_EQ(hs::anova_oneway({{1, 2, 3}, {1, 2, 3}}).f, 0.0);
  const auto flat = hs::anova_oneway({{2, 2}, {2, 2}});
  EXPECT_EQ(flat.f, 0.0);
  EXPECT_EQ(flat.p, 1.0);
}

TEST(Anova, TranslationBehaviour) {
  const std::vector<double> g{0.61, 0.58, 0.64, 0.60};
  const double base = hs::anova_oneway({g, g}).f;
  auto shifted = g;
  for (double& v : shifted) v += 0.05;
  EXPECT_GT(hs::anova_oneway({g, shifted}).f, base);
  // A common offset on every group leaves F unchanged.
  const std::vector<double> a{1, 2, 3}, b{2, 4, 9};
  auto a2 = a, b2 = b;
  for (double& v : a2) v += 1000;
  for (double& v : b2) v += 1000;
  EXPECT_NEAR(hs::anova_oneway({a, b}).f, hs::anova_oneway({a2, b2}).f, 1e-9);
}

TEST(Anova, Errors) {
  EXPECT_THROW(hs::anova_oneway({{1, 2}}), tb::ContractError);
  EXPECT_THROW(hs::anova_oneway({{1, 2}, {3}}), tb::ContractError);
}

TEST(ParsingF1, Examples) {
  using N = lo::TreeNode;
  const N a = N::leaf(1), b = N::leaf(2), c = N::leaf(3), d = N::leaf(4);
  const N left = N::bracket({N::bracket({N::bracket({a, b}), c}), d});
  const N right = N::bracket({a, N::bracket({b, N::bracket({c, d})})});
  const N balanced = N::bracket({N::bracket({a, b}), N::bracket({c, d})});
  EXPECT_EQ(hs::parsing_f1(left, left), 1.0);
  // left {0-1, 0-2} vs right {1-3, 2-3}: nothing shared.
  EXPECT_EQ(hs::parsing_f1(left, right), 0.0);
  // left {0-1, 0-2} vs balanced {0-1, 2-3}: one of two each way.
  EXPECT_DOUBLE_EQ(hs::parsing_f1(left, balanced), 0.5);
  EXPECT_EQ(hs::parsing_f1(N::bracket({a, b}), N::bracket({b, a})), 1.0);
  EXPECT_THROW(hs::parsing_f1(left, N::bracket({a, b})), tb::ContractError);
}

TEST(ParsingF1, SelfScoreIsOneOnGoldTrees) {
  for (const auto& e : gen(100, 12, 5)) {
    const auto t = lo::token_tree(e.gold_tree);
    EXPECT_EQ(hs::parsing_f1(t, t), 1.0);
  }
}

TEST(Config, ParsesFlatKeyValues) {
  const auto kv = hs::parse_config_text("# comment\nmodel.kind = gru\n\n  train.batch_size=32  # trailing\nsweep.values = 1, 2 ,3\n");
  EXPECT_EQ(kv.at("model.kind"), "gru");
  EXPECT_EQ(kv.at("train.batch_size"), "32");
  EXPECT_EQ(hs::split_list(kv.at("sweep.values")), (std::vector<std::string>{"1", "2", "3"}));
  EXPECT_THROW(hs::parse_config_text("just words\n"), tb::ContractError);
  EXPECT_THROW(hs::parse_config_text(" = 3\n"), tb::ContractError);
}

TEST(Config, RoundTripAndOverrides) {
  auto c = small_config("ordered_memory");
  c.rl_ppo = true;
  c.early_stop = true;
  const auto back = hs::TrainConfig::from_kv(c.to_kv());
  EXPECT_EQ(back.to_kv(), c.to_kv());
  auto o = back;
  o.apply({{"train.batch_size", "7"}, {"optim.kind", "sgd"}});
  EXPECT_EQ(o.batch_size, 7u);
  EXPECT_EQ(o.optimizer, tb::num::OptimizerKind::kSgd);
  EXPECT_THROW(o.apply({{"train.bogus", "1"}}), tb::ContractError);
  EXPECT_THROW(o.apply({{"train.batch_size", "-3"}}), tb::ContractError);
  EXPECT_THROW(o.apply({{"train.early_stop", "maybe"}}), tb::ContractError);
  EXPECT_THROW(o.apply({{"model.dropout", "x"}}), tb::ContractError);
}

TEST(Config, Validation) {
  auto c = small_config();
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), tb::ContractError);
  c = small_config();
  c.model = "transformer";
  EXPECT_THROW(c.validate(), tb::ContractError);
  c = small_config();
  c.train_path = "x.tsv";
  EXPECT_THROW(c.validate(), tb::ContractError);
}

TEST(Splits, HoldsOutLastFivePercent) {
  auto c = small_config();
  c.gen.size = 200;
  const auto s = hs::load_splits(c);
  const auto all = lo::generate(c.gen);
  EXPECT_EQ(s.train.size(), 190u);
  EXPECT_EQ(s.valid.size(), 10u);
  EXPECT_EQ(s.valid.front(), all[190]);
  EXPECT_EQ(s.test.size(), 40u);
  EXPECT_EQ(s.test.front(), lo::generate_one(c.gen, 200));
  c.subset = 100;
  const auto sub = hs::load_splits(c);
  EXPECT_EQ(sub.train.size(), 95u);
  EXPECT_EQ(sub.valid.back(), all[99]);
}

TEST(Splits, FilesWithExplicitValidation) {
  const auto tr = temp_path("train.tsv"), va = temp_path("valid.tsv"), te = temp_path("test.tsv");
  lo::write_dataset(tr.string(), gen(50, 1));
  lo::write_dataset(va.string(), gen(7, 2));
  lo::write_dataset(te.string(), gen(9, 3));
  auto c = small_config();
  c.train_path = tr.string();
  c.valid_path = va.string();
  c.test_path = te.string();
  const auto s = hs::load_splits(c);
  EXPECT_EQ(s.train.size(), 50u);
  EXPECT_EQ(s.valid.size(), 7u);
  EXPECT_EQ(s.test.size(), 9u);
  EXPECT_EQ(c.resolved_dataset_id(), "treebench_h_train.tsv");
}

TEST(Evaluate, ContractAndNoMutation) {
  auto m = hs::make_model(small_config("gru"));
  auto d = gen(60, 5);
  for (auto& e : d) e.label = m->predict(e);
  const auto before = m->param_groups()[0]->checksum();
  EXPECT_EQ(hs::evaluate(*m, d), 1.0);
  EXPECT_EQ(m->param_groups()[0]->checksum(), before);
  EXPECT_THROW(hs::evaluate(*m, {}), tb::ContractError);
}

TEST(Train, CountsBatchesPerEpoch) {
  auto c = small_config();
  c.max_epochs = 1;
  c.batch_size = 64;
  hs::Splits s{gen(128, 1), gen(20, 2), gen(20, 3)};
  const auto r = hs::train(c, s).record;
  EXPECT_EQ(r.batches.size(), 2u);
  EXPECT_EQ(r.valid_accuracy.size(), 1u);
  EXPECT_EQ(r.epochs_run, 1u);
  std::ostringstream csv;
  hs::write_metrics_csv(csv, std::span(&r, 1));
  EXPECT_EQ(csv.str().substr(0, csv.str().find('\n')), hs::kMetricsHeader);
  EXPECT_EQ(count_rows(csv.str(), ",train,"), 2u);
  EXPECT_EQ(count_rows(csv.str(), ",valid,"), 1u);
  EXPECT_EQ(count_rows(csv.str(), ",test,"), 1u);
}

TEST(Train, DeterministicRecords) {
  for (const char* kind : {"tree_gru", "ordered_memory", "latent_parser"}) {
    auto c = small_config(kind);
    c.dropout = 0.2;
    const auto a = hs::train(c).record;
    const auto b = hs::train(c).record;
    EXPECT_TRUE(a.same_results(b)) << kind;
    EXPECT_EQ(a.valid_accuracy, b.valid_accuracy);
    c.seed += 1;
    EXPECT_FALSE(hs::train(c).record.same_results(a)) << kind;
  }
}

TEST(Train, StructureModelsRecordParsingF1) {
  auto c = small_config("ordered_memory");
  const auto r = hs::train(c).record;
  EXPECT_EQ(r.valid_f1.size(), r.epochs_run);
  ASSERT_TRUE(r.test_f1.has_value());
  EXPECT_GE(*r.test_f1, 0.0);
  EXPECT_LE(*r.test_f1, 1.0);
  std::ostringstream csv;
  hs::write_metrics_csv(csv, std::span(&r, 1));
  EXPECT_EQ(count_rows(csv.str(), ",valid,"), 2 * r.epochs_run);
  EXPECT_FALSE(hs::train(small_config("lstm")).record.test_f1.has_value());
}

TEST(Train, RecordInvariants) {
  auto c = small_config("lstm");
  c.max_epochs = 3;
  const auto r = hs::train(c).record;
  EXPECT_LE(r.epochs_run, c.max_epochs);
  for (const auto& b : r.batches) {
    EXPECT_GE(b.accuracy, 0.0);
    EXPECT_LE(b.accuracy, 1.0);
  }
  EXPECT_GE(r.best_epoch, 1u);
  EXPECT_DOUBLE_EQ(r.valid_accuracy[r.best_epoch - 1],
                   *std::max_element(r.valid_accuracy.begin(), r.valid_accuracy.end()));
}

TEST(Record, JsonRoundTrip) {
  auto r = hs::train(small_config("latent_parser")).record;
  const auto path = temp_path("record.json");
  hs::save_record(path.string(), r);
  const auto back = hs::load_record(path.string());
  EXPECT_TRUE(back.same_results(r));
  EXPECT_EQ(back.wall_minutes, r.wall_minutes);
  r.wall_minutes += 1;
  EXPECT_TRUE(back.same_results(r));
  EXPECT_THROW(hs::RunRecord::from_json(nlohmann::json::object()), tb::ContractError);
}

TEST(Checkpoint, HarnessRoundTrip) {
  auto c = small_config("ordered_memory");
  auto res = hs::train(c);
  const auto path = temp_path("om.ckpt");
  hs::save_model(path.string(), c, *res.model);
  auto [cfg, loaded] = hs::load_model(path.string());
  EXPECT_EQ(cfg.to_kv(), c.to_kv());
  for (const auto& e : gen(30, 77)) EXPECT_EQ(loaded->predict(e), res.model->predict(e));
}

TEST(Report, SingleRow) {
  const std::vector<hs::RunRecord> rs{record("a", 0.5)};
  const auto rep = hs::write_report(rs);
  EXPECT_EQ(count_rows(rep, "| - | a |"), 1u);
  EXPECT_THROW(hs::write_report(std::vector<hs::RunRecord>{}), tb::ContractError);
}

TEST(Report, BoldsBestPerBlock) {
  const std::vector<hs::RunRecord> rs{record("om", 0.6115, "x"), record("lt", 0.456, "x"), record("p", 0.30, "y"),
                                      record("q", 0.30, "y")};
  const auto rep = hs::write_report(rs);
  EXPECT_NE(rep.find("**61.15**"), std::string::npos);
  EXPECT_NE(rep.find("| 45.60 |"), std::string::npos);
  EXPECT_EQ(count_rows(rep, "**30.00**"), 2u);
  EXPECT_LT(rep.find("| om |"), rep.find("| lt |"));
}

TEST(Sweep, ConfigsFollowAxisOrder) {
  const auto base = small_config();
  const auto opt = hs::sweep_configs(base, "optimizer", {"adam", "adadelta", "sgd"});
  ASSERT_EQ(opt.size(), 3u);
  EXPECT_EQ(opt[0].optimizer, tb::num::OptimizerKind::kAdam);
  EXPECT_EQ(opt[1].optimizer, tb::num::OptimizerKind::kAdadelta);
  EXPECT_EQ(opt[2].optimizer, tb::num::OptimizerKind::kSgd);
  EXPECT_EQ(opt[1].optimizer_config().lr, 1.0);
  const auto bs = hs::sweep_configs(base, "batch_size", {"32", "64", "128"}, 2);
  ASSERT_EQ(bs.size(), 6u);
  EXPECT_EQ(bs[3].batch_size, 64u);
  EXPECT_EQ(bs[3].seed, base.seed + 1);
  EXPECT_THROW(hs::sweep_configs(base, "colour", {"red"}), tb::ContractError);
  EXPECT_THROW(hs::sweep_configs(base, "batch_size", {"0"}), tb::ContractError);
}

TEST(Sweep, RepeatsGiveStatistics) {
  auto base = small_config();
  base.max_epochs = 1;
  const auto s = hs::run_sweep(base, "batch_size", {"16", "60"}, 2);
  ASSERT_EQ(s.records.size(), 4u);
  ASSERT_EQ(s.groups.size(), 2u);
  EXPECT_EQ(s.groups[0].accuracies.size(), 2u);
  ASSERT_TRUE(s.anova.has_value());
  EXPECT_EQ(s.anova->df_within, 2u);
  const auto summary = hs::write_sweep_summary(s);
  EXPECT_NE(summary.find("One-way ANOVA"), std::string::npos);
  EXPECT_EQ(count_rows(hs::write_report(s.records), "| batch_size |"), 4u);
}

TEST(Sweep, SeedAxis) {
  auto base = small_config("gru");
  base.max_epochs = 1;
  const auto s = hs::run_sweep(base, "seed", {"1", "2", "3", "4", "5"});
  ASSERT_EQ(s.records.size(), 5u);
  ASSERT_EQ(s.groups.size(), 1u);
  EXPECT_EQ(s.groups[0].accuracies.size(), 5u);
  EXPECT_NEAR(s.groups[0].mean, hs::mean(s.groups[0].accuracies), 0);
  EXPECT_EQ(s.records[2].config.at("train.seed"), "3");
}
