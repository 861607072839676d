#include <gtest/gtest.h>

#include <algorithm>
#include <array>
#include <filesystem>
#include <fstream>
#include <random>

#include "treebench/listops.hpp"

namespace tb = treebench;
namespace lo = treebench::listops;

namespace {

int eval_text(std::string_view s) { return lo::evaluate_tree(lo::parse_tokens(s)); }
int stream_text(std::string_view s) {
  const auto t = lo::tokenize(s);
  return lo::reduce_stream(t);
}

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("treebench_" + name);
}

}  // namespace

TEST(Evaluate, SumMod) { EXPECT_EQ(eval_text("[SM 5 6 ]"), 1); }
TEST(Evaluate, MedianOfNested) { EXPECT_EQ(eval_text("[MED 2 [MIN 8 5 ] 9 ]"), 5); }
TEST(Evaluate, FirstArgument) { EXPECT_EQ(eval_text("[FIRST 7 [MAX 1 2 ] ]"), 7); }
TEST(Evaluate, EvenMedianFloorsMean) { EXPECT_EQ(eval_text("[MED 2 7 ]"), 4); }
TEST(Evaluate, ProductMod) { EXPECT_EQ(eval_text("[PROD 3 4 5 ]"), 0); }
TEST(Evaluate, LastArgument) { EXPECT_EQ(eval_text("[LAST 7 [MAX 1 2 ] ]"), 2); }

TEST(Evaluate, OperatorWithoutChildrenIsAnError) {
  EXPECT_THROW(lo::evaluate_tree(lo::TreeNode::leaf(lo::kFirstOperator)), tb::ContractError);
}

TEST(ReduceStream, Examples) {
  EXPECT_EQ(stream_text("[MIN 4 7 ]"), 4);
  EXPECT_EQ(stream_text("[SM 9 9 9 ]"), 7);
  EXPECT_EQ(stream_text("3"), 3);
}

TEST(ReduceStream, Malformed) {
  EXPECT_THROW(stream_text("[MIN 4 7"), tb::ParseError);
  EXPECT_THROW(stream_text("[MIN 4 ] ]"), tb::ParseError);
  EXPECT_THROW(stream_text("[MIN ]"), tb::ParseError);
  EXPECT_THROW(stream_text(""), tb::ParseError);
}

TEST(ReduceStream, AgreesWithTreeEvaluationOnBothOperatorSets) {
  for (auto set : {lo::OperatorSet::kD20s, lo::OperatorSet::kD5c}) {
    lo::GenConfig cfg;
    cfg.ops = set;
    cfg.size = 10000;
    cfg.seed = 17;
    for (const auto& e : lo::generate(cfg)) {
      ASSERT_EQ(lo::reduce_stream(e.tokens), lo::evaluate_tree(lo::parse_tokens(e.tokens)))
          << lo::join_tokens(e.tokens);
    }
  }
}

TEST(Parse, FlatOperator) {
  const auto t = lo::parse_tokens("[MAX 1 2 ]");
  const int max_tok = lo::operator_token(lo::Semantics::kMax);
  EXPECT_EQ(t, lo::TreeNode::internal(max_tok, {lo::TreeNode::leaf(1), lo::TreeNode::leaf(2)}));
}

TEST(Parse, SingleValue) { EXPECT_EQ(lo::parse_tokens("7"), lo::TreeNode::leaf(7)); }

TEST(Parse, UnbalancedAtEnd) {
  try {
    lo::parse_tokens("[MAX 1");
    FAIL();
  } catch (const tb::ParseError& e) {
    EXPECT_EQ(e.index(), 2u);
    EXPECT_NE(std::string(e.what()).find("unbalanced"), std::string::npos);
  }
}

TEST(Parse, ErrorsCarryTokenIndex) {
  try {
    lo::parse_tokens("[MAX 1 12 ]");
    FAIL();
  } catch (const tb::ParseError& e) {
    EXPECT_EQ(e.index(), 2u);
  }
  try {
    lo::parse_tokens("[MAX 1 [FOO 2 ] ]");
    FAIL();
  } catch (const tb::ParseError& e) {
    EXPECT_EQ(e.index(), 2u);
  }
  try {
    lo::parse_tokens("[MAX 1 2 ] ]");
    FAIL();
  } catch (const tb::ParseError& e) {
    EXPECT_EQ(e.index(), 4u);
  }
}

TEST(Serialize, Examples) {
  EXPECT_EQ(lo::serialize_example(lo::make_example(lo::parse_tokens("[SM 5 6 ]"))), "1\t[SM 5 6 ]");
  EXPECT_EQ(lo::serialize_example(lo::make_example(lo::parse_tokens("9"))), "9\t9");
}

TEST(Serialize, RoundTripProperty) {
  lo::GenConfig cfg;
  cfg.ops = lo::OperatorSet::kD5c;
  cfg.size = 1000;
  cfg.seed = 3;
  for (const auto& e : lo::generate(cfg)) {
    const auto line = lo::serialize_example(e);
    EXPECT_EQ(lo::parse_example_line(line), e);
    EXPECT_EQ(lo::to_tokens(lo::parse_tokens(e.tokens)), e.tokens);
  }
}

TEST(Ingest, ToleratesParenthesesAndHeader) {
  const auto path = temp_file("ingest.tsv");
  {
    std::ofstream out(path);
    out << "Source\tTarget\n";
    out << "( ( [MAX 2 ) 9 ) ]\t9\n";
    out << "4\t[MIN 4 7 ]\n";
  }
  const auto d = lo::read_dataset(path.string());
  ASSERT_EQ(d.size(), 2u);
  EXPECT_EQ(d[0].label, 9);
  EXPECT_EQ(lo::join_tokens(d[0].tokens), "[MAX 2 9 ]");
  EXPECT_EQ(d[1].label, 4);
}

TEST(Ingest, LabelMismatchIsRejected) {
  EXPECT_THROW(lo::parse_example_line("5\t[MIN 4 7 ]"), tb::ContractError);
}

TEST(Generate, Deterministic) {
  lo::GenConfig cfg;
  cfg.size = 500;
  cfg.seed = 99;
  const auto a = lo::generate(cfg);
  const auto b = lo::generate(cfg);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i)
    EXPECT_EQ(lo::serialize_example(a[i]), lo::serialize_example(b[i]));
  cfg.seed = 100;
  EXPECT_NE(lo::generate(cfg)[0], a[0]);
}

TEST(Generate, DepthOneIsFlat) {
  lo::GenConfig cfg;
  cfg.max_depth = 1;
  cfg.size = 300;
  for (const auto& e : lo::generate(cfg)) {
    EXPECT_LE(lo::depth(e.gold_tree), 1);
    for (const auto& c : e.gold_tree.children) EXPECT_TRUE(c.is_leaf());
  }
}

TEST(Generate, CapsValidityAndLabelSupport) {
  lo::GenConfig cfg;
  cfg.max_depth = 6;
  cfg.max_length = 40;
  cfg.branch_prob = 0.4;
  cfg.size = 20000;
  cfg.seed = 5;
  std::array<int, 10> hist{};
  for (const auto& e : lo::generate(cfg)) {
    ASSERT_GE(e.label, 0);
    ASSERT_LE(e.label, 9);
    ++hist[static_cast<std::size_t>(e.label)];
    ASSERT_LE(lo::depth(e.gold_tree), 6);
    ASSERT_LE(e.tokens.size(), 40u);
    EXPECT_EQ(std::count(e.tokens.begin(), e.tokens.end(), lo::kClose),
              std::count_if(e.tokens.begin(), e.tokens.end(), lo::is_operator));
  }
  for (int c : hist) EXPECT_GT(c, 0);
}

TEST(Generate, ImpossibleCapsAreRejected) {
  lo::GenConfig cfg;
  cfg.max_length = 3;
  EXPECT_THROW(lo::generate(cfg), tb::ContractError);
  cfg = {};
  cfg.max_depth = 0;
  EXPECT_THROW(lo::generate(cfg), tb::ContractError);
}

TEST(Generate, OperatorSetsAreRespected) {
  lo::GenConfig cfg;
  cfg.size = 2000;
  const int first_tok = lo::operator_token(lo::Semantics::kFirst);
  for (const auto& e : lo::generate(cfg))
    for (int t : e.tokens) EXPECT_LT(t, first_tok);
  cfg.ops = lo::OperatorSet::kD5c;
  bool saw_extended = false;
  for (const auto& e : lo::generate(cfg))
    for (int t : e.tokens) saw_extended = saw_extended || t >= first_tok;
  EXPECT_TRUE(saw_extended);
}

TEST(Subset, Definition) {
  lo::GenConfig cfg;
  cfg.size = 50;
  const auto d = lo::generate(cfg);
  EXPECT_EQ(lo::subset(d, d.size()), d);
  EXPECT_TRUE(lo::subset(d, 0).empty());
  EXPECT_THROW(lo::subset(d, 51), tb::ContractError);
}

TEST(Subset, FileHead) {
  lo::GenConfig cfg;
  cfg.size = 90000;
  cfg.seed = 1;
  const auto full = lo::generate(cfg);
  const auto path = temp_file("full90k.tsv");
  lo::write_dataset(path.string(), full);
  const auto sub = lo::subset(lo::read_dataset(path.string()), 20000);
  ASSERT_EQ(sub.size(), 20000u);
  std::ifstream in(path);
  std::string line;
  for (const auto& e : sub) {
    std::getline(in, line);
    ASSERT_EQ(lo::serialize_example(e), line);
  }
}

TEST(Semantics, PermutationInvariance) {
  std::mt19937_64 rng(8);
  std::uniform_int_distribution<int> digit(0, 9), len(2, 6);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<int> v(static_cast<std::size_t>(len(rng)));
    for (int& x : v) x = digit(rng);
    auto p = v;
    std::shuffle(p.begin(), p.end(), rng);
    for (auto s : {lo::Semantics::kMin, lo::Semantics::kMax, lo::Semantics::kMed, lo::Semantics::kSumMod,
                   lo::Semantics::kProdMod})
      EXPECT_EQ(lo::apply(s, v), lo::apply(s, p));
  }
  // Witness that FIRST/LAST depend on order.
  EXPECT_NE(lo::apply(lo::Semantics::kFirst, {1, 2}), lo::apply(lo::Semantics::kFirst, {2, 1}));
  EXPECT_NE(lo::apply(lo::Semantics::kLast, {1, 2}), lo::apply(lo::Semantics::kLast, {2, 1}));
}

TEST(TokenTree, LeafCountMatchesTokens) {
  const auto e = lo::make_example(lo::parse_tokens("[MAX 1 [MIN 4 7 ] 9 ]"));
  const auto t = lo::token_tree(e.gold_tree);
  EXPECT_EQ(lo::leaf_count(t), e.tokens.size());
  std::vector<int> leaves;
  lo::collect_leaves(t, leaves);
  EXPECT_EQ(leaves, e.tokens);
}
