#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>
#include <utility>

#include "treebench/num/grad_check.hpp"
#include "treebench/ordered_memory.hpp"

namespace tb = treebench;
namespace lo = treebench::listops;
namespace om = treebench::ordered_memory;
namespace num = treebench::num;

namespace {

om::OMConfig tiny(std::size_t slots = 3, std::uint64_t seed = 1) {
  om::OMConfig c;
  c.slots = slots;
  c.hidden_dim = 4;
  c.embed_dim = 4;
  c.seed = seed;
  return c;
}

num::Tensor random_vector(std::size_t n, std::mt19937_64& rng, double scale = 1.0) {
  std::uniform_real_distribution<double> u(-scale, scale);
  num::Tensor v(num::Shape::vector(n));
  for (double& x : v.data()) x = u(rng);
  return v;
}

num::Tensor one_hot(std::size_t n, std::size_t k) {
  num::Tensor v(num::Shape::vector(n));
  v[k] = 1.0;
  return v;
}

// Spans (first, last) of every internal node.
void spans(const lo::TreeNode& n, std::size_t& pos, std::set<std::pair<std::size_t, std::size_t>>& out) {
  if (n.is_leaf()) {
    ++pos;
    return;
  }
  const std::size_t lo = pos;
  for (const auto& c : n.children) spans(c, pos, out);
  out.insert({lo, pos - 1});
}

std::set<std::pair<std::size_t, std::size_t>> spans(const lo::TreeNode& n) {
  std::set<std::pair<std::size_t, std::size_t>> out;
  std::size_t pos = 0;
  spans(n, pos, out);
  return out;
}

// A state with random memory and occupancy in [0,1].
om::OMState random_state(num::Tape& t, const om::OrderedMemory& m, std::mt19937_64& rng) {
  om::OMState s = m.initial_state(t);
  std::uniform_real_distribution<double> u01(0, 1);
  for (std::size_t j = 0; j < s.memory.size(); ++j) {
    s.memory[j] = t.constant(random_vector(m.config().hidden_dim, rng, 0.9));
    s.occupancy[j] = t.constant(num::Tensor::vector({u01(rng)}));
  }
  return s;
}

}  // namespace

TEST(Gates, UniformScores) {
  num::Tape t;
  const auto g = om::gates_from_scores(t, t.constant(num::Tensor::vector({0, 0, 0})), 1.0);
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_NEAR(g.p.value()[k], 1.0 / 3, 1e-15);
    EXPECT_NEAR(g.cum.value()[k], (k + 1) / 3.0, 1e-15);
  }
}

TEST(Gates, OneHotGivesStep) {
  num::Tape t;
  for (std::size_t k = 0; k < 4; ++k) {
    const auto g = om::gates_from_distribution(t, t.constant(one_hot(4, k)));
    for (std::size_t j = 0; j < 4; ++j) {
      EXPECT_EQ(g.cum.value()[j], j >= k ? 1.0 : 0.0);
      EXPECT_EQ(g.rev.value()[j], j <= k ? 1.0 : 0.0);
    }
  }
}

TEST(Gates, MonotoneOnRandomScores) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<std::size_t> slots(2, 8);
  std::uniform_real_distribution<double> temp(0.2, 3.0);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t M = slots(rng);
    num::Tape t;
    const auto g = om::gates_from_scores(t, t.constant(random_vector(M, rng, 10.0)), temp(rng));
    double total = 0;
    for (std::size_t k = 0; k < M; ++k) {
      EXPECT_GE(g.p.value()[k], 0.0);
      total += g.p.value()[k];
      EXPECT_GE(g.cum.value()[k], -1e-12);
      EXPECT_LE(g.cum.value()[k], 1.0 + 1e-12);
      if (k > 0) {
        EXPECT_GE(g.cum.value()[k], g.cum.value()[k - 1] - 1e-12);
      }
    }
    EXPECT_NEAR(total, 1.0, 1e-9);
    EXPECT_NEAR(g.cum.value()[M - 1], 1.0, 1e-9);
  }
}

TEST(Gates, TemperatureSharpens) {
  num::Tape t;
  const auto s = t.constant(num::Tensor::vector({0, 1, 2}));
  EXPECT_GT(om::gates_from_scores(t, s, 0.1).p.value()[2], om::gates_from_scores(t, s, 1.0).p.value()[2]);
}

TEST(Gates, DimensionMismatch) {
  om::OrderedMemory m(tiny());
  num::Tape t;
  const auto s = m.initial_state(t);
  const auto good = t.constant(num::Tensor(num::Shape::vector(4)));
  const auto bad = t.constant(num::Tensor(num::Shape::vector(5)));
  EXPECT_THROW(m.om_gates(t, s, bad, good), tb::ContractError);
  EXPECT_THROW(m.om_gates(t, s, good, bad), tb::ContractError);
  om::OrderedMemory other(tiny(4));
  EXPECT_THROW(m.om_gates(t, other.initial_state(t), good, good), tb::ContractError);
}

TEST(Gates, LookaheadChangesDistribution) {
  om::OrderedMemory m(tiny(3, 9));
  std::mt19937_64 rng(2);
  num::Tape t;
  const auto s = random_state(t, m, rng);
  const auto cur = m.embed(t, 4);
  const auto a = m.om_gates(t, s, cur, m.embed(t, 7)).p.value();
  const auto b = m.om_gates(t, s, cur, m.embed(t, lo::kClose)).p.value();
  EXPECT_NE(a, b);
  const auto c = m.om_gates(t, s, cur, m.eos(t)).p.value();
  EXPECT_NE(a, c);
}

TEST(Cell, ClosedUpdateGatePassesCandidate) {
  om::OrderedMemory m(tiny(3, 5));
  auto& b = m.cell_gates().bias().value;
  for (std::size_t k = 0; k < 4; ++k) b[k] = -50.0;
  std::mt19937_64 rng(1);
  num::Tape t;
  const auto cand = random_vector(4, rng);
  const auto out = m.om_cell(t, t.constant(random_vector(4, rng)), t.constant(cand));
  for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(out.value()[k], cand[k], 1e-12);
}

TEST(Cell, ZeroWeightModelOutputsZero) {
  // The candidate is itself produced by the (zeroed) input layer.
  om::OrderedMemory m(tiny());
  for (auto& p : m.params()) p->value.fill(0.0);
  std::mt19937_64 rng(1);
  num::Tape t;
  const auto s = m.om_step(t, m.initial_state(t), m.embed(t, 3), m.embed(t, 4));
  for (double v : s.candidate.value().data()) EXPECT_EQ(v, 0.0);
  const auto out = m.om_cell(t, t.constant(random_vector(4, rng)), s.candidate);
  for (double v : out.value().data()) EXPECT_EQ(v, 0.0);
}

TEST(Cell, DimensionMismatch) {
  om::OrderedMemory m(tiny());
  num::Tape t;
  EXPECT_THROW(m.om_cell(t, t.constant(num::Tensor(num::Shape::vector(3))),
                         t.constant(num::Tensor(num::Shape::vector(4)))),
               tb::ContractError);
}

TEST(Cell, GradCheck) {
  om::OrderedMemory m(tiny(3, 6));
  std::mt19937_64 rng(4);
  const auto slot = random_vector(4, rng), cand = random_vector(4, rng), w = random_vector(4, rng);
  auto f = [&](num::Tape& t, num::Var a, num::Var b) {
    return t.sum(t.mul(m.om_cell(t, a, b), t.constant(w)));
  };
  EXPECT_LT(num::grad_check([&](num::Tape& t, std::span<const num::Var> v) { return f(t, v[0], v[1]); },
                            {slot, cand}),
            1e-4);
  EXPECT_LT(num::grad_check_params([&](num::Tape& t) { return f(t, t.constant(slot), t.constant(cand)); },
                                   m.params()),
            1e-4);
}

TEST(Step, HardGateAtTopKeepsLowerSlots) {
  om::OrderedMemory m(tiny(4, 2));
  std::mt19937_64 rng(8);
  num::Tape t;
  const auto s = random_state(t, m, rng);
  const auto g = om::gates_from_distribution(t, t.constant(one_hot(4, 3)));
  const auto n = m.om_step_with_gates(t, s, m.embed(t, 5), g);
  for (std::size_t j = 0; j < 3; ++j) {
    EXPECT_EQ(n.memory[j].value(), s.memory[j].value()) << "slot " << j;
    EXPECT_EQ(n.occupancy[j].value()[0], 1.0);
  }
  EXPECT_EQ(n.occupancy[3].value()[0], 1.0);
}

TEST(Step, HardGateWritesReductionAndClearsAbove) {
  om::OrderedMemory m(tiny(4, 3));
  std::mt19937_64 rng(9);
  num::Tape t;
  auto s = random_state(t, m, rng);
  for (auto& o : s.occupancy) o = t.constant(num::Tensor::vector({1.0}));
  const auto x = m.embed(t, 6);
  const auto n = m.om_step_with_gates(t, s, x, om::gates_from_distribution(t, t.constant(one_hot(4, 1))));
  EXPECT_EQ(n.memory[0].value(), s.memory[0].value());
  // All slots occupied: slot 1 receives cell(M1, cell(M2, cell(M3, candidate))).
  const auto cand = t.tanh(t.add(t.matmul(t.constant(m.params().find("input.W")->value), x),
                                 t.constant(m.params().find("input.b")->value)));
  auto r = m.om_cell(t, s.memory[3], cand);
  r = m.om_cell(t, s.memory[2], r);
  r = m.om_cell(t, s.memory[1], r);
  for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(n.memory[1].value()[k], r.value()[k], 1e-15);
  for (std::size_t j = 2; j < 4; ++j) {
    for (double v : n.memory[j].value().data()) EXPECT_EQ(v, 0.0);
    EXPECT_EQ(n.occupancy[j].value()[0], 0.0);
  }
}

TEST(Step, PushIntoEmptySlotStoresCandidate) {
  om::OrderedMemory m(tiny(3, 4));
  num::Tape t;
  const auto s0 = m.initial_state(t);
  const auto n = m.om_step_with_gates(t, s0, m.embed(t, 2), om::gates_from_distribution(t, t.constant(one_hot(3, 0))));
  EXPECT_EQ(n.memory[0].value(), n.candidate.value());
}

TEST(Step, SingleTokenHasOneTraceRecord) {
  om::OrderedMemory m(tiny());
  num::Tape t;
  EXPECT_EQ(m.run(t, std::vector<int>{7}).gate_trace.size(), 1u);
}

TEST(Step, SoftStepsStayBoundedAndFinite) {
  om::OrderedMemory m(tiny(5, 10));
  std::mt19937_64 rng(10);
  std::uniform_int_distribution<int> tok(0, lo::kVocabSize - 1);
  num::Tape t;
  auto s = m.initial_state(t);
  for (int step = 0; step < 1000; ++step) {
    if (step % 50 == 0) {
      t.reset();
      s = m.initial_state(t);
    }
    s = m.om_step(t, s, m.embed(t, tok(rng)), m.embed(t, tok(rng)));
    const auto& p = s.gate_trace.back();
    double total = 0;
    for (double v : p.data()) {
      EXPECT_GE(v, 0.0);
      total += v;
    }
    EXPECT_NEAR(total, 1.0, 1e-9);
    for (const auto& row : s.memory)
      for (double v : row.value().data()) {
        ASSERT_TRUE(std::isfinite(v));
        EXPECT_LT(std::abs(v), 1.0);
      }
    for (const auto& o : s.occupancy) {
      EXPECT_GE(o.value()[0], -1e-12);
      EXPECT_LE(o.value()[0], 1.0 + 1e-12);
    }
  }
}

TEST(Step, GradCheckParams) {
  om::OrderedMemory m(tiny(3, 12));
  std::mt19937_64 rng(12);
  const auto w = random_vector(4, rng);
  EXPECT_LT(num::grad_check_params(
                [&](num::Tape& t) {
                  auto s = m.om_step(t, m.initial_state(t), m.embed(t, 11), m.embed(t, 4));
                  s = m.om_step(t, s, m.embed(t, 4), m.embed(t, 7));
                  num::Var out = t.scalar(0);
                  for (const auto& row : s.memory) out = t.add(out, t.sum(t.mul(row, t.constant(w))));
                  return out;
                },
                m.params()),
            1e-4);
}

TEST(Run, TenLogitsForAnyLength) {
  om::OrderedMemory m(tiny());
  lo::GenConfig g;
  g.size = 20;
  for (const auto& e : lo::generate(g)) {
    num::Tape t;
    tb::models::ForwardContext ctx;
    EXPECT_EQ(m.logits(t, e, ctx).shape(), num::Shape::vector(10));
  }
  num::Tape t;
  EXPECT_THROW(m.run(t, std::vector<int>{}), tb::ContractError);
}

TEST(Run, ZeroWeightsGiveLnTen) {
  om::OrderedMemory m(tiny());
  for (auto& p : m.params()) p->value.fill(0.0);
  const auto e = lo::make_example(lo::parse_tokens("[MAX 1 [MIN 4 7 ] 9 ]"));
  num::Tape t;
  tb::models::ForwardContext ctx;
  const auto logits = m.logits(t, e, ctx);
  for (double v : logits.value().data()) EXPECT_EQ(v, 0.0);
  EXPECT_NEAR(t.cross_entropy_with_logits(logits, 9).item(), std::log(10.0), 1e-12);
}

TEST(Run, GradCheckEndToEnd) {
  om::OrderedMemory m(tiny(3, 13));
  const auto e = lo::make_example(lo::parse_tokens("[MIN 4 7 2 ]"));
  ASSERT_EQ(e.tokens.size(), 5u);
  EXPECT_LT(num::grad_check_params(
                [&](num::Tape& t) {
                  tb::models::ForwardContext ctx;
                  return t.cross_entropy_with_logits(m.logits(t, e, ctx), 2);
                },
                m.params()),
            1e-4);
}

TEST(Run, DeterministicPerSeed) {
  const auto e = lo::make_example(lo::parse_tokens("[SM 3 [MAX 1 2 ] ]"));
  auto once = [&](std::uint64_t seed) {
    om::OrderedMemory m(tiny(3, seed));
    num::Tape t;
    tb::models::ForwardContext ctx;
    return m.logits(t, e, ctx).value();
  };
  EXPECT_EQ(once(4), once(4));
  EXPECT_NE(once(4), once(5));
}

TEST(Config, Validation) {
  auto c = tiny();
  c.slots = 1;
  EXPECT_THROW(om::OrderedMemory{c}, tb::ContractError);
  c = tiny();
  c.temperature = 0;
  EXPECT_THROW(om::OrderedMemory{c}, tb::ContractError);
}

TEST(Tree, IncreasingDepthsAreLeftBranching) {
  const std::vector<int> tok{1, 2, 3, 4}, d{0, 1, 2, 3};
  EXPECT_EQ(lo::to_sexpr(om::tree_from_depths(tok, d)), "( ( ( 1 2 ) 3 ) 4 )");
}

TEST(Tree, ConstantDepthsSplitLeftmost) {
  const std::vector<int> tok{1, 2, 3, 4}, d{1, 1, 1, 1};
  EXPECT_EQ(lo::to_sexpr(om::tree_from_depths(tok, d)), "( 1 ( 2 ( 3 4 ) ) )");
}

TEST(Tree, HandBuiltTraceRecoversConstituent) {
  // "[MIN 4 7 ]": push MIN into slot 0, push 4 into slot 1, reduce 7 into
  // slot 1, reduce ] into slot 0.
  const auto tokens = lo::tokenize("[MIN 4 7 ]");
  const std::vector<std::size_t> schedule{0, 1, 1, 0};
  om::OrderedMemory m(tiny(3, 1));
  num::Tape t;
  auto s = m.initial_state(t);
  for (std::size_t i = 0; i < tokens.size(); ++i)
    s = m.om_step_with_gates(t, s, m.embed(t, tokens[i]),
                             om::gates_from_distribution(t, t.constant(one_hot(3, schedule[i]))));
  EXPECT_EQ(om::merge_depths(s.gate_trace), (std::vector<int>{2, 1, 1, 2}));
  const auto tree = om::extract_tree(s.gate_trace, tokens);
  EXPECT_TRUE(spans(tree).count({1, 2})) << lo::to_sexpr(tree);
}

TEST(Tree, LengthMismatchIsRejected) {
  const std::vector<num::Tensor> trace{one_hot(3, 0)};
  const std::vector<int> tokens{1, 2};
  EXPECT_THROW(om::extract_tree(trace, tokens), tb::ContractError);
}

TEST(Tree, InducedTreeCoversEveryToken) {
  om::OrderedMemory m(tiny(4, 7));
  lo::GenConfig g;
  g.size = 100;
  g.max_depth = 4;
  for (const auto& e : lo::generate(g)) {
    const auto tree = m.induced_tree(e);
    ASSERT_TRUE(tree.has_value());
    std::vector<int> leaves;
    lo::collect_leaves(*tree, leaves);
    EXPECT_EQ(leaves, e.tokens);
  }
}
