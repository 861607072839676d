#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "treebench/errors.hpp"
#include "treebench/listops.hpp"
#include "treebench/models.hpp"
#include "treebench/num/parameter.hpp"
#include "treebench/num/tape.hpp"

// Stack-of-slots recurrent model with monotone slot gates and a one-token
// lookahead. Slot 0 is the deepest (root) slot; a step picks a slot k from a
// softmax over slots, reduces the current token together with every occupied
// slot at or above k through the recursive cell, writes the result into k and
// clears everything above it.
namespace treebench::ordered_memory {

using listops::Example;
using listops::TreeNode;
using models::ForwardContext;
using num::ParameterSet;
using num::Tape;
using num::Tensor;
using num::Var;

struct OMConfig {
  std::size_t vocab_size = listops::kVocabSize;
  std::size_t slots = 5;
  std::size_t hidden_dim = 32;
  std::size_t embed_dim = 32;
  double temperature = 1.0;
  double dropout = 0.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (slots < 2) throw ContractError("OMConfig: need at least 2 memory slots");
    if (vocab_size < 1 || hidden_dim < 1 || embed_dim < 1)
      throw ContractError("OMConfig: dimensions must be >= 1");
    if (!(temperature > 0)) throw ContractError("OMConfig: temperature must be positive");
    if (!(dropout >= 0 && dropout < 1)) throw ContractError("OMConfig: dropout must lie in [0,1)");
  }
};

// p: distribution over slots. cum[k] = sum_{j<=k} p_j. rev[k] = sum_{j>=k} p_j,
// the probability that slot k is occupied after the step.
struct OMGates {
  Var p, cum, rev;
};

struct OMState {
  std::vector<Var> memory;     // one hidden-dim row per slot
  std::vector<Var> occupancy;  // one length-1 vector per slot
  Var candidate;
  std::vector<Tensor> gate_trace;

  Tensor memory_matrix() const {
    const std::size_t h = memory.front().value().size();
    Tensor m(num::Shape::matrix(memory.size(), h));
    for (std::size_t j = 0; j < memory.size(); ++j)
      for (std::size_t k = 0; k < h; ++k) m.at(j, k) = memory[j].value()[k];
    return m;
  }
};

inline OMGates gates_from_distribution(Tape& t, Var p) {
  if (p.shape().rank() != 1) throw ContractError("om_gates: slot distribution must be a vector");
  Var cum = t.cumsum(p);
  return {p, cum, t.add(t.one_minus(cum), p)};
}

// Temperature softmax over raw slot scores plus both cumulative masks.
inline OMGates gates_from_scores(Tape& t, Var scores, double temperature) {
  if (scores.shape().rank() != 1) throw ContractError("om_gates: scores must be a vector");
  return gates_from_distribution(t, t.softmax(t.scale(scores, 1.0 / temperature)));
}

class OrderedMemory final : public models::Model {
 public:
  explicit OrderedMemory(const OMConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    std::mt19937_64 rng(cfg.seed);
    const std::size_t H = cfg.hidden_dim, E = cfg.embed_dim;
    embed_ = std::make_unique<models::Embedding>(ps_, "embedding", cfg.vocab_size, E, rng);
    eos_ = &ps_.add_bias("eos", E, E, rng);
    input_ = std::make_unique<models::Linear>(ps_, "input", E, H, rng);
    score_slot_ = std::make_unique<models::Linear>(ps_, "score.slot", H + 4, H, rng);
    score_cur_ = std::make_unique<models::Linear>(ps_, "score.current", E, H, rng);
    score_next_ = std::make_unique<models::Linear>(ps_, "score.next", E, H, rng);
    score_out_ = std::make_unique<models::Linear>(ps_, "score.out", H, 1, rng);
    cell_gates_ = std::make_unique<models::Linear>(ps_, "cell.gates", 2 * H, 2 * H, rng);
    cell_l1_ = std::make_unique<models::Linear>(ps_, "cell.l1", 2 * H, H, rng);
    cell_l2_ = std::make_unique<models::Linear>(ps_, "cell.l2", H, H, rng);
    {
      Tensor ones(num::Shape::vector(H));
      ones.fill(1.0);
      cell_skip_ = &ps_.add("cell.skip", std::move(ones));
    }
    cls_ = std::make_unique<models::Classifier>(ps_, "classifier", H, cfg.dropout, rng);
  }

  const OMConfig& config() const { return cfg_; }
  std::string kind() const override { return "ordered_memory"; }
  std::vector<ParameterSet*> param_groups() override { return {&ps_}; }
  ParameterSet& params() { return ps_; }
  const models::Linear& cell_gates() const { return *cell_gates_; }
  const models::Linear& score_out() const { return *score_out_; }

  Var embed(Tape& t, int token) const {
    if (token < 0) return t.param(*eos_);
    return embed_->embed(t, static_cast<std::size_t>(token));
  }
  Var eos(Tape& t) const { return t.param(*eos_); }

  OMState initial_state(Tape& t) const {
    OMState s;
    for (std::size_t j = 0; j < cfg_.slots; ++j) {
      s.memory.push_back(t.constant(Tensor(num::Shape::vector(cfg_.hidden_dim))));
      s.occupancy.push_back(t.constant(Tensor(num::Shape::vector(1))));
    }
    s.candidate = t.constant(Tensor(num::Shape::vector(cfg_.hidden_dim)));
    return s;
  }

  // out = z*u + (1-z)*cand, u = tanh(L2 relu(L1 [r*slot; cand]) + w*r*slot), [z;r] = sigmoid(G [slot; cand]).
  Var om_cell(Tape& t, Var slot, Var cand) const {
    const std::size_t H = cfg_.hidden_dim;
    models::check_dim(slot, H, "om_cell slot");
    models::check_dim(cand, H, "om_cell candidate");
    Var zr = t.sigmoid((*cell_gates_)(t, t.concat({slot, cand})));
    Var z = t.slice(zr, 0, H);
    Var r = t.slice(zr, H, H);
    Var rs = t.mul(r, slot);
    Var u = t.tanh(t.add((*cell_l2_)(t, t.relu((*cell_l1_)(t, t.concat({rs, cand})))), t.mul(t.param(*cell_skip_), rs)));
    return t.add(t.mul(z, u), t.mul(t.one_minus(z), cand));
  }

  // Slot j is scored from its content, the occupancy of slots j-1..j+2 (the
  // floor below slot 0 counts as occupied), the current and the next token.
  OMGates om_gates(Tape& t, const OMState& s, Var current, Var lookahead) const {
    check_state(s);
    models::check_dim(current, cfg_.embed_dim, "om_gates current");
    models::check_dim(lookahead, cfg_.embed_dim, "om_gates lookahead");
    const std::size_t M = cfg_.slots;
    Var tokens = t.add((*score_cur_)(t, current), (*score_next_)(t, lookahead));
    Var floor = t.constant(Tensor::vector({1.0}));
    Var above = t.constant(Tensor::vector({0.0}));
    auto occ = [&](std::ptrdiff_t j) {
      if (j < 0) return floor;
      if (j >= static_cast<std::ptrdiff_t>(M)) return above;
      return s.occupancy[static_cast<std::size_t>(j)];
    };
    std::vector<Var> scores;
    scores.reserve(M);
    for (std::size_t j = 0; j < M; ++j) {
      const auto jj = static_cast<std::ptrdiff_t>(j);
      Var feat = t.concat({s.memory[j], occ(jj - 1), occ(jj), occ(jj + 1), occ(jj + 2)});
      Var hid = t.tanh(t.add((*score_slot_)(t, feat), tokens));
      scores.push_back((*score_out_)(t, hid));
    }
    return gates_from_scores(t, t.concat(scores), cfg_.temperature);
  }

  // Applies given gates. r_M = candidate; r_j = o_j * cell(M_j, r_{j+1}) +
  // (1 - o_j) * r_{j+1}; M'_j = (1 - cum_j) * M_j + p_j * r_j; o'_j = rev_j.
  OMState om_step_with_gates(Tape& t, const OMState& s, Var current, const OMGates& g) const {
    check_state(s);
    const std::size_t M = cfg_.slots;
    if (g.p.value().size() != M) throw ContractError("om_step: gate size differs from slot count");
    Var cand = t.tanh((*input_)(t, current));
    std::vector<Var> reduced(M);
    Var r = cand;
    for (std::size_t j = M; j-- > 0;) {
      Var o = s.occupancy[j];
      r = t.add(t.mul_scalar(om_cell(t, s.memory[j], r), o), t.mul_scalar(r, t.one_minus(o)));
      reduced[j] = r;
    }
    OMState next;
    next.memory.reserve(M);
    next.occupancy.reserve(M);
    for (std::size_t j = 0; j < M; ++j) {
      Var keep = t.one_minus(t.element(g.cum, j));
      Var write = t.element(g.p, j);
      next.memory.push_back(t.add(t.mul_scalar(s.memory[j], keep), t.mul_scalar(reduced[j], write)));
      next.occupancy.push_back(t.slice(g.rev, j, 1));
    }
    next.candidate = cand;
    next.gate_trace = s.gate_trace;
    next.gate_trace.push_back(g.p.value());
    return next;
  }

  OMState om_step(Tape& t, const OMState& s, Var current, Var lookahead) const {
    return om_step_with_gates(t, s, current, om_gates(t, s, current, lookahead));
  }

  OMState run(Tape& t, std::span<const int> tokens) const {
    if (tokens.empty()) throw ContractError("run_om: empty token sequence");
    OMState s = initial_state(t);
    s.gate_trace.reserve(tokens.size());
    Var cur = embed(t, tokens[0]);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      Var next = i + 1 < tokens.size() ? embed(t, tokens[i + 1]) : eos(t);
      s = om_step(t, s, cur, next);
      cur = next;
    }
    return s;
  }

  Var readout(Tape& t, const OMState& s, ForwardContext& ctx) const {
    return cls_->logits(t, s.memory[0], ctx);
  }

  Var logits(Tape& t, const Example& e, ForwardContext& ctx) override {
    return readout(t, run(t, e.tokens), ctx);
  }

  std::optional<TreeNode> induced_tree(const Example& e) override;


 private:
  void check_state(const OMState& s) const {
    if (s.memory.size() != cfg_.slots || s.occupancy.size() != cfg_.slots)
      throw ContractError("om: state slot count differs from config");
  }

  OMConfig cfg_;
  ParameterSet ps_;
  std::unique_ptr<models::Embedding> embed_;
  num::Parameter* eos_;
  num::Parameter* cell_skip_;
  std::unique_ptr<models::Linear> input_;
  std::unique_ptr<models::Linear> score_slot_, score_cur_, score_next_, score_out_;
  std::unique_ptr<models::Linear> cell_gates_, cell_l1_, cell_l2_;
  std::unique_ptr<models::Classifier> cls_;
};

// Binary bracketing from per-token merge depths. The boundary before token i
// carries depths[i]; the deepest boundary splits first, leftmost on ties.
inline TreeNode tree_from_depths(std::span<const int> tokens, std::span<const int> depths) {
  if (tokens.empty()) throw ContractError("tree_from_depths: empty sequence");
  if (tokens.size() != depths.size()) throw ContractError("tree_from_depths: length mismatch");
  auto build = [&](auto&& self, std::size_t lo, std::size_t hi) -> TreeNode {
    if (hi - lo == 1) return TreeNode::leaf(tokens[lo]);
    std::size_t split = lo + 1;
    for (std::size_t i = lo + 2; i < hi; ++i)
      if (depths[i] > depths[split]) split = i;
    return TreeNode::bracket({self(self, lo, split), self(self, split, hi)});
  };
  return build(build, 0, tokens.size());
}

// Reads the argmax slot of each step as a merge depth (slots - 1 - slot: a
// reduction into a deeper slot closes a larger constituent).
inline std::vector<int> merge_depths(std::span<const Tensor> trace) {
  std::vector<int> d;
  d.reserve(trace.size());
  for (const auto& p : trace) {
    if (p.empty()) throw ContractError("extract_tree: empty gate record");
    const int k = models::predict(p);
    d.push_back(static_cast<int>(p.size()) - 1 - k);
  }
  return d;
}

inline TreeNode extract_tree(std::span<const Tensor> trace, std::span<const int> tokens) {
  if (trace.size() != tokens.size()) throw ContractError("extract_tree: trace/token length mismatch");
  const auto d = merge_depths(trace);
  return tree_from_depths(tokens, d);
}

inline std::optional<TreeNode> OrderedMemory::induced_tree(const Example& e) {
  Tape t;
  const OMState s = run(t, e.tokens);
  return extract_tree(s.gate_trace, e.tokens);
}

}  // namespace treebench::ordered_memory
