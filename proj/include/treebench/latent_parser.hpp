#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "treebench/errors.hpp"
#include "treebench/listops.hpp"
#include "treebench/models.hpp"
#include "treebench/num/optimizer.hpp"
#include "treebench/num/parameter.hpp"
#include "treebench/num/tape.hpp"

// Shift-reduce parser whose actions come from a learned policy. REDUCE
// composes the two topmost stack states with a binary tree-LSTM cell; the
// root state is classified. The policy is trained by REINFORCE (optionally
// with a greedy self-critical baseline and PPO epochs), the composition by
// cross-entropy.
namespace treebench::latent_parser {

using listops::Example;
using listops::TreeNode;
using models::CellState;
using models::ForwardContext;
using num::ParameterSet;
using num::Tape;
using num::Tensor;
using num::Var;

enum class Action { kShift = 0, kReduce = 1 };

struct RLConfig {
  double entropy_coef = 0.0;
  bool self_critical = true;
  bool ppo = false;
  double clip = 0.2;
  std::size_t ppo_epochs = 4;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(entropy_coef >= 0)) throw ContractError("RLConfig: entropy coefficient must be >= 0");
    if (!(clip > 0 && clip < 1)) throw ContractError("RLConfig: clip must lie in (0,1)");
    if (ppo && ppo_epochs < 1) throw ContractError("RLConfig: ppo epochs must be >= 1");
  }
};

struct LatentConfig {
  std::size_t vocab_size = listops::kVocabSize;
  std::size_t embed_dim = 32;
  std::size_t hidden_dim = 32;
  double dropout = 0.0;
  std::uint64_t seed = 0;
  RLConfig rl;

  void validate() const {
    if (vocab_size < 1 || embed_dim < 1 || hidden_dim < 1)
      throw ContractError("LatentConfig: dimensions must be >= 1");
    if (!(dropout >= 0 && dropout < 1)) throw ContractError("LatentConfig: dropout must lie in [0,1)");
    rl.validate();
  }
};

struct ActionMask {
  bool shift = false;
  bool reduce = false;
  bool operator==(const ActionMask&) const = default;
};

struct LoggedAction {
  Action action;
  double log_prob;
};

struct ParseState {
  std::vector<int> tokens;
  std::vector<CellState> buffer;  // leaf states, consumed front to back
  std::size_t next = 0;
  std::vector<CellState> stack;
  std::vector<TreeNode> trees;  // parallel to stack
  std::vector<LoggedAction> action_log;

  std::size_t buffer_left() const { return buffer.size() - next; }
  bool done() const { return buffer_left() == 0 && stack.size() == 1; }
};

inline ActionMask legal_actions(std::size_t buffer_left, std::size_t stack_height) {
  if (buffer_left == 0 && stack_height == 1) throw ContractError("legal_actions: parse is complete");
  if (buffer_left == 0 && stack_height == 0) throw ContractError("legal_actions: empty parse");
  return {buffer_left > 0, stack_height >= 2};
}

inline ActionMask legal_actions(const ParseState& s) { return legal_actions(s.buffer_left(), s.stack.size()); }

enum class Mode { kSample, kGreedy };

struct ParseResult {
  CellState root;
  TreeNode tree;
  Var log_prob;  // sum over decisions that had two legal actions
  Var entropy;   // sum of per-decision entropies
  std::vector<Action> actions;
};

// -(sampled - baseline) * log_prob - coef * entropy.
inline Var reinforce_loss(Tape& t, double sampled_reward, double baseline_reward, Var log_prob, Var entropy,
                          double entropy_coef) {
  return t.add(t.scale(log_prob, -(sampled_reward - baseline_reward)), t.scale(entropy, -entropy_coef));
}

// Clipped surrogate for one trajectory: -min(r A, clip(r, 1-eps, 1+eps) A),
// r = exp(new - old). The clipped branch is a constant, so when it is the
// minimum the gradient is exactly zero.
inline Var ppo_term(Tape& t, Var new_log_prob, double old_log_prob, double advantage, double clip) {
  Var ratio = t.exp(t.affine(new_log_prob, 1.0, -old_log_prob));
  const double r = ratio.item();
  if (!std::isfinite(r)) throw NumericError("ppo_loss: non-finite ratio");
  const double clipped = std::clamp(r, 1.0 - clip, 1.0 + clip);
  if (clipped != r && clipped * advantage < r * advantage) return t.scalar(-clipped * advantage);
  return t.scale(ratio, -advantage);
}

// Batch mean of ppo_term.
inline Var ppo_loss(Tape& t, std::span<const Var> new_log_probs, std::span<const double> old_log_probs,
                    std::span<const double> advantages, double clip) {
  if (new_log_probs.empty() || new_log_probs.size() != old_log_probs.size() ||
      new_log_probs.size() != advantages.size())
    throw ContractError("ppo_loss: mismatched or empty trajectory batch");
  Var total = t.scalar(0.0);
  for (std::size_t i = 0; i < new_log_probs.size(); ++i)
    total = t.add(total, ppo_term(t, new_log_probs[i], old_log_probs[i], advantages[i], clip));
  return t.scale(total, 1.0 / static_cast<double>(new_log_probs.size()));
}

class LatentParser final : public models::Model {
 public:
  explicit LatentParser(const LatentConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    std::mt19937_64 rng(cfg.seed);
    const std::size_t H = cfg.hidden_dim;
    embed_ = std::make_unique<models::Embedding>(comp_, "embedding", cfg.vocab_size, cfg.embed_dim, rng);
    tree_ = std::make_unique<models::TreeComposer>(comp_, "tree", models::CellKind::kTreeLstm, cfg.embed_dim, H,
                                                   rng);
    cls_ = std::make_unique<models::Classifier>(comp_, "classifier", H, cfg.dropout, rng);
    policy_hidden_ = std::make_unique<models::Linear>(policy_, "policy.hidden", 3 * H, H, rng);
    policy_out_ = std::make_unique<models::Linear>(policy_, "policy.out", H, 2, rng);
  }

  const LatentConfig& config() const { return cfg_; }
  std::string kind() const override { return "latent_parser"; }
  std::vector<ParameterSet*> param_groups() override { return {&comp_, &policy_}; }
  ParameterSet& composition_params() { return comp_; }
  ParameterSet& policy_params() { return policy_; }

  ParseState initial_state(Tape& t, std::span<const int> tokens) const {
    if (tokens.empty()) throw ContractError("sample_parse: empty token sequence");
    ParseState s;
    s.tokens.assign(tokens.begin(), tokens.end());
    s.buffer.reserve(tokens.size());
    for (int tok : tokens) s.buffer.push_back(tree_->leaf(t, embed_->embed(t, static_cast<std::size_t>(tok))));
    return s;
  }

  // Action logits from (top, second, next buffer item); absent items are
  // zero vectors. Inputs are detached so the policy loss reaches only policy
  // parameters.
  Var policy_logits(Tape& t, const ParseState& s) const {
    const std::size_t H = cfg_.hidden_dim;
    auto feat = [&](const CellState* c) {
      return c ? t.detach(c->h) : t.constant(Tensor(num::Shape::vector(H)));
    };
    const std::size_t n = s.stack.size();
    Var top = feat(n >= 1 ? &s.stack[n - 1] : nullptr);
    Var second = feat(n >= 2 ? &s.stack[n - 2] : nullptr);
    Var next = feat(s.buffer_left() > 0 ? &s.buffer[s.next] : nullptr);
    return (*policy_out_)(t, t.tanh((*policy_hidden_)(t, t.concat({top, second, next}))));
  }

  void apply(Tape& t, ParseState& s, Action a) const {
    if (a == Action::kShift) {
      s.stack.push_back(s.buffer[s.next]);
      s.trees.push_back(TreeNode::leaf(s.tokens[s.next]));
      ++s.next;
      return;
    }
    CellState right = s.stack.back();
    s.stack.pop_back();
    CellState left = s.stack.back();
    s.stack.back() = tree_->binary(t, left, right);
    TreeNode r = std::move(s.trees.back());
    s.trees.pop_back();
    TreeNode l = std::move(s.trees.back());
    s.trees.back() = TreeNode::bracket({std::move(l), std::move(r)});
  }

  // Runs the parse to completion. With `forced` the given actions are
  // replayed (and checked for legality) instead of chosen.
  ParseResult parse(Tape& t, std::span<const int> tokens, Mode mode, std::mt19937_64* rng,
                    std::span<const Action> forced = {}) const {
    ParseState s = initial_state(t, tokens);
    const bool replay = !forced.empty();
    if (replay && forced.size() != 2 * tokens.size() - 1)
      throw ContractError("replay: action count must be 2n-1");
    if (mode == Mode::kSample && !replay && !rng) throw ContractError("sample_parse: sampling needs an rng");
    ParseResult out;
    out.log_prob = t.scalar(0.0);
    out.entropy = t.scalar(0.0);
    std::size_t step = 0;
    while (!s.done()) {
      const ActionMask m = legal_actions(s);
      Action a;
      double lp = 0.0;
      if (m.shift && m.reduce) {
        Var logits = policy_logits(t, s);
        Var logp = t.log_softmax(logits);
        const double ls = logp.value()[0], lr = logp.value()[1];
        if (replay) {
          a = forced[step];
        } else if (mode == Mode::kGreedy) {
          a = ls >= lr ? Action::kShift : Action::kReduce;
        } else {
          std::uniform_real_distribution<double> u(0.0, 1.0);
          a = u(*rng) < std::exp(ls) ? Action::kShift : Action::kReduce;
        }
        Var chosen = t.element(logp, static_cast<std::size_t>(a));
        lp = chosen.item();
        out.log_prob = t.add(out.log_prob, chosen);
        out.entropy = t.sub(out.entropy, t.sum(t.mul(t.softmax(logits), logp)));
      } else {
        a = m.shift ? Action::kShift : Action::kReduce;
        if (replay && forced[step] != a) throw ContractError("replay: illegal action at step " + std::to_string(step));
      }
      s.action_log.push_back({a, lp});
      out.actions.push_back(a);
      apply(t, s, a);
      ++step;
    }
    out.root = s.stack.front();
    out.tree = std::move(s.trees.front());
    return out;
  }

  ParseResult sample_parse(Tape& t, std::span<const int> tokens, Mode mode, std::mt19937_64* rng = nullptr) const {
    return parse(t, tokens, mode, rng);
  }

  Var classify(Tape& t, const ParseResult& p, ForwardContext& ctx) const { return cls_->logits(t, p.root.h, ctx); }

  Var logits(Tape& t, const Example& e, ForwardContext& ctx) override {
    return classify(t, parse(t, e.tokens, Mode::kGreedy, nullptr), ctx);
  }

  std::optional<TreeNode> induced_tree(const Example& e) override {
    Tape t;
    return parse(t, e.tokens, Mode::kGreedy, nullptr).tree;
  }


  // Composition: cross-entropy through the sampled tree. Policy: REINFORCE
  // with the greedy parse's reward as baseline when self-critical, or PPO
  // epochs over the stored trajectories. optimizers = {composition, policy}.
  models::BatchResult train_batch(std::span<const Example* const> batch,
                                  std::span<num::Optimizer* const> optimizers,
                                  models::StepContext& sc) override {
    if (batch.empty()) throw ContractError("train_batch: empty batch");
    if (optimizers.size() != 2) throw ContractError("latent_parser: needs composition and policy optimizers");
    if (!sc.rng) throw ContractError("latent_parser: training needs an rng");
    const RLConfig& rl = cfg_.rl;
    const double scale = 1.0 / static_cast<double>(batch.size());
    models::BatchResult res;
    struct Stored {
      const Example* e;
      std::vector<Action> actions;
      double old_log_prob;
      double advantage;
    };
    std::vector<Stored> stored;
    for (const Example* e : batch) {
      Tape t;
      ParseResult p = parse(t, e->tokens, Mode::kSample, sc.rng);
      ForwardContext ctx{true, sc.rng};
      Var logits = classify(t, p, ctx);
      Var ce = t.cross_entropy_with_logits(logits, static_cast<std::size_t>(e->label));
      const double reward = models::predict(logits.value()) == e->label ? 1.0 : 0.0;
      double baseline = 0.0;
      if (rl.self_critical) {
        Tape g;
        ForwardContext eval_ctx;
        baseline = models::predict(classify(g, parse(g, e->tokens, Mode::kGreedy, nullptr), eval_ctx).value()) ==
                           e->label
                       ? 1.0
                       : 0.0;
      }
      res.correct += reward > 0;
      ++res.count;
      Var loss = ce;
      if (rl.ppo) {
        stored.push_back({e, p.actions, p.log_prob.item(), reward - baseline});
      } else {
        loss = t.add(loss, reinforce_loss(t, reward, baseline, p.log_prob, p.entropy, rl.entropy_coef));
      }
      res.loss += loss.item() * scale;
      t.backward(t.scale(loss, scale));
    }
    auto groups = param_groups();
    if (sc.clip_norm > 0) groups[0]->clip_grad_norm(sc.clip_norm);
    optimizers[0]->step_allow_missing();
    if (!rl.ppo) {
      if (sc.clip_norm > 0) groups[1]->clip_grad_norm(sc.clip_norm);
      optimizers[1]->step_allow_missing();
      return res;
    }
    comp_.zero_grad();
    for (std::size_t epoch = 0; epoch < rl.ppo_epochs; ++epoch) {
      for (const Stored& st : stored) {
        Tape t;
        ParseResult p = parse(t, st.e->tokens, Mode::kSample, nullptr, st.actions);
        Var loss = t.add(ppo_term(t, p.log_prob, st.old_log_prob, st.advantage, rl.clip),
                         t.scale(p.entropy, -rl.entropy_coef));
        t.backward(t.scale(loss, scale));
      }
      comp_.zero_grad();  // replays compose leaves; only the policy is updated here
      if (sc.clip_norm > 0) groups[1]->clip_grad_norm(sc.clip_norm);
      optimizers[1]->step_allow_missing();
    }
    return res;
  }

 private:
  LatentConfig cfg_;
  ParameterSet comp_;
  ParameterSet policy_;
  std::unique_ptr<models::Embedding> embed_;
  std::unique_ptr<models::TreeComposer> tree_;
  std::unique_ptr<models::Classifier> cls_;
  std::unique_ptr<models::Linear> policy_hidden_, policy_out_;
};

}  // namespace treebench::latent_parser
