#pragma once

#include <cstdint>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "treebench/errors.hpp"
#include "treebench/listops.hpp"
#include "treebench/num/optimizer.hpp"
#include "treebench/num/parameter.hpp"
#include "treebench/num/tape.hpp"

namespace treebench::models {

using listops::Example;
using listops::TreeNode;
using num::Parameter;
using num::ParameterSet;
using num::Tape;
using num::Tensor;
using num::Var;

inline constexpr std::size_t kNumClasses = 10;

enum class CellKind { kLstm, kGru, kTreeLstm, kTreeGru };

inline std::string_view to_string(CellKind k) {
  switch (k) {
    case CellKind::kLstm: return "lstm";
    case CellKind::kGru: return "gru";
    case CellKind::kTreeLstm: return "tree_lstm";
    case CellKind::kTreeGru: return "tree_gru";
  }
  return "?";
}

inline CellKind parse_cell_kind(std::string_view s) {
  if (s == "lstm") return CellKind::kLstm;
  if (s == "gru") return CellKind::kGru;
  if (s == "tree_lstm") return CellKind::kTreeLstm;
  if (s == "tree_gru") return CellKind::kTreeGru;
  throw ContractError("unknown cell kind: " + std::string(s));
}

inline bool is_lstm_family(CellKind k) { return k == CellKind::kLstm || k == CellKind::kTreeLstm; }

struct ModelConfig {
  std::size_t vocab_size = listops::kVocabSize;
  std::size_t embed_dim = 32;
  std::size_t hidden_dim = 32;
  double dropout = 0.0;
  CellKind cell = CellKind::kTreeLstm;
  std::uint64_t seed = 0;

  void validate() const {
    if (vocab_size < 1 || embed_dim < 1 || hidden_dim < 1)
      throw ContractError("ModelConfig: dimensions must be >= 1");
    if (!(dropout >= 0 && dropout < 1)) throw ContractError("ModelConfig: dropout must lie in [0,1)");
  }
};

// Hidden vector plus, for the LSTM family, the memory cell.
struct CellState {
  Var h;
  std::optional<Var> c;
};

// Per-call switches for stochastic layers.
struct ForwardContext {
  bool training = false;
  std::mt19937_64* rng = nullptr;
};

class Embedding {
 public:
  Embedding(ParameterSet& ps, const std::string& name, std::size_t vocab, std::size_t dim,
            std::mt19937_64& rng) {
    Tensor t(num::Shape::matrix(vocab, dim));
    // Embedding rows are inputs, not fan-in sums; scale by 1/sqrt(dim).
    num::init_fan_in(t, dim, rng);
    table_ = &ps.add(name, std::move(t));
  }

  Var embed(Tape& t, std::size_t id) const { return t.embedding_lookup(t.param(*table_), id); }
  Parameter& table() const { return *table_; }
  std::size_t vocab() const { return table_->value.shape()[0]; }
  std::size_t dim() const { return table_->value.shape()[1]; }

 private:
  Parameter* table_;
};

// Affine layer y = W x + b.
class Linear {
 public:
  Linear(ParameterSet& ps, const std::string& name, std::size_t in, std::size_t out,
         std::mt19937_64& rng)
      : W_(&ps.add_weight(name + ".W", out, in, rng)), b_(&ps.add_bias(name + ".b", out, in, rng)) {}

  Var operator()(Tape& t, Var x) const { return t.add(t.matmul(t.param(*W_), x), t.param(*b_)); }
  Parameter& weight() const { return *W_; }
  Parameter& bias() const { return *b_; }
  std::size_t in_dim() const { return W_->value.shape()[1]; }
  std::size_t out_dim() const { return W_->value.shape()[0]; }

 private:
  Parameter* W_;
  Parameter* b_;
};

inline void check_dim(const Var& v, std::size_t n, const char* what) {
  if (v.shape().rank() != 1 || v.shape()[0] != n)
    throw ContractError(std::string(what) + ": expected vector of " + std::to_string(n) + ", got " +
                        v.shape().str());
}

class LstmCell {
 public:
  LstmCell(ParameterSet& ps, const std::string& name, std::size_t in, std::size_t hidden,
           std::mt19937_64& rng)
      : gates_(ps, name, in + hidden, 4 * hidden, rng), in_(in), hidden_(hidden) {}

  CellState zero_state(Tape& t) const {
    return {t.constant(Tensor(num::Shape::vector(hidden_))), t.constant(Tensor(num::Shape::vector(hidden_)))};
  }

  CellState step(Tape& t, const CellState& s, Var x) const {
    check_dim(x, in_, "lstm_step input");
    check_dim(s.h, hidden_, "lstm_step hidden");
    if (!s.c) throw ContractError("lstm_step: state has no memory cell");
    const std::size_t H = hidden_;
    Var z = gates_(t, t.concat({x, s.h}));
    Var i = t.sigmoid(t.slice(z, 0, H));
    Var f = t.sigmoid(t.slice(z, H, H));
    Var o = t.sigmoid(t.slice(z, 2 * H, H));
    Var g = t.tanh(t.slice(z, 3 * H, H));
    Var c = t.add(t.mul(f, *s.c), t.mul(i, g));
    return {t.mul(o, t.tanh(c)), c};
  }

  const Linear& gates() const { return gates_; }
  std::size_t hidden() const { return hidden_; }

 private:
  Linear gates_;
  std::size_t in_, hidden_;
};

// h' = (1 - z) * h + z * tanh(W_n [x; r * h] + b_n).
class GruCell {
 public:
  GruCell(ParameterSet& ps, const std::string& name, std::size_t in, std::size_t hidden,
          std::mt19937_64& rng)
      : gates_(ps, name + ".zr", in + hidden, 2 * hidden, rng),
        cand_(ps, name + ".n", in + hidden, hidden, rng),
        in_(in),
        hidden_(hidden) {}

  CellState zero_state(Tape& t) const { return {t.constant(Tensor(num::Shape::vector(hidden_))), {}}; }

  CellState step(Tape& t, const CellState& s, Var x) const {
    check_dim(x, in_, "gru_step input");
    check_dim(s.h, hidden_, "gru_step hidden");
    const std::size_t H = hidden_;
    Var zr = t.sigmoid(gates_(t, t.concat({x, s.h})));
    Var z = t.slice(zr, 0, H);
    Var r = t.slice(zr, H, H);
    Var n = t.tanh(cand_(t, t.concat({x, t.mul(r, s.h)})));
    Var h = t.add(t.mul(t.one_minus(z), s.h), t.mul(z, n));
    return {h, {}};
  }

  const Linear& gates() const { return gates_; }
  const Linear& candidate() const { return cand_; }
  std::size_t hidden() const { return hidden_; }

 private:
  Linear gates_;
  Linear cand_;
  std::size_t in_, hidden_;
};

// Binary tree-LSTM node with separate forget gates per child.
class TreeLstmComposer {
 public:
  TreeLstmComposer(ParameterSet& ps, const std::string& name, std::size_t hidden, std::mt19937_64& rng)
      : gates_(ps, name, 2 * hidden, 5 * hidden, rng), hidden_(hidden) {}

  CellState compose(Tape& t, const CellState& l, const CellState& r) const {
    check_dim(l.h, hidden_, "tree_lstm left");
    check_dim(r.h, hidden_, "tree_lstm right");
    if (!l.c || !r.c) throw ContractError("tree_lstm: child state has no memory cell");
    const std::size_t H = hidden_;
    Var z = gates_(t, t.concat({l.h, r.h}));
    Var i = t.sigmoid(t.slice(z, 0, H));
    Var fl = t.sigmoid(t.slice(z, H, H));
    Var fr = t.sigmoid(t.slice(z, 2 * H, H));
    Var o = t.sigmoid(t.slice(z, 3 * H, H));
    Var u = t.tanh(t.slice(z, 4 * H, H));
    Var c = t.add(t.add(t.mul(i, u), t.mul(fl, *l.c)), t.mul(fr, *r.c));
    return {t.mul(o, t.tanh(c)), c};
  }

  const Linear& gates() const { return gates_; }

 private:
  Linear gates_;
  std::size_t hidden_;
};

// GRU update with the left operand as previous state and a learned projection
// of the right operand as input.
class TreeGruComposer {
 public:
  TreeGruComposer(ParameterSet& ps, const std::string& name, std::size_t hidden, std::mt19937_64& rng)
      : proj_(ps, name + ".proj", hidden, hidden, rng), gru_(ps, name + ".gru", hidden, hidden, rng) {}

  CellState compose(Tape& t, const CellState& l, const CellState& r) const {
    return gru_.step(t, CellState{l.h, {}}, proj_(t, r.h));
  }

  const GruCell& gru() const { return gru_; }

 private:
  Linear proj_;
  GruCell gru_;
};

// Leaf states and variable-arity composition for gold trees.
class TreeComposer {
 public:
  TreeComposer(ParameterSet& ps, const std::string& name, CellKind kind, std::size_t embed_dim,
               std::size_t hidden, std::mt19937_64& rng)
      : kind_(kind) {
    if (kind == CellKind::kTreeLstm) {
      leaf_lstm_ = std::make_unique<LstmCell>(ps, name + ".leaf", embed_dim, hidden, rng);
      lstm_ = std::make_unique<TreeLstmComposer>(ps, name + ".compose", hidden, rng);
    } else if (kind == CellKind::kTreeGru) {
      leaf_gru_ = std::make_unique<GruCell>(ps, name + ".leaf", embed_dim, hidden, rng);
      gru_ = std::make_unique<TreeGruComposer>(ps, name + ".compose", hidden, rng);
    } else {
      throw ContractError("TreeComposer: kind must be tree_lstm or tree_gru");
    }
  }

  CellKind kind() const { return kind_; }

  // State of a token seen in isolation: one cell step from the zero state.
  CellState leaf(Tape& t, Var embedding) const {
    if (leaf_lstm_) return leaf_lstm_->step(t, leaf_lstm_->zero_state(t), embedding);
    return leaf_gru_->step(t, leaf_gru_->zero_state(t), embedding);
  }

  CellState binary(Tape& t, const CellState& l, const CellState& r) const {
    return lstm_ ? lstm_->compose(t, l, r) : gru_->compose(t, l, r);
  }

  // Left fold over children, seeded from the node's own embedding:
  // state <- binary(state, child) for each child in order.
  CellState compose(Tape& t, std::span<const CellState> children, Var node_embedding) const {
    if (children.empty()) throw ContractError("tree_compose: empty child list");
    CellState s = leaf(t, node_embedding);
    for (const auto& c : children) s = binary(t, s, c);
    return s;
  }

 private:
  CellKind kind_;
  std::unique_ptr<LstmCell> leaf_lstm_;
  std::unique_ptr<TreeLstmComposer> lstm_;
  std::unique_ptr<GruCell> leaf_gru_;
  std::unique_ptr<TreeGruComposer> gru_;
};

// Inverted dropout on the classifier input, then an affine map to 10 logits.
class Classifier {
 public:
  Classifier(ParameterSet& ps, const std::string& name, std::size_t hidden, double dropout,
             std::mt19937_64& rng)
      : out_(ps, name, hidden, kNumClasses, rng), dropout_(dropout) {}

  Var logits(Tape& t, Var h, ForwardContext& ctx) const {
    if (ctx.training && dropout_ > 0) {
      if (!ctx.rng) throw ContractError("classifier: dropout in training needs an rng");
      std::bernoulli_distribution keep(1.0 - dropout_);
      Tensor mask(h.shape());
      for (double& m : mask.data()) m = keep(*ctx.rng) ? 1.0 / (1.0 - dropout_) : 0.0;
      h = t.mul(h, t.constant(std::move(mask)));
    }
    return out_(t, h);
  }

  const Linear& layer() const { return out_; }

 private:
  Linear out_;
  double dropout_;
};

// Argmax with ties to the lowest class index.
inline int predict(const Tensor& logits) {
  int best = 0;
  for (std::size_t k = 1; k < logits.size(); ++k)
    if (logits[k] > logits[static_cast<std::size_t>(best)]) best = static_cast<int>(k);
  return best;
}

struct BatchResult {
  std::size_t correct = 0;
  std::size_t count = 0;
  double loss = 0;  // mean per-example objective
};

// Per-step training knobs the harness owns.
struct StepContext {
  std::mt19937_64* rng = nullptr;
  double clip_norm = 5.0;  // <= 0 disables clipping
};

// Common interface the training harness drives.
class Model {
 public:
  virtual ~Model() = default;

  virtual std::string kind() const = 0;
  // Parameters grouped by optimizer; most models have a single group.
  virtual std::vector<ParameterSet*> param_groups() = 0;
  virtual Var logits(Tape& t, const Example& e, ForwardContext& ctx) = 0;

  // Unlabeled bracketing over e.tokens for structure-inducing models.
  virtual std::optional<TreeNode> induced_tree(const Example&) { return std::nullopt; }

  // One optimizer step over a batch; optimizers align with param_groups().
  // Default: mean cross-entropy with gradients accumulated per example.
  virtual BatchResult train_batch(std::span<const Example* const> batch,
                                  std::span<num::Optimizer* const> optimizers, StepContext& sc) {
    if (batch.empty()) throw ContractError("train_batch: empty batch");
    auto groups = param_groups();
    if (optimizers.size() != groups.size()) throw ContractError("train_batch: optimizer/group count mismatch");
    BatchResult r;
    const double scale = 1.0 / static_cast<double>(batch.size());
    for (const Example* e : batch) {
      Tape t;
      ForwardContext ctx{true, sc.rng};
      Var logits = this->logits(t, *e, ctx);
      Var loss = t.cross_entropy_with_logits(logits, static_cast<std::size_t>(e->label));
      r.loss += loss.item() * scale;
      r.correct += models::predict(logits.value()) == e->label;
      ++r.count;
      t.backward(t.scale(loss, scale));
    }
    for (std::size_t g = 0; g < groups.size(); ++g) {
      if (sc.clip_norm > 0) groups[g]->clip_grad_norm(sc.clip_norm);
      optimizers[g]->step();
    }
    return r;
  }

  int predict(const Example& e) {
    Tape t;
    ForwardContext ctx;
    return models::predict(logits(t, e, ctx).value());
  }
};

// LSTM or GRU over the flat token sequence; classifies the final hidden state.
class SequenceModel final : public Model {
 public:
  explicit SequenceModel(const ModelConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    if (cfg.cell != CellKind::kLstm && cfg.cell != CellKind::kGru)
      throw ContractError("SequenceModel: cell must be lstm or gru");
    std::mt19937_64 rng(cfg.seed);
    embed_ = std::make_unique<Embedding>(ps_, "embedding", cfg.vocab_size, cfg.embed_dim, rng);
    if (cfg.cell == CellKind::kLstm)
      lstm_ = std::make_unique<LstmCell>(ps_, "lstm", cfg.embed_dim, cfg.hidden_dim, rng);
    else
      gru_ = std::make_unique<GruCell>(ps_, "gru", cfg.embed_dim, cfg.hidden_dim, rng);
    cls_ = std::make_unique<Classifier>(ps_, "classifier", cfg.hidden_dim, cfg.dropout, rng);
  }

  std::string kind() const override { return std::string(to_string(cfg_.cell)); }
  std::vector<ParameterSet*> param_groups() override { return {&ps_}; }
  ParameterSet& params() { return ps_; }

  Var logits(Tape& t, const Example& e, ForwardContext& ctx) override {
    if (e.tokens.empty()) throw ContractError("SequenceModel: empty token sequence");
    CellState s = lstm_ ? lstm_->zero_state(t) : gru_->zero_state(t);
    for (int tok : e.tokens) {
      Var x = embed_->embed(t, static_cast<std::size_t>(tok));
      s = lstm_ ? lstm_->step(t, s, x) : gru_->step(t, s, x);
    }
    return cls_->logits(t, s.h, ctx);
  }


 private:
  ModelConfig cfg_;
  ParameterSet ps_;
  std::unique_ptr<Embedding> embed_;
  std::unique_ptr<LstmCell> lstm_;
  std::unique_ptr<GruCell> gru_;
  std::unique_ptr<Classifier> cls_;
};

// Recursive composition over the gold tree. Reads only Example::gold_tree.
class GoldTreeModel final : public Model {
 public:
  explicit GoldTreeModel(const ModelConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    std::mt19937_64 rng(cfg.seed);
    embed_ = std::make_unique<Embedding>(ps_, "embedding", cfg.vocab_size, cfg.embed_dim, rng);
    tree_ = std::make_unique<TreeComposer>(ps_, "tree", cfg.cell, cfg.embed_dim, cfg.hidden_dim, rng);
    cls_ = std::make_unique<Classifier>(ps_, "classifier", cfg.hidden_dim, cfg.dropout, rng);
  }

  std::string kind() const override { return std::string(to_string(cfg_.cell)); }
  std::vector<ParameterSet*> param_groups() override { return {&ps_}; }
  ParameterSet& params() { return ps_; }
  const TreeComposer& composer() const { return *tree_; }

  CellState encode(Tape& t, const TreeNode& n) const {
    if (n.token < 0 || static_cast<std::size_t>(n.token) >= cfg_.vocab_size)
      throw ContractError("GoldTreeModel: node token outside vocabulary");
    Var e = embed_->embed(t, static_cast<std::size_t>(n.token));
    if (n.is_leaf()) return tree_->leaf(t, e);
    std::vector<CellState> kids;
    kids.reserve(n.children.size());
    for (const auto& c : n.children) kids.push_back(encode(t, c));
    return tree_->compose(t, kids, e);
  }

  Var logits(Tape& t, const Example& e, ForwardContext& ctx) override {
    return cls_->logits(t, encode(t, e.gold_tree).h, ctx);
  }


 private:
  ModelConfig cfg_;
  ParameterSet ps_;
  std::unique_ptr<Embedding> embed_;
  std::unique_ptr<TreeComposer> tree_;
  std::unique_ptr<Classifier> cls_;
};

// ---- checkpoints ------------------------------------------------------------
//
// Text container:
//   treebench-checkpoint 1
//   meta <key> <value>            (any number)
//   param <name> <rank> <dims...> <count>
//   <count values, %.17g, whitespace separated>
// Values are printed with 17 significant digits so save->load is exact.

inline void save_checkpoint(const std::string& path, const std::map<std::string, std::string>& meta,
                            const std::vector<ParameterSet*>& groups) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ContractError("cannot open checkpoint " + path + " for writing");
  out << "treebench-checkpoint 1\n";
  for (const auto& [k, v] : meta) out << "meta " << k << ' ' << v << '\n';
  out << std::setprecision(17);
  for (std::size_t g = 0; g < groups.size(); ++g) {
    for (const auto& p : *groups[g]) {
      const auto& s = p->value.shape();
      out << "param " << g << '/' << p->name << ' ' << s.rank();
      for (std::size_t i = 0; i < s.rank(); ++i) out << ' ' << s[i];
      out << ' ' << p->value.size() << '\n';
      for (std::size_t k = 0; k < p->value.size(); ++k) out << (k ? " " : "") << p->value[k];
      out << '\n';
    }
  }
  if (!out) throw ContractError("failed writing checkpoint " + path);
}

inline std::map<std::string, std::string> read_checkpoint_meta(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ContractError("cannot open checkpoint " + path);
  std::string line;
  std::getline(in, line);
  if (line != "treebench-checkpoint 1") throw ContractError(path + ": not a treebench checkpoint");
  std::map<std::string, std::string> meta;
  while (std::getline(in, line)) {
    if (line.rfind("meta ", 0) != 0) break;
    std::istringstream ls(line.substr(5));
    std::string k, v;
    ls >> k;
    std::getline(ls >> std::ws, v);
    meta[k] = v;
  }
  return meta;
}

// Loads parameter values into already-constructed groups; every parameter in
// the groups must be present with a matching shape.
inline void load_checkpoint(const std::string& path, const std::vector<ParameterSet*>& groups) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ContractError("cannot open checkpoint " + path);
  std::string word;
  std::map<std::string, Tensor> values;
  while (in >> word) {
    if (word != "param") {
      std::string rest;
      std::getline(in, rest);
      continue;
    }
    std::string name;
    std::size_t rank = 0;
    in >> name >> rank;
    std::vector<std::size_t> dims(rank);
    for (auto& d : dims) in >> d;
    std::size_t count = 0;
    in >> count;
    std::vector<double> data(count);
    for (auto& v : data) in >> v;
    if (!in) throw ContractError(path + ": truncated parameter " + name);
    num::Shape shape = rank == 0   ? num::Shape::scalar()
                       : rank == 1 ? num::Shape::vector(dims[0])
                                   : num::Shape::matrix(dims[0], dims[1]);
    values.emplace(name, Tensor(shape, std::move(data)));
  }
  for (std::size_t g = 0; g < groups.size(); ++g) {
    for (auto& p : *groups[g]) {
      const std::string key = std::to_string(g) + "/" + p->name;
      auto it = values.find(key);
      if (it == values.end()) throw ContractError(path + ": missing parameter " + key);
      p->value.check_same(it->second, ("checkpoint parameter " + key).c_str());
      p->value = it->second;
    }
  }
}

}  // namespace treebench::models
