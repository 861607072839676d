#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "treebench/errors.hpp"

namespace treebench::listops {

enum class Semantics { kMin, kMax, kMed, kSumMod, kFirst, kLast, kProdMod };

struct OperatorSpec {
  std::string_view name;
  std::string_view token;
  int min_arity;
  Semantics semantics;
};

// Token ids: digits 0-9 are ids 0-9, the closing bracket is 10, operators
// follow in this table's order.
inline constexpr std::array<OperatorSpec, 7> kOperators = {{
    {"MIN", "[MIN", 1, Semantics::kMin},
    {"MAX", "[MAX", 1, Semantics::kMax},
    {"MED", "[MED", 1, Semantics::kMed},
    {"SM", "[SM", 1, Semantics::kSumMod},
    {"FIRST", "[FIRST", 1, Semantics::kFirst},
    {"LAST", "[LAST", 1, Semantics::kLast},
    {"PROD", "[PROD", 1, Semantics::kProdMod},
}};

inline constexpr int kClose = 10;
inline constexpr int kFirstOperator = 11;
inline constexpr int kVocabSize = kFirstOperator + static_cast<int>(kOperators.size());

inline bool is_digit(int tok) { return tok >= 0 && tok <= 9; }
inline bool is_operator(int tok) { return tok >= kFirstOperator && tok < kVocabSize; }
inline const OperatorSpec& operator_of(int tok) {
  if (!is_operator(tok)) throw ContractError("token " + std::to_string(tok) + " is not an operator");
  return kOperators[static_cast<std::size_t>(tok - kFirstOperator)];
}
inline int operator_token(Semantics s) {
  for (std::size_t i = 0; i < kOperators.size(); ++i)
    if (kOperators[i].semantics == s) return kFirstOperator + static_cast<int>(i);
  throw ContractError("unknown semantics");
}

inline std::string token_text(int tok) {
  if (is_digit(tok)) return std::string(1, static_cast<char>('0' + tok));
  if (tok == kClose) return "]";
  return std::string(operator_of(tok).token);
}

// Maps one surface token to its id; `index` is used for error reporting.
inline int token_id(std::string_view s, std::size_t index) {
  if (s == "]") return kClose;
  if (!s.empty() && std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; })) {
    if (s.size() == 1) return s[0] - '0';
    throw ParseError("digit outside 0-9: '" + std::string(s) + "'", index);
  }
  for (std::size_t i = 0; i < kOperators.size(); ++i)
    if (kOperators[i].token == s) return kFirstOperator + static_cast<int>(i);
  throw ParseError("unknown token '" + std::string(s) + "'", index);
}

// Whitespace-split tokenization. Parentheses emitted by some ListOps
// distributions carry no information and are dropped.
inline std::vector<int> tokenize(std::string_view text) {
  std::vector<int> out;
  std::istringstream in{std::string(text)};
  std::string w;
  std::size_t index = 0;
  while (in >> w) {
    if (w == "(" || w == ")") continue;
    out.push_back(token_id(w, index++));
  }
  return out;
}

inline std::string join_tokens(std::span<const int> tokens) {
  std::string s;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) s += ' ';
    s += token_text(tokens[i]);
  }
  return s;
}

// Operator-or-digit node. Gold trees carry the operator token on internal
// nodes; induced (unlabeled) bracketings use token = -1 for internal nodes and
// may have any vocabulary token at the leaves.
struct TreeNode {
  int token = -1;
  std::vector<TreeNode> children;

  static TreeNode leaf(int tok) { return {tok, {}}; }
  static TreeNode internal(int op_tok, std::vector<TreeNode> kids) { return {op_tok, std::move(kids)}; }
  static TreeNode bracket(std::vector<TreeNode> kids) { return {-1, std::move(kids)}; }

  bool is_leaf() const { return children.empty(); }
  bool operator==(const TreeNode&) const = default;
};

// Operator nesting depth; a lone digit has depth 0.
inline int depth(const TreeNode& n) {
  int d = 0;
  for (const auto& c : n.children) d = std::max(d, depth(c));
  return n.is_leaf() ? 0 : d + 1;
}

inline std::size_t leaf_count(const TreeNode& n) {
  if (n.is_leaf()) return 1;
  std::size_t c = 0;
  for (const auto& k : n.children) c += leaf_count(k);
  return c;
}

inline std::size_t internal_count(const TreeNode& n) {
  if (n.is_leaf()) return 0;
  std::size_t c = 1;
  for (const auto& k : n.children) c += internal_count(k);
  return c;
}

inline void collect_leaves(const TreeNode& n, std::vector<int>& out) {
  if (n.is_leaf()) {
    out.push_back(n.token);
    return;
  }
  for (const auto& c : n.children) collect_leaves(c, out);
}

// Bracketed s-expression, e.g. "( ( [MIN 4 ) ( 7 ] ) )". Leaves print their
// token text; every internal node prints as a parenthesized group.
inline std::string to_sexpr(const TreeNode& n) {
  if (n.is_leaf()) return token_text(n.token);
  std::string s = "(";
  for (const auto& c : n.children) s += " " + to_sexpr(c);
  return s + " )";
}

inline int apply(Semantics sem, std::vector<int> values) {
  if (values.empty()) throw ContractError("operator applied to an empty argument list");
  switch (sem) {
    case Semantics::kMin: return *std::min_element(values.begin(), values.end());
    case Semantics::kMax: return *std::max_element(values.begin(), values.end());
    case Semantics::kMed: {
      std::sort(values.begin(), values.end());
      const std::size_t n = values.size();
      if (n % 2 == 1) return values[n / 2];
      return ((values[n / 2 - 1] + values[n / 2]) / 2) % 10;
    }
    case Semantics::kSumMod: {
      int s = 0;
      for (int v : values) s = (s + v) % 10;
      return s;
    }
    case Semantics::kFirst: return values.front();
    case Semantics::kLast: return values.back();
    case Semantics::kProdMod: {
      int p = 1;
      for (int v : values) p = (p * v) % 10;
      return p;
    }
  }
  throw ContractError("unknown semantics");
}

inline int evaluate_tree(const TreeNode& node) {
  if (node.is_leaf()) {
    if (is_digit(node.token)) return node.token;
    if (is_operator(node.token)) throw ContractError("operator node with zero children");
    throw ContractError("leaf is not a digit: " + std::to_string(node.token));
  }
  if (!is_operator(node.token)) throw ContractError("internal node without an operator");
  std::vector<int> vals;
  vals.reserve(node.children.size());
  for (const auto& c : node.children) vals.push_back(evaluate_tree(c));
  return apply(operator_of(node.token).semantics, std::move(vals));
}

// Evaluates a token sequence left to right with an explicit frame stack,
// without building a tree. Independent of parse_tokens/evaluate_tree.
inline int reduce_stream(std::span<const int> tokens) {
  struct Frame {
    Semantics sem;
    int min_arity;
    std::vector<int> args;
  };
  std::vector<Frame> stack;
  std::optional<int> result;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const int tok = tokens[i];
    if (result) throw ParseError("trailing tokens after complete expression", i);
    if (is_operator(tok)) {
      const auto& spec = operator_of(tok);
      stack.push_back({spec.semantics, spec.min_arity, {}});
    } else if (is_digit(tok)) {
      if (stack.empty()) {
        result = tok;
      } else {
        stack.back().args.push_back(tok);
      }
    } else if (tok == kClose) {
      if (stack.empty()) throw ParseError("unbalanced closing bracket", i);
      Frame f = std::move(stack.back());
      stack.pop_back();
      if (static_cast<int>(f.args.size()) < f.min_arity) throw ParseError("empty argument list", i);
      const int v = apply(f.sem, std::move(f.args));
      if (stack.empty()) {
        result = v;
      } else {
        stack.back().args.push_back(v);
      }
    } else {
      throw ParseError("unknown token id " + std::to_string(tok), i);
    }
  }
  if (!stack.empty()) throw ParseError("unbalanced bracket", tokens.size());
  if (!result) throw ParseError("empty sequence", 0);
  return *result;
}

namespace detail {

inline TreeNode parse_expr(std::span<const int> toks, std::size_t& pos) {
  if (pos >= toks.size()) throw ParseError("unbalanced bracket", toks.size());
  const int tok = toks[pos];
  if (is_digit(tok)) {
    ++pos;
    return TreeNode::leaf(tok);
  }
  if (tok == kClose) throw ParseError("unexpected closing bracket", pos);
  if (!is_operator(tok)) throw ParseError("unknown token id " + std::to_string(tok), pos);
  ++pos;
  std::vector<TreeNode> kids;
  while (true) {
    if (pos >= toks.size()) throw ParseError("unbalanced bracket", toks.size());
    if (toks[pos] == kClose) {
      if (static_cast<int>(kids.size()) < operator_of(tok).min_arity)
        throw ParseError("empty argument list", pos);
      ++pos;
      return TreeNode::internal(tok, std::move(kids));
    }
    kids.push_back(parse_expr(toks, pos));
  }
}

}  // namespace detail

inline TreeNode parse_tokens(std::span<const int> tokens) {
  if (tokens.empty()) throw ParseError("empty sequence", 0);
  std::size_t pos = 0;
  TreeNode root = detail::parse_expr(tokens, pos);
  if (pos != tokens.size()) {
    if (tokens[pos] == kClose) throw ParseError("unbalanced closing bracket", pos);
    throw ParseError("trailing tokens after complete expression", pos);
  }
  return root;
}

inline TreeNode parse_tokens(std::string_view text) {
  const auto ids = tokenize(text);
  return parse_tokens(std::span<const int>(ids));
}

inline std::vector<int> to_tokens(const TreeNode& n) {
  std::vector<int> out;
  auto rec = [&](auto&& self, const TreeNode& t) -> void {
    if (t.is_leaf()) {
      out.push_back(t.token);
      return;
    }
    out.push_back(t.token);
    for (const auto& c : t.children) self(self, c);
    out.push_back(kClose);
  };
  rec(rec, n);
  return out;
}

// Gold tree re-expressed over the full token sequence: each operator node
// becomes a bracket spanning its opening token, its arguments, and its `]`.
// Leaf count equals the token count, so it can be scored against induced
// bracketings.
inline TreeNode token_tree(const TreeNode& gold) {
  if (gold.is_leaf()) return TreeNode::leaf(gold.token);
  std::vector<TreeNode> kids;
  kids.push_back(TreeNode::leaf(gold.token));
  for (const auto& c : gold.children) kids.push_back(token_tree(c));
  kids.push_back(TreeNode::leaf(kClose));
  return TreeNode::bracket(std::move(kids));
}

struct Example {
  std::vector<int> tokens;
  int label = 0;
  TreeNode gold_tree;

  bool operator==(const Example&) const = default;
};

inline Example make_example(TreeNode tree) {
  Example e;
  e.tokens = to_tokens(tree);
  e.label = evaluate_tree(tree);
  e.gold_tree = std::move(tree);
  return e;
}

inline std::string serialize_example(const Example& e) {
  return std::to_string(e.label) + "\t" + join_tokens(e.tokens);
}

// Parses one `label<TAB>tokens` line and re-derives the gold tree. The stored
// label must agree with the tree's value.
inline Example parse_example_line(std::string_view line) {
  const auto tab = line.find('\t');
  if (tab == std::string_view::npos) throw ContractError("dataset line has no TAB separator");
  std::string_view a = line.substr(0, tab), b = line.substr(tab + 1);
  auto is_label = [](std::string_view s) { return s.size() == 1 && s[0] >= '0' && s[0] <= '9'; };
  if (!is_label(a) && is_label(b)) std::swap(a, b);  // sequence-first layout
  if (!is_label(a)) throw ContractError("label must be a single digit, got '" + std::string(a) + "'");
  Example e;
  e.label = a[0] - '0';
  e.tokens = tokenize(b);
  e.gold_tree = parse_tokens(std::span<const int>(e.tokens));
  const int v = evaluate_tree(e.gold_tree);
  if (v != e.label)
    throw ContractError("label " + std::to_string(e.label) + " disagrees with evaluated value " +
                        std::to_string(v));
  return e;
}

using Dataset = std::vector<Example>;

enum class OperatorSet { kD20s, kD5c };

inline std::string_view to_string(OperatorSet s) { return s == OperatorSet::kD20s ? "d20s" : "d5c"; }
inline OperatorSet parse_operator_set(std::string_view s) {
  if (s == "d20s") return OperatorSet::kD20s;
  if (s == "d5c") return OperatorSet::kD5c;
  throw ContractError("unknown operator set: " + std::string(s));
}

inline std::vector<int> operator_tokens(OperatorSet s) {
  const std::size_t n = s == OperatorSet::kD20s ? 4 : 7;
  std::vector<int> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(kFirstOperator + static_cast<int>(i));
  return out;
}

struct GenConfig {
  OperatorSet ops = OperatorSet::kD20s;
  int max_depth = 20;
  int max_args = 5;
  double branch_prob = 0.25;
  int max_length = 130;
  std::size_t size = 1000;
  std::uint64_t seed = 0;

  // Fewest tokens any generated example can have: `[OP` + args + `]`.
  int min_length() const { return 2 + std::min(2, max_args); }

  void validate() const {
    if (max_depth < 1) throw ContractError("GenConfig: max_depth must be >= 1");
    if (max_args < 1) throw ContractError("GenConfig: max_args must be >= 1");
    if (!(branch_prob > 0 && branch_prob < 1)) throw ContractError("GenConfig: branch_prob must lie in (0,1)");
    if (size < 1) throw ContractError("GenConfig: size must be >= 1");
    if (max_length < min_length())
      throw ContractError("GenConfig: max_length " + std::to_string(max_length) +
                          " cannot fit any expression (need >= " + std::to_string(min_length()) + ")");
  }
};

// SplitMix64 finalizer: decorrelates per-example seeds.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

namespace detail {

inline TreeNode grow(const GenConfig& cfg, const std::vector<int>& ops, int level,
                     std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> pick_op(0, ops.size() - 1);
  std::uniform_int_distribution<int> pick_arity(std::min(2, cfg.max_args), cfg.max_args);
  std::uniform_int_distribution<int> pick_digit(0, 9);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  const int op = ops[pick_op(rng)];
  const int arity = pick_arity(rng);
  std::vector<TreeNode> kids;
  kids.reserve(static_cast<std::size_t>(arity));
  for (int i = 0; i < arity; ++i) {
    if (level < cfg.max_depth && coin(rng) < cfg.branch_prob)
      kids.push_back(grow(cfg, ops, level + 1, rng));
    else
      kids.push_back(TreeNode::leaf(pick_digit(rng)));
  }
  return TreeNode::internal(op, std::move(kids));
}

}  // namespace detail

// Example `index` of the dataset described by cfg. Pure in (cfg, index), so
// workers may generate disjoint index ranges and concatenate in order.
inline Example generate_one(const GenConfig& cfg, std::size_t index) {
  const auto ops = operator_tokens(cfg.ops);
  std::mt19937_64 rng(mix_seed(cfg.seed, index));
  for (int attempt = 0; attempt < 100000; ++attempt) {
    TreeNode t = detail::grow(cfg, ops, 1, rng);
    // Token count: 2 per operator node plus one per digit.
    const std::size_t len = 2 * internal_count(t) + leaf_count(t);
    if (len <= static_cast<std::size_t>(cfg.max_length)) return make_example(std::move(t));
  }
  throw ContractError("GenConfig: length cap rejected 100000 consecutive samples");
}

inline Dataset generate(const GenConfig& cfg) {
  cfg.validate();
  Dataset out;
  out.reserve(cfg.size);
  for (std::size_t i = 0; i < cfg.size; ++i) out.push_back(generate_one(cfg, i));
  return out;
}

inline Dataset subset(const Dataset& d, std::size_t n) {
  if (n > d.size())
    throw ContractError("subset: requested " + std::to_string(n) + " of " + std::to_string(d.size()) +
                        " examples");
  return Dataset(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(n));
}

inline void write_dataset(const std::string& path, const Dataset& d) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ContractError("cannot open " + path + " for writing");
  for (const auto& e : d) out << serialize_example(e) << '\n';
}

// Reads a TSV dataset. Blank lines and a non-numeric header line are skipped;
// at most `limit` examples are read (0 = all).
inline Dataset read_dataset(const std::string& path, std::size_t limit = 0) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ContractError("cannot open dataset " + path);
  Dataset d;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (lineno == 1 && line.find('\t') != std::string::npos) {
      const auto a = line.substr(0, line.find('\t'));
      const auto b = line.substr(line.find('\t') + 1);
      const bool numeric_a = a.size() == 1 && std::isdigit(static_cast<unsigned char>(a[0]));
      const bool numeric_b = b.size() == 1 && std::isdigit(static_cast<unsigned char>(b[0]));
      if (!numeric_a && !numeric_b && a.find('[') == std::string::npos) continue;  // header
    }
    try {
      d.push_back(parse_example_line(line));
    } catch (const std::exception& e) {
      throw ContractError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    if (limit && d.size() >= limit) break;
  }
  return d;
}

}  // namespace treebench::listops
