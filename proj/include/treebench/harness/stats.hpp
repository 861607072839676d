#pragma once

#include <cmath>
#include <limits>
#include <set>
#include <span>
#include <utility>
#include <vector>

#include <boost/math/distributions/fisher_f.hpp>

#include "treebench/errors.hpp"
#include "treebench/listops.hpp"

namespace treebench::harness {

// Stop iff the last two epoch-to-epoch changes are both strictly negative.
inline bool early_stop_check(std::span<const double> history) {
  const std::size_t n = history.size();
  if (n < 3) return false;
  return history[n - 1] < history[n - 2] && history[n - 2] < history[n - 3];
}

struct AnovaResult {
  double f = 0;
  double p = 1;
  std::size_t df_between = 0;
  std::size_t df_within = 0;
};

inline AnovaResult anova_oneway(const std::vector<std::vector<double>>& groups) {
  if (groups.size() < 2) throw ContractError("anova_oneway: need at least 2 groups");
  std::size_t n = 0;
  double grand = 0;
  for (const auto& g : groups) {
    if (g.size() < 2) throw ContractError("anova_oneway: every group needs at least 2 values");
    for (double v : g) grand += v;
    n += g.size();
  }
  grand /= static_cast<double>(n);
  double ss_between = 0, ss_within = 0;
  for (const auto& g : groups) {
    double m = 0;
    for (double v : g) m += v;
    m /= static_cast<double>(g.size());
    ss_between += static_cast<double>(g.size()) * (m - grand) * (m - grand);
    for (double v : g) ss_within += (v - m) * (v - m);
  }
  AnovaResult r;
  r.df_between = groups.size() - 1;
  r.df_within = n - groups.size();
  const double ms_between = ss_between / static_cast<double>(r.df_between);
  const double ms_within = ss_within / static_cast<double>(r.df_within);
  if (ms_within == 0) {
    if (ms_between == 0) return r;  // identical constant groups
    r.f = std::numeric_limits<double>::infinity();
    r.p = 0;
    return r;
  }
  r.f = ms_between / ms_within;
  boost::math::fisher_f dist(static_cast<double>(r.df_between), static_cast<double>(r.df_within));
  r.p = boost::math::cdf(boost::math::complement(dist, r.f));
  return r;
}

inline double mean(std::span<const double> v) {
  if (v.empty()) throw ContractError("mean: empty sample");
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

// Sample standard deviation (n - 1); 0 for a single value.
inline double stddev(std::span<const double> v) {
  if (v.size() < 2) return 0;
  const double m = mean(v);
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

using Span = std::pair<std::size_t, std::size_t>;  // [first, last] leaf indices

namespace detail {
inline std::size_t collect_spans(const listops::TreeNode& n, std::size_t start, std::set<Span>& out) {
  if (n.is_leaf()) return 1;
  std::size_t len = 0;
  for (const auto& c : n.children) len += collect_spans(c, start + len, out);
  if (len >= 2) out.insert({start, start + len - 1});
  return len;
}
}  // namespace detail

// Unlabeled constituent spans of length >= 2, excluding the whole sentence.
inline std::set<Span> constituent_spans(const listops::TreeNode& tree) {
  std::set<Span> s;
  const std::size_t n = detail::collect_spans(tree, 0, s);
  s.erase({0, n - 1});
  return s;
}

// Both span sets empty counts as a perfect match.
inline double parsing_f1(const listops::TreeNode& induced, const listops::TreeNode& gold) {
  if (listops::leaf_count(induced) != listops::leaf_count(gold))
    throw ContractError("parsing_f1: leaf counts differ");
  const auto a = constituent_spans(induced), b = constituent_spans(gold);
  if (a.empty() && b.empty()) return 1.0;
  std::size_t hit = 0;
  for (const auto& s : a) hit += b.count(s);
  if (hit == 0) return 0.0;
  const double p = static_cast<double>(hit) / static_cast<double>(a.size());
  const double r = static_cast<double>(hit) / static_cast<double>(b.size());
  return 2 * p * r / (p + r);
}

}  // namespace treebench::harness
