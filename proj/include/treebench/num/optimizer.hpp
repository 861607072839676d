#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "treebench/errors.hpp"
#include "treebench/num/parameter.hpp"

namespace treebench::num {

enum class OptimizerKind { kSgd, kAdam, kAdadelta };

inline std::string_view to_string(OptimizerKind k) {
  switch (k) {
    case OptimizerKind::kSgd: return "sgd";
    case OptimizerKind::kAdam: return "adam";
    case OptimizerKind::kAdadelta: return "adadelta";
  }
  return "?";
}

inline OptimizerKind parse_optimizer(std::string_view s) {
  if (s == "sgd") return OptimizerKind::kSgd;
  if (s == "adam") return OptimizerKind::kAdam;
  if (s == "adadelta") return OptimizerKind::kAdadelta;
  throw ContractError("unknown optimizer: " + std::string(s));
}

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kAdadelta;
  double lr = 1.0;
  double beta1 = 0.9;    // adam
  double beta2 = 0.999;  // adam
  double rho = 0.95;     // adadelta
  double eps = 1e-6;

  static OptimizerConfig sgd(double lr) { return {OptimizerKind::kSgd, lr}; }
  static OptimizerConfig adam(double lr = 1e-3) {
    OptimizerConfig c{OptimizerKind::kAdam, lr};
    c.eps = 1e-8;
    return c;
  }
  static OptimizerConfig adadelta(double lr = 1.0) { return {OptimizerKind::kAdadelta, lr}; }

  // Conventional learning rate when the caller does not pick one.
  static OptimizerConfig defaults(OptimizerKind k) {
    switch (k) {
      case OptimizerKind::kSgd: return sgd(0.1);
      case OptimizerKind::kAdam: return adam();
      case OptimizerKind::kAdadelta: return adadelta();
    }
    return adadelta();
  }
};

// SGD, Adam and Adadelta over a fixed parameter set. Accumulators are created
// for exactly the parameters present at construction.
class Optimizer {
 public:
  Optimizer(ParameterSet& params, OptimizerConfig cfg) : params_(&params), cfg_(cfg) {
    if (!(cfg.lr > 0)) throw ContractError("optimizer: learning rate must be positive");
    for (const auto& p : params) {
      first_.push_back(Tensor::zeros_like(p->value));
      second_.push_back(Tensor::zeros_like(p->value));
    }
  }

  const OptimizerConfig& config() const { return cfg_; }
  std::uint64_t steps() const { return step_; }

  // Applies one update from the accumulated gradients, then zeroes them.
  // Parameters no backward has touched since the last step are an error.
  void step() {
    if (first_.size() != params_->size())
      throw ContractError("optimizer: parameter set changed after registration");
    for (const auto& p : *params_)
      if (!p->has_grad) throw ContractError("optimizer: missing gradient for " + p->name);
    ++step_;
    for (std::size_t i = 0; i < params_->size(); ++i) update((*params_)[i], first_[i], second_[i]);
    params_->zero_grad();
  }

  // Step variant tolerant of parameters that received no gradient this batch
  // (e.g. an embedding row set that was never looked up); treats them as zero.
  void step_allow_missing() {
    for (auto& p : *params_) p->has_grad = true;
    step();
  }

 private:
  void update(Parameter& p, Tensor& m, Tensor& v) {
    Tensor& w = p.value;
    const Tensor& g = p.grad;
    switch (cfg_.kind) {
      case OptimizerKind::kSgd:
        for (std::size_t k = 0; k < w.size(); ++k) w[k] -= cfg_.lr * g[k];
        break;
      case OptimizerKind::kAdam: {
        const double t = static_cast<double>(step_);
        const double c1 = 1.0 - std::pow(cfg_.beta1, t);
        const double c2 = 1.0 - std::pow(cfg_.beta2, t);
        for (std::size_t k = 0; k < w.size(); ++k) {
          m[k] = cfg_.beta1 * m[k] + (1 - cfg_.beta1) * g[k];
          v[k] = cfg_.beta2 * v[k] + (1 - cfg_.beta2) * g[k] * g[k];
          w[k] -= cfg_.lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + cfg_.eps);
        }
        break;
      }
      case OptimizerKind::kAdadelta:
        // m: running E[g^2], v: running E[dx^2].
        for (std::size_t k = 0; k < w.size(); ++k) {
          m[k] = cfg_.rho * m[k] + (1 - cfg_.rho) * g[k] * g[k];
          const double dx = -std::sqrt(v[k] + cfg_.eps) / std::sqrt(m[k] + cfg_.eps) * g[k];
          v[k] = cfg_.rho * v[k] + (1 - cfg_.rho) * dx * dx;
          w[k] += cfg_.lr * dx;
        }
        break;
    }
    if (!w.all_finite()) throw NumericError("optimizer: non-finite update for " + p.name);
  }

  ParameterSet* params_;
  OptimizerConfig cfg_;
  std::vector<Tensor> first_;
  std::vector<Tensor> second_;
  std::uint64_t step_ = 0;
};

}  // namespace treebench::num
