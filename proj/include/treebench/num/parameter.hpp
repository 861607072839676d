#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "treebench/num/tensor.hpp"

namespace treebench::num {

// A trainable tensor. `grad` always has the value's shape; `has_grad` marks
// whether backward has written into it since the last zero_grad().
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool has_grad = false;

  Parameter(std::string n, Tensor v)
      : name(std::move(n)), value(std::move(v)), grad(Tensor::zeros_like(value)) {}

  void zero_grad() {
    grad.fill(0.0);
    has_grad = false;
  }
};

// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
inline void init_fan_in(Tensor& t, std::size_t fan_in, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(fan_in, 1)));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (double& v : t.data()) v = dist(rng);
}

// Owns parameters with stable addresses, in registration order.
class ParameterSet {
 public:
  ParameterSet() = default;
  ParameterSet(const ParameterSet&) = delete;
  ParameterSet& operator=(const ParameterSet&) = delete;
  ParameterSet(ParameterSet&&) = default;
  ParameterSet& operator=(ParameterSet&&) = default;

  Parameter& add(std::string name, Tensor value) {
    for (const auto& p : params_)
      if (p->name == name) throw ContractError("duplicate parameter name: " + name);
    params_.push_back(std::make_unique<Parameter>(std::move(name), std::move(value)));
    return *params_.back();
  }

  // Weight matrix (rows x cols), fan-in = cols.
  Parameter& add_weight(std::string name, std::size_t rows, std::size_t cols,
                        std::mt19937_64& rng) {
    Tensor t(Shape::matrix(rows, cols));
    init_fan_in(t, cols, rng);
    return add(std::move(name), std::move(t));
  }
  Parameter& add_bias(std::string name, std::size_t n, std::size_t fan_in,
                      std::mt19937_64& rng) {
    Tensor t(Shape::vector(n));
    init_fan_in(t, fan_in, rng);
    return add(std::move(name), std::move(t));
  }

  std::size_t size() const { return params_.size(); }
  Parameter& operator[](std::size_t i) { return *params_[i]; }
  const Parameter& operator[](std::size_t i) const { return *params_[i]; }

  Parameter* find(const std::string& name) {
    for (auto& p : params_)
      if (p->name == name) return p.get();
    return nullptr;
  }

  void zero_grad() {
    for (auto& p : params_) p->zero_grad();
  }

  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p->value.size();
    return n;
  }

  std::vector<Tensor> snapshot() const {
    std::vector<Tensor> out;
    out.reserve(params_.size());
    for (const auto& p : params_) out.push_back(p->value);
    return out;
  }
  void restore(const std::vector<Tensor>& values) {
    if (values.size() != params_.size()) throw ContractError("restore: parameter count mismatch");
    for (std::size_t i = 0; i < values.size(); ++i) {
      params_[i]->value.check_same(values[i], "restore");
      params_[i]->value = values[i];
    }
  }

  // Order-sensitive FNV-1a over the raw bits of every value.
  std::uint64_t checksum() const {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& p : params_) {
      for (double v : p->value.data()) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, sizeof bits);
        for (int b = 0; b < 8; ++b) {
          h ^= (bits >> (8 * b)) & 0xffU;
          h *= 1099511628211ULL;
        }
      }
    }
    return h;
  }

  double grad_norm() const {
    double s = 0;
    for (const auto& p : params_) s += squared_norm(p->grad);
    return std::sqrt(s);
  }

  // Rescales all gradients so their global L2 norm is at most max_norm.
  // Returns the norm before clipping.
  double clip_grad_norm(double max_norm) {
    const double norm = grad_norm();
    if (max_norm > 0 && norm > max_norm) {
      const double s = max_norm / norm;
      for (auto& p : params_) p->grad *= s;
    }
    return norm;
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
};

}  // namespace treebench::num
