#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "treebench/num/parameter.hpp"
#include "treebench/num/tape.hpp"

namespace treebench::num {

namespace detail {

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) /
         std::max({1.0, std::abs(analytic), std::abs(numeric)});
}

inline double eval_scalar(const std::function<Var(Tape&)>& f) {
  Tape tape;
  Var out = f(tape);
  if (out.value().size() != 1) throw ContractError("grad_check: function is not scalar-valued");
  const double v = out.value()[0];
  if (!std::isfinite(v)) throw NumericError("grad_check: non-finite function value");
  return v;
}

}  // namespace detail

// Compares tape gradients of a scalar function against central differences
// over every coordinate of `inputs`. Returns
// max |analytic - numeric| / max(1, |analytic|, |numeric|).
inline double grad_check(const std::function<Var(Tape&, std::span<const Var>)>& f,
                         std::vector<Tensor> inputs, double eps = 1e-5) {
  if (!(eps > 0)) throw ContractError("grad_check: eps must be positive");
  auto run = [&](Tape& tape) {
    std::vector<Var> vars;
    vars.reserve(inputs.size());
    for (const Tensor& t : inputs) vars.push_back(tape.leaf(t));
    return std::pair{f(tape, vars), vars};
  };

  Tape tape;
  auto [out, vars] = run(tape);
  if (out.value().size() != 1) throw ContractError("grad_check: function is not scalar-valued");
  tape.backward(out);
  std::vector<Tensor> analytic;
  for (Var v : vars) analytic.push_back(tape.grad(v));

  double worst = 0;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    for (std::size_t k = 0; k < inputs[t].size(); ++k) {
      const double orig = inputs[t][k];
      inputs[t][k] = orig + eps;
      const double up = detail::eval_scalar([&](Tape& tp) { return run(tp).first; });
      inputs[t][k] = orig - eps;
      const double down = detail::eval_scalar([&](Tape& tp) { return run(tp).first; });
      inputs[t][k] = orig;
      worst = std::max(worst, detail::relative_error(analytic[t][k], (up - down) / (2 * eps)));
    }
  }
  return worst;
}

inline double grad_check(const std::function<Var(Tape&, Var)>& f, const Tensor& x,
                         double eps = 1e-5) {
  return grad_check([&](Tape& t, std::span<const Var> v) { return f(t, v[0]); },
                    std::vector<Tensor>{x}, eps);
}

// Same check over every coordinate of every parameter in `params`. The
// function must build its graph through Tape::param so gradients land in the
// parameter set. Parameter values are restored afterwards.
inline double grad_check_params(const std::function<Var(Tape&)>& f, ParameterSet& params,
                                double eps = 1e-5) {
  if (!(eps > 0)) throw ContractError("grad_check: eps must be positive");
  params.zero_grad();
  {
    Tape tape;
    Var out = f(tape);
    if (out.value().size() != 1) throw ContractError("grad_check: function is not scalar-valued");
    tape.backward(out);
  }
  double worst = 0;
  for (auto& p : params) {
    const Tensor analytic = p->grad;
    for (std::size_t k = 0; k < p->value.size(); ++k) {
      const double orig = p->value[k];
      p->value[k] = orig + eps;
      const double up = detail::eval_scalar(f);
      p->value[k] = orig - eps;
      const double down = detail::eval_scalar(f);
      p->value[k] = orig;
      worst = std::max(worst, detail::relative_error(analytic[k], (up - down) / (2 * eps)));
    }
  }
  params.zero_grad();
  return worst;
}

}  // namespace treebench::num
