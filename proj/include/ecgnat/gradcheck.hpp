#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "ecgnat/ops.hpp"
#include "ecgnat/tensor.hpp"

// Finite-difference gradient checker. Always runs in double: central
// differences at eps=1e-5 lose too many digits in float to separate a wrong
// adjoint from rounding noise.

namespace ecgnat {

struct GradCheckResult {
  bool ok = true;
  double max_rel_err = 0.0;
  std::string worst;  // "input 2, elem 17: analytic=..., central=..."

  explicit operator bool() const { return ok; }
};

struct GradCheckOptions {
  double eps = 1e-5;
  double tol = 1e-5;   // relative tolerance
  double atol = 1e-7;  // absolute floor: central differences bottom out near
                       // eps_machine * |f| / eps, so gradients at that scale
                       // carry no usable digits
  // check at most this many coordinates per input (sampled without
  // replacement); <=0 means every coordinate
  int64_t max_coords_per_input = -1;
  Rng* rng = nullptr;  // required when sampling coordinates
  // skip coordinates where central estimates at eps and eps/2 disagree:
  // there the function is not smooth at the probe scale (a relu corner in
  // the interval), so the difference quotient estimates no derivative and
  // says nothing about the tape. A wrong adjoint still fails — its two
  // central estimates agree with each other and not with the analytic value.
  bool skip_nonsmooth = false;
};

// fn maps the inputs to a scalar loss; it must be a pure function of the
// input values (it is re-run many times with perturbed entries).
inline GradCheckResult grad_check(std::vector<Tensor<double>> inputs,
                                  const std::function<Tensor<double>(std::vector<Tensor<double>>&)>& fn,
                                  GradCheckOptions opt = {}) {
  // analytic pass
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  std::vector<std::vector<double>> analytic;
  {
    Graph<double> g;
    GraphScope<double> scope(g);
    Tensor<double> loss = fn(inputs);
    check(loss.numel() == 1, "grad_check: fn must return a scalar");
    g.backward(loss);
  }
  for (auto& t : inputs) analytic.push_back(t.has_grad() ? t.grad() : std::vector<double>(size_t(t.numel()), 0.0));

  auto eval = [&]() {
    // forward only, no tape
    double v;
    {
      for (auto& t : inputs) t.set_requires_grad(false);
      Tensor<double> loss = fn(inputs);
      v = loss.item();
      for (auto& t : inputs) t.set_requires_grad(true);
    }
    return v;
  };

  GradCheckResult res;
  for (size_t ii = 0; ii < inputs.size(); ++ii) {
    auto& t = inputs[ii];
    std::vector<int64_t> coords;
    if (opt.max_coords_per_input > 0 && opt.max_coords_per_input < t.numel()) {
      check(opt.rng != nullptr, "grad_check: coordinate sampling needs an rng");
      coords = opt.rng->sample_without_replacement(t.numel(), opt.max_coords_per_input);
    } else {
      coords.resize(size_t(t.numel()));
      for (int64_t i = 0; i < t.numel(); ++i) coords[size_t(i)] = i;
    }
    for (int64_t c : coords) {
      const double saved = t.data()[c];
      t.data()[c] = saved + opt.eps;
      const double fp = eval();
      t.data()[c] = saved - opt.eps;
      const double fm = eval();
      const double central = (fp - fm) / (2.0 * opt.eps);
      if (opt.skip_nonsmooth) {
        t.data()[c] = saved + opt.eps / 2;
        const double fp2 = eval();
        t.data()[c] = saved - opt.eps / 2;
        const double fm2 = eval();
        const double central2 = (fp2 - fm2) / opt.eps;
        const double cscale = std::max(std::fabs(central), std::fabs(central2)) + opt.atol / opt.tol;
        if (std::fabs(central - central2) / cscale > 1e-3) {
          t.data()[c] = saved;
          continue;
        }
      }
      t.data()[c] = saved;
      const double a = analytic[ii][size_t(c)];
      // rel < tol  <=>  |a - central| < atol + tol * max(|a|, |central|)
      const double scale = std::max(std::fabs(a), std::fabs(central)) + opt.atol / opt.tol;
      const double rel = std::fabs(a - central) / scale;
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst = "input " + std::to_string(ii) + ", elem " + std::to_string(c) +
                    ": analytic=" + std::to_string(a) + ", central=" + std::to_string(central);
      }
      if (rel >= opt.tol) res.ok = false;
    }
  }
  return res;
}

}  // namespace ecgnat
