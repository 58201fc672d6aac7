#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "mpthcl/params.hpp"
#include "mpthcl/tensor.hpp"

namespace mpthcl {

struct GradCheckEntry {
  std::string tensor;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
  bool excluded = false;  // one-sided slopes disagree: a kink such as relu at 0
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0.0;
  std::size_t excluded = 0;
  bool passed = true;

  const GradCheckEntry* worst() const {
    const GradCheckEntry* w = nullptr;
    for (const auto& e : entries)
      if (!e.excluded && (!w || e.rel_error > w->rel_error)) w = &e;
    return w;
  }

  std::string summary() const {
    char buf[256];
    const auto* w = worst();
    std::snprintf(buf, sizeof buf, "%s: %zu coords, %zu excluded, max rel err %.3e%s%s",
                  passed ? "PASS" : "FAIL", entries.size(), excluded, max_rel_error,
                  w ? " at " : "", w ? (w->tensor + "[" + std::to_string(w->index) + "]").c_str() : "");
    return buf;
  }
};

struct GradCheckOptions {
  double eps = 1e-5;
  double tol = 1e-4;
  // Coordinates whose forward and backward slopes differ by more than this
  // (relative to max(1, |slope|)) sit on a nondifferentiable point.
  double kink_tol = 1e-3;
  // Denominator floor of the relative error; gradients much smaller than
  // this are effectively compared in absolute terms.
  double abs_floor = 1e-8;
  // Check at most this many coordinates per tensor, evenly strided. 0 = all.
  std::size_t max_coords_per_tensor = 0;
};

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

/// Central-difference check of d f() / d leaf for every listed leaf. `f`
/// must rebuild its graph from the current leaf values on each call and be
/// deterministic.
inline GradCheckReport grad_check(const std::function<Tensor()>& f, NamedTensors leaves,
                                  const GradCheckOptions& opt = {}) {
  if (!(opt.eps > 0.0 && opt.eps <= 1e-2))
    throw ShapeError("grad_check: eps must lie in (0, 1e-2], got " + std::to_string(opt.eps));
  for (auto& [_, t] : leaves) {
    if (!t.is_leaf()) throw ShapeError("grad_check: inputs must be leaf tensors");
    t.set_requires_grad(true);
    t.zero_grad();
  }
  const Tensor y = f();
  if (y.numel() != 1)
    throw ShapeError("grad_check: function output must be scalar, got " + shape_str(y.shape()));
  backward(y);
  const double f0 = y.item();

  auto eval = [&f]() { return f().item(); };
  GradCheckReport report;
  for (auto& [name, t] : leaves) {
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());
    const std::size_t n = t.numel();
    const std::size_t stride =
        opt.max_coords_per_tensor && n > opt.max_coords_per_tensor
            ? (n + opt.max_coords_per_tensor - 1) / opt.max_coords_per_tensor
            : 1;
    for (std::size_t i = 0; i < n; i += stride) {
      auto w = t.mutable_data();
      const double x0 = w[i];
      w[i] = x0 + opt.eps;
      const double fp = eval();
      w[i] = x0 - opt.eps;
      const double fm = eval();
      w[i] = x0;
      GradCheckEntry e;
      e.tensor = name;
      e.index = i;
      e.analytic = analytic[i];
      e.numeric = (fp - fm) / (2.0 * opt.eps);
      const double fwd = (fp - f0) / opt.eps;
      const double bwd = (f0 - fm) / opt.eps;
      e.excluded = std::abs(fwd - bwd) > opt.kink_tol * std::max({1.0, std::abs(fwd), std::abs(bwd)});
      e.rel_error = std::abs(e.analytic - e.numeric) /
                    std::max({std::abs(e.analytic), std::abs(e.numeric), opt.abs_floor});
      if (e.excluded) {
        ++report.excluded;
      } else {
        report.max_rel_error = std::max(report.max_rel_error, e.rel_error);
        if (!(e.rel_error < opt.tol)) report.passed = false;
      }
      report.entries.push_back(e);
    }
  }
  return report;
}

/// Single-input form: checks d f(x) / dx.
inline GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x,
                                  double eps, double tol) {
  GradCheckOptions opt;
  opt.eps = eps;
  opt.tol = tol;
  return grad_check([&f, x]() { return f(x); }, {{"x", x}}, opt);
}

/// Every tensor of a parameter store.
inline GradCheckReport grad_check(const std::function<Tensor()>& f, ParamStore& params,
                                  const GradCheckOptions& opt = {}) {
  NamedTensors leaves;
  for (auto& [name, t] : params) leaves.emplace_back(name, t);
  return grad_check(f, std::move(leaves), opt);
}

}  // namespace mpthcl
