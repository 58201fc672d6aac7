#pragma once

// Shared helpers for the unit suites. The finite-difference routine here is
// deliberately separate from mpthcl::grad_check so that the checker itself
// can be tested against it.

#include <cmath>
#include <functional>
#include <vector>

#include "mpthcl/rng.hpp"
#include "mpthcl/tensor.hpp"

namespace testutil {

inline mpthcl::Tensor rand_tensor(mpthcl::Shape shape, mpthcl::Rng& rng, double scale = 1.0) {
  return mpthcl::randn(std::move(shape), rng, scale);
}

/// Values bounded away from zero (|x| >= margin), for kinked primitives.
inline mpthcl::Tensor rand_away_from_zero(mpthcl::Shape shape, mpthcl::Rng& rng, double margin = 0.1) {
  auto t = mpthcl::randn(std::move(shape), rng);
  for (auto& v : t.mutable_data()) v = (v >= 0 ? 1 : -1) * (std::abs(v) + margin);
  return t;
}

/// sum(w * y) with fixed random weights: a scalar whose gradient reaches
/// every entry of y without the cancellations a plain sum can cause.
inline mpthcl::Tensor weighted_sum(const mpthcl::Tensor& y, std::uint64_t seed = 99) {
  mpthcl::Rng rng(seed);
  auto w = mpthcl::randn(y.shape(), rng);
  return mpthcl::sum(mpthcl::mul(y, w));
}

/// Central differences of a scalar function of the current contents of x.
inline std::vector<double> numeric_grad(const std::function<double()>& f, mpthcl::Tensor x,
                                        double eps = 1e-5) {
  std::vector<double> g(x.numel());
  auto w = x.mutable_data();
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double x0 = w[i];
    w[i] = x0 + eps;
    const double fp = f();
    w[i] = x0 - eps;
    const double fm = f();
    w[i] = x0;
    g[i] = (fp - fm) / (2 * eps);
  }
  return g;
}

inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

inline void fill(mpthcl::Tensor& t, std::initializer_list<double> v) {
  std::size_t i = 0;
  for (double x : v) t.mutable_data()[i++] = x;
}

}  // namespace testutil
