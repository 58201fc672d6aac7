#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "mpthcl/params.hpp"

namespace mpthcl {

struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t t = 0;
  GradientMap m;
  GradientMap v;
};

/// One bias-corrected Adam update. Moments for a parameter are created at
/// zero on first sight.
inline void adam_step(ParamStore& params, const GradientMap& grads, AdamState& state) {
  for (auto& [name, p] : params) {
    auto g = grads.find(name);
    if (g == grads.end()) throw ShapeError("adam_step: no gradient for '" + name + "'");
    if (g->second.size() != p.numel())
      throw ShapeError("adam_step: gradient for '" + name + "' has " +
                       std::to_string(g->second.size()) + " entries, parameter " +
                       shape_str(p.shape()));
    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.empty()) m.assign(p.numel(), 0.0);
    if (v.empty()) v.assign(p.numel(), 0.0);
    if (m.size() != p.numel() || v.size() != p.numel())
      throw ShapeError("adam_step: moment shape mismatch for '" + name + "'");
  }
  ++state.t;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  for (auto& [name, p] : params) {
    const auto& g = grads.at(name);
    auto& m = state.m[name];
    auto& v = state.v[name];
    auto w = p.mutable_data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      w[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

/// Convenience: step on the gradients currently held by the parameters.
inline void adam_step(ParamStore& params, AdamState& state) {
  adam_step(params, collect_grads(params), state);
}

}  // namespace mpthcl
