#pragma once

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "mpthcl/rng.hpp"
#include "mpthcl/tensor.hpp"

namespace mpthcl {

/// Trainable tensors addressed by dotted path ("mpt.visual.block0.w_q").
/// Iteration follows insertion order so optimizer state and checkpoints
/// line up across runs.
class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor t) {
    if (index_.count(name)) throw ShapeError("duplicate parameter '" + name + "'");
    t.set_requires_grad(true);
    index_[name] = entries_.size();
    entries_.emplace_back(name, std::move(t));
    return entries_.back().second;
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  Tensor& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ShapeError("unknown parameter '" + name + "'");
    return entries_[it->second].second;
  }
  const Tensor& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ShapeError("unknown parameter '" + name + "'");
    return entries_[it->second].second;
  }

  std::size_t size() const { return entries_.size(); }
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : entries_) n += t.numel();
    return n;
  }

  void zero_grad() {
    for (auto& [_, t] : entries_) t.zero_grad();
  }

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::map<std::string, std::size_t> index_;
};

using GradientMap = std::map<std::string, std::vector<double>>;

inline GradientMap collect_grads(const ParamStore& params) {
  GradientMap g;
  for (const auto& [name, t] : params) {
    if (t.has_grad())
      g[name] = std::vector<double>(t.grad().begin(), t.grad().end());
    else
      g[name] = std::vector<double>(t.numel(), 0.0);
  }
  return g;
}

// Initializers.

inline Tensor xavier_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  return uniform({fan_in, fan_out}, rng, -a, a);
}

/// Orthonormal columns (n x n) by Gram-Schmidt on a Gaussian draw.
inline Tensor orthogonal(std::size_t n, Rng& rng) {
  std::vector<double> q(n * n);
  for (auto& v : q) v = rng.normal();
  for (std::size_t c = 0; c < n; ++c) {
    for (int pass = 0; pass < 2; ++pass)
      for (std::size_t p = 0; p < c; ++p) {
        double dot = 0.0;
        for (std::size_t r = 0; r < n; ++r) dot += q[r * n + c] * q[r * n + p];
        for (std::size_t r = 0; r < n; ++r) q[r * n + c] -= dot * q[r * n + p];
      }
    double norm = 0.0;
    for (std::size_t r = 0; r < n; ++r) norm += q[r * n + c] * q[r * n + c];
    norm = std::sqrt(norm);
    for (std::size_t r = 0; r < n; ++r) q[r * n + c] /= norm;
  }
  return Tensor({n, n}, std::move(q));
}

/// x W + b with W stored in x d_out.
struct Affine {
  Tensor w;
  Tensor b;

  std::size_t in_dim() const { return w.dim(0); }
  std::size_t out_dim() const { return w.dim(1); }
};

inline Affine make_affine(ParamStore& ps, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng) {
  return {ps.add(prefix + ".w", xavier_uniform(in, out, rng)), ps.add(prefix + ".b", Tensor::zeros({out}))};
}

inline Tensor apply(const Affine& f, const Tensor& x) { return add(matmul(x, f.w), f.b); }

}  // namespace mpthcl
