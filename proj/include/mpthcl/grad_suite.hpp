#pragma once

// Finite-difference checks of every module on small random instances,
// shared by the CLI `grad-check` command and the acceptance run.

#include <cmath>
#include <string>
#include <vector>

#include "mpthcl/encoders.hpp"
#include "mpthcl/grad_check.hpp"
#include "mpthcl/graph_rgcn.hpp"
#include "mpthcl/losses.hpp"
#include "mpthcl/mpt.hpp"

namespace mpthcl {

struct SuiteCase {
  std::string module;
  std::string name;  // e.g. "softmax#3"
  GradCheckReport report;
};

inline const std::vector<std::string>& grad_suite_modules() {
  static const std::vector<std::string> m{"tensor", "encoders", "graph_rgcn", "mpt", "losses"};
  return m;
}

namespace detail {

// sum(w * y) with fixed random w, so every output entry matters.
inline Tensor probe_sum(const Tensor& y, std::uint64_t seed) {
  Rng rng = Rng::for_stream(seed, Stream::kTest, 1);
  return sum(mul(y, randn(y.shape(), rng)));
}

inline Tensor away_from_zero(Shape shape, Rng& rng) {
  auto t = randn(std::move(shape), rng);
  for (auto& v : t.mutable_data()) v = (v >= 0 ? 1 : -1) * (std::abs(v) + 0.1);
  return t;
}

inline void tensor_cases(std::size_t instances, std::uint64_t seed, std::vector<SuiteCase>& out) {
  for (int pk = 0; pk <= static_cast<int>(Primitive::kScale); ++pk) {
    const auto kind = static_cast<Primitive>(pk);
    Rng rng = Rng::for_stream(seed, Stream::kTest, 100 + pk);
    for (std::size_t trial = 0; trial < instances; ++trial) {
      const std::size_t r = 1 + rng.below(4), c = 1 + rng.below(5), k = 1 + rng.below(4);
      std::vector<Tensor> in;
      PrimitiveAttrs attrs;
      switch (kind) {
        case Primitive::kMatmul: in = {randn({r, k}, rng), randn({k, c}, rng)}; break;
        case Primitive::kAdd:
        case Primitive::kSub:
        case Primitive::kMul: in = {randn({r, c}, rng), trial % 2 ? randn({c}, rng) : randn({r, c}, rng)}; break;
        case Primitive::kConcat:
          attrs.axis = trial % 2;
          in = {randn({r, c}, rng), trial % 2 ? randn({r, k}, rng) : randn({k, c}, rng)};
          break;
        case Primitive::kSlice:
          attrs.axis = trial % 2;
          attrs.start = 1;
          attrs.end = trial % 2 ? c + 1 : r + 1;
          in = {randn({r + 1, c + 1}, rng)};
          break;
        case Primitive::kSum:
        case Primitive::kMean:
          if (trial % 3) attrs.axis = trial % 2;
          in = {randn({r, c}, rng)};
          break;
        case Primitive::kSoftmax:
        case Primitive::kLogSoftmax:
          attrs.axis = trial % 2;
          in = {randn({r, c + 1}, rng, 2.0)};
          break;
        case Primitive::kLog: {
          auto x = randn({r, c}, rng);
          for (auto& v : x.mutable_data()) v = 0.5 + std::abs(v);
          in = {x};
          break;
        }
        case Primitive::kRelu:
        case Primitive::kLeakyRelu:
          attrs.slope = 0.2;
          in = {away_from_zero({r, c}, rng)};
          break;
        case Primitive::kLayerNorm: in = {randn({r, c + 1}, rng), randn({c + 1}, rng), randn({c + 1}, rng)}; break;
        case Primitive::kL2Normalize: in = {randn({r, c + 1}, rng)}; break;
        case Primitive::kDropout:
          attrs.p = 0.3;
          attrs.training = trial % 2 == 0;
          in = {randn({r, c}, rng)};
          break;
        case Primitive::kScale:
          attrs.factor = rng.normal();
          in = {randn({r, c}, rng)};
          break;
        default: in = {randn({r, c}, rng)};
      }
      NamedTensors leaves;
      for (std::size_t i = 0; i < in.size(); ++i) leaves.emplace_back("in" + std::to_string(i), in[i]);
      auto f = [&]() {
        Rng drop(42);  // same mask on every evaluation
        PrimitiveAttrs a = attrs;
        a.rng = &drop;
        return probe_sum(apply_primitive(kind, in, a), trial);
      };
      out.push_back({"tensor", std::string(primitive_name(kind)) + "#" + std::to_string(trial), grad_check(f, leaves)});
    }
  }
}

inline void encoder_cases(std::size_t instances, std::uint64_t seed, std::vector<SuiteCase>& out) {
  for (std::size_t t = 0; t < instances; ++t) {
    Rng rng = Rng::for_stream(seed, Stream::kTest, 200 + t);
    const std::size_t d = 8, L = 4, d_in = 5;
    {
      ParamStore ps;
      auto p = make_bilstm(ps, "lstm", d_in, d, rng);
      auto x = ps.add("input", randn({L, d_in}, rng));
      out.push_back({"encoders", "encode_context#" + std::to_string(t),
                     grad_check([&] { return probe_sum(encode_context(x, p), t); }, ps)});
    }
    {
      ParamStore ps;
      auto p = make_gate_filter(ps, "filter", d, 2, 0.01, rng);
      p.b_gate.mutable_data()[0] = 0.3;  // keep gate logits off the leaky kink
      auto h = ps.add("input", randn({L, d}, rng));
      out.push_back({"encoders", "modal_feature_filter#" + std::to_string(t),
                     grad_check([&] { return probe_sum(modal_feature_filter(h, p).prompt, t); }, ps)});
    }
  }
}

inline void graph_cases(std::size_t instances, std::uint64_t seed, std::vector<SuiteCase>& out) {
  for (std::size_t t = 0; t < instances; ++t) {
    Rng rng = Rng::for_stream(seed, Stream::kTest, 300 + t);
    const std::size_t d = 8, L = 5;
    ParamStore ps;
    auto layer = make_rgcn_layer(ps, "rgcn", d, 2, rng);
    auto h = ps.add("input", randn({L, d}, rng));
    std::vector<int> speakers;
    for (std::size_t i = 0; i < L; ++i) speakers.push_back(static_cast<int>(rng.below(2)));
    auto f = [&] {
      const auto g = build_graph(speakers, 2, 2);
      return probe_sum(enhance_text(rgcn_forward(h, g, layer.speaker, RelationFamily::kSpeaker),
                                    rgcn_forward(h, g, layer.context, RelationFamily::kContext)),
                       t);
    };
    out.push_back({"graph_rgcn", "rgcn#" + std::to_string(t), grad_check(f, ps)});
  }
}

inline void mpt_cases(std::size_t instances, std::uint64_t seed, std::vector<SuiteCase>& out) {
  for (std::size_t t = 0; t < instances; ++t) {
    Rng rng = Rng::for_stream(seed, Stream::kTest, 400 + t);
    const std::size_t d = 8, L = 3;
    ParamStore ps;
    auto stack = make_mpt_stack(ps, "mpt", d, 2, 2, 4 * d, 0.0, rng);
    auto p = ps.add("prompt", randn({L, d}, rng));
    auto x = ps.add("text", randn({L, d}, rng));
    out.push_back({"mpt", "mpt_forward#" + std::to_string(t),
                   grad_check([&] { return probe_sum(mpt_forward(p, x, stack), t); }, ps)});
  }
}

inline void loss_cases(std::size_t instances, std::uint64_t seed, std::vector<SuiteCase>& out) {
  for (std::size_t t = 0; t < instances; ++t) {
    Rng rng = Rng::for_stream(seed, Stream::kTest, 500 + t);
    const std::size_t B = 5, d = 4, J = 3;
    ParamStore ps;
    auto u = make_ucl(ps, "ucl", d, rng);
    auto proj = make_affine(ps, "scl.proj", 2 * d, d, rng);
    auto head = make_affine(ps, "classifier", 3 * d, J, rng);
    auto xm = ps.add("x_mpt", randn({B, 2 * d}, rng));
    auto st = ps.add("s_t", randn({B, d}, rng));
    auto sa = ps.add("s_a", randn({B, d}, rng));
    auto sv = ps.add("s_v", randn({B, d}, rng));
    std::vector<int> y(B);
    for (auto& v : y) v = static_cast<int>(rng.below(J));
    y[1] = y[0];
    const std::string n = "#" + std::to_string(t);
    out.push_back({"losses", "ucl" + n, grad_check([&] { return ucl_loss(xm, {st, sa, sv}, u); }, ps)});
    out.push_back({"losses", "scl" + n, grad_check([&] { return scl_loss(st, xm, y, proj, 0.5); }, ps)});
    out.push_back({"losses", "cross_entropy" + n,
                   grad_check([&] { return cross_entropy(classify(concat({st, xm}, 1), head), y); }, ps)});
  }
}

}  // namespace detail

/// Runs the checks of one module ("tensor", "encoders", "graph_rgcn",
/// "mpt", "losses") or of all of them ("all").
inline std::vector<SuiteCase> run_grad_suite(const std::string& module, std::size_t instances = 5,
                                             std::uint64_t seed = 1) {
  std::vector<SuiteCase> out;
  const bool all = module == "all";
  bool known = all;
  for (const auto& m : grad_suite_modules()) known = known || m == module;
  if (!known) throw ShapeError("unknown module '" + module + "' (tensor, encoders, graph_rgcn, mpt, losses, all)");
  if (all || module == "tensor") detail::tensor_cases(instances, seed, out);
  if (all || module == "encoders") detail::encoder_cases(instances, seed, out);
  if (all || module == "graph_rgcn") detail::graph_cases(instances, seed, out);
  if (all || module == "mpt") detail::mpt_cases(instances, seed, out);
  if (all || module == "losses") detail::loss_cases(instances, seed, out);
  return out;
}

}  // namespace mpthcl
