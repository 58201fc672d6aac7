#pragma once

// Per-modality context capture and the modal feature filter that turns
// audio/visual context states into prompt features for the text stream.

#include <cmath>
#include <string>
#include <vector>

#include "mpthcl/params.hpp"
#include "mpthcl/tensor.hpp"

namespace mpthcl {

/// One LSTM direction. Gate blocks along the 4h axis are ordered
/// input, forget, cell, output.
struct LstmDirection {
  Tensor w_ih;  // d_in x 4h
  Tensor w_hh;  // h x 4h
  Tensor bias;  // 4h
};

struct BiLstmParams {
  std::size_t input_dim = 0;
  std::size_t hidden = 0;  // per direction; output is 2 * hidden wide
  LstmDirection fwd;
  LstmDirection bwd;

  std::size_t output_dim() const { return 2 * hidden; }
};

/// Registers a Bi-LSTM whose concatenated output is `output_dim` wide.
/// Recurrent blocks are orthogonal, input weights uniform(+-1/sqrt(h)),
/// biases zero except the forget gate at 1.
inline BiLstmParams make_bilstm(ParamStore& ps, const std::string& prefix, std::size_t input_dim,
                                std::size_t output_dim, Rng& rng) {
  if (output_dim < 2 || output_dim % 2)
    throw ShapeError("bilstm '" + prefix + "': output dim must be even and >= 2, got " +
                     std::to_string(output_dim));
  BiLstmParams p;
  p.input_dim = input_dim;
  p.hidden = output_dim / 2;
  const std::size_t h = p.hidden;
  auto make_dir = [&](const std::string& name) {
    LstmDirection d;
    const double bound = 1.0 / std::sqrt(static_cast<double>(h));
    d.w_ih = ps.add(prefix + "." + name + ".w_ih", uniform({input_dim, 4 * h}, rng, -bound, bound));
    std::vector<double> rec(h * 4 * h);
    for (std::size_t g = 0; g < 4; ++g) {
      const Tensor q = orthogonal(h, rng);
      for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < h; ++c) rec[r * 4 * h + g * h + c] = q.at(r, c);
    }
    d.w_hh = ps.add(prefix + "." + name + ".w_hh", Tensor({h, 4 * h}, std::move(rec)));
    std::vector<double> b(4 * h, 0.0);
    for (std::size_t i = h; i < 2 * h; ++i) b[i] = 1.0;
    d.bias = ps.add(prefix + "." + name + ".bias", Tensor({4 * h}, std::move(b)));
    return d;
  };
  p.fwd = make_dir("fwd");
  p.bwd = make_dir("bwd");
  return p;
}

namespace detail {

// Hidden states of one direction, returned in sequence order (L x h).
inline Tensor run_lstm(const Tensor& x, const LstmDirection& dir, std::size_t h, bool reverse) {
  const std::size_t L = x.dim(0);
  const Tensor proj = add(matmul(x, dir.w_ih), dir.bias);  // L x 4h
  Tensor hs = Tensor::zeros({1, h});
  Tensor cs = Tensor::zeros({1, h});
  std::vector<Tensor> out(L);
  for (std::size_t step = 0; step < L; ++step) {
    const std::size_t t = reverse ? L - 1 - step : step;
    const Tensor z = add(slice(proj, 0, t, t + 1), matmul(hs, dir.w_hh));
    const Tensor i = sigmoid(slice(z, 1, 0, h));
    const Tensor f = sigmoid(slice(z, 1, h, 2 * h));
    const Tensor g = tanh(slice(z, 1, 2 * h, 3 * h));
    const Tensor o = sigmoid(slice(z, 1, 3 * h, 4 * h));
    cs = add(mul(f, cs), mul(i, g));
    hs = mul(o, tanh(cs));
    out[t] = hs;
  }
  return concat(out, 0);
}

}  // namespace detail

/// Bidirectional context states for one conversation: L x d_m in, L x d out.
inline Tensor encode_context(const Tensor& features, const BiLstmParams& p) {
  detail::require_rank2(features, "encode_context");
  if (features.dim(1) != p.input_dim)
    throw ShapeError("encode_context: input dim " + std::to_string(features.dim(1)) +
                     " does not match encoder input dim " + std::to_string(p.input_dim));
  const Tensor f = detail::run_lstm(features, p.fwd, p.hidden, false);
  const Tensor b = detail::run_lstm(features, p.bwd, p.hidden, true);
  return concat({f, b}, 1);
}

// ---------------------------------------------------------------------------

struct GateFilterParams {
  Tensor w_gate;  // d x 1
  Tensor b_gate;  // 1
  Tensor w_down;  // d x d_b
  Tensor b_down;  // d_b
  Tensor w_up;    // d_b x d
  Tensor b_up;    // d
  double slope = 0.01;

  std::size_t dim() const { return w_gate.dim(0); }
  std::size_t bottleneck() const { return w_down.dim(1); }
};

inline GateFilterParams make_gate_filter(ParamStore& ps, const std::string& prefix, std::size_t d,
                                         std::size_t bottleneck, double slope, Rng& rng) {
  if (bottleneck == 0 || bottleneck >= d)
    throw ShapeError("gate filter '" + prefix + "': bottleneck " + std::to_string(bottleneck) +
                     " must lie in [1, " + std::to_string(d) + ")");
  GateFilterParams p;
  p.w_gate = ps.add(prefix + ".w_gate", xavier_uniform(d, 1, rng));
  p.b_gate = ps.add(prefix + ".b_gate", Tensor::zeros({1}));
  p.w_down = ps.add(prefix + ".w_down", xavier_uniform(d, bottleneck, rng));
  p.b_down = ps.add(prefix + ".b_down", Tensor::zeros({bottleneck}));
  p.w_up = ps.add(prefix + ".w_up", xavier_uniform(bottleneck, d, rng));
  p.b_up = ps.add(prefix + ".b_up", Tensor::zeros({d}));
  p.slope = slope;
  return p;
}

struct FilterOutput {
  Tensor prompt;  // L x d
  Tensor gate;    // L x 1, a distribution over positions
};

/// Scores every position with a leaky-relu gate logit, normalizes the
/// scores over the conversation, rescales each context state by L times its
/// weight (a uniform gate is the identity), then passes the result through
/// a sigmoid bottleneck and back up to d.
inline FilterOutput modal_feature_filter(const Tensor& H, const GateFilterParams& p) {
  detail::require_rank2(H, "modal_feature_filter");
  if (H.dim(1) != p.dim())
    throw ShapeError("modal_feature_filter: state dim " + std::to_string(H.dim(1)) +
                     " does not match filter dim " + std::to_string(p.dim()));
  const double L = static_cast<double>(H.dim(0));
  const Tensor logits = leaky_relu(add(matmul(H, p.w_gate), p.b_gate), p.slope);
  const Tensor z = softmax(logits, 0);
  const Tensor gated = mul(H, scale(z, L));
  const Tensor down = sigmoid(add(matmul(gated, p.w_down), p.b_down));
  return {add(matmul(down, p.w_up), p.b_up), z};
}

}  // namespace mpthcl
