#pragma once

// Prompt attention and the multimodal prompt transformer. A filtered
// audio or visual sequence is prepended to the text queries in every block;
// keys and values always come from the current text rows.

#include <cmath>
#include <string>
#include <vector>

#include "mpthcl/params.hpp"
#include "mpthcl/tensor.hpp"

namespace mpthcl {

struct AttentionHead {
  Tensor wq;  // d x d_h
  Tensor wk;
  Tensor wv;
};

struct MptBlock {
  std::vector<AttentionHead> heads;
  Tensor w_out;  // n*d_h x d
  Tensor w1, b1;  // d x d_ff, d_ff
  Tensor w2, b2;  // d_ff x d, d
  Tensor ln1_gain, ln1_bias;
  Tensor ln2_gain, ln2_bias;

  std::size_t dim() const { return w_out.dim(1); }
  std::size_t head_dim() const { return heads.front().wq.dim(1); }
};

struct MptStack {
  std::vector<MptBlock> blocks;
  Tensor pool_q, pool_k, pool_v;  // d x d, single head
  double dropout = 0.2;

  std::size_t dim() const { return pool_q.dim(0); }
};

inline MptBlock make_mpt_block(ParamStore& ps, const std::string& prefix, std::size_t d, std::size_t heads,
                               std::size_t d_ff, Rng& rng) {
  if (heads == 0 || d % heads)
    throw ShapeError("mpt '" + prefix + "': model dim " + std::to_string(d) + " not divisible by " +
                     std::to_string(heads) + " heads");
  const std::size_t dh = d / heads;
  MptBlock b;
  for (std::size_t h = 0; h < heads; ++h) {
    const std::string hp = prefix + ".head" + std::to_string(h);
    b.heads.push_back({ps.add(hp + ".wq", xavier_uniform(d, dh, rng)), ps.add(hp + ".wk", xavier_uniform(d, dh, rng)),
                       ps.add(hp + ".wv", xavier_uniform(d, dh, rng))});
  }
  b.w_out = ps.add(prefix + ".w_out", xavier_uniform(heads * dh, d, rng));
  b.w1 = ps.add(prefix + ".ffn.w1", xavier_uniform(d, d_ff, rng));
  b.b1 = ps.add(prefix + ".ffn.b1", Tensor::zeros({d_ff}));
  b.w2 = ps.add(prefix + ".ffn.w2", xavier_uniform(d_ff, d, rng));
  b.b2 = ps.add(prefix + ".ffn.b2", Tensor::zeros({d}));
  b.ln1_gain = ps.add(prefix + ".ln1.gain", Tensor::full({d}, 1.0));
  b.ln1_bias = ps.add(prefix + ".ln1.bias", Tensor::zeros({d}));
  b.ln2_gain = ps.add(prefix + ".ln2.gain", Tensor::full({d}, 1.0));
  b.ln2_bias = ps.add(prefix + ".ln2.bias", Tensor::zeros({d}));
  return b;
}

inline MptStack make_mpt_stack(ParamStore& ps, const std::string& prefix, std::size_t d, std::size_t heads,
                               std::size_t layers, std::size_t d_ff, double dropout, Rng& rng) {
  if (layers == 0) throw ShapeError("mpt '" + prefix + "': need at least one block");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ShapeError("mpt '" + prefix + "': dropout must lie in [0, 1)");
  MptStack s;
  for (std::size_t l = 0; l < layers; ++l)
    s.blocks.push_back(make_mpt_block(ps, prefix + ".block" + std::to_string(l), d, heads, d_ff, rng));
  s.pool_q = ps.add(prefix + ".pool.wq", xavier_uniform(d, d, rng));
  s.pool_k = ps.add(prefix + ".pool.wk", xavier_uniform(d, d, rng));
  s.pool_v = ps.add(prefix + ".pool.wv", xavier_uniform(d, d, rng));
  s.dropout = dropout;
  return s;
}

/// Multi-head prompt attention. Head h queries with [prompt columns of head
/// h ; text W_Q^h]; the prompt rows enter unprojected. Output has
/// L_p + L rows. When `weights` is given it receives each head's
/// (L_p + L) x L attention matrix.
inline Tensor prompt_attention(const Tensor& prompt, const Tensor& text, const MptBlock& b,
                               std::vector<Tensor>* weights = nullptr) {
  detail::require_rank2(prompt, "prompt_attention");
  detail::require_rank2(text, "prompt_attention");
  const std::size_t d = b.dim();
  if (prompt.dim(1) != d || text.dim(1) != d)
    throw ShapeError("prompt_attention: prompt " + shape_str(prompt.shape()) + " and text " +
                     shape_str(text.shape()) + " must both be " + std::to_string(d) + " wide");
  if (text.dim(0) == 0) throw ShapeError("prompt_attention: empty text sequence");
  const std::size_t dh = b.head_dim();
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> outs;
  if (weights) weights->clear();
  for (std::size_t h = 0; h < b.heads.size(); ++h) {
    const auto& head = b.heads[h];
    const Tensor q = concat({slice(prompt, 1, h * dh, (h + 1) * dh), matmul(text, head.wq)}, 0);
    const Tensor k = matmul(text, head.wk);
    const Tensor v = matmul(text, head.wv);
    const Tensor a = softmax(scale(matmul(q, transpose(k)), inv), 1);
    if (weights) weights->push_back(a);
    outs.push_back(matmul(a, v));
  }
  return matmul(outs.size() == 1 ? outs[0] : concat(outs, 1), b.w_out);
}

/// One post-norm block over the joint [prompt; text] state.
inline Tensor mpt_block(const Tensor& state, std::size_t prompt_rows, const MptBlock& b, double p, bool training,
                        Rng* rng) {
  const Tensor prompt = slice(state, 0, 0, prompt_rows);
  const Tensor text = slice(state, 0, prompt_rows, state.dim(0));
  const Tensor attn = prompt_attention(prompt, text, b);
  const Tensor n = layer_norm(add(state, dropout(attn, p, training, rng)), b.ln1_gain, b.ln1_bias);
  const Tensor f = add(matmul(relu(add(matmul(n, b.w1), b.b1)), b.w2), b.b2);
  return layer_norm(add(n, dropout(f, p, training, rng)), b.ln2_gain, b.ln2_bias);
}

/// Runs every block, pools the 2L-row state with single-head self-attention,
/// and returns the text rows (L x d).
inline Tensor mpt_forward(const Tensor& prompt, const Tensor& text, const MptStack& s, bool training = false,
                          Rng* rng = nullptr) {
  detail::require_rank2(prompt, "mpt_forward");
  detail::require_rank2(text, "mpt_forward");
  if (prompt.dim(0) == 0 || text.dim(0) == 0) throw ShapeError("mpt_forward: empty sequence");
  if (prompt.dim(1) != s.dim() || text.dim(1) != s.dim())
    throw ShapeError("mpt_forward: inputs must be " + std::to_string(s.dim()) + " wide, got " +
                     shape_str(prompt.shape()) + " and " + shape_str(text.shape()));
  const std::size_t lp = prompt.dim(0);
  Tensor g = concat({prompt, text}, 0);
  for (const auto& b : s.blocks) g = mpt_block(g, lp, b, s.dropout, training, rng);
  const double inv = 1.0 / std::sqrt(static_cast<double>(s.dim()));
  const Tensor a = softmax(scale(matmul(matmul(g, s.pool_q), transpose(matmul(g, s.pool_k))), inv), 1);
  const Tensor x = matmul(a, matmul(g, s.pool_v));
  return slice(x, 0, lp, x.dim(0));
}

struct Fusion {
  Tensor x_mpt;     // L x 2d
  Tensor x_fusion;  // L x 3d
};

inline Fusion fuse(const Tensor& x_tv, const Tensor& x_ta, const Tensor& s_t) {
  detail::require_same_shape(x_tv, x_ta, "fuse");
  detail::require_same_shape(x_tv, s_t, "fuse");
  Fusion f;
  f.x_mpt = concat({x_tv, x_ta}, 1);
  f.x_fusion = concat({s_t, f.x_mpt}, 1);
  return f;
}

}  // namespace mpthcl
