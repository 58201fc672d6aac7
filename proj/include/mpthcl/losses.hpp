#pragma once

// Training objectives: InfoNCE between the fused representation and each
// modality, supervised contrastive loss over text and projected fusion
// rows, the classifier head and cross-entropy.

#include <array>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "mpthcl/log.hpp"
#include "mpthcl/params.hpp"
#include "mpthcl/tensor.hpp"

namespace mpthcl {

enum class Modality : std::size_t { kText = 0, kAudio = 1, kVisual = 2 };
inline constexpr std::size_t kModalities = 3;

inline const char* modality_name(Modality m) {
  switch (m) {
    case Modality::kText: return "text";
    case Modality::kAudio: return "audio";
    case Modality::kVisual: return "visual";
  }
  return "?";
}

/// -mean_i log softmax_j(<pred_i, target_j>)[i] over row-normalized inputs.
/// Row i of `pred` is matched with row i of `target`; every other target row
/// is a negative.
inline Tensor info_nce(const Tensor& pred, const Tensor& target) {
  detail::require_rank2(pred, "info_nce");
  detail::require_same_shape(pred, target, "info_nce");
  const std::size_t B = pred.dim(0);
  if (B < 2) {
    warn("info_nce: batch of " + std::to_string(B) + " has no negatives, loss set to 0");
    return Tensor::scalar(0.0);
  }
  const Tensor logits = matmul(l2_normalize(pred), transpose(l2_normalize(target)));
  const Tensor logp = log_softmax(logits, 1);
  return scale(sum(mul(logp, Tensor::identity(B))), -1.0 / static_cast<double>(B));
}

/// Prediction networks from the 2d-wide fusion rows to each modality.
struct UclParams {
  Affine text, audio, visual;

  const Affine& of(Modality m) const {
    return m == Modality::kText ? text : m == Modality::kAudio ? audio : visual;
  }
};

inline UclParams make_ucl(ParamStore& ps, const std::string& prefix, std::size_t d, Rng& rng) {
  UclParams u;
  u.text = make_affine(ps, prefix + ".text", 2 * d, d, rng);
  u.audio = make_affine(ps, prefix + ".audio", 2 * d, d, rng);
  u.visual = make_affine(ps, prefix + ".visual", 2 * d, d, rng);
  return u;
}

inline Tensor ucl_term(const Tensor& x_mpt, const Tensor& s_x, const Affine& g) {
  if (x_mpt.dim(1) != g.in_dim() || s_x.dim(1) != g.out_dim())
    throw ShapeError("ucl: fusion " + shape_str(x_mpt.shape()) + " and modality " + shape_str(s_x.shape()) +
                     " do not fit predictor " + std::to_string(g.in_dim()) + "->" + std::to_string(g.out_dim()));
  return info_nce(apply(g, x_mpt), s_x);
}

/// Sum of per-modality terms; a modality whose state is undefined or
/// whose `use` entry is false is left out.
inline Tensor ucl_loss(const Tensor& x_mpt, const std::array<Tensor, kModalities>& states, const UclParams& p,
                       const std::array<bool, kModalities>& use = {true, true, true}) {
  Tensor total;
  for (std::size_t m = 0; m < kModalities; ++m) {
    if (!use[m] || !states[m].defined()) continue;
    const Tensor t = ucl_term(x_mpt, states[m], p.of(static_cast<Modality>(m)));
    total = total.defined() ? add(total, t) : t;
  }
  return total.defined() ? total : Tensor::scalar(0.0);
}

/// Supervised contrastive loss over the rows of `features`, summed over
/// anchors that have at least one positive. Rows are normalized first.
inline Tensor supcon_loss(const Tensor& features, std::span<const int> labels, double tau) {
  detail::require_rank2(features, "supcon_loss");
  if (!(tau > 0.0)) throw ShapeError("supcon_loss: temperature must be positive");
  const std::size_t n = features.dim(0);
  if (labels.size() != n)
    throw ShapeError("supcon_loss: " + std::to_string(labels.size()) + " labels for " + std::to_string(n) + " rows");
  std::vector<double> pos(n * n, 0.0), mask(n * n, 0.0);
  bool any = false;
  for (std::size_t i = 0; i < n; ++i) {
    mask[i * n + i] = -1e6;
    std::size_t count = 0;
    for (std::size_t p = 0; p < n; ++p) count += p != i && labels[p] == labels[i];
    for (std::size_t p = 0; p < n && count; ++p)
      if (p != i && labels[p] == labels[i]) pos[i * n + p] = 1.0 / static_cast<double>(count);
    any = any || count > 0;
  }
  if (!any) {
    warn("supcon_loss: no two samples share a label, loss set to 0");
    return Tensor::scalar(0.0);
  }
  const Tensor c = l2_normalize(features);
  const Tensor sim = add(scale(matmul(c, transpose(c)), 1.0 / tau), Tensor({n, n}, std::move(mask)));
  return scale(sum(mul(log_softmax(sim, 1), Tensor({n, n}, std::move(pos)))), -1.0);
}

/// Text rows and projected fusion rows stacked into 2L samples.
inline Tensor scl_loss(const Tensor& s_t, const Tensor& x_mpt, std::span<const int> labels, const Affine& proj,
                       double tau) {
  detail::require_rank2(s_t, "scl_loss");
  detail::require_rank2(x_mpt, "scl_loss");
  if (s_t.dim(0) != x_mpt.dim(0) || x_mpt.dim(1) != proj.in_dim() || s_t.dim(1) != proj.out_dim())
    throw ShapeError("scl_loss: text " + shape_str(s_t.shape()) + " and fusion " + shape_str(x_mpt.shape()) +
                     " do not conform");
  if (s_t.dim(0) < 2) throw ShapeError("scl_loss: need at least two samples");
  std::vector<int> both(labels.begin(), labels.end());
  both.insert(both.end(), labels.begin(), labels.end());
  return supcon_loss(concat({s_t, apply(proj, x_mpt)}, 0), both, tau);
}

inline Tensor classify(const Tensor& x_fusion, const Affine& head) {
  if (x_fusion.dim(1) != head.in_dim())
    throw ShapeError("classify: features " + shape_str(x_fusion.shape()) + " do not match classifier input " +
                     std::to_string(head.in_dim()));
  return apply(head, x_fusion);
}

/// Row-wise argmax; the lowest index wins ties.
inline std::vector<int> argmax_rows(const Tensor& logits) {
  detail::require_rank2(logits, "argmax_rows");
  std::vector<int> out(logits.dim(0));
  for (std::size_t r = 0; r < logits.dim(0); ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < logits.dim(1); ++c)
      if (logits.at(r, c) > logits.at(r, best)) best = c;
    out[r] = static_cast<int>(best);
  }
  return out;
}

/// Mean negative log-likelihood over rows.
inline Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  detail::require_rank2(logits, "cross_entropy");
  if (labels.size() != logits.dim(0))
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(logits.dim(0)) + " rows");
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= logits.dim(1))
      throw ShapeError("cross_entropy: label " + std::to_string(y) + " out of range");
  const Tensor picked = mul(log_softmax(logits, 1), one_hot(labels, logits.dim(1)));
  return scale(sum(picked), -1.0 / static_cast<double>(labels.size()));
}

inline Tensor total_loss(const Tensor& ce, const Tensor& scl, const Tensor& ucl, double lambda1, double lambda2) {
  if (lambda1 < 0 || lambda2 < 0) throw ShapeError("total_loss: loss weights must be non-negative");
  Tensor t = ce;
  if (lambda1 != 0.0) t = add(t, scale(scl, lambda1));
  if (lambda2 != 0.0) t = add(t, scale(ucl, lambda2));
  return t;
}

inline double total_loss(double ce, double scl, double ucl, double lambda1, double lambda2) {
  if (lambda1 < 0 || lambda2 < 0) throw ShapeError("total_loss: loss weights must be non-negative");
  return ce + lambda1 * scl + lambda2 * ucl;
}

}  // namespace mpthcl
