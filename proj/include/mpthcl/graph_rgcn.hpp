#pragma once

// Windowed conversation graphs with speaker-pair and temporal relations,
// and the relational graph convolution run over them.

#include <span>
#include <string>
#include <vector>

#include "mpthcl/params.hpp"
#include "mpthcl/tensor.hpp"

namespace mpthcl {

enum class ContextRelation : std::size_t { kPast = 0, kPresent = 1, kFuture = 2 };
inline constexpr std::size_t kContextRelations = 3;

/// Node `src` aggregates from `dst` under the given relations.
struct GraphEdge {
  std::size_t src = 0;
  std::size_t dst = 0;
  std::size_t speaker_rel = 0;  // speaker(src) * M + speaker(dst)
  ContextRelation context_rel = ContextRelation::kPresent;

  bool operator==(const GraphEdge&) const = default;
};

struct ConversationGraph {
  std::size_t nodes = 0;
  std::size_t window = 0;
  std::size_t speaker_slots = 0;  // M; speaker relations number M * M
  std::vector<GraphEdge> edges;

  std::size_t speaker_relations() const { return speaker_slots * speaker_slots; }
};

/// Every ordered pair (i, j) with |i - j| <= window, self pairs included.
/// Speaker ids are folded into `speaker_slots` by modulo.
inline ConversationGraph build_graph(std::span<const int> speakers, std::size_t window,
                                     std::size_t speaker_slots) {
  if (speakers.empty()) throw ShapeError("build_graph: empty speaker list");
  if (window < 1 || window > 4)
    throw ShapeError("build_graph: window must lie in [1, 4], got " + std::to_string(window));
  if (speaker_slots < 1) throw ShapeError("build_graph: need at least one speaker slot");
  ConversationGraph g;
  g.nodes = speakers.size();
  g.window = window;
  g.speaker_slots = speaker_slots;
  const std::size_t L = speakers.size();
  for (std::size_t i = 0; i < L; ++i) {
    if (speakers[i] < 0) throw ShapeError("build_graph: negative speaker id");
    const std::size_t lo = i >= window ? i - window : 0;
    const std::size_t hi = std::min(L - 1, i + window);
    for (std::size_t j = lo; j <= hi; ++j) {
      GraphEdge e;
      e.src = i;
      e.dst = j;
      e.speaker_rel = (static_cast<std::size_t>(speakers[i]) % speaker_slots) * speaker_slots +
                      static_cast<std::size_t>(speakers[j]) % speaker_slots;
      e.context_rel = j < i ? ContextRelation::kPast : j == i ? ContextRelation::kPresent : ContextRelation::kFuture;
      g.edges.push_back(e);
    }
  }
  return g;
}

enum class RelationFamily { kSpeaker, kContext };

/// One graph-convolution layer: a d x d matrix per relation of each family.
struct RgcnLayer {
  std::vector<Tensor> speaker;  // M * M
  std::vector<Tensor> context;  // 3
};

inline RgcnLayer make_rgcn_layer(ParamStore& ps, const std::string& prefix, std::size_t d,
                                 std::size_t speaker_slots, Rng& rng) {
  RgcnLayer layer;
  for (std::size_t r = 0; r < speaker_slots * speaker_slots; ++r)
    layer.speaker.push_back(ps.add(prefix + ".speaker.w" + std::to_string(r), xavier_uniform(d, d, rng)));
  for (std::size_t r = 0; r < kContextRelations; ++r)
    layer.context.push_back(ps.add(prefix + ".context.w" + std::to_string(r), xavier_uniform(d, d, rng)));
  return layer;
}

/// out_i = relu( sum_r sum_{j in N_i^r} W_r h_j / |N_i^r| ), relations
/// drawn from one family. Relations without edges contribute nothing.
/// Row-vector convention: W_r acts as h_j W_r.
inline Tensor rgcn_forward(const Tensor& H, const ConversationGraph& g, std::span<const Tensor> weights,
                           RelationFamily family) {
  detail::require_rank2(H, "rgcn_forward");
  const std::size_t L = H.dim(0);
  if (g.nodes != L)
    throw ShapeError("rgcn_forward: graph has " + std::to_string(g.nodes) + " nodes, features have " +
                     std::to_string(L) + " rows");
  const std::size_t R = weights.size();
  auto rel_of = [family](const GraphEdge& e) {
    return family == RelationFamily::kSpeaker ? e.speaker_rel : static_cast<std::size_t>(e.context_rel);
  };
  std::vector<std::vector<std::size_t>> degree(R, std::vector<std::size_t>(L, 0));
  for (const auto& e : g.edges) {
    const std::size_t r = rel_of(e);
    if (r >= R)
      throw ShapeError("rgcn_forward: relation id " + std::to_string(r) + " outside family range [0," +
                       std::to_string(R) + ")");
    ++degree[r][e.src];
  }
  Tensor total;
  for (std::size_t r = 0; r < R; ++r) {
    std::vector<double> adj(L * L, 0.0);
    bool any = false;
    for (const auto& e : g.edges) {
      if (rel_of(e) != r) continue;
      adj[e.src * L + e.dst] += 1.0 / static_cast<double>(degree[r][e.src]);
      any = true;
    }
    if (!any) continue;
    const Tensor term = matmul(matmul(Tensor({L, L}, std::move(adj)), H), weights[r]);
    total = total.defined() ? add(total, term) : term;
  }
  if (!total.defined()) total = Tensor::zeros({L, weights.empty() ? H.dim(1) : weights[0].dim(1)});
  return relu(total);
}

/// Stacked layers of one family: each consumes the previous layer's output.
inline Tensor rgcn_stack(const Tensor& H, const ConversationGraph& g, const std::vector<RgcnLayer>& layers,
                         RelationFamily family) {
  Tensor x = H;
  for (const auto& layer : layers)
    x = rgcn_forward(x, g, family == RelationFamily::kSpeaker ? layer.speaker : layer.context, family);
  return x;
}

/// Speaker-aware plus context-aware views of the text states.
inline Tensor enhance_text(const Tensor& sa, const Tensor& ca) {
  detail::require_same_shape(sa, ca, "enhance_text");
  return add(sa, ca);
}

}  // namespace mpthcl
