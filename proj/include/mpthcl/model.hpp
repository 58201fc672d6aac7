#pragma once

// The full network: per-modality Bi-LSTMs, modal feature filters, the
// speaker/context graph convolutions over text, two prompt transformers
// (visual and audio prompts), the fusion concat and the classifier.

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "mpthcl/config.hpp"
#include "mpthcl/dataio.hpp"
#include "mpthcl/encoders.hpp"
#include "mpthcl/graph_rgcn.hpp"
#include "mpthcl/losses.hpp"
#include "mpthcl/mpt.hpp"
#include "mpthcl/params.hpp"

namespace mpthcl {

struct Ablation {
  bool no_mpt = false;
  bool no_ucl = false;
  bool no_scl = false;
  bool no_rgcn = false;
  bool full_audio = false;
  bool full_visual = false;

  static Ablation parse(const std::string& list) {
    Ablation a;
    if (trim(list).empty() || trim(list) == "none") return a;
    for (const auto& item : split(list, ',')) {
      if (item == "no_mpt") a.no_mpt = true;
      else if (item == "no_ucl") a.no_ucl = true;
      else if (item == "no_scl") a.no_scl = true;
      else if (item == "no_rgcn") a.no_rgcn = true;
      else if (item == "full_audio") a.full_audio = true;
      else if (item == "full_visual") a.full_visual = true;
      else
        throw ConfigError("unknown ablation '" + item +
                          "' (no_mpt, no_ucl, no_scl, no_rgcn, full_audio, full_visual)");
    }
    return a;
  }

  std::string str() const {
    std::vector<std::string> on;
    if (no_mpt) on.push_back("no_mpt");
    if (no_ucl) on.push_back("no_ucl");
    if (no_scl) on.push_back("no_scl");
    if (no_rgcn) on.push_back("no_rgcn");
    if (full_audio) on.push_back("full_audio");
    if (full_visual) on.push_back("full_visual");
    if (on.empty()) return "none";
    std::string s = on[0];
    for (std::size_t i = 1; i < on.size(); ++i) s += "," + on[i];
    return s;
  }

  bool operator==(const Ablation&) const = default;
};

/// Which modalities feed the model, indexed by Modality. Parsed from a
/// comma list over {t, a, v}.
using ModalitySet = std::array<bool, kModalities>;

inline ModalitySet parse_modalities(const std::string& list) {
  ModalitySet m{false, false, false};
  for (const auto& item : split(list, ',')) {
    if (item == "t") m[0] = true;
    else if (item == "a") m[1] = true;
    else if (item == "v") m[2] = true;
    else throw ConfigError("unknown modality '" + item + "' (t, a, v)");
  }
  if (!m[0] && !m[1] && !m[2]) throw ConfigError("at least one modality is required");
  return m;
}

inline std::string modalities_str(const ModalitySet& m) {
  std::string s;
  const char* names[] = {"t", "a", "v"};
  for (std::size_t i = 0; i < kModalities; ++i)
    if (m[i]) s += (s.empty() ? "" : ",") + std::string(names[i]);
  return s;
}

struct ModelConfig {
  FeatureSpec spec = FeatureSpec::iemocap();
  std::size_t d = 100;
  std::size_t bottleneck = 0;  // 0: d / 4
  std::size_t d_ff = 0;        // 0: 4 d
  std::size_t mpt_layers = 5;
  std::size_t heads = 5;
  std::size_t window = 2;
  std::size_t rgcn_layers = 1;
  double dropout = 0.2;
  double leaky_slope = 0.01;
  double tau = 0.07;
  Ablation ablate;
  ModalitySet modalities{true, true, true};
  std::uint64_t seed = 1;

  std::size_t bottleneck_dim() const { return bottleneck ? bottleneck : std::max<std::size_t>(1, d / 4); }
  std::size_t ff_dim() const { return d_ff ? d_ff : 4 * d; }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
    if (d < 2 || d % 2) fail("d_model must be even and >= 2, got " + std::to_string(d));
    if (bottleneck_dim() >= d) fail("bottleneck must be smaller than d_model");
    if (heads == 0 || d % heads) fail("d_model " + std::to_string(d) + " not divisible by heads " + std::to_string(heads));
    if (mpt_layers == 0) fail("mpt_layers must be >= 1");
    if (window < 1 || window > 4) fail("window must lie in [1, 4]");
    if (rgcn_layers == 0) fail("rgcn_layers must be >= 1");
    if (!(dropout >= 0 && dropout < 1)) fail("dropout must lie in [0, 1)");
    if (!(tau > 0)) fail("tau must be positive");
    if (spec.max_speakers < 1) fail("max_speakers must be >= 1");
  }
};

class Model {
 public:
  ModelConfig config;
  ParamStore params;
  std::array<BiLstmParams, kModalities> encoders;
  std::optional<GateFilterParams> filter_audio, filter_visual;
  std::vector<RgcnLayer> rgcn;
  std::optional<MptStack> mpt_visual, mpt_audio;
  std::optional<UclParams> ucl;
  std::optional<Affine> scl_proj;
  Affine classifier;

  Model() = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  std::size_t input_dim(Modality m) const {
    return m == Modality::kText ? config.spec.d_t : m == Modality::kAudio ? config.spec.d_a : config.spec.d_v;
  }
};

/// Parameters are drawn from the init stream of `cfg.seed` in a fixed
/// construction order, so equal configs give equal models.
inline Model build_model(const ModelConfig& cfg) {
  cfg.validate();
  Model m;
  m.config = cfg;
  Rng rng = Rng::for_stream(cfg.seed, Stream::kInit);
  const std::size_t d = cfg.d;
  const char* enc_names[] = {"enc.text", "enc.audio", "enc.visual"};
  for (std::size_t i = 0; i < kModalities; ++i)
    m.encoders[i] = make_bilstm(m.params, enc_names[i], m.input_dim(static_cast<Modality>(i)), d, rng);
  if (!cfg.ablate.full_audio)
    m.filter_audio = make_gate_filter(m.params, "filter.audio", d, cfg.bottleneck_dim(), cfg.leaky_slope, rng);
  if (!cfg.ablate.full_visual)
    m.filter_visual = make_gate_filter(m.params, "filter.visual", d, cfg.bottleneck_dim(), cfg.leaky_slope, rng);
  if (!cfg.ablate.no_rgcn)
    for (std::size_t l = 0; l < cfg.rgcn_layers; ++l)
      m.rgcn.push_back(make_rgcn_layer(m.params, "rgcn" + std::to_string(l), d, cfg.spec.max_speakers, rng));
  if (!cfg.ablate.no_mpt) {
    m.mpt_visual = make_mpt_stack(m.params, "mpt.visual", d, cfg.heads, cfg.mpt_layers, cfg.ff_dim(), cfg.dropout, rng);
    m.mpt_audio = make_mpt_stack(m.params, "mpt.audio", d, cfg.heads, cfg.mpt_layers, cfg.ff_dim(), cfg.dropout, rng);
  }
  if (!cfg.ablate.no_ucl) m.ucl = make_ucl(m.params, "ucl", d, rng);
  if (!cfg.ablate.no_scl) m.scl_proj = make_affine(m.params, "scl.proj", 2 * d, d, rng);
  m.classifier = make_affine(m.params, "classifier", 3 * d, cfg.spec.classes, rng);
  return m;
}

/// L x d_m feature matrix of one modality; zeros when the modality is
/// switched off.
inline Tensor modality_features(const Conversation& c, Modality mod, std::size_t dim, bool enabled) {
  std::vector<double> data(c.size() * dim, 0.0);
  if (enabled)
    for (std::size_t i = 0; i < c.size(); ++i) {
      const auto& u = c.utterances[i];
      const auto& v = mod == Modality::kText ? u.text : mod == Modality::kAudio ? u.audio : u.visual;
      if (v.size() != dim)
        throw ShapeError("conversation '" + c.id + "' utterance " + std::to_string(i) + ": " + modality_name(mod) +
                         " dim " + std::to_string(v.size()) + ", model expects " + std::to_string(dim));
      std::copy(v.begin(), v.end(), data.begin() + i * dim);
    }
  return Tensor({c.size(), dim}, std::move(data));
}

struct ForwardResult {
  Tensor x_fusion;  // L x 3d
  Tensor s_t;       // L x d, graph-enhanced text
  Tensor x_mpt;     // L x 2d
  Tensor logits;    // L x J
  std::array<Tensor, kModalities> states;  // text, audio, visual as seen by the contrastive terms
};

inline ForwardResult forward(const Model& m, const Conversation& c, bool training = false, Rng* rng = nullptr) {
  if (c.utterances.empty()) throw ShapeError("forward: conversation '" + c.id + "' is empty");
  const auto& cfg = m.config;
  std::array<Tensor, kModalities> h;
  for (std::size_t i = 0; i < kModalities; ++i) {
    const auto mod = static_cast<Modality>(i);
    h[i] = encode_context(modality_features(c, mod, m.input_dim(mod), cfg.modalities[i]), m.encoders[i]);
  }
  const Tensor s_a = m.filter_audio ? modal_feature_filter(h[1], *m.filter_audio).prompt : h[1];
  const Tensor s_v = m.filter_visual ? modal_feature_filter(h[2], *m.filter_visual).prompt : h[2];
  Tensor s_t = h[0];
  if (!m.rgcn.empty()) {
    const auto speakers = c.speakers();
    const auto g = build_graph(speakers, cfg.window, cfg.spec.max_speakers);
    s_t = enhance_text(rgcn_stack(h[0], g, m.rgcn, RelationFamily::kSpeaker),
                       rgcn_stack(h[0], g, m.rgcn, RelationFamily::kContext));
  }
  ForwardResult r;
  r.s_t = s_t;
  r.states = {s_t, s_a, s_v};
  if (m.mpt_visual) {
    const Fusion f = fuse(mpt_forward(s_v, s_t, *m.mpt_visual, training, rng),
                          mpt_forward(s_a, s_t, *m.mpt_audio, training, rng), s_t);
    r.x_mpt = f.x_mpt;
    r.x_fusion = f.x_fusion;
  } else {
    const Fusion f = fuse(s_v, s_a, s_t);
    r.x_mpt = f.x_mpt;
    r.x_fusion = f.x_fusion;
  }
  r.logits = classify(r.x_fusion, m.classifier);
  return r;
}

struct LossParts {
  Tensor total;
  Tensor ce, scl, ucl;
};

/// Joint objective over a batch of conversations: every tensor is stacked
/// across the batch's utterances before the losses are taken.
inline LossParts batch_loss(const Model& m, const Dataset& ds, const std::vector<std::size_t>& batch, double lambda1,
                            double lambda2, bool training, Rng* rng) {
  std::vector<Tensor> logits, s_t, x_mpt;
  std::array<std::vector<Tensor>, kModalities> states;
  std::vector<int> labels;
  for (auto idx : batch) {
    const auto& c = ds.at(idx);
    auto r = forward(m, c, training, rng);
    logits.push_back(r.logits);
    s_t.push_back(r.s_t);
    x_mpt.push_back(r.x_mpt);
    for (std::size_t i = 0; i < kModalities; ++i) states[i].push_back(r.states[i]);
    for (const auto& u : c.utterances) labels.push_back(u.label);
  }
  auto stack = [](const std::vector<Tensor>& v) { return v.size() == 1 ? v[0] : concat(v, 0); };
  LossParts p;
  p.ce = cross_entropy(stack(logits), labels);
  const Tensor xm = stack(x_mpt);
  p.scl = m.scl_proj && labels.size() >= 2 ? scl_loss(stack(s_t), xm, labels, *m.scl_proj, m.config.tau)
                                           : Tensor::scalar(0.0);
  if (m.ucl) {
    std::array<Tensor, kModalities> st{stack(states[0]), stack(states[1]), stack(states[2])};
    p.ucl = ucl_loss(xm, st, *m.ucl, m.config.modalities);
  } else {
    p.ucl = Tensor::scalar(0.0);
  }
  p.total = total_loss(p.ce, p.scl, p.ucl, m.scl_proj ? lambda1 : 0.0, m.ucl ? lambda2 : 0.0);
  return p;
}

}  // namespace mpthcl
