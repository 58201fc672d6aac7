#include <gtest/gtest.h>

#include "mpthcl/adam.hpp"
#include "mpthcl/grad_check.hpp"
#include "mpthcl/model.hpp"
#include "test_util.hpp"

using namespace mpthcl;

namespace {

ModelConfig toy(std::size_t d = 8) {
  ModelConfig c;
  c.spec = FeatureSpec::parse("custom:5,4,3,3,2");
  c.d = d;
  c.heads = 2;
  c.mpt_layers = 2;
  c.seed = 3;
  return c;
}

Conversation random_conversation(const FeatureSpec& spec, std::size_t L, Rng& rng, std::vector<int> labels = {}) {
  Conversation c;
  c.id = "toy";
  for (std::size_t i = 0; i < L; ++i) {
    Utterance u;
    u.speaker = static_cast<int>(rng.below(spec.max_speakers));
    u.label = labels.empty() ? static_cast<int>(rng.below(spec.classes)) : labels[i];
    for (std::size_t k = 0; k < spec.d_t; ++k) u.text.push_back(rng.normal());
    for (std::size_t k = 0; k < spec.d_a; ++k) u.audio.push_back(rng.normal());
    for (std::size_t k = 0; k < spec.d_v; ++k) u.visual.push_back(rng.normal());
    c.utterances.push_back(u);
  }
  return c;
}

bool has_prefix(const ParamStore& ps, const std::string& prefix) {
  for (const auto& [name, _] : ps)
    if (name.rfind(prefix, 0) == 0) return true;
  return false;
}

}  // namespace

TEST(BuildModel, DefaultConfigIsDeterministic) {
  ModelConfig cfg;
  auto a = build_model(cfg);
  auto b = build_model(cfg);
  EXPECT_GT(a.params.scalar_count(), 0u);
  ASSERT_EQ(a.params.size(), b.params.size());
  auto ia = a.params.begin();
  for (auto ib = b.params.begin(); ib != b.params.end(); ++ia, ++ib) {
    EXPECT_EQ(ia->first, ib->first);
    EXPECT_EQ(ia->second.values(), ib->second.values());
  }
  cfg.seed = 2;
  auto c = build_model(cfg);
  EXPECT_NE(c.params.get("classifier.w").values(), a.params.get("classifier.w").values());
}

TEST(BuildModel, AblationsRemoveTheirParameters) {
  const auto full = build_model(toy());
  for (const char* p : {"mpt.", "filter.audio", "filter.visual", "rgcn", "ucl.", "scl."})
    EXPECT_TRUE(has_prefix(full.params, p)) << p;
  struct Case {
    const char* flag;
    const char* prefix;
  } cases[] = {{"no_mpt", "mpt."},          {"full_audio", "filter.audio"}, {"full_visual", "filter.visual"},
               {"no_rgcn", "rgcn"},         {"no_ucl", "ucl."},             {"no_scl", "scl."}};
  for (const auto& c : cases) {
    auto cfg = toy();
    cfg.ablate = Ablation::parse(c.flag);
    const auto m = build_model(cfg);
    EXPECT_FALSE(has_prefix(m.params, c.prefix)) << c.flag;
    EXPECT_LT(m.params.scalar_count(), full.params.scalar_count()) << c.flag;
  }
}

TEST(BuildModel, RejectsInconsistentDims) {
  auto cfg = toy();
  cfg.heads = 3;
  EXPECT_THROW(build_model(cfg), ConfigError);
  cfg = toy();
  cfg.d = 7;
  EXPECT_THROW(build_model(cfg), ConfigError);
  cfg = toy();
  cfg.window = 5;
  EXPECT_THROW(build_model(cfg), ConfigError);
}

TEST(Ablation, ParseAndPrint) {
  auto a = Ablation::parse("no_mpt,full_visual");
  EXPECT_TRUE(a.no_mpt);
  EXPECT_TRUE(a.full_visual);
  EXPECT_FALSE(a.no_ucl);
  EXPECT_EQ(Ablation::parse(a.str()), a);
  EXPECT_EQ(Ablation::parse("none"), Ablation{});
  EXPECT_THROW(Ablation::parse("no_mtp"), ConfigError);
  EXPECT_EQ(modalities_str(parse_modalities("v,t")), "t,v");
  EXPECT_THROW(parse_modalities("t,x"), ConfigError);
}

TEST(Forward, Shapes) {
  auto m = build_model(toy());
  Rng rng(1);
  auto c = random_conversation(m.config.spec, 3, rng);
  auto r = forward(m, c);
  EXPECT_EQ(r.logits.shape(), (Shape{3, 3}));
  EXPECT_EQ(r.x_fusion.shape(), (Shape{3, 24}));
  EXPECT_EQ(r.x_mpt.shape(), (Shape{3, 16}));
  EXPECT_EQ(r.s_t.shape(), (Shape{3, 8}));
  EXPECT_EQ(slice(r.x_fusion, 1, 0, 8).values(), r.s_t.values());
}

TEST(Forward, DeterministicInEvalMode) {
  auto m = build_model(toy());
  Rng rng(2);
  auto c = random_conversation(m.config.spec, 4, rng);
  EXPECT_EQ(forward(m, c).x_fusion.values(), forward(m, c).x_fusion.values());
}

TEST(Forward, TextOnlyIgnoresAudioAndVisual) {
  auto cfg = toy();
  cfg.modalities = parse_modalities("t");
  auto m = build_model(cfg);
  Rng rng(3);
  auto c = random_conversation(cfg.spec, 4, rng);
  auto other = c;
  for (auto& u : other.utterances) {
    for (auto& v : u.audio) v += 5.0;
    for (auto& v : u.visual) v -= 3.0;
  }
  EXPECT_EQ(forward(m, c).logits.values(), forward(m, other).logits.values());
}

TEST(Forward, NoRgcnUsesContextStates) {
  auto cfg = toy();
  cfg.ablate = Ablation::parse("no_rgcn");
  auto m = build_model(cfg);
  Rng rng(4);
  auto c = random_conversation(cfg.spec, 3, rng);
  auto h = encode_context(modality_features(c, Modality::kText, cfg.spec.d_t, true), m.encoders[0]);
  EXPECT_EQ(forward(m, c).s_t.values(), h.values());
}

TEST(Forward, NoMptConcatenatesPrompts) {
  auto cfg = toy();
  cfg.ablate = Ablation::parse("no_mpt");
  auto m = build_model(cfg);
  Rng rng(5);
  auto c = random_conversation(cfg.spec, 3, rng);
  auto r = forward(m, c);
  EXPECT_EQ(r.x_mpt.values(), concat({r.states[2], r.states[1]}, 1).values());
}

TEST(BatchLoss, ZeroWeightsLeavePlainCrossEntropy) {
  auto m = build_model(toy());
  Rng rng(6);
  Dataset ds{random_conversation(m.config.spec, 3, rng), random_conversation(m.config.spec, 4, rng)};
  auto p = batch_loss(m, ds, {0, 1}, 0.0, 0.0, false, nullptr);
  EXPECT_EQ(p.total.item(), p.ce.item());
  auto q = batch_loss(m, ds, {0, 1}, 0.1, 0.05, false, nullptr);
  EXPECT_NEAR(q.total.item(), q.ce.item() + 0.1 * q.scl.item() + 0.05 * q.ucl.item(), 1e-12);
  EXPECT_GE(q.scl.item(), 0.0);
  EXPECT_GE(q.ucl.item(), 0.0);
}

TEST(BatchLoss, EndToEndGradientCheck) {
  auto cfg = toy(4);
  cfg.spec = FeatureSpec::parse("custom:3,3,3,2,2");
  cfg.mpt_layers = 1;
  cfg.dropout = 0.0;
  for (std::uint64_t seed = 0; seed < 2; ++seed) {
    cfg.seed = 50 + seed;
    auto m = build_model(cfg);
    Rng rng(60 + seed);
    Dataset ds{random_conversation(cfg.spec, 3, rng, {0, 1, 1}), random_conversation(cfg.spec, 2, rng, {0, 0})};
    GradCheckOptions opt;
    opt.abs_floor = 1e-5;  // deep LSTM weights get gradients near the finite-difference noise level
    auto report =
        grad_check([&] { return batch_loss(m, ds, {0, 1}, 0.1, 0.05, false, nullptr).total; }, m.params, opt);
    EXPECT_TRUE(report.passed) << report.summary();
  }
}

TEST(BatchLoss, SingleBatchOverfit) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    auto cfg = toy(16);
    cfg.seed = seed;
    cfg.dropout = 0.0;
    auto m = build_model(cfg);
    Rng rng(70 + seed);
    Dataset ds{random_conversation(cfg.spec, 2, rng, {0, 2})};
    AdamState adam;
    adam.lr = 1e-3;
    double loss = 1e9;
    for (int step = 0; step < 500 && loss >= 0.05; ++step) {
      m.params.zero_grad();
      auto p = batch_loss(m, ds, {0}, 0.1, 0.05, true, nullptr);
      loss = p.total.item();
      backward(p.total);
      adam_step(m.params, adam);
    }
    EXPECT_LT(loss, 0.05) << "seed " << seed;
  }
}
