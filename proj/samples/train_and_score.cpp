// Generates a small synthetic corpus, trains the full model and two
// ablations on it, and prints held-out scores.
//
//   train_and_score [epochs]

#include <cstdio>
#include <cstdlib>

#include "mpthcl/trainer.hpp"

using namespace mpthcl;

int main(int argc, char** argv) {
  const std::size_t epochs = argc > 1 ? std::strtoul(argv[1], nullptr, 10) : 30;

  SyntheticConfig sc;
  sc.n_conversations = 60;
  sc.cross_modal = 0.5;
  const Dataset all = generate_synthetic(sc);
  const auto [train_set, rest] = split_dataset(all, 40);
  const auto [val_set, test_set] = split_dataset(rest, 10);

  RunConfig base;
  base.model.spec = sc.feature_spec();
  base.model.d = 16;
  base.model.heads = 4;
  base.model.mpt_layers = 2;
  base.lr = 1e-3;
  base.epochs = epochs;

  struct Variant {
    const char* name;
    const char* ablate;
    const char* modalities;
  };
  for (const Variant v : {Variant{"full", "none", "t,a,v"}, Variant{"text only", "none", "t"},
                          Variant{"no_mpt", "no_mpt", "t,a,v"}}) {
    RunConfig rc = base;
    rc.model.ablate = Ablation::parse(v.ablate);
    rc.model.modalities = parse_modalities(v.modalities);
    const auto r = train(rc, train_set, val_set);
    const auto ev = evaluate(r.model, test_set);
    std::printf("%-10s best epoch %3zu  test acc %.3f  W-F1 %.3f\n", v.name, r.best_epoch, ev.metrics.accuracy,
                ev.metrics.weighted_f1);
  }
}
