// mpthcl: train, evaluate and inspect the multimodal prompt transformer.
//
// Exit status: 0 success, 1 invalid input or configuration, 2 numerical
// failure (non-finite values, failed gradient check).

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "mpthcl/grad_suite.hpp"
#include "mpthcl/trainer.hpp"

using namespace mpthcl;
namespace fs = std::filesystem;

namespace {

constexpr int kOk = 0;
constexpr int kInvalid = 1;
constexpr int kNumeric = 2;

void print_metrics(const Metrics& m) {
  std::printf("accuracy %.4f\nweighted_f1 %.4f\n", m.accuracy, m.weighted_f1);
  for (std::size_t c = 0; c < m.per_class_f1.size(); ++c) std::printf("f1[%zu] %.4f\n", c, m.per_class_f1[c]);
  std::printf("confusion (rows true, cols predicted)\n");
  for (const auto& row : m.confusion) {
    for (std::size_t k = 0; k < row.size(); ++k) std::printf("%s%zu", k ? " " : "  ", row[k]);
    std::printf("\n");
  }
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw DataError("cannot write '" + p.string() + "'");
  out << text;
}

struct TrainOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::size_t seeds = 1;
  std::string ablate;
  std::string modalities;
  std::optional<std::size_t> epochs;
  std::string out;
  bool quiet = false;
};

int run_train(const TrainOptions& o, const std::string& spec) {
  KeyValues kv = KeyValues::load(o.config);
  if (!spec.empty()) kv.set("spec", spec);
  if (o.seed) kv.set("seed", std::to_string(*o.seed));
  if (!o.ablate.empty()) kv.set("ablate", o.ablate);
  if (!o.modalities.empty()) kv.set("modalities", o.modalities);
  if (o.epochs) kv.set("epochs", std::to_string(*o.epochs));
  if (!o.out.empty()) kv.set("out_dir", o.out);
  // relative data paths resolve against the config file's directory
  const fs::path base = fs::path(o.config).parent_path();
  for (const char* key : {"train_data", "val_data", "synthetic_config"}) {
    const auto v = kv.str(key, "");
    if (!v.empty() && fs::path(v).is_relative()) kv.set(key, (base / v).string());
  }
  RunConfig cfg = RunConfig::from(kv, o.config);
  if (o.seeds == 0) throw ConfigError("--seeds must be >= 1");
  const auto [train_set, val_set] = resolve_data(cfg);
  std::printf("train: %zu conversations (%zu utterances), validation: %zu conversations\n", train_set.size(),
              utterance_count(train_set), val_set.size());
  std::vector<double> accs, wf1s;
  const std::uint64_t first = cfg.model.seed;
  for (std::size_t k = 0; k < o.seeds; ++k) {
    RunConfig run = cfg;
    run.model.seed = first + k;
    const fs::path dir = o.seeds == 1 ? fs::path(cfg.out_dir) : fs::path(cfg.out_dir) / ("seed_" + std::to_string(run.model.seed));
    fs::create_directories(dir);
    auto result = train(run, train_set, val_set, [&](const EpochRecord& e) {
      if (!o.quiet)
        std::printf("seed %llu epoch %zu ce %.4f scl %.4f ucl %.4f val_acc %.4f val_wf1 %.4f\n",
                    static_cast<unsigned long long>(run.model.seed), e.epoch, e.loss_ce, e.loss_scl, e.loss_ucl,
                    e.val_acc, e.val_wf1);
      return true;
    });
    write_file(dir / "history.csv", history_csv(result.history));
    save_checkpoint((dir / "checkpoint").string(), run, result.model);
    std::printf("seed %llu best epoch %zu val_acc %.4f val_wf1 %.4f -> %s\n",
                static_cast<unsigned long long>(run.model.seed), result.best_epoch, result.best.accuracy,
                result.best.weighted_f1, dir.string().c_str());
    accs.push_back(result.best.accuracy);
    wf1s.push_back(result.best.weighted_f1);
  }
  if (o.seeds > 1) {
    const auto s = summarize(accs, wf1s);
    char buf[256];
    std::snprintf(buf, sizeof buf, "seeds %zu val_acc %.4f +- %.4f val_wf1 %.4f +- %.4f\n", o.seeds, s.mean_acc,
                  s.std_acc, s.mean_wf1, s.std_wf1);
    std::fputs(buf, stdout);
    write_file(fs::path(cfg.out_dir) / "summary.txt", buf);
  }
  return kOk;
}

int run_grad_check(const std::string& module, std::size_t instances, bool verbose) {
  const auto cases = run_grad_suite(module, instances);
  bool ok = true;
  std::string current;
  std::size_t passed = 0, total = 0;
  auto flush = [&] {
    if (!current.empty()) std::printf("%-10s %zu/%zu %s\n", current.c_str(), passed, total, passed == total ? "PASS" : "FAIL");
  };
  for (const auto& c : cases) {
    if (c.module != current) {
      flush();
      current = c.module;
      passed = total = 0;
    }
    ++total;
    passed += c.report.passed;
    ok = ok && c.report.passed;
    if (verbose || !c.report.passed) std::printf("  %s: %s\n", c.name.c_str(), c.report.summary().c_str());
  }
  flush();
  return ok ? kOk : kNumeric;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multimodal emotion recognition in conversation: prompt transformer with hybrid contrastive training"};
  app.require_subcommand(1);
  std::string spec;
  app.add_option("--spec", spec, "feature profile: iemocap, meld or custom:dt,da,dv,J[,M]");

  TrainOptions topt;
  auto* train_cmd = app.add_subcommand("train", "train a model from a run config");
  train_cmd->add_option("--config", topt.config, "run config file")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--seed", topt.seed, "model seed (overrides the config)");
  train_cmd->add_option("--seeds", topt.seeds, "train K consecutive seeds and report mean +- std");
  train_cmd->add_option("--ablate", topt.ablate, "comma list of no_mpt,no_ucl,no_scl,no_rgcn,full_audio,full_visual");
  train_cmd->add_option("--modalities", topt.modalities, "comma list over t,a,v");
  train_cmd->add_option("--epochs", topt.epochs, "epoch count (overrides the config)");
  train_cmd->add_option("--out", topt.out, "output directory (overrides out_dir)");
  train_cmd->add_flag("--quiet", topt.quiet, "only print the per-seed summary");

  std::string checkpoint, data, out;
  auto* eval_cmd = app.add_subcommand("eval", "score a checkpoint on a dataset");
  eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
  eval_cmd->add_option("--data", data, "dataset file (JSONL)")->required()->check(CLI::ExistingFile);

  std::string synth;
  auto* gen_cmd = app.add_subcommand("gen-data", "write a synthetic dataset");
  gen_cmd->add_option("--synthetic-config", synth, "generator config file")->required()->check(CLI::ExistingFile);
  gen_cmd->add_option("--out", out, "output JSONL path")->required();

  auto* dump_cmd = app.add_subcommand("dump-embeddings", "write fused features per utterance as CSV");
  dump_cmd->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
  dump_cmd->add_option("--data", data, "dataset file (JSONL)")->required()->check(CLI::ExistingFile);
  dump_cmd->add_option("--out", out, "output CSV path")->required();

  std::string module = "all";
  std::size_t instances = 5;
  bool verbose = false;
  auto* grad_cmd = app.add_subcommand("grad-check", "finite-difference gradient checks per module");
  grad_cmd->add_option("--module", module, "tensor, encoders, graph_rgcn, mpt, losses or all");
  grad_cmd->add_option("--instances", instances, "random instances per check");
  grad_cmd->add_flag("--verbose", verbose, "print every case");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kInvalid;
  }

  try {
    if (*train_cmd) return run_train(topt, spec);
    if (*eval_cmd) {
      auto ck = load_checkpoint(checkpoint);
      if (!spec.empty() && FeatureSpec::parse(spec).str() != ck.config.model.spec.str())
        throw ConfigError("--spec " + spec + " does not match the checkpoint's " + ck.config.model.spec.str());
      const auto ds = load_dataset(data, ck.config.model.spec);
      print_metrics(evaluate(ck.model, ds).metrics);
      return kOk;
    }
    if (*gen_cmd) {
      const auto sc = SyntheticConfig::from(KeyValues::load(synth), synth);
      const auto ds = generate_synthetic(sc);
      save_dataset(out, ds);
      std::printf("wrote %zu conversations (%zu utterances) to %s; spec %s\n", ds.size(), utterance_count(ds),
                  out.c_str(), sc.feature_spec().str().c_str());
      return kOk;
    }
    if (*dump_cmd) {
      auto ck = load_checkpoint(checkpoint);
      const auto ds = load_dataset(data, ck.config.model.spec);
      dump_embeddings(ck.model, ds, out);
      std::printf("wrote %zu rows to %s\n", utterance_count(ds), out.c_str());
      return kOk;
    }
    if (*grad_cmd) return run_grad_check(module, instances, verbose);
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return kNumeric;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kInvalid;
  }
  return kOk;
}
