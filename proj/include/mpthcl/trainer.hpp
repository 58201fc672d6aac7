#pragma once

// Run configuration, the training loop, evaluation, checkpoints and
// embedding dumps.

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "mpthcl/adam.hpp"
#include "mpthcl/config.hpp"
#include "mpthcl/dataio.hpp"
#include "mpthcl/metrics.hpp"
#include "mpthcl/model.hpp"

namespace mpthcl {

struct RunConfig {
  ModelConfig model;
  double lambda1 = 0.1;
  double lambda2 = 0.05;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  std::size_t epochs = 300;
  std::size_t batch_size = 4;
  std::string train_data;        // JSONL; empty means generate from synthetic_config
  std::string val_data;          // JSONL; empty means hold out val_fraction of the training set
  std::string synthetic_config;  // key-value generator config
  double val_fraction = 0.2;
  double stop_at_val_acc = 0.0;  // > 0: stop once validation accuracy reaches it
  std::string out_dir = "run";

  static double default_lr(const FeatureSpec& spec) {
    if (spec.name == "iemocap") return 1e-4;
    if (spec.name == "meld") return 3e-4;
    return 1e-3;
  }

  static const std::vector<std::string>& known_keys() {
    static const std::vector<std::string> keys{
        "spec", "d_model", "bottleneck", "d_ff", "mpt_layers", "heads", "window", "rgcn_layers", "dropout",
        "leaky_slope", "tau", "ablate", "modalities", "seed", "lambda1", "lambda2", "lr", "beta1", "beta2",
        "epochs", "batch_size", "train_data", "val_data", "synthetic_config", "val_fraction",
        "stop_at_val_acc", "out_dir"};
    return keys;
  }

  static RunConfig from(const KeyValues& kv, const std::string& origin) {
    kv.require_known(known_keys(), origin);
    RunConfig r;
    auto& m = r.model;
    m.spec = FeatureSpec::parse(kv.str("spec", "iemocap"));
    auto count = [&](const std::string& key, std::size_t fallback) {
      const long v = kv.integer(key, static_cast<long>(fallback));
      if (v < 0) throw ConfigError(origin + ": '" + key + "' must be non-negative");
      return static_cast<std::size_t>(v);
    };
    m.d = count("d_model", m.d);
    m.bottleneck = count("bottleneck", 0);
    m.d_ff = count("d_ff", 0);
    m.mpt_layers = count("mpt_layers", m.mpt_layers);
    m.heads = count("heads", m.heads);
    m.window = count("window", m.window);
    m.rgcn_layers = count("rgcn_layers", m.rgcn_layers);
    m.dropout = kv.num("dropout", m.dropout);
    m.leaky_slope = kv.num("leaky_slope", m.leaky_slope);
    m.tau = kv.num("tau", m.tau);
    m.ablate = Ablation::parse(kv.str("ablate", "none"));
    m.modalities = parse_modalities(kv.str("modalities", "t,a,v"));
    m.seed = count("seed", m.seed);
    r.lambda1 = kv.num("lambda1", r.lambda1);
    r.lambda2 = kv.num("lambda2", r.lambda2);
    r.lr = kv.num("lr", default_lr(m.spec));
    r.beta1 = kv.num("beta1", r.beta1);
    r.beta2 = kv.num("beta2", r.beta2);
    r.epochs = count("epochs", r.epochs);
    r.batch_size = count("batch_size", r.batch_size);
    r.train_data = kv.str("train_data", "");
    r.val_data = kv.str("val_data", "");
    r.synthetic_config = kv.str("synthetic_config", "");
    r.val_fraction = kv.num("val_fraction", r.val_fraction);
    r.stop_at_val_acc = kv.num("stop_at_val_acc", 0.0);
    r.out_dir = kv.str("out_dir", r.out_dir);
    r.validate();
    return r;
  }

  static RunConfig load(const std::string& path) { return from(KeyValues::load(path), path); }

  void validate() const {
    model.validate();
    auto fail = [](const std::string& m) { throw ConfigError("run config: " + m); };
    if (lambda1 < 0 || lambda2 < 0) fail("lambda1 and lambda2 must be non-negative");
    if (!(lr > 0)) fail("lr must be positive");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) fail("betas must lie in [0, 1)");
    if (epochs == 0) fail("epochs must be >= 1");
    if (batch_size == 0) fail("batch_size must be >= 1");
    if (!(val_fraction >= 0 && val_fraction < 1)) fail("val_fraction must lie in [0, 1)");
  }

  KeyValues to_keyvalues() const {
    KeyValues kv;
    auto num = [](double x) {
      char buf[64];
      std::snprintf(buf, sizeof buf, "%.17g", x);
      return std::string(buf);
    };
    kv.set("spec", model.spec.str());
    kv.set("d_model", std::to_string(model.d));
    kv.set("bottleneck", std::to_string(model.bottleneck));
    kv.set("d_ff", std::to_string(model.d_ff));
    kv.set("mpt_layers", std::to_string(model.mpt_layers));
    kv.set("heads", std::to_string(model.heads));
    kv.set("window", std::to_string(model.window));
    kv.set("rgcn_layers", std::to_string(model.rgcn_layers));
    kv.set("dropout", num(model.dropout));
    kv.set("leaky_slope", num(model.leaky_slope));
    kv.set("tau", num(model.tau));
    kv.set("ablate", model.ablate.str());
    kv.set("modalities", modalities_str(model.modalities));
    kv.set("seed", std::to_string(model.seed));
    kv.set("lambda1", num(lambda1));
    kv.set("lambda2", num(lambda2));
    kv.set("lr", num(lr));
    kv.set("beta1", num(beta1));
    kv.set("beta2", num(beta2));
    kv.set("epochs", std::to_string(epochs));
    kv.set("batch_size", std::to_string(batch_size));
    return kv;
  }
};

// ---------------------------------------------------------------------------

struct Evaluation {
  Metrics metrics;
  std::vector<int> predictions;  // utterance order across the dataset
};

/// Eval-mode pass (no dropout). Pure: repeated calls agree exactly.
inline Evaluation evaluate(const Model& m, const Dataset& ds) {
  if (ds.empty()) throw DataError("evaluate: empty dataset");
  Evaluation e;
  std::vector<int> labels;
  for (const auto& c : ds) {
    const auto pred = argmax_rows(forward(m, c).logits);
    e.predictions.insert(e.predictions.end(), pred.begin(), pred.end());
    for (const auto& u : c.utterances) labels.push_back(u.label);
  }
  e.metrics = compute_metrics(labels, e.predictions, m.config.spec.classes);
  return e;
}

struct EpochRecord {
  std::size_t epoch = 0;
  double loss_ce = 0, loss_scl = 0, loss_ucl = 0;
  double val_acc = 0, val_wf1 = 0;

  bool operator==(const EpochRecord&) const = default;
};

inline const char* kHistoryHeader = "epoch,loss_ce,loss_scl,loss_ucl,val_acc,val_wf1";

inline std::string history_csv(const std::vector<EpochRecord>& h) {
  std::string out = std::string(kHistoryHeader) + "\n";
  char buf[256];
  for (const auto& r : h) {
    std::snprintf(buf, sizeof buf, "%zu,%.10g,%.10g,%.10g,%.10g,%.10g\n", r.epoch, r.loss_ce, r.loss_scl, r.loss_ucl,
                  r.val_acc, r.val_wf1);
    out += buf;
  }
  return out;
}

using ParamSnapshot = std::vector<std::vector<double>>;

inline ParamSnapshot snapshot(const ParamStore& ps) {
  ParamSnapshot s;
  for (const auto& [_, t] : ps) s.push_back(t.values());
  return s;
}

inline void restore(ParamStore& ps, const ParamSnapshot& s) {
  std::size_t i = 0;
  for (auto& [_, t] : ps) {
    auto w = t.mutable_data();
    std::copy(s.at(i).begin(), s.at(i).end(), w.begin());
    ++i;
  }
}

struct TrainResult {
  Model model;  // holds the best-epoch parameters
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  Metrics best;
};

/// Called after each epoch; return false to stop early.
using EpochCallback = std::function<bool(const EpochRecord&)>;

/// Adam over batches of whole conversations. The best epoch by validation
/// W-F1 is kept (earlier epoch on ties). With an empty validation set the
/// training set is scored instead.
inline TrainResult train(const RunConfig& cfg, const Dataset& train_set, const Dataset& val_set,
                         const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (train_set.empty()) throw DataError("train: empty training set");
  for (const auto& c : train_set) validate(c, cfg.model.spec);
  for (const auto& c : val_set) validate(c, cfg.model.spec);
  const Dataset& scored = val_set.empty() ? train_set : val_set;
  TrainResult r{build_model(cfg.model), {}, 0, {}};
  Model& m = r.model;
  AdamState adam;
  adam.lr = cfg.lr;
  adam.beta1 = cfg.beta1;
  adam.beta2 = cfg.beta2;
  Rng drop = Rng::for_stream(cfg.model.seed, Stream::kDropout);
  ParamSnapshot best_params;
  double best_wf1 = -1.0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const std::uint64_t shuffle = Rng::for_stream(cfg.model.seed, Stream::kShuffle, epoch).next_u64();
    const auto plan = batch_iter(train_set, cfg.batch_size, shuffle);
    EpochRecord rec;
    rec.epoch = epoch;
    for (std::size_t b = 0; b < plan.size(); ++b) {
      LossParts loss;
      try {
        m.params.zero_grad();
        loss = batch_loss(m, train_set, plan[b], cfg.lambda1, cfg.lambda2, true, &drop);
        backward(loss.total);
        adam_step(m.params, adam);
      } catch (const NumericError& e) {
        throw NumericError("epoch " + std::to_string(epoch) + " batch " + std::to_string(b) + ": " + e.what());
      }
      rec.loss_ce += loss.ce.item() / plan.size();
      rec.loss_scl += loss.scl.item() / plan.size();
      rec.loss_ucl += loss.ucl.item() / plan.size();
    }
    Evaluation ev;
    try {
      ev = evaluate(m, scored);
    } catch (const NumericError& e) {
      throw NumericError("epoch " + std::to_string(epoch) + " validation after batch " +
                         std::to_string(plan.size() - 1) + ": " + e.what());
    }
    rec.val_acc = ev.metrics.accuracy;
    rec.val_wf1 = ev.metrics.weighted_f1;
    r.history.push_back(rec);
    if (rec.val_wf1 > best_wf1) {
      best_wf1 = rec.val_wf1;
      r.best_epoch = epoch;
      r.best = ev.metrics;
      best_params = snapshot(m.params);
    }
    if (on_epoch && !on_epoch(rec)) break;
    if (cfg.stop_at_val_acc > 0 && rec.val_acc >= cfg.stop_at_val_acc) break;
  }
  restore(m.params, best_params);
  return r;
}

// ---------------------------------------------------------------------------
// Checkpoints: a directory with config.txt (run config keys), manifest.txt
// ("name dims offset", one parameter per line, offsets in doubles) and
// params.bin (raw little-endian f64 in manifest order).

inline void save_checkpoint(const std::string& dir, const RunConfig& cfg, const Model& m) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create checkpoint directory '" + dir + "': " + ec.message());
  {
    std::ofstream out(fs::path(dir) / "config.txt");
    if (!out) throw DataError("cannot write '" + dir + "/config.txt'");
    const KeyValues kv = cfg.to_keyvalues();
    for (const auto& [k, v] : kv.all()) out << k << " = " << v << "\n";
  }
  std::ofstream manifest(fs::path(dir) / "manifest.txt");
  std::ofstream bin(fs::path(dir) / "params.bin", std::ios::binary);
  if (!manifest || !bin) throw DataError("cannot write checkpoint files in '" + dir + "'");
  std::size_t offset = 0;
  for (const auto& [name, t] : m.params) {
    std::string dims;
    for (std::size_t i = 0; i < t.rank(); ++i) dims += (i ? "x" : "") + std::to_string(t.dim(i));
    manifest << name << " " << dims << " " << offset << "\n";
    for (double v : t.data()) {
      unsigned char bytes[8];
      std::uint64_t u;
      std::memcpy(&u, &v, 8);
      for (int k = 0; k < 8; ++k) bytes[k] = static_cast<unsigned char>(u >> (8 * k));
      bin.write(reinterpret_cast<const char*>(bytes), 8);
    }
    offset += t.numel();
  }
  if (!bin) throw DataError("failed writing '" + dir + "/params.bin'");
}

struct Checkpoint {
  RunConfig config;
  Model model;
};

inline Checkpoint load_checkpoint(const std::string& dir) {
  namespace fs = std::filesystem;
  const auto cfg_path = (fs::path(dir) / "config.txt").string();
  if (!fs::exists(cfg_path)) throw DataError("no checkpoint at '" + dir + "' (missing config.txt)");
  Checkpoint ck{RunConfig::load(cfg_path), {}};
  ck.model = build_model(ck.config.model);
  std::ifstream manifest(fs::path(dir) / "manifest.txt");
  std::ifstream bin(fs::path(dir) / "params.bin", std::ios::binary);
  if (!manifest || !bin) throw DataError("checkpoint '" + dir + "' is missing manifest.txt or params.bin");
  std::vector<char> raw((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
  if (raw.size() % 8) throw DataError("checkpoint '" + dir + "': params.bin size is not a multiple of 8");
  std::string line;
  std::size_t seen = 0;
  while (std::getline(manifest, line)) {
    if (trim(line).empty()) continue;
    std::istringstream in(line);
    std::string name, dims;
    std::size_t offset = 0;
    if (!(in >> name >> dims >> offset)) throw DataError("checkpoint '" + dir + "': bad manifest line '" + line + "'");
    if (!ck.model.params.contains(name))
      throw DataError("checkpoint '" + dir + "': parameter '" + name + "' does not exist in the configured model");
    Tensor& t = ck.model.params.get(name);
    std::string want;
    for (std::size_t i = 0; i < t.rank(); ++i) want += (i ? "x" : "") + std::to_string(t.dim(i));
    if (want != dims)
      throw DataError("checkpoint '" + dir + "': parameter '" + name + "' has shape " + dims + ", model expects " + want);
    if ((offset + t.numel()) * 8 > raw.size())
      throw DataError("checkpoint '" + dir + "': parameter '" + name + "' runs past the end of params.bin");
    auto w = t.mutable_data();
    for (std::size_t i = 0; i < t.numel(); ++i) {
      std::uint64_t u = 0;
      for (int k = 0; k < 8; ++k)
        u |= static_cast<std::uint64_t>(static_cast<unsigned char>(raw[(offset + i) * 8 + k])) << (8 * k);
      std::memcpy(&w[i], &u, 8);
    }
    ++seen;
  }
  if (seen != ck.model.params.size())
    throw DataError("checkpoint '" + dir + "': manifest lists " + std::to_string(seen) + " parameters, model has " +
                    std::to_string(ck.model.params.size()));
  return ck;
}

/// One CSV row per utterance: ids, labels and the fused features.
inline void dump_embeddings(const Model& m, const Dataset& ds, std::ostream& out) {
  const std::size_t width = 3 * m.config.d;
  out << "conversation_id,index,label,predicted";
  for (std::size_t k = 0; k < width; ++k) out << ",f" << k;
  out << "\n";
  char buf[40];
  for (const auto& c : ds) {
    const auto r = forward(m, c);
    const auto pred = argmax_rows(r.logits);
    for (std::size_t i = 0; i < c.size(); ++i) {
      out << c.id << "," << i << "," << c.utterances[i].label << "," << pred[i];
      for (std::size_t k = 0; k < width; ++k) {
        std::snprintf(buf, sizeof buf, ",%.17g", r.x_fusion.at(i, k));
        out << buf;
      }
      out << "\n";
    }
  }
}

inline void dump_embeddings(const Model& m, const Dataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write embeddings to '" + path + "'");
  dump_embeddings(m, ds, out);
  if (!out) throw DataError("failed writing embeddings to '" + path + "'");
}

// ---------------------------------------------------------------------------

/// Training and validation sets for a run: files when given, otherwise the
/// synthetic generator, with a held-out tail when no validation file is set.
inline std::pair<Dataset, Dataset> resolve_data(const RunConfig& cfg) {
  Dataset train_set, val_set;
  if (!cfg.train_data.empty()) {
    train_set = load_dataset(cfg.train_data, cfg.model.spec);
  } else if (!cfg.synthetic_config.empty()) {
    const auto sc = SyntheticConfig::from(KeyValues::load(cfg.synthetic_config), cfg.synthetic_config);
    const auto spec = sc.feature_spec();
    if (spec.d_t != cfg.model.spec.d_t || spec.d_a != cfg.model.spec.d_a || spec.d_v != cfg.model.spec.d_v ||
        spec.classes != cfg.model.spec.classes)
      throw ConfigError("synthetic config dims " + spec.str() + " do not match model spec " + cfg.model.spec.str());
    train_set = generate_synthetic(sc);
  } else {
    throw ConfigError("run config needs train_data or synthetic_config");
  }
  if (!cfg.val_data.empty()) {
    val_set = load_dataset(cfg.val_data, cfg.model.spec);
  } else if (cfg.val_fraction > 0) {
    const auto keep = train_set.size() - static_cast<std::size_t>(std::floor(train_set.size() * cfg.val_fraction));
    std::tie(train_set, val_set) = split_dataset(train_set, keep);
  }
  return {train_set, val_set};
}

struct SeedSummary {
  std::vector<double> acc, wf1;
  double mean_acc = 0, std_acc = 0, mean_wf1 = 0, std_wf1 = 0;
};

inline SeedSummary summarize(const std::vector<double>& acc, const std::vector<double>& wf1) {
  SeedSummary s{acc, wf1};
  auto stats = [](const std::vector<double>& v, double& mean, double& sd) {
    mean = 0;
    for (double x : v) mean += x / v.size();
    sd = 0;
    for (double x : v) sd += (x - mean) * (x - mean);
    sd = v.size() > 1 ? std::sqrt(sd / (v.size() - 1)) : 0.0;
  };
  stats(acc, s.mean_acc, s.std_acc);
  stats(wf1, s.mean_wf1, s.std_wf1);
  return s;
}

}  // namespace mpthcl
