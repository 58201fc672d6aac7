#pragma once

// Conversations with precomputed text/audio/visual features, their
// line-delimited JSON file format, a synthetic generator and batching.
//
// File format: one conversation per line,
//   {"id": str, "speakers": [int], "labels": [int],
//    "text": [[float]], "audio": [[float]], "visual": [[float]]}
// with one entry per utterance in each array.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "mpthcl/config.hpp"
#include "mpthcl/rng.hpp"

namespace mpthcl {

/// Dataset content that violates the feature spec or the file schema.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct FeatureSpec {
  std::string name = "custom";
  std::size_t d_t = 1024;
  std::size_t d_a = 1582;
  std::size_t d_v = 342;
  std::size_t classes = 6;
  std::size_t max_speakers = 2;

  static FeatureSpec iemocap() { return {"iemocap", 1024, 1582, 342, 6, 2}; }
  static FeatureSpec meld() { return {"meld", 1024, 300, 342, 7, 9}; }

  /// "iemocap", "meld" or "custom:dt,da,dv,J[,M]".
  static FeatureSpec parse(const std::string& s) {
    if (s == "iemocap") return iemocap();
    if (s == "meld") return meld();
    if (s.rfind("custom:", 0) == 0) {
      const auto parts = split(s.substr(7), ',');
      if (parts.size() != 4 && parts.size() != 5)
        throw ConfigError("feature spec '" + s + "': expected custom:dt,da,dv,J[,M]");
      std::vector<std::size_t> v;
      for (const auto& p : parts) {
        char* end = nullptr;
        const long x = std::strtol(p.c_str(), &end, 10);
        if (end == p.c_str() || *end != '\0' || x <= 0)
          throw ConfigError("feature spec '" + s + "': '" + p + "' is not a positive integer");
        v.push_back(static_cast<std::size_t>(x));
      }
      FeatureSpec f{"custom", v[0], v[1], v[2], v[3], parts.size() == 5 ? v[4] : 2};
      if (f.classes < 2) throw ConfigError("feature spec '" + s + "': need at least 2 classes");
      return f;
    }
    throw ConfigError("unknown feature spec '" + s + "' (iemocap, meld, custom:dt,da,dv,J[,M])");
  }

  std::string str() const {
    if (name == "iemocap" || name == "meld") return name;
    return "custom:" + std::to_string(d_t) + "," + std::to_string(d_a) + "," + std::to_string(d_v) +
           "," + std::to_string(classes) + "," + std::to_string(max_speakers);
  }
};

struct Utterance {
  int speaker = 0;
  int label = 0;
  std::vector<double> text;
  std::vector<double> audio;
  std::vector<double> visual;

  bool operator==(const Utterance&) const = default;
};

struct Conversation {
  std::string id;
  std::vector<Utterance> utterances;

  std::size_t size() const { return utterances.size(); }
  /// Number of distinct speaker slots, at least 2.
  std::size_t speaker_count() const {
    int m = 1;
    for (const auto& u : utterances) m = std::max(m, u.speaker);
    return static_cast<std::size_t>(m) + 1;
  }
  std::vector<int> speakers() const {
    std::vector<int> s;
    for (const auto& u : utterances) s.push_back(u.speaker);
    return s;
  }
  std::vector<int> labels() const {
    std::vector<int> s;
    for (const auto& u : utterances) s.push_back(u.label);
    return s;
  }

  bool operator==(const Conversation&) const = default;
};

using Dataset = std::vector<Conversation>;

inline std::size_t utterance_count(const Dataset& ds) {
  std::size_t n = 0;
  for (const auto& c : ds) n += c.size();
  return n;
}

inline void validate(const Conversation& c, const FeatureSpec& spec) {
  if (c.utterances.empty()) throw DataError("conversation '" + c.id + "': no utterances");
  for (std::size_t i = 0; i < c.utterances.size(); ++i) {
    const auto& u = c.utterances[i];
    const std::string where = "conversation '" + c.id + "' utterance " + std::to_string(i);
    auto dims = [&](const std::vector<double>& v, std::size_t want, const char* modality) {
      if (v.size() != want)
        throw DataError(where + ": " + modality + " feature has dim " + std::to_string(v.size()) +
                        ", expected " + std::to_string(want));
      for (double x : v)
        if (!std::isfinite(x)) throw DataError(where + ": non-finite " + modality + " feature");
    };
    dims(u.text, spec.d_t, "text");
    dims(u.audio, spec.d_a, "audio");
    dims(u.visual, spec.d_v, "visual");
    if (u.label < 0 || static_cast<std::size_t>(u.label) >= spec.classes)
      throw DataError(where + ": label " + std::to_string(u.label) + " outside [0," +
                      std::to_string(spec.classes) + ")");
    if (u.speaker < 0) throw DataError(where + ": negative speaker id");
  }
}

inline Conversation conversation_from_json(const nlohmann::json& j, const FeatureSpec& spec) {
  Conversation c;
  if (!j.is_object()) throw DataError("record is not a JSON object");
  c.id = j.contains("id") && j["id"].is_string() ? j["id"].get<std::string>() : std::string("<no id>");
  for (const char* key : {"id", "speakers", "labels", "text", "audio", "visual"})
    if (!j.contains(key)) throw DataError("conversation '" + c.id + "': missing field '" + key + "'");
  try {
    const auto speakers = j["speakers"].get<std::vector<int>>();
    const auto labels = j["labels"].get<std::vector<int>>();
    const auto text = j["text"].get<std::vector<std::vector<double>>>();
    const auto audio = j["audio"].get<std::vector<std::vector<double>>>();
    const auto visual = j["visual"].get<std::vector<std::vector<double>>>();
    const std::size_t n = speakers.size();
    auto count = [&](std::size_t m, const char* what) {
      if (m != n)
        throw DataError("conversation '" + c.id + "': " + what + " has " + std::to_string(m) +
                        " entries but speakers has " + std::to_string(n) +
                        (m < n ? " (missing modality)" : ""));
    };
    count(labels.size(), "labels");
    count(text.size(), "text");
    count(audio.size(), "audio");
    count(visual.size(), "visual");
    for (std::size_t i = 0; i < n; ++i)
      c.utterances.push_back({speakers[i], labels[i], text[i], audio[i], visual[i]});
  } catch (const nlohmann::json::exception& e) {
    throw DataError("conversation '" + c.id + "': malformed field: " + e.what());
  }
  validate(c, spec);
  return c;
}

inline nlohmann::json conversation_to_json(const Conversation& c) {
  nlohmann::json j;
  j["id"] = c.id;
  std::vector<int> speakers, labels;
  std::vector<std::vector<double>> text, audio, visual;
  for (const auto& u : c.utterances) {
    speakers.push_back(u.speaker);
    labels.push_back(u.label);
    text.push_back(u.text);
    audio.push_back(u.audio);
    visual.push_back(u.visual);
  }
  j["speakers"] = speakers;
  j["labels"] = labels;
  j["text"] = text;
  j["audio"] = audio;
  j["visual"] = visual;
  return j;
}

inline Dataset parse_dataset(std::istream& in, const FeatureSpec& spec, const std::string& origin = "<stream>") {
  Dataset ds;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    try {
      ds.push_back(conversation_from_json(nlohmann::json::parse(line), spec));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(origin + ":" + std::to_string(lineno) + ": invalid JSON: " + e.what());
    } catch (const DataError& e) {
      throw DataError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return ds;
}

inline Dataset load_dataset(const std::string& path, const FeatureSpec& spec) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open dataset '" + path + "'");
  return parse_dataset(in, spec, path);
}

inline void write_dataset(std::ostream& out, const Dataset& ds) {
  for (const auto& c : ds) out << conversation_to_json(c).dump() << '\n';
}

inline void save_dataset(const std::string& path, const Dataset& ds) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write dataset '" + path + "'");
  write_dataset(out, ds);
  if (!out) throw DataError("write failed for '" + path + "'");
}

// ---------------------------------------------------------------------------
// Synthetic conversations

struct SyntheticConfig {
  std::size_t n_conversations = 40;
  std::size_t min_length = 8;
  std::size_t max_length = 8;
  std::size_t classes = 3;
  std::size_t speakers = 2;
  std::size_t d_t = 16;
  std::size_t d_a = 16;
  std::size_t d_v = 16;
  double separation = 1.0;    // per-coordinate class-mean scale before the split
  double cross_modal = 0.5;   // share of the label signal carried by audio/visual only
  double noise = 1.0;         // per-coordinate Gaussian noise
  std::vector<double> class_weights;  // empty: uniform
  std::uint64_t seed = 7;

  FeatureSpec feature_spec() const { return {"custom", d_t, d_a, d_v, classes, speakers}; }

  static SyntheticConfig from(const KeyValues& kv, const std::string& origin) {
    kv.require_known({"n_conversations", "min_length", "max_length", "conv_length", "classes", "speakers",
                      "d_t", "d_a", "d_v", "separation", "cross_modal", "noise", "class_weights", "seed"},
                     origin);
    SyntheticConfig c;
    auto nonneg = [&](const char* k, std::size_t fb) {
      const long v = kv.integer(k, static_cast<long>(fb));
      if (v < 0) throw ConfigError(origin + ": '" + k + "' must be non-negative");
      return static_cast<std::size_t>(v);
    };
    c.n_conversations = nonneg("n_conversations", c.n_conversations);
    if (kv.has("conv_length")) {
      const auto parts = split(kv.str("conv_length", ""), ',');
      if (parts.size() != 2) throw ConfigError(origin + ": conv_length expects min,max");
      KeyValues tmp;
      tmp.set("a", parts[0]);
      tmp.set("b", parts[1]);
      c.min_length = static_cast<std::size_t>(std::max(0L, tmp.integer("a", 0)));
      c.max_length = static_cast<std::size_t>(std::max(0L, tmp.integer("b", 0)));
    }
    c.min_length = nonneg("min_length", c.min_length);
    c.max_length = nonneg("max_length", c.max_length);
    c.classes = nonneg("classes", c.classes);
    c.speakers = nonneg("speakers", c.speakers);
    c.d_t = nonneg("d_t", c.d_t);
    c.d_a = nonneg("d_a", c.d_a);
    c.d_v = nonneg("d_v", c.d_v);
    c.separation = kv.num("separation", c.separation);
    c.cross_modal = kv.num("cross_modal", c.cross_modal);
    c.noise = kv.num("noise", c.noise);
    c.seed = static_cast<std::uint64_t>(kv.integer("seed", static_cast<long>(c.seed)));
    if (kv.has("class_weights"))
      for (const auto& p : split(kv.str("class_weights", ""), ',')) {
        KeyValues tmp;
        tmp.set("w", p);
        c.class_weights.push_back(tmp.num("w", 0));
      }
    return c;
  }
};

inline void validate(const SyntheticConfig& c) {
  if (c.n_conversations == 0) throw ConfigError("synthetic: n_conversations must be >= 1");
  if (c.min_length == 0 || c.max_length == 0 || c.min_length > c.max_length)
    throw ConfigError("synthetic: conversation length range [" + std::to_string(c.min_length) + "," +
                      std::to_string(c.max_length) + "] is empty");
  if (c.classes < 2) throw ConfigError("synthetic: need at least 2 classes");
  if (c.speakers < 2) throw ConfigError("synthetic: need at least 2 speakers");
  if (c.d_t == 0 || c.d_a == 0 || c.d_v == 0) throw ConfigError("synthetic: feature dims must be positive");
  if (!(c.cross_modal >= 0.0 && c.cross_modal <= 1.0))
    throw ConfigError("synthetic: cross_modal must lie in [0,1]");
  if (!(c.noise >= 0.0) || !(c.separation >= 0.0))
    throw ConfigError("synthetic: noise and separation must be non-negative");
  if (!c.class_weights.empty()) {
    if (c.class_weights.size() != c.classes)
      throw ConfigError("synthetic: class_weights needs one entry per class");
    double total = 0;
    for (double w : c.class_weights) {
      if (!(w >= 0.0)) throw ConfigError("synthetic: class weights must be non-negative");
      total += w;
    }
    if (total <= 0.0) throw ConfigError("synthetic: class weights sum to zero");
  }
}

/// Every class c owns a random mean direction per modality (entries N(0,1)).
/// An utterance of class c gets, per modality m, a_m * separation * mu_{m,c}
/// plus N(0, noise^2) noise, with a_t = 1 - cross_modal and a_a = a_v =
/// cross_modal.
inline Dataset generate_synthetic(const SyntheticConfig& cfg) {
  validate(cfg);
  Rng rng = Rng::for_stream(cfg.seed, Stream::kData);
  auto directions = [&](std::size_t dim) {
    std::vector<std::vector<double>> mu(cfg.classes, std::vector<double>(dim));
    for (auto& row : mu)
      for (auto& v : row) v = rng.normal();
    return mu;
  };
  const auto mu_t = directions(cfg.d_t);
  const auto mu_a = directions(cfg.d_a);
  const auto mu_v = directions(cfg.d_v);

  std::vector<double> cdf(cfg.classes);
  {
    double total = 0;
    for (std::size_t c = 0; c < cfg.classes; ++c) {
      total += cfg.class_weights.empty() ? 1.0 : cfg.class_weights[c];
      cdf[c] = total;
    }
    for (auto& v : cdf) v /= total;
  }

  const double a_text = (1.0 - cfg.cross_modal) * cfg.separation;
  const double a_aux = cfg.cross_modal * cfg.separation;
  auto feature = [&](const std::vector<double>& mu, double strength) {
    std::vector<double> f(mu.size());
    for (std::size_t k = 0; k < f.size(); ++k) f[k] = strength * mu[k] + cfg.noise * rng.normal();
    return f;
  };

  Dataset ds;
  ds.reserve(cfg.n_conversations);
  for (std::size_t n = 0; n < cfg.n_conversations; ++n) {
    Conversation c;
    char id[32];
    std::snprintf(id, sizeof id, "syn-%04zu", n);
    c.id = id;
    const std::size_t len = cfg.min_length + rng.below(cfg.max_length - cfg.min_length + 1);
    for (std::size_t i = 0; i < len; ++i) {
      Utterance u;
      u.speaker = static_cast<int>(rng.below(cfg.speakers));
      const double r = rng.uniform();
      std::size_t label = 0;
      while (label + 1 < cfg.classes && r >= cdf[label]) ++label;
      u.label = static_cast<int>(label);
      u.text = feature(mu_t[label], a_text);
      u.audio = feature(mu_a[label], a_aux);
      u.visual = feature(mu_v[label], a_aux);
      c.utterances.push_back(std::move(u));
    }
    ds.push_back(std::move(c));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Batching

/// Conversation indices per batch. Every index appears once; without a
/// seed the order is the dataset order.
using BatchPlan = std::vector<std::vector<std::size_t>>;

inline BatchPlan batch_iter(std::size_t n, std::size_t batch_size, std::optional<std::uint64_t> shuffle_seed) {
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (shuffle_seed) {
    Rng rng = Rng::for_stream(*shuffle_seed, Stream::kShuffle);
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  }
  BatchPlan plan;
  for (std::size_t s = 0; s < n; s += batch_size)
    plan.emplace_back(order.begin() + s, order.begin() + std::min(n, s + batch_size));
  return plan;
}

inline BatchPlan batch_iter(const Dataset& ds, std::size_t batch_size, std::optional<std::uint64_t> shuffle_seed) {
  return batch_iter(ds.size(), batch_size, shuffle_seed);
}

/// Split into (first, rest) with `first_count` conversations in the first.
inline std::pair<Dataset, Dataset> split_dataset(const Dataset& ds, std::size_t first_count) {
  first_count = std::min(first_count, ds.size());
  return {Dataset(ds.begin(), ds.begin() + first_count), Dataset(ds.begin() + first_count, ds.end())};
}

}  // namespace mpthcl
