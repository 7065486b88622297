#pragma once

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdint>
#include <limits>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "fortress/attacks.hpp"
#include "fortress/client.hpp"
#include "fortress/data.hpp"
#include "fortress/server.hpp"

namespace fortress {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class DataSource { kSynthetic, kCsv };

struct DataConfig {
  DataSource source = DataSource::kSynthetic;
  std::string path;
  SynthParams synth;
  std::size_t max_seq_len = 50;

  bool operator==(const DataConfig&) const = default;
};

struct ModelConfig {
  std::size_t dim = 32;
  bool operator==(const ModelConfig&) const = default;
};

struct AttackConfig {
  AttackSpec spec;
  // Targets drawn from the less popular half when spec.target_items is empty.
  std::size_t num_targets = 0;
  // First round in which attackers participate.
  std::size_t start_round = 1;
  // Share of items (by true interaction count) revealed to attackers as popular.
  double popular_fraction = 0.01;

  bool operator==(const AttackConfig&) const = default;
};

struct RunConfig {
  std::size_t rounds = 100;
  double client_fraction = 0.1;
  std::size_t eval_every = 5;
  std::vector<std::size_t> ks{5, 10, 20};
  std::uint64_t seed = 0;
  std::string out_dir = "out";
  std::size_t threads = 1;

  bool operator==(const RunConfig&) const = default;
};

struct ExperimentConfig {
  DataConfig data;
  ModelConfig model;
  ClientHyper client;
  DefenseHyper defense;
  AttackConfig attack;
  RunConfig run;

  bool operator==(const ExperimentConfig&) const = default;
};

namespace config_detail {

inline std::string format(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}
inline std::string format(std::size_t v) { return std::to_string(v); }
inline std::string format(std::uint64_t v, int) { return std::to_string(v); }
inline std::string format(bool v) { return v ? "true" : "false"; }
inline std::string format(const std::string& v) { return v; }
template <class T>
std::string format_list(const std::vector<T>& xs) {
  std::string s;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(xs[i]);
  }
  return s;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

template <class T>
T parse_number(std::string_view s, const std::string& name) {
  s = trim(s);
  T v{};
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
    throw ConfigError(name + ": cannot parse '" + std::string(s) + "'");
  }
  return v;
}

inline bool parse_bool(std::string_view s, const std::string& name) {
  s = trim(s);
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError(name + ": expected true or false, got '" + std::string(s) + "'");
}

template <class T>
std::vector<T> parse_list(std::string_view s, const std::string& name) {
  std::vector<T> out;
  s = trim(s);
  if (s.empty()) return out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = s.find(',', start);
    out.push_back(parse_number<T>(s.substr(start, comma - start), name));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

struct Field {
  std::string section;
  std::string key;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, std::string_view)> set;
  bool hashed = true;

  std::string name() const { return section + "." + key; }
};

template <class Access>
Field number(std::string section, std::string key, Access acc) {
  Field f{section, key, nullptr, nullptr};
  const std::string name = f.name();
  f.get = [acc](const ExperimentConfig& c) { return format(acc(c)); };
  f.set = [acc, name](ExperimentConfig& c, std::string_view s) {
    auto& ref = acc(c);
    ref = parse_number<std::remove_reference_t<decltype(ref)>>(s, name);
  };
  return f;
}

template <class Access>
Field seed(std::string section, std::string key, Access acc) {
  Field f{section, key, nullptr, nullptr};
  const std::string name = f.name();
  f.get = [acc](const ExperimentConfig& c) { return std::to_string(acc(c)); };
  f.set = [acc, name](ExperimentConfig& c, std::string_view s) {
    acc(c) = parse_number<std::uint64_t>(s, name);
  };
  return f;
}

template <class Access>
Field boolean(std::string section, std::string key, Access acc) {
  Field f{section, key, nullptr, nullptr};
  const std::string name = f.name();
  f.get = [acc](const ExperimentConfig& c) { return format(static_cast<bool>(acc(c))); };
  f.set = [acc, name](ExperimentConfig& c, std::string_view s) { acc(c) = parse_bool(s, name); };
  return f;
}

template <class T, class Access>
Field list(std::string section, std::string key, Access acc) {
  Field f{section, key, nullptr, nullptr};
  const std::string name = f.name();
  f.get = [acc](const ExperimentConfig& c) { return format_list(acc(c)); };
  f.set = [acc, name](ExperimentConfig& c, std::string_view s) {
    acc(c) = parse_list<T>(s, name);
  };
  return f;
}

// Every accepted key, in echo order.
inline const std::vector<Field>& fields() {
  static const std::vector<Field> all = [] {
    std::vector<Field> v;
    // [data]
    {
      Field f{"data", "source", nullptr, nullptr};
      f.get = [](const ExperimentConfig& c) {
        return std::string(c.data.source == DataSource::kCsv ? "csv" : "synthetic");
      };
      f.set = [](ExperimentConfig& c, std::string_view s) {
        s = trim(s);
        if (s == "csv") c.data.source = DataSource::kCsv;
        else if (s == "synthetic") c.data.source = DataSource::kSynthetic;
        else throw ConfigError("data.source: expected csv or synthetic");
      };
      v.push_back(f);
    }
    {
      Field f{"data", "path", nullptr, nullptr};
      f.get = [](const ExperimentConfig& c) { return c.data.path; };
      f.set = [](ExperimentConfig& c, std::string_view s) { c.data.path = std::string(trim(s)); };
      v.push_back(f);
    }
    v.push_back(number("data", "num_users", [](auto& c) -> auto& { return c.data.synth.num_users; }));
    v.push_back(number("data", "num_items", [](auto& c) -> auto& { return c.data.synth.num_items; }));
    v.push_back(number("data", "min_length", [](auto& c) -> auto& { return c.data.synth.min_length; }));
    v.push_back(number("data", "max_length", [](auto& c) -> auto& { return c.data.synth.max_length; }));
    v.push_back(number("data", "transition_skew",
                       [](auto& c) -> auto& { return c.data.synth.transition_skew; }));
    v.push_back(number("data", "zipf_exponent",
                       [](auto& c) -> auto& { return c.data.synth.zipf_exponent; }));
    v.push_back(seed("data", "seed", [](auto& c) -> auto& { return c.data.synth.seed; }));
    v.push_back(number("data", "max_seq_len", [](auto& c) -> auto& { return c.data.max_seq_len; }));
    // [model]
    v.push_back(number("model", "dim", [](auto& c) -> auto& { return c.model.dim; }));
    // [client]
    v.push_back(number("client", "lambda_cl", [](auto& c) -> auto& { return c.client.lambda_cl; }));
    v.push_back(number("client", "lambda_tcr", [](auto& c) -> auto& { return c.client.lambda_tcr; }));
    v.push_back(number("client", "tau", [](auto& c) -> auto& { return c.client.tau; }));
    v.push_back(number("client", "noise_sigma", [](auto& c) -> auto& { return c.client.noise_sigma; }));
    v.push_back(number("client", "local_epochs", [](auto& c) -> auto& { return c.client.local_epochs; }));
    v.push_back(number("client", "lr", [](auto& c) -> auto& { return c.client.lr; }));
    v.push_back(number("client", "tcr_window", [](auto& c) -> auto& { return c.client.tcr_window; }));
    v.push_back(number("client", "item_view_step",
                       [](auto& c) -> auto& { return c.client.item_view_step; }));
    v.push_back(number("client", "neg_count", [](auto& c) -> auto& { return c.client.neg_count; }));
    v.push_back(number("client", "clip_norm", [](auto& c) -> auto& { return c.client.clip_norm; }));
    v.push_back(number("client", "crop_prob",
                       [](auto& c) -> auto& { return c.client.augmentation.crop_prob; }));
    v.push_back(number("client", "mask_prob",
                       [](auto& c) -> auto& { return c.client.augmentation.mask_prob; }));
    v.push_back(number("client", "reorder_prob",
                       [](auto& c) -> auto& { return c.client.augmentation.reorder_prob; }));
    v.push_back(number("client", "crop_ratio",
                       [](auto& c) -> auto& { return c.client.augmentation.crop_ratio; }));
    v.push_back(number("client", "mask_ratio",
                       [](auto& c) -> auto& { return c.client.augmentation.mask_ratio; }));
    v.push_back(number("client", "reorder_window",
                       [](auto& c) -> auto& { return c.client.augmentation.reorder_window; }));
    {
      Field f{"client", "weight_by", nullptr, nullptr};
      f.get = [](const ExperimentConfig& c) {
        return std::string(c.client.weight_by == WeightBy::kSamples ? "samples" : "interactions");
      };
      f.set = [](ExperimentConfig& c, std::string_view s) {
        s = trim(s);
        if (s == "samples") c.client.weight_by = WeightBy::kSamples;
        else if (s == "interactions") c.client.weight_by = WeightBy::kInteractions;
        else throw ConfigError("client.weight_by: expected interactions or samples");
      };
      v.push_back(f);
    }
    // [defense]
    v.push_back(number("defense", "lambda_sep", [](auto& c) -> auto& { return c.defense.lambda_sep; }));
    v.push_back(number("defense", "lambda_var", [](auto& c) -> auto& { return c.defense.lambda_var; }));
    v.push_back(number("defense", "tau_sep", [](auto& c) -> auto& { return c.defense.tau_sep; }));
    v.push_back(number("defense", "hot_fraction",
                       [](auto& c) -> auto& { return c.defense.hot_fraction; }));
    v.push_back(number("defense", "sp_fraction", [](auto& c) -> auto& { return c.defense.sp_fraction; }));
    v.push_back(number("defense", "neighborhood_k",
                       [](auto& c) -> auto& { return c.defense.neighborhood_k; }));
    v.push_back(number("defense", "server_lr", [](auto& c) -> auto& { return c.defense.server_lr; }));
    v.push_back(number("defense", "ema_beta", [](auto& c) -> auto& { return c.defense.ema_beta; }));
    v.push_back(number("defense", "steps", [](auto& c) -> auto& { return c.defense.steps; }));
    v.push_back(number("defense", "low_visibility_quantile",
                       [](auto& c) -> auto& { return c.defense.low_visibility_quantile; }));
    v.push_back(number("defense", "drift_percentile",
                       [](auto& c) -> auto& { return c.defense.drift_percentile; }));
    // [attack]
    {
      Field f{"attack", "kind", nullptr, nullptr};
      f.get = [](const ExperimentConfig& c) {
        switch (c.attack.spec.kind) {
          case AttackKind::kPromotion: return std::string("promotion");
          case AttackKind::kCamouflage: return std::string("camouflage");
          default: return std::string("none");
        }
      };
      f.set = [](ExperimentConfig& c, std::string_view s) {
        s = trim(s);
        if (s == "none") c.attack.spec.kind = AttackKind::kNone;
        else if (s == "promotion") c.attack.spec.kind = AttackKind::kPromotion;
        else if (s == "camouflage") c.attack.spec.kind = AttackKind::kCamouflage;
        else throw ConfigError("attack.kind: expected none, promotion or camouflage");
      };
      v.push_back(f);
    }
    v.push_back(list<ItemId>("attack", "targets",
                             [](auto& c) -> auto& { return c.attack.spec.target_items; }));
    v.push_back(number("attack", "num_targets", [](auto& c) -> auto& { return c.attack.num_targets; }));
    v.push_back(number("attack", "malicious_fraction",
                       [](auto& c) -> auto& { return c.attack.spec.malicious_fraction; }));
    v.push_back(number("attack", "pseudo_users_per_client",
                       [](auto& c) -> auto& { return c.attack.spec.pseudo_users_per_client; }));
    v.push_back(number("attack", "pseudo_seq_len",
                       [](auto& c) -> auto& { return c.attack.spec.pseudo_seq_len; }));
    v.push_back(number("attack", "alt_item_count",
                       [](auto& c) -> auto& { return c.attack.spec.alt_item_count; }));
    v.push_back(number("attack", "camo_steps", [](auto& c) -> auto& { return c.attack.spec.camo_steps; }));
    v.push_back(number("attack", "camo_lr", [](auto& c) -> auto& { return c.attack.spec.camo_lr; }));
    v.push_back(boolean("attack", "norm_match", [](auto& c) -> auto& { return c.attack.spec.norm_match; }));
    v.push_back(number("attack", "start_round", [](auto& c) -> auto& { return c.attack.start_round; }));
    v.push_back(number("attack", "popular_fraction",
                       [](auto& c) -> auto& { return c.attack.popular_fraction; }));
    // [run]
    v.push_back(number("run", "rounds", [](auto& c) -> auto& { return c.run.rounds; }));
    v.push_back(number("run", "client_fraction",
                       [](auto& c) -> auto& { return c.run.client_fraction; }));
    v.push_back(number("run", "eval_every", [](auto& c) -> auto& { return c.run.eval_every; }));
    v.push_back(list<std::size_t>("run", "k", [](auto& c) -> auto& { return c.run.ks; }));
    v.push_back(seed("run", "seed", [](auto& c) -> auto& { return c.run.seed; }));
    {
      Field f{"run", "out_dir", nullptr, nullptr};
      f.get = [](const ExperimentConfig& c) { return c.run.out_dir; };
      f.set = [](ExperimentConfig& c, std::string_view s) { c.run.out_dir = std::string(trim(s)); };
      f.hashed = false;
      v.push_back(f);
    }
    {
      Field f = number("run", "threads", [](auto& c) -> auto& { return c.run.threads; });
      f.hashed = false;
      v.push_back(f);
    }
    return v;
  }();
  return all;
}

}  // namespace config_detail

// Checks every invariant; errors name the offending field.
inline void validate(const ExperimentConfig& c) {
  auto wrap = [](const char* section, auto&& fn) {
    try {
      fn();
    } catch (const InvalidHyperparameter& e) {
      throw ConfigError(std::string(section) + "." + e.what());
    }
  };
  if (c.data.source == DataSource::kCsv && c.data.path.empty()) {
    throw ConfigError("data.path: required when data.source = csv");
  }
  if (c.data.source == DataSource::kSynthetic) {
    if (c.data.synth.num_items < 10) throw ConfigError("data.num_items must be >= 10");
    if (c.data.synth.num_users < 1) throw ConfigError("data.num_users must be >= 1");
    if (c.data.synth.transition_skew < 0.0 || c.data.synth.transition_skew > 1.0) {
      throw ConfigError("data.transition_skew must lie in [0, 1]");
    }
    if (c.data.synth.min_length < 3 || c.data.synth.max_length < c.data.synth.min_length) {
      throw ConfigError("data.min_length/max_length: need 3 <= min_length <= max_length");
    }
  }
  if (c.model.dim < 2) throw ConfigError("model.dim must be >= 2");
  wrap("client", [&] { validate(c.client); });
  wrap("defense", [&] { validate(c.defense); });
  wrap("attack", [&] {
    validate(c.attack.spec, c.data.source == DataSource::kSynthetic
                                ? c.data.synth.num_items
                                : std::numeric_limits<std::size_t>::max());
  });
  if (c.attack.spec.kind != AttackKind::kNone && c.attack.spec.target_items.empty() &&
      c.attack.num_targets == 0) {
    throw ConfigError("attack.targets: an attack needs targets or num_targets > 0");
  }
  if (!(c.attack.popular_fraction > 0.0 && c.attack.popular_fraction <= 1.0)) {
    throw ConfigError("attack.popular_fraction must lie in (0, 1]");
  }
  if (c.run.rounds < 1) throw ConfigError("run.rounds must be >= 1");
  if (!(c.run.client_fraction > 0.0 && c.run.client_fraction <= 1.0)) {
    throw ConfigError("run.client_fraction must lie in (0, 1]");
  }
  if (c.run.eval_every < 1) throw ConfigError("run.eval_every must be >= 1");
  if (c.run.ks.empty()) throw ConfigError("run.k must list at least one cutoff");
  for (std::size_t k : c.run.ks) {
    if (k < 1) throw ConfigError("run.k: cutoffs must be >= 1");
  }
}

inline ExperimentConfig parse_config_text(const std::string& text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config syntax error: ") + e.what());
  }
  ExperimentConfig cfg;
  const auto& all = config_detail::fields();
  for (const auto& [section, body] : tree) {
    if (body.empty()) {
      throw ConfigError("key '" + section + "' must appear inside a [section]");
    }
    for (const auto& [key, value] : body) {
      const auto it = std::find_if(all.begin(), all.end(), [&](const auto& f) {
        return f.section == section && f.key == key;
      });
      if (it == all.end()) throw ConfigError("unknown config key '" + section + "." + key + "'");
      it->set(cfg, value.data());
    }
  }
  validate(cfg);
  return cfg;
}

inline ExperimentConfig parse_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

// Canonical dump with every field, defaults included. Doubles are printed in
// shortest round-trip form, so parse(echo(c)) == c.
inline std::string echo_config(const ExperimentConfig& c, bool hashed_only = false) {
  std::string out;
  std::string section;
  for (const auto& f : config_detail::fields()) {
    if (hashed_only && !f.hashed) continue;
    if (f.section != section) {
      if (!section.empty()) out += '\n';
      section = f.section;
      out += "[" + section + "]\n";
    }
    out += f.key + " = " + f.get(c) + "\n";
  }
  return out;
}

inline std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Hash of every field that influences results (output dir and thread count
// excluded).
inline std::uint64_t config_hash(const ExperimentConfig& c) {
  return fnv1a64(echo_config(c, /*hashed_only=*/true));
}

}  // namespace fortress
