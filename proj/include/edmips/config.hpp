#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "edmips/dataset.hpp"
#include "edmips/network.hpp"
#include "edmips/search.hpp"

namespace edmips {

inline constexpr const char* kConfigSchema = "edmips.config/1";

/// Invalid or unreadable configuration; the CLI maps it to exit code 2.
class ConfigError : public Error {
 public:
  using Error::Error;
};

struct ModelConfig {
  std::string name = "smallcnn";
  std::size_t num_classes = 10;
  std::size_t width = 8;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct ExperimentConfig {
  ModelConfig model;
  DatasetSpec dataset;
  SearchConfig search;
  std::string output_dir = "run";

  NetworkSpec network() const { return zoo_model(model.name, model.num_classes, model.width); }
};

namespace detail {

using nlohmann::json;

/// Reads fields out of one JSON object and rejects anything it did not read.
class Fields {
 public:
  Fields(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j.is_object()) throw ConfigError(where_ + ": expected an object");
  }

  bool has(const char* key) const { return j_.contains(key); }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    const json& v = j_.at(key);
    const std::string at = where_ + "." + key;
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(at + ": expected a boolean");
      out = v.get<bool>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(at + ": expected a string");
      out = v.get<std::string>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(at + ": expected a number");
      out = v.get<T>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<std::int64_t>() < 0)) {
        throw ConfigError(at + ": expected a nonnegative integer");
      }
      out = v.get<T>();
    } else {
      if (!v.is_array()) throw ConfigError(at + ": expected an array");
      out.clear();
      for (const auto& e : v) {
        using E = typename T::value_type;
        if constexpr (std::is_floating_point_v<E>) {
          if (!e.is_number()) throw ConfigError(at + ": expected numbers");
        } else {
          if (!e.is_number_integer()) throw ConfigError(at + ": expected integers");
          if (e.get<std::int64_t>() < 0) throw ConfigError(at + ": negative entry");
        }
        out.push_back(e.get<E>());
      }
    }
  }

  const json& sub(const char* key) {
    seen_.insert(key);
    return j_.at(key);
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError(where_ + ": unknown key '" + k + "'");
    }
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

inline json dataset_to_json(const DatasetSpec& d) {
  json j;
  if (const auto* s = std::get_if<SyntheticSource>(&d.source)) {
    j["source"] = "synthetic";
    j["classes"] = s->classes;
    j["dims"] = s->dims;
    j["samples"] = s->samples;
    j["seed"] = s->seed;
    j["noise"] = s->noise;
    j["max_shift"] = s->max_shift;
  } else {
    const auto& x = std::get<IdxSource>(d.source);
    j["source"] = "idx";
    j["images"] = x.images;
    j["labels"] = x.labels;
    j["classes"] = x.num_classes;
  }
  if (d.mean) j["mean"] = *d.mean;
  if (d.stddev) j["stddev"] = *d.stddev;
  j["train_size"] = d.train_size;
  j["val_size"] = d.val_size;
  j["split_seed"] = d.split_seed;
  return j;
}

inline DatasetSpec dataset_from_json(const json& j) {
  Fields f(j, "dataset");
  std::string source = "synthetic";
  f.get("source", source);
  DatasetSpec d;
  if (source == "synthetic") {
    SyntheticSource s;
    f.get("classes", s.classes);
    f.get("dims", s.dims);
    f.get("samples", s.samples);
    f.get("seed", s.seed);
    f.get("noise", s.noise);
    f.get("max_shift", s.max_shift);
    if (s.dims.size() != 1 && s.dims.size() != 3) throw ConfigError("dataset.dims: expected [D] or [C,H,W]");
    if (s.classes < 2) throw ConfigError("dataset.classes: need at least 2");
    d.source = s;
  } else if (source == "idx") {
    IdxSource s;
    f.get("images", s.images);
    f.get("labels", s.labels);
    f.get("classes", s.num_classes);
    if (s.images.empty() || s.labels.empty()) throw ConfigError("dataset: idx source needs images and labels");
    d.source = s;
  } else {
    throw ConfigError("dataset.source: expected synthetic or idx, got '" + source + "'");
  }
  if (f.has("mean")) {
    std::vector<Real> v;
    f.get("mean", v);
    d.mean = v;
  }
  if (f.has("stddev")) {
    std::vector<Real> v;
    f.get("stddev", v);
    d.stddev = v;
  }
  if (d.mean.has_value() != d.stddev.has_value()) throw ConfigError("dataset: mean and stddev go together");
  f.get("train_size", d.train_size);
  f.get("val_size", d.val_size);
  f.get("split_seed", d.split_seed);
  f.finish();
  return d;
}

inline json search_to_json(const SearchConfig& c) {
  return json{{"eta", c.eta},
              {"search_epochs", c.search_epochs},
              {"lr_weights", c.lr_weights},
              {"lr_arch", c.lr_arch},
              {"lr_decay", c.lr_decay},
              {"lr_decay_every", c.lr_decay_every},
              {"arch_init", c.arch_init},
              {"mode", to_string(c.mode)},
              {"seed", c.seed},
              {"batch_size", c.batch_size},
              {"momentum", c.momentum},
              {"arch_momentum", c.arch_momentum},
              {"weight_decay", c.weight_decay},
              {"sharing", c.sharing == WeightSharing::shared ? "shared" : "unshared"},
              {"weight_bits", c.pool.weight_bits},
              {"activation_bits", c.pool.activation_bits},
              {"retrain_epochs", c.retrain_epochs},
              {"retrain_decay_every", c.retrain_decay_every}};
}

inline SearchConfig search_from_json(const json& j) {
  Fields f(j, "search");
  SearchConfig c;
  f.get("eta", c.eta);
  f.get("search_epochs", c.search_epochs);
  f.get("lr_weights", c.lr_weights);
  f.get("lr_arch", c.lr_arch);
  f.get("lr_decay", c.lr_decay);
  f.get("lr_decay_every", c.lr_decay_every);
  f.get("arch_init", c.arch_init);
  std::string mode = to_string(c.mode);
  f.get("mode", mode);
  if (mode == "single_pass") c.mode = OptimizationMode::single_pass;
  else if (mode == "alternating") c.mode = OptimizationMode::alternating;
  else throw ConfigError("search.mode: expected single_pass or alternating, got '" + mode + "'");
  f.get("seed", c.seed);
  f.get("batch_size", c.batch_size);
  f.get("momentum", c.momentum);
  f.get("arch_momentum", c.arch_momentum);
  f.get("weight_decay", c.weight_decay);
  std::string sharing = "shared";
  f.get("sharing", sharing);
  if (sharing == "shared") c.sharing = WeightSharing::shared;
  else if (sharing == "unshared") c.sharing = WeightSharing::unshared;
  else throw ConfigError("search.sharing: expected shared or unshared, got '" + sharing + "'");
  f.get("weight_bits", c.pool.weight_bits);
  f.get("activation_bits", c.pool.activation_bits);
  f.get("retrain_epochs", c.retrain_epochs);
  f.get("retrain_decay_every", c.retrain_decay_every);
  f.finish();
  try {
    c.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(std::string("search: ") + e.what());
  }
  return c;
}

}  // namespace detail

inline nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  j["schema"] = kConfigSchema;
  j["model"] = {{"name", c.model.name}, {"num_classes", c.model.num_classes}, {"width", c.model.width}};
  j["dataset"] = detail::dataset_to_json(c.dataset);
  j["search"] = detail::search_to_json(c.search);
  j["output_dir"] = c.output_dir;
  return j;
}

/// Strict parse: every key must be known and well typed; absent keys keep
/// their defaults.
inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  detail::Fields f(j, "config");
  std::string schema = kConfigSchema;
  f.get("schema", schema);
  if (schema != kConfigSchema) {
    throw ConfigError("config.schema: expected " + std::string(kConfigSchema) + ", got " + schema);
  }
  ExperimentConfig c;
  if (f.has("model")) {
    detail::Fields m(f.sub("model"), "model");
    m.get("name", c.model.name);
    m.get("num_classes", c.model.num_classes);
    m.get("width", c.model.width);
    m.finish();
    if (c.model.name != "smallcnn" && c.model.name != "resnet-desk") {
      throw ConfigError("model.name: expected smallcnn or resnet-desk, got '" + c.model.name + "'");
    }
    if (c.model.num_classes < 2 || c.model.width == 0) throw ConfigError("model: invalid num_classes or width");
  }
  if (f.has("dataset")) c.dataset = detail::dataset_from_json(f.sub("dataset"));
  if (f.has("search")) c.search = detail::search_from_json(f.sub("search"));
  f.get("output_dir", c.output_dir);
  f.finish();
  if (const auto* s = std::get_if<SyntheticSource>(&c.dataset.source)) {
    if (s->classes != c.model.num_classes) {
      throw ConfigError("dataset.classes (" + std::to_string(s->classes) + ") differs from model.num_classes (" +
                        std::to_string(c.model.num_classes) + ")");
    }
  }
  return c;
}

inline ExperimentConfig parse_config(const std::string& text, const std::string& where = "<config>") {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(where + ": " + e.what());
  }
  return config_from_json(j);
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path);
}

/// Keys are sorted and numbers printed round-trip exact, so equal configs
/// give equal text.
inline std::string canonical_json(const ExperimentConfig& c) { return to_json(c).dump(); }

/// FNV-1a 64 over the canonical JSON text, as 16 hex digits.
inline std::string config_hash(const ExperimentConfig& c) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : canonical_json(c)) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace edmips
