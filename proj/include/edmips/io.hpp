#pragma once

#include <filesystem>
#include <functional>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "edmips/config.hpp"
#include "edmips/network.hpp"
#include "edmips/search.hpp"

#ifndef EDMIPS_VERSION
#define EDMIPS_VERSION "0.1.0"
#endif

namespace edmips {

inline constexpr const char* kCodeVersion = EDMIPS_VERSION;
inline constexpr const char* kArchitectureSchema = "edmips.architecture/1";
inline constexpr const char* kResultSchema = "edmips.result/1";
inline constexpr const char* kManifestSchema = "edmips.manifest/1";

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

inline void write_text_file(const std::string& path, const std::string& text) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  out << text;
  if (!out) throw Error("write failed for " + path);
}

inline void write_json_file(const std::string& path, const nlohmann::json& j) {
  write_text_file(path, j.dump(2) + "\n");
}

/// Architecture file: per-layer bit-widths plus total BitOps and the
/// normalizer of the network they were costed on.
inline nlohmann::json architecture_to_json(const Architecture& arch, const Network& model) {
  const ComplexityModel cm = model.complexity(0);
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : arch.layers) {
    layers.push_back({{"layer_id", l.layer_id},
                      {"name", model.searchable().at(l.layer_id).name},
                      {"weight_bits", l.weight_bits},
                      {"activation_bits", l.activation_bits}});
  }
  return {{"schema", kArchitectureSchema},
          {"model", model.spec().name},
          {"layers", layers},
          {"total_bitops", cm.discrete_bitops(arch.bit_pairs())},
          {"normalizer", cm.normalizer()}};
}

inline Architecture architecture_from_json(const nlohmann::json& j, const std::string& where = "architecture") {
  if (!j.is_object() || j.value("schema", "") != kArchitectureSchema) {
    throw ConfigError(where + ": expected schema " + std::string(kArchitectureSchema));
  }
  if (!j.contains("layers") || !j["layers"].is_array()) throw ConfigError(where + ": missing layers array");
  Architecture a;
  for (const auto& l : j["layers"]) {
    if (!l.is_object() || !l.contains("layer_id") || !l.contains("weight_bits") ||
        !l.contains("activation_bits")) {
      throw ConfigError(where + ": each layer needs layer_id, weight_bits, activation_bits");
    }
    for (const char* k : {"layer_id", "weight_bits", "activation_bits"}) {
      if (!l[k].is_number_unsigned()) throw ConfigError(where + ": " + k + " must be a nonnegative integer");
    }
    a.layers.push_back({l["layer_id"].get<std::size_t>(), l["weight_bits"].get<int>(),
                        l["activation_bits"].get<int>()});
  }
  return a;
}

inline Architecture load_architecture(const std::string& path) {
  return architecture_from_json(read_json_file(path), path);
}

inline nlohmann::json retrain_result_to_json(const RetrainResult& r, const Architecture& arch,
                                             const std::string& label) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : arch.layers) {
    layers.push_back({{"layer_id", l.layer_id}, {"weight_bits", l.weight_bits},
                      {"activation_bits", l.activation_bits}});
  }
  return {{"schema", kResultSchema},
          {"kind", "retrain"},
          {"label", label},
          {"accuracy", r.accuracy},
          {"val_loss", r.val_loss},
          {"train_loss", r.train_loss},
          {"bitops", r.bitops},
          {"normalizer", r.normalizer},
          {"epochs", r.epochs.size()},
          {"layers", layers}};
}

struct ResultPoint {
  std::string label;
  Real accuracy = 0;
  Real bitops = 0;
};

inline ResultPoint result_point_from_json(const nlohmann::json& j, const std::string& where) {
  if (!j.is_object() || j.value("schema", "") != kResultSchema) {
    throw ConfigError(where + ": expected schema " + std::string(kResultSchema));
  }
  for (const char* k : {"accuracy", "bitops"}) {
    if (!j.contains(k) || !j[k].is_number()) throw ConfigError(where + ": missing number " + k);
  }
  return {j.value("label", ""), j["accuracy"].get<Real>(), j["bitops"].get<Real>()};
}

/// Reproduction record written next to every CLI output.
inline nlohmann::json make_manifest(const std::string& command, const ExperimentConfig& cfg,
                                    const std::vector<std::string>& args) {
  return {{"schema", kManifestSchema},
          {"command", command},
          {"config_hash", config_hash(cfg)},
          {"seed", cfg.search.seed},
          {"code_version", kCodeVersion},
          {"args", args},
          {"config", to_json(cfg)}};
}

inline std::string csv_text(const std::function<void(std::ostream&)>& writer) {
  std::ostringstream os;
  writer(os);
  return os.str();
}

}  // namespace edmips
