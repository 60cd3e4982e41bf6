#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "neurofuse/datagen.hpp"
#include "neurofuse/explain.hpp"
#include "neurofuse/fusion_models.hpp"
#include "neurofuse/training.hpp"

namespace neurofuse {

/// Everything a command needs, parsed from one flat JSON object. Keys and
/// defaults are listed by `config_keys()`; unknown keys are rejected.
struct RunConfig {
  std::string dataset;
  std::string atlas;
  std::string output = "neurofuse-out";
  /// Parameter checkpoint for `explain`; empty means train one first.
  std::string checkpoint;
  std::uint64_t seed = 1;

  ModelConfig model;
  std::size_t window_width = 130;
  std::size_t window_step = 20;
  std::size_t window_count = 8;
  double q = 0.05;
  /// Extra evaluation of every test set with the windows in this order.
  std::vector<std::size_t> permuted_windows;

  TrainConfig train;
  GenConfig gen;
  ExplainConfig explain;

  /// Copies the seed into the sub-configs and checks every invariant.
  void resolve();
  GraphOptions graph_options() const;
};

struct ConfigKey {
  std::string name;
  std::string type;  // bool, uint, number, string, uint-list
  std::string description;
};

const std::vector<ConfigKey>& config_keys();

RunConfig parse_config(const nlohmann::json& document);
RunConfig parse_config_file(const std::filesystem::path& path);

/// Every key with its resolved value, keys sorted.
nlohmann::json canonical_json(const RunConfig& config);
/// FNV-1a 64 of the compact canonical form without the output directory, as
/// 16 hex digits. Where results are written is not part of an experiment.
std::string config_hash(const RunConfig& config);

}  // namespace neurofuse
