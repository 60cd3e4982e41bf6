#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "neurofuse/connectivity.hpp"
#include "neurofuse/graph_encoder.hpp"

namespace neurofuse {

struct SubjectRecord {
  std::string id;
  double sex = 0.0;  // 0 or 1
  double age = 0.0;  // years
  int outcome = 0;
  Tensor series;     // [T, R]
};

struct Dataset {
  std::vector<SubjectRecord> subjects;
  AtlasMetadata atlas;

  std::vector<int> labels() const;
};

/// subjects.csv (`subject_id,sex,age,outcome`), timeseries/<id>.csv and,
/// unless `atlas_path` is given, atlas.csv from the same directory.
Dataset load_dataset(const std::filesystem::path& dir, const std::filesystem::path& atlas_path = {});

/// Raw covariate matrix [N, 2] of (sex, age); scaling is left to the model's batch-norm.
Tensor covariate_matrix(std::span<const SubjectRecord> subjects);

struct GenConfig {
  std::size_t subjects = 200;
  std::size_t regions = 30;
  std::size_t timepoints = 270;
  std::size_t systems = 4;
  double prevalence = 0.4;
  /// Logistic weights on sex and standardized age.
  std::array<double, 2> beta{2.0, 2.0};
  /// Logistic weight on the latent planted-signal indicator.
  double gamma = 3.5;
  /// Extra planted-pair correlation in late timepoints for indicator-positive subjects.
  double delta = 0.6;
  /// Subject-level planted-pair correlation present in every window, drawn
  /// as clamp(base + jitter * N(0,1), 0, 0.9) per subject.
  double planted_base = 0.2;
  double planted_jitter = 0.15;
  std::size_t planted_edges = 12;
  /// Correlation every region shares with the other regions of its system
  /// (one white component per system and subject), so dense background
  /// structure surrounds the planted pairs.
  double system_coupling = 0.3;
  double ar_coefficient = 0.5;
  double noise_scale = 1.0;
  /// Window plan that defines "late": timepoints covered only by the last
  /// half of the windows.
  std::size_t window_width = 130;
  std::size_t window_step = 20;
  std::size_t window_count = 8;
  std::uint64_t seed = 1;

  void validate() const;
  /// First timepoint that no early window covers.
  std::size_t late_start() const;
};

AtlasMetadata generate_atlas(std::size_t regions, std::size_t systems, std::uint64_t seed);

struct GeneratedDataset {
  Dataset data;
  std::vector<std::pair<std::size_t, std::size_t>> planted;
  std::vector<int> indicator;
  double intercept = 0.0;
};

/// Builds the dataset in memory.
GeneratedDataset generate(const GenConfig& config);

/// Writes subjects.csv, timeseries/, atlas.csv and manifest.json into `dir`.
GeneratedDataset generate_dataset(const GenConfig& config, const std::filesystem::path& dir);

/// Planted edges recorded in a dataset's manifest.json.
std::vector<std::pair<std::size_t, std::size_t>> read_planted_edges(const std::filesystem::path& dir);

}  // namespace neurofuse
