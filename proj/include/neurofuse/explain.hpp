#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "neurofuse/training.hpp"

namespace neurofuse {

struct ExplainConfig {
  double size_weight = 0.005;
  double entropy_weight = 0.1;
  std::size_t steps = 200;
  double lr = 0.01;
  std::size_t subjects = 32;
  std::size_t top_features = 5;
  std::size_t top_edges = 25;
  std::uint64_t seed = 1;

  void validate() const;
};

using Edge = std::pair<std::size_t, std::size_t>;

/// Masks learned for one subject. Edge values follow `edges` (i < j).
struct ExplanationMask {
  std::string subject;
  int predicted_class = 0;
  std::vector<Edge> edges;
  std::vector<double> edge_mask;
  std::vector<double> feature_mask;
  double objective = 0.0;
};

/// Undirected edges (i < j) present in any of the subject's windows.
std::vector<Edge> subject_edges(const PreparedData& data, std::size_t subject);

/// Optimizes sigmoid-parameterized edge and feature masks against the
/// model's own prediction for the subject. One edge mask is shared by all
/// windows; self-loops stay unmasked. `params` is never modified.
ExplanationMask explain_subject(const FusionModel& model, const ParameterSet& params, const PreparedData& data,
                                std::size_t subject, const ExplainConfig& config);

std::vector<ExplanationMask> explain_subjects(const FusionModel& model, const ParameterSet& params,
                                              const PreparedData& data, std::span<const std::size_t> subjects,
                                              const ExplainConfig& config, std::size_t jobs = 1);

/// Seeded random subset of `count` subject indices (all when count >= n), sorted.
std::vector<std::size_t> choose_subjects(std::size_t n, std::size_t count, std::uint64_t seed);

struct RankedItem {
  std::string name;
  std::size_t index = 0;  // feature column, or flat i*R+j for edges
  std::size_t count = 0;  // subjects whose graphs contain the item
  double mean = 0.0;
  double lower = 0.0;
  double upper = 0.0;
};

struct AggregateExplanation {
  std::size_t subjects = 0;
  /// Every item, sorted by mean descending (ties by index).
  std::vector<RankedItem> features;
  std::vector<RankedItem> edges;
  std::size_t top_features = 5;
  std::size_t top_edges = 25;

  std::span<const RankedItem> feature_ranking() const;
  std::span<const RankedItem> edge_ranking() const;
};

/// Mean and mean +- 1.96 * sd / sqrt(n) (sd with n - 1) over subjects. An
/// edge absent from a subject's graphs counts as importance 0 for that subject.
AggregateExplanation aggregate_explanations(std::span<const ExplanationMask> masks,
                                            const std::vector<std::string>& feature_names,
                                            const std::vector<std::string>& region_names,
                                            std::size_t top_features = 5, std::size_t top_edges = 25);

/// Column names of the node-feature matrix: x, y, z, then system labels.
std::vector<std::string> feature_names(const AtlasMetadata& atlas);

/// Fraction of the top-|planted| edges that are planted.
double planted_precision(const AggregateExplanation& aggregate, std::span<const Edge> planted, std::size_t regions);

nlohmann::json explanation_json(const AggregateExplanation& aggregate);
/// kind,rank,name,subjects,mean,lower,upper for every ranked item.
void write_explanation_csv(const AggregateExplanation& aggregate, const std::filesystem::path& path);

}  // namespace neurofuse
