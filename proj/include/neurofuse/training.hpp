#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "neurofuse/connectivity.hpp"
#include "neurofuse/datagen.hpp"
#include "neurofuse/fusion_models.hpp"

namespace neurofuse {

struct TrainConfig {
  double lr = 1e-4;
  std::size_t batch_size = 32;
  std::size_t max_epochs = 200;
  std::size_t patience = 10;
  std::size_t repeats = 5;
  std::size_t folds = 5;
  std::size_t inner_folds = 5;
  std::uint64_t seed = 1;

  void validate() const;
};

/// Graph-ready view of a dataset for one backbone and window plan.
struct PreparedData {
  Tensor h0;
  std::vector<std::string> ids;
  std::vector<int> labels;
  Tensor covariates;                 // [N, 2]
  std::vector<Tensor> propagation;   // per subject [S, R, R]
  std::size_t windows = 0;
  std::size_t regions = 0;
  Backbone backbone = Backbone::Gcn;

  std::size_t size() const noexcept { return ids.size(); }
};

struct GraphOptions {
  WindowPlan plan = WindowPlan{130, 20, 8, {0, 20, 40, 60, 80, 100, 120, 140}};
  bool dynamic = true;
  double q = 0.05;
};

/// Builds per-subject graph sequences (or one static graph each when
/// dynamic is off) and converts them to the backbone's propagation form.
PreparedData prepare_data(const Dataset& data, const GraphOptions& graphs, Backbone backbone);
PreparedData prepare_data(const Dataset& data, const std::vector<DynamicGraphSequence>& graphs, Backbone backbone);

/// Batch for the listed subjects; `window_order` permutes the graph sequence.
ModelBatch make_batch(const PreparedData& data, std::span<const std::size_t> subjects,
                      std::span<const std::size_t> window_order = {});

/// Mean over the batch of -logprob[label].
Var nll_loss(Var logprobs, std::span<const int> labels);

struct InnerSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
};

struct OuterFold {
  std::vector<std::size_t> test;
  std::vector<std::size_t> train;
  std::vector<InnerSplit> inner;
};

struct FoldPlan {
  std::vector<OuterFold> outer;
  std::uint64_t seed = 0;
};

/// Stratified k-way split: each class is shuffled and dealt round-robin,
/// the positives continuing where the negatives stopped.
std::vector<std::vector<std::size_t>> stratified_split(std::span<const std::size_t> items, std::span<const int> labels,
                                                       std::size_t k, std::uint64_t seed);

FoldPlan make_folds(std::span<const int> labels, std::size_t k = 5, std::size_t inner_k = 5, std::uint64_t seed = 0);

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  /// Validation AUC, or NaN when the validation set holds one class.
  double val_auc = 0.0;
  double val_loss = 0.0;
};

struct TrainResult {
  ParameterSet params;
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  double best_score = 0.0;
};

/// Mini-batch Adam with AUC-guided early stopping. `model` supplies the
/// architecture and initial parameters; the best-epoch parameters are
/// returned and `model` is left untouched.
TrainResult train_model(const FusionModel& model, const PreparedData& data, std::span<const std::size_t> train,
                        std::span<const std::size_t> validation, const TrainConfig& config, std::uint64_t seed);

/// Positive-class probabilities exp(logprob[1]) in inference mode.
std::vector<double> predict(const FusionModel& model, const ParameterSet& params, const PreparedData& data,
                            std::span<const std::size_t> subjects, std::span<const std::size_t> window_order = {});

/// Inner-model ensemble: per-subject mean of positive-class probabilities
/// (not of logits).
std::vector<double> ensemble_probabilities(const std::vector<std::vector<double>>& per_model);

struct FoldResult {
  std::size_t repeat = 0;
  std::size_t fold = 0;
  std::vector<std::string> ids;
  std::vector<int> labels;
  std::vector<double> probabilities;
  double auc = 0.0;
  double pr_auc = 0.0;
  std::vector<std::size_t> best_epochs;
  std::vector<std::uint64_t> init_seeds;
  std::vector<std::uint64_t> shuffle_seeds;
  /// Present when a window permutation was also evaluated.
  std::optional<std::vector<double>> permuted_probabilities;
  double permuted_auc = 0.0;
  double permuted_pr_auc = 0.0;
  double seconds = 0.0;
};

struct ExperimentOptions {
  std::size_t jobs = 1;
  /// Also score every test set with this window order (e.g. reversed).
  std::vector<std::size_t> permuted_order;
  /// Keeps the trained inner models of the last outer fold of repeat 0.
  bool keep_models = false;
};

struct EvaluationReport {
  ModelConfig model;
  TrainConfig train;
  std::vector<std::string> warnings;
  std::vector<std::uint64_t> repeat_seeds;
  std::vector<std::uint64_t> fold_seeds;
  std::vector<FoldResult> folds;
  std::vector<double> repeat_auc;
  std::vector<double> repeat_pr_auc;
  /// Mean over repeats of the mean over outer folds.
  double auc = 0.0;
  double pr_auc = 0.0;
  bool has_permuted = false;
  double permuted_auc = 0.0;
  double permuted_pr_auc = 0.0;
  std::vector<ParameterSet> kept_models;
};

EvaluationReport run_experiment(const PreparedData& data, const ModelConfig& model, const TrainConfig& train,
                                const ExperimentOptions& options = {});

nlohmann::json model_config_json(const ModelConfig& config);
nlohmann::json train_config_json(const TrainConfig& config);
/// Deterministic report body; timing lives under the separate "timing" key.
nlohmann::json report_json(const EvaluationReport& report);

}  // namespace neurofuse
