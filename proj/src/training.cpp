#include "neurofuse/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <set>

#include "neurofuse/error.hpp"
#include "neurofuse/metrics.hpp"
#include "neurofuse/parallel.hpp"

namespace neurofuse {
namespace {

constexpr const char* kModule = "training";
constexpr std::size_t kPredictChunk = 64;

std::vector<std::size_t> identity_order(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

void check_partition(const OuterFold& fold, std::size_t fold_index) {
  const std::set<std::size_t> test(fold.test.begin(), fold.test.end());
  const std::set<std::size_t> train(fold.train.begin(), fold.train.end());
  for (const auto& split : fold.inner) {
    for (const auto* part : {&split.train, &split.validation})
      for (std::size_t i : *part)
        if (test.count(i) || !train.count(i)) {
          fail(ErrorKind::Contract, kModule, "subject " + std::to_string(i) + " leaks into inner models of fold " +
                                                 std::to_string(fold_index));
        }
  }
}

double validation_loss(std::span<const double> probs, std::span<const int> labels) {
  double loss = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double p = labels[i] == 1 ? probs[i] : 1.0 - probs[i];
    loss -= std::log(std::max(p, 1e-300));
  }
  return loss / static_cast<double>(probs.size());
}

double mean(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

void TrainConfig::validate() const {
  auto bad = [](const std::string& key, const std::string& why) { fail(ErrorKind::Config, kModule, key + ": " + why); };
  if (!(lr > 0.0)) bad("lr", "must be > 0");
  if (batch_size < 2) bad("batch_size", "must be >= 2 (batch-norm needs two subjects)");
  if (max_epochs < 1) bad("max_epochs", "must be >= 1");
  if (patience >= max_epochs) bad("patience", "must be smaller than max_epochs");
  if (repeats < 1) bad("repeats", "must be >= 1");
  if (folds < 2 || inner_folds < 2) bad("folds", "need at least 2 outer and 2 inner folds");
}

PreparedData prepare_data(const Dataset& data, const std::vector<DynamicGraphSequence>& graphs, Backbone backbone) {
  if (graphs.size() != data.subjects.size()) fail(ErrorKind::Contract, kModule, "one graph sequence per subject");
  PreparedData out;
  out.h0 = node_feature_matrix(data.atlas);
  out.backbone = backbone;
  out.regions = data.atlas.size();
  out.covariates = covariate_matrix(data.subjects);
  for (std::size_t i = 0; i < data.subjects.size(); ++i) {
    const auto& g = graphs[i];
    if (g.regions() != out.regions) fail(ErrorKind::Dimension, kModule, data.subjects[i].id + ": region count mismatch");
    if (i == 0) out.windows = g.windows();
    if (g.windows() != out.windows) fail(ErrorKind::Dimension, kModule, data.subjects[i].id + ": window count mismatch");
    const std::size_t r = out.regions;
    Tensor stack({out.windows, r, r});
    for (std::size_t s = 0; s < out.windows; ++s)
      std::copy(g.adjacency[s].data().begin(), g.adjacency[s].data().end(), stack.ptr() + s * r * r);
    out.propagation.push_back(backbone == Backbone::Gcn ? normalized_adjacency(stack) : attention_support(stack));
    out.ids.push_back(data.subjects[i].id);
    out.labels.push_back(data.subjects[i].outcome);
  }
  return out;
}

PreparedData prepare_data(const Dataset& data, const GraphOptions& options, Backbone backbone) {
  std::vector<DynamicGraphSequence> graphs;
  graphs.reserve(data.subjects.size());
  for (const auto& s : data.subjects) {
    try {
      graphs.push_back(options.dynamic ? build_dynamic_graphs(s.series, options.plan, options.q)
                                       : build_static_graph(s.series, options.q));
    } catch (const Error& e) {
      fail(e.kind(), e.module(), s.id + ": " + e.what());
    }
  }
  return prepare_data(data, graphs, backbone);
}

ModelBatch make_batch(const PreparedData& data, std::span<const std::size_t> subjects,
                      std::span<const std::size_t> window_order) {
  const std::size_t s_count = data.windows, r = data.regions, b = subjects.size();
  std::vector<std::size_t> order(window_order.begin(), window_order.end());
  if (order.empty()) order = identity_order(s_count);
  if (order.size() != s_count) fail(ErrorKind::Dimension, kModule, "window order length differs from window count");
  ModelBatch batch{Tensor({b * s_count, r, r}), Tensor({b, data.covariates.dim(1)}), b, s_count};
  for (std::size_t k = 0; k < b; ++k) {
    const std::size_t i = subjects[k];
    const Tensor& p = data.propagation.at(i);
    for (std::size_t s = 0; s < s_count; ++s)
      std::copy_n(p.ptr() + order[s] * r * r, r * r, batch.propagation.ptr() + (k * s_count + s) * r * r);
    for (std::size_t c = 0; c < data.covariates.dim(1); ++c) batch.covariates.at(k, c) = data.covariates.at(i, c);
  }
  return batch;
}

Var nll_loss(Var logprobs, std::span<const int> labels) {
  const Shape& s = logprobs.shape();
  if (s.size() != 2 || s[1] != 2 || s[0] != labels.size()) {
    fail(ErrorKind::Dimension, kModule, "log-probabilities must be [batch, 2] matching the labels");
  }
  std::vector<std::size_t> picks;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) fail(ErrorKind::Contract, kModule, "labels must be 0 or 1");
    picks.push_back(2 * i + static_cast<std::size_t>(labels[i]));
  }
  return ops::scale(ops::mean(ops::gather(logprobs, std::move(picks)), 0), -1.0);
}

std::vector<std::vector<std::size_t>> stratified_split(std::span<const std::size_t> items, std::span<const int> labels,
                                                       std::size_t k, std::uint64_t seed) {
  if (items.size() != labels.size()) fail(ErrorKind::Dimension, kModule, "items and labels differ in length");
  std::vector<std::size_t> by_class[2];
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) fail(ErrorKind::Contract, kModule, "labels must be 0 or 1");
    by_class[labels[i]].push_back(items[i]);
  }
  for (int c = 0; c < 2; ++c) {
    if (by_class[c].size() < k) {
      fail(ErrorKind::Stratification, kModule,
           "class " + std::to_string(c) + " has " + std::to_string(by_class[c].size()) + " subjects, fewer than " +
               std::to_string(k) + " folds");
    }
  }
  Rng rng(seed);
  std::vector<std::vector<std::size_t>> folds(k);
  std::size_t slot = 0;
  for (auto& members : by_class) {
    rng.shuffle(members);
    for (std::size_t i : members) folds[slot++ % k].push_back(i);
  }
  for (auto& f : folds) std::sort(f.begin(), f.end());
  return folds;
}

FoldPlan make_folds(std::span<const int> labels, std::size_t k, std::size_t inner_k, std::uint64_t seed) {
  const std::vector<std::size_t> all = identity_order(labels.size());
  FoldPlan plan;
  plan.seed = seed;
  const auto outer = stratified_split(all, labels, k, seed);
  for (std::size_t f = 0; f < k; ++f) {
    OuterFold fold;
    fold.test = outer[f];
    for (std::size_t g = 0; g < k; ++g)
      if (g != f) fold.train.insert(fold.train.end(), outer[g].begin(), outer[g].end());
    std::sort(fold.train.begin(), fold.train.end());
    std::vector<int> train_labels;
    for (std::size_t i : fold.train) train_labels.push_back(labels[i]);
    const auto inner = stratified_split(fold.train, train_labels, inner_k, derive_seed(seed, {f}));
    for (std::size_t j = 0; j < inner_k; ++j) {
      InnerSplit split;
      split.validation = inner[j];
      for (std::size_t g = 0; g < inner_k; ++g)
        if (g != j) split.train.insert(split.train.end(), inner[g].begin(), inner[g].end());
      std::sort(split.train.begin(), split.train.end());
      fold.inner.push_back(std::move(split));
    }
    check_partition(fold, f);
    plan.outer.push_back(std::move(fold));
  }
  return plan;
}

std::vector<double> predict(const FusionModel& model, const ParameterSet& params, const PreparedData& data,
                            std::span<const std::size_t> subjects, std::span<const std::size_t> window_order) {
  std::vector<double> probs;
  probs.reserve(subjects.size());
  for (std::size_t start = 0; start < subjects.size(); start += kPredictChunk) {
    const auto chunk = subjects.subspan(start, std::min(kPredictChunk, subjects.size() - start));
    Tape tape;
    auto bound = params.bind_frozen(tape);
    const ModelBatch batch = make_batch(data, chunk, window_order);
    const Tensor& lp = model.forward(bound, tape.constant(data.h0), batch, false).value();
    for (std::size_t i = 0; i < chunk.size(); ++i) probs.push_back(std::exp(lp.at(i, 1)));
  }
  return probs;
}

TrainResult train_model(const FusionModel& model, const PreparedData& data, std::span<const std::size_t> train,
                        std::span<const std::size_t> validation, const TrainConfig& config, std::uint64_t seed) {
  config.validate();
  if (train.size() < 2) fail(ErrorKind::InsufficientData, kModule, "training needs at least 2 subjects");
  if (validation.empty()) fail(ErrorKind::InsufficientData, kModule, "validation set is empty");
  ParameterSet params = model.params();
  AdamState adam = make_adam_state(params);
  const AdamHyper hyper{config.lr, 0.9, 0.999, 1e-8};
  BatchNormStats bn = model.batch_norm_stats(params);
  Rng rng(seed);
  std::vector<std::size_t> order(train.begin(), train.end());
  std::vector<int> val_labels;
  for (std::size_t i : validation) val_labels.push_back(data.labels.at(i));
  const bool val_has_both = std::count(val_labels.begin(), val_labels.end(), 1) > 0 &&
                            std::count(val_labels.begin(), val_labels.end(), 0) > 0;

  TrainResult result;
  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    rng.shuffle(order);
    std::vector<std::pair<std::size_t, std::size_t>> batches;  // [begin, end)
    for (std::size_t b = 0; b < order.size(); b += config.batch_size)
      batches.emplace_back(b, std::min(b + config.batch_size, order.size()));
    if (batches.size() > 1 && batches.back().second - batches.back().first < 2) {
      batches[batches.size() - 2].second = batches.back().second;
      batches.pop_back();
    }
    double loss_sum = 0.0;
    for (const auto& [begin, end] : batches) {
      const std::span<const std::size_t> members(order.data() + begin, end - begin);
      std::vector<int> labels;
      for (std::size_t i : members) labels.push_back(data.labels[i]);
      Tape tape;
      auto bound = params.bind(tape);
      double loss_value = 0.0;
      Gradients grads;
      try {
        const ModelBatch batch = make_batch(data, members);
        Var loss = nll_loss(model.forward(bound, tape.constant(data.h0), batch, true, &bn), labels);
        loss_value = loss.value().item();
        if (!std::isfinite(loss_value)) fail(ErrorKind::Numeric, kModule, "loss is not finite");
        grads = backward(tape, loss);
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::Numeric) throw;
        fail(ErrorKind::Divergence, kModule, "training diverged at epoch " + std::to_string(epoch) + ": " + e.what());
      }
      adam_update(params, grads, adam, hyper);
      model.store_batch_norm_stats(params, bn);
      loss_sum += loss_value * static_cast<double>(members.size());
    }

    const std::vector<double> probs = predict(model, params, data, validation);
    EpochRecord record{epoch, loss_sum / static_cast<double>(order.size()), std::nan(""),
                       validation_loss(probs, val_labels)};
    if (val_has_both) record.val_auc = roc_auc(probs, val_labels);
    result.history.push_back(record);
    // ties keep the earlier epoch
    const double score = val_has_both ? record.val_auc : -record.val_loss;
    if (epoch == 1 || score > result.best_score) {
      result.best_epoch = epoch;
      result.best_score = score;
      result.params = params;
    }
    if (epoch - result.best_epoch >= config.patience) break;
  }
  return result;
}

std::vector<double> ensemble_probabilities(const std::vector<std::vector<double>>& per_model) {
  if (per_model.empty()) fail(ErrorKind::Contract, kModule, "ensemble of zero models");
  std::vector<double> avg(per_model.front().size(), 0.0);
  for (const auto& p : per_model) {
    if (p.size() != avg.size()) fail(ErrorKind::Dimension, kModule, "ensemble members score different subjects");
    for (std::size_t i = 0; i < avg.size(); ++i) avg[i] += p[i];
  }
  for (double& v : avg) v /= static_cast<double>(per_model.size());
  return avg;
}

EvaluationReport run_experiment(const PreparedData& data, const ModelConfig& model_config, const TrainConfig& train,
                                const ExperimentOptions& options) {
  train.validate();
  EvaluationReport report;
  report.model = model_config;
  report.warnings = report.model.normalize();
  report.train = train;
  report.has_permuted = !options.permuted_order.empty();
  const std::size_t features = data.h0.dim(1);

  for (std::size_t r = 0; r < train.repeats; ++r) {
    const std::uint64_t repeat_seed = train.seed + r;
    const std::uint64_t fold_seed = derive_seed(repeat_seed, {1});
    report.repeat_seeds.push_back(repeat_seed);
    report.fold_seeds.push_back(fold_seed);
    const FoldPlan plan = make_folds(data.labels, train.folds, train.inner_folds, fold_seed);
    std::vector<double> fold_auc, fold_pr;
    for (std::size_t f = 0; f < plan.outer.size(); ++f) {
      const OuterFold& fold = plan.outer[f];
      check_partition(fold, f);
      const auto started = std::chrono::steady_clock::now();
      const std::size_t inner = fold.inner.size();
      std::vector<std::vector<double>> probs(inner), permuted(inner);
      std::vector<std::size_t> best(inner);
      std::vector<std::uint64_t> init_seeds(inner), shuffle_seeds(inner);
      std::vector<ParameterSet> trained(inner);
      for (std::size_t j = 0; j < inner; ++j) {
        init_seeds[j] = derive_seed(repeat_seed, {2, f, j});
        shuffle_seeds[j] = derive_seed(repeat_seed, {3, f, j});
      }
      parallel_for(inner, options.jobs, [&](std::size_t j) {
        try {
          const FusionModel m(report.model, features, data.windows, init_seeds[j]);
          TrainResult res = train_model(m, data, fold.inner[j].train, fold.inner[j].validation, train, shuffle_seeds[j]);
          best[j] = res.best_epoch;
          probs[j] = predict(m, res.params, data, fold.test);
          if (report.has_permuted) permuted[j] = predict(m, res.params, data, fold.test, options.permuted_order);
          if (options.keep_models) trained[j] = std::move(res.params);
        } catch (const Error& e) {
          fail(e.kind(), e.module(),
               "repeat " + std::to_string(r) + " fold " + std::to_string(f) + " inner model " + std::to_string(j) +
                   ": " + e.what());
        }
      });

      FoldResult result;
      result.repeat = r;
      result.fold = f;
      for (std::size_t i : fold.test) {
        result.ids.push_back(data.ids[i]);
        result.labels.push_back(data.labels[i]);
      }
      result.probabilities = ensemble_probabilities(probs);
      result.auc = roc_auc(result.probabilities, result.labels);
      result.pr_auc = pr_auc(result.probabilities, result.labels);
      if (report.has_permuted) {
        result.permuted_probabilities = ensemble_probabilities(permuted);
        result.permuted_auc = roc_auc(*result.permuted_probabilities, result.labels);
        result.permuted_pr_auc = pr_auc(*result.permuted_probabilities, result.labels);
      }
      result.best_epochs = best;
      result.init_seeds = init_seeds;
      result.shuffle_seeds = shuffle_seeds;
      result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
      fold_auc.push_back(result.auc);
      fold_pr.push_back(result.pr_auc);
      if (options.keep_models && r == 0 && f + 1 == plan.outer.size()) report.kept_models = std::move(trained);
      report.folds.push_back(std::move(result));
    }
    report.repeat_auc.push_back(mean(fold_auc));
    report.repeat_pr_auc.push_back(mean(fold_pr));
  }
  report.auc = mean(report.repeat_auc);
  report.pr_auc = mean(report.repeat_pr_auc);
  if (report.has_permuted) {
    std::vector<double> auc_by_repeat, pr_by_repeat;
    for (std::size_t r = 0; r < train.repeats; ++r) {
      std::vector<double> a, p;
      for (const auto& f : report.folds)
        if (f.repeat == r) {
          a.push_back(f.permuted_auc);
          p.push_back(f.permuted_pr_auc);
        }
      auc_by_repeat.push_back(mean(a));
      pr_by_repeat.push_back(mean(p));
    }
    report.permuted_auc = mean(auc_by_repeat);
    report.permuted_pr_auc = mean(pr_by_repeat);
  }
  return report;
}

nlohmann::json model_config_json(const ModelConfig& c) {
  return {{"model", to_string(c.model)},
          {"use_tabular", c.use_tabular},
          {"dynamic", c.dynamic},
          {"fusion", to_string(c.fusion)},
          {"backbone", to_string(c.encoder.backbone)},
          {"readout", to_string(c.encoder.readout)},
          {"hidden", c.encoder.hidden},
          {"layers", c.layers},
          {"heads", c.heads},
          {"ffn", c.ffn}};
}

nlohmann::json train_config_json(const TrainConfig& c) {
  return {{"lr", c.lr},           {"batch_size", c.batch_size},   {"max_epochs", c.max_epochs},
          {"patience", c.patience}, {"repeats", c.repeats},       {"folds", c.folds},
          {"inner_folds", c.inner_folds}, {"seed", c.seed}};
}

nlohmann::json report_json(const EvaluationReport& report) {
  nlohmann::json j;
  j["schema_version"] = 1;
  j["tool_version"] = NEUROFUSE_VERSION;
  j["model"] = model_config_json(report.model);
  j["train"] = train_config_json(report.train);
  j["warnings"] = report.warnings;
  j["seeds"] = {{"repeat", report.repeat_seeds},
                {"fold_plan", report.fold_seeds},
                {"derivation", "repeat r uses base+r; fold plan, init and shuffle seeds derive from it"}};
  j["aggregate"] = {{"auc", report.auc},
                    {"pr_auc", report.pr_auc},
                    {"repeat_auc", report.repeat_auc},
                    {"repeat_pr_auc", report.repeat_pr_auc},
                    {"averaging", "mean over repeats of the mean over outer folds"},
                    {"ensembling", "mean of inner-model positive-class probabilities"}};
  if (report.has_permuted) {
    j["aggregate"]["permuted_auc"] = report.permuted_auc;
    j["aggregate"]["permuted_pr_auc"] = report.permuted_pr_auc;
  }
  nlohmann::json folds = nlohmann::json::array();
  nlohmann::json seconds = nlohmann::json::array();
  for (const auto& f : report.folds) {
    nlohmann::json fj = {{"repeat", f.repeat},           {"fold", f.fold},
                         {"subjects", f.ids},            {"labels", f.labels},
                         {"probabilities", f.probabilities}, {"auc", f.auc},
                         {"pr_auc", f.pr_auc},           {"best_epochs", f.best_epochs},
                         {"init_seeds", f.init_seeds},   {"shuffle_seeds", f.shuffle_seeds}};
    if (f.permuted_probabilities) {
      fj["permuted_probabilities"] = *f.permuted_probabilities;
      fj["permuted_auc"] = f.permuted_auc;
      fj["permuted_pr_auc"] = f.permuted_pr_auc;
    }
    folds.push_back(std::move(fj));
    seconds.push_back(f.seconds);
  }
  j["folds"] = std::move(folds);
  j["timing"] = {{"fold_seconds", seconds}};
  return j;
}

}  // namespace neurofuse
