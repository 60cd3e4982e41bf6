#include "neurofuse/explain.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>

#include "neurofuse/error.hpp"
#include "neurofuse/parallel.hpp"

namespace neurofuse {
namespace {

constexpr const char* kModule = "explain";
constexpr double kInitSpread = 0.1;

// -(p log p + (1-p) log(1-p)) with both logs taken as log-sigmoid of +-m.
Var bernoulli_entropy(Var logits, Var p) {
  Var log_p = ops::log(p);
  Var log_q = ops::log(ops::sigmoid(ops::scale(logits, -1.0)));
  Var q = ops::add(ops::scale(p, -1.0), logits.tape().constant(Tensor::full(p.shape(), 1.0)));
  return ops::scale(ops::add(ops::hadamard(p, log_p), ops::hadamard(q, log_q)), -1.0);
}

Var mean_all(Var x) {
  return ops::scale(ops::sum(x), 1.0 / static_cast<double>(x.value().numel()));
}

std::vector<RankedItem> rank(std::vector<RankedItem> items) {
  std::stable_sort(items.begin(), items.end(), [](const RankedItem& a, const RankedItem& b) {
    if (a.mean != b.mean) return a.mean > b.mean;
    return a.index < b.index;
  });
  return items;
}

RankedItem summarize(std::string name, std::size_t index, std::span<const double> values) {
  const double n = static_cast<double>(values.size());
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  const double half = 1.96 * std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
  return {std::move(name), index, values.size(), mean, mean - half, mean + half};
}

}  // namespace

void ExplainConfig::validate() const {
  auto bad = [](const std::string& key, const std::string& why) { fail(ErrorKind::Config, kModule, key + ": " + why); };
  if (!(size_weight >= 0.0)) bad("explain_size_weight", "must be >= 0");
  if (!(entropy_weight >= 0.0)) bad("explain_entropy_weight", "must be >= 0");
  if (!(lr > 0.0)) bad("explain_lr", "must be > 0");
  if (subjects < 2) bad("explain_subjects", "intervals need at least 2 subjects");
}

std::vector<Edge> subject_edges(const PreparedData& data, std::size_t subject) {
  const Tensor& p = data.propagation.at(subject);
  const std::size_t r = data.regions;
  std::vector<Edge> edges;
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = i + 1; j < r; ++j)
      for (std::size_t s = 0; s < data.windows; ++s) {
        const double v = p.ptr()[(s * r + i) * r + j];
        const bool present = data.backbone == Backbone::Gcn ? v != 0.0 : v > -1e29;
        if (present) {
          edges.emplace_back(i, j);
          break;
        }
      }
  return edges;
}

ExplanationMask explain_subject(const FusionModel& model, const ParameterSet& params, const PreparedData& data,
                                std::size_t subject, const ExplainConfig& config) {
  const std::size_t r = data.regions, f = data.h0.dim(1);
  const std::vector<std::size_t> one{subject};
  const ModelBatch batch = make_batch(data, one);

  ExplanationMask out;
  out.subject = data.ids.at(subject);
  out.edges = subject_edges(data, subject);
  const std::size_t e = out.edges.size();
  {
    Tape tape;
    auto bound = params.bind_frozen(tape);
    const Tensor& lp = model.forward(bound, tape.constant(data.h0), batch, false).value();
    out.predicted_class = lp.at(0, 1) > lp.at(0, 0) ? 1 : 0;
  }

  // each edge logit lands on (i, j) and (j, i); the diagonal is a constant 1
  std::vector<std::size_t> duplicate(2 * e), positions(2 * e);
  for (std::size_t k = 0; k < e; ++k) {
    duplicate[k] = duplicate[e + k] = k;
    positions[k] = out.edges[k].first * r + out.edges[k].second;
    positions[e + k] = out.edges[k].second * r + out.edges[k].first;
  }
  Tensor identity({r, r});
  for (std::size_t i = 0; i < r; ++i) identity.at(i, i) = 1.0;

  Rng rng(derive_seed(config.seed, {subject}));
  std::vector<Tensor> logits{Tensor({std::max<std::size_t>(e, 1)}), Tensor({f})};
  for (auto& t : logits)
    for (double& v : t.data()) v = kInitSpread * rng.normal();
  AdamState adam{0, {Tensor(logits[0].shape()), Tensor({f})}, {Tensor(logits[0].shape()), Tensor({f})}};
  const AdamHyper hyper{config.lr, 0.9, 0.999, 1e-8};

  for (std::size_t step = 0; step <= config.steps; ++step) {
    Tape tape;
    auto bound = params.bind_frozen(tape);
    Var edge_logits = tape.parameter(logits[0], 0);
    Var feature_logits = tape.parameter(logits[1], 1);
    Var edge_p = ops::sigmoid(edge_logits);
    Var feature_p = ops::sigmoid(feature_logits);
    Var edge_mask = tape.constant(identity);
    if (e > 0) {
      Var spread = ops::scatter(ops::gather(edge_p, duplicate), positions, {r * r});
      edge_mask = ops::add(ops::reshape(spread, {r, r}), edge_mask);
    }
    const EncoderMasks masks{&edge_mask, &feature_p};
    Var lp = model.forward(bound, tape.constant(data.h0), batch, false, nullptr, masks);
    Var nll = ops::scale(ops::gather(lp, {static_cast<std::size_t>(out.predicted_class)}), -1.0);

    Var size = mean_all(feature_p);
    Var entropy = mean_all(bernoulli_entropy(feature_logits, feature_p));
    if (e > 0) {
      size = ops::add(size, mean_all(edge_p));
      entropy = ops::add(entropy, mean_all(bernoulli_entropy(edge_logits, edge_p)));
    }
    Var objective =
        ops::add(ops::add(nll, ops::scale(size, config.size_weight)), ops::scale(entropy, config.entropy_weight));
    out.objective = objective.value().item();
    if (!std::isfinite(out.objective)) {
      fail(ErrorKind::Divergence, kModule,
           out.subject + ": explainer objective is not finite at step " + std::to_string(step));
    }
    if (step == config.steps) {
      out.edge_mask.assign(edge_p.value().data().begin(), edge_p.value().data().begin() + e);
      out.feature_mask.assign(feature_p.value().data().begin(), feature_p.value().data().end());
      break;
    }
    Gradients grads = backward(tape, objective);
    std::vector<Tensor> g{Tensor(logits[0].shape()), Tensor({f})};
    for (auto& [k, t] : grads) g[k] = std::move(t);
    adam_update(logits, g, adam, hyper);
  }
  return out;
}

std::vector<ExplanationMask> explain_subjects(const FusionModel& model, const ParameterSet& params,
                                              const PreparedData& data, std::span<const std::size_t> subjects,
                                              const ExplainConfig& config, std::size_t jobs) {
  config.validate();
  std::vector<ExplanationMask> out(subjects.size());
  parallel_for(subjects.size(), jobs,
               [&](std::size_t k) { out[k] = explain_subject(model, params, data, subjects[k], config); });
  return out;
}

std::vector<std::size_t> choose_subjects(std::size_t n, std::size_t count, std::uint64_t seed) {
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), 0);
  if (count >= n) return all;
  Rng rng(derive_seed(seed, {7}));
  rng.shuffle(all);
  all.resize(count);
  std::sort(all.begin(), all.end());
  return all;
}

std::span<const RankedItem> AggregateExplanation::feature_ranking() const {
  return std::span<const RankedItem>(features).first(std::min(top_features, features.size()));
}

std::span<const RankedItem> AggregateExplanation::edge_ranking() const {
  return std::span<const RankedItem>(edges).first(std::min(top_edges, edges.size()));
}

AggregateExplanation aggregate_explanations(std::span<const ExplanationMask> masks,
                                            const std::vector<std::string>& feature_names,
                                            const std::vector<std::string>& region_names, std::size_t top_features,
                                            std::size_t top_edges) {
  if (masks.size() < 2) fail(ErrorKind::Contract, kModule, "intervals need at least 2 explained subjects");
  const std::size_t n = masks.size(), r = region_names.size();
  AggregateExplanation agg;
  agg.subjects = n;
  agg.top_features = top_features;
  agg.top_edges = top_edges;

  for (std::size_t c = 0; c < feature_names.size(); ++c) {
    std::vector<double> values;
    for (const auto& m : masks) {
      if (m.feature_mask.size() != feature_names.size())
        fail(ErrorKind::Dimension, kModule, m.subject + ": feature mask length differs from the feature names");
      values.push_back(m.feature_mask[c]);
    }
    agg.features.push_back(summarize(feature_names[c], c, values));
  }
  agg.features = rank(std::move(agg.features));

  std::map<std::size_t, std::vector<double>> per_edge;
  std::map<std::size_t, std::size_t> present;
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t k = 0; k < masks[s].edges.size(); ++k) {
      const auto [i, j] = masks[s].edges[k];
      if (i >= r || j >= r) fail(ErrorKind::Dimension, kModule, masks[s].subject + ": edge outside the region list");
      auto& values = per_edge[i * r + j];
      values.resize(n, 0.0);
      values[s] = masks[s].edge_mask[k];
      ++present[i * r + j];
    }
  for (const auto& [flat, values] : per_edge) {
    agg.edges.push_back(summarize(region_names[flat / r] + "--" + region_names[flat % r], flat, values));
    agg.edges.back().count = present[flat];
  }
  agg.edges = rank(std::move(agg.edges));
  return agg;
}

std::vector<std::string> feature_names(const AtlasMetadata& atlas) {
  std::vector<std::string> names{"x", "y", "z"};
  names.insert(names.end(), atlas.vocabulary.begin(), atlas.vocabulary.end());
  return names;
}

double planted_precision(const AggregateExplanation& aggregate, std::span<const Edge> planted, std::size_t regions) {
  if (planted.empty()) fail(ErrorKind::Contract, kModule, "no planted edges");
  std::vector<std::size_t> flat;
  for (auto [i, j] : planted) flat.push_back(std::min(i, j) * regions + std::max(i, j));
  const std::size_t k = std::min(planted.size(), aggregate.edges.size());
  std::size_t hits = 0;
  for (std::size_t t = 0; t < k; ++t)
    if (std::find(flat.begin(), flat.end(), aggregate.edges[t].index) != flat.end()) ++hits;
  return static_cast<double>(hits) / static_cast<double>(planted.size());
}

nlohmann::json explanation_json(const AggregateExplanation& agg) {
  auto items = [](std::span<const RankedItem> list) {
    nlohmann::json arr = nlohmann::json::array();
    for (std::size_t k = 0; k < list.size(); ++k)
      arr.push_back({{"rank", k + 1},
                     {"name", list[k].name},
                     {"subjects", list[k].count},
                     {"mean", list[k].mean},
                     {"lower", list[k].lower},
                     {"upper", list[k].upper}});
    return arr;
  };
  return {{"schema_version", 1},
          {"subjects", agg.subjects},
          {"interval", "mean +- 1.96 * sd / sqrt(n), sd with n - 1"},
          {"top_features", items(agg.feature_ranking())},
          {"top_edges", items(agg.edge_ranking())},
          {"features", items(agg.features)},
          {"edges", items(agg.edges)}};
}

void write_explanation_csv(const AggregateExplanation& agg, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::Io, kModule, "cannot write " + path.string());
  out << "kind,rank,name,subjects,mean,lower,upper\n" << std::setprecision(17);
  auto rows = [&](const char* kind, const std::vector<RankedItem>& list) {
    for (std::size_t k = 0; k < list.size(); ++k)
      out << kind << ',' << k + 1 << ',' << list[k].name << ',' << list[k].count << ',' << list[k].mean << ',' << list[k].lower << ','
          << list[k].upper << '\n';
  };
  rows("feature", agg.features);
  rows("edge", agg.edges);
  if (!out) fail(ErrorKind::Io, kModule, "write failed: " + path.string());
}

}  // namespace neurofuse
