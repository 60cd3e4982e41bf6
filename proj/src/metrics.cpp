#include "neurofuse/metrics.hpp"

#include <algorithm>
#include <numeric>
#include <vector>

#include "neurofuse/error.hpp"

namespace neurofuse {
namespace {

constexpr const char* kModule = "metrics";

std::vector<std::size_t> descending_order(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) fail(ErrorKind::Dimension, kModule, "scores and labels differ in length");
  for (int y : labels)
    if (y != 0 && y != 1) fail(ErrorKind::Contract, kModule, "labels must be 0 or 1");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

}  // namespace

double roc_auc(std::span<const double> scores, std::span<const int> labels) {
  const auto order = descending_order(scores, labels);
  const double pos = static_cast<double>(std::count(labels.begin(), labels.end(), 1));
  const double neg = static_cast<double>(labels.size()) - pos;
  if (pos == 0 || neg == 0) fail(ErrorKind::UndefinedMetric, kModule, "ROC AUC needs both classes");
  // Walk tie groups from the top; each positive beats every negative below its group.
  double wins = 0.0, neg_above = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    double p = 0, n = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (labels[order[j]] == 1 ? p : n) += 1.0;
      ++j;
    }
    wins += p * (neg - neg_above - n) + 0.5 * p * n;
    neg_above += n;
    i = j;
  }
  return wins / (pos * neg);
}

double pr_auc(std::span<const double> scores, std::span<const int> labels) {
  const auto order = descending_order(scores, labels);
  const double pos = static_cast<double>(std::count(labels.begin(), labels.end(), 1));
  if (pos == 0) fail(ErrorKind::UndefinedMetric, kModule, "PR AUC needs at least one positive");
  double ap = 0.0, tp = 0.0, seen = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    double p = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      p += labels[order[j]];
      ++j;
    }
    tp += p;
    seen += static_cast<double>(j - i);
    ap += (p / pos) * (tp / seen);
    i = j;
  }
  return ap;
}

}  // namespace neurofuse
