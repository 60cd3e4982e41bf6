#pragma once

#include <span>

namespace neurofuse {

/// ROC AUC in the Mann-Whitney form: ties between a positive and a negative
/// count one half. Errors unless both classes are present.
double roc_auc(std::span<const double> scores, std::span<const int> labels);

/// Average precision over descending-score cut points. Equal scores enter
/// the prefix together. Errors when there are no positives.
double pr_auc(std::span<const double> scores, std::span<const int> labels);

}  // namespace neurofuse
