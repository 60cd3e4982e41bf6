#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "neurofuse/error.hpp"
#include "neurofuse/metrics.hpp"
#include "neurofuse/training.hpp"

using namespace neurofuse;

namespace {

const GeneratedDataset& small_dataset() {
  static const GeneratedDataset gen = [] {
    GenConfig c;
    c.subjects = 40;
    c.regions = 8;
    c.systems = 2;
    c.planted_edges = 2;
    c.seed = 5;
    return generate(c);
  }();
  return gen;
}

const PreparedData& small_data() {
  static const PreparedData data = prepare_data(small_dataset().data, GraphOptions{}, Backbone::Gcn);
  return data;
}

ModelConfig tiny_model(bool tabular = true) {
  ModelConfig c;
  c.use_tabular = tabular;
  c.encoder.hidden = 8;
  c.ffn = 16;
  c.layers = 1;
  return c;
}

Var constant_logprobs(Tape& tape, const std::vector<double>& probs_of_one) {
  Tensor lp({probs_of_one.size(), 2});
  for (std::size_t i = 0; i < probs_of_one.size(); ++i) {
    lp.at(i, 0) = std::log(1.0 - probs_of_one[i]);
    lp.at(i, 1) = std::log(probs_of_one[i]);
  }
  return tape.constant(lp);
}

}  // namespace

TEST_CASE("nll loss") {
  Tape tape;
  const std::vector<int> ones{1, 1};
  Tensor perfect({2, 2});
  perfect.at(0, 0) = -1e300;
  perfect.at(1, 0) = -1e300;
  CHECK(nll_loss(tape.constant(perfect), ones).value().item() == 0.0);
  const std::vector<int> mixed{1, 0};
  CHECK(nll_loss(constant_logprobs(tape, {0.5, 0.5}), mixed).value().item() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-14));
  CHECK(nll_loss(constant_logprobs(tape, {0.8, 0.4}), mixed).value().item() ==
        doctest::Approx(-(std::log(0.8) + std::log(0.6)) / 2).epsilon(1e-14));
  const std::vector<int> bad{1, 2};
  CHECK_THROWS_AS(nll_loss(constant_logprobs(tape, {0.5, 0.5}), bad), Error);
}

TEST_CASE("stratified folds") {
  SUBCASE("ten subjects, five positive") {
    const std::vector<int> labels{1, 0, 1, 0, 1, 0, 1, 0, 1, 0};
    std::vector<std::size_t> items(10);
    for (std::size_t i = 0; i < 10; ++i) items[i] = i;
    const auto folds = stratified_split(items, labels, 5, 3);
    for (const auto& f : folds) {
      REQUIRE(f.size() == 2);
      CHECK(labels[f[0]] + labels[f[1]] == 1);
    }
    CHECK(stratified_split(items, labels, 5, 3) == folds);
  }
  SUBCASE("too few positives") {
    const std::vector<int> labels{1, 1, 1, 0, 0, 0, 0, 0, 0, 0};
    try {
      make_folds(labels, 5, 5, 1);
      FAIL("expected a stratification error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::Stratification);
    }
  }
  SUBCASE("balance and leakage over 100 seeds") {
    std::vector<int> labels(522, 0);
    for (std::size_t i = 0; i < 84; ++i) labels[i * 6 + 1] = 1;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      const FoldPlan plan = make_folds(labels, 5, 5, seed);
      std::set<std::size_t> tested;
      for (const auto& fold : plan.outer) {
        const auto pos = std::count_if(fold.test.begin(), fold.test.end(), [&](auto i) { return labels[i] == 1; });
        CHECK(std::abs(static_cast<double>(pos) - 84.0 / 5) <= 1.0);
        CHECK(std::abs(static_cast<double>(fold.test.size()) - 522.0 / 5) <= 1.0);
        const std::set<std::size_t> test(fold.test.begin(), fold.test.end());
        for (const auto& split : fold.inner) {
          std::set<std::size_t> seen(split.train.begin(), split.train.end());
          seen.insert(split.validation.begin(), split.validation.end());
          CHECK(seen.size() == fold.train.size());
          for (std::size_t i : seen) CHECK_FALSE(test.count(i));
        }
        tested.insert(fold.test.begin(), fold.test.end());
      }
      CHECK(tested.size() == labels.size());
    }
  }
}

TEST_CASE("batches follow the window order") {
  const PreparedData& data = small_data();
  const std::vector<std::size_t> subjects{3, 1};
  const std::vector<std::size_t> order{7, 6, 5, 4, 3, 2, 1, 0};
  const ModelBatch plain = make_batch(data, subjects);
  const ModelBatch reversed = make_batch(data, subjects, order);
  const std::size_t rr = data.regions * data.regions;
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t s = 0; s < 8; ++s)
      CHECK(std::equal(reversed.propagation.ptr() + (b * 8 + s) * rr, reversed.propagation.ptr() + (b * 8 + s + 1) * rr,
                       plain.propagation.ptr() + (b * 8 + 7 - s) * rr));
  CHECK(plain.covariates.at(0, 1) == data.covariates.at(3, 1));

  GraphOptions whole;
  whole.dynamic = false;
  CHECK(prepare_data(small_dataset().data, whole, Backbone::Gcn).windows == 1);
}

TEST_CASE("early stopping") {
  const PreparedData& data = small_data();
  std::vector<std::size_t> train, validation;
  for (std::size_t i = 0; i < data.size(); ++i) (i % 4 == 0 ? validation : train).push_back(i);
  const FusionModel model(tiny_model(), data.h0.dim(1), data.windows, 11);

  SUBCASE("patience zero trains one epoch") {
    TrainConfig cfg;
    cfg.patience = 0;
    cfg.max_epochs = 5;
    CHECK(train_model(model, data, train, validation, cfg, 2).history.size() == 1);
  }
  SUBCASE("best parameters reproduce the best score") {
    TrainConfig cfg;
    cfg.lr = 1e-2;
    cfg.max_epochs = 12;
    cfg.patience = 4;
    cfg.batch_size = 8;
    const TrainResult res = train_model(model, data, train, validation, cfg, 2);
    REQUIRE(res.best_epoch >= 1);
    const EpochRecord& best = res.history.at(res.best_epoch - 1);
    for (const auto& e : res.history) CHECK(e.val_auc <= best.val_auc);
    for (std::size_t e = 0; e + 1 < res.best_epoch; ++e) CHECK(res.history[e].val_auc < best.val_auc);
    std::vector<int> labels;
    for (std::size_t i : validation) labels.push_back(data.labels[i]);
    CHECK(roc_auc(predict(model, res.params, data, validation), labels) == best.val_auc);
    CHECK(res.history.size() <= res.best_epoch + cfg.patience);
  }
  SUBCASE("monotone improvement runs to the epoch budget") {
    // One class and full-batch descent at a small step: the loss falls every epoch.
    std::vector<std::size_t> positives;
    for (std::size_t i = 0; i < data.size(); ++i)
      if (data.labels[i] == 1) positives.push_back(i);
    const FusionModel plain(tiny_model(false), data.h0.dim(1), data.windows, 11);
    TrainConfig cfg;
    cfg.lr = 1e-4;
    cfg.max_epochs = 8;
    cfg.patience = 2;
    cfg.batch_size = positives.size();
    const TrainResult res = train_model(plain, data, positives, positives, cfg, 2);
    REQUIRE(res.history.size() == 8);
    CHECK(res.best_epoch == 8);
    for (std::size_t e = 1; e < 8; ++e) CHECK(res.history[e].val_loss < res.history[e - 1].val_loss);
    CHECK(std::isnan(res.history[0].val_auc));
  }
}

TEST_CASE("ensembles average probabilities") {
  const std::vector<double> avg = ensemble_probabilities({{0.9, 0.1}, {0.5, 0.3}});
  CHECK(avg[0] == doctest::Approx(0.7).epsilon(1e-15));
  CHECK(avg[1] == doctest::Approx(0.2).epsilon(1e-15));
  // averaging logits would give a different first entry
  const double logit_mean = (std::log(0.9 / 0.1) + std::log(0.5 / 0.5)) / 2;
  CHECK(std::abs(1.0 / (1.0 + std::exp(-logit_mean)) - 0.7) > 0.01);
}

TEST_CASE("experiments are deterministic across job counts") {
  const PreparedData& data = small_data();
  TrainConfig cfg;
  cfg.lr = 1e-2;
  cfg.max_epochs = 3;
  cfg.patience = 1;
  cfg.repeats = 2;
  cfg.folds = 2;
  cfg.inner_folds = 3;
  cfg.batch_size = 8;
  ExperimentOptions serial, parallel;
  parallel.jobs = 3;
  serial.permuted_order = parallel.permuted_order = {7, 6, 5, 4, 3, 2, 1, 0};
  const EvaluationReport a = run_experiment(data, tiny_model(), cfg, serial);
  const EvaluationReport b = run_experiment(data, tiny_model(), cfg, parallel);
  auto body = [](const EvaluationReport& r) {
    auto j = report_json(r);
    j.erase("timing");
    return j.dump();
  };
  CHECK(body(a) == body(b));
  REQUIRE(a.folds.size() == 4);
  CHECK(a.repeat_seeds == std::vector<std::uint64_t>{1, 2});
  CHECK(a.auc == doctest::Approx((a.repeat_auc[0] + a.repeat_auc[1]) / 2).epsilon(1e-15));
  CHECK(a.repeat_auc[0] == doctest::Approx((a.folds[0].auc + a.folds[1].auc) / 2).epsilon(1e-15));
  CHECK(a.folds[0].best_epochs.size() == 3);
}
