#include <doctest.h>

#include <cmath>

#include "neurofuse/error.hpp"
#include "neurofuse/fusion_models.hpp"
#include "neurofuse/gradcheck.hpp"

using namespace neurofuse;

namespace {

Tensor random_graph(std::size_t r, Rng& rng) {
  Tensor a({r, r});
  for (std::size_t i = 0; i < r; ++i) {
    a.at(i, i) = 1.0;
    for (std::size_t j = i + 1; j < r; ++j) {
      const double v = rng.bernoulli(0.5) ? rng.uniform(-1.0, 1.0) : 0.0;
      a.at(i, j) = v;
      a.at(j, i) = v;
    }
  }
  return a;
}

struct Fixture {
  std::size_t r, windows, subjects;
  Tensor h0;
  std::vector<Tensor> graphs;  // subject-major, raw adjacency
  Tensor covariates;

  Fixture(std::size_t r_, std::size_t s, std::size_t b, std::uint64_t seed) : r(r_), windows(s), subjects(b) {
    Rng rng(seed);
    h0 = Tensor({r, 5});
    for (double& v : h0.data()) v = rng.uniform(-1.0, 1.0);
    for (std::size_t i = 0; i < b * s; ++i) graphs.push_back(random_graph(r, rng));
    covariates = Tensor({b, 2});
    for (std::size_t i = 0; i < b; ++i) {
      covariates.at(i, 0) = static_cast<double>(i % 2);
      covariates.at(i, 1) = rng.uniform(-1.5, 1.5);
    }
  }

  ModelBatch batch(Backbone backbone, std::vector<std::size_t> order = {}) const {
    if (order.empty())
      for (std::size_t k = 0; k < windows; ++k) order.push_back(k);
    ModelBatch out{Tensor({subjects * windows, r, r}), covariates, subjects, windows};
    for (std::size_t b = 0; b < subjects; ++b)
      for (std::size_t k = 0; k < windows; ++k) {
        const Tensor& a = graphs[b * windows + order[k]];
        Tensor p = backbone == Backbone::Gcn ? normalized_adjacency(a) : attention_support(a);
        std::copy(p.data().begin(), p.data().end(), out.propagation.ptr() + (b * windows + k) * r * r);
      }
    return out;
  }
};

ModelConfig small_config(ModelKind kind, Fusion fusion = Fusion::TfEarly, bool tabular = true) {
  ModelConfig c;
  c.model = kind;
  c.fusion = fusion;
  c.use_tabular = tabular;
  c.encoder.hidden = 8;
  c.ffn = 16;
  return c;
}

Tensor run(const FusionModel& model, const Fixture& fx, const ModelBatch& batch, bool training = false) {
  Tape tape;
  auto bound = model.params().bind(tape);
  return model.forward(bound, tape.constant(fx.h0), batch, training).value();
}

Tensor represent(const FusionModel& model, const Fixture& fx, const ModelBatch& batch) {
  Tape tape;
  auto bound = model.params().bind(tape);
  return model.representation(bound, tape.constant(fx.h0), batch, false).value();
}

void check_normalized(const Tensor& logp) {
  for (std::size_t i = 0; i < logp.dim(0); ++i) {
    const double total = std::exp(logp.at(i, 0)) + std::exp(logp.at(i, 1));
    CHECK(std::abs(total - 1.0) <= 1e-12);
  }
}

}  // namespace

TEST_CASE("tabular embedding") {
  FusionModel model(ModelConfig{}, 5, 2, 1);
  Tape tape;
  auto bound = model.params().bind(tape);
  Tensor same = Tensor::matrix({{1, 0.3}, {1, 0.3}, {1, 0.3}});
  Tensor out = model.tabular_embed(bound, tape.constant(same), true, nullptr).value();
  CHECK(out.shape() == Shape{3, 128});
  for (double v : out.data()) CHECK(v == 0.0);

  Tensor one = Tensor::matrix({{1, 0.3}});
  CHECK_THROWS_AS(model.tabular_embed(bound, tape.constant(one), true, nullptr), Error);
  CHECK(model.tabular_embed(bound, tape.constant(one), false, nullptr).shape() == Shape{1, 128});

  Rng rng(2);
  Tensor cov({4, 2});
  for (double& v : cov.data()) v = rng.uniform(-2.0, 2.0);
  ModelConfig c = small_config(ModelKind::GnnTf);
  FusionModel small(c, 5, 2, 3);
  std::vector<Tensor> inputs;
  for (std::size_t i = 0; i < small.params().size(); ++i) inputs.push_back(small.params().value(i));
  auto result = check_gradients(
      "tabular",
      [&](Tape& t, std::span<const Var> vars) { return small.tabular_embed(vars, t.constant(cov), true, nullptr); },
      inputs);
  CHECK(result.passed());
}

TEST_CASE("batch-norm running statistics feed inference") {
  FusionModel model(small_config(ModelKind::GnnTf), 5, 2, 1);
  BatchNormStats stats = model.batch_norm_stats();
  Tape tape;
  auto bound = model.params().bind(tape);
  Tensor cov = Tensor::matrix({{0, 1}, {1, 3}});
  model.tabular_embed(bound, tape.constant(cov), true, &stats);
  CHECK(stats.running_mean[1] == doctest::Approx(0.2));
  model.store_batch_norm_stats(stats);
  CHECK(model.batch_norm_stats().running_mean[1] == doctest::Approx(0.2));
}

TEST_CASE("prediction head") {
  FusionModel model(ModelConfig{}, 5, 2, 1);
  for (std::size_t i = 0; i < model.params().size(); ++i)
    if (model.params().entry(i).group == "head") model.params().value(i).fill(0.0);
  Tape tape;
  auto bound = model.params().bind(tape);
  Rng rng(4);
  Tensor z({3, 128});
  for (double& v : z.data()) v = rng.normal();
  Tensor out = model.head(bound, tape.constant(z)).value();
  for (double v : out.data()) CHECK(v == doctest::Approx(std::log(0.5)).epsilon(1e-15));

  FusionModel fresh(ModelConfig{}, 5, 2, 9);
  Tape t2;
  auto b2 = fresh.params().bind(t2);
  check_normalized(fresh.head(b2, t2.constant(z)).value());

  ModelConfig c = small_config(ModelKind::GnnTf);
  FusionModel small(c, 5, 2, 5);
  Tensor zs({3, 8});
  for (double& v : zs.data()) v = rng.normal();
  std::vector<Tensor> inputs;
  for (std::size_t i = 0; i < small.params().size(); ++i) {
    Tensor t = small.params().value(i);
    if (small.params().entry(i).group == "head")
      for (double& v : t.data()) v += rng.uniform(-0.1, 0.1);
    inputs.push_back(t);
  }
  auto result = check_gradients(
      "head", [&](Tape& t, std::span<const Var> vars) { return small.head(vars, t.constant(zs)); }, inputs);
  CHECK(result.passed());
}

TEST_CASE("every variant yields a valid log-distribution") {
  Fixture fx(6, 3, 4, 11);
  const std::vector<ModelConfig> configs = {
      [] { ModelConfig c; return c; }(),
      [] { ModelConfig c; c.model = ModelKind::GnnTfCausal; return c; }(),
      [] { ModelConfig c; c.fusion = Fusion::Late; return c; }(),
      [] { ModelConfig c; c.fusion = Fusion::None; return c; }(),
      [] { ModelConfig c; c.model = ModelKind::Gclstm; return c; }(),
      [] { ModelConfig c; c.model = ModelKind::GclstmF; return c; }(),
      [] { ModelConfig c; c.model = ModelKind::StaticGcn; c.use_tabular = false; return c; }(),
      [] { ModelConfig c; c.model = ModelKind::StaticGat; return c; }(),
  };
  for (const ModelConfig& c : configs) {
    FusionModel model(c, 5, 3, 2);
    Tensor logp = run(model, fx, fx.batch(model.config().encoder.backbone), true);
    CHECK(logp.shape() == Shape{4, 2});
    check_normalized(logp);
    check_normalized(run(model, fx, fx.batch(model.config().encoder.backbone), false));
  }
}

TEST_CASE("config normalization") {
  ModelConfig late;
  late.fusion = Fusion::Late;
  late.use_tabular = false;
  auto warnings = late.normalize();
  CHECK(warnings.size() == 1);
  CHECK(late.fusion == Fusion::None);

  ModelConfig gat;
  gat.model = ModelKind::StaticGat;
  CHECK(gat.normalize().empty());
  CHECK(gat.encoder.backbone == Backbone::Gat);
  CHECK(gat.fusion == Fusion::None);

  ModelConfig bad;
  bad.encoder.hidden = 10;
  CHECK_THROWS_AS(bad.normalize(), Error);
  CHECK(parse_model_kind("gclstm-f") == ModelKind::GclstmF);
  CHECK_THROWS_AS(parse_fusion("middle"), Error);
}

TEST_CASE("static model without covariates ignores them") {
  Fixture fx(6, 1, 3, 12);
  ModelConfig c;
  c.model = ModelKind::StaticGcn;
  c.use_tabular = false;
  c.dynamic = false;
  FusionModel model(c, 5, 1, 3);
  ModelBatch a = fx.batch(Backbone::Gcn);
  ModelBatch b = a;
  b.covariates.fill(42.0);
  CHECK(run(model, fx, a) == run(model, fx, b));
}

TEST_CASE("early fusion sees order only through positions") {
  Fixture fx(6, 4, 2, 13);
  FusionModel model(ModelConfig{}, 5, 4, 4);
  const std::size_t pos = model.params().index_of("fusion", "positional");
  ModelBatch forward = fx.batch(Backbone::Gcn, {0, 1, 2, 3});
  ModelBatch swapped = fx.batch(Backbone::Gcn, {0, 2, 1, 3});

  // distinct positional embeddings: swapping g2 and g3 moves the cls output
  CHECK(max_abs_difference(represent(model, fx, forward), represent(model, fx, swapped)) > 1e-6);

  Tensor& p = model.params().value(pos);
  for (std::size_t i = 1; i < p.dim(0); ++i)
    for (std::size_t j = 0; j < p.dim(1); ++j) p.at(i, j) = p.at(0, j);
  CHECK(max_abs_difference(represent(model, fx, forward), represent(model, fx, swapped)) <= 1e-10);
}

TEST_CASE("window pooling is exactly order invariant") {
  Fixture fx(6, 4, 3, 14);
  for (ModelKind kind : {ModelKind::StaticGcn, ModelKind::GnnTf}) {
    ModelConfig c;
    c.model = kind;
    c.fusion = Fusion::None;
    FusionModel model(c, 5, 4, 5);
    Tensor a = run(model, fx, fx.batch(Backbone::Gcn, {0, 1, 2, 3}));
    Tensor b = run(model, fx, fx.batch(Backbone::Gcn, {3, 1, 0, 2}));
    CHECK(a == b);
  }
}

TEST_CASE("causal mask blocks information from later tokens") {
  Fixture fx(6, 4, 2, 15);
  ModelConfig c;
  c.model = ModelKind::GnnTfCausal;
  FusionModel model(c, 5, 4, 6);
  CHECK(model.sequence_length() == 6);
  CHECK(model.read_position() == 5);

  Fixture changed = fx;
  Rng rng(99);
  for (std::size_t b = 0; b < fx.subjects; ++b) changed.graphs[b * 4 + 3] = random_graph(6, rng);

  auto layer_outputs = [&](const Fixture& f) {
    Tape tape;
    auto bound = model.params().bind(tape);
    ModelBatch batch = f.batch(Backbone::Gcn);
    Var graphs = model.encode(bound, tape.constant(f.h0), batch, {});
    Var tab = model.tabular_embed(bound, tape.constant(batch.covariates), false, nullptr);
    std::vector<Tensor> out;
    for (Var v : model.transformer_layers(bound, model.tokens(bound, graphs, &tab))) out.push_back(v.value());
    return out;
  };
  auto base = layer_outputs(fx);
  auto pert = layer_outputs(changed);
  REQUIRE(base.size() == 3);
  for (std::size_t l = 0; l < 3; ++l) {
    const std::size_t d = 128, len = 6;
    double earlier = 0.0, later = 0.0;
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t t = 0; t < len; ++t)
        for (std::size_t k = 0; k < d; ++k) {
          const std::size_t i = (b * len + t) * d + k;
          const double diff = std::abs(base[l][i] - pert[l][i]);
          (t < 3 ? earlier : later) = std::max(t < 3 ? earlier : later, diff);
        }
    CHECK(earlier == 0.0);
    CHECK(later > 0.0);
  }
}

TEST_CASE("gclstm with zero weights reduces to the zero state") {
  Fixture fx(6, 3, 2, 16);
  ModelConfig c;
  c.model = ModelKind::Gclstm;
  FusionModel model(c, 5, 3, 7);
  for (std::size_t i = 0; i < model.params().size(); ++i) {
    const auto& g = model.params().entry(i).group;
    if (g == "lstm" || g == "head") model.params().value(i).fill(0.0);
  }
  Tensor h = represent(model, fx, fx.batch(Backbone::Gcn));
  CHECK(h.shape() == Shape{2, 128});
  for (double v : h.data()) CHECK(v == 0.0);
  const Tensor logp = run(model, fx, fx.batch(Backbone::Gcn));
  for (double v : logp.data()) CHECK(v == doctest::Approx(std::log(0.5)).epsilon(1e-15));
}

TEST_CASE("parameter census") {
  FusionModel model(ModelConfig{}, 16, 8, 1);
  auto census = model.params().census();
  const std::size_t d = 128, f = 16, L = 10;
  const std::size_t encoder = f * d + d * d + d * d + d;
  const std::size_t tabular = 2 + 2 + 2 * d + d;
  const std::size_t layer = 4 * (d * d + d) + 4 * d + d * 512 + 512 + 512 * d + d;
  const std::size_t fusion = d + L * d + 3 * layer;
  const std::size_t head = d * 64 + 64 + 64 * 32 + 32 + 32 * 2 + 2;
  CHECK(census.at("encoder") == encoder);
  CHECK(census.at("tabular") == tabular);
  CHECK(census.at("fusion") == fusion);
  CHECK(census.at("head") == head);
  CHECK(census.at("total") == encoder + tabular + fusion + head);

  ModelConfig late;
  late.fusion = Fusion::Late;
  FusionModel lm(late, 16, 8, 1);
  CHECK(lm.sequence_length() == 9);
  CHECK(lm.params().value(lm.params().index_of("head", "w1")).shape() == Shape{256, 64});

  ModelConfig g;
  g.model = ModelKind::GclstmF;
  FusionModel gm(g, 16, 8, 1);
  CHECK(gm.params().census().at("lstm") == 2 * d * 4 * d + 4 * d);
  CHECK(gm.params().value(gm.params().index_of("head", "w1")).shape() == Shape{256, 64});
}

TEST_CASE("full-model gradient checks") {
  const auto results = model_gradcheck_suite();
  CHECK(results.size() == 9);
  for (const auto& result : results) {
    INFO(result.name, " max rel err ", result.max_relative_error, " over ", result.checked);
    CHECK(result.passed());
  }
}
