#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numeric>

#include "neurofuse/error.hpp"
#include "neurofuse/gradcheck.hpp"
#include "neurofuse/graph_encoder.hpp"
#include "neurofuse/ops.hpp"

using namespace neurofuse;

namespace {

Tensor random_tensor(Shape shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.uniform(-1.0, 1.0);
  return t;
}

// Symmetric weighted graph with unit diagonal and roughly half the edges kept.
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

AtlasMetadata random_atlas(std::size_t r, std::size_t systems, Rng& rng) {
  std::vector<AtlasRegion> regions;
  for (std::size_t i = 0; i < r; ++i) {
    regions.push_back({"r" + std::to_string(i), rng.uniform(-90, 90), rng.uniform(-126, 126), rng.uniform(-72, 72),
                       "sys" + std::to_string(i % systems)});
  }
  return make_atlas(std::move(regions));
}

double selu(double x) { return x > 0 ? kSeluLambda * x : kSeluLambda * kSeluAlpha * (std::exp(x) - 1.0); }

// Eq.-style dense oracle written with explicit loops.
Tensor gcn_oracle(const Tensor& h, const Tensor& a, const Tensor& w) {
  const std::size_t r = a.dim(0), din = h.dim(1), dout = w.dim(1);
  std::vector<double> deg(r, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < r; ++j)
      if (a.at(i, j) != 0.0) deg[i] += 1.0;
  Tensor hw({r, dout});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t k = 0; k < dout; ++k)
      for (std::size_t m = 0; m < din; ++m) hw.at(i, k) += h.at(i, m) * w.at(m, k);
  Tensor out({r, dout});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t k = 0; k < dout; ++k) {
      double s = 0.0;
      for (std::size_t j = 0; j < r; ++j) s += a.at(i, j) / std::sqrt(deg[i] * deg[j]) * hw.at(j, k);
      out.at(i, k) = selu(s);
    }
  return out;
}

struct Encoder {
  EncoderConfig config;
  ParameterSet params;
  EncoderHandles handles;

  Encoder(std::size_t features, EncoderConfig c, std::uint64_t seed) : config(c) {
    Rng rng(seed);
    handles = add_encoder_parameters(params, features, config, rng);
  }

  Tensor embed(const Tensor& h0, const std::vector<Tensor>& graphs) const {
    Tape tape;
    auto bound = params.bind(tape);
    const std::size_t r = h0.dim(0);
    Tensor stack({graphs.size(), r, r});
    for (std::size_t g = 0; g < graphs.size(); ++g) {
      Tensor p = config.backbone == Backbone::Gcn ? normalized_adjacency(graphs[g]) : attention_support(graphs[g]);
      std::copy(p.data().begin(), p.data().end(), stack.ptr() + g * r * r);
    }
    GraphBatch batch{tape.constant(stack), graphs.size()};
    return encode_graphs(config, handles, bound, tape.constant(h0), batch).value();
  }
};

}  // namespace

TEST_CASE("node features") {
  AtlasMetadata atlas = make_atlas({{"a", 1, 2, 3, "dmn"}, {"b", 3, 4, 5, "vis"}});
  Tensor h = node_feature_matrix(atlas);
  CHECK(h.shape() == Shape{2, 5});
  // raw row [1,2,3,1,0]: coordinates standardize to -1, one-hot stays
  CHECK(h == Tensor::matrix({{-1, -1, -1, 1, 0}, {1, 1, 1, 0, 1}}));

  AtlasMetadata same = make_atlas({{"a", 0, 0, 0, "x"}, {"b", 1, 5, 2, "x"}, {"c", 2, 1, 9, "x"}});
  Tensor hs = node_feature_matrix(same);
  for (std::size_t i = 0; i < 3; ++i) CHECK(hs.at(i, 3) == 1.0);

  Rng rng(4);
  AtlasMetadata power_like = random_atlas(264, 13, rng);
  CHECK(power_like.feature_count() == 16);
  Tensor hp = node_feature_matrix(power_like);
  for (std::size_t c = 0; c < 3; ++c) {
    double m = 0, v = 0;
    for (std::size_t i = 0; i < 264; ++i) m += hp.at(i, c);
    m /= 264;
    for (std::size_t i = 0; i < 264; ++i) v += (hp.at(i, c) - m) * (hp.at(i, c) - m);
    CHECK(std::abs(m) < 1e-12);
    CHECK(v / 264 == doctest::Approx(1.0).epsilon(1e-12));
  }

  AtlasMetadata bad = atlas;
  bad.regions[1].system = "motor";
  CHECK_THROWS_AS(node_feature_matrix(bad), Error);
  try {
    node_feature_matrix(bad);
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Vocabulary);
  }
}

TEST_CASE("atlas csv round trip") {
  const auto path = std::filesystem::temp_directory_path() / "neurofuse_atlas_test.csv";
  Rng rng(9);
  AtlasMetadata atlas = random_atlas(12, 3, rng);
  write_atlas_csv(atlas, path);
  AtlasMetadata back = read_atlas_csv(path);
  REQUIRE(back.size() == 12);
  CHECK(back.vocabulary == atlas.vocabulary);
  CHECK(node_feature_matrix(back) == node_feature_matrix(atlas));
  std::filesystem::remove(path);
}

TEST_CASE("gcn layer hand examples") {
  Rng rng(1);
  Tensor h = random_tensor({4, 4}, rng);
  Tensor out = gcn_layer(h, Tensor::eye(4), Tensor::eye(4));
  for (std::size_t i = 0; i < 16; ++i) CHECK(std::abs(out[i] - selu(h[i])) <= 1e-15);

  Tensor ones = Tensor::full({2, 2}, 1.0);
  CHECK(degree_counts(ones) == Tensor::vector({2, 2}));
  CHECK(max_abs_difference(normalized_adjacency(ones), Tensor::full({2, 2}, 0.5)) <= 1e-15);
  Tensor two = gcn_layer(Tensor::eye(2), ones, Tensor::eye(2));
  for (double v : two.data()) CHECK(v == doctest::Approx(0.52535049367774025).epsilon(1e-14));

  Tensor isolated = Tensor::matrix({{1, 0}, {0, 0}});
  CHECK_THROWS_AS(normalized_adjacency(isolated), Error);
}

TEST_CASE("gcn layer matches dense oracle") {
  Rng rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t r = 3 + rng.below(10);
    Tensor a = random_graph(r, rng);
    Tensor h = random_tensor({r, 6}, rng);
    Tensor w = random_tensor({6, 5}, rng);
    CHECK(max_abs_difference(gcn_layer(h, a, w), gcn_oracle(h, a, w)) <= 1e-12);
  }
}

TEST_CASE("degree counts ignore weights") {
  Rng rng(22);
  Tensor a = random_graph(9, rng);
  Tensor scaled = a;
  scaled *= -3.7;
  CHECK(degree_counts(a) == degree_counts(scaled));
  // so the propagation is linear in the weight scale
  Tensor na = normalized_adjacency(a), ns = normalized_adjacency(scaled);
  for (std::size_t i = 0; i < na.numel(); ++i) CHECK(ns[i] == doctest::Approx(-3.7 * na[i]).epsilon(1e-14));
}

TEST_CASE("embedding shape and invariances") {
  Rng rng(31);
  const std::size_t r = 7;
  AtlasMetadata atlas = random_atlas(r, 3, rng);
  Tensor h0 = node_feature_matrix(atlas);
  for (Backbone backbone : {Backbone::Gcn, Backbone::Gat}) {
    for (Readout readout : {Readout::Mean, Readout::Max}) {
      Encoder enc(h0.dim(1), {backbone, readout, 128}, 5);
      Tensor a = random_graph(r, rng);
      Tensor e = enc.embed(h0, {a, random_graph(r, rng)});
      CHECK(e.shape() == Shape{2, 128});

      // permute nodes in both A and H0
      for (int trial = 0; trial < 5; ++trial) {
        std::vector<std::size_t> perm(r);
        std::iota(perm.begin(), perm.end(), 0);
        rng.shuffle(perm);
        Tensor ap({r, r}), hp({r, h0.dim(1)});
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t j = 0; j < r; ++j) ap.at(i, j) = a.at(perm[i], perm[j]);
          for (std::size_t k = 0; k < h0.dim(1); ++k) hp.at(i, k) = h0.at(perm[i], k);
        }
        Tensor e1 = enc.embed(h0, {a}), e2 = enc.embed(hp, {ap});
        CHECK(max_abs_difference(e1, e2) <= 1e-10);
      }

      // two disconnected copies of the graph
      Tensor ad({2 * r, 2 * r}), hd({2 * r, h0.dim(1)});
      for (std::size_t c = 0; c < 2; ++c)
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t j = 0; j < r; ++j) ad.at(c * r + i, c * r + j) = a.at(i, j);
          for (std::size_t k = 0; k < h0.dim(1); ++k) hd.at(c * r + i, k) = h0.at(i, k);
        }
      CHECK(max_abs_difference(enc.embed(h0, {a}), enc.embed(hd, {ad})) <= 1e-10);
    }
  }
}

TEST_CASE("encoder gradients") {
  Rng rng(41);
  const std::size_t r = 5;
  AtlasMetadata atlas = random_atlas(r, 2, rng);
  Tensor h0 = node_feature_matrix(atlas);
  std::vector<Tensor> graphs{random_graph(r, rng), random_graph(r, rng)};
  for (Backbone backbone : {Backbone::Gcn, Backbone::Gat}) {
    for (Readout readout : {Readout::Mean, Readout::Max}) {
      EncoderConfig config{backbone, readout, 8};
      ParameterSet params;
      Rng init(3);
      EncoderHandles handles = add_encoder_parameters(params, h0.dim(1), config, init);
      std::vector<Tensor> inputs;
      for (std::size_t i = 0; i < params.size(); ++i) inputs.push_back(params.value(i));
      Tensor stack({2, r, r});
      for (std::size_t g = 0; g < 2; ++g) {
        Tensor p = backbone == Backbone::Gcn ? normalized_adjacency(graphs[g]) : attention_support(graphs[g]);
        std::copy(p.data().begin(), p.data().end(), stack.ptr() + g * r * r);
      }
      // non-zero bias keeps the projection away from the SELU kink at the origin
      inputs[handles.proj_bias] = random_tensor({8}, rng);
      auto result = check_gradients(
          "encoder " + to_string(backbone) + " " + to_string(readout),
          [&](Tape& tape, std::span<const Var> vars) {
            GraphBatch batch{tape.constant(stack), 2};
            return encode_graphs(config, handles, vars, tape.constant(h0), batch);
          },
          inputs);
      INFO(result.name, " ", result.max_relative_error);
      CHECK(result.passed());
    }
  }
}

TEST_CASE("explanation masks act on propagation and features") {
  Rng rng(51);
  const std::size_t r = 6;
  AtlasMetadata atlas = random_atlas(r, 2, rng);
  Tensor h0 = node_feature_matrix(atlas);
  Tensor a = random_graph(r, rng);
  Encoder enc(h0.dim(1), {}, 8);
  Tape tape;
  auto bound = enc.params.bind(tape);
  Tensor stack = normalized_adjacency(a).reshaped({1, r, r});
  GraphBatch batch{tape.constant(stack), 1};
  Var ones_e = tape.constant(Tensor::full({r, r}, 1.0));
  Var ones_f = tape.constant(Tensor::full({h0.dim(1)}, 1.0));
  Var plain = encode_graphs(enc.config, enc.handles, bound, tape.constant(h0), batch);
  Var masked = encode_graphs(enc.config, enc.handles, bound, tape.constant(h0), batch, {&ones_e, &ones_f});
  CHECK(plain.value() == masked.value());
  // a zero edge mask removes all propagation: every node's output is SELU(0) before projection
  Var zero_e = tape.constant(Tensor({r, r}));
  Var cut = encode_graphs(enc.config, enc.handles, bound, tape.constant(h0), batch, {&zero_e, nullptr});
  Tensor other_h0 = h0;
  other_h0 *= 2.0;
  Var cut2 = encode_graphs(enc.config, enc.handles, bound, tape.constant(other_h0), batch, {&zero_e, nullptr});
  CHECK(cut.value() == cut2.value());
}
