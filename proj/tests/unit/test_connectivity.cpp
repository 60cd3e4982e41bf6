#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "neurofuse/connectivity.hpp"
#include "neurofuse/error.hpp"
#include "neurofuse/rng.hpp"
#include "oracles.hpp"

using namespace neurofuse;

namespace {

Tensor random_series(std::size_t t, std::size_t r, Rng& rng) {
  Tensor x({t, r});
  for (double& v : x.data()) v = rng.normal();
  return x;
}

// Series where columns 0 and 1 share a strong common component.
Tensor coupled_series(std::size_t t, std::size_t r, Rng& rng) {
  Tensor x = random_series(t, r, rng);
  for (std::size_t i = 0; i < t; ++i) {
    const double z = 2.0 * rng.normal();
    x.at(i, 0) += z;
    x.at(i, 1) += z;
  }
  return x;
}

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected an Error");
  return ErrorKind::Contract;
}

}  // namespace

TEST_CASE("window plans") {
  WindowPlan p = sliding_windows(270, 130, 20);
  CHECK(p.count == 8);
  CHECK(p.starts == std::vector<std::size_t>{0, 20, 40, 60, 80, 100, 120, 140});
  CHECK(p.end() == 270);

  WindowPlan one = sliding_windows(130, 130, 20);
  CHECK(one.count == 1);
  CHECK(one.starts == std::vector<std::size_t>{0});

  CHECK(kind_of([] { sliding_windows(129, 130, 20); }) == ErrorKind::InsufficientData);
  CHECK(kind_of([] { fixed_windows(269, 130, 20, 8); }) == ErrorKind::InsufficientData);
  CHECK(fixed_windows(270, 130, 20, 8).starts.back() == 140);
  CHECK(sliding_windows(269, 130, 20).count == 7);
  CHECK(kind_of([] { sliding_windows(100, 1, 1); }) == ErrorKind::Contract);
}

TEST_CASE("pearson matrix") {
  Tensor x = Tensor::matrix({{1, 1}, {-1, 1}, {1, -1}, {-1, -1}});
  Tensor c = pearson_matrix(x);
  CHECK(std::abs(c.at(0, 1)) <= 1e-15);
  CHECK(c.at(0, 0) == 1.0);

  Rng rng(3);
  Tensor w = random_series(130, 5, rng);
  Tensor cw = pearson_matrix(w);
  double worst = 0.0;
  for (std::size_t a = 0; a < 5; ++a) {
    CHECK(cw.at(a, a) == 1.0);
    for (std::size_t b = 0; b < 5; ++b) {
      CHECK(cw.at(a, b) == cw.at(b, a));
      if (a != b) worst = std::max(worst, std::abs(cw.at(a, b) - oracle::pearson_two_pass(w.ptr(), 130, 5, a, b)));
    }
  }
  CHECK(worst <= 1e-12);

  Tensor flat = random_series(10, 3, rng);
  for (std::size_t i = 0; i < 10; ++i) flat.at(i, 2) = 4.0;
  try {
    pearson_matrix(flat);
    FAIL("expected degenerate series");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::DegenerateSeries);
    CHECK(std::string(e.what()).find("region 2") != std::string::npos);
  }
}

TEST_CASE("correlation p-values") {
  CHECK(correlation_pvalue(0.0, 50) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(correlation_pvalue(1.0, 50) == 0.0);
  CHECK(correlation_pvalue(-1.0, 50) == 0.0);
  CHECK(kind_of([] { correlation_pvalue(0.3, 3); }) == ErrorKind::InsufficientData);

  const double closed = correlation_pvalue(0.5, 130);
  const double quad = oracle::pvalue_quadrature(0.5, 130);
  CHECK(std::abs(closed - quad) <= 1e-8);
  CHECK(std::abs(closed - quad) <= 1e-8 * quad);

  for (double r : {-0.9, -0.3, 0.05, 0.2, 0.45, 0.7}) {
    for (std::size_t n : {4u, 10u, 130u}) {
      const double a = correlation_pvalue(r, n), b = oracle::pvalue_quadrature(r, n);
      CHECK(std::abs(a - b) <= 1e-8);
    }
  }
  // Near-unit correlations stay finite thanks to the clamp.
  CHECK(std::isfinite(correlation_pvalue(1.0 - 1e-17, 130)));
}

TEST_CASE("BH step-up") {
  std::vector<double> four{0.01, 0.02, 0.03, 0.04};
  CHECK(bh_fdr_reject(four, 0.05) == std::vector<std::uint8_t>{1, 1, 1, 1});
  std::vector<double> ones(6, 1.0);
  CHECK(bh_fdr_reject(ones, 0.05) == std::vector<std::uint8_t>(6, 0));
  std::vector<double> single{0.04};
  CHECK(bh_fdr_reject(single, 0.05) == std::vector<std::uint8_t>{1});
  CHECK(kind_of([] { bh_fdr_reject({}, 0.05); }) == ErrorKind::Contract);
  CHECK(kind_of([] { bh_fdr_reject(std::vector<double>{0.1}, 1.0); }) == ErrorKind::Contract);
  // step-up rescues 0.03 at rank 3 although it fails its own rank-2 threshold
  std::vector<double> stepup{0.001, 0.03, 0.03, 0.9};
  CHECK(bh_fdr_reject(stepup, 0.05) == std::vector<std::uint8_t>{1, 1, 1, 0});

  Rng rng(99);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t m = 1 + rng.below(60);
    std::vector<double> p(m);
    for (double& v : p) {
      // mix of signal-like small values, ties and uniform nulls
      const double u = rng.uniform();
      v = u < 0.3 ? rng.uniform(0.0, 0.01) : (u < 0.4 ? 0.02 : rng.uniform());
    }
    const double q = rng.uniform(0.01, 0.2);
    REQUIRE(bh_fdr_reject(p, q) == oracle::bh_brute_force(p, q));
  }
}

TEST_CASE("BH mask on a matrix") {
  Tensor p = Tensor::matrix({{0, 0.001, 0.9}, {0.001, 0, 0.04}, {0.9, 0.04, 0}});
  Tensor b = bh_fdr_mask(p, 0.05);
  CHECK(b == Tensor::matrix({{1, 1, 0}, {1, 1, 0}, {0, 0, 1}}));
  // with m = 3 tests: thresholds 0.0167, 0.033, 0.05; 0.04 fails at rank 2
  Tensor b2 = bh_fdr_mask(p, 0.2);
  CHECK(b2 == Tensor::matrix({{1, 1, 0}, {1, 1, 1}, {0, 1, 1}}));
}

TEST_CASE("dynamic graphs") {
  Rng rng(5);
  Tensor series = coupled_series(270, 8, rng);
  WindowPlan plan = fixed_windows(270, 130, 20, 8);
  DynamicGraphSequence g = build_dynamic_graphs(series, plan, 0.05);
  REQUIRE(g.windows() == 8);
  for (std::size_t s = 0; s < 8; ++s) {
    Tensor c = pearson_matrix(window_rows(series, plan.starts[s], 130));
    Tensor p = correlation_pvalues(c, 130);
    std::vector<double> upper;
    for (std::size_t i = 0; i < 8; ++i)
      for (std::size_t j = i + 1; j < 8; ++j) upper.push_back(p.at(i, j));
    auto reject = oracle::bh_brute_force(upper, 0.05);
    std::size_t k = 0;
    for (std::size_t i = 0; i < 8; ++i) {
      CHECK(g.adjacency[s].at(i, i) == 1.0);
      CHECK(g.masks[s].at(i, i) == 1.0);
      for (std::size_t j = i + 1; j < 8; ++j, ++k) {
        CHECK(g.masks[s].at(i, j) == reject[k]);
        CHECK(g.adjacency[s].at(i, j) == (reject[k] ? c.at(i, j) : 0.0));
        CHECK(g.adjacency[s].at(i, j) == g.adjacency[s].at(j, i));
      }
    }
    CHECK(g.masks[s].at(0, 1) == 1.0);  // planted coupling survives
  }

  // lowering q never adds edges
  DynamicGraphSequence strict = build_dynamic_graphs(series, plan, 0.001);
  for (std::size_t s = 0; s < 8; ++s)
    for (std::size_t i = 0; i < 64; ++i) CHECK(strict.masks[s][i] <= g.masks[s][i]);

  CHECK(kind_of([&] { build_dynamic_graphs(window_rows(series, 0, 200), plan, 0.05); }) ==
        ErrorKind::InsufficientData);

  DynamicGraphSequence st = build_static_graph(series);
  CHECK(st.windows() == 1);
  CHECK(st.plan.width == 270);
}

TEST_CASE("masks at the extremes") {
  Rng rng(8);
  Tensor series = random_series(40, 4, rng);
  Tensor c = pearson_matrix(series);
  // q tiny enough that nothing survives: A is the identity
  DynamicGraphSequence g = build_dynamic_graphs(series, WindowPlan{40, 1, 1, {0}}, 1e-300);
  CHECK(g.adjacency[0] == Tensor::eye(4));
  // a mask of all ones reproduces C exactly
  Tensor ones = Tensor::full({4, 4}, 1.0);
  Tensor a = c;
  for (std::size_t i = 0; i < 16; ++i) a[i] *= ones[i];
  CHECK(a == c);
}

TEST_CASE("csv and cache round trips") {
  const auto dir = std::filesystem::temp_directory_path() / "neurofuse_test_connectivity";
  std::filesystem::create_directories(dir);
  Rng rng(12);
  Tensor series = coupled_series(150, 11, rng);
  write_timeseries_csv(series, dir / "s.csv");
  CHECK(read_timeseries_csv(dir / "s.csv") == series);

  DynamicGraphSequence g = build_dynamic_graphs(series, fixed_windows(150, 130, 10, 3));
  write_graph_cache(g, dir / "g.dgs");
  CHECK(std::filesystem::file_size(dir / "g.dgs") == 12 + 3 * 121 * 8 + 3 * 16);
  DynamicGraphSequence back = read_graph_cache(dir / "g.dgs");
  REQUIRE(back.windows() == 3);
  for (std::size_t s = 0; s < 3; ++s) {
    CHECK(back.adjacency[s] == g.adjacency[s]);
    CHECK(back.masks[s] == g.masks[s]);
  }

  {
    std::ofstream bad(dir / "bad.csv");
    bad << "1,2\n3\n";
  }
  CHECK(kind_of([&] { read_timeseries_csv(dir / "bad.csv"); }) == ErrorKind::Io);
  CHECK(kind_of([&] { read_timeseries_csv(dir / "missing.csv"); }) == ErrorKind::Io);
  CHECK(kind_of([&] { read_graph_cache(dir / "s.csv"); }) == ErrorKind::Io);
  std::filesystem::remove_all(dir);
}
