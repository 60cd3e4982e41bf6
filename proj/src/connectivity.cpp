#include "neurofuse/connectivity.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <boost/math/special_functions/beta.hpp>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "neurofuse/binary_io.hpp"
#include "neurofuse/error.hpp"

namespace neurofuse {
namespace {

constexpr const char* kModule = "connectivity";

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

}  // namespace

WindowPlan sliding_windows(std::size_t series_length, std::size_t width, std::size_t step) {
  if (width < 2 || step < 1) fail(ErrorKind::Contract, kModule, "window width must be >= 2 and step >= 1");
  if (series_length < width) {
    fail(ErrorKind::InsufficientData, kModule,
         "series of length " + std::to_string(series_length) + " is shorter than window width " +
             std::to_string(width));
  }
  return fixed_windows(series_length, width, step, (series_length - width) / step + 1);
}

WindowPlan fixed_windows(std::size_t series_length, std::size_t width, std::size_t step, std::size_t count) {
  if (width < 2 || step < 1 || count < 1) {
    fail(ErrorKind::Contract, kModule, "window width must be >= 2, step >= 1 and count >= 1");
  }
  const std::size_t needed = width + (count - 1) * step;
  if (series_length < needed) {
    fail(ErrorKind::InsufficientData, kModule,
         std::to_string(count) + " windows of width " + std::to_string(width) + " and step " +
             std::to_string(step) + " need " + std::to_string(needed) + " timepoints, got " +
             std::to_string(series_length));
  }
  WindowPlan plan{width, step, count, {}};
  for (std::size_t k = 0; k < count; ++k) plan.starts.push_back(k * step);
  return plan;
}

Tensor pearson_matrix(const Tensor& window) {
  if (window.rank() != 2) fail(ErrorKind::Dimension, kModule, "window must be [timepoints, regions]");
  const std::size_t t = window.dim(0), r = window.dim(1);
  if (t < 3) fail(ErrorKind::InsufficientData, kModule, "correlation needs at least 3 timepoints");
  Eigen::Map<const RowMat> x(window.ptr(), static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(r));
  RowMat centered = x.rowwise() - x.colwise().mean();
  Eigen::VectorXd norms = centered.colwise().norm();
  for (std::size_t j = 0; j < r; ++j) {
    if (!(norms[static_cast<Eigen::Index>(j)] > 0.0) || !std::isfinite(norms[static_cast<Eigen::Index>(j)])) {
      fail(ErrorKind::DegenerateSeries, kModule, "region " + std::to_string(j) + " has zero variance in window");
    }
  }
  RowMat gram = centered.transpose() * centered;
  Tensor c({r, r});
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = i; j < r; ++j) {
      double v = gram(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) /
                 (norms[static_cast<Eigen::Index>(i)] * norms[static_cast<Eigen::Index>(j)]);
      v = std::clamp(v, -1.0, 1.0);
      c.at(i, j) = v;
      c.at(j, i) = v;
    }
    c.at(i, i) = 1.0;
  }
  return c;
}

double correlation_pvalue(double r, std::size_t n) {
  if (n < 4) fail(ErrorKind::InsufficientData, kModule, "p-values need a window of at least 4 timepoints");
  if (!(std::abs(r) <= 1.0)) fail(ErrorKind::Contract, kModule, "correlation outside [-1, 1]");
  if (std::abs(r) == 1.0) return 0.0;
  const double df = static_cast<double>(n - 2);
  const double one_minus = std::max(1.0 - r * r, 1e-15);
  const double t2 = r * r * df / one_minus;
  // P(|T| > t) for Student t with df degrees of freedom
  return boost::math::ibeta(df / 2.0, 0.5, df / (df + t2));
}

Tensor correlation_pvalues(const Tensor& correlations, std::size_t n) {
  if (correlations.rank() != 2 || correlations.dim(0) != correlations.dim(1)) {
    fail(ErrorKind::Dimension, kModule, "correlation matrix must be square");
  }
  if (n < 4) fail(ErrorKind::InsufficientData, kModule, "p-values need a window of at least 4 timepoints");
  const std::size_t r = correlations.dim(0);
  Tensor p({r, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = i + 1; j < r; ++j) {
      const double v = correlation_pvalue(correlations.at(i, j), n);
      p.at(i, j) = v;
      p.at(j, i) = v;
    }
  return p;
}

std::vector<std::uint8_t> bh_fdr_reject(std::span<const double> pvalues, double q) {
  if (pvalues.empty()) fail(ErrorKind::Contract, kModule, "BH needs at least one p-value");
  if (!(q > 0.0 && q < 1.0)) fail(ErrorKind::Contract, kModule, "FDR level must lie in (0, 1)");
  const std::size_t m = pvalues.size();
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return pvalues[a] < pvalues[b]; });
  double cutoff = -1.0;
  for (std::size_t k = m; k >= 1; --k) {
    const double p = pvalues[order[k - 1]];
    if (p <= static_cast<double>(k) * q / static_cast<double>(m)) {
      cutoff = p;
      break;
    }
  }
  std::vector<std::uint8_t> reject(m, 0);
  if (cutoff < 0.0) return reject;
  for (std::size_t i = 0; i < m; ++i) reject[i] = pvalues[i] <= cutoff ? 1 : 0;
  return reject;
}

Tensor bh_fdr_mask(const Tensor& pvalues, double q) {
  if (pvalues.rank() != 2 || pvalues.dim(0) != pvalues.dim(1) || pvalues.dim(0) < 2) {
    fail(ErrorKind::Dimension, kModule, "p-value matrix must be square with at least 2 regions");
  }
  const std::size_t r = pvalues.dim(0);
  std::vector<double> upper;
  upper.reserve(r * (r - 1) / 2);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = i + 1; j < r; ++j) upper.push_back(pvalues.at(i, j));
  const auto reject = bh_fdr_reject(upper, q);
  Tensor mask({r, r});
  std::size_t k = 0;
  for (std::size_t i = 0; i < r; ++i) {
    mask.at(i, i) = 1.0;
    for (std::size_t j = i + 1; j < r; ++j, ++k) {
      mask.at(i, j) = reject[k];
      mask.at(j, i) = reject[k];
    }
  }
  return mask;
}

Tensor window_rows(const Tensor& series, std::size_t start, std::size_t length) {
  if (series.rank() != 2 || start + length > series.dim(0)) {
    fail(ErrorKind::Dimension, kModule, "window exceeds series bounds");
  }
  const std::size_t r = series.dim(1);
  Tensor out({length, r});
  std::copy_n(series.ptr() + start * r, length * r, out.ptr());
  return out;
}

DynamicGraphSequence build_dynamic_graphs(const Tensor& series, const WindowPlan& plan, double q) {
  if (series.rank() != 2) fail(ErrorKind::Dimension, kModule, "series must be [timepoints, regions]");
  if (plan.starts.empty() || plan.end() > series.dim(0)) {
    fail(ErrorKind::InsufficientData, kModule,
         "window plan needs " + std::to_string(plan.end()) + " timepoints, series has " +
             std::to_string(series.dim(0)));
  }
  DynamicGraphSequence out;
  out.plan = plan;
  for (std::size_t start : plan.starts) {
    Tensor c = pearson_matrix(window_rows(series, start, plan.width));
    Tensor b = bh_fdr_mask(correlation_pvalues(c, plan.width), q);
    Tensor a = c;
    for (std::size_t i = 0; i < a.numel(); ++i) a[i] *= b[i];
    out.adjacency.push_back(std::move(a));
    out.masks.push_back(std::move(b));
  }
  return out;
}

DynamicGraphSequence build_static_graph(const Tensor& series, double q) {
  if (series.rank() != 2) fail(ErrorKind::Dimension, kModule, "series must be [timepoints, regions]");
  const std::size_t t = series.dim(0);
  return build_dynamic_graphs(series, WindowPlan{t, 1, 1, {0}}, q);
}

Tensor read_timeseries_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Io, kModule, "cannot open time series " + path.string());
  std::vector<double> values;
  std::size_t cols = 0, rows = 0;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::size_t count = 0;
    const char* p = line.data();
    const char* end = p + line.size();
    while (p <= end) {
      const char* comma = std::find(p, end, ',');
      double v = 0.0;
      const char* first = p;
      while (first < comma && *first == ' ') ++first;
      auto [ptr, ec] = std::from_chars(first, comma, v);
      if (ec != std::errc() || first == comma) {
        fail(ErrorKind::Io, kModule,
             path.string() + ": bad number on line " + std::to_string(rows + 1));
      }
      values.push_back(v);
      ++count;
      p = comma + 1;
    }
    if (rows == 0) cols = count;
    if (count != cols) fail(ErrorKind::Io, kModule, path.string() + ": ragged row " + std::to_string(rows + 1));
    ++rows;
  }
  if (rows == 0) fail(ErrorKind::Io, kModule, "empty time series " + path.string());
  return Tensor({rows, cols}, std::move(values));
}

void write_timeseries_csv(const Tensor& series, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::Io, kModule, "cannot write " + path.string());
  out << std::setprecision(17);
  for (std::size_t t = 0; t < series.dim(0); ++t) {
    for (std::size_t j = 0; j < series.dim(1); ++j) out << (j ? "," : "") << series.at(t, j);
    out << '\n';
  }
  if (!out) fail(ErrorKind::Io, kModule, "write failed: " + path.string());
}

void write_graph_cache(const DynamicGraphSequence& graphs, const std::filesystem::path& path) {
  const std::size_t r = graphs.regions(), s = graphs.windows();
  BinaryWriter out(path);
  out.bytes("DGS1", 4);
  out.u32(static_cast<std::uint32_t>(r));
  out.u32(static_cast<std::uint32_t>(s));
  for (const Tensor& a : graphs.adjacency)
    for (double v : a.data()) out.f64(v);
  const std::size_t packed = (r * r + 7) / 8;
  for (const Tensor& b : graphs.masks) {
    std::vector<std::uint8_t> bits(packed, 0);
    for (std::size_t i = 0; i < r * r; ++i)
      if (b[i] != 0.0) bits[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
    out.bytes(bits.data(), bits.size());
  }
  out.finish();
}

DynamicGraphSequence read_graph_cache(const std::filesystem::path& path) {
  BinaryReader in(path);
  char magic[4];
  in.bytes(magic, 4);
  if (std::memcmp(magic, "DGS1", 4) != 0) fail(ErrorKind::Io, kModule, "not a graph cache: " + path.string());
  const std::size_t r = in.u32(), s = in.u32();
  DynamicGraphSequence out;
  for (std::size_t k = 0; k < s; ++k) {
    Tensor a({r, r});
    for (double& v : a.data()) v = in.f64();
    out.adjacency.push_back(std::move(a));
  }
  const std::size_t packed = (r * r + 7) / 8;
  for (std::size_t k = 0; k < s; ++k) {
    std::vector<std::uint8_t> bits(packed);
    in.bytes(bits.data(), packed);
    Tensor b({r, r});
    for (std::size_t i = 0; i < r * r; ++i) b[i] = (bits[i / 8] >> (i % 8)) & 1u;
    out.masks.push_back(std::move(b));
  }
  in.expect_end();
  out.plan.count = s;
  return out;
}

}  // namespace neurofuse
