#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "neurofuse/tensor.hpp"

namespace neurofuse {

struct WindowPlan {
  std::size_t width = 130;
  std::size_t step = 20;
  std::size_t count = 8;
  std::vector<std::size_t> starts;

  /// Index one past the last timepoint covered by the plan.
  std::size_t end() const { return starts.empty() ? 0 : starts.back() + width; }
};

/// Auto-derived plan: as many windows as fit, count = floor((T - width)/step) + 1.
WindowPlan sliding_windows(std::size_t series_length, std::size_t width = 130, std::size_t step = 20);

/// Plan with a fixed window count; errors when the series is too short for it.
WindowPlan fixed_windows(std::size_t series_length, std::size_t width, std::size_t step, std::size_t count);

/// Sample Pearson correlation between the columns of a [T_w, R] window.
/// The diagonal is exactly 1 and entries are clamped to [-1, 1].
Tensor pearson_matrix(const Tensor& window);

/// Two-sided p-values of the t-test for r with n - 2 degrees of freedom.
/// The diagonal is reported as 0 and is not part of any test family.
Tensor correlation_pvalues(const Tensor& correlations, std::size_t n);
double correlation_pvalue(double r, std::size_t n);

/// Benjamini-Hochberg step-up. Returns one reject flag per p-value.
std::vector<std::uint8_t> bh_fdr_reject(std::span<const double> pvalues, double q = 0.05);

/// Applies BH over the R(R-1)/2 upper-triangle p-values of an R x R matrix
/// and returns the symmetric 0/1 mask with a unit diagonal.
Tensor bh_fdr_mask(const Tensor& pvalues, double q = 0.05);

struct DynamicGraphSequence {
  std::vector<Tensor> adjacency;  // A = B * C per window, R x R
  std::vector<Tensor> masks;      // B per window, entries in {0, 1}
  WindowPlan plan;

  std::size_t regions() const { return adjacency.empty() ? 0 : adjacency.front().dim(0); }
  std::size_t windows() const { return adjacency.size(); }
};

/// Rows [start, start + length) of a [T, R] series.
Tensor window_rows(const Tensor& series, std::size_t start, std::size_t length);

DynamicGraphSequence build_dynamic_graphs(const Tensor& series, const WindowPlan& plan, double q = 0.05);

/// One graph over the whole series (the non-dynamic ablation).
DynamicGraphSequence build_static_graph(const Tensor& series, double q = 0.05);

/// Headerless numeric CSV, one row per timepoint.
Tensor read_timeseries_csv(const std::filesystem::path& path);
void write_timeseries_csv(const Tensor& series, const std::filesystem::path& path);

/// Graph-sequence cache: magic "DGS1", u32 R, u32 S, S dense R x R float64
/// matrices for A, then S bit-packed masks B (row-major, LSB first, each
/// padded to a whole byte). All little-endian.
void write_graph_cache(const DynamicGraphSequence& graphs, const std::filesystem::path& path);
DynamicGraphSequence read_graph_cache(const std::filesystem::path& path);

}  // namespace neurofuse
