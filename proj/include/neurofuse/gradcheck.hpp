#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "neurofuse/tape.hpp"

namespace neurofuse {

/// Builds a forward computation from input variables. Non-scalar outputs
/// are contracted against a fixed random tensor to form the scalar loss.
using GraphBuilder = std::function<Var(Tape&, std::span<const Var>)>;

struct GradCheckOptions {
  double step = 1e-5;
  /// Elementwise relative error is |a - b| / max(|a|, |b|, floor).
  double floor = 1e-5;
  std::uint64_t seed = 7;
};

struct GradCheckResult {
  std::string name;
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  bool passed(double tolerance = 1e-4) const { return max_relative_error <= tolerance; }
};

/// Compares backward() with central finite differences for every input.
GradCheckResult check_gradients(const std::string& name, const GraphBuilder& build,
                                const std::vector<Tensor>& inputs, const GradCheckOptions& options = {});

/// One check per kernel kind over small edge-case shapes.
std::vector<GradCheckResult> kernel_gradcheck_suite(std::uint64_t seed = 11);

}  // namespace neurofuse
