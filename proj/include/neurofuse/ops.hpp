#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "neurofuse/tape.hpp"

namespace neurofuse {

inline constexpr double kSeluLambda = 1.0507009873554805;
inline constexpr double kSeluAlpha = 1.6732632423543772;

/// Running statistics owned by a batch-norm layer. Not trainable.
struct BatchNormStats {
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  double eps = 1e-5;
};

namespace ops {

/// [m,k]x[k,n], batched [g,m,k]x[g,k,n], or [g,m,k]x[k,n] (shared right
/// operand). With `transpose_b` the right operand is read as its transpose
/// over the last two axes.
Var matmul(Var a, Var b, bool transpose_b = false);

/// Elementwise sum. The smaller operand's shape must be a suffix of the
/// larger one's and is broadcast over the leading axes.
Var add(Var a, Var b);
Var hadamard(Var a, Var b);
Var scale(Var a, double factor);

Var concat(std::span<const Var> parts, std::size_t axis);
Var concat(std::initializer_list<Var> parts, std::size_t axis);
/// Mean over one axis; the axis is removed from the shape. With
/// `order_invariant` each output sums its inputs in sorted order, so the
/// result is bit-identical under any permutation along the axis.
Var mean(Var x, std::size_t axis, bool order_invariant = false);
/// Elementwise max over one axis (ties resolved to the first index).
Var max(Var x, std::size_t axis);
/// Sum of every element as a rank-0 tensor.
Var sum(Var x);

Var selu(Var x);
Var sigmoid(Var x);
Var tanh(Var x);
Var leaky_relu(Var x, double slope = 0.2);
Var log(Var x);

/// Softmax and log-softmax along the last axis.
Var softmax(Var x);
Var log_softmax(Var x);

/// Normalizes the last axis, then applies the affine gamma/beta.
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);

/// Batch normalization of a [batch, features] input. In training mode it
/// normalizes with the biased batch statistics and, when `stats` is given,
/// updates the running averages (the running variance uses the unbiased
/// estimate). In inference mode it uses `stats`.
Var batch_norm(Var x, Var gamma, Var beta, BatchNormStats* stats, bool training);

Var reshape(Var x, Shape shape);
Var permute(Var x, std::vector<std::size_t> perm);
Var slice(Var x, std::size_t axis, std::size_t start, std::size_t length);
/// Picks flat elements of x by index; returns a rank-1 tensor.
Var gather(Var x, std::vector<std::size_t> indices);
/// Adjoint of gather: places x[i] at flat position indices[i] of a zero tensor
/// of `shape`, summing duplicates.
Var scatter(Var x, std::vector<std::size_t> indices, Shape shape);

}  // namespace ops

/// Attributes for the generic kernel dispatcher.
struct OpAttributes {
  std::size_t axis = 0;
  double factor = 1.0;
  bool transpose_b = false;
  bool training = true;
  BatchNormStats* stats = nullptr;
  Shape shape;
  std::vector<std::size_t> indices;
};

/// Dispatches one kernel by kind. Used by the gradient-check suite so every
/// kind can be driven uniformly.
Var forward_op(OpKind kind, std::span<const Var> inputs, const OpAttributes& attrs = {});

}  // namespace neurofuse
