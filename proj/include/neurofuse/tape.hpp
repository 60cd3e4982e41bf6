#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "neurofuse/tensor.hpp"

namespace neurofuse {

enum class OpKind {
  Constant,
  Parameter,
  MatMul,
  Add,
  Scale,
  Hadamard,
  Concat,
  Mean,
  Max,
  Sum,
  Selu,
  Sigmoid,
  Tanh,
  LeakyRelu,
  Log,
  Softmax,
  LogSoftmax,
  LayerNorm,
  BatchNorm,
  Reshape,
  Permute,
  Slice,
  Gather,
  Scatter,
};

std::string_view to_string(OpKind kind);

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  Tape& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// What a node's backward rule sees. `grads[k]` is null when input k needs no
/// gradient; otherwise the rule accumulates into it.
struct BackwardArgs {
  const Tensor& grad_out;
  const Tensor& out;
  std::span<const Tensor* const> inputs;
  std::span<Tensor* const> grads;
};

using BackwardFn = std::function<void(const BackwardArgs&)>;

/// Append-only record of a forward computation. Inputs always precede their
/// consumers, so a reverse sweep is a valid topological order.
class Tape {
 public:
  struct Node {
    OpKind kind;
    std::vector<std::size_t> inputs;
    Tensor value;
    BackwardFn backward;
    bool requires_grad = false;
    std::optional<std::size_t> param_index;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  /// A trainable leaf; `param_index` keys its entry in the gradient map.
  Var parameter(Tensor value, std::size_t param_index);
  Var record(OpKind kind, std::span<const Var> inputs, Tensor value, BackwardFn backward);

  const Node& node(std::size_t id) const { return nodes_.at(id); }
  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  std::deque<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape_->node(id_).value; }

using Gradients = std::map<std::size_t, Tensor>;

/// Reverse sweep from a scalar loss. Returns one gradient per parameter node
/// that the loss depends on, keyed by parameter index.
Gradients backward(const Tape& tape, Var loss);

/// Central-difference gradient of a scalar function.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                        double h = 1e-5);

}  // namespace neurofuse
