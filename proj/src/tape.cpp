#include "neurofuse/tape.hpp"

#include <cmath>

#include "neurofuse/error.hpp"

namespace neurofuse {

std::string_view to_string(OpKind kind) {
  switch (kind) {
    case OpKind::Constant: return "constant";
    case OpKind::Parameter: return "parameter";
    case OpKind::MatMul: return "matmul";
    case OpKind::Add: return "add";
    case OpKind::Scale: return "scale";
    case OpKind::Hadamard: return "hadamard";
    case OpKind::Concat: return "concat";
    case OpKind::Mean: return "mean-over-axis";
    case OpKind::Max: return "max-over-axis";
    case OpKind::Sum: return "sum";
    case OpKind::Selu: return "selu";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::Tanh: return "tanh";
    case OpKind::LeakyRelu: return "leaky-relu";
    case OpKind::Log: return "log";
    case OpKind::Softmax: return "row-softmax";
    case OpKind::LogSoftmax: return "row-log-softmax";
    case OpKind::LayerNorm: return "layer-norm";
    case OpKind::BatchNorm: return "batch-norm-1d";
    case OpKind::Reshape: return "reshape";
    case OpKind::Permute: return "permute";
    case OpKind::Slice: return "slice";
    case OpKind::Gather: return "gather";
    case OpKind::Scatter: return "scatter";
  }
  return "unknown";
}

Var Tape::constant(Tensor value) {
  if (!value.all_finite()) fail(ErrorKind::Numeric, "numerics", "non-finite constant");
  nodes_.push_back(Node{OpKind::Constant, {}, std::move(value), {}, false, std::nullopt});
  return Var(this, nodes_.size() - 1);
}

Var Tape::parameter(Tensor value, std::size_t param_index) {
  if (!value.all_finite()) fail(ErrorKind::Numeric, "numerics", "non-finite parameter");
  nodes_.push_back(Node{OpKind::Parameter, {}, std::move(value), {}, true, param_index});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(OpKind kind, std::span<const Var> inputs, Tensor value, BackwardFn backward) {
  if (!value.all_finite()) {
    fail(ErrorKind::Numeric, "numerics",
         std::string("non-finite output from ") + std::string(to_string(kind)));
  }
  Node node{kind, {}, std::move(value), std::move(backward), false, std::nullopt};
  node.inputs.reserve(inputs.size());
  for (const Var& v : inputs) {
    if (&v.tape() != this) fail(ErrorKind::Contract, "numerics", "input from another tape");
    node.inputs.push_back(v.id());
    node.requires_grad = node.requires_grad || nodes_[v.id()].requires_grad;
  }
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Gradients backward(const Tape& tape, Var loss) {
  if (&loss.tape() != &tape) fail(ErrorKind::Contract, "numerics", "loss from another tape");
  if (loss.value().numel() != 1) {
    fail(ErrorKind::Contract, "numerics",
         "backward needs a scalar loss, got shape " + shape_string(loss.shape()));
  }
  std::vector<std::optional<Tensor>> grads(loss.id() + 1);
  grads[loss.id()] = Tensor::full(loss.shape(), 1.0);
  Gradients result;

  std::vector<const Tensor*> input_values;
  std::vector<Tensor*> input_grads;
  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    const Tape::Node& node = tape.node(id);
    if (!grads[id] || !node.requires_grad) continue;
    if (node.param_index) {
      auto [it, inserted] = result.try_emplace(*node.param_index, std::move(*grads[id]));
      if (!inserted) it->second += *grads[id];
      grads[id].reset();
      continue;
    }
    if (!node.backward) continue;
    input_values.clear();
    input_grads.clear();
    for (std::size_t in : node.inputs) {
      const Tape::Node& src = tape.node(in);
      input_values.push_back(&src.value);
      if (src.requires_grad) {
        if (!grads[in]) grads[in] = Tensor::zeros(src.value.shape());
        input_grads.push_back(&*grads[in]);
      } else {
        input_grads.push_back(nullptr);
      }
    }
    node.backward(BackwardArgs{*grads[id], node.value, input_values, input_grads});
    grads[id].reset();
  }
  return result;
}

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                        double h) {
  if (!(h > 0.0)) fail(ErrorKind::Contract, "numerics", "finite-difference step must be > 0");
  Tensor grad(x.shape());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double saved = probe[i];
    probe[i] = saved + h;
    const double plus = f(probe);
    probe[i] = saved - h;
    const double minus = f(probe);
    probe[i] = saved;
    if (!std::isfinite(plus) || !std::isfinite(minus)) {
      fail(ErrorKind::Numeric, "numerics",
           "non-finite function value at coordinate " + std::to_string(i));
    }
    grad[i] = (plus - minus) / (2.0 * h);
  }
  return grad;
}

}  // namespace neurofuse
