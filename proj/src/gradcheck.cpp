#include "neurofuse/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "neurofuse/error.hpp"
#include "neurofuse/ops.hpp"
#include "neurofuse/rng.hpp"

namespace neurofuse {
namespace {

Var scalarize(Var out, const Tensor& projection) {
  Var p = out.tape().constant(projection);
  return ops::sum(ops::hadamard(out, p));
}

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// Magnitudes in [0.2, 1.5] with random sign; keeps inputs off activation kinks.
Tensor off_zero_tensor(Shape shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = (rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(0.2, 1.5);
  return t;
}

}  // namespace

GradCheckResult check_gradients(const std::string& name, const GraphBuilder& build,
                                const std::vector<Tensor>& inputs, const GradCheckOptions& options) {
  Tensor projection;
  {
    Tape probe;
    std::vector<Var> vars;
    for (std::size_t i = 0; i < inputs.size(); ++i) vars.push_back(probe.parameter(inputs[i], i));
    Var out = build(probe, vars);
    Rng rng(options.seed);
    projection = random_tensor(out.shape(), rng);
  }

  auto evaluate = [&](const std::vector<Tensor>& xs) {
    Tape tape;
    std::vector<Var> vars;
    for (std::size_t i = 0; i < xs.size(); ++i) vars.push_back(tape.parameter(xs[i], i));
    return scalarize(build(tape, vars), projection).value().item();
  };

  Tape tape;
  std::vector<Var> vars;
  for (std::size_t i = 0; i < inputs.size(); ++i) vars.push_back(tape.parameter(inputs[i], i));
  Var loss = scalarize(build(tape, vars), projection);
  Gradients analytic = backward(tape, loss);

  GradCheckResult result{name, 0.0, 0};
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    std::vector<Tensor> xs = inputs;
    Tensor numeric = finite_diff_grad(
        [&](const Tensor& x) {
          xs[i] = x;
          return evaluate(xs);
        },
        inputs[i], options.step);
    auto it = analytic.find(i);
    Tensor grad = it != analytic.end() ? it->second : Tensor(inputs[i].shape());
    result.max_relative_error =
        std::max(result.max_relative_error, max_relative_error(grad, numeric, options.floor));
    result.checked += inputs[i].numel();
  }
  return result;
}

std::vector<GradCheckResult> kernel_gradcheck_suite(std::uint64_t seed) {
  Rng rng(seed);
  std::vector<GradCheckResult> results;
  auto run = [&](const std::string& name, const GraphBuilder& b, std::vector<Tensor> xs) {
    results.push_back(check_gradients(name, b, xs, GradCheckOptions{1e-5, 1e-5, seed + results.size()}));
  };
  auto unary_kernel = [&](OpKind kind, bool off_zero, bool positive = false) {
    const std::string base(to_string(kind));
    for (Shape s : {Shape{1, 1}, Shape{1, 5}, Shape{5, 1}, Shape{3, 4}}) {
      Tensor x = positive ? random_tensor(s, rng, 0.2, 2.0)
                          : (off_zero ? off_zero_tensor(s, rng) : random_tensor(s, rng));
      run(base + " " + shape_string(s),
          [kind](Tape&, std::span<const Var> v) { return forward_op(kind, v.first(1)); }, {x});
    }
  };

  for (auto [a, b] : {std::pair{Shape{1, 1}, Shape{1, 1}}, std::pair{Shape{1, 5}, Shape{5, 1}},
                      std::pair{Shape{5, 1}, Shape{1, 5}}, std::pair{Shape{3, 4}, Shape{4, 2}},
                      std::pair{Shape{2, 3, 4}, Shape{2, 4, 2}}, std::pair{Shape{2, 3, 4}, Shape{4, 2}}}) {
    run("matmul " + shape_string(a) + "x" + shape_string(b),
        [](Tape&, std::span<const Var> v) { return ops::matmul(v[0], v[1]); },
        {random_tensor(a, rng), random_tensor(b, rng)});
  }
  run("matmul [3,4]x[2,4]^T", [](Tape&, std::span<const Var> v) { return ops::matmul(v[0], v[1], true); },
      {random_tensor({3, 4}, rng), random_tensor({2, 4}, rng)});
  run("matmul [2,3,4]x[2,5,4]^T", [](Tape&, std::span<const Var> v) { return ops::matmul(v[0], v[1], true); },
      {random_tensor({2, 3, 4}, rng), random_tensor({2, 5, 4}, rng)});

  for (Shape s : {Shape{1, 1}, Shape{1, 5}, Shape{5, 1}}) {
    run("add " + shape_string(s), [](Tape&, std::span<const Var> v) { return ops::add(v[0], v[1]); },
        {random_tensor(s, rng), random_tensor(s, rng)});
    run("hadamard " + shape_string(s), [](Tape&, std::span<const Var> v) { return ops::hadamard(v[0], v[1]); },
        {random_tensor(s, rng), random_tensor(s, rng)});
    run("scale " + shape_string(s), [](Tape&, std::span<const Var> v) { return ops::scale(v[0], -2.5); },
        {random_tensor(s, rng)});
  }
  run("add broadcast [3,4]+[4]", [](Tape&, std::span<const Var> v) { return ops::add(v[0], v[1]); },
      {random_tensor({3, 4}, rng), random_tensor({4}, rng)});
  run("hadamard broadcast [2,3,3]*[3,3]", [](Tape&, std::span<const Var> v) { return ops::hadamard(v[0], v[1]); },
      {random_tensor({2, 3, 3}, rng), random_tensor({3, 3}, rng)});

  run("concat-last-axis [2,3]|[2,1]", [](Tape&, std::span<const Var> v) { return ops::concat(v, 1); },
      {random_tensor({2, 3}, rng), random_tensor({2, 1}, rng)});
  run("concat axis0 [1,3]|[2,3]", [](Tape&, std::span<const Var> v) { return ops::concat(v, 0); },
      {random_tensor({1, 3}, rng), random_tensor({2, 3}, rng)});
  run("concat axis1 [2,1,3]|[2,2,3]", [](Tape&, std::span<const Var> v) { return ops::concat(v, 1); },
      {random_tensor({2, 1, 3}, rng), random_tensor({2, 2, 3}, rng)});

  for (auto [s, axis] : {std::pair{Shape{1, 1}, std::size_t{0}}, std::pair{Shape{1, 5}, std::size_t{1}},
                         std::pair{Shape{5, 1}, std::size_t{0}}, std::pair{Shape{2, 3, 4}, std::size_t{1}}}) {
    run("mean-over-axis " + shape_string(s) + " axis " + std::to_string(axis),
        [axis](Tape&, std::span<const Var> v) { return ops::mean(v[0], axis); }, {random_tensor(s, rng)});
    run("max-over-axis " + shape_string(s) + " axis " + std::to_string(axis),
        [axis](Tape&, std::span<const Var> v) { return ops::max(v[0], axis); }, {random_tensor(s, rng)});
  }
  run("sum [3,4]", [](Tape&, std::span<const Var> v) { return ops::sum(v[0]); }, {random_tensor({3, 4}, rng)});

  unary_kernel(OpKind::Selu, true);
  unary_kernel(OpKind::Sigmoid, false);
  unary_kernel(OpKind::Tanh, false);
  unary_kernel(OpKind::LeakyRelu, true);
  unary_kernel(OpKind::Log, false, true);
  unary_kernel(OpKind::Softmax, false);
  unary_kernel(OpKind::LogSoftmax, false);

  for (Shape s : {Shape{1, 1}, Shape{1, 5}, Shape{5, 1}, Shape{3, 4}}) {
    const std::size_t n = s.back();
    run("layer-norm " + shape_string(s),
        [](Tape&, std::span<const Var> v) { return ops::layer_norm(v[0], v[1], v[2]); },
        {random_tensor(s, rng), random_tensor({n}, rng, 0.5, 1.5), random_tensor({n}, rng)});
  }
  for (Shape s : {Shape{2, 1}, Shape{2, 5}, Shape{5, 1}, Shape{4, 3}}) {
    const std::size_t f = s.back();
    run("batch-norm-1d train " + shape_string(s),
        [](Tape&, std::span<const Var> v) { return ops::batch_norm(v[0], v[1], v[2], nullptr, true); },
        {random_tensor(s, rng), random_tensor({f}, rng, 0.5, 1.5), random_tensor({f}, rng)});
    auto stats = std::make_shared<BatchNormStats>(
        BatchNormStats{random_tensor({f}, rng), random_tensor({f}, rng, 0.5, 2.0), 0.1, 1e-5});
    run("batch-norm-1d infer " + shape_string(s),
        [stats](Tape&, std::span<const Var> v) { return ops::batch_norm(v[0], v[1], v[2], stats.get(), false); },
        {random_tensor(s, rng), random_tensor({f}, rng, 0.5, 1.5), random_tensor({f}, rng)});
  }

  run("reshape [2,3]->[3,2]", [](Tape&, std::span<const Var> v) { return ops::reshape(v[0], {3, 2}); },
      {random_tensor({2, 3}, rng)});
  run("permute [2,3,4]->(2,0,1)", [](Tape&, std::span<const Var> v) { return ops::permute(v[0], {2, 0, 1}); },
      {random_tensor({2, 3, 4}, rng)});
  run("slice [2,5,3] axis1 [1,4)", [](Tape&, std::span<const Var> v) { return ops::slice(v[0], 1, 1, 3); },
      {random_tensor({2, 5, 3}, rng)});
  run("gather [3,3]", [](Tape&, std::span<const Var> v) { return ops::gather(v[0], {1, 4, 4, 8}); },
      {random_tensor({3, 3}, rng)});
  run("scatter [4]->[3,3]", [](Tape&, std::span<const Var> v) { return ops::scatter(v[0], {1, 3, 3, 8}, {3, 3}); },
      {random_tensor({4}, rng)});
  return results;
}

}  // namespace neurofuse
