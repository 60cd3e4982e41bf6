#include "neurofuse/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "neurofuse/error.hpp"

namespace neurofuse {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

[[noreturn]] void dim_error(std::string_view op, const std::string& detail) {
  fail(ErrorKind::Dimension, "numerics", std::string(op) + ": " + detail);
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

// Product of dims before / after `axis`.
std::size_t outer_size(const Shape& s, std::size_t axis) {
  return std::accumulate(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(axis),
                         std::size_t{1}, std::multiplies<>());
}
std::size_t inner_size(const Shape& s, std::size_t axis) {
  return std::accumulate(s.begin() + static_cast<std::ptrdiff_t>(axis) + 1, s.end(),
                         std::size_t{1}, std::multiplies<>());
}

std::size_t last_dim(const Shape& s, std::string_view op) {
  if (s.empty()) dim_error(op, "needs rank >= 1");
  return s.back();
}

// Accumulates g (full size) into dst, summing over broadcast blocks when dst is smaller.
void reduce_into(Tensor& dst, const Tensor& g) {
  const std::size_t n = dst.numel();
  const double* src = g.ptr();
  double* out = dst.ptr();
  for (std::size_t i = 0; i < g.numel(); ++i) out[i % n] += src[i];
}

template <typename F, typename D>
Var unary(Var x, OpKind kind, F&& f, D&& dfdx) {
  const Tensor& in = x.value();
  Tensor out(in.shape());
  for (std::size_t i = 0; i < in.numel(); ++i) out[i] = f(in[i]);
  Var inputs[] = {x};
  return x.tape().record(kind, inputs, std::move(out), [dfdx](const BackwardArgs& a) {
    if (!a.grads[0]) return;
    const Tensor& xin = *a.inputs[0];
    Tensor& gx = *a.grads[0];
    for (std::size_t i = 0; i < xin.numel(); ++i) gx[i] += a.grad_out[i] * dfdx(xin[i], a.out[i]);
  });
}

double stable_sigmoid(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

}  // namespace

namespace ops {

Var matmul(Var a, Var b, bool transpose_b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  const Shape& sa = A.shape();
  const Shape& sb = B.shape();
  if (sa.size() < 2 || sa.size() > 3 || sb.size() < 2 || sb.size() > 3 || sb.size() > sa.size()) {
    dim_error("matmul", "unsupported ranks " + shape_string(sa) + " x " + shape_string(sb));
  }
  const bool batched = sb.size() == 3;
  const std::size_t groups = batched ? sa[0] : 1;
  if (batched && sb[0] != sa[0]) dim_error("matmul", "batch mismatch");
  const std::size_t k = sa.back();
  const std::size_t m = batched ? sa[1] : A.numel() / k;
  const std::size_t kb = transpose_b ? sb.back() : sb[sb.size() - 2];
  const std::size_t n = transpose_b ? sb[sb.size() - 2] : sb.back();
  if (kb != k) {
    dim_error("matmul", "inner dims " + shape_string(sa) + " x " + shape_string(sb) +
                            (transpose_b ? "^T" : ""));
  }
  Shape out_shape = sa;
  out_shape.back() = n;
  Tensor C(out_shape);
  for (std::size_t g = 0; g < groups; ++g) {
    ConstMap Am(A.ptr() + g * m * k, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k));
    MutMap Cm(C.ptr() + g * m * n, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
    const double* bp = B.ptr() + (batched ? g * k * n : 0);
    if (transpose_b) {
      ConstMap Bm(bp, static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(k));
      Cm.noalias() = Am * Bm.transpose();
    } else {
      ConstMap Bm(bp, static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
      Cm.noalias() = Am * Bm;
    }
  }
  Var inputs[] = {a, b};
  return a.tape().record(
      OpKind::MatMul, inputs, std::move(C),
      [groups, m, k, n, batched, transpose_b](const BackwardArgs& args) {
        const Tensor& A = *args.inputs[0];
        const Tensor& B = *args.inputs[1];
        for (std::size_t g = 0; g < groups; ++g) {
          ConstMap G(args.grad_out.ptr() + g * m * n, static_cast<Eigen::Index>(m),
                     static_cast<Eigen::Index>(n));
          const std::size_t boff = batched ? g * k * n : 0;
          if (args.grads[0]) {
            MutMap GA(args.grads[0]->ptr() + g * m * k, static_cast<Eigen::Index>(m),
                      static_cast<Eigen::Index>(k));
            if (transpose_b) {
              ConstMap Bm(B.ptr() + boff, static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(k));
              GA.noalias() += G * Bm;
            } else {
              ConstMap Bm(B.ptr() + boff, static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
              GA.noalias() += G * Bm.transpose();
            }
          }
          if (args.grads[1]) {
            ConstMap Am(A.ptr() + g * m * k, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k));
            if (transpose_b) {
              MutMap GB(args.grads[1]->ptr() + boff, static_cast<Eigen::Index>(n),
                        static_cast<Eigen::Index>(k));
              GB.noalias() += G.transpose() * Am;
            } else {
              MutMap GB(args.grads[1]->ptr() + boff, static_cast<Eigen::Index>(k),
                        static_cast<Eigen::Index>(n));
              GB.noalias() += Am.transpose() * G;
            }
          }
        }
      });
}

Var add(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  const bool a_big = A.numel() >= B.numel();
  const Shape& big = a_big ? A.shape() : B.shape();
  const Shape& small = a_big ? B.shape() : A.shape();
  if (!is_suffix(small, big)) {
    dim_error("add", "cannot broadcast " + shape_string(small) + " onto " + shape_string(big));
  }
  Tensor out(big);
  const std::size_t na = A.numel(), nb = B.numel();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = A[i % na] + B[i % nb];
  Var inputs[] = {a, b};
  return a.tape().record(OpKind::Add, inputs, std::move(out), [](const BackwardArgs& args) {
    for (std::size_t k = 0; k < 2; ++k)
      if (args.grads[k]) reduce_into(*args.grads[k], args.grad_out);
  });
}

Var hadamard(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  const bool a_big = A.numel() >= B.numel();
  const Shape& big = a_big ? A.shape() : B.shape();
  const Shape& small = a_big ? B.shape() : A.shape();
  if (!is_suffix(small, big)) {
    dim_error("hadamard", "cannot broadcast " + shape_string(small) + " onto " + shape_string(big));
  }
  Tensor out(big);
  const std::size_t na = A.numel(), nb = B.numel();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = A[i % na] * B[i % nb];
  Var inputs[] = {a, b};
  return a.tape().record(OpKind::Hadamard, inputs, std::move(out), [](const BackwardArgs& args) {
    const Tensor& A = *args.inputs[0];
    const Tensor& B = *args.inputs[1];
    const std::size_t na = A.numel(), nb = B.numel();
    const Tensor& g = args.grad_out;
    if (args.grads[0]) {
      Tensor& ga = *args.grads[0];
      for (std::size_t i = 0; i < g.numel(); ++i) ga[i % na] += g[i] * B[i % nb];
    }
    if (args.grads[1]) {
      Tensor& gb = *args.grads[1];
      for (std::size_t i = 0; i < g.numel(); ++i) gb[i % nb] += g[i] * A[i % na];
    }
  });
}

Var scale(Var a, double factor) {
  Tensor out = a.value();
  out *= factor;
  Var inputs[] = {a};
  return a.tape().record(OpKind::Scale, inputs, std::move(out), [factor](const BackwardArgs& args) {
    if (!args.grads[0]) return;
    Tensor& ga = *args.grads[0];
    for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += factor * args.grad_out[i];
  });
}

Var concat(std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) fail(ErrorKind::Contract, "numerics", "concat of zero tensors");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) dim_error("concat", "axis out of range");
  Shape out_shape = first;
  out_shape[axis] = 0;
  std::vector<std::size_t> widths;
  for (const Var& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size()) dim_error("concat", "rank mismatch");
    for (std::size_t d = 0; d < s.size(); ++d)
      if (d != axis && s[d] != first[d])
        dim_error("concat", shape_string(s) + " vs " + shape_string(first));
    out_shape[axis] += s[axis];
    widths.push_back(s[axis]);
  }
  const std::size_t outer = outer_size(first, axis);
  const std::size_t inner = inner_size(first, axis);
  const std::size_t row = out_shape[axis] * inner;
  Tensor out(out_shape);
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const Tensor& src = parts[p].value();
    const std::size_t chunk = widths[p] * inner;
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(src.ptr() + o * chunk, chunk, out.ptr() + o * row + offset);
    offset += chunk;
  }
  return parts[0].tape().record(
      OpKind::Concat, parts, std::move(out), [widths, outer, inner, row](const BackwardArgs& args) {
        std::size_t offset = 0;
        for (std::size_t p = 0; p < widths.size(); ++p) {
          const std::size_t chunk = widths[p] * inner;
          if (Tensor* gp = args.grads[p]) {
            for (std::size_t o = 0; o < outer; ++o) {
              const double* src = args.grad_out.ptr() + o * row + offset;
              double* dst = gp->ptr() + o * chunk;
              for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
            }
          }
          offset += chunk;
        }
      });
}

Var concat(std::initializer_list<Var> parts, std::size_t axis) {
  return concat(std::span<const Var>(parts.begin(), parts.size()), axis);
}

Var mean(Var x, std::size_t axis, bool order_invariant) {
  const Shape& s = x.shape();
  if (axis >= s.size()) dim_error("mean", "axis out of range for " + shape_string(s));
  const std::size_t outer = outer_size(s, axis), n = s[axis], inner = inner_size(s, axis);
  if (n == 0) dim_error("mean", "empty axis");
  Shape out_shape = s;
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  Tensor out(out_shape);
  const Tensor& in = x.value();
  const double inv = 1.0 / static_cast<double>(n);
  if (order_invariant) {
    std::vector<double> column(n);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < inner; ++i) {
        for (std::size_t j = 0; j < n; ++j) column[j] = in[(o * n + j) * inner + i];
        std::sort(column.begin(), column.end());
        double acc = 0.0;
        for (double v : column) acc += v;
        out[o * inner + i] = acc;
      }
  } else {
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += in[(o * n + j) * inner + i];
  }
  out *= inv;
  Var inputs[] = {x};
  return x.tape().record(OpKind::Mean, inputs, std::move(out),
                         [outer, n, inner, inv](const BackwardArgs& args) {
                           if (!args.grads[0]) return;
                           Tensor& gx = *args.grads[0];
                           for (std::size_t o = 0; o < outer; ++o)
                             for (std::size_t j = 0; j < n; ++j)
                               for (std::size_t i = 0; i < inner; ++i)
                                 gx[(o * n + j) * inner + i] += inv * args.grad_out[o * inner + i];
                         });
}

Var max(Var x, std::size_t axis) {
  const Shape& s = x.shape();
  if (axis >= s.size()) dim_error("max", "axis out of range for " + shape_string(s));
  const std::size_t outer = outer_size(s, axis), n = s[axis], inner = inner_size(s, axis);
  if (n == 0) dim_error("max", "empty axis");
  Shape out_shape = s;
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  Tensor out(out_shape);
  std::vector<std::size_t> arg(out.numel());
  const Tensor& in = x.value();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      std::size_t best = (o * n) * inner + i;
      for (std::size_t j = 1; j < n; ++j) {
        const std::size_t idx = (o * n + j) * inner + i;
        if (in[idx] > in[best]) best = idx;
      }
      out[o * inner + i] = in[best];
      arg[o * inner + i] = best;
    }
  Var inputs[] = {x};
  return x.tape().record(OpKind::Max, inputs, std::move(out), [arg](const BackwardArgs& args) {
    if (!args.grads[0]) return;
    for (std::size_t i = 0; i < arg.size(); ++i) (*args.grads[0])[arg[i]] += args.grad_out[i];
  });
}

Var sum(Var x) {
  const Tensor& in = x.value();
  double total = 0.0;
  for (double v : in.data()) total += v;
  Var inputs[] = {x};
  return x.tape().record(OpKind::Sum, inputs, Tensor::scalar(total), [](const BackwardArgs& args) {
    if (!args.grads[0]) return;
    const double g = args.grad_out[0];
    for (double& v : args.grads[0]->data()) v += g;
  });
}

Var selu(Var x) {
  return unary(
      x, OpKind::Selu,
      [](double v) { return v > 0.0 ? kSeluLambda * v : kSeluLambda * kSeluAlpha * std::expm1(v); },
      [](double v, double y) { return v > 0.0 ? kSeluLambda : y + kSeluLambda * kSeluAlpha; });
}

Var sigmoid(Var x) {
  return unary(x, OpKind::Sigmoid, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Var tanh(Var x) {
  return unary(
      x, OpKind::Tanh, [](double v) { return std::tanh(v); },
      [](double, double y) { return 1.0 - y * y; });
}

Var leaky_relu(Var x, double slope) {
  return unary(
      x, OpKind::LeakyRelu, [slope](double v) { return v > 0.0 ? v : slope * v; },
      [slope](double v, double) { return v > 0.0 ? 1.0 : slope; });
}

Var log(Var x) {
  for (double v : x.value().data())
    if (!(v > 0.0)) fail(ErrorKind::Numeric, "numerics", "log of non-positive value");
  return unary(
      x, OpKind::Log, [](double v) { return std::log(v); },
      [](double v, double) { return 1.0 / v; });
}

Var softmax(Var x) {
  const Tensor& in = x.value();
  const std::size_t n = last_dim(in.shape(), "softmax");
  const std::size_t rows = n ? in.numel() / n : 0;
  Tensor out(in.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xi = in.ptr() + r * n;
    double* yi = out.ptr() + r * n;
    const double mx = *std::max_element(xi, xi + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (yi[j] = std::exp(xi[j] - mx));
    for (std::size_t j = 0; j < n; ++j) yi[j] /= z;
  }
  Var inputs[] = {x};
  return x.tape().record(OpKind::Softmax, inputs, std::move(out), [rows, n](const BackwardArgs& args) {
    if (!args.grads[0]) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = args.out.ptr() + r * n;
      const double* g = args.grad_out.ptr() + r * n;
      double* gx = args.grads[0]->ptr() + r * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += g[j] * y[j];
      for (std::size_t j = 0; j < n; ++j) gx[j] += y[j] * (g[j] - dot);
    }
  });
}

Var log_softmax(Var x) {
  const Tensor& in = x.value();
  const std::size_t n = last_dim(in.shape(), "log_softmax");
  const std::size_t rows = n ? in.numel() / n : 0;
  Tensor out(in.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xi = in.ptr() + r * n;
    double* yi = out.ptr() + r * n;
    const double mx = *std::max_element(xi, xi + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(xi[j] - mx);
    const double lz = mx + std::log(z);
    for (std::size_t j = 0; j < n; ++j) yi[j] = xi[j] - lz;
  }
  Var inputs[] = {x};
  return x.tape().record(OpKind::LogSoftmax, inputs, std::move(out), [rows, n](const BackwardArgs& args) {
    if (!args.grads[0]) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = args.out.ptr() + r * n;
      const double* g = args.grad_out.ptr() + r * n;
      double* gx = args.grads[0]->ptr() + r * n;
      double gsum = 0.0;
      for (std::size_t j = 0; j < n; ++j) gsum += g[j];
      for (std::size_t j = 0; j < n; ++j) gx[j] += g[j] - std::exp(y[j]) * gsum;
    }
  });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  const Tensor& in = x.value();
  const std::size_t n = last_dim(in.shape(), "layer_norm");
  if (gamma.shape() != Shape{n} || beta.shape() != Shape{n}) {
    dim_error("layer_norm", "affine parameters must have shape [" + std::to_string(n) + "]");
  }
  const std::size_t rows = in.numel() / n;
  const Tensor& g = gamma.value();
  const Tensor& b = beta.value();
  Tensor out(in.shape());
  std::vector<double> mu(rows), rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xi = in.ptr() + r * n;
    double m = 0.0;
    for (std::size_t j = 0; j < n; ++j) m += xi[j];
    m /= static_cast<double>(n);
    double v = 0.0;
    for (std::size_t j = 0; j < n; ++j) v += (xi[j] - m) * (xi[j] - m);
    v /= static_cast<double>(n);
    mu[r] = m;
    rstd[r] = 1.0 / std::sqrt(v + eps);
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = (xi[j] - m) * rstd[r] * g[j] + b[j];
  }
  Var inputs[] = {x, gamma, beta};
  return x.tape().record(
      OpKind::LayerNorm, inputs, std::move(out),
      [rows, n, mu = std::move(mu), rstd = std::move(rstd)](const BackwardArgs& args) {
        const Tensor& X = *args.inputs[0];
        const Tensor& G = *args.inputs[1];
        std::vector<double> xhat(n), gxhat(n);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* go = args.grad_out.ptr() + r * n;
          double mean_g = 0.0, mean_gx = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            xhat[j] = (X[r * n + j] - mu[r]) * rstd[r];
            gxhat[j] = go[j] * G[j];
            mean_g += gxhat[j];
            mean_gx += gxhat[j] * xhat[j];
            if (args.grads[1]) (*args.grads[1])[j] += go[j] * xhat[j];
            if (args.grads[2]) (*args.grads[2])[j] += go[j];
          }
          if (!args.grads[0]) continue;
          mean_g /= static_cast<double>(n);
          mean_gx /= static_cast<double>(n);
          double* gx = args.grads[0]->ptr() + r * n;
          for (std::size_t j = 0; j < n; ++j)
            gx[j] += rstd[r] * (gxhat[j] - mean_g - xhat[j] * mean_gx);
        }
      });
}

Var batch_norm(Var x, Var gamma, Var beta, BatchNormStats* stats, bool training) {
  const Tensor& in = x.value();
  if (in.rank() != 2) dim_error("batch_norm", "expects [batch, features], got " + shape_string(in.shape()));
  const std::size_t batch = in.dim(0), features = in.dim(1);
  if (gamma.shape() != Shape{features} || beta.shape() != Shape{features}) {
    dim_error("batch_norm", "affine parameters must have shape [" + std::to_string(features) + "]");
  }
  const double eps = stats ? stats->eps : 1e-5;
  if (training && batch < 2) {
    fail(ErrorKind::Contract, "numerics", "batch_norm in training mode needs a batch of at least 2");
  }
  if (!training) {
    if (!stats) fail(ErrorKind::Contract, "numerics", "batch_norm inference needs running statistics");
    if (stats->running_mean.numel() != features || stats->running_var.numel() != features)
      dim_error("batch_norm", "running statistics do not match feature count");
  }
  const Tensor& g = gamma.value();
  const Tensor& b = beta.value();
  std::vector<double> mu(features), rstd(features);
  for (std::size_t f = 0; f < features; ++f) {
    if (training) {
      double m = 0.0;
      for (std::size_t i = 0; i < batch; ++i) m += in.at(i, f);
      m /= static_cast<double>(batch);
      double v = 0.0;
      for (std::size_t i = 0; i < batch; ++i) v += (in.at(i, f) - m) * (in.at(i, f) - m);
      v /= static_cast<double>(batch);
      mu[f] = m;
      rstd[f] = 1.0 / std::sqrt(v + eps);
      if (stats) {
        const double unbiased = v * static_cast<double>(batch) / static_cast<double>(batch - 1);
        stats->running_mean[f] = (1.0 - stats->momentum) * stats->running_mean[f] + stats->momentum * m;
        stats->running_var[f] = (1.0 - stats->momentum) * stats->running_var[f] + stats->momentum * unbiased;
      }
    } else {
      mu[f] = stats->running_mean[f];
      rstd[f] = 1.0 / std::sqrt(stats->running_var[f] + eps);
    }
  }
  Tensor out(in.shape());
  for (std::size_t i = 0; i < batch; ++i)
    for (std::size_t f = 0; f < features; ++f)
      out.at(i, f) = (in.at(i, f) - mu[f]) * rstd[f] * g[f] + b[f];
  Var inputs[] = {x, gamma, beta};
  return x.tape().record(
      OpKind::BatchNorm, inputs, std::move(out),
      [batch, features, training, mu = std::move(mu), rstd = std::move(rstd)](const BackwardArgs& args) {
        const Tensor& X = *args.inputs[0];
        const Tensor& G = *args.inputs[1];
        const Tensor& go = args.grad_out;
        const double nb = static_cast<double>(batch);
        for (std::size_t f = 0; f < features; ++f) {
          double mean_g = 0.0, mean_gx = 0.0;
          for (std::size_t i = 0; i < batch; ++i) {
            const double xhat = (X.at(i, f) - mu[f]) * rstd[f];
            const double gout = go.at(i, f);
            if (args.grads[1]) args.grads[1]->data()[f] += gout * xhat;
            if (args.grads[2]) args.grads[2]->data()[f] += gout;
            mean_g += gout * G[f];
            mean_gx += gout * G[f] * xhat;
          }
          if (!args.grads[0]) continue;
          mean_g /= nb;
          mean_gx /= nb;
          Tensor& gx = *args.grads[0];
          for (std::size_t i = 0; i < batch; ++i) {
            const double gxhat = go.at(i, f) * G[f];
            if (training) {
              const double xhat = (X.at(i, f) - mu[f]) * rstd[f];
              gx.at(i, f) += rstd[f] * (gxhat - mean_g - xhat * mean_gx);
            } else {
              gx.at(i, f) += rstd[f] * gxhat;
            }
          }
        }
      });
}

Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  Var inputs[] = {x};
  return x.tape().record(OpKind::Reshape, inputs, std::move(out), [](const BackwardArgs& args) {
    if (!args.grads[0]) return;
    double* dst = args.grads[0]->ptr();
    for (std::size_t i = 0; i < args.grad_out.numel(); ++i) dst[i] += args.grad_out[i];
  });
}

Var permute(Var x, std::vector<std::size_t> perm) {
  const Shape& s = x.shape();
  if (perm.size() != s.size()) dim_error("permute", "permutation rank mismatch");
  std::vector<bool> seen(s.size(), false);
  for (std::size_t p : perm) {
    if (p >= s.size() || seen[p]) dim_error("permute", "invalid permutation");
    seen[p] = true;
  }
  const std::size_t rank = s.size();
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t d = rank; d-- > 1;) in_strides[d - 1] = in_strides[d] * s[d];
  Shape out_shape(rank);
  std::vector<std::size_t> strides(rank);
  for (std::size_t d = 0; d < rank; ++d) {
    out_shape[d] = s[perm[d]];
    strides[d] = in_strides[perm[d]];
  }
  // source offset of each output element
  const std::size_t total = x.value().numel();
  std::vector<std::size_t> source(total);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t offset = 0;
  for (std::size_t i = 0; i < total; ++i) {
    source[i] = offset;
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      offset += strides[d];
      if (idx[d] < out_shape[d]) break;
      offset -= strides[d] * out_shape[d];
      idx[d] = 0;
    }
  }
  Tensor out(out_shape);
  const Tensor& in = x.value();
  for (std::size_t i = 0; i < total; ++i) out[i] = in[source[i]];
  Var inputs[] = {x};
  return x.tape().record(OpKind::Permute, inputs, std::move(out),
                         [source = std::move(source)](const BackwardArgs& args) {
                           if (!args.grads[0]) return;
                           Tensor& gx = *args.grads[0];
                           for (std::size_t i = 0; i < source.size(); ++i)
                             gx[source[i]] += args.grad_out[i];
                         });
}

Var slice(Var x, std::size_t axis, std::size_t start, std::size_t length) {
  const Shape& s = x.shape();
  if (axis >= s.size() || start + length > s[axis]) {
    dim_error("slice", "range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                           ") on axis " + std::to_string(axis) + " of " + shape_string(s));
  }
  const std::size_t outer = outer_size(s, axis), n = s[axis], inner = inner_size(s, axis);
  Shape out_shape = s;
  out_shape[axis] = length;
  Tensor out(out_shape);
  const Tensor& in = x.value();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(in.ptr() + (o * n + start) * inner, length * inner, out.ptr() + o * length * inner);
  Var inputs[] = {x};
  return x.tape().record(OpKind::Slice, inputs, std::move(out),
                         [outer, n, inner, start, length](const BackwardArgs& args) {
                           if (!args.grads[0]) return;
                           for (std::size_t o = 0; o < outer; ++o) {
                             const double* src = args.grad_out.ptr() + o * length * inner;
                             double* dst = args.grads[0]->ptr() + (o * n + start) * inner;
                             for (std::size_t i = 0; i < length * inner; ++i) dst[i] += src[i];
                           }
                         });
}

Var gather(Var x, std::vector<std::size_t> indices) {
  const Tensor& in = x.value();
  Tensor out({indices.size()});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= in.numel()) dim_error("gather", "index out of range");
    out[i] = in[indices[i]];
  }
  Var inputs[] = {x};
  return x.tape().record(OpKind::Gather, inputs, std::move(out),
                         [indices = std::move(indices)](const BackwardArgs& args) {
                           if (!args.grads[0]) return;
                           for (std::size_t i = 0; i < indices.size(); ++i)
                             (*args.grads[0])[indices[i]] += args.grad_out[i];
                         });
}

Var scatter(Var x, std::vector<std::size_t> indices, Shape shape) {
  const Tensor& in = x.value();
  if (in.numel() != indices.size()) dim_error("scatter", "one index per element required");
  Tensor out(std::move(shape));
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= out.numel()) dim_error("scatter", "index out of range");
    out[indices[i]] += in[i];
  }
  Var inputs[] = {x};
  return x.tape().record(OpKind::Scatter, inputs, std::move(out),
                         [indices = std::move(indices)](const BackwardArgs& args) {
                           if (!args.grads[0]) return;
                           for (std::size_t i = 0; i < indices.size(); ++i)
                             (*args.grads[0])[i] += args.grad_out[indices[i]];
                         });
}

}  // namespace ops

Var forward_op(OpKind kind, std::span<const Var> inputs, const OpAttributes& attrs) {
  auto need = [&](std::size_t n) {
    if (inputs.size() != n) {
      fail(ErrorKind::Contract, "numerics",
           std::string(to_string(kind)) + " takes " + std::to_string(n) + " inputs");
    }
  };
  switch (kind) {
    case OpKind::MatMul: need(2); return ops::matmul(inputs[0], inputs[1], attrs.transpose_b);
    case OpKind::Add: need(2); return ops::add(inputs[0], inputs[1]);
    case OpKind::Scale: need(1); return ops::scale(inputs[0], attrs.factor);
    case OpKind::Hadamard: need(2); return ops::hadamard(inputs[0], inputs[1]);
    case OpKind::Concat: return ops::concat(inputs, attrs.axis);
    case OpKind::Mean: need(1); return ops::mean(inputs[0], attrs.axis);
    case OpKind::Max: need(1); return ops::max(inputs[0], attrs.axis);
    case OpKind::Sum: need(1); return ops::sum(inputs[0]);
    case OpKind::Selu: need(1); return ops::selu(inputs[0]);
    case OpKind::Sigmoid: need(1); return ops::sigmoid(inputs[0]);
    case OpKind::Tanh: need(1); return ops::tanh(inputs[0]);
    case OpKind::LeakyRelu: need(1); return ops::leaky_relu(inputs[0], attrs.factor);
    case OpKind::Log: need(1); return ops::log(inputs[0]);
    case OpKind::Softmax: need(1); return ops::softmax(inputs[0]);
    case OpKind::LogSoftmax: need(1); return ops::log_softmax(inputs[0]);
    case OpKind::LayerNorm: need(3); return ops::layer_norm(inputs[0], inputs[1], inputs[2]);
    case OpKind::BatchNorm:
      need(3);
      return ops::batch_norm(inputs[0], inputs[1], inputs[2], attrs.stats, attrs.training);
    case OpKind::Reshape: need(1); return ops::reshape(inputs[0], attrs.shape);
    case OpKind::Permute: need(1); return ops::permute(inputs[0], attrs.indices);
    case OpKind::Slice: need(1); return ops::slice(inputs[0], attrs.axis, attrs.indices.at(0), attrs.indices.at(1));
    case OpKind::Gather: need(1); return ops::gather(inputs[0], attrs.indices);
    case OpKind::Scatter: need(1); return ops::scatter(inputs[0], attrs.indices, attrs.shape);
    case OpKind::Constant:
    case OpKind::Parameter: break;
  }
  fail(ErrorKind::Contract, "numerics", std::string("no kernel for ") + std::string(to_string(kind)));
}

}  // namespace neurofuse
