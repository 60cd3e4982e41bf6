#include "neurofuse/parameters.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "neurofuse/binary_io.hpp"
#include "neurofuse/error.hpp"

namespace neurofuse {

std::size_t ParameterSet::add_weight(std::string group, std::string name, Shape shape,
                                     std::size_t fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
  for (double& v : t.data()) v = rng.uniform(-bound, bound);
  return add_tensor(std::move(group), std::move(name), std::move(t));
}

std::size_t ParameterSet::add_zeros(std::string group, std::string name, Shape shape) {
  return add_tensor(std::move(group), std::move(name), Tensor(std::move(shape)));
}

std::size_t ParameterSet::add_tensor(std::string group, std::string name, Tensor value, bool trainable) {
  entries_.push_back(Entry{std::move(group), std::move(name), std::move(value), trainable});
  return entries_.size() - 1;
}

std::size_t ParameterSet::index_of(const std::string& group, const std::string& name) const {
  for (std::size_t i = 0; i < entries_.size(); ++i)
    if (entries_[i].group == group && entries_[i].name == name) return i;
  fail(ErrorKind::Contract, "numerics", "no parameter " + group + "." + name);
}

std::map<std::string, std::size_t> ParameterSet::census() const {
  std::map<std::string, std::size_t> counts;
  std::size_t total = 0;
  for (const Entry& e : entries_) {
    if (!e.trainable) continue;
    counts[e.group] += e.value.numel();
    total += e.value.numel();
  }
  counts["total"] = total;
  return counts;
}

std::size_t ParameterSet::trainable_count() const { return census().at("total"); }

std::vector<Var> ParameterSet::bind(Tape& tape) const {
  std::vector<Var> vars;
  vars.reserve(entries_.size());
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    vars.push_back(entries_[i].trainable ? tape.parameter(entries_[i].value, i)
                                         : tape.constant(entries_[i].value));
  }
  return vars;
}

std::vector<Var> ParameterSet::bind_frozen(Tape& tape) const {
  std::vector<Var> vars;
  vars.reserve(entries_.size());
  for (const auto& e : entries_) vars.push_back(tape.constant(e.value));
  return vars;
}

std::uint64_t ParameterSet::checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* data, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const Entry& e : entries_) {
    mix(e.group.data(), e.group.size());
    mix(e.name.data(), e.name.size());
    for (std::size_t d : e.value.shape()) mix(&d, sizeof d);
    for (double v : e.value.data()) {
      const auto bits = std::bit_cast<std::uint64_t>(v);
      mix(&bits, sizeof bits);
    }
  }
  return h;
}

AdamState make_adam_state(const ParameterSet& params) {
  AdamState state;
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.first_moment.emplace_back(params.value(i).shape());
    state.second_moment.emplace_back(params.value(i).shape());
  }
  return state;
}

void adam_update(std::span<Tensor> params, std::span<const Tensor> grads, AdamState& state,
                 const AdamHyper& hyper) {
  if (grads.size() != params.size() || state.first_moment.size() != params.size() ||
      state.second_moment.size() != params.size()) {
    fail(ErrorKind::Dimension, "numerics", "adam: parameter, gradient and moment counts differ");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].shape() != params[i].shape() || state.first_moment[i].shape() != params[i].shape() ||
        state.second_moment[i].shape() != params[i].shape()) {
      fail(ErrorKind::Dimension, "numerics",
           "adam: shape mismatch at parameter " + std::to_string(i) + " " +
               shape_string(params[i].shape()) + " vs gradient " + shape_string(grads[i].shape()));
    }
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(hyper.beta1, t);
  const double c2 = 1.0 - std::pow(hyper.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i];
    Tensor& m = state.first_moment[i];
    Tensor& v = state.second_moment[i];
    const Tensor& g = grads[i];
    for (std::size_t j = 0; j < p.numel(); ++j) {
      m[j] = hyper.beta1 * m[j] + (1.0 - hyper.beta1) * g[j];
      v[j] = hyper.beta2 * v[j] + (1.0 - hyper.beta2) * g[j] * g[j];
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      p[j] -= hyper.lr * mhat / (std::sqrt(vhat) + hyper.eps);
    }
  }
}

void adam_update(ParameterSet& params, const Gradients& grads, AdamState& state, const AdamHyper& hyper) {
  if (state.first_moment.size() != params.size()) {
    fail(ErrorKind::Dimension, "numerics", "adam: state does not match parameter set");
  }
  std::vector<Tensor> values;
  std::vector<Tensor> dense;
  std::vector<std::size_t> index;
  AdamState sub;
  sub.step = state.step;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params.entry(i).trainable) continue;
    index.push_back(i);
    values.push_back(std::move(params.value(i)));
    auto it = grads.find(i);
    dense.push_back(it != grads.end() ? it->second : Tensor(values.back().shape()));
    sub.first_moment.push_back(std::move(state.first_moment[i]));
    sub.second_moment.push_back(std::move(state.second_moment[i]));
  }
  auto restore = [&] {
    for (std::size_t k = 0; k < index.size(); ++k) {
      params.value(index[k]) = std::move(values[k]);
      state.first_moment[index[k]] = std::move(sub.first_moment[k]);
      state.second_moment[index[k]] = std::move(sub.second_moment[k]);
    }
  };
  try {
    adam_update(values, dense, sub, hyper);
  } catch (...) {
    restore();
    throw;
  }
  restore();
  state.step = sub.step;
}

void save_checkpoint(const ParameterSet& params, const std::filesystem::path& path) {
  BinaryWriter out(path);
  out.bytes("NFCK", 4);
  out.u32(1);
  out.u32(static_cast<std::uint32_t>(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& e = params.entry(i);
    out.string(e.group);
    out.string(e.name);
    out.u8(e.trainable ? 1 : 0);
    out.u32(static_cast<std::uint32_t>(e.value.rank()));
    for (std::size_t d : e.value.shape()) out.u64(d);
    for (double v : e.value.data()) out.f64(v);
  }
  out.finish();
}

ParameterSet load_checkpoint(const std::filesystem::path& path) {
  BinaryReader in(path);
  char magic[4];
  in.bytes(magic, 4);
  if (std::memcmp(magic, "NFCK", 4) != 0) fail(ErrorKind::Io, "numerics", "not a checkpoint: " + path.string());
  const std::uint32_t version = in.u32();
  if (version != 1) fail(ErrorKind::Io, "numerics", "unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t count = in.u32();
  ParameterSet params;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string group = in.string();
    std::string name = in.string();
    const bool trainable = in.u8() != 0;
    const std::uint32_t rank = in.u32();
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(in.u64());
    Tensor value(shape);
    for (double& v : value.data()) v = in.f64();
    params.add_tensor(std::move(group), std::move(name), std::move(value), trainable);
  }
  in.expect_end();
  return params;
}

void load_checkpoint_into(ParameterSet& params, const std::filesystem::path& path) {
  ParameterSet loaded = load_checkpoint(path);
  if (loaded.size() != params.size()) {
    fail(ErrorKind::Io, "numerics", "checkpoint has " + std::to_string(loaded.size()) +
                                        " tensors, model expects " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < loaded.size(); ++i) {
    const auto& e = loaded.entry(i);
    const std::size_t j = params.index_of(e.group, e.name);
    if (params.value(j).shape() != e.value.shape()) {
      fail(ErrorKind::Io, "numerics", "checkpoint shape mismatch for " + e.group + "." + e.name);
    }
    params.value(j) = e.value;
  }
}

}  // namespace neurofuse
