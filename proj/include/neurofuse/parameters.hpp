#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "neurofuse/rng.hpp"
#include "neurofuse/tape.hpp"
#include "neurofuse/tensor.hpp"

namespace neurofuse {

/// Ordered collection of named tensors grouped by model component. Buffers
/// (running statistics) live here too but are excluded from training and
/// from the trainable census.
class ParameterSet {
 public:
  struct Entry {
    std::string group;
    std::string name;
    Tensor value;
    bool trainable = true;
  };

  /// Adds a weight drawn uniform(-sqrt(1/fan_in), +sqrt(1/fan_in)).
  std::size_t add_weight(std::string group, std::string name, Shape shape, std::size_t fan_in, Rng& rng);
  std::size_t add_zeros(std::string group, std::string name, Shape shape);
  std::size_t add_tensor(std::string group, std::string name, Tensor value, bool trainable = true);

  std::size_t size() const noexcept { return entries_.size(); }
  const Entry& entry(std::size_t i) const { return entries_.at(i); }
  Tensor& value(std::size_t i) { return entries_.at(i).value; }
  const Tensor& value(std::size_t i) const { return entries_.at(i).value; }
  std::size_t index_of(const std::string& group, const std::string& name) const;

  /// Trainable element counts per group plus a "total" entry.
  std::map<std::string, std::size_t> census() const;
  std::size_t trainable_count() const;

  /// Registers every tensor on the tape. Trainable entries become parameter
  /// nodes keyed by their index; buffers become constants.
  std::vector<Var> bind(Tape& tape) const;
  /// Same layout with every entry a constant (no gradients flow back).
  std::vector<Var> bind_frozen(Tape& tape) const;

  /// FNV-1a over names, shapes and raw value bits.
  std::uint64_t checksum() const;

 private:
  std::vector<Entry> entries_;
};

struct AdamHyper {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::uint64_t step = 0;
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;
};

/// Zeroed moments mirroring the parameter shapes.
AdamState make_adam_state(const ParameterSet& params);

/// One bias-corrected Adam step over the trainable entries. Parameters with
/// no gradient entry are treated as having a zero gradient.
void adam_update(ParameterSet& params, const Gradients& grads, AdamState& state, const AdamHyper& hyper);

/// Same update on bare tensors; the building block of the method above.
void adam_update(std::span<Tensor> params, std::span<const Tensor> grads, AdamState& state,
                 const AdamHyper& hyper);

/// Binary checkpoint, little-endian throughout:
///   magic "NFCK", u32 version (=1), u32 entry count, then per entry:
///   u32 group length + bytes, u32 name length + bytes, u8 trainable,
///   u32 rank, u64 dims[rank], f64 values[product(dims)].
void save_checkpoint(const ParameterSet& params, const std::filesystem::path& path);
ParameterSet load_checkpoint(const std::filesystem::path& path);
/// Loads values into an existing set, matching by (group, name) and shape.
void load_checkpoint_into(ParameterSet& params, const std::filesystem::path& path);

}  // namespace neurofuse
