#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "neurofuse/parameters.hpp"
#include "neurofuse/tape.hpp"

namespace neurofuse {

struct AtlasRegion {
  std::string id;
  double x = 0.0, y = 0.0, z = 0.0;
  std::string system;
};

struct AtlasMetadata {
  std::vector<AtlasRegion> regions;
  /// Distinct system labels; the one-hot column order of the node features.
  std::vector<std::string> vocabulary;

  std::size_t size() const noexcept { return regions.size(); }
  std::size_t feature_count() const noexcept { return 3 + vocabulary.size(); }
};

/// Builds an atlas whose vocabulary is the sorted set of region systems.
AtlasMetadata make_atlas(std::vector<AtlasRegion> regions);

/// CSV with header `region_id,x,y,z,system`.
AtlasMetadata read_atlas_csv(const std::filesystem::path& path);
void write_atlas_csv(const AtlasMetadata& atlas, const std::filesystem::path& path);

/// H0: [R, 3 + |vocabulary|]. Coordinates are standardized per axis over the
/// regions (population sd; a constant axis is only centered), followed by the
/// one-hot system columns.
Tensor node_feature_matrix(const AtlasMetadata& atlas);

/// Per-row count of nonzero entries (the degree used by the propagation rule).
Tensor degree_counts(const Tensor& adjacency);

/// D^-1/2 A D^-1/2 with D from degree_counts. Accepts [R,R] or a stack
/// [G,R,R]. Errors on a row without any nonzero entry.
Tensor normalized_adjacency(const Tensor& adjacency);

/// Additive attention mask for the GAT backbone: 0 on nonzero entries of A,
/// -1e30 elsewhere. Same shapes as normalized_adjacency.
Tensor attention_support(const Tensor& adjacency);

/// SELU(A_hat H W) given an already normalized A_hat. H may be [R,d] or
/// [G,R,d]; A_hat [R,R] or [G,R,R].
Var gcn_layer(Var h, Var a_hat, Var w);

/// Tensor form of one GCN layer on a raw adjacency (normalizes internally).
Tensor gcn_layer(const Tensor& h, const Tensor& adjacency, const Tensor& w);

enum class Backbone { Gcn, Gat };
enum class Readout { Mean, Max };

struct EncoderConfig {
  Backbone backbone = Backbone::Gcn;
  Readout readout = Readout::Mean;
  std::size_t hidden = 128;
};

/// Indices of the encoder tensors inside a ParameterSet (group "encoder").
struct EncoderHandles {
  std::size_t w1 = 0, w2 = 0, proj_weight = 0, proj_bias = 0;
  std::size_t att1_src = 0, att1_dst = 0, att2_src = 0, att2_dst = 0;
};

EncoderHandles add_encoder_parameters(ParameterSet& params, std::size_t feature_count,
                                      const EncoderConfig& config, Rng& rng);

/// Graph-side inputs for a batch of G snapshots over the same R regions.
struct GraphBatch {
  Var propagation;  // GCN: normalized adjacency; GAT: additive support mask. [G,R,R]
  std::size_t count = 0;
};

/// Optional explanation masks. `edges` multiplies the propagation weights
/// ([R,R], shared by every graph); `features` multiplies H0 columns ([F]).
struct EncoderMasks {
  const Var* edges = nullptr;
  const Var* features = nullptr;
};

/// Two graph layers, node-wise projection (linear + bias, SELU), then the
/// readout over nodes. Returns [G, hidden].
Var encode_graphs(const EncoderConfig& config, const EncoderHandles& handles, std::span<const Var> bound,
                  Var h0, const GraphBatch& graphs, const EncoderMasks& masks = {});

std::string to_string(Backbone backbone);
std::string to_string(Readout readout);

}  // namespace neurofuse
