#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "neurofuse/gradcheck.hpp"
#include "neurofuse/graph_encoder.hpp"
#include "neurofuse/ops.hpp"
#include "neurofuse/parameters.hpp"

namespace neurofuse {

enum class ModelKind { GnnTf, GnnTfCausal, Gclstm, GclstmF, StaticGcn, StaticGat };
enum class Fusion { TfEarly, TfCausal, Late, None };

std::string to_string(ModelKind kind);
std::string to_string(Fusion fusion);
ModelKind parse_model_kind(const std::string& s);
Fusion parse_fusion(const std::string& s);

struct ModelConfig {
  ModelKind model = ModelKind::GnnTf;
  bool use_tabular = true;
  bool dynamic = true;
  /// Only meaningful for gnn-tf; the other kinds fix their own fusion.
  Fusion fusion = Fusion::TfEarly;
  EncoderConfig encoder;
  std::size_t layers = 3;
  std::size_t heads = 4;
  /// Feed-forward width inside each transformer layer.
  std::size_t ffn = 512;
  std::size_t covariates = 2;

  /// Resolves model-implied settings and inconsistent flag combinations.
  /// Returns human-readable warnings for every adjustment.
  std::vector<std::string> normalize();
  std::size_t hidden() const { return encoder.hidden; }
  /// Head widths halve twice: hidden -> hidden/2 -> hidden/4 -> 2.
  std::size_t head_in() const;
};

/// Inputs for a batch of B subjects with S graphs each (S = 1 when static).
struct ModelBatch {
  Tensor propagation;  // [B*S, R, R], subject-major
  Tensor covariates;   // [B, covariates]
  std::size_t subjects = 0;
  std::size_t windows = 0;
};

/// One architecture variant and its parameters. Parameter groups:
/// encoder, tabular, fusion, lstm, head.
class FusionModel {
 public:
  FusionModel(ModelConfig config, std::size_t feature_count, std::size_t windows, std::uint64_t seed);

  const ModelConfig& config() const noexcept { return config_; }
  std::size_t windows() const noexcept { return windows_; }
  /// Sequence length seen by the transformer (0 for non-transformer kinds).
  std::size_t sequence_length() const noexcept { return sequence_length_; }
  ParameterSet& params() noexcept { return params_; }
  const ParameterSet& params() const noexcept { return params_; }

  /// Log-probabilities [B, 2]. In training mode batch-norm uses batch
  /// statistics and folds them into `running` when given; in inference mode
  /// it reads the stored running statistics.
  Var forward(std::span<const Var> bound, Var h0, const ModelBatch& batch, bool training,
              BatchNormStats* running = nullptr, const EncoderMasks& masks = {}) const;

  /// Fused representation before the head, [B, head_in]. Exposed for tests.
  Var representation(std::span<const Var> bound, Var h0, const ModelBatch& batch, bool training,
                     BatchNormStats* running = nullptr, const EncoderMasks& masks = {}) const;

  /// Per-layer transformer outputs [B, L, hidden] for a given token tensor;
  /// used to probe the causal mask.
  std::vector<Var> transformer_layers(std::span<const Var> bound, Var tokens) const;

  /// Token sequence [B, L, hidden] as fed to the transformer (positional
  /// embeddings not yet added).
  Var tokens(std::span<const Var> bound, Var graph_embeddings, const Var* tabular) const;

  Var tabular_embed(std::span<const Var> bound, Var covariates, bool training, BatchNormStats* running) const;
  Var head(std::span<const Var> bound, Var z) const;
  Var encode(std::span<const Var> bound, Var h0, const ModelBatch& batch, const EncoderMasks& masks) const;

  /// Running batch-norm statistics held as buffers in a parameter set with
  /// this model's layout (the model's own set by default).
  BatchNormStats batch_norm_stats() const { return batch_norm_stats(params_); }
  BatchNormStats batch_norm_stats(const ParameterSet& params) const;
  void store_batch_norm_stats(const BatchNormStats& stats) { store_batch_norm_stats(params_, stats); }
  void store_batch_norm_stats(ParameterSet& params, const BatchNormStats& stats) const;

  bool has_tabular() const noexcept { return has_tabular_; }
  bool uses_transformer() const noexcept;
  /// Index of the token whose final state is read out.
  std::size_t read_position() const noexcept;

 private:
  struct LayerHandles {
    std::size_t wq, bq, wk, bk, wv, bv, wo, bo, ln1_g, ln1_b, ff_w1, ff_b1, ff_w2, ff_b2, ln2_g, ln2_b;
  };

  Var attention(std::span<const Var> bound, const LayerHandles& l, Var x) const;
  Var run_transformer(std::span<const Var> bound, Var tokens) const;
  Var lstm(std::span<const Var> bound, Var sequence) const;
  Var linear(std::span<const Var> bound, Var x, std::size_t w, std::size_t b) const;

  ModelConfig config_;
  std::size_t windows_;
  std::size_t sequence_length_ = 0;
  bool has_tabular_ = false;
  ParameterSet params_;
  EncoderHandles encoder_;
  std::size_t bn_gamma_ = 0, bn_beta_ = 0, bn_mean_ = 0, bn_var_ = 0, tab_w_ = 0, tab_b_ = 0;
  std::size_t cls_ = 0, pos_ = 0;
  std::vector<LayerHandles> layers_;
  Tensor causal_mask_;
  std::size_t lstm_wx_ = 0, lstm_wh_ = 0, lstm_b_ = 0;
  std::size_t head_w1_ = 0, head_b1_ = 0, head_w2_ = 0, head_b2_ = 0, head_w3_ = 0, head_b3_ = 0;
};

/// Finite-difference checks of the full forward pass (training mode) for
/// every variant at reduced width: R=5, S=3, B=2, hidden 8, ffn 16.
std::vector<GradCheckResult> model_gradcheck_suite(std::uint64_t seed = 17);

}  // namespace neurofuse
