#include "neurofuse/fusion_models.hpp"

#include <cmath>

#include "neurofuse/error.hpp"
#include "neurofuse/gradcheck.hpp"

namespace neurofuse {
namespace {

constexpr const char* kModule = "fusion_models";
constexpr double kMasked = -1e30;

}  // namespace

std::string to_string(ModelKind kind) {
  switch (kind) {
    case ModelKind::GnnTf: return "gnn-tf";
    case ModelKind::GnnTfCausal: return "gnn-tf-causal";
    case ModelKind::Gclstm: return "gclstm";
    case ModelKind::GclstmF: return "gclstm-f";
    case ModelKind::StaticGcn: return "static-gcn";
    case ModelKind::StaticGat: return "static-gat";
  }
  return "?";
}

std::string to_string(Fusion fusion) {
  switch (fusion) {
    case Fusion::TfEarly: return "tf-early";
    case Fusion::TfCausal: return "tf-causal";
    case Fusion::Late: return "late";
    case Fusion::None: return "none";
  }
  return "?";
}

ModelKind parse_model_kind(const std::string& s) {
  for (auto k : {ModelKind::GnnTf, ModelKind::GnnTfCausal, ModelKind::Gclstm, ModelKind::GclstmF,
                 ModelKind::StaticGcn, ModelKind::StaticGat})
    if (to_string(k) == s) return k;
  fail(ErrorKind::Config, kModule, "unknown model '" + s + "'");
}

Fusion parse_fusion(const std::string& s) {
  for (auto f : {Fusion::TfEarly, Fusion::TfCausal, Fusion::Late, Fusion::None})
    if (to_string(f) == s) return f;
  fail(ErrorKind::Config, kModule, "unknown fusion '" + s + "'");
}

std::vector<std::string> ModelConfig::normalize() {
  std::vector<std::string> warnings;
  switch (model) {
    case ModelKind::GnnTfCausal:
      fusion = Fusion::TfCausal;
      break;
    case ModelKind::Gclstm:
      use_tabular = false;
      fusion = Fusion::None;
      break;
    case ModelKind::GclstmF:
      fusion = Fusion::Late;
      if (!use_tabular) {
        warnings.push_back("gclstm-f without covariates is plain gclstm");
        model = ModelKind::Gclstm;
        fusion = Fusion::None;
      }
      break;
    case ModelKind::StaticGcn:
    case ModelKind::StaticGat:
      fusion = Fusion::None;
      dynamic = false;
      encoder.backbone = model == ModelKind::StaticGat ? Backbone::Gat : Backbone::Gcn;
      break;
    case ModelKind::GnnTf:
      if (fusion == Fusion::Late && !use_tabular) {
        warnings.push_back("late fusion with use_tabular=off has nothing to fuse; using fusion=none");
        fusion = Fusion::None;
      }
      break;
  }
  if (encoder.hidden < 4 || heads == 0 || encoder.hidden % heads != 0) {
    fail(ErrorKind::Config, kModule, "hidden width must be >= 4 and divisible by the head count");
  }
  if (layers == 0 || ffn == 0 || covariates == 0) fail(ErrorKind::Config, kModule, "layers, ffn and covariates must be positive");
  return warnings;
}

std::size_t ModelConfig::head_in() const {
  // covariates are concatenated unless they travel as a transformer token
  const bool concat = use_tabular && (fusion == Fusion::Late || fusion == Fusion::None);
  return concat ? 2 * hidden() : hidden();
}

FusionModel::FusionModel(ModelConfig config, std::size_t feature_count, std::size_t windows, std::uint64_t seed)
    : config_(std::move(config)), windows_(windows) {
  config_.normalize();
  if (windows_ == 0) fail(ErrorKind::Contract, kModule, "model needs at least one window");
  Rng rng(seed);
  const std::size_t d = config_.hidden();
  has_tabular_ = config_.use_tabular;
  encoder_ = add_encoder_parameters(params_, feature_count, config_.encoder, rng);

  if (has_tabular_) {
    const std::size_t c = config_.covariates;
    bn_gamma_ = params_.add_tensor("tabular", "bn_gamma", Tensor::full({c}, 1.0));
    bn_beta_ = params_.add_zeros("tabular", "bn_beta", {c});
    bn_mean_ = params_.add_tensor("tabular", "bn_running_mean", Tensor({c}), false);
    bn_var_ = params_.add_tensor("tabular", "bn_running_var", Tensor::full({c}, 1.0), false);
    tab_w_ = params_.add_weight("tabular", "weight", {c, d}, c, rng);
    tab_b_ = params_.add_zeros("tabular", "bias", {d});
  }

  if (uses_transformer()) {
    const bool tab_token = has_tabular_ && config_.fusion != Fusion::Late;
    sequence_length_ = windows_ + 1 + (tab_token ? 1 : 0);
    cls_ = params_.add_weight("fusion", "cls", {d}, d, rng);
    pos_ = params_.add_weight("fusion", "positional", {sequence_length_, d}, d, rng);
    for (std::size_t l = 0; l < config_.layers; ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      LayerHandles h{};
      h.wq = params_.add_weight("fusion", p + "wq", {d, d}, d, rng);
      h.bq = params_.add_zeros("fusion", p + "bq", {d});
      h.wk = params_.add_weight("fusion", p + "wk", {d, d}, d, rng);
      h.bk = params_.add_zeros("fusion", p + "bk", {d});
      h.wv = params_.add_weight("fusion", p + "wv", {d, d}, d, rng);
      h.bv = params_.add_zeros("fusion", p + "bv", {d});
      h.wo = params_.add_weight("fusion", p + "wo", {d, d}, d, rng);
      h.bo = params_.add_zeros("fusion", p + "bo", {d});
      h.ln1_g = params_.add_tensor("fusion", p + "ln1_gamma", Tensor::full({d}, 1.0));
      h.ln1_b = params_.add_zeros("fusion", p + "ln1_beta", {d});
      h.ff_w1 = params_.add_weight("fusion", p + "ffn_w1", {d, config_.ffn}, d, rng);
      h.ff_b1 = params_.add_zeros("fusion", p + "ffn_b1", {config_.ffn});
      h.ff_w2 = params_.add_weight("fusion", p + "ffn_w2", {config_.ffn, d}, config_.ffn, rng);
      h.ff_b2 = params_.add_zeros("fusion", p + "ffn_b2", {d});
      h.ln2_g = params_.add_tensor("fusion", p + "ln2_gamma", Tensor::full({d}, 1.0));
      h.ln2_b = params_.add_zeros("fusion", p + "ln2_beta", {d});
      layers_.push_back(h);
    }
    const std::size_t L = sequence_length_;
    causal_mask_ = Tensor({L, L});
    if (config_.fusion == Fusion::TfCausal)
      for (std::size_t i = 0; i < L; ++i)
        for (std::size_t j = i + 1; j < L; ++j) causal_mask_.at(i, j) = kMasked;
  }

  if (config_.model == ModelKind::Gclstm || config_.model == ModelKind::GclstmF) {
    // gate blocks along the columns: input, forget, output, candidate
    lstm_wx_ = params_.add_weight("lstm", "w_input", {d, 4 * d}, d, rng);
    lstm_wh_ = params_.add_weight("lstm", "w_recurrent", {d, 4 * d}, d, rng);
    lstm_b_ = params_.add_zeros("lstm", "bias", {4 * d});
  }

  const std::size_t in = config_.head_in(), h1 = d / 2, h2 = d / 4;
  head_w1_ = params_.add_weight("head", "w1", {in, h1}, in, rng);
  head_b1_ = params_.add_zeros("head", "b1", {h1});
  head_w2_ = params_.add_weight("head", "w2", {h1, h2}, h1, rng);
  head_b2_ = params_.add_zeros("head", "b2", {h2});
  head_w3_ = params_.add_weight("head", "w3", {h2, 2}, h2, rng);
  head_b3_ = params_.add_zeros("head", "b3", {2});
}

bool FusionModel::uses_transformer() const noexcept {
  return (config_.model == ModelKind::GnnTf || config_.model == ModelKind::GnnTfCausal) &&
         config_.fusion != Fusion::None;
}

std::size_t FusionModel::read_position() const noexcept {
  return config_.fusion == Fusion::TfCausal ? sequence_length_ - 1 : 0;
}

BatchNormStats FusionModel::batch_norm_stats(const ParameterSet& params) const {
  if (!has_tabular_) return {};
  return BatchNormStats{params.value(bn_mean_), params.value(bn_var_), 0.1, 1e-5};
}

void FusionModel::store_batch_norm_stats(ParameterSet& params, const BatchNormStats& stats) const {
  if (!has_tabular_) return;
  params.value(bn_mean_) = stats.running_mean;
  params.value(bn_var_) = stats.running_var;
}

Var FusionModel::linear(std::span<const Var> bound, Var x, std::size_t w, std::size_t b) const {
  return ops::add(ops::matmul(x, bound[w]), bound[b]);
}

Var FusionModel::tabular_embed(std::span<const Var> bound, Var covariates, bool training,
                               BatchNormStats* running) const {
  if (!has_tabular_) fail(ErrorKind::Contract, kModule, "model has no tabular path");
  if (covariates.shape().size() != 2 || covariates.shape()[1] != config_.covariates) {
    fail(ErrorKind::Dimension, kModule, "covariates must be [batch, " + std::to_string(config_.covariates) + "]");
  }
  Var normed;
  if (training) {
    normed = ops::batch_norm(covariates, bound[bn_gamma_], bound[bn_beta_], running, true);
  } else {
    BatchNormStats stored{bound[bn_mean_].value(), bound[bn_var_].value(), 0.1, 1e-5};
    normed = ops::batch_norm(covariates, bound[bn_gamma_], bound[bn_beta_], &stored, false);
  }
  return ops::selu(linear(bound, normed, tab_w_, tab_b_));
}

Var FusionModel::head(std::span<const Var> bound, Var z) const {
  Var a = ops::selu(linear(bound, z, head_w1_, head_b1_));
  Var b = ops::selu(linear(bound, a, head_w2_, head_b2_));
  return ops::log_softmax(linear(bound, b, head_w3_, head_b3_));
}

Var FusionModel::encode(std::span<const Var> bound, Var h0, const ModelBatch& batch, const EncoderMasks& masks) const {
  if (batch.windows != windows_) {
    fail(ErrorKind::Dimension, kModule,
         "batch has " + std::to_string(batch.windows) + " windows, model expects " + std::to_string(windows_));
  }
  Tape& tape = h0.tape();
  GraphBatch graphs{tape.constant(batch.propagation), batch.subjects * batch.windows};
  Var flat = encode_graphs(config_.encoder, encoder_, bound, h0, graphs, masks);
  return ops::reshape(flat, {batch.subjects, batch.windows, config_.hidden()});
}

Var FusionModel::tokens(std::span<const Var> bound, Var graph_embeddings, const Var* tabular) const {
  const std::size_t b = graph_embeddings.shape()[0], d = config_.hidden();
  Tape& tape = graph_embeddings.tape();
  Var cls = ops::add(tape.constant(Tensor({b, 1, d})), bound[cls_]);
  std::vector<Var> parts;
  const bool tab_token = tabular && config_.fusion != Fusion::Late;
  Var tab;
  if (tab_token) tab = ops::reshape(*tabular, {b, 1, d});
  if (config_.fusion == Fusion::TfCausal) {
    parts.push_back(graph_embeddings);
    if (tab_token) parts.push_back(tab);
    parts.push_back(cls);
  } else {
    parts.push_back(cls);
    if (tab_token) parts.push_back(tab);
    parts.push_back(graph_embeddings);
  }
  return ops::concat(parts, 1);
}

Var FusionModel::attention(std::span<const Var> bound, const LayerHandles& l, Var x) const {
  const Shape& s = x.shape();
  const std::size_t b = s[0], len = s[1], d = s[2], h = config_.heads, dh = d / h;
  auto split = [&](Var t) {
    return ops::reshape(ops::permute(ops::reshape(t, {b, len, h, dh}), {0, 2, 1, 3}), {b * h, len, dh});
  };
  Var q = split(linear(bound, x, l.wq, l.bq));
  Var k = split(linear(bound, x, l.wk, l.bk));
  Var v = split(linear(bound, x, l.wv, l.bv));
  Var scores = ops::scale(ops::matmul(q, k, true), 1.0 / std::sqrt(static_cast<double>(dh)));
  if (config_.fusion == Fusion::TfCausal) scores = ops::add(scores, x.tape().constant(causal_mask_));
  Var ctx = ops::matmul(ops::softmax(scores), v);
  Var merged = ops::reshape(ops::permute(ops::reshape(ctx, {b, h, len, dh}), {0, 2, 1, 3}), {b, len, d});
  return linear(bound, merged, l.wo, l.bo);
}

std::vector<Var> FusionModel::transformer_layers(std::span<const Var> bound, Var tokens) const {
  if (tokens.shape().size() != 3 || tokens.shape()[1] != sequence_length_) {
    fail(ErrorKind::Dimension, kModule,
         "token sequence " + shape_string(tokens.shape()) + " does not match positional length " +
             std::to_string(sequence_length_));
  }
  std::vector<Var> outputs;
  Var x = ops::add(tokens, bound[pos_]);
  for (const LayerHandles& l : layers_) {
    x = ops::layer_norm(ops::add(x, attention(bound, l, x)), bound[l.ln1_g], bound[l.ln1_b]);
    Var ff = linear(bound, ops::selu(linear(bound, x, l.ff_w1, l.ff_b1)), l.ff_w2, l.ff_b2);
    x = ops::layer_norm(ops::add(x, ff), bound[l.ln2_g], bound[l.ln2_b]);
    outputs.push_back(x);
  }
  return outputs;
}

Var FusionModel::run_transformer(std::span<const Var> bound, Var tokens) const {
  Var out = transformer_layers(bound, tokens).back();
  const std::size_t b = out.shape()[0], d = out.shape()[2];
  return ops::reshape(ops::slice(out, 1, read_position(), 1), {b, d});
}

Var FusionModel::lstm(std::span<const Var> bound, Var sequence) const {
  const std::size_t b = sequence.shape()[0], steps = sequence.shape()[1], d = config_.hidden();
  Tape& tape = sequence.tape();
  Var h = tape.constant(Tensor({b, d}));
  Var c = tape.constant(Tensor({b, d}));
  for (std::size_t s = 0; s < steps; ++s) {
    Var x = ops::reshape(ops::slice(sequence, 1, s, 1), {b, d});
    Var z = ops::add(ops::add(ops::matmul(x, bound[lstm_wx_]), ops::matmul(h, bound[lstm_wh_])), bound[lstm_b_]);
    Var in = ops::sigmoid(ops::slice(z, 1, 0, d));
    Var forget = ops::sigmoid(ops::slice(z, 1, d, d));
    Var out = ops::sigmoid(ops::slice(z, 1, 2 * d, d));
    Var cand = ops::tanh(ops::slice(z, 1, 3 * d, d));
    c = ops::add(ops::hadamard(forget, c), ops::hadamard(in, cand));
    h = ops::hadamard(out, ops::tanh(c));
  }
  return h;
}

Var FusionModel::representation(std::span<const Var> bound, Var h0, const ModelBatch& batch, bool training,
                                BatchNormStats* running, const EncoderMasks& masks) const {
  if (batch.subjects == 0) fail(ErrorKind::Contract, kModule, "empty batch");
  Var graphs = encode(bound, h0, batch, masks);
  Var tab;
  if (has_tabular_) tab = tabular_embed(bound, h0.tape().constant(batch.covariates), training, running);
  const Var* tab_ptr = has_tabular_ ? &tab : nullptr;

  if (config_.model == ModelKind::Gclstm || config_.model == ModelKind::GclstmF) {
    Var h = lstm(bound, graphs);
    return has_tabular_ ? ops::concat({h, tab}, 1) : h;
  }
  if (uses_transformer()) {
    Var fused = run_transformer(bound, tokens(bound, graphs, tab_ptr));
    return config_.fusion == Fusion::Late ? ops::concat({fused, tab}, 1) : fused;
  }
  // order-invariant pooling over windows
  Var pooled = ops::mean(graphs, 1, true);
  return has_tabular_ ? ops::concat({pooled, tab}, 1) : pooled;
}

Var FusionModel::forward(std::span<const Var> bound, Var h0, const ModelBatch& batch, bool training,
                         BatchNormStats* running, const EncoderMasks& masks) const {
  return head(bound, representation(bound, h0, batch, training, running, masks));
}

std::vector<GradCheckResult> model_gradcheck_suite(std::uint64_t seed) {
  constexpr std::size_t r = 5, f = 5, s_count = 3, b = 2;
  Rng rng(seed);
  Tensor h0({r, f});
  for (double& v : h0.data()) v = rng.uniform(-1.0, 1.0);
  Tensor raw({b * s_count, r, r});
  for (std::size_t g = 0; g < b * s_count; ++g)
    for (std::size_t i = 0; i < r; ++i) {
      raw.ptr()[(g * r + i) * r + i] = 1.0;
      for (std::size_t j = i + 1; j < r; ++j) {
        const double v = rng.bernoulli(0.5) ? rng.uniform(-1.0, 1.0) : 0.0;
        raw.ptr()[(g * r + i) * r + j] = v;
        raw.ptr()[(g * r + j) * r + i] = v;
      }
    }
  Tensor covariates({b, 2});
  for (std::size_t i = 0; i < b; ++i) {
    covariates.at(i, 0) = static_cast<double>(i % 2);
    covariates.at(i, 1) = rng.uniform(-1.5, 1.5);
  }

  struct Variant {
    ModelKind kind;
    Fusion fusion;
    Backbone backbone;
  };
  const std::vector<Variant> variants{
      {ModelKind::GnnTf, Fusion::TfEarly, Backbone::Gcn},      {ModelKind::GnnTfCausal, Fusion::TfCausal, Backbone::Gcn},
      {ModelKind::GnnTf, Fusion::Late, Backbone::Gcn},         {ModelKind::GnnTf, Fusion::None, Backbone::Gcn},
      {ModelKind::GnnTf, Fusion::TfEarly, Backbone::Gat},      {ModelKind::Gclstm, Fusion::None, Backbone::Gcn},
      {ModelKind::GclstmF, Fusion::Late, Backbone::Gcn},       {ModelKind::StaticGcn, Fusion::None, Backbone::Gcn},
      {ModelKind::StaticGat, Fusion::None, Backbone::Gat},
  };
  std::vector<GradCheckResult> results;
  for (const auto& v : variants) {
    ModelConfig config;
    config.model = v.kind;
    config.fusion = v.fusion;
    config.encoder.backbone = v.backbone;
    config.encoder.hidden = 8;
    config.ffn = 16;
    config.normalize();
    const bool is_static = v.kind == ModelKind::StaticGcn || v.kind == ModelKind::StaticGat;
    const std::size_t windows = is_static ? 1 : s_count;
    const FusionModel model(config, f, windows, derive_seed(seed, {results.size()}));

    ModelBatch batch{Tensor({b * windows, r, r}), covariates, b, windows};
    for (std::size_t g = 0; g < b * windows; ++g) {
      Tensor a({r, r});
      std::copy_n(raw.ptr() + g * r * r, r * r, a.ptr());
      const Tensor p = v.backbone == Backbone::Gcn ? normalized_adjacency(a) : attention_support(a);
      std::copy_n(p.ptr(), r * r, batch.propagation.ptr() + g * r * r);
    }
    std::vector<Tensor> inputs;
    for (std::size_t i = 0; i < model.params().size(); ++i) {
      Tensor t = model.params().value(i);
      // zero-initialized biases would park SELU inputs exactly on its kink
      if (model.params().entry(i).trainable && t.rank() == 1)
        for (double& x : t.data()) x += rng.uniform(-0.1, 0.1);
      inputs.push_back(std::move(t));
    }
    std::string name = to_string(config.model);
    if (config.model == ModelKind::GnnTf) name += "/" + to_string(config.fusion);
    name += "/" + to_string(config.encoder.backbone);
    results.push_back(check_gradients(
        name,
        [&](Tape& tape, std::span<const Var> vars) { return model.forward(vars, tape.constant(h0), batch, true); },
        inputs));
  }
  return results;
}

}  // namespace neurofuse
