#include "neurofuse/config.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <functional>

#include "neurofuse/error.hpp"

namespace neurofuse {
namespace {

constexpr const char* kModule = "config";

using nlohmann::json;

struct Field {
  ConfigKey key;
  std::function<void(RunConfig&, const json&)> read;
  std::function<json(const RunConfig&)> write;
};

[[noreturn]] void type_error(const std::string& key, const std::string& expected, const json& value) {
  fail(ErrorKind::Config, kModule, key + ": expected " + expected + ", got " + value.dump());
}

std::uint64_t as_uint(const std::string& key, const json& v) {
  if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<std::int64_t>() < 0))
    type_error(key, "a non-negative integer", v);
  return v.get<std::uint64_t>();
}

template <typename Get>
Field uint_field(std::string name, std::string description, Get get) {
  return {{name, "uint", std::move(description)},
          [name, get](RunConfig& c, const json& v) { get(c) = static_cast<std::remove_reference_t<decltype(get(c))>>(as_uint(name, v)); },
          [get](const RunConfig& c) { return json(get(c)); }};
}

template <typename Get>
Field number_field(std::string name, std::string description, Get get) {
  return {{name, "number", std::move(description)},
          [name, get](RunConfig& c, const json& v) {
            if (!v.is_number()) type_error(name, "a number", v);
            get(c) = v.get<double>();
          },
          [get](const RunConfig& c) { return json(get(c)); }};
}

template <typename Get>
Field bool_field(std::string name, std::string description, Get get) {
  return {{name, "bool", std::move(description)},
          [name, get](RunConfig& c, const json& v) {
            if (!v.is_boolean()) type_error(name, "true or false", v);
            get(c) = v.get<bool>();
          },
          [get](const RunConfig& c) { return json(get(c)); }};
}

template <typename Get>
Field string_field(std::string name, std::string description, Get get) {
  return {{name, "string", std::move(description)},
          [name, get](RunConfig& c, const json& v) {
            if (!v.is_string()) type_error(name, "a string", v);
            get(c) = v.get<std::string>();
          },
          [get](const RunConfig& c) { return json(get(c)); }};
}

// String-valued enum: `parse` maps the text, `show` maps back.
template <typename Get, typename Parse, typename Show>
Field enum_field(std::string name, std::string description, Get get, Parse parse, Show show) {
  return {{name, "string", std::move(description)},
          [name, get, parse](RunConfig& c, const json& v) {
            if (!v.is_string()) type_error(name, "a string", v);
            try {
              get(c) = parse(v.get<std::string>());
            } catch (const Error& e) {
              fail(ErrorKind::Config, kModule, name + ": " + e.what());
            }
          },
          [get, show](const RunConfig& c) { return json(show(get(c))); }};
}

Backbone parse_backbone(const std::string& s) {
  if (s == "gcn") return Backbone::Gcn;
  if (s == "gat") return Backbone::Gat;
  fail(ErrorKind::Config, kModule, "unknown backbone '" + s + "' (gcn, gat)");
}

Readout parse_readout(const std::string& s) {
  if (s == "mean") return Readout::Mean;
  if (s == "max") return Readout::Max;
  fail(ErrorKind::Config, kModule, "unknown readout '" + s + "' (mean, max)");
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back(string_field("dataset", "dataset directory (subjects.csv, timeseries/, atlas.csv)",
                             [](auto& c) -> auto& { return c.dataset; }));
    f.push_back(string_field("atlas", "atlas CSV; empty means <dataset>/atlas.csv",
                             [](auto& c) -> auto& { return c.atlas; }));
    f.push_back(string_field("output", "output directory; every artifact is written inside it",
                             [](auto& c) -> auto& { return c.output; }));
    f.push_back(string_field("checkpoint", "parameters for explain; empty trains a model first",
                             [](auto& c) -> auto& { return c.checkpoint; }));
    f.push_back(uint_field("seed", "base seed for folds, initialization, shuffling, generation and explanation",
                           [](auto& c) -> auto& { return c.seed; }));

    f.push_back(enum_field(
        "model", "gnn-tf | gnn-tf-causal | gclstm | gclstm-f | static-gcn | static-gat",
        [](auto& c) -> auto& { return c.model.model; }, parse_model_kind,
        [](ModelKind k) { return to_string(k); }));
    f.push_back(enum_field(
        "fusion", "tf-early | tf-causal | late | none (gnn-tf only; other models fix their own)",
        [](auto& c) -> auto& { return c.model.fusion; }, parse_fusion, [](Fusion k) { return to_string(k); }));
    f.push_back(enum_field(
        "backbone", "gcn | gat", [](auto& c) -> auto& { return c.model.encoder.backbone; }, parse_backbone,
        [](Backbone k) { return to_string(k); }));
    f.push_back(enum_field(
        "readout", "node readout: mean | max", [](auto& c) -> auto& { return c.model.encoder.readout; },
        parse_readout, [](Readout k) { return to_string(k); }));
    f.push_back(bool_field("use_tabular", "feed sex and age to the model",
                           [](auto& c) -> auto& { return c.model.use_tabular; }));
    f.push_back(bool_field("dynamic", "sliding-window graphs; false builds one graph per subject",
                           [](auto& c) -> auto& { return c.model.dynamic; }));
    f.push_back(uint_field("hidden", "embedding width", [](auto& c) -> auto& { return c.model.encoder.hidden; }));
    f.push_back(uint_field("layers", "transformer layers", [](auto& c) -> auto& { return c.model.layers; }));
    f.push_back(uint_field("heads", "attention heads", [](auto& c) -> auto& { return c.model.heads; }));
    f.push_back(uint_field("ffn", "transformer feed-forward width", [](auto& c) -> auto& { return c.model.ffn; }));

    f.push_back(uint_field("window_width", "timepoints per window", [](auto& c) -> auto& { return c.window_width; }));
    f.push_back(uint_field("window_step", "timepoints between window starts",
                           [](auto& c) -> auto& { return c.window_step; }));
    f.push_back(uint_field("window_count", "windows per subject", [](auto& c) -> auto& { return c.window_count; }));
    f.push_back(number_field("q", "Benjamini-Hochberg false discovery rate", [](auto& c) -> auto& { return c.q; }));
    f.push_back({{"permuted_windows", "uint-list", "window order for an extra permuted evaluation; [] disables it"},
                 [](RunConfig& c, const json& v) {
                   if (!v.is_array()) type_error("permuted_windows", "an array of window indices", v);
                   c.permuted_windows.clear();
                   for (const auto& e : v) c.permuted_windows.push_back(as_uint("permuted_windows", e));
                 },
                 [](const RunConfig& c) { return json(c.permuted_windows); }});

    f.push_back(number_field("lr", "Adam learning rate", [](auto& c) -> auto& { return c.train.lr; }));
    f.push_back(uint_field("batch_size", "subjects per mini-batch", [](auto& c) -> auto& { return c.train.batch_size; }));
    f.push_back(uint_field("max_epochs", "epoch budget", [](auto& c) -> auto& { return c.train.max_epochs; }));
    f.push_back(uint_field("patience", "epochs without validation-AUC improvement before stopping",
                           [](auto& c) -> auto& { return c.train.patience; }));
    f.push_back(uint_field("repeats", "repetitions of the nested cross-validation",
                           [](auto& c) -> auto& { return c.train.repeats; }));
    f.push_back(uint_field("folds", "outer folds", [](auto& c) -> auto& { return c.train.folds; }));
    f.push_back(uint_field("inner_folds", "inner folds (models per ensemble)",
                           [](auto& c) -> auto& { return c.train.inner_folds; }));

    f.push_back(uint_field("gen_subjects", "generated subjects", [](auto& c) -> auto& { return c.gen.subjects; }));
    f.push_back(uint_field("gen_regions", "generated regions", [](auto& c) -> auto& { return c.gen.regions; }));
    f.push_back(uint_field("gen_timepoints", "timepoints per series", [](auto& c) -> auto& { return c.gen.timepoints; }));
    f.push_back(uint_field("gen_systems", "functional systems", [](auto& c) -> auto& { return c.gen.systems; }));
    f.push_back(number_field("gen_prevalence", "target outcome prevalence",
                             [](auto& c) -> auto& { return c.gen.prevalence; }));
    f.push_back(number_field("gen_beta_sex", "logistic weight on sex", [](auto& c) -> auto& { return c.gen.beta[0]; }));
    f.push_back(number_field("gen_beta_age", "logistic weight on standardized age",
                             [](auto& c) -> auto& { return c.gen.beta[1]; }));
    f.push_back(number_field("gen_gamma", "logistic weight on the planted-signal indicator",
                             [](auto& c) -> auto& { return c.gen.gamma; }));
    f.push_back(number_field("gen_delta", "late-window correlation boost on planted pairs",
                             [](auto& c) -> auto& { return c.gen.delta; }));
    f.push_back(number_field("gen_planted_base", "mean subject-level planted-pair correlation",
                             [](auto& c) -> auto& { return c.gen.planted_base; }));
    f.push_back(number_field("gen_planted_jitter", "sd of the subject-level planted-pair correlation",
                             [](auto& c) -> auto& { return c.gen.planted_jitter; }));
    f.push_back(uint_field("gen_planted_edges", "planted region pairs (disjoint)",
                           [](auto& c) -> auto& { return c.gen.planted_edges; }));
    f.push_back(number_field("gen_system_coupling", "background correlation within a system",
                             [](auto& c) -> auto& { return c.gen.system_coupling; }));
    f.push_back(number_field("gen_ar", "AR(1) coefficient", [](auto& c) -> auto& { return c.gen.ar_coefficient; }));
    f.push_back(number_field("gen_noise", "series standard deviation", [](auto& c) -> auto& { return c.gen.noise_scale; }));

    f.push_back(number_field("explain_size_weight", "mask size penalty",
                             [](auto& c) -> auto& { return c.explain.size_weight; }));
    f.push_back(number_field("explain_entropy_weight", "mask entropy penalty",
                             [](auto& c) -> auto& { return c.explain.entropy_weight; }));
    f.push_back(uint_field("explain_steps", "optimizer steps per subject", [](auto& c) -> auto& { return c.explain.steps; }));
    f.push_back(number_field("explain_lr", "mask learning rate", [](auto& c) -> auto& { return c.explain.lr; }));
    f.push_back(uint_field("explain_subjects", "random subjects explained",
                           [](auto& c) -> auto& { return c.explain.subjects; }));
    f.push_back(uint_field("explain_top_features", "features listed in the ranking",
                           [](auto& c) -> auto& { return c.explain.top_features; }));
    f.push_back(uint_field("explain_top_edges", "edges listed in the ranking",
                           [](auto& c) -> auto& { return c.explain.top_edges; }));
    return f;
  }();
  return table;
}

}  // namespace

void RunConfig::resolve() {
  train.seed = seed;
  gen.seed = seed;
  explain.seed = seed;
  gen.window_width = window_width;
  gen.window_step = window_step;
  gen.window_count = window_count;
  if (window_width < 4) fail(ErrorKind::Config, kModule, "window_width: need at least 4 timepoints per window");
  if (window_step == 0) fail(ErrorKind::Config, kModule, "window_step: must be >= 1");
  if (window_count == 0) fail(ErrorKind::Config, kModule, "window_count: must be >= 1");
  if (!(q > 0.0 && q < 1.0)) fail(ErrorKind::Config, kModule, "q: must lie in (0, 1)");
  if (!permuted_windows.empty()) {
    std::vector<std::size_t> sorted = permuted_windows;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t k = 0; k < sorted.size(); ++k)
      if (sorted[k] != k || sorted.size() != window_count)
        fail(ErrorKind::Config, kModule, "permuted_windows: must be a permutation of 0.." + std::to_string(window_count - 1));
  }
  ModelConfig normalized = model;
  try {
    normalized.normalize();
  } catch (const Error& e) {
    fail(ErrorKind::Config, kModule, std::string("model: ") + e.what());
  }
  train.validate();
  gen.validate();
  explain.validate();
}

GraphOptions RunConfig::graph_options() const {
  GraphOptions g;
  g.plan = fixed_windows(window_width + (window_count - 1) * window_step, window_width, window_step, window_count);
  g.dynamic = model.dynamic;
  g.q = q;
  return g;
}

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    for (const auto& f : fields()) k.push_back(f.key);
    return k;
  }();
  return keys;
}

RunConfig parse_config(const json& document) {
  if (!document.is_object()) fail(ErrorKind::Config, kModule, "config must be a JSON object");
  RunConfig config;
  for (const auto& [key, value] : document.items()) {
    const auto& table = fields();
    auto it = std::find_if(table.begin(), table.end(), [&](const Field& f) { return f.key.name == key; });
    if (it == table.end()) fail(ErrorKind::Config, kModule, key + ": unknown key");
    it->read(config, value);
  }
  config.resolve();
  return config;
}

RunConfig parse_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Io, kModule, "cannot read config " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    fail(ErrorKind::Config, kModule, path.string() + ": not valid JSON (" + e.what() + ")");
  }
  return parse_config(doc);
}

json canonical_json(const RunConfig& config) {
  json out = json::object();
  for (const auto& f : fields()) out[f.key.name] = f.write(config);
  return out;
}

std::string config_hash(const RunConfig& config) {
  json body = canonical_json(config);
  body.erase("output");
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : body.dump()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace neurofuse
