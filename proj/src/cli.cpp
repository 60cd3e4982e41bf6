#include "neurofuse/cli.hpp"

#include <chrono>
#include <cstdlib>
#include <cstdint>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "neurofuse/error.hpp"
#include "neurofuse/parallel.hpp"

namespace neurofuse {
namespace {

constexpr const char* kModule = "cli";
using nlohmann::json;

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream s;
  s << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return s.str();
}

std::filesystem::path output_dir(const RunConfig& config) {
  const std::filesystem::path dir(config.output);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) fail(ErrorKind::Io, kModule, "cannot create output directory " + dir.string() + ": " + ec.message());
  return dir;
}

void write_json(const std::filesystem::path& path, const json& body) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::Io, kModule, "cannot write " + path.string());
  out << body.dump(2) << '\n';
  if (!out) fail(ErrorKind::Io, kModule, "write failed: " + path.string());
}

// Identity block shared by every report. The output directory is left out
// like in the hash: the report already sits inside it.
json provenance(const RunConfig& config) {
  json canon = canonical_json(config);
  canon.erase("output");
  return {{"tool_version", NEUROFUSE_VERSION}, {"config_hash", config_hash(config)}, {"config", std::move(canon)}};
}

Dataset load_input(const RunConfig& config, const std::string& command) {
  if (config.dataset.empty()) fail(ErrorKind::Config, kModule, "dataset: required by " + command);
  if (!std::filesystem::is_directory(config.dataset))
    fail(ErrorKind::Io, kModule, "dataset directory not found: " + config.dataset);
  return load_dataset(config.dataset, config.atlas);
}

ModelConfig normalized_model(const RunConfig& config, std::vector<std::string>* warnings = nullptr) {
  ModelConfig m = config.model;
  auto w = m.normalize();
  if (warnings) *warnings = std::move(w);
  return m;
}

PreparedData prepare(const RunConfig& config, const Dataset& data) {
  const ModelConfig m = normalized_model(config);
  GraphOptions graphs = config.graph_options();
  graphs.dynamic = m.dynamic;
  spdlog::info("building {} graphs for {} subjects", graphs.dynamic ? "windowed" : "whole-series", data.subjects.size());
  return prepare_data(data, graphs, m.encoder.backbone);
}

int cmd_gen_data(const RunConfig& config, std::ostream& out) {
  const auto dir = output_dir(config);
  const GeneratedDataset gen = generate_dataset(config.gen, dir);
  int positives = 0;
  for (const auto& s : gen.data.subjects) positives += s.outcome;
  out << "wrote " << gen.data.subjects.size() << " subjects (" << positives << " positive) and "
      << gen.planted.size() << " planted edges to " << dir.string() << '\n';
  return 0;
}

int cmd_connectivity(const RunConfig& config, std::size_t jobs, std::ostream& out) {
  const Dataset data = load_input(config, "connectivity");
  const auto dir = output_dir(config);
  const GraphOptions options = config.graph_options();
  std::filesystem::create_directories(dir / "graphs");
  const std::size_t n = data.subjects.size();
  std::vector<DynamicGraphSequence> graphs(n);
  parallel_for(n, jobs, [&](std::size_t i) {
    const auto& s = data.subjects[i];
    try {
      graphs[i] = options.dynamic ? build_dynamic_graphs(s.series, options.plan, options.q)
                                  : build_static_graph(s.series, options.q);
    } catch (const Error& e) {
      fail(e.kind(), e.module(), s.id + ": " + e.what());
    }
  });

  json subjects = json::array();
  std::vector<double> density_sum;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& g = graphs[i];
    write_graph_cache(g, dir / "graphs" / (data.subjects[i].id + ".dgs"));
    const double pairs = static_cast<double>(g.regions() * (g.regions() - 1));
    std::vector<double> density;
    for (const auto& mask : g.masks) {
      double edges = 0.0;
      for (std::size_t k = 0; k < mask.numel(); ++k) edges += mask[k];
      density.push_back((edges - static_cast<double>(g.regions())) / pairs);
    }
    density_sum.resize(density.size(), 0.0);
    for (std::size_t s = 0; s < density.size(); ++s) density_sum[s] += density[s];
    subjects.push_back({{"subject", data.subjects[i].id}, {"edge_density", density}});
  }
  for (double& d : density_sum) d /= static_cast<double>(n);
  json summary = provenance(config);
  summary["windows"] = graphs.front().windows();
  summary["window_starts"] = graphs.front().plan.starts;
  summary["mean_edge_density"] = density_sum;
  summary["subjects"] = std::move(subjects);
  write_json(dir / "connectivity.json", summary);
  out << "wrote " << n << " graph caches to " << (dir / "graphs").string() << '\n';
  return 0;
}

struct TrainedEnsemble {
  std::vector<FusionModel> models;
  std::vector<TrainResult> results;
  std::vector<InnerSplit> splits;
  std::vector<std::uint64_t> init_seeds, shuffle_seeds;
};

// Inner-fold ensemble over every subject: the deployable counterpart of one
// outer fold of `evaluate`.
TrainedEnsemble train_ensemble(const RunConfig& config, const PreparedData& data, std::size_t jobs,
                               std::size_t limit = SIZE_MAX) {
  const ModelConfig model = normalized_model(config);
  std::vector<std::size_t> all(data.size());
  std::iota(all.begin(), all.end(), 0);
  const auto folds = stratified_split(all, data.labels, config.train.inner_folds, derive_seed(config.seed, {10}));
  TrainedEnsemble out;
  const std::size_t k = std::min(folds.size(), limit);
  for (std::size_t j = 0; j < k; ++j) {
    InnerSplit split;
    split.validation = folds[j];
    for (std::size_t g = 0; g < folds.size(); ++g)
      if (g != j) split.train.insert(split.train.end(), folds[g].begin(), folds[g].end());
    std::sort(split.train.begin(), split.train.end());
    out.splits.push_back(std::move(split));
    out.init_seeds.push_back(derive_seed(config.seed, {11, j}));
    out.shuffle_seeds.push_back(derive_seed(config.seed, {12, j}));
    out.models.emplace_back(model, data.h0.dim(1), data.windows, out.init_seeds.back());
  }
  out.results.resize(k);
  parallel_for(k, jobs, [&](std::size_t j) {
    out.results[j] = train_model(out.models[j], data, out.splits[j].train, out.splits[j].validation, config.train,
                                 out.shuffle_seeds[j]);
    spdlog::info("inner model {} stopped at epoch {} (best {})", j, out.results[j].history.size(),
                 out.results[j].best_epoch);
  });
  return out;
}

int cmd_train(const RunConfig& config, std::size_t jobs, std::ostream& out) {
  const Dataset data = load_input(config, "train");
  const PreparedData prepared = prepare(config, data);
  const auto dir = output_dir(config);
  const auto started = std::chrono::steady_clock::now();
  const std::string started_at = utc_now();
  const TrainedEnsemble ens = train_ensemble(config, prepared, jobs);

  std::filesystem::create_directories(dir / "models");
  std::vector<std::string> warnings;
  normalized_model(config, &warnings);
  json report = provenance(config);
  report["schema_version"] = 1;
  report["command"] = "train";
  report["model"] = model_config_json(ens.models.front().config());
  report["train"] = train_config_json(config.train);
  report["warnings"] = warnings;
  json models = json::array();
  for (std::size_t j = 0; j < ens.models.size(); ++j) {
    const std::string file = "model-" + std::to_string(j) + ".nfck";
    save_checkpoint(ens.results[j].params, dir / "models" / file);
    json history = json::array();
    for (const auto& e : ens.results[j].history) {
      history.push_back({{"epoch", e.epoch},
                         {"train_loss", e.train_loss},
                         {"val_auc", std::isnan(e.val_auc) ? json(nullptr) : json(e.val_auc)},
                         {"val_loss", e.val_loss}});
    }
    models.push_back({{"checkpoint", "models/" + file},
                      {"init_seed", ens.init_seeds[j]},
                      {"shuffle_seed", ens.shuffle_seeds[j]},
                      {"validation_subjects", ens.splits[j].validation.size()},
                      {"best_epoch", ens.results[j].best_epoch},
                      {"best_score", ens.results[j].best_score},
                      {"history", std::move(history)}});
  }
  report["models"] = std::move(models);
  report["timing"] = {{"started", started_at},
                      {"seconds", std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count()}};
  write_json(dir / "train.json", report);
  out << "trained " << ens.models.size() << " models; checkpoints in " << (dir / "models").string() << '\n';
  return 0;
}

int cmd_evaluate(const RunConfig& config, std::size_t jobs, std::ostream& out) {
  const Dataset data = load_input(config, "evaluate");
  const PreparedData prepared = prepare(config, data);
  const auto dir = output_dir(config);
  const std::string started_at = utc_now();
  const auto started = std::chrono::steady_clock::now();
  ExperimentOptions options;
  options.jobs = jobs;
  options.permuted_order = config.permuted_windows;
  if (!options.permuted_order.empty() && !normalized_model(config).dynamic)
    fail(ErrorKind::Config, kModule, "permuted_windows: needs windowed graphs (dynamic=true)");
  const EvaluationReport result = run_experiment(prepared, config.model, config.train, options);
  json report = report_json(result);
  report.update(provenance(config));
  report["command"] = "evaluate";
  report["timing"]["started"] = started_at;
  report["timing"]["seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  write_json(dir / "report.json", report);
  out << std::fixed << std::setprecision(4) << to_string(result.model.model) << " AUC " << result.auc << " PRAUC "
      << result.pr_auc;
  if (result.has_permuted) out << " (permuted windows AUC " << result.permuted_auc << ")";
  out << '\n';
  return 0;
}

int cmd_explain(const RunConfig& config, std::size_t jobs, std::ostream& out) {
  const Dataset data = load_input(config, "explain");
  const PreparedData prepared = prepare(config, data);
  const auto dir = output_dir(config);
  const auto started = std::chrono::steady_clock::now();
  const std::string started_at = utc_now();

  const ModelConfig m = normalized_model(config);
  FusionModel model(m, prepared.h0.dim(1), prepared.windows, derive_seed(config.seed, {11, 0}));
  ParameterSet params = model.params();
  std::string source;
  if (!config.checkpoint.empty()) {
    load_checkpoint_into(params, config.checkpoint);
    source = config.checkpoint;
  } else {
    const TrainedEnsemble ens = train_ensemble(config, prepared, jobs, 1);
    params = ens.results.front().params;
    source = "trained on inner split 0";
  }
  const auto subjects = choose_subjects(prepared.size(), config.explain.subjects, config.seed);
  const auto masks = explain_subjects(model, params, prepared, subjects, config.explain, jobs);
  std::vector<std::string> regions;
  for (const auto& r : data.atlas.regions) regions.push_back(r.id);
  const auto agg = aggregate_explanations(masks, feature_names(data.atlas), regions, config.explain.top_features,
                                          config.explain.top_edges);
  json report = explanation_json(agg);
  report.update(provenance(config));
  report["command"] = "explain";
  report["parameters"] = source;
  json per_subject = json::array();
  for (const auto& mk : masks)
    per_subject.push_back({{"subject", mk.subject}, {"predicted_class", mk.predicted_class}, {"objective", mk.objective}});
  report["explained_subjects"] = std::move(per_subject);
  report["timing"] = {{"started", started_at},
                      {"seconds", std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count()}};
  write_json(dir / "explanation.json", report);
  write_explanation_csv(agg, dir / "explanation.csv");
  out << "top features:";
  for (const auto& f : agg.feature_ranking()) out << ' ' << f.name;
  out << "\nwrote " << (dir / "explanation.json").string() << '\n';
  return 0;
}

int cmd_gradcheck(const RunConfig& config, std::ostream& out) {
  const auto dir = output_dir(config);
  auto results = kernel_gradcheck_suite(derive_seed(config.seed, {20}));
  const std::size_t kernels = results.size();
  for (auto& r : model_gradcheck_suite(derive_seed(config.seed, {21}))) results.push_back(std::move(r));
  json rows = json::array();
  bool ok = true;
  out << std::left << std::setw(8) << "kind" << std::setw(34) << "name" << std::setw(14) << "max rel err"
      << std::setw(9) << "checked" << "status\n";
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto& r = results[i];
    const char* kind = i < kernels ? "kernel" : "model";
    ok = ok && r.passed();
    out << std::setw(8) << kind << std::setw(34) << r.name << std::setw(14) << std::scientific << std::setprecision(2)
        << r.max_relative_error << std::setw(9) << r.checked << (r.passed() ? "PASS" : "FAIL") << '\n';
    rows.push_back({{"kind", kind},
                    {"name", r.name},
                    {"max_relative_error", r.max_relative_error},
                    {"checked", r.checked},
                    {"passed", r.passed()}});
  }
  json report = provenance(config);
  report["command"] = "gradcheck";
  report["tolerance"] = 1e-4;
  report["checks"] = std::move(rows);
  report["passed"] = ok;
  write_json(dir / "gradcheck.json", report);
  return ok ? 0 : 1;
}

}  // namespace

void configure_logging() {
  static bool done = false;
  if (!done) {
    auto logger = spdlog::stderr_color_mt("neurofuse");
    spdlog::set_default_logger(logger);
    done = true;
  }
  auto level = spdlog::level::warn;
  if (const char* env = std::getenv("NEUROFUSE_LOG")) {
    level = spdlog::level::from_str(env);
    // from_str maps unknown names to off
    if (level == spdlog::level::off && std::string(env) != "off") level = spdlog::level::warn;
  }
  spdlog::set_level(level);
}

RunConfig load_run_config(const CommandOptions& options) {
  RunConfig config = options.config_path.empty() ? parse_config(json::object()) : parse_config_file(options.config_path);
  if (options.seed) config.seed = *options.seed;
  if (options.output) config.output = *options.output;
  config.resolve();
  return config;
}

int dispatch(const std::string& command, const RunConfig& config, std::size_t jobs, std::ostream& out) {
  if (jobs == 0) fail(ErrorKind::Config, kModule, "jobs: must be >= 1");
  if (command == "gen-data") return cmd_gen_data(config, out);
  if (command == "connectivity") return cmd_connectivity(config, jobs, out);
  if (command == "train") return cmd_train(config, jobs, out);
  if (command == "evaluate") return cmd_evaluate(config, jobs, out);
  if (command == "explain") return cmd_explain(config, jobs, out);
  if (command == "gradcheck") return cmd_gradcheck(config, out);
  fail(ErrorKind::Config, kModule, "unknown command '" + command + "'");
}

int run_cli(int argc, char** argv, std::ostream& out, std::ostream& err) {
  configure_logging();
  CLI::App app{"Dynamic functional-connectivity graphs fused with covariates for outcome prediction", "neurofuse"};
  app.set_version_flag("--version", NEUROFUSE_VERSION);
  app.require_subcommand(1);
  CommandOptions options;
  std::uint64_t seed = 0;
  std::string output;
  const std::vector<std::pair<std::string, std::string>> commands{
      {"gen-data", "write a synthetic dataset into the output directory"},
      {"connectivity", "build and cache windowed connectivity graphs"},
      {"train", "train the inner-fold ensemble on all subjects and save checkpoints"},
      {"evaluate", "repeated nested cross-validation; writes report.json"},
      {"explain", "mask-based attributions over a random subset of subjects"},
      {"gradcheck", "finite-difference checks for every kernel and model variant"}};
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", options.config_path, "JSON config file")->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "override the config seed");
    sub->add_option("--output", output, "override the output directory");
    sub->add_option("--jobs", options.jobs, "worker threads")->check(CLI::PositiveNumber);
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    std::ostringstream help_out, help_err;
    const int code = app.exit(e, help_out, help_err);
    out << help_out.str();
    err << help_err.str();
    return code;
  }
  const CLI::App* chosen = app.get_subcommands().front();
  if (chosen->count("--seed")) options.seed = seed;
  if (chosen->count("--output")) options.output = output;
  try {
    const RunConfig config = load_run_config(options);
    return dispatch(chosen->get_name(), config, options.jobs, out);
  } catch (const Error& e) {
    err << json{{"error", {{"kind", std::string(to_string(e.kind()))}, {"module", e.module()}, {"message", e.what()}}}}.dump() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << json{{"error", {{"kind", "internal"}, {"module", "cli"}, {"message", e.what()}}}}.dump() << '\n';
    return 1;
  }
}

}  // namespace neurofuse
