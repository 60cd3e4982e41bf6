#include "neurofuse/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <json.hpp>
#include <numeric>
#include <sstream>

#include "neurofuse/error.hpp"
#include "neurofuse/rng.hpp"

namespace neurofuse {
namespace {

constexpr const char* kModule = "datagen";
constexpr double kMaxPlantedCorrelation = 0.95;

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

std::string subject_id(std::size_t i) {
  std::ostringstream s;
  s << "sub-" << std::setw(4) << std::setfill('0') << i + 1;
  return s.str();
}

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) out.push_back(field);
  return out;
}

// Intercept b such that the mean predicted probability equals the prevalence.
double calibrate_intercept(const std::vector<double>& offsets, double prevalence) {
  double lo = -40.0, hi = 40.0;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    double mean = 0.0;
    for (double o : offsets) mean += sigmoid(mid + o);
    mean /= static_cast<double>(offsets.size());
    (mean < prevalence ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

}  // namespace

std::vector<int> Dataset::labels() const {
  std::vector<int> y;
  for (const auto& s : subjects) y.push_back(s.outcome);
  return y;
}

Tensor covariate_matrix(std::span<const SubjectRecord> subjects) {
  Tensor c({subjects.size(), 2});
  for (std::size_t i = 0; i < subjects.size(); ++i) {
    c.at(i, 0) = subjects[i].sex;
    c.at(i, 1) = subjects[i].age;
  }
  return c;
}

Dataset load_dataset(const std::filesystem::path& dir, const std::filesystem::path& atlas_path) {
  const auto table = dir / "subjects.csv";
  std::ifstream in(table);
  if (!in) fail(ErrorKind::Io, kModule, "cannot open " + table.string());
  Dataset data;
  data.atlas = read_atlas_csv(atlas_path.empty() ? dir / "atlas.csv" : atlas_path);
  std::string line;
  std::getline(in, line);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "subject_id,sex,age,outcome") {
    fail(ErrorKind::Io, kModule, table.string() + ": expected header subject_id,sex,age,outcome");
  }
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = split(line);
    const std::string where = table.string() + " line " + std::to_string(row);
    if (f.size() != 4) fail(ErrorKind::Io, kModule, where + ": expected 4 fields");
    SubjectRecord s;
    s.id = f[0];
    try {
      s.sex = std::stod(f[1]);
      s.age = std::stod(f[2]);
      s.outcome = std::stoi(f[3]);
    } catch (const std::exception&) {
      fail(ErrorKind::Io, kModule, where + ": non-numeric field");
    }
    if (s.outcome != 0 && s.outcome != 1) fail(ErrorKind::Io, kModule, where + ": outcome must be 0 or 1");
    s.series = read_timeseries_csv(dir / "timeseries" / (s.id + ".csv"));
    if (s.series.dim(1) != data.atlas.size()) {
      fail(ErrorKind::Dimension, kModule,
           s.id + " has " + std::to_string(s.series.dim(1)) + " regions, atlas has " +
               std::to_string(data.atlas.size()));
    }
    data.subjects.push_back(std::move(s));
  }
  if (data.subjects.empty()) fail(ErrorKind::Io, kModule, table.string() + " lists no subjects");
  return data;
}

void GenConfig::validate() const {
  auto bad = [](const std::string& key, const std::string& why) { fail(ErrorKind::Config, kModule, key + ": " + why); };
  if (subjects < 2) bad("gen_subjects", "need at least 2 subjects");
  if (regions < 2) bad("gen_regions", "need at least 2 regions");
  if (systems < 1 || systems > regions) bad("gen_systems", "need 1 <= systems <= regions");
  if (!(prevalence > 0.0 && prevalence < 1.0)) bad("gen_prevalence", "must lie in (0, 1)");
  if (!(std::abs(ar_coefficient) < 1.0)) bad("gen_ar", "|rho| must be < 1");
  if (!(noise_scale > 0.0)) bad("gen_noise", "must be > 0");
  if (2 * planted_edges > regions) bad("gen_planted_edges", "planted pairs are disjoint, so 2 * edges <= regions");
  if (!(system_coupling >= 0.0 && system_coupling < 1.0)) bad("gen_system_coupling", "must lie in [0, 1)");
  if (delta < 0.0 || planted_base < 0.0 || planted_jitter < 0.0) bad("gen_delta", "effects must be >= 0");
  if (window_count < 2) bad("count", "need at least 2 windows to define late ones");
  if (timepoints < window_width + (window_count - 1) * window_step) {
    bad("gen_timepoints", "series too short for the window plan");
  }
}

std::size_t GenConfig::late_start() const {
  return (window_count / 2 - 1) * window_step + window_width;
}

AtlasMetadata generate_atlas(std::size_t regions, std::size_t systems, std::uint64_t seed) {
  if (systems < 1 || regions < systems) fail(ErrorKind::Config, kModule, "atlas needs regions >= systems >= 1");
  Rng rng(seed);
  std::vector<std::size_t> system(regions);
  for (std::size_t i = 0; i < regions; ++i) system[i] = i % systems;
  rng.shuffle(system);
  std::vector<AtlasRegion> out;
  for (std::size_t i = 0; i < regions; ++i) {
    std::ostringstream id, label;
    id << "roi-" << std::setw(3) << std::setfill('0') << i + 1;
    label << "system-" << std::setw(2) << std::setfill('0') << system[i] + 1;
    const double x = rng.uniform(-90.0, 90.0), y = rng.uniform(-126.0, 126.0), z = rng.uniform(-72.0, 72.0);
    out.push_back({id.str(), x, y, z, label.str()});
  }
  return make_atlas(std::move(out));
}

GeneratedDataset generate(const GenConfig& cfg) {
  cfg.validate();
  GeneratedDataset gen;
  gen.data.atlas = generate_atlas(cfg.regions, cfg.systems, derive_seed(cfg.seed, {3}));

  std::vector<std::size_t> order(cfg.regions);
  std::iota(order.begin(), order.end(), 0);
  Rng pick(derive_seed(cfg.seed, {4}));
  pick.shuffle(order);
  for (std::size_t k = 0; k < cfg.planted_edges; ++k) {
    gen.planted.emplace_back(std::min(order[2 * k], order[2 * k + 1]), std::max(order[2 * k], order[2 * k + 1]));
  }
  std::sort(gen.planted.begin(), gen.planted.end());

  const std::size_t n = cfg.subjects;
  Rng demo(derive_seed(cfg.seed, {1}));
  std::vector<double> sex(n), age(n);
  gen.indicator.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    sex[i] = demo.bernoulli(0.5) ? 1.0 : 0.0;
    age[i] = demo.uniform(12.0, 21.0);
    gen.indicator[i] = demo.bernoulli(0.5) ? 1 : 0;
  }
  const double age_mean = std::accumulate(age.begin(), age.end(), 0.0) / static_cast<double>(n);
  double age_var = 0.0;
  for (double a : age) age_var += (a - age_mean) * (a - age_mean);
  const double age_sd = std::sqrt(age_var / static_cast<double>(n));
  std::vector<double> offsets(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double age_std = age_sd > 0.0 ? (age[i] - age_mean) / age_sd : 0.0;
    offsets[i] = cfg.beta[0] * sex[i] + cfg.beta[1] * age_std + cfg.gamma * gen.indicator[i];
  }
  gen.intercept = calibrate_intercept(offsets, cfg.prevalence);

  const std::size_t t_len = cfg.timepoints, r = cfg.regions, late = cfg.late_start();
  const double rho = cfg.ar_coefficient, sigma = cfg.noise_scale;
  const double innovation = sigma * std::sqrt(1.0 - rho * rho);
  const std::size_t vocab = gen.data.atlas.vocabulary.size();
  std::vector<std::size_t> system_of(r);
  for (std::size_t j = 0; j < r; ++j) {
    const auto& v = gen.data.atlas.vocabulary;
    system_of[j] = static_cast<std::size_t>(std::find(v.begin(), v.end(), gen.data.atlas.regions[j].system) - v.begin());
  }
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(derive_seed(cfg.seed, {2, i}));
    SubjectRecord s;
    s.id = subject_id(i);
    s.sex = sex[i];
    s.age = age[i];
    s.outcome = rng.bernoulli(sigmoid(gen.intercept + offsets[i])) ? 1 : 0;
    s.series = Tensor({t_len, r});
    for (std::size_t j = 0; j < r; ++j) {
      double x = sigma * rng.normal();
      for (std::size_t t = 0; t < t_len; ++t) {
        if (t > 0) x = rho * x + innovation * rng.normal();
        s.series.at(t, j) = x;
      }
    }
    if (cfg.system_coupling > 0.0) {
      const double keep = std::sqrt(1.0 - cfg.system_coupling), mix = sigma * std::sqrt(cfg.system_coupling);
      std::vector<double> shared(vocab);
      for (std::size_t t = 0; t < t_len; ++t) {
        for (double& v : shared) v = rng.normal();
        for (std::size_t j = 0; j < r; ++j) s.series.at(t, j) = keep * s.series.at(t, j) + mix * shared[system_of[j]];
      }
    }
    const double base = std::clamp(cfg.planted_base + cfg.planted_jitter * rng.normal(), 0.0, 0.9);
    for (const auto& [a, b] : gen.planted) {
      for (std::size_t t = 0; t < t_len; ++t) {
        const double boost = gen.indicator[i] && t >= late ? cfg.delta : 0.0;
        const double target = std::min(base + boost, kMaxPlantedCorrelation);
        // variance-preserving mix: the pair correlates at `target` while each
        // region keeps variance sigma^2 in every segment
        const double keep = std::sqrt(1.0 - target), mix = sigma * std::sqrt(target);
        const double shared = rng.normal();
        s.series.at(t, a) = keep * s.series.at(t, a) + mix * shared;
        s.series.at(t, b) = keep * s.series.at(t, b) + mix * shared;
      }
    }
    gen.data.subjects.push_back(std::move(s));
  }
  return gen;
}

GeneratedDataset generate_dataset(const GenConfig& cfg, const std::filesystem::path& dir) {
  GeneratedDataset gen = generate(cfg);
  std::error_code ec;
  std::filesystem::create_directories(dir / "timeseries", ec);
  if (ec) fail(ErrorKind::Io, kModule, "cannot create " + (dir / "timeseries").string() + ": " + ec.message());

  {
    std::ofstream out(dir / "subjects.csv");
    if (!out) fail(ErrorKind::Io, kModule, "cannot write " + (dir / "subjects.csv").string());
    out << "subject_id,sex,age,outcome\n" << std::setprecision(17);
    for (const auto& s : gen.data.subjects) out << s.id << ',' << s.sex << ',' << s.age << ',' << s.outcome << '\n';
    if (!out) fail(ErrorKind::Io, kModule, "write failed: " + (dir / "subjects.csv").string());
  }
  for (const auto& s : gen.data.subjects) write_timeseries_csv(s.series, dir / "timeseries" / (s.id + ".csv"));
  write_atlas_csv(gen.data.atlas, dir / "atlas.csv");

  const WindowPlan plan = fixed_windows(cfg.timepoints, cfg.window_width, cfg.window_step, cfg.window_count);
  nlohmann::json manifest;
  manifest["config"] = {
      {"subjects", cfg.subjects},       {"regions", cfg.regions},
      {"timepoints", cfg.timepoints},   {"systems", cfg.systems},
      {"prevalence", cfg.prevalence},   {"beta", {cfg.beta[0], cfg.beta[1]}},
      {"gamma", cfg.gamma},             {"delta", cfg.delta},
      {"planted_base", cfg.planted_base}, {"planted_jitter", cfg.planted_jitter},
      {"planted_edges", cfg.planted_edges}, {"system_coupling", cfg.system_coupling}, {"ar_coefficient", cfg.ar_coefficient},
      {"noise_scale", cfg.noise_scale}, {"window_width", cfg.window_width},
      {"window_step", cfg.window_step}, {"window_count", cfg.window_count},
      {"seed", cfg.seed}};
  nlohmann::json edges = nlohmann::json::array();
  for (const auto& [a, b] : gen.planted) edges.push_back({a, b});
  manifest["planted_edges"] = edges;
  manifest["late_start"] = cfg.late_start();
  manifest["window_starts"] = plan.starts;
  std::vector<std::size_t> late_windows;
  for (std::size_t k = cfg.window_count / 2; k < cfg.window_count; ++k) late_windows.push_back(k);
  manifest["late_windows"] = late_windows;
  manifest["intercept"] = gen.intercept;
  nlohmann::json indicator = nlohmann::json::object();
  std::size_t positives = 0;
  for (std::size_t i = 0; i < gen.data.subjects.size(); ++i) {
    indicator[gen.data.subjects[i].id] = gen.indicator[i];
    positives += static_cast<std::size_t>(gen.data.subjects[i].outcome);
  }
  manifest["planted_indicator"] = indicator;
  manifest["empirical_prevalence"] = static_cast<double>(positives) / static_cast<double>(cfg.subjects);
  std::ofstream out(dir / "manifest.json");
  out << manifest.dump(2) << '\n';
  if (!out) fail(ErrorKind::Io, kModule, "write failed: " + (dir / "manifest.json").string());
  return gen;
}

std::vector<std::pair<std::size_t, std::size_t>> read_planted_edges(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) fail(ErrorKind::Io, kModule, "cannot open " + (dir / "manifest.json").string());
  nlohmann::json manifest;
  try {
    in >> manifest;
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (const auto& e : manifest.at("planted_edges")) out.emplace_back(e.at(0).get<std::size_t>(), e.at(1).get<std::size_t>());
    return out;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Io, kModule, "bad manifest: " + std::string(e.what()));
  }
}

}  // namespace neurofuse
