#include "neurofuse/graph_encoder.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "neurofuse/error.hpp"
#include "neurofuse/ops.hpp"

namespace neurofuse {
namespace {

constexpr const char* kModule = "graph_encoder";
constexpr double kMaskedScore = -1e30;

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_double(const std::string& s, const std::string& context) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v)) {
    fail(ErrorKind::Io, kModule, context + ": bad coordinate '" + s + "'");
  }
  return v;
}

// Applies f to each [R,R] slice of a rank-2 or rank-3 tensor.
template <typename F>
Tensor per_graph(const Tensor& a, F f) {
  if (a.rank() != 2 && a.rank() != 3) fail(ErrorKind::Dimension, kModule, "adjacency must be [R,R] or [G,R,R]");
  const std::size_t r = a.dim(a.rank() - 1);
  if (a.dim(a.rank() - 2) != r) fail(ErrorKind::Dimension, kModule, "adjacency must be square");
  Tensor out(a.shape());
  const std::size_t graphs = a.rank() == 3 ? a.dim(0) : 1;
  for (std::size_t g = 0; g < graphs; ++g) f(a.ptr() + g * r * r, out.ptr() + g * r * r, r);
  return out;
}

Var gat_layer(Var h, Var support, Var w, Var a_src, Var a_dst, const Var* edge_mask) {
  Tape& tape = h.tape();
  Var hw = ops::matmul(h, w);
  const Shape& s = hw.shape();
  const std::size_t r = s[s.size() - 2];
  // e[i,j] = leaky_relu(a_src . Wh_i + a_dst . Wh_j)
  Var src = ops::matmul(hw, a_src);
  Var dst = ops::matmul(hw, a_dst);
  Var e_src = ops::matmul(src, tape.constant(Tensor::full({1, r}, 1.0)));
  Shape ones_shape = s.size() == 2 ? Shape{r, 1} : Shape{s[0], r, 1};
  Var e_dst = ops::matmul(tape.constant(Tensor::full(ones_shape, 1.0)), dst, true);
  Var scores = ops::leaky_relu(ops::add(e_src, e_dst), 0.2);
  Var alpha = ops::softmax(ops::add(support, scores));
  if (edge_mask) alpha = ops::hadamard(alpha, *edge_mask);
  return ops::selu(ops::matmul(alpha, hw));
}

}  // namespace

AtlasMetadata make_atlas(std::vector<AtlasRegion> regions) {
  std::set<std::string> labels;
  for (const auto& r : regions) labels.insert(r.system);
  AtlasMetadata atlas{std::move(regions), {labels.begin(), labels.end()}};
  if (atlas.size() < 2) fail(ErrorKind::Contract, kModule, "atlas needs at least 2 regions");
  return atlas;
}

AtlasMetadata read_atlas_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Io, kModule, "cannot open atlas " + path.string());
  std::string line;
  std::getline(in, line);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "region_id,x,y,z,system") {
    fail(ErrorKind::Io, kModule, path.string() + ": expected header region_id,x,y,z,system");
  }
  std::vector<AtlasRegion> regions;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = split_csv(line);
    const std::string where = path.string() + " line " + std::to_string(row);
    if (f.size() != 5) fail(ErrorKind::Io, kModule, where + ": expected 5 fields");
    regions.push_back({f[0], parse_double(f[1], where), parse_double(f[2], where), parse_double(f[3], where), f[4]});
  }
  return make_atlas(std::move(regions));
}

void write_atlas_csv(const AtlasMetadata& atlas, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::Io, kModule, "cannot write " + path.string());
  out << "region_id,x,y,z,system\n" << std::setprecision(17);
  for (const auto& r : atlas.regions) out << r.id << ',' << r.x << ',' << r.y << ',' << r.z << ',' << r.system << '\n';
  if (!out) fail(ErrorKind::Io, kModule, "write failed: " + path.string());
}

Tensor node_feature_matrix(const AtlasMetadata& atlas) {
  const std::size_t r = atlas.size();
  if (r < 2) fail(ErrorKind::Contract, kModule, "atlas needs at least 2 regions");
  const std::size_t f = atlas.feature_count();
  Tensor h({r, f});
  for (std::size_t i = 0; i < r; ++i) {
    const auto& reg = atlas.regions[i];
    if (!std::isfinite(reg.x) || !std::isfinite(reg.y) || !std::isfinite(reg.z)) {
      fail(ErrorKind::Contract, kModule, "region " + reg.id + " has non-finite coordinates");
    }
    const auto it = std::find(atlas.vocabulary.begin(), atlas.vocabulary.end(), reg.system);
    if (it == atlas.vocabulary.end()) {
      fail(ErrorKind::Vocabulary, kModule, "region " + reg.id + " has unknown system '" + reg.system + "'");
    }
    h.at(i, 0) = reg.x;
    h.at(i, 1) = reg.y;
    h.at(i, 2) = reg.z;
    h.at(i, 3 + static_cast<std::size_t>(it - atlas.vocabulary.begin())) = 1.0;
  }
  for (std::size_t c = 0; c < 3; ++c) {
    double mean = 0.0;
    for (std::size_t i = 0; i < r; ++i) mean += h.at(i, c);
    mean /= static_cast<double>(r);
    double var = 0.0;
    for (std::size_t i = 0; i < r; ++i) var += (h.at(i, c) - mean) * (h.at(i, c) - mean);
    const double sd = std::sqrt(var / static_cast<double>(r));
    for (std::size_t i = 0; i < r; ++i) h.at(i, c) = sd > 0.0 ? (h.at(i, c) - mean) / sd : 0.0;
  }
  return h;
}

Tensor degree_counts(const Tensor& adjacency) {
  if (adjacency.rank() != 2 || adjacency.dim(0) != adjacency.dim(1)) {
    fail(ErrorKind::Dimension, kModule, "adjacency must be square");
  }
  const std::size_t r = adjacency.dim(0);
  Tensor d({r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < r; ++j) d[i] += adjacency.at(i, j) != 0.0 ? 1.0 : 0.0;
  return d;
}

Tensor normalized_adjacency(const Tensor& adjacency) {
  return per_graph(adjacency, [](const double* a, double* out, std::size_t r) {
    std::vector<double> inv_sqrt(r);
    for (std::size_t i = 0; i < r; ++i) {
      const auto nz = std::count_if(a + i * r, a + (i + 1) * r, [](double v) { return v != 0.0; });
      if (nz == 0) fail(ErrorKind::DegenerateGraph, kModule, "node " + std::to_string(i) + " has zero degree");
      inv_sqrt[i] = 1.0 / std::sqrt(static_cast<double>(nz));
    }
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < r; ++j) out[i * r + j] = inv_sqrt[i] * a[i * r + j] * inv_sqrt[j];
  });
}

Tensor attention_support(const Tensor& adjacency) {
  return per_graph(adjacency, [](const double* a, double* out, std::size_t r) {
    for (std::size_t i = 0; i < r; ++i) {
      bool any = false;
      for (std::size_t j = 0; j < r; ++j) {
        any = any || a[i * r + j] != 0.0;
        out[i * r + j] = a[i * r + j] != 0.0 ? 0.0 : kMaskedScore;
      }
      if (!any) fail(ErrorKind::DegenerateGraph, kModule, "node " + std::to_string(i) + " has zero degree");
    }
  });
}

Var gcn_layer(Var h, Var a_hat, Var w) { return ops::selu(ops::matmul(a_hat, ops::matmul(h, w))); }

Tensor gcn_layer(const Tensor& h, const Tensor& adjacency, const Tensor& w) {
  Tape tape;
  return gcn_layer(tape.constant(h), tape.constant(normalized_adjacency(adjacency)), tape.constant(w)).value();
}

EncoderHandles add_encoder_parameters(ParameterSet& params, std::size_t feature_count, const EncoderConfig& config,
                                      Rng& rng) {
  const std::size_t d = config.hidden;
  EncoderHandles h;
  h.w1 = params.add_weight("encoder", "w1", {feature_count, d}, feature_count, rng);
  h.w2 = params.add_weight("encoder", "w2", {d, d}, d, rng);
  if (config.backbone == Backbone::Gat) {
    h.att1_src = params.add_weight("encoder", "att1_src", {d, 1}, d, rng);
    h.att1_dst = params.add_weight("encoder", "att1_dst", {d, 1}, d, rng);
    h.att2_src = params.add_weight("encoder", "att2_src", {d, 1}, d, rng);
    h.att2_dst = params.add_weight("encoder", "att2_dst", {d, 1}, d, rng);
  }
  h.proj_weight = params.add_weight("encoder", "proj_weight", {d, d}, d, rng);
  h.proj_bias = params.add_zeros("encoder", "proj_bias", {d});
  return h;
}

Var encode_graphs(const EncoderConfig& config, const EncoderHandles& handles, std::span<const Var> bound, Var h0,
                  const GraphBatch& graphs, const EncoderMasks& masks) {
  const Shape& ps = graphs.propagation.shape();
  if (ps.size() != 3 || ps[1] != ps[2] || ps[1] != h0.shape().at(0)) {
    fail(ErrorKind::Dimension, kModule,
         "propagation " + shape_string(ps) + " does not match node features " + shape_string(h0.shape()));
  }
  Var x = masks.features ? ops::hadamard(h0, *masks.features) : h0;
  Var h1, h2;
  if (config.backbone == Backbone::Gcn) {
    Var a_hat = masks.edges ? ops::hadamard(graphs.propagation, *masks.edges) : graphs.propagation;
    // H0 W1 is shared by all graphs; only the propagation differs.
    h1 = gcn_layer(x, a_hat, bound[handles.w1]);
    h2 = gcn_layer(h1, a_hat, bound[handles.w2]);
  } else {
    h1 = gat_layer(x, graphs.propagation, bound[handles.w1], bound[handles.att1_src], bound[handles.att1_dst],
                   masks.edges);
    h2 = gat_layer(h1, graphs.propagation, bound[handles.w2], bound[handles.att2_src], bound[handles.att2_dst],
                   masks.edges);
  }
  Var proj = ops::selu(ops::add(ops::matmul(h2, bound[handles.proj_weight]), bound[handles.proj_bias]));
  return config.readout == Readout::Mean ? ops::mean(proj, 1) : ops::max(proj, 1);
}

std::string to_string(Backbone backbone) { return backbone == Backbone::Gcn ? "gcn" : "gat"; }
std::string to_string(Readout readout) { return readout == Readout::Mean ? "mean" : "max"; }

}  // namespace neurofuse
