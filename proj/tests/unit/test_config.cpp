#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "neurofuse/config.hpp"
#include "neurofuse/error.hpp"

using namespace neurofuse;
using nlohmann::json;

namespace {

ErrorKind kind_of(const json& doc) {
  try {
    RunConfig c = parse_config(doc);
    c.resolve();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected an error for " << doc.dump());
  return ErrorKind::Contract;
}

std::string message_of(const json& doc) {
  try {
    RunConfig c = parse_config(doc);
    c.resolve();
  } catch (const Error& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("defaults") {
  RunConfig c = parse_config(json::object());
  c.resolve();
  CHECK(c.q == 0.05);
  CHECK(c.train.lr == 1e-4);
  CHECK(c.train.batch_size == 32);
  CHECK(c.window_width == 130);
  CHECK(c.window_step == 20);
  CHECK(c.window_count == 8);
  CHECK(c.model.model == ModelKind::GnnTf);
  const GraphOptions g = c.graph_options();
  CHECK(g.plan.starts == std::vector<std::size_t>{0, 20, 40, 60, 80, 100, 120, 140});
  CHECK(g.q == 0.05);
}

TEST_CASE("seed reaches every sub-config") {
  RunConfig c = parse_config(json{{"seed", 42}, {"window_width", 100}});
  c.resolve();
  CHECK(c.train.seed == 42);
  CHECK(c.gen.seed == 42);
  CHECK(c.explain.seed == 42);
  CHECK(c.gen.window_width == 100);
}

TEST_CASE("bad documents") {
  CHECK(kind_of(json{{"lr", "fast"}}) == ErrorKind::Config);
  CHECK(message_of(json{{"lr", "fast"}}).find("lr") != std::string::npos);
  CHECK(message_of(json{{"learning_rate", 0.1}}).find("learning_rate") != std::string::npos);
  CHECK(kind_of(json{{"hidden", -3}}) == ErrorKind::Config);
  CHECK(kind_of(json{{"q", 1.5}}) == ErrorKind::Config);
  CHECK(kind_of(json{{"model", "resnet"}}) == ErrorKind::Config);
  CHECK(kind_of(json{{"permuted_windows", {0, 0, 1, 2, 3, 4, 5, 6}}}) == ErrorKind::Config);
  CHECK(kind_of(json{{"patience", 300}}) == ErrorKind::Config);
  CHECK(kind_of(json::array()) == ErrorKind::Config);
}

TEST_CASE("canonical form round-trips") {
  RunConfig a = parse_config(json{{"model", "gclstm"}, {"hidden", 16}, {"lr", 3e-4}, {"permuted_windows", {7, 6, 5, 4, 3, 2, 1, 0}}});
  a.resolve();
  const json canon = canonical_json(a);
  RunConfig b = parse_config(canon);
  b.resolve();
  CHECK(canonical_json(b) == canon);
  CHECK(config_hash(a) == config_hash(b));
  CHECK(config_hash(a).size() == 16);
  CHECK(canon.size() == config_keys().size());

  RunConfig moved = a;
  moved.output = "elsewhere";
  CHECK(config_hash(moved) == config_hash(a));
  RunConfig reseeded = a;
  reseeded.seed = 2;
  CHECK(config_hash(reseeded) != config_hash(a));
}

TEST_CASE("config files") {
  const auto dir = std::filesystem::temp_directory_path() / "neurofuse_config_test";
  std::filesystem::create_directories(dir);
  {
    std::ofstream(dir / "ok.json") << R"({"batch_size": 16})";
    std::ofstream(dir / "broken.json") << R"({"batch_size": )";
  }
  CHECK(parse_config_file(dir / "ok.json").train.batch_size == 16);
  try {
    parse_config_file(dir / "broken.json");
    FAIL("broken JSON accepted");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Config);
  }
  try {
    parse_config_file(dir / "missing.json");
    FAIL("missing file accepted");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Io);
    CHECK(std::string(e.what()).find("missing.json") != std::string::npos);
  }
  std::filesystem::remove_all(dir);
}
