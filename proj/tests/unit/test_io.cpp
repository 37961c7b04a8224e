#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <thread>
#include <vector>

#include "dia/errors.hpp"
#include "dia/io.hpp"

using namespace dia;
namespace fs = std::filesystem;

namespace {
fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("dia_test_io_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}
std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream s;
  s << f.rdbuf();
  return s.str();
}
}  // namespace

TEST_CASE("csv round trip with quoting") {
  fs::path dir = scratch("rt");
  CsvTable t{{"name", "value"},
             {{"plain", format_double(0.1)},
              {"with,comma", format_double(1.0 / 3.0)},
              {"with \"quote\"", format_double(-2.5e-300)},
              {"two\nlines", format_double(std::numeric_limits<double>::infinity())},
              {"", format_double(std::nan(""))}}};
  write_csv(dir / "t.csv", t);
  CsvTable back = read_csv(dir / "t.csv");
  CHECK(back.header == t.header);
  CHECK(back.rows == t.rows);
  CHECK(std::stod(back.rows[1][1]) == 1.0 / 3.0);
  CHECK(std::stod(back.rows[2][1]) == -2.5e-300);
  CHECK(slurp(dir / "t.csv").find("\"with,comma\"") != std::string::npos);
  CHECK(slurp(dir / "t.csv").find("\"with \"\"quote\"\"\"") != std::string::npos);
  for (const auto& e : fs::directory_iterator(dir)) CHECK(e.path().filename() == "t.csv");
}

TEST_CASE("header-only file for an empty table") {
  fs::path dir = scratch("empty");
  write_csv(dir / "e.csv", {{"a", "b"}, {}});
  CHECK(slurp(dir / "e.csv") == "a,b\n");
  CHECK(read_csv(dir / "e.csv").rows.empty());
}

TEST_CASE("format_double keeps 17 significant digits") {
  CHECK(format_double(0.1) == "0.10000000000000001");
  CHECK(format_double(-std::numeric_limits<double>::infinity()) == "-inf");
  Rng r(1);
  for (int i = 0; i < 1000; ++i) {
    double v = r.normal() * std::pow(10.0, static_cast<int>(r.below(40)) - 20);
    CHECK(std::stod(format_double(v)) == v);
  }
}

TEST_CASE("distinct paths written concurrently stay intact") {
  fs::path dir = scratch("conc");
  std::vector<std::thread> ts;
  for (int t = 0; t < 8; ++t)
    ts.emplace_back([&, t] {
      CsvTable tab{{"t", "i"}, {}};
      for (int i = 0; i < 2000; ++i) tab.rows.push_back({std::to_string(t), std::to_string(i)});
      for (int k = 0; k < 5; ++k) write_csv(dir / ("f" + std::to_string(t) + ".csv"), tab);
    });
  for (auto& th : ts) th.join();
  for (int t = 0; t < 8; ++t) {
    CsvTable back = read_csv(dir / ("f" + std::to_string(t) + ".csv"));
    REQUIRE(back.rows.size() == 2000);
    for (int i = 0; i < 2000; ++i) CHECK(back.rows[i] == std::vector<std::string>{std::to_string(t), std::to_string(i)});
  }
}

TEST_CASE("hashing and sidecars") {
  CHECK(fnv1a64("") == 0xcbf29ce484222325ull);
  CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cull);
  Json a = Json::parse(R"({"b": 1, "a": [1, 2]})"), b = Json::parse(R"({"a": [1, 2], "b": 1})");
  CHECK(config_hash(a) == config_hash(b));
  CHECK(config_hash(a).size() == 16);
  CHECK(config_hash(a) != config_hash(Json::parse(R"({"b": 2, "a": [1, 2]})")));

  fs::path dir = scratch("meta");
  write_csv(dir / "x.csv", {{"c"}, {{"1"}}});
  write_sidecar(dir / "x.csv", a, 1);
  Json meta = read_json_file(dir / "x.csv.meta.json");
  CHECK(meta["config_hash"] == config_hash(a));
  CHECK(meta["rows"] == 1);
  CHECK(meta["file"] == "x.csv");
  CHECK(meta["config"] == a);
}

TEST_CASE("json numbers and vectors") {
  CHECK(number_to_json(std::numeric_limits<double>::infinity()) == "inf");
  CHECK(std::isnan(number_from_json(number_to_json(std::nan("")))));
  CHECK(number_from_json(number_to_json(-std::numeric_limits<double>::infinity())) < 0);
  Vec v{{1.5, -INFINITY, 0.0}};
  Vec w = vec_from_json(vec_to_json(v));
  CHECK(w[0] == 1.5);
  CHECK(std::isinf(w[1]));
}

TEST_CASE("policy json round trip") {
  Rng r(2);
  auto same = [](const Policy& a, const Policy& b, const Vec& x) {
    return (a.eval_probs(x) - b.eval_probs(x)).cwiseAbs().maxCoeff() == 0.0;
  };
  Policy s = Policy::softmax(Vec{{-INFINITY, 0.3, 1.0}});
  CHECK(same(s, policy_from_json(policy_to_json(s)), Vec()));
  Policy m = Policy::mlp(2, 3, r, 4);
  Vec x{{0.3, -0.7}};
  CHECK(same(m, policy_from_json(policy_to_json(m)), x));
  PolicyRegistry reg;
  reg.add(Policy::uniform(3, 2), 10);
  Policy eff = effective_policy(reg, m, 10, 40);
  Policy back = policy_from_json(policy_to_json(eff));
  CHECK(back.form() == PolicyForm::mixture);
  CHECK(same(eff, back, x));
}

TEST_CASE("dgp config json") {
  DgpConfig c = DgpConfig::defaults(DgpKind::civ);
  c.sigma_u = 0.25;
  DgpConfig back = dgp_config_from_json(dgp_config_to_json(c));
  CHECK(back.kind == DgpKind::civ);
  CHECK(back.sigma_u == 0.25);
  CHECK(back.covariate_dim == c.covariate_dim);
  DgpConfig m = dgp_config_from_json(Json::parse(R"({"kind": "misspec"})"));
  CHECK(m.sigma_u == DgpConfig::defaults(DgpKind::misspec).sigma_u);
  CHECK_THROWS_AS(dgp_config_from_json(Json::parse(R"({"kind": "iv", "sigma": 1})")), ConfigError);
  CHECK_THROWS_AS(dgp_config_from_json(Json::parse(R"({"kind": "nope"})")), ConfigError);
  CHECK_THROWS_AS(read_json_file("/nonexistent/dia.json"), ConfigError);
}

TEST_CASE("resample config json") {
  ResampleConfig rc;
  rc.alpha = 0.8;
  rc.B = 7;
  rc.rho_max_mode = RhoMaxMode::known;
  ResampleConfig back = resample_config_from_json(resample_config_to_json(rc));
  CHECK(back.alpha == 0.8);
  CHECK(back.B == 7);
  CHECK(back.rho_max_mode == RhoMaxMode::known);
  CHECK_THROWS_AS(resample_config_from_json(Json::parse(R"({"B": 0})")), ConfigError);
}
