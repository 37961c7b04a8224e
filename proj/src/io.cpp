#include "dia/io.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>
#include <unistd.h>

#include "dia/errors.hpp"

namespace dia {

Json number_to_json(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return v;
}

double number_from_json(const Json& j) {
  if (j.is_number()) return j.get<double>();
  if (j.is_string()) {
    auto s = j.get<std::string>();
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  }
  throw ConfigError("expected a number, got " + j.dump());
}

Json vec_to_json(const Vec& v) {
  Json a = Json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(number_to_json(v[i]));
  return a;
}

Vec vec_from_json(const Json& j) {
  if (j.is_number()) return Vec::Constant(1, j.get<double>());
  if (!j.is_array()) throw ConfigError("expected an array of numbers, got " + j.dump());
  Vec v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v[static_cast<Eigen::Index>(i)] = number_from_json(j[i]);
  return v;
}

namespace {

void check_keys(const Json& j, const std::set<std::string>& allowed, const char* what) {
  if (!j.is_object()) throw ConfigError(std::string(what) + " must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key())) throw ConfigError(std::string("unknown ") + what + " field: " + it.key());
}

template <class T>
T get_as(const Json& j, const char* key) {
  try {
    return j.at(key).get<T>();
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("field ") + key + ": " + e.what());
  }
}

}  // namespace

Json dgp_config_to_json(const DgpConfig& c) {
  return Json{{"kind", std::string(to_string(c.kind))},
              {"num_instruments", c.num_instruments},
              {"theta0", vec_to_json(c.theta0)},
              {"gamma", vec_to_json(c.gamma)},
              {"sigma_u", c.sigma_u},
              {"sigma0", c.sigma0},
              {"sigma1", c.sigma1},
              {"sigma_a", c.sigma_a},
              {"sigma_y", c.sigma_y},
              {"covariate_dim", c.covariate_dim},
              {"eval_size", c.eval_size}};
}

DgpConfig dgp_config_from_json(const Json& j) {
  check_keys(j,
             {"kind", "num_instruments", "theta0", "gamma", "sigma_u", "sigma0", "sigma1", "sigma_a",
              "sigma_y", "covariate_dim", "eval_size"},
             "dgp");
  if (!j.contains("kind")) throw ConfigError("dgp.kind is required");
  DgpConfig c = DgpConfig::defaults(parse_dgp_kind(get_as<std::string>(j, "kind")));
  if (j.contains("num_instruments")) {
    c.num_instruments = get_as<int>(j, "num_instruments");
    if (!j.contains("gamma")) c.gamma = Vec();
  }
  if (j.contains("theta0")) c.theta0 = vec_from_json(j["theta0"]);
  if (j.contains("gamma")) c.gamma = vec_from_json(j["gamma"]);
  if (j.contains("sigma_u")) c.sigma_u = get_as<double>(j, "sigma_u");
  if (j.contains("sigma0")) c.sigma0 = get_as<double>(j, "sigma0");
  if (j.contains("sigma1")) c.sigma1 = get_as<double>(j, "sigma1");
  if (j.contains("sigma_a")) c.sigma_a = get_as<double>(j, "sigma_a");
  if (j.contains("sigma_y")) c.sigma_y = get_as<double>(j, "sigma_y");
  if (j.contains("covariate_dim")) c.covariate_dim = get_as<int>(j, "covariate_dim");
  if (j.contains("eval_size")) c.eval_size = get_as<int>(j, "eval_size");
  c.validate();
  return c;
}

Json policy_to_json(const Policy& p) {
  Json j{{"form", std::string(to_string(p.form()))},
         {"num_instruments", p.num_instruments()},
         {"input_dim", p.input_dim()}};
  switch (p.form()) {
    case PolicyForm::softmax_logits:
      j["layer_sizes"] = Json::array({p.num_instruments()});
      j["weights"] = vec_to_json(p.weights());
      break;
    case PolicyForm::conditional_mlp:
      j["layer_sizes"] = Json::array({p.input_dim(), p.hidden(), p.num_instruments()});
      j["weights"] = vec_to_json(p.weights());
      break;
    case PolicyForm::mixture: {
      Json comps = Json::array();
      for (const auto& c : p.components())
        comps.push_back(Json{{"weight", c.weight}, {"policy", policy_to_json(*c.policy)}});
      j["components"] = comps;
      j["learnable_weight"] = p.learnable_weight();
      j["learnable"] = policy_to_json(p.learnable());
      break;
    }
  }
  return j;
}

Policy policy_from_json(const Json& j) {
  if (!j.is_object() || !j.contains("form")) throw ConfigError("policy JSON needs a form");
  PolicyForm form = parse_policy_form(get_as<std::string>(j, "form"));
  int input_dim = j.value("input_dim", 0);
  switch (form) {
    case PolicyForm::softmax_logits:
      return Policy::softmax(vec_from_json(j.at("weights")), input_dim);
    case PolicyForm::conditional_mlp: {
      const Json& ls = j.at("layer_sizes");
      if (!ls.is_array() || ls.size() != 3) throw ConfigError("mlp layer_sizes must have 3 entries");
      return Policy::mlp_from_weights(ls[0].get<int>(), ls[1].get<int>(), ls[2].get<int>(),
                                      vec_from_json(j.at("weights")));
    }
    case PolicyForm::mixture: {
      std::vector<Policy::Component> comps;
      for (const auto& c : j.at("components"))
        comps.push_back({c.at("weight").get<double>(),
                         std::make_shared<const Policy>(policy_from_json(c.at("policy")))});
      return Policy::mixture(std::move(comps), get_as<double>(j, "learnable_weight"),
                             policy_from_json(j.at("learnable")));
    }
  }
  throw ConfigError("unsupported policy form");
}

Json resample_config_to_json(const ResampleConfig& c) {
  return Json{{"alpha", c.alpha},
              {"B", c.B},
              {"rho_max_mode", c.rho_max_mode == RhoMaxMode::known ? "known" : "empirical_supremum"},
              {"seed", c.seed},
              {"subset_size_override", c.subset_size_override}};
}

ResampleConfig resample_config_from_json(const Json& j) {
  check_keys(j, {"alpha", "B", "rho_max_mode", "seed", "subset_size_override"}, "resample");
  ResampleConfig c;
  if (j.contains("alpha")) c.alpha = get_as<double>(j, "alpha");
  if (j.contains("B")) c.B = get_as<int>(j, "B");
  if (j.contains("rho_max_mode")) {
    auto s = get_as<std::string>(j, "rho_max_mode");
    if (s == "known") c.rho_max_mode = RhoMaxMode::known;
    else if (s == "empirical_supremum") c.rho_max_mode = RhoMaxMode::empirical_supremum;
    else throw ConfigError("unknown rho_max_mode: " + s);
  }
  if (j.contains("seed")) c.seed = get_as<std::uint64_t>(j, "seed");
  if (j.contains("subset_size_override")) c.subset_size_override = get_as<long>(j, "subset_size_override");
  c.validate();
  return c;
}

Json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw ConfigError("invalid JSON in " + path.string() + ": " + e.what());
  }
}

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

namespace {

std::string quote_field(const std::string& f) {
  if (f.find_first_of(",\"\r\n") == std::string::npos) return f;
  std::string out = "\"";
  for (char c : f) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

void append_row(std::string& out, const std::vector<std::string>& row) {
  for (std::size_t i = 0; i < row.size(); ++i) {
    if (i) out += ',';
    out += quote_field(row[i]);
  }
  out += '\n';
}

}  // namespace

void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  namespace fs = std::filesystem;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << text;
    out.flush();
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp);
    throw std::runtime_error("rename to " + path.string() + " failed: " + ec.message());
  }
}

void write_csv(const std::filesystem::path& path, const CsvTable& table) {
  std::string out;
  append_row(out, table.header);
  for (const auto& r : table.rows) {
    if (r.size() != table.header.size()) throw std::invalid_argument("CSV row width != header width");
    append_row(out, r);
  }
  write_text_atomic(path, out);
}

CsvTable read_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string s = ss.str();
  std::vector<std::vector<std::string>> records;
  std::vector<std::string> rec;
  std::string field;
  bool quoted = false, any = false;
  for (std::size_t i = 0; i < s.size(); ++i) {
    char c = s[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < s.size() && s[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field += c;
      }
      continue;
    }
    if (c == '"') {
      quoted = true;
      any = true;
    } else if (c == ',') {
      rec.push_back(std::move(field));
      field.clear();
      any = true;
    } else if (c == '\n' || c == '\r') {
      if (c == '\r' && i + 1 < s.size() && s[i + 1] == '\n') ++i;
      rec.push_back(std::move(field));
      field.clear();
      records.push_back(std::move(rec));
      rec.clear();
      any = false;
    } else {
      field += c;
      any = true;
    }
  }
  if (quoted) throw std::runtime_error("unterminated quote in " + path.string());
  if (any || !field.empty()) {
    rec.push_back(std::move(field));
    records.push_back(std::move(rec));
  }
  CsvTable t;
  if (records.empty()) return t;
  t.header = std::move(records.front());
  t.rows.assign(std::make_move_iterator(records.begin() + 1), std::make_move_iterator(records.end()));
  return t;
}

std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string config_hash(const Json& config) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(config.dump())));
  return buf;
}

void write_sidecar(const std::filesystem::path& csv_path, const Json& config, std::size_t rows) {
  Json meta{{"config_hash", config_hash(config)},
            {"hash_algorithm", "fnv1a64"},
            {"file", csv_path.filename().string()},
            {"rows", rows},
            {"config", config}};
  std::filesystem::path p = csv_path;
  p += ".meta.json";
  write_text_atomic(p, meta.dump(2) + "\n");
}

}  // namespace dia
