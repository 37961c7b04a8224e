#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dia/policy.hpp"
#include "dia/sampling.hpp"
#include "dia/sim.hpp"

namespace dia {

using Json = nlohmann::json;

// Non-finite numbers are stored as the strings "inf", "-inf", "nan".
Json number_to_json(double v);
double number_from_json(const Json& j);
Json vec_to_json(const Vec& v);
Vec vec_from_json(const Json& j);

Json dgp_config_to_json(const DgpConfig& c);
// Missing fields take the kind's defaults; unknown fields are a ConfigError.
DgpConfig dgp_config_from_json(const Json& j);

Json policy_to_json(const Policy& p);
Policy policy_from_json(const Json& j);

Json resample_config_to_json(const ResampleConfig& c);
ResampleConfig resample_config_from_json(const Json& j);

Json read_json_file(const std::filesystem::path& path);

// %.17g, with inf/-inf/nan spelled out.
std::string format_double(double v);

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

// RFC-4180: CRLF-free output (LF line ends), fields quoted when they contain
// a comma, quote, CR or LF. Written to a temporary file then renamed.
void write_csv(const std::filesystem::path& path, const CsvTable& table);
CsvTable read_csv(const std::filesystem::path& path);

std::uint64_t fnv1a64(const std::string& bytes);
// Hash of the canonical (sorted-key, compact) dump.
std::string config_hash(const Json& config);
// Writes <csv>.meta.json with the config hash, the config and the row count.
void write_sidecar(const std::filesystem::path& csv_path, const Json& config, std::size_t rows);

void write_text_atomic(const std::filesystem::path& path, const std::string& text);

}  // namespace dia
