#pragma once

// File formats: CSV data (RFC-4180 style, header row required), JSON
// documents with stable key order, a small TOML subset for scenario configs,
// config hashing, and the run manifest.

#include <cstdint>
#include <string>
#include <vector>

#include "scorewatch/detect.hpp"
#include "scorewatch/program.hpp"

namespace scorewatch::io {

/// Reads observations from CSV: header row, first column the response,
/// remaining columns covariates.
ObservationSequence read_data_csv(const std::string& path, int prefix_len = 0);
void write_data_csv(const std::string& path, const ObservationSequence& data);

ObservationSequence data_from_json(const nlohmann::json& doc);
nlohmann::json data_to_json(const ObservationSequence& data);

nlohmann::json report_to_json(const detect::DetectionReport& report,
                              const std::string& config_hash, bool include_timing = true);

/// Per-tau trace CSV with columns: tau, r_lin, r_scan_norm, p_star, subset,
/// config_hash. Component indices are 1-based; the subset is ';'-joined.
std::string per_tau_csv(const detect::DetectionReport& report, const std::string& config_hash);

/// FNV-1a 64-bit hash of the canonical (sorted-key) JSON dump, as hex.
std::string config_hash(const nlohmann::json& doc);

/// Loads a config file, dispatching on the extension (.json or .toml).
/// The TOML reader covers the subset used by scenario files: [tables],
/// dotted keys, strings, numbers, booleans and flat arrays.
nlohmann::json load_config_file(const std::string& path);
nlohmann::json parse_toml(const std::string& text);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& content);

struct RunManifest {
  std::string command;
  std::string config_hash;
  std::uint64_t seed{0};
  std::string version;
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  double wall_seconds{0.0};
};

nlohmann::json manifest_to_json(const RunManifest& manifest);

nlohmann::json detect_config_to_json(const detect::DetectConfig& config);
detect::DetectConfig detect_config_from_json(const nlohmann::json& doc);

}  // namespace scorewatch::io
