#include "scorewatch/io.hpp"

#include <cctype>
#include <fstream>
#include <sstream>

#include "scorewatch/version.hpp"

namespace scorewatch::io {

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          field.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(field);
      field.clear();
    } else if (c != '\r') {
      field.push_back(c);
    }
  }
  fields.push_back(field);
  return fields;
}

}  // namespace

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open '" + path + "'");
  std::ostringstream out;
  out << in.rdbuf();
  return out.str();
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write '" + path + "'");
  out << content;
}

ObservationSequence read_data_csv(const std::string& path, int prefix_len) {
  std::istringstream in(read_text_file(path));
  std::string line;
  if (!std::getline(in, line)) throw ConfigError("empty data file '" + path + "'");
  const auto header = split_csv_line(line);
  const auto cols = static_cast<int>(header.size());
  if (cols < 1) throw ConfigError("data file needs at least one column");
  std::vector<double> values;
  std::vector<double> covs;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto fields = split_csv_line(line);
    if (static_cast<int>(fields.size()) != cols) {
      throw ConfigError("ragged CSV row in '" + path + "'");
    }
    try {
      values.push_back(std::stod(fields[0]));
      for (int j = 1; j < cols; ++j) covs.push_back(std::stod(fields[static_cast<std::size_t>(j)]));
    } catch (const std::exception&) {
      throw ConfigError("non-numeric CSV field in '" + path + "'");
    }
  }
  ObservationSequence data;
  const auto n = static_cast<Eigen::Index>(values.size());
  data.values = Eigen::Map<Eigen::VectorXd>(values.data(), n);
  if (cols > 1) {
    data.covariates.resize(n, cols - 1);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (int j = 0; j < cols - 1; ++j) {
        data.covariates(i, j) = covs[static_cast<std::size_t>(i * (cols - 1) + j)];
      }
    }
  }
  data.prefix_len = prefix_len;
  return data;
}

void write_data_csv(const std::string& path, const ObservationSequence& data) {
  std::ostringstream out;
  out << "y";
  const auto c = static_cast<int>(data.covariates.cols());
  for (int j = 1; j <= c; ++j) out << ",x" << j;
  out << "\n";
  out.precision(17);
  for (int i = 0; i < data.n(); ++i) {
    out << data.values[i];
    for (int j = 0; j < c; ++j) out << "," << data.covariates(i, j);
    out << "\n";
  }
  write_text_file(path, out.str());
}

ObservationSequence data_from_json(const nlohmann::json& doc) {
  ObservationSequence data;
  const auto& values = doc.at("values");
  data.values.resize(static_cast<Eigen::Index>(values.size()));
  for (std::size_t i = 0; i < values.size(); ++i) {
    data.values[static_cast<Eigen::Index>(i)] = values[i].get<double>();
  }
  if (doc.contains("covariates") && !doc.at("covariates").empty()) {
    const auto& rows = doc.at("covariates");
    const auto nr = static_cast<Eigen::Index>(rows.size());
    const auto nc = static_cast<Eigen::Index>(rows[0].size());
    data.covariates.resize(nr, nc);
    for (Eigen::Index i = 0; i < nr; ++i) {
      for (Eigen::Index j = 0; j < nc; ++j) {
        data.covariates(i, j) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)].get<double>();
      }
    }
  }
  data.prefix_len = doc.value("prefix_len", 0);
  return data;
}

nlohmann::json data_to_json(const ObservationSequence& data) {
  nlohmann::json doc;
  doc["values"] = std::vector<double>(data.values.begin(), data.values.end());
  if (data.has_covariates()) {
    std::vector<std::vector<double>> rows;
    rows.reserve(static_cast<std::size_t>(data.covariates.rows()));
    for (Eigen::Index i = 0; i < data.covariates.rows(); ++i) {
      rows.emplace_back(data.covariates.row(i).begin(), data.covariates.row(i).end());
    }
    doc["covariates"] = rows;
  }
  doc["prefix_len"] = data.prefix_len;
  return doc;
}

namespace {

std::vector<int> one_based(const std::vector<int>& zero_based) {
  std::vector<int> out;
  out.reserve(zero_based.size());
  for (int i : zero_based) out.push_back(i + 1);
  return out;
}

std::string join_subset(const std::vector<int>& subset) {
  std::string out;
  for (std::size_t i = 0; i < subset.size(); ++i) {
    if (i > 0) out.push_back(';');
    out += std::to_string(subset[i] + 1);
  }
  return out;
}

double json_safe(double x) { return std::isfinite(x) ? x : 0.0; }

}  // namespace

nlohmann::json report_to_json(const detect::DetectionReport& report,
                              const std::string& config_hash, bool include_timing) {
  nlohmann::json doc;
  doc["config_hash"] = config_hash;
  doc["n"] = report.n;
  doc["d"] = report.d;
  doc["d_active"] = report.d_active;
  doc["max_cardinality"] = report.max_cardinality;
  doc["alpha_l"] = report.alpha_l;
  doc["alpha_s"] = report.alpha_s;
  doc["method"] = report.method == detect::Method::kDirect ? "direct" : "cg";
  doc["tau_range"] = {report.tau_lo, report.tau_hi};
  doc["restrict"] = one_based(report.restrict_to);
  doc["r_lin"] = report.r_lin;
  doc["tau_hat_lin"] = report.tau_hat_lin;
  doc["r_scan"] = report.r_scan;
  doc["tau_hat_scan"] = report.tau_hat_scan;
  doc["scan_p"] = report.scan_p;
  doc["scan_subset"] = one_based(report.scan_subset);
  doc["psi_lin"] = report.psi_lin;
  doc["psi_scan"] = report.psi_scan;
  doc["psi_auto"] = report.psi_auto;
  doc["thresholds"] = {{"h_lin", json_safe(report.thresholds.h_lin)},
                       {"h_p", report.thresholds.h_p},
                       {"alpha_l", report.thresholds.alpha_l},
                       {"alpha_s", report.thresholds.alpha_s},
                       {"n", report.thresholds.n},
                       {"d", report.thresholds.d},
                       {"max_cardinality", report.thresholds.max_cardinality}};
  doc["calibration"] = report.bootstrap ? "bootstrap" : "bonferroni";
  if (report.bootstrap) {
    doc["bootstrap_h_lin"] = json_safe(report.bootstrap_h_lin);
    doc["bootstrap_scan_quantile"] = json_safe(report.bootstrap_scan_quantile);
  }
  doc["theta_hat"] = std::vector<double>(report.theta_hat.begin(), report.theta_hat.end());
  doc["fit"] = {{"performed", report.fit.performed},
                {"iterations", report.fit.iterations},
                {"grad_inf_norm", report.fit.grad_inf_norm}};
  doc["skipped_taus"] = report.skipped_taus;
  doc["solver"] = {{"cg_iterations", report.solver.cg_iterations},
                   {"cg_solves", report.solver.cg_solves},
                   {"max_cg_iterations", report.solver.max_cg_iterations},
                   {"max_rel_residual", report.solver.max_rel_residual}};
  if (include_timing) doc["wall_seconds"] = report.wall_seconds;
  return doc;
}

std::string per_tau_csv(const detect::DetectionReport& report, const std::string& config_hash) {
  std::ostringstream out;
  out << "tau,r_lin,r_scan_norm,p_star,subset,config_hash\n";
  out.precision(17);
  for (const auto& rec : report.per_tau) {
    if (!rec.ok) continue;
    out << rec.tau << "," << rec.r_lin << "," << rec.r_scan_norm << "," << rec.p_star << ","
        << join_subset(rec.subset) << "," << config_hash << "\n";
  }
  return out.str();
}

std::string config_hash(const nlohmann::json& doc) {
  const std::string canon = doc.dump();
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : canon) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

namespace {

// Minimal TOML reader for flat scenario configs.
class TomlParser {
 public:
  explicit TomlParser(const std::string& text) : text_(text) {}

  nlohmann::json parse() {
    nlohmann::json root = nlohmann::json::object();
    nlohmann::json* table = &root;
    std::istringstream in(text_);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const std::string trimmed = strip(line);
      if (trimmed.empty() || trimmed[0] == '#') continue;
      if (trimmed.front() == '[') {
        if (trimmed.back() != ']') fail(lineno, "unterminated table header");
        table = &descend(root, strip(trimmed.substr(1, trimmed.size() - 2)), lineno);
        continue;
      }
      const auto eq = find_unquoted(trimmed, '=');
      if (eq == std::string::npos) fail(lineno, "expected key = value");
      const std::string key = strip(trimmed.substr(0, eq));
      const std::string value = strip(trimmed.substr(eq + 1));
      if (key.empty()) fail(lineno, "empty key");
      nlohmann::json* target = table;
      std::string leaf = key;
      if (const auto dot = key.rfind('.'); dot != std::string::npos) {
        target = &descend(*table, key.substr(0, dot), lineno);
        leaf = strip(key.substr(dot + 1));
      }
      (*target)[leaf] = parse_value(value, lineno);
    }
    return root;
  }

 private:
  static std::string strip(const std::string& s) {
    std::size_t b = 0;
    std::size_t e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
  }

  static std::size_t find_unquoted(const std::string& s, char target) {
    bool quoted = false;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s[i] == '"') quoted = !quoted;
      if (!quoted && s[i] == target) return i;
    }
    return std::string::npos;
  }

  [[noreturn]] static void fail(int lineno, const std::string& what) {
    throw ConfigError("toml line " + std::to_string(lineno) + ": " + what);
  }

  static nlohmann::json& descend(nlohmann::json& root, const std::string& dotted, int lineno) {
    nlohmann::json* cur = &root;
    std::size_t begin = 0;
    while (begin <= dotted.size()) {
      const auto dot = dotted.find('.', begin);
      const std::string part =
          strip(dot == std::string::npos ? dotted.substr(begin) : dotted.substr(begin, dot - begin));
      if (part.empty()) fail(lineno, "empty table name component");
      cur = &(*cur)[part];
      if (dot == std::string::npos) break;
      begin = dot + 1;
    }
    return *cur;
  }

  static nlohmann::json parse_value(const std::string& value, int lineno) {
    if (value.empty()) fail(lineno, "empty value");
    // Strip a trailing comment outside quotes.
    const auto hash = find_unquoted(value, '#');
    const std::string v = strip(hash == std::string::npos ? value : value.substr(0, hash));
    if (v.empty()) fail(lineno, "empty value");
    if (v.front() == '"') {
      if (v.size() < 2 || v.back() != '"') fail(lineno, "unterminated string");
      return v.substr(1, v.size() - 2);
    }
    if (v.front() == '[') {
      if (v.back() != ']') fail(lineno, "unterminated array");
      nlohmann::json arr = nlohmann::json::array();
      std::string inner = strip(v.substr(1, v.size() - 2));
      while (!inner.empty()) {
        auto comma = find_unquoted(inner, ',');
        const std::string head = strip(comma == std::string::npos ? inner : inner.substr(0, comma));
        if (!head.empty()) arr.push_back(parse_value(head, lineno));
        if (comma == std::string::npos) break;
        inner = strip(inner.substr(comma + 1));
      }
      return arr;
    }
    if (v == "true") return true;
    if (v == "false") return false;
    try {
      std::size_t used = 0;
      if (v.find_first_of(".eE") == std::string::npos) {
        const long long i = std::stoll(v, &used);
        if (used == v.size()) return i;
      }
      const double d = std::stod(v, &used);
      if (used == v.size()) return d;
    } catch (const std::exception&) {
    }
    fail(lineno, "cannot parse value '" + v + "'");
  }

  const std::string& text_;
};

}  // namespace

nlohmann::json parse_toml(const std::string& text) { return TomlParser(text).parse(); }

nlohmann::json load_config_file(const std::string& path) {
  const std::string text = read_text_file(path);
  if (path.size() >= 5 && path.substr(path.size() - 5) == ".toml") {
    return parse_toml(text);
  }
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("cannot parse '" + path + "': " + e.what());
  }
}

nlohmann::json manifest_to_json(const RunManifest& manifest) {
  return {{"command", manifest.command},
          {"config_hash", manifest.config_hash},
          {"seed", manifest.seed},
          {"version", manifest.version.empty() ? kVersion : manifest.version},
          {"inputs", manifest.inputs},
          {"outputs", manifest.outputs},
          {"wall_seconds", manifest.wall_seconds}};
}

nlohmann::json detect_config_to_json(const detect::DetectConfig& config) {
  nlohmann::json doc;
  doc["alpha_l"] = config.alpha_l;
  doc["alpha_s"] = config.alpha_s;
  doc["max_cardinality"] = config.max_cardinality;
  doc["method"] = config.method == detect::Method::kDirect ? "direct" : "cg";
  doc["tau_lo_frac"] = config.tau_lo_frac;
  doc["tau_hi_frac"] = config.tau_hi_frac;
  if (config.tau_lo > 0) doc["tau_lo"] = config.tau_lo;
  if (config.tau_hi > 0) doc["tau_hi"] = config.tau_hi;
  if (!config.restrict_to.empty()) doc["restrict"] = one_based(config.restrict_to);
  doc["cg_tol"] = config.cg_tol;
  doc["cg_max_iter"] = config.cg_max_iter;
  doc["ridge"] = config.ridge;
  doc["fit_tol"] = config.fit_tol;
  doc["fit_max_iter"] = config.fit_max_iter;
  if (config.bootstrap_replicates > 0) doc["bootstrap"] = config.bootstrap_replicates;
  return doc;
}

detect::DetectConfig detect_config_from_json(const nlohmann::json& doc) {
  detect::DetectConfig config;
  config.alpha_l = doc.value("alpha_l", 0.025);
  config.alpha_s = doc.value("alpha_s", 0.025);
  if (doc.contains("alpha") && !doc.contains("alpha_l")) {
    const double alpha = doc.at("alpha").get<double>();
    config.alpha_l = alpha / 2;
    config.alpha_s = alpha / 2;
  }
  config.max_cardinality = doc.value("max_cardinality", 0);
  const std::string method = doc.value("method", "cg");
  if (method == "direct") {
    config.method = detect::Method::kDirect;
  } else if (method == "cg") {
    config.method = detect::Method::kCg;
  } else {
    throw ConfigError("unknown method '" + method + "'");
  }
  config.tau_lo_frac = doc.value("tau_lo_frac", 0.1);
  config.tau_hi_frac = doc.value("tau_hi_frac", 0.9);
  config.tau_lo = doc.value("tau_lo", 0);
  config.tau_hi = doc.value("tau_hi", 0);
  if (doc.contains("restrict")) {
    for (const auto& v : doc.at("restrict")) config.restrict_to.push_back(v.get<int>() - 1);
  }
  config.cg_tol = doc.value("cg_tol", 1e-7);
  config.cg_max_iter = doc.value("cg_max_iter", 0);
  config.ridge = doc.value("ridge", 0.0);
  config.fit_tol = doc.value("fit_tol", 1e-6);
  config.fit_max_iter = doc.value("fit_max_iter", 500);
  config.bootstrap_replicates = doc.value("bootstrap", 0);
  return config;
}

}  // namespace scorewatch::io
