#include "sparseloc/config.hpp"

#include <fstream>
#include <sstream>

namespace sparseloc {

namespace {

std::string trim(const std::string& s) {
  const std::size_t first = s.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) return "";
  const std::size_t last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

}  // namespace

ConfigFile ConfigFile::parse_text(const std::string& text) {
  ConfigFile cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::size_t hash_pos = line.find('#');
    if (hash_pos != std::string::npos) line = line.substr(0, hash_pos);
    const std::string trimmed = trim(line);
    if (trimmed.empty()) continue;
    const std::size_t eq = trimmed.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value', got '" +
                        trimmed + "'");
    }
    const std::string key = trim(trimmed.substr(0, eq));
    const std::string value = trim(trimmed.substr(eq + 1));
    if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    cfg.entries_[key] = value;
  }
  return cfg;
}

ConfigFile ConfigFile::parse_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_text(buffer.str());
}

bool ConfigFile::has(const std::string& key) const { return entries_.count(key) != 0; }

std::string ConfigFile::get(const std::string& key) const {
  const auto it = entries_.find(key);
  if (it == entries_.end()) throw ConfigError("config: missing key '" + key + "'");
  return it->second;
}

std::string ConfigFile::get_or(const std::string& key, const std::string& fallback) const {
  const auto it = entries_.find(key);
  return it == entries_.end() ? fallback : it->second;
}

namespace {

std::int64_t parse_int(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    const std::int64_t v = std::stoll(value, &pos);
    if (pos != value.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config: key '" + key + "' expects an integer, got '" + value + "'");
  }
}

double parse_double(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(value, &pos);
    if (pos != value.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config: key '" + key + "' expects a number, got '" + value + "'");
  }
}

std::vector<std::string> split_csv(const std::string& value) {
  std::vector<std::string> parts;
  std::istringstream in(value);
  std::string part;
  while (std::getline(in, part, ',')) parts.push_back(part);
  return parts;
}

}  // namespace

std::int64_t ConfigFile::get_int(const std::string& key) const { return parse_int(key, get(key)); }

std::int64_t ConfigFile::get_int_or(const std::string& key, std::int64_t fallback) const {
  return has(key) ? get_int(key) : fallback;
}

double ConfigFile::get_double_or(const std::string& key, double fallback) const {
  return has(key) ? parse_double(key, get(key)) : fallback;
}

bool ConfigFile::get_bool_or(const std::string& key, bool fallback) const {
  if (!has(key)) return fallback;
  const std::string v = get(key);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("config: key '" + key + "' expects a boolean, got '" + v + "'");
}

std::vector<int> ConfigFile::get_int_list(const std::string& key) const {
  std::vector<int> out;
  for (const std::string& part : split_csv(get(key))) {
    out.push_back(static_cast<int>(parse_int(key, trim(part))));
  }
  if (out.empty()) throw ConfigError("config: key '" + key + "' expects a non-empty list");
  return out;
}

std::vector<int> ConfigFile::get_int_list_or(const std::string& key, std::vector<int> fallback) const {
  return has(key) ? get_int_list(key) : fallback;
}

std::vector<double> ConfigFile::get_double_list_or(const std::string& key,
                                                   std::vector<double> fallback) const {
  if (!has(key)) return fallback;
  std::vector<double> out;
  for (const std::string& part : split_csv(get(key))) {
    out.push_back(parse_double(key, trim(part)));
  }
  return out;
}

void ConfigFile::set(const std::string& key, const std::string& value) { entries_[key] = value; }

std::string ConfigFile::canonical_text() const {
  std::ostringstream os;
  for (const auto& [key, value] : entries_) os << key << "=" << value << "\n";
  return os.str();
}

std::uint64_t ConfigFile::hash() const { return fnv1a(canonical_text()); }

RunConfig RunConfig::from_config(const ConfigFile& file) {
  // Required model keys reported together.
  std::string missing;
  for (const char* key : {"input_size", "channels", "depths", "max_exponents"}) {
    if (!file.has(key)) missing += missing.empty() ? key : std::string(", ") + key;
  }
  if (!missing.empty()) throw ConfigError("config: missing required keys: " + missing);

  RunConfig rc;
  rc.model.input_size = static_cast<int>(file.get_int("input_size"));
  const std::vector<int> channels = file.get_int_list("channels");
  const std::vector<int> depths = file.get_int_list("depths");
  const std::vector<int> exponents = file.get_int_list("max_exponents");
  if (channels.size() != 4 || depths.size() != 4) {
    throw ConfigError("config: channels and depths must list four stages");
  }
  if (exponents.size() != 2) {
    throw ConfigError("config: max_exponents must list stage-3 and stage-4 exponents");
  }
  std::copy(channels.begin(), channels.end(), rc.model.channels.begin());
  std::copy(depths.begin(), depths.end(), rc.model.depths.begin());
  rc.model.stage3_exponent = exponents[0];
  rc.model.stage4_exponent = exponents[1];
  rc.model.head_dim = static_cast<int>(file.get_int_or("head_dim", 32));
  rc.model.unified_channels =
      static_cast<int>(file.get_int_or("unified_channels", rc.model.channels[3]));
  rc.model.uniform_rate = static_cast<int>(file.get_int_or("uniform_rate", 0));
  rc.model.validate();

  rc.seed = static_cast<std::uint64_t>(file.get_int_or("seed", 42));
  rc.data_dir = file.get_or("data_dir", "");

  rc.synth.size = static_cast<int>(file.get_int_or("image_size", rc.model.input_size));
  rc.synth.train_count = static_cast<int>(file.get_int_or("synth_train", 512));
  rc.synth.val_count = static_cast<int>(file.get_int_or("synth_val", 64));
  rc.synth.test_count = static_cast<int>(file.get_int_or("synth_test", 64));
  rc.synth.area_min = file.get_double_or("area_min", 0.05);
  rc.synth.area_max = file.get_double_or("area_max", 0.35);
  rc.synth.host_sigma_min = file.get_double_or("host_sigma_min", 0.010);
  rc.synth.host_sigma_max = file.get_double_or("host_sigma_max", 0.020);
  rc.synth.donor_sigma_gap = file.get_double_or("donor_sigma_gap", 0.045);
  rc.synth.host_amp_min = file.get_double_or("host_amp_min", 0.005);
  rc.synth.host_amp_max = file.get_double_or("host_amp_max", 0.015);
  rc.synth.donor_amp_gap = file.get_double_or("donor_amp_gap", 0.020);
  rc.synth.hard_negative = file.get_bool_or("synth_hard_negative", false);
  if (rc.synth.train_count < 0 || rc.synth.val_count < 0 || rc.synth.test_count < 0) {
    throw ConfigError("config: split counts must be >= 0");
  }

  rc.epochs = file.get_int_or("epochs", 10);
  rc.batch_size = static_cast<int>(file.get_int_or("batch_size", 4));
  rc.lr_max = file.get_double_or("lr_max", 1e-4);
  rc.lr_min = file.get_double_or("lr_min", 1e-7);
  rc.checkpoint_every = file.get_int_or("checkpoint_every", 0);
  if (rc.epochs < 1 || rc.batch_size < 1) {
    throw ConfigError("config: epochs and batch_size must be >= 1");
  }

  rc.threshold = file.get_double_or("threshold", 0.5);
  rc.robustness = file.get_bool_or("robustness", false);
  rc.grid.jpeg_qualities = file.get_int_list_or("jpeg_qualities", {90, 70, 50, 30});
  rc.grid.blur_kernels = file.get_int_list_or("blur_kernels", {3, 5, 7});
  rc.grid.noise_sigmas = file.get_double_list_or("noise_sigmas", {0.02, 0.05, 0.1});
  return rc;
}

}  // namespace sparseloc
