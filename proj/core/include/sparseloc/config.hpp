#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "sparseloc/backbone.hpp"
#include "sparseloc/dataset.hpp"
#include "sparseloc/metrics.hpp"

namespace sparseloc {

// Flat `key = value` text with '#' comments.
class ConfigFile {
 public:
  static ConfigFile parse_file(const std::string& path);
  static ConfigFile parse_text(const std::string& text);

  bool has(const std::string& key) const;
  std::string get(const std::string& key) const;
  std::string get_or(const std::string& key, const std::string& fallback) const;
  std::int64_t get_int(const std::string& key) const;
  std::int64_t get_int_or(const std::string& key, std::int64_t fallback) const;
  double get_double_or(const std::string& key, double fallback) const;
  bool get_bool_or(const std::string& key, bool fallback) const;
  std::vector<int> get_int_list(const std::string& key) const;
  std::vector<int> get_int_list_or(const std::string& key, std::vector<int> fallback) const;
  std::vector<double> get_double_list_or(const std::string& key,
                                         std::vector<double> fallback) const;

  void set(const std::string& key, const std::string& value);

  // FNV-1a over sorted canonical `key=value` lines; flag overrides change it.
  std::uint64_t hash() const;
  std::string canonical_text() const;
  const std::map<std::string, std::string>& entries() const { return entries_; }

 private:
  std::map<std::string, std::string> entries_;
};

// Everything a CLI run needs, decoded and validated from a ConfigFile.
struct RunConfig {
  ModelConfig model;
  SynthesisParams synth;

  std::uint64_t seed = 42;
  std::string data_dir;

  std::int64_t epochs = 10;
  int batch_size = 4;
  double lr_max = 1e-4;
  double lr_min = 1e-7;
  std::int64_t checkpoint_every = 0;

  double threshold = 0.5;
  bool robustness = false;
  PerturbationGrid grid;

  // Missing required keys are reported together in one error.
  static RunConfig from_config(const ConfigFile& file);
};

}  // namespace sparseloc
