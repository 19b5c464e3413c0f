#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

namespace pbad {

/// Everything a run needs. Defaults follow the reference recipe; the data
/// root falls back to $PBAD_DATA_ROOT, then "data".
struct RunConfig {
  // [data]
  std::string data_root = "data";
  std::string category = "synthetic";
  std::string output = "run";
  std::size_t seed = 0;
  std::size_t workers = 1;
  // [train]
  std::size_t patch_size = 63;
  std::size_t patches_per_image = 1000;
  std::size_t epochs = 10;
  std::size_t batch = 100;
  double lr = 1e-3;
  std::string init = "kaiming_uniform";
  std::string reduction = "sum_per_patch";
  std::string patch_norm = "none";
  bool resample_centers = false;
  // [vq]
  std::size_t codebook_size = 1024;
  double beta = 0.25;
  // [svm]
  double nu = 0.03;
  double gamma = 0;
  std::string variance = "per_coordinate";
  std::string svm_input = "full";
  double svm_tolerance = 1e-3;
  std::size_t svm_cap = 20000;
  // [prior]
  std::size_t prior_d_model = 256;
  std::size_t prior_layers = 8;
  std::size_t prior_heads = 8;
  std::size_t prior_ff = 512;
  std::size_t prior_epochs = 10;
  std::size_t prior_batch = 32;
  double prior_lr = 3e-4;
  // [score]
  std::string method = "recon";
  std::size_t stride = 1;
  std::size_t score_batch = 64;
  double tau = 0.05;
  bool restore_sample = false;
  bool restore_original_context = false;
  bool previews = false;
  // [eval]
  std::size_t pro_thresholds = 200;
  double fpr_limit = 0.3;
  // [synth]
  std::size_t synth_train = 8;
  std::size_t synth_test_good = 3;
  std::size_t synth_test_defect = 4;
  std::size_t synth_side = 128;
  std::string synth_pattern = "grain";
  std::string synth_defects = "disk";
  double synth_contrast = 0.85;

  /// Defaults with the environment applied.
  static RunConfig defaults();

  /// Sets one field from its textual form; unknown keys and bad values throw UsageError.
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  nlohmann::json to_json() const;
  /// INI text that parse_config reads back to an identical config.
  std::string to_ini() const;
  /// Cross-field checks (positive sizes, ν in (0, 1], known enum names).
  void validate() const;
};

struct ConfigKey {
  std::string section;
  std::string key;
  std::string help;
};

const std::vector<ConfigKey>& config_keys();

/// Applies `key = value` lines under `[section]` headers onto `config`.
/// Blank lines and lines starting with '#' or ';' are skipped. Errors carry
/// `origin:line`.
void apply_ini(RunConfig& config, const std::string& text, const std::string& origin = "<config>");

/// Precedence: flags > file > environment > defaults.
RunConfig parse_config(const std::filesystem::path* file,
                       const std::vector<std::pair<std::string, std::string>>& flags);

const std::vector<std::string>& subcommands();

struct RunResult {
  std::vector<std::filesystem::path> outputs;
  nlohmann::json manifest;
};

using LogSink = std::function<void(const std::string&)>;

/// Runs one subcommand, writing its artifacts, config.ini and run_<sub>.json
/// into the output directory.
RunResult run(const std::string& subcommand, const RunConfig& config, const LogSink& log = {});

}  // namespace pbad
