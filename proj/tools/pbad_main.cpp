// Command-line front end. Talks to the library only through pbad.h.

#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pbad.h"

namespace {

std::string flag_name(const std::string& key) {
  std::string s = key;
  for (auto& ch : s)
    if (ch == '_') ch = '-';
  return "--" + s;
}

void log_line(const char* message, void*) { std::fprintf(stderr, "[pbad] %s\n", message); }

int report(pbad_status s) {
  if (s != PBAD_OK) std::fprintf(stderr, "error: %s\n", pbad_last_error());
  return static_cast<int>(s);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Patch-based texture anomaly detection: training, scoring and pixel-level evaluation"};
  app.set_version_flag("--version", pbad_version());
  app.require_subcommand(1);
  std::string config_file;
  bool quiet = false;
  app.add_option("-c,--config", config_file, "INI file applied over the defaults (flags override it)")
      ->check(CLI::ExistingFile);
  app.add_flag("-q,--quiet", quiet, "suppress progress messages");

  static const std::map<std::string, std::string> blurbs{
      {"synth", "write a synthetic texture dataset with ground-truth masks"},
      {"train-ae", "train the continuous autoencoder (ae.ckpt)"},
      {"train-vqae", "train the vector-quantized autoencoder (vqae.ckpt)"},
      {"fit-svm", "fit the one-class SVM on training latents (svm.ckpt; --method svm-discrete for svm-discrete.ckpt)"},
      {"train-prior", "train the autoregressive prior on codebook indices (prior.ckpt)"},
      {"score", "write one anomaly map per test image for --method"},
      {"eval", "compute pixel metrics for every scored method (metrics.csv)"},
  };

  std::vector<std::string> keys;
  for (size_t i = 0; i < pbad_config_key_count(); ++i) keys.emplace_back(pbad_config_key_name(i));
  std::map<std::string, std::map<std::string, std::string>> values;
  std::map<std::string, std::map<std::string, CLI::Option*>> options;

  for (size_t s = 0; s < pbad_subcommand_count(); ++s) {
    const std::string name = pbad_subcommand_name(s);
    auto* sub = app.add_subcommand(name, blurbs.at(name));
    for (size_t i = 0; i < keys.size(); ++i) {
      const std::string group = std::string("[") + pbad_config_key_section(i) + "]";
      auto* opt = sub->add_option(flag_name(keys[i]), values[name][keys[i]], pbad_config_key_help(i))->group(group);
      if (keys[i] == "previews" || keys[i] == "resample_centers" || keys[i] == "restore_sample" ||
          keys[i] == "restore_original_context") {
        opt->expected(0, 1)->default_str("true");
      }
      options[name][keys[i]] = opt;
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(PBAD_USAGE);
  }

  const std::string sub = app.get_subcommands().front()->get_name();
  pbad_config* cfg = nullptr;
  if (const auto s = pbad_config_new(&cfg); s != PBAD_OK) return report(s);
  pbad_status status = PBAD_OK;
  if (!config_file.empty()) status = pbad_config_load_file(cfg, config_file.c_str());
  for (const auto& key : keys) {
    if (status != PBAD_OK) break;
    auto* opt = options[sub][key];
    if (opt->count() == 0) continue;
    std::string v = values[sub][key];
    if (v.empty()) v = "true";
    status = pbad_config_set(cfg, key.c_str(), v.c_str());
  }
  if (status == PBAD_OK) status = pbad_config_validate(cfg);
  if (status == PBAD_OK) status = pbad_run(sub.c_str(), cfg, quiet ? nullptr : log_line, nullptr);
  pbad_config_free(cfg);
  return report(status);
}
