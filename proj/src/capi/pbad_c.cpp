#include "pbad.h"

#include <cstring>
#include <exception>
#include <filesystem>
#include <fstream>
#include <new>
#include <sstream>
#include <string>

#include "pbad/anomaly.hpp"
#include "pbad/error.hpp"
#include "pbad/metrics.hpp"
#include "pbad/pipeline.hpp"

struct pbad_config {
  pbad::RunConfig cfg;
};

struct pbad_map {
  pbad::AnomalyMap map;
  std::string method;
};

namespace {

thread_local std::string g_last_error;

pbad_status fail(pbad_status s, const std::string& msg) {
  g_last_error = msg;
  return s;
}

template <class Fn>
pbad_status guarded(Fn&& fn) {
  try {
    fn();
    return PBAD_OK;
  } catch (const pbad::Error& e) {
    return fail(static_cast<pbad_status>(e.kind()), e.what());
  } catch (const std::bad_alloc&) {
    return fail(PBAD_INTERNAL, "out of memory");
  } catch (const std::exception& e) {
    return fail(PBAD_INTERNAL, e.what());
  } catch (...) {
    return fail(PBAD_INTERNAL, "unknown failure");
  }
}

pbad_status copy_out(const std::string& s, char* buf, size_t len, size_t* needed) {
  if (needed) *needed = s.size() + 1;
  if (!buf || len == 0) return PBAD_OK;
  if (len < s.size() + 1) return fail(PBAD_USAGE, "buffer too small: need " + std::to_string(s.size() + 1) + " bytes");
  std::memcpy(buf, s.c_str(), s.size() + 1);
  return PBAD_OK;
}

#define PBAD_REQUIRE(ptr)                                              \
  do {                                                                 \
    if (!(ptr)) return fail(PBAD_USAGE, #ptr " must not be NULL");     \
  } while (0)

}  // namespace

extern "C" {

const char* pbad_last_error(void) { return g_last_error.c_str(); }
const char* pbad_version(void) { return "0.1.0"; }

pbad_status pbad_config_new(pbad_config** out) {
  PBAD_REQUIRE(out);
  *out = nullptr;
  return guarded([&] { *out = new pbad_config{pbad::RunConfig::defaults()}; });
}

void pbad_config_free(pbad_config* cfg) { delete cfg; }

pbad_status pbad_config_load_file(pbad_config* cfg, const char* path) {
  PBAD_REQUIRE(cfg);
  PBAD_REQUIRE(path);
  return guarded([&] {
    std::filesystem::path p(path);
    pbad::RunConfig next = cfg->cfg;
    std::ifstream in(p, std::ios::binary);
    if (!in) throw pbad::UsageError("cannot read config file " + p.string());
    std::stringstream ss;
    ss << in.rdbuf();
    pbad::apply_ini(next, ss.str(), p.string());
    cfg->cfg = std::move(next);
  });
}

pbad_status pbad_config_set(pbad_config* cfg, const char* key, const char* value) {
  PBAD_REQUIRE(cfg);
  PBAD_REQUIRE(key);
  PBAD_REQUIRE(value);
  return guarded([&] { cfg->cfg.set(key, value); });
}

pbad_status pbad_config_get(const pbad_config* cfg, const char* key, char* buf, size_t len, size_t* needed) {
  PBAD_REQUIRE(cfg);
  PBAD_REQUIRE(key);
  std::string v;
  const auto s = guarded([&] { v = cfg->cfg.get(key); });
  return s == PBAD_OK ? copy_out(v, buf, len, needed) : s;
}

pbad_status pbad_config_validate(const pbad_config* cfg) {
  PBAD_REQUIRE(cfg);
  return guarded([&] { cfg->cfg.validate(); });
}

pbad_status pbad_config_to_ini(const pbad_config* cfg, char* buf, size_t len, size_t* needed) {
  PBAD_REQUIRE(cfg);
  return copy_out(cfg->cfg.to_ini(), buf, len, needed);
}

size_t pbad_config_key_count(void) { return pbad::config_keys().size(); }

const char* pbad_config_key_name(size_t i) {
  return i < pbad::config_keys().size() ? pbad::config_keys()[i].key.c_str() : nullptr;
}

const char* pbad_config_key_section(size_t i) {
  return i < pbad::config_keys().size() ? pbad::config_keys()[i].section.c_str() : nullptr;
}

const char* pbad_config_key_help(size_t i) {
  return i < pbad::config_keys().size() ? pbad::config_keys()[i].help.c_str() : nullptr;
}

size_t pbad_subcommand_count(void) { return pbad::subcommands().size(); }

const char* pbad_subcommand_name(size_t i) {
  return i < pbad::subcommands().size() ? pbad::subcommands()[i].c_str() : nullptr;
}

pbad_status pbad_run(const char* subcommand, const pbad_config* cfg, pbad_log_fn log, void* user) {
  PBAD_REQUIRE(subcommand);
  PBAD_REQUIRE(cfg);
  return guarded([&] {
    pbad::LogSink sink;
    if (log) sink = [log, user](const std::string& msg) { log(msg.c_str(), user); };
    pbad::run(subcommand, cfg->cfg, sink);
  });
}

pbad_status pbad_map_load(const char* path, pbad_map** out) {
  PBAD_REQUIRE(path);
  PBAD_REQUIRE(out);
  *out = nullptr;
  return guarded([&] {
    auto m = pbad::import_map(path);
    const std::string method = pbad::to_string(m.method);
    *out = new pbad_map{std::move(m), method};
  });
}

void pbad_map_free(pbad_map* map) { delete map; }
size_t pbad_map_height(const pbad_map* map) { return map ? map->map.height : 0; }
size_t pbad_map_width(const pbad_map* map) { return map ? map->map.width : 0; }
const float* pbad_map_scores(const pbad_map* map) { return map ? map->map.scores.data() : nullptr; }
const char* pbad_map_method(const pbad_map* map) { return map ? map->method.c_str() : nullptr; }

pbad_status pbad_map_write_preview(const pbad_map* map, const char* png_path) {
  PBAD_REQUIRE(map);
  PBAD_REQUIRE(png_path);
  return guarded([&] { pbad::write_map_preview(map->map, png_path); });
}

pbad_status pbad_roc(const float* scores, const uint8_t* labels, size_t n, double fpr_limit, double* auroc,
                     double* auroc_limited) {
  PBAD_REQUIRE(scores);
  PBAD_REQUIRE(labels);
  return guarded([&] {
    pbad::ScoredPixels sp;
    sp.append({scores, n}, {labels, n});
    const auto c = pbad::roc_curve(sp, fpr_limit);
    if (auroc) *auroc = c.area;
    if (auroc_limited) *auroc_limited = c.limited;
  });
}

pbad_status pbad_pr(const float* scores, const uint8_t* labels, size_t n, double* auprc) {
  PBAD_REQUIRE(scores);
  PBAD_REQUIRE(labels);
  return guarded([&] {
    pbad::ScoredPixels sp;
    sp.append({scores, n}, {labels, n});
    const auto c = pbad::pr_curve(sp);
    if (auprc) *auprc = c.area;
  });
}

}  // extern "C"
