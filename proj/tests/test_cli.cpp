#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "pbad.h"
#include "pbad/error.hpp"
#include "pbad/pipeline.hpp"

namespace fs = std::filesystem;
using namespace pbad;

namespace {

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("pbad_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream(path, std::ios::binary) << text;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string("\"") + PBAD_CLI_PATH + "\" " + args + " > \"" + log.string() + "\" 2>&1";
  const int raw = std::system(cmd.c_str());
  return WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
}

std::string expect_usage(const std::vector<std::pair<std::string, std::string>>& flags, const fs::path* file = nullptr) {
  try {
    parse_config(file, flags);
  } catch (const UsageError& e) {
    return e.what();
  }
  FAIL("expected a usage error");
  return {};
}

// Small enough for one CPU: default network, few patches, one epoch, coarse stride.
std::string pipeline_ini(const fs::path& data, const fs::path& out) {
  std::ostringstream os;
  os << "[data]\ndata_root = " << data.string() << "\ncategory = synthetic\noutput = " << out.string()
     << "\nseed = 5\n"
     << "[train]\npatches_per_image = 20\nepochs = 1\nbatch = 40\n"
     << "[score]\nmethod = recon\nstride = 8\n"
     << "[eval]\npro_thresholds = 50\n"
     << "[synth]\nsynth_train = 4\nsynth_test_good = 2\nsynth_test_defect = 2\nsynth_side = 64\n";
  return os.str();
}

}  // namespace

TEST_SUITE("config") {
  TEST_CASE("defaults without file or flags") {
    const auto c = parse_config(nullptr, {});
    CHECK(c.nu == 0.03);
    CHECK(c.tau == 0.05);
    CHECK(c.codebook_size == 1024);
    CHECK(c.epochs == 10);
    CHECK(c.patch_size == 63);
    CHECK(c.patches_per_image == 1000);
    CHECK(c.batch == 100);
    CHECK(c.lr == 1e-3);
  }

  TEST_CASE("flag beats file") {
    const auto dir = scratch("precedence");
    const auto file = dir / "c.ini";
    write_text(file, "[svm]\nnu = 0.05\n[train]\nepochs = 3\n");
    const auto from_file = parse_config(&file, {});
    CHECK(from_file.nu == 0.05);
    CHECK(from_file.epochs == 3);
    const auto c = parse_config(&file, {{"nu", "0.1"}});
    CHECK(c.nu == 0.1);
    CHECK(c.epochs == 3);
  }

  TEST_CASE("unknown key is named") {
    CHECK(expect_usage({{"foo", "1"}}).find("foo") != std::string::npos);
    const auto dir = scratch("unknown");
    const auto file = dir / "c.ini";
    write_text(file, "[train]\nepochs = 2\nfoo = 1\n");
    const auto msg = expect_usage({}, &file);
    CHECK(msg.find("foo") != std::string::npos);
    CHECK(msg.find(":3") != std::string::npos);
  }

  TEST_CASE("malformed values and lines") {
    CHECK(expect_usage({{"epochs", "ten"}}).find("epochs") != std::string::npos);
    CHECK(!expect_usage({{"nu", "1.5"}}).empty());
    CHECK(!expect_usage({{"method", "magic"}}).empty());
    RunConfig c;
    try {
      apply_ini(c, "[train]\n\n# note\nthis line has no equals sign\n", "x.ini");
      FAIL("expected a usage error");
    } catch (const UsageError& e) {
      CHECK(std::string(e.what()).find("x.ini:4") != std::string::npos);
    }
  }

  TEST_CASE("ini text round trips") {
    auto c = parse_config(nullptr, {{"nu", "0.07"}, {"method", "restore"}, {"restore_sample", "true"}, {"seed", "9"}});
    RunConfig back;
    apply_ini(back, c.to_ini());
    CHECK(back.to_ini() == c.to_ini());
    CHECK(back.to_json() == c.to_json());
  }

  TEST_CASE("environment supplies the data root") {
    ::setenv("PBAD_DATA_ROOT", "/tmp/somewhere", 1);
    CHECK(parse_config(nullptr, {}).data_root == "/tmp/somewhere");
    CHECK(parse_config(nullptr, {{"data_root", "/x"}}).data_root == "/x");
    ::unsetenv("PBAD_DATA_ROOT");
    CHECK(parse_config(nullptr, {}).data_root == "data");
  }
}

TEST_SUITE("c api") {
  TEST_CASE("config handle") {
    pbad_config* cfg = nullptr;
    REQUIRE(pbad_config_new(&cfg) == PBAD_OK);
    CHECK(pbad_config_set(cfg, "nu", "0.2") == PBAD_OK);
    char buf[64];
    size_t needed = 0;
    REQUIRE(pbad_config_get(cfg, "nu", buf, sizeof buf, &needed) == PBAD_OK);
    CHECK(std::stod(buf) == 0.2);
    CHECK(pbad_config_get(cfg, "nu", buf, 1, &needed) == PBAD_USAGE);
    CHECK(needed > 1);

    CHECK(pbad_config_set(cfg, "foo", "1") == PBAD_USAGE);
    CHECK(std::string(pbad_last_error()).find("foo") != std::string::npos);
    CHECK(pbad_config_validate(cfg) == PBAD_OK);
    CHECK(pbad_config_set(cfg, "nu", "0") == PBAD_OK);
    CHECK(pbad_config_validate(cfg) == PBAD_USAGE);

    REQUIRE(pbad_config_to_ini(cfg, nullptr, 0, &needed) == PBAD_OK);
    std::string ini(needed, '\0');
    REQUIRE(pbad_config_to_ini(cfg, ini.data(), ini.size(), &needed) == PBAD_OK);
    CHECK(ini.find("nu = ") != std::string::npos);
    pbad_config_free(cfg);

    CHECK(pbad_config_new(nullptr) == PBAD_USAGE);
    CHECK(pbad_config_key_count() == config_keys().size());
    CHECK(pbad_subcommand_count() == 7);
    CHECK(pbad_run("nope", nullptr, nullptr, nullptr) == PBAD_USAGE);
  }

  TEST_CASE("pooled metrics") {
    const float s[] = {0.9f, 0.8f, 0.1f};
    const std::uint8_t y[] = {1, 1, 0};
    double a = 0, a30 = 0, ap = 0;
    REQUIRE(pbad_roc(s, y, 3, 0.3, &a, &a30) == PBAD_OK);
    CHECK(a == 1.0);
    CHECK(a30 == doctest::Approx(1.0));
    REQUIRE(pbad_pr(s, y, 3, &ap) == PBAD_OK);
    CHECK(ap == 1.0);
    const std::uint8_t one_class[] = {1, 1, 1};
    CHECK(pbad_roc(s, one_class, 3, 0.3, &a, &a30) != PBAD_OK);
    CHECK(pbad_map_load("/nonexistent/map.pbmap", nullptr) != PBAD_OK);
  }
}

TEST_SUITE("binary") {
  TEST_CASE("usage errors exit 1") {
    const auto dir = scratch("usage");
    CHECK(run_cli("", dir / "log") == 1);
    CHECK(run_cli("frobnicate", dir / "log") == 1);
    CHECK(run_cli("score --nu 2", dir / "log") == 1);
    CHECK(run_cli("--version", dir / "log") == 0);
    CHECK(read_text(dir / "log").find(pbad_version()) != std::string::npos);
  }

  TEST_CASE("restore without a prior is a data error") {
    const auto dir = scratch("noprior");
    const auto log = dir / "log";
    const int code = run_cli("score --method restore --output " + (dir / "run").string() + " --data-root " +
                              (dir / "data").string(),
                          log);
    CHECK(code == 2);
    const auto text = read_text(log);
    CHECK(text.find("error:") != std::string::npos);
    CHECK(text.find("Assertion") == std::string::npos);
  }

  TEST_CASE("synthetic pipeline is reproducible") {
    const auto dir = scratch("pipeline");
    const auto ini = dir / "run.ini";
    write_text(ini, pipeline_ini(dir / "data", dir / "a"));
    const auto log = dir / "log";
    const std::string c = "-q -c \"" + ini.string() + "\" ";
    for (const char* sub : {"synth", "train-ae", "score", "eval"}) {
      INFO(sub, ": ", read_text(log));
      REQUIRE(run_cli(c + sub, log) == 0);
    }
    REQUIRE(fs::exists(dir / "a" / "metrics.csv"));
    REQUIRE(fs::exists(dir / "a" / "config.ini"));
    REQUIRE(fs::exists(dir / "a" / "run_eval.json"));
    const auto csv = read_text(dir / "a" / "metrics.csv");
    CHECK(csv.find("recon,all,") != std::string::npos);

    // The snapshot written next to the outputs reproduces the run.
    const auto snap = dir / "a" / "config.ini";
    const std::string c2 = "-q -c \"" + snap.string() + "\" ";
    for (const char* sub : {"train-ae", "score", "eval"}) {
      INFO(sub, ": ", read_text(log));
      REQUIRE(run_cli(c2 + sub + " --output \"" + (dir / "b").string() + "\"", log) == 0);
    }
    CHECK(read_text(dir / "b" / "metrics.csv") == csv);

    // Scoring with more workers leaves the maps and metrics unchanged.
    for (const char* sub : {"score", "eval"}) {
      REQUIRE(run_cli(c2 + sub + " --workers 2 --output \"" + (dir / "b").string() + "\"", log) == 0);
    }
    CHECK(read_text(dir / "b" / "metrics.csv") == csv);
  }
}
