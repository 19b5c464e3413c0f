// Acceptance runner: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails. Pass criterion names to run a subset; --list prints them.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "gradsuite.hpp"
#include "oracles.hpp"
#include "pbad/autoencoder.hpp"
#include "pbad/dataset.hpp"
#include "pbad/gradcheck.hpp"
#include "pbad/metrics.hpp"
#include "pbad/pipeline.hpp"
#include "pbad/prior.hpp"
#include "pbad/svm.hpp"
#include "pbad/vq.hpp"

using namespace pbad;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void expect(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << "[failed: " << what << "] ";
    }
  }
};

struct Criterion {
  std::string name;
  double budget_seconds;
  std::function<void(Outcome&)> body;
};

template <class T = float>
BasicTensor<T> random_batch(std::size_t B, std::size_t side, Rng& rng) {
  std::vector<T> v(B * 3 * side * side);
  for (auto& x : v) x = static_cast<T>(rng.uniform());
  return BasicTensor<T>::from_data({B, 3, side, side}, std::move(v));
}

AeArchitecture tiny_arch() {
  AeArchitecture a;
  a.input_side = 9;
  a.encoder = {{3, 1, 3}, {3, 1, 4}};
  return a;
}

ScoredPixels random_pixels(std::size_t n, double positive_rate, Rng& rng, std::size_t levels = 0) {
  ScoredPixels sp;
  for (std::size_t i = 0; i < n; ++i) {
    const double u = rng.uniform();
    sp.scores.push_back(levels ? static_cast<float>(rng.below(levels)) : static_cast<float>(u));
    sp.labels.push_back(rng.uniform() < positive_rate ? 1 : 0);
  }
  if (sp.positives() == 0) sp.labels[0] = 1;
  if (sp.negatives() == 0) sp.labels[0] = 0;
  return sp;
}

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("pbad_acceptance_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

const MetricsRow* find_row(const std::vector<MetricsRow>& rows, const std::string& method, const std::string& type) {
  for (const auto& r : rows)
    if (r.method == method && r.defect_type == type) return &r;
  return nullptr;
}

void check_shape_fidelity(Outcome& o) {
  Rng rng(0);
  const auto net = AutoencoderNet<float>::build(AeArchitecture{}, rng);
  const auto x = random_batch(2, 63, rng);
  const auto z = net.encode(x, Mode::infer);
  const auto y = net.decode(z, Mode::infer);
  o.expect(z.shape() == Shape{2, 16, 17, 17}, "latent shape");
  o.expect(y.shape() == x.shape(), "reconstruction shape");
  o.detail << "63x63x3 -> " << z.shape()[1] << "x" << z.shape()[2] << "x" << z.shape()[3] << " -> " << y.shape()[2]
           << "x" << y.shape()[3] << "x" << y.shape()[1];
}

void check_gradient_suite(Outcome& o) {
  constexpr double tol = 1e-4;
  double worst = 0;
  std::string worst_name;
  std::size_t checks = 0;
  for (std::uint64_t s = 0; s < 10; ++s)
    for (const auto& r : gradsuite::run(s)) {
      ++checks;
      if (r.max_relative_error > worst) worst = r.max_relative_error, worst_name = r.name;
    }
  o.expect(worst <= tol, "operator " + worst_name);

  Rng rng(7);
  auto net = AutoencoderNet<double>::build(AeArchitecture{}, rng);
  const auto batch = random_batch<double>(2, 63, rng);
  GradCheckOptions opts;
  opts.max_coordinates = 300;
  opts.seed = 7;
  const double ae = grad_check([&] { return ae_loss(net, batch, Mode::train); }, net.parameters(), opts).max_relative_error;
  o.expect(ae <= tol, "autoencoder loss");

  // Stop-gradients hide some paths from the analytic gradient, so each
  // parameter group is checked on the terms that reach it without a stop.
  auto tnet = AutoencoderNet<double>::build(tiny_arch(), rng);
  auto cb = Codebook::init(8, 4, rng).entries.cast<double>(true);
  const auto tb = random_batch<double>(3, 9, rng);
  const auto params = tnet.parameters();
  const auto split = static_cast<std::ptrdiff_t>(4 * tnet.arch().encoder.size() - 2);
  const std::vector<Tensor64> encoder(params.begin(), params.begin() + split), decoder(params.begin() + split, params.end());
  auto forward = [&] { return vq_forward(tnet, cb, tb, Mode::train, 0.25); };
  const double vq = std::max({grad_check([&] { return forward().total; }, decoder).max_relative_error,
                              grad_check([&] { return forward().codebook_term; }, {cb}).max_relative_error,
                              grad_check([&] { return forward().commitment_term; }, encoder).max_relative_error});
  o.expect(vq <= tol, "vq loss");
  o.detail << checks << " operator checks, worst " << worst << " (" << worst_name << "); ae loss " << ae << "; vq loss "
           << vq;
}

void check_straight_through(Outcome& o) {
  Rng rng(3);
  const auto net = AutoencoderNet<float>::build(AeArchitecture{}, rng);
  const Codebook cb = Codebook::init(64, 16, rng);
  int identical = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const auto f = vq_forward(net, cb.entries, random_batch(2, 63, rng), Mode::train, 0.25);
    f.recon_term.backward();
    const auto gz = f.z.grad(), gq = f.decoder_input.grad();
    const bool nonzero = std::any_of(gz.begin(), gz.end(), [](float v) { return v != 0.0f; });
    identical += nonzero && gz.size() == gq.size() && std::equal(gz.begin(), gz.end(), gq.begin());
  }
  o.expect(identical == 20, "bit equality");
  o.detail << identical << "/20 batches bit-identical";
}

void check_metric_oracles(Outcome& o) {
  Rng rng(2);
  double roc_gap = 0;
  for (std::size_t n : {12, 50, 200, 1000})
    for (std::size_t levels : {0, 5}) {
      const auto sp = random_pixels(n, 0.4, rng, levels);
      roc_gap = std::max(roc_gap, std::abs(roc_curve(sp).area - oracle::mann_whitney_auc(sp.scores, sp.labels)));
    }
  o.expect(roc_gap <= 1e-12, "auroc vs Mann-Whitney");

  const float values[] = {0.1f, 0.3f, 0.5f, 0.7f, 0.9f};
  double pro_gap = 0;
  for (int trial = 0; trial < 20; ++trial) {
    GroundTruthMask a(8, 8), b(8, 8);
    a.at(1, 1) = a.at(1, 2) = a.at(2, 1) = 1;
    b.at(3, 3) = b.at(3, 4) = b.at(4, 4) = b.at(4, 3) = 1;
    b.at(6, 0) = 1;
    std::vector<std::vector<float>> maps(2, std::vector<float>(64));
    for (auto& m : maps)
      for (auto& v : m) v = values[rng.below(5)];
    const std::vector<GroundTruthMask> masks{a, b};
    for (double limit : {0.3, 1.0}) {
      ProOptions opt;
      opt.fpr_limit = limit;
      pro_gap = std::max(pro_gap, std::abs(pro_curve(maps, masks, opt).limited -
                                           oracle::exhaustive_pro_area(maps, masks, limit)));
    }
  }
  o.expect(pro_gap <= 1e-6, "pro vs exhaustive enumeration");

  int cc_ok = 0;
  for (int t = 0; t < 100; ++t) {
    GroundTruthMask m(16, 16);
    const double p = 0.1 + 0.4 * rng.uniform();
    for (auto& v : m.labels) v = rng.uniform() < p ? 1 : 0;
    std::size_t count = 0;
    const auto labels = oracle::union_find_labels(m, &count);
    const auto regions = connected_components(m);
    bool same = regions.size() == count;
    for (std::size_t k = 0; same && k < regions.size(); ++k)
      for (auto px : regions[k].pixels) same = same && labels[px] == k + 1;
    cc_ok += same;
  }
  o.expect(cc_ok == 100, "connected components vs union-find");
  o.detail << "auroc gap " << roc_gap << ", pro gap " << pro_gap << ", components " << cc_ok << "/100";
}

void check_random_baselines(Outcome& o) {
  Rng rng(1);
  const auto roc = roc_curve(random_pixels(100000, 0.3, rng), 0.3);
  o.expect(std::abs(roc.limited - 0.15) <= 0.01, "auroc30");
  o.detail << "auroc30 " << roc.limited;
  for (double rate : {0.02, 0.04}) {
    const double ap = pr_curve(random_pixels(100000, rate, rng)).area;
    o.expect(std::abs(ap - rate) <= 0.005, "auprc at rate " + std::to_string(rate));
    o.detail << ", auprc@" << rate << " " << ap;
  }
}

void check_nu_property(Outcome& o) {
  int held = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const std::size_t n = 200;
    std::vector<float> x(n * 2);
    for (auto& v : x) v = static_cast<float>(rng.normal());
    SvmOptions opt;
    opt.nu = 0.1;
    const auto fit = fit_ocsvm_detailed(x, 2, opt);
    const double slack = opt.tolerance / (opt.nu * static_cast<double>(n));
    const auto f = fit.model.decision_batch(x);
    const double outliers = static_cast<double>(std::count_if(f.begin(), f.end(), [&](double v) { return v < -slack; })) / n;
    const double svs = static_cast<double>(fit.model.support_count()) / n;
    held += outliers <= 0.12 && svs >= 0.08;
  }
  o.expect(held >= 19, "nu-property in 95% of trials");
  o.detail << held << "/20 trials";

  double gap = 0;
  for (std::uint64_t seed : {1, 2, 3}) {
    Rng rng(seed);
    const std::size_t n = 50;
    std::vector<float> x(n * 3);
    for (auto& v : x) v = static_cast<float>(rng.normal());
    SvmOptions opt;
    opt.nu = 0.2;
    opt.gamma = 0.3;
    const auto fit = fit_ocsvm_detailed(x, 3, opt);
    std::vector<double> K(n * n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double d2 = 0;
        for (std::size_t c = 0; c < 3; ++c) d2 += std::pow(static_cast<double>(x[i * 3 + c]) - x[j * 3 + c], 2);
        K[i * n + j] = std::exp(-opt.gamma * d2);
      }
    double own = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) own += fit.alpha_all[i] * K[i * n + j] * fit.alpha_all[j];
    own *= 0.5;
    gap = std::max(gap, std::abs(own - oracle::dense_ocsvm_objective(K, n, 1.0 / (opt.nu * n))));
  }
  o.expect(gap <= 1e-3, "dual objective vs dense reference");
  o.detail << ", objective gap " << gap;
}

// Grid token j is (j + offset) mod K with a per-sequence offset.
TokenSequence toy_sequence(const PriorConfig& c, std::int32_t offset) {
  std::vector<std::int32_t> grid(c.grid_side * c.grid_side);
  for (std::size_t j = 0; j < grid.size(); ++j)
    grid[j] = static_cast<std::int32_t>((j + static_cast<std::size_t>(offset)) % c.vocab);
  return tokens_from_grid(grid, c.vocab);
}

void check_toy_grammar(Outcome& o) {
  PriorTrainConfig cfg;
  cfg.net.vocab = 8;
  cfg.net.grid_side = 4;
  cfg.net.d_model = 32;
  cfg.net.layers = 2;
  cfg.net.heads = 4;
  cfg.net.ff = 64;
  cfg.epochs = 30;
  cfg.batch = 16;
  cfg.adam.lr = 3e-3;
  cfg.seed = 1;
  Rng rng(5);
  std::vector<TokenSequence> corpus;
  for (int n = 0; n < 256; ++n) corpus.push_back(toy_sequence(cfg.net, static_cast<std::int32_t>(rng.below(8))));
  const auto model = train_prior(corpus, cfg);

  int clean_ok = 0;
  for (std::int32_t off = 0; off < 8; ++off) {
    const auto seq = toy_sequence(cfg.net, off);
    const auto r = restore(model, seq, RestoreOptions{});
    clean_ok += r.tokens == seq && r.replaced_count() == 0;
  }
  // The first grid token carries the random offset, so corruptions start
  // at the second one.
  Rng trials(2);
  int restored = 0;
  const int n = 200;
  for (int t = 0; t < n; ++t) {
    const auto clean = toy_sequence(cfg.net, static_cast<std::int32_t>(trials.below(8)));
    auto bad = clean;
    const std::size_t pos = 2 + trials.below(clean.size() - 2);
    bad[pos] = static_cast<std::int32_t>((bad[pos] + 1 + trials.below(7)) % 8);
    restored += restore(model, bad, RestoreOptions{}).tokens == clean;
  }
  const double acc = static_cast<double>(restored) / n;
  o.expect(acc >= 0.9, "restoration accuracy");
  o.expect(clean_ok == 8, "clean sequences untouched");
  o.detail << "restored " << restored << "/" << n << ", clean untouched " << clean_ok << "/8";
}

RunConfig pipeline_config(const fs::path& dir) {
  RunConfig c = RunConfig::defaults();
  c.data_root = (dir / "data").string();
  c.category = "synthetic";
  c.output = (dir / "run").string();
  c.patches_per_image = 200;
  c.method = "recon";
  return c;
}

void run_pipeline(const RunConfig& c) {
  for (const char* sub : {"synth", "train-ae", "score", "eval"}) run(sub, c);
}

void check_end_to_end(Outcome& o) {
  const auto dir = scratch("e2e");
  const auto c = pipeline_config(dir);
  run_pipeline(c);
  const auto rows = evaluate(fs::path(c.output) / "maps", scan_mvtec(c.data_root, c.category));
  const auto* all = find_row(rows, "recon", "all");
  if (!all) {
    o.expect(false, "missing metrics row");
    return;
  }
  o.expect(all->auroc >= 0.85, "auroc");
  o.expect(all->aupro30 >= 0.5, "aupro30");
  o.detail << "auroc " << all->auroc << ", aupro30 " << all->aupro30 << ", aupro " << all->aupro;
}

// Smaller than the end-to-end run; three full pipelines, the last scoring
// with two workers.
void check_determinism(Outcome& o) {
  std::vector<std::string> csv;
  for (std::size_t run_id = 0; run_id < 3; ++run_id) {
    const auto dir = scratch("det" + std::to_string(run_id));
    auto c = pipeline_config(dir);
    c.synth_side = 96;
    c.patches_per_image = 100;
    c.epochs = 3;
    c.stride = 2;
    c.workers = run_id == 2 ? 2 : 1;
    run_pipeline(c);
    csv.push_back(read_text(fs::path(c.output) / "metrics.csv"));
  }
  o.expect(!csv[0].empty(), "metrics written");
  o.expect(csv[0] == csv[1], "repeat run");
  o.expect(csv[0] == csv[2], "two workers");
  o.detail << "3 runs, " << csv[0].size() << " byte CSV, identical " << (csv[0] == csv[1]) << (csv[0] == csv[2]);
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> criteria{
      {"shape-fidelity", 1, check_shape_fidelity},
      {"gradient-suite", 120, check_gradient_suite},
      {"straight-through", 60, check_straight_through},
      {"metric-oracles", 60, check_metric_oracles},
      {"random-baselines", 30, check_random_baselines},
      {"nu-property", 120, check_nu_property},
      {"toy-grammar-restore", 600, check_toy_grammar},
      {"end-to-end-synthetic", 900, check_end_to_end},
      {"determinism", 1800, check_determinism},
  };
  std::vector<std::string> only(argv + 1, argv + argc);
  if (!only.empty() && only[0] == "--list") {
    for (const auto& c : criteria) std::printf("%s\n", c.name.c_str());
    std::printf("mvtec-wood-reproduction\n");
    return 0;
  }
  auto selected = [&](const std::string& name) {
    return only.empty() || std::find(only.begin(), only.end(), name) != only.end();
  };

  int failed = 0;
  for (const auto& c : criteria) {
    if (!selected(c.name)) continue;
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      c.body(o);
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail << "[exception: " << e.what() << "]";
    }
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (s > c.budget_seconds) o.detail << " [over the " << c.budget_seconds << " s budget]";
    const bool pass = o.pass && s <= c.budget_seconds;
    failed += !pass;
    std::printf("%s %s: %s (%.1f s)\n", pass ? "PASS" : "FAIL", c.name.c_str(), o.detail.str().c_str(), s);
    std::fflush(stdout);
  }
  if (selected("mvtec-wood-reproduction"))
    std::printf("SKIP mvtec-wood-reproduction: multi-hour run outside CI, see scripts/reproduce_wood.sh\n");
  return failed ? 1 : 0;
}
