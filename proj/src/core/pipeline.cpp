#include "pbad/pipeline.hpp"

#include <charconv>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <variant>

#include "pbad/anomaly.hpp"
#include "pbad/autoencoder.hpp"
#include "pbad/checkpoint.hpp"
#include "pbad/dataset.hpp"
#include "pbad/error.hpp"
#include "pbad/metrics.hpp"
#include "pbad/prior.hpp"
#include "pbad/svm.hpp"
#include "pbad/synth.hpp"
#include "pbad/vq.hpp"

namespace pbad {

namespace fs = std::filesystem;

namespace {

using Member = std::variant<std::string RunConfig::*, std::size_t RunConfig::*,
                            double RunConfig::*, bool RunConfig::*>;

struct Field {
  ConfigKey meta;
  Member member;
};

const std::vector<Field>& fields() {
  static const std::vector<Field> f{
      {{"data", "data_root", "dataset root (MVTecAD layout); default $PBAD_DATA_ROOT or ./data"}, &RunConfig::data_root},
      {{"data", "category", "category directory under the data root"}, &RunConfig::category},
      {{"data", "output", "output directory for checkpoints, maps and metrics"}, &RunConfig::output},
      {{"data", "seed", "master seed"}, &RunConfig::seed},
      {{"data", "workers", "scoring threads (results do not depend on it)"}, &RunConfig::workers},
      {{"train", "patch_size", "patch side in pixels"}, &RunConfig::patch_size},
      {{"train", "patches_per_image", "training patches drawn per image"}, &RunConfig::patches_per_image},
      {{"train", "epochs", "autoencoder epochs"}, &RunConfig::epochs},
      {{"train", "batch", "autoencoder batch size"}, &RunConfig::batch},
      {{"train", "lr", "autoencoder Adam learning rate"}, &RunConfig::lr},
      {{"train", "init", "kaiming_uniform or xavier_uniform"}, &RunConfig::init},
      {{"train", "reduction", "sum_per_patch or mean"}, &RunConfig::reduction},
      {{"train", "patch_norm", "none or standardize"}, &RunConfig::patch_norm},
      {{"train", "resample_centers", "redraw patch centers every epoch"}, &RunConfig::resample_centers},
      {{"vq", "codebook_size", "codebook entries K"}, &RunConfig::codebook_size},
      {{"vq", "beta", "commitment weight"}, &RunConfig::beta},
      {{"svm", "nu", "one-class SVM nu"}, &RunConfig::nu},
      {{"svm", "gamma", "RBF gamma; 0 selects 1/(variance * dim)"}, &RunConfig::gamma},
      {{"svm", "variance", "per_coordinate or global variance for the gamma heuristic"}, &RunConfig::variance},
      {{"svm", "svm_input", "full latent grid or center site"}, &RunConfig::svm_input},
      {{"svm", "svm_tolerance", "KKT stopping tolerance"}, &RunConfig::svm_tolerance},
      {{"svm", "svm_cap", "maximum training rows (0 = all)"}, &RunConfig::svm_cap},
      {{"prior", "prior_d_model", "transformer width"}, &RunConfig::prior_d_model},
      {{"prior", "prior_layers", "transformer layers"}, &RunConfig::prior_layers},
      {{"prior", "prior_heads", "attention heads"}, &RunConfig::prior_heads},
      {{"prior", "prior_ff", "feed-forward width"}, &RunConfig::prior_ff},
      {{"prior", "prior_epochs", "prior epochs"}, &RunConfig::prior_epochs},
      {{"prior", "prior_batch", "prior batch size"}, &RunConfig::prior_batch},
      {{"prior", "prior_lr", "prior Adam learning rate"}, &RunConfig::prior_lr},
      {{"score", "method", "recon, recon-discrete, svm, svm-discrete or restore"}, &RunConfig::method},
      {{"score", "stride", "scoring grid stride"}, &RunConfig::stride},
      {{"score", "score_batch", "patches per inference batch"}, &RunConfig::score_batch},
      {{"score", "tau", "restoration probability threshold"}, &RunConfig::tau},
      {{"score", "restore_sample", "sample replacements instead of argmax"}, &RunConfig::restore_sample},
      {{"score", "restore_original_context", "judge tokens against the unrestored context"},
       &RunConfig::restore_original_context},
      {{"score", "previews", "also write 16-bit PNG previews of each map"}, &RunConfig::previews},
      {{"eval", "pro_thresholds", "quantile thresholds for the region-overlap curve"}, &RunConfig::pro_thresholds},
      {{"eval", "fpr_limit", "false-positive-rate limit for the limited areas"}, &RunConfig::fpr_limit},
      {{"synth", "synth_train", "synthetic training images"}, &RunConfig::synth_train},
      {{"synth", "synth_test_good", "synthetic defect-free test images"}, &RunConfig::synth_test_good},
      {{"synth", "synth_test_defect", "synthetic defective test images per defect type"}, &RunConfig::synth_test_defect},
      {{"synth", "synth_side", "synthetic image side"}, &RunConfig::synth_side},
      {{"synth", "synth_pattern", "grain or noise"}, &RunConfig::synth_pattern},
      {{"synth", "synth_defects", "comma-separated defect types (disk, bar)"}, &RunConfig::synth_defects},
      {{"synth", "synth_contrast", "defect contrast in [0, 1]"}, &RunConfig::synth_contrast},
  };
  return f;
}

const Field& find_field(const std::string& key) {
  for (const auto& f : fields())
    if (f.meta.key == key) return f;
  throw UsageError("unknown config key '" + key + "'");
}

template <class T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const char* end = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc{} || ptr != end || value.empty()) {
    throw UsageError("config key '" + key + "': cannot parse '" + value + "' as a number");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes" || value == "on") return true;
  if (value == "false" || value == "0" || value == "no" || value == "off") return false;
  throw UsageError("config key '" + key + "': expected true or false, got '" + value + "'");
}

std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<DefectShape> parse_defect_list(const std::string& list) {
  std::vector<DefectShape> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(parse_shape(item));
  }
  if (out.empty()) throw UsageError("synth_defects must name at least one defect type");
  return out;
}

}  // namespace

RunConfig RunConfig::defaults() {
  RunConfig c;
  if (const char* root = std::getenv("PBAD_DATA_ROOT"); root && *root) c.data_root = root;
  return c;
}

void RunConfig::set(const std::string& key, const std::string& raw) {
  const Field& f = find_field(key);
  const std::string value = trim(raw);
  std::visit(
      [&](auto m) {
        using V = std::remove_reference_t<decltype(this->*m)>;
        if constexpr (std::is_same_v<V, std::string>) {
          this->*m = value;
        } else if constexpr (std::is_same_v<V, bool>) {
          this->*m = parse_bool(key, value);
        } else {
          this->*m = parse_number<V>(key, value);
        }
      },
      f.member);
}

std::string RunConfig::get(const std::string& key) const {
  const Field& f = find_field(key);
  return std::visit(
      [&](auto m) -> std::string {
        const auto& v = this->*m;
        using V = std::remove_cvref_t<decltype(v)>;
        if constexpr (std::is_same_v<V, std::string>) return v;
        else if constexpr (std::is_same_v<V, bool>) return v ? "true" : "false";
        else if constexpr (std::is_same_v<V, double>) return format_double(v);
        else return std::to_string(v);
      },
      f.member);
}

nlohmann::json RunConfig::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& f : fields()) {
    std::visit([&](auto m) { j[f.meta.section][f.meta.key] = this->*m; }, f.member);
  }
  return j;
}

std::string RunConfig::to_ini() const {
  std::ostringstream os;
  std::string section;
  for (const auto& f : fields()) {
    if (f.meta.section != section) {
      if (!section.empty()) os << '\n';
      section = f.meta.section;
      os << '[' << section << "]\n";
    }
    os << f.meta.key << " = " << get(f.meta.key) << '\n';
  }
  return os.str();
}

void RunConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw UsageError(std::string(name) + " must be positive");
  };
  positive(workers, "workers");
  positive(patch_size, "patch_size");
  positive(patches_per_image, "patches_per_image");
  positive(batch, "batch");
  positive(codebook_size, "codebook_size");
  positive(stride, "stride");
  positive(score_batch, "score_batch");
  positive(pro_thresholds, "pro_thresholds");
  positive(prior_batch, "prior_batch");
  if (!(lr > 0) || !(prior_lr > 0)) throw UsageError("learning rates must be positive");
  if (!(nu > 0 && nu <= 1)) throw UsageError("nu must lie in (0, 1], got " + format_double(nu));
  if (!(gamma >= 0)) throw UsageError("gamma must be non-negative (0 selects the heuristic)");
  if (!(svm_tolerance > 0)) throw UsageError("svm_tolerance must be positive");
  if (!(beta >= 0)) throw UsageError("beta must be non-negative");
  if (!(tau >= 0 && tau <= 1)) throw UsageError("tau must lie in [0, 1], got " + format_double(tau));
  if (!(fpr_limit > 0 && fpr_limit <= 1)) throw UsageError("fpr_limit must lie in (0, 1]");
  if (!(synth_contrast >= 0 && synth_contrast <= 1)) throw UsageError("synth_contrast must lie in [0, 1]");
  parse_init(init);
  parse_reduction(reduction);
  parse_patch_norm(patch_norm);
  parse_variance_mode(variance);
  parse_svm_input(svm_input);
  parse_method(method);
  parse_pattern(synth_pattern);
  parse_defect_list(synth_defects);
}

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    for (const auto& f : fields()) k.push_back(f.meta);
    return k;
  }();
  return keys;
}

void apply_ini(RunConfig& config, const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line, section;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    const std::string where = origin + ":" + std::to_string(n) + ": ";
    line = trim(line);
    if (n == 1 && line.rfind("\xEF\xBB\xBF", 0) == 0) line = trim(line.substr(3));
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    if (line.front() == '[') {
      if (line.back() != ']' || line.size() < 3) throw UsageError(where + "malformed section header '" + line + "'");
      section = trim(line.substr(1, line.size() - 2));
      bool known = false;
      for (const auto& f : fields()) known = known || f.meta.section == section;
      if (!known) throw UsageError(where + "unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw UsageError(where + "expected 'key = value', got '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw UsageError(where + "missing key before '='");
    try {
      const Field& f = find_field(key);
      if (!section.empty() && f.meta.section != section) {
        throw UsageError("key '" + key + "' belongs in [" + f.meta.section + "], not [" + section + "]");
      }
      config.set(key, line.substr(eq + 1));
    } catch (const UsageError& e) {
      throw UsageError(where + e.what());
    }
  }
}

RunConfig parse_config(const fs::path* file, const std::vector<std::pair<std::string, std::string>>& flags) {
  RunConfig c = RunConfig::defaults();
  if (file) {
    std::ifstream in(*file, std::ios::binary);
    if (!in) throw UsageError("cannot read config file " + file->string());
    std::stringstream ss;
    ss << in.rdbuf();
    apply_ini(c, ss.str(), file->string());
  }
  for (const auto& [k, v] : flags) c.set(k, v);
  c.validate();
  return c;
}

const std::vector<std::string>& subcommands() {
  static const std::vector<std::string> s{"synth", "train-ae", "train-vqae", "fit-svm", "train-prior", "score", "eval"};
  return s;
}

// ---------------------------------------------------------------------------

namespace {

struct Ctx {
  const RunConfig& cfg;
  const LogSink& log;
  fs::path out;
  RunResult result;
  std::map<std::string, std::string> hashes;

  void say(const std::string& msg) const {
    if (log) log(msg);
  }
  fs::path ckpt(const std::string& name) const { return out / name; }
  void produced(const fs::path& p) { result.outputs.push_back(p); }
  void hashed(const fs::path& p) { hashes[p.filename().string()] = hash_hex(read_container(p).content_hash()); }
};

fs::path require_file(const fs::path& path, const std::string& producer) {
  if (!fs::exists(path)) {
    throw DataError("missing prerequisite checkpoint " + path.string() + " (produce it with `" + producer + "`)");
  }
  return path;
}

AeTrainConfig ae_config(const RunConfig& c) {
  AeTrainConfig t;
  t.arch.input_side = c.patch_size;
  t.patches_per_image = c.patches_per_image;
  t.epochs = c.epochs;
  t.batch = c.batch;
  t.adam.lr = c.lr;
  t.seed = c.seed;
  t.resample_each_epoch = c.resample_centers;
  t.init = parse_init(c.init);
  t.reduction = parse_reduction(c.reduction);
  t.patch_norm = parse_patch_norm(c.patch_norm);
  return t;
}

DatasetManifest manifest_of(const RunConfig& c) { return scan_mvtec(c.data_root, c.category); }

void log_epoch(const Ctx& ctx, const EpochReport& r, std::size_t epochs, double seconds) {
  std::ostringstream os;
  os << "epoch " << r.epoch << "/" << epochs << " loss " << r.mean_loss;
  for (const auto& [k, v] : r.extras) os << ' ' << k << ' ' << v;
  os << " (" << static_cast<long>(seconds) << " s)";
  ctx.say(os.str());
}

template <class Fn>
void for_each_chunk(std::span<const ImageRGB> images, std::span<const PatchCoord> coords, std::size_t side,
                    std::size_t chunk, Fn&& fn) {
  NoGradGuard guard;
  for (std::size_t b = 0; b < coords.size(); b += chunk) {
    const auto part = coords.subspan(b, std::min(chunk, coords.size() - b));
    fn(gather_patches(images, part, side));
  }
}

void do_synth(Ctx& ctx) {
  const auto& c = ctx.cfg;
  SynthDatasetSpec spec;
  spec.train = c.synth_train;
  spec.test_good = c.synth_test_good;
  spec.test_defect = c.synth_test_defect;
  spec.side = c.synth_side;
  spec.pattern = parse_pattern(c.synth_pattern);
  spec.defect_types = parse_defect_list(c.synth_defects);
  spec.contrast = c.synth_contrast;
  const std::size_t n = write_synthetic_dataset(c.data_root, c.category, spec, c.seed);
  ctx.say("wrote " + std::to_string(n) + " files under " + (fs::path(c.data_root) / c.category).string());
  ctx.produced(fs::path(c.data_root) / c.category);
}

void do_train_ae(Ctx& ctx) {
  const auto manifest = manifest_of(ctx.cfg);
  ctx.say(manifest.summary());
  auto tc = ae_config(ctx.cfg);
  const auto t0 = std::chrono::steady_clock::now();
  tc.on_epoch = [&](const EpochReport& r) {
    log_epoch(ctx, r, tc.epochs, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  };
  const auto model = train_ae(manifest, tc);
  const auto path = ctx.ckpt("ae.ckpt");
  save_checkpoint(model, path);
  ctx.produced(path);
  ctx.hashed(path);
}

void do_train_vqae(Ctx& ctx) {
  const auto manifest = manifest_of(ctx.cfg);
  ctx.say(manifest.summary());
  VqTrainConfig tc;
  tc.base = ae_config(ctx.cfg);
  tc.codebook_size = ctx.cfg.codebook_size;
  tc.beta = ctx.cfg.beta;
  const auto t0 = std::chrono::steady_clock::now();
  tc.base.on_epoch = [&](const EpochReport& r) {
    log_epoch(ctx, r, tc.base.epochs, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  };
  const auto model = train_vqae(manifest, tc);
  const auto path = ctx.ckpt("vqae.ckpt");
  save_checkpoint(model, path);
  ctx.produced(path);
  ctx.hashed(path);
}

void do_fit_svm(Ctx& ctx) {
  const auto& c = ctx.cfg;
  const bool discrete = parse_method(c.method) == Method::svm_discrete;
  const auto manifest = manifest_of(c);
  const auto images = load_train_images(manifest);
  const auto centers = training_centers(images, ae_config(c), 0);
  const SvmInput input = parse_svm_input(c.svm_input);
  std::vector<float> features;
  std::size_t dim = 0;
  std::string encoder_hash;
  if (discrete) {
    const auto vq = load_vq_checkpoint(require_file(ctx.ckpt("vqae.ckpt"), "train-vqae"));
    ctx.hashed(ctx.ckpt("vqae.ckpt"));
    const std::size_t S = vq.net.arch().latent_side(), d = vq.codebook.dim();
    dim = input == SvmInput::full ? d * S * S : d;
    encoder_hash = hash_hex(vq.content_hash());
    for_each_chunk(images, centers, vq.net.arch().input_side, c.score_batch, [&](const PatchBatch& b) {
      const auto q = vq.encode_quantized(b.to_tensor());
      std::vector<float> zq;
      for (const auto& l : q) zq.insert(zq.end(), l.vectors.begin(), l.vectors.end());
      const auto f = svm_features(zq, q.size(), d, S, input);
      features.insert(features.end(), f.begin(), f.end());
    });
  } else {
    const auto ae = load_checkpoint(require_file(ctx.ckpt("ae.ckpt"), "train-ae"));
    ctx.hashed(ctx.ckpt("ae.ckpt"));
    const std::size_t S = ae.net.arch().latent_side(), d = ae.net.arch().latent_channels();
    dim = input == SvmInput::full ? d * S * S : d;
    encoder_hash = hash_hex(ae.content_hash());
    for_each_chunk(images, centers, ae.net.arch().input_side, c.score_batch, [&](const PatchBatch& b) {
      const Tensor z = ae.net.encode(b.to_tensor(), Mode::infer);
      const auto f = svm_features(z.data(), b.size(), d, S, input);
      features.insert(features.end(), f.begin(), f.end());
    });
  }
  ctx.say("fitting one-class SVM on " + std::to_string(features.size() / dim) + " latents of dimension " +
          std::to_string(dim));
  SvmOptions so;
  so.nu = c.nu;
  so.gamma = c.gamma;
  so.variance = parse_variance_mode(c.variance);
  so.tolerance = c.svm_tolerance;
  so.subsample_cap = c.svm_cap;
  so.seed = c.seed;
  auto fit = fit_ocsvm_detailed(features, dim, so);
  fit.model.input = input;
  fit.model.encoder_hash = encoder_hash;
  std::ostringstream os;
  os << "converged after " << fit.iterations << " iterations: " << fit.model.support_count() << " support vectors, gamma "
     << fit.model.gamma << ", rho " << fit.model.rho;
  ctx.say(os.str());
  const auto path = ctx.ckpt(discrete ? "svm-discrete.ckpt" : "svm.ckpt");
  save_svm(fit.model, path);
  ctx.produced(path);
  ctx.hashed(path);
}

void do_train_prior(Ctx& ctx) {
  const auto& c = ctx.cfg;
  const auto vq = load_vq_checkpoint(require_file(ctx.ckpt("vqae.ckpt"), "train-vqae"));
  ctx.hashed(ctx.ckpt("vqae.ckpt"));
  const auto manifest = manifest_of(c);
  const auto images = load_train_images(manifest);
  const auto centers = training_centers(images, ae_config(c), 0);
  std::vector<TokenSequence> sequences;
  for_each_chunk(images, centers, vq.net.arch().input_side, c.score_batch, [&](const PatchBatch& b) {
    for (const auto& q : vq.encode_quantized(b.to_tensor())) {
      sequences.push_back(tokens_from_grid(q.indices, vq.codebook.size()));
    }
  });
  PriorTrainConfig tc;
  tc.net.vocab = vq.codebook.size();
  tc.net.grid_side = vq.net.arch().latent_side();
  tc.net.d_model = c.prior_d_model;
  tc.net.layers = c.prior_layers;
  tc.net.heads = c.prior_heads;
  tc.net.ff = c.prior_ff;
  tc.epochs = c.prior_epochs;
  tc.batch = c.prior_batch;
  tc.adam.lr = c.prior_lr;
  tc.seed = c.seed;
  const auto t0 = std::chrono::steady_clock::now();
  tc.on_epoch = [&](const PriorEpoch& e) {
    std::ostringstream os;
    os << "epoch " << e.epoch << "/" << tc.epochs << " loss " << e.loss << " perplexity " << e.perplexity
       << " accuracy " << e.accuracy << " ("
       << static_cast<long>(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()) << " s)";
    ctx.say(os.str());
  };
  ctx.say("training prior on " + std::to_string(sequences.size()) + " token grids");
  const auto prior = train_prior(sequences, tc);
  const auto path = ctx.ckpt("prior.ckpt");
  save_prior(prior, path);
  ctx.produced(path);
  ctx.hashed(path);
}

void do_score(Ctx& ctx) {
  const auto& c = ctx.cfg;
  const Method method = parse_method(c.method);
  ScoreOptions so;
  so.stride = c.stride;
  so.workers = c.workers;
  so.batch = c.score_batch;
  so.ssim.window = c.patch_size;
  so.restore.tau = c.tau;
  so.restore.sample = c.restore_sample;
  so.restore.seed = c.seed;
  so.restore.original_context = c.restore_original_context;

  std::optional<AeModel> ae;
  std::optional<VqModel> vq;
  std::optional<SvmModel> svm;
  std::optional<PriorModel> prior;
  auto load = [&](const std::string& name, const std::string& producer) {
    const auto p = require_file(ctx.ckpt(name), producer);
    ctx.hashed(p);
    return p;
  };
  switch (method) {
    case Method::recon: ae = load_checkpoint(load("ae.ckpt", "train-ae")); break;
    case Method::recon_discrete: vq = load_vq_checkpoint(load("vqae.ckpt", "train-vqae")); break;
    case Method::svm:
      ae = load_checkpoint(load("ae.ckpt", "train-ae"));
      svm = load_svm(load("svm.ckpt", "fit-svm --method svm"));
      break;
    case Method::svm_discrete:
      vq = load_vq_checkpoint(load("vqae.ckpt", "train-vqae"));
      svm = load_svm(load("svm-discrete.ckpt", "fit-svm --method svm-discrete"));
      break;
    case Method::restore:
      vq = load_vq_checkpoint(load("vqae.ckpt", "train-vqae"));
      prior = load_prior(load("prior.ckpt", "train-prior"), vq->codebook.size());
      break;
  }

  const auto manifest = manifest_of(c);
  if (manifest.test.empty()) throw DataError("no test images under " + manifest.root.string());
  const fs::path maps_root = ctx.out / "maps";
  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t i = 0; i < manifest.test.size(); ++i) {
    const auto& entry = manifest.test[i];
    const auto image = load_image(entry.image);
    AnomalyMap map;
    switch (method) {
      case Method::recon: map = score_map_recon(image, *ae, so); break;
      case Method::recon_discrete: map = score_map_recon(image, *vq, so); break;
      case Method::svm: map = score_map_svm(image, *ae, *svm, so); break;
      case Method::svm_discrete: map = score_map_svm(image, *vq, *svm, so); break;
      case Method::restore: map = score_map_restore(image, *vq, *prior, so); break;
    }
    map.provenance["image"] = fs::relative(entry.image, manifest.root).generic_string();
    const auto path = map_path(maps_root, c.method, entry);
    fs::create_directories(path.parent_path());
    export_map(map, path);
    ctx.produced(path);
    if (c.previews) {
      auto png = path;
      png.replace_extension(".png");
      write_map_preview(map, png);
      ctx.produced(png);
    }
    ctx.say("scored " + std::to_string(i + 1) + "/" + std::to_string(manifest.test.size()) + " " +
            entry.defect_type + "/" + entry.stem() + " (" +
            std::to_string(static_cast<long>(
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count())) +
            " s)");
  }
}

void do_eval(Ctx& ctx) {
  const auto& c = ctx.cfg;
  const auto manifest = manifest_of(c);
  EvalOptions eo;
  eo.pro.thresholds = c.pro_thresholds;
  eo.pro.fpr_limit = c.fpr_limit;
  eo.fpr_limit = c.fpr_limit;
  const auto rows = evaluate(ctx.out / "maps", manifest, eo);
  const auto path = ctx.out / "metrics.csv";
  write_metrics_csv(path, rows, eo);
  ctx.produced(path);
  for (const auto& r : rows) {
    if (r.defect_type != "all") continue;
    std::ostringstream os;
    os.precision(4);
    os << std::fixed << r.method << ": auroc " << r.auroc << " auroc30 " << r.auroc30 << " auprc " << r.auprc
       << " aupro " << r.aupro << " aupro30 " << r.aupro30;
    ctx.say(os.str());
  }
}

}  // namespace

RunResult run(const std::string& subcommand, const RunConfig& config, const LogSink& log) {
  config.validate();
  Ctx ctx{config, log, fs::path(config.output), {}, {}};
  const auto t0 = std::chrono::steady_clock::now();
  fs::create_directories(ctx.out);
  if (subcommand == "synth") do_synth(ctx);
  else if (subcommand == "train-ae") do_train_ae(ctx);
  else if (subcommand == "train-vqae") do_train_vqae(ctx);
  else if (subcommand == "fit-svm") do_fit_svm(ctx);
  else if (subcommand == "train-prior") do_train_prior(ctx);
  else if (subcommand == "score") do_score(ctx);
  else if (subcommand == "eval") do_eval(ctx);
  else throw UsageError("unknown subcommand '" + subcommand + "'");

  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  {
    std::ofstream ini(ctx.out / "config.ini", std::ios::binary);
    if (!ini) throw DataError("cannot write " + (ctx.out / "config.ini").string());
    ini << config.to_ini();
  }
  nlohmann::json outputs = nlohmann::json::array();
  for (const auto& p : ctx.result.outputs) outputs.push_back(p.generic_string());
  ctx.result.manifest = {{"subcommand", subcommand},
                         {"seed", config.seed},
                         {"config", config.to_json()},
                         {"checkpoints", ctx.hashes},
                         {"outputs", outputs},
                         {"wall_seconds", seconds}};
  const auto mpath = ctx.out / ("run_" + subcommand + ".json");
  std::ofstream m(mpath, std::ios::binary);
  if (!m) throw DataError("cannot write " + mpath.string());
  m << ctx.result.manifest.dump(2) << '\n';
  return ctx.result;
}

}  // namespace pbad
