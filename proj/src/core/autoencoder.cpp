#include "pbad/autoencoder.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#include "pbad/error.hpp"
#include "pbad/patches.hpp"

namespace pbad {

// ---------------------------------------------------------------------------
// Architecture

std::vector<std::size_t> AeArchitecture::spatial_chain() const {
  if (encoder.empty()) throw UsageError("architecture: encoder has no blocks");
  std::vector<std::size_t> chain{input_side};
  std::ostringstream trace;
  trace << input_side;
  for (const auto& b : encoder) {
    const std::size_t in = chain.back();
    if (b.kernel == 0 || b.stride == 0 || b.filters == 0) {
      throw UsageError("architecture: kernel, stride and filters must be positive");
    }
    if (in < b.kernel || (in - b.kernel) % b.stride != 0) {
      trace << " -> (" << in << " - " << b.kernel << ") not divisible by stride " << b.stride;
      throw UsageError("architecture: geometry does not close, shape chain " + trace.str());
    }
    chain.push_back(conv_output_size(in, b.kernel, b.stride));
    trace << " -> " << chain.back();
  }
  return chain;
}

std::size_t AeArchitecture::latent_size() const {
  const std::size_t s = latent_side();
  return latent_channels() * s * s;
}

void AeArchitecture::validate() const {
  if (input_channels == 0) throw UsageError("architecture: input channels must be positive");
  (void)spatial_chain();
}

nlohmann::json AeArchitecture::to_json() const {
  nlohmann::json blocks = nlohmann::json::array();
  for (const auto& b : encoder) blocks.push_back({b.kernel, b.stride, b.filters});
  return {{"input_side", input_side},
          {"input_channels", input_channels},
          {"encoder", blocks},
          {"hidden_activation", to_string(hidden_activation)},
          {"output_activation", to_string(output_activation)}};
}

AeArchitecture AeArchitecture::from_json(const nlohmann::json& j) {
  AeArchitecture a;
  a.input_side = j.at("input_side").get<std::size_t>();
  a.input_channels = j.at("input_channels").get<std::size_t>();
  a.encoder.clear();
  for (const auto& b : j.at("encoder")) a.encoder.push_back({b.at(0).get<std::size_t>(), b.at(1).get<std::size_t>(), b.at(2).get<std::size_t>()});
  a.hidden_activation = parse_activation(j.at("hidden_activation").get<std::string>());
  a.output_activation = parse_activation(j.at("output_activation").get<std::string>());
  return a;
}

std::string to_string(Activation a) {
  switch (a) {
    case Activation::gelu: return "gelu";
    case Activation::sigmoid: return "sigmoid";
    case Activation::identity: return "identity";
  }
  return "?";
}

Activation parse_activation(const std::string& s) {
  if (s == "gelu") return Activation::gelu;
  if (s == "sigmoid") return Activation::sigmoid;
  if (s == "identity") return Activation::identity;
  throw UsageError("unknown activation '" + s + "'");
}

std::string to_string(InitScheme s) { return s == InitScheme::kaiming_uniform ? "kaiming_uniform" : "xavier_uniform"; }

InitScheme parse_init(const std::string& s) {
  if (s == "kaiming_uniform") return InitScheme::kaiming_uniform;
  if (s == "xavier_uniform") return InitScheme::xavier_uniform;
  throw UsageError("unknown init scheme '" + s + "' (expected kaiming_uniform or xavier_uniform)");
}

std::string to_string(LossReduction r) { return r == LossReduction::sum_per_patch ? "sum_per_patch" : "mean"; }

LossReduction parse_reduction(const std::string& s) {
  if (s == "sum_per_patch") return LossReduction::sum_per_patch;
  if (s == "mean") return LossReduction::mean;
  throw UsageError("unknown loss reduction '" + s + "' (expected sum_per_patch or mean)");
}

std::string to_string(PatchNorm n) { return n == PatchNorm::none ? "none" : "standardize"; }

PatchNorm parse_patch_norm(const std::string& s) {
  if (s == "none") return PatchNorm::none;
  if (s == "standardize") return PatchNorm::standardize;
  throw UsageError("unknown patch normalization '" + s + "' (expected none or standardize)");
}

// ---------------------------------------------------------------------------
// Network

namespace {

template <class T>
BasicTensor<T> activate(const BasicTensor<T>& x, Activation a) {
  switch (a) {
    case Activation::gelu: return gelu(x);
    case Activation::sigmoid: return sigmoid(x);
    case Activation::identity: return x;
  }
  return x;
}

template <class T>
BasicTensor<T> init_weight(Shape shape, std::size_t fan_in, std::size_t fan_out, InitScheme init, Rng& rng) {
  const double bound = init == InitScheme::kaiming_uniform ? std::sqrt(6.0 / static_cast<double>(fan_in))
                                                           : std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<T> values(shape_numel(shape));
  for (auto& v : values) v = static_cast<T>(rng.uniform(-bound, bound));
  return BasicTensor<T>::from_data(std::move(shape), std::move(values), true);
}

template <class T>
NormLayer<T> make_norm(std::size_t channels) {
  return {BasicTensor<T>::full({channels}, T(1), true), BasicTensor<T>::zeros({channels}, true),
          RunningStats<T>(channels)};
}

std::vector<std::uint64_t> dims_of(const Shape& s) { return {s.begin(), s.end()}; }

template <class T>
void put_tensor(Container& c, const std::string& name, const BasicTensor<T>& t) {
  std::vector<float> v(t.data().begin(), t.data().end());
  c.put_f32(name, dims_of(t.shape()), v);
}

template <class T>
void put_vector(Container& c, const std::string& name, const std::vector<T>& values) {
  std::vector<float> v(values.begin(), values.end());
  c.put_f32(name, {v.size()}, v);
}

template <class T>
void load_into(const Container& c, const std::string& name, std::span<T> dest) {
  std::vector<std::uint64_t> dims;
  auto v = c.get_f32(name, &dims);
  if (v.size() != dest.size()) {
    throw DataError("checkpoint tensor '" + name + "' has " + std::to_string(v.size()) + " values, expected " +
                    std::to_string(dest.size()));
  }
  std::copy(v.begin(), v.end(), dest.begin());
}

}  // namespace

template <class T>
AutoencoderNet<T> AutoencoderNet<T>::build(const AeArchitecture& arch, Rng& rng, InitScheme init) {
  arch.validate();
  AutoencoderNet net;
  net.arch_ = arch;
  const std::size_t n = arch.encoder.size();
  std::size_t in_ch = arch.input_channels;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& b = arch.encoder[i];
    ConvLayer<T> layer{init_weight<T>({b.filters, in_ch, b.kernel, b.kernel}, in_ch * b.kernel * b.kernel,
                                      b.filters * b.kernel * b.kernel, init, rng),
                       BasicTensor<T>::zeros({b.filters}, true), {b.stride, b.stride}};
    net.encoder_.push_back(std::move(layer));
    if (i + 1 < n) net.encoder_norm_.push_back(make_norm<T>(b.filters));
    in_ch = b.filters;
  }
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t i = n - 1 - r;
    const auto& b = arch.encoder[i];
    const std::size_t out_ch = i == 0 ? arch.input_channels : arch.encoder[i - 1].filters;
    ConvLayer<T> layer{init_weight<T>({b.filters, out_ch, b.kernel, b.kernel}, b.filters * b.kernel * b.kernel,
                                      out_ch * b.kernel * b.kernel, init, rng),
                       BasicTensor<T>::zeros({out_ch}, true), {b.stride, b.stride}};
    net.decoder_.push_back(std::move(layer));
    if (i > 0) net.decoder_norm_.push_back(make_norm<T>(out_ch));
  }
  return net;
}

template <class T>
BasicTensor<T> AutoencoderNet<T>::encode(const BasicTensor<T>& x, Mode mode) const {
  const std::size_t side = arch_.input_side;
  if (x.rank() != 4 || x.dim(1) != arch_.input_channels || x.dim(2) != side || x.dim(3) != side) {
    throw UsageError("encode: expected B x " + std::to_string(arch_.input_channels) + " x " + std::to_string(side) +
                     " x " + std::to_string(side) + " input, got " + shape_str(x.shape()));
  }
  BasicTensor<T> h = x;
  if (normalizes_input()) h = channel_standardize(h, std::span<const T>(input_mean_), std::span<const T>(input_std_));
  for (std::size_t i = 0; i < encoder_.size(); ++i) {
    h = conv2d(h, encoder_[i].weight, encoder_[i].bias, encoder_[i].stride);
    if (i + 1 < encoder_.size()) {
      auto& bn = encoder_norm_[i];
      h = activate(batch_norm(h, bn.gamma, bn.beta, bn.stats, mode), arch_.hidden_activation);
    }
  }
  return h;
}

template <class T>
BasicTensor<T> AutoencoderNet<T>::decode(const BasicTensor<T>& z, Mode mode) const {
  const std::size_t side = arch_.latent_side();
  if (z.rank() != 4 || z.dim(1) != arch_.latent_channels() || z.dim(2) != side || z.dim(3) != side) {
    throw UsageError("decode: expected B x " + std::to_string(arch_.latent_channels()) + " x " +
                     std::to_string(side) + " x " + std::to_string(side) + " latent, got " + shape_str(z.shape()));
  }
  BasicTensor<T> h = z;
  for (std::size_t i = 0; i < decoder_.size(); ++i) {
    h = conv2d_transpose(h, decoder_[i].weight, decoder_[i].bias, decoder_[i].stride);
    if (i + 1 < decoder_.size()) {
      auto& bn = decoder_norm_[i];
      h = activate(batch_norm(h, bn.gamma, bn.beta, bn.stats, mode), arch_.hidden_activation);
    } else {
      h = activate(h, arch_.output_activation);
    }
  }
  return h;
}

template <class T>
std::vector<BasicTensor<T>> AutoencoderNet<T>::parameters() const {
  std::vector<BasicTensor<T>> out;
  for (const auto& l : encoder_) {
    out.push_back(l.weight);
    out.push_back(l.bias);
  }
  for (const auto& l : encoder_norm_) {
    out.push_back(l.gamma);
    out.push_back(l.beta);
  }
  for (const auto& l : decoder_) {
    out.push_back(l.weight);
    out.push_back(l.bias);
  }
  for (const auto& l : decoder_norm_) {
    out.push_back(l.gamma);
    out.push_back(l.beta);
  }
  return out;
}

template <class T>
std::size_t AutoencoderNet<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.numel();
  return n;
}

template <class T>
void AutoencoderNet<T>::set_input_normalization(std::vector<T> mean, std::vector<T> stddev) {
  if (mean.size() != arch_.input_channels || stddev.size() != arch_.input_channels) {
    throw UsageError("input normalization needs one mean and one std per channel");
  }
  for (auto s : stddev) {
    if (!(s > T(0))) throw NumericError("input normalization: non-positive channel std");
  }
  input_mean_ = std::move(mean);
  input_std_ = std::move(stddev);
}

template <class T>
void AutoencoderNet<T>::save(Container& out) const {
  out.metadata["architecture"] = arch_.to_json();
  for (std::size_t i = 0; i < encoder_.size(); ++i) {
    put_tensor(out, "enc." + std::to_string(i) + ".weight", encoder_[i].weight);
    put_tensor(out, "enc." + std::to_string(i) + ".bias", encoder_[i].bias);
  }
  for (std::size_t i = 0; i < encoder_norm_.size(); ++i) {
    const std::string p = "enc_bn." + std::to_string(i);
    put_tensor(out, p + ".gamma", encoder_norm_[i].gamma);
    put_tensor(out, p + ".beta", encoder_norm_[i].beta);
    put_vector(out, p + ".running_mean", encoder_norm_[i].stats.mean);
    put_vector(out, p + ".running_var", encoder_norm_[i].stats.var);
  }
  for (std::size_t i = 0; i < decoder_.size(); ++i) {
    put_tensor(out, "dec." + std::to_string(i) + ".weight", decoder_[i].weight);
    put_tensor(out, "dec." + std::to_string(i) + ".bias", decoder_[i].bias);
  }
  for (std::size_t i = 0; i < decoder_norm_.size(); ++i) {
    const std::string p = "dec_bn." + std::to_string(i);
    put_tensor(out, p + ".gamma", decoder_norm_[i].gamma);
    put_tensor(out, p + ".beta", decoder_norm_[i].beta);
    put_vector(out, p + ".running_mean", decoder_norm_[i].stats.mean);
    put_vector(out, p + ".running_var", decoder_norm_[i].stats.var);
  }
  if (normalizes_input()) {
    put_vector(out, "input_mean", input_mean_);
    put_vector(out, "input_std", input_std_);
  }
}

template <class T>
AutoencoderNet<T> AutoencoderNet<T>::load(const Container& in) {
  if (!in.metadata.contains("architecture")) throw DataError("checkpoint has no architecture record");
  AeArchitecture arch;
  try {
    arch = AeArchitecture::from_json(in.metadata.at("architecture"));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint architecture record is malformed: ") + e.what());
  }
  Rng unused(0);
  AutoencoderNet net = build(arch, unused);
  for (std::size_t i = 0; i < net.encoder_.size(); ++i) {
    load_into(in, "enc." + std::to_string(i) + ".weight", net.encoder_[i].weight.mutable_data());
    load_into(in, "enc." + std::to_string(i) + ".bias", net.encoder_[i].bias.mutable_data());
  }
  for (std::size_t i = 0; i < net.encoder_norm_.size(); ++i) {
    const std::string p = "enc_bn." + std::to_string(i);
    load_into(in, p + ".gamma", net.encoder_norm_[i].gamma.mutable_data());
    load_into(in, p + ".beta", net.encoder_norm_[i].beta.mutable_data());
    load_into(in, p + ".running_mean", std::span<T>(net.encoder_norm_[i].stats.mean));
    load_into(in, p + ".running_var", std::span<T>(net.encoder_norm_[i].stats.var));
  }
  for (std::size_t i = 0; i < net.decoder_.size(); ++i) {
    load_into(in, "dec." + std::to_string(i) + ".weight", net.decoder_[i].weight.mutable_data());
    load_into(in, "dec." + std::to_string(i) + ".bias", net.decoder_[i].bias.mutable_data());
  }
  for (std::size_t i = 0; i < net.decoder_norm_.size(); ++i) {
    const std::string p = "dec_bn." + std::to_string(i);
    load_into(in, p + ".gamma", net.decoder_norm_[i].gamma.mutable_data());
    load_into(in, p + ".beta", net.decoder_norm_[i].beta.mutable_data());
    load_into(in, p + ".running_mean", std::span<T>(net.decoder_norm_[i].stats.mean));
    load_into(in, p + ".running_var", std::span<T>(net.decoder_norm_[i].stats.var));
  }
  if (in.has("input_mean")) {
    std::vector<T> m(arch.input_channels), s(arch.input_channels);
    load_into(in, "input_mean", std::span<T>(m));
    load_into(in, "input_std", std::span<T>(s));
    net.set_input_normalization(std::move(m), std::move(s));
  }
  return net;
}

template class AutoencoderNet<float>;
template class AutoencoderNet<double>;

// ---------------------------------------------------------------------------
// Loss

template <class T>
BasicTensor<T> reduce_sse(const BasicTensor<T>& a, const BasicTensor<T>& b, std::size_t batch,
                          LossReduction reduction) {
  const T denom = reduction == LossReduction::sum_per_patch ? static_cast<T>(batch) : static_cast<T>(a.numel());
  return scale(sse(a, b), T(1) / denom);
}

template <class T>
BasicTensor<T> ae_loss(const AutoencoderNet<T>& net, const BasicTensor<T>& batch, Mode mode, LossReduction reduction) {
  const auto recon = net.decode(net.encode(batch, mode), mode);
  return reduce_sse(recon, batch, batch.dim(0), reduction);
}

template BasicTensor<float> reduce_sse(const BasicTensor<float>&, const BasicTensor<float>&, std::size_t, LossReduction);
template BasicTensor<double> reduce_sse(const BasicTensor<double>&, const BasicTensor<double>&, std::size_t,
                                        LossReduction);
template BasicTensor<float> ae_loss(const AutoencoderNet<float>&, const BasicTensor<float>&, Mode, LossReduction);
template BasicTensor<double> ae_loss(const AutoencoderNet<double>&, const BasicTensor<double>&, Mode, LossReduction);

// ---------------------------------------------------------------------------
// Model + checkpoint

nlohmann::json TrainingRecord::to_json() const {
  return {{"epochs_run", epochs_run}, {"seed", seed}, {"epoch_losses", epoch_losses}, {"config", config}};
}

TrainingRecord TrainingRecord::from_json(const nlohmann::json& j) {
  TrainingRecord r;
  r.epochs_run = j.value("epochs_run", std::size_t{0});
  r.seed = j.value("seed", std::uint64_t{0});
  if (j.contains("epoch_losses")) r.epoch_losses = j.at("epoch_losses").get<std::vector<double>>();
  if (j.contains("config")) r.config = j.at("config");
  return r;
}

Container AeModel::to_container() const {
  Container c;
  c.metadata["kind"] = "ae";
  net.save(c);
  c.put_f32("train.step_losses", {training.step_losses.size()}, training.step_losses);
  c.metadata["training"] = training.to_json();
  c.metadata["seed"] = training.seed;
  c.metadata["parameter_count"] = net.parameter_count();
  return c;
}

AeModel AeModel::from_container(const Container& c) {
  if (c.metadata.value("kind", std::string{}) != "ae") {
    throw DataError("checkpoint kind is '" + c.metadata.value("kind", std::string{"?"}) + "', expected 'ae'");
  }
  AeModel m;
  m.net = AutoencoderNet<float>::load(c);
  if (c.metadata.contains("training")) m.training = TrainingRecord::from_json(c.metadata.at("training"));
  if (c.has("train.step_losses")) m.training.step_losses = c.get_f32("train.step_losses");
  return m;
}

std::uint64_t AeModel::content_hash() const {
  Container c;
  net.save(c);
  return c.content_hash();
}

void save_checkpoint(const AeModel& model, const std::filesystem::path& path) {
  write_container(path, model.to_container());
}

AeModel load_checkpoint(const std::filesystem::path& path) { return AeModel::from_container(read_container(path)); }

// ---------------------------------------------------------------------------
// Training

nlohmann::json AeTrainConfig::to_json() const {
  return {{"architecture", arch.to_json()},
          {"patches_per_image", patches_per_image},
          {"epochs", epochs},
          {"batch", batch},
          {"lr", adam.lr},
          {"beta1", adam.beta1},
          {"beta2", adam.beta2},
          {"eps", adam.eps},
          {"seed", seed},
          {"resample_each_epoch", resample_each_epoch},
          {"init", to_string(init)},
          {"reduction", to_string(reduction)},
          {"patch_norm", to_string(patch_norm)}};
}

std::vector<ImageRGB> load_train_images(const DatasetManifest& manifest) {
  if (manifest.train.empty()) throw DataError("manifest '" + manifest.category + "' has no training images");
  std::vector<ImageRGB> images;
  images.reserve(manifest.train.size());
  for (const auto& p : manifest.train) images.push_back(load_image(p));
  return images;
}

namespace {

constexpr std::uint64_t kCenterStream = 0x100000;
constexpr std::uint64_t kShuffleStream = 0x200000;

}  // namespace

std::vector<PatchCoord> training_centers(std::span<const ImageRGB> images, const AeTrainConfig& config,
                                         std::size_t epoch) {
  std::vector<PatchCoord> coords;
  coords.reserve(images.size() * config.patches_per_image);
  for (std::size_t i = 0; i < images.size(); ++i) {
    Rng rng(config.seed, kCenterStream + i + (epoch << 32));
    auto c = sample_centers(images[i], config.patches_per_image, rng, config.arch.input_side, i);
    coords.insert(coords.end(), c.begin(), c.end());
  }
  return coords;
}

namespace detail {

void run_patch_training(std::span<const ImageRGB> images, const AeTrainConfig& config, TrainingRecord& record,
                        const LoopHooks& hooks) {
  if (images.empty()) throw DataError("training needs at least one image");
  if (config.batch == 0 || config.patches_per_image == 0) throw UsageError("batch and patches per image must be positive");
  record.seed = config.seed;
  record.config = config.to_json();
  std::vector<PatchCoord> coords = training_centers(images, config, 0);
  const std::size_t total = coords.size();
  const std::size_t steps = (total + config.batch - 1) / config.batch;
  std::vector<std::size_t> order(total);
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    if (config.resample_each_epoch && epoch > 0) coords = training_centers(images, config, epoch);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng(config.seed, kShuffleStream + epoch);
    shuffle_rng.shuffle(std::span<std::size_t>(order));
    if (hooks.on_epoch_begin) hooks.on_epoch_begin(epoch);
    double weighted = 0;
    std::vector<PatchCoord> chosen;
    for (std::size_t s = 0; s < steps; ++s) {
      const std::size_t begin = s * config.batch, end = std::min(total, begin + config.batch);
      chosen.clear();
      for (std::size_t k = begin; k < end; ++k) chosen.push_back(coords[order[k]]);
      const PatchBatch batch = gather_patches(images, chosen, config.arch.input_side);
      const double loss = hooks.step(batch.to_tensor());
      if (!std::isfinite(loss)) {
        throw NumericError("training diverged: non-finite loss at epoch " + std::to_string(epoch + 1) + ", step " +
                           std::to_string(s + 1));
      }
      record.step_losses.push_back(static_cast<float>(loss));
      weighted += loss * static_cast<double>(end - begin);
    }
    EpochReport report;
    report.epoch = epoch + 1;
    report.mean_loss = weighted / static_cast<double>(total);
    if (hooks.on_epoch_end) hooks.on_epoch_end(report);
    record.epoch_losses.push_back(report.mean_loss);
    record.epochs_run = epoch + 1;
    if (config.on_epoch) config.on_epoch(report);
  }
}

void configure_input_normalization(AutoencoderNet<float>& net, std::span<const ImageRGB> images, PatchNorm mode) {
  if (mode == PatchNorm::none) return;
  std::vector<double> s(3, 0.0), s2(3, 0.0);
  double n = 0;
  for (const auto& img : images) {
    for (std::size_t k = 0; k < img.pixels.size(); ++k) {
      s[k % 3] += img.pixels[k];
      s2[k % 3] += static_cast<double>(img.pixels[k]) * img.pixels[k];
    }
    n += static_cast<double>(img.height * img.width);
  }
  std::vector<float> mean(3), stddev(3);
  for (std::size_t c = 0; c < 3; ++c) {
    const double m = s[c] / n;
    mean[c] = static_cast<float>(m);
    stddev[c] = static_cast<float>(std::sqrt(std::max(s2[c] / n - m * m, 1e-12)));
  }
  net.set_input_normalization(std::move(mean), std::move(stddev));
}

}  // namespace detail

AeModel train_ae(std::span<const ImageRGB> images, const AeTrainConfig& config) {
  if (images.empty()) throw DataError("train_ae: no training images");
  config.arch.validate();
  AeModel model;
  Rng init_rng(config.seed, 1);
  model.net = AutoencoderNet<float>::build(config.arch, init_rng, config.init);
  detail::configure_input_normalization(model.net, images, config.patch_norm);
  auto params = model.net.parameters();
  AdamState<float> adam;
  adam.options = config.adam;
  detail::LoopHooks hooks;
  hooks.step = [&](const Tensor& batch) {
    for (auto& p : params) p.zero_grad();
    Tensor loss = ae_loss(model.net, batch, Mode::train, config.reduction);
    loss.backward();
    adam_step(std::span<Tensor>(params), adam);
    return static_cast<double>(loss.item());
  };
  detail::run_patch_training(images, config, model.training, hooks);
  return model;
}

AeModel train_ae(const DatasetManifest& manifest, const AeTrainConfig& config) {
  const auto images = load_train_images(manifest);
  return train_ae(std::span<const ImageRGB>(images), config);
}

}  // namespace pbad
