#include "pbad/vq.hpp"

#include <cmath>
#include <limits>

#include "pbad/error.hpp"

namespace pbad {

Codebook Codebook::init(std::size_t entries, std::size_t dim, Rng& rng) {
  if (entries < 2) throw UsageError("codebook needs at least 2 entries, got " + std::to_string(entries));
  if (dim == 0) throw UsageError("codebook dimension must be positive");
  const double bound = 1.0 / static_cast<double>(entries);
  std::vector<float> values(entries * dim);
  for (auto& v : values) v = static_cast<float>(rng.uniform(-bound, bound));
  Codebook cb;
  cb.entries = Tensor::from_data({entries, dim}, std::move(values), true);
  cb.reset_usage();
  return cb;
}

void Codebook::count(std::span<const std::int32_t> indices) {
  if (usage.size() != size()) reset_usage();
  for (auto i : indices) ++usage[static_cast<std::size_t>(i)];
}

double Codebook::perplexity() const {
  double total = 0;
  for (auto u : usage) total += static_cast<double>(u);
  if (total <= 0) return 0.0;
  double h = 0;
  for (auto u : usage) {
    if (u == 0) continue;
    const double p = static_cast<double>(u) / total;
    h -= p * std::log(p);
  }
  return std::exp(h);
}

template <class T>
std::vector<std::int32_t> assign_codes(std::span<const T> rows, std::size_t dim, std::span<const T> entries) {
  if (dim == 0 || rows.size() % dim != 0 || entries.size() % dim != 0 || entries.empty()) {
    throw UsageError("assign_codes: rows and codebook do not share dimension " + std::to_string(dim));
  }
  const std::size_t n = rows.size() / dim, K = entries.size() / dim;
  std::vector<std::int32_t> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T* z = rows.data() + i * dim;
    double best = std::numeric_limits<double>::infinity();
    std::size_t arg = 0;
    for (std::size_t k = 0; k < K; ++k) {
      const T* e = entries.data() + k * dim;
      double d2 = 0;
      for (std::size_t c = 0; c < dim; ++c) {
        const double d = static_cast<double>(z[c]) - static_cast<double>(e[c]);
        d2 += d * d;
      }
      if (d2 < best) {
        best = d2;
        arg = k;
      }
    }
    out[i] = static_cast<std::int32_t>(arg);
  }
  return out;
}

template std::vector<std::int32_t> assign_codes(std::span<const float>, std::size_t, std::span<const float>);
template std::vector<std::int32_t> assign_codes(std::span<const double>, std::size_t, std::span<const double>);

std::vector<QuantizedLatent> quantize_frozen(const Tensor& z, const Codebook& codebook) {
  if (z.rank() != 4 || z.dim(1) != codebook.dim() || z.dim(2) != z.dim(3)) {
    throw UsageError("quantize: latent " + shape_str(z.shape()) + " does not have " +
                     std::to_string(codebook.dim()) + " channels on a square grid");
  }
  const std::size_t B = z.dim(0), d = z.dim(1), S = z.dim(2), HW = S * S;
  NoGradGuard guard;
  const Tensor rows = channels_last(z);
  const auto idx = assign_codes(rows.data(), d, codebook.entries.data());
  auto ed = codebook.entries.data();
  std::vector<QuantizedLatent> out(B);
  for (std::size_t b = 0; b < B; ++b) {
    auto& q = out[b];
    q.side = S;
    q.dim = d;
    q.indices.assign(idx.begin() + static_cast<std::ptrdiff_t>(b * HW),
                     idx.begin() + static_cast<std::ptrdiff_t>((b + 1) * HW));
    q.vectors.resize(d * HW);
    for (std::size_t i = 0; i < HW; ++i)
      for (std::size_t c = 0; c < d; ++c) q.vectors[c * HW + i] = ed[static_cast<std::size_t>(q.indices[i]) * d + c];
  }
  return out;
}

std::vector<QuantizedLatent> quantize(const Tensor& z, Codebook& codebook) {
  auto out = quantize_frozen(z, codebook);
  for (const auto& q : out) codebook.count(q.indices);
  return out;
}

template <class T>
VqForward<T> vq_forward(const AutoencoderNet<T>& net, const BasicTensor<T>& codebook, const BasicTensor<T>& batch,
                        Mode mode, double beta, LossReduction reduction) {
  if (codebook.rank() != 2 || codebook.dim(1) != net.arch().latent_channels()) {
    throw UsageError("vq: codebook " + shape_str(codebook.shape()) + " does not match latent channels " +
                     std::to_string(net.arch().latent_channels()));
  }
  VqForward<T> f;
  f.z = net.encode(batch, mode);
  const std::size_t B = f.z.dim(0), d = f.z.dim(1), S = f.z.dim(2);
  const BasicTensor<T> rows = channels_last(f.z);
  f.indices = assign_codes(rows.data(), d, codebook.data());
  const BasicTensor<T> selected = gather_rows(codebook, std::span<const std::int32_t>(f.indices));
  f.decoder_input = straight_through(f.z, channels_first(selected.detach(), B, S, S));
  f.reconstruction = net.decode(f.decoder_input, mode);
  f.recon_term = reduce_sse(f.reconstruction, batch, B, reduction);
  const T latent_scale = reduction == LossReduction::sum_per_patch ? T(1) / static_cast<T>(B)
                                                                   : T(1) / static_cast<T>(f.z.numel());
  f.codebook_term = scale(sse(rows.detach(), selected), latent_scale);
  f.commitment_term = scale(sse(rows, selected.detach()), static_cast<T>(beta) * latent_scale);
  f.total = add(add(f.recon_term, f.codebook_term), f.commitment_term);
  return f;
}

template VqForward<float> vq_forward(const AutoencoderNet<float>&, const Tensor&, const Tensor&, Mode, double,
                                     LossReduction);
template VqForward<double> vq_forward(const AutoencoderNet<double>&, const Tensor64&, const Tensor64&, Mode, double,
                                      LossReduction);

// ---------------------------------------------------------------------------

std::vector<QuantizedLatent> VqModel::encode_quantized(const Tensor& batch) const {
  NoGradGuard guard;
  return quantize_frozen(net.encode(batch, Mode::infer), codebook);
}

Tensor VqModel::decode_indices(std::span<const std::vector<std::int32_t>> grids) const {
  const std::size_t S = net.arch().latent_side(), HW = S * S;
  std::vector<std::int32_t> flat;
  flat.reserve(grids.size() * HW);
  for (const auto& g : grids) {
    if (g.size() != HW) {
      throw UsageError("decode_indices: grid has " + std::to_string(g.size()) + " sites, expected " +
                       std::to_string(HW));
    }
    flat.insert(flat.end(), g.begin(), g.end());
  }
  NoGradGuard guard;
  const Tensor rows = gather_rows(codebook.entries, std::span<const std::int32_t>(flat));
  return net.decode(channels_first(rows, grids.size(), S, S), Mode::infer);
}

Container VqModel::to_container() const {
  Container c;
  c.metadata["kind"] = "vqae";
  net.save(c);
  const std::vector<float> entries(codebook.entries.data().begin(), codebook.entries.data().end());
  c.put_f32("codebook", {codebook.size(), codebook.dim()}, entries);
  c.put_i64("codebook_usage", {codebook.usage.size()}, codebook.usage);
  c.put_f32("train.step_losses", {training.step_losses.size()}, training.step_losses);
  c.metadata["beta"] = beta;
  c.metadata["training"] = training.to_json();
  c.metadata["epoch_perplexity"] = epoch_perplexity;
  c.metadata["seed"] = training.seed;
  c.metadata["parameter_count"] = net.parameter_count() + codebook.entries.numel();
  return c;
}

VqModel VqModel::from_container(const Container& c) {
  if (c.metadata.value("kind", std::string{}) != "vqae") {
    throw DataError("checkpoint kind is '" + c.metadata.value("kind", std::string{"?"}) + "', expected 'vqae'");
  }
  VqModel m;
  m.net = AutoencoderNet<float>::load(c);
  std::vector<std::uint64_t> dims;
  auto entries = c.get_f32("codebook", &dims);
  if (dims.size() != 2 || dims[1] != m.net.arch().latent_channels() || dims[0] < 2) {
    throw DataError("checkpoint codebook shape does not match latent channels " +
                    std::to_string(m.net.arch().latent_channels()));
  }
  m.codebook.entries = Tensor::from_data({dims[0], dims[1]}, std::move(entries), true);
  m.codebook.usage = c.get_i64("codebook_usage");
  if (m.codebook.usage.size() != dims[0]) throw DataError("checkpoint codebook_usage length mismatch");
  m.beta = c.metadata.value("beta", 0.25);
  if (c.metadata.contains("training")) m.training = TrainingRecord::from_json(c.metadata.at("training"));
  if (c.has("train.step_losses")) m.training.step_losses = c.get_f32("train.step_losses");
  if (c.metadata.contains("epoch_perplexity")) m.epoch_perplexity = c.metadata.at("epoch_perplexity").get<std::vector<double>>();
  return m;
}

std::uint64_t VqModel::content_hash() const {
  Container c;
  net.save(c);
  const std::vector<float> entries(codebook.entries.data().begin(), codebook.entries.data().end());
  c.put_f32("codebook", {codebook.size(), codebook.dim()}, entries);
  return c.content_hash();
}

void save_checkpoint(const VqModel& model, const std::filesystem::path& path) {
  write_container(path, model.to_container());
}

VqModel load_vq_checkpoint(const std::filesystem::path& path) { return VqModel::from_container(read_container(path)); }

nlohmann::json VqTrainConfig::to_json() const {
  auto j = base.to_json();
  j["codebook_size"] = codebook_size;
  j["beta"] = beta;
  return j;
}

VqModel train_vqae(std::span<const ImageRGB> images, const VqTrainConfig& config) {
  if (images.empty()) throw DataError("train_vqae: no training images");
  const auto& base = config.base;
  base.arch.validate();
  VqModel model;
  model.beta = config.beta;
  Rng init_rng(base.seed, 1);
  model.net = AutoencoderNet<float>::build(base.arch, init_rng, base.init);
  Rng codebook_rng(base.seed, 2);
  model.codebook = Codebook::init(config.codebook_size, base.arch.latent_channels(), codebook_rng);
  detail::configure_input_normalization(model.net, images, base.patch_norm);

  auto params = model.net.parameters();
  params.push_back(model.codebook.entries);
  AdamState<float> adam;
  adam.options = base.adam;
  double recon_sum = 0, codebook_sum = 0, commit_sum = 0;
  std::size_t seen = 0;

  detail::LoopHooks hooks;
  hooks.step = [&](const Tensor& batch) {
    for (auto& p : params) p.zero_grad();
    auto f = vq_forward(model.net, model.codebook.entries, batch, Mode::train, config.beta, base.reduction);
    f.total.backward();
    adam_step(std::span<Tensor>(params), adam);
    model.codebook.count(f.indices);
    const double n = static_cast<double>(batch.dim(0));
    recon_sum += f.recon_term.item() * n;
    codebook_sum += f.codebook_term.item() * n;
    commit_sum += f.commitment_term.item() * n;
    seen += batch.dim(0);
    return static_cast<double>(f.total.item());
  };
  hooks.on_epoch_begin = [&](std::size_t) {
    model.codebook.reset_usage();
    recon_sum = codebook_sum = commit_sum = 0;
    seen = 0;
  };
  hooks.on_epoch_end = [&](EpochReport& report) {
    const double n = static_cast<double>(seen);
    const double perplexity = model.codebook.perplexity();
    report.extras = {{"recon", recon_sum / n},
                     {"codebook", codebook_sum / n},
                     {"commitment", commit_sum / n},
                     {"perplexity", perplexity}};
    model.epoch_perplexity.push_back(perplexity);
  };
  detail::run_patch_training(images, base, model.training, hooks);
  model.training.config = config.to_json();
  return model;
}

VqModel train_vqae(const DatasetManifest& manifest, const VqTrainConfig& config) {
  const auto images = load_train_images(manifest);
  return train_vqae(std::span<const ImageRGB>(images), config);
}

}  // namespace pbad
