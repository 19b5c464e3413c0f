#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "pbad/checkpoint.hpp"
#include "pbad/dataset.hpp"
#include "pbad/image.hpp"
#include "pbad/ops.hpp"
#include "pbad/optim.hpp"
#include "pbad/patches.hpp"
#include "pbad/rng.hpp"
#include "pbad/tensor.hpp"

namespace pbad {

enum class Activation { gelu, sigmoid, identity };
enum class InitScheme { kaiming_uniform, xavier_uniform };
/// sum_per_patch: squared error summed over a patch, averaged over the batch.
/// mean: averaged over every element.
enum class LossReduction { sum_per_patch, mean };
enum class PatchNorm { none, standardize };

struct ConvBlockSpec {
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t filters = 1;
};

/// Encoder blocks conv → batch-norm → activation, except the last block which
/// emits the latent directly. The decoder mirrors the encoder with transposed
/// convolutions and ends in `output_activation`.
struct AeArchitecture {
  std::size_t input_side = 63;
  std::size_t input_channels = 3;
  std::vector<ConvBlockSpec> encoder{{5, 1, 3}, {3, 1, 4}, {3, 3, 12}, {3, 1, 16}};
  Activation hidden_activation = Activation::gelu;
  Activation output_activation = Activation::sigmoid;

  /// Spatial side after each encoder block, starting with the input
  /// (63, 59, 57, 19, 17 by default). Throws if the chain does not close.
  std::vector<std::size_t> spatial_chain() const;
  std::size_t latent_side() const { return spatial_chain().back(); }
  std::size_t latent_channels() const { return encoder.back().filters; }
  std::size_t latent_size() const;
  void validate() const;

  nlohmann::json to_json() const;
  static AeArchitecture from_json(const nlohmann::json& j);
};

template <class T>
struct ConvLayer {
  BasicTensor<T> weight;
  BasicTensor<T> bias;
  Stride2 stride;
};

template <class T>
struct NormLayer {
  BasicTensor<T> gamma;
  BasicTensor<T> beta;
  RunningStats<T> stats;
};

template <class T>
class AutoencoderNet {
 public:
  AutoencoderNet() = default;

  static AutoencoderNet build(const AeArchitecture& arch, Rng& rng, InitScheme init = InitScheme::kaiming_uniform);

  /// Train mode updates batch-norm running statistics; infer mode is a pure
  /// function of parameters and input.
  BasicTensor<T> encode(const BasicTensor<T>& x, Mode mode) const;
  BasicTensor<T> decode(const BasicTensor<T>& z, Mode mode) const;

  const AeArchitecture& arch() const { return arch_; }
  std::vector<BasicTensor<T>> parameters() const;
  std::size_t parameter_count() const;

  /// Fixed per-channel standardization applied to encoder inputs.
  void set_input_normalization(std::vector<T> mean, std::vector<T> stddev);
  bool normalizes_input() const { return !input_mean_.empty(); }

  /// Independent deep copy with values converted to U.
  template <class U>
  AutoencoderNet<U> cast() const;
  AutoencoderNet clone() const { return cast<T>(); }

  void save(Container& out) const;
  static AutoencoderNet load(const Container& in);

 private:
  template <class U>
  friend class AutoencoderNet;

  AeArchitecture arch_;
  std::vector<ConvLayer<T>> encoder_;
  std::vector<ConvLayer<T>> decoder_;
  mutable std::vector<NormLayer<T>> encoder_norm_;
  mutable std::vector<NormLayer<T>> decoder_norm_;
  std::vector<T> input_mean_;
  std::vector<T> input_std_;
};

template <class T>
template <class U>
AutoencoderNet<U> AutoencoderNet<T>::cast() const {
  auto conv = [](const ConvLayer<T>& l) {
    return ConvLayer<U>{l.weight.template cast<U>(true), l.bias.template cast<U>(true), l.stride};
  };
  auto norm = [](const NormLayer<T>& l) {
    NormLayer<U> out{l.gamma.template cast<U>(true), l.beta.template cast<U>(true), RunningStats<U>(0)};
    out.stats.mean.assign(l.stats.mean.begin(), l.stats.mean.end());
    out.stats.var.assign(l.stats.var.begin(), l.stats.var.end());
    out.stats.momentum = static_cast<U>(l.stats.momentum);
    out.stats.eps = static_cast<U>(l.stats.eps);
    return out;
  };
  AutoencoderNet<U> out;
  out.arch_ = arch_;
  for (const auto& l : encoder_) out.encoder_.push_back(conv(l));
  for (const auto& l : decoder_) out.decoder_.push_back(conv(l));
  for (const auto& l : encoder_norm_) out.encoder_norm_.push_back(norm(l));
  for (const auto& l : decoder_norm_) out.decoder_norm_.push_back(norm(l));
  out.input_mean_.assign(input_mean_.begin(), input_mean_.end());
  out.input_std_.assign(input_std_.begin(), input_std_.end());
  return out;
}

extern template class AutoencoderNet<float>;
extern template class AutoencoderNet<double>;

/// Reconstruction loss ||x - D(E(x))||², reduced per `reduction`.
template <class T>
BasicTensor<T> ae_loss(const AutoencoderNet<T>& net, const BasicTensor<T>& batch, Mode mode,
                       LossReduction reduction = LossReduction::sum_per_patch);

/// Reconstruction-style loss of two equally shaped tensors.
template <class T>
BasicTensor<T> reduce_sse(const BasicTensor<T>& a, const BasicTensor<T>& b, std::size_t batch,
                          LossReduction reduction);

struct TrainingRecord {
  std::size_t epochs_run = 0;
  std::uint64_t seed = 0;
  std::vector<float> step_losses;
  std::vector<double> epoch_losses;
  nlohmann::json config = nlohmann::json::object();

  nlohmann::json to_json() const;
  static TrainingRecord from_json(const nlohmann::json& j);
};

struct AeModel {
  AutoencoderNet<float> net;
  TrainingRecord training;

  Container to_container() const;
  static AeModel from_container(const Container& c);
  /// Hash of the parameter records; identifies the encoder for downstream fits.
  std::uint64_t content_hash() const;
};

void save_checkpoint(const AeModel& model, const std::filesystem::path& path);
AeModel load_checkpoint(const std::filesystem::path& path);

struct EpochReport {
  std::size_t epoch = 0;
  double mean_loss = 0;
  /// Optional extra components (e.g. vq terms, perplexity).
  std::vector<std::pair<std::string, double>> extras;
};

struct AeTrainConfig {
  AeArchitecture arch;
  std::size_t patches_per_image = 1000;
  std::size_t epochs = 10;
  std::size_t batch = 100;
  AdamOptions adam;
  std::uint64_t seed = 0;
  /// Fixed patch centers by default; true redraws them every epoch.
  bool resample_each_epoch = false;
  InitScheme init = InitScheme::kaiming_uniform;
  LossReduction reduction = LossReduction::sum_per_patch;
  PatchNorm patch_norm = PatchNorm::none;
  std::function<void(const EpochReport&)> on_epoch;

  nlohmann::json to_json() const;
};

AeModel train_ae(std::span<const ImageRGB> images, const AeTrainConfig& config);
/// Loads the manifest's train split (normal images only) and trains.
AeModel train_ae(const DatasetManifest& manifest, const AeTrainConfig& config);

std::vector<ImageRGB> load_train_images(const DatasetManifest& manifest);

/// Patch centers used for training epoch `epoch` (fixed centers use epoch 0).
std::vector<PatchCoord> training_centers(std::span<const ImageRGB> images, const AeTrainConfig& config,
                                         std::size_t epoch = 0);

std::string to_string(Activation a);
Activation parse_activation(const std::string& s);
std::string to_string(InitScheme s);
InitScheme parse_init(const std::string& s);
std::string to_string(LossReduction r);
LossReduction parse_reduction(const std::string& s);
std::string to_string(PatchNorm n);
PatchNorm parse_patch_norm(const std::string& s);

namespace detail {

/// Shared epoch/batch loop for the continuous and discrete autoencoders.
/// `step` runs one optimizer step on a batch and returns its loss.
struct LoopHooks {
  std::function<double(const Tensor& batch)> step;
  std::function<void(std::size_t epoch)> on_epoch_begin;
  std::function<void(EpochReport&)> on_epoch_end;
};

void run_patch_training(std::span<const ImageRGB> images, const AeTrainConfig& config, TrainingRecord& record,
                        const LoopHooks& hooks);

/// Applies the configured patch normalization using training-image statistics.
void configure_input_normalization(AutoencoderNet<float>& net, std::span<const ImageRGB> images, PatchNorm mode);

}  // namespace detail

}  // namespace pbad
