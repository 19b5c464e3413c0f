#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "pbad/autoencoder.hpp"

namespace pbad {

/// K × d codeword table plus assignment counters since the last reset.
struct Codebook {
  Tensor entries;
  std::vector<std::int64_t> usage;

  static Codebook init(std::size_t entries, std::size_t dim, Rng& rng);
  std::size_t size() const { return entries.dim(0); }
  std::size_t dim() const { return entries.dim(1); }
  void reset_usage() { usage.assign(size(), 0); }
  void count(std::span<const std::int32_t> indices);
  /// exp(-Σ p ln p) over usage frequencies; 0 when nothing was counted.
  double perplexity() const;
};

/// Quantized latent of one patch: side × side indices (row-major) and the
/// selected vectors laid out d × side × side.
struct QuantizedLatent {
  std::size_t side = 0;
  std::size_t dim = 0;
  std::vector<std::int32_t> indices;
  std::vector<float> vectors;
};

/// Nearest codeword per row of `rows` (n × dim), squared distances in double,
/// ties to the lowest index.
template <class T>
std::vector<std::int32_t> assign_codes(std::span<const T> rows, std::size_t dim, std::span<const T> entries);

/// Quantizes every batch element of z (B × d × S × S) and counts usage.
std::vector<QuantizedLatent> quantize(const Tensor& z, Codebook& codebook);
/// Same assignment without touching the usage counters.
std::vector<QuantizedLatent> quantize_frozen(const Tensor& z, const Codebook& codebook);

/// One forward pass of the discrete autoencoder with its loss terms.
template <class T>
struct VqForward {
  BasicTensor<T> z;  // encoder output, B × d × S × S
  BasicTensor<T> decoder_input;  // quantized values, gradient routed straight to z
  BasicTensor<T> reconstruction;
  std::vector<std::int32_t> indices;  // B·S·S, batch-major then row-major
  BasicTensor<T> recon_term;
  BasicTensor<T> codebook_term;
  BasicTensor<T> commitment_term;
  BasicTensor<T> total;
};

template <class T>
VqForward<T> vq_forward(const AutoencoderNet<T>& net, const BasicTensor<T>& codebook, const BasicTensor<T>& batch,
                        Mode mode, double beta, LossReduction reduction = LossReduction::sum_per_patch);

struct VqModel {
  AutoencoderNet<float> net;
  Codebook codebook;
  double beta = 0.25;
  TrainingRecord training;
  std::vector<double> epoch_perplexity;

  /// Encoder output for a batch, quantized, in infer mode.
  std::vector<QuantizedLatent> encode_quantized(const Tensor& batch) const;
  /// Decodes index grids (one per batch element) through the codebook.
  Tensor decode_indices(std::span<const std::vector<std::int32_t>> grids) const;

  Container to_container() const;
  static VqModel from_container(const Container& c);
  std::uint64_t content_hash() const;
};

void save_checkpoint(const VqModel& model, const std::filesystem::path& path);
VqModel load_vq_checkpoint(const std::filesystem::path& path);

struct VqTrainConfig {
  AeTrainConfig base;
  std::size_t codebook_size = 1024;
  double beta = 0.25;

  nlohmann::json to_json() const;
};

VqModel train_vqae(std::span<const ImageRGB> images, const VqTrainConfig& config);
VqModel train_vqae(const DatasetManifest& manifest, const VqTrainConfig& config);

}  // namespace pbad
