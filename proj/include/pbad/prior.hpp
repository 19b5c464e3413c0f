#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "pbad/checkpoint.hpp"
#include "pbad/ops.hpp"
#include "pbad/optim.hpp"
#include "pbad/rng.hpp"
#include "pbad/tensor.hpp"

namespace pbad {

using TokenSequence = std::vector<std::int32_t>;

struct PriorConfig {
  std::size_t vocab = 1024;  // codebook size K; BOS is token K
  std::size_t grid_side = 17;
  std::size_t d_model = 256;
  std::size_t layers = 8;
  std::size_t heads = 8;
  std::size_t ff = 512;

  std::size_t seq_len() const { return 1 + grid_side * grid_side; }
  std::int32_t bos() const { return static_cast<std::int32_t>(vocab); }
  void validate() const;
  nlohmann::json to_json() const;
  static PriorConfig from_json(const nlohmann::json& j);
};

/// BOS followed by the grid in row-major order.
TokenSequence tokens_from_grid(std::span<const std::int32_t> grid, std::size_t vocab);
std::vector<std::int32_t> grid_from_tokens(const TokenSequence& seq);

template <class T>
struct PriorBlock {
  BasicTensor<T> ln1_gamma, ln1_beta;
  BasicTensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
  BasicTensor<T> ln2_gamma, ln2_beta;
  BasicTensor<T> w1, b1, w2, b2;
};

/// Weights normal(0, 0.02), biases zero, layer-norm gains one.
template <class T>
PriorBlock<T> init_block(std::size_t d_model, std::size_t ff, Rng& rng);

/// Pre-norm causal decoder block on B × T × D:
/// h + attn(ln1(h)), then + ff(ln2(·)) with a GELU inner layer.
template <class T>
BasicTensor<T> attention_block(const BasicTensor<T>& h, const PriorBlock<T>& block, std::size_t heads);

/// Pre-norm causal transformer over token sequences.
template <class T>
class PriorNet {
 public:
  static PriorNet build(const PriorConfig& config, Rng& rng);

  /// Logits for every input position: inputs are B sequences of equal
  /// length T ≤ seq_len; result is (B·T) × vocab.
  BasicTensor<T> logits(std::span<const TokenSequence> inputs) const;
  /// Teacher-forced next-token cross-entropy over full sequences.
  BasicTensor<T> loss(std::span<const TokenSequence> sequences) const;

  const PriorConfig& config() const { return config_; }
  std::vector<std::pair<std::string, BasicTensor<T>>> named_parameters() const;
  std::vector<BasicTensor<T>> parameters() const;
  std::size_t parameter_count() const;

  template <class U>
  PriorNet<U> cast() const;

  void save(Container& out) const;
  static PriorNet load(const Container& in);

 private:
  template <class U>
  friend class PriorNet;

  PriorConfig config_;
  BasicTensor<T> tok_emb_, pos_emb_;
  std::vector<PriorBlock<T>> blocks_;
  BasicTensor<T> lnf_gamma_, lnf_beta_;
  BasicTensor<T> head_w_, head_b_;
};

extern template class PriorNet<float>;
extern template class PriorNet<double>;

template <class T>
template <class U>
PriorNet<U> PriorNet<T>::cast() const {
  PriorNet<U> out;
  out.config_ = config_;
  const auto named = named_parameters();
  std::vector<BasicTensor<U>> converted;
  for (const auto& [name, t] : named) converted.push_back(t.template cast<U>(true));
  std::size_t k = 0;
  auto next = [&]() { return converted[k++]; };
  out.tok_emb_ = next();
  out.pos_emb_ = next();
  out.blocks_.resize(blocks_.size());
  for (auto& b : out.blocks_) {
    for (auto* p : {&b.ln1_gamma, &b.ln1_beta, &b.wq, &b.bq, &b.wk, &b.bk, &b.wv, &b.bv, &b.wo, &b.bo, &b.ln2_gamma,
                    &b.ln2_beta, &b.w1, &b.b1, &b.w2, &b.b2})
      *p = next();
  }
  out.lnf_gamma_ = next();
  out.lnf_beta_ = next();
  out.head_w_ = next();
  out.head_b_ = next();
  return out;
}

/// Key/value-cached left-to-right evaluation of a frozen prior.
class IncrementalDecoder {
 public:
  explicit IncrementalDecoder(const PriorNet<float>& net);

  /// Feeds the token at the next position; returns the logits predicting the
  /// following token.
  std::span<const float> step(std::int32_t token);
  std::size_t position() const { return pos_; }
  void reset() { pos_ = 0; }

 private:
  struct Layer {
    std::vector<float> keys, values;
  };
  const PriorNet<float>& net_;
  std::vector<Tensor> params_;  // named_parameters() order
  std::vector<Layer> cache_;
  std::vector<float> logits_;
  std::size_t pos_ = 0;
};

struct PriorModel {
  PriorNet<float> net;
  std::uint64_t seed = 0;
  std::vector<double> epoch_loss;
  std::vector<double> epoch_perplexity;
  nlohmann::json train_config = nlohmann::json::object();

  Container to_container() const;
  /// expected_vocab > 0 rejects a prior trained for another codebook size.
  static PriorModel from_container(const Container& c, std::size_t expected_vocab = 0);
  std::uint64_t content_hash() const;
};

void save_prior(const PriorModel& model, const std::filesystem::path& path);
PriorModel load_prior(const std::filesystem::path& path, std::size_t expected_vocab = 0);

struct PriorEpoch {
  std::size_t epoch = 0;
  double loss = 0;
  double perplexity = 0;
  double accuracy = 0;
};

struct PriorTrainConfig {
  PriorConfig net;
  std::size_t epochs = 10;
  std::size_t batch = 32;
  AdamOptions adam{3e-4, 0.9, 0.999, 1e-8};
  std::uint64_t seed = 0;
  std::function<void(const PriorEpoch&)> on_epoch;

  nlohmann::json to_json() const;
};

/// Rejects sequences with a wrong length, a missing BOS or out-of-vocabulary tokens.
void validate_sequences(std::span<const TokenSequence> sequences, const PriorConfig& config);
PriorModel train_prior(std::span<const TokenSequence> sequences, const PriorTrainConfig& config);

/// Softmax over the vocabulary for the token following `prefix` (which starts with BOS).
std::vector<float> next_token_probs(const PriorModel& model, const TokenSequence& prefix);

struct RestoreOptions {
  double tau = 0.05;
  /// Draw replacements from the predicted distribution instead of the argmax.
  bool sample = false;
  std::uint64_t seed = 0;
  std::uint64_t stream = 0;
  /// Judge every position against the original tokens rather than the
  /// partially restored sequence.
  bool original_context = false;
};

struct RestoreResult {
  TokenSequence tokens;
  std::vector<std::uint8_t> replaced;  // per sequence position
  std::size_t replaced_count() const;
};

RestoreResult restore(const PriorModel& model, const TokenSequence& sequence, const RestoreOptions& options);

}  // namespace pbad
