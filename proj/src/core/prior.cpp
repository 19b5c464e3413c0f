#include "pbad/prior.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "kernels.hpp"
#include "pbad/error.hpp"

namespace pbad {

void PriorConfig::validate() const {
  if (vocab < 2) throw UsageError("prior: vocabulary must hold at least 2 tokens");
  if (grid_side == 0 || d_model == 0 || layers == 0 || ff == 0) throw UsageError("prior: sizes must be positive");
  if (heads == 0 || d_model % heads != 0) {
    throw UsageError("prior: model width " + std::to_string(d_model) + " not divisible by " + std::to_string(heads) +
                     " heads");
  }
}

nlohmann::json PriorConfig::to_json() const {
  return {{"vocab", vocab}, {"grid_side", grid_side}, {"d_model", d_model},
          {"layers", layers}, {"heads", heads},         {"ff", ff}};
}

PriorConfig PriorConfig::from_json(const nlohmann::json& j) {
  PriorConfig c;
  c.vocab = j.at("vocab").get<std::size_t>();
  c.grid_side = j.at("grid_side").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.layers = j.at("layers").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.ff = j.at("ff").get<std::size_t>();
  return c;
}

TokenSequence tokens_from_grid(std::span<const std::int32_t> grid, std::size_t vocab) {
  TokenSequence seq;
  seq.reserve(grid.size() + 1);
  seq.push_back(static_cast<std::int32_t>(vocab));
  for (auto t : grid) {
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw DataError("token " + std::to_string(t) + " outside vocabulary [0, " + std::to_string(vocab) + ")");
    }
    seq.push_back(t);
  }
  return seq;
}

std::vector<std::int32_t> grid_from_tokens(const TokenSequence& seq) {
  if (seq.empty()) throw UsageError("grid_from_tokens: empty sequence");
  return {seq.begin() + 1, seq.end()};
}

// ---------------------------------------------------------------------------

namespace {

template <class T>
BasicTensor<T> normal_init(Shape shape, Rng& rng, double stddev = 0.02) {
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(stddev * rng.normal());
  return BasicTensor<T>::from_data(std::move(shape), std::move(v), true);
}

}  // namespace

template <class T>
PriorBlock<T> init_block(std::size_t D, std::size_t F, Rng& rng) {
  using Tn = BasicTensor<T>;
  PriorBlock<T> b;
  b.ln1_gamma = Tn::full({D}, T(1), true);
  b.ln1_beta = Tn::zeros({D}, true);
  b.wq = normal_init<T>({D, D}, rng);
  b.bq = Tn::zeros({D}, true);
  b.wk = normal_init<T>({D, D}, rng);
  b.bk = Tn::zeros({D}, true);
  b.wv = normal_init<T>({D, D}, rng);
  b.bv = Tn::zeros({D}, true);
  b.wo = normal_init<T>({D, D}, rng);
  b.bo = Tn::zeros({D}, true);
  b.ln2_gamma = Tn::full({D}, T(1), true);
  b.ln2_beta = Tn::zeros({D}, true);
  b.w1 = normal_init<T>({F, D}, rng);
  b.b1 = Tn::zeros({F}, true);
  b.w2 = normal_init<T>({D, F}, rng);
  b.b2 = Tn::zeros({D}, true);
  return b;
}

template <class T>
BasicTensor<T> attention_block(const BasicTensor<T>& h, const PriorBlock<T>& b, std::size_t heads) {
  const auto a = layer_norm(h, b.ln1_gamma, b.ln1_beta);
  const auto att = attention(linear(a, b.wq, b.bq), linear(a, b.wk, b.bk), linear(a, b.wv, b.bv), heads, true);
  const auto r = add(h, linear(att, b.wo, b.bo));
  return add(r, linear(gelu(linear(layer_norm(r, b.ln2_gamma, b.ln2_beta), b.w1, b.b1)), b.w2, b.b2));
}

template PriorBlock<float> init_block<float>(std::size_t, std::size_t, Rng&);
template PriorBlock<double> init_block<double>(std::size_t, std::size_t, Rng&);
template BasicTensor<float> attention_block<float>(const BasicTensor<float>&, const PriorBlock<float>&, std::size_t);
template BasicTensor<double> attention_block<double>(const BasicTensor<double>&, const PriorBlock<double>&,
                                                     std::size_t);

template <class T>
PriorNet<T> PriorNet<T>::build(const PriorConfig& config, Rng& rng) {
  config.validate();
  PriorNet net;
  net.config_ = config;
  const std::size_t D = config.d_model, F = config.ff;
  using Tn = BasicTensor<T>;
  net.tok_emb_ = normal_init<T>({config.vocab + 1, D}, rng);
  net.pos_emb_ = normal_init<T>({config.seq_len(), D}, rng);
  for (std::size_t l = 0; l < config.layers; ++l) net.blocks_.push_back(init_block<T>(D, F, rng));
  net.lnf_gamma_ = Tn::full({D}, T(1), true);
  net.lnf_beta_ = Tn::zeros({D}, true);
  net.head_w_ = normal_init<T>({config.vocab, D}, rng);
  net.head_b_ = Tn::zeros({config.vocab}, true);
  return net;
}

template <class T>
BasicTensor<T> PriorNet<T>::logits(std::span<const TokenSequence> inputs) const {
  if (inputs.empty()) throw UsageError("prior: empty batch");
  const std::size_t B = inputs.size(), L = inputs[0].size(), D = config_.d_model;
  if (L == 0 || L > config_.seq_len()) {
    throw UsageError("prior: input length " + std::to_string(L) + " outside [1, " + std::to_string(config_.seq_len()) +
                     "]");
  }
  std::vector<std::int32_t> tokens, positions;
  tokens.reserve(B * L);
  positions.reserve(B * L);
  for (const auto& s : inputs) {
    if (s.size() != L) throw UsageError("prior: sequences in a batch must share one length");
    for (std::size_t t = 0; t < L; ++t) {
      if (s[t] < 0 || static_cast<std::size_t>(s[t]) > config_.vocab) {
        throw DataError("prior: token " + std::to_string(s[t]) + " outside vocabulary");
      }
      tokens.push_back(s[t]);
      positions.push_back(static_cast<std::int32_t>(t));
    }
  }
  BasicTensor<T> h = add(gather_rows(tok_emb_, std::span<const std::int32_t>(tokens)),
                         gather_rows(pos_emb_, std::span<const std::int32_t>(positions)));
  h = reshape(h, {B, L, D});
  for (const auto& b : blocks_) h = attention_block(h, b, config_.heads);
  const auto out = linear(layer_norm(h, lnf_gamma_, lnf_beta_), head_w_, head_b_);
  return reshape(out, {B * L, config_.vocab});
}

template <class T>
BasicTensor<T> PriorNet<T>::loss(std::span<const TokenSequence> sequences) const {
  std::vector<TokenSequence> inputs;
  std::vector<std::int32_t> targets;
  inputs.reserve(sequences.size());
  for (const auto& s : sequences) {
    if (s.size() < 2) throw UsageError("prior: sequences need at least 2 tokens");
    inputs.emplace_back(s.begin(), s.end() - 1);
    targets.insert(targets.end(), s.begin() + 1, s.end());
  }
  return softmax_cross_entropy(logits(inputs), std::span<const std::int32_t>(targets));
}

template <class T>
std::vector<std::pair<std::string, BasicTensor<T>>> PriorNet<T>::named_parameters() const {
  std::vector<std::pair<std::string, BasicTensor<T>>> out{{"tok_emb", tok_emb_}, {"pos_emb", pos_emb_}};
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const auto& b = blocks_[l];
    const std::string p = "block." + std::to_string(l) + ".";
    for (const auto& [name, t] : std::initializer_list<std::pair<const char*, const BasicTensor<T>*>>{
             {"ln1.gamma", &b.ln1_gamma}, {"ln1.beta", &b.ln1_beta}, {"wq", &b.wq},   {"bq", &b.bq},
             {"wk", &b.wk},               {"bk", &b.bk},             {"wv", &b.wv},   {"bv", &b.bv},
             {"wo", &b.wo},               {"bo", &b.bo},             {"ln2.gamma", &b.ln2_gamma},
             {"ln2.beta", &b.ln2_beta},   {"w1", &b.w1},             {"b1", &b.b1},   {"w2", &b.w2},
             {"b2", &b.b2}})
      out.emplace_back(p + name, *t);
  }
  out.emplace_back("lnf.gamma", lnf_gamma_);
  out.emplace_back("lnf.beta", lnf_beta_);
  out.emplace_back("head.weight", head_w_);
  out.emplace_back("head.bias", head_b_);
  return out;
}

template <class T>
std::vector<BasicTensor<T>> PriorNet<T>::parameters() const {
  std::vector<BasicTensor<T>> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

template <class T>
std::size_t PriorNet<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.numel();
  return n;
}

template <class T>
void PriorNet<T>::save(Container& out) const {
  out.metadata["prior"] = config_.to_json();
  for (const auto& [name, t] : named_parameters()) {
    std::vector<float> v(t.data().begin(), t.data().end());
    out.put_f32(name, {t.shape().begin(), t.shape().end()}, v);
  }
}

template <class T>
PriorNet<T> PriorNet<T>::load(const Container& in) {
  if (!in.metadata.contains("prior")) throw DataError("checkpoint has no prior configuration");
  PriorConfig config;
  try {
    config = PriorConfig::from_json(in.metadata.at("prior"));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("prior configuration is malformed: ") + e.what());
  }
  Rng unused(0);
  PriorNet net = build(config, unused);
  for (auto& [name, t] : net.named_parameters()) {
    std::vector<std::uint64_t> dims;
    auto v = in.get_f32(name, &dims);
    if (v.size() != t.numel()) throw DataError("prior tensor '" + name + "' has the wrong size");
    auto dst = BasicTensor<T>(t).mutable_data();
    std::copy(v.begin(), v.end(), dst.begin());
  }
  return net;
}

template class PriorNet<float>;
template class PriorNet<double>;

// ---------------------------------------------------------------------------
// Cached decoding

IncrementalDecoder::IncrementalDecoder(const PriorNet<float>& net) : net_(net) {
  for (auto& [name, t] : net.named_parameters()) params_.push_back(t);
  const auto& c = net.config();
  cache_.resize(c.layers);
  for (auto& l : cache_) {
    l.keys.resize(c.seq_len() * c.d_model);
    l.values.resize(c.seq_len() * c.d_model);
  }
  logits_.resize(c.vocab);
}

namespace {

void layer_norm_row(const float* x, const float* g, const float* b, float* out, std::size_t D) {
  float m = 0;
  for (std::size_t i = 0; i < D; ++i) m += x[i];
  m /= static_cast<float>(D);
  float v = 0;
  for (std::size_t i = 0; i < D; ++i) v += (x[i] - m) * (x[i] - m);
  v /= static_cast<float>(D);
  const float is = 1.0f / std::sqrt(v + 1e-5f);
  for (std::size_t i = 0; i < D; ++i) out[i] = g[i] * ((x[i] - m) * is) + b[i];
}

void linear_row(const float* x, const Tensor& w, const Tensor& b, float* out) {
  const std::size_t O = w.dim(0), I = w.dim(1);
  const float* wd = w.data().data();
  const float* bd = b.data().data();
  for (std::size_t o = 0; o < O; ++o) out[o] = kernels::dot(x, wd + o * I, I) + bd[o];
}

}  // namespace

std::span<const float> IncrementalDecoder::step(std::int32_t token) {
  const auto& c = net_.config();
  if (pos_ >= c.seq_len()) throw UsageError("prior decoder: sequence longer than " + std::to_string(c.seq_len()));
  if (token < 0 || static_cast<std::size_t>(token) > c.vocab) {
    throw DataError("prior: token " + std::to_string(token) + " outside vocabulary");
  }
  const std::size_t D = c.d_model, H = c.heads, dh = D / H, t = pos_;
  std::vector<float> x(D), a(D), q(D), att(D), tmp(D), hidden(c.ff);
  const float* te = params_[0].data().data() + static_cast<std::size_t>(token) * D;
  const float* pe = params_[1].data().data() + t * D;
  for (std::size_t i = 0; i < D; ++i) x[i] = te[i] + pe[i];
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
  std::vector<float> scores(t + 1);
  for (std::size_t l = 0; l < c.layers; ++l) {
    const Tensor* p = params_.data() + 2 + l * 16;
    auto& cache = cache_[l];
    layer_norm_row(x.data(), p[0].data().data(), p[1].data().data(), a.data(), D);
    linear_row(a.data(), p[2], p[3], q.data());
    linear_row(a.data(), p[4], p[5], cache.keys.data() + t * D);
    linear_row(a.data(), p[6], p[7], cache.values.data() + t * D);
    std::fill(att.begin(), att.end(), 0.0f);
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t s = 0; s <= t; ++s)
        scores[s] = kernels::dot(q.data() + h * dh, cache.keys.data() + s * D + h * dh, dh) * scale;
      softmax_inplace(std::span<float>(scores.data(), t + 1));
      for (std::size_t s = 0; s <= t; ++s)
        kernels::axpy(scores[s], cache.values.data() + s * D + h * dh, att.data() + h * dh, dh);
    }
    linear_row(att.data(), p[8], p[9], tmp.data());
    for (std::size_t i = 0; i < D; ++i) x[i] += tmp[i];
    layer_norm_row(x.data(), p[10].data().data(), p[11].data().data(), a.data(), D);
    linear_row(a.data(), p[12], p[13], hidden.data());
    constexpr float inv_sqrt2 = 0.70710678118654752440f;
    for (auto& v : hidden) v = v * 0.5f * (1.0f + std::erf(v * inv_sqrt2));
    linear_row(hidden.data(), p[14], p[15], tmp.data());
    for (std::size_t i = 0; i < D; ++i) x[i] += tmp[i];
  }
  const Tensor* f = params_.data() + 2 + c.layers * 16;
  layer_norm_row(x.data(), f[0].data().data(), f[1].data().data(), a.data(), D);
  linear_row(a.data(), f[2], f[3], logits_.data());
  ++pos_;
  return logits_;
}

// ---------------------------------------------------------------------------
// Model, training, restoration

Container PriorModel::to_container() const {
  Container c;
  c.metadata["kind"] = "prior";
  net.save(c);
  c.metadata["seed"] = seed;
  c.metadata["epoch_loss"] = epoch_loss;
  c.metadata["epoch_perplexity"] = epoch_perplexity;
  c.metadata["train_config"] = train_config;
  return c;
}

PriorModel PriorModel::from_container(const Container& c, std::size_t expected_vocab) {
  if (c.metadata.value("kind", std::string{}) != "prior") {
    throw DataError("checkpoint kind is '" + c.metadata.value("kind", std::string{"?"}) + "', expected 'prior'");
  }
  PriorModel m;
  m.net = PriorNet<float>::load(c);
  if (expected_vocab > 0 && m.net.config().vocab != expected_vocab) {
    throw DataError("prior vocabulary " + std::to_string(m.net.config().vocab) + " does not match codebook size " +
                    std::to_string(expected_vocab));
  }
  m.seed = c.metadata.value("seed", std::uint64_t{0});
  if (c.metadata.contains("epoch_loss")) m.epoch_loss = c.metadata.at("epoch_loss").get<std::vector<double>>();
  if (c.metadata.contains("epoch_perplexity")) {
    m.epoch_perplexity = c.metadata.at("epoch_perplexity").get<std::vector<double>>();
  }
  if (c.metadata.contains("train_config")) m.train_config = c.metadata.at("train_config");
  return m;
}

std::uint64_t PriorModel::content_hash() const {
  Container c;
  net.save(c);
  return c.content_hash();
}

void save_prior(const PriorModel& model, const std::filesystem::path& path) {
  write_container(path, model.to_container());
}

PriorModel load_prior(const std::filesystem::path& path, std::size_t expected_vocab) {
  return PriorModel::from_container(read_container(path), expected_vocab);
}

nlohmann::json PriorTrainConfig::to_json() const {
  return {{"net", net.to_json()}, {"epochs", epochs}, {"batch", batch}, {"lr", adam.lr}, {"seed", seed}};
}

void validate_sequences(std::span<const TokenSequence> sequences, const PriorConfig& config) {
  for (std::size_t n = 0; n < sequences.size(); ++n) {
    const auto& s = sequences[n];
    if (s.size() != config.seq_len()) {
      throw DataError("sequence " + std::to_string(n) + " has length " + std::to_string(s.size()) + ", expected " +
                      std::to_string(config.seq_len()));
    }
    if (s[0] != config.bos()) throw DataError("sequence " + std::to_string(n) + " does not start with BOS");
    for (std::size_t t = 1; t < s.size(); ++t) {
      if (s[t] < 0 || static_cast<std::size_t>(s[t]) >= config.vocab) {
        throw DataError("sequence " + std::to_string(n) + ": token " + std::to_string(s[t]) + " at position " +
                        std::to_string(t) + " outside vocabulary [0, " + std::to_string(config.vocab) + ")");
      }
    }
  }
}

PriorModel train_prior(std::span<const TokenSequence> sequences, const PriorTrainConfig& config) {
  if (sequences.empty()) throw DataError("train_prior: no sequences");
  if (config.batch == 0) throw UsageError("train_prior: batch must be positive");
  validate_sequences(sequences, config.net);
  PriorModel model;
  model.seed = config.seed;
  model.train_config = config.to_json();
  Rng init(config.seed, 3);
  model.net = PriorNet<float>::build(config.net, init);
  auto params = model.net.parameters();
  AdamState<float> adam;
  adam.options = config.adam;
  const std::size_t n = sequences.size(), K = config.net.vocab;
  std::vector<std::size_t> order(n);
  std::vector<TokenSequence> batch;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle(config.seed, 0x5EED0000 + epoch);
    shuffle.shuffle(std::span<std::size_t>(order));
    double loss_sum = 0, correct = 0, predicted = 0;
    for (std::size_t begin = 0; begin < n; begin += config.batch) {
      const std::size_t end = std::min(n, begin + config.batch);
      batch.clear();
      for (std::size_t k = begin; k < end; ++k) batch.push_back(sequences[order[k]]);
      for (auto& p : params) p.zero_grad();
      std::vector<TokenSequence> inputs;
      std::vector<std::int32_t> targets;
      for (const auto& s : batch) {
        inputs.emplace_back(s.begin(), s.end() - 1);
        targets.insert(targets.end(), s.begin() + 1, s.end());
      }
      const Tensor logits = model.net.logits(inputs);
      const Tensor loss = softmax_cross_entropy(logits, std::span<const std::int32_t>(targets));
      loss.backward();
      adam_step(std::span<Tensor>(params), adam);
      const double l = loss.item();
      if (!std::isfinite(l)) throw NumericError("train_prior: non-finite loss at epoch " + std::to_string(epoch + 1));
      loss_sum += l * static_cast<double>(targets.size());
      auto ld = logits.data();
      for (std::size_t r = 0; r < targets.size(); ++r) {
        const float* row = ld.data() + r * K;
        const auto arg = std::max_element(row, row + K) - row;
        if (arg == targets[r]) correct += 1;
      }
      predicted += static_cast<double>(targets.size());
    }
    PriorEpoch report;
    report.epoch = epoch + 1;
    report.loss = loss_sum / predicted;
    report.perplexity = std::exp(report.loss);
    report.accuracy = correct / predicted;
    model.epoch_loss.push_back(report.loss);
    model.epoch_perplexity.push_back(report.perplexity);
    if (config.on_epoch) config.on_epoch(report);
  }
  return model;
}

std::vector<float> next_token_probs(const PriorModel& model, const TokenSequence& prefix) {
  const auto& c = model.net.config();
  if (prefix.empty() || prefix[0] != c.bos()) throw UsageError("next_token_probs: prefix must start with BOS");
  if (prefix.size() > c.seq_len() - 1) {
    throw UsageError("next_token_probs: prefix of length " + std::to_string(prefix.size()) + " leaves no position");
  }
  IncrementalDecoder dec(model.net);
  std::span<const float> logits;
  for (auto t : prefix) logits = dec.step(t);
  std::vector<float> probs(logits.begin(), logits.end());
  softmax_inplace(std::span<float>(probs));
  return probs;
}

std::size_t RestoreResult::replaced_count() const {
  return static_cast<std::size_t>(std::count(replaced.begin(), replaced.end(), std::uint8_t{1}));
}

RestoreResult restore(const PriorModel& model, const TokenSequence& sequence, const RestoreOptions& options) {
  if (!(options.tau >= 0 && options.tau <= 1)) throw UsageError("restore: tau must lie in [0, 1]");
  const auto& c = model.net.config();
  validate_sequences(std::span<const TokenSequence>(&sequence, 1), c);
  RestoreResult r;
  r.tokens = sequence;
  r.replaced.assign(sequence.size(), 0);
  IncrementalDecoder dec(model.net);
  Rng rng(options.seed, 0x7E570000 + options.stream);
  std::vector<float> probs(c.vocab);
  std::span<const float> logits = dec.step(sequence[0]);
  for (std::size_t j = 1; j < sequence.size(); ++j) {
    std::copy(logits.begin(), logits.end(), probs.begin());
    softmax_inplace(std::span<float>(probs));
    const auto original = sequence[j];
    if (static_cast<double>(probs[static_cast<std::size_t>(original)]) < options.tau) {
      std::int32_t choice;
      if (options.sample) {
        const double u = rng.uniform();
        double acc = 0;
        choice = static_cast<std::int32_t>(c.vocab - 1);
        for (std::size_t k = 0; k < c.vocab; ++k) {
          acc += probs[k];
          if (u < acc) {
            choice = static_cast<std::int32_t>(k);
            break;
          }
        }
      } else {
        choice = static_cast<std::int32_t>(std::max_element(probs.begin(), probs.end()) - probs.begin());
      }
      if (choice != original) {
        r.tokens[j] = choice;
        r.replaced[j] = 1;
      }
    }
    if (j + 1 < sequence.size()) logits = dec.step(options.original_context ? original : r.tokens[j]);
  }
  return r;
}

}  // namespace pbad
