#include "pbad/anomaly.hpp"

#include <algorithm>
#include <cmath>
#include <thread>

#include "pbad/error.hpp"

namespace pbad {

std::string to_string(Method m) {
  switch (m) {
    case Method::recon: return "recon";
    case Method::recon_discrete: return "recon-discrete";
    case Method::svm: return "svm";
    case Method::svm_discrete: return "svm-discrete";
    case Method::restore: return "restore";
  }
  return "?";
}

Method parse_method(const std::string& s) {
  if (s == "recon") return Method::recon;
  if (s == "recon-discrete") return Method::recon_discrete;
  if (s == "svm") return Method::svm;
  if (s == "svm-discrete") return Method::svm_discrete;
  if (s == "restore") return Method::restore;
  throw UsageError("unknown method '" + s + "' (expected recon, recon-discrete, svm, svm-discrete or restore)");
}

double ssim_patch(std::span<const float> a, std::span<const float> b, std::size_t side, const SsimParams& params) {
  if (a.size() != b.size()) {
    throw UsageError("ssim: patch sizes differ (" + std::to_string(a.size()) + " vs " + std::to_string(b.size()) + ")");
  }
  const std::size_t n = side * side;
  if (n == 0 || a.size() % n != 0) throw UsageError("ssim: patch size is not channels x side x side");
  if (params.window != side) {
    throw UsageError("ssim: window " + std::to_string(params.window) + " must equal the patch side " +
                     std::to_string(side));
  }
  const std::size_t channels = a.size() / n;
  double total = 0;
  for (std::size_t c = 0; c < channels; ++c) {
    const float* x = a.data() + c * n;
    const float* y = b.data() + c * n;
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < n; ++i) {
      mx += x[i];
      my += y[i];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double vx = 0, vy = 0, cxy = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double dx = x[i] - mx, dy = y[i] - my;
      vx += dx * dx;
      vy += dy * dy;
      cxy += dx * dy;
    }
    vx /= static_cast<double>(n);
    vy /= static_cast<double>(n);
    cxy /= static_cast<double>(n);
    total += ((2 * mx * my + params.c1) * (2 * cxy + params.c2)) /
             ((mx * mx + my * my + params.c1) * (vx + vy + params.c2));
  }
  return total / static_cast<double>(channels);
}

double central_error(std::span<const float> patch, std::span<const float> recon, std::size_t side) {
  const std::size_t n = side * side, mid = (side / 2) * side + side / 2;
  double s = 0;
  for (std::size_t c = 0; c < 3; ++c) {
    const double d = static_cast<double>(patch[c * n + mid]) - static_cast<double>(recon[c * n + mid]);
    s += d * d;
  }
  return s / 3.0;
}

std::vector<std::size_t> grid_positions(std::size_t n, std::size_t stride) {
  if (stride == 0) throw UsageError("stride must be positive");
  std::vector<std::size_t> out;
  for (std::size_t p = 0; p < n; p += stride) out.push_back(p);
  return out;
}

std::size_t nearest_grid_index(std::size_t p, std::size_t n, std::size_t stride) {
  const std::size_t last = (n - 1) / stride;
  return std::min(last, (p + (stride - 1) / 2) / stride);
}

AnomalyMap assemble_map(const ImageRGB& image, std::size_t side, const ScoreOptions& options,
                        const BatchScorer& score_batch) {
  if (image.height == 0 || image.width == 0) throw DataError("cannot score an empty image");
  const auto rows = grid_positions(image.height, options.stride);
  const auto cols = grid_positions(image.width, options.stride);
  std::vector<PatchCoord> centers;
  centers.reserve(rows.size() * cols.size());
  for (auto r : rows)
    for (auto c : cols) centers.push_back({0, r, c});
  std::vector<float> grid(centers.size(), 0.0f);

  const std::size_t workers = std::max<std::size_t>(1, std::min(options.workers, centers.size()));
  const std::size_t batch = std::max<std::size_t>(1, options.batch);
  const std::span<const ImageRGB> images(&image, 1);
  auto run = [&](std::size_t begin, std::size_t end) {
    NoGradGuard guard;
    for (std::size_t b = begin; b < end; b += batch) {
      const std::size_t e = std::min(end, b + batch);
      const auto patches = gather_patches(images, std::span<const PatchCoord>(centers).subspan(b, e - b), side);
      score_batch(patches, std::span<float>(grid).subspan(b, e - b));
    }
  };
  if (workers == 1) {
    run(0, centers.size());
  } else {
    std::vector<std::thread> threads;
    std::vector<std::exception_ptr> errors(workers);
    const std::size_t chunk = (centers.size() + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
      const std::size_t begin = std::min(centers.size(), w * chunk), end = std::min(centers.size(), begin + chunk);
      threads.emplace_back([&, w, begin, end] {
        try {
          run(begin, end);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& t : threads) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  AnomalyMap map;
  map.height = image.height;
  map.width = image.width;
  map.stride = options.stride;
  map.scores.resize(image.height * image.width);
  for (std::size_t r = 0; r < image.height; ++r) {
    const std::size_t gr = nearest_grid_index(r, image.height, options.stride);
    for (std::size_t c = 0; c < image.width; ++c) {
      const std::size_t gc = nearest_grid_index(c, image.width, options.stride);
      const float v = grid[gr * cols.size() + gc];
      if (!std::isfinite(v)) throw NumericError("non-finite anomaly score at (" + std::to_string(r) + ", " + std::to_string(c) + ")");
      map.scores[r * image.width + c] = v;
    }
  }
  return map;
}

std::vector<float> svm_features(std::span<const float> z, std::size_t batch, std::size_t channels, std::size_t side,
                                SvmInput input) {
  const std::size_t per = channels * side * side;
  if (z.size() != batch * per) throw UsageError("svm_features: latent size mismatch");
  if (input == SvmInput::full) return {z.begin(), z.end()};
  std::vector<float> out(batch * channels);
  const std::size_t mid = (side / 2) * side + side / 2;
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < channels; ++c) out[b * channels + c] = z[b * per + c * side * side + mid];
  return out;
}

namespace {

void require_patch_side(const AutoencoderNet<float>& net) {
  if (net.arch().input_side % 2 == 0) throw UsageError("patch side must be odd to have a central pixel");
}

void check_svm(const SvmModel& svm, std::uint64_t encoder_hash, std::size_t feature_dim) {
  if (svm.encoder_hash != hash_hex(encoder_hash)) {
    throw DataError("svm was fitted on encoder " + svm.encoder_hash + ", but the given encoder is " +
                    hash_hex(encoder_hash));
  }
  if (svm.dim != feature_dim) {
    throw DataError("svm expects " + std::to_string(svm.dim) + "-D features, encoder gives " +
                    std::to_string(feature_dim));
  }
}

}  // namespace

AnomalyMap score_map_recon(const ImageRGB& image, const AeModel& model, const ScoreOptions& options) {
  const auto& net = model.net;
  require_patch_side(net);
  const std::size_t side = net.arch().input_side;
  auto map = assemble_map(image, side, options, [&](const PatchBatch& batch, std::span<float> out) {
    const Tensor x = batch.to_tensor();
    const Tensor xhat = net.decode(net.encode(x, Mode::infer), Mode::infer);
    const std::size_t per = batch.patch_values();
    for (std::size_t i = 0; i < batch.size(); ++i) {
      out[i] = static_cast<float>(central_error(batch.patch(i), xhat.data().subspan(i * per, per), side));
    }
  });
  map.method = Method::recon;
  map.provenance["ae"] = hash_hex(model.content_hash());
  return map;
}

AnomalyMap score_map_recon(const ImageRGB& image, const VqModel& model, const ScoreOptions& options) {
  const auto& net = model.net;
  require_patch_side(net);
  const std::size_t side = net.arch().input_side, S = net.arch().latent_side(), d = model.codebook.dim();
  auto map = assemble_map(image, side, options, [&](const PatchBatch& batch, std::span<float> out) {
    const auto q = model.encode_quantized(batch.to_tensor());
    std::vector<float> zq;
    zq.reserve(q.size() * d * S * S);
    for (const auto& l : q) zq.insert(zq.end(), l.vectors.begin(), l.vectors.end());
    const Tensor xhat = net.decode(Tensor::from_data({q.size(), d, S, S}, std::move(zq)), Mode::infer);
    const std::size_t per = batch.patch_values();
    for (std::size_t i = 0; i < batch.size(); ++i) {
      out[i] = static_cast<float>(central_error(batch.patch(i), xhat.data().subspan(i * per, per), side));
    }
  });
  map.method = Method::recon_discrete;
  map.provenance["vqae"] = hash_hex(model.content_hash());
  return map;
}

AnomalyMap score_map_svm(const ImageRGB& image, const AeModel& model, const SvmModel& svm, const ScoreOptions& options) {
  const auto& net = model.net;
  require_patch_side(net);
  const std::size_t side = net.arch().input_side, S = net.arch().latent_side(), d = net.arch().latent_channels();
  check_svm(svm, model.content_hash(), svm.input == SvmInput::full ? d * S * S : d);
  auto map = assemble_map(image, side, options, [&](const PatchBatch& batch, std::span<float> out) {
    const Tensor z = net.encode(batch.to_tensor(), Mode::infer);
    const auto f = svm.decision_batch(svm_features(z.data(), batch.size(), d, S, svm.input));
    for (std::size_t i = 0; i < f.size(); ++i) out[i] = static_cast<float>(-f[i]);
  });
  map.method = Method::svm;
  map.provenance["ae"] = hash_hex(model.content_hash());
  map.provenance["svm_encoder"] = svm.encoder_hash;
  return map;
}

AnomalyMap score_map_svm(const ImageRGB& image, const VqModel& model, const SvmModel& svm, const ScoreOptions& options) {
  const auto& net = model.net;
  require_patch_side(net);
  const std::size_t side = net.arch().input_side, S = net.arch().latent_side(), d = model.codebook.dim();
  check_svm(svm, model.content_hash(), svm.input == SvmInput::full ? d * S * S : d);
  auto map = assemble_map(image, side, options, [&](const PatchBatch& batch, std::span<float> out) {
    const auto q = model.encode_quantized(batch.to_tensor());
    std::vector<float> zq;
    for (const auto& l : q) zq.insert(zq.end(), l.vectors.begin(), l.vectors.end());
    const auto f = svm.decision_batch(svm_features(zq, q.size(), d, S, svm.input));
    for (std::size_t i = 0; i < f.size(); ++i) out[i] = static_cast<float>(-f[i]);
  });
  map.method = Method::svm_discrete;
  map.provenance["vqae"] = hash_hex(model.content_hash());
  map.provenance["svm_encoder"] = svm.encoder_hash;
  return map;
}

AnomalyMap score_map_restore(const ImageRGB& image, const VqModel& model, const PriorModel& prior,
                             const ScoreOptions& options) {
  const auto& net = model.net;
  require_patch_side(net);
  const auto& pc = prior.net.config();
  if (pc.vocab != model.codebook.size()) {
    throw DataError("prior vocabulary " + std::to_string(pc.vocab) + " does not match codebook size " +
                    std::to_string(model.codebook.size()));
  }
  const std::size_t side = net.arch().input_side, S = net.arch().latent_side();
  if (pc.grid_side != S) {
    throw DataError("prior grid side " + std::to_string(pc.grid_side) + " does not match latent side " +
                    std::to_string(S));
  }
  auto map = assemble_map(image, side, options, [&](const PatchBatch& batch, std::span<float> out) {
    const auto q = model.encode_quantized(batch.to_tensor());
    std::vector<std::vector<std::int32_t>> grids;
    for (std::size_t i = 0; i < q.size(); ++i) {
      RestoreOptions ro = options.restore;
      const auto& c = batch.coords[i];
      ro.stream = (static_cast<std::uint64_t>(c.row) << 32) ^ c.col;
      const auto r = restore(prior, tokens_from_grid(q[i].indices, pc.vocab), ro);
      grids.push_back(grid_from_tokens(r.tokens));
    }
    const Tensor restored = model.decode_indices(grids);
    const std::size_t per = batch.patch_values();
    for (std::size_t i = 0; i < batch.size(); ++i) {
      out[i] = static_cast<float>(1.0 - ssim_patch(batch.patch(i), restored.data().subspan(i * per, per), side,
                                                   options.ssim));
    }
  });
  map.method = Method::restore;
  map.provenance["vqae"] = hash_hex(model.content_hash());
  map.provenance["prior"] = hash_hex(prior.content_hash());
  map.provenance["tau"] = options.restore.tau;
  return map;
}

void export_map(const AnomalyMap& map, const std::filesystem::path& path) {
  Container c;
  c.metadata["kind"] = "map";
  c.metadata["method"] = to_string(map.method);
  c.metadata["stride"] = map.stride;
  c.metadata["provenance"] = map.provenance;
  c.put_f32("scores", {map.height, map.width}, map.scores);
  write_container(path, c);
}

AnomalyMap import_map(const std::filesystem::path& path) {
  const Container c = read_container(path);
  if (c.metadata.value("kind", std::string{}) != "map") {
    throw DataError(path.string() + ": not a score map container");
  }
  AnomalyMap map;
  std::vector<std::uint64_t> dims;
  map.scores = c.get_f32("scores", &dims);
  if (dims.size() != 2) throw DataError(path.string() + ": scores tensor is not 2-D");
  map.height = dims[0];
  map.width = dims[1];
  map.method = parse_method(c.metadata.value("method", std::string{"recon"}));
  map.stride = c.metadata.value("stride", std::size_t{1});
  if (c.metadata.contains("provenance")) map.provenance = c.metadata.at("provenance");
  return map;
}

std::vector<std::uint16_t> preview_levels(const AnomalyMap& map) {
  std::vector<std::uint16_t> out(map.scores.size(), 32768);
  if (map.scores.empty()) return out;
  const auto [lo, hi] = std::minmax_element(map.scores.begin(), map.scores.end());
  const double a = *lo, b = *hi;
  if (!(b > a)) return out;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<std::uint16_t>(std::lround((map.scores[i] - a) / (b - a) * 65535.0));
  }
  return out;
}

void write_map_preview(const AnomalyMap& map, const std::filesystem::path& path) {
  const auto levels = preview_levels(map);
  std::vector<float> values(levels.size());
  for (std::size_t i = 0; i < levels.size(); ++i) values[i] = static_cast<float>(levels[i] / 65535.0);
  write_gray_png(path, map.height, map.width, values, 16);
}

}  // namespace pbad
