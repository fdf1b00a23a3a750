#pragma once

#include <algorithm>
#include <array>
#include <functional>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <limits>
#include <optional>
#include <ostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "densecount/annotations.hpp"
#include "densecount/density.hpp"
#include "densecount/error.hpp"
#include "densecount/image_io.hpp"
#include "densecount/nn.hpp"
#include "densecount/parallel.hpp"
#include "densecount/unet.hpp"

namespace densecount {

// ---- splits --------------------------------------------------------------

struct SplitSpec {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
  std::uint64_t seed = 42;
  // When set, images are assigned by path instead of by fraction.
  std::optional<std::array<std::vector<std::string>, 3>> explicit_lists;

  void validate() const {
    if (explicit_lists) return;
    if (train < 0 || val < 0 || test < 0) throw ConfigError("split fractions must be >= 0");
    if (std::abs(train + val + test - 1.0) > 1e-9)
      throw ConfigError("split fractions must sum to 1");
  }
};

struct Splits {
  std::vector<AnnotatedImage> train;
  std::vector<AnnotatedImage> val;
  std::vector<AnnotatedImage> test;
};

/// Seeded shuffle then partition by fraction (or assignment by explicit
/// lists). The three parts are disjoint by image_path and cover the input.
inline Splits make_splits(std::span<const AnnotatedImage> images, const SplitSpec& spec) {
  spec.validate();
  std::set<std::string> seen;
  for (const auto& img : images)
    if (!seen.insert(img.image_path).second)
      throw ValidationError("make_splits: duplicate image_path '" + img.image_path + "'");

  Splits out;
  if (spec.explicit_lists) {
    std::unordered_map<std::string, int> part;
    for (int p = 0; p < 3; ++p)
      for (const auto& path : (*spec.explicit_lists)[static_cast<std::size_t>(p)])
        if (!part.emplace(path, p).second)
          throw ValidationError("make_splits: '" + path + "' listed in two splits");
    for (const auto& img : images) {
      auto it = part.find(img.image_path);
      if (it == part.end())
        throw ValidationError("make_splits: '" + img.image_path + "' not in any split list");
      (it->second == 0 ? out.train : it->second == 1 ? out.val : out.test).push_back(img);
    }
    return out;
  }

  std::vector<std::size_t> order(images.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 rng(spec.seed);
  for (std::size_t i = order.size(); i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(order[i - 1], order[pick(rng)]);
  }
  const std::size_t n = images.size();
  const auto n_train = std::min(n, static_cast<std::size_t>(std::llround(spec.train * n)));
  const auto n_val = std::min(n - n_train, static_cast<std::size_t>(std::llround(spec.val * n)));
  for (std::size_t i = 0; i < n; ++i) {
    auto& dst = i < n_train ? out.train : i < n_train + n_val ? out.val : out.test;
    dst.push_back(images[order[i]]);
  }
  return out;
}

// ---- samples & patches ---------------------------------------------------

struct Sample {
  AnnotatedImage truth;
  Tensor image;  // [C,H,W]
  DensityMap density;
};

/// Loads each image (paths relative to base_dir) and synthesizes its
/// ground-truth map.
inline std::vector<Sample> load_samples(std::span<const AnnotatedImage> images,
                                        const std::filesystem::path& base_dir,
                                        const KernelSpec& kernel, int jobs = 1) {
  std::vector<Sample> out(images.size());
  parallel_for(images.size(), jobs, [&](std::size_t i) {
    Sample s;
    s.truth = images[i];
    const auto path = base_dir / images[i].image_path;
    s.image = load_image(path.string());
    if (s.image.dim(1) != static_cast<std::size_t>(images[i].height) ||
        s.image.dim(2) != static_cast<std::size_t>(images[i].width))
      throw ValidationError("image '" + path.string() + "' is " + std::to_string(s.image.dim(2)) +
                            "x" + std::to_string(s.image.dim(1)) + ", annotations say " +
                            std::to_string(images[i].width) + "x" +
                            std::to_string(images[i].height));
    s.density = density_map(images[i], kernel);
    out[i] = std::move(s);
  });
  return out;
}

enum class PatchMode { uniform, object_biased };

struct Patch {
  Tensor image;  // [C,P,P]
  DensityMap density;
};

/// Random axis-aligned crops. The density patch is the exact sub-grid of
/// the full map, so kernels cut by the crop contribute fractional mass.
/// In object-biased mode every even-numbered patch contains a dot when the
/// image has any.
inline std::vector<Patch> sample_patches(const Tensor& image, const AnnotatedImage& truth,
                                         const DensityMap& dm, int patch_size, int count,
                                         std::uint64_t seed, PatchMode mode = PatchMode::uniform) {
  if (image.rank() != 3) throw UsageError("sample_patches: image must be [C,H,W]");
  const int H = static_cast<int>(image.dim(1)), W = static_cast<int>(image.dim(2));
  if (dm.width != W || dm.height != H)
    throw UsageError("sample_patches: density map does not match image size");
  if (patch_size < 1 || patch_size > W || patch_size > H)
    throw UsageError("sample_patches: patch size " + std::to_string(patch_size) +
                     " does not fit a " + std::to_string(W) + "x" + std::to_string(H) + " image");
  const std::size_t C = image.dim(0), P = static_cast<std::size_t>(patch_size);
  std::mt19937_64 rng(seed);
  std::vector<Patch> out;
  out.reserve(static_cast<std::size_t>(std::max(0, count)));
  for (int i = 0; i < count; ++i) {
    int x0 = std::uniform_int_distribution<int>(0, W - patch_size)(rng);
    int y0 = std::uniform_int_distribution<int>(0, H - patch_size)(rng);
    if (mode == PatchMode::object_biased && i % 2 == 0 && !truth.dots.empty()) {
      const auto& d = truth.dots[std::uniform_int_distribution<std::size_t>(
          0, truth.dots.size() - 1)(rng)];
      const int cx = std::min(static_cast<int>(std::floor(d.x + 0.5)), W - 1);
      const int cy = std::min(static_cast<int>(std::floor(d.y + 0.5)), H - 1);
      x0 = std::uniform_int_distribution<int>(std::max(0, cx - patch_size + 1),
                                              std::min(W - patch_size, cx))(rng);
      y0 = std::uniform_int_distribution<int>(std::max(0, cy - patch_size + 1),
                                              std::min(H - patch_size, cy))(rng);
    }
    Patch p{Tensor({C, P, P}), DensityMap(patch_size, patch_size)};
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < P; ++y)
        std::copy_n(image.data() + (c * static_cast<std::size_t>(H) + y + static_cast<std::size_t>(y0)) *
                                       static_cast<std::size_t>(W) + static_cast<std::size_t>(x0),
                    P, p.image.data() + (c * P + y) * P);
    for (int y = 0; y < patch_size; ++y)
      for (int x = 0; x < patch_size; ++x) p.density.at(x, y) = dm.at(x0 + x, y0 + y);
    out.push_back(std::move(p));
  }
  return out;
}

// ---- metrics -------------------------------------------------------------

struct CountRecord {
  std::string image;
  long long y = 0;    // true count (dot-list cardinality)
  double y_hat = 0.0; // predicted count

  friend bool operator==(const CountRecord&, const CountRecord&) = default;
};

struct MetricsReport {
  std::vector<CountRecord> records;
  double rmse = 0.0;
  double mae = 0.0;
  std::string config_fingerprint;

  friend bool operator==(const MetricsReport&, const MetricsReport&) = default;
};

/// RMSE and MAE over per-image counts, computed from the records alone.
inline MetricsReport make_report(std::vector<CountRecord> records, std::string fingerprint = {}) {
  MetricsReport r;
  r.records = std::move(records);
  r.config_fingerprint = std::move(fingerprint);
  if (r.records.empty()) return r;
  double abs_sum = 0.0, sq_sum = 0.0;
  for (const auto& rec : r.records) {
    const double e = rec.y_hat - static_cast<double>(rec.y);
    abs_sum += std::abs(e);
    sq_sum += e * e;
  }
  const double n = static_cast<double>(r.records.size());
  r.mae = abs_sum / n;
  // Rounding can leave sqrt(mean sq) an ulp under the mean absolute error.
  r.rmse = std::max(std::sqrt(sq_sum / n), r.mae);
  return r;
}

inline nlohmann::json report_to_json(const MetricsReport& r) {
  nlohmann::json recs = nlohmann::json::array();
  for (const auto& rec : r.records)
    recs.push_back({{"image", rec.image}, {"y", rec.y}, {"y_hat", rec.y_hat}});
  return {{"records", recs},
          {"rmse", r.rmse},
          {"mae", r.mae},
          {"config_fingerprint", r.config_fingerprint}};
}

inline MetricsReport report_from_json(const nlohmann::json& j) {
  MetricsReport r;
  for (const auto& rec : j.at("records"))
    r.records.push_back({rec.at("image").get<std::string>(), rec.at("y").get<long long>(),
                         rec.at("y_hat").get<double>()});
  r.rmse = j.at("rmse").get<double>();
  r.mae = j.at("mae").get<double>();
  r.config_fingerprint = j.at("config_fingerprint").get<std::string>();
  return r;
}

/// Predicted vs. true counts on full images (reflect-padded to the model's
/// divisor). Results keep the input order regardless of `jobs`.
inline MetricsReport evaluate(const UNetModel& model, std::span<const Sample> samples,
                              int jobs = 1) {
  std::vector<CountRecord> recs(samples.size());
  parallel_for(samples.size(), jobs, [&](std::size_t i) {
    const auto& s = samples[i];
    recs[i] = {s.truth.image_path, static_cast<long long>(s.truth.dots.size()),
               predict_count(model, s.image).count};
  });
  return make_report(std::move(recs), model.fingerprint);
}

/// Scores the ground-truth maps themselves; isolates synthesis error.
inline MetricsReport evaluate_oracle(std::span<const Sample> samples, std::string fingerprint = {}) {
  std::vector<CountRecord> recs;
  for (const auto& s : samples)
    recs.push_back({s.truth.image_path, static_cast<long long>(s.truth.dots.size()),
                    integrate_count(s.density)});
  return make_report(std::move(recs), std::move(fingerprint));
}

struct ReferenceRow {
  std::string name;
  double rmse = 0.0;
  double mae = 0.0;
};

/// Fixed-width RMSE/MAE table; each reference row carries its delta
/// (report minus reference).
inline std::string compare_report(const MetricsReport& report,
                                  std::span<const ReferenceRow> references,
                                  const std::string& label = "this run") {
  if (report.records.empty()) throw UsageError("no records");
  std::ostringstream os;
  os << std::fixed << std::setprecision(3);
  os << std::left << std::setw(14) << "dataset" << std::right << std::setw(9) << "RMSE"
     << std::setw(9) << "MAE";
  if (!references.empty()) os << std::setw(10) << "dRMSE" << std::setw(10) << "dMAE";
  os << '\n';
  os << std::left << std::setw(14) << label << std::right << std::setw(9) << report.rmse
     << std::setw(9) << report.mae << '\n';
  for (const auto& ref : references)
    os << std::left << std::setw(14) << ref.name << std::right << std::setw(9) << ref.rmse
       << std::setw(9) << ref.mae << std::setw(10) << report.rmse - ref.rmse << std::setw(10)
       << report.mae - ref.mae << '\n';
  return os.str();
}

// ---- training ------------------------------------------------------------

struct TrainConfig {
  int epochs = 50;
  int batch_size = 4;
  int patch_size = 64;
  int patches_per_image = 1;
  nn::AdamConfig adam;
  KernelSpec kernel;
  double density_scale = 1.0;
  std::uint64_t seed = 42;
  int patience = 0;  // epochs without val-MAE improvement before stopping; 0 disables
  bool flips = false;
  PatchMode patch_mode = PatchMode::uniform;
  int jobs = 1;

  void validate(const UNetConfig& unet) const {
    if (epochs < 0) throw ConfigError("train: epochs must be >= 0");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (patches_per_image < 1) throw ConfigError("train: patches_per_image must be >= 1");
    if (patch_size < 1 || static_cast<std::size_t>(patch_size) % unet.divisor() != 0)
      throw ConfigError("train: patch_size must be a positive multiple of 2^depth = " +
                        std::to_string(unet.divisor()));
    if (!(adam.lr > 0.0) || !(density_scale > 0.0) || patience < 0)
      throw ConfigError("train: lr and density_scale must be > 0, patience >= 0");
    kernel.validate();
  }
};

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;
  double val_rmse = std::numeric_limits<double>::quiet_NaN();
  double val_mae = std::numeric_limits<double>::quiet_NaN();
};

struct TrainResult {
  UNetModel model;  // best validation MAE (last epoch when there is no val set)
  std::vector<EpochLog> log;
  int best_epoch = 0;
};

inline void fit_normalization(UNetModel& model, std::span<const Sample> train) {
  const std::size_t C = static_cast<std::size_t>(model.config.in_channels);
  std::vector<double> sum(C, 0.0), sq(C, 0.0);
  std::vector<std::size_t> n(C, 0);
  for (const auto& s : train) {
    if (s.image.dim(0) != C)
      throw ConfigError("image '" + s.truth.image_path + "' has " + std::to_string(s.image.dim(0)) +
                        " channels, model expects " + std::to_string(C));
    const std::size_t plane = s.image.dim(1) * s.image.dim(2);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < plane; ++i) {
        const double v = s.image[c * plane + i];
        sum[c] += v;
        sq[c] += v * v;
        ++n[c];
      }
  }
  for (std::size_t c = 0; c < C; ++c) {
    if (n[c] == 0) continue;
    const double mean = sum[c] / static_cast<double>(n[c]);
    const double var = std::max(0.0, sq[c] / static_cast<double>(n[c]) - mean * mean);
    model.input_mean[c] = static_cast<float>(mean);
    model.input_std[c] = static_cast<float>(var > 1e-12 ? std::sqrt(var) : 1.0);
  }
}

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  std::uint64_t h = seed;
  for (std::uint64_t v : {a, b}) {
    h ^= v + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
    h = (h ^ (h >> 31)) * 0xbf58476d1ce4e5b9ULL;
  }
  return h;
}

// In-place horizontal/vertical flip of a [C,P,P] patch and its density.
inline void flip_patch(Patch& p, bool horizontal, bool vertical) {
  const std::size_t C = p.image.dim(0), P = p.image.dim(1);
  auto flip_plane = [&](auto* plane) {
    if (horizontal)
      for (std::size_t y = 0; y < P; ++y) std::reverse(plane + y * P, plane + (y + 1) * P);
    if (vertical)
      for (std::size_t y = 0; y < P / 2; ++y)
        std::swap_ranges(plane + y * P, plane + (y + 1) * P, plane + (P - 1 - y) * P);
  };
  for (std::size_t c = 0; c < C; ++c) flip_plane(p.image.data() + c * P * P);
  flip_plane(p.density.values.data());
}

}  // namespace detail

using ProgressFn = std::function<void(const EpochLog&)>;

/// Minibatch Adam on rmse_loss(pred, scale * ground truth) over random
/// patches, validating count MAE on full images every epoch and keeping the
/// best model. Deterministic given config.seed.
inline TrainResult train(std::span<const Sample> train_set, std::span<const Sample> val_set,
                         const TrainConfig& cfg, const UNetConfig& unet_cfg,
                         const std::string& fingerprint = {}, const ProgressFn& progress = {}) {
  cfg.validate(unet_cfg);
  if (train_set.empty()) throw UsageError("train: empty training set");

  UNetModel model = make_unet(unet_cfg, cfg.seed);
  model.density_scale = cfg.density_scale;
  model.fingerprint = fingerprint;
  fit_normalization(model, train_set);

  TrainResult result{model, {}, 0};
  double best_mae = std::numeric_limits<double>::infinity();
  int stale = 0;
  long step = 0;
  std::mt19937_64 order_rng(cfg.seed ^ 0x5851f42d4c957f2dULL);
  const std::size_t C = static_cast<std::size_t>(unet_cfg.in_channels);
  const std::size_t P = static_cast<std::size_t>(cfg.patch_size);

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(train_set.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t i = order.size(); i > 1; --i) {
      std::uniform_int_distribution<std::size_t> pick(0, i - 1);
      std::swap(order[i - 1], order[pick(order_rng)]);
    }

    std::vector<Patch> patches(order.size() * static_cast<std::size_t>(cfg.patches_per_image));
    parallel_for(order.size(), cfg.jobs, [&](std::size_t oi) {
      const auto& s = train_set[order[oi]];
      const auto seed = detail::mix_seed(cfg.seed, static_cast<std::uint64_t>(epoch), order[oi]);
      auto ps = sample_patches(s.image, s.truth, s.density, cfg.patch_size, cfg.patches_per_image,
                               seed, cfg.patch_mode);
      std::mt19937_64 flip_rng(seed ^ 0xa0761d6478bd642fULL);
      for (std::size_t j = 0; j < ps.size(); ++j) {
        if (cfg.flips) detail::flip_patch(ps[j], flip_rng() & 1, flip_rng() & 1);
        patches[oi * static_cast<std::size_t>(cfg.patches_per_image) + j] = std::move(ps[j]);
      }
    });

    double loss_sum = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start < patches.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t B = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), patches.size() - start);
      Tensor images({B, C, P, P});
      Tensor target({B, 1, P, P});
      for (std::size_t b = 0; b < B; ++b) {
        const auto& p = patches[start + b];
        std::copy(p.image.storage().begin(), p.image.storage().end(), images.data() + b * C * P * P);
        for (std::size_t i = 0; i < P * P; ++i)
          target[b * P * P + i] = static_cast<float>(p.density.values[i] * cfg.density_scale);
      }
      ++step;
      try {
        auto fwd = unet_forward(model, images);
        auto loss = nn::rmse_loss(fwd.pred, target);
        unet_backward(model, fwd.cache, loss.grad);
        nn::adam_step(std::span(model.params), cfg.adam, step);
        loss_sum += loss.loss;
        ++batches;
      } catch (const NumericError& e) {
        throw NumericError("training diverged at epoch " + std::to_string(epoch) + ", step " +
                           std::to_string(step) + ": " + e.what());
      }
    }

    EpochLog row;
    row.epoch = epoch;
    row.train_loss = batches ? loss_sum / batches : 0.0;
    if (!val_set.empty()) {
      auto rep = evaluate(model, val_set, cfg.jobs);
      row.val_rmse = rep.rmse;
      row.val_mae = rep.mae;
    }
    result.log.push_back(row);
    if (progress) progress(row);

    const double score = val_set.empty() ? -static_cast<double>(epoch) : row.val_mae;
    if (score < best_mae) {
      best_mae = score;
      result.model = model;
      result.best_epoch = epoch;
      stale = 0;
    } else if (cfg.patience > 0 && ++stale >= cfg.patience) {
      break;
    }
  }
  for (auto& p : result.model.params) {
    p.zero_grad();
    p.adam_m.fill(0.0f);
    p.adam_v.fill(0.0f);
  }
  return result;
}

inline void write_training_log(std::ostream& os, std::span<const EpochLog> log) {
  os << "epoch,train_loss,val_rmse,val_mae\n";
  for (const auto& r : log)
    os << r.epoch << ',' << io::format_double(r.train_loss) << ','
       << (std::isnan(r.val_rmse) ? std::string("nan") : io::format_double(r.val_rmse)) << ','
       << (std::isnan(r.val_mae) ? std::string("nan") : io::format_double(r.val_mae)) << '\n';
}

}  // namespace densecount
