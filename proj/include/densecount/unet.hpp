#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "densecount/density.hpp"
#include "densecount/error.hpp"
#include "densecount/io_util.hpp"
#include "densecount/nn.hpp"
#include "densecount/tensor.hpp"

namespace densecount {

struct UNetConfig {
  int depth = 3;
  int base_channels = 16;
  int in_channels = 1;
  int kernel_size = 3;

  void validate() const {
    if (depth < 1) throw ConfigError("unet: depth must be >= 1");
    if (base_channels < 1) throw ConfigError("unet: base_channels must be >= 1");
    if (in_channels < 1) throw ConfigError("unet: in_channels must be >= 1");
    if (kernel_size < 1 || kernel_size % 2 == 0)
      throw ConfigError("unet: kernel_size must be a positive odd number");
    if (depth > 16) throw ConfigError("unet: depth too large");
  }

  // Channels at encoder level `level`; level == depth is the bottleneck.
  std::size_t channels(int level) const {
    return static_cast<std::size_t>(base_channels) << level;
  }

  std::size_t divisor() const { return std::size_t{1} << depth; }

  friend bool operator==(const UNetConfig&, const UNetConfig&) = default;
};

struct ParamSpec {
  std::string name;
  Shape shape;
};

/// Parameter names and shapes in construction order: encoder levels
/// (two convs each), bottleneck (two convs), decoder levels from deepest to
/// shallowest (two convs each), then the 1x1 head.
inline std::vector<ParamSpec> unet_param_layout(const UNetConfig& cfg) {
  cfg.validate();
  const auto ks = static_cast<std::size_t>(cfg.kernel_size);
  std::vector<ParamSpec> out;
  auto conv = [&](const std::string& prefix, std::size_t cin, std::size_t cout, std::size_t k) {
    out.push_back({prefix + ".weight", {cout, cin, k, k}});
    out.push_back({prefix + ".bias", {cout}});
  };
  std::size_t cin = static_cast<std::size_t>(cfg.in_channels);
  for (int l = 0; l < cfg.depth; ++l) {
    const std::string p = "enc" + std::to_string(l);
    conv(p + ".conv1", cin, cfg.channels(l), ks);
    conv(p + ".conv2", cfg.channels(l), cfg.channels(l), ks);
    cin = cfg.channels(l);
  }
  conv("bottleneck.conv1", cin, cfg.channels(cfg.depth), ks);
  conv("bottleneck.conv2", cfg.channels(cfg.depth), cfg.channels(cfg.depth), ks);
  for (int l = cfg.depth - 1; l >= 0; --l) {
    const std::string p = "dec" + std::to_string(l);
    conv(p + ".conv1", cfg.channels(l + 1) + cfg.channels(l), cfg.channels(l), ks);
    conv(p + ".conv2", cfg.channels(l), cfg.channels(l), ks);
  }
  conv("head", cfg.channels(0), 1, 1);
  return out;
}

/// Closed-form parameter count. For the default config (depth 3, base 16,
/// one input channel, 3x3 kernels) this is 487009.
inline std::size_t unet_param_count(const UNetConfig& cfg) {
  cfg.validate();
  const std::size_t k2 = static_cast<std::size_t>(cfg.kernel_size * cfg.kernel_size);
  auto conv = [&](std::size_t a, std::size_t b) { return k2 * a * b + b; };
  std::size_t total = 0;
  std::size_t cin = static_cast<std::size_t>(cfg.in_channels);
  for (int l = 0; l < cfg.depth; ++l) {
    total += conv(cin, cfg.channels(l)) + conv(cfg.channels(l), cfg.channels(l));
    cin = cfg.channels(l);
  }
  total += conv(cin, cfg.channels(cfg.depth)) +
           conv(cfg.channels(cfg.depth), cfg.channels(cfg.depth));
  for (int l = 0; l < cfg.depth; ++l)
    total += conv(cfg.channels(l + 1) + cfg.channels(l), cfg.channels(l)) +
             conv(cfg.channels(l), cfg.channels(l));
  total += cfg.channels(0) + 1;
  return total;
}

template <typename T>
struct BasicUNet {
  UNetConfig config;
  std::vector<nn::ParamTensor<T>> params;
  // Per-channel input normalization (x - mean) / std, fit on the training split.
  std::vector<float> input_mean;
  std::vector<float> input_std;
  // Ground-truth maps were multiplied by this factor for training.
  double density_scale = 1.0;
  std::string fingerprint;

  template <typename U>
  BasicUNet<U> cast() const {
    BasicUNet<U> out;
    out.config = config;
    out.input_mean = input_mean;
    out.input_std = input_std;
    out.density_scale = density_scale;
    out.fingerprint = fingerprint;
    for (const auto& p : params) out.params.emplace_back(p.name, p.value.template cast<U>());
    return out;
  }

  void zero_grad() {
    for (auto& p : params) p.zero_grad();
  }
};

using UNetModel = BasicUNet<float>;

/// He-initialized weights and zero biases, reproducible from `seed`.
template <typename T = float>
BasicUNet<T> make_unet(const UNetConfig& cfg, std::uint64_t seed) {
  BasicUNet<T> m;
  m.config = cfg;
  std::uint64_t layer = 0;
  for (auto& spec : unet_param_layout(cfg)) {
    BasicTensor<T> v = spec.shape.size() == 1
                           ? BasicTensor<T>(spec.shape)
                           : nn::he_init<T>(spec.shape, seed * 1000003ULL + (layer++));
    m.params.emplace_back(spec.name, std::move(v));
  }
  m.input_mean.assign(static_cast<std::size_t>(cfg.in_channels), 0.0f);
  m.input_std.assign(static_cast<std::size_t>(cfg.in_channels), 1.0f);
  return m;
}

template <typename T>
struct UNetCache {
  Shape input_shape;
  std::vector<BasicTensor<T>> conv_inputs;  // one per conv layer, layer order
  std::vector<BasicTensor<T>> pre_act;      // conv outputs before ReLU (no entry for head)
  std::vector<nn::MaxPoolResult<T>> pools;  // one per encoder level
};

namespace detail {

template <typename T>
void audit_shapes(const BasicUNet<T>& model) {
  const auto layout = unet_param_layout(model.config);
  if (layout.size() != model.params.size())
    throw ConfigError("unet shape audit: expected " + std::to_string(layout.size()) +
                      " parameters, model has " + std::to_string(model.params.size()));
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const auto& p = model.params[i];
    if (p.name != layout[i].name || p.value.shape() != layout[i].shape)
      throw ConfigError("unet shape audit: parameter " + std::to_string(i) + " is '" + p.name +
                        "' " + shape_str(p.value.shape()) + ", config expects '" +
                        layout[i].name + "' " + shape_str(layout[i].shape));
  }
  if (model.input_mean.size() != static_cast<std::size_t>(model.config.in_channels) ||
      model.input_std.size() != model.input_mean.size())
    throw ConfigError("unet shape audit: normalization stats do not match in_channels");
}

template <typename T>
BasicTensor<T> normalize_input(const BasicUNet<T>& model, const BasicTensor<T>& images) {
  const Dims4 d = dims4(images, "unet_forward");
  if (d.c != static_cast<std::size_t>(model.config.in_channels))
    throw ConfigError("unet_forward: input has " + std::to_string(d.c) +
                      " channels, model expects " + std::to_string(model.config.in_channels));
  BasicTensor<T> x = images;
  for (std::size_t n = 0; n < d.n; ++n)
    for (std::size_t c = 0; c < d.c; ++c) {
      const T mean = static_cast<T>(model.input_mean[c]);
      const T inv = static_cast<T>(1.0 / static_cast<double>(model.input_std[c]));
      T* plane = x.data() + (n * d.c + c) * d.plane();
      for (std::size_t i = 0; i < d.plane(); ++i) plane[i] = (plane[i] - mean) * inv;
    }
  return x;
}

template <typename T>
BasicTensor<T> add(BasicTensor<T> a, const BasicTensor<T>& b) {
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
  return a;
}

}  // namespace detail

template <typename T>
struct UNetOutput {
  BasicTensor<T> pred;
  UNetCache<T> cache;
};

/// Encoder (conv-relu x2, maxpool per level), bottleneck, decoder (upsample,
/// concat skip, conv-relu x2 per level) and a linear 1x1 head.
/// images [B,C,H,W] with H, W divisible by 2^depth -> pred [B,1,H,W].
template <typename T>
UNetOutput<T> unet_forward(const BasicUNet<T>& model, const BasicTensor<T>& images) {
  detail::audit_shapes(model);
  const Dims4 d = dims4(images, "unet_forward");
  const std::size_t div = model.config.divisor();
  if (d.h % div != 0 || d.w % div != 0)
    throw UsageError("unet_forward: spatial dims " + shape_str(images.shape()) +
                     " not divisible by " + std::to_string(div));

  UNetOutput<T> out;
  auto& cache = out.cache;
  cache.input_shape = images.shape();
  std::size_t layer = 0;
  auto conv_relu = [&](const BasicTensor<T>& x) {
    cache.conv_inputs.push_back(x);
    auto z = nn::conv2d_forward(x, model.params[2 * layer].value, model.params[2 * layer + 1].value);
    ++layer;
    auto a = nn::relu_forward(z);
    cache.pre_act.push_back(std::move(z));
    return a;
  };

  const int depth = model.config.depth;
  BasicTensor<T> x = detail::normalize_input(model, images);
  std::vector<BasicTensor<T>> skips;
  for (int l = 0; l < depth; ++l) {
    x = conv_relu(x);
    x = conv_relu(x);
    skips.push_back(x);
    cache.pools.push_back(nn::maxpool2x2_forward(x));
    x = cache.pools.back().output;
  }
  x = conv_relu(x);
  x = conv_relu(x);
  for (int l = depth - 1; l >= 0; --l) {
    auto up = nn::upsample_nearest2x_forward(x);
    x = conv_relu(nn::concat_channels_forward(up, skips[static_cast<std::size_t>(l)]));
    x = conv_relu(x);
  }
  cache.conv_inputs.push_back(x);
  out.pred = nn::conv2d_forward(x, model.params[2 * layer].value, model.params[2 * layer + 1].value);
  return out;
}

/// Adjoint of unet_forward. Overwrites every parameter's grad.
template <typename T>
void unet_backward(BasicUNet<T>& model, const UNetCache<T>& cache, const BasicTensor<T>& grad_pred) {
  const int depth = model.config.depth;
  const std::size_t n_layers = model.params.size() / 2;
  if (cache.conv_inputs.size() != n_layers || cache.pre_act.size() != n_layers - 1)
    throw UsageError("unet_backward: cache does not belong to this model");

  auto store = [&](std::size_t layer, nn::ConvGrads<T>& g) {
    model.params[2 * layer].grad = std::move(g.weight);
    model.params[2 * layer + 1].grad = std::move(g.bias);
  };
  std::size_t layer = n_layers - 1;
  auto head = nn::conv2d_backward(grad_pred, cache.conv_inputs[layer], model.params[2 * layer].value);
  BasicTensor<T> g = std::move(head.input);
  store(layer, head);

  auto conv_relu_back = [&](const BasicTensor<T>& grad) {
    --layer;
    auto gz = nn::relu_backward(grad, cache.pre_act[layer]);
    auto cg = nn::conv2d_backward(gz, cache.conv_inputs[layer], model.params[2 * layer].value);
    BasicTensor<T> gi = std::move(cg.input);
    store(layer, cg);
    return gi;
  };

  std::vector<BasicTensor<T>> skip_grads(static_cast<std::size_t>(depth));
  for (int l = 0; l < depth; ++l) {
    g = conv_relu_back(g);
    g = conv_relu_back(g);
    auto [g_up, g_skip] = nn::concat_channels_backward(g, model.config.channels(l + 1));
    skip_grads[static_cast<std::size_t>(l)] = std::move(g_skip);
    g = nn::upsample_nearest2x_backward(g_up);
  }
  g = conv_relu_back(g);
  g = conv_relu_back(g);
  for (int l = depth - 1; l >= 0; --l) {
    const auto& pool = cache.pools[static_cast<std::size_t>(l)];
    g = detail::add(nn::maxpool2x2_backward(g, pool.argmax, pool.input_shape),
                    skip_grads[static_cast<std::size_t>(l)]);
    g = conv_relu_back(g);
    g = conv_relu_back(g);
  }
}

// ---- padding -------------------------------------------------------------

inline std::size_t round_up(std::size_t v, std::size_t multiple) {
  return (v + multiple - 1) / multiple * multiple;
}

namespace detail {
// Mirror index without repeating the edge: -1 -> 1, n -> n - 2.
inline std::size_t reflect_index(std::ptrdiff_t i, std::ptrdiff_t n) {
  if (n == 1) return 0;
  const std::ptrdiff_t period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return static_cast<std::size_t>(i < n ? i : period - i);
}
}  // namespace detail

/// Extends the bottom and right edges by reflection to height x width.
template <typename T>
BasicTensor<T> reflect_pad(const BasicTensor<T>& t, std::size_t height, std::size_t width) {
  const Dims4 d = dims4(t, "reflect_pad");
  if (height < d.h || width < d.w) throw UsageError("reflect_pad: target smaller than input");
  if (height == d.h && width == d.w) return t;
  BasicTensor<T> out({d.n, d.c, height, width});
  for (std::size_t p = 0; p < d.n * d.c; ++p) {
    const T* src = t.data() + p * d.plane();
    T* dst = out.data() + p * height * width;
    for (std::size_t y = 0; y < height; ++y) {
      const std::size_t sy = detail::reflect_index(static_cast<std::ptrdiff_t>(y),
                                                   static_cast<std::ptrdiff_t>(d.h));
      for (std::size_t x = 0; x < width; ++x)
        dst[y * width + x] = src[sy * d.w + detail::reflect_index(static_cast<std::ptrdiff_t>(x),
                                                                  static_cast<std::ptrdiff_t>(d.w))];
    }
  }
  return out;
}

template <typename T>
BasicTensor<T> crop(const BasicTensor<T>& t, std::size_t height, std::size_t width) {
  const Dims4 d = dims4(t, "crop");
  if (height > d.h || width > d.w) throw UsageError("crop: target larger than input");
  BasicTensor<T> out({d.n, d.c, height, width});
  for (std::size_t p = 0; p < d.n * d.c; ++p)
    for (std::size_t y = 0; y < height; ++y)
      std::copy_n(t.data() + p * d.plane() + y * d.w, width,
                  out.data() + (p * height + y) * width);
  return out;
}

struct CountPrediction {
  double count = 0.0;
  DensityMap density;
};

/// Count for one image [C,H,W] or [1,C,H,W]: reflect-pad to the model's
/// divisor, forward, crop back, clamp negatives, undo the density scale and
/// integrate.
inline CountPrediction predict_count(const UNetModel& model, const Tensor& image) {
  Tensor batch = image;
  if (image.rank() == 3) batch = Tensor({1, image.dim(0), image.dim(1), image.dim(2)}, image.storage());
  const Dims4 d = dims4(batch, "predict_count");
  if (d.n != 1) throw UsageError("predict_count: expects a single image");
  const std::size_t div = model.config.divisor();
  Tensor padded = reflect_pad(batch, round_up(d.h, div), round_up(d.w, div));
  Tensor pred = crop(unet_forward(model, padded).pred, d.h, d.w);

  CountPrediction out;
  out.density = DensityMap(static_cast<int>(d.w), static_cast<int>(d.h));
  const double inv_scale = 1.0 / model.density_scale;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double v = std::max(0.0, static_cast<double>(pred[i])) * inv_scale;
    out.density.values[i] = static_cast<float>(v);
  }
  out.count = integrate_count(out.density);
  return out;
}

// ---- checkpoint ----------------------------------------------------------
// "UNCK", u8 version, u32 length + config record (sorted key=value lines),
// u32 channel count + (f32 mean, f32 std) per channel, then per parameter:
// u32 length + name, u8 rank, u32 extents, f32 payload. All little-endian.

inline constexpr std::uint8_t kCheckpointVersion = 1;

inline std::string checkpoint_config_record(const UNetModel& model) {
  std::map<std::string, std::string> kv{
      {"base_channels", std::to_string(model.config.base_channels)},
      {"density_scale", io::format_double(model.density_scale)},
      {"depth", std::to_string(model.config.depth)},
      {"fingerprint", model.fingerprint},
      {"in_channels", std::to_string(model.config.in_channels)},
      {"kernel_size", std::to_string(model.config.kernel_size)},
  };
  std::string out;
  for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
  return out;
}

inline void save_checkpoint(const UNetModel& model, std::ostream& os) {
  detail::audit_shapes(model);
  io::write_bytes(os, "UNCK");
  io::write_u8(os, kCheckpointVersion);
  const std::string record = checkpoint_config_record(model);
  io::write_u32(os, static_cast<std::uint32_t>(record.size()));
  io::write_bytes(os, record);
  io::write_u32(os, static_cast<std::uint32_t>(model.input_mean.size()));
  for (std::size_t c = 0; c < model.input_mean.size(); ++c) {
    io::write_f32(os, model.input_mean[c]);
    io::write_f32(os, model.input_std[c]);
  }
  for (const auto& p : model.params) {
    io::write_u32(os, static_cast<std::uint32_t>(p.name.size()));
    io::write_bytes(os, p.name);
    io::write_u8(os, static_cast<std::uint8_t>(p.value.rank()));
    for (std::size_t e : p.value.shape()) io::write_u32(os, static_cast<std::uint32_t>(e));
    os.write(reinterpret_cast<const char*>(p.value.data()),
             static_cast<std::streamsize>(p.value.size() * sizeof(float)));
  }
  if (!os) throw IoError("checkpoint write failed");
}

namespace detail {

inline int record_int(const std::map<std::string, std::string>& kv, const std::string& key) {
  auto it = kv.find(key);
  if (it == kv.end()) throw CheckpointError("checkpoint: config record lacks '" + key + "'");
  auto v = io::parse_number<int>(it->second);
  if (!v) throw CheckpointError("checkpoint: bad value for '" + key + "'");
  return *v;
}

}  // namespace detail

/// Reads a checkpoint. When `expected` is given, every stored parameter is
/// audited against the shapes that config implies.
inline UNetModel load_checkpoint(std::istream& is, const std::optional<UNetConfig>& expected = {}) {
  char magic[4];
  if (!io::read_exact(is, magic, 4)) throw CheckpointError("checkpoint: truncated header");
  if (std::string_view(magic, 4) != "UNCK")
    throw CheckpointError("checkpoint: bad magic '" + std::string(magic, 4) + "'");
  auto version = io::read_u8(is);
  if (!version) throw CheckpointError("checkpoint: truncated header");
  if (*version != kCheckpointVersion)
    throw CheckpointError("checkpoint: unsupported version " + std::to_string(*version));

  auto rec_len = io::read_u32(is);
  if (!rec_len || *rec_len > (1u << 20)) throw CheckpointError("checkpoint: bad config record");
  std::string record(*rec_len, '\0');
  if (!io::read_exact(is, record.data(), record.size()))
    throw CheckpointError("checkpoint: truncated config record");
  std::map<std::string, std::string> kv;
  {
    std::istringstream rs(record);
    std::string line;
    while (std::getline(rs, line)) {
      auto eq = line.find('=');
      if (eq == std::string::npos) throw CheckpointError("checkpoint: malformed config line");
      kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
  }

  UNetModel model;
  model.config.depth = detail::record_int(kv, "depth");
  model.config.base_channels = detail::record_int(kv, "base_channels");
  model.config.in_channels = detail::record_int(kv, "in_channels");
  model.config.kernel_size = detail::record_int(kv, "kernel_size");
  try {
    model.config.validate();
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint: ") + e.what());
  }
  if (auto it = kv.find("density_scale"); it != kv.end()) {
    auto s = io::parse_number<double>(it->second);
    if (!s || !(*s > 0.0)) throw CheckpointError("checkpoint: bad density_scale");
    model.density_scale = *s;
  }
  if (auto it = kv.find("fingerprint"); it != kv.end()) model.fingerprint = it->second;

  const UNetConfig& audit_cfg = expected ? *expected : model.config;
  const auto layout = unet_param_layout(audit_cfg);

  auto channels = io::read_u32(is);
  if (!channels) throw CheckpointError("checkpoint: truncated normalization stats");
  if (*channels != static_cast<std::uint32_t>(audit_cfg.in_channels))
    throw ShapeAuditError("checkpoint shape audit: normalization stats for " +
                          std::to_string(*channels) + " channels, config expects " +
                          std::to_string(audit_cfg.in_channels));
  for (std::uint32_t c = 0; c < *channels; ++c) {
    float mean, stdev;
    if (!io::read_exact(is, reinterpret_cast<char*>(&mean), 4) ||
        !io::read_exact(is, reinterpret_cast<char*>(&stdev), 4))
      throw CheckpointError("checkpoint: truncated normalization stats");
    if (!std::isfinite(mean) || !std::isfinite(stdev) || !(stdev > 0.0f))
      throw CheckpointError("checkpoint: invalid normalization stats");
    model.input_mean.push_back(mean);
    model.input_std.push_back(stdev);
  }

  for (const auto& spec : layout) {
    auto name_len = io::read_u32(is);
    if (!name_len) throw CheckpointError("checkpoint: missing parameter '" + spec.name + "'");
    if (*name_len > 4096) throw CheckpointError("checkpoint: corrupt name before '" + spec.name + "'");
    std::string name(*name_len, '\0');
    if (!io::read_exact(is, name.data(), name.size()))
      throw CheckpointError("checkpoint: truncated name for parameter '" + spec.name + "'");
    auto rank = io::read_u8(is);
    if (!rank) throw CheckpointError("checkpoint: truncated header for parameter '" + name + "'");
    Shape shape;
    for (std::uint8_t r = 0; r < *rank; ++r) {
      auto e = io::read_u32(is);
      if (!e) throw CheckpointError("checkpoint: truncated header for parameter '" + name + "'");
      shape.push_back(*e);
    }
    if (name != spec.name || shape != spec.shape)
      throw ShapeAuditError("checkpoint shape audit: stored parameter '" + name + "' " +
                            shape_str(shape) + " but config expects '" + spec.name + "' " +
                            shape_str(spec.shape));
    Tensor value(shape);
    if (!io::read_exact(is, reinterpret_cast<char*>(value.data()), value.size() * sizeof(float)))
      throw CheckpointError("checkpoint: truncated tensor for parameter '" + name + "'");
    model.params.emplace_back(name, std::move(value));
  }
  if (!io::at_eof(is)) throw CheckpointError("checkpoint: trailing bytes after last parameter");
  if (expected && !(*expected == model.config))
    throw ShapeAuditError("checkpoint shape audit: config record disagrees with expected config");
  return model;
}

inline void save_checkpoint_file(const UNetModel& model, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  save_checkpoint(model, os);
}

inline UNetModel load_checkpoint_file(const std::string& path,
                                      const std::optional<UNetConfig>& expected = {}) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path + "'");
  return load_checkpoint(is, expected);
}

}  // namespace densecount
