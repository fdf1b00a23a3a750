#pragma once

#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include "densecount/density.hpp"
#include "densecount/error.hpp"
#include "densecount/io_util.hpp"
#include "densecount/pipeline.hpp"
#include "densecount/synthgen.hpp"
#include "densecount/unet.hpp"

namespace densecount {

/// Every tunable of a run, resolved from defaults < config file <
/// environment < command-line flags. Keys are the snake_case names accepted
/// in config files; flags use the same names with dashes.
struct RunConfig {
  KernelSpec kernel;
  UNetConfig unet;
  TrainConfig train;
  SplitSpec split;
  SceneSpec scene;
  std::size_t dataset_size = 300;
  std::uint64_t seed = 42;
  int jobs = 1;

  // Keys that some layer set explicitly (as opposed to defaults).
  std::set<std::string> explicit_keys;

  void set(const std::string& key, const std::string& value);
  std::map<std::string, std::string> values() const;

  // Sorted key=value lines; the fingerprint hashes this text. `jobs` is left
  // out: results do not depend on it.
  std::string canonical() const {
    std::string out;
    for (const auto& [k, v] : values())
      if (k != "jobs") out += k + "=" + v + "\n";
    return out;
  }
  std::string fingerprint() const { return io::hex64(io::fnv1a64(canonical())); }

  // Propagates the single seed and job count into the sub-configs.
  void finalize() {
    train.seed = seed;
    train.jobs = jobs;
    split.seed = seed;
    scene.seed = seed;
    train.kernel = kernel;
  }

  bool is_explicit(const std::string& key) const { return explicit_keys.count(key) > 0; }
};

namespace detail {

template <typename T>
T parse_as(const std::string& key, const std::string& v) {
  auto r = io::parse_number<T>(io::trim(v));
  if (!r) throw ConfigError("config: bad value '" + v + "' for '" + key + "'");
  return *r;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  throw ConfigError("config: bad boolean '" + v + "' for '" + key + "'");
}

inline std::string background_name(Background b) {
  switch (b) {
    case Background::flat: return "flat";
    case Background::gradient: return "gradient";
    case Background::speckle: return "speckle";
  }
  return "speckle";
}

}  // namespace detail

inline void RunConfig::set(const std::string& key, const std::string& raw) {
  using detail::parse_as;
  const std::string v(io::trim(raw));
  static const std::map<std::string, std::function<void(RunConfig&, const std::string&, const std::string&)>>
      setters = {
          {"sigma", [](RunConfig& c, auto& k, auto& s) { c.kernel.sigma = parse_as<double>(k, s); }},
          {"adaptive", [](RunConfig& c, auto& k, auto& s) {
             c.kernel.mode = detail::parse_bool(k, s) ? KernelMode::adaptive : KernelMode::constant;
           }},
          {"k", [](RunConfig& c, auto& k, auto& s) { c.kernel.k = parse_as<int>(k, s); }},
          {"sigma0_sq", [](RunConfig& c, auto& k, auto& s) { c.kernel.sigma0_sq = parse_as<double>(k, s); }},
          {"truncation", [](RunConfig& c, auto& k, auto& s) {
             c.kernel.truncation_radius_sigmas = parse_as<double>(k, s);
           }},
          {"scale", [](RunConfig& c, auto& k, auto& s) { c.train.density_scale = parse_as<double>(k, s); }},
          {"seed", [](RunConfig& c, auto& k, auto& s) { c.seed = parse_as<std::uint64_t>(k, s); }},
          {"jobs", [](RunConfig& c, auto& k, auto& s) { c.jobs = parse_as<int>(k, s); }},
          {"depth", [](RunConfig& c, auto& k, auto& s) { c.unet.depth = parse_as<int>(k, s); }},
          {"base_channels", [](RunConfig& c, auto& k, auto& s) { c.unet.base_channels = parse_as<int>(k, s); }},
          {"in_channels", [](RunConfig& c, auto& k, auto& s) { c.unet.in_channels = parse_as<int>(k, s); }},
          {"epochs", [](RunConfig& c, auto& k, auto& s) { c.train.epochs = parse_as<int>(k, s); }},
          {"batch_size", [](RunConfig& c, auto& k, auto& s) { c.train.batch_size = parse_as<int>(k, s); }},
          {"patch_size", [](RunConfig& c, auto& k, auto& s) { c.train.patch_size = parse_as<int>(k, s); }},
          {"patches_per_image", [](RunConfig& c, auto& k, auto& s) {
             c.train.patches_per_image = parse_as<int>(k, s);
           }},
          {"lr", [](RunConfig& c, auto& k, auto& s) { c.train.adam.lr = parse_as<double>(k, s); }},
          {"beta1", [](RunConfig& c, auto& k, auto& s) { c.train.adam.beta1 = parse_as<double>(k, s); }},
          {"beta2", [](RunConfig& c, auto& k, auto& s) { c.train.adam.beta2 = parse_as<double>(k, s); }},
          {"eps", [](RunConfig& c, auto& k, auto& s) { c.train.adam.eps = parse_as<double>(k, s); }},
          {"patience", [](RunConfig& c, auto& k, auto& s) { c.train.patience = parse_as<int>(k, s); }},
          {"flips", [](RunConfig& c, auto& k, auto& s) { c.train.flips = detail::parse_bool(k, s); }},
          {"object_biased", [](RunConfig& c, auto& k, auto& s) {
             c.train.patch_mode = detail::parse_bool(k, s) ? PatchMode::object_biased : PatchMode::uniform;
           }},
          {"train_frac", [](RunConfig& c, auto& k, auto& s) { c.split.train = parse_as<double>(k, s); }},
          {"val_frac", [](RunConfig& c, auto& k, auto& s) { c.split.val = parse_as<double>(k, s); }},
          {"test_frac", [](RunConfig& c, auto& k, auto& s) { c.split.test = parse_as<double>(k, s); }},
          {"size", [](RunConfig& c, auto& k, auto& s) { c.dataset_size = parse_as<std::size_t>(k, s); }},
          {"scene_width", [](RunConfig& c, auto& k, auto& s) { c.scene.width = parse_as<int>(k, s); }},
          {"scene_height", [](RunConfig& c, auto& k, auto& s) { c.scene.height = parse_as<int>(k, s); }},
          {"scene_channels", [](RunConfig& c, auto& k, auto& s) { c.scene.channels = parse_as<int>(k, s); }},
          {"n_min", [](RunConfig& c, auto& k, auto& s) { c.scene.n_min = parse_as<int>(k, s); }},
          {"n_max", [](RunConfig& c, auto& k, auto& s) { c.scene.n_max = parse_as<int>(k, s); }},
          {"radius_min", [](RunConfig& c, auto& k, auto& s) { c.scene.radius_min = parse_as<double>(k, s); }},
          {"radius_max", [](RunConfig& c, auto& k, auto& s) { c.scene.radius_max = parse_as<double>(k, s); }},
          {"background", [](RunConfig& c, auto& k, auto& s) {
             if (s == "flat") c.scene.background = Background::flat;
             else if (s == "gradient") c.scene.background = Background::gradient;
             else if (s == "speckle") c.scene.background = Background::speckle;
             else throw ConfigError("config: bad value '" + s + "' for '" + k + "'");
           }},
          {"glare_probability", [](RunConfig& c, auto& k, auto& s) {
             c.scene.glare_probability = parse_as<double>(k, s);
           }},
          {"glare_intensity", [](RunConfig& c, auto& k, auto& s) {
             c.scene.glare_intensity = parse_as<double>(k, s);
           }},
          {"min_separation", [](RunConfig& c, auto& k, auto& s) {
             c.scene.min_separation = parse_as<double>(k, s);
           }},
      };
  auto it = setters.find(key);
  if (it == setters.end()) throw ConfigError("config: unknown key '" + key + "'");
  it->second(*this, key, v);
  explicit_keys.insert(key);
}

inline std::map<std::string, std::string> RunConfig::values() const {
  using io::format_double;
  return {
      {"adaptive", kernel.mode == KernelMode::adaptive ? "true" : "false"},
      {"background", detail::background_name(scene.background)},
      {"base_channels", std::to_string(unet.base_channels)},
      {"batch_size", std::to_string(train.batch_size)},
      {"beta1", format_double(train.adam.beta1)},
      {"beta2", format_double(train.adam.beta2)},
      {"depth", std::to_string(unet.depth)},
      {"epochs", std::to_string(train.epochs)},
      {"eps", format_double(train.adam.eps)},
      {"flips", train.flips ? "true" : "false"},
      {"glare_intensity", format_double(scene.glare_intensity)},
      {"glare_probability", format_double(scene.glare_probability)},
      {"in_channels", std::to_string(unet.in_channels)},
      {"jobs", std::to_string(jobs)},
      {"k", std::to_string(kernel.k)},
      {"lr", format_double(train.adam.lr)},
      {"min_separation", format_double(scene.min_separation)},
      {"n_max", std::to_string(scene.n_max)},
      {"n_min", std::to_string(scene.n_min)},
      {"object_biased", train.patch_mode == PatchMode::object_biased ? "true" : "false"},
      {"patch_size", std::to_string(train.patch_size)},
      {"patches_per_image", std::to_string(train.patches_per_image)},
      {"patience", std::to_string(train.patience)},
      {"radius_max", format_double(scene.radius_max)},
      {"radius_min", format_double(scene.radius_min)},
      {"scale", format_double(train.density_scale)},
      {"scene_channels", std::to_string(scene.channels)},
      {"scene_height", std::to_string(scene.height)},
      {"scene_width", std::to_string(scene.width)},
      {"seed", std::to_string(seed)},
      {"sigma", format_double(kernel.sigma)},
      {"sigma0_sq", format_double(kernel.sigma0_sq)},
      {"size", std::to_string(dataset_size)},
      {"test_frac", format_double(split.test)},
      {"train_frac", format_double(split.train)},
      {"truncation", format_double(kernel.truncation_radius_sigmas)},
      {"val_frac", format_double(split.val)},
  };
}

/// Applies `key = value` lines; '#' starts a comment.
inline void apply_config_text(RunConfig& cfg, std::istream& in, const std::string& origin) {
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    auto t = io::trim(line);
    if (t.empty()) continue;
    auto eq = t.find('=');
    if (eq == std::string_view::npos)
      throw ConfigError(origin + ":" + std::to_string(line_no) + ": expected key = value");
    std::string key(io::trim(t.substr(0, eq)));
    try {
      cfg.set(key, std::string(io::trim(t.substr(eq + 1))));
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
}

inline void apply_config_file(RunConfig& cfg, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file '" + path + "'");
  apply_config_text(cfg, in, path);
}

/// Resolves the layers: file (explicit path, else $DENSECOUNT_CONFIG), then
/// $DENSECOUNT_SEED, then flag overrides in order.
inline RunConfig resolve_config(const std::string& config_path,
                                const std::map<std::string, std::string>& flags,
                                const std::function<const char*(const char*)>& getenv = std::getenv) {
  RunConfig cfg;
  std::string file = config_path;
  if (file.empty())
    if (const char* env = getenv("DENSECOUNT_CONFIG"); env && *env) file = env;
  if (!file.empty()) apply_config_file(cfg, file);
  if (const char* env = getenv("DENSECOUNT_SEED"); env && *env) cfg.set("seed", env);
  for (const auto& [k, v] : flags) cfg.set(k, v);
  cfg.finalize();
  return cfg;
}

}  // namespace densecount
