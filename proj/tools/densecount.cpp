// densecount command-line front end: make-density, synth, train, eval, predict.
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "densecount/densecount.hpp"

namespace fs = std::filesystem;
using namespace densecount;

namespace {

enum ExitCode { kOk = 0, kInternal = 1, kInput = 2, kMismatch = 3 };

const std::set<std::string> kBoolKeys = {"adaptive", "flips", "object_biased"};

const std::map<std::string, std::string> kHelp = {
    {"sigma", "constant kernel width in pixels"},
    {"adaptive", "use the k-NN adaptive kernel"},
    {"k", "neighbours for the adaptive kernel"},
    {"sigma0_sq", "adaptive kernel: sigma^2 = sigma0_sq * mean k-NN distance"},
    {"scale", "density scale applied to training targets"},
    {"seed", "single seed for every random choice"},
    {"jobs", "worker threads for loading and evaluation"},
};

// Config overrides collected from flags, applied after file and env layers.
struct Shared {
  std::string config_path;
  std::map<std::string, std::string> flags;

  RunConfig resolve() const { return resolve_config(config_path, flags); }
};

std::string dashed(std::string key) {
  std::replace(key.begin(), key.end(), '_', '-');
  return key;
}

void add_config_options(CLI::App* app, Shared& shared) {
  app->add_option("--config", shared.config_path, "key = value config file (else $DENSECOUNT_CONFIG)");
  for (const auto& [key, _] : RunConfig{}.values()) {
    const std::string flag = "--" + dashed(key);
    auto help = kHelp.count(key) ? kHelp.at(key) : "override '" + key + "'";
    if (kBoolKeys.count(key))
      app->add_flag_callback(flag, [&shared, key = key] { shared.flags[key] = "true"; }, help);
    else
      app->add_option_function<std::string>(
             flag, [&shared, key = key](const std::string& v) { shared.flags[key] = v; }, help)
          ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  }
  app->add_option_function<std::vector<std::string>>(
      "--set",
      [&shared](const std::vector<std::string>& kvs) {
        for (const auto& kv : kvs) {
          auto eq = kv.find('=');
          if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
          shared.flags[kv.substr(0, eq)] = kv.substr(eq + 1);
        }
      },
      "extra key=value overrides");
}

std::vector<AnnotatedImage> read_annotations(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open annotations '" + path + "'");
  if (fs::path(path).extension() == ".jsonl") return parse_box_jsonl(in);
  return parse_dot_csv(in);
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write '" + path.string() + "'");
  os << text;
  if (!os) throw IoError("write failed for '" + path.string() + "'");
}

void write_resolved_config(const fs::path& dir, const RunConfig& cfg) {
  write_text(dir / "resolved_config.ini", "# fingerprint " + cfg.fingerprint() + "\n" + cfg.canonical());
}

// image_path minus its extension plus `suffix`, with root, "." and ".."
// components dropped so the result stays under whatever directory it joins.
fs::path with_suffix(const std::string& image_path, const std::string& suffix) {
  fs::path p(image_path);
  p.replace_extension();
  fs::path out;
  for (const auto& part : p.relative_path())
    if (part != ".." && part != ".") out /= part;
  return fs::path(out.string() + suffix);
}

void write_heatmap(const DensityMap& dm, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  render_heatmap_file(dm, path.string());
}

void warn_adaptive_fallback(const AnnotatedImage& img, const KernelSpec& k) {
  if (k.mode == KernelMode::adaptive && adaptive_falls_back(img))
    std::cerr << "warning: " << img.image_path << ": " << img.dots.size()
              << " dot(s), adaptive kernel falls back to constant sigma "
              << io::format_double(std::sqrt(k.sigma0_sq)) << "\n";
}

// ---- make-density --------------------------------------------------------

int cmd_make_density(const Shared& shared, const std::string& input, const std::string& out_dir,
                     bool heatmaps, bool check) {
  RunConfig cfg = shared.resolve();
  cfg.kernel.validate();
  auto images = read_annotations(input);
  fs::create_directories(out_dir);
  bool ok = true;
  nlohmann::json manifest = {{"config_fingerprint", cfg.fingerprint()}, {"maps", nlohmann::json::array()}};
  for (const auto& img : images) {
    warn_adaptive_fallback(img, cfg.kernel);
    DensityMap dm = density_map(img, cfg.kernel);
    const fs::path dmap = fs::path(out_dir) / with_suffix(img.image_path, ".dmap");
    fs::create_directories(dmap.parent_path());
    write_density_map_file(dm, dmap.string());
    if (heatmaps) write_heatmap(dm, fs::path(out_dir) / with_suffix(img.image_path, "_heatmap.png"));
    const double mass = integrate_count(dm);
    const auto n = img.dots.size();
    manifest["maps"].push_back({{"image", img.image_path}, {"dmap", fs::relative(dmap, out_dir).generic_string()},
                                {"dots", n}, {"mass", mass}});
    if (check) {
      char line[64];
      std::snprintf(line, sizeof(line), "mass %.4f / dots %zu", mass, n);
      const bool good = std::abs(mass - static_cast<double>(n)) <= 1e-4 * std::max<double>(1.0, n);
      std::cerr << img.image_path << ": " << line << (good ? "" : "  VIOLATION") << "\n";
      ok = ok && good;
    }
  }
  write_text(fs::path(out_dir) / "manifest.json", manifest.dump(2) + "\n");
  return ok ? kOk : kInternal;
}

// ---- synth ---------------------------------------------------------------

int cmd_synth(const Shared& shared, const std::string& out_dir) {
  RunConfig cfg = shared.resolve();
  generate_dataset(cfg.scene, cfg.dataset_size, out_dir);
  write_resolved_config(out_dir, cfg);
  std::cerr << "wrote " << cfg.dataset_size << " scenes to " << out_dir << "\n";
  return kOk;
}

// ---- train ---------------------------------------------------------------

// Annotation CSV for `path` (a dataset directory or the CSV itself) and the
// directory its image paths are relative to.
std::pair<std::string, fs::path> locate_annotations(const std::string& path) {
  if (!fs::exists(path)) throw IoError("no such file or directory '" + path + "'");
  if (fs::is_directory(path)) return {(fs::path(path) / "annotations.csv").string(), path};
  return {path, fs::path(path).parent_path()};
}

// Writes a split CSV whose image paths are relative to the CSV's directory.
void write_split(const fs::path& csv, std::vector<AnnotatedImage> images, const fs::path& base) {
  const fs::path dir = fs::absolute(csv).parent_path();
  for (auto& img : images)
    img.image_path = fs::relative(fs::absolute(base / img.image_path), dir).generic_string();
  std::ostringstream os;
  write_dot_csv(os, images);
  write_text(csv, os.str());
}

int cmd_train(const Shared& shared, const std::string& dataset, const std::string& out_dir) {
  RunConfig cfg = shared.resolve();
  cfg.unet.validate();
  cfg.train.validate(cfg.unet);
  auto [csv, base] = locate_annotations(dataset);
  auto images = read_annotations(csv);
  auto splits = make_splits(images, cfg.split);
  std::cerr << "split " << splits.train.size() << "/" << splits.val.size() << "/" << splits.test.size()
            << ", fingerprint " << cfg.fingerprint() << "\n";

  auto train_set = load_samples(splits.train, base, cfg.kernel, cfg.jobs);
  auto val_set = load_samples(splits.val, base, cfg.kernel, cfg.jobs);
  auto result = train(train_set, val_set, cfg.train, cfg.unet, cfg.fingerprint(), [](const EpochLog& l) {
    char line[128];
    std::snprintf(line, sizeof(line), "epoch %3d  loss %.5f  val rmse %.3f  mae %.3f", l.epoch,
                  l.train_loss, l.val_rmse, l.val_mae);
    std::cerr << line << std::endl;
  });

  const fs::path out(out_dir);
  fs::create_directories(out);
  save_checkpoint_file(result.model, (out / "model.unck").string());
  std::ostringstream log;
  write_training_log(log, result.log);
  write_text(out / "train_log.csv", log.str());
  write_split(out / "train.csv", splits.train, base);
  write_split(out / "val.csv", splits.val, base);
  write_split(out / "test.csv", splits.test, base);
  write_resolved_config(out, cfg);
  std::cerr << "best epoch " << result.best_epoch << ", checkpoint " << (out / "model.unck").string() << "\n";
  return kOk;
}

// ---- eval ----------------------------------------------------------------

std::vector<ReferenceRow> parse_references(const std::vector<std::string>& specs) {
  std::vector<ReferenceRow> rows;
  for (const auto& s : specs) {
    auto eq = s.find('='), comma = s.find(',');
    if (eq == std::string::npos || comma == std::string::npos || comma < eq)
      throw UsageError("--reference expects name=rmse,mae, got '" + s + "'");
    auto rmse = io::parse_number<double>(s.substr(eq + 1, comma - eq - 1));
    auto mae = io::parse_number<double>(s.substr(comma + 1));
    if (!rmse || !mae) throw UsageError("--reference: bad numbers in '" + s + "'");
    rows.push_back({s.substr(0, eq), *rmse, *mae});
  }
  return rows;
}

std::optional<UNetConfig> expected_unet(const RunConfig& cfg) {
  for (const char* k : {"depth", "base_channels", "in_channels"})
    if (cfg.is_explicit(k)) return cfg.unet;
  return std::nullopt;
}

void check_channels(const UNetModel& model, const Tensor& image, const std::string& path) {
  if (image.dim(0) != static_cast<std::size_t>(model.config.in_channels))
    throw ShapeAuditError("'" + path + "' has " + std::to_string(image.dim(0)) +
                          " channel(s), checkpoint expects " + std::to_string(model.config.in_channels));
}

int cmd_eval(const Shared& shared, const std::vector<std::string>& positionals, bool oracle,
             const std::vector<std::string>& reference_specs, const std::string& report_path,
             const std::string& heatmap_dir) {
  RunConfig cfg = shared.resolve();
  if (positionals.size() != (oracle ? 1u : 2u))
    throw UsageError(oracle ? "eval --oracle expects ANNOTATIONS" : "eval expects CHECKPOINT ANNOTATIONS");
  const auto refs = parse_references(reference_specs);
  const std::string& csv = positionals.back();
  if (!fs::exists(csv)) throw IoError("no such file '" + csv + "'");
  auto images = read_annotations(csv);
  const fs::path base = fs::path(csv).parent_path();

  MetricsReport report;
  std::vector<Sample> samples;
  if (oracle) {
    samples = load_samples(images, base, cfg.kernel, cfg.jobs);
    report = evaluate_oracle(samples, cfg.fingerprint());
  } else {
    UNetModel model = load_checkpoint_file(positionals.front(), expected_unet(cfg));
    samples = load_samples(images, base, cfg.kernel, cfg.jobs);
    for (const auto& s : samples) check_channels(model, s.image, s.truth.image_path);
    report = evaluate(model, samples, cfg.jobs);
    if (!heatmap_dir.empty())
      for (const auto& s : samples)
        write_heatmap(predict_count(model, s.image).density,
                      fs::path(heatmap_dir) / with_suffix(s.truth.image_path, "_heatmap.png"));
  }
  if (oracle && !heatmap_dir.empty())
    for (const auto& s : samples)
      write_heatmap(s.density, fs::path(heatmap_dir) / with_suffix(s.truth.image_path, "_heatmap.png"));

  write_text(report_path, report_to_json(report).dump(2) + "\n");
  std::cout << compare_report(report, refs, oracle ? "oracle" : "this run");
  return kOk;
}

// ---- predict -------------------------------------------------------------

int cmd_predict(const Shared& shared, const std::string& checkpoint, const std::string& image_path,
                bool json, std::string heatmap) {
  RunConfig cfg = shared.resolve();
  UNetModel model = load_checkpoint_file(checkpoint, expected_unet(cfg));
  if (!fs::exists(image_path)) throw IoError("no such file '" + image_path + "'");
  Tensor image = load_image(image_path);
  check_channels(model, image, image_path);
  auto pred = predict_count(model, image);
  if (heatmap.empty()) {
    fs::path p(image_path);
    heatmap = (p.parent_path() / (p.stem().string() + "_heatmap.png")).string();
  }
  write_heatmap(pred.density, heatmap);

  char text[64];
  std::snprintf(text, sizeof(text), "%.2f", pred.count);
  if (json) {
    nlohmann::json j = {{"image", image_path},
                        {"count", *io::parse_number<double>(text)},
                        {"raw_count", pred.count},
                        {"heatmap", heatmap},
                        {"config_fingerprint", model.fingerprint}};
    std::cout << j.dump() << "\n";
  } else {
    std::cout << text << "\n";
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Object counting by density-map regression"};
  app.require_subcommand(1);

  Shared shared;
  std::string input, out_dir, checkpoint, image, report_path = "report.json", heatmap_dir, heatmap;
  std::vector<std::string> positionals, references;
  bool heatmaps = false, check = false, oracle = false, json = false;
  int rc = kOk;

  auto* md = app.add_subcommand("make-density", "dot/box annotations -> DMAP ground-truth maps");
  md->add_option("annotations", input, "dot CSV or box JSONL")->required();
  md->add_option("-o,--out", out_dir, "output directory")->required();
  md->add_flag("--heatmaps", heatmaps, "also write heatmap PNGs");
  md->add_flag("--check", check, "verify each map integrates to its dot count");
  add_config_options(md, shared);
  md->callback([&] { rc = cmd_make_density(shared, input, out_dir, heatmaps, check); });

  auto* sy = app.add_subcommand("synth", "generate a synthetic annotated dataset");
  sy->add_option("-o,--out", out_dir, "output directory")->required();
  add_config_options(sy, shared);
  sy->callback([&] { rc = cmd_synth(shared, out_dir); });

  auto* tr = app.add_subcommand("train", "train a UNet on a dataset directory or annotation CSV");
  tr->add_option("dataset", input, "dataset directory or annotation CSV")->required();
  tr->add_option("-o,--out", out_dir, "output directory")->required();
  add_config_options(tr, shared);
  tr->callback([&] { rc = cmd_train(shared, input, out_dir); });

  auto* ev = app.add_subcommand("eval", "score a checkpoint (or the ground truth) on annotated images");
  ev->add_option("args", positionals, "CHECKPOINT ANNOTATIONS, or ANNOTATIONS with --oracle")->required();
  ev->add_flag("--oracle", oracle, "score ground-truth maps instead of a model");
  ev->add_option("--reference", references, "reference row name=rmse,mae (repeatable)");
  ev->add_option("-o,--report", report_path, "MetricsReport JSON path")->capture_default_str();
  ev->add_option("--heatmaps", heatmap_dir, "directory for per-image heatmaps");
  add_config_options(ev, shared);
  ev->callback([&] { rc = cmd_eval(shared, positionals, oracle, references, report_path, heatmap_dir); });

  auto* pr = app.add_subcommand("predict", "count objects in one image");
  pr->add_option("checkpoint", checkpoint, "model checkpoint")->required();
  pr->add_option("image", image, "PNG image")->required();
  pr->add_flag("--json", json, "print a JSON record instead of the bare count");
  pr->add_option("--heatmap", heatmap, "heatmap PNG path (default: next to the image)");
  add_config_options(pr, shared);
  pr->callback([&] { rc = cmd_predict(shared, checkpoint, image, json, heatmap); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kInput;
  } catch (const ShapeAuditError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kMismatch;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInternal;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInput;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInput;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return kInternal;
  }
  return rc;
}
