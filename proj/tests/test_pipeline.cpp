#include <gtest/gtest.h>

#include <random>
#include <set>
#include <sstream>

#include "densecount/pipeline.hpp"
#include "densecount/synthgen.hpp"

namespace densecount {
namespace {

std::vector<AnnotatedImage> fake_images(int n) {
  std::vector<AnnotatedImage> v;
  for (int i = 0; i < n; ++i) v.push_back({"img" + std::to_string(i) + ".png", 8, 8, {}});
  return v;
}

std::set<std::string> paths(const std::vector<AnnotatedImage>& v) {
  std::set<std::string> s;
  for (const auto& a : v) s.insert(a.image_path);
  return s;
}

TEST(Splits, DefaultFractionsOnTenImages) {
  auto imgs = fake_images(10);
  auto s = make_splits(imgs, SplitSpec{});
  EXPECT_EQ(s.train.size(), 8u);
  EXPECT_EQ(s.val.size(), 1u);
  EXPECT_EQ(s.test.size(), 1u);
}

TEST(Splits, DisjointCoveringAndDeterministic) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = std::uniform_int_distribution<int>(0, 200)(rng);
    auto imgs = fake_images(n);
    SplitSpec spec;
    spec.seed = rng();
    auto a = make_splits(imgs, spec), b = make_splits(imgs, spec);
    EXPECT_EQ(a.train, b.train);
    EXPECT_EQ(a.test, b.test);
    auto tr = paths(a.train), va = paths(a.val), te = paths(a.test);
    EXPECT_EQ(tr.size() + va.size() + te.size(), static_cast<std::size_t>(n));
    std::set<std::string> all = tr;
    all.insert(va.begin(), va.end());
    all.insert(te.begin(), te.end());
    EXPECT_EQ(all, paths(imgs));
  }
}

TEST(Splits, ExplicitListsAndErrors) {
  auto imgs = fake_images(3);
  SplitSpec spec;
  spec.explicit_lists = std::array<std::vector<std::string>, 3>{
      std::vector<std::string>{"img2.png"}, std::vector<std::string>{"img0.png"},
      std::vector<std::string>{"img1.png"}};
  auto s = make_splits(imgs, spec);
  EXPECT_EQ(s.train.at(0).image_path, "img2.png");
  EXPECT_EQ(s.val.at(0).image_path, "img0.png");

  auto dup = imgs;
  dup.push_back(imgs[0]);
  EXPECT_THROW(make_splits(dup, SplitSpec{}), ValidationError);
  SplitSpec bad;
  bad.train = 0.9;
  EXPECT_THROW(make_splits(imgs, bad), ConfigError);
}

struct Fixture {
  Tensor image;
  AnnotatedImage truth;
  DensityMap dm;
};

Fixture fixture(int w, int h, std::vector<DotAnnotation> dots) {
  Fixture f;
  f.image = Tensor({1, static_cast<std::size_t>(h), static_cast<std::size_t>(w)});
  for (std::size_t i = 0; i < f.image.size(); ++i) f.image[i] = static_cast<float>(i % 97) / 97.0f;
  f.truth = {"f.png", w, h, std::move(dots)};
  f.dm = density_map(f.truth, KernelSpec::constant(1.5));
  return f;
}

TEST(Patches, FullSizePatchIsIdentity) {
  auto f = fixture(16, 16, {{4, 5}, {10, 12}});
  auto ps = sample_patches(f.image, f.truth, f.dm, 16, 3, 1);
  ASSERT_EQ(ps.size(), 3u);
  for (const auto& p : ps) {
    EXPECT_EQ(p.image, f.image);
    EXPECT_EQ(p.density, f.dm);
  }
}

TEST(Patches, FarFromDotsIsEmpty) {
  // sigma 1.5 truncates at 6 px, so patches starting at x >= 9 see no mass
  Fixture g = fixture(64, 8, {{2, 4}});
  auto ps = sample_patches(g.image, g.truth, g.dm, 8, 200, 3);
  int empty_checked = 0;
  for (const auto& p : ps) {
    // locate the patch by matching its first image row
    for (int x0 = 9; x0 <= 56; ++x0) {
      bool match = true;
      for (int x = 0; x < 8 && match; ++x) match = p.image[static_cast<std::size_t>(x)] == g.image[static_cast<std::size_t>(x0 + x)];
      if (!match) continue;
      EXPECT_EQ(integrate_count(p.density), 0.0);
      ++empty_checked;
      break;
    }
  }
  EXPECT_GT(empty_checked, 0);
}

TEST(Patches, MassNeverExceedsTotal) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.0, 32.0);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<DotAnnotation> dots(8);
    for (auto& d : dots) d = {u(rng), u(rng)};
    auto f = fixture(32, 32, dots);
    const double total = integrate_count(f.dm);
    for (const auto& p : sample_patches(f.image, f.truth, f.dm, 16, 10, rng()))
      EXPECT_LE(integrate_count(p.density), total + 1e-9);
  }
}

TEST(Patches, ObjectBiasedModeCoversDots) {
  auto f = fixture(128, 128, {{100.2, 20.7}});
  auto ps = sample_patches(f.image, f.truth, f.dm, 16, 40, 5, PatchMode::object_biased);
  int with_mass = 0;
  for (const auto& p : ps) with_mass += integrate_count(p.density) > 0.05;
  EXPECT_GE(with_mass, 20);
  auto same = sample_patches(f.image, f.truth, f.dm, 16, 40, 5, PatchMode::object_biased);
  EXPECT_EQ(same[7].image, ps[7].image);
}

TEST(Patches, BadSizesRejected) {
  auto f = fixture(16, 16, {});
  EXPECT_THROW(sample_patches(f.image, f.truth, f.dm, 17, 1, 1), UsageError);
  EXPECT_THROW(sample_patches(f.image, f.truth, f.dm, 0, 1, 1), UsageError);
}

MetricsReport report_of(const std::vector<double>& pred, const std::vector<long long>& truth) {
  std::vector<CountRecord> recs;
  for (std::size_t i = 0; i < pred.size(); ++i) recs.push_back({"i" + std::to_string(i), truth[i], pred[i]});
  return make_report(recs);
}

TEST(Metrics, HandComputedCases) {
  auto a = report_of({3, 5}, {2, 4});
  EXPECT_EQ(a.mae, 1.0);
  EXPECT_EQ(a.rmse, 1.0);
  auto b = report_of({1, 4}, {2, 2});
  EXPECT_EQ(b.mae, 1.5);
  EXPECT_NEAR(b.rmse, std::sqrt(2.5), 1e-12);
  EXPECT_NEAR(b.rmse, 1.5811, 1e-4);
  auto empty = make_report({});
  EXPECT_TRUE(empty.records.empty());
}

TEST(Metrics, ConstantOffsetAndOrdering) {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(-5.0, 5.0);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng() % 40;
    std::vector<double> p(n);
    std::vector<long long> t(n);
    for (std::size_t i = 0; i < n; ++i) {
      t[i] = static_cast<long long>(rng() % 20);
      p[i] = static_cast<double>(t[i]) + u(rng) * (trial % 3 == 0 ? 1e-9 : 1.0);
    }
    auto r = report_of(p, t);
    EXPECT_LE(r.mae, r.rmse);

    const double c = u(rng);
    for (std::size_t i = 0; i < n; ++i) p[i] = static_cast<double>(t[i]) + c;
    auto k = report_of(p, t);
    EXPECT_NEAR(k.mae, std::abs(c), 1e-12);
    EXPECT_NEAR(k.rmse, std::abs(c), 1e-12);
  }
}

TEST(Metrics, JsonRoundTrip) {
  auto r = report_of({1.25, 0.1, 7.0}, {1, 0, 9});
  r.config_fingerprint = "0123456789abcdef";
  EXPECT_EQ(report_from_json(nlohmann::json::parse(report_to_json(r).dump())), r);
}

TEST(Metrics, OracleEvaluationIsExact) {
  SceneSpec spec;
  std::vector<Sample> samples;
  for (std::uint64_t i = 0; i < 10; ++i) {
    auto s = generate_scene(spec, i);
    samples.push_back({s.truth, s.image, density_map(s.truth, KernelSpec{})});
  }
  auto r = evaluate_oracle(samples);
  EXPECT_LT(r.mae, 1e-4);
  EXPECT_LT(r.rmse, 1e-4);
}

TEST(CompareReport, ReferenceDeltas) {
  // report carrying exactly the reference values
  MetricsReport r = report_of({1.0}, {1});
  r.rmse = 0.890;
  r.mae = 0.490;
  std::vector<ReferenceRow> refs{{"aed", 0.890, 0.490}};
  const std::string table = compare_report(r, refs);
  EXPECT_NE(table.find("dRMSE"), std::string::npos);
  EXPECT_NE(table.find("aed"), std::string::npos);
  EXPECT_NE(table.find("0.000     0.000"), std::string::npos) << table;

  const std::string plain = compare_report(r, {});
  EXPECT_EQ(plain.find("dRMSE"), std::string::npos);
  EXPECT_THROW(compare_report(make_report({}), refs), UsageError);
}

std::vector<Sample> synthetic_samples(int n, int size, std::uint64_t first) {
  SceneSpec spec;
  spec.width = spec.height = size;
  spec.n_max = 3;
  spec.radius_min = 2;
  spec.radius_max = 3;
  spec.min_separation = 5;
  std::vector<Sample> v;
  for (int i = 0; i < n; ++i) {
    auto s = generate_scene(spec, first + static_cast<std::uint64_t>(i));
    v.push_back({s.truth, s.image, density_map(s.truth, KernelSpec::constant(2.0))});
  }
  return v;
}

TrainConfig tiny_train(int epochs) {
  TrainConfig tc;
  tc.epochs = epochs;
  tc.batch_size = 2;
  tc.patch_size = 16;
  tc.kernel = KernelSpec::constant(2.0);
  tc.density_scale = 100.0;
  tc.adam.lr = 3e-3;
  return tc;
}

UNetConfig tiny_unet() {
  UNetConfig c;
  c.depth = 2;
  c.base_channels = 4;
  return c;
}

TEST(Train, ZeroEpochsReturnsInitializedModel) {
  auto data = synthetic_samples(4, 16, 0);
  auto r = train(data, data, tiny_train(0), tiny_unet(), "fp");
  EXPECT_TRUE(r.log.empty());
  EXPECT_EQ(r.model.fingerprint, "fp");
  EXPECT_EQ(r.model.density_scale, 100.0);
  auto fresh = make_unet(tiny_unet(), tiny_train(0).seed);
  for (std::size_t i = 0; i < fresh.params.size(); ++i) EXPECT_EQ(r.model.params[i].value, fresh.params[i].value);
  std::ostringstream os;
  write_training_log(os, r.log);
  EXPECT_EQ(os.str(), "epoch,train_loss,val_rmse,val_mae\n");
}

TEST(Train, DeterministicGivenSeed) {
  auto tr = synthetic_samples(6, 32, 0), va = synthetic_samples(2, 32, 100);
  auto cfg = tiny_train(3);
  cfg.flips = true;
  cfg.patch_mode = PatchMode::object_biased;
  auto a = train(tr, va, cfg, tiny_unet()), b = train(tr, va, cfg, tiny_unet());
  std::ostringstream la, lb;
  write_training_log(la, a.log);
  write_training_log(lb, b.log);
  EXPECT_EQ(la.str(), lb.str());
  EXPECT_EQ(a.log.size(), 3u);
  EXPECT_EQ(evaluate(a.model, va), evaluate(b.model, va));
  cfg.seed = 7;
  std::ostringstream lc;
  write_training_log(lc, train(tr, va, cfg, tiny_unet()).log);
  EXPECT_NE(la.str(), lc.str());
}

TEST(Train, IndependentOfWorkerCount) {
  auto tr = synthetic_samples(5, 32, 0), va = synthetic_samples(3, 32, 100);
  auto cfg = tiny_train(2);
  auto one = train(tr, va, cfg, tiny_unet());
  cfg.jobs = 3;
  auto three = train(tr, va, cfg, tiny_unet());
  std::ostringstream a, b;
  write_training_log(a, one.log);
  write_training_log(b, three.log);
  EXPECT_EQ(a.str(), b.str());
  EXPECT_EQ(evaluate(one.model, va, 1), evaluate(three.model, va, 3));
}

TEST(Train, LossFallsOnTinyProblem) {
  auto tr = synthetic_samples(2, 16, 5);
  auto r = train(tr, {}, tiny_train(150), tiny_unet());
  ASSERT_EQ(r.log.size(), 150u);
  EXPECT_LT(r.log.back().train_loss, 0.5 * r.log.front().train_loss);
  EXPECT_EQ(r.best_epoch, 150);
}

TEST(Train, PatienceStopsEarly) {
  auto tr = synthetic_samples(2, 16, 5), va = synthetic_samples(2, 16, 50);
  auto cfg = tiny_train(40);
  cfg.patience = 1;
  auto r = train(tr, va, cfg, tiny_unet());
  EXPECT_LT(r.log.size(), 40u);
}

TEST(Train, InvalidConfigRejected) {
  auto data = synthetic_samples(1, 16, 0);
  auto cfg = tiny_train(1);
  cfg.patch_size = 10;
  EXPECT_THROW(train(data, {}, cfg, tiny_unet()), ConfigError);
  EXPECT_THROW(train({}, {}, tiny_train(1), tiny_unet()), UsageError);
}

}  // namespace
}  // namespace densecount
