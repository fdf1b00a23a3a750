#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "densecount/config.hpp"

namespace densecount {
namespace {

namespace fs = std::filesystem;

std::string write_temp(const std::string& name, const std::string& text) {
  auto p = fs::temp_directory_path() / ("densecount_cfg_" + name);
  std::ofstream(p) << text;
  return p.string();
}

auto env_of(std::map<std::string, std::string> vars) {
  return [vars = std::move(vars)](const char* name) -> const char* {
    auto it = vars.find(name);
    return it == vars.end() ? nullptr : it->second.c_str();
  };
}

TEST(Config, DefaultsAndFinalize) {
  auto c = resolve_config("", {}, env_of({}));
  EXPECT_EQ(c.kernel.sigma, 6.0);
  EXPECT_EQ(c.unet.depth, 3);
  EXPECT_EQ(c.train.epochs, 50);
  EXPECT_EQ(c.seed, 42u);
  EXPECT_EQ(c.scene.seed, 42u);
  EXPECT_TRUE(c.explicit_keys.empty());
}

TEST(Config, LayeringFileThenEnvThenFlags) {
  const auto file = write_temp("layers.ini", "# comment\nsigma = 3\nseed=5\nepochs = 7 # trailing\n");
  auto from_file = resolve_config(file, {}, env_of({}));
  EXPECT_EQ(from_file.kernel.sigma, 3.0);
  EXPECT_EQ(from_file.seed, 5u);
  EXPECT_EQ(from_file.train.epochs, 7);
  EXPECT_TRUE(from_file.is_explicit("sigma"));

  auto env_file = resolve_config("", {}, env_of({{"DENSECOUNT_CONFIG", file}}));
  EXPECT_EQ(env_file.kernel.sigma, 3.0);

  auto with_env = resolve_config(file, {}, env_of({{"DENSECOUNT_SEED", "11"}}));
  EXPECT_EQ(with_env.seed, 11u);
  EXPECT_EQ(with_env.train.seed, 11u);

  auto with_flags = resolve_config(file, {{"seed", "13"}, {"sigma", "2.5"}},
                                   env_of({{"DENSECOUNT_SEED", "11"}}));
  EXPECT_EQ(with_flags.seed, 13u);
  EXPECT_EQ(with_flags.kernel.sigma, 2.5);
  EXPECT_EQ(with_flags.train.kernel.sigma, 2.5);
  EXPECT_EQ(with_flags.train.epochs, 7);
}

TEST(Config, ErrorsNameTheLocation) {
  RunConfig c;
  EXPECT_THROW(c.set("sigmaa", "1"), ConfigError);
  EXPECT_THROW(c.set("epochs", "ten"), ConfigError);
  EXPECT_THROW(c.set("flips", "maybe"), ConfigError);
  const auto file = write_temp("bad.ini", "sigma = 2\nbogus = 1\n");
  try {
    resolve_config(file, {}, env_of({}));
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find(":2:"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("bogus"), std::string::npos);
  }
  EXPECT_THROW(resolve_config("/nonexistent/x.ini", {}, env_of({})), IoError);
}

TEST(Config, FingerprintStableAndSensitive) {
  auto a = resolve_config("", {{"sigma", "4"}}, env_of({}));
  auto b = resolve_config("", {{"sigma", "4.0"}}, env_of({}));
  EXPECT_EQ(a.fingerprint(), b.fingerprint());
  EXPECT_EQ(a.fingerprint().size(), 16u);
  auto c = resolve_config("", {{"sigma", "4.5"}}, env_of({}));
  EXPECT_NE(a.fingerprint(), c.fingerprint());
  auto d = resolve_config("", {{"sigma", "4"}, {"jobs", "3"}}, env_of({}));
  EXPECT_EQ(a.fingerprint(), d.fingerprint());
  // canonical text is sorted and parseable back into the same config
  RunConfig round;
  std::istringstream in(a.canonical());
  apply_config_text(round, in, "canonical");
  round.finalize();
  EXPECT_EQ(round.fingerprint(), a.fingerprint());
}

}  // namespace
}  // namespace densecount
