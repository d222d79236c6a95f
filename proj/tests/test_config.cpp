#include <gtest/gtest.h>

#include "qct/config.hpp"
#include "qct/io.hpp"

using namespace qct;

TEST(ConfigParseTest, GrammarBasics) {
  const ConfigSections s = parse_config_text(
      "# comment\n"
      "; also a comment\n"
      "[model]\n"
      "  blocks = 2  \n"
      "\n"
      "[train]\n"
      "mode=qat\n");
  ASSERT_EQ(s.at("model").size(), 1u);
  EXPECT_EQ(s.at("model")[0], (std::pair<std::string, std::string>{"blocks", "2"}));
  EXPECT_EQ(s.at("train")[0].second, "qat");
  EXPECT_THROW(parse_config_text("blocks = 2\n"), ConfigError);
  EXPECT_THROW(parse_config_text("[model\n"), ConfigError);
  EXPECT_THROW(parse_config_text("[model]\nblocks\n"), ConfigError);
}

TEST(RunConfigTest, LoadsValuesAndRejectsUnknowns) {
  RunConfig rc;
  rc.load_text(
      "[model]\nblocks = 3\ndim = 32\n"
      "[train]\nmode = cotrain\nkl = off\nlambda1 = 0.25\n"
      "[data]\nvocab = 12\nnoise = 0.3\n"
      "[run]\nseed = 9\nrun_dir = out\n");
  rc.resolve();
  EXPECT_EQ(rc.model.num_blocks, 3u);
  EXPECT_EQ(rc.model.model_dim, 32u);
  EXPECT_EQ(rc.model.vocab, 12u);
  EXPECT_EQ(rc.model.seed, 9u);
  EXPECT_EQ(rc.train.seed, 9u);
  EXPECT_FALSE(rc.train.enable_kl);
  EXPECT_EQ(rc.train.lambda1, 0.25);
  EXPECT_EQ(rc.data.noise, 0.3);
  EXPECT_EQ(rc.run_dir, "out");

  RunConfig bad;
  EXPECT_THROW(bad.load_text("[model]\nwidth = 3\n"), ConfigError);
  EXPECT_THROW(bad.load_text("[nope]\nx = 1\n"), ConfigError);
  EXPECT_THROW(bad.load_text("[model]\nblocks = two\n"), ConfigError);
  EXPECT_THROW(bad.load_text("[model]\nblocks = -1\n"), ConfigError);
  EXPECT_THROW(bad.load_text("[train]\nkl = maybe\n"), ConfigError);
  EXPECT_THROW(bad.load_text("[train]\nmode = fast\n"), ConfigError);
  EXPECT_THROW(bad.load_text("[model]\nvocab = 5\n"), ConfigError);
}

TEST(RunConfigTest, ResolveValidates) {
  RunConfig rc;
  rc.set("model", "blocks", "0");
  EXPECT_THROW(rc.resolve(), ConfigError);
  rc = RunConfig{};
  rc.set("train", "p_min", "0.95");
  EXPECT_THROW(rc.resolve(), ConfigError);
  rc = RunConfig{};
  rc.set("data", "frames_per_token", "1");
  EXPECT_THROW(rc.resolve(), ConfigError);
}

TEST(RunConfigTest, OverridesApplyAfterFile) {
  RunConfig rc;
  rc.load_text("[train]\nepochs = 3\n");
  rc.apply_override("train.epochs=5");
  rc.apply_override("train.bits = 1");
  EXPECT_EQ(rc.train.epochs, 5u);
  EXPECT_EQ(rc.train.bits, 1);
  EXPECT_THROW(rc.apply_override("epochs=5"), ConfigError);
  EXPECT_THROW(rc.apply_override("train.epochs"), ConfigError);
}

TEST(RunConfigTest, EchoRoundtrips) {
  RunConfig rc;
  rc.load_text("[model]\nblocks = 2\ngamma = 0.3\n[train]\nmode = qat\nbits = 4\nscaling = absmean-fixed\nlr = 0.001\n"
               "[data]\nnoise = 0.1234567890123\n[run]\nseed = 42\n");
  rc.resolve();
  const std::string text = rc.to_text();
  const RunConfig back = parse_run_config(text);
  EXPECT_EQ(back.to_text(), text);
  EXPECT_EQ(back.model.gamma, 0.3);
  EXPECT_EQ(back.data.noise, 0.1234567890123);
  EXPECT_EQ(back.train.mode, TrainMode::Qat);
  EXPECT_EQ(back.train.scaling, ScalingMode::AbsmeanFixed);
}

TEST(ModelConfigTextTest, Roundtrip) {
  ModelConfig c;
  c.num_blocks = 3;
  c.vocab = 7;
  c.seed = 123456789012345ULL;
  c.gamma = 0.15;
  const ModelConfig back = parse_model_config(model_config_text(c));
  EXPECT_EQ(model_config_text(back), model_config_text(c));
  EXPECT_EQ(back.seed, c.seed);
  EXPECT_EQ(back.vocab, 7u);
}

TEST(RunConfigTest, ShippedDeskConfigMatchesDefaults) {
  RunConfig shipped, defaults;
  shipped.load_text(read_text_file(QCT_DESK_CONFIG));
  shipped.resolve();
  defaults.resolve();
  EXPECT_EQ(shipped.to_text(), defaults.to_text());
}
