#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "flowfit/config.hpp"

using namespace flowfit;

namespace {

ExperimentConfig parse(const std::string& text) {
  ExperimentConfig c;
  std::istringstream in(text);
  parse_config(c, in, "test.ini");
  return c;
}

std::string error_of(const std::string& text) {
  try {
    parse(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Config, SectionsAndDottedKeysAgree) {
  const auto a = parse("seed = 7\n[train]\nlambda_of = 0.05  # comment\nsteps=12\n[eval]\ndelta_t = 1, 2\n");
  const auto b = parse("train.lambda_of = 0.05\ntrain.steps = 12\nseed = 7\neval.delta_t = 1,2\n");
  EXPECT_EQ(a.seed, 7u);
  EXPECT_DOUBLE_EQ(a.train.lambda_of, 0.05);
  EXPECT_EQ(a.train.steps, 12);
  EXPECT_EQ(a.eval.delta_t, (std::vector<int>{1, 2}));
  std::ostringstream wa, wb;
  write_config(a, wa);
  write_config(b, wb);
  EXPECT_EQ(wa.str(), wb.str());
}

TEST(Config, UnknownKeyIsRejectedWithLocation) {
  const std::string msg = error_of("seed = 1\n[train]\nlamda_of = 0.1\n");
  EXPECT_NE(msg.find("test.ini:3"), std::string::npos) << msg;
  EXPECT_NE(msg.find("train.lamda_of"), std::string::npos) << msg;
}

TEST(Config, MalformedValuesAreRejected) {
  EXPECT_NE(error_of("train.steps = 12x\n"), "");
  EXPECT_NE(error_of("train.lambda_of = \n"), "");
  EXPECT_NE(error_of("train.freeze_baseline = maybe\n"), "");
  EXPECT_NE(error_of("[train\n"), "");
  EXPECT_NE(error_of("just words\n"), "");
  EXPECT_NE(error_of("eval.split = validation\n"), "");
}

TEST(Config, WriteThenParseRoundTrips) {
  ExperimentConfig c;
  c.seed = 99;
  c.train.lambda_of = 0.1 / 3.0;
  c.train.learning_rate = 3.3e-5;
  c.train.context_length = 4;
  c.train.freeze_baseline = true;
  c.data.fps = 24.5;
  c.model.encoder_widths = {8, 16};
  c.paths.dataset = "some dir/data";
  c.eval.split = Split::kTrain;
  std::ostringstream os;
  write_config(c, os);
  const auto back = parse(os.str());
  std::ostringstream again;
  write_config(back, again);
  EXPECT_EQ(os.str(), again.str());
  EXPECT_EQ(back.train.lambda_of, c.train.lambda_of);
  EXPECT_EQ(back.paths.dataset, "some dir/data");
  EXPECT_EQ(back.model.encoder_widths, c.model.encoder_widths);
}

TEST(Config, OverridesAndResolve) {
  ExperimentConfig c;
  apply_override(c, "seed=5");
  apply_override(c, "data.height = 32");
  apply_override(c, "data.width=32");
  EXPECT_THROW(apply_override(c, "seed"), ConfigError);
  EXPECT_THROW(apply_override(c, "nope=1"), ConfigError);
  c.resolve();
  EXPECT_EQ(c.train.seed, 5u);
  EXPECT_EQ(c.data.seed, 5u);
  EXPECT_EQ(c.model.init_seed, 5u);
  EXPECT_EQ(c.model.input.height, 32);
  EXPECT_EQ(c.model.input.width, 32);
  // The encoder output size follows the image size.
  EXPECT_THROW(c.validate(), ConfigError);
  apply_override(c, "model.feature_dim=512");
  EXPECT_NO_THROW(c.validate());
  apply_override(c, "eval.delta_t=0,1");
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Config, ShippedConfigsLoad) {
  const std::filesystem::path dir = FLOWFIT_CONFIG_DIR;
  int n = 0;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.path().extension() != ".ini") continue;
    ExperimentConfig c;
    ASSERT_NO_THROW(load_config_file(c, e.path().string())) << e.path();
    c.resolve();
    EXPECT_NO_THROW(c.validate()) << e.path();
    ++n;
  }
  EXPECT_GE(n, 4);
}
