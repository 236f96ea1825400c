#include <gtest/gtest.h>

#include <fstream>

#include "mbrain/config.hpp"
#include "test_util.hpp"

using namespace mbrain;

namespace {

std::string error_of(const std::string& text) {
  try {
    parse_config_text(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST(Config, EmptyTextGivesDefaultProfile) {
  const RunConfig c = parse_config_text("");
  const auto& s = c.experiment.pretrain.ssl;
  EXPECT_EQ(s.theta1, 0.5);
  EXPECT_EQ(s.theta2, 0.5);
  EXPECT_EQ(s.k2, 7u);
  EXPECT_EQ(s.k1_max, 8u);
  EXPECT_EQ(s.lambda1, 0.5);
  EXPECT_EQ(s.lambda2, 0.3);
  EXPECT_EQ(s.negatives, 64u);
  EXPECT_EQ(encoded_length(c.experiment.model), 25u);
  EXPECT_EQ(c.experiment.finetune.trunk.learning_rate, 1e-6);
  EXPECT_EQ(c.experiment.finetune.head.learning_rate, 5e-4);
  EXPECT_FALSE(c.experiment.config_hash.empty());
}

TEST(Config, SectionsOverrideDefaults) {
  const RunConfig c = parse_config_text(
      "seed = 9\n[data]\nchannels = 4\n[model]\nd = 16\nd_ar = 12\n[ssl]\nlambda1 = 0.2\n"
      "[protocol]\nkind = domain_adaptation\nsource_subjects = a, b\ntarget_subject = s0\n");
  EXPECT_EQ(c.seed, 9u);
  EXPECT_EQ(c.experiment.seed, 9u);
  EXPECT_EQ(c.experiment.model.channels, 4u);
  EXPECT_EQ(c.experiment.model.d, 16u);
  EXPECT_EQ(c.experiment.pretrain.ssl.lambda1, 0.2);
  EXPECT_EQ(c.protocol.kind, ProtocolKind::domain_adaptation);
  EXPECT_EQ(c.protocol.source_subjects, (std::vector<std::string>{"a", "b"}));
}

TEST(Config, LambdaViolationNamesKeyValueAndRule) {
  const std::string e = error_of("[ssl]\nlambda1 = 0.6\nlambda2 = 0.5\n");
  EXPECT_NE(e.find("λ1+λ2<1"), std::string::npos) << e;
  EXPECT_NE(e.find("lambda1=0.6"), std::string::npos) << e;
}

TEST(Config, MisspelledKeySuggestsTheRealOne) {
  const std::string e = error_of("[ssl]\ntheta_one = 0.5\n");
  EXPECT_NE(e.find("unknown key 'ssl.theta_one'"), std::string::npos) << e;
  EXPECT_NE(e.find("did you mean 'theta1'"), std::string::npos) << e;
  EXPECT_NE(error_of("[ssl]\nwindow = 60\n").find("model.window"), std::string::npos);
  EXPECT_EQ(error_of("[ssl]\nzzzzzzzzzzzzzzzzzzzz = 1\n").find("did you mean"), std::string::npos);
}

TEST(Config, CrossModuleConstraints) {
  EXPECT_NE(error_of("[ssl]\nk2 = 17\n").find("K2+k1_max+1 <= T"), std::string::npos);
  EXPECT_NE(error_of("[model]\nwindow = 20\n").find("window"), std::string::npos);
  EXPECT_NE(error_of("[ssl]\ntheta1 = 1.5\n").find("theta1"), std::string::npos);
  EXPECT_NE(error_of("[ssl]\nnegatives = abc\n").find("ssl.negatives"), std::string::npos);
  EXPECT_NE(error_of("[protocol]\nkind = domain_generalization\nsource_subjects = s0\n").find("target subject listed"),
            std::string::npos);
  EXPECT_FALSE(error_of("[theory]\nrho_cross = 1\n").empty());
  EXPECT_FALSE(error_of("[data]\nsubjects =\n").empty());
}

TEST(Config, HashTracksResultRelevantKeysOnly) {
  const std::string base = config_hash(parse_config_text(""));
  EXPECT_EQ(config_hash(parse_config_text("")), base);
  EXPECT_EQ(config_hash(parse_config_text("seed = 4\ndata_dir = elsewhere\n[data]\nworkers = 3\n")), base);
  EXPECT_NE(config_hash(parse_config_text("[ssl]\ntheta1 = 0.4\n")), base);
  EXPECT_NE(config_hash(parse_config_text("[finetune]\nhead_lr = 0.001\n")), base);
  RunConfig c = parse_config_text("");
  set_seed(c, 77);
  EXPECT_EQ(c.experiment.seed, 77u);
  EXPECT_EQ(c.experiment.config_hash, base);
}

TEST(Config, FileLoading) {
  mbrain::testing::TempDir dir("config");
  EXPECT_THROW(parse_config(dir.path / "missing.ini"), ConfigError);
  std::ofstream(dir.path / "run.ini") << "[model]\nd = 8\n";
  EXPECT_EQ(parse_config(dir.path / "run.ini").experiment.model.d, 8u);
}
