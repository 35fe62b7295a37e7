#include <random>

#include <gtest/gtest.h>

#include "cxrfuse/errors.hpp"
#include "cxrfuse/labels.hpp"

using namespace cxrfuse;

TEST(Pathologies, CanonicalOrder) {
  EXPECT_EQ(kPathologies.front(), "atelectasis");
  EXPECT_EQ(kPathologies[8], "pleural effusion");
  EXPECT_EQ(kPathologies[kNoFinding], "no finding");
  EXPECT_EQ(pathology_index("edema"), 3u);
  EXPECT_FALSE(pathology_index("influenza").has_value());
}

TEST(ApplyPolicy, DefaultTable) {
  EXPECT_EQ(apply_policy(LabelState::positive), (TargetEntry{1, 1}));
  EXPECT_EQ(apply_policy(LabelState::uncertain), (TargetEntry{0, 1}));
  EXPECT_EQ(apply_policy(LabelState::negative), (TargetEntry{0, 1}));
  EXPECT_EQ(apply_policy(LabelState::not_mentioned), (TargetEntry{0, 0}));
}

TEST(ApplyPolicy, AlternatePolicies) {
  EXPECT_EQ(apply_policy(LabelState::uncertain, UncertaintyPolicy::uncertain_as_positive), (TargetEntry{1, 1}));
  EXPECT_EQ(apply_policy(LabelState::uncertain, UncertaintyPolicy::uncertain_masked), (TargetEntry{0, 0}));
  for (auto p : {UncertaintyPolicy::uncertain_as_positive, UncertaintyPolicy::uncertain_masked}) {
    EXPECT_EQ(apply_policy(LabelState::positive, p), (TargetEntry{1, 1}));
    EXPECT_EQ(apply_policy(LabelState::negative, p), (TargetEntry{0, 1}));
    EXPECT_EQ(apply_policy(LabelState::not_mentioned, p), (TargetEntry{0, 0}));
  }
  EXPECT_EQ(uncertainty_policy_from_string("uncertain_masked"), UncertaintyPolicy::uncertain_masked);
  EXPECT_THROW(uncertainty_policy_from_string("u-zeros"), ConfigError);
}

TEST(BuildTargets, Examples) {
  LabelStates states;
  states.fill(LabelState::not_mentioned);
  EXPECT_EQ(build_targets(states).mask, Tensor({14}, 0.0));

  states.fill(LabelState::negative);
  states[*pathology_index("edema")] = LabelState::positive;
  states[*pathology_index("pleural effusion")] = LabelState::positive;
  const TargetRow row = build_targets(states);
  EXPECT_EQ(row.mask, Tensor({14}, 1.0));
  Tensor expect({14}, 0.0);
  expect[3] = expect[8] = 1;
  EXPECT_EQ(row.target, expect);

  std::vector<LabelState> short_states(13, LabelState::negative);
  EXPECT_THROW(build_targets(short_states), ShapeError);
}

TEST(BuildTargets, PointwiseAgreesWithPolicy) {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<int> pick(0, 3);
  for (int trial = 0; trial < 200; ++trial) {
    LabelStates s;
    for (auto& v : s) v = static_cast<LabelState>(pick(rng));
    for (auto policy : {UncertaintyPolicy::uncertain_as_negative, UncertaintyPolicy::uncertain_as_positive,
                        UncertaintyPolicy::uncertain_masked}) {
      const TargetRow row = build_targets(s, policy);
      for (std::size_t i = 0; i < kNumPathologies; ++i) {
        const TargetEntry e = apply_policy(s[i], policy);
        ASSERT_EQ(row.target[i], e.target);
        ASSERT_EQ(row.mask[i], e.mask);
        if (policy == UncertaintyPolicy::uncertain_as_negative) {
          ASSERT_EQ(row.mask[i] == 0, s[i] == LabelState::not_mentioned);
        }
      }
    }
  }
}

TEST(EncodeMetadata, Examples) {
  MetadataRecord r;
  r.age = 60;
  r.sex = Sex::male;
  r.bmi = 25;
  const auto cfg = MetaFeatureConfig::default_config();
  EXPECT_EQ(cfg.width(), 3u);
  const Tensor v = encode_metadata(r, cfg);
  EXPECT_DOUBLE_EQ(v[0], 0.60);
  EXPECT_DOUBLE_EQ(v[1], 1.0);
  EXPECT_DOUBLE_EQ(v[2], 0.50);

  MetadataRecord f;
  f.sex = Sex::female;
  EXPECT_EQ(encode_metadata(f, MetaFeatureConfig::from_selector("sex")), Tensor::vector({0.0}));
}

TEST(EncodeMetadata, CategoricalAndMissing) {
  auto cfg = MetaFeatureConfig::from_selector("race,bmi,insurance");
  cfg.features[1].missing_indicator = true;
  EXPECT_EQ(cfg.width(), 5u + 2u + 4u);
  MetadataRecord r;
  r.race = "asian";
  r.insurance = "self-pay";
  const Tensor v = encode_metadata(r, cfg);
  EXPECT_EQ(v, Tensor::vector({0, 0, 1, 0, 0, /*bmi*/ 0, 1, /*ins*/ 0, 0, 0, 1}));

  cfg.features[2].other_slot = false;
  EXPECT_THROW(encode_metadata(r, cfg), DomainError);
}

TEST(EncodeMetadata, ImputesMedianWithoutIndicator) {
  std::vector<MetadataRecord> recs(3);
  recs[0].bmi = 20;
  recs[1].bmi = 30;
  recs[2].bmi = 24;
  recs[0].age = 50;
  auto cfg = MetaFeatureConfig::default_config();
  cfg.fit_imputation(recs);
  MetadataRecord missing;
  const Tensor v = encode_metadata(missing, cfg);
  EXPECT_EQ(v.size(), 3u);
  EXPECT_DOUBLE_EQ(v[0], 0.5);
  EXPECT_DOUBLE_EQ(v[2], 24.0 / 50.0);
}

TEST(EncodeMetadata, RejectsOutOfRange) {
  MetadataRecord r;
  r.age = 130;
  EXPECT_THROW(encode_metadata(r, MetaFeatureConfig::default_config()), DomainError);
  r.age = 40;
  r.bmi = 3;
  EXPECT_THROW(encode_metadata(r, MetaFeatureConfig::default_config()), DomainError);
  EXPECT_THROW(MetaFeatureConfig::from_selector("age,height"), ConfigError);
  EXPECT_THROW(MetaFeatureConfig::from_selector("age,age"), ConfigError);
}

TEST(EncodeMetadata, WidthAndRangeProperty) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> age(0, 120), bmi(5.01, 60);
  std::bernoulli_distribution coin(0.5);
  const std::vector<std::string> races = {"white", "black", "asian", "hispanic", "pacific islander"};
  for (const char* sel : {"age,sex,bmi", "age", "sex,race", "age,sex,bmi,race,insurance"}) {
    const auto cfg = MetaFeatureConfig::from_selector(sel);
    for (int i = 0; i < 200; ++i) {
      MetadataRecord r;
      if (coin(rng)) r.age = age(rng);
      if (coin(rng)) r.bmi = bmi(rng);
      if (coin(rng)) r.sex = coin(rng) ? Sex::male : Sex::female;
      r.race = races[i % races.size()];
      const Tensor v = encode_metadata(r, cfg);
      ASSERT_EQ(v.size(), cfg.width());
      ASSERT_EQ(v, encode_metadata(r, cfg));
      for (double x : v.values()) {
        ASSERT_GE(x, 0.0);
        ASSERT_LE(x, 1.2);
      }
    }
  }
}

TEST(MetaFeatureConfig, JsonRoundTrip) {
  auto cfg = MetaFeatureConfig::from_selector("age,sex,race");
  cfg.features[0].missing_indicator = true;
  cfg.features[0].impute = 61.5;
  const nlohmann::json j = cfg;
  EXPECT_EQ(j.get<MetaFeatureConfig>(), cfg);
  EXPECT_EQ(nlohmann::json("age,sex,bmi").get<MetaFeatureConfig>(), MetaFeatureConfig::default_config());
}
