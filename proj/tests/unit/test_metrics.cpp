#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "cxrfuse/errors.hpp"
#include "cxrfuse/metrics.hpp"
#include "cxrfuse/ops.hpp"
#include "test_helpers.hpp"

using namespace cxrfuse;
using cxrfuse::testing::brute_force_auroc;

namespace {

TargetRow row(std::initializer_list<std::pair<std::size_t, double>> labelled) {
  TargetRow r;
  for (auto [p, t] : labelled) {
    r.target[p] = t;
    r.mask[p] = 1.0;
  }
  return r;
}

Tensor logit_row(double v) { return Tensor({kNumPathologies}, v); }

/// Random scores drawn from a small set so ties are common, random 0/1 labels.
void random_instance(std::mt19937_64& rng, std::vector<double>& s, std::vector<int>& l) {
  const std::size_t n = 1 + rng() % 50;
  const int levels = 1 + static_cast<int>(rng() % 12);
  s.resize(n);
  l.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    s[i] = static_cast<double>(rng() % levels) / 4.0 - 1.0;
    l[i] = static_cast<int>(rng() % 2);
  }
}

}  // namespace

TEST(Auroc, WorkedExamples) {
  EXPECT_EQ(auroc(std::vector<double>{0.9, 0.8, 0.2, 0.1}, std::vector<int>{1, 1, 0, 0}), 1.0);
  EXPECT_EQ(auroc(std::vector<double>{0.3, 0.3, 0.3, 0.3}, std::vector<int>{1, 0, 1, 0}), 0.5);
  // pairs (0.35 vs 0.1)=1, (0.35 vs 0.4)=0, (0.8 vs 0.1)=1, (0.8 vs 0.4)=1
  EXPECT_EQ(auroc(std::vector<double>{0.1, 0.4, 0.35, 0.8}, std::vector<int>{0, 0, 1, 1}), 0.75);
}

TEST(Auroc, UndefinedWithoutBothClasses) {
  EXPECT_FALSE(auroc(std::vector<double>{0.1, 0.2}, std::vector<int>{1, 1}).has_value());
  EXPECT_FALSE(auroc(std::vector<double>{0.1, 0.2}, std::vector<int>{0, 0}).has_value());
  EXPECT_FALSE(auroc(std::vector<double>{}, std::vector<int>{}).has_value());
}

TEST(Auroc, Errors) {
  EXPECT_THROW(auroc(std::vector<double>{0.1, 0.2}, std::vector<int>{1}), ShapeError);
  EXPECT_THROW(auroc(std::vector<double>{0.1, NAN}, std::vector<int>{1, 0}), DomainError);
  EXPECT_THROW(auroc(std::vector<double>{0.1, 0.2}, std::vector<int>{1, 2}), DomainError);
}

TEST(Auroc, EqualsBruteForcePairCountExactly) {
  std::mt19937_64 rng(42);
  std::vector<double> s;
  std::vector<int> l;
  int defined = 0;
  for (int instance = 0; instance < 1000; ++instance) {
    random_instance(rng, s, l);
    const auto fast = auroc(s, l);
    const bool both = std::count(l.begin(), l.end(), 1) > 0 && std::count(l.begin(), l.end(), 0) > 0;
    ASSERT_EQ(fast.has_value(), both) << "instance " << instance;
    if (!both) continue;
    ++defined;
    ASSERT_EQ(*fast, brute_force_auroc(s, l)) << "instance " << instance;
  }
  EXPECT_GT(defined, 900);
}

TEST(Auroc, InvariantUnderStrictlyIncreasingTransforms) {
  std::mt19937_64 rng(43);
  std::vector<double> s;
  std::vector<int> l;
  for (int instance = 0; instance < 300; ++instance) {
    random_instance(rng, s, l);
    const auto base = auroc(s, l);
    std::vector<double> e(s.size()), a(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
      e[i] = std::exp(s[i]);
      a[i] = 3.5 * s[i] - 2.0;
    }
    EXPECT_EQ(auroc(e, l), base);
    EXPECT_EQ(auroc(a, l), base);
  }
}

TEST(Auroc, NegatedScoresSumToOneExactly) {
  std::mt19937_64 rng(44);
  std::vector<double> s;
  std::vector<int> l;
  for (int instance = 0; instance < 1000; ++instance) {
    random_instance(rng, s, l);
    const auto a = auroc(s, l);
    if (!a) continue;
    std::vector<double> neg(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) neg[i] = -s[i];
    ASSERT_EQ(*a + *auroc(neg, l), 1.0) << "instance " << instance;
  }
}

TEST(Evaluate, ConstantLogitsGiveHalfEverywhere) {
  std::vector<Tensor> logits(8, logit_row(0.3));
  std::vector<TargetRow> targets;
  for (int i = 0; i < 8; ++i) {
    LabelStates s;
    s.fill(i % 2 ? LabelState::positive : LabelState::negative);
    targets.push_back(build_targets(s));
  }
  const auto r = evaluate(logits, targets);
  EXPECT_EQ(r.n_samples, 8u);
  for (const auto& p : r.per_pathology) {
    ASSERT_TRUE(p.auroc.has_value());
    EXPECT_EQ(*p.auroc, 0.5);
    EXPECT_EQ(p.n_pos, 4u);
    EXPECT_EQ(p.n_neg, 4u);
  }
  EXPECT_EQ(r.macro, 0.5);
  EXPECT_EQ(r.macro_five, 0.5);
}

TEST(Evaluate, FullyMaskedPathologyIsUndefinedAndExcluded) {
  std::vector<Tensor> logits{logit_row(0.1), logit_row(0.9), logit_row(0.5)};
  std::vector<TargetRow> targets{row({{0, 0}, {1, 1}}), row({{0, 1}, {1, 0}}), row({{0, 0}, {1, 1}})};
  const auto r = evaluate(logits, targets);
  EXPECT_EQ(r.per_pathology[0].auroc, 1.0);
  // Positives {0.1, 0.5} both score below the negative 0.9.
  EXPECT_EQ(r.per_pathology[1].auroc, 0.0);
  for (std::size_t p = 2; p < kNumPathologies; ++p) {
    EXPECT_FALSE(r.per_pathology[p].auroc.has_value());
    EXPECT_EQ(r.per_pathology[p].n_pos + r.per_pathology[p].n_neg, 0u);
  }
  EXPECT_DOUBLE_EQ(*r.macro, 0.5);
  EXPECT_DOUBLE_EQ(*r.macro_five, 0.5);
}

TEST(Evaluate, HandBuiltSixSampleFixtureMatchesPairCounting) {
  // Columns 0..2 carry hand-chosen logits; entries marked -1 are masked.
  const double L[6][3] = {{2.0, -1.0, 0.5}, {1.0, 0.0, 0.5}, {-0.5, 3.0, -2.0},
                          {0.0, 1.0, 0.5}, {1.0, -2.0, 1.5}, {-1.0, 0.5, 0.0}};
  const int T[6][3] = {{1, 0, 1}, {0, -1, 1}, {0, 1, 0}, {1, 1, -1}, {1, 0, 0}, {0, -1, 1}};
  std::vector<Tensor> logits;
  std::vector<TargetRow> targets;
  for (int i = 0; i < 6; ++i) {
    Tensor l({kNumPathologies}, 0.0);
    TargetRow t;
    for (int p = 0; p < 3; ++p) {
      l[p] = L[i][p];
      if (T[i][p] >= 0) {
        t.target[p] = T[i][p];
        t.mask[p] = 1;
      }
    }
    logits.push_back(l);
    targets.push_back(t);
  }
  const auto r = evaluate(logits, targets);
  for (int p = 0; p < 3; ++p) {
    std::vector<double> s;
    std::vector<int> lab;
    for (int i = 0; i < 6; ++i)
      if (T[i][p] >= 0) {
        s.push_back(L[i][p]);
        lab.push_back(T[i][p]);
      }
    EXPECT_EQ(*r.per_pathology[p].auroc, brute_force_auroc(s, lab)) << "pathology " << p;
  }
  // By hand: positives {2, 0, 1} vs negatives {1, -0.5, -1}: 3 + 2 + 2.5 wins of 9.
  EXPECT_DOUBLE_EQ(*r.per_pathology[0].auroc, 7.5 / 9);
  EXPECT_FALSE(r.per_pathology[5].auroc.has_value());
}

TEST(Evaluate, MaskAwareFlag) {
  std::vector<Tensor> logits{logit_row(0.1), logit_row(0.9), logit_row(0.5)};
  std::vector<TargetRow> targets{row({{0, 0}}), row({{0, 1}}), TargetRow{}};
  EXPECT_EQ(evaluate(logits, targets, true).per_pathology[0].auroc, 1.0);
  // Without the mask the third sample counts as a negative at 0.5 > 0.1.
  EXPECT_EQ(evaluate(logits, targets, false).per_pathology[0].auroc, 1.0);
  EXPECT_EQ(evaluate(logits, targets, false).per_pathology[0].n_neg, 2u);
}

TEST(Evaluate, Errors) {
  std::vector<Tensor> none;
  std::vector<TargetRow> no_targets;
  EXPECT_THROW(evaluate(none, no_targets), ConfigError);
  std::vector<Tensor> logits{logit_row(0.0)};
  EXPECT_THROW(evaluate(logits, no_targets), ShapeError);
  std::vector<Tensor> short_row{Tensor({3}, 0.0)};
  std::vector<TargetRow> one{TargetRow{}};
  EXPECT_THROW(evaluate(short_row, one), ShapeError);
}

TEST(Evaluate, MaskedPerturbationsLeaveTheReportUnchanged) {
  std::mt19937_64 rng(45);
  std::normal_distribution<double> z(0, 2);
  for (int instance = 0; instance < 200; ++instance) {
    const std::size_t n = 5 + rng() % 40;
    std::vector<Tensor> logits;
    std::vector<TargetRow> targets;
    std::vector<MetadataRecord> meta;
    for (std::size_t i = 0; i < n; ++i) {
      Tensor l({kNumPathologies});
      TargetRow t;
      for (std::size_t p = 0; p < kNumPathologies; ++p) {
        l[p] = z(rng);
        t.target[p] = static_cast<double>(rng() % 2);
        t.mask[p] = rng() % 3 == 0 ? 0.0 : 1.0;
      }
      logits.push_back(l);
      targets.push_back(t);
      MetadataRecord m;
      m.sex = rng() % 2 ? Sex::male : Sex::female;
      meta.push_back(m);
    }
    const auto before = evaluate(logits, targets);
    const auto groups_before = subgroup_report(logits, targets, meta, GroupBy::by_key("sex"), 1);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t p = 0; p < kNumPathologies; ++p)
        if (targets[i].mask[p] == 0.0) {
          logits[i][p] = z(rng) * 10;
          targets[i].target[p] = 1.0 - targets[i].target[p];
        }
    ASSERT_EQ(evaluate(logits, targets), before) << "instance " << instance;
    ASSERT_EQ(subgroup_report(logits, targets, meta, GroupBy::by_key("sex"), 1), groups_before);
  }
}

namespace {

struct Fixture {
  std::vector<Tensor> logits;
  std::vector<TargetRow> targets;
  std::vector<MetadataRecord> meta;
};

Fixture random_fixture(std::mt19937_64& rng, std::size_t n) {
  std::normal_distribution<double> z(0, 1);
  Fixture f;
  for (std::size_t i = 0; i < n; ++i) {
    Tensor l({kNumPathologies});
    TargetRow t;
    for (std::size_t p = 0; p < kNumPathologies; ++p) {
      t.target[p] = static_cast<double>(rng() % 2);
      t.mask[p] = 1.0;
      l[p] = z(rng) + t.target[p];
    }
    f.logits.push_back(l);
    f.targets.push_back(t);
    MetadataRecord m;
    m.age = 20.0 + static_cast<double>(rng() % 70);
    m.sex = rng() % 2 ? Sex::male : Sex::female;
    m.race = "white";
    f.meta.push_back(m);
  }
  return f;
}

}  // namespace

TEST(Subgroups, SingleGroupEqualsOverallWithZeroGap) {
  std::mt19937_64 rng(46);
  const auto f = random_fixture(rng, 60);
  const auto overall = evaluate(f.logits, f.targets);
  const auto s = subgroup_report(f.logits, f.targets, f.meta, GroupBy::by_key("race"));
  ASSERT_EQ(s.groups.size(), 1u);
  EXPECT_EQ(s.groups[0].group, "white");
  EXPECT_EQ(s.groups[0].per_pathology, overall.per_pathology);
  EXPECT_EQ(s.groups[0].macro, overall.macro);
  EXPECT_EQ(s.max_gap, 0.0);
}

TEST(Subgroups, IdenticalMultisetsHaveZeroGap) {
  std::mt19937_64 rng(47);
  auto f = random_fixture(rng, 30);
  const std::size_t n = f.logits.size();
  for (std::size_t i = 0; i < n; ++i) {
    f.meta[i].sex = Sex::female;
    f.logits.push_back(f.logits[i]);
    f.targets.push_back(f.targets[i]);
    auto m = f.meta[i];
    m.sex = Sex::male;
    f.meta.push_back(m);
  }
  const auto s = subgroup_report(f.logits, f.targets, f.meta, GroupBy::by_key("sex"));
  ASSERT_EQ(s.groups.size(), 2u);
  EXPECT_EQ(s.groups[0].group, "female");
  EXPECT_EQ(s.groups[1].group, "male");
  EXPECT_EQ(s.max_gap, 0.0);
}

TEST(Subgroups, AgeBinsAndInsufficientGroups) {
  std::mt19937_64 rng(48);
  auto f = random_fixture(rng, 100);
  f.meta[0].age.reset();
  for (std::size_t i = 1; i < 100; ++i) f.meta[i].age = i < 10 ? 30.0 : (i < 60 ? 50.0 : 80.0);
  const auto s = subgroup_report(f.logits, f.targets, f.meta, GroupBy::by_key("age"));
  ASSERT_EQ(s.groups.size(), 4u);
  EXPECT_EQ(s.groups[0].group, "[0,40)");
  EXPECT_EQ(s.groups[1].group, "[40,65)");
  EXPECT_EQ(s.groups[2].group, "[65,inf)");
  EXPECT_EQ(s.groups[3].group, "missing");
  EXPECT_EQ(s.groups[0].n_samples, 9u);
  EXPECT_FALSE(s.groups[0].sufficient);
  EXPECT_FALSE(s.groups[0].macro.has_value());
  EXPECT_TRUE(s.groups[1].sufficient);
  EXPECT_TRUE(s.groups[2].sufficient);
  EXPECT_FALSE(s.groups[3].sufficient);
  ASSERT_TRUE(s.max_gap.has_value());
  EXPECT_DOUBLE_EQ(*s.max_gap, std::abs(*s.groups[1].macro - *s.groups[2].macro));
  EXPECT_GE(*s.max_gap, 0.0);
}

TEST(Subgroups, Errors) {
  std::mt19937_64 rng(49);
  const auto f = random_fixture(rng, 10);
  EXPECT_THROW(GroupBy::by_key("height"), ConfigError);
  EXPECT_THROW(subgroup_report(f.logits, f.targets, f.meta, GroupBy{"height", {}}), ConfigError);
  EXPECT_THROW(subgroup_report(f.logits, f.targets, f.meta, GroupBy{"age", {50, 40}}), ConfigError);
  std::vector<MetadataRecord> short_meta(f.meta.begin(), f.meta.begin() + 3);
  EXPECT_THROW(subgroup_report(f.logits, f.targets, short_meta, GroupBy::by_key("sex")), ShapeError);
}

TEST(Report, JsonRoundTripAndTables) {
  std::mt19937_64 rng(50);
  const auto f = random_fixture(rng, 80);
  auto r = evaluate(f.logits, f.targets);
  r.model = "plain-scaled fusion";
  r.per_pathology[6] = PathologyResult{};
  r.macro = macro_over(r.per_pathology, std::array<std::size_t, 13>{0, 1, 2, 3, 4, 5, 7, 8, 9, 10, 11, 12, 13});
  r.subgroups.push_back(subgroup_report(f.logits, f.targets, f.meta, GroupBy::by_key("age")));
  const nlohmann::json j = r;
  EXPECT_EQ(nlohmann::json::parse(j.dump()).get<EvalReport>(), r);
  EXPECT_TRUE(j.at("per_pathology")[6].at("auroc").is_null());

  auto base = r;
  base.model = "plain-scaled baseline";
  for (auto& p : base.per_pathology)
    if (p.auroc) *p.auroc -= 0.05;
  base.macro = *r.macro - 0.05;
  base.macro_five = *r.macro_five - 0.05;
  const auto cmp = compare_reports(base, r);
  EXPECT_NEAR(cmp.at("delta_macro_auroc").get<double>(), 0.05, 1e-12);
  EXPECT_TRUE(cmp.at("per_pathology")[6].at("delta").is_null());

  const std::vector<EvalReport> both{base, r};
  const std::string table = format_table(both);
  const auto first_line = table.substr(0, table.find('\n'));
  EXPECT_LT(first_line.find("Average AUROC (5)"), first_line.find("Atelectasis"));
  EXPECT_LT(first_line.find("Edema"), first_line.find("Pleural Effusion"));
  EXPECT_LT(first_line.find("Pleural Effusion"), first_line.find("Enlarged Cardiomediastinum"));
  EXPECT_NE(table.find("n/a"), std::string::npos);
  EXPECT_EQ(std::count(table.begin(), table.end(), '\n'), 3);
  const std::string text = format_comparison(base, r);
  EXPECT_NE(text.find("+0.05000"), std::string::npos);
}
