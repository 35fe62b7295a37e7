#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "cxrfuse/data.hpp"
#include "cxrfuse/labels.hpp"
#include "cxrfuse/model.hpp"
#include "cxrfuse/tensor.hpp"

namespace cxrfuse {

/// Mann-Whitney AUROC: P(score_pos > score_neg) + 0.5 P(tie), via a rank sum
/// with average ranks for ties. Labels must be 0 or 1. nullopt when either
/// class is empty. Length mismatch -> ShapeError; NaN score -> DomainError.
std::optional<double> auroc(std::span<const double> scores, std::span<const int> labels);

/// The five pathologies shown first in results tables, in column order.
inline constexpr std::array<std::size_t, 5> kHeadlinePathologies{0, 1, 2, 3, 8};

struct PathologyResult {
  std::optional<double> auroc;
  std::size_t n_pos = 0;
  std::size_t n_neg = 0;
  friend bool operator==(const PathologyResult&, const PathologyResult&) = default;
};

/// Mean of the defined values at `which`; nullopt when none is defined.
std::optional<double> macro_over(const std::array<PathologyResult, kNumPathologies>& r,
                                 std::span<const std::size_t> which);

struct GroupResult {
  std::string group;
  std::size_t n_samples = 0;
  bool sufficient = false;  // n_samples >= the minimum group size
  std::array<PathologyResult, kNumPathologies> per_pathology{};
  std::optional<double> macro;
  friend bool operator==(const GroupResult&, const GroupResult&) = default;
};

struct SubgroupSection {
  std::string key;
  std::size_t min_group_size = 20;
  std::vector<GroupResult> groups;
  /// Largest difference of macro AUROC between sufficient groups; 0 with one group.
  std::optional<double> max_gap;
  friend bool operator==(const SubgroupSection&, const SubgroupSection&) = default;
};

struct EvalReport {
  std::string model;  // variant label for tables, e.g. "plain-scaled fusion"
  std::size_t n_samples = 0;
  std::array<PathologyResult, kNumPathologies> per_pathology{};
  std::optional<double> macro;       // over defined pathologies of all 14
  std::optional<double> macro_five;  // over defined pathologies of kHeadlinePathologies
  std::vector<SubgroupSection> subgroups;
  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

/// Scores are sigmoid(logit). With `mask_aware`, an entry contributes to its
/// pathology only where mask == 1; otherwise every entry counts with its target.
/// Zero samples -> ConfigError; logits/targets length mismatch -> ShapeError.
EvalReport evaluate(std::span<const Tensor> logits, std::span<const TargetRow> targets,
                    bool mask_aware = true);

/// Grouping of samples by one metadata key. Numeric keys (age, bmi) use
/// half-open bins [0, e0), [e0, e1), ..., [e_last, inf); categorical keys (sex,
/// race, insurance) group by value. Samples without the value form "missing".
struct GroupBy {
  std::string key = "sex";
  std::vector<double> edges;

  /// Default bins: age {40, 65}, bmi {18.5, 25, 30}. Unknown key -> ConfigError.
  static GroupBy by_key(std::string_view key);
};

SubgroupSection subgroup_report(std::span<const Tensor> logits, std::span<const TargetRow> targets,
                                std::span<const MetadataRecord> metadata, const GroupBy& group_by,
                                std::size_t min_group_size = 20, bool mask_aware = true);

/// Raw logits of `m` for each sample. `features` must be set exactly when the
/// model is in fusion mode.
std::vector<Tensor> predict(const FusionModel& m, std::span<const Sample> samples,
                            const std::optional<MetaFeatureConfig>& features);

std::vector<TargetRow> targets_of(std::span<const Sample> samples, UncertaintyPolicy policy);

/// predict + evaluate (+ one subgroup section per entry of `groups`) for a checkpoint.
EvalReport evaluate_checkpoint(const Checkpoint& c, std::span<const Sample> samples,
                               std::span<const GroupBy> groups = {}, std::size_t min_group_size = 20);

void to_json(nlohmann::json& j, const EvalReport& r);
void from_json(const nlohmann::json& j, EvalReport& r);

/// Aligned text table, one row per report: Average AUROC over the headline
/// five and over all 14, the headline five, then the remaining pathologies.
std::string format_table(std::span<const EvalReport> reports);

/// Per-pathology and average differences (fusion - baseline) as JSON.
nlohmann::json compare_reports(const EvalReport& baseline, const EvalReport& fusion);
/// Text form of compare_reports: the two rows plus a delta row.
std::string format_comparison(const EvalReport& baseline, const EvalReport& fusion);

}  // namespace cxrfuse
