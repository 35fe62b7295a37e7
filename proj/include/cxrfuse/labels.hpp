#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "cxrfuse/tensor.hpp"

namespace cxrfuse {

inline constexpr std::size_t kNumPathologies = 14;

/// Canonical pathology order. Indices are stable across models, manifests,
/// reports and the lexicon.
inline constexpr std::array<std::string_view, kNumPathologies> kPathologies = {
    "atelectasis",     "cardiomegaly",     "consolidation",    "edema",
    "enlarged cardiomediastinum", "fracture", "lung lesion",   "lung opacity",
    "pleural effusion", "pleural other",   "pneumonia",        "pneumothorax",
    "support devices", "no finding",
};

inline constexpr std::size_t kNoFinding = 13;

/// Index of a pathology name (canonical spelling), or nullopt.
std::optional<std::size_t> pathology_index(std::string_view name);

enum class LabelState { positive, uncertain, negative, not_mentioned };

std::string_view to_string(LabelState s);
LabelState label_state_from_string(std::string_view s);

using LabelStates = std::array<LabelState, kNumPathologies>;

/// How uncertain findings become training targets. Not-mentioned findings
/// are always masked out.
enum class UncertaintyPolicy {
  uncertain_as_negative,  // default
  uncertain_as_positive,
  uncertain_masked,
};

std::string_view to_string(UncertaintyPolicy p);
UncertaintyPolicy uncertainty_policy_from_string(std::string_view s);

struct TargetEntry {
  double target = 0;
  double mask = 0;
  friend bool operator==(const TargetEntry&, const TargetEntry&) = default;
};

TargetEntry apply_policy(LabelState s,
                         UncertaintyPolicy policy = UncertaintyPolicy::uncertain_as_negative);

/// One row of the target matrix: 14 targets and the matching loss mask.
struct TargetRow {
  Tensor target{Shape{kNumPathologies}, 0.0};
  Tensor mask{Shape{kNumPathologies}, 0.0};
};

TargetRow build_targets(std::span<const LabelState> states,
                        UncertaintyPolicy policy = UncertaintyPolicy::uncertain_as_negative);

// ---------------------------------------------------------------------------
// Metadata

enum class Sex { female, male };

struct MetadataRecord {
  std::optional<double> age;  // years, [0, 120]
  std::optional<Sex> sex;
  std::optional<std::string> race;
  std::optional<double> bmi;  // kg/m^2, (5, 100)
  std::optional<std::string> insurance;

  /// Throws DomainError when a present numeric field is out of range.
  void validate() const;
  friend bool operator==(const MetadataRecord&, const MetadataRecord&) = default;
};

std::string_view to_string(Sex s);
Sex sex_from_string(std::string_view s);

enum class MetaField { age, sex, bmi, race, insurance };

std::string_view to_string(MetaField f);
MetaField meta_field_from_string(std::string_view s);

/// Encoding of one selected metadata field.
///  - age, bmi: one scaled slot (age/100, bmi/50)
///  - sex: one slot, female 0 / male 1
///  - race, insurance: one-hot over `categories`, plus an "other" slot if enabled
/// A missing-indicator slot follows when `missing_indicator` is set; otherwise
/// missing numeric/sex values are replaced by `impute`.
struct FeatureSpec {
  MetaField field = MetaField::age;
  bool missing_indicator = false;
  double impute = 0.0;  // raw units (years, kg/m^2, 0/1 for sex)
  std::vector<std::string> categories;
  bool other_slot = true;

  std::size_t width() const;
  friend bool operator==(const FeatureSpec&, const FeatureSpec&) = default;
};

struct MetaFeatureConfig {
  std::vector<FeatureSpec> features;

  std::size_t width() const;
  /// Comma-separated field names, e.g. "age,sex,bmi".
  std::string selector() const;

  /// age, sex, bmi with median-style imputation: the 3-wide default.
  static MetaFeatureConfig default_config();
  /// Fields with default per-field settings, e.g. {"age","sex","race"}.
  static MetaFeatureConfig from_selector(std::string_view comma_separated);

  /// Replaces impute values with the medians of the present values.
  void fit_imputation(std::span<const MetadataRecord> records);

  friend bool operator==(const MetaFeatureConfig&, const MetaFeatureConfig&) = default;
};

FeatureSpec default_feature_spec(MetaField field);

/// Encoded metadata vector of length cfg.width().
Tensor encode_metadata(const MetadataRecord& r, const MetaFeatureConfig& cfg);

void to_json(nlohmann::json& j, const FeatureSpec& f);
void from_json(const nlohmann::json& j, FeatureSpec& f);
void to_json(nlohmann::json& j, const MetaFeatureConfig& c);
void from_json(const nlohmann::json& j, MetaFeatureConfig& c);

}  // namespace cxrfuse
