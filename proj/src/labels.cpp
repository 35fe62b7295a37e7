#include "cxrfuse/labels.hpp"

#include <algorithm>
#include <string>

#include "cxrfuse/errors.hpp"

namespace cxrfuse {

std::optional<std::size_t> pathology_index(std::string_view name) {
  for (std::size_t i = 0; i < kNumPathologies; ++i) {
    if (kPathologies[i] == name) return i;
  }
  return std::nullopt;
}

std::string_view to_string(LabelState s) {
  switch (s) {
    case LabelState::positive: return "positive";
    case LabelState::uncertain: return "uncertain";
    case LabelState::negative: return "negative";
    case LabelState::not_mentioned: return "not_mentioned";
  }
  return "?";
}

LabelState label_state_from_string(std::string_view s) {
  for (auto st : {LabelState::positive, LabelState::uncertain, LabelState::negative,
                  LabelState::not_mentioned}) {
    if (to_string(st) == s) return st;
  }
  throw DomainError("unknown label state '" + std::string(s) + "'");
}

std::string_view to_string(UncertaintyPolicy p) {
  switch (p) {
    case UncertaintyPolicy::uncertain_as_negative: return "uncertain_as_negative";
    case UncertaintyPolicy::uncertain_as_positive: return "uncertain_as_positive";
    case UncertaintyPolicy::uncertain_masked: return "uncertain_masked";
  }
  return "?";
}

UncertaintyPolicy uncertainty_policy_from_string(std::string_view s) {
  for (auto p : {UncertaintyPolicy::uncertain_as_negative, UncertaintyPolicy::uncertain_as_positive,
                 UncertaintyPolicy::uncertain_masked}) {
    if (to_string(p) == s) return p;
  }
  throw ConfigError("unknown uncertainty policy '" + std::string(s) + "'");
}

TargetEntry apply_policy(LabelState s, UncertaintyPolicy policy) {
  switch (s) {
    case LabelState::positive: return {1, 1};
    case LabelState::negative: return {0, 1};
    case LabelState::not_mentioned: return {0, 0};
    case LabelState::uncertain:
      switch (policy) {
        case UncertaintyPolicy::uncertain_as_negative: return {0, 1};
        case UncertaintyPolicy::uncertain_as_positive: return {1, 1};
        case UncertaintyPolicy::uncertain_masked: return {0, 0};
      }
  }
  return {0, 0};
}

TargetRow build_targets(std::span<const LabelState> states, UncertaintyPolicy policy) {
  if (states.size() != kNumPathologies) {
    throw ShapeError("expected " + std::to_string(kNumPathologies) + " label states, got " +
                     std::to_string(states.size()));
  }
  TargetRow row;
  for (std::size_t i = 0; i < kNumPathologies; ++i) {
    const TargetEntry e = apply_policy(states[i], policy);
    row.target[i] = e.target;
    row.mask[i] = e.mask;
  }
  return row;
}

// ---------------------------------------------------------------------------

void MetadataRecord::validate() const {
  if (age && !(*age >= 0 && *age <= 120)) {
    throw DomainError("age " + std::to_string(*age) + " outside [0, 120]");
  }
  if (bmi && !(*bmi > 5 && *bmi < 100)) {
    throw DomainError("bmi " + std::to_string(*bmi) + " outside (5, 100)");
  }
}

std::string_view to_string(Sex s) { return s == Sex::female ? "female" : "male"; }

Sex sex_from_string(std::string_view s) {
  if (s == "female") return Sex::female;
  if (s == "male") return Sex::male;
  throw DomainError("unknown sex '" + std::string(s) + "'");
}

std::string_view to_string(MetaField f) {
  switch (f) {
    case MetaField::age: return "age";
    case MetaField::sex: return "sex";
    case MetaField::bmi: return "bmi";
    case MetaField::race: return "race";
    case MetaField::insurance: return "insurance";
  }
  return "?";
}

MetaField meta_field_from_string(std::string_view s) {
  for (auto f : {MetaField::age, MetaField::sex, MetaField::bmi, MetaField::race, MetaField::insurance}) {
    if (to_string(f) == s) return f;
  }
  throw ConfigError("unknown metadata feature '" + std::string(s) + "'");
}

namespace {

bool is_categorical(MetaField f) { return f == MetaField::race || f == MetaField::insurance; }

}  // namespace

std::size_t FeatureSpec::width() const {
  std::size_t w = is_categorical(field) ? categories.size() + (other_slot ? 1 : 0) : 1;
  return w + (missing_indicator ? 1 : 0);
}

FeatureSpec default_feature_spec(MetaField field) {
  FeatureSpec f;
  f.field = field;
  switch (field) {
    case MetaField::age: f.impute = 60.0; break;
    case MetaField::bmi: f.impute = 27.0; break;
    case MetaField::sex: f.impute = 0.5; break;
    case MetaField::race: f.categories = {"white", "black", "asian", "hispanic"}; break;
    case MetaField::insurance: f.categories = {"medicare", "medicaid", "private"}; break;
  }
  return f;
}

std::size_t MetaFeatureConfig::width() const {
  std::size_t w = 0;
  for (const auto& f : features) w += f.width();
  return w;
}

std::string MetaFeatureConfig::selector() const {
  std::string s;
  for (const auto& f : features) {
    if (!s.empty()) s += ",";
    s += to_string(f.field);
  }
  return s;
}

MetaFeatureConfig MetaFeatureConfig::default_config() { return from_selector("age,sex,bmi"); }

MetaFeatureConfig MetaFeatureConfig::from_selector(std::string_view comma_separated) {
  MetaFeatureConfig cfg;
  std::size_t start = 0;
  while (start <= comma_separated.size()) {
    std::size_t end = comma_separated.find(',', start);
    if (end == std::string_view::npos) end = comma_separated.size();
    std::string_view name = comma_separated.substr(start, end - start);
    while (!name.empty() && name.front() == ' ') name.remove_prefix(1);
    while (!name.empty() && name.back() == ' ') name.remove_suffix(1);
    if (name.empty()) throw ConfigError("empty metadata feature in '" + std::string(comma_separated) + "'");
    const MetaField field = meta_field_from_string(name);
    for (const auto& f : cfg.features) {
      if (f.field == field) throw ConfigError("metadata feature '" + std::string(name) + "' listed twice");
    }
    cfg.features.push_back(default_feature_spec(field));
    start = end + 1;
  }
  return cfg;
}

void MetaFeatureConfig::fit_imputation(std::span<const MetadataRecord> records) {
  auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  };
  for (auto& f : features) {
    std::vector<double> present;
    for (const auto& r : records) {
      if (f.field == MetaField::age && r.age) present.push_back(*r.age);
      if (f.field == MetaField::bmi && r.bmi) present.push_back(*r.bmi);
      if (f.field == MetaField::sex && r.sex) present.push_back(*r.sex == Sex::male ? 1.0 : 0.0);
    }
    if (!present.empty()) f.impute = median(std::move(present));
  }
}

Tensor encode_metadata(const MetadataRecord& r, const MetaFeatureConfig& cfg) {
  r.validate();
  const std::size_t width = cfg.width();
  if (width == 0) throw ConfigError("metadata feature config selects no features");
  Tensor out({width}, 0.0);
  std::size_t pos = 0;
  for (const auto& f : cfg.features) {
    bool missing = false;
    switch (f.field) {
      case MetaField::age:
      case MetaField::bmi: {
        const auto& v = f.field == MetaField::age ? r.age : r.bmi;
        const double scale = f.field == MetaField::age ? 100.0 : 50.0;
        missing = !v.has_value();
        if (!missing) out[pos] = *v / scale;
        else if (!f.missing_indicator) out[pos] = f.impute / scale;
        pos += 1;
        break;
      }
      case MetaField::sex:
        missing = !r.sex.has_value();
        if (!missing) out[pos] = *r.sex == Sex::male ? 1.0 : 0.0;
        else if (!f.missing_indicator) out[pos] = f.impute;
        pos += 1;
        break;
      case MetaField::race:
      case MetaField::insurance: {
        const auto& v = f.field == MetaField::race ? r.race : r.insurance;
        missing = !v.has_value();
        if (!missing) {
          auto it = std::find(f.categories.begin(), f.categories.end(), *v);
          if (it != f.categories.end()) {
            out[pos + static_cast<std::size_t>(it - f.categories.begin())] = 1.0;
          } else if (f.other_slot) {
            out[pos + f.categories.size()] = 1.0;
          } else {
            throw DomainError("unknown " + std::string(to_string(f.field)) + " category '" + *v +
                              "' and no 'other' slot");
          }
        }
        pos += f.categories.size() + (f.other_slot ? 1 : 0);
        break;
      }
    }
    if (f.missing_indicator) {
      out[pos] = missing ? 1.0 : 0.0;
      pos += 1;
    }
  }
  return out;
}

void to_json(nlohmann::json& j, const FeatureSpec& f) {
  j = nlohmann::json{{"field", to_string(f.field)},
                     {"missing_indicator", f.missing_indicator},
                     {"impute", f.impute}};
  if (is_categorical(f.field)) {
    j["categories"] = f.categories;
    j["other_slot"] = f.other_slot;
  }
}

void from_json(const nlohmann::json& j, FeatureSpec& f) {
  if (j.is_string()) {
    f = default_feature_spec(meta_field_from_string(j.get<std::string>()));
    return;
  }
  f = default_feature_spec(meta_field_from_string(j.at("field").get<std::string>()));
  f.missing_indicator = j.value("missing_indicator", f.missing_indicator);
  f.impute = j.value("impute", f.impute);
  if (j.contains("categories")) f.categories = j.at("categories").get<std::vector<std::string>>();
  f.other_slot = j.value("other_slot", f.other_slot);
}

void to_json(nlohmann::json& j, const MetaFeatureConfig& c) { j = nlohmann::json{{"features", c.features}}; }

void from_json(const nlohmann::json& j, MetaFeatureConfig& c) {
  if (j.is_string()) {
    c = MetaFeatureConfig::from_selector(j.get<std::string>());
    return;
  }
  c.features = j.at("features").get<std::vector<FeatureSpec>>();
}

}  // namespace cxrfuse
