#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "cxrfuse/autodiff.hpp"
#include "cxrfuse/labels.hpp"
#include "cxrfuse/tensor.hpp"

namespace cxrfuse {

struct ConvSpec {
  std::size_t out_channels = 8;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  friend bool operator==(const ConvSpec&, const ConvSpec&) = default;
};

/// A run of conv + relu layers. With `residual_block` the stage ends in
/// y = relu(x + conv(relu(conv(x)))) using two shape-preserving 3x3 convs.
struct StageSpec {
  std::vector<ConvSpec> convs;
  bool residual_block = false;
  friend bool operator==(const StageSpec&, const StageSpec&) = default;
};

/// Image-branch architecture. Convolutions use padding kernel / 2; the
/// output of the last stage is globally average-pooled into the feature vector.
struct BackbonePreset {
  std::string name;
  std::size_t in_channels = 1;
  std::size_t image_size = 32;
  std::vector<StageSpec> stages;

  std::size_t feature_dim() const;
  /// Throws ConfigError for empty or inconsistent stage lists.
  void validate() const;

  /// 3 strided 3x3 stages of 8 / 16 / 32 channels.
  static BackbonePreset plain_scaled();
  /// plain_scaled with identity-skip residual blocks after stages 2 and 3.
  static BackbonePreset residual();
  /// 4 stages of 3x3 convs, 8 / 16 / 32 / 32 channels.
  static BackbonePreset plain_deep();
  static BackbonePreset by_name(std::string_view name);
  static const std::vector<std::string>& names();

  friend bool operator==(const BackbonePreset&, const BackbonePreset&) = default;
};

/// Metadata MLP: input_dim -> hidden_dim -> output_dim, swish after each layer.
struct MetaBranchConfig {
  std::size_t input_dim = 3;
  std::size_t hidden_dim = 12;
  std::size_t output_dim = 8;
  friend bool operator==(const MetaBranchConfig&, const MetaBranchConfig&) = default;
};

enum class ModelMode { fusion, image_only };

std::string_view to_string(ModelMode m);

struct Parameter {
  std::string name;
  Tensor value;
  friend bool operator==(const Parameter&, const Parameter&) = default;
};

/// Image branch + optional metadata branch + linear classifier over the
/// concatenated features. Without a metadata branch the model is the
/// image-only baseline.
class FusionModel {
 public:
  /// All parameters zero.
  FusionModel(BackbonePreset preset, std::optional<MetaBranchConfig> meta);

  /// Kaiming-uniform weights (bound sqrt(6 / fan_in)) and zero biases, drawn from
  /// a counter-based stream per parameter; identical inputs give bit-identical models.
  static FusionModel build(BackbonePreset preset, std::optional<MetaBranchConfig> meta,
                           std::uint64_t seed);

  ModelMode mode() const { return meta_ ? ModelMode::fusion : ModelMode::image_only; }
  const BackbonePreset& preset() const { return preset_; }
  const std::optional<MetaBranchConfig>& meta_config() const { return meta_; }
  std::size_t classifier_inputs() const;

  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  Parameter& parameter(std::string_view name);
  const Parameter& parameter(std::string_view name) const;
  std::size_t parameter_count() const;
  /// Parameter count of the parameters whose name starts with `prefix`.
  std::size_t parameter_count(std::string_view prefix) const;

  /// FNV-1a over the raw bits of every parameter value.
  std::uint64_t checksum() const;

  std::size_t meta_offset() const { return meta_offset_; }
  std::size_t classifier_offset() const { return classifier_offset_; }

  friend bool operator==(const FusionModel&, const FusionModel&) = default;

 private:
  void add(std::string name, Shape shape);

  BackbonePreset preset_;
  std::optional<MetaBranchConfig> meta_;
  std::vector<Parameter> params_;
  std::size_t meta_offset_ = 0;
  std::size_t classifier_offset_ = 0;
};

/// Parameters recorded on a tape, in FusionModel::parameters() order.
struct BoundModel {
  const FusionModel* model = nullptr;
  std::vector<Var> params;
};

/// Records every parameter on `tape`; as variables when `trainable`.
BoundModel bind(Tape& tape, const FusionModel& model, bool trainable);

/// image [C x H x W] -> features [feature_dim]
Var forward_image_branch(const BoundModel& m, Var image);
/// meta [input_dim] -> [output_dim]. ModeError for an image-only model.
Var forward_meta_branch(const BoundModel& m, Var meta);
/// Raw logits [14]. Pass `meta` exactly when the model is in fusion mode.
Var forward(const BoundModel& m, Var image, std::optional<Var> meta);

Tensor forward_image_branch(const FusionModel& m, const Tensor& image);
Tensor forward_meta_branch(const FusionModel& m, const Tensor& meta);
Tensor forward(const FusionModel& m, const Tensor& image);
Tensor forward(const FusionModel& m, const Tensor& image, const Tensor& meta);

// ---------------------------------------------------------------------------
// Checkpoints

/// A model plus what is needed to feed it: the metadata encoding and the
/// label policy it was trained with, and free-form training info.
struct Checkpoint {
  FusionModel model;
  std::optional<MetaFeatureConfig> features;
  UncertaintyPolicy policy = UncertaintyPolicy::uncertain_as_negative;
  nlohmann::json info = nlohmann::json::object();
};

inline constexpr int kCheckpointVersion = 1;

/// JSON container: config echo plus flat parameter arrays. Doubles are
/// written in shortest round-trip form, so load(save(c)) is bit-exact.
nlohmann::json checkpoint_to_json(const Checkpoint& c);
Checkpoint checkpoint_from_json(const nlohmann::json& j);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c);
Checkpoint load_checkpoint(const std::filesystem::path& path);

void to_json(nlohmann::json& j, const BackbonePreset& p);
void from_json(const nlohmann::json& j, BackbonePreset& p);
void to_json(nlohmann::json& j, const MetaBranchConfig& c);
void from_json(const nlohmann::json& j, MetaBranchConfig& c);

}  // namespace cxrfuse
