#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "cxrfuse/data.hpp"
#include "cxrfuse/labels.hpp"
#include "cxrfuse/model.hpp"
#include "cxrfuse/tensor.hpp"

namespace cxrfuse {

enum class OptimizerKind { sgd_momentum, adam };

std::string_view to_string(OptimizerKind k);
OptimizerKind optimizer_kind_from_string(std::string_view s);

struct TrainConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  OptimizerKind optimizer = OptimizerKind::adam;
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  UncertaintyPolicy policy = UncertaintyPolicy::uncertain_as_negative;
  std::string backbone = "plain-scaled";
  /// Absent: image-only baseline.
  std::optional<MetaFeatureConfig> meta_features = MetaFeatureConfig::default_config();
  std::size_t meta_hidden = 12;
  std::size_t meta_out = 8;
  /// Replace metadata imputation values with medians of the training split.
  bool fit_imputation = true;

  /// Throws ConfigError naming the offending field.
  void validate() const;
  std::optional<MetaBranchConfig> meta_branch() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
/// Missing keys keep their defaults; "meta_features": null selects the baseline.
void from_json(const nlohmann::json& j, TrainConfig& c);

/// First-order optimizer with per-parameter state.
///  sgd-momentum: v = mu v + g;  p -= lr v
///  adam: m = b1 m + (1-b1) g;  v = b2 v + (1-b2) g^2;
///        p -= lr (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)
class Optimizer {
 public:
  explicit Optimizer(const TrainConfig& cfg);
  Optimizer(OptimizerKind kind, double learning_rate);

  void step(std::span<Tensor> params, std::span<const Tensor> grads);
  void step(std::vector<Parameter>& params, std::span<const Tensor> grads);
  std::size_t steps() const { return t_; }

 private:
  OptimizerKind kind_;
  double lr_, momentum_ = 0.9, beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  std::size_t t_ = 0;
  std::vector<Tensor> m_, v_;
};

/// One training example in model-ready form.
struct Example {
  Tensor image;
  std::optional<Tensor> meta;
  TargetRow target;
};

std::vector<Example> make_examples(std::span<const Sample> samples, const std::optional<MetaFeatureConfig>& features,
                                   UncertaintyPolicy policy);

struct BatchLoss {
  double loss = 0;        // mean BCE over every unmasked entry in the batch
  std::size_t count = 0;  // number of unmasked entries
};

/// Mean masked BCE over all unmasked entries of the batch and its gradient
/// with respect to every parameter, without changing the model.
BatchLoss batch_loss_and_grads(const FusionModel& m, std::span<const Example> batch, std::vector<Tensor>* grads);

/// One optimizer update on the batch loss. Empty batch -> ConfigError;
/// non-finite loss -> DivergenceError.
BatchLoss train_step(FusionModel& m, Optimizer& opt, std::span<const Example> batch);

struct EpochRow {
  std::size_t epoch = 0;
  double train_loss = 0;
  double val_loss = 0;
  std::optional<double> val_macro_auroc;
  double seconds = 0;
};

struct RunLog {
  std::vector<EpochRow> rows;
  std::string to_csv(bool with_time = true) const;
  void write_csv(const std::filesystem::path& path) const;
  /// Equality on everything except wall-clock time.
  bool same_trajectory(const RunLog& other) const;
};

struct FitResult {
  Checkpoint best;
  std::size_t best_epoch = 0;
  std::optional<double> best_val_auroc;
  RunLog log;
};

using EpochCallback = std::function<void(const EpochRow&)>;

/// Trains from a seeded initialisation, shuffling the training set each epoch
/// with a counter-based stream, and keeps the parameters of the epoch with the
/// highest validation macro AUROC (earliest on ties). Empty split -> ConfigError.
FitResult fit(const TrainConfig& cfg, std::span<const Sample> train, std::span<const Sample> val,
              const EpochCallback& on_epoch = {});

/// The epoch permutation used by fit.
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch);

}  // namespace cxrfuse
