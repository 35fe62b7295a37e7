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
#include "cxrfuse/train.hpp"

namespace cxrfuse {

struct MetaDims {
  std::size_t hidden = 12;
  std::size_t out = 8;
  friend bool operator==(const MetaDims&, const MetaDims&) = default;
};

enum class SweepStrategy { grid, random };

/// Values to try per dimension. A meta_features entry is a field selector
/// such as "age,sex,bmi"; "none" trains the image-only baseline.
struct SweepSpec {
  SweepStrategy strategy = SweepStrategy::grid;
  std::size_t n_trials = 0;  // random only
  std::uint64_t seed = 0;    // random only
  std::vector<double> learning_rate;
  std::vector<std::size_t> batch_size;
  std::vector<std::string> meta_features;
  std::vector<MetaDims> meta_dims;

  /// Throws ConfigError for an empty value list or n_trials < 1 with random.
  void validate() const;
  std::size_t grid_size() const;
};

void to_json(nlohmann::json& j, const SweepSpec& s);
void from_json(const nlohmann::json& j, SweepSpec& s);

struct TrialPoint {
  std::size_t trial_id = 0;  // position in the full grid
  double learning_rate = 0;
  std::size_t batch_size = 0;
  std::string meta_features;
  MetaDims meta_dims;
  friend bool operator==(const TrialPoint&, const TrialPoint&) = default;
};

/// Every combination, learning rate varying slowest and meta_dims fastest.
std::vector<TrialPoint> enumerate_grid(const SweepSpec& spec);

/// The grid, or for random search n_trials distinct grid cells drawn without
/// replacement from a seeded stream (the whole grid if n_trials >= its size),
/// returned in trial_id order.
std::vector<TrialPoint> select_trials(const SweepSpec& spec);

/// `base` with the trial's dimensions applied.
TrainConfig trial_config(const TrainConfig& base, const TrialPoint& t);

struct TrialResult {
  TrialPoint point;
  std::optional<double> best_val_auroc;
  std::string status = "ok";  // "ok" or "failed: <reason>"
  RunLog log;
  std::optional<Checkpoint> checkpoint;
};

struct SweepResult {
  std::vector<TrialResult> trials;  // ranked: best AUROC first, failed last, ties by trial_id
  std::optional<std::size_t> winner;  // index into trials of the best successful trial
  std::optional<TrainConfig> winner_config;
};

using TrialCallback = std::function<void(const TrialResult&)>;

/// Runs fit for each selected trial; a trial that throws is recorded as
/// failed and the sweep continues. Up to `jobs` trials run concurrently;
/// results do not depend on `jobs`.
SweepResult sweep(const SweepSpec& spec, const TrainConfig& base, std::span<const Sample> train,
                  std::span<const Sample> val, std::size_t jobs = 1, const TrialCallback& on_trial = {});

/// Columns: trial_id, learning_rate, batch_size, meta_features, meta_hidden,
/// meta_out, best_val_auroc, status.
std::string trial_table_csv(const SweepResult& r);

}  // namespace cxrfuse
