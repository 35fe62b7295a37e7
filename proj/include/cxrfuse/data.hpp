#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "cxrfuse/labels.hpp"
#include "cxrfuse/tensor.hpp"

namespace cxrfuse {

inline constexpr std::size_t kImageSize = 32;

enum class View { frontal, lateral };

std::string_view to_string(View v);
View view_from_string(std::string_view s);

struct Sample {
  std::string sample_id;
  std::string patient_id;
  Tensor image{Shape{1, kImageSize, kImageSize}, 0.0};  // values in [0, 1]
  MetadataRecord metadata;
  LabelStates states{};
  View view = View::frontal;
};

/// Per-pathology planted signal. The true label is drawn with probability
///   sigmoid(intercept + beta_age * (age - 56.5) / 22.2
///                    + beta_sex * (male ? +1 : -1)
///                    + beta_bmi * (bmi - 27) / 5)
/// and, when true, the pathology's pattern is drawn at `pattern_strength`.
struct PathologySignal {
  double pattern_strength = 0.8;
  double beta_age = 0;
  double beta_sex = 0;
  double beta_bmi = 0;
  double intercept = -1.0;
  friend bool operator==(const PathologySignal&, const PathologySignal&) = default;
};

struct SynthConfig {
  std::size_t n_patients = 100;
  std::size_t images_per_patient = 1;
  std::uint64_t seed = 0;
  std::array<PathologySignal, kNumPathologies> signals{};
  /// Probability that a (sample, pathology) is image-ambiguous: the pattern,
  /// if any, is rendered at `ambiguous_strength_scale` of its strength.
  double ambiguity_fraction = 0;
  /// Optional per-sex overrides of ambiguity_fraction.
  std::optional<double> ambiguity_female;
  std::optional<double> ambiguity_male;
  double ambiguous_strength_scale = 0.02;
  double not_mentioned_rate = 0;
  double uncertain_rate = 0;
  double noise_sd = 0.05;
  double lateral_fraction = 0;

  /// Throws ConfigError for out-of-range rates, fractions or sizes.
  void validate() const;
  friend bool operator==(const SynthConfig&, const SynthConfig&) = default;
};

void to_json(nlohmann::json& j, const PathologySignal& s);
void from_json(const nlohmann::json& j, PathologySignal& s);
/// "signals" may be a 14-entry list, or an object keyed by pathology name
/// whose entries override the defaults.
void to_json(nlohmann::json& j, const SynthConfig& c);
void from_json(const nlohmann::json& j, SynthConfig& c);

/// Generator-side truth that never reaches the manifest.
struct SampleTruth {
  std::array<bool, kNumPathologies> label{};
  std::array<bool, kNumPathologies> ambiguous{};
};

struct GeneratedData {
  std::vector<Sample> samples;
  std::vector<SampleTruth> truth;  // parallel to samples
};

GeneratedData generate_with_truth(const SynthConfig& cfg);
std::vector<Sample> generate(const SynthConfig& cfg);

/// Pattern cell and peak pixel (row, col) of a pathology on the 32x32 canvas.
/// Patterns of different pathologies occupy disjoint 8x8 cells.
std::pair<std::size_t, std::size_t> pattern_peak(std::size_t pathology);
/// Unit-amplitude pattern of a pathology on the full canvas.
Tensor pattern_image(std::size_t pathology);

// ---------------------------------------------------------------------------
// PGM and manifest I/O

/// Binary 16-bit PGM (P5, maxval 65535, big-endian). Values are clamped to [0,1].
void write_pgm(const std::filesystem::path& path, const Tensor& image);
/// Reads 8- or 16-bit binary PGM into a [1 x H x W] tensor scaled to [0,1].
Tensor read_pgm(const std::filesystem::path& path);

/// Writes dir/manifest.jsonl and dir/images/<sample_id>.pgm.
void write_manifest(const std::vector<Sample>& samples, const std::filesystem::path& dir);
/// Reads dir/manifest.jsonl; IoError messages name the offending sample_id.
std::vector<Sample> read_manifest(const std::filesystem::path& dir);

inline constexpr const char* kManifestName = "manifest.jsonl";

// ---------------------------------------------------------------------------
// Splitting

struct SplitFractions {
  double train = 0.7, val = 0.1, test = 0.2;
  friend bool operator==(const SplitFractions&, const SplitFractions&) = default;
};

struct DatasetSplit {
  std::vector<Sample> train, val, test;
};

/// Assigns whole patients to splits by hashing (patient_id, seed); sample
/// order within a split follows input order.
DatasetSplit split_by_patient(const std::vector<Sample>& samples, const SplitFractions& fractions,
                              std::uint64_t seed);

std::vector<Sample> filter_frontal(const std::vector<Sample>& samples);

}  // namespace cxrfuse
