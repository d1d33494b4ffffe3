#pragma once

// Config-driven orchestration: data -> consensus -> base -> profiles ->
// augment -> train -> onboard -> evaluate. Each stage is cached under a
// content hash of its inputs and recorded in manifest.json.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "coopclass/coop_net.hpp"
#include "coopclass/metrics.hpp"
#include "coopclass/onboarding.hpp"
#include "coopclass/profiles.hpp"
#include "coopclass/simulation.hpp"

namespace coopclass {

inline constexpr std::string_view kConfigSchema = "coopclass-config-v1";

struct SimulationSection {
  SyntheticDatasetSpec dataset{};
  int holdout_per_class = 100;  // validation + test pool per class
  std::vector<FlipProfileSpec> profiles{{0, 2}, {4, 7}, {1, 9}};
};

struct FilesSection {
  std::filesystem::path dataset_dir;  // annotations.csv, features.csv, clean_labels.csv
  std::filesystem::path holdout_dir;  // features.csv, clean_labels.csv
  AnnotationFormat format = AnnotationFormat::triples;
};

struct PipelineConfig {
  std::uint64_t seed = 0;
  bool simulate = true;
  SimulationSection simulation{};
  FilesSection files{};

  bool consensus_from_clean = false;
  std::size_t consensus_hidden = 64;

  int labels_per_class = 20;  // L
  Encoding encoding = Encoding::one_hot;
  int k_min = 2;
  int k_max = 6;
  std::optional<int> fixed_k;

  int draws_per_sample = 5;  // G; 0 trains on the profile's own labels
  double laplace_alpha = 0.0;

  TrainConfig train{};
  CoopNetDims dims{};  // features and classes filled from the data
  AblationMode components = AblationMode::full;

  int validation_per_class = 20;  // M
  SvmConfig svm{};
  AssignmentMode assignment = AssignmentMode::hard;
  bool svm_error = false;

  double tau = 0.0;

  nlohmann::json to_json() const;
  static PipelineConfig from_json(const nlohmann::json& j);
  /// Stable hash of the canonical JSON form.
  std::uint64_t hash() const;
  void validate() const;
};

PipelineConfig load_config(const std::filesystem::path& path);
void save_config(const PipelineConfig& config, const std::filesystem::path& path);

enum class Stage { data, consensus, base, profiles, augment, train, onboard, evaluate };
inline constexpr int kStageCount = 8;
Stage parse_stage(std::string_view name);
std::string_view to_string(Stage stage);

struct RunManifest {
  std::string config_hash;
  std::filesystem::path output_dir;
  nlohmann::json stages = nlohmann::json::object();  // name -> {hash, artifacts, retrained}
  std::optional<std::string> failed_stage;
  std::string failure;
  int stages_recomputed = 0;

  nlohmann::json to_json() const;
  static RunManifest from_json(const nlohmann::json& j);
};

/// Runs (or resumes) the pipeline up to and including `until`. Owns the
/// output directory for the duration via a lock file.
RunManifest run_pipeline(const PipelineConfig& config, const std::filesystem::path& output_dir,
                         Stage until = Stage::evaluate);

/// Rewrites the report files of a completed run from its evaluation
/// artifacts. Throws a dependency error when evaluation has not run.
void emit_reports(const RunManifest& manifest);

struct AblationPoint {
  std::string value;
  std::filesystem::path output_dir;
  AggregateReport aggregate;
};

/// Knobs: components, G, K, lambda, svm_error, noise_rate, assignment.
std::vector<std::string> default_ablation_values(std::string_view knob);
PipelineConfig apply_ablation(const PipelineConfig& base, std::string_view knob, std::string_view value);
std::vector<AblationPoint> run_ablation(const PipelineConfig& config, std::string_view knob,
                                        const std::filesystem::path& output_root,
                                        std::vector<std::string> values = {});

/// Reads reports/aggregate.json of a finished run.
nlohmann::json load_aggregate(const std::filesystem::path& output_dir);

}  // namespace coopclass
