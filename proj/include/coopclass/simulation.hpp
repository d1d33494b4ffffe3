#pragma once

// Synthetic feature clusters and simulated flip-profile annotators.

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "coopclass/dataset.hpp"
#include "coopclass/noise_model.hpp"

namespace coopclass {

struct SyntheticDatasetSpec {
  int classes = 10;
  std::size_t dim = 10;  // at least `classes`
  int per_class = 600;
  double separation = 5.5;  // distance between class centers
  double noise = 1.0;       // per-coordinate standard deviation
  std::uint64_t seed = 0;
  std::string id_prefix = "s";
  /// Optional pairs whose centers are pulled together to `pair_separation`.
  std::vector<std::pair<int, int>> close_pairs;
  double pair_separation = 0.0;

  nlohmann::json to_json() const;
  static SyntheticDatasetSpec from_json(const nlohmann::json& j);
};

/// Isotropic Gaussian clusters with clean labels and no annotations. Sample
/// ids are `<prefix><zero-padded index>`; per-sample substreams keep the
/// output independent of generation order.
MultiRaterDataset generate_synthetic_dataset(const SyntheticDatasetSpec& spec);

/// Class center used by the generator.
std::vector<double> class_center(const SyntheticDatasetSpec& spec, int cls);

struct FlipProfileSpec {
  int class_a = 0;
  int class_b = 1;
  double flip_rate = 0.6;
  int users_per_profile = 5;
  double coverage = 0.4;

  nlohmann::json to_json() const;
  static FlipProfileSpec from_json(const nlohmann::json& j);
};

/// Symmetric pairwise flip matrix of one profile.
TransitionMatrix flip_matrix(int class_count, const FlipProfileSpec& profile);

/// `<prefix>p<k>u<i>`.
std::string simulated_user_id(std::string_view prefix, int profile, int user);

/// Adds labels from users_per_profile users for every profile. Each user
/// labels round(coverage * n) of `sample_ids` (all samples when empty); labels
/// in the flip pair swap with probability flip_rate, others are clean.
/// Returns the ground-truth profile of every simulated user.
std::map<std::string, int> simulate_annotators(MultiRaterDataset& dataset, std::span<const FlipProfileSpec> profiles,
                                               std::uint64_t seed, std::string_view id_prefix = "u",
                                               std::span<const std::string> sample_ids = {});

/// One entry per rate: the input profiles with every flip_rate replaced.
std::vector<std::vector<FlipProfileSpec>> sweep_noise_rates(std::span<const FlipProfileSpec> profiles,
                                                            std::span<const double> rates);

}  // namespace coopclass
