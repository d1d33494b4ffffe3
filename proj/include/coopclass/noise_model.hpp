#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "coopclass/consensus.hpp"
#include "coopclass/dataset.hpp"

namespace coopclass {

/// Row-stochastic P(noisy = n | consensus = c).
struct TransitionMatrix {
  std::string owner;                    // profile or annotator id
  Eigen::MatrixXd probabilities;        // C x C
  Eigen::MatrixXi counts;               // raw support per (c, n)
  std::vector<bool> zero_support;       // row had no labels (identity used)

  int class_count() const { return static_cast<int>(probabilities.rows()); }
  double operator()(int c, int n) const { return probabilities(c, n); }
  bool has_flagged_rows() const;

  static TransitionMatrix identity(int class_count, std::string owner = {});
  /// Wraps a given matrix (zero counts). Throws validation unless stochastic.
  static TransitionMatrix from_probabilities(const Eigen::MatrixXd& p, std::string owner = {});

  nlohmann::json metadata() const;
};

/// Throws a validation error unless every row is a distribution (1e-9).
void require_row_stochastic(const Eigen::MatrixXd& p);

/// labels_by_class[c] holds the noisy labels observed for consensus class c.
/// Plain empirical frequencies (plus optional Laplace alpha); rows without
/// support become identity rows and are flagged.
TransitionMatrix estimate_transition_matrix(std::span<const std::vector<ClassIndex>> labels_by_class,
                                            int class_count, double laplace_alpha = 0.0);

/// Pools every annotation record of the listed annotators (multi-count).
TransitionMatrix estimate_group_matrix(const MultiRaterDataset& dataset, const ConsensusDataset& consensus,
                                       std::span<const std::string> annotator_ids, std::string owner,
                                       double laplace_alpha = 0.0);

TransitionMatrix estimate_user_matrix(const MultiRaterDataset& dataset, const ConsensusDataset& consensus,
                                      std::string_view annotator_id, double laplace_alpha = 0.0);

struct AugmentedDataset {
  std::vector<std::string> sample_ids;
  std::vector<ClassIndex> consensus;
  std::vector<std::vector<ClassIndex>> noisy;  // G per sample
  int draws_per_sample = 0;
  std::uint64_t seed = 0;
  int profile = -1;

  std::size_t size() const { return sample_ids.size(); }
};

/// G i.i.d. labels per sample from row `consensus` of T. Every sample has its
/// own substream keyed by its id, so slicing or reordering the input does not
/// change any sample's draws.
AugmentedDataset augment_labels(std::span<const std::string> sample_ids, std::span<const ClassIndex> consensus,
                                const TransitionMatrix& transition, int draws_per_sample, std::uint64_t seed,
                                int profile = -1);

/// One noisy label per test sample drawn from the user's row of its clean class.
std::vector<ClassIndex> simulate_test_set(std::span<const LabeledSample> test_samples, const TransitionMatrix& user,
                                          std::uint64_t seed);

/// C x C CSV plus a `.json` sidecar with owner, counts and flags.
void save_transition_matrix(const TransitionMatrix& matrix, const std::filesystem::path& csv_path);
TransitionMatrix load_transition_matrix(const std::filesystem::path& csv_path);

void save_augmented(const AugmentedDataset& data, const std::filesystem::path& path);
AugmentedDataset load_augmented(const std::filesystem::path& path);

}  // namespace coopclass
