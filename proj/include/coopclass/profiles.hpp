#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "coopclass/consensus.hpp"
#include "coopclass/dataset.hpp"

namespace coopclass {

enum class Encoding { raw_index, one_hot };

Encoding parse_encoding(std::string_view name);
std::string_view to_string(Encoding encoding);

/// Class-block-major label sequence: L labels for class 0, then class 1, ...
struct LabelVector {
  std::string annotator_id;
  std::vector<ClassIndex> entries;
  int class_count = 0;
  int per_class = 0;
  Encoding encoding = Encoding::one_hot;

  /// Numeric embedding: the raw indices, or a one-hot block of length C
  /// per slot.
  std::vector<double> embed() const;
  std::size_t embedded_dim() const;
};

/// Draws L labels per consensus class without replacement, seeded per
/// annotator (the draw does not depend on the order annotators are visited).
/// Throws an exclusion error naming the first class with fewer than L labels.
LabelVector build_label_vector(const MultiRaterDataset& dataset, const ConsensusDataset& consensus,
                               std::string_view annotator_id, int per_class, std::uint64_t seed,
                               Encoding encoding);

/// Rows of the returned matrix are the embedded vectors.
Eigen::MatrixXd stack_embeddings(std::span<const LabelVector> vectors);

struct FuzzyConfig {
  double fuzzifier = 2.0;
  double tolerance = 1e-6;
  int max_iterations = 300;
  std::uint64_t seed = 0;
};

struct ProfileAssignment {
  int k = 0;
  Eigen::MatrixXd memberships;  // n x K, rows sum to 1
  std::vector<int> hard;        // argmax of each membership row
  Eigen::MatrixXd centroids;    // K x dim, sorted lexicographically
  std::vector<double> objective_history;
  int iterations = 0;
  bool degenerate = false;
};

/// Fuzzy c-means on the rows of `points`. Centroids are seeded k-means++
/// style on a canonical (lexicographic) ordering of the points, so the
/// result does not depend on row order. Profile ids follow the sorted
/// centroids.
ProfileAssignment fuzzy_kmeans(const Eigen::MatrixXd& points, int k, const FuzzyConfig& config);

/// Fuzzy c-means objective sum_j sum_k u_jk^m ||x_j - c_k||^2.
double fuzzy_objective(const Eigen::MatrixXd& points, const Eigen::MatrixXd& memberships,
                       const Eigen::MatrixXd& centroids, double fuzzifier);

struct SilhouetteReport {
  std::vector<double> per_point;
  std::map<int, double> per_profile;  // nonempty profiles only
  double score = 0.0;                 // mean of per-profile means
};

/// Silhouette with L2 distances; members of singleton profiles score 0.
/// Requires at least two nonempty profiles.
SilhouetteReport silhouette_score(const Eigen::MatrixXd& points, std::span<const int> labels);

struct KSelection {
  int best_k = 0;
  std::map<int, SilhouetteReport> reports;
  std::map<int, ProfileAssignment> assignments;
};

/// Argmax of the silhouette score over k_range; ties go to the smaller K.
KSelection select_k(const Eigen::MatrixXd& points, std::span<const int> k_range, const FuzzyConfig& config);

void save_profiles(const ProfileAssignment& assignment, std::span<const std::string> annotator_ids,
                   const std::filesystem::path& path);

struct LoadedProfiles {
  std::vector<std::string> annotator_ids;
  std::vector<int> hard;
  Eigen::MatrixXd memberships;
};
LoadedProfiles load_profiles(const std::filesystem::path& path);

void save_silhouette_sweep(const KSelection& selection, const std::filesystem::path& path);

}  // namespace coopclass
