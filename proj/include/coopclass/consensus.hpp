#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "coopclass/dataset.hpp"
#include "coopclass/nn.hpp"

namespace coopclass {

/// Consensus labels aligned with MultiRaterDataset::samples() positions.
struct ConsensusDataset {
  int class_count = 0;
  std::vector<std::string> sample_ids;
  std::vector<ClassIndex> labels;
  std::vector<std::vector<double>> distributions;
  std::map<std::string, double> annotator_weights;
  double model_weight = 0.0;

  std::size_t size() const { return labels.size(); }
  ClassIndex label_of(std::string_view sample_id) const;
};

/// Modal label per sample, ties to the lowest class. Throws a coverage error
/// listing every sample without annotations.
std::vector<ClassIndex> majority_vote(const MultiRaterDataset& dataset);

struct ConsensusClassifier {
  Mlp net;  // logits; probabilities via softmax
  int epochs_run = 0;
  std::uint64_t seed = 0;
  double initial_loss = 0.0;
  double final_loss = 0.0;

  /// C x n probability matrix.
  Eigen::MatrixXd probabilities(const Eigen::MatrixXd& features) const;
};

struct ConsensusClassifierConfig {
  std::size_t hidden = 64;
  ClassifierTrainConfig train{};
};

/// Features of every sample as a D x n column matrix in sample order.
Eigen::MatrixXd feature_matrix(const MultiRaterDataset& dataset);
Eigen::MatrixXd feature_matrix(std::span<const LabeledSample> samples);

ConsensusClassifier train_consensus_classifier(const MultiRaterDataset& dataset,
                                               std::span<const ClassIndex> initial_labels,
                                               const ConsensusClassifierConfig& config);

struct TrustWeights {
  double model = 0.0;
  std::map<std::string, double> annotators;
};

/// Agreement rates with the initial majority vote.
TrustWeights estimate_trust_weights(const MultiRaterDataset& dataset,
                                    std::span<const ClassIndex> initial_labels,
                                    const ConsensusClassifier& classifier);

/// Same, from precomputed classifier probabilities (C x n).
TrustWeights estimate_trust_weights(const MultiRaterDataset& dataset,
                                    std::span<const ClassIndex> initial_labels,
                                    const Eigen::MatrixXd& model_probabilities);

/// Per-sample distribution proportional to
/// w_model * p_model + sum_j w_j * onehot(label_j), renormalized.
ConsensusDataset crowdlab_ensemble(const MultiRaterDataset& dataset,
                                   const Eigen::MatrixXd& model_probabilities,
                                   const TrustWeights& weights);

ConsensusDataset bypass_with_clean_labels(const MultiRaterDataset& dataset);

/// Majority vote -> classifier -> trust weights -> ensemble.
ConsensusDataset estimate_consensus(const MultiRaterDataset& dataset,
                                    const ConsensusClassifierConfig& config);

void save_consensus(const ConsensusDataset& consensus, const std::filesystem::path& path);
ConsensusDataset load_consensus(const std::filesystem::path& path);

/// Reorders/validates a loaded consensus against a dataset's sample order.
ConsensusDataset align_consensus(const MultiRaterDataset& dataset, const ConsensusDataset& consensus);

}  // namespace coopclass
