#pragma once

// Per-profile human-AI cooperative model: a decision head over the
// concatenation of base-model logits and an encoding of the human label,
// trained with consensus cross-entropy plus a forward-corrected noisy-label
// term.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "coopclass/nn.hpp"
#include "coopclass/noise_model.hpp"

namespace coopclass {

enum class AblationMode { full, no_encoder, no_decision, neither };

AblationMode parse_ablation_mode(std::string_view name);
std::string_view to_string(AblationMode mode);

struct CoopNetDims {
  std::size_t features = 0;
  std::size_t classes = 0;
  std::size_t base_hidden = 64;
  std::size_t encoder_hidden = 32;
  std::size_t decision_hidden1 = 64;
  std::size_t decision_hidden2 = 32;
};

struct CoopNet {
  Mlp base;      // features -> hidden -> C logits
  Mlp encoder;   // one-hot label (C) -> hidden -> C
  Mlp decision;  // 2C -> hidden -> hidden -> C logits, softmax on top
  int profile = -1;
  double lambda = 0.1;
  Eigen::MatrixXd transition;  // C x C, used by the training loss
  AblationMode mode = AblationMode::full;

  // Training metadata.
  int epochs_run = 0;
  int best_epoch = 0;
  std::uint64_t seed = 0;

  static CoopNet create(const CoopNetDims& dims, Rng& rng);

  int class_count() const { return static_cast<int>(base.output_dim()); }
  std::size_t feature_dim() const { return base.input_dim(); }

  /// C x n probabilities for column-batched features and one label each.
  Eigen::MatrixXd forward(const Eigen::MatrixXd& x, std::span<const int> human_labels) const;
  std::vector<double> forward(std::span<const double> x, int human_label) const;

  /// Argmax of forward, ties toward the lowest class.
  int scalar_prediction(std::span<const double> x, int human_label) const;
  std::vector<int> scalar_predictions(const Eigen::MatrixXd& x, std::span<const int> human_labels) const;

  /// Base model alone (for the entry condition and decision tables).
  std::vector<int> base_predictions(const Eigen::MatrixXd& x) const;

  nlohmann::json to_json() const;
  static CoopNet from_json(const nlohmann::json& j);
};

/// Copy of `net` whose forward pass uses the ablated wiring:
/// no_encoder feeds the one-hot label straight to the decision head,
/// no_decision replaces the head by softmax(base + encoder), neither does both.
CoopNet ablate_components(const CoopNet& net, AblationMode mode);

struct CoopBatch {
  Eigen::MatrixXd x;             // D x n
  std::vector<int> consensus;    // target
  std::vector<int> noisy;        // human / augmented label fed to the model
};

/// mean over the batch of CE(consensus, m) + lambda * CE(noisy, T^T m),
/// probabilities floored at 1e-12.
double composite_loss(const CoopNet& net, const CoopBatch& batch, const Eigen::MatrixXd& transition, double lambda);

struct CoopGradients {
  std::vector<DenseLayer> base;
  std::vector<DenseLayer> encoder;
  std::vector<DenseLayer> decision;
};

struct LossAndGradients {
  double loss = 0.0;
  CoopGradients gradients;
};

/// Exact gradients of composite_loss. Throws divergence on non-finite values.
LossAndGradients backprop_gradients(const CoopNet& net, const CoopBatch& batch, const Eigen::MatrixXd& transition,
                                    double lambda);

struct TrainConfig {
  int max_epochs = 500;
  int patience = 20;
  double lambda = 0.1;
  std::size_t batch_size = 128;
  double base_learning_rate = 1e-3;
  double joint_learning_rate = 2e-3;
  double holdout_fraction = 0.1;
  int draws_per_sample = 5;
  std::uint64_t seed = 0;
};

/// Trains the base classifier on consensus labels (Adam).
TrainHistory pretrain_base(Mlp& base, const Eigen::MatrixXd& x, std::span<const int> consensus,
                           const TrainConfig& config);

struct ProfileTrainingData {
  Eigen::MatrixXd x;  // D x n, one column per augmented sample
  AugmentedDataset augmented;
};

/// Joint NAdam training of all three parts on (x, consensus, noisy draw)
/// triples, starting from a copy of `pretrained_base`. Early stops on the
/// holdout composite loss and restores the best epoch.
CoopNet train_profile_model(int profile, const ProfileTrainingData& data, const TransitionMatrix& transition,
                            const Mlp& pretrained_base, const CoopNetDims& dims, const TrainConfig& config,
                            AblationMode mode = AblationMode::full, TrainHistory* history = nullptr);

void save_coop_net(const CoopNet& net, const std::filesystem::path& path);
CoopNet load_coop_net(const std::filesystem::path& path);

}  // namespace coopclass
