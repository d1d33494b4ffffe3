#pragma once

// Small dense networks trained on the CPU: rectifier MLPs, adaptive-moment
// optimizers, and a cross-entropy classifier trainer with early stopping.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "coopclass/rng.hpp"

namespace coopclass {

struct DenseLayer {
  Eigen::MatrixXd weight;  // out x in
  Eigen::VectorXd bias;    // out
};

/// Layers of affine maps with ReLU between them (none after the last).
/// Batches are column-major: one sample per column.
class Mlp {
 public:
  Mlp() = default;
  /// He-initialized weights, zero biases. dims = {in, hidden..., out}.
  Mlp(std::span<const std::size_t> dims, Rng& rng);
  static Mlp zeros(std::span<const std::size_t> dims);

  std::size_t input_dim() const;
  std::size_t output_dim() const;
  std::vector<std::size_t> dims() const;
  bool empty() const { return layers_.empty(); }

  std::vector<DenseLayer>& layers() { return layers_; }
  const std::vector<DenseLayer>& layers() const { return layers_; }

  struct Cache {
    std::vector<Eigen::MatrixXd> inputs;       // input of each layer
    std::vector<Eigen::MatrixXd> pre_activation;
  };

  Eigen::MatrixXd forward(const Eigen::MatrixXd& x) const;
  Eigen::MatrixXd forward(const Eigen::MatrixXd& x, Cache& cache) const;

  /// Accumulates parameter gradients into `grads` (shaped like layers())
  /// and returns the gradient with respect to the input batch.
  Eigen::MatrixXd backward(const Cache& cache, const Eigen::MatrixXd& grad_output,
                           std::vector<DenseLayer>& grads) const;

  std::vector<DenseLayer> zero_gradients() const;
  bool all_finite() const;
  std::size_t parameter_count() const;

  nlohmann::json to_json() const;
  static Mlp from_json(const nlohmann::json& j);

  friend bool operator==(const Mlp& a, const Mlp& b);

 private:
  std::vector<DenseLayer> layers_;
};

/// Flat views over every parameter buffer, weights then bias per layer.
std::vector<std::span<double>> parameter_views(std::vector<DenseLayer>& layers);
std::vector<std::span<const double>> parameter_views(const std::vector<DenseLayer>& layers);

/// Column-wise softmax.
Eigen::MatrixXd softmax_columns(const Eigen::MatrixXd& logits);
Eigen::MatrixXd one_hot_columns(std::span<const int> labels, int class_count);

/// Argmax with ties broken toward the lowest index.
int argmax(std::span<const double> values);
int argmax(const Eigen::Ref<const Eigen::VectorXd>& values);

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class AdamOptimizer {
 public:
  explicit AdamOptimizer(AdamConfig config = {}) : config_(config) {}
  void step(std::span<const std::span<double>> params,
            std::span<const std::span<const double>> grads);

 private:
  AdamConfig config_;
  long step_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

/// Adam with Nesterov momentum and momentum decay (psi = 0.004).
class NadamOptimizer {
 public:
  explicit NadamOptimizer(AdamConfig config = {.learning_rate = 2e-3}) : config_(config) {}
  void step(std::span<const std::span<double>> params,
            std::span<const std::span<const double>> grads);

 private:
  AdamConfig config_;
  long step_ = 0;
  double mu_product_ = 1.0;
  std::vector<std::vector<double>> m_, v_;
};

struct ClassifierTrainConfig {
  int max_epochs = 500;
  int patience = 20;
  std::size_t batch_size = 128;
  double learning_rate = 1e-3;
  double holdout_fraction = 0.1;
  std::uint64_t seed = 0;
};

struct TrainHistory {
  std::vector<double> train_loss;
  std::vector<double> holdout_loss;
  double initial_holdout_loss = 0.0;
  double best_holdout_loss = 0.0;
  int best_epoch = 0;  // 0 = initialization retained
  int epochs_run = 0;
};

/// Mean cross-entropy of softmax(net(x)) against labels, probabilities
/// clamped at 1e-12.
double cross_entropy(const Mlp& net, const Eigen::MatrixXd& x, std::span<const int> labels);
double accuracy(const Mlp& net, const Eigen::MatrixXd& x, std::span<const int> labels);
std::vector<int> predict_classes(const Mlp& net, const Eigen::MatrixXd& x);

/// Adam on softmax cross-entropy with early stopping on a seeded holdout
/// slice; the best-holdout parameters are restored on exit. Throws a
/// divergence error after 3 consecutive non-finite batch losses.
TrainHistory train_classifier(Mlp& net, const Eigen::MatrixXd& x, std::span<const int> labels,
                              const ClassifierTrainConfig& config);

inline constexpr double kProbabilityFloor = 1e-12;

}  // namespace coopclass
