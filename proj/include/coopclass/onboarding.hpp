#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "coopclass/coop_net.hpp"
#include "coopclass/dataset.hpp"
#include "coopclass/profiles.hpp"

namespace coopclass {

/// Validation-set labels of one user, in the block layout of the training
/// label vectors (M labels per clean class, class order). Throws an
/// incomplete error listing missing items.
LabelVector build_onboarding_vector(const ValidationSet& validation,
                                    const std::map<std::string, ClassIndex, std::less<>>& user_labels,
                                    Encoding encoding, std::string user_id = {});

struct SvmConfig {
  double c_param = 1.0;
  int epochs = 200;
  std::uint64_t seed = 0;
};

/// One-versus-all linear scorers trained with the hinge loss.
struct OvaSvm {
  int profile_count = 0;
  std::size_t dim = 0;
  std::vector<Eigen::VectorXd> weights;
  std::vector<double> biases;
  SvmConfig config;
  double training_accuracy = 0.0;
  /// Per scorer, the regularized hinge objective of the averaged iterate
  /// after each epoch.
  std::vector<std::vector<double>> objective_history;

  Eigen::VectorXd decision_scores(std::span<const double> vector) const;

  nlohmann::json to_json() const;
  static OvaSvm from_json(const nlohmann::json& j);
};

/// Rows of `vectors` are embedded label vectors; profiles in [0, K).
/// Seeded stochastic subgradient descent (step 1/(lambda t), lambda =
/// 1/(C n)) with iterate averaging; bias handled as a regularized constant
/// feature. K = 1 yields the constant classifier.
OvaSvm train_ova_svm(const Eigen::MatrixXd& vectors, std::span<const int> profiles, int profile_count,
                     const SvmConfig& config);

/// (lambda/2)|w|^2 + mean hinge, for one binary scorer.
double svm_objective(const Eigen::MatrixXd& vectors, std::span<const int> signs, const Eigen::VectorXd& w, double b,
                     double lambda);

struct ProfileScores {
  std::vector<double> raw;
  std::vector<double> probabilities;  // softmax of raw
  int hard = 0;
};

ProfileScores profile_user(const OvaSvm& svm, std::span<const double> vector);

struct OnboardingResult {
  std::string user_id;
  std::vector<double> profile_scores;
  int hard_profile = 0;
  double user_val_accuracy = 0.0;
  double base_val_accuracy = 0.0;
  bool accepted = false;

  nlohmann::json to_json() const;
  static OnboardingResult from_json(const nlohmann::json& j);
};

/// Strict: the base model must beat the user.
bool entry_condition(double base_accuracy, double user_accuracy);

/// Scores both on the validation set and fills the accuracies and verdict.
OnboardingResult evaluate_entry(const ProfileScores& scores, std::span<const ClassIndex> user_labels,
                                std::span<const int> base_predictions, const ValidationSet& validation,
                                std::string user_id = {});

/// Ablation: reassign to a uniformly drawn wrong profile (no-op when K = 1).
void inject_profile_error(OnboardingResult& result, int profile_count, std::uint64_t seed);

enum class AssignmentMode { hard, soft };
AssignmentMode parse_assignment_mode(std::string_view name);
std::string_view to_string(AssignmentMode mode);

/// Joint predictions for an accepted user. Hard mode uses the matched
/// profile's model; soft mode takes the argmax of the score-weighted
/// mixture of every profile model. Throws a policy error for rejected users.
std::vector<int> cooperative_inference(const OnboardingResult& user, AssignmentMode mode, std::span<const CoopNet> models,
                                       const Eigen::MatrixXd& x, std::span<const int> user_labels);

/// The mixture distribution used by soft mode (C x n).
Eigen::MatrixXd soft_mixture(std::span<const double> profile_scores, std::span<const CoopNet> models,
                             const Eigen::MatrixXd& x, std::span<const int> user_labels);

void save_svm(const OvaSvm& svm, const std::filesystem::path& path);
OvaSvm load_svm(const std::filesystem::path& path);

}  // namespace coopclass
