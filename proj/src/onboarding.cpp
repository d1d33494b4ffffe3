#include "coopclass/onboarding.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "coopclass/error.hpp"
#include "coopclass/rng.hpp"
#include "text_io.hpp"

namespace coopclass {

LabelVector build_onboarding_vector(const ValidationSet& validation,
                                    const std::map<std::string, ClassIndex, std::less<>>& user_labels,
                                    Encoding encoding, std::string user_id) {
  LabelVector v;
  v.annotator_id = std::move(user_id);
  v.class_count = validation.class_count;
  v.per_class = validation.per_class;
  v.encoding = encoding;
  std::vector<std::string> missing;
  for (ClassIndex c = 0; c < validation.class_count; ++c) {
    for (const auto& item : validation.items) {
      if (item.clean_label != c) continue;
      const auto it = user_labels.find(item.sample_id);
      if (it == user_labels.end()) {
        missing.push_back(item.sample_id);
        continue;
      }
      if (it->second < 0 || it->second >= validation.class_count) {
        fail(ErrorKind::validation, "label for " + item.sample_id + " out of range");
      }
      v.entries.push_back(it->second);
    }
  }
  if (!missing.empty()) {
    std::string list;
    for (std::size_t i = 0; i < missing.size(); ++i) list += (i ? ", " : "") + missing[i];
    fail(ErrorKind::incomplete, "onboarding incomplete; missing labels for: " + list);
  }
  return v;
}

// ---------------------------------------------------------------------------
// OVA SVM

double svm_objective(const Eigen::MatrixXd& vectors, std::span<const int> signs, const Eigen::VectorXd& w, double b,
                     double lambda) {
  double hinge = 0.0;
  for (Eigen::Index i = 0; i < vectors.rows(); ++i) {
    const double margin = signs[static_cast<std::size_t>(i)] * (vectors.row(i).dot(w) + b);
    hinge += std::max(0.0, 1.0 - margin);
  }
  return 0.5 * lambda * (w.squaredNorm() + b * b) + hinge / static_cast<double>(std::max<Eigen::Index>(1, vectors.rows()));
}

Eigen::VectorXd OvaSvm::decision_scores(std::span<const double> vector) const {
  if (vector.size() != dim) {
    fail(ErrorKind::shape, "onboarding vector has " + std::to_string(vector.size()) + " entries, SVM expects " +
                               std::to_string(dim));
  }
  const Eigen::Map<const Eigen::VectorXd> x(vector.data(), static_cast<Eigen::Index>(vector.size()));
  Eigen::VectorXd s(profile_count);
  for (int k = 0; k < profile_count; ++k) s(k) = weights[static_cast<std::size_t>(k)].dot(x) + biases[static_cast<std::size_t>(k)];
  return s;
}

OvaSvm train_ova_svm(const Eigen::MatrixXd& vectors, std::span<const int> profiles, int profile_count,
                     const SvmConfig& config) {
  const auto n = static_cast<std::size_t>(vectors.rows());
  if (profiles.size() != n) fail(ErrorKind::shape, "one profile label per vector expected");
  if (profile_count < 1) fail(ErrorKind::configuration, "profile count must be positive");
  if (config.c_param <= 0.0) fail(ErrorKind::configuration, "SVM C must be positive");
  std::vector<int> members(static_cast<std::size_t>(profile_count), 0);
  for (int p : profiles) {
    if (p < 0 || p >= profile_count) fail(ErrorKind::validation, "profile label out of range");
    ++members[static_cast<std::size_t>(p)];
  }
  for (int k = 0; k < profile_count; ++k) {
    if (members[static_cast<std::size_t>(k)] == 0) {
      fail(ErrorKind::configuration, "profile " + std::to_string(k) + " has no training users");
    }
  }

  OvaSvm svm;
  svm.profile_count = profile_count;
  svm.dim = static_cast<std::size_t>(vectors.cols());
  svm.config = config;
  if (profile_count == 1) {
    svm.weights.assign(1, Eigen::VectorXd::Zero(vectors.cols()));
    svm.biases.assign(1, 0.0);
    svm.objective_history.assign(1, {});
    svm.training_accuracy = 1.0;
    return svm;
  }

  const double lambda = 1.0 / (config.c_param * static_cast<double>(n));
  for (int k = 0; k < profile_count; ++k) {
    std::vector<int> signs(n);
    for (std::size_t i = 0; i < n; ++i) signs[i] = profiles[i] == k ? 1 : -1;
    Rng rng(derive_seed(config.seed, 0x737663ULL, static_cast<std::uint64_t>(k)));
    Eigen::VectorXd w = Eigen::VectorXd::Zero(vectors.cols());
    double b = 0.0;
    Eigen::VectorXd w_avg = w;
    double b_avg = 0.0;
    std::vector<double> history;
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    long t = 0;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
      rng.shuffle(order);
      for (auto i : order) {
        ++t;
        const double eta = 1.0 / (lambda * static_cast<double>(t));
        const double margin = signs[i] * (vectors.row(static_cast<Eigen::Index>(i)).dot(w) + b);
        w *= (1.0 - eta * lambda);
        b *= (1.0 - eta * lambda);
        if (margin < 1.0) {
          w += (eta * signs[i]) * vectors.row(static_cast<Eigen::Index>(i)).transpose();
          b += eta * signs[i];
        }
        // Running mean of all iterates.
        const double a = 1.0 / static_cast<double>(t);
        w_avg += a * (w - w_avg);
        b_avg += a * (b - b_avg);
      }
      history.push_back(svm_objective(vectors, signs, w_avg, b_avg, lambda));
    }
    svm.weights.push_back(w_avg);
    svm.biases.push_back(b_avg);
    svm.objective_history.push_back(std::move(history));
  }

  std::size_t hits = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const Eigen::VectorXd row = vectors.row(static_cast<Eigen::Index>(i)).transpose();
    hits += argmax(svm.decision_scores(std::span<const double>(row.data(), static_cast<std::size_t>(row.size())))) == profiles[i] ? 1 : 0;
  }
  svm.training_accuracy = n == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(n);
  return svm;
}

ProfileScores profile_user(const OvaSvm& svm, std::span<const double> vector) {
  const Eigen::VectorXd s = svm.decision_scores(vector);
  ProfileScores out;
  out.raw.assign(s.data(), s.data() + s.size());
  const double mx = s.maxCoeff();
  double total = 0.0;
  for (double v : out.raw) {
    out.probabilities.push_back(std::exp(v - mx));
    total += out.probabilities.back();
  }
  for (double& p : out.probabilities) p /= total;
  out.hard = argmax(out.raw);
  return out;
}

nlohmann::json OvaSvm::to_json() const {
  nlohmann::json w = nlohmann::json::array();
  for (const auto& v : weights) w.push_back(std::vector<double>(v.data(), v.data() + v.size()));
  return {{"schema", "coopclass-svm-v1"},
          {"profiles", profile_count},
          {"dim", dim},
          {"weights", w},
          {"biases", biases},
          {"training_accuracy", training_accuracy},
          {"config", {{"c_param", config.c_param}, {"epochs", config.epochs}, {"seed", config.seed}}}};
}

OvaSvm OvaSvm::from_json(const nlohmann::json& j) {
  if (j.value("schema", std::string{}) != "coopclass-svm-v1") fail(ErrorKind::format, "not a coopclass-svm-v1 artifact");
  OvaSvm svm;
  svm.profile_count = j.at("profiles").get<int>();
  svm.dim = j.at("dim").get<std::size_t>();
  for (const auto& w : j.at("weights")) {
    const auto v = w.get<std::vector<double>>();
    if (v.size() != svm.dim) fail(ErrorKind::format, "SVM weight length does not match its dimension");
    svm.weights.emplace_back(Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size())));
  }
  svm.biases = j.at("biases").get<std::vector<double>>();
  if (svm.weights.size() != static_cast<std::size_t>(svm.profile_count) || svm.biases.size() != svm.weights.size()) {
    fail(ErrorKind::format, "SVM scorer count does not match its profile count");
  }
  svm.training_accuracy = j.at("training_accuracy").get<double>();
  const auto& c = j.at("config");
  svm.config = {c.at("c_param").get<double>(), c.at("epochs").get<int>(), c.at("seed").get<std::uint64_t>()};
  return svm;
}

void save_svm(const OvaSvm& svm, const std::filesystem::path& path) {
  auto out = detail::open_out(path);
  out << svm.to_json().dump() << '\n';
}

OvaSvm load_svm(const std::filesystem::path& path) {
  auto in = detail::open_in(path);
  try {
    return OvaSvm::from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Entry condition and inference

bool entry_condition(double base_accuracy, double user_accuracy) { return base_accuracy > user_accuracy; }

OnboardingResult evaluate_entry(const ProfileScores& scores, std::span<const ClassIndex> user_labels,
                                std::span<const int> base_predictions, const ValidationSet& validation,
                                std::string user_id) {
  const auto n = validation.items.size();
  if (user_labels.size() != n || base_predictions.size() != n) {
    fail(ErrorKind::alignment, "user labels and base predictions must cover the validation set");
  }
  std::size_t user_hits = 0;
  std::size_t base_hits = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto truth = validation.items[i].clean_label.value();
    user_hits += user_labels[i] == truth ? 1 : 0;
    base_hits += base_predictions[i] == truth ? 1 : 0;
  }
  OnboardingResult r;
  r.user_id = std::move(user_id);
  r.profile_scores = scores.probabilities;
  r.hard_profile = scores.hard;
  r.user_val_accuracy = n ? static_cast<double>(user_hits) / static_cast<double>(n) : 0.0;
  r.base_val_accuracy = n ? static_cast<double>(base_hits) / static_cast<double>(n) : 0.0;
  r.accepted = entry_condition(r.base_val_accuracy, r.user_val_accuracy);
  return r;
}

void inject_profile_error(OnboardingResult& result, int profile_count, std::uint64_t seed) {
  if (profile_count < 2) return;
  Rng rng(derive_seed(seed, fnv1a(result.user_id), 0x657272ULL));
  const int offset = 1 + static_cast<int>(rng.below(static_cast<std::size_t>(profile_count - 1)));
  const int wrong = (result.hard_profile + offset) % profile_count;
  result.hard_profile = wrong;
  std::fill(result.profile_scores.begin(), result.profile_scores.end(), 0.0);
  result.profile_scores[static_cast<std::size_t>(wrong)] = 1.0;
}

AssignmentMode parse_assignment_mode(std::string_view name) {
  if (name == "hard") return AssignmentMode::hard;
  if (name == "soft") return AssignmentMode::soft;
  fail(ErrorKind::configuration, "unknown assignment mode '" + std::string(name) + "'");
}

std::string_view to_string(AssignmentMode mode) { return mode == AssignmentMode::hard ? "hard" : "soft"; }

Eigen::MatrixXd soft_mixture(std::span<const double> profile_scores, std::span<const CoopNet> models,
                             const Eigen::MatrixXd& x, std::span<const int> user_labels) {
  if (profile_scores.size() != models.size()) fail(ErrorKind::shape, "one profile score per model expected");
  Eigen::MatrixXd mix;
  for (std::size_t k = 0; k < models.size(); ++k) {
    const Eigen::MatrixXd p = models[k].forward(x, user_labels);
    if (k == 0) mix = Eigen::MatrixXd::Zero(p.rows(), p.cols());
    mix += profile_scores[k] * p;
  }
  return mix;
}

std::vector<int> cooperative_inference(const OnboardingResult& user, AssignmentMode mode, std::span<const CoopNet> models,
                                       const Eigen::MatrixXd& x, std::span<const int> user_labels) {
  if (!user.accepted) fail(ErrorKind::policy, "user " + user.user_id + " was rejected and operates alone");
  if (models.empty()) fail(ErrorKind::precondition, "no cooperative models");
  if (mode == AssignmentMode::hard) {
    if (user.hard_profile < 0 || static_cast<std::size_t>(user.hard_profile) >= models.size()) {
      fail(ErrorKind::lookup, "no model for profile " + std::to_string(user.hard_profile));
    }
    return models[static_cast<std::size_t>(user.hard_profile)].scalar_predictions(x, user_labels);
  }
  const Eigen::MatrixXd mix = soft_mixture(user.profile_scores, models, x, user_labels);
  std::vector<int> out(static_cast<std::size_t>(mix.cols()));
  for (Eigen::Index i = 0; i < mix.cols(); ++i) out[static_cast<std::size_t>(i)] = argmax(mix.col(i));
  return out;
}

nlohmann::json OnboardingResult::to_json() const {
  return {{"schema", "coopclass-onboarding-v1"},
          {"user_id", user_id},
          {"profile_scores", profile_scores},
          {"hard_profile", hard_profile},
          {"user_val_accuracy", user_val_accuracy},
          {"base_val_accuracy", base_val_accuracy},
          {"accepted", accepted}};
}

OnboardingResult OnboardingResult::from_json(const nlohmann::json& j) {
  OnboardingResult r;
  r.user_id = j.at("user_id").get<std::string>();
  r.profile_scores = j.at("profile_scores").get<std::vector<double>>();
  r.hard_profile = j.at("hard_profile").get<int>();
  r.user_val_accuracy = j.at("user_val_accuracy").get<double>();
  r.base_val_accuracy = j.at("base_val_accuracy").get<double>();
  r.accepted = j.at("accepted").get<bool>();
  return r;
}

}  // namespace coopclass
