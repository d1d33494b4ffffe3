#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

namespace coopclass {

// Alteration statistics of one user. Counts follow the usual sets:
// incorrect = user wrong, corrected = user wrong and model right,
// correct = user right, broken = user right and model wrong.
struct AlterationReport {
  std::string user_id;
  int profile = -1;
  bool accepted = true;
  std::size_t test_size = 0;
  std::size_t incorrect = 0;
  std::size_t corrected = 0;
  std::size_t correct = 0;
  std::size_t broken = 0;
  double a_plus = 0.0;
  double a_minus = 0.0;
  double original_accuracy = 0.0;
  double post_accuracy = 0.0;

  nlohmann::json to_json() const;
};

/// Throws an alignment error when the streams differ in length.
AlterationReport alteration_metrics(std::span<const int> clean, std::span<const int> user, std::span<const int> cooperative,
                                    std::string user_id = {});

/// (fraction user == clean, fraction cooperative == clean).
std::pair<double, double> accuracy_pair(std::span<const int> clean, std::span<const int> user,
                                        std::span<const int> cooperative);

enum class Outcome { improved, maintained, not_improved };
Outcome classify_outcome(const AlterationReport& report, double tau);
std::string_view to_string(Outcome outcome);

struct AggregateReport {
  std::size_t users = 0;
  std::size_t improved = 0;
  std::size_t maintained = 0;
  std::size_t not_improved = 0;
  double original_accuracy = 0.0;
  double post_accuracy = 0.0;
  double a_plus = 0.0;
  double a_minus = 0.0;
  double tau = 0.0;

  nlohmann::json to_json() const;
};

/// Unweighted means over users. An empty input gives an all-zero aggregate.
AggregateReport aggregate_users(std::span<const AlterationReport> reports, double tau = 0.0);

// Proportions of the eight (human, base, cooperation) correctness cells.
struct JointDecisionTable {
  std::array<std::size_t, 8> counts{};
  std::array<double, 8> proportions{};
  std::size_t total = 0;

  /// Cell order: human right before wrong, then base, then cooperation.
  static std::size_t cell(bool human_right, bool base_right, bool coop_right) {
    return (human_right ? 0U : 4U) + (base_right ? 0U : 2U) + (coop_right ? 0U : 1U);
  }
  double at(bool human_right, bool base_right, bool coop_right) const {
    return proportions[cell(human_right, base_right, coop_right)];
  }
  JointDecisionTable& operator+=(const JointDecisionTable& other);

  nlohmann::json to_json() const;
};

JointDecisionTable joint_decision_table(std::span<const int> clean, std::span<const int> user, std::span<const int> base,
                                        std::span<const int> cooperative);

void save_user_reports(std::span<const AlterationReport> reports, double tau, const std::filesystem::path& path);
void save_decision_table(const JointDecisionTable& table, const std::filesystem::path& path);

}  // namespace coopclass
