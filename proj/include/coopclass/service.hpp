#pragma once

// Session-oriented onboarding and cooperative classification. CoopService
// holds the logic and speaks JSON; HttpServer maps it onto REST routes.

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "coopclass/coop_net.hpp"
#include "coopclass/error.hpp"
#include "coopclass/dataset.hpp"
#include "coopclass/metrics.hpp"
#include "coopclass/onboarding.hpp"

namespace coopclass {

inline constexpr std::string_view kApiSchema = "coopclass-api-v1";

struct ServiceArtifacts {
  int class_count = 0;
  ValidationSet validation;
  std::vector<LabeledSample> test_items;  // clean labels optional
  OvaSvm svm;
  std::vector<CoopNet> models;
  Encoding encoding = Encoding::one_hot;
  AssignmentMode assignment = AssignmentMode::hard;
  /// Running stats need clean test labels; without them the service is blind.
  bool evaluation_mode = true;
};

/// Loads what a finished pipeline run leaves behind.
ServiceArtifacts load_service_artifacts(const std::filesystem::path& run_dir);

enum class Phase { onboarding, profiled, cooperating, rejected, closed };
std::string_view to_string(Phase phase);
/// Forward-only phase order; `closed` is reachable from anywhere.
bool phase_transition_allowed(Phase from, Phase to);

struct CooperationStep {
  std::string sample_id;
  int user_label = 0;
  int prediction = 0;
  std::optional<int> clean_label;
};

class CoopService {
 public:
  /// Without artifacts every session call fails as unavailable.
  explicit CoopService(std::optional<ServiceArtifacts> artifacts, std::filesystem::path export_dir = {});

  nlohmann::json health() const;
  nlohmann::json create_session(const nlohmann::json& body);
  nlohmann::json get_session(std::string_view session_id) const;
  nlohmann::json validation_manifest(std::string_view session_id) const;
  nlohmann::json submit_validation_label(std::string_view session_id, std::string_view sample_id, const nlohmann::json& body);
  nlohmann::json finalize(std::string_view session_id);
  nlohmann::json test_manifest(std::string_view session_id) const;
  nlohmann::json cooperate(std::string_view session_id, const nlohmann::json& body);
  nlohmann::json report(std::string_view session_id) const;
  nlohmann::json close(std::string_view session_id);

  /// Cooperation transcript of a session (for offline recomputation).
  std::vector<CooperationStep> transcript(std::string_view session_id) const;

 private:
  struct Session {
    std::string id;
    std::string user_id;
    Phase phase = Phase::onboarding;
    std::map<std::string, int, std::less<>> labels;
    std::vector<nlohmann::json> audit;
    std::optional<OnboardingResult> result;
    std::vector<CooperationStep> steps;
    mutable std::mutex mutex;
  };

  const ServiceArtifacts& artifacts() const;
  std::shared_ptr<Session> find(std::string_view session_id) const;
  void advance(Session& s, Phase to) const;
  nlohmann::json session_json(const Session& s) const;
  nlohmann::json stats_json(const Session& s) const;

  std::optional<ServiceArtifacts> artifacts_;
  std::map<std::string, std::size_t, std::less<>> test_index_;
  std::map<std::string, std::size_t, std::less<>> validation_index_;
  std::filesystem::path export_dir_;
  mutable std::mutex sessions_mutex_;
  std::map<std::string, std::shared_ptr<Session>, std::less<>> sessions_;
  std::uint64_t next_session_ = 1;
};

/// HTTP status used for an error kind.
int http_status(ErrorKind kind);

class HttpServer {
 public:
  explicit HttpServer(CoopService& service);
  ~HttpServer();
  HttpServer(const HttpServer&) = delete;
  HttpServer& operator=(const HttpServer&) = delete;

  /// Binds (port 0 picks a free port) and serves on a background thread.
  int start(const std::string& host, int port);
  /// Serves on the calling thread until stop().
  void listen(const std::string& host, int port);
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace coopclass
