#include "coopclass/service.hpp"

#include <set>
#include <thread>

#include <httplib.h>

#include "coopclass/consensus.hpp"
#include "coopclass/pipeline.hpp"
#include "text_io.hpp"

namespace coopclass {

namespace fs = std::filesystem;
using nlohmann::json;

ServiceArtifacts load_service_artifacts(const fs::path& run_dir) {
  try {
    const auto config = load_config(run_dir / "config.json");
    ServiceArtifacts a;
    auto holdout = load_dataset_dir(run_dir / "data/holdout");
    a.class_count = holdout.class_count();
    a.encoding = config.encoding;
    a.assignment = config.assignment;

    auto in = detail::open_in(run_dir / "onboarding/results.json");
    const auto results = json::parse(in);
    const auto ids = results.at("validation_ids").get<std::vector<std::string>>();
    const std::set<std::string> val_ids(ids.begin(), ids.end());
    a.validation.per_class = config.validation_per_class;
    a.validation.class_count = a.class_count;
    for (const auto& id : ids) a.validation.items.push_back(holdout.sample(id));
    for (const auto& s : holdout.samples()) {
      if (!val_ids.contains(s.sample_id)) a.test_items.push_back(s);
    }
    a.evaluation_mode = true;
    for (const auto& s : a.test_items) a.evaluation_mode = a.evaluation_mode && s.clean_label.has_value();

    a.svm = load_svm(run_dir / "svm.json");
    for (int k = 0; k < a.svm.profile_count; ++k) {
      a.models.push_back(load_coop_net(run_dir / ("models/profile_" + std::to_string(k) + ".json")));
    }
    return a;
  } catch (const Error& e) {
    fail(ErrorKind::unavailable, "trained artifacts unavailable in " + run_dir.string() + ": " + e.what());
  } catch (const json::exception& e) {
    fail(ErrorKind::unavailable, "trained artifacts unreadable in " + run_dir.string() + ": " + e.what());
  }
}

std::string_view to_string(Phase phase) {
  switch (phase) {
    case Phase::onboarding: return "onboarding";
    case Phase::profiled: return "profiled";
    case Phase::cooperating: return "cooperating";
    case Phase::rejected: return "rejected";
    case Phase::closed: return "closed";
  }
  return "?";
}

bool phase_transition_allowed(Phase from, Phase to) {
  if (from == Phase::closed) return false;
  if (to == Phase::closed) return true;
  switch (from) {
    case Phase::onboarding: return to == Phase::profiled;
    case Phase::profiled: return to == Phase::cooperating || to == Phase::rejected;
    default: return false;
  }
}

int http_status(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::unavailable: return 503;
    case ErrorKind::lookup: return 404;
    case ErrorKind::conflict:
    case ErrorKind::incomplete: return 409;
    case ErrorKind::policy: return 403;
    case ErrorKind::validation:
    case ErrorKind::format:
    case ErrorKind::shape:
    case ErrorKind::configuration: return 400;
    default: return 500;
  }
}

// ---------------------------------------------------------------------------

CoopService::CoopService(std::optional<ServiceArtifacts> artifacts, fs::path export_dir)
    : artifacts_(std::move(artifacts)), export_dir_(std::move(export_dir)) {
  if (artifacts_) {
    for (std::size_t i = 0; i < artifacts_->test_items.size(); ++i) test_index_[artifacts_->test_items[i].sample_id] = i;
    for (std::size_t i = 0; i < artifacts_->validation.items.size(); ++i) {
      validation_index_[artifacts_->validation.items[i].sample_id] = i;
    }
  }
}

const ServiceArtifacts& CoopService::artifacts() const {
  if (!artifacts_) fail(ErrorKind::unavailable, "no trained models loaded");
  return *artifacts_;
}

std::shared_ptr<CoopService::Session> CoopService::find(std::string_view session_id) const {
  std::lock_guard lock(sessions_mutex_);
  const auto it = sessions_.find(session_id);
  if (it == sessions_.end()) fail(ErrorKind::lookup, "unknown session " + std::string(session_id));
  return it->second;
}

void CoopService::advance(Session& s, Phase to) const {
  if (!phase_transition_allowed(s.phase, to)) {
    fail(ErrorKind::conflict, "session " + s.id + " cannot move from " + std::string(to_string(s.phase)) + " to " +
                                  std::string(to_string(to)));
  }
  s.phase = to;
}

json CoopService::health() const {
  json j = {{"schema", kApiSchema}, {"status", artifacts_ ? "ok" : "unavailable"}};
  if (artifacts_) {
    j["profiles"] = artifacts_->models.size();
    j["classes"] = artifacts_->class_count;
    j["validation_items"] = artifacts_->validation.items.size();
    j["test_items"] = artifacts_->test_items.size();
    j["evaluation_mode"] = artifacts_->evaluation_mode;
  }
  std::lock_guard lock(sessions_mutex_);
  j["sessions"] = sessions_.size();
  return j;
}

json CoopService::create_session(const json& body) {
  const auto& a = artifacts();
  const auto user = body.is_object() ? body.value("user_id", std::string{}) : std::string{};
  if (user.empty()) fail(ErrorKind::validation, "user_id is required");
  auto s = std::make_shared<Session>();
  s->user_id = user;
  {
    std::lock_guard lock(sessions_mutex_);
    s->id = "s" + std::to_string(next_session_++);
    sessions_[s->id] = s;
  }
  json items = json::array();
  for (const auto& item : a.validation.items) items.push_back({{"sample_id", item.sample_id}, {"features", item.features}});
  return {{"schema", kApiSchema}, {"session_id", s->id}, {"user_id", user}, {"phase", "onboarding"},
          {"classes", a.class_count}, {"items", items}};
}

json CoopService::session_json(const Session& s) const {
  const auto total = artifacts().validation.items.size();
  json j = {{"schema", kApiSchema},
            {"session_id", s.id},
            {"user_id", s.user_id},
            {"phase", to_string(s.phase)},
            {"submitted", s.labels.size()},
            {"remaining", total - s.labels.size()},
            {"steps", s.steps.size()}};
  if (s.result) j["result"] = s.result->to_json();
  return j;
}

json CoopService::get_session(std::string_view session_id) const {
  auto s = find(session_id);
  std::lock_guard lock(s->mutex);
  return session_json(*s);
}

json CoopService::validation_manifest(std::string_view session_id) const {
  auto s = find(session_id);
  std::lock_guard lock(s->mutex);
  json items = json::array();
  for (const auto& item : artifacts().validation.items) {
    json entry = {{"sample_id", item.sample_id}, {"features", item.features}};
    if (const auto it = s->labels.find(item.sample_id); it != s->labels.end()) entry["label"] = it->second;
    items.push_back(entry);
  }
  return {{"schema", kApiSchema}, {"session_id", s->id}, {"classes", artifacts().class_count}, {"items", items}};
}

json CoopService::submit_validation_label(std::string_view session_id, std::string_view sample_id, const json& body) {
  const auto& a = artifacts();
  auto s = find(session_id);
  std::lock_guard lock(s->mutex);
  if (s->phase != Phase::onboarding) {
    fail(ErrorKind::conflict, "session " + s->id + " is " + std::string(to_string(s->phase)) + ", not onboarding");
  }
  if (!validation_index_.contains(sample_id)) fail(ErrorKind::lookup, "item " + std::string(sample_id) + " is not in the validation set");
  if (!body.is_object() || !body.contains("label") || !body.at("label").is_number_integer()) {
    fail(ErrorKind::validation, "integer label is required");
  }
  const int label = body.at("label").get<int>();
  if (label < 0 || label >= a.class_count) fail(ErrorKind::validation, "label " + std::to_string(label) + " out of range");
  const auto it = s->labels.find(sample_id);
  const bool overwrite = it != s->labels.end();
  if (overwrite) {
    s->audit.push_back({{"sample_id", sample_id}, {"previous", it->second}, {"label", label}});
    it->second = label;
  } else {
    s->labels.emplace(std::string(sample_id), label);
  }
  return {{"schema", kApiSchema},
          {"session_id", s->id},
          {"sample_id", sample_id},
          {"label", label},
          {"overwritten", overwrite},
          {"remaining", a.validation.items.size() - s->labels.size()}};
}

json CoopService::finalize(std::string_view session_id) {
  const auto& a = artifacts();
  auto s = find(session_id);
  std::lock_guard lock(s->mutex);
  if (s->phase != Phase::onboarding) fail(ErrorKind::conflict, "session " + s->id + " was already finalized");
  LabelVector vec;
  try {
    vec = build_onboarding_vector(a.validation, s->labels, a.encoding, s->user_id);
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::incomplete) fail(ErrorKind::conflict, e.what());
    throw;
  }
  const auto embedded = vec.embed();
  const auto scores = profile_user(a.svm, embedded);
  std::vector<int> user_labels;
  for (const auto& item : a.validation.items) user_labels.push_back(s->labels.find(item.sample_id)->second);
  const auto base = a.models.at(static_cast<std::size_t>(scores.hard)).base_predictions(feature_matrix(a.validation.items));
  auto result = evaluate_entry(scores, user_labels, base, a.validation, s->user_id);
  advance(*s, Phase::profiled);
  s->result = result;
  advance(*s, result.accepted ? Phase::cooperating : Phase::rejected);
  json j = result.to_json();
  j["schema"] = kApiSchema;
  j["session_id"] = s->id;
  j["phase"] = to_string(s->phase);
  return j;
}

json CoopService::test_manifest(std::string_view session_id) const {
  const auto& a = artifacts();
  auto s = find(session_id);
  std::lock_guard lock(s->mutex);
  if (s->phase == Phase::onboarding || s->phase == Phase::profiled) {
    fail(ErrorKind::conflict, "session " + s->id + " has not finished onboarding");
  }
  json items = json::array();
  for (const auto& item : a.test_items) items.push_back({{"sample_id", item.sample_id}, {"features", item.features}});
  return {{"schema", kApiSchema}, {"session_id", s->id}, {"classes", a.class_count}, {"items", items}};
}

json CoopService::stats_json(const Session& s) const {
  if (!artifacts().evaluation_mode) return nullptr;
  std::vector<int> clean;
  std::vector<int> user;
  std::vector<int> joint;
  for (const auto& step : s.steps) {
    clean.push_back(*step.clean_label);
    user.push_back(step.user_label);
    joint.push_back(step.prediction);
  }
  return alteration_metrics(clean, user, joint, s.user_id).to_json();
}

json CoopService::cooperate(std::string_view session_id, const json& body) {
  const auto& a = artifacts();
  auto s = find(session_id);
  std::lock_guard lock(s->mutex);
  if (s->phase == Phase::rejected) {
    fail(ErrorKind::policy, "user " + s->user_id + " was rejected by the entry condition and operates alone");
  }
  if (s->phase != Phase::cooperating) {
    fail(ErrorKind::conflict, "session " + s->id + " is " + std::string(to_string(s->phase)) + ", not cooperating");
  }
  if (!body.is_object() || !body.contains("sample_id") || !body.contains("user_label") ||
      !body.at("user_label").is_number_integer()) {
    fail(ErrorKind::validation, "sample_id and integer user_label are required");
  }
  const auto sample_id = body.at("sample_id").get<std::string>();
  const auto it = test_index_.find(sample_id);
  if (it == test_index_.end()) fail(ErrorKind::lookup, "item " + sample_id + " is not in the test set");
  const int user_label = body.at("user_label").get<int>();
  if (user_label < 0 || user_label >= a.class_count) fail(ErrorKind::validation, "label out of range");

  const auto& item = a.test_items[it->second];
  Eigen::MatrixXd x = Eigen::Map<const Eigen::VectorXd>(item.features.data(), static_cast<Eigen::Index>(item.features.size()));
  const int labels[1] = {user_label};
  const int prediction = cooperative_inference(*s->result, a.assignment, a.models, x, labels).front();
  s->steps.push_back({sample_id, user_label, prediction, item.clean_label});

  json j = {{"schema", kApiSchema},
            {"session_id", s->id},
            {"sample_id", sample_id},
            {"user_label", user_label},
            {"prediction", prediction},
            {"altered", prediction != user_label},
            {"step", s->steps.size()}};
  j["stats"] = stats_json(*s);
  return j;
}

json CoopService::report(std::string_view session_id) const {
  auto s = find(session_id);
  std::lock_guard lock(s->mutex);
  json j = session_json(*s);
  j["stats"] = stats_json(*s);
  j["audit"] = s->audit;
  json steps = json::array();
  for (const auto& st : s->steps) {
    steps.push_back({{"sample_id", st.sample_id}, {"user_label", st.user_label}, {"prediction", st.prediction}});
  }
  j["transcript"] = steps;
  return j;
}

json CoopService::close(std::string_view session_id) {
  auto s = find(session_id);
  {
    std::lock_guard lock(s->mutex);
    advance(*s, Phase::closed);
  }
  auto j = report(session_id);
  if (!export_dir_.empty()) {
    auto out = detail::open_out(export_dir_ / (s->id + ".json"));
    out << j.dump(2) << '\n';
  }
  return j;
}

std::vector<CooperationStep> CoopService::transcript(std::string_view session_id) const {
  auto s = find(session_id);
  std::lock_guard lock(s->mutex);
  return s->steps;
}

// ---------------------------------------------------------------------------
// HTTP transport

struct HttpServer::Impl {
  CoopService& service;
  httplib::Server server;
  std::thread thread;

  explicit Impl(CoopService& svc) : service(svc) { routes(); }

  template <typename F>
  static void respond(httplib::Response& res, F&& f) {
    try {
      res.status = 200;
      res.set_content(f().dump(), "application/json");
    } catch (const Error& e) {
      res.status = http_status(e.kind());
      res.set_content(json{{"schema", kApiSchema}, {"error", to_string(e.kind())}, {"message", e.what()}}.dump(),
                      "application/json");
    } catch (const std::exception& e) {
      res.status = 500;
      res.set_content(json{{"schema", kApiSchema}, {"error", "internal"}, {"message", e.what()}}.dump(), "application/json");
    }
  }

  static json body_of(const httplib::Request& req) {
    if (req.body.empty()) return json::object();
    try {
      return json::parse(req.body);
    } catch (const json::exception& e) {
      fail(ErrorKind::validation, std::string("request body is not JSON: ") + e.what());
    }
  }

  void routes() {
    server.Get("/health", [this](const httplib::Request&, httplib::Response& res) {
      respond(res, [&] { return service.health(); });
    });
    server.Post("/sessions", [this](const httplib::Request& req, httplib::Response& res) {
      respond(res, [&] { return service.create_session(body_of(req)); });
    });
    server.Get(R"(/sessions/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
      respond(res, [&] { return service.get_session(req.matches[1].str()); });
    });
    server.Get(R"(/sessions/([^/]+)/validation)", [this](const httplib::Request& req, httplib::Response& res) {
      respond(res, [&] { return service.validation_manifest(req.matches[1].str()); });
    });
    server.Put(R"(/sessions/([^/]+)/validation/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
      respond(res, [&] { return service.submit_validation_label(req.matches[1].str(), req.matches[2].str(), body_of(req)); });
    });
    server.Post(R"(/sessions/([^/]+)/finalize)", [this](const httplib::Request& req, httplib::Response& res) {
      respond(res, [&] { return service.finalize(req.matches[1].str()); });
    });
    server.Get(R"(/sessions/([^/]+)/test)", [this](const httplib::Request& req, httplib::Response& res) {
      respond(res, [&] { return service.test_manifest(req.matches[1].str()); });
    });
    server.Post(R"(/sessions/([^/]+)/cooperate)", [this](const httplib::Request& req, httplib::Response& res) {
      respond(res, [&] { return service.cooperate(req.matches[1].str(), body_of(req)); });
    });
    server.Get(R"(/sessions/([^/]+)/report)", [this](const httplib::Request& req, httplib::Response& res) {
      respond(res, [&] { return service.report(req.matches[1].str()); });
    });
    server.Post(R"(/sessions/([^/]+)/close)", [this](const httplib::Request& req, httplib::Response& res) {
      respond(res, [&] { return service.close(req.matches[1].str()); });
    });
  }
};

HttpServer::HttpServer(CoopService& service) : impl_(std::make_unique<Impl>(service)) {}

HttpServer::~HttpServer() { stop(); }

int HttpServer::start(const std::string& host, int port) {
  int bound = port;
  if (port == 0) {
    bound = impl_->server.bind_to_any_port(host);
  } else if (!impl_->server.bind_to_port(host, port)) {
    bound = -1;
  }
  if (bound < 0) fail(ErrorKind::io, "cannot bind " + host + ":" + std::to_string(port));
  impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
  return bound;
}

void HttpServer::listen(const std::string& host, int port) {
  if (!impl_->server.listen(host, port)) fail(ErrorKind::io, "cannot serve on " + host + ":" + std::to_string(port));
}

void HttpServer::stop() {
  if (!impl_) return;
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

}  // namespace coopclass
