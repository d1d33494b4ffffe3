#include <doctest.h>

#include "coopclass/pipeline.hpp"
#include "coopclass/service.hpp"
#include "test_support.hpp"

// after Eigen: resolv.h defines a _res macro
#include <httplib.h>

using namespace coopclass;
using nlohmann::json;
using testing::TempDir;
using testing::throws_kind;

namespace {

constexpr int kC = 3;

LabeledSample item(const std::string& id, int y) {
  std::vector<double> f(kC, 0.0);
  f[static_cast<std::size_t>(y)] = 1.0;
  return {id, f, y};
}

// base reads the one-hot feature straight through, so it is always right
CoopNet perfect_base_model(Rng& rng) {
  auto net = CoopNet::create({kC, kC, kC, 4, 8, 4}, rng);
  auto& ls = net.base.layers();
  ls[0].weight = Eigen::MatrixXd::Identity(kC, kC);
  ls[0].bias.setZero();
  ls[1].weight = Eigen::MatrixXd::Identity(kC, kC);
  ls[1].bias.setZero();
  return net;
}

ServiceArtifacts hand_artifacts() {
  ServiceArtifacts a;
  a.class_count = kC;
  a.validation.per_class = 2;
  a.validation.class_count = kC;
  for (int c = 0; c < kC; ++c) {
    for (int i = 0; i < 2; ++i) a.validation.items.push_back(item("v" + std::to_string(c) + std::to_string(i), c));
  }
  for (int i = 0; i < 12; ++i) a.test_items.push_back(item("t" + std::to_string(10 + i), i % kC));
  a.svm.profile_count = 2;
  a.svm.dim = 6 * kC;
  a.svm.weights = {Eigen::VectorXd::Zero(6 * kC), Eigen::VectorXd::Zero(6 * kC)};
  a.svm.biases = {0.0, 1.0};
  Rng rng(1);
  a.models = {perfect_base_model(rng), perfect_base_model(rng)};
  return a;
}

void label_all(CoopService& svc, const std::string& sid, const ServiceArtifacts& a, int wrong) {
  int n = 0;
  for (const auto& it : a.validation.items) {
    int y = *it.clean_label;
    if (n++ < wrong) y = (y + 1) % kC;
    svc.submit_validation_label(sid, it.sample_id, {{"label", y}});
  }
}

}  // namespace

TEST_CASE("phase machine only moves forward") {
  const Phase all[] = {Phase::onboarding, Phase::profiled, Phase::cooperating, Phase::rejected, Phase::closed};
  auto rank = [](Phase p) {
    switch (p) {
      case Phase::onboarding: return 0;
      case Phase::profiled: return 1;
      case Phase::cooperating:
      case Phase::rejected: return 2;
      case Phase::closed: return 3;
    }
    return -1;
  };
  for (auto from : all) {
    for (auto to : all) {
      const bool allowed = phase_transition_allowed(from, to);
      if (allowed) CHECK(rank(to) > rank(from));
      const bool expected = (from != Phase::closed && to == Phase::closed) ||
                            (from == Phase::onboarding && to == Phase::profiled) ||
                            (from == Phase::profiled && (to == Phase::cooperating || to == Phase::rejected));
      CHECK(allowed == expected);
    }
  }
}

TEST_CASE("status codes per error kind") {
  CHECK(http_status(ErrorKind::unavailable) == 503);
  CHECK(http_status(ErrorKind::lookup) == 404);
  CHECK(http_status(ErrorKind::conflict) == 409);
  CHECK(http_status(ErrorKind::policy) == 403);
  CHECK(http_status(ErrorKind::validation) == 400);
}

TEST_CASE("service without models is unavailable") {
  CoopService svc(std::nullopt);
  CHECK(svc.health().at("status") == "unavailable");
  CHECK(throws_kind([&] { svc.create_session({{"user_id", "a"}}); }, ErrorKind::unavailable));
  CHECK(throws_kind([] { load_service_artifacts("/nonexistent/run"); }, ErrorKind::unavailable));
}

TEST_CASE("onboarding session lifecycle") {
  const auto a = hand_artifacts();
  CoopService svc(a);
  const auto s1 = svc.create_session({{"user_id", "ann"}});
  const auto s2 = svc.create_session({{"user_id", "ann"}});
  CHECK(s1.at("session_id") != s2.at("session_id"));
  CHECK(s1.at("items").size() == 6);
  CHECK_FALSE(s1.at("items")[0].contains("label"));
  CHECK(throws_kind([&] { svc.create_session(json::object()); }, ErrorKind::validation));
  const std::string sid = s1.at("session_id");

  CHECK(throws_kind([&] { svc.submit_validation_label(sid, "nope", {{"label", 0}}); }, ErrorKind::lookup));
  CHECK(throws_kind([&] { svc.submit_validation_label(sid, "v00", {{"label", kC}}); }, ErrorKind::validation));
  CHECK(throws_kind([&] { svc.get_session("s999"); }, ErrorKind::lookup));

  // incomplete finalize is a conflict naming the missing item
  svc.submit_validation_label(sid, "v00", {{"label", 1}});
  try {
    svc.finalize(sid);
    FAIL("expected conflict");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::conflict);
    CHECK(std::string(e.what()).find("v01") != std::string::npos);
  }

  // resubmission overwrites and is audited
  const auto again = svc.submit_validation_label(sid, "v00", {{"label", 0}});
  CHECK(again.at("overwritten") == true);
  CHECK(svc.report(sid).at("audit").size() == 1);
  CHECK(svc.validation_manifest(sid).at("items")[0].at("label") == 0);

  label_all(svc, sid, a, 1);
  CHECK(svc.get_session(sid).at("remaining") == 0);
  CHECK(throws_kind([&] { svc.test_manifest(sid); }, ErrorKind::conflict));
  const auto r = svc.finalize(sid);
  CHECK(r.at("hard_profile") == 1);
  double total = 0;
  for (double p : r.at("profile_scores")) total += p;
  CHECK(std::abs(total - 1.0) < 1e-9);
  CHECK(r.at("accepted") == true);
  CHECK(r.at("phase") == "cooperating");
  CHECK(throws_kind([&] { svc.finalize(sid); }, ErrorKind::conflict));
  CHECK(throws_kind([&] { svc.submit_validation_label(sid, "v00", {{"label", 0}}); }, ErrorKind::conflict));
  CHECK(svc.test_manifest(sid).at("items").size() == 12);
}

TEST_CASE("perfect user against an equally good base is rejected") {
  const auto a = hand_artifacts();
  CoopService svc(a);
  const std::string sid = svc.create_session({{"user_id", "expert"}}).at("session_id");
  label_all(svc, sid, a, 0);
  const auto r = svc.finalize(sid);
  CHECK(r.at("accepted") == false);
  CHECK(r.at("phase") == "rejected");
  CHECK(throws_kind([&] { svc.cooperate(sid, {{"sample_id", "t10"}, {"user_label", 0}}); }, ErrorKind::policy));
  CHECK(svc.close(sid).at("phase") == "closed");
  CHECK(throws_kind([&] { svc.close(sid); }, ErrorKind::conflict));
}

TEST_CASE("cooperation report equals the offline metrics") {
  const auto a = hand_artifacts();
  TempDir dir("svc");
  CoopService svc(a, dir.path());
  const std::string sid = svc.create_session({{"user_id", "u"}}).at("session_id");
  label_all(svc, sid, a, 2);
  svc.finalize(sid);
  CHECK(throws_kind([&] { svc.cooperate(sid, {{"sample_id", "zz"}, {"user_label", 0}}); }, ErrorKind::lookup));
  CHECK(throws_kind([&] { svc.cooperate(sid, {{"sample_id", "t10"}}); }, ErrorKind::validation));

  json last;
  for (std::size_t i = 0; i < a.test_items.size(); ++i) {
    const auto& it = a.test_items[i];
    const int label = i % 3 == 0 ? (*it.clean_label + 1) % kC : *it.clean_label;
    last = svc.cooperate(sid, {{"sample_id", it.sample_id}, {"user_label", label}});
    CHECK(last.at("step") == 2 * i + 1);
    const auto again = svc.cooperate(sid, {{"sample_id", it.sample_id}, {"user_label", label}});
    CHECK(again.at("prediction") == last.at("prediction"));
  }
  const auto steps = svc.transcript(sid);
  std::vector<int> clean, user, joint;
  for (const auto& st : steps) {
    clean.push_back(*st.clean_label);
    user.push_back(st.user_label);
    joint.push_back(st.prediction);
  }
  const auto offline = alteration_metrics(clean, user, joint, "u").to_json();
  const auto closed = svc.close(sid);
  CHECK(closed.at("stats") == offline);
  CHECK(svc.report(sid).at("stats") == offline);
  CHECK(std::filesystem::exists(dir / (sid + ".json")));
  CHECK(closed.at("transcript").size() == steps.size());
}

TEST_CASE("blind mode serves predictions without stats") {
  auto a = hand_artifacts();
  for (auto& t : a.test_items) t.clean_label.reset();
  a.evaluation_mode = false;
  CoopService svc(a);
  const std::string sid = svc.create_session({{"user_id", "b"}}).at("session_id");
  label_all(svc, sid, a, 2);
  svc.finalize(sid);
  const auto r = svc.cooperate(sid, {{"sample_id", "t11"}, {"user_label", 1}});
  CHECK(r.at("stats").is_null());
  CHECK(r.contains("prediction"));
}

TEST_CASE("HTTP round trip against a pipeline run") {
  TempDir dir("svc");
  PipelineConfig c;
  c.seed = 5;
  c.simulation.dataset.classes = 4;
  c.simulation.dataset.dim = 4;
  c.simulation.dataset.per_class = 60;
  c.simulation.dataset.separation = 6.0;
  c.simulation.holdout_per_class = 30;
  c.simulation.profiles = {{0, 1, 0.6, 3, 1.0}, {2, 3, 0.6, 3, 1.0}};
  c.labels_per_class = 5;
  c.validation_per_class = 5;
  c.k_min = 2;
  c.k_max = 3;
  c.draws_per_sample = 2;
  c.train.max_epochs = 15;
  c.train.patience = 5;
  c.svm.epochs = 20;
  run_pipeline(c, dir / "run");

  CoopService svc(load_service_artifacts(dir / "run"));
  HttpServer server(svc);
  const int port = server.start("127.0.0.1", 0);
  REQUIRE(port > 0);
  httplib::Client cli("127.0.0.1", port);

  auto health = cli.Get("/health");
  REQUIRE(health);
  CHECK(health->status == 200);
  CHECK(json::parse(health->body).at("schema") == "coopclass-api-v1");

  auto created = cli.Post("/sessions", R"({"user_id":"web"})", "application/json");
  REQUIRE(created);
  CHECK(created->status == 200);
  const auto cj = json::parse(created->body);
  const std::string sid = cj.at("session_id");
  CHECK(cj.at("items").size() == 20);

  CHECK(cli.Get("/sessions/nope/validation")->status == 404);
  CHECK(cli.Post("/sessions/" + sid + "/cooperate", R"({"sample_id":"x","user_label":0})", "application/json")->status == 409);
  CHECK(cli.Post("/sessions", "not json", "application/json")->status == 400);

  // every validation item, with the truth label, except one swapped item
  const auto run_agg = load_aggregate(dir / "run");
  auto holdout = load_dataset_dir(dir / "run" / "data/holdout");
  int n = 0;
  for (const auto& it : cj.at("items")) {
    const std::string id = it.at("sample_id");
    int y = *holdout.sample(id).clean_label;
    if (n++ < 5) y = (y + 1) % 4;
    auto put = cli.Put("/sessions/" + sid + "/validation/" + id, json{{"label", y}}.dump(), "application/json");
    REQUIRE(put);
    CHECK(put->status == 200);
  }
  CHECK(json::parse(cli.Get("/sessions/" + sid)->body).at("remaining") == 0);
  auto fin = cli.Post("/sessions/" + sid + "/finalize", "", "application/json");
  REQUIRE(fin);
  CHECK(fin->status == 200);
  const auto fj = json::parse(fin->body);
  // a user at 0.75 validation accuracy should be accepted
  const std::string phase = fj.at("phase");
  CHECK(phase == "cooperating");

  auto test = json::parse(cli.Get("/sessions/" + sid + "/test")->body);
  const std::string first = test.at("items")[0].at("sample_id");
  auto step = cli.Post("/sessions/" + sid + "/cooperate", json{{"sample_id", first}, {"user_label", 0}}.dump(),
                       "application/json");
  REQUIRE(step);
  if (phase == "rejected") {
    CHECK(step->status == 403);
  } else {
    CHECK(step->status == 200);
    for (std::size_t i = 1; i < 20; ++i) {
      const std::string id = test.at("items")[i].at("sample_id");
      cli.Post("/sessions/" + sid + "/cooperate", json{{"sample_id", id}, {"user_label", *holdout.sample(id).clean_label}}.dump(),
               "application/json");
    }
    const auto rep = json::parse(cli.Get("/sessions/" + sid + "/report")->body);
    CHECK(rep.at("steps") == 20);
    CHECK(rep.at("stats") == svc.report(sid).at("stats"));
  }
  auto closed = cli.Post("/sessions/" + sid + "/close", "", "application/json");
  CHECK(closed->status == 200);
  server.stop();
}
