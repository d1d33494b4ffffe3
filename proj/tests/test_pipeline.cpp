#include <doctest.h>

#include <fstream>
#include <unistd.h>

#include "coopclass/pipeline.hpp"
#include "test_support.hpp"

using namespace coopclass;
using testing::read_text;
using testing::TempDir;
using testing::throws_kind;

namespace {

PipelineConfig tiny_config() {
  PipelineConfig c;
  c.seed = 3;
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
  c.consensus_hidden = 8;
  c.dims.base_hidden = 8;
  c.dims.encoder_hidden = 4;
  c.dims.decision_hidden1 = 8;
  c.dims.decision_hidden2 = 4;
  c.train.max_epochs = 15;
  c.train.patience = 5;
  c.svm.epochs = 20;
  return c;
}

const char* const kReports[] = {"reports/aggregate.json", "reports/evaluation.json", "reports/users.csv",
                                "reports/decisions.csv"};

}  // namespace

TEST_CASE("config json round trip and stable hash") {
  const auto c = tiny_config();
  const auto back = PipelineConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  CHECK(back.hash() == c.hash());
  auto other = c;
  other.train.lambda = 1.0;
  CHECK(other.hash() != c.hash());

  TempDir dir("cfg");
  save_config(c, dir / "c.json");
  CHECK(load_config(dir / "c.json").hash() == c.hash());
}

TEST_CASE("config rejects unknown keys and bad values") {
  auto j = tiny_config().to_json();
  j["profiles"]["Ll"] = 3;
  CHECK(throws_kind([&] { PipelineConfig::from_json(j); }, ErrorKind::configuration));
  j = tiny_config().to_json();
  j["surprise"] = true;
  CHECK(throws_kind([&] { PipelineConfig::from_json(j); }, ErrorKind::configuration));
  j = tiny_config().to_json();
  j["schema"] = "coopclass-config-v0";
  CHECK(throws_kind([&] { PipelineConfig::from_json(j); }, ErrorKind::configuration));

  auto c = tiny_config();
  c.train.patience = 100;
  CHECK(throws_kind([&] { c.validate(); }, ErrorKind::configuration));
  c = tiny_config();
  c.k_min = 1;
  CHECK(throws_kind([&] { c.validate(); }, ErrorKind::configuration));
  c = tiny_config();
  c.train.lambda = -0.1;
  CHECK(throws_kind([&] { c.validate(); }, ErrorKind::configuration));
}

TEST_CASE("defaults mirror the published hyperparameters") {
  const PipelineConfig c;
  CHECK(c.labels_per_class == 20);
  CHECK(c.validation_per_class == 20);
  CHECK(c.draws_per_sample == 5);
  CHECK(c.train.lambda == 0.1);
  CHECK(c.train.patience == 20);
  CHECK(c.train.max_epochs == 500);
}

TEST_CASE("stage names") {
  CHECK(parse_stage("augment") == Stage::augment);
  CHECK(to_string(Stage::onboard) == "onboard");
  CHECK(throws_kind([] { parse_stage("deploy"); }, ErrorKind::configuration));
}

TEST_CASE("full run, cached rerun and fresh rerun") {
  TempDir dir("pipe");
  const auto c = tiny_config();
  const auto first = run_pipeline(c, dir / "a");
  CHECK_FALSE(first.failed_stage);
  CHECK(first.stages_recomputed == kStageCount);
  for (const char* f : kReports) CHECK(std::filesystem::exists(dir / "a" / f));
  CHECK_FALSE(std::filesystem::exists(dir / "a" / ".coopclass.lock"));

  std::map<std::string, std::string> before;
  for (const char* f : kReports) before[f] = read_text(dir / "a" / f);
  const auto manifest_before = read_text(dir / "a" / "manifest.json");

  const auto again = run_pipeline(c, dir / "a");
  CHECK(again.stages_recomputed == 0);
  for (const char* f : kReports) CHECK(read_text(dir / "a" / f) == before[f]);

  run_pipeline(c, dir / "b");
  for (const char* f : kReports) CHECK(read_text(dir / "b" / f) == before[f]);
  CHECK(read_text(dir / "b" / "manifest.json").size() > 0);

  // emit_reports rewrites the same bytes
  emit_reports(again);
  for (const char* f : kReports) CHECK(read_text(dir / "a" / f) == before[f]);

  // every artifact listed in the manifest exists and owning loaders accept them
  const auto m = nlohmann::json::parse(read_text(dir / "a" / "manifest.json"));
  for (const auto& [stage, entry] : m.at("stages").items()) {
    for (const auto& a : entry.at("artifacts")) CHECK(std::filesystem::exists(dir / "a" / a.get<std::string>()));
  }
  const auto svm = load_svm(dir / "a" / "svm.json");
  const auto profiles = load_profiles(dir / "a" / "profiles.csv");
  CHECK(svm.profile_count == static_cast<int>(profiles.memberships.cols()));
  const auto cons = load_consensus(dir / "a" / "consensus.csv");
  CHECK(cons.class_count == 4);
  const auto agg = load_aggregate(dir / "a");
  CHECK(agg.at("test_users").get<int>() == 6);
  CHECK(agg.at("accepted").get<int>() + agg.at("rejected").get<int>() == 6);

  // a changed late-stage knob keeps the early stages
  auto late = c;
  late.tau = 0.01;
  const auto partial = run_pipeline(late, dir / "a");
  CHECK(partial.stages_recomputed == 1);
  CHECK(partial.stages.at("data").at("recomputed") == false);
}

TEST_CASE("stopping early leaves no inference artifacts") {
  TempDir dir("pipe");
  const auto m = run_pipeline(tiny_config(), dir.path(), Stage::profiles);
  CHECK(m.stages.contains("profiles"));
  CHECK_FALSE(m.stages.contains("onboard"));
  CHECK_FALSE(m.stages.contains("evaluate"));
  CHECK_FALSE(std::filesystem::exists(dir / "reports"));
  CHECK(throws_kind([&] { emit_reports(m); }, ErrorKind::dependency));
}

TEST_CASE("a live lock holder blocks a second run") {
  TempDir dir("pipe");
  std::filesystem::create_directories(dir.path());
  {
    std::ofstream lock(dir / ".coopclass.lock");
    lock << ::getpid() << '\n';
  }
  CHECK(throws_kind([&] { run_pipeline(tiny_config(), dir.path(), Stage::data); }, ErrorKind::conflict));

  // a lock left behind by a dead process is reclaimed
  {
    std::ofstream lock(dir / ".coopclass.lock");
    lock << 999999999 << '\n';
  }
  const auto m = run_pipeline(tiny_config(), dir.path(), Stage::data);
  CHECK(m.stages.contains("data"));
}

TEST_CASE("ablation knobs") {
  const auto c = tiny_config();
  CHECK(apply_ablation(c, "K", "1").fixed_k == 1);
  CHECK(apply_ablation(c, "lambda", "0").train.lambda == 0.0);
  CHECK(apply_ablation(c, "G", "0").draws_per_sample == 0);
  CHECK(apply_ablation(c, "components", "neither").components == AblationMode::neither);
  CHECK(apply_ablation(c, "assignment", "soft").assignment == AssignmentMode::soft);
  CHECK(apply_ablation(c, "svm_error", "true").svm_error);
  for (const auto& p : apply_ablation(c, "noise_rate", "0.8").simulation.profiles) CHECK(p.flip_rate == 0.8);
  CHECK(default_ablation_values("G") == std::vector<std::string>{"0", "1", "3", "5"});
  CHECK(default_ablation_values("K") == std::vector<std::string>{"1", "2", "3", "6", "10"});
  CHECK(default_ablation_values("lambda") == std::vector<std::string>{"0", "0.01", "0.1", "1", "10"});
  CHECK(throws_kind([&] { apply_ablation(c, "depth", "3"); }, ErrorKind::configuration));
  CHECK(throws_kind([] { default_ablation_values("depth"); }, ErrorKind::configuration));
}

TEST_CASE("K=1 ablation runs the no-profile path") {
  TempDir dir("pipe");
  const std::vector<std::string> values{"1"};
  const auto points = run_ablation(tiny_config(), "K", dir.path(), values);
  REQUIRE(points.size() == 1);
  CHECK(load_aggregate(points[0].output_dir).at("K") == 1);
}
