#include "coopclass/pipeline.hpp"

#include <algorithm>
#include <cerrno>
#include <cstdio>
#include <set>

#include "coopclass/consensus.hpp"
#include "coopclass/error.hpp"
#include "coopclass/noise_model.hpp"
#include "coopclass/rng.hpp"
#include "text_io.hpp"

#include <signal.h>
#include <unistd.h>

namespace coopclass {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Config

namespace {

constexpr std::string_view kManifestSchema = "coopclass-manifest-v1";
constexpr std::string_view kReportSchema = "coopclass-report-v1";

template <typename T>
T get_or(const json& j, std::string_view key, T fallback) {
  const auto it = j.find(key);
  return it == j.end() || it->is_null() ? fallback : it->get<T>();
}

void reject_unknown(const json& j, std::initializer_list<std::string_view> allowed, std::string_view where) {
  if (!j.is_object()) fail(ErrorKind::configuration, std::string(where) + " must be an object");
  for (const auto& [key, _] : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      fail(ErrorKind::configuration, "unknown key '" + key + "' in " + std::string(where));
    }
  }
}

const json& section(const json& j, std::string_view key) {
  static const json empty = json::object();
  const auto it = j.find(key);
  return it == j.end() ? empty : *it;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

json PipelineConfig::to_json() const {
  json profiles_json = json::array();
  for (const auto& p : simulation.profiles) profiles_json.push_back(p.to_json());
  return {
      {"schema", kConfigSchema},
      {"seed", seed},
      {"data",
       {{"source", simulate ? "simulation" : "files"},
        {"simulation",
         {{"dataset", simulation.dataset.to_json()},
          {"holdout_per_class", simulation.holdout_per_class},
          {"profiles", profiles_json}}},
        {"files",
         {{"dataset_dir", files.dataset_dir.string()},
          {"holdout_dir", files.holdout_dir.string()},
          {"format", files.format == AnnotationFormat::triples ? "triples" : "dense"}}}}},
      {"consensus", {{"method", consensus_from_clean ? "clean" : "crowdlab"}, {"hidden", consensus_hidden}}},
      {"profiles",
       {{"L", labels_per_class},
        {"encoding", to_string(encoding)},
        {"k_range", {k_min, k_max}},
        {"fixed_k", fixed_k ? json(*fixed_k) : json(nullptr)}}},
      {"augment", {{"G", draws_per_sample}, {"laplace_alpha", laplace_alpha}}},
      {"train",
       {{"lambda", train.lambda},
        {"max_epochs", train.max_epochs},
        {"patience", train.patience},
        {"batch_size", train.batch_size},
        {"base_learning_rate", train.base_learning_rate},
        {"joint_learning_rate", train.joint_learning_rate},
        {"holdout_fraction", train.holdout_fraction},
        {"base_hidden", dims.base_hidden},
        {"encoder_hidden", dims.encoder_hidden},
        {"decision_hidden", {dims.decision_hidden1, dims.decision_hidden2}},
        {"components", to_string(components)}}},
      {"onboarding",
       {{"M", validation_per_class},
        {"svm_c", svm.c_param},
        {"svm_epochs", svm.epochs},
        {"assignment", to_string(assignment)},
        {"svm_error", svm_error}}},
      {"evaluation", {{"tau", tau}}},
  };
}

PipelineConfig PipelineConfig::from_json(const json& j) {
  reject_unknown(j, {"schema", "seed", "data", "consensus", "profiles", "augment", "train", "onboarding", "evaluation"},
                 "config");
  if (get_or<std::string>(j, "schema", "") != kConfigSchema) {
    fail(ErrorKind::configuration, "config schema must be \"" + std::string(kConfigSchema) + "\"");
  }
  PipelineConfig c;
  try {
    c.seed = get_or<std::uint64_t>(j, "seed", 0);

    const auto& data = section(j, "data");
    reject_unknown(data, {"source", "simulation", "files"}, "data");
    const auto source = get_or<std::string>(data, "source", "simulation");
    if (source != "simulation" && source != "files") fail(ErrorKind::configuration, "data.source must be simulation or files");
    c.simulate = source == "simulation";
    const auto& sim = section(data, "simulation");
    reject_unknown(sim, {"dataset", "holdout_per_class", "profiles"}, "data.simulation");
    if (sim.contains("dataset")) c.simulation.dataset = SyntheticDatasetSpec::from_json(sim.at("dataset"));
    c.simulation.holdout_per_class = get_or(sim, "holdout_per_class", c.simulation.holdout_per_class);
    if (sim.contains("profiles")) {
      c.simulation.profiles.clear();
      for (const auto& p : sim.at("profiles")) c.simulation.profiles.push_back(FlipProfileSpec::from_json(p));
    }
    const auto& files = section(data, "files");
    reject_unknown(files, {"dataset_dir", "holdout_dir", "format"}, "data.files");
    c.files.dataset_dir = get_or<std::string>(files, "dataset_dir", "");
    c.files.holdout_dir = get_or<std::string>(files, "holdout_dir", "");
    const auto format = get_or<std::string>(files, "format", "triples");
    if (format != "triples" && format != "dense") fail(ErrorKind::configuration, "data.files.format must be triples or dense");
    c.files.format = format == "triples" ? AnnotationFormat::triples : AnnotationFormat::dense;

    const auto& cons = section(j, "consensus");
    reject_unknown(cons, {"method", "hidden"}, "consensus");
    const auto method = get_or<std::string>(cons, "method", "crowdlab");
    if (method != "crowdlab" && method != "clean") fail(ErrorKind::configuration, "consensus.method must be crowdlab or clean");
    c.consensus_from_clean = method == "clean";
    c.consensus_hidden = get_or(cons, "hidden", c.consensus_hidden);

    const auto& prof = section(j, "profiles");
    reject_unknown(prof, {"L", "encoding", "k_range", "fixed_k"}, "profiles");
    c.labels_per_class = get_or(prof, "L", c.labels_per_class);
    c.encoding = parse_encoding(get_or<std::string>(prof, "encoding", "one_hot"));
    if (prof.contains("k_range")) {
      c.k_min = prof.at("k_range").at(0).get<int>();
      c.k_max = prof.at("k_range").at(1).get<int>();
    }
    if (prof.contains("fixed_k") && !prof.at("fixed_k").is_null()) c.fixed_k = prof.at("fixed_k").get<int>();

    const auto& aug = section(j, "augment");
    reject_unknown(aug, {"G", "laplace_alpha"}, "augment");
    c.draws_per_sample = get_or(aug, "G", c.draws_per_sample);
    c.laplace_alpha = get_or(aug, "laplace_alpha", c.laplace_alpha);

    const auto& tr = section(j, "train");
    reject_unknown(tr, {"lambda", "max_epochs", "patience", "batch_size", "base_learning_rate", "joint_learning_rate",
                        "holdout_fraction", "base_hidden", "encoder_hidden", "decision_hidden", "components"},
                   "train");
    c.train.lambda = get_or(tr, "lambda", c.train.lambda);
    c.train.max_epochs = get_or(tr, "max_epochs", c.train.max_epochs);
    c.train.patience = get_or(tr, "patience", c.train.patience);
    c.train.batch_size = get_or(tr, "batch_size", c.train.batch_size);
    c.train.base_learning_rate = get_or(tr, "base_learning_rate", c.train.base_learning_rate);
    c.train.joint_learning_rate = get_or(tr, "joint_learning_rate", c.train.joint_learning_rate);
    c.train.holdout_fraction = get_or(tr, "holdout_fraction", c.train.holdout_fraction);
    c.dims.base_hidden = get_or(tr, "base_hidden", c.dims.base_hidden);
    c.dims.encoder_hidden = get_or(tr, "encoder_hidden", c.dims.encoder_hidden);
    if (tr.contains("decision_hidden")) {
      c.dims.decision_hidden1 = tr.at("decision_hidden").at(0).get<std::size_t>();
      c.dims.decision_hidden2 = tr.at("decision_hidden").at(1).get<std::size_t>();
    }
    c.components = parse_ablation_mode(get_or<std::string>(tr, "components", "full"));

    const auto& onb = section(j, "onboarding");
    reject_unknown(onb, {"M", "svm_c", "svm_epochs", "assignment", "svm_error"}, "onboarding");
    c.validation_per_class = get_or(onb, "M", c.validation_per_class);
    c.svm.c_param = get_or(onb, "svm_c", c.svm.c_param);
    c.svm.epochs = get_or(onb, "svm_epochs", c.svm.epochs);
    c.assignment = parse_assignment_mode(get_or<std::string>(onb, "assignment", "hard"));
    c.svm_error = get_or(onb, "svm_error", c.svm_error);

    const auto& ev = section(j, "evaluation");
    reject_unknown(ev, {"tau"}, "evaluation");
    c.tau = get_or(ev, "tau", c.tau);
  } catch (const json::exception& e) {
    fail(ErrorKind::configuration, std::string("config: ") + e.what());
  }
  c.train.draws_per_sample = c.draws_per_sample;
  c.validate();
  return c;
}

void PipelineConfig::validate() const {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) fail(ErrorKind::configuration, what);
  };
  need(labels_per_class >= 1, "L must be at least 1");
  need(validation_per_class >= 1, "M must be at least 1");
  need(draws_per_sample >= 0, "G must be nonnegative");
  need(train.lambda >= 0.0, "lambda must be nonnegative");
  need(train.max_epochs >= 0, "max_epochs must be nonnegative");
  need(train.patience >= 1 && (train.max_epochs == 0 || train.patience <= train.max_epochs),
       "patience must lie in [1, max_epochs]");
  need(train.holdout_fraction >= 0.0 && train.holdout_fraction < 1.0, "holdout_fraction must lie in [0,1)");
  need(laplace_alpha >= 0.0, "laplace_alpha must be nonnegative");
  need(tau >= 0.0, "tau must be nonnegative");
  need(svm.c_param > 0.0 && svm.epochs >= 1, "SVM C and epochs must be positive");
  if (fixed_k) {
    need(*fixed_k >= 1, "fixed_k must be at least 1");
  } else {
    need(k_min >= 2 && k_min <= k_max, "k_range must satisfy 2 <= min <= max");
  }
  if (simulate) {
    need(!simulation.profiles.empty(), "simulation needs at least one profile");
    need(simulation.holdout_per_class >= validation_per_class + 1, "holdout_per_class must exceed M");
  } else {
    need(!files.dataset_dir.empty() && !files.holdout_dir.empty(), "files mode needs dataset_dir and holdout_dir");
  }
}

std::uint64_t PipelineConfig::hash() const { return fnv1a(to_json().dump()); }

PipelineConfig load_config(const fs::path& path) {
  auto in = detail::open_in(path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    fail(ErrorKind::configuration, path.string() + ": " + e.what());
  }
  return PipelineConfig::from_json(j);
}

void save_config(const PipelineConfig& config, const fs::path& path) {
  auto out = detail::open_out(path);
  out << config.to_json().dump(2) << '\n';
}

Stage parse_stage(std::string_view name) {
  for (int s = 0; s < kStageCount; ++s) {
    if (to_string(static_cast<Stage>(s)) == name) return static_cast<Stage>(s);
  }
  fail(ErrorKind::configuration, "unknown stage '" + std::string(name) + "'");
}

std::string_view to_string(Stage stage) {
  switch (stage) {
    case Stage::data: return "data";
    case Stage::consensus: return "consensus";
    case Stage::base: return "base";
    case Stage::profiles: return "profiles";
    case Stage::augment: return "augment";
    case Stage::train: return "train";
    case Stage::onboard: return "onboard";
    case Stage::evaluate: return "evaluate";
  }
  return "?";
}

json RunManifest::to_json() const {
  json j = {{"schema", kManifestSchema},
            {"version", "0.1.0"},
            {"config_hash", config_hash},
            {"stages", stages},
            {"stages_recomputed", stages_recomputed}};
  if (failed_stage) {
    j["failed_stage"] = *failed_stage;
    j["failure"] = failure;
  }
  return j;
}

RunManifest RunManifest::from_json(const json& j) {
  if (get_or<std::string>(j, "schema", "") != kManifestSchema) fail(ErrorKind::format, "not a coopclass manifest");
  RunManifest m;
  m.config_hash = j.at("config_hash").get<std::string>();
  m.stages = j.at("stages");
  m.stages_recomputed = get_or(j, "stages_recomputed", 0);
  if (j.contains("failed_stage")) {
    m.failed_stage = j.at("failed_stage").get<std::string>();
    m.failure = get_or<std::string>(j, "failure", "");
  }
  return m;
}

// ---------------------------------------------------------------------------
// Run state and stages

namespace {

// Held for the duration of a run; a second run on the same directory fails.
class DirectoryLock {
 public:
  explicit DirectoryLock(const fs::path& dir) : path_(dir / ".coopclass.lock") {
    fs::create_directories(dir);
    std::FILE* f = std::fopen(path_.c_str(), "wx");
    if (!f && owner_gone()) {
      std::error_code ec;
      fs::remove(path_, ec);
      f = std::fopen(path_.c_str(), "wx");
    }
    if (!f) {
      fail(ErrorKind::conflict, "output directory " + dir.string() + " is locked by another run (remove " +
                                    path_.string() + " if stale)");
    }
    std::fprintf(f, "%ld\n", static_cast<long>(::getpid()));
    std::fclose(f);
  }
  ~DirectoryLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  DirectoryLock(const DirectoryLock&) = delete;
  DirectoryLock& operator=(const DirectoryLock&) = delete;

 private:
  // a lock whose writer died (kill -9, crash) is reclaimable
  bool owner_gone() const {
    std::FILE* f = std::fopen(path_.c_str(), "r");
    if (!f) return false;
    long pid = 0;
    const bool ok = std::fscanf(f, "%ld", &pid) == 1;
    std::fclose(f);
    if (!ok || pid <= 0) return false;
    return ::kill(static_cast<pid_t>(pid), 0) != 0 && errno == ESRCH;
  }

  fs::path path_;
};

struct RunState {
  MultiRaterDataset train;
  std::vector<LabeledSample> holdout;
  std::map<std::string, int> truth;  // simulated users only
  std::vector<std::string> designated_train;
  std::vector<std::string> designated_test;

  ConsensusDataset consensus;
  SplitSpec split;
  Eigen::MatrixXd x_train;

  Mlp base;

  int k = 0;
  std::vector<std::string> profiled_users;
  std::vector<int> hard;
  Eigen::MatrixXd memberships;
  std::map<int, double> silhouette;

  std::vector<TransitionMatrix> matrices;
  std::vector<AugmentedDataset> augmented;
  std::vector<CoopNet> models;

  ValidationSet validation;
  std::vector<LabeledSample> test_items;
  OvaSvm svm;
  std::map<std::string, TransitionMatrix> user_matrices;
  std::vector<OnboardingResult> onboarding;
};

json base_artifact(const Mlp& base, const TrainHistory& h) {
  return {{"schema", "coopclass-base-v1"},
          {"mlp", base.to_json()},
          {"history",
           {{"epochs_run", h.epochs_run},
            {"best_epoch", h.best_epoch},
            {"initial_holdout_loss", h.initial_holdout_loss},
            {"best_holdout_loss", h.best_holdout_loss}}}};
}

void write_json(const fs::path& path, const json& j) {
  auto out = detail::open_out(path);
  out << j.dump(2) << '\n';
}

json read_json(const fs::path& path) {
  auto in = detail::open_in(path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    fail(ErrorKind::format, path.string() + ": " + e.what());
  }
}

std::string profile_file(std::string_view stem, int k, std::string_view ext) {
  return std::string(stem) + "_" + std::to_string(k) + std::string(ext);
}

// One stage: relevant config slice, artifacts it writes, compute and load.
class Runner {
 public:
  Runner(const PipelineConfig& config, fs::path root) : config_(config), cfg_(config.to_json()), root_(std::move(root)) {
    manifest_.config_hash = hex64(config.hash());
    manifest_.output_dir = root_;
    const auto path = root_ / "manifest.json";
    if (fs::exists(path)) {
      try {
        previous_ = RunManifest::from_json(read_json(path)).stages;
      } catch (const Error&) {
        warn("ignoring unreadable manifest in " + root_.string());
      }
    }
  }

  RunManifest run(Stage until) {
    save_config(config_, root_ / "config.json");
    for (int s = 0; s <= static_cast<int>(until); ++s) {
      const auto stage = static_cast<Stage>(s);
      try {
        step(stage);
      } catch (const Error& e) {
        manifest_.failed_stage = std::string(to_string(stage));
        manifest_.failure = e.what();
        flush();
        throw;
      }
      flush();
    }
    return manifest_;
  }

 private:
  json slice(Stage stage) const {
    switch (stage) {
      case Stage::data: return {{"seed", cfg_.at("seed")}, {"data", cfg_.at("data")}};
      case Stage::consensus: return {{"consensus", cfg_.at("consensus")}, {"L", cfg_.at("profiles").at("L")}};
      case Stage::base: return cfg_.at("train");
      case Stage::profiles: return cfg_.at("profiles");
      case Stage::augment: return cfg_.at("augment");
      case Stage::train: return cfg_.at("train");
      case Stage::onboard: return cfg_.at("onboarding");
      case Stage::evaluate: return cfg_.at("evaluation");
    }
    return {};
  }

  void step(Stage stage) {
    const std::string name(to_string(stage));
    chain_ = hex64(fnv1a(chain_ + slice(stage).dump()));
    bool cached = false;
    if (previous_.contains(name) && previous_.at(name).value("hash", "") == chain_) {
      cached = true;
      for (const auto& a : previous_.at(name).at("artifacts")) {
        if (!fs::exists(root_ / a.get<std::string>())) cached = false;
      }
    }
    artifacts_.clear();
    if (cached) {
      try {
        load(stage, previous_.at(name).at("artifacts"));
      } catch (const Error& e) {
        warn("cached " + name + " stage unreadable, recomputing: " + e.what());
        cached = false;
      }
    }
    if (!cached) {
      artifacts_.clear();
      compute(stage);
      ++manifest_.stages_recomputed;
    } else {
      for (const auto& a : previous_.at(name).at("artifacts")) artifacts_.push_back(a.get<std::string>());
    }
    manifest_.stages[name] = {{"hash", chain_}, {"artifacts", artifacts_}, {"recomputed", !cached}};
  }

  void flush() { write_json(root_ / "manifest.json", manifest_.to_json()); }

  fs::path out(const std::string& rel) {
    artifacts_.push_back(rel);
    return root_ / rel;
  }
  fs::path in(const std::string& rel) const { return root_ / rel; }

  std::uint64_t seed(std::uint64_t stream, std::uint64_t index = 0) const {
    return derive_seed(config_.seed, stream, index);
  }

  void compute(Stage stage) {
    switch (stage) {
      case Stage::data: return compute_data();
      case Stage::consensus: return compute_consensus();
      case Stage::base: return compute_base();
      case Stage::profiles: return compute_profiles();
      case Stage::augment: return compute_augment();
      case Stage::train: return compute_train();
      case Stage::onboard: return compute_onboard();
      case Stage::evaluate: return compute_evaluate();
    }
  }

  void load(Stage stage, const json& artifacts) {
    switch (stage) {
      case Stage::data: return load_data();
      case Stage::consensus: return load_consensus_stage();
      case Stage::base: return load_base();
      case Stage::profiles: return load_profiles_stage();
      case Stage::augment: return load_augment(artifacts);
      case Stage::train: return load_train();
      case Stage::onboard: return load_onboard();
      case Stage::evaluate: return;  // reports are already on disk
    }
  }

  // -- data ---------------------------------------------------------------

  void compute_data() {
    if (config_.simulate) {
      const auto& sim = config_.simulation;
      auto spec = sim.dataset;
      spec.seed = seed(0x10, sim.dataset.seed);
      spec.id_prefix = "t";
      s_.train = generate_synthetic_dataset(spec);
      auto hold = sim.dataset;
      hold.seed = seed(0x11, sim.dataset.seed);
      hold.per_class = sim.holdout_per_class;
      hold.id_prefix = "h";
      s_.holdout = generate_synthetic_dataset(hold).samples();
      // Train and test users label the same pool; their ids keep them apart.
      const auto annot_seed = seed(0x12);
      auto train_truth = simulate_annotators(s_.train, sim.profiles, annot_seed, "tr");
      auto test_truth = simulate_annotators(s_.train, sim.profiles, annot_seed, "te");
      for (const auto& [id, p] : train_truth) {
        s_.truth[id] = p;
        s_.designated_train.push_back(id);
      }
      for (const auto& [id, p] : test_truth) {
        s_.truth[id] = p;
        s_.designated_test.push_back(id);
      }
    } else {
      const auto& f = config_.files;
      s_.train = load_dataset(f.dataset_dir / "annotations.csv", f.format);
      load_features(s_.train, f.dataset_dir / "features.csv");
      if (fs::exists(f.dataset_dir / "clean_labels.csv")) load_clean_labels(s_.train, f.dataset_dir / "clean_labels.csv");
      s_.train.validate();
      MultiRaterDataset hold(s_.train.class_count());
      load_features(hold, f.holdout_dir / "features.csv");
      load_clean_labels(hold, f.holdout_dir / "clean_labels.csv");
      s_.holdout = hold.samples();
    }
    save_dataset_dir(s_.train, root_ / "data/train");
    artifacts_.insert(artifacts_.end(), {"data/train/annotations.csv", "data/train/features.csv", "data/train/clean_labels.csv"});
    MultiRaterDataset hold(s_.train.class_count());
    for (auto sample : s_.holdout) hold.add_sample(std::move(sample));
    save_dataset_dir(hold, root_ / "data/holdout");
    artifacts_.insert(artifacts_.end(), {"data/holdout/annotations.csv", "data/holdout/features.csv", "data/holdout/clean_labels.csv"});
    write_json(out("data/users.json"), {{"designated_train", s_.designated_train},
                                        {"designated_test", s_.designated_test},
                                        {"simulated_profiles", s_.truth}});
  }

  void load_data() {
    s_.train = load_dataset_dir(in("data/train"));
    auto hold = load_dataset_dir(in("data/holdout"));
    s_.holdout = hold.samples();
    const auto users = read_json(in("data/users.json"));
    s_.designated_train = users.at("designated_train").get<std::vector<std::string>>();
    s_.designated_test = users.at("designated_test").get<std::vector<std::string>>();
    s_.truth = users.at("simulated_profiles").get<std::map<std::string, int>>();
  }

  // -- consensus ----------------------------------------------------------

  void compute_consensus() {
    if (config_.consensus_from_clean) {
      s_.consensus = bypass_with_clean_labels(s_.train);
    } else {
      ConsensusClassifierConfig cc;
      cc.hidden = config_.consensus_hidden;
      cc.train.max_epochs = config_.train.max_epochs;
      cc.train.patience = config_.train.patience;
      cc.train.batch_size = config_.train.batch_size;
      cc.train.learning_rate = config_.train.base_learning_rate;
      cc.train.holdout_fraction = config_.train.holdout_fraction;
      cc.train.seed = seed(0x20);
      s_.consensus = estimate_consensus(s_.train, cc);
    }
    const int L = config_.labels_per_class;
    if (!s_.designated_train.empty()) {
      // Simulated populations come with their roles; only the L filter applies.
      s_.split = {};
      s_.split.min_labels_per_class = L;
      for (const auto* group : {&s_.designated_train, &s_.designated_test}) {
        for (const auto& id : *group) {
          if (!s_.train.has_annotator(id) ||
              min_labels_over_classes(s_.train, s_.consensus, id) < static_cast<std::size_t>(L)) {
            s_.split.excluded.push_back(id);
            continue;
          }
          (group == &s_.designated_train ? s_.split.train_annotators : s_.split.test_annotators).push_back(id);
        }
      }
      if (s_.split.train_annotators.empty() || s_.split.test_annotators.empty()) {
        fail(ErrorKind::empty_split, "no simulated users survive the per-class minimum of " + std::to_string(L));
      }
    } else {
      s_.split = split_annotators(s_.train, s_.consensus, L, seed(0x21));
    }
    save_consensus(s_.consensus, out("consensus.csv"));
    write_json(out("split.json"), {{"train", s_.split.train_annotators},
                                   {"test", s_.split.test_annotators},
                                   {"excluded", s_.split.excluded},
                                   {"L", s_.split.min_labels_per_class}});
    s_.x_train = feature_matrix(s_.train);
  }

  void load_consensus_stage() {
    s_.consensus = align_consensus(s_.train, load_consensus(in("consensus.csv")));
    const auto j = read_json(in("split.json"));
    s_.split.train_annotators = j.at("train").get<std::vector<std::string>>();
    s_.split.test_annotators = j.at("test").get<std::vector<std::string>>();
    s_.split.excluded = j.at("excluded").get<std::vector<std::string>>();
    s_.split.min_labels_per_class = j.at("L").get<int>();
    s_.x_train = feature_matrix(s_.train);
  }

  // -- base ---------------------------------------------------------------

  CoopNetDims dims() const {
    auto d = config_.dims;
    d.features = s_.train.feature_dim();
    d.classes = static_cast<std::size_t>(s_.train.class_count());
    return d;
  }

  TrainConfig train_config(std::uint64_t stream) const {
    auto t = config_.train;
    t.seed = seed(stream);
    return t;
  }

  void compute_base() {
    const auto d = dims();
    Rng rng(seed(0x30));
    const std::array<std::size_t, 3> layer_dims{d.features, d.base_hidden, d.classes};
    s_.base = Mlp(layer_dims, rng);
    const auto history = pretrain_base(s_.base, s_.x_train, s_.consensus.labels, train_config(0x31));
    write_json(out("models/base.json"), base_artifact(s_.base, history));
  }

  void load_base() { s_.base = Mlp::from_json(read_json(in("models/base.json")).at("mlp")); }

  // -- profiles -----------------------------------------------------------

  void compute_profiles() {
    const auto& users = s_.split.train_annotators;
    std::vector<LabelVector> vectors;
    for (const auto& id : users) {
      vectors.push_back(build_label_vector(s_.train, s_.consensus, id, config_.labels_per_class, seed(0x40, fnv1a(id)),
                                           config_.encoding));
    }
    const Eigen::MatrixXd points = stack_embeddings(vectors);
    const auto n = static_cast<int>(users.size());
    FuzzyConfig fc;
    fc.seed = seed(0x41);
    ProfileAssignment assignment;
    KSelection selection;
    if (config_.fixed_k) {
      if (*config_.fixed_k > n) {
        fail(ErrorKind::configuration, "fixed K " + std::to_string(*config_.fixed_k) + " exceeds the " +
                                           std::to_string(n) + " training users");
      }
      assignment = fuzzy_kmeans(points, *config_.fixed_k, fc);
    } else {
      const int hi = std::min(config_.k_max, n - 1);
      if (config_.k_min > hi) {
        fail(ErrorKind::configuration, "K range is empty for " + std::to_string(n) + " training users");
      }
      std::vector<int> range;
      for (int k = config_.k_min; k <= hi; ++k) range.push_back(k);
      selection = select_k(points, range, fc);
      assignment = selection.assignments.at(selection.best_k);
      for (const auto& [k, report] : selection.reports) s_.silhouette[k] = report.score;
    }
    compact(assignment);
    s_.k = assignment.k;
    s_.profiled_users = users;
    s_.hard = assignment.hard;
    s_.memberships = assignment.memberships;
    save_profiles(assignment, users, out("profiles.csv"));
    if (!config_.fixed_k) save_silhouette_sweep(selection, out("silhouette.csv"));
    json sil = json::object();
    for (const auto& [k, v] : s_.silhouette) sil[std::to_string(k)] = v;
    write_json(out("profiles.json"), {{"K", s_.k},
                                      {"selected_by", config_.fixed_k ? "fixed" : "silhouette"},
                                      {"silhouette", sil},
                                      {"iterations", assignment.iterations},
                                      {"objective_history", assignment.objective_history}});
  }

  // Drops clusters that received no annotator so profile ids stay dense.
  static void compact(ProfileAssignment& a) {
    std::vector<int> remap(static_cast<std::size_t>(a.k), -1);
    int next = 0;
    for (int k = 0; k < a.k; ++k) {
      if (std::find(a.hard.begin(), a.hard.end(), k) != a.hard.end()) remap[static_cast<std::size_t>(k)] = next++;
    }
    if (next == a.k) return;
    warn("dropping " + std::to_string(a.k - next) + " empty profile(s)");
    Eigen::MatrixXd m(a.memberships.rows(), next);
    Eigen::MatrixXd c(next, a.centroids.cols());
    for (int k = 0; k < a.k; ++k) {
      const int r = remap[static_cast<std::size_t>(k)];
      if (r < 0) continue;
      m.col(r) = a.memberships.col(k);
      c.row(r) = a.centroids.row(k);
    }
    for (Eigen::Index i = 0; i < m.rows(); ++i) m.row(i) /= m.row(i).sum();
    for (auto& h : a.hard) h = remap[static_cast<std::size_t>(h)];
    a.memberships = m;
    a.centroids = c;
    a.k = next;
  }

  void load_profiles_stage() {
    const auto p = load_profiles(in("profiles.csv"));
    s_.profiled_users = p.annotator_ids;
    s_.hard = p.hard;
    s_.memberships = p.memberships;
    const auto j = read_json(in("profiles.json"));
    s_.k = j.at("K").get<int>();
    s_.silhouette.clear();
    for (const auto& [k, v] : j.at("silhouette").items()) s_.silhouette[std::stoi(k)] = v.get<double>();
  }

  // -- augment ------------------------------------------------------------

  std::vector<std::string> members(int k) const {
    std::vector<std::string> m;
    for (std::size_t i = 0; i < s_.profiled_users.size(); ++i) {
      if (s_.hard[i] == k) m.push_back(s_.profiled_users[i]);
    }
    return m;
  }

  void compute_augment() {
    s_.matrices.clear();
    s_.augmented.clear();
    for (int k = 0; k < s_.k; ++k) {
      const auto ids = members(k);
      auto t = estimate_group_matrix(s_.train, s_.consensus, ids, "profile-" + std::to_string(k), config_.laplace_alpha);
      AugmentedDataset aug;
      if (config_.draws_per_sample > 0) {
        aug = augment_labels(s_.consensus.sample_ids, s_.consensus.labels, t, config_.draws_per_sample,
                             seed(0x50, static_cast<std::uint64_t>(k)), k);
      } else {
        // No augmentation: the profile's own records, one label each.
        aug.draws_per_sample = 1;
        aug.profile = k;
        for (const auto& id : ids) {
          for (auto r : s_.train.records_of_annotator(id)) {
            const auto pos = s_.train.record_sample(r);
            aug.sample_ids.push_back(s_.consensus.sample_ids[pos]);
            aug.consensus.push_back(s_.consensus.labels[pos]);
            aug.noisy.push_back({s_.train.annotations()[r].label});
          }
        }
      }
      save_transition_matrix(t, out(profile_file("matrices/profile", k, ".csv")));
      artifacts_.push_back(profile_file("matrices/profile", k, ".json"));
      save_augmented(aug, out(profile_file("augment/profile", k, ".csv")));
      s_.matrices.push_back(std::move(t));
      s_.augmented.push_back(std::move(aug));
    }
  }

  void load_augment(const json&) {
    s_.matrices.clear();
    s_.augmented.clear();
    for (int k = 0; k < s_.k; ++k) {
      s_.matrices.push_back(load_transition_matrix(in(profile_file("matrices/profile", k, ".csv"))));
      s_.augmented.push_back(load_augmented(in(profile_file("augment/profile", k, ".csv"))));
    }
  }

  // -- train --------------------------------------------------------------

  void compute_train() {
    s_.models.clear();
    const auto d = dims();
    for (int k = 0; k < s_.k; ++k) {
      const auto& aug = s_.augmented[static_cast<std::size_t>(k)];
      ProfileTrainingData data;
      data.augmented = aug;
      data.x.resize(s_.x_train.rows(), static_cast<Eigen::Index>(aug.size()));
      for (std::size_t i = 0; i < aug.size(); ++i) {
        data.x.col(static_cast<Eigen::Index>(i)) = s_.x_train.col(static_cast<Eigen::Index>(s_.train.sample_index(aug.sample_ids[i])));
      }
      auto net = train_profile_model(k, data, s_.matrices[static_cast<std::size_t>(k)], s_.base, d, train_config(0x60),
                                     config_.components);
      save_coop_net(net, out(profile_file("models/profile", k, ".json")));
      s_.models.push_back(std::move(net));
    }
  }

  void load_train() {
    s_.models.clear();
    for (int k = 0; k < s_.k; ++k) s_.models.push_back(load_coop_net(in(profile_file("models/profile", k, ".json"))));
  }

  // -- onboard ------------------------------------------------------------

  void build_holdout_split() {
    s_.validation = build_validation_set(s_.holdout, config_.validation_per_class, s_.train.class_count(), seed(0x70));
    const auto ids = s_.validation.sample_ids();
    const std::set<std::string> taken(ids.begin(), ids.end());
    s_.test_items.clear();
    for (const auto& item : s_.holdout) {
      if (!taken.contains(item.sample_id)) s_.test_items.push_back(item);
    }
    if (s_.test_items.empty()) fail(ErrorKind::capacity, "no holdout samples left for testing");
  }

  std::vector<int> validation_labels(const std::string& user) const {
    return simulate_test_set(s_.validation.items, s_.user_matrices.at(user), seed(0x71, fnv1a(user)));
  }

  void compute_onboard() {
    build_holdout_split();
    const int M = config_.validation_per_class;

    // SVM training rows: each profiled user's own labels at onboarding size.
    std::vector<std::vector<double>> rows;
    std::vector<int> labels;
    for (std::size_t i = 0; i < s_.profiled_users.size(); ++i) {
      const auto& id = s_.profiled_users[i];
      try {
        rows.push_back(build_label_vector(s_.train, s_.consensus, id, M, seed(0x72, fnv1a(id)), config_.encoding).embed());
        labels.push_back(s_.hard[i]);
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::exclusion) throw;
        warn("SVM skips " + id + ": " + e.what());
      }
    }
    if (rows.empty()) fail(ErrorKind::empty_split, "no training user has M labels per class for the SVM");
    Eigen::MatrixXd x(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
      x.row(static_cast<Eigen::Index>(i)) = Eigen::Map<const Eigen::RowVectorXd>(rows[i].data(), x.cols());
    }
    auto svm_config = config_.svm;
    svm_config.seed = seed(0x73);
    s_.svm = train_ova_svm(x, labels, s_.k, svm_config);
    save_svm(s_.svm, out("svm.json"));

    const Eigen::MatrixXd x_val = feature_matrix(s_.validation.items);
    std::vector<std::vector<int>> base_val;
    for (const auto& m : s_.models) base_val.push_back(m.base_predictions(x_val));

    s_.onboarding.clear();
    s_.user_matrices.clear();
    json results = json::array();
    for (const auto& id : s_.split.test_annotators) {
      auto t = estimate_user_matrix(s_.train, s_.consensus, id, config_.laplace_alpha);
      save_transition_matrix(t, out("matrices/users/" + id + ".csv"));
      artifacts_.push_back("matrices/users/" + id + ".json");
      s_.user_matrices.emplace(id, std::move(t));

      const auto val_labels = validation_labels(id);
      std::map<std::string, ClassIndex, std::less<>> by_id;
      for (std::size_t i = 0; i < val_labels.size(); ++i) by_id[s_.validation.items[i].sample_id] = val_labels[i];
      const auto vec = build_onboarding_vector(s_.validation, by_id, config_.encoding, id);
      const auto embedded = vec.embed();
      const auto scores = profile_user(s_.svm, embedded);
      auto result = evaluate_entry(scores, val_labels, base_val[static_cast<std::size_t>(scores.hard)], s_.validation, id);
      if (config_.svm_error) {
        inject_profile_error(result, s_.k, seed(0x74));
        // The entry condition follows the (wrong) profile actually used.
        result = [&] {
          ProfileScores forced;
          forced.probabilities = result.profile_scores;
          forced.hard = result.hard_profile;
          return evaluate_entry(forced, val_labels, base_val[static_cast<std::size_t>(forced.hard)], s_.validation, id);
        }();
      }
      write_json(out("onboarding/" + id + ".json"), result.to_json());
      {
        auto tr = detail::open_out(out("onboarding/" + id + "_transcript.csv"));
        tr << kFileHeader << '\n' << "sample_id,clean_label,user_label\n";
        for (std::size_t i = 0; i < val_labels.size(); ++i) {
          tr << s_.validation.items[i].sample_id << ',' << *s_.validation.items[i].clean_label << ',' << val_labels[i] << '\n';
        }
      }
      results.push_back(result.to_json());
      s_.onboarding.push_back(std::move(result));
    }
    write_json(out("onboarding/results.json"), {{"validation_ids", s_.validation.sample_ids()}, {"results", results}});
  }

  void load_onboard() {
    build_holdout_split();
    s_.svm = load_svm(in("svm.json"));
    const auto j = read_json(in("onboarding/results.json"));
    if (j.at("validation_ids").get<std::vector<std::string>>() != s_.validation.sample_ids()) {
      fail(ErrorKind::format, "cached validation set does not match the configuration");
    }
    s_.onboarding.clear();
    s_.user_matrices.clear();
    for (const auto& r : j.at("results")) {
      auto result = OnboardingResult::from_json(r);
      s_.user_matrices.emplace(result.user_id, load_transition_matrix(in("matrices/users/" + result.user_id + ".csv")));
      s_.onboarding.push_back(std::move(result));
    }
  }

  // -- evaluate -----------------------------------------------------------

  // Cluster id -> most common simulated profile among its training members.
  std::map<int, int> profile_truth_map() const {
    std::map<int, std::map<int, int>> votes;
    for (std::size_t i = 0; i < s_.profiled_users.size(); ++i) {
      const auto it = s_.truth.find(s_.profiled_users[i]);
      if (it != s_.truth.end()) ++votes[s_.hard[i]][it->second];
    }
    std::map<int, int> out;
    for (const auto& [cluster, counts] : votes) {
      int best = -1;
      int best_n = -1;
      for (const auto& [p, n] : counts) {
        if (n > best_n) {
          best = p;
          best_n = n;
        }
      }
      out[cluster] = best;
    }
    return out;
  }

  void compute_evaluate() {
    const Eigen::MatrixXd x_test = feature_matrix(s_.test_items);
    std::vector<int> clean;
    for (const auto& s : s_.test_items) clean.push_back(*s.clean_label);
    std::vector<std::vector<int>> base_test;
    for (const auto& m : s_.models) base_test.push_back(m.base_predictions(x_test));

    json users = json::array();
    JointDecisionTable pooled;
    const auto truth_map = profile_truth_map();
    int profiled_right = 0;
    int profiled_known = 0;
    for (const auto& r : s_.onboarding) {
      const auto labels = simulate_test_set(s_.test_items, s_.user_matrices.at(r.user_id), seed(0x80, fnv1a(r.user_id)));
      std::vector<int> joint = labels;
      if (r.accepted) joint = cooperative_inference(r, config_.assignment, s_.models, x_test, labels);
      auto report = alteration_metrics(clean, labels, joint, r.user_id);
      report.profile = r.hard_profile;
      report.accepted = r.accepted;
      if (r.accepted) pooled += joint_decision_table(clean, labels, base_test[static_cast<std::size_t>(r.hard_profile)], joint);
      json u = report.to_json();
      if (const auto it = s_.truth.find(r.user_id); it != s_.truth.end()) {
        const auto mapped = truth_map.find(r.hard_profile);
        const bool right = mapped != truth_map.end() && mapped->second == it->second;
        u["simulated_profile"] = it->second;
        u["profile_correct"] = right;
        ++profiled_known;
        profiled_right += right ? 1 : 0;
      }
      users.push_back(u);
    }
    json sil = json::object();
    for (const auto& [k, v] : s_.silhouette) sil[std::to_string(k)] = v;
    json evaluation = {{"schema", kReportSchema},
                       {"K", s_.k},
                       {"silhouette", sil},
                       {"tau", config_.tau},
                       {"assignment", to_string(config_.assignment)},
                       {"users", users},
                       {"decisions", pooled.to_json()}};
    if (profiled_known > 0) evaluation["profiling"] = {{"correct", profiled_right}, {"total", profiled_known}};
    write_json(out("reports/evaluation.json"), evaluation);
    artifacts_.insert(artifacts_.end(), {"reports/users.csv", "reports/aggregate.json", "reports/decisions.csv"});
    emit_reports(manifest_);
  }

  const PipelineConfig& config_;
  json cfg_;
  fs::path root_;
  RunManifest manifest_;
  json previous_ = json::object();
  std::string chain_;
  std::vector<std::string> artifacts_;
  RunState s_;
};

AlterationReport report_from_json(const json& u) {
  AlterationReport r;
  r.user_id = u.at("user_id").get<std::string>();
  r.profile = u.at("profile").get<int>();
  r.accepted = u.at("accepted").get<bool>();
  r.test_size = u.at("test_size").get<std::size_t>();
  r.incorrect = u.at("incorrect").get<std::size_t>();
  r.corrected = u.at("corrected").get<std::size_t>();
  r.correct = u.at("correct").get<std::size_t>();
  r.broken = u.at("broken").get<std::size_t>();
  r.a_plus = u.at("a_plus").get<double>();
  r.a_minus = u.at("a_minus").get<double>();
  r.original_accuracy = u.at("original_accuracy").get<double>();
  r.post_accuracy = u.at("post_accuracy").get<double>();
  return r;
}

}  // namespace

RunManifest run_pipeline(const PipelineConfig& config, const fs::path& output_dir, Stage until) {
  config.validate();
  DirectoryLock lock(output_dir);
  Runner runner(config, output_dir);
  return runner.run(until);
}

void emit_reports(const RunManifest& manifest) {
  const auto root = manifest.output_dir;
  const auto eval_path = root / "reports/evaluation.json";
  if (!fs::exists(eval_path)) fail(ErrorKind::dependency, "no evaluation in " + root.string() + "; run the evaluate stage first");
  const auto ev = read_json(eval_path);
  const double tau = ev.at("tau").get<double>();

  std::vector<AlterationReport> all;
  std::vector<AlterationReport> accepted;
  for (const auto& u : ev.at("users")) {
    all.push_back(report_from_json(u));
    if (all.back().accepted) accepted.push_back(all.back());
  }
  save_user_reports(all, tau, root / "reports/users.csv");

  const auto agg = aggregate_users(accepted, tau);
  json aggregate = {{"schema", kReportSchema},
                    {"K", ev.at("K")},
                    {"silhouette", ev.at("silhouette")},
                    {"assignment", ev.at("assignment")},
                    {"test_users", all.size()},
                    {"accepted", accepted.size()},
                    {"rejected", all.size() - accepted.size()},
                    {"aggregate", agg.to_json()}};
  if (accepted.empty()) aggregate["no_accepted_users"] = true;
  if (ev.contains("profiling")) aggregate["profiling"] = ev.at("profiling");
  write_json(root / "reports/aggregate.json", aggregate);

  JointDecisionTable table;
  const auto& d = ev.at("decisions");
  table.total = d.at("total").get<std::size_t>();
  for (const auto& cell : d.at("cells")) {
    const auto k = JointDecisionTable::cell(cell.at("human").get<bool>(), cell.at("base").get<bool>(),
                                            cell.at("cooperation").get<bool>());
    table.counts[k] = cell.at("count").get<std::size_t>();
    table.proportions[k] = cell.at("proportion").get<double>();
  }
  save_decision_table(table, root / "reports/decisions.csv");
}

nlohmann::json load_aggregate(const fs::path& output_dir) { return read_json(output_dir / "reports/aggregate.json"); }

// ---------------------------------------------------------------------------
// Ablations

std::vector<std::string> default_ablation_values(std::string_view knob) {
  if (knob == "components") return {"full", "no_encoder", "no_decision", "neither"};
  if (knob == "G") return {"0", "1", "3", "5"};
  if (knob == "K") return {"1", "2", "3", "6", "10"};
  if (knob == "lambda") return {"0", "0.01", "0.1", "1", "10"};
  if (knob == "svm_error") return {"false", "true"};
  if (knob == "noise_rate") return {"0.4", "0.6", "0.8", "0.9"};
  if (knob == "assignment") return {"hard", "soft"};
  fail(ErrorKind::configuration, "unknown ablation knob '" + std::string(knob) + "'");
}

PipelineConfig apply_ablation(const PipelineConfig& base, std::string_view knob, std::string_view value) {
  default_ablation_values(knob);  // validates the knob
  PipelineConfig c = base;
  const std::string v(value);
  try {
    if (knob == "components") {
      c.components = parse_ablation_mode(v);
    } else if (knob == "G") {
      c.draws_per_sample = std::stoi(v);
      c.train.draws_per_sample = c.draws_per_sample;
    } else if (knob == "K") {
      c.fixed_k = std::stoi(v);
    } else if (knob == "lambda") {
      c.train.lambda = std::stod(v);
    } else if (knob == "svm_error") {
      if (v != "true" && v != "false") fail(ErrorKind::configuration, "svm_error takes true or false");
      c.svm_error = v == "true";
    } else if (knob == "noise_rate") {
      if (!c.simulate) fail(ErrorKind::configuration, "the noise-rate sweep needs a simulation config");
      const double rate = std::stod(v);
      c.simulation.profiles = sweep_noise_rates(c.simulation.profiles, std::span<const double>(&rate, 1)).front();
    } else if (knob == "assignment") {
      c.assignment = parse_assignment_mode(v);
    }
  } catch (const std::logic_error&) {
    fail(ErrorKind::configuration, "bad value '" + v + "' for ablation " + std::string(knob));
  }
  c.validate();
  return c;
}

std::vector<AblationPoint> run_ablation(const PipelineConfig& config, std::string_view knob, const fs::path& output_root,
                                        std::vector<std::string> values) {
  if (values.empty()) values = default_ablation_values(knob);
  std::vector<PipelineConfig> grid;
  for (const auto& v : values) grid.push_back(apply_ablation(config, knob, v));

  std::vector<AblationPoint> points;
  json rows = json::array();
  for (std::size_t i = 0; i < values.size(); ++i) {
    AblationPoint p;
    p.value = values[i];
    p.output_dir = output_root / (std::string(knob) + "-" + values[i]);
    run_pipeline(grid[i], p.output_dir);
    const auto agg = load_aggregate(p.output_dir);
    const auto& a = agg.at("aggregate");
    p.aggregate.users = a.at("users").get<std::size_t>();
    p.aggregate.improved = a.at("I").get<std::size_t>();
    p.aggregate.maintained = a.at("M").get<std::size_t>();
    p.aggregate.not_improved = a.at("NI").get<std::size_t>();
    p.aggregate.original_accuracy = a.at("original_accuracy").get<double>();
    p.aggregate.post_accuracy = a.at("post_accuracy").get<double>();
    p.aggregate.a_plus = a.at("a_plus").get<double>();
    p.aggregate.a_minus = a.at("a_minus").get<double>();
    p.aggregate.tau = a.at("tau").get<double>();
    rows.push_back({{"value", p.value}, {"K", agg.at("K")}, {"aggregate", a}});
    points.push_back(std::move(p));
  }
  write_json(output_root / (std::string(knob) + ".json"), {{"schema", kReportSchema}, {"knob", knob}, {"points", rows}});
  auto out = detail::open_out(output_root / (std::string(knob) + ".csv"));
  out << kFileHeader << '\n' << knob << ",users,I,M,NI,original_accuracy,post_accuracy,a_plus,a_minus\n";
  for (const auto& p : points) {
    const auto& a = p.aggregate;
    out << p.value << ',' << a.users << ',' << a.improved << ',' << a.maintained << ',' << a.not_improved << ','
        << detail::format_double(a.original_accuracy) << ',' << detail::format_double(a.post_accuracy) << ','
        << detail::format_double(a.a_plus) << ',' << detail::format_double(a.a_minus) << '\n';
  }
  return points;
}

}  // namespace coopclass
