#include <doctest.h>

#include <cmath>
#include <map>

#include "coopclass/consensus.hpp"
#include "test_support.hpp"

using namespace coopclass;
using testing::throws_kind;

namespace {

MultiRaterDataset votes(int classes, const std::vector<std::vector<int>>& per_sample) {
  MultiRaterDataset ds(classes);
  for (std::size_t i = 0; i < per_sample.size(); ++i) {
    const std::string id = "s" + std::to_string(i);
    ds.add_sample({id, {}, std::nullopt});
    for (std::size_t j = 0; j < per_sample[i].size(); ++j) {
      ds.add_annotation({id, "a" + std::to_string(j), per_sample[i][j]});
    }
  }
  return ds;
}

// brute-force mode with lowest-index tie-break
int mode_oracle(const std::vector<int>& labels, int classes) {
  int best = -1, best_count = -1;
  for (int c = 0; c < classes; ++c) {
    int n = 0;
    for (int l : labels) n += l == c;
    if (n > best_count) best = c, best_count = n;
  }
  return best;
}

MultiRaterDataset blobs(int per_class, double gap, std::uint64_t seed) {
  MultiRaterDataset ds(2);
  Rng rng(seed);
  for (int i = 0; i < 2 * per_class; ++i) {
    const int c = i % 2;
    const std::string id = "b" + std::to_string(1000 + i);
    ds.add_sample({id, {(c ? gap : -gap) + rng.normal(), rng.normal()}, c});
    ds.add_annotation({id, "u", c});
  }
  return ds;
}

}  // namespace

TEST_CASE("majority vote examples") {
  const auto ds = votes(4, {{0, 0, 1}, {1, 2}, {3, 3, 3, 3}});
  CHECK(majority_vote(ds) == std::vector<int>{0, 1, 3});
}

TEST_CASE("majority vote equals the enumeration oracle") {
  Rng rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<std::vector<int>> rows;
    for (int i = 0; i < 8; ++i) {
      std::vector<int> r(1 + rng.below(5));
      for (auto& l : r) l = static_cast<int>(rng.below(4));
      rows.push_back(r);
    }
    const auto ds = votes(4, rows);
    const auto mv = majority_vote(ds);
    // sample ids s0..s7 sort the same as their index
    for (std::size_t i = 0; i < rows.size(); ++i) CHECK(mv[i] == mode_oracle(rows[i], 4));
  }
}

TEST_CASE("unlabeled samples are listed in a coverage error") {
  auto ds = votes(2, {{0}});
  ds.add_sample({"lonely", {}, std::nullopt});
  try {
    majority_vote(ds);
    FAIL("expected coverage error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::coverage);
    CHECK(std::string(e.what()).find("lonely") != std::string::npos);
  }
}

TEST_CASE("trust weights are agreement rates") {
  // annotator a0 agrees on 80 of 100, a1 never
  MultiRaterDataset ds(2);
  for (int i = 0; i < 100; ++i) {
    const std::string id = "s" + std::to_string(100 + i);
    ds.add_sample({id, {}, std::nullopt});
    ds.add_annotation({id, "a0", i < 80 ? 0 : 1});
    ds.add_annotation({id, "a1", 1});
    ds.add_annotation({id, "a2", 0});
    ds.add_annotation({id, "a3", 0});
  }
  const auto mv = majority_vote(ds);
  Eigen::MatrixXd probs = Eigen::MatrixXd::Zero(2, 100);
  for (int i = 0; i < 100; ++i) probs(mv[static_cast<std::size_t>(i)], i) = 1.0;
  const auto w = estimate_trust_weights(ds, mv, probs);
  CHECK(w.annotators.at("a0") == doctest::Approx(0.8));
  CHECK(w.annotators.at("a1") == 0.0);
  CHECK(w.model == 1.0);
}

TEST_CASE("ensemble hand arithmetic") {
  // w_model 0.5, model [0.9, 0.1], one annotator with w 1 says 1
  const auto ds = votes(2, {{1}});
  Eigen::MatrixXd probs(2, 1);
  probs << 0.9, 0.1;
  TrustWeights w;
  w.model = 0.5;
  w.annotators["a0"] = 1.0;
  const auto out = crowdlab_ensemble(ds, probs, w);
  CHECK(out.labels[0] == 1);
  CHECK(out.distributions[0][0] == doctest::Approx(0.45 / 1.5));
  CHECK(out.distributions[0][1] == doctest::Approx(1.05 / 1.5));
}

TEST_CASE("ensemble without annotators follows the model") {
  MultiRaterDataset ds(3);
  ds.add_sample({"x", {}, std::nullopt});
  Eigen::MatrixXd probs(3, 1);
  probs << 0.2, 0.1, 0.7;
  TrustWeights w;
  w.model = 0.4;
  CHECK(crowdlab_ensemble(ds, probs, w).labels[0] == 2);
}

TEST_CASE("ensemble falls back to majority vote when every weight is zero") {
  const auto ds = votes(3, {{2, 2, 1}});
  Eigen::MatrixXd probs = Eigen::MatrixXd::Constant(3, 1, 1.0 / 3);
  TrustWeights w;
  for (const auto& id : ds.annotators()) w.annotators[id] = 0.0;
  const auto out = crowdlab_ensemble(ds, probs, w);
  CHECK(out.labels[0] == 2);
  CHECK(out.distributions[0][2] == 1.0);
}

TEST_CASE("ensemble properties on random instances") {
  Rng rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<std::vector<int>> rows;
    for (int i = 0; i < 6; ++i) {
      std::vector<int> r(1 + rng.below(4));
      for (auto& l : r) l = static_cast<int>(rng.below(3));
      rows.push_back(r);
    }
    const auto ds = votes(3, rows);
    Eigen::MatrixXd probs(3, 6);
    for (int i = 0; i < 6; ++i) {
      double s = 0;
      for (int k = 0; k < 3; ++k) s += probs(k, i) = rng.uniform() + 1e-3;
      probs.col(i) /= s;
    }
    TrustWeights w;
    w.model = rng.uniform();
    for (const auto& id : ds.annotators()) w.annotators[id] = rng.uniform();
    const auto out = crowdlab_ensemble(ds, probs, w);
    for (std::size_t i = 0; i < out.size(); ++i) {
      double s = 0;
      for (double p : out.distributions[i]) s += p;
      CHECK(std::abs(s - 1.0) < 1e-9);
      CHECK(out.labels[i] == argmax(out.distributions[i]));
    }

    // w_model = 0 and equal annotator weights reproduce the vote on untied rows
    TrustWeights flat;
    for (const auto& id : ds.annotators()) flat.annotators[id] = 0.7;
    const auto plain = crowdlab_ensemble(ds, probs, flat);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      std::map<int, int> counts;
      for (int l : rows[i]) ++counts[l];
      int top = 0, ties = 0;
      for (const auto& [c, n] : counts) top = std::max(top, n);
      for (const auto& [c, n] : counts) ties += n == top;
      if (ties == 1) CHECK(plain.labels[i] == mode_oracle(rows[i], 3));
    }
  }
}

TEST_CASE("unanimity dominates when the model weight is not larger") {
  const auto ds = votes(3, {{1, 1, 1}});
  Eigen::MatrixXd probs(3, 1);
  probs << 1.0, 0.0, 0.0;
  TrustWeights w;
  w.model = 0.3;
  w.annotators = {{"a0", 0.3}, {"a1", 0.0}, {"a2", 0.9}};
  CHECK(crowdlab_ensemble(ds, probs, w).labels[0] == 1);
}

TEST_CASE("clean bypass") {
  MultiRaterDataset ds(3);
  ds.add_sample({"a", {}, 2});
  ds.add_sample({"b", {}, 0});
  const auto out = bypass_with_clean_labels(ds);
  CHECK(out.labels == std::vector<int>{2, 0});
  CHECK(out.distributions[0] == std::vector<double>{0, 0, 1});

  ds.add_sample({"c", {}, std::nullopt});
  CHECK(throws_kind([&] { bypass_with_clean_labels(ds); }, ErrorKind::precondition));
  CHECK(bypass_with_clean_labels(MultiRaterDataset(2)).size() == 0);
}

TEST_CASE("consensus classifier on separable blobs") {
  const auto ds = blobs(200, 3.0, 1);
  const auto labels = majority_vote(ds);
  ConsensusClassifierConfig cfg;
  cfg.hidden = 16;
  cfg.train.max_epochs = 60;
  cfg.train.seed = 2;
  const auto clf = train_consensus_classifier(ds, labels, cfg);
  CHECK(clf.final_loss < clf.initial_loss);
  const auto x = feature_matrix(ds);
  const Eigen::MatrixXd p = clf.probabilities(x);
  int hits = 0;
  for (int i = 0; i < p.cols(); ++i) {
    CHECK(std::abs(p.col(i).sum() - 1.0) < 1e-9);
    hits += argmax(p.col(i)) == labels[static_cast<std::size_t>(i)];
  }
  CHECK(hits / double(p.cols()) >= 0.95);
}

TEST_CASE("single-class data collapses onto that class") {
  MultiRaterDataset ds(2);
  Rng rng(3);
  for (int i = 0; i < 100; ++i) {
    const std::string id = "q" + std::to_string(100 + i);
    ds.add_sample({id, {rng.normal(), rng.normal()}, 1});
    ds.add_annotation({id, "u", 1});
  }
  ConsensusClassifierConfig cfg;
  cfg.hidden = 8;
  cfg.train.max_epochs = 500;
  cfg.train.patience = 500;
  cfg.train.learning_rate = 1e-2;
  const auto clf = train_consensus_classifier(ds, majority_vote(ds), cfg);
  const Eigen::MatrixXd p = clf.probabilities(feature_matrix(ds));
  CHECK(p.row(1).minCoeff() >= 0.99);
}

TEST_CASE("zero epochs leaves the initialization") {
  const auto ds = blobs(20, 3.0, 5);
  ConsensusClassifierConfig cfg;
  cfg.hidden = 8;
  cfg.train.max_epochs = 0;
  cfg.train.seed = 9;
  const auto a = train_consensus_classifier(ds, majority_vote(ds), cfg);
  Rng init(derive_seed(9, 0x63636c66ULL));
  const std::size_t dims[] = {2, 8, 2};
  CHECK(a.net == Mlp(dims, init));
  CHECK(a.epochs_run == 0);
}

TEST_CASE("consensus file round trip and alignment") {
  testing::TempDir dir("cons");
  ConsensusDataset c;
  c.class_count = 2;
  c.sample_ids = {"b", "a"};
  c.labels = {1, 0};
  c.distributions = {{0.25, 0.75}, {1.0 / 3, 2.0 / 3}};
  c.model_weight = 0.125;
  c.annotator_weights = {{"u", 0.5}};
  save_consensus(c, dir / "c.csv");
  const auto back = load_consensus(dir / "c.csv");
  CHECK(back.labels == c.labels);
  CHECK(back.distributions == c.distributions);
  CHECK(back.annotator_weights == c.annotator_weights);
  CHECK(back.model_weight == 0.125);

  MultiRaterDataset ds(2);
  ds.add_sample({"a", {}, std::nullopt});
  ds.add_sample({"b", {}, std::nullopt});
  const auto aligned = align_consensus(ds, back);
  CHECK(aligned.sample_ids == std::vector<std::string>{"a", "b"});
  CHECK(aligned.labels == std::vector<int>{0, 1});
  ds.add_sample({"c", {}, std::nullopt});
  CHECK(throws_kind([&] { align_consensus(ds, back); }, ErrorKind::alignment));
}
