#include "coopclass/consensus.hpp"

#include <algorithm>
#include <cmath>

#include "coopclass/error.hpp"
#include "text_io.hpp"

namespace coopclass {

namespace fs = std::filesystem;

ClassIndex ConsensusDataset::label_of(std::string_view sample_id) const {
  for (std::size_t i = 0; i < sample_ids.size(); ++i) {
    if (sample_ids[i] == sample_id) return labels[i];
  }
  fail(ErrorKind::lookup, "no consensus for sample " + std::string(sample_id));
}

std::vector<ClassIndex> majority_vote(const MultiRaterDataset& dataset) {
  const auto c = static_cast<std::size_t>(dataset.class_count());
  std::vector<ClassIndex> out(dataset.sample_count(), 0);
  std::vector<std::string> uncovered;
  std::vector<int> votes(c);
  for (std::size_t i = 0; i < dataset.sample_count(); ++i) {
    const auto recs = dataset.records_of_sample(i);
    if (recs.empty()) {
      uncovered.push_back(dataset.samples()[i].sample_id);
      continue;
    }
    std::fill(votes.begin(), votes.end(), 0);
    for (const auto r : recs) ++votes[static_cast<std::size_t>(dataset.annotations()[r].label)];
    // max_element returns the first maximum, i.e. the lowest class on ties.
    out[i] = static_cast<ClassIndex>(std::max_element(votes.begin(), votes.end()) - votes.begin());
  }
  if (!uncovered.empty()) {
    std::string list;
    for (std::size_t k = 0; k < uncovered.size() && k < 20; ++k) list += (k ? ", " : "") + uncovered[k];
    if (uncovered.size() > 20) list += ", ...";
    fail(ErrorKind::coverage, std::to_string(uncovered.size()) + " sample(s) without annotations: " + list);
  }
  return out;
}

Eigen::MatrixXd feature_matrix(std::span<const LabeledSample> samples) {
  const std::size_t dim = samples.empty() ? 0 : samples.front().features.size();
  Eigen::MatrixXd x(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(samples.size()));
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].features.size() != dim) fail(ErrorKind::shape, "sample " + samples[i].sample_id + " lacks features");
    for (std::size_t d = 0; d < dim; ++d) x(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(i)) = samples[i].features[d];
  }
  return x;
}

Eigen::MatrixXd feature_matrix(const MultiRaterDataset& dataset) { return feature_matrix(dataset.samples()); }

Eigen::MatrixXd ConsensusClassifier::probabilities(const Eigen::MatrixXd& features) const {
  return softmax_columns(net.forward(features));
}

ConsensusClassifier train_consensus_classifier(const MultiRaterDataset& dataset,
                                               std::span<const ClassIndex> initial_labels,
                                               const ConsensusClassifierConfig& config) {
  if (dataset.feature_dim() == 0) fail(ErrorKind::precondition, "consensus classifier needs sample features");
  if (initial_labels.size() != dataset.sample_count()) fail(ErrorKind::alignment, "one initial label per sample expected");
  const Eigen::MatrixXd x = feature_matrix(dataset);
  Rng init(derive_seed(config.train.seed, 0x63636c66ULL));
  const std::size_t dims[] = {dataset.feature_dim(), config.hidden, static_cast<std::size_t>(dataset.class_count())};
  ConsensusClassifier clf{Mlp(dims, init)};
  clf.seed = config.train.seed;
  const auto history = train_classifier(clf.net, x, initial_labels, config.train);
  clf.epochs_run = history.epochs_run;
  clf.initial_loss = history.initial_holdout_loss;
  clf.final_loss = history.best_holdout_loss;
  return clf;
}

TrustWeights estimate_trust_weights(const MultiRaterDataset& dataset, std::span<const ClassIndex> initial_labels,
                                    const Eigen::MatrixXd& model_probabilities) {
  if (initial_labels.size() != dataset.sample_count() ||
      static_cast<std::size_t>(model_probabilities.cols()) != dataset.sample_count()) {
    fail(ErrorKind::alignment, "trust weights need one label and one prediction per sample");
  }
  TrustWeights w;
  std::size_t agree = 0;
  for (std::size_t i = 0; i < initial_labels.size(); ++i) {
    agree += argmax(model_probabilities.col(static_cast<Eigen::Index>(i))) == initial_labels[i] ? 1 : 0;
  }
  w.model = initial_labels.empty() ? 0.0 : static_cast<double>(agree) / static_cast<double>(initial_labels.size());
  for (const auto& id : dataset.annotators()) {
    const auto recs = dataset.records_of_annotator(id);
    if (recs.empty()) {
      warn("annotator " + id + " has no labels; left out of the trust weights");
      continue;
    }
    std::size_t hits = 0;
    for (const auto r : recs) {
      hits += dataset.annotations()[r].label == initial_labels[dataset.record_sample(r)] ? 1 : 0;
    }
    w.annotators[id] = static_cast<double>(hits) / static_cast<double>(recs.size());
  }
  return w;
}

TrustWeights estimate_trust_weights(const MultiRaterDataset& dataset, std::span<const ClassIndex> initial_labels,
                                    const ConsensusClassifier& classifier) {
  return estimate_trust_weights(dataset, initial_labels, classifier.probabilities(feature_matrix(dataset)));
}

ConsensusDataset crowdlab_ensemble(const MultiRaterDataset& dataset, const Eigen::MatrixXd& model_probabilities,
                                   const TrustWeights& weights) {
  const int c = dataset.class_count();
  if (model_probabilities.rows() != c || static_cast<std::size_t>(model_probabilities.cols()) != dataset.sample_count()) {
    fail(ErrorKind::shape, "model probabilities must be C x samples");
  }
  ConsensusDataset out;
  out.class_count = c;
  out.model_weight = weights.model;
  out.annotator_weights = weights.annotators;
  std::vector<ClassIndex> fallback;  // majority vote, computed lazily
  for (std::size_t i = 0; i < dataset.sample_count(); ++i) {
    std::vector<double> dist(static_cast<std::size_t>(c), 0.0);
    for (int k = 0; k < c; ++k) dist[static_cast<std::size_t>(k)] = weights.model * model_probabilities(k, static_cast<Eigen::Index>(i));
    for (const auto r : dataset.records_of_sample(i)) {
      const auto& rec = dataset.annotations()[r];
      const auto it = weights.annotators.find(rec.annotator_id);
      if (it != weights.annotators.end()) dist[static_cast<std::size_t>(rec.label)] += it->second;
    }
    double total = 0.0;
    for (double v : dist) total += v;
    ClassIndex label = 0;
    if (total > 0.0 && std::isfinite(total)) {
      for (double& v : dist) v /= total;
      label = argmax(dist);
    } else {
      const auto& sid = dataset.samples()[i].sample_id;
      warn("all ensemble weights are zero for sample " + sid + "; using the majority vote");
      if (fallback.empty()) fallback = majority_vote(dataset);
      label = fallback[i];
      std::fill(dist.begin(), dist.end(), 0.0);
      dist[static_cast<std::size_t>(label)] = 1.0;
    }
    out.sample_ids.push_back(dataset.samples()[i].sample_id);
    out.labels.push_back(label);
    out.distributions.push_back(std::move(dist));
  }
  return out;
}

ConsensusDataset bypass_with_clean_labels(const MultiRaterDataset& dataset) {
  ConsensusDataset out;
  out.class_count = dataset.class_count();
  for (const auto& s : dataset.samples()) {
    if (!s.clean_label) fail(ErrorKind::precondition, "sample " + s.sample_id + " has no clean label");
    std::vector<double> dist(static_cast<std::size_t>(out.class_count), 0.0);
    dist[static_cast<std::size_t>(*s.clean_label)] = 1.0;
    out.sample_ids.push_back(s.sample_id);
    out.labels.push_back(*s.clean_label);
    out.distributions.push_back(std::move(dist));
  }
  return out;
}

ConsensusDataset estimate_consensus(const MultiRaterDataset& dataset, const ConsensusClassifierConfig& config) {
  const auto initial = majority_vote(dataset);
  const auto clf = train_consensus_classifier(dataset, initial, config);
  const Eigen::MatrixXd probs = clf.probabilities(feature_matrix(dataset));
  const auto weights = estimate_trust_weights(dataset, initial, probs);
  return crowdlab_ensemble(dataset, probs, weights);
}

void save_consensus(const ConsensusDataset& consensus, const fs::path& path) {
  auto out = detail::open_out(path);
  out << kFileHeader << '\n';
  out << "#classes=" << consensus.class_count << '\n';
  out << "#model_weight=" << detail::format_double(consensus.model_weight) << '\n';
  for (const auto& [id, w] : consensus.annotator_weights) {
    out << "#annotator_weight=" << id << ',' << detail::format_double(w) << '\n';
  }
  for (std::size_t i = 0; i < consensus.size(); ++i) {
    out << consensus.sample_ids[i] << ',' << consensus.labels[i];
    for (double p : consensus.distributions[i]) out << ',' << detail::format_double(p);
    out << '\n';
  }
}

ConsensusDataset load_consensus(const fs::path& path) {
  auto in = detail::open_in(path);
  ConsensusDataset out;
  std::string line;
  std::size_t line_no = 0;
  bool saw_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    const auto t = detail::trim(line);
    if (t.empty()) continue;
    if (!saw_header) {
      if (t != kFileHeader) fail(ErrorKind::format, detail::where(path, line_no) + ": missing header");
      saw_header = true;
      continue;
    }
    if (t.starts_with("#classes=")) {
      out.class_count = static_cast<int>(detail::parse_int(t.substr(9), path, line_no));
    } else if (t.starts_with("#model_weight=")) {
      out.model_weight = detail::parse_double(t.substr(14), path, line_no);
    } else if (t.starts_with("#annotator_weight=")) {
      const auto f = detail::split_csv(t.substr(18));
      if (f.size() != 2) fail(ErrorKind::format, detail::where(path, line_no) + ": bad annotator weight");
      out.annotator_weights[std::string(f[0])] = detail::parse_double(f[1], path, line_no);
    } else if (t.front() != '#') {
      const auto f = detail::split_csv(t);
      if (out.class_count > 0 && f.size() != static_cast<std::size_t>(out.class_count) + 2) {
        fail(ErrorKind::format, detail::where(path, line_no) + ": expected sample_id,label,p_0..p_{C-1}");
      }
      if (out.class_count == 0) out.class_count = static_cast<int>(f.size()) - 2;
      out.sample_ids.emplace_back(f[0]);
      const auto label = detail::parse_int(f[1], path, line_no);
      if (label < 0 || label >= out.class_count) fail(ErrorKind::validation, detail::where(path, line_no) + ": label out of range");
      out.labels.push_back(static_cast<ClassIndex>(label));
      std::vector<double> dist;
      for (std::size_t k = 2; k < f.size(); ++k) dist.push_back(detail::parse_double(f[k], path, line_no));
      out.distributions.push_back(std::move(dist));
    }
  }
  if (!saw_header) fail(ErrorKind::format, path.string() + ": missing header");
  return out;
}

ConsensusDataset align_consensus(const MultiRaterDataset& dataset, const ConsensusDataset& consensus) {
  std::unordered_map<std::string_view, std::size_t> pos;
  for (std::size_t i = 0; i < consensus.size(); ++i) pos.emplace(consensus.sample_ids[i], i);
  ConsensusDataset out;
  out.class_count = consensus.class_count;
  out.model_weight = consensus.model_weight;
  out.annotator_weights = consensus.annotator_weights;
  for (const auto& s : dataset.samples()) {
    const auto it = pos.find(s.sample_id);
    if (it == pos.end()) fail(ErrorKind::alignment, "no consensus for sample " + s.sample_id);
    out.sample_ids.push_back(s.sample_id);
    out.labels.push_back(consensus.labels[it->second]);
    out.distributions.push_back(consensus.distributions[it->second]);
  }
  return out;
}

}  // namespace coopclass
