#include "coopclass/noise_model.hpp"

#include <cmath>

#include "coopclass/error.hpp"
#include "coopclass/rng.hpp"
#include "text_io.hpp"

namespace coopclass {

namespace fs = std::filesystem;

bool TransitionMatrix::has_flagged_rows() const {
  for (bool f : zero_support) {
    if (f) return true;
  }
  return false;
}

TransitionMatrix TransitionMatrix::identity(int class_count, std::string owner) {
  TransitionMatrix t;
  t.owner = std::move(owner);
  t.probabilities = Eigen::MatrixXd::Identity(class_count, class_count);
  t.counts = Eigen::MatrixXi::Zero(class_count, class_count);
  t.zero_support.assign(static_cast<std::size_t>(class_count), false);
  return t;
}

TransitionMatrix TransitionMatrix::from_probabilities(const Eigen::MatrixXd& p, std::string owner) {
  if (p.rows() != p.cols()) fail(ErrorKind::shape, "transition matrix must be square");
  require_row_stochastic(p);
  TransitionMatrix t;
  t.owner = std::move(owner);
  t.probabilities = p;
  t.counts = Eigen::MatrixXi::Zero(p.rows(), p.cols());
  t.zero_support.assign(static_cast<std::size_t>(p.rows()), false);
  return t;
}

nlohmann::json TransitionMatrix::metadata() const {
  std::vector<std::vector<int>> c(static_cast<std::size_t>(counts.rows()));
  for (Eigen::Index r = 0; r < counts.rows(); ++r) {
    for (Eigen::Index k = 0; k < counts.cols(); ++k) c[static_cast<std::size_t>(r)].push_back(counts(r, k));
  }
  std::vector<int> flagged;
  for (std::size_t r = 0; r < zero_support.size(); ++r) {
    if (zero_support[r]) flagged.push_back(static_cast<int>(r));
  }
  return {{"schema", "coopclass-matrix-v1"},
          {"owner", owner},
          {"classes", class_count()},
          {"support_counts", c},
          {"zero_support_rows", flagged}};
}

void require_row_stochastic(const Eigen::MatrixXd& p) {
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    double total = 0.0;
    for (Eigen::Index c = 0; c < p.cols(); ++c) {
      const double v = p(r, c);
      if (!(v >= 0.0 && v <= 1.0)) {
        fail(ErrorKind::validation, "transition entry (" + std::to_string(r) + "," + std::to_string(c) + ") outside [0,1]");
      }
      total += v;
    }
    if (std::abs(total - 1.0) > 1e-9) {
      fail(ErrorKind::validation, "transition row " + std::to_string(r) + " sums to " + std::to_string(total));
    }
  }
}

TransitionMatrix estimate_transition_matrix(std::span<const std::vector<ClassIndex>> labels_by_class, int class_count,
                                            double laplace_alpha) {
  if (static_cast<int>(labels_by_class.size()) != class_count) fail(ErrorKind::shape, "one label set per class expected");
  if (laplace_alpha < 0.0) fail(ErrorKind::configuration, "smoothing must be nonnegative");
  TransitionMatrix t = TransitionMatrix::identity(class_count);
  for (int c = 0; c < class_count; ++c) {
    for (auto n : labels_by_class[static_cast<std::size_t>(c)]) {
      if (n < 0 || n >= class_count) fail(ErrorKind::validation, "noisy label out of range");
      ++t.counts(c, n);
    }
    const double total = t.counts.row(c).sum();
    if (total == 0.0) {
      t.zero_support[static_cast<std::size_t>(c)] = true;
      continue;
    }
    const double denom = total + laplace_alpha * class_count;
    for (int n = 0; n < class_count; ++n) t.probabilities(c, n) = (t.counts(c, n) + laplace_alpha) / denom;
  }
  return t;
}

TransitionMatrix estimate_group_matrix(const MultiRaterDataset& dataset, const ConsensusDataset& consensus,
                                       std::span<const std::string> annotator_ids, std::string owner,
                                       double laplace_alpha) {
  if (consensus.size() != dataset.sample_count()) fail(ErrorKind::alignment, "consensus does not cover the dataset");
  std::vector<std::vector<ClassIndex>> by_class(static_cast<std::size_t>(dataset.class_count()));
  for (const auto& id : annotator_ids) {
    for (const auto r : dataset.records_of_annotator(id)) {
      by_class[static_cast<std::size_t>(consensus.labels[dataset.record_sample(r)])].push_back(dataset.annotations()[r].label);
    }
  }
  auto t = estimate_transition_matrix(by_class, dataset.class_count(), laplace_alpha);
  t.owner = std::move(owner);
  return t;
}

TransitionMatrix estimate_user_matrix(const MultiRaterDataset& dataset, const ConsensusDataset& consensus,
                                      std::string_view annotator_id, double laplace_alpha) {
  const std::string id(annotator_id);
  return estimate_group_matrix(dataset, consensus, std::span<const std::string>(&id, 1), id, laplace_alpha);
}

AugmentedDataset augment_labels(std::span<const std::string> sample_ids, std::span<const ClassIndex> consensus,
                                const TransitionMatrix& transition, int draws_per_sample, std::uint64_t seed,
                                int profile) {
  if (sample_ids.size() != consensus.size()) fail(ErrorKind::alignment, "one consensus label per sample expected");
  if (draws_per_sample < 1) fail(ErrorKind::configuration, "G must be at least 1");
  require_row_stochastic(transition.probabilities);
  const int c = transition.class_count();
  AugmentedDataset out;
  out.draws_per_sample = draws_per_sample;
  out.seed = seed;
  out.profile = profile;
  std::vector<double> row(static_cast<std::size_t>(c));
  for (std::size_t i = 0; i < sample_ids.size(); ++i) {
    const auto cls = consensus[i];
    if (cls < 0 || cls >= c) fail(ErrorKind::validation, "consensus label out of range");
    for (int n = 0; n < c; ++n) row[static_cast<std::size_t>(n)] = transition(cls, n);
    Rng rng(derive_seed(seed, fnv1a(sample_ids[i])));
    std::vector<ClassIndex> draws;
    draws.reserve(static_cast<std::size_t>(draws_per_sample));
    for (int g = 0; g < draws_per_sample; ++g) draws.push_back(static_cast<ClassIndex>(rng.categorical(row)));
    out.sample_ids.push_back(sample_ids[i]);
    out.consensus.push_back(cls);
    out.noisy.push_back(std::move(draws));
  }
  return out;
}

std::vector<ClassIndex> simulate_test_set(std::span<const LabeledSample> test_samples, const TransitionMatrix& user,
                                          std::uint64_t seed) {
  require_row_stochastic(user.probabilities);
  const int c = user.class_count();
  std::vector<ClassIndex> out;
  out.reserve(test_samples.size());
  std::vector<double> row(static_cast<std::size_t>(c));
  for (const auto& s : test_samples) {
    if (!s.clean_label) fail(ErrorKind::precondition, "test sample " + s.sample_id + " has no clean label");
    for (int n = 0; n < c; ++n) row[static_cast<std::size_t>(n)] = user(*s.clean_label, n);
    Rng rng(derive_seed(seed, fnv1a(s.sample_id)));
    out.push_back(static_cast<ClassIndex>(rng.categorical(row)));
  }
  return out;
}

void save_transition_matrix(const TransitionMatrix& matrix, const fs::path& csv_path) {
  {
    auto out = detail::open_out(csv_path);
    out << kFileHeader << '\n';
    for (Eigen::Index r = 0; r < matrix.probabilities.rows(); ++r) {
      for (Eigen::Index c = 0; c < matrix.probabilities.cols(); ++c) {
        out << (c ? "," : "") << detail::format_double(matrix.probabilities(r, c));
      }
      out << '\n';
    }
  }
  auto meta_path = csv_path;
  meta_path.replace_extension(".json");
  auto meta = detail::open_out(meta_path);
  meta << matrix.metadata().dump(2) << '\n';
}

TransitionMatrix load_transition_matrix(const fs::path& csv_path) {
  auto in = detail::open_in(csv_path);
  std::string line;
  std::size_t line_no = 0;
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    ++line_no;
    const auto t = detail::trim(line);
    if (t.empty()) continue;
    if (line_no == 1) {
      if (t != kFileHeader) fail(ErrorKind::format, detail::where(csv_path, line_no) + ": missing header");
      continue;
    }
    std::vector<double> row;
    for (auto f : detail::split_csv(t)) row.push_back(detail::parse_double(f, csv_path, line_no));
    rows.push_back(std::move(row));
  }
  const auto c = static_cast<Eigen::Index>(rows.size());
  Eigen::MatrixXd p(c, c);
  for (Eigen::Index r = 0; r < c; ++r) {
    if (static_cast<Eigen::Index>(rows[static_cast<std::size_t>(r)].size()) != c) {
      fail(ErrorKind::format, csv_path.string() + ": matrix is not square");
    }
    for (Eigen::Index k = 0; k < c; ++k) p(r, k) = rows[static_cast<std::size_t>(r)][static_cast<std::size_t>(k)];
  }
  auto t = TransitionMatrix::from_probabilities(p);
  auto meta_path = csv_path;
  meta_path.replace_extension(".json");
  if (fs::exists(meta_path)) {
    auto min = detail::open_in(meta_path);
    const auto meta = nlohmann::json::parse(min);
    t.owner = meta.value("owner", std::string{});
    const auto counts = meta.at("support_counts").get<std::vector<std::vector<int>>>();
    for (Eigen::Index r = 0; r < c && r < static_cast<Eigen::Index>(counts.size()); ++r) {
      for (Eigen::Index k = 0; k < c; ++k) t.counts(r, k) = counts[static_cast<std::size_t>(r)][static_cast<std::size_t>(k)];
    }
    for (int r : meta.at("zero_support_rows").get<std::vector<int>>()) t.zero_support.at(static_cast<std::size_t>(r)) = true;
  }
  return t;
}

void save_augmented(const AugmentedDataset& data, const fs::path& path) {
  auto out = detail::open_out(path);
  out << kFileHeader << '\n'
      << "#draws=" << data.draws_per_sample << '\n'
      << "#seed=" << data.seed << '\n'
      << "#profile=" << data.profile << '\n';
  for (std::size_t i = 0; i < data.size(); ++i) {
    out << data.sample_ids[i] << ',' << data.consensus[i];
    for (auto v : data.noisy[i]) out << ',' << v;
    out << '\n';
  }
}

AugmentedDataset load_augmented(const fs::path& path) {
  auto in = detail::open_in(path);
  AugmentedDataset out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto t = detail::trim(line);
    if (t.empty()) continue;
    if (line_no == 1) {
      if (t != kFileHeader) fail(ErrorKind::format, detail::where(path, line_no) + ": missing header");
      continue;
    }
    if (t.starts_with("#draws=")) {
      out.draws_per_sample = static_cast<int>(detail::parse_int(t.substr(7), path, line_no));
    } else if (t.starts_with("#seed=")) {
      out.seed = std::stoull(std::string(t.substr(6)));
    } else if (t.starts_with("#profile=")) {
      out.profile = static_cast<int>(detail::parse_int(t.substr(9), path, line_no));
    } else if (t.front() != '#') {
      const auto f = detail::split_csv(t);
      if (f.size() != static_cast<std::size_t>(out.draws_per_sample) + 2) {
        fail(ErrorKind::format, detail::where(path, line_no) + ": expected sample_id,consensus and G labels");
      }
      out.sample_ids.emplace_back(f[0]);
      out.consensus.push_back(static_cast<ClassIndex>(detail::parse_int(f[1], path, line_no)));
      std::vector<ClassIndex> draws;
      for (std::size_t k = 2; k < f.size(); ++k) draws.push_back(static_cast<ClassIndex>(detail::parse_int(f[k], path, line_no)));
      out.noisy.push_back(std::move(draws));
    }
  }
  return out;
}

}  // namespace coopclass
