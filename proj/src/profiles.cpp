#include "coopclass/profiles.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

#include "coopclass/error.hpp"
#include "coopclass/rng.hpp"
#include "text_io.hpp"

namespace coopclass {

namespace fs = std::filesystem;

Encoding parse_encoding(std::string_view name) {
  if (name == "one-hot" || name == "one_hot") return Encoding::one_hot;
  if (name == "raw-index" || name == "raw_index" || name == "raw") return Encoding::raw_index;
  fail(ErrorKind::configuration, "unknown encoding '" + std::string(name) + "'");
}

std::string_view to_string(Encoding encoding) {
  return encoding == Encoding::one_hot ? "one-hot" : "raw-index";
}

std::vector<double> LabelVector::embed() const {
  if (encoding == Encoding::raw_index) return {entries.begin(), entries.end()};
  std::vector<double> out(entries.size() * static_cast<std::size_t>(class_count), 0.0);
  for (std::size_t i = 0; i < entries.size(); ++i) {
    out[i * static_cast<std::size_t>(class_count) + static_cast<std::size_t>(entries[i])] = 1.0;
  }
  return out;
}

std::size_t LabelVector::embedded_dim() const {
  return encoding == Encoding::raw_index ? entries.size() : entries.size() * static_cast<std::size_t>(class_count);
}

LabelVector build_label_vector(const MultiRaterDataset& dataset, const ConsensusDataset& consensus,
                               std::string_view annotator_id, int per_class, std::uint64_t seed, Encoding encoding) {
  if (per_class < 1) fail(ErrorKind::configuration, "labels per class must be at least 1");
  LabelVector v;
  v.annotator_id = std::string(annotator_id);
  v.class_count = dataset.class_count();
  v.per_class = per_class;
  v.encoding = encoding;
  const std::uint64_t annotator_stream = fnv1a(annotator_id);
  for (ClassIndex c = 0; c < dataset.class_count(); ++c) {
    const auto labels = gather_class_labels(dataset, consensus, annotator_id, c);
    if (labels.size() < static_cast<std::size_t>(per_class)) {
      fail(ErrorKind::exclusion, "annotator " + std::string(annotator_id) + " has " + std::to_string(labels.size()) +
                                     " labels for class " + std::to_string(c) + ", needs " + std::to_string(per_class));
    }
    Rng rng(derive_seed(seed, annotator_stream, static_cast<std::uint64_t>(c)));
    for (auto idx : rng.sample_without_replacement(labels.size(), static_cast<std::size_t>(per_class))) {
      v.entries.push_back(labels[idx]);
    }
  }
  return v;
}

Eigen::MatrixXd stack_embeddings(std::span<const LabelVector> vectors) {
  if (vectors.empty()) return {};
  const std::size_t dim = vectors.front().embedded_dim();
  Eigen::MatrixXd out(static_cast<Eigen::Index>(vectors.size()), static_cast<Eigen::Index>(dim));
  for (std::size_t i = 0; i < vectors.size(); ++i) {
    const auto e = vectors[i].embed();
    if (e.size() != dim) fail(ErrorKind::shape, "label vectors have different lengths");
    for (std::size_t d = 0; d < dim; ++d) out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(d)) = e[d];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Fuzzy c-means

namespace {

bool row_less(const Eigen::MatrixXd& m, Eigen::Index a, Eigen::Index b) {
  for (Eigen::Index d = 0; d < m.cols(); ++d) {
    if (m(a, d) != m(b, d)) return m(a, d) < m(b, d);
  }
  return false;
}

Eigen::MatrixXd squared_distances(const Eigen::MatrixXd& points, const Eigen::MatrixXd& centroids) {
  Eigen::MatrixXd d2(points.rows(), centroids.rows());
  for (Eigen::Index j = 0; j < points.rows(); ++j) {
    for (Eigen::Index k = 0; k < centroids.rows(); ++k) d2(j, k) = (points.row(j) - centroids.row(k)).squaredNorm();
  }
  return d2;
}

Eigen::MatrixXd memberships_from(const Eigen::MatrixXd& d2, double fuzzifier) {
  const Eigen::Index n = d2.rows();
  const Eigen::Index k = d2.cols();
  Eigen::MatrixXd u(n, k);
  const double exponent = 1.0 / (fuzzifier - 1.0);
  for (Eigen::Index j = 0; j < n; ++j) {
    Eigen::Index zeros = 0;
    for (Eigen::Index c = 0; c < k; ++c) zeros += d2(j, c) == 0.0 ? 1 : 0;
    if (zeros > 0) {
      for (Eigen::Index c = 0; c < k; ++c) u(j, c) = d2(j, c) == 0.0 ? 1.0 / static_cast<double>(zeros) : 0.0;
      continue;
    }
    // u_jk = 1 / sum_l (d_jk^2 / d_jl^2)^(1/(m-1)), computed with the
    // smallest distance as reference for stability.
    const double dmin = d2.row(j).minCoeff();
    double total = 0.0;
    for (Eigen::Index c = 0; c < k; ++c) {
      u(j, c) = std::pow(dmin / d2(j, c), exponent);
      total += u(j, c);
    }
    u.row(j) /= total;
  }
  return u;
}

Eigen::MatrixXd centroids_from(const Eigen::MatrixXd& points, const Eigen::MatrixXd& u, double fuzzifier,
                               const Eigen::MatrixXd& previous) {
  const Eigen::MatrixXd w = u.array().pow(fuzzifier).matrix();
  Eigen::MatrixXd c(u.cols(), points.cols());
  for (Eigen::Index k = 0; k < u.cols(); ++k) {
    const double mass = w.col(k).sum();
    c.row(k) = mass > 0.0 ? Eigen::RowVectorXd((w.col(k).transpose() * points) / mass) : Eigen::RowVectorXd(previous.row(k));
  }
  return c;
}

}  // namespace

double fuzzy_objective(const Eigen::MatrixXd& points, const Eigen::MatrixXd& memberships,
                       const Eigen::MatrixXd& centroids, double fuzzifier) {
  const Eigen::MatrixXd d2 = squared_distances(points, centroids);
  return (memberships.array().pow(fuzzifier) * d2.array()).sum();
}

ProfileAssignment fuzzy_kmeans(const Eigen::MatrixXd& input, int k, const FuzzyConfig& config) {
  const Eigen::Index n = input.rows();
  if (k < 1) fail(ErrorKind::configuration, "K must be at least 1");
  if (k > n) fail(ErrorKind::configuration, "K exceeds the number of vectors");
  if (!(config.fuzzifier > 1.0)) fail(ErrorKind::configuration, "fuzzifier must exceed 1");

  // Canonical row order makes the seeding independent of caller order.
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) { return row_less(input, a, b); });
  Eigen::MatrixXd points(n, input.cols());
  for (Eigen::Index i = 0; i < n; ++i) points.row(i) = input.row(order[static_cast<std::size_t>(i)]);

  std::size_t distinct = n > 0 ? 1 : 0;
  for (Eigen::Index i = 1; i < n; ++i) distinct += row_less(points, i - 1, i) ? 1 : 0;

  ProfileAssignment result;
  result.k = k;
  if (distinct < static_cast<std::size_t>(k)) {
    result.degenerate = true;
    warn("fuzzy k-means: " + std::to_string(distinct) + " distinct vectors for K=" + std::to_string(k) +
         "; some centroids will coincide");
  }

  // k-means++ seeding.
  Rng rng(derive_seed(config.seed, 0x66636dULL, static_cast<std::uint64_t>(k)));
  Eigen::MatrixXd centroids(k, points.cols());
  centroids.row(0) = points.row(static_cast<Eigen::Index>(rng.below(static_cast<std::size_t>(n))));
  std::vector<double> nearest(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
  for (int c = 1; c < k; ++c) {
    for (Eigen::Index i = 0; i < n; ++i) {
      nearest[static_cast<std::size_t>(i)] =
          std::min(nearest[static_cast<std::size_t>(i)], (points.row(i) - centroids.row(c - 1)).squaredNorm());
    }
    const double total = std::accumulate(nearest.begin(), nearest.end(), 0.0);
    const std::size_t pick = total > 0.0 ? rng.categorical(nearest) : rng.below(static_cast<std::size_t>(n));
    centroids.row(c) = points.row(static_cast<Eigen::Index>(pick));
  }

  Eigen::MatrixXd u = memberships_from(squared_distances(points, centroids), config.fuzzifier);
  result.objective_history.push_back(fuzzy_objective(points, u, centroids, config.fuzzifier));
  for (int it = 1; it <= config.max_iterations; ++it) {
    centroids = centroids_from(points, u, config.fuzzifier, centroids);
    const Eigen::MatrixXd next = memberships_from(squared_distances(points, centroids), config.fuzzifier);
    const double change = (next - u).cwiseAbs().maxCoeff();
    u = next;
    result.objective_history.push_back(fuzzy_objective(points, u, centroids, config.fuzzifier));
    result.iterations = it;
    if (change < config.tolerance) break;
  }

  // Sort centroids lexicographically so profile ids are stable.
  std::vector<Eigen::Index> perm(static_cast<std::size_t>(k));
  std::iota(perm.begin(), perm.end(), Eigen::Index{0});
  std::stable_sort(perm.begin(), perm.end(), [&](Eigen::Index a, Eigen::Index b) { return row_less(centroids, a, b); });
  result.centroids.resize(k, points.cols());
  result.memberships.resize(n, k);
  for (int c = 0; c < k; ++c) {
    result.centroids.row(c) = centroids.row(perm[static_cast<std::size_t>(c)]);
    for (Eigen::Index i = 0; i < n; ++i) {
      // Undo the canonical row ordering.
      result.memberships(order[static_cast<std::size_t>(i)], c) = u(i, perm[static_cast<std::size_t>(c)]);
    }
  }
  result.hard.resize(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) result.hard[static_cast<std::size_t>(i)] = argmax(Eigen::VectorXd(result.memberships.row(i).transpose()));
  return result;
}

// ---------------------------------------------------------------------------
// Silhouette

SilhouetteReport silhouette_score(const Eigen::MatrixXd& points, std::span<const int> labels) {
  const auto n = static_cast<std::size_t>(points.rows());
  if (labels.size() != n) fail(ErrorKind::shape, "one label per vector expected");
  if (n < 2) fail(ErrorKind::precondition, "silhouette needs at least 2 vectors");
  std::map<int, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < n; ++i) members[labels[i]].push_back(i);
  if (members.size() < 2) fail(ErrorKind::precondition, "silhouette needs at least 2 nonempty profiles");

  Eigen::MatrixXd dist(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    dist(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i)) = 0.0;
    for (std::size_t j = i + 1; j < n; ++j) {
      const double d = (points.row(static_cast<Eigen::Index>(i)) - points.row(static_cast<Eigen::Index>(j))).norm();
      dist(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = d;
      dist(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) = d;
    }
  }

  SilhouetteReport report;
  report.per_point.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& own = members[labels[i]];
    if (own.size() < 2) continue;  // singleton convention: 0
    double a = 0.0;
    for (auto j : own) a += dist(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
    a /= static_cast<double>(own.size() - 1);
    double b = std::numeric_limits<double>::infinity();
    for (const auto& [label, group] : members) {
      if (label == labels[i]) continue;
      double mean = 0.0;
      for (auto j : group) mean += dist(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
      b = std::min(b, mean / static_cast<double>(group.size()));
    }
    const double denom = std::max(a, b);
    report.per_point[i] = denom > 0.0 ? (b - a) / denom : 0.0;
  }
  double total = 0.0;
  for (const auto& [label, group] : members) {
    double s = 0.0;
    for (auto j : group) s += report.per_point[j];
    report.per_profile[label] = s / static_cast<double>(group.size());
    total += report.per_profile[label];
  }
  report.score = total / static_cast<double>(members.size());
  return report;
}

KSelection select_k(const Eigen::MatrixXd& points, std::span<const int> k_range, const FuzzyConfig& config) {
  if (k_range.empty()) fail(ErrorKind::configuration, "empty K range");
  const auto n = static_cast<int>(points.rows());
  KSelection sel;
  double best = -std::numeric_limits<double>::infinity();
  for (int k : k_range) {
    if (k < 2 || k > n - 1) {
      fail(ErrorKind::configuration, "K=" + std::to_string(k) + " outside [2, " + std::to_string(n - 1) + "]");
    }
    auto assignment = fuzzy_kmeans(points, k, config);
    std::set<int> used(assignment.hard.begin(), assignment.hard.end());
    SilhouetteReport report;
    if (used.size() < 2) {
      warn("K=" + std::to_string(k) + " collapsed to a single profile");
      report.per_point.assign(static_cast<std::size_t>(n), -1.0);
      report.score = -1.0;
    } else {
      report = silhouette_score(points, assignment.hard);
    }
    if (report.score > best) {
      best = report.score;
      sel.best_k = k;
    }
    sel.reports.emplace(k, std::move(report));
    sel.assignments.emplace(k, std::move(assignment));
  }
  return sel;
}

// ---------------------------------------------------------------------------
// Exports

void save_profiles(const ProfileAssignment& assignment, std::span<const std::string> annotator_ids,
                   const fs::path& path) {
  if (annotator_ids.size() != assignment.hard.size()) fail(ErrorKind::shape, "one annotator id per vector expected");
  auto out = detail::open_out(path);
  out << kFileHeader << '\n' << "annotator_id,profile";
  for (int k = 0; k < assignment.k; ++k) out << ",membership_" << k;
  out << '\n';
  for (std::size_t i = 0; i < annotator_ids.size(); ++i) {
    out << annotator_ids[i] << ',' << assignment.hard[i];
    for (int k = 0; k < assignment.k; ++k) {
      out << ',' << detail::format_double(assignment.memberships(static_cast<Eigen::Index>(i), k));
    }
    out << '\n';
  }
}

LoadedProfiles load_profiles(const fs::path& path) {
  auto in = detail::open_in(path);
  LoadedProfiles out;
  std::string line;
  std::size_t line_no = 0;
  std::vector<std::vector<double>> rows;
  int k = -1;
  while (std::getline(in, line)) {
    ++line_no;
    const auto t = detail::trim(line);
    if (t.empty()) continue;
    if (line_no == 1) {
      if (t != kFileHeader) fail(ErrorKind::format, detail::where(path, line_no) + ": missing header");
      continue;
    }
    const auto f = detail::split_csv(t);
    if (k < 0) {
      if (f.size() < 2 || f[0] != "annotator_id") fail(ErrorKind::format, detail::where(path, line_no) + ": bad column header");
      k = static_cast<int>(f.size()) - 2;
      continue;
    }
    if (f.size() != static_cast<std::size_t>(k) + 2) fail(ErrorKind::format, detail::where(path, line_no) + ": wrong column count");
    out.annotator_ids.emplace_back(f[0]);
    out.hard.push_back(static_cast<int>(detail::parse_int(f[1], path, line_no)));
    std::vector<double> row;
    for (std::size_t c = 2; c < f.size(); ++c) row.push_back(detail::parse_double(f[c], path, line_no));
    rows.push_back(std::move(row));
  }
  out.memberships.resize(static_cast<Eigen::Index>(rows.size()), std::max(k, 0));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (int c = 0; c < k; ++c) out.memberships(static_cast<Eigen::Index>(i), c) = rows[i][static_cast<std::size_t>(c)];
  }
  return out;
}

void save_silhouette_sweep(const KSelection& selection, const fs::path& path) {
  auto out = detail::open_out(path);
  out << kFileHeader << '\n' << "K,score\n";
  for (const auto& [k, report] : selection.reports) out << k << ',' << detail::format_double(report.score) << '\n';
}

}  // namespace coopclass
