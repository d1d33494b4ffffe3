#include "coopclass/metrics.hpp"

#include <cmath>

#include "coopclass/error.hpp"
#include "text_io.hpp"

namespace coopclass {

namespace {

void require_aligned(std::size_t n, std::initializer_list<std::size_t> others) {
  for (auto m : others) {
    if (m != n) fail(ErrorKind::alignment, "label streams differ in length (" + std::to_string(n) + " vs " + std::to_string(m) + ")");
  }
}

double ratio(std::size_t num, std::size_t den) {
  return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

AlterationReport alteration_metrics(std::span<const int> clean, std::span<const int> user, std::span<const int> cooperative,
                                    std::string user_id) {
  require_aligned(clean.size(), {user.size(), cooperative.size()});
  AlterationReport r;
  r.user_id = std::move(user_id);
  r.test_size = clean.size();
  std::size_t post_hits = 0;
  for (std::size_t i = 0; i < clean.size(); ++i) {
    const bool coop_right = cooperative[i] == clean[i];
    post_hits += coop_right ? 1 : 0;
    if (user[i] == clean[i]) {
      ++r.correct;
      r.broken += coop_right ? 0 : 1;
    } else {
      ++r.incorrect;
      r.corrected += coop_right ? 1 : 0;
    }
  }
  r.a_plus = ratio(r.corrected, r.incorrect);
  r.a_minus = ratio(r.broken, r.correct);
  r.original_accuracy = ratio(r.correct, r.test_size);
  r.post_accuracy = ratio(post_hits, r.test_size);
  return r;
}

std::pair<double, double> accuracy_pair(std::span<const int> clean, std::span<const int> user,
                                        std::span<const int> cooperative) {
  require_aligned(clean.size(), {user.size(), cooperative.size()});
  std::size_t u = 0;
  std::size_t c = 0;
  for (std::size_t i = 0; i < clean.size(); ++i) {
    u += user[i] == clean[i] ? 1 : 0;
    c += cooperative[i] == clean[i] ? 1 : 0;
  }
  return {ratio(u, clean.size()), ratio(c, clean.size())};
}

Outcome classify_outcome(const AlterationReport& report, double tau) {
  const double delta = report.post_accuracy - report.original_accuracy;
  if (delta > tau) return Outcome::improved;
  if (std::abs(delta) <= tau) return Outcome::maintained;
  return Outcome::not_improved;
}

std::string_view to_string(Outcome outcome) {
  switch (outcome) {
    case Outcome::improved: return "I";
    case Outcome::maintained: return "M";
    case Outcome::not_improved: return "NI";
  }
  return "?";
}

AggregateReport aggregate_users(std::span<const AlterationReport> reports, double tau) {
  AggregateReport a;
  a.tau = tau;
  a.users = reports.size();
  if (reports.empty()) return a;
  for (const auto& r : reports) {
    switch (classify_outcome(r, tau)) {
      case Outcome::improved: ++a.improved; break;
      case Outcome::maintained: ++a.maintained; break;
      case Outcome::not_improved: ++a.not_improved; break;
    }
    a.original_accuracy += r.original_accuracy;
    a.post_accuracy += r.post_accuracy;
    a.a_plus += r.a_plus;
    a.a_minus += r.a_minus;
  }
  const auto n = static_cast<double>(reports.size());
  a.original_accuracy /= n;
  a.post_accuracy /= n;
  a.a_plus /= n;
  a.a_minus /= n;
  return a;
}

JointDecisionTable joint_decision_table(std::span<const int> clean, std::span<const int> user, std::span<const int> base,
                                        std::span<const int> cooperative) {
  require_aligned(clean.size(), {user.size(), base.size(), cooperative.size()});
  JointDecisionTable t;
  for (std::size_t i = 0; i < clean.size(); ++i) {
    ++t.counts[JointDecisionTable::cell(user[i] == clean[i], base[i] == clean[i], cooperative[i] == clean[i])];
  }
  t.total = clean.size();
  for (std::size_t k = 0; k < 8; ++k) t.proportions[k] = ratio(t.counts[k], t.total);
  return t;
}

JointDecisionTable& JointDecisionTable::operator+=(const JointDecisionTable& other) {
  total += other.total;
  for (std::size_t k = 0; k < 8; ++k) {
    counts[k] += other.counts[k];
    proportions[k] = ratio(counts[k], total);
  }
  return *this;
}

nlohmann::json AlterationReport::to_json() const {
  return {{"user_id", user_id},           {"profile", profile},
          {"accepted", accepted},         {"test_size", test_size},
          {"incorrect", incorrect},       {"corrected", corrected},
          {"correct", correct},           {"broken", broken},
          {"a_plus", a_plus},             {"a_minus", a_minus},
          {"original_accuracy", original_accuracy}, {"post_accuracy", post_accuracy}};
}

nlohmann::json AggregateReport::to_json() const {
  return {{"users", users},
          {"I", improved},
          {"M", maintained},
          {"NI", not_improved},
          {"original_accuracy", original_accuracy},
          {"post_accuracy", post_accuracy},
          {"a_plus", a_plus},
          {"a_minus", a_minus},
          {"tau", tau}};
}

nlohmann::json JointDecisionTable::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (int h = 1; h >= 0; --h) {
    for (int b = 1; b >= 0; --b) {
      for (int c = 1; c >= 0; --c) {
        const auto k = cell(h, b, c);
        rows.push_back({{"human", h == 1}, {"base", b == 1}, {"cooperation", c == 1}, {"count", counts[k]},
                        {"proportion", proportions[k]}});
      }
    }
  }
  return {{"total", total}, {"cells", rows}};
}

void save_user_reports(std::span<const AlterationReport> reports, double tau, const std::filesystem::path& path) {
  auto out = detail::open_out(path);
  out << kFileHeader << '\n';
  out << "user_id,profile,accepted,outcome,test_size,incorrect,corrected,correct,broken,original_accuracy,post_accuracy,"
         "a_plus,a_minus\n";
  for (const auto& r : reports) {
    out << r.user_id << ',' << r.profile << ',' << (r.accepted ? 1 : 0) << ',' << to_string(classify_outcome(r, tau)) << ','
        << r.test_size << ',' << r.incorrect << ',' << r.corrected << ',' << r.correct << ',' << r.broken << ','
        << detail::format_double(r.original_accuracy) << ',' << detail::format_double(r.post_accuracy) << ','
        << detail::format_double(r.a_plus) << ',' << detail::format_double(r.a_minus) << '\n';
  }
}

void save_decision_table(const JointDecisionTable& table, const std::filesystem::path& path) {
  auto out = detail::open_out(path);
  out << kFileHeader << '\n' << "human,base,cooperation,count,proportion\n";
  for (int h = 1; h >= 0; --h) {
    for (int b = 1; b >= 0; --b) {
      for (int c = 1; c >= 0; --c) {
        const auto k = JointDecisionTable::cell(h, b, c);
        out << h << ',' << b << ',' << c << ',' << table.counts[k] << ',' << detail::format_double(table.proportions[k])
            << '\n';
      }
    }
  }
}

}  // namespace coopclass
