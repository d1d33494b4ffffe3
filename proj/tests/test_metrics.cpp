#include <doctest.h>

#include <cmath>

#include "coopclass/metrics.hpp"
#include "coopclass/rng.hpp"
#include "test_support.hpp"

using namespace coopclass;
using testing::throws_kind;

namespace {

struct Streams {
  std::vector<int> clean, user, base, coop;
};

Streams random_streams(Rng& rng) {
  Streams s;
  const std::size_t n = 1 + rng.below(30);
  const int c = 2 + static_cast<int>(rng.below(3));
  for (std::size_t i = 0; i < n; ++i) {
    const int y = static_cast<int>(rng.below(static_cast<std::size_t>(c)));
    s.clean.push_back(y);
    // bias each stream toward the truth so every set is populated
    auto draw = [&](double p_right) { return rng.uniform() < p_right ? y : static_cast<int>(rng.below(static_cast<std::size_t>(c))); };
    s.user.push_back(draw(0.5));
    s.base.push_back(draw(0.6));
    s.coop.push_back(draw(0.7));
  }
  return s;
}

}  // namespace

TEST_CASE("counting examples") {
  // wrong on 4, model fixes 3
  const std::vector<int> clean{0, 0, 0, 0, 1, 1};
  const std::vector<int> user{1, 1, 1, 1, 1, 1};
  const std::vector<int> coop{0, 0, 0, 1, 1, 1};
  const auto r = alteration_metrics(clean, user, coop);
  CHECK(r.incorrect == 4);
  CHECK(r.corrected == 3);
  CHECK(r.a_plus == 0.75);
  CHECK(r.a_minus == 0.0);

  // right on 10, model breaks 1
  const std::vector<int> ten(10, 2);
  std::vector<int> broken = ten;
  broken[4] = 0;
  const auto b = alteration_metrics(ten, ten, broken);
  CHECK(b.a_minus == doctest::Approx(0.1));
  CHECK(b.a_plus == 0.0);
}

TEST_CASE("perfect user gives A+ of zero without error") {
  const std::vector<int> clean{0, 1, 2, 1};
  const auto r = alteration_metrics(clean, clean, std::vector<int>{0, 0, 2, 1});
  CHECK(r.incorrect == 0);
  CHECK(r.a_plus == 0.0);
  CHECK(r.original_accuracy == 1.0);
  CHECK(r.post_accuracy == 0.75);

  // and a user wrong everywhere has no A- denominator
  const auto w = alteration_metrics(clean, std::vector<int>{1, 0, 0, 0}, clean);
  CHECK(w.correct == 0);
  CHECK(w.a_minus == 0.0);
}

TEST_CASE("accuracy pair edge cases") {
  const std::vector<int> clean{0, 1, 1};
  const std::vector<int> user{0, 0, 1};
  CHECK(accuracy_pair(clean, clean, user).first == 1.0);
  const auto [o, p] = accuracy_pair(clean, user, user);
  CHECK(o == p);
  CHECK(throws_kind([&] { accuracy_pair(clean, std::vector<int>{0}, user); }, ErrorKind::alignment));
  CHECK(throws_kind([&] { alteration_metrics(clean, user, std::vector<int>{0}); }, ErrorKind::alignment));
  CHECK(throws_kind([&] { joint_decision_table(clean, user, user, std::vector<int>{}); }, ErrorKind::alignment));
}

TEST_CASE("metrics equal a brute-force rescan on 1000 random instances") {
  Rng rng(2024);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto s = random_streams(rng);
    const auto r = alteration_metrics(s.clean, s.user, s.coop);
    std::size_t inc = 0, fix = 0, ok = 0, brk = 0, user_ok = 0, coop_ok = 0;
    std::array<std::size_t, 8> cells{};
    for (std::size_t i = 0; i < s.clean.size(); ++i) {
      const bool h = s.user[i] == s.clean[i], b = s.base[i] == s.clean[i], m = s.coop[i] == s.clean[i];
      user_ok += h;
      coop_ok += m;
      if (h) {
        ++ok;
        brk += !m;
      } else {
        ++inc;
        fix += m;
      }
      // enumerate the cell list instead of using the module's index helper
      int idx = 0;
      for (bool hh : {true, false})
        for (bool bb : {true, false})
          for (bool mm : {true, false}) {
            if (hh == h && bb == b && mm == m) ++cells[static_cast<std::size_t>(idx)];
            ++idx;
          }
    }
    const double n = static_cast<double>(s.clean.size());
    CHECK(r.incorrect == inc);
    CHECK(r.corrected == fix);
    CHECK(r.correct == ok);
    CHECK(r.broken == brk);
    CHECK(r.a_plus == (inc ? fix / double(inc) : 0.0));
    CHECK(r.a_minus == (ok ? brk / double(ok) : 0.0));
    CHECK(r.original_accuracy == user_ok / n);
    CHECK(r.post_accuracy == coop_ok / n);
    const auto pair = accuracy_pair(s.clean, s.user, s.coop);
    CHECK(pair.first == user_ok / n);
    CHECK(pair.second == coop_ok / n);

    const auto t = joint_decision_table(s.clean, s.user, s.base, s.coop);
    double total = 0.0;
    for (std::size_t k = 0; k < 8; ++k) {
      CHECK(t.counts[k] == cells[k]);
      CHECK(t.proportions[k] == cells[k] / n);
      CHECK(t.proportions[k] >= 0.0);
      total += t.proportions[k];
    }
    CHECK(std::abs(total - 1.0) < 1e-9);

    // post = original + (A+ |I| - A- |R|) / |T|, exact on the integer counts
    CHECK(coop_ok == user_ok + r.corrected - r.broken);
    const double rhs = r.original_accuracy + (r.a_plus * double(r.incorrect) - r.a_minus * double(r.correct)) / n;
    CHECK(std::abs(r.post_accuracy - rhs) < 1e-12);

    // set sizes
    CHECK(r.corrected <= r.incorrect);
    CHECK(r.broken <= r.correct);
    CHECK(r.incorrect + r.correct == s.clean.size());
  }
}

TEST_CASE("decision table cell layout") {
  const std::vector<int> clean{0, 0, 0, 0};
  const auto all_right = joint_decision_table(clean, clean, clean, clean);
  CHECK(all_right.at(true, true, true) == 1.0);
  // human wrong, base wrong, cooperation right
  const auto t = joint_decision_table(clean, std::vector<int>{1, 1, 0, 0}, std::vector<int>{1, 1, 1, 0},
                                      std::vector<int>{0, 1, 0, 0});
  CHECK(t.at(false, false, true) == 0.25);
  CHECK(t.at(false, false, false) == 0.25);
  CHECK(t.at(true, false, true) == 0.25);
  CHECK(t.at(true, true, true) == 0.25);

  auto sum = t;
  sum += all_right;
  CHECK(sum.total == 8);
  CHECK(sum.at(true, true, true) == doctest::Approx(5.0 / 8.0));
}

TEST_CASE("outcome classification with a tolerance") {
  AlterationReport r;
  r.original_accuracy = 0.8;
  r.post_accuracy = 0.81;
  CHECK(classify_outcome(r, 0.0) == Outcome::improved);
  CHECK(classify_outcome(r, 0.02) == Outcome::maintained);
  r.post_accuracy = 0.8;
  CHECK(classify_outcome(r, 0.0) == Outcome::maintained);
  r.post_accuracy = 0.75;
  CHECK(classify_outcome(r, 0.0) == Outcome::not_improved);
  CHECK(to_string(Outcome::not_improved) == "NI");
}

TEST_CASE("aggregate means and tallies") {
  AlterationReport a, b;
  a.a_plus = 0.5;
  a.original_accuracy = 0.8;
  a.post_accuracy = 0.9;
  b.a_plus = 1.0;
  b.original_accuracy = 0.9;
  b.post_accuracy = 0.85;
  const std::vector<AlterationReport> both{a, b};
  const auto agg = aggregate_users(both);
  CHECK(agg.users == 2);
  CHECK(agg.a_plus == 0.75);
  CHECK(agg.improved == 1);
  CHECK(agg.not_improved == 1);
  CHECK(agg.improved + agg.maintained + agg.not_improved == agg.users);

  const std::vector<AlterationReport> one{a};
  const auto single = aggregate_users(one);
  CHECK(single.post_accuracy == a.post_accuracy);
  CHECK(single.a_plus == a.a_plus);
  CHECK(aggregate_users({}).users == 0);
}

TEST_CASE("report files have one row per user and eight table rows") {
  testing::TempDir dir("metrics");
  const std::vector<int> clean{0, 1, 1, 0};
  std::vector<AlterationReport> reports{alteration_metrics(clean, clean, clean, "u1"),
                                        alteration_metrics(clean, std::vector<int>{1, 1, 1, 0}, clean, "u2")};
  save_user_reports(reports, 0.0, dir / "users.csv");
  const auto text = testing::read_text(dir / "users.csv");
  CHECK(text.find("u1") != std::string::npos);
  CHECK(text.find("u2") != std::string::npos);

  save_decision_table(joint_decision_table(clean, clean, clean, clean), dir / "table.csv");
  const auto table = testing::read_text(dir / "table.csv");
  std::size_t rows = 0;
  for (char ch : table) rows += ch == '\n';
  // header marker, column names, eight cells
  CHECK(rows == 10);
}
