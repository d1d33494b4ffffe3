#include "coopclass/simulation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "coopclass/error.hpp"
#include "coopclass/rng.hpp"

namespace coopclass {

std::vector<double> class_center(const SyntheticDatasetSpec& spec, int cls) {
  // Scaled basis vectors sit `separation` apart pairwise.
  const double s = spec.separation / std::sqrt(2.0);
  std::vector<double> c(spec.dim, 0.0);
  c[static_cast<std::size_t>(cls)] = s;
  for (const auto& [a, b] : spec.close_pairs) {
    if (cls != a && cls != b) continue;
    const int other = cls == a ? b : a;
    // Pull both centers toward their midpoint.
    const double shrink = spec.pair_separation / spec.separation;
    std::vector<double> mid(spec.dim, 0.0);
    mid[static_cast<std::size_t>(cls)] = s / 2;
    mid[static_cast<std::size_t>(other)] = s / 2;
    for (std::size_t d = 0; d < spec.dim; ++d) {
      const double own = d == static_cast<std::size_t>(cls) ? s : 0.0;
      c[d] = mid[d] + shrink * (own - mid[d]);
    }
  }
  return c;
}

MultiRaterDataset generate_synthetic_dataset(const SyntheticDatasetSpec& spec) {
  if (spec.classes < 1 || spec.per_class < 1) fail(ErrorKind::configuration, "class and sample counts must be positive");
  if (spec.dim < static_cast<std::size_t>(spec.classes)) fail(ErrorKind::configuration, "feature dimension must be at least C");
  if (!(spec.separation > 0.0) || !(spec.noise >= 0.0)) fail(ErrorKind::configuration, "separation must be positive");
  for (const auto& [a, b] : spec.close_pairs) {
    if (a == b || a < 0 || b < 0 || a >= spec.classes || b >= spec.classes) {
      fail(ErrorKind::configuration, "close pair outside the class range");
    }
    if (!(spec.pair_separation > 0.0)) fail(ErrorKind::configuration, "pair separation must be positive");
  }

  std::vector<std::vector<double>> centers;
  for (int c = 0; c < spec.classes; ++c) centers.push_back(class_center(spec, c));

  MultiRaterDataset out(spec.classes);
  const auto total = static_cast<std::size_t>(spec.classes) * static_cast<std::size_t>(spec.per_class);
  const int width = static_cast<int>(std::to_string(total).size());
  for (std::size_t i = 0; i < total; ++i) {
    // Interleave classes so any prefix is balanced.
    const int cls = static_cast<int>(i % static_cast<std::size_t>(spec.classes));
    Rng rng(derive_seed(spec.seed, 0x73796eULL, i));
    LabeledSample s;
    char buf[32];
    std::snprintf(buf, sizeof buf, "%0*zu", width, i);
    s.sample_id = spec.id_prefix + buf;
    s.features.resize(spec.dim);
    for (std::size_t d = 0; d < spec.dim; ++d) s.features[d] = centers[static_cast<std::size_t>(cls)][d] + spec.noise * rng.normal();
    s.clean_label = cls;
    out.add_sample(std::move(s));
  }
  return out;
}

TransitionMatrix flip_matrix(int class_count, const FlipProfileSpec& profile) {
  if (profile.class_a == profile.class_b) fail(ErrorKind::configuration, "flip pair needs two distinct classes");
  if (profile.class_a < 0 || profile.class_b < 0 || profile.class_a >= class_count || profile.class_b >= class_count) {
    fail(ErrorKind::configuration, "flip pair outside the class range");
  }
  if (!(profile.flip_rate >= 0.0 && profile.flip_rate <= 1.0)) fail(ErrorKind::configuration, "flip rate must lie in [0,1]");
  auto t = TransitionMatrix::identity(class_count);
  const double r = profile.flip_rate;
  t.probabilities(profile.class_a, profile.class_a) = 1.0 - r;
  t.probabilities(profile.class_a, profile.class_b) = r;
  t.probabilities(profile.class_b, profile.class_b) = 1.0 - r;
  t.probabilities(profile.class_b, profile.class_a) = r;
  return t;
}

std::string simulated_user_id(std::string_view prefix, int profile, int user) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "p%du%02d", profile, user);
  return std::string(prefix) + buf;
}

std::map<std::string, int> simulate_annotators(MultiRaterDataset& dataset, std::span<const FlipProfileSpec> profiles,
                                               std::uint64_t seed, std::string_view id_prefix,
                                               std::span<const std::string> sample_ids) {
  std::vector<std::size_t> pool;
  if (sample_ids.empty()) {
    for (std::size_t i = 0; i < dataset.sample_count(); ++i) pool.push_back(i);
  } else {
    for (const auto& id : sample_ids) pool.push_back(dataset.sample_index(id));
  }
  for (auto pos : pool) {
    if (!dataset.samples()[pos].clean_label) {
      fail(ErrorKind::precondition, "sample " + dataset.samples()[pos].sample_id + " has no clean label to corrupt");
    }
  }

  std::map<std::string, int> truth;
  const int c_count = dataset.class_count();
  for (std::size_t k = 0; k < profiles.size(); ++k) {
    const auto& p = profiles[k];
    flip_matrix(c_count, p);  // validates the pair and rate
    if (!(p.coverage > 0.0 && p.coverage <= 1.0)) fail(ErrorKind::configuration, "coverage must lie in (0,1]");
    for (int u = 0; u < p.users_per_profile; ++u) {
      const auto id = simulated_user_id(id_prefix, static_cast<int>(k), u);
      truth[id] = static_cast<int>(k);
      Rng rng(derive_seed(seed, fnv1a(id)));
      const auto take = static_cast<std::size_t>(std::llround(p.coverage * static_cast<double>(pool.size())));
      auto picks = rng.sample_without_replacement(pool.size(), take);
      std::sort(picks.begin(), picks.end());
      std::vector<bool> seen(static_cast<std::size_t>(c_count), false);
      for (auto idx : picks) {
        const auto& s = dataset.samples()[pool[idx]];
        const int clean = *s.clean_label;
        int label = clean;
        if (clean == p.class_a || clean == p.class_b) {
          if (rng.uniform() < p.flip_rate) label = clean == p.class_a ? p.class_b : p.class_a;
        }
        seen[static_cast<std::size_t>(clean)] = true;
        dataset.add_annotation({s.sample_id, id, label});
      }
      for (int c = 0; c < c_count; ++c) {
        if (!seen[static_cast<std::size_t>(c)]) warn("simulated user " + id + " labeled no sample of class " + std::to_string(c));
      }
    }
  }
  return truth;
}

std::vector<std::vector<FlipProfileSpec>> sweep_noise_rates(std::span<const FlipProfileSpec> profiles,
                                                            std::span<const double> rates) {
  std::vector<std::vector<FlipProfileSpec>> grid;
  for (double r : rates) {
    if (!(r >= 0.0 && r <= 1.0)) fail(ErrorKind::configuration, "noise rate must lie in [0,1]");
    std::vector<FlipProfileSpec> row(profiles.begin(), profiles.end());
    for (auto& p : row) p.flip_rate = r;
    grid.push_back(std::move(row));
  }
  return grid;
}

nlohmann::json SyntheticDatasetSpec::to_json() const {
  nlohmann::json pairs = nlohmann::json::array();
  for (const auto& [a, b] : close_pairs) pairs.push_back({a, b});
  return {{"classes", classes},   {"dim", dim},           {"per_class", per_class},
          {"separation", separation}, {"noise", noise},   {"seed", seed},
          {"id_prefix", id_prefix}, {"close_pairs", pairs}, {"pair_separation", pair_separation}};
}

SyntheticDatasetSpec SyntheticDatasetSpec::from_json(const nlohmann::json& j) {
  SyntheticDatasetSpec s;
  s.classes = j.value("classes", s.classes);
  s.dim = j.value("dim", s.dim);
  s.per_class = j.value("per_class", s.per_class);
  s.separation = j.value("separation", s.separation);
  s.noise = j.value("noise", s.noise);
  s.seed = j.value("seed", s.seed);
  s.id_prefix = j.value("id_prefix", s.id_prefix);
  if (j.contains("close_pairs")) {
    for (const auto& p : j.at("close_pairs")) s.close_pairs.emplace_back(p.at(0).get<int>(), p.at(1).get<int>());
  }
  s.pair_separation = j.value("pair_separation", s.pair_separation);
  return s;
}

nlohmann::json FlipProfileSpec::to_json() const {
  return {{"pair", {class_a, class_b}},
          {"flip_rate", flip_rate},
          {"users_per_profile", users_per_profile},
          {"coverage", coverage}};
}

FlipProfileSpec FlipProfileSpec::from_json(const nlohmann::json& j) {
  FlipProfileSpec p;
  if (j.contains("pair")) {
    p.class_a = j.at("pair").at(0).get<int>();
    p.class_b = j.at("pair").at(1).get<int>();
  }
  p.flip_rate = j.value("flip_rate", p.flip_rate);
  p.users_per_profile = j.value("users_per_profile", p.users_per_profile);
  p.coverage = j.value("coverage", p.coverage);
  return p;
}

}  // namespace coopclass
