#include "coopclass/dataset.hpp"

#include <algorithm>
#include <set>

#include "coopclass/consensus.hpp"
#include "coopclass/error.hpp"
#include "coopclass/rng.hpp"
#include "text_io.hpp"

namespace coopclass {

namespace fs = std::filesystem;
using detail::split_csv;

void MultiRaterDataset::add_sample(LabeledSample sample) {
  if (sample.clean_label && (*sample.clean_label < 0 || (class_count_ > 0 && *sample.clean_label >= class_count_))) {
    fail(ErrorKind::validation, "clean label " + std::to_string(*sample.clean_label) + " of sample " +
                                    sample.sample_id + " is out of range");
  }
  if (!sample.features.empty()) {
    if (feature_dim_ == 0) {
      feature_dim_ = sample.features.size();
    } else if (sample.features.size() != feature_dim_) {
      fail(ErrorKind::shape, "sample " + sample.sample_id + " has " + std::to_string(sample.features.size()) +
                                 " features, expected " + std::to_string(feature_dim_));
    }
  }
  const auto it = std::lower_bound(samples_.begin(), samples_.end(), sample.sample_id,
                                   [](const LabeledSample& s, const std::string& id) { return s.sample_id < id; });
  if (it != samples_.end() && it->sample_id == sample.sample_id) {
    *it = std::move(sample);
  } else {
    samples_.insert(it, std::move(sample));
  }
  dirty_ = true;
}

void MultiRaterDataset::add_annotation(AnnotationRecord record) {
  if (record.label < 0 || record.label >= class_count_) {
    fail(ErrorKind::validation, "label " + std::to_string(record.label) + " for sample " + record.sample_id +
                                    " is outside [0, " + std::to_string(class_count_) + ")");
  }
  annotations_.push_back(std::move(record));
  dirty_ = true;
}

void MultiRaterDataset::set_class_count(int class_count) {
  if (class_count < class_count_) fail(ErrorKind::validation, "class count can only grow");
  class_count_ = class_count;
}

void MultiRaterDataset::reindex() const {
  if (!dirty_) return;
  sample_pos_.clear();
  for (std::size_t i = 0; i < samples_.size(); ++i) sample_pos_.emplace(samples_[i].sample_id, i);
  by_annotator_.clear();
  by_sample_.assign(samples_.size(), {});
  record_sample_.assign(annotations_.size(), 0);
  for (std::size_t r = 0; r < annotations_.size(); ++r) {
    const auto it = sample_pos_.find(annotations_[r].sample_id);
    const std::size_t pos = it == sample_pos_.end() ? samples_.size() : it->second;
    record_sample_[r] = pos;
    if (pos < samples_.size()) by_sample_[pos].push_back(r);
    by_annotator_[annotations_[r].annotator_id].push_back(r);
  }
  for (auto& [id, recs] : by_annotator_) {
    std::stable_sort(recs.begin(), recs.end(),
                     [&](std::size_t a, std::size_t b) { return record_sample_[a] < record_sample_[b]; });
  }
  dirty_ = false;
}

std::vector<std::string> MultiRaterDataset::annotators() const {
  reindex();
  std::vector<std::string> ids;
  ids.reserve(by_annotator_.size());
  for (const auto& [id, recs] : by_annotator_) ids.push_back(id);
  return ids;
}

bool MultiRaterDataset::has_annotator(std::string_view annotator_id) const {
  reindex();
  return by_annotator_.find(annotator_id) != by_annotator_.end();
}

std::optional<std::size_t> MultiRaterDataset::find_sample(std::string_view sample_id) const {
  // samples_ is kept sorted, so no index rebuild is needed here
  const auto it = std::lower_bound(samples_.begin(), samples_.end(), sample_id,
                                   [](const LabeledSample& s, std::string_view id) { return s.sample_id < id; });
  if (it == samples_.end() || it->sample_id != sample_id) return std::nullopt;
  return static_cast<std::size_t>(it - samples_.begin());
}

std::size_t MultiRaterDataset::sample_index(std::string_view sample_id) const {
  const auto pos = find_sample(sample_id);
  if (!pos) fail(ErrorKind::lookup, "unknown sample " + std::string(sample_id));
  return *pos;
}

const LabeledSample& MultiRaterDataset::sample(std::string_view sample_id) const {
  return samples_[sample_index(sample_id)];
}

std::span<const std::size_t> MultiRaterDataset::records_of_annotator(std::string_view annotator_id) const {
  reindex();
  const auto it = by_annotator_.find(annotator_id);
  if (it == by_annotator_.end()) fail(ErrorKind::lookup, "unknown annotator " + std::string(annotator_id));
  return it->second;
}

std::span<const std::size_t> MultiRaterDataset::records_of_sample(std::size_t sample_pos) const {
  reindex();
  return by_sample_.at(sample_pos);
}

std::size_t MultiRaterDataset::record_sample(std::size_t record_index) const {
  reindex();
  return record_sample_.at(record_index);
}

bool MultiRaterDataset::all_clean() const {
  return std::all_of(samples_.begin(), samples_.end(),
                     [](const LabeledSample& s) { return s.clean_label.has_value(); });
}

void MultiRaterDataset::validate() const {
  reindex();
  std::set<std::pair<std::string_view, std::string_view>> seen;
  for (std::size_t r = 0; r < annotations_.size(); ++r) {
    const auto& rec = annotations_[r];
    if (record_sample_[r] >= samples_.size()) {
      fail(ErrorKind::validation, "annotation references unknown sample " + rec.sample_id);
    }
    if (!seen.emplace(rec.sample_id, rec.annotator_id).second) {
      fail(ErrorKind::validation, "duplicate annotation for (" + rec.sample_id + ", " + rec.annotator_id + ")");
    }
    if (rec.label < 0 || rec.label >= class_count_) fail(ErrorKind::validation, "label out of range");
  }
  for (const auto& s : samples_) {
    if (s.clean_label && (*s.clean_label < 0 || *s.clean_label >= class_count_)) {
      fail(ErrorKind::validation, "clean label of " + s.sample_id + " out of range");
    }
    if (!s.features.empty() && s.features.size() != feature_dim_) {
      fail(ErrorKind::shape, "inconsistent feature dimension at " + s.sample_id);
    }
  }
}

MultiRaterDataset MultiRaterDataset::subset_samples(std::span<const std::string> sample_ids) const {
  MultiRaterDataset out(class_count_);
  std::set<std::string_view> keep(sample_ids.begin(), sample_ids.end());
  for (const auto& s : samples_) {
    if (keep.count(s.sample_id)) out.add_sample(s);
  }
  for (const auto& a : annotations_) {
    if (keep.count(a.sample_id)) out.annotations_.push_back(a);
  }
  out.dirty_ = true;
  return out;
}

MultiRaterDataset MultiRaterDataset::subset_annotators(std::span<const std::string> annotator_ids) const {
  MultiRaterDataset out(class_count_);
  out.samples_ = samples_;
  out.feature_dim_ = feature_dim_;
  std::set<std::string_view> keep(annotator_ids.begin(), annotator_ids.end());
  for (const auto& a : annotations_) {
    if (keep.count(a.annotator_id)) out.annotations_.push_back(a);
  }
  out.dirty_ = true;
  return out;
}

// ---------------------------------------------------------------------------
// File formats

namespace {

struct HeaderInfo {
  int class_count = 0;
};

// Reads the `#coopclass-v1` line and any following `#key=value` lines.
// Returns the first data line number (1-based) through `line_no`.
HeaderInfo read_header(std::istream& in, const fs::path& path, std::size_t& line_no,
                       std::string& first_data_line, bool& has_data) {
  HeaderInfo info;
  std::string line;
  has_data = false;
  bool saw_version = false;
  while (std::getline(in, line)) {
    ++line_no;
    const auto t = detail::trim(line);
    if (t.empty()) continue;
    if (t.front() == '#') {
      if (!saw_version) {
        if (t != kFileHeader) {
          fail(ErrorKind::format, detail::where(path, line_no) + ": expected header " + std::string(kFileHeader));
        }
        saw_version = true;
        continue;
      }
      if (t.starts_with("#classes=")) {
        info.class_count = static_cast<int>(detail::parse_int(t.substr(9), path, line_no));
      }
      continue;
    }
    if (!saw_version) {
      fail(ErrorKind::format, detail::where(path, line_no) + ": missing header " + std::string(kFileHeader));
    }
    first_data_line = std::string(t);
    has_data = true;
    return info;
  }
  if (!saw_version) fail(ErrorKind::format, path.string() + ": missing header " + std::string(kFileHeader));
  return info;
}

template <typename Fn>
void for_each_data_line(std::istream& in, std::size_t& line_no, std::string first, bool has_first, Fn&& fn) {
  if (has_first) fn(std::string_view(first));
  std::string line;
  while (std::getline(in, line)) {
    ++line_no;
    const auto t = detail::trim(line);
    if (t.empty() || t.front() == '#') continue;
    fn(t);
  }
}

}  // namespace

MultiRaterDataset load_dataset(const fs::path& path, AnnotationFormat format, int class_count) {
  auto in = detail::open_in(path);
  std::size_t line_no = 0;
  std::string first;
  bool has_first = false;
  const HeaderInfo header = read_header(in, path, line_no, first, has_first);
  if (class_count <= 0) class_count = header.class_count;

  struct Raw {
    std::string sample, annotator;
    long long label;
    std::size_t line;
  };
  std::vector<Raw> raws;
  std::vector<std::string> sample_order;

  if (format == AnnotationFormat::triples) {
    for_each_data_line(in, line_no, first, has_first, [&](std::string_view t) {
      const auto fields = split_csv(t);
      if (fields.size() != 3 || fields[0].empty() || fields[1].empty()) {
        fail(ErrorKind::format, detail::where(path, line_no) + ": expected sample_id,annotator_id,label");
      }
      raws.push_back({std::string(fields[0]), std::string(fields[1]),
                      detail::parse_int(fields[2], path, line_no), line_no});
    });
  } else {
    std::vector<std::string> annotators;
    bool header_row = true;
    for_each_data_line(in, line_no, first, has_first, [&](std::string_view t) {
      const auto fields = split_csv(t);
      if (header_row) {
        if (fields.size() < 2) fail(ErrorKind::format, detail::where(path, line_no) + ": header needs annotator ids");
        for (std::size_t i = 1; i < fields.size(); ++i) annotators.emplace_back(fields[i]);
        header_row = false;
        return;
      }
      if (fields.size() != annotators.size() + 1) {
        fail(ErrorKind::format, detail::where(path, line_no) + ": expected " +
                                    std::to_string(annotators.size() + 1) + " columns");
      }
      sample_order.emplace_back(fields[0]);
      for (std::size_t i = 1; i < fields.size(); ++i) {
        if (fields[i].empty()) continue;  // unlabeled cell
        raws.push_back({std::string(fields[0]), annotators[i - 1],
                        detail::parse_int(fields[i], path, line_no), line_no});
      }
    });
  }

  if (class_count <= 0) {
    long long mx = -1;
    for (const auto& r : raws) mx = std::max(mx, r.label);
    class_count = static_cast<int>(mx + 1);
  }
  MultiRaterDataset dataset(class_count);
  std::set<std::string> created;
  for (const auto& id : sample_order) {
    if (created.insert(id).second) dataset.add_sample({id, {}, std::nullopt});
  }
  std::set<std::pair<std::string, std::string>> seen;
  for (const auto& r : raws) {
    if (r.label < 0 || r.label >= class_count) {
      fail(ErrorKind::validation, detail::where(path, r.line) + ": label " + std::to_string(r.label) +
                                      " outside [0, " + std::to_string(class_count) + ")");
    }
    if (!seen.emplace(r.sample, r.annotator).second) {
      fail(ErrorKind::validation, detail::where(path, r.line) + ": duplicate record for (" + r.sample + ", " +
                                      r.annotator + ")");
    }
    if (created.insert(r.sample).second) dataset.add_sample({r.sample, {}, std::nullopt});
    dataset.add_annotation({r.sample, r.annotator, static_cast<ClassIndex>(r.label)});
  }
  return dataset;
}

void load_features(MultiRaterDataset& dataset, const fs::path& path) {
  auto in = detail::open_in(path);
  std::size_t line_no = 0;
  std::string first;
  bool has_first = false;
  read_header(in, path, line_no, first, has_first);
  for_each_data_line(in, line_no, first, has_first, [&](std::string_view t) {
    const auto fields = split_csv(t);
    if (fields.size() < 2) fail(ErrorKind::format, detail::where(path, line_no) + ": expected sample_id and features");
    LabeledSample sample;
    sample.sample_id = std::string(fields[0]);
    if (const auto pos = dataset.find_sample(sample.sample_id)) {
      sample.clean_label = dataset.samples()[*pos].clean_label;
    }
    for (std::size_t i = 1; i < fields.size(); ++i) {
      sample.features.push_back(detail::parse_double(fields[i], path, line_no));
    }
    dataset.add_sample(std::move(sample));
  });
}

void load_clean_labels(MultiRaterDataset& dataset, const fs::path& path) {
  auto in = detail::open_in(path);
  std::size_t line_no = 0;
  std::string first;
  bool has_first = false;
  read_header(in, path, line_no, first, has_first);
  for_each_data_line(in, line_no, first, has_first, [&](std::string_view t) {
    const auto fields = split_csv(t);
    if (fields.size() != 2) fail(ErrorKind::format, detail::where(path, line_no) + ": expected sample_id,label");
    const auto label = detail::parse_int(fields[1], path, line_no);
    if (label < 0 || label >= dataset.class_count()) {
      fail(ErrorKind::validation, detail::where(path, line_no) + ": clean label out of range");
    }
    LabeledSample sample;
    sample.sample_id = std::string(fields[0]);
    if (const auto pos = dataset.find_sample(sample.sample_id)) sample.features = dataset.samples()[*pos].features;
    sample.clean_label = static_cast<ClassIndex>(label);
    dataset.add_sample(std::move(sample));
  });
}

void save_annotations(const MultiRaterDataset& dataset, const fs::path& path) {
  auto out = detail::open_out(path);
  out << kFileHeader << '\n' << "#classes=" << dataset.class_count() << '\n';
  for (const auto& a : dataset.annotations()) out << a.sample_id << ',' << a.annotator_id << ',' << a.label << '\n';
}

void save_features(const MultiRaterDataset& dataset, const fs::path& path) {
  auto out = detail::open_out(path);
  out << kFileHeader << '\n';
  for (const auto& s : dataset.samples()) {
    out << s.sample_id;
    for (double v : s.features) out << ',' << detail::format_double(v);
    out << '\n';
  }
}

void save_clean_labels(const MultiRaterDataset& dataset, const fs::path& path) {
  auto out = detail::open_out(path);
  out << kFileHeader << '\n';
  for (const auto& s : dataset.samples()) {
    if (s.clean_label) out << s.sample_id << ',' << *s.clean_label << '\n';
  }
}

void save_dataset_dir(const MultiRaterDataset& dataset, const fs::path& dir) {
  fs::create_directories(dir);
  save_annotations(dataset, dir / "annotations.csv");
  save_features(dataset, dir / "features.csv");
  save_clean_labels(dataset, dir / "clean_labels.csv");
}

MultiRaterDataset load_dataset_dir(const fs::path& dir) {
  auto dataset = load_dataset(dir / "annotations.csv", AnnotationFormat::triples);
  if (fs::exists(dir / "features.csv")) load_features(dataset, dir / "features.csv");
  if (fs::exists(dir / "clean_labels.csv")) load_clean_labels(dataset, dir / "clean_labels.csv");
  dataset.validate();
  return dataset;
}

// ---------------------------------------------------------------------------
// Per-class label gathering and annotator split

std::vector<ClassIndex> gather_class_labels(const MultiRaterDataset& dataset, const ConsensusDataset& consensus,
                                            std::string_view annotator_id, ClassIndex cls) {
  if (cls < 0 || cls >= dataset.class_count()) fail(ErrorKind::validation, "class index out of range");
  if (consensus.size() != dataset.sample_count()) {
    fail(ErrorKind::alignment, "consensus does not cover the dataset's samples");
  }
  std::vector<ClassIndex> out;
  for (const auto r : dataset.records_of_annotator(annotator_id)) {
    if (consensus.labels[dataset.record_sample(r)] == cls) out.push_back(dataset.annotations()[r].label);
  }
  return out;
}

std::size_t min_labels_over_classes(const MultiRaterDataset& dataset, const ConsensusDataset& consensus,
                                    std::string_view annotator_id) {
  std::vector<std::size_t> counts(static_cast<std::size_t>(dataset.class_count()), 0);
  for (const auto r : dataset.records_of_annotator(annotator_id)) {
    ++counts[static_cast<std::size_t>(consensus.labels[dataset.record_sample(r)])];
  }
  return counts.empty() ? 0 : *std::min_element(counts.begin(), counts.end());
}

SplitSpec split_annotators(const MultiRaterDataset& dataset, const ConsensusDataset& consensus, int min_per_class,
                           std::uint64_t seed) {
  if (min_per_class < 1) fail(ErrorKind::configuration, "minimum labels per class must be at least 1");
  if (consensus.size() != dataset.sample_count()) {
    fail(ErrorKind::alignment, "consensus does not cover the dataset's samples");
  }
  SplitSpec split;
  split.min_labels_per_class = min_per_class;
  std::vector<std::string> kept;
  for (const auto& id : dataset.annotators()) {
    if (min_labels_over_classes(dataset, consensus, id) >= static_cast<std::size_t>(min_per_class)) {
      kept.push_back(id);
    } else {
      split.excluded.push_back(id);
    }
  }
  if (kept.empty()) fail(ErrorKind::empty_split, "no annotator has enough labels in every class");
  Rng rng(derive_seed(seed, 0x73706c6974ULL));
  rng.shuffle(kept);
  const std::size_t n_train = kept.size() / 2;
  split.train_annotators.assign(kept.begin(), kept.begin() + static_cast<std::ptrdiff_t>(n_train));
  split.test_annotators.assign(kept.begin() + static_cast<std::ptrdiff_t>(n_train), kept.end());
  std::sort(split.train_annotators.begin(), split.train_annotators.end());
  std::sort(split.test_annotators.begin(), split.test_annotators.end());
  return split;
}

// ---------------------------------------------------------------------------
// Validation set

std::vector<std::string> ValidationSet::sample_ids() const {
  std::vector<std::string> ids;
  ids.reserve(items.size());
  for (const auto& s : items) ids.push_back(s.sample_id);
  return ids;
}

ValidationSet build_validation_set(std::span<const LabeledSample> pool, int per_class, int class_count,
                                   std::uint64_t seed) {
  if (per_class < 1 || class_count < 1) fail(ErrorKind::configuration, "per-class count and class count must be positive");
  std::vector<std::vector<const LabeledSample*>> by_class(static_cast<std::size_t>(class_count));
  for (const auto& s : pool) {
    if (!s.clean_label) continue;
    if (*s.clean_label < 0 || *s.clean_label >= class_count) fail(ErrorKind::validation, "clean label out of range");
    by_class[static_cast<std::size_t>(*s.clean_label)].push_back(&s);
  }
  ValidationSet set;
  set.per_class = per_class;
  set.class_count = class_count;
  for (int c = 0; c < class_count; ++c) {
    auto& members = by_class[static_cast<std::size_t>(c)];
    if (members.size() < static_cast<std::size_t>(per_class)) {
      fail(ErrorKind::capacity, "class " + std::to_string(c) + " has " + std::to_string(members.size()) +
                                    " clean items, need " + std::to_string(per_class));
    }
    std::sort(members.begin(), members.end(),
              [](const LabeledSample* a, const LabeledSample* b) { return a->sample_id < b->sample_id; });
    Rng rng(derive_seed(seed, 0x76616cULL, static_cast<std::uint64_t>(c)));
    for (auto idx : rng.sample_without_replacement(members.size(), static_cast<std::size_t>(per_class))) {
      set.items.push_back(*members[idx]);
    }
  }
  return set;
}

}  // namespace coopclass
