#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace coopclass {

struct ConsensusDataset;

using ClassIndex = int;

struct LabeledSample {
  std::string sample_id;
  std::vector<double> features;
  std::optional<ClassIndex> clean_label;
};

struct AnnotationRecord {
  std::string sample_id;
  std::string annotator_id;
  ClassIndex label = 0;

  friend bool operator==(const AnnotationRecord&, const AnnotationRecord&) = default;
  friend auto operator<=>(const AnnotationRecord&, const AnnotationRecord&) = default;
};

// Sparse multi-rater dataset. Samples are kept sorted by sample_id so that
// every per-sample iteration is in a deterministic order independent of how
// the data was ingested. Immutable once handed to the pipeline.
class MultiRaterDataset {
 public:
  explicit MultiRaterDataset(int class_count = 0) : class_count_(class_count) {}

  int class_count() const { return class_count_; }
  std::size_t feature_dim() const { return feature_dim_; }

  /// Inserts or replaces a sample. Feature dimension must match earlier samples
  /// (an empty feature vector is allowed while the dimension is still 0).
  void add_sample(LabeledSample sample);
  void add_annotation(AnnotationRecord record);

  /// Grows the class count (used when C is inferred from data).
  void set_class_count(int class_count);

  const std::vector<LabeledSample>& samples() const { return samples_; }
  const std::vector<AnnotationRecord>& annotations() const { return annotations_; }
  std::size_t sample_count() const { return samples_.size(); }

  /// Sorted annotator ids.
  std::vector<std::string> annotators() const;
  bool has_annotator(std::string_view annotator_id) const;

  std::optional<std::size_t> find_sample(std::string_view sample_id) const;
  std::size_t sample_index(std::string_view sample_id) const;  // throws lookup
  const LabeledSample& sample(std::string_view sample_id) const;

  /// Annotation record indices of one annotator, ordered by sample position.
  std::span<const std::size_t> records_of_annotator(std::string_view annotator_id) const;
  /// Annotation record indices attached to a sample position.
  std::span<const std::size_t> records_of_sample(std::size_t sample_pos) const;
  /// Sample position of an annotation record.
  std::size_t record_sample(std::size_t record_index) const;

  bool all_clean() const;

  /// Throws validation errors if any invariant is violated.
  void validate() const;

  /// Restriction to the given sample ids (annotations follow).
  MultiRaterDataset subset_samples(std::span<const std::string> sample_ids) const;
  /// Restriction to annotations by the given annotators (all samples kept).
  MultiRaterDataset subset_annotators(std::span<const std::string> annotator_ids) const;

 private:
  void reindex() const;

  int class_count_ = 0;
  std::size_t feature_dim_ = 0;
  std::vector<LabeledSample> samples_;
  std::vector<AnnotationRecord> annotations_;

  // Lazily rebuilt lookup tables.
  mutable bool dirty_ = true;
  mutable std::unordered_map<std::string, std::size_t> sample_pos_;
  mutable std::map<std::string, std::vector<std::size_t>, std::less<>> by_annotator_;
  mutable std::vector<std::vector<std::size_t>> by_sample_;
  mutable std::vector<std::size_t> record_sample_;
};

enum class AnnotationFormat { triples, dense };

/// Reads an annotation file. class_count 0 means: take `#classes=N` from the
/// header block, else max label + 1. Samples are created for every referenced
/// id, without features.
MultiRaterDataset load_dataset(const std::filesystem::path& path, AnnotationFormat format,
                               int class_count = 0);

/// Attaches features (and creates missing samples) from `sample_id,f1..fD` rows.
void load_features(MultiRaterDataset& dataset, const std::filesystem::path& path);
/// Attaches clean labels from `sample_id,label` rows.
void load_clean_labels(MultiRaterDataset& dataset, const std::filesystem::path& path);

void save_annotations(const MultiRaterDataset& dataset, const std::filesystem::path& path);
void save_features(const MultiRaterDataset& dataset, const std::filesystem::path& path);
void save_clean_labels(const MultiRaterDataset& dataset, const std::filesystem::path& path);

/// Directory bundle: annotations.csv, features.csv, clean_labels.csv.
void save_dataset_dir(const MultiRaterDataset& dataset, const std::filesystem::path& dir);
MultiRaterDataset load_dataset_dir(const std::filesystem::path& dir);

/// Labels annotator j gave to samples whose consensus label is `cls`, in
/// sample_id order.
std::vector<ClassIndex> gather_class_labels(const MultiRaterDataset& dataset,
                                            const ConsensusDataset& consensus,
                                            std::string_view annotator_id, ClassIndex cls);

struct SplitSpec {
  std::vector<std::string> train_annotators;  // sorted
  std::vector<std::string> test_annotators;   // sorted
  std::vector<std::string> excluded;          // failed the per-class minimum
  int min_labels_per_class = 0;
};

/// Annotators with at least `min_per_class` labels in every consensus class,
/// split in half by seeded shuffle; an odd one out goes to test.
SplitSpec split_annotators(const MultiRaterDataset& dataset, const ConsensusDataset& consensus,
                           int min_per_class, std::uint64_t seed);

/// min over classes of |gather_class_labels|.
std::size_t min_labels_over_classes(const MultiRaterDataset& dataset,
                                    const ConsensusDataset& consensus,
                                    std::string_view annotator_id);

struct ValidationSet {
  std::vector<LabeledSample> items;  // class-major, then selection order
  int per_class = 0;
  int class_count = 0;

  std::vector<std::string> sample_ids() const;
};

/// Exactly M clean-labelled items per class, chosen by seeded draw.
ValidationSet build_validation_set(std::span<const LabeledSample> pool, int per_class,
                                   int class_count, std::uint64_t seed);

}  // namespace coopclass
