#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace rfexplain {

enum class ColumnKind { numeric, categorical, onehot };

struct ColumnMeta {
  std::string name;
  ColumnKind kind = ColumnKind::numeric;
  // One-hot group id; every column produced from the same categorical shares it.
  int group = -1;
  // Categorical columns store level codes in the feature matrix; levels[code]
  // is the original text.
  std::vector<std::string> levels;
};

enum class MissingPolicy { error, zero };

// Tabular dataset. Before encode() categorical columns hold integer level
// codes and missing cells are NaN; after encode() the matrix is fully numeric.
struct Dataset {
  Eigen::MatrixXd features;
  std::vector<int> labels;
  std::vector<std::string> class_names;
  std::vector<ColumnMeta> columns;
  std::vector<std::string> row_ids;

  Eigen::Index rows() const { return features.rows(); }
  Eigen::Index cols() const { return features.cols(); }
  int class_count() const { return static_cast<int>(class_names.size()); }
  std::vector<int> class_counts() const;
  bool is_encoded() const;

  // Rows in the given order. Class alphabet is kept as is.
  Dataset subset(std::span<const Eigen::Index> rows) const;

  // Logical feature of every column: a one-hot group maps to a single feature.
  std::vector<int> logical_features() const;
  int logical_feature_count() const;

  // Throws DataError when an invariant is broken.
  void validate() const;
};

struct CsvSchema {
  std::string label_column;
  // Empty: row ids are the 0-based data row numbers.
  std::string id_column;
  std::vector<std::string> categorical;
  std::vector<std::string> ignore;
  char delimiter = ',';
  std::vector<std::string> missing_markers{"", "NA"};
  MissingPolicy missing_policy = MissingPolicy::error;
};

Dataset load_csv(const std::filesystem::path& path, const CsvSchema& schema);

// Replaces each categorical column by a one-hot group and imputes missing
// numerics. Idempotent on already-encoded data.
Dataset encode(const Dataset& dataset, MissingPolicy missing_policy);

// Keeps rows whose class name is in `keep`; labels are re-indexed densely in
// the original class order.
Dataset filter_classes(const Dataset& dataset, const std::vector<std::string>& keep);

struct FoldPlan {
  int k_folds = 0;
  std::vector<int> assignments;
  std::uint64_t seed = 0;

  std::vector<Eigen::Index> train_indices(int fold) const;
  std::vector<Eigen::Index> test_indices(int fold) const;
};

FoldPlan stratified_folds(std::span<const int> labels, int k, std::uint64_t seed);
FoldPlan stratified_folds(const Dataset& dataset, int k, std::uint64_t seed);

// Three Gaussian clusters with 14 numeric and 2 categorical (un-encoded)
// columns; a stand-in for proprietary multi-class tabular data.
Dataset synth_three_class(int n, std::uint64_t seed);

// Versioned binary snapshot.
void save_cache(const Dataset& dataset, const std::filesystem::path& path);
Dataset load_cache(const std::filesystem::path& path);

// FNV-1a over the feature matrix and row ids.
std::uint64_t feature_hash(const Dataset& dataset);

}  // namespace rfexplain
