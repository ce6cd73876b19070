#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "rfexplain/data.hpp"
#include "rfexplain/explain.hpp"
#include "rfexplain/forest.hpp"
#include "rfexplain/metrics.hpp"
#include "rfexplain/proximity.hpp"

namespace rfexplain {

inline constexpr int kConfigVersion = 1;

struct DatasetSpec {
  enum class Source { csv, synthetic };
  Source source = Source::csv;
  std::string name;
  std::filesystem::path path;
  CsvSchema schema;
  std::vector<std::string> keep_classes;  // empty keeps every class
  int synthetic_rows = 300;
  std::uint64_t synthetic_seed = 1;
};

struct ExperimentConfig {
  DatasetSpec dataset;
  int k_folds = 5;
  std::uint64_t seed = 0;

  ParamGrid grid;
  int grid_folds = 5;

  std::vector<DistanceBackend> selection_backends{DistanceBackend::l2, DistanceBackend::original,
                                                  DistanceBackend::oob, DistanceBackend::gap};
  std::vector<PrototypeMethod> methods{PrototypeMethod::hdp, PrototypeMethod::kmedoids};
  int count_min = 1;
  int count_max = 10;
  int tune_folds = 5;  // the inner split holds out 1 / tune_folds of the training fold
  std::optional<int> hdp_neighbors;

  std::optional<int> critic_count;  // nullopt: total prototype count
  CriticScope critic_scope = CriticScope::pooled;

  std::vector<DistanceBackend> eval_backends{DistanceBackend::l2, DistanceBackend::gap};
  double numeric_tol = 0.0;
  bool ood_exclude_self = true;
  Neighborhood neighborhood;

  bool mds_enabled = true;
  DistanceBackend mds_backend = DistanceBackend::gap;
  PrototypeMethod mds_method = PrototypeMethod::kmedoids;
  int mds_max_iter = 300;
  std::string mds_query;  // row id; empty uses the first training row of fold 0

  std::filesystem::path output_dir = "rfx-out";
  int threads = 0;

  // Throws ConfigError naming the field.
  void validate() const;
  // Canonical key = value text; parse_config(to_text()) round-trips.
  std::string to_text() const;
  std::uint64_t hash() const;
};

ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);

// Encoded dataset as described by the config, classes filtered.
Dataset load_dataset(const DatasetSpec& spec);

// Explanans keys used in metric reports.
std::string prototype_key(PrototypeMethod method, DistanceBackend backend);
std::string critic_key(PrototypeMethod method, DistanceBackend backend);
std::string semi_key(DistanceBackend backend);
std::string counter_key(DistanceBackend backend);

struct TuneResult {
  int count = 0;
  std::vector<int> candidates;
  std::vector<double> f1;  // parallel to candidates
};

// Per-class prototype count maximizing nearest-prototype F1 on an inner
// stratified split of the training rows; ties go to the smaller count.
// Counts above the smallest inner-train class are skipped.
// `similarity` feeds HDP; the distance feeds k-medoids and the nearest-prototype
// predictor. Without it HDP uses 1 - d.
TuneResult tune_prototype_count(const DistanceMatrix& distance, std::span<const int> labels,
                                PrototypeMethod method, int count_min, int count_max, int inner_folds,
                                std::uint64_t seed, std::optional<int> hdp_neighbors = std::nullopt);
TuneResult tune_prototype_count(const DistanceMatrix& distance, const Eigen::Ref<const Eigen::MatrixXd>& similarity,
                                std::span<const int> labels, PrototypeMethod method, int count_min, int count_max,
                                int inner_folds, std::uint64_t seed, std::optional<int> hdp_neighbors = std::nullopt);

// Similarity used by HDP and the witness: the raw forest proximity when given,
// otherwise 1 - d.
Eigen::MatrixXd selection_similarity(const DistanceMatrix& distance, const ProximityMatrix* proximity);

struct Failure {
  int fold = -1;
  std::string stage;
  std::string message;
  ErrorCategory category = ErrorCategory::stage;
};

struct FoldResult {
  int fold = 0;
  ForestParams params;
  double cv_score = 0.0;
  double test_f1 = 0.0;
  TrainedForest forest;
  std::vector<Eigen::Index> train_rows;
  std::vector<Eigen::Index> test_rows;
  std::map<std::string, TuneResult> tuned;  // key: prototype_key
  ExplanationBundle bundle;
  MetricReport metrics;
};

struct EmbeddingRow {
  std::string row_id;
  double x = 0.0;
  double y = 0.0;
  std::string role;
  std::string class_name;
};

struct ExperimentResult {
  ExperimentConfig config;
  std::vector<std::string> class_names;
  Eigen::Index dataset_rows = 0;
  Eigen::Index dataset_features = 0;
  std::uint64_t data_hash = 0;
  std::vector<std::uint64_t> fold_seeds;
  std::vector<FoldResult> folds;
  MetricReport averaged;
  std::vector<EmbeddingRow> embedding;
  double embedding_stress = 0.0;
  std::optional<Failure> failure;

  bool ok() const { return !failure.has_value(); }
  double mean_test_f1() const;
  nlohmann::json report() const;
  std::uint64_t hash() const;
};

// Runs every fold; a failing stage is recorded in `failure` and the folds
// completed so far are kept.
ExperimentResult run_experiment(const ExperimentConfig& config);
ExperimentResult run_experiment(const ExperimentConfig& config, const Dataset& dataset);

// Writes report.json, metrics.csv, embedding.csv, forest_fold{i}.model and
// config.lock into `dir`; returns the written paths.
std::vector<std::filesystem::path> emit_reports(const ExperimentResult& result, const std::filesystem::path& dir);

std::string embedding_csv(const std::vector<EmbeddingRow>& rows);
std::string metrics_csv(const ExperimentResult& result);

}  // namespace rfexplain
