#pragma once

#include <Eigen/Dense>

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "rfexplain/data.hpp"
#include "rfexplain/error.hpp"
#include "rfexplain/explain.hpp"
#include "rfexplain/forest.hpp"
#include "rfexplain/proximity.hpp"

namespace rfexplain {

// Running mean that keeps masked (undefined) items out of the mean but counts them.
struct MetricStat {
  double sum = 0.0;
  std::size_t count = 0;
  std::size_t masked = 0;

  void add(std::optional<double> value) {
    if (value) {
      sum += *value;
      ++count;
    } else {
      ++masked;
    }
  }
  std::optional<double> mean() const {
    if (count == 0) return std::nullopt;
    return sum / static_cast<double>(count);
  }
};

inline double pair_distance(Eigen::Index q, Eigen::Index e, const DistanceMatrix& distance) {
  return distance(q, e);
}

// Column -> logical feature map; a one-hot group is one feature.
struct FeatureLayout {
  std::vector<int> logical;
  std::vector<bool> onehot;
  int feature_count = 0;

  static FeatureLayout from(const Dataset& dataset);
};

// 1 / (number of logical features that differ); nullopt when none differ.
std::optional<double> sparsity(const Eigen::Ref<const Eigen::RowVectorXd>& q,
                               const Eigen::Ref<const Eigen::RowVectorXd>& e,
                               const FeatureLayout& layout, double numeric_tol = 0.0);

// Distance from e to its nearest reference row.
double ood_distance(Eigen::Index e, const DistanceMatrix& distance, bool exclude_self = true);

// Same-class row count over the sum of squared same-class proximities, e
// excluded from both; nullopt when the denominator is 0.
std::optional<double> outlier_score(Eigen::Index e, const ProximityMatrix& proximity,
                                    std::span<const int> labels);

template <typename Derived>
double diversity(std::span<const Eigen::Index> rows, const Eigen::MatrixBase<Derived>& distance) {
  if (rows.empty()) throw DataError("diversity of an empty set");
  if (rows.size() == 1) return 0.0;
  double total = 0.0;
  for (std::size_t a = 0; a < rows.size(); ++a) {
    for (std::size_t b = a + 1; b < rows.size(); ++b) total += distance(rows[a], rows[b]);
  }
  return total / (static_cast<double>(rows.size()) * static_cast<double>(rows.size() - 1) / 2.0);
}
inline double diversity(std::span<const Eigen::Index> rows, const DistanceMatrix& distance) {
  return diversity(rows, distance.values);
}

struct Neighborhood {
  enum class Mode { knn, radius };
  Mode mode = Mode::knn;
  int k = 10;
  double radius = 0.0;
};

// max over neighbours of ||f(q) - f(x)||_2 / d(q, x) with f the forest class
// probabilities (rows of `train_proba`). Zero-distance neighbours with equal f
// are skipped; with different f the value is undefined (nullopt).
std::optional<double> robustness(Eigen::Index q, const Eigen::Ref<const Eigen::MatrixXd>& train_proba,
                                 const DistanceMatrix& distance, const Neighborhood& neighborhood);
std::optional<double> robustness(Eigen::Index q, const TrainedForest& forest, const Dataset& train,
                                 const DistanceMatrix& distance, const Neighborhood& neighborhood);

// For each pooled prototype (row-index order): same-class rows whose nearest
// same-class prototype it is, the prototype itself excluded.
std::vector<std::vector<Eigen::Index>> prototype_assignment(const PrototypeSet& prototypes,
                                                            const DistanceMatrix& distance,
                                                            std::span<const int> labels);

double compactness(Eigen::Index prototype, std::span<const Eigen::Index> assigned,
                   const DistanceMatrix& distance);

// Weighted F1 of the nearest-prototype predictor; `test_to_train` holds the
// distances from each test row to every training row.
double nearest_prototype_f1(const PrototypeSet& prototypes,
                            const Eigen::Ref<const Eigen::MatrixXd>& test_to_train,
                            std::span<const int> train_labels, std::span<const int> test_labels);

// explanans -> metric -> backend -> statistic. Metrics that do not depend on
// a distance use the backend key "-".
class MetricReport {
 public:
  using BackendMap = std::map<std::string, MetricStat>;
  using MetricMap = std::map<std::string, BackendMap>;

  void add(const std::string& explanans, const std::string& metric, const std::string& backend,
           std::optional<double> value) {
    entries_[explanans][metric][backend].add(value);
  }
  const MetricStat* find(const std::string& explanans, const std::string& metric,
                         const std::string& backend) const;
  std::optional<double> mean(const std::string& explanans, const std::string& metric,
                             const std::string& backend) const;
  const std::map<std::string, MetricMap>& entries() const { return entries_; }

  nlohmann::json to_json() const;
  static MetricReport from_json(const nlohmann::json& j);
  // Flat rows: scope,explanans,metric,backend,mean,count,masked
  std::string to_csv(const std::string& scope) const;

  // Mean of the per-report means, with counts and masked counts summed.
  static MetricReport average(const std::vector<MetricReport>& reports);

 private:
  std::map<std::string, MetricMap> entries_;
};

}  // namespace rfexplain
