#pragma once

#include <Eigen/Dense>

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "rfexplain/proximity.hpp"

namespace rfexplain {

enum class PrototypeMethod { hdp, kmedoids };

std::string to_string(PrototypeMethod method);
PrototypeMethod parse_method(std::string_view text);

struct PrototypeSet {
  std::vector<std::vector<Eigen::Index>> per_class;
  PrototypeMethod method = PrototypeMethod::kmedoids;
  DistanceBackend backend = DistanceBackend::gap;
  // Set when a class ran out of rows before reaching its quota.
  std::vector<bool> exhausted;

  // All prototypes, sorted by row index.
  std::vector<Eigen::Index> pooled() const;
  std::size_t total() const;
  std::vector<int> counts() const;
  bool contains(Eigen::Index row) const;
};

struct CriticSet {
  std::vector<Eigen::Index> indices;  // descending witness
  std::vector<double> witness_values;
};

struct FactualPair {
  Eigen::Index query = -1;
  Eigen::Index semi_factual = -1;
  Eigen::Index counter_factual = -1;
  DistanceBackend backend = DistanceBackend::gap;
};

// Default neighbour count removed with each HDP pick: ceil(size / (2 quota)),
// lowered to floor(size / quota) - 1 when needed so the quota stays reachable.
// Quotas above size / 2 cannot be met with k >= 1 and end exhausted.
int default_hdp_neighbors(int class_size, int quota);

// High-density-point prototypes. `similarity` is read row-wise: similarity(i, j)
// is how close j is to candidate i. Pass k_neighbors = nullopt for the
// per-class default.
PrototypeSet hdp_prototypes(const Eigen::Ref<const Eigen::MatrixXd>& similarity,
                            std::span<const int> labels, std::span<const int> n_per_class,
                            std::optional<int> k_neighbors = std::nullopt);
PrototypeSet hdp_prototypes(const ProximityMatrix& proximity, std::span<const int> labels,
                            std::span<const int> n_per_class,
                            std::optional<int> k_neighbors = std::nullopt);
PrototypeSet hdp_prototypes(const DistanceMatrix& distance, std::span<const int> labels,
                            std::span<const int> n_per_class,
                            std::optional<int> k_neighbors = std::nullopt);

// Sum over rows of the distance to the nearest medoid.
double kmedoids_objective(const Eigen::Ref<const Eigen::MatrixXd>& distance,
                          std::span<const Eigen::Index> rows, std::span<const Eigen::Index> medoids);

// Per class: greedy BUILD initialization followed by steepest-descent PAM
// swaps until no swap improves the objective or max_swaps is spent. Classes
// with at most 5000 candidate medoid sets are solved exactly instead, unless
// max_swaps is 0 (BUILD only).
PrototypeSet kmedoids_prototypes(const DistanceMatrix& distance, std::span<const int> labels,
                                 std::span<const int> n_per_class, int max_swaps = 1000);

// Mean similarity to all rows minus mean similarity to the pooled prototypes.
double witness(Eigen::Index row, const PrototypeSet& prototypes,
               const Eigen::Ref<const Eigen::MatrixXd>& similarity);
Eigen::VectorXd witness_all(const PrototypeSet& prototypes,
                            const Eigen::Ref<const Eigen::MatrixXd>& similarity);

enum class CriticScope { pooled, per_class };

// Highest-witness non-prototype rows, descending, ties by lower index. With
// per_class scope m_critics are taken from every class.
CriticSet select_critics(const PrototypeSet& prototypes,
                         const Eigen::Ref<const Eigen::MatrixXd>& similarity, int m_critics,
                         CriticScope scope = CriticScope::pooled,
                         std::span<const int> labels = {});

Eigen::Index semi_factual(Eigen::Index query, const DistanceMatrix& distance, std::span<const int> labels);
Eigen::Index counter_factual(Eigen::Index query, const DistanceMatrix& distance,
                             std::span<const int> labels);
FactualPair factual_pair(Eigen::Index query, const DistanceMatrix& distance, std::span<const int> labels);

// Class of the globally nearest prototype given distances from x to every
// training row; ties go to the lower prototype row index.
int nearest_prototype_predict(const Eigen::Ref<const Eigen::VectorXd>& distances_to_train,
                              const PrototypeSet& prototypes, std::span<const int> train_labels);

struct ExplanationBundle {
  std::vector<std::string> row_ids;
  std::vector<std::string> class_names;
  std::vector<PrototypeSet> prototypes;
  std::vector<CriticSet> critics;  // critics[i] was induced by prototypes[i]
  std::vector<FactualPair> factuals;
};

// Rows are referenced by id in JSON; reading resolves ids against `row_ids`.
nlohmann::json to_json(const ExplanationBundle& bundle);
ExplanationBundle bundle_from_json(const nlohmann::json& j, const std::vector<std::string>& row_ids,
                                   const std::vector<std::string>& class_names);

}  // namespace rfexplain
