#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "rfexplain/data.hpp"
#include "rfexplain/forest.hpp"

namespace rfexplain {

enum class ProximityKind { original, oob, gap, gap_sym };
enum class DistanceBackend { l2, original, oob, gap };

std::string to_string(ProximityKind kind);
std::string to_string(DistanceBackend backend);
DistanceBackend parse_backend(std::string_view text);
ProximityKind proximity_kind(DistanceBackend backend);  // throws for l2

using BoolMatrix = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;

// Undefined entries (OOB pairs never out-of-bag together, GAP rows whose
// anchor is in-bag in every tree) hold 0 and are flagged false in `defined`.
struct ProximityMatrix {
  Eigen::MatrixXd values;
  BoolMatrix defined;
  ProximityKind kind = ProximityKind::original;

  Eigen::Index size() const { return values.rows(); }
  bool row_defined(Eigen::Index i) const { return defined.row(i).any(); }
};

struct DistanceMatrix {
  Eigen::MatrixXd values;
  DistanceBackend backend = DistanceBackend::l2;

  Eigen::Index size() const { return values.rows(); }
  double operator()(Eigen::Index i, Eigen::Index j) const { return values(i, j); }
};

// Share of trees in which rows i and j land in the same leaf.
ProximityMatrix proximity_original(const TrainedForest& forest);
// Same, counted only over trees where both rows are out-of-bag.
ProximityMatrix proximity_oob(const TrainedForest& forest);
// Geometry- and accuracy-preserving proximity: for each tree where i is OOB,
// i's leaf distributes unit mass over in-bag rows proportionally to their
// training weight (multiplicity times class weight); rows are averaged over
// those trees and sum to 1. Class sums of row i equal its OOB vote.
ProximityMatrix proximity_gap(const TrainedForest& forest);
ProximityMatrix compute_proximity(const TrainedForest& forest, ProximityKind kind);

// Proximities from unseen rows (m x k) to the n training rows. Unseen rows
// are out-of-bag in every tree.
Eigen::MatrixXd extend_proximity(const TrainedForest& forest,
                                 const Eigen::Ref<const Eigen::MatrixXd>& rows, ProximityKind kind);
Eigen::VectorXd extend_gap(const TrainedForest& forest, const Eigen::Ref<const Eigen::RowVectorXd>& x);

// d = 1 - p with GAP symmetrized first and the diagonal forced to 0.
DistanceMatrix to_distance(const ProximityMatrix& proximity);

// z-scores fitted on one split and applied to others. One-hot columns pass
// through; zero-variance numeric columns are dropped (mapped to 0).
struct Standardizer {
  Eigen::RowVectorXd mean;
  Eigen::RowVectorXd scale;  // 0 excludes the column

  static Standardizer fit(const Dataset& dataset);
  Eigen::MatrixXd apply(const Eigen::Ref<const Eigen::MatrixXd>& rows) const;
};

// Pairwise Euclidean distances between the rows of `a` and the rows of `b`.
template <typename DerivedA, typename DerivedB>
Eigen::Matrix<typename DerivedA::Scalar, Eigen::Dynamic, Eigen::Dynamic> euclidean_cross(
    const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b) {
  using Scalar = typename DerivedA::Scalar;
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> out(a.rows(), b.rows());
  for (Eigen::Index j = 0; j < b.rows(); ++j) {
    out.col(j) = (a.rowwise() - b.row(j)).rowwise().norm();
  }
  return out;
}

DistanceMatrix l2_distance(const Dataset& dataset);
DistanceMatrix l2_distance(const Dataset& dataset, const Standardizer& standardizer);

void write_matrix_csv(const std::filesystem::path& path, const Eigen::Ref<const Eigen::MatrixXd>& values,
                      const std::vector<std::string>& row_ids, const std::vector<std::string>& col_ids);

struct LabeledMatrix {
  Eigen::MatrixXd values;
  std::vector<std::string> row_ids;
  std::vector<std::string> col_ids;
};
LabeledMatrix read_matrix_csv(const std::filesystem::path& path);

// Binary cache keyed by forest hash and kind; load throws ModelMismatchError
// when either key differs.
void save_proximity_cache(const ProximityMatrix& proximity, std::uint64_t forest_key,
                          const std::filesystem::path& path);
ProximityMatrix load_proximity_cache(const std::filesystem::path& path, std::uint64_t forest_key,
                                     ProximityKind kind);

}  // namespace rfexplain
