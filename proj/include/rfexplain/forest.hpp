#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "rfexplain/data.hpp"

namespace rfexplain {

enum class MaxFeaturesRule { sqrt, log2, fraction };

struct MaxFeatures {
  MaxFeaturesRule rule = MaxFeaturesRule::sqrt;
  double fraction = 1.0;

  // Number of candidate features per split, at least 1.
  int resolve(int n_features) const;
  std::string to_string() const;
  // "sqrt", "log2" or a fraction in (0, 1].
  static MaxFeatures parse(std::string_view text);
};

enum class ClassWeighting { none, balanced };

struct ForestParams {
  int n_trees = 100;
  MaxFeatures max_features;
  std::optional<int> max_depth;  // nullopt: grow until pure or min_leaf
  int min_leaf = 1;
  ClassWeighting class_weighting = ClassWeighting::balanced;
  std::uint64_t seed = 0;

  void validate() const;
};

struct TreeNode {
  int feature = -1;  // -1 for leaves
  double threshold = 0.0;
  int left = -1;
  int right = -1;
  int leaf = -1;  // dense leaf id for terminal nodes
};

// One bagged tree plus the bookkeeping proximities need: in-bag
// multiplicities c_j(t) and the terminal leaf of every training row.
struct TreeRecord {
  std::vector<TreeNode> nodes;
  Eigen::MatrixXd leaf_votes;  // leaf_count x L, rows are class distributions
  Eigen::VectorXi inbag;       // length n, sums to n
  Eigen::VectorXi leaf_of;     // length n

  int leaf_count() const { return static_cast<int>(leaf_votes.rows()); }
  bool is_oob(Eigen::Index row) const { return inbag(row) == 0; }

  template <typename Derived>
  int route(const Eigen::DenseBase<Derived>& x) const {
    int node = 0;
    while (nodes[static_cast<std::size_t>(node)].feature >= 0) {
      const auto& n = nodes[static_cast<std::size_t>(node)];
      node = x(n.feature) <= n.threshold ? n.left : n.right;
    }
    return nodes[static_cast<std::size_t>(node)].leaf;
  }

  int depth() const;
};

struct TrainedForest {
  std::vector<TreeRecord> trees;
  ForestParams params;
  int class_count = 0;
  int feature_count = 0;
  std::vector<std::string> train_row_ids;
  std::vector<int> train_labels;
  std::uint64_t train_feature_hash = 0;

  Eigen::Index sample_count() const { return static_cast<Eigen::Index>(train_labels.size()); }
  // |S_i|: number of trees in which each training row is out-of-bag.
  Eigen::VectorXi oob_tree_counts() const;
};

// threads <= 0 uses hardware concurrency.
TrainedForest fit(const Dataset& dataset, const ForestParams& params, int threads = 0);

inline constexpr int kUndefinedLabel = -1;

Eigen::VectorXd predict_proba_row(const TrainedForest& forest, const Eigen::Ref<const Eigen::RowVectorXd>& x);
Eigen::MatrixXd predict_proba(const TrainedForest& forest, const Eigen::Ref<const Eigen::MatrixXd>& rows);
std::vector<int> predict(const TrainedForest& forest, const Eigen::Ref<const Eigen::MatrixXd>& rows);

// Out-of-bag vote per training row; kUndefinedLabel where no tree has the row OOB.
std::vector<int> oob_predict(const TrainedForest& forest);

// Class weight each training row was fitted with (1 without balancing). A
// row's training weight in tree t is inbag(t) times this.
Eigen::VectorXd row_class_weights(const TrainedForest& forest);

// Support-weighted mean of per-class F1 over the classes present in `actual`.
double weighted_f1(std::span<const int> predicted, std::span<const int> actual);

struct ParamGrid {
  std::vector<int> n_trees{100, 300, 500};
  std::vector<MaxFeatures> max_features{
      {MaxFeaturesRule::sqrt, 1.0}, {MaxFeaturesRule::log2, 1.0}, {MaxFeaturesRule::fraction, 0.5}};
  std::vector<std::optional<int>> max_depth{8, 16, std::nullopt};
  int min_leaf = 1;
  ClassWeighting class_weighting = ClassWeighting::balanced;

  std::size_t size() const { return n_trees.size() * max_features.size() * max_depth.size(); }
  std::vector<ForestParams> expand(std::uint64_t seed) const;
};

struct GridSearchResult {
  ForestParams best;
  std::vector<ForestParams> candidates;
  Eigen::MatrixXd scores;  // candidates x folds, weighted F1
  Eigen::VectorXd mean_scores;
};

// Maximizes mean CV weighted F1; ties go to fewer trees, then shallower
// depth, then fewer candidate features.
GridSearchResult grid_search(const Dataset& dataset, const ParamGrid& grid, const FoldPlan& folds,
                             std::uint64_t seed, int threads = 0);

std::string hex64(std::uint64_t value);
std::uint64_t parse_hex64(const std::string& text);  // throws DataError

nlohmann::json params_to_json(const ForestParams& params);
ForestParams params_from_json(const nlohmann::json& j);

std::string to_json(const TrainedForest& forest);
TrainedForest forest_from_json(std::string_view text);
void save_model(const TrainedForest& forest, const std::filesystem::path& path);
TrainedForest load_model(const std::filesystem::path& path);
std::uint64_t forest_hash(const TrainedForest& forest);

}  // namespace rfexplain
