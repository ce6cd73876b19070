#include <gtest/gtest.h>

#include <algorithm>

#include "oracles.hpp"
#include "rfexplain/error.hpp"
#include "rfexplain/forest.hpp"
#include "rfexplain/proximity.hpp"

using namespace rfexplain;

namespace {

// Forest with only the bookkeeping proximities read; nodes are a single leaf
// placeholder, so routing is never exercised.
TrainedForest bookkeeping_forest(const std::vector<std::vector<int>>& inbag,
                                 const std::vector<std::vector<int>>& leaf_of) {
  TrainedForest forest;
  forest.class_count = 2;
  forest.feature_count = 1;
  const auto n = inbag.front().size();
  forest.train_labels.assign(n, 0);
  for (std::size_t t = 0; t < inbag.size(); ++t) {
    TreeRecord tree;
    tree.nodes.push_back(TreeNode{-1, 0.0, -1, -1, 0});
    tree.inbag = Eigen::Map<const Eigen::VectorXi>(inbag[t].data(), static_cast<Eigen::Index>(n));
    tree.leaf_of = Eigen::Map<const Eigen::VectorXi>(leaf_of[t].data(), static_cast<Eigen::Index>(n));
    tree.leaf_votes = Eigen::MatrixXd::Constant(tree.leaf_of.maxCoeff() + 1, 2, 0.5);
    forest.trees.push_back(tree);
  }
  return forest;
}

ForestParams small_params(int trees, std::uint64_t seed) {
  ForestParams p;
  p.n_trees = trees;
  p.seed = seed;
  return p;
}

int class_argmax(const Eigen::Ref<const Eigen::VectorXd>& row, const std::vector<int>& labels, int classes) {
  Eigen::VectorXd votes = Eigen::VectorXd::Zero(classes);
  for (Eigen::Index j = 0; j < row.size(); ++j) votes(labels[static_cast<std::size_t>(j)]) += row(j);
  Eigen::Index best = 0;
  votes.maxCoeff(&best);
  return static_cast<int>(best);
}

}  // namespace

TEST(Proximity, MatchesNaiveOraclesOnRandomForests) {
  Rng rng(2024);
  for (int trial = 0; trial < 25; ++trial) {
    const int n = 6 + static_cast<int>(uniform_index(rng, 15));
    const int k = 1 + static_cast<int>(uniform_index(rng, 4));
    const int trees = 1 + static_cast<int>(uniform_index(rng, 10));
    const auto ds = oracle::random_dataset(rng, n, k, 2);
    const auto forest = fit(ds, small_params(trees, rng()), 1);
    EXPECT_LE((proximity_original(forest).values - oracle::original(forest, ds.features)).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LE((proximity_oob(forest).values - oracle::oob(forest, ds.features)).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LE((proximity_gap(forest).values - oracle::gap(forest, ds.features)).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Proximity, OriginalSingleTreeAndDiagonal) {
  const auto forest = bookkeeping_forest({{1, 1, 1, 1}}, {{0, 0, 1, 1}});
  const auto p = proximity_original(forest);
  EXPECT_DOUBLE_EQ(p.values(0, 1), 1.0);
  EXPECT_DOUBLE_EQ(p.values(0, 2), 0.0);
  for (Eigen::Index i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(p.values(i, i), 1.0);
  EXPECT_TRUE(p.values.isApprox(p.values.transpose(), 0));
}

TEST(Proximity, OobCountsAndMask) {
  // Rows 0 and 1 are OOB together in both trees and share a leaf only in tree 0.
  // Row 3 is never OOB.
  const auto forest = bookkeeping_forest({{0, 0, 2, 2}, {0, 0, 3, 1}}, {{0, 0, 1, 1}, {0, 1, 0, 1}});
  const auto p = proximity_oob(forest);
  EXPECT_DOUBLE_EQ(p.values(0, 1), 0.5);
  EXPECT_TRUE(p.defined(0, 1));
  EXPECT_FALSE(p.defined(0, 3));
  EXPECT_DOUBLE_EQ(p.values(0, 3), 0.0);
  EXPECT_TRUE(p.values.isApprox(p.values.transpose(), 0));
}

TEST(Proximity, GapHandTracedTwoTreeForest) {
  const auto forest = bookkeeping_forest({{2, 0, 1, 1, 0, 2}, {0, 1, 1, 2, 1, 1}},
                                         {{0, 0, 0, 1, 1, 1}, {0, 1, 0, 1, 0, 1}});
  const auto p = proximity_gap(forest);
  // Row 1: OOB in tree 0 only, leaf {0,1,2} with in-bag mass 2 + 1.
  EXPECT_DOUBLE_EQ(p.values(1, 0), 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(p.values(1, 2), 1.0 / 3.0);
  // Row 4: OOB in tree 0 only, leaf {3,4,5} with mass 1 + 2.
  EXPECT_DOUBLE_EQ(p.values(4, 3), 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(p.values(4, 5), 2.0 / 3.0);
  // Row 0: OOB in tree 1 only, leaf {0,2,4} with mass 1 + 1.
  EXPECT_DOUBLE_EQ(p.values(0, 2), 0.5);
  EXPECT_DOUBLE_EQ(p.values(0, 4), 0.5);
  for (Eigen::Index i : {2, 3, 5}) {
    EXPECT_FALSE(p.row_defined(i));
    EXPECT_DOUBLE_EQ(p.values.row(i).sum(), 0.0);
  }
  for (Eigen::Index i : {0, 1, 4}) EXPECT_DOUBLE_EQ(p.values.row(i).sum(), 1.0);
}

TEST(Proximity, GapRowSumsAndZeroDiagonal) {
  const auto ds = encode(synth_three_class(120, 3), MissingPolicy::error);
  const auto forest = fit(ds, small_params(60, 4), 1);
  const auto p = proximity_gap(forest);
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    EXPECT_EQ(p.values(i, i), 0.0);
    if (p.row_defined(i)) EXPECT_NEAR(p.values.row(i).sum(), 1.0, 1e-9);
  }
  EXPECT_GE(p.values.minCoeff(), 0.0);
  EXPECT_LE(p.values.maxCoeff(), 1.0);
}

TEST(Proximity, GapRecoversOobPredictions) {
  const auto ds = encode(synth_three_class(150, 7), MissingPolicy::error);
  const auto forest = fit(ds, small_params(200, 5), 0);
  const auto p = proximity_gap(forest);
  const auto oob = oob_predict(forest);
  int defined = 0;
  int agree = 0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    if (!p.row_defined(i)) continue;
    ++defined;
    agree += class_argmax(p.values.row(i).transpose(), ds.labels, 3) == oob[static_cast<std::size_t>(i)];
  }
  ASSERT_GT(defined, 0);
  EXPECT_GE(static_cast<double>(agree) / defined, 0.99);
}

TEST(Proximity, OriginalInvariantUnderTreePermutation) {
  Rng rng(4);
  const auto ds = oracle::random_dataset(rng, 15, 3, 2);
  auto forest = fit(ds, small_params(9, 8), 1);
  const auto before = proximity_original(forest).values;
  std::reverse(forest.trees.begin(), forest.trees.end());
  std::swap(forest.trees[1], forest.trees[4]);
  EXPECT_LE((proximity_original(forest).values - before).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(ToDistance, SymmetrizesGapAndPinsDiagonal) {
  ProximityMatrix p;
  p.kind = ProximityKind::gap;
  p.values = Eigen::MatrixXd::Zero(3, 3);
  p.values(0, 1) = 0.2;
  p.values(1, 0) = 0.4;
  p.values(0, 2) = 0.8;
  p.values(2, 0) = 0.8;
  p.defined = BoolMatrix::Constant(3, 3, true);
  const auto d = to_distance(p);
  EXPECT_DOUBLE_EQ(d(0, 1), 0.7);
  EXPECT_DOUBLE_EQ(d(1, 0), 0.7);
  for (Eigen::Index i = 0; i < 3; ++i) EXPECT_EQ(d(i, i), 0.0);
  EXPECT_DOUBLE_EQ(d(1, 2), 1.0);  // no evidence of similarity

  ProximityMatrix ones;
  ones.kind = ProximityKind::original;
  ones.values = Eigen::MatrixXd::Ones(2, 2);
  ones.defined = BoolMatrix::Constant(2, 2, true);
  EXPECT_DOUBLE_EQ(to_distance(ones)(0, 1), 0.0);
}

TEST(ToDistance, MetricSanityOnEveryKind) {
  Rng rng(10);
  const auto ds = oracle::random_dataset(rng, 25, 3, 3);
  const auto forest = fit(ds, small_params(30, 2), 1);
  for (auto kind : {ProximityKind::original, ProximityKind::oob, ProximityKind::gap}) {
    const auto d = to_distance(compute_proximity(forest, kind));
    EXPECT_TRUE(d.values.isApprox(d.values.transpose(), 0)) << to_string(kind);
    EXPECT_TRUE(d.values.diagonal().isZero(0));
    EXPECT_GE(d.values.minCoeff(), 0.0);
    EXPECT_LE(d.values.maxCoeff(), 1.0);
  }
}

TEST(ExtendProximity, OriginalOnTrainingRowsEqualsMatrix) {
  Rng rng(11);
  const auto ds = oracle::random_dataset(rng, 18, 3, 2);
  const auto forest = fit(ds, small_params(12, 3), 1);
  const Eigen::MatrixXd extended = extend_proximity(forest, ds.features, ProximityKind::original);
  EXPECT_LE((extended - proximity_original(forest).values).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(ExtendGap, RowSumsAndAlwaysOobRow) {
  Rng rng(12);
  const auto ds = oracle::random_dataset(rng, 16, 2, 2);
  const auto forest = fit(ds, small_params(10, 6), 1);
  for (int trial = 0; trial < 10; ++trial) {
    Eigen::RowVectorXd x(2);
    x << uniform_unit(rng) * 6 - 0.5, uniform_unit(rng) * 6 - 0.5;
    EXPECT_NEAR(extend_gap(forest, x).sum(), 1.0, 1e-12);
  }
  EXPECT_THROW(extend_gap(forest, Eigen::RowVectorXd::Zero(3)), DataError);

  // A training row that is OOB in every tree has an extended row equal to its
  // own GAP row. Make row r OOB everywhere by moving its in-bag copies to a
  // same-class leaf-mate, which keeps every weighted leaf mass intact.
  int checked = 0;
  for (Eigen::Index r = 0; r < ds.rows(); ++r) {
    auto all_oob = forest;
    bool usable = true;
    for (auto& tree : all_oob.trees) {
      if (tree.inbag(r) == 0) continue;
      bool moved = false;
      for (Eigen::Index j = 0; j < tree.inbag.size() && !moved; ++j) {
        if (j != r && tree.leaf_of(j) == tree.leaf_of(r) &&
            ds.labels[static_cast<std::size_t>(j)] == ds.labels[static_cast<std::size_t>(r)]) {
          tree.inbag(j) += tree.inbag(r);
          tree.inbag(r) = 0;
          moved = true;
        }
      }
      usable = usable && moved;
    }
    if (!usable) continue;
    ++checked;
    const Eigen::VectorXd extended = extend_gap(all_oob, ds.features.row(r));
    const Eigen::VectorXd own = proximity_gap(all_oob).values.row(r).transpose();
    EXPECT_LE((extended - own).cwiseAbs().maxCoeff(), 1e-12);
  }
  EXPECT_GT(checked, 0);
}

TEST(Proximity, GapClassSumsEqualWeightedOobVotes) {
  // Imbalanced classes and shallow trees: impure leaves with balanced weights.
  const auto full = encode(synth_three_class(150, 9), MissingPolicy::error);
  std::vector<Eigen::Index> keep;
  int minority = 0;
  for (Eigen::Index i = 0; i < full.rows(); ++i) {
    if (full.labels[static_cast<std::size_t>(i)] != 2 || minority++ < 12) keep.push_back(i);
  }
  const auto ds = full.subset(keep);
  auto params = small_params(40, 8);
  params.max_depth = 2;
  const auto forest = fit(ds, params, 1);
  const auto p = proximity_gap(forest);
  const auto oob = oob_predict(forest);
  const Eigen::VectorXi oob_trees = forest.oob_tree_counts();
  int agree = 0;
  int defined = 0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    if (!p.row_defined(i)) continue;
    ++defined;
    Eigen::VectorXd sums = Eigen::VectorXd::Zero(3);
    for (Eigen::Index j = 0; j < p.size(); ++j) sums(ds.labels[static_cast<std::size_t>(j)]) += p.values(i, j);
    Eigen::VectorXd votes = Eigen::VectorXd::Zero(3);
    for (const auto& tree : forest.trees) {
      if (tree.inbag(i) == 0) votes += tree.leaf_votes.row(tree.leaf_of(i)).transpose();
    }
    votes /= oob_trees(i);
    EXPECT_LE((sums - votes).cwiseAbs().maxCoeff(), 1e-12);
    agree += class_argmax(p.values.row(i).transpose(), ds.labels, 3) == oob[static_cast<std::size_t>(i)];
  }
  ASSERT_GT(defined, 0);
  EXPECT_GE(agree, defined * 99 / 100);
}

TEST(ExtendGap, ClassVoteAgreesWithForestOnHeldOutRows) {
  const auto ds = encode(synth_three_class(300, 12), MissingPolicy::error);
  const auto plan = stratified_folds(ds, 5, 3);
  const auto train = ds.subset(plan.train_indices(0));
  const auto test = ds.subset(plan.test_indices(0));
  const auto forest = fit(train, small_params(150, 9), 0);
  const auto predicted = predict(forest, test.features);
  const Eigen::MatrixXd rows = extend_proximity(forest, test.features, ProximityKind::gap);
  int agree = 0;
  for (Eigen::Index i = 0; i < test.rows(); ++i) {
    agree += class_argmax(rows.row(i).transpose(), train.labels, 3) == predicted[static_cast<std::size_t>(i)];
  }
  EXPECT_GE(static_cast<double>(agree) / static_cast<double>(test.rows()), 0.99);
}

TEST(L2Distance, HandArithmetic) {
  Eigen::MatrixXd x(2, 1);
  x << -1, 1;  // population z-scores are exactly -1 and +1
  const auto two = oracle::numeric_dataset(x, {0, 1}, 2);
  EXPECT_DOUBLE_EQ(l2_distance(two)(0, 1), 2.0);

  Eigen::MatrixXd four(4, 2);
  four << 0, 0, 2, 0, 0, 4, 2, 4;
  const auto ds = oracle::numeric_dataset(four, {0, 1, 0, 1}, 2);
  const auto s = Standardizer::fit(ds);
  const Eigen::MatrixXd z = s.apply(ds.features);
  // Column means (1, 2); population std (1, 2).
  EXPECT_DOUBLE_EQ(z(3, 0), 1.0);
  EXPECT_DOUBLE_EQ(z(3, 1), 1.0);
  const auto d = l2_distance(ds);
  EXPECT_DOUBLE_EQ(d(0, 1), 2.0);
  EXPECT_DOUBLE_EQ(d(0, 2), 2.0);
  EXPECT_NEAR(d(0, 3), std::sqrt(8.0), 1e-15);
  EXPECT_DOUBLE_EQ(d(1, 1), 0.0);
}

TEST(L2Distance, ZeroVarianceAndOneHotColumns) {
  Eigen::MatrixXd x(3, 3);
  x << 5, 1, 0,  //
      5, 0, 1,   //
      5, 1, 0;
  auto ds = oracle::numeric_dataset(x, {0, 1, 0}, 2);
  ds.columns[1].kind = ColumnKind::onehot;
  ds.columns[1].group = 0;
  ds.columns[2].kind = ColumnKind::onehot;
  ds.columns[2].group = 0;
  const auto d = l2_distance(ds);
  EXPECT_DOUBLE_EQ(d(0, 2), 0.0);
  EXPECT_NEAR(d(0, 1), std::sqrt(2.0), 1e-15);  // one-hot columns are not rescaled
}

TEST(MatrixCsv, RoundTrip) {
  const auto dir = oracle::scratch_dir("matrix");
  Eigen::MatrixXd m(2, 3);
  m << 0.1, 1.0 / 3.0, 2, 1e-17, -4.5, 7;
  write_matrix_csv(dir / "m.csv", m, {"a", "b"}, {"x", "y", "z"});
  const auto back = read_matrix_csv(dir / "m.csv");
  EXPECT_EQ(back.values, m);
  EXPECT_EQ(back.row_ids, (std::vector<std::string>{"a", "b"}));
  EXPECT_EQ(back.col_ids, (std::vector<std::string>{"x", "y", "z"}));
}

TEST(ProximityCache, RoundTripAndKeyMismatch) {
  const auto dir = oracle::scratch_dir("prox-cache");
  Rng rng(13);
  const auto ds = oracle::random_dataset(rng, 10, 2, 2);
  const auto forest = fit(ds, small_params(6, 1), 1);
  const auto p = proximity_oob(forest);
  const auto key = forest_hash(forest);
  save_proximity_cache(p, key, dir / "p.bin");
  const auto back = load_proximity_cache(dir / "p.bin", key, ProximityKind::oob);
  EXPECT_EQ(back.values, p.values);
  EXPECT_TRUE((back.defined == p.defined).all());
  EXPECT_THROW(load_proximity_cache(dir / "p.bin", key + 1, ProximityKind::oob), ModelMismatchError);
  EXPECT_THROW(load_proximity_cache(dir / "p.bin", key, ProximityKind::gap), ModelMismatchError);
}

TEST(Backend, ParseAndNames) {
  for (auto b : {DistanceBackend::l2, DistanceBackend::original, DistanceBackend::oob, DistanceBackend::gap}) {
    EXPECT_EQ(parse_backend(to_string(b)), b);
  }
  EXPECT_THROW(parse_backend("cosine"), ConfigError);
  EXPECT_THROW(proximity_kind(DistanceBackend::l2), ConfigError);
}
