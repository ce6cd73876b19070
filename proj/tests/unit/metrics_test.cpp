#include <gtest/gtest.h>

#include <sstream>

#include "oracles.hpp"
#include "rfexplain/error.hpp"
#include "rfexplain/metrics.hpp"

using namespace rfexplain;

namespace {

DistanceMatrix matrix_of(const Eigen::MatrixXd& values) {
  DistanceMatrix d;
  d.values = values;
  return d;
}

DistanceMatrix random_distance(Rng& rng, int n) {
  Eigen::MatrixXd x(n, 2);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = standard_normal(rng);
  Eigen::MatrixXd d = euclidean_cross(x, x);
  d = ((d + d.transpose()) / 2.0).eval();
  d.diagonal().setZero();
  return matrix_of(d);
}

FeatureLayout numeric_layout(int k) {
  FeatureLayout layout;
  for (int c = 0; c < k; ++c) {
    layout.logical.push_back(c);
    layout.onehot.push_back(false);
  }
  layout.feature_count = k;
  return layout;
}

}  // namespace

TEST(PairDistance, SelfIsZeroAndSymmetric) {
  Rng rng(1);
  const auto d = random_distance(rng, 6);
  EXPECT_EQ(pair_distance(2, 2, d), 0.0);
  EXPECT_EQ(pair_distance(1, 4, d), pair_distance(4, 1, d));
}

TEST(Sparsity, CountsChangedFeatures) {
  const auto layout = numeric_layout(10);
  Eigen::RowVectorXd q = Eigen::RowVectorXd::Zero(10);
  Eigen::RowVectorXd e = q;
  EXPECT_FALSE(sparsity(q, e, layout).has_value());
  e(3) = 2.0;
  EXPECT_DOUBLE_EQ(*sparsity(q, e, layout), 1.0);
  e.setConstant(1.0);
  EXPECT_DOUBLE_EQ(*sparsity(q, e, layout), 0.1);
  // A tolerance hides small numeric changes.
  e.setConstant(0.05);
  e(0) = 1.0;
  EXPECT_DOUBLE_EQ(*sparsity(q, e, layout, 0.1), 1.0);
}

TEST(Sparsity, OneHotGroupCountsOnce) {
  FeatureLayout layout;
  layout.logical = {0, 1, 1, 1};
  layout.onehot = {false, true, true, true};
  layout.feature_count = 2;
  Eigen::RowVectorXd q(4), e(4);
  q << 1.0, 1, 0, 0;
  e << 1.0, 0, 0, 1;
  EXPECT_DOUBLE_EQ(*sparsity(q, e, layout), 1.0);
  e(0) = 2.0;
  EXPECT_DOUBLE_EQ(*sparsity(q, e, layout), 0.5);
  EXPECT_THROW(sparsity(q, Eigen::RowVectorXd::Zero(3), layout), DataError);
}

TEST(OodDistance, ExamplesAndScan) {
  Eigen::MatrixXd v(3, 3);
  v << 0, 0.3, 0.8, 0.3, 0, 0.6, 0.8, 0.6, 0;
  const auto d = matrix_of(v);
  EXPECT_DOUBLE_EQ(ood_distance(0, d, false), 0.0);
  EXPECT_DOUBLE_EQ(ood_distance(0, d, true), 0.3);
  EXPECT_THROW(ood_distance(0, matrix_of(Eigen::MatrixXd::Zero(1, 1)), true), DataError);

  Rng rng(2);
  const auto r = random_distance(rng, 25);
  for (Eigen::Index e = 0; e < 25; ++e) {
    double best = 1e300;
    for (Eigen::Index i = 0; i < 25; ++i) {
      if (i != e) best = std::min(best, r(e, i));
    }
    EXPECT_EQ(ood_distance(e, r), best);
  }
}

TEST(OutlierScore, ExamplesAndScaling) {
  ProximityMatrix p;
  p.kind = ProximityKind::original;
  p.values = Eigen::MatrixXd::Ones(5, 5);
  p.values(0, 4) = p.values(4, 0) = 0.0;
  p.defined = BoolMatrix::Constant(5, 5, true);
  const std::vector<int> labels{0, 0, 0, 0, 1};
  // Three same-class rows at proximity 1: score 3 / 3.
  EXPECT_DOUBLE_EQ(*outlier_score(0, p, labels), 1.0);
  const double before = *outlier_score(1, p, labels);
  ProximityMatrix half = p;
  half.values *= 0.5;
  EXPECT_DOUBLE_EQ(*outlier_score(1, half, labels), 4.0 * before);
  EXPECT_THROW(outlier_score(4, p, labels), DataError);

  ProximityMatrix zero = p;
  zero.values.setZero();
  EXPECT_FALSE(outlier_score(0, zero, labels).has_value());
}

TEST(Diversity, Examples) {
  Eigen::MatrixXd v = Eigen::MatrixXd::Zero(4, 4);
  v(0, 1) = v(1, 0) = 0.8;
  const auto d = matrix_of(v);
  const std::vector<Eigen::Index> pair{0, 1};
  EXPECT_DOUBLE_EQ(diversity(pair, d), 0.8);
  const std::vector<Eigen::Index> single{2};
  EXPECT_DOUBLE_EQ(diversity(single, d), 0.0);
  EXPECT_THROW(diversity(std::vector<Eigen::Index>{}, d), DataError);

  Eigen::MatrixXd w(4, 4);
  w << 0, 1, 2, 3, 1, 0, 4, 5, 2, 4, 0, 6, 3, 5, 6, 0;
  const std::vector<Eigen::Index> all{0, 1, 2, 3};
  EXPECT_DOUBLE_EQ(diversity(all, matrix_of(w)), 21.0 / 6.0);
}

TEST(Robustness, Examples) {
  Eigen::MatrixXd f(3, 2);
  f << 0.6, 0.4, 0.4, 0.6, 0.6, 0.4;
  Eigen::MatrixXd v(3, 3);
  v << 0, 0.5, 2.0, 0.5, 0, 2.0, 2.0, 2.0, 0;
  const auto d = matrix_of(v);
  Neighborhood one;
  one.k = 1;
  // Single neighbour at 0.5 with |df| = sqrt(0.08).
  EXPECT_NEAR(*robustness(0, f, d, one), std::sqrt(0.08) / 0.5, 1e-15);

  const Eigen::MatrixXd constant = Eigen::MatrixXd::Constant(3, 2, 0.5);
  Neighborhood all;
  all.k = 10;
  EXPECT_DOUBLE_EQ(*robustness(0, constant, d, all), 0.0);

  Neighborhood tight;
  tight.mode = Neighborhood::Mode::radius;
  tight.radius = 0.1;
  EXPECT_THROW(robustness(0, f, d, tight), DataError);

  // Zero-distance neighbour: equal outputs are skipped, different ones mask.
  Eigen::MatrixXd dup = v;
  dup(0, 2) = dup(2, 0) = 0.0;
  EXPECT_NEAR(*robustness(0, f, matrix_of(dup), all), std::sqrt(0.08) / 0.5, 1e-15);
  dup(0, 1) = dup(1, 0) = 0.0;
  EXPECT_FALSE(robustness(0, f, matrix_of(dup), all).has_value());
}

TEST(Robustness, MatchesExhaustiveScan) {
  Rng rng(3);
  const int n = 30;
  const auto d = random_distance(rng, n);
  Eigen::MatrixXd f(n, 3);
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::Vector3d v(uniform_unit(rng), uniform_unit(rng), uniform_unit(rng));
    f.row(i) = (v / v.sum()).transpose();
  }
  Neighborhood nb;
  nb.k = 5;
  for (Eigen::Index q = 0; q < n; ++q) {
    std::vector<std::pair<double, Eigen::Index>> order;
    for (Eigen::Index i = 0; i < n; ++i) {
      if (i != q) order.emplace_back(d(q, i), i);
    }
    std::sort(order.begin(), order.end());
    double worst = 0.0;
    for (int r = 0; r < 5; ++r) {
      const auto i = order[static_cast<std::size_t>(r)].second;
      worst = std::max(worst, (f.row(q) - f.row(i)).norm() / d(q, i));
    }
    EXPECT_DOUBLE_EQ(*robustness(q, f, d, nb), worst);
  }
}

TEST(Compactness, ExamplesAndAssignment) {
  Eigen::MatrixXd v = Eigen::MatrixXd::Zero(3, 3);
  v(0, 1) = v(1, 0) = 0.2;
  v(0, 2) = v(2, 0) = 0.4;
  const auto d = matrix_of(v);
  EXPECT_DOUBLE_EQ(compactness(0, std::vector<Eigen::Index>{1, 2}, d), 0.3);
  EXPECT_DOUBLE_EQ(compactness(0, std::vector<Eigen::Index>{}, d), 0.0);

  // Eight points on a line, two classes, prototypes 1 and 2 (class 0) and 6 (class 1).
  Eigen::MatrixXd x(8, 1);
  x << 0, 1, 5, 6, 10, 11, 12, 20;
  Eigen::MatrixXd line = euclidean_cross(x, x);
  const auto ld = matrix_of(line);
  const std::vector<int> labels{0, 0, 0, 0, 1, 1, 1, 1};
  PrototypeSet set;
  set.per_class = {{1, 2}, {6}};
  const auto assigned = prototype_assignment(set, ld, labels);
  ASSERT_EQ(assigned.size(), 3u);
  EXPECT_EQ(assigned[0], (std::vector<Eigen::Index>{0}));
  EXPECT_EQ(assigned[1], (std::vector<Eigen::Index>{3}));
  EXPECT_EQ(assigned[2], (std::vector<Eigen::Index>{4, 5, 7}));
  EXPECT_DOUBLE_EQ(compactness(1, assigned[0], ld), 1.0);
  EXPECT_DOUBLE_EQ(compactness(2, assigned[1], ld), 1.0);
  EXPECT_DOUBLE_EQ(compactness(6, assigned[2], ld), (2.0 + 1.0 + 8.0) / 3.0);
}

TEST(NearestPrototypeF1, PerfectSeparationAndOracle) {
  Rng rng(4);
  const int n_train = 20;
  const int n_test = 15;
  Eigen::MatrixXd train(n_train, 1), test(n_test, 1);
  std::vector<int> train_labels, test_labels;
  for (int i = 0; i < n_train; ++i) {
    train(i, 0) = (i % 2) * 10.0 + uniform_unit(rng);
    train_labels.push_back(i % 2);
  }
  for (int i = 0; i < n_test; ++i) {
    test(i, 0) = (i % 2) * 10.0 + uniform_unit(rng);
    test_labels.push_back(i % 2);
  }
  const Eigen::MatrixXd cross = euclidean_cross(test, train);
  PrototypeSet set;
  set.per_class = {{0}, {1}};
  EXPECT_DOUBLE_EQ(nearest_prototype_f1(set, cross, train_labels, test_labels), 1.0);

  // Random prototypes against a brute-force predictor composed with weighted_f1.
  Eigen::MatrixXd noisy(n_test, 1);
  for (int i = 0; i < n_test; ++i) noisy(i, 0) = uniform_unit(rng) * 11.0;
  const Eigen::MatrixXd cross2 = euclidean_cross(noisy, train);
  set.per_class = {{4, 8}, {3, 13}};
  std::vector<int> predicted;
  for (int i = 0; i < n_test; ++i) {
    Eigen::Index best = -1;
    for (auto p : std::vector<Eigen::Index>{3, 4, 8, 13}) {
      if (best < 0 || cross2(i, p) < cross2(i, best)) best = p;
    }
    predicted.push_back(train_labels[static_cast<std::size_t>(best)]);
  }
  EXPECT_DOUBLE_EQ(nearest_prototype_f1(set, cross2, train_labels, test_labels), weighted_f1(predicted, test_labels));
}

TEST(Metrics, ScalingDistancesScalesLinearMetrics) {
  Rng rng(5);
  const auto d = random_distance(rng, 12);
  auto scaled = d;
  scaled.values *= 3.5;
  const std::vector<Eigen::Index> rows{1, 4, 7, 9};
  EXPECT_NEAR(diversity(rows, scaled), 3.5 * diversity(rows, d), 1e-12);
  EXPECT_NEAR(ood_distance(5, scaled), 3.5 * ood_distance(5, d), 1e-12);
  EXPECT_NEAR(compactness(1, rows, scaled), 3.5 * compactness(1, rows, d), 1e-12);
  std::vector<int> labels(12);
  for (int i = 0; i < 12; ++i) labels[static_cast<std::size_t>(i)] = i % 2;
  PrototypeSet set;
  set.per_class = {{0}, {1}};
  const std::vector<int> test_labels(labels.begin(), labels.begin() + 6);
  EXPECT_DOUBLE_EQ(nearest_prototype_f1(set, scaled.values.topRows(6), labels, test_labels),
                   nearest_prototype_f1(set, d.values.topRows(6), labels, test_labels));
}

TEST(MetricReport, MaskedItemsAreCountedNotAveraged) {
  MetricReport report;
  report.add("semi:gap", "sparsity", "-", 0.5);
  report.add("semi:gap", "sparsity", "-", std::nullopt);
  report.add("semi:gap", "sparsity", "-", 1.0);
  const auto* stat = report.find("semi:gap", "sparsity", "-");
  ASSERT_NE(stat, nullptr);
  EXPECT_EQ(stat->count, 2u);
  EXPECT_EQ(stat->masked, 1u);
  EXPECT_DOUBLE_EQ(*report.mean("semi:gap", "sparsity", "-"), 0.75);
  EXPECT_EQ(report.find("semi:gap", "nope", "-"), nullptr);

  MetricReport only_masked;
  only_masked.add("x", "m", "gap", std::nullopt);
  EXPECT_FALSE(only_masked.mean("x", "m", "gap").has_value());
}

TEST(MetricReport, JsonAndCsvRoundTrip) {
  MetricReport report;
  report.add("prototype:kmedoids:gap", "diversity", "gap", 0.123456789012345);
  report.add("prototype:kmedoids:gap", "diversity", "l2", 2.5);
  report.add("critic:kmedoids:gap", "outlier_score", "gap", std::nullopt);
  const auto back = MetricReport::from_json(report.to_json());
  EXPECT_EQ(back.to_json(), report.to_json());
  EXPECT_EQ(*back.mean("prototype:kmedoids:gap", "diversity", "gap"), 0.123456789012345);

  std::istringstream csv(report.to_csv("fold0"));
  std::string line;
  int rows = 0;
  while (std::getline(csv, line)) {
    if (line.empty()) continue;
    std::size_t commas = static_cast<std::size_t>(std::count(line.begin(), line.end(), ','));
    EXPECT_EQ(commas, 6u) << line;
    if (line.rfind("fold0,", 0) == 0) ++rows;
  }
  EXPECT_EQ(rows, 3);
}

TEST(MetricReport, AverageIsMeanOfFoldMeans) {
  MetricReport a, b;
  a.add("e", "m", "gap", 1.0);
  a.add("e", "m", "gap", 3.0);  // mean 2
  b.add("e", "m", "gap", 5.0);  // mean 5
  b.add("e", "m", "gap", std::nullopt);
  const auto avg = MetricReport::average({a, b});
  EXPECT_DOUBLE_EQ(*avg.mean("e", "m", "gap"), 3.5);
  EXPECT_EQ(avg.find("e", "m", "gap")->masked, 1u);
}
