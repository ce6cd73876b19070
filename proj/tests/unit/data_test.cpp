#include <gtest/gtest.h>

#include <fstream>
#include <functional>
#include <numeric>
#include <set>

#include "oracles.hpp"
#include "rfexplain/data.hpp"
#include "rfexplain/error.hpp"
#include "rfexplain/forest.hpp"

using namespace rfexplain;

namespace {

std::filesystem::path write_file(const std::filesystem::path& dir, const std::string& name, const std::string& text) {
  const auto path = dir / name;
  std::ofstream(path) << text;
  return path;
}

std::string error_text(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST(LoadCsv, ReadsSmallNumericFile) {
  const auto dir = oracle::scratch_dir("csv-small");
  const auto path = write_file(dir, "t.csv", "x,y,label\n1,2,a\n3,4,b\n5,6,a\n");
  CsvSchema schema;
  schema.label_column = "label";
  const auto ds = load_csv(path, schema);
  EXPECT_EQ(ds.rows(), 3);
  EXPECT_EQ(ds.cols(), 2);
  EXPECT_EQ(ds.class_count(), 2);
  EXPECT_EQ(ds.labels, (std::vector<int>{0, 1, 0}));
  EXPECT_EQ(ds.class_names, (std::vector<std::string>{"a", "b"}));
  EXPECT_DOUBLE_EQ(ds.features(2, 1), 6.0);
  EXPECT_EQ(ds.row_ids, (std::vector<std::string>{"0", "1", "2"}));
}

TEST(LoadCsv, MissingCellUnderErrorPolicyNamesTheCell) {
  const auto dir = oracle::scratch_dir("csv-missing");
  const auto path = write_file(dir, "t.csv", "x,y,label\n1,2,a\n3,NA,b\n");
  CsvSchema schema;
  schema.label_column = "label";
  const auto msg = error_text([&] { load_csv(path, schema); });
  EXPECT_NE(msg.find("row 3"), std::string::npos) << msg;
  EXPECT_NE(msg.find("'y'"), std::string::npos) << msg;
}

TEST(LoadCsv, ErrorPaths) {
  const auto dir = oracle::scratch_dir("csv-errors");
  CsvSchema schema;
  schema.label_column = "label";
  EXPECT_THROW(load_csv(dir / "absent.csv", schema), DataError);
  const auto bad = write_file(dir, "bad.csv", "x,label\nabc,a\n");
  const auto msg = error_text([&] { load_csv(bad, schema); });
  EXPECT_NE(msg.find("column 'x'"), std::string::npos) << msg;
  schema.label_column = "nope";
  EXPECT_THROW(load_csv(bad, schema), DataError);
}

TEST(LoadCsv, IdColumnAndDelimiter) {
  const auto dir = oracle::scratch_dir("csv-id");
  const auto path = write_file(dir, "t.csv", "id;x;label\nr7;1.5;a\nr9;2.5;b\n");
  CsvSchema schema;
  schema.label_column = "label";
  schema.id_column = "id";
  schema.delimiter = ';';
  const auto ds = load_csv(path, schema);
  EXPECT_EQ(ds.cols(), 1);
  EXPECT_EQ(ds.row_ids, (std::vector<std::string>{"r7", "r9"}));
}

TEST(Encode, CategoricalBecomesOneHotGroup) {
  const auto dir = oracle::scratch_dir("encode");
  const auto path = write_file(dir, "t.csv", "x,colour,label\n1,red,a\n2,green,b\n3,blue,a\n4,red,b\n");
  CsvSchema schema;
  schema.label_column = "label";
  schema.categorical = {"colour"};
  const auto raw = load_csv(path, schema);
  EXPECT_FALSE(raw.is_encoded());
  const auto ds = encode(raw, MissingPolicy::error);
  ASSERT_EQ(ds.cols(), 4);
  EXPECT_TRUE(ds.is_encoded());
  for (Eigen::Index i = 0; i < ds.rows(); ++i) EXPECT_DOUBLE_EQ(ds.features.row(i).tail(3).sum(), 1.0);
  EXPECT_EQ(ds.logical_feature_count(), 2);
  EXPECT_NO_THROW(ds.validate());
}

TEST(Encode, IdempotentAndIdentityOnNumerics) {
  rfexplain::Rng rng(5);
  const auto ds = oracle::random_dataset(rng, 12, 3, 2);
  const auto once = encode(ds, MissingPolicy::error);
  EXPECT_EQ(once.features, ds.features);
  const auto synth = encode(synth_three_class(60, 2), MissingPolicy::error);
  const auto twice = encode(synth, MissingPolicy::error);
  EXPECT_EQ(twice.features, synth.features);
  EXPECT_EQ(twice.cols(), synth.cols());
}

TEST(Encode, MissingNumericUnderZeroPolicy) {
  const auto dir = oracle::scratch_dir("encode-zero");
  const auto path = write_file(dir, "t.csv", "x,y,label\n1,,a\n3,4,b\n");
  CsvSchema schema;
  schema.label_column = "label";
  schema.missing_policy = MissingPolicy::zero;
  const auto raw = load_csv(path, schema);
  EXPECT_THROW(encode(raw, MissingPolicy::error), DataError);
  const auto ds = encode(raw, MissingPolicy::zero);
  EXPECT_DOUBLE_EQ(ds.features(0, 1), 0.0);
  EXPECT_DOUBLE_EQ(ds.features(1, 1), 4.0);
}

TEST(FilterClasses, KeepsSubsetAndReindexes) {
  Eigen::MatrixXd x(6, 1);
  x << 0, 1, 2, 3, 4, 5;
  auto ds = oracle::numeric_dataset(x, {0, 1, 2, 0, 1, 2}, 3);
  ds.class_names = {"3", "4", "9"};
  const auto kept = filter_classes(ds, {"9", "4"});
  EXPECT_EQ(kept.class_names, (std::vector<std::string>{"4", "9"}));
  EXPECT_EQ(kept.labels, (std::vector<int>{0, 1, 0, 1}));
  EXPECT_EQ(kept.row_ids, (std::vector<std::string>{"r1", "r2", "r4", "r5"}));

  const auto all = filter_classes(ds, {"3", "4", "9"});
  EXPECT_EQ(all.features, ds.features);
  EXPECT_EQ(all.labels, ds.labels);
  EXPECT_THROW(filter_classes(ds, {"4"}), DataError);
  EXPECT_THROW(filter_classes(ds, {"4", "7"}), DataError);
}

TEST(StratifiedFolds, ExactDivisibility) {
  std::vector<int> labels(100);
  for (int i = 0; i < 100; ++i) labels[static_cast<std::size_t>(i)] = i % 2;
  const auto plan = stratified_folds(labels, 5, 11);
  for (int f = 0; f < 5; ++f) {
    int c0 = 0;
    int c1 = 0;
    for (auto i : plan.test_indices(f)) (labels[static_cast<std::size_t>(i)] == 0 ? c0 : c1)++;
    EXPECT_EQ(c0, 10);
    EXPECT_EQ(c1, 10);
  }
  EXPECT_EQ(stratified_folds(labels, 5, 11).assignments, plan.assignments);
}

TEST(StratifiedFolds, SevenMinorityRowsSplitTwoTwoOneOneOne) {
  std::vector<int> labels(40, 0);
  for (int i = 0; i < 7; ++i) labels[static_cast<std::size_t>(i * 5)] = 1;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto plan = stratified_folds(labels, 5, seed);
    std::vector<int> minority(5, 0);
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == 1) ++minority[static_cast<std::size_t>(plan.assignments[i])];
    }
    std::sort(minority.begin(), minority.end());
    EXPECT_EQ(minority, (std::vector<int>{1, 1, 1, 2, 2}));
  }
}

TEST(StratifiedFolds, PartitionAndBalanceProperty) {
  rfexplain::Rng rng(3);
  for (int trial = 0; trial < 30; ++trial) {
    const int n = 30 + static_cast<int>(uniform_index(rng, 60));
    const int k = 2 + static_cast<int>(uniform_index(rng, 4));
    std::vector<int> labels(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) labels[static_cast<std::size_t>(i)] = i < 3 * k ? i % 3 : static_cast<int>(uniform_index(rng, 3));
    const auto plan = stratified_folds(labels, k, static_cast<std::uint64_t>(trial));
    std::vector<int> seen(static_cast<std::size_t>(n), 0);
    for (int f = 0; f < k; ++f) {
      for (auto i : plan.test_indices(f)) ++seen[static_cast<std::size_t>(i)];
      const auto train = plan.train_indices(f);
      const auto test = plan.test_indices(f);
      EXPECT_EQ(train.size() + test.size(), static_cast<std::size_t>(n));
    }
    for (int s : seen) EXPECT_EQ(s, 1);
    for (int c = 0; c < 3; ++c) {
      int lo = n;
      int hi = 0;
      for (int f = 0; f < k; ++f) {
        int count = 0;
        for (auto i : plan.test_indices(f)) count += labels[static_cast<std::size_t>(i)] == c;
        lo = std::min(lo, count);
        hi = std::max(hi, count);
      }
      EXPECT_LE(hi - lo, 1);
    }
  }
}

TEST(StratifiedFolds, ClassSmallerThanKFails) {
  std::vector<int> labels{0, 0, 0, 0, 0, 0, 1, 1};
  EXPECT_THROW(stratified_folds(labels, 3, 1), DataError);
}

TEST(SynthThreeClass, DeterministicBalancedAndSeparable) {
  const auto a = synth_three_class(300, 9);
  const auto b = synth_three_class(300, 9);
  EXPECT_TRUE((a.features.array() == b.features.array()).all());
  EXPECT_EQ(a.class_counts(), (std::vector<int>{100, 100, 100}));
  EXPECT_EQ(a.cols(), 16);
  EXPECT_THROW(synth_three_class(10, 1), DataError);

  const auto enc = encode(a, MissingPolicy::error);
  ForestParams params;
  params.n_trees = 1;
  params.max_depth = 3;
  params.max_features = MaxFeatures::parse("1.0");
  params.seed = 4;
  const auto forest = fit(enc, params, 1);
  const auto predicted = predict(forest, enc.features);
  int correct = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) correct += predicted[i] == enc.labels[i];
  EXPECT_GE(correct / 300.0, 0.95);
}

TEST(Cache, RoundTripAndVersionCheck) {
  const auto dir = oracle::scratch_dir("cache");
  const auto ds = encode(synth_three_class(45, 1), MissingPolicy::error);
  save_cache(ds, dir / "ds.bin");
  const auto back = load_cache(dir / "ds.bin");
  EXPECT_EQ(back.features, ds.features);
  EXPECT_EQ(back.labels, ds.labels);
  EXPECT_EQ(back.row_ids, ds.row_ids);
  EXPECT_EQ(back.class_names, ds.class_names);
  EXPECT_EQ(feature_hash(back), feature_hash(ds));
  std::ofstream(dir / "junk.bin") << "not a cache";
  EXPECT_THROW(load_cache(dir / "junk.bin"), DataError);
}

TEST(Dataset, ValidateCatchesBrokenInvariants) {
  Eigen::MatrixXd x(3, 1);
  x << 1, 2, 3;
  auto ds = oracle::numeric_dataset(x, {0, 0, 0}, 2);
  EXPECT_THROW(ds.validate(), DataError);  // class c1 empty
  ds.labels = {0, 1, 5};
  EXPECT_THROW(ds.validate(), DataError);
}
