#include "rfexplain/forest.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "rfexplain/detail/binary_io.hpp"
#include "rfexplain/error.hpp"
#include "rfexplain/log.hpp"
#include "rfexplain/random.hpp"

namespace rfexplain {

int MaxFeatures::resolve(int n_features) const {
  double value = 0.0;
  switch (rule) {
    case MaxFeaturesRule::sqrt:
      value = std::sqrt(static_cast<double>(n_features));
      break;
    case MaxFeaturesRule::log2:
      value = std::log2(static_cast<double>(n_features));
      break;
    case MaxFeaturesRule::fraction:
      value = fraction * n_features;
      break;
  }
  return std::clamp(static_cast<int>(value), 1, std::max(n_features, 1));
}

std::string MaxFeatures::to_string() const {
  switch (rule) {
    case MaxFeaturesRule::sqrt:
      return "sqrt";
    case MaxFeaturesRule::log2:
      return "log2";
    case MaxFeaturesRule::fraction:
      break;
  }
  std::ostringstream os;
  os << fraction;
  return os.str();
}

MaxFeatures MaxFeatures::parse(std::string_view text) {
  if (text == "sqrt") return {MaxFeaturesRule::sqrt, 1.0};
  if (text == "log2") return {MaxFeaturesRule::log2, 1.0};
  double value = 0.0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc() || ptr != text.data() + text.size() || !(value > 0.0) || value > 1.0) {
    throw ConfigError("max_features must be sqrt, log2 or a fraction in (0,1], got '" +
                      std::string(text) + "'");
  }
  return {MaxFeaturesRule::fraction, value};
}

void ForestParams::validate() const {
  if (n_trees < 1) throw ConfigError("n_trees must be >= 1");
  if (max_features.rule == MaxFeaturesRule::fraction &&
      !(max_features.fraction > 0.0 && max_features.fraction <= 1.0)) {
    throw ConfigError("fractional max_features must lie in (0,1]");
  }
  if (max_depth && *max_depth < 0) throw ConfigError("max_depth must be >= 0");
  if (min_leaf < 1) throw ConfigError("min_leaf must be >= 1");
}

int TreeRecord::depth() const {
  std::vector<int> depth_of(nodes.size(), 0);
  int deepest = 0;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    deepest = std::max(deepest, depth_of[i]);
    if (nodes[i].feature >= 0) {
      depth_of[static_cast<std::size_t>(nodes[i].left)] = depth_of[i] + 1;
      depth_of[static_cast<std::size_t>(nodes[i].right)] = depth_of[i] + 1;
    }
  }
  return deepest;
}

Eigen::VectorXi TrainedForest::oob_tree_counts() const {
  Eigen::VectorXi counts = Eigen::VectorXi::Zero(sample_count());
  for (const auto& tree : trees) {
    counts += (tree.inbag.array() == 0).cast<int>().matrix();
  }
  return counts;
}

namespace {

// Grows a single CART tree with Gini impurity on a bootstrap sample.
class TreeBuilder {
 public:
  TreeBuilder(const Eigen::MatrixXd& features, const std::vector<int>& labels,
              const std::vector<double>& class_weight, int class_count, const ForestParams& params)
      : x_(features),
        y_(labels),
        class_weight_(class_weight),
        class_count_(class_count),
        params_(params),
        mtry_(params.max_features.resolve(static_cast<int>(features.cols()))) {}

  TreeRecord grow(std::uint64_t seed) const {
    Rng rng(seed);
    const auto n = x_.rows();
    TreeRecord tree;
    tree.inbag = Eigen::VectorXi::Zero(n);
    for (Eigen::Index draw = 0; draw < n; ++draw) {
      ++tree.inbag(static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::uint64_t>(n))));
    }

    std::vector<int> samples;
    std::vector<double> weight(static_cast<std::size_t>(n), 0.0);
    for (Eigen::Index i = 0; i < n; ++i) {
      if (tree.inbag(i) > 0) {
        samples.push_back(static_cast<int>(i));
        weight[static_cast<std::size_t>(i)] =
            tree.inbag(i) * class_weight_[static_cast<std::size_t>(y_[static_cast<std::size_t>(i)])];
      }
    }

    struct Pending {
      int node;
      std::size_t begin;
      std::size_t end;
      int depth;
    };
    std::vector<Pending> stack{{0, 0, samples.size(), 0}};
    tree.nodes.emplace_back();
    std::vector<Eigen::VectorXd> leaves;
    std::vector<int> features(static_cast<std::size_t>(x_.cols()));
    std::iota(features.begin(), features.end(), 0);
    Eigen::VectorXd totals(class_count_);

    while (!stack.empty()) {
      const Pending p = stack.back();
      stack.pop_back();
      totals.setZero();
      for (std::size_t s = p.begin; s < p.end; ++s) {
        const int i = samples[s];
        totals(y_[static_cast<std::size_t>(i)]) += weight[static_cast<std::size_t>(i)];
      }
      const auto count = p.end - p.begin;
      const bool pure = (totals.array() > 0.0).count() <= 1;
      const bool depth_reached = params_.max_depth && p.depth >= *params_.max_depth;
      Split split;
      if (!pure && !depth_reached && count >= 2 * static_cast<std::size_t>(params_.min_leaf)) {
        split = best_split(samples, weight, p.begin, p.end, totals, features, rng);
      }
      if (!split.valid()) {
        tree.nodes[static_cast<std::size_t>(p.node)].leaf = static_cast<int>(leaves.size());
        leaves.push_back(totals / totals.sum());
        continue;
      }
      const auto mid = std::partition(samples.begin() + static_cast<std::ptrdiff_t>(p.begin),
                                      samples.begin() + static_cast<std::ptrdiff_t>(p.end),
                                      [&](int i) { return x_(i, split.feature) <= split.threshold; });
      const auto mid_index = static_cast<std::size_t>(mid - samples.begin());
      const int left = static_cast<int>(tree.nodes.size());
      tree.nodes.emplace_back();
      tree.nodes.emplace_back();
      auto& node = tree.nodes[static_cast<std::size_t>(p.node)];
      node.feature = split.feature;
      node.threshold = split.threshold;
      node.left = left;
      node.right = left + 1;
      stack.push_back({left + 1, mid_index, p.end, p.depth + 1});
      stack.push_back({left, p.begin, mid_index, p.depth + 1});
    }

    tree.leaf_votes.resize(static_cast<Eigen::Index>(leaves.size()), class_count_);
    for (std::size_t l = 0; l < leaves.size(); ++l) {
      tree.leaf_votes.row(static_cast<Eigen::Index>(l)) = leaves[l].transpose();
    }
    tree.leaf_of.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) tree.leaf_of(i) = tree.route(x_.row(i));
    return tree;
  }

 private:
  struct Split {
    int feature = -1;
    double threshold = 0.0;
    double score = -1.0;
    bool valid() const { return feature >= 0; }
  };

  // Candidate features are drawn without replacement; as in common CART
  // forests the search continues past mtry features until a valid split exists.
  Split best_split(const std::vector<int>& samples, const std::vector<double>& weight,
                   std::size_t begin, std::size_t end, const Eigen::VectorXd& totals,
                   std::vector<int>& features, Rng& rng) const {
    Split best;
    const auto k = features.size();
    std::vector<std::pair<double, int>> sorted(end - begin);
    Eigen::VectorXd left(class_count_);
    for (std::size_t f = 0; f < k; ++f) {
      if (static_cast<int>(f) >= mtry_ && best.valid()) break;
      const auto pick = f + uniform_index(rng, k - f);
      std::swap(features[f], features[pick]);
      const int feature = features[f];

      for (std::size_t s = begin; s < end; ++s) {
        sorted[s - begin] = {x_(samples[s], feature), samples[s]};
      }
      std::sort(sorted.begin(), sorted.end());
      if (sorted.front().first == sorted.back().first) continue;

      left.setZero();
      double left_weight = 0.0;
      const double total_weight = totals.sum();
      const auto m = sorted.size();
      for (std::size_t pos = 0; pos + 1 < m; ++pos) {
        const int i = sorted[pos].second;
        const double w = weight[static_cast<std::size_t>(i)];
        left(y_[static_cast<std::size_t>(i)]) += w;
        left_weight += w;
        const auto n_left = pos + 1;
        if (n_left < static_cast<std::size_t>(params_.min_leaf)) continue;
        if (m - n_left < static_cast<std::size_t>(params_.min_leaf)) break;
        if (sorted[pos].first == sorted[pos + 1].first) continue;
        const double right_weight = total_weight - left_weight;
        // Maximizing sum_c w_c^2 / W per child minimizes weighted child Gini.
        const double score = left.squaredNorm() / left_weight +
                             (totals - left).squaredNorm() / right_weight;
        if (score > best.score) {
          best.score = score;
          best.feature = feature;
          const double a = sorted[pos].first;
          const double b = sorted[pos + 1].first;
          double threshold = a + (b - a) / 2.0;
          if (threshold >= b) threshold = a;
          best.threshold = threshold;
        }
      }
    }
    return best;
  }

  const Eigen::MatrixXd& x_;
  const std::vector<int>& y_;
  const std::vector<double>& class_weight_;
  int class_count_;
  const ForestParams& params_;
  int mtry_;
};

int resolve_threads(int threads) {
  if (threads > 0) return threads;
  const auto hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

template <typename Fn>
void parallel_for(int count, int threads, Fn&& fn) {
  threads = std::min(resolve_threads(threads), count);
  if (threads <= 1) {
    for (int i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::jthread> pool;
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (int i = next++; i < count; i = next++) fn(i);
    });
  }
}

int argmax_lowest(const Eigen::Ref<const Eigen::VectorXd>& v) {
  int best = 0;
  for (Eigen::Index c = 1; c < v.size(); ++c) {
    if (v(c) > v(best)) best = static_cast<int>(c);
  }
  return best;
}

}  // namespace

TrainedForest fit(const Dataset& dataset, const ForestParams& params, int threads) {
  params.validate();
  if (dataset.cols() == 0) throw DataError("cannot fit a forest on zero features");
  if (dataset.rows() < 2) throw DataError("cannot fit a forest on fewer than two rows");
  if (!dataset.is_encoded()) throw DataError("dataset must be encoded before fitting");
  const auto counts = dataset.class_counts();
  if (std::count_if(counts.begin(), counts.end(), [](int c) { return c > 0; }) < 2) {
    throw DataError("cannot fit a classifier on single-class data");
  }

  const int L = dataset.class_count();
  std::vector<double> class_weight(static_cast<std::size_t>(L), 1.0);
  if (params.class_weighting == ClassWeighting::balanced) {
    for (int c = 0; c < L; ++c) {
      const auto nc = counts[static_cast<std::size_t>(c)];
      class_weight[static_cast<std::size_t>(c)] =
          nc > 0 ? static_cast<double>(dataset.rows()) / (static_cast<double>(L) * nc) : 0.0;
    }
  }

  TrainedForest forest;
  forest.params = params;
  forest.class_count = L;
  forest.feature_count = static_cast<int>(dataset.cols());
  forest.train_row_ids = dataset.row_ids;
  forest.train_labels = dataset.labels;
  forest.train_feature_hash = feature_hash(dataset);
  forest.trees.resize(static_cast<std::size_t>(params.n_trees));

  const TreeBuilder builder(dataset.features, dataset.labels, class_weight, L, params);
  parallel_for(params.n_trees, threads, [&](int t) {
    forest.trees[static_cast<std::size_t>(t)] =
        builder.grow(derive_seed(params.seed, static_cast<std::uint64_t>(t)));
  });

  const auto never_oob = (forest.oob_tree_counts().array() == 0).count();
  if (never_oob > 0) {
    warn(std::to_string(never_oob) +
         " training rows are in-bag in every tree; their OOB and GAP quantities are undefined");
  }
  return forest;
}

Eigen::VectorXd predict_proba_row(const TrainedForest& forest,
                              const Eigen::Ref<const Eigen::RowVectorXd>& x) {
  if (x.size() != forest.feature_count) {
    throw DataError("dimension mismatch: forest expects " + std::to_string(forest.feature_count) +
                    " features, got " + std::to_string(x.size()));
  }
  Eigen::VectorXd proba = Eigen::VectorXd::Zero(forest.class_count);
  for (const auto& tree : forest.trees) proba += tree.leaf_votes.row(tree.route(x)).transpose();
  return proba / static_cast<double>(forest.trees.size());
}

Eigen::MatrixXd predict_proba(const TrainedForest& forest,
                              const Eigen::Ref<const Eigen::MatrixXd>& rows) {
  Eigen::MatrixXd proba(rows.rows(), forest.class_count);
  for (Eigen::Index i = 0; i < rows.rows(); ++i) {
    proba.row(i) = predict_proba_row(forest, rows.row(i)).transpose();
  }
  return proba;
}

std::vector<int> predict(const TrainedForest& forest, const Eigen::Ref<const Eigen::MatrixXd>& rows) {
  const Eigen::MatrixXd proba = predict_proba(forest, rows);
  std::vector<int> labels(static_cast<std::size_t>(rows.rows()));
  for (Eigen::Index i = 0; i < rows.rows(); ++i) {
    labels[static_cast<std::size_t>(i)] = argmax_lowest(proba.row(i).transpose());
  }
  return labels;
}

std::vector<int> oob_predict(const TrainedForest& forest) {
  const auto n = forest.sample_count();
  Eigen::MatrixXd votes = Eigen::MatrixXd::Zero(n, forest.class_count);
  Eigen::VectorXi trees_used = Eigen::VectorXi::Zero(n);
  for (const auto& tree : forest.trees) {
    for (Eigen::Index i = 0; i < n; ++i) {
      if (tree.inbag(i) == 0) {
        votes.row(i) += tree.leaf_votes.row(tree.leaf_of(i));
        ++trees_used(i);
      }
    }
  }
  std::vector<int> labels(static_cast<std::size_t>(n), kUndefinedLabel);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (trees_used(i) > 0) labels[static_cast<std::size_t>(i)] = argmax_lowest(votes.row(i).transpose());
  }
  return labels;
}

Eigen::VectorXd row_class_weights(const TrainedForest& forest) {
  const auto n = forest.sample_count();
  Eigen::VectorXd w = Eigen::VectorXd::Ones(n);
  if (forest.params.class_weighting != ClassWeighting::balanced) return w;
  std::vector<double> counts(static_cast<std::size_t>(forest.class_count), 0.0);
  for (int y : forest.train_labels) counts[static_cast<std::size_t>(y)] += 1.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto y = static_cast<std::size_t>(forest.train_labels[static_cast<std::size_t>(i)]);
    w(i) = static_cast<double>(n) / (forest.class_count * counts[y]);
  }
  return w;
}

double weighted_f1(std::span<const int> predicted, std::span<const int> actual) {
  if (actual.empty()) throw DataError("weighted_f1 of an empty label set");
  if (predicted.size() != actual.size()) throw DataError("weighted_f1: length mismatch");
  std::map<int, std::array<double, 3>> stats;  // tp, fp, support
  for (std::size_t i = 0; i < actual.size(); ++i) {
    stats[actual[i]][2] += 1.0;
    if (predicted[i] == actual[i]) {
      stats[actual[i]][0] += 1.0;
    } else {
      stats[predicted[i]][1] += 1.0;
    }
  }
  double total = 0.0;
  for (const auto& [label, s] : stats) {
    const double tp = s[0], fp = s[1], support = s[2];
    if (support == 0.0) continue;
    const double precision = tp + fp > 0.0 ? tp / (tp + fp) : 0.0;
    const double recall = tp / support;
    const double f1 = precision + recall > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
    total += support * f1;
  }
  return total / static_cast<double>(actual.size());
}

std::vector<ForestParams> ParamGrid::expand(std::uint64_t seed) const {
  std::vector<ForestParams> out;
  for (const auto& mf : max_features) {
    for (const auto& depth : max_depth) {
      for (int trees : n_trees) {
        ForestParams p;
        p.n_trees = trees;
        p.max_features = mf;
        p.max_depth = depth;
        p.min_leaf = min_leaf;
        p.class_weighting = class_weighting;
        p.seed = seed;
        p.validate();
        out.push_back(p);
      }
    }
  }
  return out;
}

GridSearchResult grid_search(const Dataset& dataset, const ParamGrid& grid, const FoldPlan& folds,
                             std::uint64_t seed, int threads) {
  GridSearchResult result;
  result.candidates = grid.expand(seed);
  if (result.candidates.empty()) throw ConfigError("forest grid is empty");
  const auto n_candidates = static_cast<Eigen::Index>(result.candidates.size());
  result.scores = Eigen::MatrixXd::Zero(n_candidates, folds.k_folds);

  // Tree t is seeded by (seed, t) alone, so a smaller forest is a prefix of
  // a larger one with the same shape parameters: fit the largest forest once
  // per (shape, fold) and score every n_trees value from running vote sums.
  std::map<std::tuple<int, double, int, int>, std::vector<Eigen::Index>> shapes;
  for (Eigen::Index c = 0; c < n_candidates; ++c) {
    const auto& p = result.candidates[static_cast<std::size_t>(c)];
    shapes[{static_cast<int>(p.max_features.rule), p.max_features.fraction, p.max_depth.value_or(-1),
            p.min_leaf}]
        .push_back(c);
  }

  for (int fold = 0; fold < folds.k_folds; ++fold) {
    const auto train_rows = folds.train_indices(fold);
    const auto test_rows = folds.test_indices(fold);
    const Dataset train = dataset.subset(train_rows);
    const Dataset test = dataset.subset(test_rows);
    for (const auto& [shape, members] : shapes) {
      ForestParams params = result.candidates[static_cast<std::size_t>(members.front())];
      for (auto c : members) {
        params.n_trees = std::max(params.n_trees, result.candidates[static_cast<std::size_t>(c)].n_trees);
      }
      params.seed = derive_seed(seed, static_cast<std::uint64_t>(fold));
      const TrainedForest forest = fit(train, params, threads);

      Eigen::MatrixXd votes = Eigen::MatrixXd::Zero(test.rows(), forest.class_count);
      std::vector<int> predicted(static_cast<std::size_t>(test.rows()));
      for (int t = 0; t < params.n_trees; ++t) {
        const auto& tree = forest.trees[static_cast<std::size_t>(t)];
        for (Eigen::Index i = 0; i < test.rows(); ++i) {
          votes.row(i) += tree.leaf_votes.row(tree.route(test.features.row(i)));
        }
        for (auto c : members) {
          if (result.candidates[static_cast<std::size_t>(c)].n_trees != t + 1) continue;
          for (Eigen::Index i = 0; i < test.rows(); ++i) {
            predicted[static_cast<std::size_t>(i)] = argmax_lowest(votes.row(i).transpose());
          }
          result.scores(c, fold) = weighted_f1(predicted, test.labels);
        }
      }
    }
  }

  result.mean_scores = result.scores.rowwise().mean();
  const int k = static_cast<int>(dataset.cols());
  const auto depth_key = [](const ForestParams& p) {
    return p.max_depth ? *p.max_depth : std::numeric_limits<int>::max();
  };
  Eigen::Index best = 0;
  for (Eigen::Index c = 1; c < n_candidates; ++c) {
    const auto& a = result.candidates[static_cast<std::size_t>(c)];
    const auto& b = result.candidates[static_cast<std::size_t>(best)];
    const auto key_a = std::make_tuple(-result.mean_scores(c), a.n_trees, depth_key(a),
                                       a.max_features.resolve(k));
    const auto key_b = std::make_tuple(-result.mean_scores(best), b.n_trees, depth_key(b),
                                       b.max_features.resolve(k));
    if (key_a < key_b) best = c;
  }
  result.best = result.candidates[static_cast<std::size_t>(best)];
  return result;
}

namespace {

using nlohmann::json;

constexpr std::string_view kModelFormat = "rfexplain-forest";
constexpr int kModelVersion = 1;

}  // namespace

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::uint64_t parse_hex64(const std::string& s) {
  std::uint64_t v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v, 16);
  if (ec != std::errc() || ptr != s.data() + s.size()) throw DataError("bad hash '" + s + "'");
  return v;
}

json params_to_json(const ForestParams& p) {
  return json{{"n_trees", p.n_trees},
              {"max_features", p.max_features.to_string()},
              {"max_depth", p.max_depth ? json(*p.max_depth) : json(nullptr)},
              {"min_leaf", p.min_leaf},
              {"class_weighting", p.class_weighting == ClassWeighting::balanced ? "balanced" : "none"},
              {"seed", hex64(p.seed)}};
}

ForestParams params_from_json(const json& j) {
  ForestParams p;
  p.n_trees = j.at("n_trees").get<int>();
  p.max_features = MaxFeatures::parse(j.at("max_features").get<std::string>());
  if (!j.at("max_depth").is_null()) p.max_depth = j.at("max_depth").get<int>();
  p.min_leaf = j.at("min_leaf").get<int>();
  p.class_weighting = j.at("class_weighting").get<std::string>() == "balanced"
                          ? ClassWeighting::balanced
                          : ClassWeighting::none;
  p.seed = parse_hex64(j.at("seed").get<std::string>());
  return p;
}

std::string to_json(const TrainedForest& forest) {
  json trees = json::array();
  for (const auto& tree : forest.trees) {
    json nodes = json::array();
    for (const auto& n : tree.nodes) nodes.push_back({n.feature, n.threshold, n.left, n.right, n.leaf});
    json votes = json::array();
    for (Eigen::Index l = 0; l < tree.leaf_votes.rows(); ++l) {
      votes.push_back(std::vector<double>(tree.leaf_votes.row(l).begin(), tree.leaf_votes.row(l).end()));
    }
    trees.push_back({{"nodes", std::move(nodes)},
                     {"leaf_votes", std::move(votes)},
                     {"inbag", std::vector<int>(tree.inbag.begin(), tree.inbag.end())},
                     {"leaf_of", std::vector<int>(tree.leaf_of.begin(), tree.leaf_of.end())}});
  }
  const json j{{"format", kModelFormat},
               {"version", kModelVersion},
               {"params", params_to_json(forest.params)},
               {"class_count", forest.class_count},
               {"feature_count", forest.feature_count},
               {"train_row_ids", forest.train_row_ids},
               {"train_labels", forest.train_labels},
               {"train_feature_hash", hex64(forest.train_feature_hash)},
               {"trees", std::move(trees)}};
  return j.dump();
}

TrainedForest forest_from_json(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw DataError(std::string("model file is not valid JSON: ") + e.what());
  }
  try {
    if (j.at("format").get<std::string>() != kModelFormat) throw DataError("not a forest model file");
    if (j.at("version").get<int>() != kModelVersion) {
      throw DataError("unsupported model version " + std::to_string(j.at("version").get<int>()));
    }
    TrainedForest forest;
    forest.params = params_from_json(j.at("params"));
    forest.class_count = j.at("class_count").get<int>();
    forest.feature_count = j.at("feature_count").get<int>();
    forest.train_row_ids = j.at("train_row_ids").get<std::vector<std::string>>();
    forest.train_labels = j.at("train_labels").get<std::vector<int>>();
    forest.train_feature_hash = parse_hex64(j.at("train_feature_hash").get<std::string>());
    const auto n = static_cast<Eigen::Index>(forest.train_labels.size());
    for (const auto& jt : j.at("trees")) {
      TreeRecord tree;
      for (const auto& jn : jt.at("nodes")) {
        tree.nodes.push_back(TreeNode{jn.at(0).get<int>(), jn.at(1).get<double>(), jn.at(2).get<int>(),
                                      jn.at(3).get<int>(), jn.at(4).get<int>()});
      }
      const auto& votes = jt.at("leaf_votes");
      tree.leaf_votes.resize(static_cast<Eigen::Index>(votes.size()), forest.class_count);
      for (std::size_t l = 0; l < votes.size(); ++l) {
        const auto row = votes[l].get<std::vector<double>>();
        if (static_cast<int>(row.size()) != forest.class_count) throw DataError("bad leaf vote width");
        tree.leaf_votes.row(static_cast<Eigen::Index>(l)) =
            Eigen::Map<const Eigen::RowVectorXd>(row.data(), forest.class_count);
      }
      const auto inbag = jt.at("inbag").get<std::vector<int>>();
      const auto leaf_of = jt.at("leaf_of").get<std::vector<int>>();
      if (static_cast<Eigen::Index>(inbag.size()) != n || static_cast<Eigen::Index>(leaf_of.size()) != n) {
        throw DataError("tree bookkeeping length does not match the training rows");
      }
      tree.inbag = Eigen::Map<const Eigen::VectorXi>(inbag.data(), n);
      tree.leaf_of = Eigen::Map<const Eigen::VectorXi>(leaf_of.data(), n);
      forest.trees.push_back(std::move(tree));
    }
    return forest;
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed model file: ") + e.what());
  }
}

void save_model(const TrainedForest& forest, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw StageError("cannot open '" + path.string() + "' for writing");
  out << to_json(forest);
  if (!out) throw StageError("failed writing '" + path.string() + "'");
}

TrainedForest load_model(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open model '" + path.string() + "'");
  std::stringstream buffer;
  buffer << in.rdbuf();
  return forest_from_json(buffer.str());
}

std::uint64_t forest_hash(const TrainedForest& forest) { return detail::fnv1a(to_json(forest)); }

}  // namespace rfexplain
