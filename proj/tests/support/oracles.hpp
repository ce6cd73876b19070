#pragma once

// Naive reference implementations and fixtures shared by the unit and
// acceptance suites. Everything here is written for clarity, not speed, and
// re-derives leaves by routing rows instead of reading cached bookkeeping.

#include <Eigen/Dense>

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "rfexplain/data.hpp"
#include "rfexplain/forest.hpp"
#include "rfexplain/random.hpp"

namespace oracle {

using rfexplain::Dataset;
using rfexplain::TrainedForest;

inline Dataset numeric_dataset(const Eigen::MatrixXd& x, const std::vector<int>& labels, int classes) {
  Dataset ds;
  ds.features = x;
  ds.labels = labels;
  for (int c = 0; c < classes; ++c) ds.class_names.push_back("c" + std::to_string(c));
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    rfexplain::ColumnMeta meta;
    meta.name = "f" + std::to_string(j);
    ds.columns.push_back(meta);
  }
  for (Eigen::Index i = 0; i < x.rows(); ++i) ds.row_ids.push_back("r" + std::to_string(i));
  return ds;
}

// Random numeric data with every class present at least twice.
inline Dataset random_dataset(rfexplain::Rng& rng, int n, int features, int classes) {
  Eigen::MatrixXd x(n, features);
  std::vector<int> labels(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    labels[static_cast<std::size_t>(i)] = i < 2 * classes ? i % classes
                                                          : static_cast<int>(rfexplain::uniform_index(rng, static_cast<std::uint64_t>(classes)));
    for (int f = 0; f < features; ++f) {
      // Coarse grid values so ties and shared leaves are common.
      x(i, f) = static_cast<double>(rfexplain::uniform_index(rng, 5)) + 0.5 * labels[static_cast<std::size_t>(i)];
    }
  }
  return numeric_dataset(x, labels, classes);
}

// Leaf of training row i in tree t, by routing its features.
inline int leaf(const TrainedForest& forest, const Eigen::MatrixXd& x, std::size_t t, Eigen::Index i) {
  return forest.trees[t].route(x.row(i));
}

inline Eigen::MatrixXd original(const TrainedForest& forest, const Eigen::MatrixXd& x) {
  const auto n = x.rows();
  Eigen::MatrixXd p = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      int shared = 0;
      for (std::size_t t = 0; t < forest.trees.size(); ++t) shared += leaf(forest, x, t, i) == leaf(forest, x, t, j);
      p(i, j) = static_cast<double>(shared) / static_cast<double>(forest.trees.size());
    }
  }
  return p;
}

// Undefined pairs (never out-of-bag together) are 0.
inline Eigen::MatrixXd oob(const TrainedForest& forest, const Eigen::MatrixXd& x) {
  const auto n = x.rows();
  Eigen::MatrixXd p = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      int both = 0;
      int shared = 0;
      for (std::size_t t = 0; t < forest.trees.size(); ++t) {
        const auto& tree = forest.trees[t];
        if (tree.inbag(i) != 0 || tree.inbag(j) != 0) continue;
        ++both;
        shared += leaf(forest, x, t, i) == leaf(forest, x, t, j);
      }
      p(i, j) = both == 0 ? 0.0 : static_cast<double>(shared) / both;
    }
  }
  return p;
}

// Rows whose anchor is never out-of-bag are 0.
inline Eigen::MatrixXd gap(const TrainedForest& forest, const Eigen::MatrixXd& x) {
  const auto n = x.rows();
  // Training weight per row: balanced class weight, or 1.
  std::vector<double> w(static_cast<std::size_t>(n), 1.0);
  if (forest.params.class_weighting == rfexplain::ClassWeighting::balanced) {
    for (Eigen::Index i = 0; i < n; ++i) {
      const int y = forest.train_labels[static_cast<std::size_t>(i)];
      const auto same = std::count(forest.train_labels.begin(), forest.train_labels.end(), y);
      w[static_cast<std::size_t>(i)] = static_cast<double>(n) / (forest.class_count * static_cast<double>(same));
    }
  }
  Eigen::MatrixXd p = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    int oob_trees = 0;
    for (std::size_t t = 0; t < forest.trees.size(); ++t) {
      const auto& tree = forest.trees[t];
      if (tree.inbag(i) != 0) continue;
      ++oob_trees;
      const int li = leaf(forest, x, t, i);
      double mass = 0.0;
      for (Eigen::Index k = 0; k < n; ++k) {
        if (leaf(forest, x, t, k) == li) mass += tree.inbag(k) * w[static_cast<std::size_t>(k)];
      }
      for (Eigen::Index j = 0; j < n; ++j) {
        if (leaf(forest, x, t, j) == li) p(i, j) += tree.inbag(j) * w[static_cast<std::size_t>(j)] / mass;
      }
    }
    if (oob_trees > 0) p.row(i) /= oob_trees;
  }
  return p;
}

inline Eigen::Index argmax_scan(const Eigen::MatrixXd& d, Eigen::Index q, const std::vector<int>& labels, bool same) {
  Eigen::Index best = -1;
  for (Eigen::Index j = 0; j < d.rows(); ++j) {
    if (j == q || (labels[static_cast<std::size_t>(j)] == labels[static_cast<std::size_t>(q)]) != same) continue;
    if (best < 0 || d(q, j) > d(q, best)) best = j;
  }
  return best;
}

inline Eigen::Index argmin_scan(const Eigen::MatrixXd& d, Eigen::Index q, const std::vector<int>& labels, bool same) {
  Eigen::Index best = -1;
  for (Eigen::Index j = 0; j < d.rows(); ++j) {
    if (j == q || (labels[static_cast<std::size_t>(j)] == labels[static_cast<std::size_t>(q)]) != same) continue;
    if (best < 0 || d(q, j) < d(q, best)) best = j;
  }
  return best;
}

// Exhaustive k-medoids optimum (k <= 2) over the given rows.
inline double kmedoids_optimum(const Eigen::MatrixXd& d, const std::vector<Eigen::Index>& rows, int k) {
  auto cost = [&](const std::vector<Eigen::Index>& medoids) {
    double total = 0.0;
    for (auto r : rows) {
      double best = std::numeric_limits<double>::infinity();
      for (auto m : medoids) best = std::min(best, d(r, m));
      total += best;
    }
    return total;
  };
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t a = 0; a < rows.size(); ++a) {
    if (k == 1) {
      best = std::min(best, cost({rows[a]}));
      continue;
    }
    for (std::size_t b = a + 1; b < rows.size(); ++b) best = std::min(best, cost({rows[a], rows[b]}));
  }
  return best;
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("rfexplain-test-" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace oracle
