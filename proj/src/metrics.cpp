#include "rfexplain/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <sstream>

#include "rfexplain/error.hpp"

namespace rfexplain {

FeatureLayout FeatureLayout::from(const Dataset& dataset) {
  FeatureLayout layout;
  layout.logical = dataset.logical_features();
  for (const auto& c : dataset.columns) layout.onehot.push_back(c.kind == ColumnKind::onehot);
  layout.feature_count = dataset.logical_feature_count();
  return layout;
}

std::optional<double> sparsity(const Eigen::Ref<const Eigen::RowVectorXd>& q,
                               const Eigen::Ref<const Eigen::RowVectorXd>& e,
                               const FeatureLayout& layout, double numeric_tol) {
  if (q.size() != e.size() || static_cast<std::size_t>(q.size()) != layout.logical.size()) {
    throw DataError("sparsity: feature dimension mismatch");
  }
  std::vector<bool> changed(static_cast<std::size_t>(layout.feature_count), false);
  for (Eigen::Index c = 0; c < q.size(); ++c) {
    const auto uc = static_cast<std::size_t>(c);
    const bool differs = layout.onehot[uc] ? q(c) != e(c) : std::abs(q(c) - e(c)) > numeric_tol;
    if (differs) changed[static_cast<std::size_t>(layout.logical[uc])] = true;
  }
  const auto n = std::count(changed.begin(), changed.end(), true);
  if (n == 0) return std::nullopt;
  return 1.0 / static_cast<double>(n);
}

double ood_distance(Eigen::Index e, const DistanceMatrix& distance, bool exclude_self) {
  double best = std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < distance.size(); ++i) {
    if (exclude_self && i == e) continue;
    best = std::min(best, distance(e, i));
  }
  if (!std::isfinite(best)) throw DataError("ood_distance needs a non-empty reference set");
  return best;
}

std::optional<double> outlier_score(Eigen::Index e, const ProximityMatrix& proximity,
                                    std::span<const int> labels) {
  const int y = labels[static_cast<std::size_t>(e)];
  double denominator = 0.0;
  std::size_t same_class = 0;
  for (Eigen::Index j = 0; j < proximity.size(); ++j) {
    if (j == e || labels[static_cast<std::size_t>(j)] != y) continue;
    ++same_class;
    if (proximity.defined(e, j)) denominator += proximity.values(e, j) * proximity.values(e, j);
  }
  if (same_class == 0) throw DataError("outlier_score needs another row of the same class");
  if (denominator == 0.0) return std::nullopt;
  return static_cast<double>(same_class) / denominator;
}

std::optional<double> robustness(Eigen::Index q, const Eigen::Ref<const Eigen::MatrixXd>& train_proba,
                                 const DistanceMatrix& distance, const Neighborhood& neighborhood) {
  std::vector<Eigen::Index> others;
  for (Eigen::Index i = 0; i < distance.size(); ++i) {
    if (i != q) others.push_back(i);
  }
  std::vector<Eigen::Index> neighbors;
  if (neighborhood.mode == Neighborhood::Mode::knn) {
    const auto k = std::min<std::size_t>(static_cast<std::size_t>(std::max(neighborhood.k, 0)), others.size());
    std::partial_sort(others.begin(), others.begin() + static_cast<std::ptrdiff_t>(k), others.end(),
                      [&](Eigen::Index a, Eigen::Index b) {
                        return distance(q, a) < distance(q, b) ||
                               (distance(q, a) == distance(q, b) && a < b);
                      });
    neighbors.assign(others.begin(), others.begin() + static_cast<std::ptrdiff_t>(k));
  } else {
    for (auto i : others) {
      if (distance(q, i) <= neighborhood.radius) neighbors.push_back(i);
    }
  }
  if (neighbors.empty()) throw DataError("robustness: empty neighbourhood");
  double worst = 0.0;
  for (auto i : neighbors) {
    const double change = (train_proba.row(q) - train_proba.row(i)).norm();
    const double d = distance(q, i);
    if (d == 0.0) {
      if (change == 0.0) continue;
      return std::nullopt;
    }
    worst = std::max(worst, change / d);
  }
  return worst;
}

std::optional<double> robustness(Eigen::Index q, const TrainedForest& forest, const Dataset& train,
                                 const DistanceMatrix& distance, const Neighborhood& neighborhood) {
  return robustness(q, predict_proba(forest, train.features), distance, neighborhood);
}

std::vector<std::vector<Eigen::Index>> prototype_assignment(const PrototypeSet& prototypes,
                                                            const DistanceMatrix& distance,
                                                            std::span<const int> labels) {
  const auto pooled = prototypes.pooled();
  std::vector<std::vector<Eigen::Index>> assigned(pooled.size());
  for (Eigen::Index x = 0; x < distance.size(); ++x) {
    const int y = labels[static_cast<std::size_t>(x)];
    std::size_t best = pooled.size();
    for (std::size_t p = 0; p < pooled.size(); ++p) {
      if (labels[static_cast<std::size_t>(pooled[p])] != y) continue;
      if (best == pooled.size() || distance(x, pooled[p]) < distance(x, pooled[best])) best = p;
    }
    if (best < pooled.size() && pooled[best] != x && !prototypes.contains(x)) {
      assigned[best].push_back(x);
    }
  }
  return assigned;
}

double compactness(Eigen::Index prototype, std::span<const Eigen::Index> assigned,
                   const DistanceMatrix& distance) {
  double total = 0.0;
  std::size_t n = 0;
  for (auto x : assigned) {
    if (x == prototype) continue;
    total += distance(prototype, x);
    ++n;
  }
  return n == 0 ? 0.0 : total / static_cast<double>(n);
}

double nearest_prototype_f1(const PrototypeSet& prototypes,
                            const Eigen::Ref<const Eigen::MatrixXd>& test_to_train,
                            std::span<const int> train_labels, std::span<const int> test_labels) {
  std::vector<int> predicted;
  predicted.reserve(test_labels.size());
  for (Eigen::Index i = 0; i < test_to_train.rows(); ++i) {
    predicted.push_back(nearest_prototype_predict(test_to_train.row(i).transpose(), prototypes, train_labels));
  }
  return weighted_f1(predicted, test_labels);
}

const MetricStat* MetricReport::find(const std::string& explanans, const std::string& metric,
                                     const std::string& backend) const {
  const auto e = entries_.find(explanans);
  if (e == entries_.end()) return nullptr;
  const auto m = e->second.find(metric);
  if (m == e->second.end()) return nullptr;
  const auto b = m->second.find(backend);
  return b == m->second.end() ? nullptr : &b->second;
}

std::optional<double> MetricReport::mean(const std::string& explanans, const std::string& metric,
                                         const std::string& backend) const {
  const auto* s = find(explanans, metric, backend);
  return s ? s->mean() : std::nullopt;
}

nlohmann::json MetricReport::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [explanans, metrics] : entries_) {
    for (const auto& [metric, backends] : metrics) {
      for (const auto& [backend, stat] : backends) {
        const auto mean = stat.mean();
        j[explanans][metric][backend] = {{"mean", mean ? nlohmann::json(*mean) : nlohmann::json(nullptr)},
                                         {"sum", stat.sum},
                                         {"count", stat.count},
                                         {"masked", stat.masked}};
      }
    }
  }
  return j;
}

MetricReport MetricReport::from_json(const nlohmann::json& j) {
  MetricReport r;
  for (const auto& [explanans, metrics] : j.items()) {
    for (const auto& [metric, backends] : metrics.items()) {
      for (const auto& [backend, stat] : backends.items()) {
        auto& s = r.entries_[explanans][metric][backend];
        s.sum = stat.at("sum").get<double>();
        s.count = stat.at("count").get<std::size_t>();
        s.masked = stat.at("masked").get<std::size_t>();
      }
    }
  }
  return r;
}

std::string MetricReport::to_csv(const std::string& scope) const {
  std::ostringstream os;
  char buf[32];
  for (const auto& [explanans, metrics] : entries_) {
    for (const auto& [metric, backends] : metrics) {
      for (const auto& [backend, stat] : backends) {
        const auto mean = stat.mean();
        if (mean) {
          std::snprintf(buf, sizeof buf, "%.17g", *mean);
        } else {
          buf[0] = '\0';
        }
        os << scope << ',' << explanans << ',' << metric << ',' << backend << ',' << buf << ','
           << stat.count << ',' << stat.masked << '\n';
      }
    }
  }
  return os.str();
}

MetricReport MetricReport::average(const std::vector<MetricReport>& reports) {
  std::map<std::string, std::map<std::string, std::map<std::string, std::vector<const MetricStat*>>>> grouped;
  for (const auto& r : reports) {
    for (const auto& [e, metrics] : r.entries_) {
      for (const auto& [m, backends] : metrics) {
        for (const auto& [b, stat] : backends) grouped[e][m][b].push_back(&stat);
      }
    }
  }
  MetricReport out;
  for (const auto& [e, metrics] : grouped) {
    for (const auto& [m, backends] : metrics) {
      for (const auto& [b, stats] : backends) {
        double total = 0.0;
        std::size_t defined = 0;
        MetricStat merged;
        for (const auto* s : stats) {
          merged.count += s->count;
          merged.masked += s->masked;
          if (const auto mean = s->mean()) {
            total += *mean;
            ++defined;
          }
        }
        // Store so that sum / count reproduces the mean of fold means.
        merged.sum = defined > 0 && merged.count > 0
                         ? total / static_cast<double>(defined) * static_cast<double>(merged.count)
                         : 0.0;
        out.entries_[e][m][b] = merged;
      }
    }
  }
  return out;
}

}  // namespace rfexplain
