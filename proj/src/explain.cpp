#include "rfexplain/explain.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <unordered_map>

#include "rfexplain/error.hpp"
#include "rfexplain/log.hpp"

namespace rfexplain {

std::string to_string(PrototypeMethod method) {
  return method == PrototypeMethod::hdp ? "hdp" : "kmedoids";
}

PrototypeMethod parse_method(std::string_view text) {
  if (text == "hdp") return PrototypeMethod::hdp;
  if (text == "kmedoids") return PrototypeMethod::kmedoids;
  throw ConfigError("unknown prototype method '" + std::string(text) + "' (valid: hdp, kmedoids)");
}

std::vector<Eigen::Index> PrototypeSet::pooled() const {
  std::vector<Eigen::Index> all;
  for (const auto& c : per_class) all.insert(all.end(), c.begin(), c.end());
  std::sort(all.begin(), all.end());
  return all;
}

std::size_t PrototypeSet::total() const {
  std::size_t n = 0;
  for (const auto& c : per_class) n += c.size();
  return n;
}

std::vector<int> PrototypeSet::counts() const {
  std::vector<int> out;
  for (const auto& c : per_class) out.push_back(static_cast<int>(c.size()));
  return out;
}

bool PrototypeSet::contains(Eigen::Index row) const {
  return std::any_of(per_class.begin(), per_class.end(), [row](const auto& c) {
    return std::find(c.begin(), c.end(), row) != c.end();
  });
}

namespace {

std::vector<std::vector<Eigen::Index>> members_by_class(std::span<const int> labels, std::size_t classes) {
  std::vector<std::vector<Eigen::Index>> members(classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto y = static_cast<std::size_t>(labels[i]);
    if (y >= classes) throw DataError("label exceeds the prototype quota table");
    members[y].push_back(static_cast<Eigen::Index>(i));
  }
  return members;
}

void check_square(Eigen::Index rows, Eigen::Index cols, std::size_t labels) {
  if (rows != cols || static_cast<std::size_t>(rows) != labels) {
    throw DataError("matrix shape does not match the label count");
  }
}

}  // namespace

int default_hdp_neighbors(int class_size, int quota) {
  if (quota < 1) return 1;
  // Capped so that quota picks of k + 1 rows fit in the class whenever k >= 1 allows it.
  const int half = (class_size + 2 * quota - 1) / (2 * quota);
  return std::max(1, std::min(half, class_size / quota - 1));
}

PrototypeSet hdp_prototypes(const Eigen::Ref<const Eigen::MatrixXd>& similarity,
                            std::span<const int> labels, std::span<const int> n_per_class,
                            std::optional<int> k_neighbors) {
  check_square(similarity.rows(), similarity.cols(), labels.size());
  if (k_neighbors && *k_neighbors < 1) throw DataError("HDP needs k_neighbors >= 1");
  PrototypeSet out;
  out.method = PrototypeMethod::hdp;
  const auto members = members_by_class(labels, n_per_class.size());
  out.per_class.resize(members.size());
  out.exhausted.assign(members.size(), false);

  std::vector<std::pair<double, Eigen::Index>> neighbors;
  for (std::size_t c = 0; c < members.size(); ++c) {
    const int quota = n_per_class[c];
    if (quota < 1) throw DataError("HDP needs at least one prototype per class");
    const int k = k_neighbors.value_or(
        default_hdp_neighbors(static_cast<int>(members[c].size()), quota));
    std::vector<Eigen::Index> remaining = members[c];

    while (static_cast<int>(out.per_class[c].size()) < quota && !remaining.empty()) {
      const auto k_eff = std::min<std::size_t>(static_cast<std::size_t>(k), remaining.size() - 1);
      double best_score = -std::numeric_limits<double>::infinity();
      Eigen::Index best = -1;
      std::vector<Eigen::Index> best_neighbors;
      for (auto candidate : remaining) {
        neighbors.clear();
        for (auto other : remaining) {
          if (other != candidate) neighbors.emplace_back(similarity(candidate, other), other);
        }
        const auto by_closeness = [](const auto& a, const auto& b) {
          return a.first > b.first || (a.first == b.first && a.second < b.second);
        };
        std::partial_sort(neighbors.begin(), neighbors.begin() + static_cast<std::ptrdiff_t>(k_eff),
                          neighbors.end(), by_closeness);
        double score = 0.0;
        for (std::size_t r = 0; r < k_eff; ++r) score += neighbors[r].first;
        // Candidates are visited in increasing index, so strict > keeps the lower index on ties.
        if (score > best_score) {
          best_score = score;
          best = candidate;
          best_neighbors.clear();
          for (std::size_t r = 0; r < k_eff; ++r) best_neighbors.push_back(neighbors[r].second);
        }
      }
      out.per_class[c].push_back(best);
      std::erase_if(remaining, [&](Eigen::Index i) {
        return i == best ||
               std::find(best_neighbors.begin(), best_neighbors.end(), i) != best_neighbors.end();
      });
    }
    if (static_cast<int>(out.per_class[c].size()) < quota) {
      out.exhausted[c] = true;
      warn("HDP exhausted class " + std::to_string(c) + " after " +
           std::to_string(out.per_class[c].size()) + " of " + std::to_string(quota) + " prototypes");
    }
  }
  return out;
}

PrototypeSet hdp_prototypes(const ProximityMatrix& proximity, std::span<const int> labels,
                            std::span<const int> n_per_class, std::optional<int> k_neighbors) {
  return hdp_prototypes(proximity.values, labels, n_per_class, k_neighbors);
}

PrototypeSet hdp_prototypes(const DistanceMatrix& distance, std::span<const int> labels,
                            std::span<const int> n_per_class, std::optional<int> k_neighbors) {
  const Eigen::MatrixXd similarity = (1.0 - distance.values.array()).matrix();
  PrototypeSet out = hdp_prototypes(similarity, labels, n_per_class, k_neighbors);
  out.backend = distance.backend;
  return out;
}

double kmedoids_objective(const Eigen::Ref<const Eigen::MatrixXd>& distance,
                          std::span<const Eigen::Index> rows, std::span<const Eigen::Index> medoids) {
  double total = 0.0;
  for (auto x : rows) {
    double nearest = std::numeric_limits<double>::infinity();
    for (auto m : medoids) nearest = std::min(nearest, distance(x, m));
    total += nearest;
  }
  return total;
}

namespace {

// Small problems are solved by enumeration; swap descent can stall in a
// local optimum once k >= 2.
constexpr double kExactSubsetLimit = 5000;

double subset_count(std::size_t n, std::size_t k) {
  double count = 1.0;
  for (std::size_t i = 0; i < k; ++i) count = count * static_cast<double>(n - i) / static_cast<double>(i + 1);
  return count;
}

// Lexicographically first optimal medoid set.
std::vector<std::size_t> exact_medoids(const Eigen::MatrixXd& d, std::size_t k) {
  const auto n = static_cast<std::size_t>(d.rows());
  std::vector<std::size_t> pick(k);
  std::iota(pick.begin(), pick.end(), std::size_t{0});
  std::vector<std::size_t> best = pick;
  double best_cost = std::numeric_limits<double>::infinity();
  Eigen::VectorXd nearest(d.rows());
  while (true) {
    nearest = d.col(static_cast<Eigen::Index>(pick[0]));
    for (std::size_t m = 1; m < k; ++m) nearest = nearest.cwiseMin(d.col(static_cast<Eigen::Index>(pick[m])));
    const double cost = nearest.sum();
    if (cost < best_cost) {
      best_cost = cost;
      best = pick;
    }
    std::size_t i = k;
    while (i > 0 && pick[i - 1] == n - k + i - 1) --i;
    if (i == 0) break;
    ++pick[i - 1];
    for (std::size_t j = i; j < k; ++j) pick[j] = pick[j - 1] + 1;
  }
  return best;
}

// PAM on the sub-problem given by `rows`; returns positions into `rows`.
std::vector<std::size_t> pam(const Eigen::MatrixXd& d, std::size_t k, int max_swaps) {
  const auto n = static_cast<std::size_t>(d.rows());
  if (max_swaps > 0 && subset_count(n, k) <= kExactSubsetLimit) return exact_medoids(d, k);
  std::vector<std::size_t> medoids;
  std::vector<bool> is_medoid(n, false);
  Eigen::VectorXd nearest = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(n),
                                                      std::numeric_limits<double>::infinity());

  // BUILD: add the point that lowers the objective most, lowest index on ties.
  for (std::size_t step = 0; step < k; ++step) {
    double best_cost = std::numeric_limits<double>::infinity();
    std::size_t best = n;
    for (std::size_t o = 0; o < n; ++o) {
      if (is_medoid[o]) continue;
      const double cost = nearest.cwiseMin(d.col(static_cast<Eigen::Index>(o))).sum();
      if (cost < best_cost) {
        best_cost = cost;
        best = o;
      }
    }
    medoids.push_back(best);
    is_medoid[best] = true;
    nearest = nearest.cwiseMin(d.col(static_cast<Eigen::Index>(best)));
  }

  // SWAP: steepest descent using nearest / second-nearest distances.
  Eigen::VectorXd d1(static_cast<Eigen::Index>(n)), d2(static_cast<Eigen::Index>(n));
  std::vector<std::size_t> owner(n);
  for (int swaps = 0; swaps < max_swaps; ++swaps) {
    for (std::size_t x = 0; x < n; ++x) {
      double a = std::numeric_limits<double>::infinity(), b = a;
      std::size_t own = 0;
      for (std::size_t m = 0; m < medoids.size(); ++m) {
        const double v = d(static_cast<Eigen::Index>(x), static_cast<Eigen::Index>(medoids[m]));
        if (v < a) {
          b = a;
          a = v;
          own = m;
        } else if (v < b) {
          b = v;
        }
      }
      d1(static_cast<Eigen::Index>(x)) = a;
      d2(static_cast<Eigen::Index>(x)) = b;
      owner[x] = own;
    }
    double best_delta = 0.0;
    std::size_t best_m = 0, best_o = n;
    for (std::size_t m = 0; m < medoids.size(); ++m) {
      for (std::size_t o = 0; o < n; ++o) {
        if (is_medoid[o]) continue;
        double delta = 0.0;
        for (std::size_t x = 0; x < n; ++x) {
          const auto xi = static_cast<Eigen::Index>(x);
          const double to_o = d(xi, static_cast<Eigen::Index>(o));
          delta += owner[x] == m ? std::min(d2(xi), to_o) - d1(xi) : std::min(0.0, to_o - d1(xi));
        }
        if (delta < best_delta - 1e-12 * (1.0 + std::abs(best_delta))) {
          best_delta = delta;
          best_m = m;
          best_o = o;
        }
      }
    }
    if (best_o == n) break;
    is_medoid[medoids[best_m]] = false;
    is_medoid[best_o] = true;
    medoids[best_m] = best_o;
  }
  std::sort(medoids.begin(), medoids.end());
  return medoids;
}

}  // namespace

PrototypeSet kmedoids_prototypes(const DistanceMatrix& distance, std::span<const int> labels,
                                 std::span<const int> n_per_class, int max_swaps) {
  check_square(distance.values.rows(), distance.values.cols(), labels.size());
  PrototypeSet out;
  out.method = PrototypeMethod::kmedoids;
  out.backend = distance.backend;
  const auto members = members_by_class(labels, n_per_class.size());
  out.per_class.resize(members.size());
  out.exhausted.assign(members.size(), false);
  for (std::size_t c = 0; c < members.size(); ++c) {
    const auto& rows = members[c];
    if (rows.empty()) throw DataError("k-medoids on empty class " + std::to_string(c));
    const int quota = n_per_class[c];
    if (quota < 1 || static_cast<std::size_t>(quota) > rows.size()) {
      throw DataError("k-medoids quota " + std::to_string(quota) + " invalid for class " +
                      std::to_string(c) + " of size " + std::to_string(rows.size()));
    }
    Eigen::MatrixXd sub(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
      for (std::size_t j = 0; j < rows.size(); ++j) {
        sub(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = distance(rows[i], rows[j]);
      }
    }
    for (auto pos : pam(sub, static_cast<std::size_t>(quota), max_swaps)) {
      out.per_class[c].push_back(rows[pos]);
    }
  }
  return out;
}

double witness(Eigen::Index row, const PrototypeSet& prototypes,
               const Eigen::Ref<const Eigen::MatrixXd>& similarity) {
  const auto pooled = prototypes.pooled();
  if (pooled.empty()) throw DataError("witness needs a non-empty prototype set");
  double to_prototypes = 0.0;
  for (auto z : pooled) to_prototypes += similarity(row, z);
  return similarity.row(row).mean() - to_prototypes / static_cast<double>(pooled.size());
}

Eigen::VectorXd witness_all(const PrototypeSet& prototypes,
                            const Eigen::Ref<const Eigen::MatrixXd>& similarity) {
  Eigen::VectorXd w(similarity.rows());
  for (Eigen::Index i = 0; i < similarity.rows(); ++i) w(i) = witness(i, prototypes, similarity);
  return w;
}

CriticSet select_critics(const PrototypeSet& prototypes,
                         const Eigen::Ref<const Eigen::MatrixXd>& similarity, int m_critics,
                         CriticScope scope, std::span<const int> labels) {
  if (m_critics < 1) throw DataError("m_critics must be >= 1");
  if (scope == CriticScope::per_class && static_cast<Eigen::Index>(labels.size()) != similarity.rows()) {
    throw DataError("per-class critics need one label per row");
  }
  const Eigen::VectorXd w = witness_all(prototypes, similarity);
  std::vector<Eigen::Index> candidates;
  for (Eigen::Index i = 0; i < similarity.rows(); ++i) {
    if (!prototypes.contains(i)) candidates.push_back(i);
  }
  const auto by_witness = [&](Eigen::Index a, Eigen::Index b) {
    return w(a) > w(b) || (w(a) == w(b) && a < b);
  };
  std::stable_sort(candidates.begin(), candidates.end(), by_witness);

  std::vector<Eigen::Index> chosen;
  if (scope == CriticScope::pooled) {
    if (static_cast<std::size_t>(m_critics) > candidates.size()) {
      throw DataError("requested " + std::to_string(m_critics) + " critics but only " +
                      std::to_string(candidates.size()) + " non-prototype rows exist");
    }
    chosen.assign(candidates.begin(), candidates.begin() + m_critics);
  } else {
    std::unordered_map<int, int> taken;
    for (auto i : candidates) {
      auto& t = taken[labels[static_cast<std::size_t>(i)]];
      if (t < m_critics) {
        chosen.push_back(i);
        ++t;
      }
    }
    for (const auto& [label, t] : taken) {
      if (t < m_critics) throw DataError("class " + std::to_string(label) + " has too few critics");
    }
  }
  CriticSet out;
  out.indices = std::move(chosen);
  for (auto i : out.indices) out.witness_values.push_back(w(i));
  return out;
}

Eigen::Index semi_factual(Eigen::Index query, const DistanceMatrix& distance, std::span<const int> labels) {
  const int y = labels[static_cast<std::size_t>(query)];
  Eigen::Index best = -1;
  for (Eigen::Index i = 0; i < distance.size(); ++i) {
    if (i == query || labels[static_cast<std::size_t>(i)] != y) continue;
    if (best < 0 || distance(query, i) > distance(query, best)) best = i;
  }
  if (best < 0) throw DataError("query row " + std::to_string(query) + " is its class's only member");
  return best;
}

Eigen::Index counter_factual(Eigen::Index query, const DistanceMatrix& distance,
                             std::span<const int> labels) {
  const int y = labels[static_cast<std::size_t>(query)];
  Eigen::Index best = -1;
  for (Eigen::Index i = 0; i < distance.size(); ++i) {
    if (labels[static_cast<std::size_t>(i)] == y) continue;
    if (best < 0 || distance(query, i) < distance(query, best)) best = i;
  }
  if (best < 0) throw DataError("no row with a label different from the query");
  return best;
}

FactualPair factual_pair(Eigen::Index query, const DistanceMatrix& distance, std::span<const int> labels) {
  return FactualPair{query, semi_factual(query, distance, labels),
                     counter_factual(query, distance, labels), distance.backend};
}

int nearest_prototype_predict(const Eigen::Ref<const Eigen::VectorXd>& distances_to_train,
                              const PrototypeSet& prototypes, std::span<const int> train_labels) {
  const auto pooled = prototypes.pooled();
  if (pooled.empty()) throw DataError("nearest-prototype prediction needs prototypes");
  Eigen::Index best = pooled.front();
  for (auto p : pooled) {
    if (distances_to_train(p) < distances_to_train(best)) best = p;
  }
  return train_labels[static_cast<std::size_t>(best)];
}

nlohmann::json to_json(const ExplanationBundle& bundle) {
  using nlohmann::json;
  const auto id = [&](Eigen::Index i) { return bundle.row_ids.at(static_cast<std::size_t>(i)); };
  json sets = json::array();
  for (std::size_t s = 0; s < bundle.prototypes.size(); ++s) {
    const auto& ps = bundle.prototypes[s];
    json per_class = json::object();
    for (std::size_t c = 0; c < ps.per_class.size(); ++c) {
      json ids = json::array();
      for (auto i : ps.per_class[c]) ids.push_back(id(i));
      per_class[bundle.class_names.at(c)] = std::move(ids);
    }
    json critics = json::array();
    if (s < bundle.critics.size()) {
      for (std::size_t k = 0; k < bundle.critics[s].indices.size(); ++k) {
        critics.push_back({{"row_id", id(bundle.critics[s].indices[k])},
                           {"witness", bundle.critics[s].witness_values[k]}});
      }
    }
    sets.push_back({{"method", to_string(ps.method)},
                    {"backend", to_string(ps.backend)},
                    {"prototypes", std::move(per_class)},
                    {"critics", std::move(critics)}});
  }
  json factuals = json::array();
  for (const auto& f : bundle.factuals) {
    factuals.push_back({{"backend", to_string(f.backend)},
                        {"query_id", id(f.query)},
                        {"semi_id", id(f.semi_factual)},
                        {"counter_id", id(f.counter_factual)}});
  }
  return json{{"prototype_sets", std::move(sets)}, {"factuals", std::move(factuals)}};
}

ExplanationBundle bundle_from_json(const nlohmann::json& j, const std::vector<std::string>& row_ids,
                                   const std::vector<std::string>& class_names) {
  std::unordered_map<std::string, Eigen::Index> index;
  for (std::size_t i = 0; i < row_ids.size(); ++i) index.emplace(row_ids[i], static_cast<Eigen::Index>(i));
  const auto row = [&](const nlohmann::json& v) {
    const auto it = index.find(v.get<std::string>());
    if (it == index.end()) throw DataError("bundle references unknown row id '" + v.get<std::string>() + "'");
    return it->second;
  };
  ExplanationBundle b;
  b.row_ids = row_ids;
  b.class_names = class_names;
  try {
    for (const auto& js : j.at("prototype_sets")) {
      PrototypeSet ps;
      ps.method = parse_method(js.at("method").get<std::string>());
      ps.backend = parse_backend(js.at("backend").get<std::string>());
      ps.per_class.resize(class_names.size());
      ps.exhausted.assign(class_names.size(), false);
      for (const auto& [name, ids] : js.at("prototypes").items()) {
        const auto c = std::find(class_names.begin(), class_names.end(), name);
        if (c == class_names.end()) throw DataError("bundle references unknown class '" + name + "'");
        for (const auto& v : ids) ps.per_class[static_cast<std::size_t>(c - class_names.begin())].push_back(row(v));
      }
      CriticSet cs;
      for (const auto& jc : js.at("critics")) {
        cs.indices.push_back(row(jc.at("row_id")));
        cs.witness_values.push_back(jc.at("witness").get<double>());
      }
      b.prototypes.push_back(std::move(ps));
      b.critics.push_back(std::move(cs));
    }
    for (const auto& jf : j.at("factuals")) {
      b.factuals.push_back(FactualPair{row(jf.at("query_id")), row(jf.at("semi_id")),
                                       row(jf.at("counter_id")),
                                       parse_backend(jf.at("backend").get<std::string>())});
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed explanation bundle: ") + e.what());
  }
  return b;
}

}  // namespace rfexplain
