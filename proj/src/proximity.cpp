#include "rfexplain/proximity.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "rfexplain/detail/binary_io.hpp"
#include "rfexplain/error.hpp"
#include "rfexplain/log.hpp"

namespace rfexplain {

std::string to_string(ProximityKind kind) {
  switch (kind) {
    case ProximityKind::original:
      return "original";
    case ProximityKind::oob:
      return "oob";
    case ProximityKind::gap:
      return "gap";
    case ProximityKind::gap_sym:
      return "gap_sym";
  }
  return "?";
}

std::string to_string(DistanceBackend backend) {
  switch (backend) {
    case DistanceBackend::l2:
      return "l2";
    case DistanceBackend::original:
      return "original";
    case DistanceBackend::oob:
      return "oob";
    case DistanceBackend::gap:
      return "gap";
  }
  return "?";
}

DistanceBackend parse_backend(std::string_view text) {
  if (text == "l2") return DistanceBackend::l2;
  if (text == "original") return DistanceBackend::original;
  if (text == "oob") return DistanceBackend::oob;
  if (text == "gap") return DistanceBackend::gap;
  throw ConfigError("unknown backend '" + std::string(text) + "' (valid: l2, original, oob, gap)");
}

ProximityKind proximity_kind(DistanceBackend backend) {
  switch (backend) {
    case DistanceBackend::original:
      return ProximityKind::original;
    case DistanceBackend::oob:
      return ProximityKind::oob;
    case DistanceBackend::gap:
      return ProximityKind::gap;
    case DistanceBackend::l2:
      break;
  }
  throw ConfigError("the l2 backend has no forest proximity");
}

namespace {

// Rows of one tree grouped by terminal leaf (counting sort on leaf_of).
struct LeafBuckets {
  std::vector<int> offsets;  // leaf_count + 1
  std::vector<int> rows;

  explicit LeafBuckets(const TreeRecord& tree) {
    const auto leaves = static_cast<std::size_t>(tree.leaf_count());
    offsets.assign(leaves + 1, 0);
    for (Eigen::Index i = 0; i < tree.leaf_of.size(); ++i) ++offsets[static_cast<std::size_t>(tree.leaf_of(i)) + 1];
    for (std::size_t l = 0; l < leaves; ++l) offsets[l + 1] += offsets[l];
    rows.resize(static_cast<std::size_t>(tree.leaf_of.size()));
    std::vector<int> cursor(offsets.begin(), offsets.end() - 1);
    for (Eigen::Index i = 0; i < tree.leaf_of.size(); ++i) {
      rows[static_cast<std::size_t>(cursor[static_cast<std::size_t>(tree.leaf_of(i))]++)] = static_cast<int>(i);
    }
  }

  std::span<const int> leaf(int l) const {
    const auto b = static_cast<std::size_t>(offsets[static_cast<std::size_t>(l)]);
    const auto e = static_cast<std::size_t>(offsets[static_cast<std::size_t>(l) + 1]);
    return {rows.data() + b, e - b};
  }
};

}  // namespace

ProximityMatrix proximity_original(const TrainedForest& forest) {
  const auto n = forest.sample_count();
  Eigen::MatrixXd counts = Eigen::MatrixXd::Zero(n, n);
  for (const auto& tree : forest.trees) {
    const LeafBuckets buckets(tree);
    for (int l = 0; l < tree.leaf_count(); ++l) {
      const auto members = buckets.leaf(l);
      for (int j : members) {
        for (int i : members) counts(i, j) += 1.0;
      }
    }
  }
  ProximityMatrix p;
  p.kind = ProximityKind::original;
  p.values = counts / static_cast<double>(forest.trees.size());
  p.defined = BoolMatrix::Constant(n, n, true);
  return p;
}

ProximityMatrix proximity_oob(const TrainedForest& forest) {
  const auto n = forest.sample_count();
  const auto n_trees = static_cast<Eigen::Index>(forest.trees.size());
  // Denominator: number of trees where both rows are OOB, i.e. O O^T for the
  // n x |T| OOB indicator matrix.
  Eigen::MatrixXd oob(n, n_trees);
  Eigen::MatrixXd together = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index t = 0; t < n_trees; ++t) {
    const auto& tree = forest.trees[static_cast<std::size_t>(t)];
    oob.col(t) = (tree.inbag.array() == 0).cast<double>().matrix();
    const LeafBuckets buckets(tree);
    for (int l = 0; l < tree.leaf_count(); ++l) {
      const auto members = buckets.leaf(l);
      for (int j : members) {
        if (tree.inbag(j) != 0) continue;
        for (int i : members) {
          if (tree.inbag(i) == 0) together(i, j) += 1.0;
        }
      }
    }
  }
  const Eigen::MatrixXd both_oob = oob * oob.transpose();

  ProximityMatrix p;
  p.kind = ProximityKind::oob;
  p.defined = both_oob.array() > 0.0;
  p.values = p.defined.select(together.array() / both_oob.array().max(1.0), 0.0).matrix();
  return p;
}

ProximityMatrix proximity_gap(const TrainedForest& forest) {
  const auto n = forest.sample_count();
  // Accumulated transposed so each anchor row i is a contiguous column.
  Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(n, n);
  const Eigen::VectorXi oob_trees = forest.oob_tree_counts();
  // In-bag multiplicity scaled by class weight, so leaf shares match the
  // weighted leaf votes and the proximity vote reproduces the OOB prediction.
  const Eigen::VectorXd w = row_class_weights(forest);
  for (const auto& tree : forest.trees) {
    const LeafBuckets buckets(tree);
    for (int l = 0; l < tree.leaf_count(); ++l) {
      const auto members = buckets.leaf(l);
      double mass = 0.0;  // |M_i(t)|: weighted in-bag mass in this leaf
      for (int j : members) mass += tree.inbag(j) * w(j);
      if (mass == 0.0) continue;
      for (int i : members) {
        if (tree.inbag(i) != 0) continue;
        for (int j : members) {
          if (tree.inbag(j) != 0) acc(j, i) += tree.inbag(j) * w(j) / mass;
        }
      }
    }
  }
  ProximityMatrix p;
  p.kind = ProximityKind::gap;
  p.values = acc.transpose();
  p.defined = BoolMatrix::Constant(n, n, false);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (oob_trees(i) > 0) {
      p.values.row(i) /= static_cast<double>(oob_trees(i));
      p.defined.row(i).setConstant(true);
    }
  }
  return p;
}

ProximityMatrix compute_proximity(const TrainedForest& forest, ProximityKind kind) {
  switch (kind) {
    case ProximityKind::original:
      return proximity_original(forest);
    case ProximityKind::oob:
      return proximity_oob(forest);
    case ProximityKind::gap:
      return proximity_gap(forest);
    case ProximityKind::gap_sym: {
      ProximityMatrix p = proximity_gap(forest);
      p.values = ((p.values + p.values.transpose()) / 2.0).eval();
      p.defined = (p.defined || p.defined.transpose()).eval();
      p.kind = ProximityKind::gap_sym;
      return p;
    }
  }
  throw ConfigError("unknown proximity kind");
}

Eigen::MatrixXd extend_proximity(const TrainedForest& forest,
                                 const Eigen::Ref<const Eigen::MatrixXd>& rows, ProximityKind kind) {
  if (rows.cols() != forest.feature_count) {
    throw DataError("dimension mismatch: forest expects " + std::to_string(forest.feature_count) +
                    " features, got " + std::to_string(rows.cols()));
  }
  if (kind == ProximityKind::gap_sym) {
    throw ConfigError("symmetrized GAP proximity is not defined for unseen rows");
  }
  const auto n = forest.sample_count();
  const auto m = rows.rows();
  Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(n, m);
  Eigen::VectorXd oob_trees = Eigen::VectorXd::Zero(n);
  const Eigen::VectorXd w = row_class_weights(forest);
  for (const auto& tree : forest.trees) {
    const LeafBuckets buckets(tree);
    std::vector<double> mass(static_cast<std::size_t>(tree.leaf_count()), 0.0);
    for (Eigen::Index j = 0; j < n; ++j) mass[static_cast<std::size_t>(tree.leaf_of(j))] += tree.inbag(j) * w(j);
    if (kind == ProximityKind::oob) oob_trees += (tree.inbag.array() == 0).cast<double>().matrix();
    for (Eigen::Index q = 0; q < m; ++q) {
      const int l = tree.route(rows.row(q));
      for (int j : buckets.leaf(l)) {
        switch (kind) {
          case ProximityKind::original:
            acc(j, q) += 1.0;
            break;
          case ProximityKind::oob:
            if (tree.inbag(j) == 0) acc(j, q) += 1.0;
            break;
          default:
            acc(j, q) += tree.inbag(j) * w(j) / mass[static_cast<std::size_t>(l)];
            break;
        }
      }
    }
  }
  if (kind == ProximityKind::oob) {
    for (Eigen::Index j = 0; j < n; ++j) {
      acc.row(j) = oob_trees(j) > 0.0 ? (acc.row(j) / oob_trees(j)).eval()
                                      : Eigen::RowVectorXd::Zero(m).eval();
    }
    return acc.transpose();
  }
  return acc.transpose() / static_cast<double>(forest.trees.size());
}

Eigen::VectorXd extend_gap(const TrainedForest& forest, const Eigen::Ref<const Eigen::RowVectorXd>& x) {
  return extend_proximity(forest, x, ProximityKind::gap).row(0).transpose();
}

DistanceMatrix to_distance(const ProximityMatrix& proximity) {
  Eigen::MatrixXd p = proximity.values;
  if (proximity.kind == ProximityKind::gap) p = ((p + p.transpose()) / 2.0).eval();
  DistanceMatrix d;
  d.backend = proximity.kind == ProximityKind::original ? DistanceBackend::original
              : proximity.kind == ProximityKind::oob    ? DistanceBackend::oob
                                                        : DistanceBackend::gap;
  d.values = (1.0 - p.array()).max(0.0).min(1.0).matrix();
  d.values.diagonal().setZero();
  return d;
}

Standardizer Standardizer::fit(const Dataset& dataset) {
  Standardizer s;
  const auto n = static_cast<double>(dataset.rows());
  s.mean = Eigen::RowVectorXd::Zero(dataset.cols());
  s.scale = Eigen::RowVectorXd::Ones(dataset.cols());
  for (Eigen::Index c = 0; c < dataset.cols(); ++c) {
    if (dataset.columns[static_cast<std::size_t>(c)].kind == ColumnKind::onehot) continue;
    const auto col = dataset.features.col(c).array();
    const double mean = col.mean();
    const double sd = std::sqrt((col - mean).square().sum() / n);
    s.mean(c) = mean;
    if (sd > 0.0) {
      s.scale(c) = 1.0 / sd;
    } else {
      s.scale(c) = 0.0;
      warn("column '" + dataset.columns[static_cast<std::size_t>(c)].name +
           "' has zero variance and is excluded from L2 distances");
    }
  }
  return s;
}

Eigen::MatrixXd Standardizer::apply(const Eigen::Ref<const Eigen::MatrixXd>& rows) const {
  return ((rows.rowwise() - mean).array().rowwise() * scale.array()).matrix();
}

DistanceMatrix l2_distance(const Dataset& dataset, const Standardizer& standardizer) {
  const Eigen::MatrixXd z = standardizer.apply(dataset.features);
  DistanceMatrix d;
  d.backend = DistanceBackend::l2;
  d.values = euclidean_cross(z, z);
  // Exact symmetry regardless of summation order.
  d.values = ((d.values + d.values.transpose()) / 2.0).eval();
  d.values.diagonal().setZero();
  return d;
}

DistanceMatrix l2_distance(const Dataset& dataset) {
  return l2_distance(dataset, Standardizer::fit(dataset));
}

void write_matrix_csv(const std::filesystem::path& path, const Eigen::Ref<const Eigen::MatrixXd>& values,
                      const std::vector<std::string>& row_ids, const std::vector<std::string>& col_ids) {
  if (static_cast<Eigen::Index>(row_ids.size()) != values.rows() ||
      static_cast<Eigen::Index>(col_ids.size()) != values.cols()) {
    throw StageError("matrix ids do not match its shape");
  }
  std::ofstream out(path);
  if (!out) throw StageError("cannot open '" + path.string() + "' for writing");
  out << "id";
  for (const auto& c : col_ids) out << ',' << c;
  out << '\n';
  char buf[32];
  for (Eigen::Index i = 0; i < values.rows(); ++i) {
    out << row_ids[static_cast<std::size_t>(i)];
    for (Eigen::Index j = 0; j < values.cols(); ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", values(i, j));
      out << ',' << buf;
    }
    out << '\n';
  }
  if (!out) throw StageError("failed writing '" + path.string() + "'");
}

LabeledMatrix read_matrix_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  LabeledMatrix m;
  std::string line;
  const auto split = [](const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      if (!cell.empty() && cell.back() == '\r') cell.pop_back();
      out.push_back(cell);
    }
    return out;
  };
  if (!std::getline(in, line)) throw DataError("'" + path.string() + "' is empty");
  auto header = split(line);
  m.col_ids.assign(header.begin() + 1, header.end());
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto cells = split(line);
    if (cells.size() != header.size()) {
      throw DataError("matrix row " + std::to_string(rows.size() + 1) + " has the wrong width");
    }
    m.row_ids.push_back(cells[0]);
    std::vector<double> row;
    for (std::size_t c = 1; c < cells.size(); ++c) {
      double v = 0.0;
      const auto [ptr, ec] = std::from_chars(cells[c].data(), cells[c].data() + cells[c].size(), v);
      if (ec != std::errc() || ptr != cells[c].data() + cells[c].size()) {
        throw DataError("matrix cell (" + std::to_string(rows.size() + 1) + "," + std::to_string(c) +
                        ") is not a number");
      }
      row.push_back(v);
    }
    rows.push_back(std::move(row));
  }
  m.values.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(m.col_ids.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < rows[i].size(); ++j) {
      m.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
    }
  }
  return m;
}

namespace {
constexpr std::string_view kProxMagic = "RFXPM";
constexpr std::uint32_t kProxVersion = 1;
}  // namespace

void save_proximity_cache(const ProximityMatrix& proximity, std::uint64_t forest_key,
                          const std::filesystem::path& path) {
  detail::BinaryWriter w(path.string());
  w.put_raw(kProxMagic);
  w.put(kProxVersion);
  w.put<std::int32_t>(static_cast<std::int32_t>(proximity.kind));
  w.put(forest_key);
  w.put<std::int64_t>(proximity.size());
  w.put_array(proximity.values.data(), static_cast<std::size_t>(proximity.values.size()));
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(proximity.defined.size()));
  for (Eigen::Index k = 0; k < proximity.defined.size(); ++k) {
    mask[static_cast<std::size_t>(k)] = proximity.defined.data()[k] ? 1 : 0;
  }
  w.put_array(mask.data(), mask.size());
  w.finish();
}

ProximityMatrix load_proximity_cache(const std::filesystem::path& path, std::uint64_t forest_key,
                                     ProximityKind kind) {
  detail::BinaryReader r(path.string());
  if (r.get_raw(kProxMagic.size()) != kProxMagic) throw DataError("not a proximity cache");
  if (r.get<std::uint32_t>() != kProxVersion) throw DataError("unsupported proximity cache version");
  const auto stored_kind = static_cast<ProximityKind>(r.get<std::int32_t>());
  const auto stored_key = r.get<std::uint64_t>();
  if (stored_kind != kind || stored_key != forest_key) {
    throw ModelMismatchError("proximity cache was built for a different forest or kind");
  }
  const auto n = r.get<std::int64_t>();
  const auto values = r.get_array<double>();
  const auto mask = r.get_array<std::uint8_t>();
  if (values.size() != static_cast<std::size_t>(n * n) || mask.size() != values.size()) {
    throw DataError("corrupt proximity cache");
  }
  ProximityMatrix p;
  p.kind = kind;
  p.values = Eigen::Map<const Eigen::MatrixXd>(values.data(), n, n);
  p.defined.resize(n, n);
  for (std::size_t k = 0; k < mask.size(); ++k) p.defined.data()[k] = mask[k] != 0;
  return p;
}

}  // namespace rfexplain
