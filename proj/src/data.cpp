#include "rfexplain/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_map>

#include "rfexplain/detail/binary_io.hpp"
#include "rfexplain/error.hpp"
#include "rfexplain/random.hpp"

namespace rfexplain {
namespace {

constexpr double kMissing = std::numeric_limits<double>::quiet_NaN();

// RFC-4180-ish record splitter: quoted fields, doubled quotes, CRLF.
bool read_record(std::istream& in, char delimiter, std::vector<std::string>& fields) {
  fields.clear();
  std::string line;
  if (!std::getline(in, line)) return false;
  std::string field;
  bool quoted = false;
  for (std::size_t i = 0;; ++i) {
    if (i == line.size()) {
      if (quoted) {
        std::string next;
        if (!std::getline(in, next)) throw DataError("unterminated quoted field");
        field += '\n';
        line = std::move(next);
        i = static_cast<std::size_t>(-1);
        continue;
      }
      break;
    }
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == delimiter) {
      fields.push_back(std::move(field));
      field.clear();
    } else if (c == '\r' && i + 1 == line.size()) {
      // CRLF
    } else {
      field += c;
    }
  }
  fields.push_back(std::move(field));
  return true;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return std::string(s.substr(b, e - b + 1));
}

bool parse_double(const std::string& text, double& value) {
  const char* first = text.data();
  const char* last = text.data() + text.size();
  if (first != last && *first == '+') ++first;
  const auto [ptr, ec] = std::from_chars(first, last, value);
  return ec == std::errc() && ptr == last;
}

bool contains(const std::vector<std::string>& v, const std::string& s) {
  return std::find(v.begin(), v.end(), s) != v.end();
}

}  // namespace

std::vector<int> Dataset::class_counts() const {
  std::vector<int> counts(class_names.size(), 0);
  for (int y : labels) ++counts[static_cast<std::size_t>(y)];
  return counts;
}

bool Dataset::is_encoded() const {
  return std::none_of(columns.begin(), columns.end(),
                      [](const ColumnMeta& c) { return c.kind == ColumnKind::categorical; }) &&
         !features.hasNaN();
}

Dataset Dataset::subset(std::span<const Eigen::Index> rows) const {
  Dataset out;
  out.features.resize(static_cast<Eigen::Index>(rows.size()), cols());
  out.labels.reserve(rows.size());
  out.row_ids.reserve(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    out.features.row(static_cast<Eigen::Index>(r)) = features.row(rows[r]);
    out.labels.push_back(labels[static_cast<std::size_t>(rows[r])]);
    out.row_ids.push_back(row_ids[static_cast<std::size_t>(rows[r])]);
  }
  out.class_names = class_names;
  out.columns = columns;
  return out;
}

std::vector<int> Dataset::logical_features() const {
  std::vector<int> logical(columns.size());
  std::map<int, int> group_feature;
  int next = 0;
  for (std::size_t c = 0; c < columns.size(); ++c) {
    if (columns[c].kind == ColumnKind::onehot) {
      auto [it, inserted] = group_feature.try_emplace(columns[c].group, next);
      if (inserted) ++next;
      logical[c] = it->second;
    } else {
      logical[c] = next++;
    }
  }
  return logical;
}

int Dataset::logical_feature_count() const {
  const auto logical = logical_features();
  return logical.empty() ? 0 : *std::max_element(logical.begin(), logical.end()) + 1;
}

void Dataset::validate() const {
  const auto n = static_cast<std::size_t>(rows());
  if (labels.size() != n || row_ids.size() != n) {
    throw DataError("dataset arrays disagree on row count");
  }
  if (columns.size() != static_cast<std::size_t>(cols())) {
    throw DataError("column metadata does not match the feature matrix");
  }
  for (int y : labels) {
    if (y < 0 || y >= class_count()) throw DataError("label out of range");
  }
  const auto counts = class_counts();
  for (std::size_t c = 0; c < counts.size(); ++c) {
    if (counts[c] == 0) throw DataError("class '" + class_names[c] + "' has no rows");
  }
  std::map<int, std::vector<Eigen::Index>> groups;
  for (std::size_t c = 0; c < columns.size(); ++c) {
    if (columns[c].kind == ColumnKind::onehot) {
      groups[columns[c].group].push_back(static_cast<Eigen::Index>(c));
    }
  }
  for (const auto& [group, cols_in_group] : groups) {
    for (Eigen::Index i = 0; i < rows(); ++i) {
      double sum = 0.0;
      for (auto c : cols_in_group) {
        const double v = features(i, c);
        if (v != 0.0 && v != 1.0) throw DataError("one-hot column holds a non-binary value");
        sum += v;
      }
      if (sum > 1.0) throw DataError("one-hot group has more than one active column");
    }
  }
}

Dataset load_csv(const std::filesystem::path& path, const CsvSchema& schema) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path.string() + "'");

  std::vector<std::string> header;
  if (!read_record(in, schema.delimiter, header)) {
    throw DataError("'" + path.string() + "' is empty");
  }
  for (auto& h : header) h = trim(h);

  const auto find_column = [&](const std::string& name) -> std::ptrdiff_t {
    const auto it = std::find(header.begin(), header.end(), name);
    return it == header.end() ? -1 : it - header.begin();
  };
  const auto label_col = find_column(schema.label_column);
  if (label_col < 0) throw DataError("unknown label column '" + schema.label_column + "'");
  std::ptrdiff_t id_col = -1;
  if (!schema.id_column.empty()) {
    id_col = find_column(schema.id_column);
    if (id_col < 0) throw DataError("unknown id column '" + schema.id_column + "'");
  }
  for (const auto& name : schema.categorical) {
    if (find_column(name) < 0) throw DataError("unknown categorical column '" + name + "'");
  }

  Dataset ds;
  std::vector<std::ptrdiff_t> source;
  for (std::ptrdiff_t c = 0; c < static_cast<std::ptrdiff_t>(header.size()); ++c) {
    if (c == label_col || c == id_col || contains(schema.ignore, header[c])) continue;
    ColumnMeta meta;
    meta.name = header[c];
    meta.kind = contains(schema.categorical, header[c]) ? ColumnKind::categorical
                                                        : ColumnKind::numeric;
    ds.columns.push_back(std::move(meta));
    source.push_back(c);
  }

  std::vector<std::vector<double>> cells;
  std::vector<std::unordered_map<std::string, int>> level_index(ds.columns.size());
  std::unordered_map<std::string, int> class_index;
  std::vector<std::string> record;
  std::size_t line = 1;
  while (read_record(in, schema.delimiter, record)) {
    ++line;
    if (record.size() == 1 && trim(record[0]).empty()) continue;
    if (record.size() != header.size()) {
      throw DataError("row " + std::to_string(line) + ": expected " +
                      std::to_string(header.size()) + " fields, found " +
                      std::to_string(record.size()));
    }
    std::vector<double> row(ds.columns.size());
    for (std::size_t c = 0; c < ds.columns.size(); ++c) {
      const std::string text = trim(record[static_cast<std::size_t>(source[c])]);
      if (contains(schema.missing_markers, text)) {
        if (schema.missing_policy == MissingPolicy::error) {
          throw DataError("row " + std::to_string(line) + ", column '" + ds.columns[c].name +
                          "': missing value");
        }
        row[c] = kMissing;
      } else if (ds.columns[c].kind == ColumnKind::categorical) {
        auto [it, inserted] =
            level_index[c].try_emplace(text, static_cast<int>(ds.columns[c].levels.size()));
        if (inserted) ds.columns[c].levels.push_back(text);
        row[c] = it->second;
      } else if (!parse_double(text, row[c])) {
        throw DataError("row " + std::to_string(line) + ", column '" + ds.columns[c].name +
                        "': cannot parse '" + text + "' as a number");
      }
    }
    const std::string label = trim(record[static_cast<std::size_t>(label_col)]);
    if (contains(schema.missing_markers, label)) {
      throw DataError("row " + std::to_string(line) + ": missing label");
    }
    auto [it, inserted] = class_index.try_emplace(label, static_cast<int>(ds.class_names.size()));
    if (inserted) ds.class_names.push_back(label);
    ds.labels.push_back(it->second);
    ds.row_ids.push_back(id_col >= 0 ? trim(record[static_cast<std::size_t>(id_col)])
                                     : std::to_string(cells.size()));
    cells.push_back(std::move(row));
  }

  ds.features.resize(static_cast<Eigen::Index>(cells.size()),
                     static_cast<Eigen::Index>(ds.columns.size()));
  for (std::size_t i = 0; i < cells.size(); ++i) {
    for (std::size_t c = 0; c < ds.columns.size(); ++c) {
      ds.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = cells[i][c];
    }
  }
  return ds;
}

Dataset encode(const Dataset& dataset, MissingPolicy missing_policy) {
  int next_group = 0;
  for (const auto& c : dataset.columns) {
    if (c.kind == ColumnKind::onehot) next_group = std::max(next_group, c.group + 1);
  }

  Dataset out;
  out.labels = dataset.labels;
  out.class_names = dataset.class_names;
  out.row_ids = dataset.row_ids;

  std::vector<Eigen::VectorXd> columns;
  const auto n = dataset.rows();
  for (Eigen::Index c = 0; c < dataset.cols(); ++c) {
    const auto& meta = dataset.columns[static_cast<std::size_t>(c)];
    const auto column = dataset.features.col(c);
    for (Eigen::Index i = 0; i < n; ++i) {
      if (std::isnan(column(i)) && missing_policy == MissingPolicy::error) {
        throw DataError("row " + dataset.row_ids[static_cast<std::size_t>(i)] + ", column '" +
                        meta.name + "': missing value");
      }
    }
    if (meta.kind != ColumnKind::categorical) {
      columns.push_back(column.unaryExpr([](double v) { return std::isnan(v) ? 0.0 : v; }));
      out.columns.push_back(meta);
      continue;
    }
    // A missing categorical becomes an all-zero row in its group.
    const int group = next_group++;
    for (std::size_t level = 0; level < meta.levels.size(); ++level) {
      Eigen::VectorXd indicator = column.unaryExpr([level](double v) {
        return !std::isnan(v) && static_cast<std::size_t>(v) == level ? 1.0 : 0.0;
      });
      columns.push_back(std::move(indicator));
      out.columns.push_back(
          ColumnMeta{meta.name + "=" + meta.levels[level], ColumnKind::onehot, group, {}});
    }
  }

  out.features.resize(n, static_cast<Eigen::Index>(columns.size()));
  for (std::size_t c = 0; c < columns.size(); ++c) {
    out.features.col(static_cast<Eigen::Index>(c)) = columns[c];
  }
  return out;
}

Dataset filter_classes(const Dataset& dataset, const std::vector<std::string>& keep) {
  std::vector<int> remap(dataset.class_names.size(), -1);
  std::vector<std::string> names;
  for (std::size_t c = 0; c < dataset.class_names.size(); ++c) {
    if (contains(keep, dataset.class_names[c])) {
      remap[c] = static_cast<int>(names.size());
      names.push_back(dataset.class_names[c]);
    }
  }
  for (const auto& k : keep) {
    if (!contains(dataset.class_names, k)) throw DataError("class '" + k + "' is not present");
  }
  if (names.size() < 2) throw DataError("filter_classes must keep at least two classes");

  std::vector<Eigen::Index> rows;
  for (std::size_t i = 0; i < dataset.labels.size(); ++i) {
    if (remap[static_cast<std::size_t>(dataset.labels[i])] >= 0) {
      rows.push_back(static_cast<Eigen::Index>(i));
    }
  }
  Dataset out = dataset.subset(rows);
  for (int& y : out.labels) y = remap[static_cast<std::size_t>(y)];
  out.class_names = std::move(names);
  return out;
}

std::vector<Eigen::Index> FoldPlan::train_indices(int fold) const {
  std::vector<Eigen::Index> idx;
  for (std::size_t i = 0; i < assignments.size(); ++i) {
    if (assignments[i] != fold) idx.push_back(static_cast<Eigen::Index>(i));
  }
  return idx;
}

std::vector<Eigen::Index> FoldPlan::test_indices(int fold) const {
  std::vector<Eigen::Index> idx;
  for (std::size_t i = 0; i < assignments.size(); ++i) {
    if (assignments[i] == fold) idx.push_back(static_cast<Eigen::Index>(i));
  }
  return idx;
}

FoldPlan stratified_folds(std::span<const int> labels, int k, std::uint64_t seed) {
  if (k < 2) throw DataError("fold count must be at least 2");
  std::map<int, std::vector<int>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    by_class[labels[i]].push_back(static_cast<int>(i));
  }
  FoldPlan plan;
  plan.k_folds = k;
  plan.seed = seed;
  plan.assignments.assign(labels.size(), -1);
  Rng rng(seed);
  // Each class deals its shuffled members round-robin, starting where the
  // previous class stopped, so overall fold sizes also differ by at most one.
  int offset = 0;
  for (auto& [label, members] : by_class) {
    if (static_cast<int>(members.size()) < k) {
      throw DataError("class " + std::to_string(label) + " has " +
                      std::to_string(members.size()) + " rows, fewer than " +
                      std::to_string(k) + " folds");
    }
    shuffle(members.begin(), members.end(), rng);
    for (std::size_t p = 0; p < members.size(); ++p) {
      plan.assignments[static_cast<std::size_t>(members[p])] =
          static_cast<int>((static_cast<std::size_t>(offset) + p) % static_cast<std::size_t>(k));
    }
    offset = static_cast<int>((static_cast<std::size_t>(offset) + members.size()) %
                              static_cast<std::size_t>(k));
  }
  return plan;
}

FoldPlan stratified_folds(const Dataset& dataset, int k, std::uint64_t seed) {
  return stratified_folds(std::span<const int>(dataset.labels), k, seed);
}

Dataset synth_three_class(int n, std::uint64_t seed) {
  if (n < 30) throw DataError("synth_three_class needs n >= 30");
  constexpr int kNumeric = 14;
  constexpr int kInformative = 6;
  Rng rng(seed);

  Dataset ds;
  ds.class_names = {"blend", "value", "growth"};
  for (int f = 0; f < kNumeric; ++f) {
    ds.columns.push_back(ColumnMeta{"x" + std::to_string(f), ColumnKind::numeric, -1, {}});
  }
  ds.columns.push_back(
      ColumnMeta{"sector", ColumnKind::categorical, -1, {"tech", "energy", "health", "retail"}});
  ds.columns.push_back(ColumnMeta{"region", ColumnKind::categorical, -1, {"us", "eu", "asia"}});

  ds.features.resize(n, kNumeric + 2);
  for (int i = 0; i < n; ++i) {
    const int y = i * 3 / n;
    ds.labels.push_back(y);
    char id[16];
    std::snprintf(id, sizeof id, "s%05d", i);
    ds.row_ids.emplace_back(id);
    for (int f = 0; f < kNumeric; ++f) {
      // Informative features separate the cluster means by 6 standard deviations.
      const double mean = f < kInformative ? 6.0 * ((y + f) % 3) : 0.5 * y;
      ds.features(i, f) = mean + standard_normal(rng);
    }
    const bool typical_sector = uniform_unit(rng) < 0.8;
    ds.features(i, kNumeric) =
        typical_sector ? y : static_cast<double>(uniform_index(rng, 4));
    ds.features(i, kNumeric + 1) = static_cast<double>(uniform_index(rng, 3));
  }
  return ds;
}

namespace {
constexpr std::string_view kCacheMagic = "RFXDS";
constexpr std::uint32_t kCacheVersion = 1;
}  // namespace

void save_cache(const Dataset& ds, const std::filesystem::path& path) {
  detail::BinaryWriter w(path.string());
  w.put_raw(kCacheMagic);
  w.put(kCacheVersion);
  w.put<std::int64_t>(ds.rows());
  w.put<std::int64_t>(ds.cols());
  w.put_array(ds.features.data(), static_cast<std::size_t>(ds.features.size()));
  w.put_array(ds.labels.data(), ds.labels.size());
  w.put<std::uint64_t>(ds.class_names.size());
  for (const auto& s : ds.class_names) w.put_string(s);
  for (const auto& s : ds.row_ids) w.put_string(s);
  for (const auto& c : ds.columns) {
    w.put_string(c.name);
    w.put<std::int32_t>(static_cast<std::int32_t>(c.kind));
    w.put<std::int32_t>(c.group);
    w.put<std::uint64_t>(c.levels.size());
    for (const auto& l : c.levels) w.put_string(l);
  }
  w.finish();
}

Dataset load_cache(const std::filesystem::path& path) {
  detail::BinaryReader r(path.string());
  if (r.get_raw(kCacheMagic.size()) != kCacheMagic) {
    throw DataError("'" + path.string() + "' is not a dataset cache");
  }
  const auto version = r.get<std::uint32_t>();
  if (version != kCacheVersion) {
    throw DataError("unsupported dataset cache version " + std::to_string(version));
  }
  Dataset ds;
  const auto rows = r.get<std::int64_t>();
  const auto cols = r.get<std::int64_t>();
  const auto values = r.get_array<double>();
  if (rows < 0 || cols < 0 || values.size() != static_cast<std::size_t>(rows * cols)) {
    throw DataError("corrupt dataset cache");
  }
  ds.features = Eigen::Map<const Eigen::MatrixXd>(values.data(), rows, cols);
  ds.labels = r.get_array<int>();
  const auto n_classes = r.get<std::uint64_t>();
  for (std::uint64_t c = 0; c < n_classes; ++c) ds.class_names.push_back(r.get_string());
  for (std::int64_t i = 0; i < rows; ++i) ds.row_ids.push_back(r.get_string());
  for (std::int64_t c = 0; c < cols; ++c) {
    ColumnMeta meta;
    meta.name = r.get_string();
    meta.kind = static_cast<ColumnKind>(r.get<std::int32_t>());
    meta.group = r.get<std::int32_t>();
    const auto n_levels = r.get<std::uint64_t>();
    for (std::uint64_t l = 0; l < n_levels; ++l) meta.levels.push_back(r.get_string());
    ds.columns.push_back(std::move(meta));
  }
  ds.validate();
  return ds;
}

std::uint64_t feature_hash(const Dataset& ds) {
  detail::Fnv1a h;
  h.update<std::int64_t>(ds.rows());
  h.update<std::int64_t>(ds.cols());
  h.update(ds.features.data(), static_cast<std::size_t>(ds.features.size()) * sizeof(double));
  for (const auto& id : ds.row_ids) h.update(std::string_view(id));
  return h.digest();
}

}  // namespace rfexplain
