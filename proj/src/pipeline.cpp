#include "rfexplain/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <thread>

#include "rfexplain/detail/binary_io.hpp"
#include "rfexplain/error.hpp"
#include "rfexplain/log.hpp"
#include "rfexplain/mds.hpp"
#include "rfexplain/random.hpp"

namespace rfexplain {

namespace {

using nlohmann::json;

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

std::vector<std::string> split_list(const std::string& value) {
  std::vector<std::string> out;
  if (trim(value).empty()) return out;
  std::size_t start = 0;
  while (true) {
    const auto comma = value.find(',', start);
    out.push_back(trim(std::string_view(value).substr(start, comma - start)));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

std::string join(const std::vector<std::string>& items) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i > 0) out += ", ";
    out += items[i];
  }
  return out;
}

template <typename T, typename F>
std::string join_map(const std::vector<T>& items, F&& f) {
  std::vector<std::string> text;
  for (const auto& item : items) text.push_back(f(item));
  return join(text);
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

int parse_int(const std::string& text) {
  int v = 0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size()) throw ConfigError("expected an integer, got '" + text + "'");
  return v;
}

double parse_double(const std::string& text) {
  try {
    std::size_t used = 0;
    const double v = std::stod(text, &used);
    if (used != text.size() || !std::isfinite(v)) throw std::invalid_argument(text);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("expected a number, got '" + text + "'");
  }
}

std::uint64_t parse_seed(const std::string& text) {
  std::uint64_t v = 0;
  const bool hex = text.starts_with("0x") || text.starts_with("0X");
  const char* begin = text.data() + (hex ? 2 : 0);
  const auto [ptr, ec] = std::from_chars(begin, text.data() + text.size(), v, hex ? 16 : 10);
  if (ec != std::errc() || ptr != text.data() + text.size() || begin == ptr) {
    throw ConfigError("expected an unsigned integer seed, got '" + text + "'");
  }
  return v;
}

bool parse_bool(const std::string& text) {
  if (text == "true" || text == "yes" || text == "1") return true;
  if (text == "false" || text == "no" || text == "0") return false;
  throw ConfigError("expected true or false, got '" + text + "'");
}

std::optional<int> parse_auto_int(const std::string& text) {
  if (text == "auto") return std::nullopt;
  return parse_int(text);
}

std::vector<DistanceBackend> parse_backends(const std::string& text) {
  std::vector<DistanceBackend> out;
  for (const auto& item : split_list(text)) out.push_back(parse_backend(item));
  return out;
}

std::string backend_list(const std::vector<DistanceBackend>& backends) {
  return join_map(backends, [](DistanceBackend b) { return to_string(b); });
}

std::string marker_text(const std::string& marker) { return marker.empty() ? "<empty>" : marker; }

std::string delimiter_text(char c) {
  if (c == '\t') return "tab";
  return std::string(1, c);
}

using Setter = std::function<void(ExperimentConfig&, const std::string&)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"dataset.source",
       [](ExperimentConfig& c, const std::string& v) {
         if (v == "csv") {
           c.dataset.source = DatasetSpec::Source::csv;
         } else if (v == "synthetic") {
           c.dataset.source = DatasetSpec::Source::synthetic;
         } else {
           throw ConfigError("expected csv or synthetic, got '" + v + "'");
         }
       }},
      {"dataset.name", [](ExperimentConfig& c, const std::string& v) { c.dataset.name = v; }},
      {"dataset.path", [](ExperimentConfig& c, const std::string& v) { c.dataset.path = v; }},
      {"dataset.label", [](ExperimentConfig& c, const std::string& v) { c.dataset.schema.label_column = v; }},
      {"dataset.id", [](ExperimentConfig& c, const std::string& v) { c.dataset.schema.id_column = v; }},
      {"dataset.categorical",
       [](ExperimentConfig& c, const std::string& v) { c.dataset.schema.categorical = split_list(v); }},
      {"dataset.ignore", [](ExperimentConfig& c, const std::string& v) { c.dataset.schema.ignore = split_list(v); }},
      {"dataset.delimiter",
       [](ExperimentConfig& c, const std::string& v) {
         if (v == "tab") {
           c.dataset.schema.delimiter = '\t';
         } else if (v.size() == 1) {
           c.dataset.schema.delimiter = v[0];
         } else {
           throw ConfigError("expected a single character or 'tab', got '" + v + "'");
         }
       }},
      {"dataset.missing_markers",
       [](ExperimentConfig& c, const std::string& v) {
         auto markers = split_list(v);
         for (auto& m : markers) {
           if (m == "<empty>") m.clear();
         }
         c.dataset.schema.missing_markers = markers;
       }},
      {"dataset.missing_policy",
       [](ExperimentConfig& c, const std::string& v) {
         if (v == "error") {
           c.dataset.schema.missing_policy = MissingPolicy::error;
         } else if (v == "zero") {
           c.dataset.schema.missing_policy = MissingPolicy::zero;
         } else {
           throw ConfigError("expected error or zero, got '" + v + "'");
         }
       }},
      {"dataset.keep_classes", [](ExperimentConfig& c, const std::string& v) { c.dataset.keep_classes = split_list(v); }},
      {"dataset.synthetic_rows", [](ExperimentConfig& c, const std::string& v) { c.dataset.synthetic_rows = parse_int(v); }},
      {"dataset.synthetic_seed",
       [](ExperimentConfig& c, const std::string& v) { c.dataset.synthetic_seed = parse_seed(v); }},
      {"folds.k", [](ExperimentConfig& c, const std::string& v) { c.k_folds = parse_int(v); }},
      {"seed", [](ExperimentConfig& c, const std::string& v) { c.seed = parse_seed(v); }},
      {"forest.n_trees",
       [](ExperimentConfig& c, const std::string& v) {
         c.grid.n_trees.clear();
         for (const auto& item : split_list(v)) c.grid.n_trees.push_back(parse_int(item));
       }},
      {"forest.max_features",
       [](ExperimentConfig& c, const std::string& v) {
         c.grid.max_features.clear();
         for (const auto& item : split_list(v)) c.grid.max_features.push_back(MaxFeatures::parse(item));
       }},
      {"forest.max_depth",
       [](ExperimentConfig& c, const std::string& v) {
         c.grid.max_depth.clear();
         for (const auto& item : split_list(v)) {
           if (item == "none") {
             c.grid.max_depth.push_back(std::nullopt);
           } else {
             c.grid.max_depth.push_back(parse_int(item));
           }
         }
       }},
      {"forest.min_leaf", [](ExperimentConfig& c, const std::string& v) { c.grid.min_leaf = parse_int(v); }},
      {"forest.class_weighting",
       [](ExperimentConfig& c, const std::string& v) {
         if (v == "balanced") {
           c.grid.class_weighting = ClassWeighting::balanced;
         } else if (v == "none") {
           c.grid.class_weighting = ClassWeighting::none;
         } else {
           throw ConfigError("expected balanced or none, got '" + v + "'");
         }
       }},
      {"forest.cv_folds", [](ExperimentConfig& c, const std::string& v) { c.grid_folds = parse_int(v); }},
      {"selection.backends", [](ExperimentConfig& c, const std::string& v) { c.selection_backends = parse_backends(v); }},
      {"prototypes.methods",
       [](ExperimentConfig& c, const std::string& v) {
         c.methods.clear();
         for (const auto& item : split_list(v)) c.methods.push_back(parse_method(item));
       }},
      {"prototypes.count_min", [](ExperimentConfig& c, const std::string& v) { c.count_min = parse_int(v); }},
      {"prototypes.count_max", [](ExperimentConfig& c, const std::string& v) { c.count_max = parse_int(v); }},
      {"prototypes.tune_folds", [](ExperimentConfig& c, const std::string& v) { c.tune_folds = parse_int(v); }},
      {"prototypes.hdp_neighbors", [](ExperimentConfig& c, const std::string& v) { c.hdp_neighbors = parse_auto_int(v); }},
      {"critics.count", [](ExperimentConfig& c, const std::string& v) { c.critic_count = parse_auto_int(v); }},
      {"critics.scope",
       [](ExperimentConfig& c, const std::string& v) {
         if (v == "pooled") {
           c.critic_scope = CriticScope::pooled;
         } else if (v == "per_class") {
           c.critic_scope = CriticScope::per_class;
         } else {
           throw ConfigError("expected pooled or per_class, got '" + v + "'");
         }
       }},
      {"metrics.backends", [](ExperimentConfig& c, const std::string& v) { c.eval_backends = parse_backends(v); }},
      {"metrics.numeric_tol", [](ExperimentConfig& c, const std::string& v) { c.numeric_tol = parse_double(v); }},
      {"metrics.ood_exclude_self", [](ExperimentConfig& c, const std::string& v) { c.ood_exclude_self = parse_bool(v); }},
      {"metrics.neighborhood",
       [](ExperimentConfig& c, const std::string& v) {
         if (v == "knn") {
           c.neighborhood.mode = Neighborhood::Mode::knn;
         } else if (v == "radius") {
           c.neighborhood.mode = Neighborhood::Mode::radius;
         } else {
           throw ConfigError("expected knn or radius, got '" + v + "'");
         }
       }},
      {"metrics.neighborhood_k", [](ExperimentConfig& c, const std::string& v) { c.neighborhood.k = parse_int(v); }},
      {"metrics.neighborhood_radius",
       [](ExperimentConfig& c, const std::string& v) { c.neighborhood.radius = parse_double(v); }},
      {"mds.enabled", [](ExperimentConfig& c, const std::string& v) { c.mds_enabled = parse_bool(v); }},
      {"mds.backend", [](ExperimentConfig& c, const std::string& v) { c.mds_backend = parse_backend(v); }},
      {"mds.method", [](ExperimentConfig& c, const std::string& v) { c.mds_method = parse_method(v); }},
      {"mds.max_iter", [](ExperimentConfig& c, const std::string& v) { c.mds_max_iter = parse_int(v); }},
      {"mds.query", [](ExperimentConfig& c, const std::string& v) { c.mds_query = v; }},
      {"output.dir", [](ExperimentConfig& c, const std::string& v) { c.output_dir = v; }},
      {"threads", [](ExperimentConfig& c, const std::string& v) { c.threads = parse_int(v); }},
  };
  return table;
}

std::string config_text(const ExperimentConfig& c, bool runtime) {
  std::ostringstream os;
  const auto& d = c.dataset;
  os << "version = " << kConfigVersion << '\n';
  os << "dataset.source = " << (d.source == DatasetSpec::Source::csv ? "csv" : "synthetic") << '\n';
  os << "dataset.name = " << d.name << '\n';
  os << "dataset.path = " << d.path.generic_string() << '\n';
  os << "dataset.label = " << d.schema.label_column << '\n';
  os << "dataset.id = " << d.schema.id_column << '\n';
  os << "dataset.categorical = " << join(d.schema.categorical) << '\n';
  os << "dataset.ignore = " << join(d.schema.ignore) << '\n';
  os << "dataset.delimiter = " << delimiter_text(d.schema.delimiter) << '\n';
  os << "dataset.missing_markers = " << join_map(d.schema.missing_markers, marker_text) << '\n';
  os << "dataset.missing_policy = " << (d.schema.missing_policy == MissingPolicy::error ? "error" : "zero") << '\n';
  os << "dataset.keep_classes = " << join(d.keep_classes) << '\n';
  os << "dataset.synthetic_rows = " << d.synthetic_rows << '\n';
  os << "dataset.synthetic_seed = " << d.synthetic_seed << '\n';
  os << "folds.k = " << c.k_folds << '\n';
  os << "seed = " << c.seed << '\n';
  os << "forest.n_trees = " << join_map(c.grid.n_trees, [](int v) { return std::to_string(v); }) << '\n';
  os << "forest.max_features = " << join_map(c.grid.max_features, [](const MaxFeatures& m) { return m.to_string(); })
     << '\n';
  os << "forest.max_depth = "
     << join_map(c.grid.max_depth, [](const std::optional<int>& v) { return v ? std::to_string(*v) : "none"; })
     << '\n';
  os << "forest.min_leaf = " << c.grid.min_leaf << '\n';
  os << "forest.class_weighting = " << (c.grid.class_weighting == ClassWeighting::balanced ? "balanced" : "none")
     << '\n';
  os << "forest.cv_folds = " << c.grid_folds << '\n';
  os << "selection.backends = " << backend_list(c.selection_backends) << '\n';
  os << "prototypes.methods = " << join_map(c.methods, [](PrototypeMethod m) { return to_string(m); }) << '\n';
  os << "prototypes.count_min = " << c.count_min << '\n';
  os << "prototypes.count_max = " << c.count_max << '\n';
  os << "prototypes.tune_folds = " << c.tune_folds << '\n';
  os << "prototypes.hdp_neighbors = " << (c.hdp_neighbors ? std::to_string(*c.hdp_neighbors) : "auto") << '\n';
  os << "critics.count = " << (c.critic_count ? std::to_string(*c.critic_count) : "auto") << '\n';
  os << "critics.scope = " << (c.critic_scope == CriticScope::pooled ? "pooled" : "per_class") << '\n';
  os << "metrics.backends = " << backend_list(c.eval_backends) << '\n';
  os << "metrics.numeric_tol = " << format_double(c.numeric_tol) << '\n';
  os << "metrics.ood_exclude_self = " << (c.ood_exclude_self ? "true" : "false") << '\n';
  os << "metrics.neighborhood = " << (c.neighborhood.mode == Neighborhood::Mode::knn ? "knn" : "radius") << '\n';
  os << "metrics.neighborhood_k = " << c.neighborhood.k << '\n';
  os << "metrics.neighborhood_radius = " << format_double(c.neighborhood.radius) << '\n';
  os << "mds.enabled = " << (c.mds_enabled ? "true" : "false") << '\n';
  os << "mds.backend = " << to_string(c.mds_backend) << '\n';
  os << "mds.method = " << to_string(c.mds_method) << '\n';
  os << "mds.max_iter = " << c.mds_max_iter << '\n';
  os << "mds.query = " << c.mds_query << '\n';
  if (runtime) {
    os << "output.dir = " << c.output_dir.generic_string() << '\n';
    os << "threads = " << c.threads << '\n';
  }
  return os.str();
}

}  // namespace

void ExperimentConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw ConfigError("field '" + field + "': " + why);
  };
  if (dataset.source == DatasetSpec::Source::csv) {
    if (dataset.path.empty()) fail("dataset.path", "required for csv datasets");
    if (dataset.schema.label_column.empty()) fail("dataset.label", "required for csv datasets");
  } else if (dataset.synthetic_rows < 30) {
    fail("dataset.synthetic_rows", "must be at least 30");
  }
  if (!dataset.keep_classes.empty() && dataset.keep_classes.size() < 2) {
    fail("dataset.keep_classes", "keep at least two classes");
  }
  if (k_folds < 2) fail("folds.k", "must be at least 2");
  if (grid_folds < 2) fail("forest.cv_folds", "must be at least 2");
  if (grid.size() == 0) fail("forest.n_trees", "the forest grid is empty");
  for (int t : grid.n_trees) {
    if (t < 1) fail("forest.n_trees", "tree counts must be positive");
  }
  for (const auto& d : grid.max_depth) {
    if (d && *d < 1) fail("forest.max_depth", "depths must be positive or 'none'");
  }
  if (grid.min_leaf < 1) fail("forest.min_leaf", "must be at least 1");
  if (selection_backends.empty()) fail("selection.backends", "at least one backend is required");
  if (methods.empty()) fail("prototypes.methods", "at least one method is required");
  if (count_min < 1) fail("prototypes.count_min", "must be at least 1");
  if (count_max < count_min) fail("prototypes.count_max", "the count search range is empty");
  if (tune_folds < 2) fail("prototypes.tune_folds", "must be at least 2");
  if (hdp_neighbors && *hdp_neighbors < 1) fail("prototypes.hdp_neighbors", "must be at least 1 or 'auto'");
  if (critic_count && *critic_count < 1) fail("critics.count", "must be at least 1 or 'auto'");
  if (eval_backends.empty()) fail("metrics.backends", "at least one backend is required");
  if (numeric_tol < 0) fail("metrics.numeric_tol", "must be non-negative");
  if (neighborhood.mode == Neighborhood::Mode::knn && neighborhood.k < 1) {
    fail("metrics.neighborhood_k", "must be at least 1");
  }
  if (neighborhood.mode == Neighborhood::Mode::radius && !(neighborhood.radius > 0)) {
    fail("metrics.neighborhood_radius", "must be positive in radius mode");
  }
  if (mds_max_iter < 0) fail("mds.max_iter", "must be non-negative");
  if (mds_enabled && std::find(selection_backends.begin(), selection_backends.end(), mds_backend) ==
                         selection_backends.end()) {
    fail("mds.backend", "must be one of selection.backends");
  }
  if (mds_enabled && std::find(methods.begin(), methods.end(), mds_method) == methods.end()) {
    fail("mds.method", "must be one of prototypes.methods");
  }
  if (output_dir.empty()) fail("output.dir", "must not be empty");
}

std::string ExperimentConfig::to_text() const { return config_text(*this, true); }

std::uint64_t ExperimentConfig::hash() const { return detail::fnv1a(config_text(*this, false)); }

ExperimentConfig parse_config(const std::string& text) {
  ExperimentConfig config;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  bool saw_version = false;
  std::set<std::string> seen;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    const std::string body = trim(hash == std::string::npos ? line : line.substr(0, hash));
    if (body.empty()) continue;
    const auto where = "line " + std::to_string(line_no);
    const auto eq = body.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
    const std::string key = trim(std::string_view(body).substr(0, eq));
    const std::string value = trim(std::string_view(body).substr(eq + 1));
    if (key.empty()) throw ConfigError(where + ": missing key");
    if (!seen.insert(key).second) throw ConfigError(where + ": field '" + key + "' given twice");
    if (key == "version") {
      if (value != std::to_string(kConfigVersion)) {
        throw ConfigError(where + ": field 'version': unsupported config version '" + value + "' (expected " +
                          std::to_string(kConfigVersion) + ")");
      }
      saw_version = true;
      continue;
    }
    if (!saw_version) throw ConfigError(where + ": field 'version' must come first");
    const auto& table = setters();
    const auto it = table.find(key);
    if (it == table.end()) throw ConfigError(where + ": unknown field '" + key + "'");
    try {
      it->second(config, value);
    } catch (const Error& e) {
      throw ConfigError(where + ": field '" + key + "': " + e.what());
    }
  }
  if (!saw_version) throw ConfigError("field 'version' is missing");
  config.validate();
  return config;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  ExperimentConfig config;
  try {
    config = parse_config(buffer.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  if (!config.dataset.path.empty() && config.dataset.path.is_relative()) {
    config.dataset.path = (path.parent_path() / config.dataset.path).lexically_normal();
  }
  return config;
}

Dataset load_dataset(const DatasetSpec& spec) {
  Dataset raw;
  if (spec.source == DatasetSpec::Source::synthetic) {
    raw = synth_three_class(spec.synthetic_rows, spec.synthetic_seed);
  } else {
    raw = load_csv(spec.path, spec.schema);
  }
  if (!spec.keep_classes.empty()) raw = filter_classes(raw, spec.keep_classes);
  return encode(raw, spec.schema.missing_policy);
}

std::string prototype_key(PrototypeMethod method, DistanceBackend backend) {
  return "prototype:" + to_string(method) + ":" + to_string(backend);
}
std::string critic_key(PrototypeMethod method, DistanceBackend backend) {
  return "critic:" + to_string(method) + ":" + to_string(backend);
}
std::string semi_key(DistanceBackend backend) { return "semi:" + to_string(backend); }
std::string counter_key(DistanceBackend backend) { return "counter:" + to_string(backend); }

namespace {

DistanceMatrix sub_distance(const DistanceMatrix& d, const std::vector<Eigen::Index>& rows) {
  return DistanceMatrix{d.values(rows, rows), d.backend};
}

std::vector<int> pick(std::span<const int> labels, const std::vector<Eigen::Index>& rows) {
  std::vector<int> out;
  out.reserve(rows.size());
  for (auto r : rows) out.push_back(labels[static_cast<std::size_t>(r)]);
  return out;
}

PrototypeSet select_prototypes(PrototypeMethod method, const DistanceMatrix& distance,
                               const Eigen::Ref<const Eigen::MatrixXd>& similarity, std::span<const int> labels,
                               std::span<const int> quota, std::optional<int> hdp_neighbors) {
  PrototypeSet out = method == PrototypeMethod::hdp ? hdp_prototypes(similarity, labels, quota, hdp_neighbors)
                                                    : kmedoids_prototypes(distance, labels, quota);
  out.backend = distance.backend;
  return out;
}

}  // namespace

Eigen::MatrixXd selection_similarity(const DistanceMatrix& distance, const ProximityMatrix* proximity) {
  if (proximity != nullptr) return proximity->values;
  return (1.0 - distance.values.array()).matrix();
}

TuneResult tune_prototype_count(const DistanceMatrix& distance, std::span<const int> labels,
                                PrototypeMethod method, int count_min, int count_max, int inner_folds,
                                std::uint64_t seed, std::optional<int> hdp_neighbors) {
  return tune_prototype_count(distance, selection_similarity(distance, nullptr), labels, method, count_min,
                              count_max, inner_folds, seed, hdp_neighbors);
}

TuneResult tune_prototype_count(const DistanceMatrix& distance, const Eigen::Ref<const Eigen::MatrixXd>& similarity,
                                std::span<const int> labels, PrototypeMethod method, int count_min, int count_max,
                                int inner_folds, std::uint64_t seed, std::optional<int> hdp_neighbors) {
  if (count_min < 1 || count_max < count_min) throw ConfigError("prototype count search range is empty");
  const auto plan = stratified_folds(labels, inner_folds, seed);
  const auto inner_train = plan.train_indices(0);
  const auto inner_val = plan.test_indices(0);
  const auto train_labels = pick(labels, inner_train);
  const auto val_labels = pick(labels, inner_val);
  const DistanceMatrix train_d = sub_distance(distance, inner_train);
  const Eigen::MatrixXd train_s = similarity(inner_train, inner_train);
  const Eigen::MatrixXd val_to_train = distance.values(inner_val, inner_train);

  int classes = 0;
  for (int y : labels) classes = std::max(classes, y + 1);
  std::vector<int> sizes(static_cast<std::size_t>(classes), 0);
  for (int y : train_labels) ++sizes[static_cast<std::size_t>(y)];
  const int largest_usable = *std::min_element(sizes.begin(), sizes.end());

  TuneResult result;
  double best = -1.0;
  for (int count = count_min; count <= count_max; ++count) {
    if (count > largest_usable) break;
    const std::vector<int> quota(static_cast<std::size_t>(classes), count);
    const auto prototypes = select_prototypes(method, train_d, train_s, train_labels, quota, hdp_neighbors);
    const double f1 = nearest_prototype_f1(prototypes, val_to_train, train_labels, val_labels);
    result.candidates.push_back(count);
    result.f1.push_back(f1);
    if (f1 > best) {
      best = f1;
      result.count = count;
    }
  }
  if (result.candidates.empty()) {
    throw DataError("prototype count range starts above the smallest class (" + std::to_string(largest_usable) +
                    " rows in the tuning split)");
  }
  return result;
}

double ExperimentResult::mean_test_f1() const {
  if (folds.empty()) return 0.0;
  double total = 0.0;
  for (const auto& f : folds) total += f.test_f1;
  return total / static_cast<double>(folds.size());
}

namespace {

struct FoldContext {
  const ExperimentConfig& config;
  const Dataset& dataset;
  const FoldPlan& plan;
  int fold;
  std::uint64_t seed;
  int threads;
};

std::vector<DistanceBackend> union_backends(const ExperimentConfig& c) {
  std::vector<DistanceBackend> out;
  auto add = [&](DistanceBackend b) {
    if (std::find(out.begin(), out.end(), b) == out.end()) out.push_back(b);
  };
  for (auto b : c.selection_backends) add(b);
  for (auto b : c.eval_backends) add(b);
  if (c.mds_enabled) add(c.mds_backend);
  std::sort(out.begin(), out.end());
  return out;
}

DistanceMatrix training_distance(const TrainedForest& forest, const Dataset& train, DistanceBackend backend,
                                 std::map<ProximityKind, ProximityMatrix>& proximities,
                                 const Standardizer& standardizer) {
  if (backend == DistanceBackend::l2) return l2_distance(train, standardizer);
  const auto kind = proximity_kind(backend);
  auto it = proximities.find(kind);
  if (it == proximities.end()) it = proximities.emplace(kind, compute_proximity(forest, kind)).first;
  return to_distance(it->second);
}

Eigen::MatrixXd cross_distance(const TrainedForest& forest, const Dataset& train, const Dataset& test,
                               DistanceBackend backend, const Standardizer& standardizer) {
  if (backend == DistanceBackend::l2) {
    return euclidean_cross(standardizer.apply(test.features), standardizer.apply(train.features));
  }
  const Eigen::MatrixXd p = extend_proximity(forest, test.features, proximity_kind(backend));
  return (1.0 - p.array()).max(0.0).min(1.0).matrix();
}

std::optional<double> optional_at(const std::vector<std::optional<double>>& values, Eigen::Index i) {
  return values[static_cast<std::size_t>(i)];
}

FoldResult run_fold(const FoldContext& ctx, std::string& stage) {
  const auto& config = ctx.config;
  FoldResult out;
  out.fold = ctx.fold;
  out.train_rows = ctx.plan.train_indices(ctx.fold);
  out.test_rows = ctx.plan.test_indices(ctx.fold);
  const Dataset train = ctx.dataset.subset(out.train_rows);
  const Dataset test = ctx.dataset.subset(out.test_rows);
  const auto& labels = train.labels;
  const auto n = train.rows();

  stage = "grid_search";
  const auto inner = stratified_folds(train, config.grid_folds, derive_seed(ctx.seed, 1));
  const auto search = grid_search(train, config.grid, inner, derive_seed(ctx.seed, 2), ctx.threads);
  out.params = search.best;
  out.params.seed = derive_seed(ctx.seed, 4);
  for (std::size_t c = 0; c < search.candidates.size(); ++c) {
    const auto& p = search.candidates[c];
    if (p.n_trees == search.best.n_trees && p.max_depth == search.best.max_depth &&
        p.max_features.to_string() == search.best.max_features.to_string()) {
      out.cv_score = search.mean_scores(static_cast<Eigen::Index>(c));
    }
  }

  stage = "fit";
  out.forest = fit(train, out.params, ctx.threads);
  out.test_f1 = weighted_f1(predict(out.forest, test.features), test.labels);

  stage = "proximity";
  const auto standardizer = Standardizer::fit(train);
  std::map<ProximityKind, ProximityMatrix> proximities;
  std::map<DistanceBackend, DistanceMatrix> dist;
  std::map<DistanceBackend, Eigen::MatrixXd> test_dist;
  for (auto b : union_backends(config)) {
    dist.emplace(b, training_distance(out.forest, train, b, proximities, standardizer));
  }
  std::vector<DistanceBackend> f1_backends = config.selection_backends;
  for (auto b : config.eval_backends) f1_backends.push_back(b);
  for (auto b : f1_backends) {
    if (!test_dist.contains(b)) test_dist.emplace(b, cross_distance(out.forest, train, test, b, standardizer));
  }

  out.bundle.row_ids = train.row_ids;
  out.bundle.class_names = train.class_names;
  auto& report = out.metrics;
  report.add("forest", "test_f1", "-", out.test_f1);
  report.add("forest", "cv_f1", "-", out.cv_score);

  stage = "metrics";
  const Eigen::MatrixXd train_proba = predict_proba(out.forest, train.features);
  const auto layout = FeatureLayout::from(train);
  std::map<DistanceBackend, std::vector<double>> ood;
  std::map<DistanceBackend, std::vector<std::optional<double>>> robust;
  for (auto e : config.eval_backends) {
    auto& o = ood[e];
    auto& r = robust[e];
    for (Eigen::Index i = 0; i < n; ++i) {
      o.push_back(ood_distance(i, dist.at(e), config.ood_exclude_self));
      r.push_back(robustness(i, train_proba, dist.at(e), config.neighborhood));
    }
  }
  std::map<DistanceBackend, std::vector<std::optional<double>>> outlier;
  for (auto e : config.eval_backends) {
    if (e == DistanceBackend::l2) continue;
    auto& s = outlier[e];
    const auto& prox = proximities.at(proximity_kind(e));
    for (Eigen::Index i = 0; i < n; ++i) s.push_back(outlier_score(i, prox, labels));
  }

  auto add_row_metrics = [&](const std::string& key, Eigen::Index row) {
    for (auto e : config.eval_backends) {
      const auto b = to_string(e);
      report.add(key, "ood_distance", b, ood.at(e)[static_cast<std::size_t>(row)]);
      report.add(key, "robustness", b, optional_at(robust.at(e), row));
      if (outlier.contains(e)) {
        const auto score = optional_at(outlier.at(e), row);
        report.add(key, "outlier_score", b, score);
        report.add(key, "confusability", b, score ? std::optional<double>(1.0 - *score) : std::nullopt);
      }
    }
  };
  auto add_diversity = [&](const std::string& key, std::vector<Eigen::Index> rows) {
    if (rows.empty()) return;
    std::sort(rows.begin(), rows.end());
    rows.erase(std::unique(rows.begin(), rows.end()), rows.end());
    for (auto e : config.eval_backends) report.add(key, "diversity", to_string(e), diversity(rows, dist.at(e)));
  };

  for (auto b : config.selection_backends) {
    const auto& d = dist.at(b);
    const Eigen::MatrixXd similarity = selection_similarity(
        d, b == DistanceBackend::l2 ? nullptr : &proximities.at(proximity_kind(b)));
    for (auto method : config.methods) {
      const auto pkey = prototype_key(method, b);
      stage = "tuning";
      auto tuned = tune_prototype_count(d, similarity, labels, method, config.count_min, config.count_max, config.tune_folds,
                                        derive_seed(ctx.seed, 3), config.hdp_neighbors);
      stage = "selection";
      const std::vector<int> quota(static_cast<std::size_t>(train.class_count()), tuned.count);
      auto prototypes = select_prototypes(method, d, similarity, labels, quota, config.hdp_neighbors);
      const int available = static_cast<int>(n) - static_cast<int>(prototypes.total());
      int m = config.critic_count.value_or(static_cast<int>(prototypes.total()));
      if (config.critic_scope == CriticScope::pooled) m = std::min(m, available);
      CriticSet critics;
      if (m > 0) critics = select_critics(prototypes, similarity, m, config.critic_scope, labels);

      stage = "metrics";
      const auto ckey = critic_key(method, b);
      const auto pooled = prototypes.pooled();
      for (auto p : pooled) add_row_metrics(pkey, p);
      add_diversity(pkey, pooled);
      for (auto e : config.eval_backends) {
        const auto assigned = prototype_assignment(prototypes, dist.at(e), labels);
        for (std::size_t p = 0; p < pooled.size(); ++p) {
          report.add(pkey, "compactness", to_string(e), compactness(pooled[p], assigned[p], dist.at(e)));
        }
      }
      std::vector<DistanceBackend> f1_under = config.eval_backends;
      if (std::find(f1_under.begin(), f1_under.end(), b) == f1_under.end()) f1_under.push_back(b);
      for (auto e : f1_under) {
        report.add(pkey, "nearest_prototype_f1", to_string(e),
                   nearest_prototype_f1(prototypes, test_dist.at(e), labels, test.labels));
      }
      report.add(pkey, "count_per_class", "-", static_cast<double>(tuned.count));
      for (auto c : critics.indices) add_row_metrics(ckey, c);
      add_diversity(ckey, critics.indices);

      out.tuned.emplace(pkey, std::move(tuned));
      out.bundle.prototypes.push_back(std::move(prototypes));
      out.bundle.critics.push_back(std::move(critics));
    }

    stage = "factuals";
    const auto skey = semi_key(b);
    const auto ckey = counter_key(b);
    std::vector<Eigen::Index> semis;
    std::vector<Eigen::Index> counters;
    for (Eigen::Index q = 0; q < n; ++q) {
      auto pair = factual_pair(q, d, labels);
      pair.backend = b;
      semis.push_back(pair.semi_factual);
      counters.push_back(pair.counter_factual);
      out.bundle.factuals.push_back(pair);
    }
    stage = "metrics";
    for (Eigen::Index q = 0; q < n; ++q) {
      const auto s = semis[static_cast<std::size_t>(q)];
      const auto c = counters[static_cast<std::size_t>(q)];
      for (auto e : config.eval_backends) {
        report.add(skey, "pair_distance", to_string(e), pair_distance(q, s, dist.at(e)));
        report.add(ckey, "pair_distance", to_string(e), pair_distance(q, c, dist.at(e)));
      }
      report.add(skey, "sparsity", "-", sparsity(train.features.row(q), train.features.row(s), layout, config.numeric_tol));
      report.add(ckey, "sparsity", "-", sparsity(train.features.row(q), train.features.row(c), layout, config.numeric_tol));
      add_row_metrics(skey, s);
      add_row_metrics(ckey, c);
    }
    add_diversity(skey, semis);
    add_diversity(ckey, counters);
  }
  return out;
}

void build_embedding(ExperimentResult& result, const Dataset& dataset) {
  const auto& config = result.config;
  const auto& fold = result.folds.front();
  const Dataset train = dataset.subset(fold.train_rows);
  std::map<ProximityKind, ProximityMatrix> proximities;
  const auto d = training_distance(fold.forest, train, config.mds_backend, proximities, Standardizer::fit(train));
  MdsOptions options;
  options.max_iter = config.mds_max_iter;
  options.seed = derive_seed(config.seed, 5);
  const auto mds = mds_embed(d.values, options);
  result.embedding_stress = mds.stress;

  const auto n = train.rows();
  std::vector<int> rank(static_cast<std::size_t>(n), 0);
  const char* names[] = {"point", "critic", "prototype", "counter", "semi", "query"};
  auto mark = [&](Eigen::Index row, int r) {
    auto& slot = rank[static_cast<std::size_t>(row)];
    slot = std::max(slot, r);
  };
  const auto& bundle = fold.bundle;
  for (std::size_t s = 0; s < bundle.prototypes.size(); ++s) {
    const auto& p = bundle.prototypes[s];
    if (p.method != config.mds_method || p.backend != config.mds_backend) continue;
    for (auto c : bundle.critics[s].indices) mark(c, 1);
    for (auto r : p.pooled()) mark(r, 2);
  }
  Eigen::Index query = 0;
  if (!config.mds_query.empty()) {
    const auto it = std::find(train.row_ids.begin(), train.row_ids.end(), config.mds_query);
    if (it == train.row_ids.end()) {
      warn("mds.query '" + config.mds_query + "' is not a fold-0 training row; using the first training row");
    } else {
      query = it - train.row_ids.begin();
    }
  }
  for (const auto& f : bundle.factuals) {
    if (f.backend != config.mds_backend || f.query != query) continue;
    mark(f.counter_factual, 3);
    mark(f.semi_factual, 4);
  }
  mark(query, 5);
  for (Eigen::Index i = 0; i < n; ++i) {
    EmbeddingRow row;
    row.row_id = train.row_ids[static_cast<std::size_t>(i)];
    row.x = mds.coordinates(i, 0);
    row.y = mds.coordinates.cols() > 1 ? mds.coordinates(i, 1) : 0.0;
    row.role = names[rank[static_cast<std::size_t>(i)]];
    row.class_name = train.class_names[static_cast<std::size_t>(train.labels[static_cast<std::size_t>(i)])];
    result.embedding.push_back(std::move(row));
  }
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& config) {
  config.validate();
  return run_experiment(config, load_dataset(config.dataset));
}

ExperimentResult run_experiment(const ExperimentConfig& config, const Dataset& dataset) {
  config.validate();
  dataset.validate();
  if (!dataset.is_encoded()) throw DataError("the experiment needs an encoded dataset");
  ExperimentResult result;
  result.config = config;
  result.class_names = dataset.class_names;
  result.dataset_rows = dataset.rows();
  result.dataset_features = dataset.cols();
  result.data_hash = feature_hash(dataset);

  const auto plan = stratified_folds(dataset, config.k_folds, derive_seed(config.seed, 1));
  for (int f = 0; f < config.k_folds; ++f) {
    result.fold_seeds.push_back(derive_seed(config.seed, 2, static_cast<std::uint64_t>(f)));
  }

  const int hardware = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  const int threads = config.threads > 0 ? config.threads : hardware;
  const int workers = std::min(threads, config.k_folds);
  const int per_fold = std::max(1, threads / workers);

  std::vector<std::optional<FoldResult>> slots(static_cast<std::size_t>(config.k_folds));
  std::vector<std::optional<Failure>> failures(static_cast<std::size_t>(config.k_folds));
  std::atomic<int> next{0};
  auto work = [&] {
    for (int f = next++; f < config.k_folds; f = next++) {
      std::string stage = "setup";
      const FoldContext ctx{config, dataset, plan, f, result.fold_seeds[static_cast<std::size_t>(f)], per_fold};
      try {
        slots[static_cast<std::size_t>(f)] = run_fold(ctx, stage);
      } catch (const Error& e) {
        failures[static_cast<std::size_t>(f)] = Failure{f, stage, e.what(), e.category()};
      } catch (const std::exception& e) {
        failures[static_cast<std::size_t>(f)] = Failure{f, stage, e.what(), ErrorCategory::stage};
      }
    }
  };
  if (workers <= 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(work);
  }

  for (int f = 0; f < config.k_folds; ++f) {
    if (failures[static_cast<std::size_t>(f)]) {
      result.failure = failures[static_cast<std::size_t>(f)];
      break;
    }
    result.folds.push_back(std::move(*slots[static_cast<std::size_t>(f)]));
  }

  std::vector<MetricReport> reports;
  for (const auto& f : result.folds) reports.push_back(f.metrics);
  result.averaged = MetricReport::average(reports);

  if (config.mds_enabled && !result.folds.empty() && result.ok()) {
    try {
      build_embedding(result, dataset);
    } catch (const Error& e) {
      result.failure = Failure{0, "embedding", e.what(), e.category()};
    }
  }
  return result;
}

nlohmann::json ExperimentResult::report() const {
  json folds_json = json::array();
  for (const auto& f : folds) {
    json tuned = json::object();
    for (const auto& [key, t] : f.tuned) {
      tuned[key] = {{"count", t.count}, {"candidates", t.candidates}, {"f1", t.f1}};
    }
    folds_json.push_back({{"fold", f.fold},
                          {"forest", params_to_json(f.params)},
                          {"forest_hash", hex64(forest_hash(f.forest))},
                          {"cv_f1", f.cv_score},
                          {"test_f1", f.test_f1},
                          {"train_rows", f.train_rows.size()},
                          {"test_rows", f.test_rows.size()},
                          {"tuned_counts", tuned},
                          {"explanations", to_json(f.bundle)},
                          {"metrics", f.metrics.to_json()}});
  }
  json seeds = json::array();
  for (auto s : fold_seeds) seeds.push_back(hex64(s));
  json j = {{"format", "rfexplain-report"},
            {"version", 1},
            {"status", ok() ? "ok" : "failed"},
            {"config_hash", hex64(config.hash())},
            {"dataset",
             {{"name", config.dataset.name},
              {"rows", dataset_rows},
              {"features", dataset_features},
              {"classes", class_names},
              {"feature_hash", hex64(data_hash)}}},
            {"seeds", {{"master", hex64(config.seed)}, {"folds", seeds}}},
            {"folds", folds_json},
            {"averaged", {{"test_f1", mean_test_f1()}, {"metrics", averaged.to_json()}}}};
  if (!embedding.empty()) {
    j["embedding"] = {{"backend", to_string(config.mds_backend)},
                      {"method", to_string(config.mds_method)},
                      {"rows", embedding.size()},
                      {"stress", embedding_stress}};
  }
  if (failure) {
    j["failure"] = {{"fold", failure->fold},
                    {"stage", failure->stage},
                    {"message", failure->message},
                    {"category", static_cast<int>(failure->category)}};
  }
  return j;
}

std::uint64_t ExperimentResult::hash() const { return detail::fnv1a(report().dump()); }

std::string embedding_csv(const std::vector<EmbeddingRow>& rows) {
  std::ostringstream os;
  os << "row_id,x,y,role,class\n";
  for (const auto& r : rows) {
    os << r.row_id << ',' << format_double(r.x) << ',' << format_double(r.y) << ',' << r.role << ',' << r.class_name
       << '\n';
  }
  return os.str();
}

std::string metrics_csv(const ExperimentResult& result) {
  std::string out = "scope,explanans,metric,backend,mean,count,masked\n";
  for (const auto& f : result.folds) out += f.metrics.to_csv("fold" + std::to_string(f.fold));
  out += result.averaged.to_csv("mean");
  return out;
}

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw StageError("cannot write " + path.string());
  out << text;
  if (!out) throw StageError("failed writing " + path.string());
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace

std::vector<std::filesystem::path> emit_reports(const ExperimentResult& result, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw StageError("cannot create output directory " + dir.string() + ": " + ec.message());
  std::vector<std::filesystem::path> written;
  auto emit = [&](const std::string& name, const std::string& text) {
    write_text(dir / name, text);
    written.push_back(dir / name);
  };
  emit("report.json", result.report().dump(2) + "\n");
  emit("metrics.csv", metrics_csv(result));
  if (!result.embedding.empty()) emit("embedding.csv", embedding_csv(result.embedding));
  for (const auto& f : result.folds) {
    const auto path = dir / ("forest_fold" + std::to_string(f.fold) + ".model");
    save_model(f.forest, path);
    written.push_back(path);
  }
  std::ostringstream lock;
  lock << "# resolved configuration\n" << result.config.to_text();
  lock << "\n# provenance\n";
  lock << "# config_hash: " << hex64(result.config.hash()) << '\n';
  for (std::size_t f = 0; f < result.fold_seeds.size(); ++f) {
    lock << "# fold_seed." << f << ": " << hex64(result.fold_seeds[f]) << '\n';
  }
  lock << "# created: " << utc_timestamp() << '\n';
  emit("config.lock", lock.str());
  return written;
}

}  // namespace rfexplain
