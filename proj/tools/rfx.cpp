// rfx: command-line front end for the rfexplain library.
//
// Exit codes: 0 ok, 1 config, 2 data, 3 model mismatch, 4 stage failure.

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "rfexplain/data.hpp"
#include "rfexplain/error.hpp"
#include "rfexplain/explain.hpp"
#include "rfexplain/forest.hpp"
#include "rfexplain/log.hpp"
#include "rfexplain/mds.hpp"
#include "rfexplain/metrics.hpp"
#include "rfexplain/pipeline.hpp"
#include "rfexplain/proximity.hpp"
#include "rfexplain/random.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace rfexplain;

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string backend = "gap";
  bool json_out = false;
  bool dry_run = false;
  std::string output_dir;
  std::optional<int> threads;

  std::string model;
  std::string data;
  std::string query;
  std::string method = "kmedoids";
  int count = 1;
  std::optional<int> critics;
  std::string matrix;
  std::string bundle;
  std::string output;
  int max_iter = 300;
};

std::optional<std::string> env(const char* name) {
  const char* value = std::getenv(name);
  if (value == nullptr || *value == '\0') return std::nullopt;
  return std::string(value);
}

// flag > env > config
void apply_overrides(ExperimentConfig& config, const Options& o) {
  if (o.seed) config.seed = *o.seed;
  if (!o.output_dir.empty()) {
    config.output_dir = o.output_dir;
  } else if (const auto dir = env("RFX_OUTPUT_DIR")) {
    config.output_dir = *dir;
  }
  if (o.threads) {
    config.threads = *o.threads;
  } else if (const auto t = env("RFX_THREADS")) {
    try {
      config.threads = std::stoi(*t);
    } catch (const std::exception&) {
      throw ConfigError("RFX_THREADS must be an integer, got '" + *t + "'");
    }
  }
  config.validate();
}

int threads_for(const Options& o) {
  if (o.threads) return *o.threads;
  if (const auto t = env("RFX_THREADS")) {
    try {
      return std::stoi(*t);
    } catch (const std::exception&) {
      throw ConfigError("RFX_THREADS must be an integer, got '" + *t + "'");
    }
  }
  return 0;
}

class DirectoryLock {
 public:
  explicit DirectoryLock(const fs::path& dir) : path_(dir / ".rfx.lock") {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw StageError("cannot create output directory " + dir.string() + ": " + ec.message());
    std::FILE* f = std::fopen(path_.c_str(), "wx");
    if (f == nullptr) {
      throw StageError("output directory " + dir.string() + " is locked by another run (" + path_.string() + ")");
    }
    std::fclose(f);
  }
  ~DirectoryLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  DirectoryLock(const DirectoryLock&) = delete;
  DirectoryLock& operator=(const DirectoryLock&) = delete;

 private:
  fs::path path_;
};

ExperimentConfig config_from(const Options& o) {
  if (o.config.empty()) throw ConfigError("--config is required");
  auto config = load_config(o.config);
  if (!o.data.empty()) config.dataset.path = o.data;
  return config;
}

// Dataset rows the model was trained on, in training order; fails when the
// model and the data disagree.
Dataset training_view(const TrainedForest& forest, const Dataset& dataset) {
  if (forest.feature_count != dataset.cols()) {
    throw ModelMismatchError("model expects " + std::to_string(forest.feature_count) + " features, dataset has " +
                             std::to_string(dataset.cols()));
  }
  std::map<std::string, Eigen::Index> index;
  for (std::size_t i = 0; i < dataset.row_ids.size(); ++i) index[dataset.row_ids[i]] = static_cast<Eigen::Index>(i);
  std::vector<Eigen::Index> rows;
  for (const auto& id : forest.train_row_ids) {
    const auto it = index.find(id);
    if (it == index.end()) throw ModelMismatchError("model training row '" + id + "' is not in the dataset");
    rows.push_back(it->second);
  }
  Dataset view = dataset.subset(rows);
  if (feature_hash(view) != forest.train_feature_hash) {
    throw ModelMismatchError("dataset features differ from the rows the model was trained on");
  }
  if (view.labels != forest.train_labels) throw ModelMismatchError("dataset labels differ from the model's");
  return view;
}

DistanceMatrix distance_for(const TrainedForest& forest, const Dataset& train, DistanceBackend backend) {
  if (backend == DistanceBackend::l2) return l2_distance(train, Standardizer::fit(train));
  return to_distance(compute_proximity(forest, proximity_kind(backend)));
}

Eigen::Index row_of(const Dataset& ds, const std::string& id) {
  const auto it = std::find(ds.row_ids.begin(), ds.row_ids.end(), id);
  if (it == ds.row_ids.end()) throw DataError("unknown row id '" + id + "'");
  return it - ds.row_ids.begin();
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

int cmd_run(const Options& o) {
  auto config = config_from(o);
  apply_overrides(config, o);
  if (o.dry_run) {
    const auto ds = load_dataset(config.dataset);
    if (o.json_out) {
      std::cout << json{{"status", "valid"},
                        {"rows", ds.rows()},
                        {"features", ds.cols()},
                        {"classes", ds.class_names},
                        {"config_hash", hex64(config.hash())}}
                       .dump(2)
                << '\n';
    } else {
      std::cout << "config valid: " << ds.rows() << " rows, " << ds.cols() << " encoded features, "
                << ds.class_count() << " classes\n";
    }
    return 0;
  }
  DirectoryLock lock(config.output_dir);
  const auto result = run_experiment(config);
  const auto written = emit_reports(result, config.output_dir);

  if (o.json_out) {
    json folds = json::array();
    for (const auto& f : result.folds) {
      json tuned = json::object();
      for (const auto& [key, t] : f.tuned) tuned[key] = t.count;
      folds.push_back({{"fold", f.fold}, {"test_f1", f.test_f1}, {"tuned_counts", tuned}});
    }
    json paths = json::array();
    for (const auto& p : written) paths.push_back(p.string());
    json summary = {{"status", result.ok() ? "ok" : "failed"},
                    {"mean_test_f1", result.mean_test_f1()},
                    {"folds", folds},
                    {"artifacts", paths}};
    if (result.failure) {
      summary["failure"] = {{"fold", result.failure->fold},
                            {"stage", result.failure->stage},
                            {"message", result.failure->message}};
    }
    std::cout << summary.dump(2) << '\n';
  } else {
    for (const auto& f : result.folds) {
      std::cout << "fold " << f.fold << ": test F1 " << fmt(f.test_f1) << "; prototypes per class";
      for (const auto& [key, t] : f.tuned) std::cout << ' ' << key << '=' << t.count;
      std::cout << '\n';
    }
    std::cout << "mean test F1 " << fmt(result.mean_test_f1()) << '\n';
    for (const auto& p : written) std::cout << "wrote " << p.string() << '\n';
  }
  if (result.failure) {
    std::cerr << "rfx: fold " << result.failure->fold << ", stage " << result.failure->stage << ": "
              << result.failure->message << '\n';
    return static_cast<int>(result.failure->category);
  }
  return 0;
}

int cmd_train(const Options& o) {
  auto config = config_from(o);
  if (o.seed) config.seed = *o.seed;
  const int threads = threads_for(o);
  const auto ds = load_dataset(config.dataset);
  const auto inner = stratified_folds(ds, config.grid_folds, derive_seed(config.seed, 1));
  const auto search = grid_search(ds, config.grid, inner, derive_seed(config.seed, 2), threads);
  auto params = search.best;
  params.seed = derive_seed(config.seed, 4);
  if (o.dry_run) return 0;
  const auto forest = fit(ds, params, threads);
  const fs::path out = o.output.empty() ? fs::path(config.output_dir) / "forest.model" : fs::path(o.output);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  save_model(forest, out);
  if (o.json_out) {
    std::cout << json{{"model", out.string()}, {"params", params_to_json(params)}}.dump(2) << '\n';
  } else {
    std::cout << "trained " << params.n_trees << " trees (max_features " << params.max_features.to_string()
              << ", max_depth " << (params.max_depth ? std::to_string(*params.max_depth) : "none") << ")\n"
              << "wrote " << out.string() << '\n';
  }
  return 0;
}

int cmd_explain(const Options& o) {
  const auto config = config_from(o);
  const auto backend = parse_backend(o.backend);
  const auto forest = load_model(o.model);
  const auto train = training_view(forest, load_dataset(config.dataset));
  const auto q = row_of(train, o.query);
  const auto d = distance_for(forest, train, backend);
  const auto pair = factual_pair(q, d, train.labels);
  const auto layout = FeatureLayout::from(train);
  auto describe = [&](Eigen::Index e) {
    const auto s = sparsity(train.features.row(q), train.features.row(e), layout, config.numeric_tol);
    return json{{"row_id", train.row_ids[static_cast<std::size_t>(e)]},
                {"class", train.class_names[static_cast<std::size_t>(train.labels[static_cast<std::size_t>(e)])]},
                {"distance", pair_distance(q, e, d)},
                {"sparsity", s ? json(*s) : json(nullptr)}};
  };
  const json out = {{"query", o.query},
                    {"query_class", train.class_names[static_cast<std::size_t>(train.labels[static_cast<std::size_t>(q)])]},
                    {"backend", to_string(backend)},
                    {"semi_factual", describe(pair.semi_factual)},
                    {"counter_factual", describe(pair.counter_factual)}};
  if (o.json_out) {
    std::cout << out.dump(2) << '\n';
    return 0;
  }
  std::cout << "query " << o.query << " (" << out["query_class"].get<std::string>() << "), backend "
            << to_string(backend) << '\n';
  for (const char* role : {"semi_factual", "counter_factual"}) {
    const auto& r = out[role];
    std::cout << role << ": " << r["row_id"].get<std::string>() << " (" << r["class"].get<std::string>()
              << ") distance " << fmt(r["distance"].get<double>()) << " sparsity "
              << (r["sparsity"].is_null() ? std::string("masked") : fmt(r["sparsity"].get<double>())) << '\n';
  }
  return 0;
}

int cmd_prototypes(const Options& o) {
  const auto method = parse_method(o.method);
  const auto backend = parse_backend(o.backend);
  if (o.count < 1) throw ConfigError("--count must be at least 1");
  const auto config = config_from(o);
  const auto forest = load_model(o.model);
  const auto train = training_view(forest, load_dataset(config.dataset));
  std::optional<ProximityMatrix> proximity;
  DistanceMatrix d;
  if (backend == DistanceBackend::l2) {
    d = l2_distance(train, Standardizer::fit(train));
  } else {
    proximity = compute_proximity(forest, proximity_kind(backend));
    d = to_distance(*proximity);
  }
  const Eigen::MatrixXd similarity = selection_similarity(d, proximity ? &*proximity : nullptr);
  const std::vector<int> quota(static_cast<std::size_t>(train.class_count()), o.count);
  auto prototypes = method == PrototypeMethod::hdp
                        ? hdp_prototypes(similarity, train.labels, quota, config.hdp_neighbors)
                        : kmedoids_prototypes(d, train.labels, quota);
  prototypes.backend = backend;
  const int available = static_cast<int>(train.rows()) - static_cast<int>(prototypes.total());
  const int m = std::min(o.critics.value_or(static_cast<int>(prototypes.total())), available);
  CriticSet critics;
  if (m > 0) critics = select_critics(prototypes, similarity, m, config.critic_scope, train.labels);

  ExplanationBundle bundle;
  bundle.row_ids = train.row_ids;
  bundle.class_names = train.class_names;
  bundle.prototypes.push_back(prototypes);
  bundle.critics.push_back(critics);
  if (o.json_out) {
    std::cout << to_json(bundle).dump(2) << '\n';
    return 0;
  }
  std::cout << "method " << to_string(method) << ", backend " << to_string(backend) << '\n';
  for (std::size_t c = 0; c < prototypes.per_class.size(); ++c) {
    std::cout << "prototypes " << train.class_names[c] << ":";
    for (auto r : prototypes.per_class[c]) std::cout << ' ' << train.row_ids[static_cast<std::size_t>(r)];
    std::cout << '\n';
  }
  for (std::size_t i = 0; i < critics.indices.size(); ++i) {
    std::cout << "critic " << train.row_ids[static_cast<std::size_t>(critics.indices[i])] << " witness "
              << fmt(critics.witness_values[i]) << '\n';
  }
  return 0;
}

int cmd_embed(const Options& o) {
  Eigen::MatrixXd d;
  std::vector<std::string> ids;
  std::vector<std::string> classes;
  std::vector<std::string> class_names;
  if (!o.matrix.empty()) {
    auto m = read_matrix_csv(o.matrix);
    if (m.values.rows() != m.values.cols()) throw DataError("distance matrix is not square");
    d = std::move(m.values);
    ids = std::move(m.row_ids);
    classes.assign(ids.size(), "");
  } else {
    if (o.model.empty()) throw ConfigError("embed needs --matrix or --model with --config");
    const auto config = config_from(o);
    const auto forest = load_model(o.model);
    const auto train = training_view(forest, load_dataset(config.dataset));
    d = distance_for(forest, train, parse_backend(o.backend)).values;
    ids = train.row_ids;
    class_names = train.class_names;
    for (int y : train.labels) classes.push_back(train.class_names[static_cast<std::size_t>(y)]);
  }
  MdsOptions options;
  options.max_iter = o.max_iter;
  options.seed = o.seed.value_or(0);
  const auto mds = mds_embed(d, options);

  std::vector<int> rank(ids.size(), 0);
  const char* names[] = {"point", "critic", "prototype", "counter", "semi", "query"};
  if (!o.bundle.empty()) {
    std::ifstream in(o.bundle);
    if (!in) throw DataError("cannot read bundle " + o.bundle);
    json j;
    try {
      j = json::parse(in);
    } catch (const json::exception& e) {
      throw DataError("malformed bundle " + o.bundle + ": " + e.what());
    }
    if (class_names.empty()) {
      for (const auto& set : j.value("prototype_sets", json::array())) {
        for (const auto& [name, _] : set.at("prototypes").items()) {
          if (std::find(class_names.begin(), class_names.end(), name) == class_names.end()) class_names.push_back(name);
        }
      }
    }
    const auto bundle = bundle_from_json(j, ids, class_names);
    auto mark = [&](Eigen::Index r, int role) {
      auto& slot = rank[static_cast<std::size_t>(r)];
      slot = std::max(slot, role);
    };
    for (const auto& c : bundle.critics) {
      for (auto r : c.indices) mark(r, 1);
    }
    for (const auto& p : bundle.prototypes) {
      for (auto r : p.pooled()) mark(r, 2);
    }
    for (const auto& f : bundle.factuals) {
      mark(f.counter_factual, 3);
      mark(f.semi_factual, 4);
      mark(f.query, 5);
    }
  }
  std::vector<EmbeddingRow> rows;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    rows.push_back({ids[i], mds.coordinates(r, 0), mds.coordinates.cols() > 1 ? mds.coordinates(r, 1) : 0.0,
                    names[rank[i]], classes[i]});
  }
  const fs::path out = o.output.empty() ? fs::path("embedding.csv") : fs::path(o.output);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  std::ofstream file(out, std::ios::binary | std::ios::trunc);
  if (!file) throw StageError("cannot write " + out.string());
  file << embedding_csv(rows);
  if (o.json_out) {
    std::cout << json{{"output", out.string()}, {"rows", rows.size()}, {"stress", mds.stress},
                      {"iterations", mds.iterations}}
                     .dump(2)
              << '\n';
  } else {
    std::cout << "embedded " << rows.size() << " rows, stress " << fmt(mds.stress) << " after " << mds.iterations
              << " iterations\nwrote " << out.string() << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Random-forest proximities and case-based explanations"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* cmd) {
    cmd->add_option("--config", o.config, "Experiment config file");
    cmd->add_option("--seed", o.seed, "Master seed override");
    cmd->add_flag("--json", o.json_out, "Machine-readable output on stdout");
  };
  auto backend = [&](CLI::App* cmd) {
    cmd->add_option("--backend", o.backend, "Distance backend: l2, gap, original or oob");
  };
  auto model_inputs = [&](CLI::App* cmd) {
    cmd->add_option("--model", o.model, "Serialized forest")->required();
    cmd->add_option("--data", o.data, "Dataset CSV (defaults to the config's dataset.path)");
  };

  auto* run = app.add_subcommand("run", "Run the full cross-validated experiment");
  common(run);
  run->add_flag("--dry-run", o.dry_run, "Validate the config and data, write nothing");
  run->add_option("--output-dir", o.output_dir, "Output directory (env RFX_OUTPUT_DIR)");
  run->add_option("--threads", o.threads, "Worker threads (env RFX_THREADS)");

  auto* train = app.add_subcommand("train", "Grid-search and fit a forest on the whole dataset");
  common(train);
  train->add_flag("--dry-run", o.dry_run, "Search only, write nothing");
  train->add_option("--output,-o", o.output, "Model path");
  train->add_option("--output-dir", o.output_dir, "Directory for forest.model when --output is absent");
  train->add_option("--threads", o.threads, "Worker threads (env RFX_THREADS)");

  auto* explain = app.add_subcommand("explain", "Semi-factual and counter-factual for one training row");
  common(explain);
  model_inputs(explain);
  backend(explain);
  explain->add_option("--query", o.query, "Row id of the query")->required();

  auto* protos = app.add_subcommand("prototypes", "Prototypes per class and critics");
  common(protos);
  model_inputs(protos);
  backend(protos);
  protos->add_option("--method", o.method, "hdp or kmedoids");
  protos->add_option("--count", o.count, "Prototypes per class");
  protos->add_option("--critics", o.critics, "Critic count (default: total prototypes)");

  auto* embed = app.add_subcommand("embed", "Two-dimensional MDS coordinates of a distance matrix");
  common(embed);
  backend(embed);
  embed->add_option("--model", o.model, "Serialized forest (with --config)");
  embed->add_option("--data", o.data, "Dataset CSV (defaults to the config's dataset.path)");
  embed->add_option("--matrix", o.matrix, "Distance matrix CSV with an id column and header");
  embed->add_option("--bundle", o.bundle, "Explanation bundle JSON for role annotations");
  embed->add_option("--output,-o", o.output, "Output CSV")->required();
  embed->add_option("--max-iter", o.max_iter, "SMACOF iteration cap");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return static_cast<int>(ErrorCategory::config);
  }

  try {
    if (!o.output_dir.empty() && train->parsed() && o.output.empty()) o.output = (fs::path(o.output_dir) / "forest.model").string();
    if (run->parsed()) return cmd_run(o);
    if (train->parsed()) return cmd_train(o);
    if (explain->parsed()) return cmd_explain(o);
    if (protos->parsed()) return cmd_prototypes(o);
    if (embed->parsed()) return cmd_embed(o);
  } catch (const Error& e) {
    std::cerr << "rfx: " << e.what() << '\n';
    return static_cast<int>(e.category());
  } catch (const std::exception& e) {
    std::cerr << "rfx: " << e.what() << '\n';
    return static_cast<int>(ErrorCategory::stage);
  }
  return 0;
}
