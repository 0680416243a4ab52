#include "cvc/forest.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <tuple>

#include <json.hpp>

#include "cvc/image_io.hpp"

namespace cvc {

Matrix Matrix::from_rows(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) return {};
  Matrix m(rows.size(), rows.front().size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != m.cols()) throw ShapeMismatchError("Matrix::from_rows: ragged rows");
    std::copy(rows[r].begin(), rows[r].end(), m.data_.begin() + static_cast<std::ptrdiff_t>(r * m.cols()));
  }
  return m;
}

Matrix Matrix::select(std::span<const std::size_t> idx) const {
  Matrix m(idx.size(), cols_);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= rows_) throw InvalidArgumentError("Matrix::select: row index out of range");
    const auto src = row(idx[i]);
    std::copy(src.begin(), src.end(), m.data_.begin() + static_cast<std::ptrdiff_t>(i * cols_));
  }
  return m;
}

void ForestConfig::validate() const {
  if (n_trees < 1) throw ConfigError("forest: n_trees must be >= 1");
  if (max_depth < 0) throw ConfigError("forest: max_depth must be >= 0");
  if (min_samples_leaf < 1) throw ConfigError("forest: min_samples_leaf must be >= 1");
  if (mtry < 0) throw ConfigError("forest: mtry must be >= 0");
}

int ForestConfig::resolved_mtry(std::size_t n_features) const {
  if (n_features == 0) throw InvalidArgumentError("forest: no features");
  const int nf = static_cast<int>(n_features);
  if (mtry == 0) return std::max(1, static_cast<int>(std::floor(std::sqrt(static_cast<double>(nf)))));
  if (mtry > nf) throw ConfigError("forest: mtry exceeds feature count");
  return mtry;
}

const TreeNode& DecisionTree::leaf_for(std::span<const double> x) const {
  const TreeNode* n = &nodes.front();
  while (!n->is_leaf()) n = &nodes[static_cast<std::size_t>(x[static_cast<std::size_t>(n->feature)] <= n->threshold ? n->left : n->right)];
  return *n;
}

int DecisionTree::depth() const {
  std::vector<int> d(nodes.size(), 0);
  int best = 0;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    best = std::max(best, d[i]);
    if (!nodes[i].is_leaf()) {
      d[static_cast<std::size_t>(nodes[i].left)] = d[i] + 1;
      d[static_cast<std::size_t>(nodes[i].right)] = d[i] + 1;
    }
  }
  return best;
}

namespace {

// Weighted child impurity n_l * gini_l + n_r * gini_r from class counts.
double split_cost(double l_neg, double l_pos, double r_neg, double r_pos) {
  const double nl = l_neg + l_pos;
  const double nr = r_neg + r_pos;
  double c = 0.0;
  if (nl > 0.0) c += nl - (l_neg * l_neg + l_pos * l_pos) / nl;
  if (nr > 0.0) c += nr - (r_neg * r_neg + r_pos * r_pos) / nr;
  return c;
}

class TreeBuilder {
 public:
  TreeBuilder(const Matrix& X, std::span<const int> y, const ForestConfig& cfg, Rng& rng)
      : X_(X), y_(y), cfg_(cfg), rng_(rng), mtry_(cfg.resolved_mtry(X.cols())), features_(X.cols()) {
    std::iota(features_.begin(), features_.end(), 0);
  }

  DecisionTree build(std::vector<std::size_t> rows) {
    grow(rows, 0);
    return std::move(tree_);
  }

 private:
  int grow(std::vector<std::size_t>& rows, int depth) {
    const int id = static_cast<int>(tree_.nodes.size());
    tree_.nodes.emplace_back();
    double pos = 0.0;
    for (std::size_t r : rows) pos += y_[r] ? 1.0 : 0.0;
    const double neg = static_cast<double>(rows.size()) - pos;
    tree_.nodes[id].count_neg = neg;
    tree_.nodes[id].count_pos = pos;

    const auto n = rows.size();
    const auto min_leaf = static_cast<std::size_t>(cfg_.min_samples_leaf);
    if (depth >= cfg_.max_depth || pos == 0.0 || neg == 0.0 || n < 2 * min_leaf) return id;

    // Partial Fisher-Yates draws mtry distinct features.
    const std::size_t nf = features_.size();
    for (int k = 0; k < mtry_; ++k) {
      const std::size_t j = static_cast<std::size_t>(k) + rng_.below(nf - static_cast<std::size_t>(k));
      std::swap(features_[static_cast<std::size_t>(k)], features_[j]);
    }

    double best_cost = std::numeric_limits<double>::infinity();
    int best_feature = -1;
    double best_threshold = 0.0;
    std::vector<std::pair<double, int>> vals(n);
    for (int k = 0; k < mtry_; ++k) {
      const std::size_t f = features_[static_cast<std::size_t>(k)];
      for (std::size_t i = 0; i < n; ++i) vals[i] = {X_(rows[i], f), y_[rows[i]]};
      std::sort(vals.begin(), vals.end());
      if (vals.front().first == vals.back().first) continue;
      double l_neg = 0.0, l_pos = 0.0;
      for (std::size_t i = 0; i + 1 < n; ++i) {
        (vals[i].second ? l_pos : l_neg) += 1.0;
        if (vals[i].first == vals[i + 1].first) continue;
        const std::size_t nl = i + 1;
        if (nl < min_leaf || n - nl < min_leaf) continue;
        const double cost = split_cost(l_neg, l_pos, neg - l_neg, pos - l_pos);
        if (cost < best_cost) {
          best_cost = cost;
          best_feature = static_cast<int>(f);
          const double a = vals[i].first;
          const double b = vals[i + 1].first;
          double t = a + 0.5 * (b - a);
          if (!(t < b) || t < a) t = a;
          best_threshold = t;
        }
      }
    }
    if (best_feature < 0) return id;

    std::vector<std::size_t> left, right;
    left.reserve(n);
    right.reserve(n);
    for (std::size_t r : rows) (X_(r, static_cast<std::size_t>(best_feature)) <= best_threshold ? left : right).push_back(r);
    rows.clear();
    rows.shrink_to_fit();

    tree_.nodes[id].feature = best_feature;
    tree_.nodes[id].threshold = best_threshold;
    const int l = grow(left, depth + 1);
    tree_.nodes[id].left = l;
    const int r = grow(right, depth + 1);
    tree_.nodes[id].right = r;
    return id;
  }

  const Matrix& X_;
  std::span<const int> y_;
  const ForestConfig& cfg_;
  Rng& rng_;
  int mtry_;
  std::vector<std::size_t> features_;
  DecisionTree tree_;
};

void check_xy(const Matrix& X, std::span<const int> y) {
  if (X.rows() == 0) throw InvalidArgumentError("forest: empty training set");
  if (X.rows() != y.size())
    throw InvalidArgumentError("forest: " + std::to_string(X.rows()) + " rows but " + std::to_string(y.size()) +
                               " labels");
}

}  // namespace

DecisionTree fit_tree(const Matrix& X, std::span<const int> y, const ForestConfig& cfg, Rng& rng,
                      std::span<const std::size_t> rows) {
  cfg.validate();
  check_xy(X, y);
  std::vector<std::size_t> r;
  if (rows.empty()) {
    r.resize(X.rows());
    std::iota(r.begin(), r.end(), 0);
  } else {
    r.assign(rows.begin(), rows.end());
  }
  return TreeBuilder(X, y, cfg, rng).build(std::move(r));
}

DecisionTree fit_tree(const Matrix& X, std::span<const int> y, const ForestConfig& cfg) {
  Rng rng(Rng::derive(cfg.seed, 0));
  return fit_tree(X, y, cfg, rng);
}

double Forest::predict_proba(std::span<const double> x) const {
  if (trees.empty()) throw InvalidArgumentError("forest has no trees");
  double s = 0.0;
  for (const auto& t : trees) s += t.predict_proba(x);
  return s / static_cast<double>(trees.size());
}

double Forest::predict_proba(const FeatureVector& x) const {
  if (!x.schema || x.schema->hash() != schema_hash)
    throw SchemaMismatchError("feature schema does not match the schema the forest was trained on");
  return predict_proba(std::span<const double>(x.values));
}

Forest Forest::prefix(int n) const {
  if (n < 1 || static_cast<std::size_t>(n) > trees.size()) throw InvalidArgumentError("Forest::prefix: bad size");
  Forest f;
  f.config = config;
  f.config.n_trees = n;
  f.schema_hash = schema_hash;
  f.trees.assign(trees.begin(), trees.begin() + n);
  return f;
}

Forest fit_forest(const Matrix& X, std::span<const int> y, const ForestConfig& cfg, std::uint64_t schema_hash) {
  cfg.validate();
  check_xy(X, y);
  cfg.resolved_mtry(X.cols());
  Forest forest;
  forest.config = cfg;
  forest.schema_hash = schema_hash;
  forest.trees.resize(static_cast<std::size_t>(cfg.n_trees));
  const std::size_t n = X.rows();
  parallel_for(forest.trees.size(), [&](std::size_t t) {
    Rng rng(Rng::derive(cfg.seed, t));
    std::vector<std::size_t> rows(n);
    if (cfg.bootstrap)
      for (auto& r : rows) r = rng.below(n);
    else
      std::iota(rows.begin(), rows.end(), 0);
    forest.trees[t] = TreeBuilder(X, y, cfg, rng).build(std::move(rows));
  });
  return forest;
}

namespace {

double accuracy_of(const Forest& f, const Matrix& X, std::span<const int> y) {
  std::size_t correct = 0;
  for (std::size_t r = 0; r < X.rows(); ++r) {
    const int pred = f.predict_proba(X.row(r)) >= 0.5 ? 1 : 0;
    correct += pred == (y[r] ? 1 : 0);
  }
  return static_cast<double>(correct) / static_cast<double>(X.rows());
}

}  // namespace

TuneResult tune(const Matrix& X_train, std::span<const int> y_train, const Matrix& X_val,
                std::span<const int> y_val, const std::vector<ForestConfig>& grid, std::uint64_t schema_hash) {
  if (grid.empty()) throw InvalidArgumentError("tune: empty grid");
  check_xy(X_train, y_train);
  check_xy(X_val, y_val);
  if (X_val.cols() != X_train.cols()) throw ShapeMismatchError("tune: train/val feature counts differ");

  // Trees depend only on (seed, index) and the non-size settings, so each
  // group of configs differing in n_trees shares one fit and uses prefixes.
  auto key = [](ForestConfig c) {
    c.n_trees = 0;
    return std::make_tuple(c.max_depth, c.min_samples_leaf, c.mtry, c.bootstrap, c.seed);
  };
  std::map<decltype(key(grid.front())), Forest> fitted;
  for (const auto& c : grid) {
    c.validate();
    auto& f = fitted[key(c)];
    if (f.trees.size() < static_cast<std::size_t>(c.n_trees)) f = fit_forest(X_train, y_train, c, schema_hash);
  }

  TuneResult result;
  int best = -1;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const Forest f = fitted.at(key(grid[i])).prefix(grid[i].n_trees);
    const double acc = accuracy_of(f, X_val, y_val);
    result.grid_accuracy.push_back(acc);
    bool better = best < 0 || acc > result.val_accuracy;
    if (!better && acc == result.val_accuracy) {
      const auto& b = grid[static_cast<std::size_t>(best)];
      better = grid[i].n_trees < b.n_trees || (grid[i].n_trees == b.n_trees && grid[i].max_depth < b.max_depth);
    }
    if (better) {
      best = static_cast<int>(i);
      result.val_accuracy = acc;
      result.config = grid[i];
      result.model = f;
    }
  }
  result.model.config = result.config;
  return result;
}

std::vector<ForestConfig> default_grid(std::uint64_t seed) {
  std::vector<ForestConfig> grid;
  for (int trees : {50, 100, 200})
    for (int depth : {4, 8, 16}) {
      ForestConfig c;
      c.n_trees = trees;
      c.max_depth = depth;
      c.seed = seed;
      grid.push_back(c);
    }
  return grid;
}

std::vector<int> indicator_column(std::span<const TypeFlags> labels, std::size_t type_index) {
  std::vector<int> y(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) y[i] = labels[i][type_index] ? 1 : 0;
  return y;
}

TypeModel::Prediction TypeModel::predict(std::span<const double> x) const {
  Prediction p;
  for (std::size_t t = 0; t < kNumTypes; ++t) {
    p.probability[t] = forests[t].predict_proba(x);
    p.indicator[t] = p.probability[t] >= threshold;
  }
  return p;
}

TypeModel::Prediction TypeModel::predict(const FeatureVector& x) const {
  if (!x.schema || x.schema->hash() != schema_hash)
    throw SchemaMismatchError("feature schema does not match the schema the type model was trained on");
  return predict(std::span<const double>(x.values));
}

TypeModel fit_type_model(const Matrix& X, std::span<const TypeFlags> labels, const ForestConfig& cfg,
                         std::uint64_t schema_hash) {
  TypeModel m;
  m.schema_hash = schema_hash;
  for (std::size_t t = 0; t < kNumTypes; ++t) {
    const auto y = indicator_column(labels, t);
    ForestConfig c = cfg;
    c.seed = Rng::derive(cfg.seed, 1000 + t);
    m.forests[t] = fit_forest(X, y, c, schema_hash);
    m.forests[t].config.seed = c.seed;
  }
  return m;
}

TypeModel tune_type_model(const Matrix& X_train, std::span<const TypeFlags> y_train, const Matrix& X_val,
                          std::span<const TypeFlags> y_val, const std::vector<ForestConfig>& grid,
                          std::uint64_t schema_hash) {
  TypeModel m;
  m.schema_hash = schema_hash;
  for (std::size_t t = 0; t < kNumTypes; ++t) {
    std::vector<ForestConfig> g = grid;
    for (auto& c : g) c.seed = Rng::derive(c.seed, 1000 + t);
    const auto ytr = indicator_column(y_train, t);
    const auto yva = indicator_column(y_val, t);
    m.forests[t] = tune(X_train, ytr, X_val, yva, g, schema_hash).model;
  }
  return m;
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

using ojson = nlohmann::ordered_json;

ojson config_json(const ForestConfig& c) {
  ojson j;
  j["n_trees"] = c.n_trees;
  j["max_depth"] = c.max_depth;
  j["min_samples_leaf"] = c.min_samples_leaf;
  j["mtry"] = c.mtry;
  j["bootstrap"] = c.bootstrap;
  j["seed"] = c.seed;
  return j;
}

ForestConfig config_from(const nlohmann::json& j) {
  ForestConfig c;
  c.n_trees = j.at("n_trees").get<int>();
  c.max_depth = j.at("max_depth").get<int>();
  c.min_samples_leaf = j.at("min_samples_leaf").get<int>();
  c.mtry = j.at("mtry").get<int>();
  c.bootstrap = j.at("bootstrap").get<bool>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.validate();
  return c;
}

ojson node_json(const DecisionTree& t, int id) {
  const TreeNode& n = t.nodes[static_cast<std::size_t>(id)];
  ojson j;
  if (n.is_leaf()) {
    j["leaf"] = {n.count_neg, n.count_pos};
    return j;
  }
  j["feature"] = n.feature;
  j["threshold"] = n.threshold;
  j["counts"] = {n.count_neg, n.count_pos};
  j["left"] = node_json(t, n.left);
  j["right"] = node_json(t, n.right);
  return j;
}

int node_from(const nlohmann::json& j, DecisionTree& t, int depth) {
  if (depth > 10000) throw FormatError("forest: tree too deep");
  const int id = static_cast<int>(t.nodes.size());
  t.nodes.emplace_back();
  if (j.contains("leaf")) {
    const auto& c = j.at("leaf");
    t.nodes[static_cast<std::size_t>(id)].count_neg = c.at(0).get<double>();
    t.nodes[static_cast<std::size_t>(id)].count_pos = c.at(1).get<double>();
    if (t.nodes[static_cast<std::size_t>(id)].count_neg < 0 || t.nodes[static_cast<std::size_t>(id)].count_pos < 0)
      throw FormatError("forest: negative leaf count");
    return id;
  }
  TreeNode n;
  n.feature = j.at("feature").get<int>();
  n.threshold = j.at("threshold").get<double>();
  if (n.feature < 0 || !std::isfinite(n.threshold)) throw FormatError("forest: bad split node");
  n.count_neg = j.at("counts").at(0).get<double>();
  n.count_pos = j.at("counts").at(1).get<double>();
  t.nodes[static_cast<std::size_t>(id)] = n;
  const int l = node_from(j.at("left"), t, depth + 1);
  const int r = node_from(j.at("right"), t, depth + 1);
  t.nodes[static_cast<std::size_t>(id)].left = l;
  t.nodes[static_cast<std::size_t>(id)].right = r;
  return id;
}

}  // namespace

std::string forest_to_json(const Forest& forest) {
  ojson j;
  j["version"] = 1;
  j["schema_hash"] = hex64(forest.schema_hash);
  j["config"] = config_json(forest.config);
  auto trees = ojson::array();
  for (const auto& t : forest.trees) trees.push_back(node_json(t, 0));
  j["trees"] = std::move(trees);
  return j.dump() + "\n";
}

Forest forest_from_json(const std::string& text) {
  Forest f;
  try {
    const auto j = nlohmann::json::parse(text);
    if (j.at("version").get<int>() != 1) throw FormatError("forest: unsupported version");
    f.schema_hash = std::stoull(j.at("schema_hash").get<std::string>(), nullptr, 16);
    f.config = config_from(j.at("config"));
    for (const auto& t : j.at("trees")) {
      DecisionTree tree;
      node_from(t, tree, 0);
      f.trees.push_back(std::move(tree));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("forest: ") + e.what());
  } catch (const std::logic_error& e) {
    throw FormatError(std::string("forest: ") + e.what());
  }
  if (f.trees.empty()) throw FormatError("forest: no trees");
  return f;
}

void save_forest(const std::filesystem::path& path, const Forest& forest) { write_file(path, forest_to_json(forest)); }

Forest load_forest(const std::filesystem::path& path) {
  try {
    return forest_from_json(read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void save_type_model(const std::filesystem::path& dir, const TypeModel& model) {
  ojson idx;
  idx["version"] = 1;
  idx["schema_hash"] = hex64(model.schema_hash);
  idx["threshold"] = model.threshold;
  ojson files = ojson::object();
  for (CatheterType t : kAllTypes) {
    const std::string name = std::string(to_string(t)) + ".json";
    save_forest(dir / name, model.forests[index_of(t)]);
    files[std::string(to_string(t))] = name;
  }
  idx["forests"] = std::move(files);
  write_file(dir / "index.json", idx.dump(2) + "\n");
}

TypeModel load_type_model(const std::filesystem::path& dir) {
  const auto index_path = dir / "index.json";
  if (!std::filesystem::exists(index_path)) throw MissingFileError("type model index not found: " + index_path.string());
  TypeModel m;
  try {
    const auto j = nlohmann::json::parse(read_file(index_path));
    m.schema_hash = std::stoull(j.at("schema_hash").get<std::string>(), nullptr, 16);
    m.threshold = j.at("threshold").get<double>();
    for (CatheterType t : kAllTypes) {
      const auto file = dir / j.at("forests").at(std::string(to_string(t))).get<std::string>();
      m.forests[index_of(t)] = load_forest(file);
      if (m.forests[index_of(t)].schema_hash != m.schema_hash)
        throw SchemaMismatchError(file.string() + ": schema hash differs from index");
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(index_path.string() + ": " + e.what());
  }
  return m;
}

}  // namespace cvc
