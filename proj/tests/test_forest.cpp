#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <json.hpp>

#include "cvc/forest.hpp"
#include "cvc/image_io.hpp"
#include "support.hpp"

using namespace cvc;
using testing_support::TempDir;

namespace {

struct Data {
  Matrix X;
  std::vector<int> y;
};

Data blobs(std::size_t n, double separation, std::uint64_t seed, std::size_t extra_cols = 0) {
  Rng rng(seed);
  Data d{Matrix(n, 2 + extra_cols), {}};
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % 2);
    d.X(i, 0) = rng.normal() + (label ? separation : 0.0);
    d.X(i, 1) = rng.normal();
    for (std::size_t c = 0; c < extra_cols; ++c) d.X(i, 2 + c) = rng.normal();
    d.y.push_back(label);
  }
  return d;
}

Data xor_data(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Data d{Matrix(n, 2), {}};
  for (std::size_t i = 0; i < n; ++i) {
    d.X(i, 0) = rng.uniform(-1, 1);
    d.X(i, 1) = rng.uniform(-1, 1);
    d.y.push_back((d.X(i, 0) > 0) != (d.X(i, 1) > 0));
  }
  return d;
}

double split_cost(const Data& d, int feature, double thr) {
  double l[2] = {0, 0}, r[2] = {0, 0};
  for (std::size_t i = 0; i < d.y.size(); ++i) (d.X(i, static_cast<std::size_t>(feature)) <= thr ? l : r)[d.y[i]] += 1;
  auto cost = [](double* c) {
    const double n = c[0] + c[1];
    return n > 0 ? n * (1 - (c[0] / n) * (c[0] / n) - (c[1] / n) * (c[1] / n)) : 0.0;
  };
  return cost(l) + cost(r);
}

double best_stump_cost(const Data& d) {
  double best = 1e300;
  for (std::size_t f = 0; f < d.X.cols(); ++f) {
    std::vector<double> v;
    for (std::size_t i = 0; i < d.X.rows(); ++i) v.push_back(d.X(i, f));
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
    for (std::size_t k = 0; k + 1 < v.size(); ++k)
      best = std::min(best, split_cost(d, static_cast<int>(f), 0.5 * (v[k] + v[k + 1])));
  }
  return best;
}

double accuracy(const Forest& f, const Data& d) {
  int ok = 0;
  for (std::size_t i = 0; i < d.y.size(); ++i) ok += (f.predict_proba(d.X.row(i)) >= 0.5) == (d.y[i] == 1);
  return static_cast<double>(ok) / static_cast<double>(d.y.size());
}

}  // namespace

TEST(Tree, PureLabelsGiveOneLeaf) {
  const Data d = blobs(20, 3, 1);
  const std::vector<int> ones(20, 1);
  const auto t = fit_tree(d.X, ones, ForestConfig{});
  ASSERT_EQ(t.nodes.size(), 1u);
  EXPECT_EQ(t.predict_proba(d.X.row(0)), 1.0);
}

TEST(Tree, OneDimensionalSplit) {
  const Matrix X = Matrix::from_rows({{0}, {1}, {2}, {3}});
  const std::vector<int> y{0, 0, 1, 1};
  ForestConfig c;
  c.mtry = 1;
  c.max_depth = 1;
  const auto t = fit_tree(X, y, c);
  ASSERT_EQ(t.nodes.size(), 3u);
  EXPECT_GT(t.nodes[0].threshold, 1.0);
  EXPECT_LT(t.nodes[0].threshold, 2.0);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(t.predict_proba(X.row(i)), static_cast<double>(y[i]));
}

TEST(Tree, StumpMatchesExhaustiveSearch) {
  ForestConfig c;
  c.max_depth = 1;
  c.mtry = 2;
  for (std::uint64_t s = 0; s < 60; ++s) {
    Rng rng(8 + s);
    Data d{Matrix(40, 2), {}};
    for (std::size_t i = 0; i < 40; ++i) {
      d.X(i, 0) = std::round(rng.uniform(0, 10));
      d.X(i, 1) = rng.uniform();
      d.y.push_back(rng.bernoulli(0.3 + 0.05 * d.X(i, 0)));
    }
    if (std::count(d.y.begin(), d.y.end(), 1) == 0) continue;
    c.seed = s;
    const auto t = fit_tree(d.X, d.y, c);
    ASSERT_FALSE(t.nodes[0].is_leaf());
    EXPECT_NEAR(split_cost(d, t.nodes[0].feature, t.nodes[0].threshold), best_stump_cost(d), 1e-9) << s;
  }
}

TEST(Tree, MonotoneTransformKeepsDecisions) {
  const Data d = blobs(120, 1.0, 4, 3);
  Data t = d;
  for (std::size_t i = 0; i < t.X.rows(); ++i) {
    t.X(i, 0) = std::exp(t.X(i, 0));
    t.X(i, 2) = t.X(i, 2) * t.X(i, 2) * t.X(i, 2) + 4 * t.X(i, 2);
  }
  // Without bootstrap every row is a training row for every tree, so it
  // lies on the same side of both midpoints.
  ForestConfig c;
  c.n_trees = 15;
  c.bootstrap = false;
  const auto a = fit_forest(d.X, d.y, c);
  const auto b = fit_forest(t.X, t.y, c);
  for (std::size_t i = 0; i < d.X.rows(); ++i) EXPECT_EQ(a.predict_proba(d.X.row(i)), b.predict_proba(t.X.row(i)));
}

TEST(Tree, RespectsDepthAndLeafSize) {
  const Data d = xor_data(300, 2);
  ForestConfig c;
  c.max_depth = 3;
  c.min_samples_leaf = 10;
  c.mtry = 2;
  const auto t = fit_tree(d.X, d.y, c);
  EXPECT_LE(t.depth(), 3);
  for (const auto& n : t.nodes)
    if (n.is_leaf()) EXPECT_GE(n.count_neg + n.count_pos, 10.0);
}

TEST(Tree, LabelCountMismatch) {
  const Data d = blobs(10, 1, 1);
  EXPECT_THROW(fit_tree(d.X, std::vector<int>(9, 0), ForestConfig{}), InvalidArgumentError);
  ForestConfig c;
  c.mtry = 5;
  EXPECT_THROW(fit_tree(d.X, d.y, c), ConfigError);
}

TEST(Forest, SingleTreeWithoutBootstrapEqualsFitTree) {
  const Data d = blobs(60, 1.5, 3, 4);
  ForestConfig c;
  c.n_trees = 1;
  c.bootstrap = false;
  EXPECT_EQ(fit_forest(d.X, d.y, c).trees.at(0), fit_tree(d.X, d.y, c));
}

TEST(Forest, DeterministicAcrossThreadCounts) {
  const Data d = blobs(100, 1.0, 5, 6);
  ForestConfig c;
  c.n_trees = 20;
  ::setenv("CVCPIPE_THREADS", "1", 1);
  const auto a = fit_forest(d.X, d.y, c);
  ::setenv("CVCPIPE_THREADS", "4", 1);
  const auto b = fit_forest(d.X, d.y, c);
  ::unsetenv("CVCPIPE_THREADS");
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.prefix(7).trees, std::vector<DecisionTree>(b.trees.begin(), b.trees.begin() + 7));
}

TEST(Forest, SeparatedBlobs) {
  const Data train = blobs(200, 6, 10), test = blobs(200, 6, 11);
  ForestConfig c;
  const auto f = fit_forest(train.X, train.y, c);
  EXPECT_GE(accuracy(f, test), 0.99);
  double pos = 0, neg = 0;
  for (std::size_t i = 0; i < train.y.size(); ++i) (train.y[i] ? pos : neg) += f.predict_proba(train.X.row(i));
  EXPECT_GT(pos, neg);
}

TEST(Forest, AveragesLeafFractions) {
  Forest f;
  DecisionTree a, b;
  a.nodes.push_back({-1, 0, -1, -1, 8, 2});
  b.nodes.push_back({-1, 0, -1, -1, 4, 6});
  f.trees = {a, b};
  const std::vector<double> x{0.0};
  EXPECT_NEAR(f.predict_proba(x), 0.4, 1e-15);
  Forest pure;
  DecisionTree p;
  p.nodes.push_back({-1, 0, -1, -1, 0, 3});
  pure.trees = {p};
  EXPECT_EQ(pure.predict_proba(x), 1.0);
}

TEST(Forest, MoreTreesReduceVarianceAcrossSeeds) {
  const Data d = blobs(80, 1.0, 12, 3);
  const Data probe = blobs(20, 1.0, 13, 3);
  auto spread = [&](int n_trees) {
    double total = 0;
    for (std::size_t i = 0; i < probe.X.rows(); ++i) {
      double s = 0, s2 = 0;
      for (std::uint64_t seed = 0; seed < 12; ++seed) {
        ForestConfig c;
        c.n_trees = n_trees;
        c.seed = seed;
        const double p = fit_forest(d.X, d.y, c).predict_proba(probe.X.row(i));
        s += p;
        s2 += p * p;
      }
      total += s2 / 12 - (s / 12) * (s / 12);
    }
    return total;
  };
  EXPECT_LT(spread(40), spread(3));
}

TEST(Forest, SchemaHashChecked) {
  const Data d = blobs(20, 3, 1);
  const auto f = fit_forest(d.X, d.y, ForestConfig{}, 77);
  FeatureVector fv;
  fv.values = {0.0, 0.0};
  auto schema = std::make_shared<FeatureSchema>();
  schema->names = {"a", "b"};
  fv.schema = schema;
  EXPECT_THROW(f.predict_proba(fv), SchemaMismatchError);
}

TEST(Tune, SingleConfigAndXor) {
  const Data tr = xor_data(400, 1), va = xor_data(200, 2);
  ForestConfig shallow, deep;
  shallow.max_depth = 1;
  shallow.n_trees = 20;
  deep.max_depth = 8;
  deep.n_trees = 20;
  EXPECT_EQ(tune(tr.X, tr.y, va.X, va.y, {deep}).config, deep);
  const auto r = tune(tr.X, tr.y, va.X, va.y, {shallow, deep});
  EXPECT_EQ(r.config.max_depth, 8);
  EXPECT_EQ(r.grid_accuracy.size(), 2u);
  EXPECT_GT(r.val_accuracy, 0.9);
  EXPECT_THROW(tune(tr.X, tr.y, va.X, va.y, {}), InvalidArgumentError);
}

TEST(Tune, TiesPreferFewerTreesThenShallower) {
  const Data tr = blobs(100, 8, 1), va = blobs(50, 8, 2);
  std::vector<ForestConfig> grid(4);
  grid[0].n_trees = 10, grid[0].max_depth = 4;
  grid[1].n_trees = 5, grid[1].max_depth = 4;
  grid[2].n_trees = 5, grid[2].max_depth = 2;
  grid[3].n_trees = 5, grid[3].max_depth = 2;
  const auto r = tune(tr.X, tr.y, va.X, va.y, grid);
  for (double a : r.grid_accuracy) ASSERT_EQ(a, 1.0);
  EXPECT_EQ(r.config, grid[2]);
  EXPECT_EQ(r.model, fit_forest(tr.X, tr.y, grid[2]));
}

TEST(Tune, DefaultGrid) {
  const auto g = default_grid();
  EXPECT_EQ(g.size(), 9u);
  for (const auto& c : g) EXPECT_EQ(c.mtry, 0);
}

TEST(TypeModel, MultipleIndicatorsFireOnNearDuplicate) {
  Rng rng(3);
  const std::size_t n = 200;
  Matrix X(n, 4);
  std::vector<TypeFlags> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int cluster = static_cast<int>(i % 4);
    for (std::size_t c = 0; c < 4; ++c) X(i, c) = 0.1 * rng.normal() + (static_cast<int>(c) == cluster ? 3.0 : 0.0);
    if (cluster == 0) y[i] = {1, 0, 0, 0};
    if (cluster == 1) y[i] = {0, 1, 0, 0};
    if (cluster == 2) y[i] = {1, 1, 0, 0};
    if (cluster == 3) y[i] = {0, 0, 1, 0};
  }
  ForestConfig c;
  c.n_trees = 30;
  const auto m = fit_type_model(X, y, c);
  std::vector<double> probe(X.row(2).begin(), X.row(2).end());
  for (double& v : probe) v += 0.01;
  const auto p = m.predict(probe);
  EXPECT_TRUE(p.indicator[0]);
  EXPECT_TRUE(p.indicator[1]);
  EXPECT_FALSE(p.indicator[2]);
  EXPECT_FALSE(p.indicator[3]);
  EXPECT_EQ(p.probability[3], 0.0);
  EXPECT_EQ(indicator_column(y, 1)[2], 1);
}

TEST(TypeModel, SaveLoadAndSchemaChecks) {
  TempDir dir("type");
  const Data d = blobs(40, 2, 1);
  std::vector<TypeFlags> y(40);
  for (std::size_t i = 0; i < 40; ++i) y[i] = {d.y[i], 1 - d.y[i], 0, d.y[i]};
  ForestConfig c;
  c.n_trees = 5;
  const auto m = fit_type_model(d.X, y, c, 0xabc);
  save_type_model(dir.path(), m);
  for (const char* f : {"PICC.json", "IJ.json", "SUBCLAVIAN.json", "SWAN_GANZ.json", "index.json"})
    EXPECT_TRUE(std::filesystem::exists(dir.path() / f)) << f;
  EXPECT_EQ(load_type_model(dir.path()), m);

  auto j = nlohmann::json::parse(read_file(dir.path() / "IJ.json"));
  j["schema_hash"] = "123";
  write_file(dir.path() / "IJ.json", j.dump());
  EXPECT_THROW(load_type_model(dir.path()), SchemaMismatchError);
  EXPECT_THROW(load_type_model(dir.path() / "nowhere"), MissingFileError);
}

TEST(Serialization, ForestJsonRoundTripIsExact) {
  const Data d = blobs(50, 1, 6, 2);
  ForestConfig c;
  c.n_trees = 7;
  const auto f = fit_forest(d.X, d.y, c, 0xdeadbeef);
  const auto back = forest_from_json(forest_to_json(f));
  EXPECT_EQ(back, f);
  EXPECT_NE(forest_to_json(f).find("\"leaf\""), std::string::npos);
  TempDir dir("forest");
  save_forest(dir.path() / "f.json", f);
  EXPECT_EQ(load_forest(dir.path() / "f.json"), f);
  EXPECT_THROW(forest_from_json("{\"version\":2}"), FormatError);
  EXPECT_THROW(forest_from_json("[1,2"), FormatError);
  EXPECT_THROW(load_forest(dir.path() / "missing.json"), MissingFileError);
}
