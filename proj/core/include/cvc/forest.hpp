#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cvc/features.hpp"
#include "cvc/labels.hpp"

namespace cvc {

/// Dense row-major feature matrix.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}
  static Matrix from_rows(const std::vector<std::vector<double>>& rows);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }
  std::span<const double> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }
  /// Subset of rows in the given order.
  Matrix select(std::span<const std::size_t> idx) const;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

struct ForestConfig {
  int n_trees = 100;
  int max_depth = 8;
  int min_samples_leaf = 1;
  /// Features sampled per split; 0 means floor(sqrt(n_features)).
  int mtry = 0;
  bool bootstrap = true;
  std::uint64_t seed = 1;

  void validate() const;
  int resolved_mtry(std::size_t n_features) const;
  friend bool operator==(const ForestConfig&, const ForestConfig&) = default;
};

/// Split node (feature >= 0) or leaf (feature == -1). Samples with
/// x[feature] <= threshold go left.
struct TreeNode {
  int feature = -1;
  double threshold = 0.0;
  int left = -1;
  int right = -1;
  double count_neg = 0.0;
  double count_pos = 0.0;

  bool is_leaf() const noexcept { return feature < 0; }
  double positive_fraction() const noexcept {
    const double n = count_neg + count_pos;
    return n > 0.0 ? count_pos / n : 0.0;
  }
  friend bool operator==(const TreeNode&, const TreeNode&) = default;
};

/// Node 0 is the root; children always follow their parent.
struct DecisionTree {
  std::vector<TreeNode> nodes;

  const TreeNode& leaf_for(std::span<const double> x) const;
  double predict_proba(std::span<const double> x) const { return leaf_for(x).positive_fraction(); }
  int depth() const;
  friend bool operator==(const DecisionTree&, const DecisionTree&) = default;
};

/// CART with Gini impurity on `rows` of X (duplicates allowed, as produced
/// by bootstrapping). Thresholds are midpoints between consecutive distinct
/// values. Throws InvalidArgumentError when labels and rows disagree.
DecisionTree fit_tree(const Matrix& X, std::span<const int> y, const ForestConfig& cfg, Rng& rng,
                      std::span<const std::size_t> rows = {});

/// Convenience overload: all rows, rng seeded from cfg.seed.
DecisionTree fit_tree(const Matrix& X, std::span<const int> y, const ForestConfig& cfg);

struct Forest {
  ForestConfig config;
  std::uint64_t schema_hash = 0;
  std::vector<DecisionTree> trees;

  double predict_proba(std::span<const double> x) const;
  /// Checks the schema hash before predicting.
  double predict_proba(const FeatureVector& x) const;
  /// Forest made of the first n trees (trees are independent of n_trees).
  Forest prefix(int n) const;
  friend bool operator==(const Forest&, const Forest&) = default;
};

/// Tree i is fit with an rng seeded from (seed, i) on its own bootstrap
/// sample, so results do not depend on thread scheduling.
Forest fit_forest(const Matrix& X, std::span<const int> y, const ForestConfig& cfg,
                  std::uint64_t schema_hash = 0);

struct TuneResult {
  ForestConfig config;
  Forest model;
  double val_accuracy = 0.0;
  std::vector<double> grid_accuracy;
};

/// Fits every grid entry on train, keeps the best validation accuracy;
/// ties go to fewer trees, then shallower depth, then grid order.
TuneResult tune(const Matrix& X_train, std::span<const int> y_train, const Matrix& X_val,
                std::span<const int> y_val, const std::vector<ForestConfig>& grid,
                std::uint64_t schema_hash = 0);

/// n_trees in {50,100,200} x max_depth in {4,8,16}, mtry sqrt(n_features).
std::vector<ForestConfig> default_grid(std::uint64_t seed = 1);

using TypeFlags = std::array<int, kNumTypes>;

/// One-vs-rest forests, one per catheter type indicator.
struct TypeModel {
  std::uint64_t schema_hash = 0;
  double threshold = 0.5;
  std::array<Forest, kNumTypes> forests;

  struct Prediction {
    std::array<double, kNumTypes> probability{};
    std::array<bool, kNumTypes> indicator{};
  };
  Prediction predict(std::span<const double> x) const;
  Prediction predict(const FeatureVector& x) const;
  friend bool operator==(const TypeModel&, const TypeModel&) = default;
};

TypeModel fit_type_model(const Matrix& X, std::span<const TypeFlags> labels, const ForestConfig& cfg,
                         std::uint64_t schema_hash = 0);
/// Tunes each indicator's forest independently on the validation split.
TypeModel tune_type_model(const Matrix& X_train, std::span<const TypeFlags> y_train, const Matrix& X_val,
                          std::span<const TypeFlags> y_val, const std::vector<ForestConfig>& grid,
                          std::uint64_t schema_hash = 0);

std::vector<int> indicator_column(std::span<const TypeFlags> labels, std::size_t type_index);

/// JSON {version, schema_hash, config, trees:[nested nodes]}.
std::string forest_to_json(const Forest& forest);
Forest forest_from_json(const std::string& text);
void save_forest(const std::filesystem::path& path, const Forest& forest);
Forest load_forest(const std::filesystem::path& path);
/// Directory with one forest file per indicator plus index.json.
void save_type_model(const std::filesystem::path& dir, const TypeModel& model);
TypeModel load_type_model(const std::filesystem::path& dir);

}  // namespace cvc
