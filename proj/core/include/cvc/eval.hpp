#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cvc/forest.hpp"
#include "cvc/raster.hpp"

namespace cvc {

struct BinaryMetrics {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  double precision = 0.0;
  double recall = 0.0;
  double accuracy = 0.0;
  double f1 = 0.0;
  /// Set when the denominator was zero and the value was defined as 0.
  bool precision_undefined = false;
  bool recall_undefined = false;
};

/// Labels and predictions are 0/1 (any nonzero counts as positive).
BinaryMetrics binary_metrics(std::span<const int> y_true, std::span<const int> y_pred);

/// Mann-Whitney statistic with ties counted as one half. Throws
/// InvalidArgumentError unless both classes are present.
double roc_auc(std::span<const int> y_true, std::span<const double> scores);

/// sum(v_c * s_c) / sum(s_c).
double weighted_average(std::span<const double> values, std::span<const double> supports);

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
};
/// Curve from (0,0) to (1,1), one point per distinct score.
std::vector<RocPoint> roc_curve(std::span<const int> y_true, std::span<const double> scores);
std::string roc_svg(const std::vector<RocPoint>& curve, const std::string& title, double auc);

struct ClassMetrics {
  std::string name;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double support = 0.0;
};

struct MetricsReport {
  std::string task;
  int fold = -1;
  std::vector<ClassMetrics> classes;
  /// Headline numbers: the positive class for presence, support-weighted
  /// averages over indicators for type.
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double accuracy = 0.0;
  double auc = 0.0;
  std::size_t n_test = 0;
};

struct Fold {
  std::vector<std::size_t> train, val, test;
};

struct FoldPlan {
  std::uint64_t seed = 0;
  std::vector<Fold> folds;
  std::vector<std::string> warnings;
};

inline constexpr int kNumFolds = 5;

/// Stratified 5-fold plan with a 60-20-20 split per fold. Indices are
/// shuffled within each stratum and dealt round-robin into five groups;
/// fold k tests on group k, validates on group k+1 and trains on the rest.
/// Strata with fewer than five members are pooled (with a warning).
FoldPlan make_folds(std::span<const int> strata, std::uint64_t seed);
/// Unstratified plan for n items.
FoldPlan make_folds(std::size_t n, std::uint64_t seed);

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
};
MeanStd mean_std(std::span<const double> v);

struct CvReport {
  std::string task;
  std::vector<MetricsReport> folds;
  MeanStd precision, recall, f1, accuracy, auc;
  std::vector<std::string> warnings;
  std::vector<ForestConfig> chosen;
  /// Pooled out-of-fold scores for ROC plotting; for the type task every
  /// (image, indicator) pair is one entry.
  std::vector<int> roc_labels;
  std::vector<double> roc_scores;
};

struct CvOptions {
  std::vector<ForestConfig> grid = default_grid();
  std::uint64_t fold_seed = 1;
  std::uint64_t schema_hash = 0;
};

/// Presence task: binary forest tuned on each fold's validation split.
CvReport run_presence_cv(const Matrix& X, std::span<const int> y, const CvOptions& opt);

/// Type task: one-vs-rest forests; accuracy is exact match of all four
/// indicators; AUC is the support-weighted mean of per-indicator AUCs.
CvReport run_type_cv(const Matrix& X, std::span<const TypeFlags> y, std::span<const int> strata,
                     const CvOptions& opt);

std::string cv_report_json(const CvReport& report);
CvReport cv_report_from_json(const std::string& text);
/// Text table with metrics x100 as "mean ± std".
std::string cv_report_table(const CvReport& report);

struct OverlapTable {
  std::vector<int> radii;
  std::vector<double> thresholds;
  /// fraction[r][t]: share of cases with overlap_fraction > thresholds[t]
  /// after dilating the truth by radii[r].
  std::vector<std::vector<double>> fraction;
  std::size_t n_cases = 0;
};

OverlapTable seg_overlap_report(const std::vector<std::pair<BinaryMask, BinaryMask>>& pairs,
                                const std::vector<int>& radii = {2, 5},
                                const std::vector<double>& thresholds = {0.5, 0.4});

std::string overlap_table_json(const OverlapTable& table);
std::string overlap_table_text(const OverlapTable& table);

/// Rounds to 4 decimal places, the precision of every report number.
double round4(double v);

}  // namespace cvc
