#include "cvc/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iomanip>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "config_json.hpp"

namespace cvc {

namespace {

void require_lengths(std::size_t a, std::size_t b, const char* what) {
  if (a != b)
    throw InvalidArgumentError(std::string(what) + ": length mismatch (" + std::to_string(a) + " vs " +
                               std::to_string(b) + ")");
  if (a == 0) throw InvalidArgumentError(std::string(what) + ": empty input");
}

double ratio(std::size_t num, std::size_t den, bool& undefined) {
  undefined = den == 0;
  return undefined ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

}  // namespace

double round4(double v) { return std::isfinite(v) ? std::round(v * 1e4) / 1e4 : v; }

BinaryMetrics binary_metrics(std::span<const int> y_true, std::span<const int> y_pred) {
  require_lengths(y_true.size(), y_pred.size(), "binary_metrics");
  BinaryMetrics m;
  for (std::size_t i = 0; i < y_true.size(); ++i) {
    const bool t = y_true[i] != 0;
    const bool p = y_pred[i] != 0;
    if (t && p) ++m.tp;
    else if (!t && p) ++m.fp;
    else if (t && !p) ++m.fn;
    else ++m.tn;
  }
  m.precision = ratio(m.tp, m.tp + m.fp, m.precision_undefined);
  m.recall = ratio(m.tp, m.tp + m.fn, m.recall_undefined);
  m.accuracy = static_cast<double>(m.tp + m.tn) / static_cast<double>(y_true.size());
  m.f1 = m.precision + m.recall > 0.0 ? 2.0 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
  return m;
}

double roc_auc(std::span<const int> y_true, std::span<const double> scores) {
  require_lengths(y_true.size(), scores.size(), "roc_auc");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    // Ranks i+1..j share their average.
    const double avg = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k)
      if (y_true[order[k]]) {
        rank_sum += avg;
        ++n_pos;
      }
    i = j;
  }
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) throw InvalidArgumentError("roc_auc: undefined with a single class");
  const double u = rank_sum - 0.5 * static_cast<double>(n_pos) * static_cast<double>(n_pos + 1);
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

double weighted_average(std::span<const double> values, std::span<const double> supports) {
  require_lengths(values.size(), supports.size(), "weighted_average");
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!(supports[i] >= 0.0)) throw InvalidArgumentError("weighted_average: negative support");
    num += values[i] * supports[i];
    den += supports[i];
  }
  if (den == 0.0) throw InvalidArgumentError("weighted_average: all supports are zero");
  return num / den;
}

std::vector<RocPoint> roc_curve(std::span<const int> y_true, std::span<const double> scores) {
  require_lengths(y_true.size(), scores.size(), "roc_curve");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double P = 0, N = 0;
  for (int y : y_true) (y ? P : N) += 1.0;
  if (P == 0 || N == 0) throw InvalidArgumentError("roc_curve: undefined with a single class");
  std::vector<RocPoint> curve{{0.0, 0.0}};
  double tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size(); ++i) {
    (y_true[order[i]] ? tp : fp) += 1.0;
    if (i + 1 == order.size() || scores[order[i + 1]] != scores[order[i]]) curve.push_back({fp / N, tp / P});
  }
  return curve;
}

std::string roc_svg(const std::vector<RocPoint>& curve, const std::string& title, double auc) {
  constexpr double size = 300.0, pad = 40.0;
  std::ostringstream s;
  s.setf(std::ios::fixed);
  s.precision(2);
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size + 2 * pad << "\" height=\"" << size + 2 * pad
    << "\">\n";
  s << "<rect x=\"" << pad << "\" y=\"" << pad << "\" width=\"" << size << "\" height=\"" << size
    << "\" fill=\"white\" stroke=\"black\"/>\n";
  s << "<line x1=\"" << pad << "\" y1=\"" << pad + size << "\" x2=\"" << pad + size << "\" y2=\"" << pad
    << "\" stroke=\"#bbb\" stroke-dasharray=\"4,4\"/>\n";
  s << "<polyline fill=\"none\" stroke=\"#c0392b\" stroke-width=\"2\" points=\"";
  for (const auto& p : curve) s << pad + p.fpr * size << "," << pad + (1.0 - p.tpr) * size << " ";
  s << "\"/>\n";
  s << "<text x=\"" << pad << "\" y=\"" << pad - 12 << "\" font-family=\"sans-serif\" font-size=\"14\">" << title
    << " (AUC " << std::setprecision(4) << auc << ")</text>\n";
  s << "<text x=\"" << pad + size / 2 - 60 << "\" y=\"" << size + pad + 28
    << "\" font-family=\"sans-serif\" font-size=\"12\">false positive rate</text>\n";
  s << "<text x=\"12\" y=\"" << pad + size / 2 + 40 << "\" font-family=\"sans-serif\" font-size=\"12\" transform=\"rotate(-90 12 "
    << pad + size / 2 + 40 << ")\">true positive rate</text>\n";
  s << "</svg>\n";
  return s.str();
}

// ---------------------------------------------------------------------------
// Folds

FoldPlan make_folds(std::span<const int> strata, std::uint64_t seed) {
  const std::size_t n = strata.size();
  if (n < static_cast<std::size_t>(kNumFolds))
    throw InvalidArgumentError("make_folds: need at least 5 items, got " + std::to_string(n));
  FoldPlan plan;
  plan.seed = seed;

  std::map<int, std::vector<std::size_t>> by_stratum;
  for (std::size_t i = 0; i < n; ++i) by_stratum[strata[i]].push_back(i);
  std::vector<std::pair<std::uint64_t, std::vector<std::size_t>>> buckets;
  std::vector<std::size_t> pooled;
  for (auto& [s, idx] : by_stratum) {
    if (idx.size() < static_cast<std::size_t>(kNumFolds)) {
      plan.warnings.push_back("stratum " + std::to_string(s) + " has " + std::to_string(idx.size()) +
                              " members; assigned without stratification");
      pooled.insert(pooled.end(), idx.begin(), idx.end());
    } else {
      buckets.emplace_back(static_cast<std::uint64_t>(static_cast<std::int64_t>(s)) + 1, std::move(idx));
    }
  }
  if (!pooled.empty()) {
    std::sort(pooled.begin(), pooled.end());
    buckets.emplace_back(0, std::move(pooled));
  }

  std::vector<std::vector<std::size_t>> groups(kNumFolds);
  std::size_t offset = 0;
  for (auto& [key, idx] : buckets) {
    Rng rng(Rng::derive(seed, key));
    for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
    for (std::size_t i = 0; i < idx.size(); ++i) groups[(offset + i) % kNumFolds].push_back(idx[i]);
    offset += idx.size();
  }
  for (auto& g : groups) std::sort(g.begin(), g.end());

  for (int k = 0; k < kNumFolds; ++k) {
    Fold f;
    f.test = groups[static_cast<std::size_t>(k)];
    f.val = groups[static_cast<std::size_t>((k + 1) % kNumFolds)];
    for (int g = 0; g < kNumFolds; ++g)
      if (g != k && g != (k + 1) % kNumFolds)
        f.train.insert(f.train.end(), groups[static_cast<std::size_t>(g)].begin(), groups[static_cast<std::size_t>(g)].end());
    std::sort(f.train.begin(), f.train.end());
    plan.folds.push_back(std::move(f));
  }
  return plan;
}

FoldPlan make_folds(std::size_t n, std::uint64_t seed) {
  const std::vector<int> strata(n, 0);
  return make_folds(strata, seed);
}

MeanStd mean_std(std::span<const double> v) {
  std::vector<double> x;
  for (double d : v)
    if (std::isfinite(d)) x.push_back(d);
  if (x.empty()) return {kNaN, kNaN};
  MeanStd r;
  r.mean = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
  if (x.size() > 1) {
    double ss = 0.0;
    for (double d : x) ss += (d - r.mean) * (d - r.mean);
    r.std = std::sqrt(ss / static_cast<double>(x.size() - 1));
  }
  return r;
}

// ---------------------------------------------------------------------------
// Cross-validation

namespace {

template <class T>
std::vector<T> pick(std::span<const T> v, const std::vector<std::size_t>& idx) {
  std::vector<T> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(v[i]);
  return out;
}

void summarize(CvReport& r) {
  auto collect = [&](double MetricsReport::*field) {
    std::vector<double> v;
    for (const auto& f : r.folds) v.push_back(f.*field);
    return mean_std(v);
  };
  r.precision = collect(&MetricsReport::precision);
  r.recall = collect(&MetricsReport::recall);
  r.f1 = collect(&MetricsReport::f1);
  r.accuracy = collect(&MetricsReport::accuracy);
  r.auc = collect(&MetricsReport::auc);
}

ClassMetrics class_metrics(const std::string& name, const BinaryMetrics& m) {
  return {name, m.precision, m.recall, m.f1, static_cast<double>(m.tp + m.fn)};
}

}  // namespace

CvReport run_presence_cv(const Matrix& X, std::span<const int> y, const CvOptions& opt) {
  if (X.rows() != y.size()) throw InvalidArgumentError("run_presence_cv: rows and labels differ");
  CvReport report;
  report.task = "presence";
  const FoldPlan plan = make_folds(y, opt.fold_seed);
  report.warnings = plan.warnings;

  for (int k = 0; k < kNumFolds; ++k) {
    const Fold& fold = plan.folds[static_cast<std::size_t>(k)];
    const auto ytr = pick(y, fold.train);
    const auto yva = pick(y, fold.val);
    const auto yte = pick(y, fold.test);
    const TuneResult tuned = tune(X.select(fold.train), ytr, X.select(fold.val), yva, opt.grid, opt.schema_hash);
    report.chosen.push_back(tuned.config);

    std::vector<double> scores;
    std::vector<int> pred, neg_true, neg_pred;
    for (std::size_t i : fold.test) {
      const double p = tuned.model.predict_proba(X.row(i));
      scores.push_back(p);
      pred.push_back(p >= 0.5 ? 1 : 0);
    }
    for (std::size_t i = 0; i < yte.size(); ++i) {
      neg_true.push_back(yte[i] ? 0 : 1);
      neg_pred.push_back(pred[i] ? 0 : 1);
    }
    const BinaryMetrics pos = binary_metrics(yte, pred);
    const BinaryMetrics neg = binary_metrics(neg_true, neg_pred);

    MetricsReport m;
    m.task = report.task;
    m.fold = k;
    m.n_test = yte.size();
    m.classes = {class_metrics("NO_CVC", neg), class_metrics("CVC", pos)};
    m.precision = pos.precision;
    m.recall = pos.recall;
    m.f1 = pos.f1;
    m.accuracy = pos.accuracy;
    try {
      m.auc = roc_auc(yte, scores);
    } catch (const InvalidArgumentError&) {
      m.auc = kNaN;
      report.warnings.push_back("fold " + std::to_string(k) + ": AUC undefined (single-class test set)");
    }
    report.folds.push_back(std::move(m));
    report.roc_labels.insert(report.roc_labels.end(), yte.begin(), yte.end());
    report.roc_scores.insert(report.roc_scores.end(), scores.begin(), scores.end());
  }
  summarize(report);
  return report;
}

CvReport run_type_cv(const Matrix& X, std::span<const TypeFlags> y, std::span<const int> strata,
                     const CvOptions& opt) {
  if (X.rows() != y.size() || strata.size() != y.size())
    throw InvalidArgumentError("run_type_cv: rows, labels and strata differ in length");
  CvReport report;
  report.task = "type";
  const FoldPlan plan = make_folds(strata, opt.fold_seed);
  report.warnings = plan.warnings;

  for (int k = 0; k < kNumFolds; ++k) {
    const Fold& fold = plan.folds[static_cast<std::size_t>(k)];
    const auto ytr = pick(y, fold.train);
    const auto yva = pick(y, fold.val);
    const auto yte = pick(y, fold.test);
    const TypeModel model =
        tune_type_model(X.select(fold.train), ytr, X.select(fold.val), yva, opt.grid, opt.schema_hash);
    report.chosen.push_back(model.forests[0].config);

    std::vector<TypeModel::Prediction> preds;
    std::size_t exact = 0;
    for (std::size_t j = 0; j < fold.test.size(); ++j) {
      preds.push_back(model.predict(X.row(fold.test[j])));
      bool same = true;
      for (std::size_t t = 0; t < kNumTypes; ++t) same = same && (preds.back().indicator[t] == (yte[j][t] != 0));
      exact += same ? 1 : 0;
    }

    MetricsReport m;
    m.task = report.task;
    m.fold = k;
    m.n_test = yte.size();
    m.accuracy = static_cast<double>(exact) / static_cast<double>(yte.size());
    std::vector<double> P, R, F, S, aucs, auc_w;
    for (CatheterType type : kAllTypes) {
      const std::size_t t = index_of(type);
      std::vector<int> yt, yp;
      std::vector<double> sc;
      for (std::size_t j = 0; j < yte.size(); ++j) {
        yt.push_back(yte[j][t] ? 1 : 0);
        yp.push_back(preds[j].indicator[t] ? 1 : 0);
        sc.push_back(preds[j].probability[t]);
      }
      const BinaryMetrics bm = binary_metrics(yt, yp);
      m.classes.push_back(class_metrics(std::string(to_string(type)), bm));
      report.roc_labels.insert(report.roc_labels.end(), yt.begin(), yt.end());
      report.roc_scores.insert(report.roc_scores.end(), sc.begin(), sc.end());
      P.push_back(bm.precision);
      R.push_back(bm.recall);
      F.push_back(bm.f1);
      S.push_back(m.classes.back().support);
      try {
        aucs.push_back(roc_auc(yt, sc));
        auc_w.push_back(S.back());
      } catch (const InvalidArgumentError&) {
      }
    }
    const double total = std::accumulate(S.begin(), S.end(), 0.0);
    if (total > 0.0) {
      m.precision = weighted_average(P, S);
      m.recall = weighted_average(R, S);
      m.f1 = weighted_average(F, S);
    } else {
      report.warnings.push_back("fold " + std::to_string(k) + ": no positive indicators in test set");
    }
    const double auc_total = std::accumulate(auc_w.begin(), auc_w.end(), 0.0);
    m.auc = auc_total > 0.0 ? weighted_average(aucs, auc_w) : kNaN;
    report.folds.push_back(std::move(m));
  }
  summarize(report);
  return report;
}

// ---------------------------------------------------------------------------
// Report formats

namespace {

using ojson = nlohmann::ordered_json;

ojson num(double v) { return std::isfinite(v) ? ojson(round4(v)) : ojson(nullptr); }
double num_from(const nlohmann::json& j) { return j.is_null() ? kNaN : j.get<double>(); }

ojson mean_std_json(const MeanStd& m) { return ojson{{"mean", num(m.mean)}, {"std", num(m.std)}}; }
MeanStd mean_std_from(const nlohmann::json& j) { return {num_from(j.at("mean")), num_from(j.at("std"))}; }

}  // namespace

std::string cv_report_json(const CvReport& r) {
  ojson j;
  j["version"] = 1;
  j["task"] = r.task;
  j["summary"] = ojson{{"precision", mean_std_json(r.precision)},
                       {"recall", mean_std_json(r.recall)},
                       {"f1", mean_std_json(r.f1)},
                       {"accuracy", mean_std_json(r.accuracy)},
                       {"auc", mean_std_json(r.auc)}};
  auto folds = ojson::array();
  for (std::size_t k = 0; k < r.folds.size(); ++k) {
    const auto& f = r.folds[k];
    ojson fj{{"fold", f.fold},          {"n_test", f.n_test},   {"precision", num(f.precision)},
             {"recall", num(f.recall)}, {"f1", num(f.f1)},      {"accuracy", num(f.accuracy)},
             {"auc", num(f.auc)}};
    auto classes = ojson::array();
    for (const auto& c : f.classes)
      classes.push_back(ojson{{"name", c.name},
                              {"precision", num(c.precision)},
                              {"recall", num(c.recall)},
                              {"f1", num(c.f1)},
                              {"support", num(c.support)}});
    fj["classes"] = std::move(classes);
    if (k < r.chosen.size()) fj["chosen_config"] = detail::to_json(r.chosen[k]);
    folds.push_back(std::move(fj));
  }
  j["folds"] = std::move(folds);
  j["warnings"] = r.warnings;
  return j.dump(2) + "\n";
}

CvReport cv_report_from_json(const std::string& text) {
  CvReport r;
  try {
    const auto j = nlohmann::json::parse(text);
    if (j.at("version").get<int>() != 1) throw FormatError("report: unsupported version");
    r.task = j.at("task").get<std::string>();
    const auto& s = j.at("summary");
    r.precision = mean_std_from(s.at("precision"));
    r.recall = mean_std_from(s.at("recall"));
    r.f1 = mean_std_from(s.at("f1"));
    r.accuracy = mean_std_from(s.at("accuracy"));
    r.auc = mean_std_from(s.at("auc"));
    for (const auto& fj : j.at("folds")) {
      MetricsReport f;
      f.task = r.task;
      f.fold = fj.at("fold").get<int>();
      f.n_test = fj.at("n_test").get<std::size_t>();
      f.precision = num_from(fj.at("precision"));
      f.recall = num_from(fj.at("recall"));
      f.f1 = num_from(fj.at("f1"));
      f.accuracy = num_from(fj.at("accuracy"));
      f.auc = num_from(fj.at("auc"));
      for (const auto& c : fj.at("classes"))
        f.classes.push_back({c.at("name").get<std::string>(), num_from(c.at("precision")),
                             num_from(c.at("recall")), num_from(c.at("f1")), num_from(c.at("support"))});
      if (fj.contains("chosen_config")) {
        ForestConfig cfg;
        std::vector<std::string> unknown;
        detail::from_json(fj.at("chosen_config"), cfg, "", unknown);
        r.chosen.push_back(cfg);
      }
      r.folds.push_back(std::move(f));
    }
    r.warnings = j.at("warnings").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("report: ") + e.what());
  }
  return r;
}

std::string cv_report_table(const CvReport& r) {
  auto cell = [](const MeanStd& m) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%6.1f ± %.2f", 100.0 * m.mean, 100.0 * m.std);
    return std::string(buf);
  };
  std::ostringstream s;
  s << "task: " << r.task << " (5-fold, mean ± std, x100)\n";
  s << "  precision  " << cell(r.precision) << "\n";
  s << "  recall     " << cell(r.recall) << "\n";
  s << "  f1         " << cell(r.f1) << "\n";
  s << "  accuracy   " << cell(r.accuracy) << "\n";
  s << "  auc        " << cell(r.auc) << "\n";
  for (const auto& w : r.warnings) s << "  warning: " << w << "\n";
  return s.str();
}

// ---------------------------------------------------------------------------
// Segmentation overlap

OverlapTable seg_overlap_report(const std::vector<std::pair<BinaryMask, BinaryMask>>& pairs,
                                const std::vector<int>& radii, const std::vector<double>& thresholds) {
  if (pairs.empty()) throw InvalidArgumentError("seg_overlap_report: no cases");
  if (radii.empty() || thresholds.empty()) throw InvalidArgumentError("seg_overlap_report: no radii or thresholds");
  for (int r : radii)
    if (r < 0) throw InvalidArgumentError("seg_overlap_report: negative radius");
  OverlapTable t;
  t.radii = radii;
  t.thresholds = thresholds;
  t.n_cases = pairs.size();
  t.fraction.assign(radii.size(), std::vector<double>(thresholds.size(), 0.0));
  for (const auto& [a, truth] : pairs) {
    require_same_shape(a, truth, "seg_overlap_report");
    for (std::size_t ri = 0; ri < radii.size(); ++ri) {
      const double o = overlap_fraction(a, truth, radii[ri]);
      for (std::size_t ti = 0; ti < thresholds.size(); ++ti)
        if (o > thresholds[ti]) t.fraction[ri][ti] += 1.0;
    }
  }
  for (auto& row : t.fraction)
    for (double& v : row) v /= static_cast<double>(pairs.size());
  return t;
}

std::string overlap_table_json(const OverlapTable& t) {
  ojson j;
  j["version"] = 1;
  j["n_cases"] = t.n_cases;
  j["thresholds"] = t.thresholds;
  auto rows = ojson::array();
  for (std::size_t r = 0; r < t.radii.size(); ++r) {
    auto fr = ojson::array();
    for (double v : t.fraction[r]) fr.push_back(num(v));
    rows.push_back(ojson{{"radius", t.radii[r]}, {"fraction_above", fr}});
  }
  j["radii"] = std::move(rows);
  return j.dump(2) + "\n";
}

std::string overlap_table_text(const OverlapTable& t) {
  std::ostringstream s;
  s << "segmentation overlap (" << t.n_cases << " cases)\n";
  for (std::size_t r = 0; r < t.radii.size(); ++r) {
    s << "  dilation " << t.radii[r] << " px:";
    for (std::size_t k = 0; k < t.thresholds.size(); ++k) {
      char buf[64];
      std::snprintf(buf, sizeof buf, "  %.1f%% > %.0f%%", 100.0 * t.fraction[r][k], 100.0 * t.thresholds[k]);
      s << buf;
    }
    s << "\n";
  }
  return s.str();
}

}  // namespace cvc
