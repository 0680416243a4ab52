#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "cvc/eval.hpp"
#include "cvc/features.hpp"
#include "cvc/forest.hpp"
#include "cvc/pipeline.hpp"
#include "cvc/priors.hpp"
#include "cvc/raster.hpp"
#include "cvc/segnet.hpp"
#include "cvc/synthgen.hpp"

namespace fs = std::filesystem;
using namespace cvc;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

class ScratchDir {
 public:
  explicit ScratchDir(const std::string& tag)
      : path_(fs::temp_directory_path() / ("cvc_accept_" + tag + "_" + std::to_string(::getpid()))) {
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~ScratchDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

GrayImage random_image(int w, int h, Rng& rng) {
  GrayImage img(w, h);
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = rng.uniform();
  return img;
}

BinaryMask random_mask(int w, int h, double density, Rng& rng) {
  BinaryMask m(w, h);
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = rng.bernoulli(density) ? 1 : 0;
  return m;
}

// Relative error with the denominator floored at 1e-5: central differences
// at h = 1e-6 carry about 1e-10 of rounding error.
double rel_err(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-5});
}

Outcome gradient_correctness() {
  const LossConfig lc;
  const double h = 1e-6;
  double worst_loss = 0.0, worst_net = 0.0;
  int instances = 0;
  for (std::uint64_t s = 0; s < 12; ++s) {
    Rng rng(Rng::derive(101, s));
    const int w = 4 + static_cast<int>(rng.below(9));
    const int ht = 4 + static_cast<int>(rng.below(9));
    ProbMap p(w, ht);
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = rng.uniform(0.02, 0.98);
    const BinaryMask g = random_mask(w, ht, rng.uniform(0.05, 0.6), rng);
    const ProbMap grad = explog_loss_grad(p, g, lc);
    for (std::size_t i = 0; i < p.size(); ++i) {
      ProbMap up = p, dn = p;
      up[i] += h;
      dn[i] -= h;
      const double fd = (explog_loss(up, g, lc) - explog_loss(dn, g, lc)) / (2 * h);
      worst_loss = std::max(worst_loss, rel_err(grad[i], fd));
    }
    ++instances;
  }
  for (std::uint64_t s = 0; s < 10; ++s) {
    Rng rng(Rng::derive(202, s));
    // Zero-initialized biases put ReLU inputs exactly on the kink wherever a
    // neighbourhood is all zero; jitter moves the check to a differentiable point.
    auto params = SegNetParams::random(SegNetConfig{2, 1}, 300 + s);
    for (double& w : params.weights) w += 0.05 * rng.normal();
    const GrayImage img = random_image(8, 8, rng);
    const BinaryMask target = random_mask(8, 8, 0.3, rng);
    const auto lg = loss_and_gradient(params, img, target, lc);
    for (std::size_t k = 0; k < params.size(); ++k) {
      const double w0 = params.weights[k];
      params.weights[k] = w0 + h;
      const double up = explog_loss(forward(params, img), target, lc);
      params.weights[k] = w0 - h;
      const double dn = explog_loss(forward(params, img), target, lc);
      params.weights[k] = w0;
      const double fd = (up - dn) / (2 * h);
      if (std::abs(fd) < 1e-7 && std::abs(lg.gradient[k]) < 1e-7) continue;
      worst_net = std::max(worst_net, rel_err(lg.gradient[k], fd));
    }
    ++instances;
  }
  const bool pass = instances >= 20 && worst_loss < 1e-4 && worst_net < 1e-4;
  return {pass, std::to_string(instances) + " instances, max rel err loss " + fmt("%.2e", worst_loss) +
                    ", network " + fmt("%.2e", worst_net) + " (< 1e-4)"};
}

Outcome loss_configuration() {
  LossConfig lc;
  lc.w_dice = 0.8;
  lc.w_cross = 0.2;
  double worst = 0.0;
  for (std::uint64_t s = 0; s < 50; ++s) {
    Rng rng(Rng::derive(303, s));
    const int w = 3 + static_cast<int>(rng.below(30));
    const int ht = 3 + static_cast<int>(rng.below(30));
    ProbMap p(w, ht);
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = rng.uniform();
    const BinaryMask g = random_mask(w, ht, rng.uniform(0.0, 0.5), rng);

    const double eps = lc.epsilon;
    double sp = 0, sg = 0, spg = 0, cross = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double pi = std::min(std::max(p[i], eps), 1.0 - eps);
      const double gi = g[i] ? 1.0 : 0.0;
      sp += pi;
      sg += gi;
      spg += pi * gi;
      cross += std::pow(-std::log(gi > 0 ? pi : 1.0 - pi), lc.gamma_cross);
    }
    const double dice = (2 * spg + eps) / (sp + sg + eps);
    const double dice_term = std::pow(-std::log(dice), lc.gamma_dice);
    const double cross_term = cross / static_cast<double>(p.size());
    worst = std::max(worst, std::abs(explog_loss(p, g, lc) - (0.8 * dice_term + 0.2 * cross_term)));
  }
  return {worst <= 1e-12, "50 instances, max |L - (0.8 dice + 0.2 cross)| = " + fmt("%.2e", worst) + " (<= 1e-12)"};
}

BinaryMask stamp_dilate(const BinaryMask& m, int r) {
  BinaryMask out(m.width(), m.height());
  for (int y = 0; y < m.height(); ++y)
    for (int x = 0; x < m.width(); ++x) {
      if (!m(x, y)) continue;
      for (int dy = -r; dy <= r; ++dy)
        for (int dx = -r; dx <= r; ++dx) {
          if (dx * dx + dy * dy > r * r) continue;
          const int u = x + dx, v = y + dy;
          if (u >= 0 && v >= 0 && u < m.width() && v < m.height()) out(u, v) = 1;
        }
    }
  return out;
}

int mirror(int i, int n) {
  while (i < 0 || i >= n) i = i < 0 ? -i - 1 : 2 * n - i - 1;
  return i;
}

ProbMap dense_blur(const ProbMap& m, double sigma) {
  const int r = static_cast<int>(std::ceil(3 * sigma));
  std::vector<double> k2;
  double total = 0;
  for (int dy = -r; dy <= r; ++dy)
    for (int dx = -r; dx <= r; ++dx) {
      k2.push_back(std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma)));
      total += k2.back();
    }
  ProbMap out(m.width(), m.height());
  for (int y = 0; y < m.height(); ++y)
    for (int x = 0; x < m.width(); ++x) {
      double acc = 0;
      std::size_t k = 0;
      for (int dy = -r; dy <= r; ++dy)
        for (int dx = -r; dx <= r; ++dx, ++k)
          acc += k2[k] * m(mirror(x + dx, m.width()), mirror(y + dy, m.height()));
      out(x, y) = acc / total;
    }
  return out;
}

std::set<std::set<std::size_t>> flood_fill(const BinaryMask& m) {
  std::vector<char> seen(m.size(), 0);
  std::set<std::set<std::size_t>> comps;
  for (std::size_t start = 0; start < m.size(); ++start) {
    if (!m[start] || seen[start]) continue;
    std::set<std::size_t> comp;
    std::deque<std::size_t> queue{start};
    seen[start] = 1;
    while (!queue.empty()) {
      const std::size_t i = queue.front();
      queue.pop_front();
      comp.insert(i);
      const int x = static_cast<int>(i % static_cast<std::size_t>(m.width()));
      const int y = static_cast<int>(i / static_cast<std::size_t>(m.width()));
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int u = x + dx, v = y + dy;
          if (u < 0 || v < 0 || u >= m.width() || v >= m.height()) continue;
          const auto j = static_cast<std::size_t>(v) * static_cast<std::size_t>(m.width()) + static_cast<std::size_t>(u);
          if (m[j] && !seen[j]) {
            seen[j] = 1;
            queue.push_back(j);
          }
        }
    }
    comps.insert(comp);
  }
  return comps;
}

double pairwise_auc(const std::vector<int>& y, const std::vector<double>& s) {
  double wins = 0, pairs = 0;
  for (std::size_t i = 0; i < y.size(); ++i)
    for (std::size_t j = 0; j < y.size(); ++j)
      if (y[i] && !y[j]) {
        pairs += 1;
        wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
      }
  return wins / pairs;
}

double gini_cost(const Matrix& X, const std::vector<int>& y, std::size_t f, double thr) {
  double l[2] = {0, 0}, r[2] = {0, 0};
  for (std::size_t i = 0; i < y.size(); ++i) (X(i, f) <= thr ? l : r)[y[i]] += 1;
  auto cost = [](const double* c) {
    const double n = c[0] + c[1];
    return n > 0 ? n * (1 - (c[0] / n) * (c[0] / n) - (c[1] / n) * (c[1] / n)) : 0.0;
  };
  return cost(l) + cost(r);
}

Outcome oracle_equivalences() {
  const int n = 60;
  int dil = 0, blur = 0, cc = 0, auc = 0, stump = 0;
  double blur_err = 0;
  for (int s = 0; s < n; ++s) {
    Rng rng(Rng::derive(404, static_cast<std::uint64_t>(s)));
    const int w = 5 + static_cast<int>(rng.below(40));
    const int h = 5 + static_cast<int>(rng.below(40));

    const BinaryMask m = random_mask(w, h, rng.uniform(0.005, 0.2), rng);
    const int radius = static_cast<int>(rng.below(7));
    dil += dilate(m, radius) == stamp_dilate(m, radius);

    ProbMap pm(w, h);
    for (std::size_t i = 0; i < pm.size(); ++i) pm[i] = rng.uniform();
    const double sigma = rng.uniform(0.3, 4.0);
    const ProbMap a = gaussian_blur(pm, sigma);
    const ProbMap b = dense_blur(pm, sigma);
    double e = 0;
    for (std::size_t i = 0; i < a.size(); ++i) e = std::max(e, std::abs(a[i] - b[i]));
    blur_err = std::max(blur_err, e);
    blur += e < 1e-12;

    const BinaryMask cm = random_mask(w, h, rng.uniform(0.1, 0.6), rng);
    std::set<std::set<std::size_t>> got;
    for (const auto& c : connected_components(cm)) got.insert(std::set<std::size_t>(c.begin(), c.end()));
    cc += got == flood_fill(cm);

    const std::size_t na = 2 + rng.below(200);
    std::vector<int> y(na);
    std::vector<double> sc(na);
    for (std::size_t i = 0; i < na; ++i) {
      y[i] = i < 2 ? static_cast<int>(i) : rng.bernoulli(0.4);
      sc[i] = std::round(rng.uniform(0, 20)) / 20 + 0.1 * y[i];
    }
    auc += roc_auc(y, sc) == pairwise_auc(y, sc);

    const std::size_t rows = 10 + rng.below(60), cols = 1 + rng.below(4);
    Matrix X(rows, cols);
    std::vector<int> ty(rows);
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t f = 0; f < cols; ++f) X(i, f) = std::round(rng.uniform(0, 8));
      ty[i] = i < 2 ? static_cast<int>(i) : rng.bernoulli(0.2 + 0.07 * X(i, 0));
    }
    ForestConfig c;
    c.max_depth = 1;
    c.mtry = static_cast<int>(cols);
    c.seed = static_cast<std::uint64_t>(s);
    const DecisionTree t = fit_tree(X, ty, c);
    double best = gini_cost(X, ty, 0, 1e300);
    for (std::size_t f = 0; f < cols; ++f) {
      std::vector<double> v;
      for (std::size_t i = 0; i < rows; ++i) v.push_back(X(i, f));
      std::sort(v.begin(), v.end());
      v.erase(std::unique(v.begin(), v.end()), v.end());
      for (std::size_t k = 0; k + 1 < v.size(); ++k) best = std::min(best, gini_cost(X, ty, f, 0.5 * (v[k] + v[k + 1])));
    }
    const double got_cost = t.nodes[0].is_leaf()
                                ? gini_cost(X, ty, 0, 1e300)
                                : gini_cost(X, ty, static_cast<std::size_t>(t.nodes[0].feature), t.nodes[0].threshold);
    stump += std::abs(got_cost - best) < 1e-9;
  }
  const bool pass = dil == n && blur == n && cc == n && auc == n && stump == n;
  std::ostringstream d;
  d << "matches of " << n << ": dilation " << dil << ", blur " << blur << " (max err " << fmt("%.1e", blur_err)
    << "), components " << cc << ", auc " << auc << ", stump " << stump;
  return {pass, d.str()};
}

Outcome prior_discriminativity() {
  PhantomConfig atlas_cfg;
  atlas_cfg.seed = 2;
  std::vector<PolylineAnnotation> anns;
  for (std::size_t i = 0; i < 500; ++i)
    for (const auto& c : generate_phantom(atlas_cfg, i).catheters) anns.push_back(c);
  const PriorAtlas atlas = build_atlas(anns, 128, 128, 2.0, default_prior_sigma(128, 128));

  PhantomConfig eval_cfg;
  eval_cfg.seed = 3;
  eval_cfg.p_no_catheter = 0.0;
  eval_cfg.p_multi_catheter = 0.0;
  int hits = 0, total = 0;
  for (std::size_t i = 0; total < 200; ++i) {
    const Phantom p = generate_phantom(eval_cfg, i);
    if (p.catheters.size() != 1) continue;
    const ProbMap seg = to_prob(catheter_mask(p.catheters, 128, 128, eval_cfg.catheter_thickness));
    const auto al = prior_alignment(seg, atlas);
    const auto best =
        std::max_element(al.begin(), al.end(), [](const auto& a, const auto& b) { return a.second < b.second; });
    hits += best->first == p.catheters[0].cvc_class;
    ++total;
  }
  const double rate = static_cast<double>(hits) / total;
  return {rate >= 0.95, std::to_string(hits) + "/" + std::to_string(total) + " = " + fmt("%.1f%%", 100 * rate) +
                            " true class recovered (>= 95%)"};
}

Outcome desk_scale_pipeline() {
  ScratchDir dir("pipeline");
  RunConfig cfg;
  cfg.run_dir = dir.path();
  cfg.n_phantoms = 500;
  cfg.phantom.width = cfg.phantom.height = 128;
  cfg.segmenter = "ridge";
  const EvalSummary s = run_all(cfg);
  std::fputs(cv_report_table(s.presence).c_str(), stdout);
  std::fputs(cv_report_table(s.type).c_str(), stdout);
  const bool pass = s.presence.accuracy.mean >= 0.90 && s.presence.auc.mean >= 0.90 &&
                    s.type.precision.mean >= 0.85 && s.type.accuracy.std < 0.05;
  std::ostringstream d;
  d << "presence accuracy " << fmt("%.1f", 100 * s.presence.accuracy.mean) << " (>= 90), auc "
    << fmt("%.3f", s.presence.auc.mean) << " (>= 0.90); type weighted precision "
    << fmt("%.1f", 100 * s.type.precision.mean) << " (>= 85), accuracy std " << fmt("%.2f", 100 * s.type.accuracy.std)
    << " (< 5)";
  return {pass, d.str()};
}

BinaryMask hline(int y, int x0, int x1) {
  BinaryMask m(40, 40);
  for (int x = x0; x < x1; ++x) m(x, y) = 1;
  return m;
}

Outcome overlap_protocol() {
  // A copy of the truth line shifted by d rows lies inside the truth
  // dilated by r exactly when d <= r.
  const BinaryMask truth = hline(20, 5, 35);
  std::vector<std::pair<BinaryMask, BinaryMask>> pairs;
  for (int d : {0, 1, 2, 3, 4, 5, 6, 8}) pairs.emplace_back(hline(20 + (d % 2 ? d : -d), 5, 35), truth);
  // Half on the truth, half 3 px away: overlap 0.5 at r = 2, 1 at r = 5.
  BinaryMask split = hline(20, 5, 20);
  const BinaryMask far = hline(23, 20, 35);
  for (std::size_t i = 0; i < split.size(); ++i) split[i] |= far[i];
  pairs.emplace_back(split, truth);

  const OverlapTable t = seg_overlap_report(pairs);
  const std::vector<std::vector<double>> want{{3.0 / 9.0, 4.0 / 9.0}, {7.0 / 9.0, 7.0 / 9.0}};
  const bool shape = t.radii == std::vector<int>{2, 5} && t.thresholds == std::vector<double>{0.5, 0.4};
  const bool pass = shape && t.n_cases == 9 && t.fraction == want;
  std::fputs(overlap_table_text(t).c_str(), stdout);
  return {pass, std::string("radii 2/5, thresholds 0.5/0.4, 9 cases; fractions ") + (t.fraction == want ? "match" : "differ") +
                    " the hand-derived table exactly"};
}

Outcome trained_segnet() {
  PhantomConfig pc;
  pc.width = pc.height = 64;
  pc.seed = 5;
  std::vector<TrainingSample> samples;
  for (std::size_t i = 0; i < 50; ++i) {
    const Phantom p = generate_phantom(pc, i);
    samples.push_back({p.image, catheter_mask(p.catheters, 64, 64, pc.catheter_thickness)});
  }
  const TrainConfig tc;
  const LossConfig lc;
  const TrainingResult r = train(samples, tc, lc);
  const SegNetParams untrained = SegNetParams::random(tc.net, Rng::derive(tc.seed, 2), tc.foreground_prior);

  double dice_trained = 0, dice_untrained = 0;
  int overlap_ok = 0, with_catheter = 0;
  for (std::size_t i : r.val_indices) {
    const auto& s = samples[i];
    const ProbMap pt = forward(r.params, s.image);
    dice_trained += soft_dice(pt, s.mask);
    dice_untrained += soft_dice(forward(untrained, s.image), s.mask);
    if (count(s.mask) == 0) continue;
    ++with_catheter;
    overlap_ok += overlap_fraction(threshold(pt), s.mask, 5) > 0.4;
  }
  const double nv = static_cast<double>(r.val_indices.size());
  dice_trained /= nv;
  dice_untrained /= nv;
  const double rate = with_catheter ? static_cast<double>(overlap_ok) / with_catheter : 0.0;
  std::ostringstream d;
  d << "val soft dice " << fmt("%.4f", dice_trained) << " vs untrained " << fmt("%.4f", dice_untrained)
    << "; overlap > 0.4 at r=5 on " << overlap_ok << "/" << with_catheter << " catheter images ("
    << fmt("%.0f%%", 100 * rate) << ", >= 80%); best epoch " << r.best_epoch;
  return {dice_trained > dice_untrained && rate >= 0.8, d.str()};
}

std::map<std::string, std::string> snapshot(const fs::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    std::ifstream in(e.path(), std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    files[fs::relative(e.path(), root).string()] = s.str();
  }
  return files;
}

Outcome determinism() {
  auto run = [](const fs::path& dir, const char* threads) {
    ::setenv("CVCPIPE_THREADS", threads, 1);
    RunConfig cfg;
    cfg.run_dir = dir;
    cfg.n_phantoms = 80;
    cfg.phantom.width = cfg.phantom.height = 64;
    cfg.segmenter = "segnet";
    cfg.train.max_epochs = 2;
    cfg.train.crop_size = 32;
    cfg.train.learning_rate = 1e-3;
    ForestConfig a, b;
    a.n_trees = 30;
    b.n_trees = 60;
    b.max_depth = 4;
    cfg.grid = {a, b};
    run_all(cfg);
    return snapshot(dir);
  };
  ScratchDir d1("det1"), d2("det2");
  const auto first = run(d1.path(), "1");
  const auto second = run(d2.path(), "4");
  ::unsetenv("CVCPIPE_THREADS");
  std::size_t differing = 0;
  for (const auto& [name, bytes] : first) {
    const auto it = second.find(name);
    differing += it == second.end() || it->second != bytes;
  }
  differing += second.size() - std::min(second.size(), first.size());
  std::size_t models = 0, reports = 0;
  for (const auto& [name, bytes] : first) {
    models += name.rfind("models", 0) == 0;
    reports += name.rfind("reports", 0) == 0;
  }
  const bool pass = differing == 0 && models > 0 && reports > 0 && first.size() == second.size();
  return {pass, std::to_string(first.size()) + " files (" + std::to_string(models) + " model, " +
                    std::to_string(reports) + " report) compared across two runs with 1 and 4 threads; " +
                    std::to_string(differing) + " differ"};
}

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> criteria{
      {1, "gradient correctness", gradient_correctness},
      {2, "loss configuration", loss_configuration},
      {3, "oracle equivalences", oracle_equivalences},
      {4, "prior discriminativity", prior_discriminativity},
      {5, "desk-scale pipeline", desk_scale_pipeline},
      {6, "segmentation overlap protocol", overlap_protocol},
      {7, "trained segnet improvement", trained_segnet},
      {8, "determinism", determinism},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

  int failures = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && !only.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("AC%d %s %s: %s [%.1f s]\n", c.id, o.pass ? "PASS" : "FAIL", c.name, o.detail.c_str(), secs);
    std::fflush(stdout);
    failures += !o.pass;
  }
  return failures == 0 ? 0 : 1;
}
