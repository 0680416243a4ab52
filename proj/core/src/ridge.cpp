#include <algorithm>
#include <cmath>

#include "cvc/segnet.hpp"

namespace cvc {

ProbMap ridge_segment(const GrayImage& image, double scale, double threshold) {
  if (!(scale > 0.0)) throw InvalidArgumentError("ridge_segment: scale must be > 0");
  if (!(threshold >= 0.0 && threshold < 1.0))
    throw InvalidArgumentError("ridge_segment: threshold must lie in [0,1)");
  const int w = image.width();
  const int h = image.height();
  const ProbMap smooth = gaussian_blur(to_prob(image), scale);
  auto at = [&](int x, int y) { return smooth(reflect_index(x, w), reflect_index(y, h)); };

  constexpr double kBeta = 0.5;
  const double norm = scale * scale;
  std::vector<double> l1(smooth.size()), l2(smooth.size());
  double max_s = 0.0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double dxx = norm * (at(x + 1, y) - 2.0 * at(x, y) + at(x - 1, y));
      const double dyy = norm * (at(x, y + 1) - 2.0 * at(x, y) + at(x, y - 1));
      const double dxy = norm * 0.25 *
                         (at(x + 1, y + 1) - at(x + 1, y - 1) - at(x - 1, y + 1) + at(x - 1, y - 1));
      const double mean = 0.5 * (dxx + dyy);
      const double disc = std::sqrt(0.25 * (dxx - dyy) * (dxx - dyy) + dxy * dxy);
      double a = mean + disc;
      double b = mean - disc;
      if (std::abs(a) > std::abs(b)) std::swap(a, b);  // |a| <= |b|
      const std::size_t i = smooth.index(x, y);
      l1[i] = a;
      l2[i] = b;
      max_s = std::max(max_s, std::sqrt(a * a + b * b));
    }

  ProbMap response(w, h);
  if (max_s <= 0.0) return response;
  const double c = 0.5 * max_s;
  double vmax = 0.0;
  for (std::size_t i = 0; i < response.size(); ++i) {
    if (!(l2[i] < 0.0)) continue;  // bright ridges only
    const double rb = l1[i] / l2[i];
    const double s2 = l1[i] * l1[i] + l2[i] * l2[i];
    const double v = std::exp(-rb * rb / (2.0 * kBeta * kBeta)) * (1.0 - std::exp(-s2 / (2.0 * c * c)));
    response[i] = v;
    vmax = std::max(vmax, v);
  }
  if (vmax <= 0.0) return ProbMap(w, h);
  for (double& v : response.pixels()) {
    const double r = v / vmax;
    if (r <= threshold)
      v = threshold > 0.0 ? 0.5 * r / threshold : 0.0;
    else
      v = 0.5 + 0.5 * (r - threshold) / (1.0 - threshold);
    v = std::clamp(v, 0.0, 1.0);
  }
  return response;
}

}  // namespace cvc
