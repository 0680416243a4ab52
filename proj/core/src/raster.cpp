#include "cvc/raster.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace cvc {

std::optional<CvcClass> parse_cvc_class(std::string_view s) noexcept {
  for (CvcClass c : kAllCvcClasses)
    if (to_string(c) == s) return c;
  return std::nullopt;
}

std::optional<CatheterType> parse_catheter_type(std::string_view s) noexcept {
  for (CatheterType t : kAllTypes)
    if (to_string(t) == s) return t;
  return std::nullopt;
}

ProbMap to_prob(const GrayImage& img) {
  return ProbMap(img.width(), img.height(),
                 std::vector<double>(img.pixels().begin(), img.pixels().end()));
}

ProbMap to_prob(const BinaryMask& mask) {
  ProbMap out(mask.width(), mask.height());
  for (std::size_t i = 0; i < mask.size(); ++i) out[i] = mask[i] ? 1.0 : 0.0;
  return out;
}

BinaryMask threshold(const ProbMap& map, double level) {
  BinaryMask out(map.width(), map.height());
  for (std::size_t i = 0; i < map.size(); ++i) out[i] = map[i] > level ? 1 : 0;
  return out;
}

std::size_t count(const BinaryMask& mask) noexcept {
  std::size_t n = 0;
  for (auto v : mask.pixels()) n += v != 0;
  return n;
}

BinaryMask mask_union(const BinaryMask& a, const BinaryMask& b) {
  require_same_shape(a, b, "mask_union");
  BinaryMask out = a;
  for (std::size_t i = 0; i < b.size(); ++i) out[i] = (a[i] || b[i]) ? 1 : 0;
  return out;
}

void validate_annotation(const PolylineAnnotation& ann, int width, int height) {
  if (ann.points.size() < 2)
    throw InvalidArgumentError("annotation '" + ann.image_id + "' needs at least 2 points");
  for (std::size_t i = 0; i < ann.points.size(); ++i) {
    const Point2& p = ann.points[i];
    if (!std::isfinite(p.x) || !std::isfinite(p.y) || p.x < 0.0 || p.y < 0.0 ||
        p.x > width - 1 || p.y > height - 1)
      throw BoundsError("annotation '" + ann.image_id + "' point " + std::to_string(i) +
                        " outside " + std::to_string(width) + "x" + std::to_string(height));
    if (i > 0 && p == ann.points[i - 1])
      throw InvalidArgumentError("annotation '" + ann.image_id +
                                 "' repeats consecutive point " + std::to_string(i));
  }
}

BinaryMask dilate(const BinaryMask& mask, int radius) {
  if (radius < 0) throw InvalidArgumentError("dilate: negative radius");
  if (radius == 0) return mask;
  const int w = mask.width();
  const int h = mask.height();

  // Per-row prefix counts turn each disk row into one range query.
  std::vector<int> prefix(static_cast<std::size_t>(w + 1) * h, 0);
  for (int y = 0; y < h; ++y) {
    int* row = &prefix[static_cast<std::size_t>(y) * (w + 1)];
    for (int x = 0; x < w; ++x) row[x + 1] = row[x] + (mask(x, y) ? 1 : 0);
  }
  std::vector<int> half_width(2 * radius + 1);
  for (int dy = -radius; dy <= radius; ++dy) {
    int hw = 0;
    while ((hw + 1) * (hw + 1) + dy * dy <= radius * radius) ++hw;
    half_width[dy + radius] = hw;
  }

  BinaryMask out(w, h);
  for (int y = 0; y < h; ++y) {
    for (int dy = -radius; dy <= radius; ++dy) {
      const int sy = y + dy;
      if (sy < 0 || sy >= h) continue;
      const int hw = half_width[dy + radius];
      const int* row = &prefix[static_cast<std::size_t>(sy) * (w + 1)];
      for (int x = 0; x < w; ++x) {
        if (out(x, y)) continue;
        const int lo = std::max(0, x - hw);
        const int hi = std::min(w, x + hw + 1);
        if (row[hi] - row[lo] > 0) out(x, y) = 1;
      }
    }
  }
  return out;
}

int reflect_index(int i, int n) noexcept {
  if (n == 1) return 0;
  const int period = 2 * n;
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - 1 - i;
}

std::vector<double> gaussian_kernel(double sigma) {
  if (!(sigma >= 0.0)) throw InvalidArgumentError("gaussian_kernel: sigma must be >= 0");
  if (sigma == 0.0) return {1.0};
  const int r = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * r + 1);
  for (int i = -r; i <= r; ++i) k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
  const double sum = std::accumulate(k.begin(), k.end(), 0.0);
  for (double& v : k) v /= sum;
  return k;
}

ProbMap gaussian_blur(const ProbMap& map, double sigma) {
  if (!(sigma >= 0.0)) throw InvalidArgumentError("gaussian_blur: sigma must be >= 0");
  if (sigma == 0.0) return map;
  const auto k = gaussian_kernel(sigma);
  const int r = static_cast<int>(k.size() / 2);
  const int w = map.width();
  const int h = map.height();

  ProbMap tmp(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -r; i <= r; ++i) acc += k[i + r] * map(reflect_index(x + i, w), y);
      tmp(x, y) = acc;
    }
  ProbMap out(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -r; i <= r; ++i) acc += k[i + r] * tmp(x, reflect_index(y + i, h));
      out(x, y) = std::clamp(acc, 0.0, 1.0);
    }
  return out;
}

namespace {

double distance_to_segment(double px, double py, const Point2& a, const Point2& b) {
  const double dx = b.x - a.x;
  const double dy = b.y - a.y;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0.0 ? ((px - a.x) * dx + (py - a.y) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double ex = a.x + t * dx - px;
  const double ey = a.y + t * dy - py;
  return std::sqrt(ex * ex + ey * ey);
}

}  // namespace

BinaryMask rasterize_polyline(const PolylineAnnotation& ann, int width, int height,
                              double thickness) {
  if (!(thickness >= 1.0)) throw InvalidArgumentError("rasterize_polyline: thickness must be >= 1");
  validate_annotation(ann, width, height);
  const double r = 0.5 * thickness;
  const double tol = r + 1e-9;
  BinaryMask out(width, height);
  for (std::size_t s = 0; s + 1 < ann.points.size(); ++s) {
    const Point2& a = ann.points[s];
    const Point2& b = ann.points[s + 1];
    const int x0 = std::max(0, static_cast<int>(std::floor(std::min(a.x, b.x) - r)));
    const int x1 = std::min(width - 1, static_cast<int>(std::ceil(std::max(a.x, b.x) + r)));
    const int y0 = std::max(0, static_cast<int>(std::floor(std::min(a.y, b.y) - r)));
    const int y1 = std::min(height - 1, static_cast<int>(std::ceil(std::max(a.y, b.y) + r)));
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x)
        if (!out(x, y) && distance_to_segment(x, y, a, b) <= tol) out(x, y) = 1;
  }
  return out;
}

namespace {

struct DisjointSet {
  std::vector<std::size_t> parent;
  explicit DisjointSet(std::size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
  std::size_t find(std::size_t i) {
    while (parent[i] != i) {
      parent[i] = parent[parent[i]];
      i = parent[i];
    }
    return i;
  }
  void unite(std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a == b) return;
    if (a < b) std::swap(a, b);
    parent[a] = b;
  }
};

}  // namespace

std::vector<Component> connected_components(const BinaryMask& mask) {
  const int w = mask.width();
  const int h = mask.height();
  DisjointSet sets(mask.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (!mask(x, y)) continue;
      const std::size_t i = mask.index(x, y);
      if (x > 0 && mask(x - 1, y)) sets.unite(i, mask.index(x - 1, y));
      if (y > 0) {
        for (int dx = -1; dx <= 1; ++dx) {
          const int nx = x + dx;
          if (nx >= 0 && nx < w && mask(nx, y - 1)) sets.unite(i, mask.index(nx, y - 1));
        }
      }
    }

  // Roots are the smallest index of each set, i.e. its first pixel in raster
  // order, so assigning labels on first sight yields the required ordering.
  std::vector<std::size_t> label(mask.size(), static_cast<std::size_t>(-1));
  std::vector<Component> comps;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (!mask[i]) continue;
    const std::size_t root = sets.find(i);
    if (label[root] == static_cast<std::size_t>(-1)) {
      label[root] = comps.size();
      comps.emplace_back();
    }
    comps[label[root]].push_back(i);
  }
  return comps;
}

double overlap_fraction(const BinaryMask& automatic, const BinaryMask& truth, int dilation_radius) {
  require_same_shape(automatic, truth, "overlap_fraction");
  const std::size_t n_auto = count(automatic);
  if (n_auto == 0) return count(truth) == 0 ? 1.0 : 0.0;
  const BinaryMask grown = dilate(truth, dilation_radius);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < automatic.size(); ++i) hit += (automatic[i] && grown[i]) ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(n_auto);
}

}  // namespace cvc
