#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cvc/common.hpp"
#include "cvc/labels.hpp"

namespace cvc {

/// Row-major 2-D raster. The tag keeps radiographs, probability maps and
/// masks from being mixed up; conversions between them are explicit.
template <typename T, typename Tag>
class Raster {
 public:
  using value_type = T;

  Raster() = default;

  Raster(int width, int height, T fill = T{}) : width_(width), height_(height) {
    check_dims(width, height);
    data_.assign(static_cast<std::size_t>(width) * static_cast<std::size_t>(height), fill);
  }

  Raster(int width, int height, std::vector<T> data)
      : width_(width), height_(height), data_(std::move(data)) {
    check_dims(width, height);
    if (data_.size() != static_cast<std::size_t>(width) * static_cast<std::size_t>(height))
      throw ShapeMismatchError("raster data length does not match " + std::to_string(width) +
                               "x" + std::to_string(height));
  }

  int width() const noexcept { return width_; }
  int height() const noexcept { return height_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(int x, int y) noexcept { return data_[index(x, y)]; }
  const T& operator()(int x, int y) const noexcept { return data_[index(x, y)]; }
  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  std::size_t index(int x, int y) const noexcept {
    return static_cast<std::size_t>(y) * static_cast<std::size_t>(width_) +
           static_cast<std::size_t>(x);
  }
  bool contains(int x, int y) const noexcept {
    return x >= 0 && y >= 0 && x < width_ && y < height_;
  }

  std::span<T> pixels() noexcept { return data_; }
  std::span<const T> pixels() const noexcept { return data_; }

  template <typename U, typename OtherTag>
  bool same_shape(const Raster<U, OtherTag>& o) const noexcept {
    return width_ == o.width() && height_ == o.height();
  }

  friend bool operator==(const Raster&, const Raster&) = default;

 private:
  static void check_dims(int w, int h) {
    if (w < 1 || h < 1)
      throw InvalidArgumentError("raster dimensions must be >= 1, got " + std::to_string(w) +
                                 "x" + std::to_string(h));
  }

  int width_ = 0;
  int height_ = 0;
  std::vector<T> data_;
};

struct GrayTag {};
struct ProbTag {};
struct MaskTag {};

/// Radiograph intensities in [0,1].
using GrayImage = Raster<double, GrayTag>;
/// Soft segmentation or spatial prior, values in [0,1].
using ProbMap = Raster<double, ProbTag>;
/// Hard mask; 0 = background, 1 = set.
using BinaryMask = Raster<std::uint8_t, MaskTag>;

template <typename A, typename B>
void require_same_shape(const A& a, const B& b, const char* what) {
  if (!a.same_shape(b))
    throw ShapeMismatchError(std::string(what) + ": shape mismatch (" +
                             std::to_string(a.width()) + "x" + std::to_string(a.height()) +
                             " vs " + std::to_string(b.width()) + "x" +
                             std::to_string(b.height()) + ")");
}

/// Throws FormatError if any value is non-finite or outside [0,1].
template <typename Tag>
void require_unit_range(const Raster<double, Tag>& r, const char* what) {
  for (double v : r.pixels())
    if (!(v >= 0.0 && v <= 1.0))
      throw FormatError(std::string(what) + ": value outside [0,1]");
}

ProbMap to_prob(const GrayImage& img);
ProbMap to_prob(const BinaryMask& mask);
/// Pixels strictly above `level` are set.
BinaryMask threshold(const ProbMap& map, double level = 0.5);
std::size_t count(const BinaryMask& mask) noexcept;
BinaryMask mask_union(const BinaryMask& a, const BinaryMask& b);

struct Point2 {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const Point2&, const Point2&) = default;
};

/// One catheter traced from insertion origin to tip.
struct PolylineAnnotation {
  std::vector<Point2> points;
  CvcClass cvc_class = CvcClass::IJ;
  std::string image_id;

  friend bool operator==(const PolylineAnnotation&, const PolylineAnnotation&) = default;
};

/// Throws InvalidArgumentError (fewer than 2 points, repeated consecutive
/// point) or BoundsError (point outside [0,w-1]x[0,h-1]).
void validate_annotation(const PolylineAnnotation& ann, int width, int height);

/// Morphological dilation by the discrete disk dx^2 + dy^2 <= radius^2.
BinaryMask dilate(const BinaryMask& mask, int radius);

/// Separable Gaussian blur, kernel truncated at ceil(3 sigma) and
/// normalized, half-sample symmetric (reflective) boundaries.
ProbMap gaussian_blur(const ProbMap& map, double sigma);

/// Normalized 1-D Gaussian taps for offsets -r..r, r = ceil(3 sigma).
std::vector<double> gaussian_kernel(double sigma);

/// Reflects an out-of-range index into [0, n) (half-sample symmetric).
int reflect_index(int i, int n) noexcept;

/// Sets every pixel whose center lies within thickness/2 of a segment.
BinaryMask rasterize_polyline(const PolylineAnnotation& ann, int width, int height,
                              double thickness);

/// Pixel indices of one 8-connected component, ascending.
using Component = std::vector<std::size_t>;

/// 8-connected components ordered by their first pixel in raster order.
std::vector<Component> connected_components(const BinaryMask& mask);

/// |auto ∩ dilate(truth, r)| / |auto|. Both empty gives 1; empty auto with
/// non-empty truth gives 0 (callers flag that case).
double overlap_fraction(const BinaryMask& automatic, const BinaryMask& truth, int dilation_radius);

}  // namespace cvc
