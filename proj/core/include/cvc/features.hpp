#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "cvc/priors.hpp"
#include "cvc/raster.hpp"
#include "cvc/synthgen.hpp"

namespace cvc {

struct HogConfig {
  int cell_size = 8;
  int n_orientations = 9;
  /// Orientation range is [0, pi) when unsigned, [0, 2 pi) when signed.
  bool signed_gradients = false;

  void validate() const;
};

struct FeatureConfig {
  int n_bins = 10;
  HogConfig hog;
  /// Segmentation pixels above this value form the hard mask.
  double seg_threshold = 0.5;

  void validate() const;
};

/// Ordered feature names; the hash ties trained models to a layout.
struct FeatureSchema {
  std::vector<std::string> names;

  std::size_t size() const noexcept { return names.size(); }
  std::uint64_t hash() const;
  friend bool operator==(const FeatureSchema&, const FeatureSchema&) = default;
};

struct FeatureVector {
  std::vector<double> values;
  std::shared_ptr<const FeatureSchema> schema;
};

/// [positive-pixel count, normalized histogram of overlap values at mask
/// pixels over n equal-width bins of [0,1]].
std::vector<double> overlap_histogram(const ProbMap& overlap, const BinaryMask& seg_mask, int n_bins);

/// Central-difference gradients, per-cell magnitude-weighted orientation
/// histograms with linear interpolation between bin centers (bin b is
/// centered at b * range / n), cells in row-major order, and one global L1
/// normalization. All zeros when there is no gradient energy.
std::vector<double> hog(const ProbMap& map, const HogConfig& cfg);

/// Per region (LUNGS, HEART, MEDIASTINUM, CLAVICLES): {mean, std, p10, p50,
/// p90} of distances from mask pixels to the region centroid over the image
/// diagonal, then an emptiness flag. 21 values.
std::vector<double> anatomy_distance_features(const BinaryMask& seg_mask, const AnatomyMasks& anatomy);

struct ShapeSize {
  double area = 0.0;
  double length = 0.0;
  double width = 0.0;
  double n_components = 0.0;
};

/// Area fraction plus principal-axis extents of the largest component,
/// normalized by the image diagonal.
ShapeSize shape_size_features(const BinaryMask& seg_mask);

/// Mean prior_overlap value over mask pixels, per atlas class (0 if the
/// mask is empty).
std::map<CvcClass, double> prior_alignment(const ProbMap& seg, const PriorAtlas& atlas,
                                           double seg_threshold = 0.5);

std::shared_ptr<const FeatureSchema> make_schema(const PriorAtlas& atlas, const FeatureConfig& cfg);

/// Blocks in order: per atlas class [overlap histogram, overlap HoG],
/// anatomy distances, shape/size.
FeatureVector extract_features(const ProbMap& seg, const PriorAtlas& atlas, const AnatomyMasks& anatomy,
                               const FeatureConfig& cfg);

/// Same, reusing a schema built once for the corpus.
FeatureVector extract_features(const ProbMap& seg, const PriorAtlas& atlas, const AnatomyMasks& anatomy,
                               const FeatureConfig& cfg, std::shared_ptr<const FeatureSchema> schema);

/// Rows of features for a corpus, aligned with ids.
struct FeatureTable {
  std::shared_ptr<const FeatureSchema> schema;
  std::vector<std::string> ids;
  std::vector<std::vector<double>> rows;
};

/// CSV with header "image_id,<names...>" plus <stem>.schema.json beside it.
void write_feature_table(const std::filesystem::path& csv_path, const FeatureTable& table);
FeatureTable read_feature_table(const std::filesystem::path& csv_path);

}  // namespace cvc
