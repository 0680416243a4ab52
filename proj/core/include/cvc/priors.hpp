#pragma once

#include <filesystem>
#include <map>
#include <vector>

#include "cvc/raster.hpp"

namespace cvc {

/// Per-class spatial probability maps built from averaged catheter traces.
struct PriorAtlas {
  int version = 1;
  int width = 0;
  int height = 0;
  double sigma = 0.0;
  double thickness = 1.0;
  /// Built classes in kAllCvcClasses order.
  std::vector<CvcClass> classes;
  std::map<CvcClass, ProbMap> maps;
  std::map<CvcClass, int> counts;

  const ProbMap& prior(CvcClass c) const;
  friend bool operator==(const PriorAtlas&, const PriorAtlas&) = default;
};

/// Mean of the rasterized annotations (per-pixel coverage fraction), then
/// Gaussian blurred. All annotations must share one class.
ProbMap build_prior(const std::vector<PolylineAnnotation>& annotations, int width, int height,
                    double thickness, double sigma);

/// Builds one prior per class present in `annotations`. Map values are
/// rounded to single precision so the on-disk form round-trips exactly.
PriorAtlas build_atlas(const std::vector<PolylineAnnotation>& annotations, int width, int height,
                       double thickness, double sigma);

/// Blur sigma used at a working resolution: 8 px at 512, scaled linearly.
double default_prior_sigma(int width, int height);

/// Writes <CLASS>.pfm per class and atlas.json.
void save_atlas(const PriorAtlas& atlas, const std::filesystem::path& dir);
/// Throws MissingFileError, ResolutionMismatchError or FormatError.
PriorAtlas load_atlas(const std::filesystem::path& dir);

/// Element-wise product of a segmentation with a class prior.
ProbMap prior_overlap(const ProbMap& seg, const ProbMap& prior);

}  // namespace cvc
