#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "cvc/raster.hpp"

namespace cvc {

enum class AnatomyRegion { Lungs, Heart, Mediastinum, Clavicles };

inline constexpr std::array<AnatomyRegion, 4> kAllRegions = {
    AnatomyRegion::Lungs, AnatomyRegion::Heart, AnatomyRegion::Mediastinum,
    AnatomyRegion::Clavicles};

constexpr std::string_view to_string(AnatomyRegion r) noexcept {
  switch (r) {
    case AnatomyRegion::Lungs: return "LUNGS";
    case AnatomyRegion::Heart: return "HEART";
    case AnatomyRegion::Mediastinum: return "MEDIASTINUM";
    case AnatomyRegion::Clavicles: return "CLAVICLES";
  }
  return "?";
}

/// Lower-case file stem used in corpus paths.
std::string region_file_tag(AnatomyRegion r);

using AnatomyMasks = std::map<AnatomyRegion, BinaryMask>;

/// Catheter class frequencies of the reference type dataset
/// (4249 PICC split evenly left/right, 1651 IJ, 201 subclavian, 192 Swan-Ganz).
std::map<CvcClass, double> default_class_mix();

struct PhantomConfig {
  int width = 128;
  int height = 128;
  std::map<CvcClass, double> class_mix = default_class_mix();
  double p_no_catheter = 0.2;
  double p_multi_catheter = 0.1;
  /// Non-CVC tube (feeding/airway style) drawn independently of CVCs.
  double p_distractor = 0.1;
  double noise_sigma = 0.02;
  double catheter_contrast = 0.18;
  double catheter_thickness = 2.0;
  std::uint64_t seed = 1;

  /// Throws ConfigError on any invariant violation.
  void validate() const;
};

struct PhantomLabels {
  bool presence = false;
  std::array<bool, kNumTypes> types{};
  friend bool operator==(const PhantomLabels&, const PhantomLabels&) = default;
};

struct Phantom {
  std::string id;
  GrayImage image;
  std::vector<PolylineAnnotation> catheters;
  std::vector<std::vector<Point2>> distractors;
  AnatomyMasks anatomy;
  PhantomLabels labels;
};

std::string phantom_id(std::size_t index);

/// Deterministic in (config.seed, index).
Phantom generate_phantom(const PhantomConfig& config, std::size_t index);

/// Mean anatomy layout with no patient jitter; stands in for an anatomy
/// segmentation when only a radiograph is available.
AnatomyMasks template_anatomy(int width, int height);

/// Rasterizes every catheter of a phantom into one positive mask.
BinaryMask catheter_mask(const std::vector<PolylineAnnotation>& catheters, int width, int height,
                         double thickness);

struct CorpusEntry {
  std::string id;
  std::filesystem::path image;
  std::map<AnatomyRegion, std::filesystem::path> anatomy;
  PhantomLabels labels;
  std::vector<CvcClass> classes;
  int distractors = 0;
};

struct CorpusManifest {
  int version = 1;
  int width = 0;
  int height = 0;
  double catheter_thickness = 2.0;
  std::uint64_t seed = 0;
  std::vector<CorpusEntry> entries;
};

/// Writes images/<id>.pgm, anatomy/<id>.<region>.pgm, annotations.jsonl
/// and manifest.json under out_dir. Paths in the manifest are relative.
CorpusManifest generate_corpus(const PhantomConfig& config, std::size_t n,
                               const std::filesystem::path& out_dir);

CorpusManifest load_manifest(const std::filesystem::path& corpus_dir);

/// Loaded phantom from a corpus directory (image quantized to 8 bits).
struct CorpusItem {
  CorpusEntry entry;
  GrayImage image;
  AnatomyMasks anatomy;
  std::vector<PolylineAnnotation> catheters;
};

std::vector<CorpusItem> load_corpus(const std::filesystem::path& corpus_dir);

}  // namespace cvc
