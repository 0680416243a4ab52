#include <gtest/gtest.h>

#include <algorithm>
#include <json.hpp>

#include "cvc/image_io.hpp"
#include "cvc/priors.hpp"
#include "cvc/synthgen.hpp"
#include "support.hpp"

using namespace cvc;
using testing_support::TempDir;

namespace {

PolylineAnnotation line(CvcClass c, std::vector<Point2> pts) { return {std::move(pts), c, "x"}; }

std::vector<PolylineAnnotation> class_annotations(CvcClass cls, std::size_t n, int size) {
  PhantomConfig c;
  c.width = c.height = size;
  c.class_mix = {{cls, 1.0}};
  c.p_no_catheter = c.p_multi_catheter = c.p_distractor = 0.0;
  c.noise_sigma = 0.0;
  std::vector<PolylineAnnotation> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(generate_phantom(c, i).catheters.at(0));
  return out;
}

PriorAtlas small_atlas() {
  std::vector<PolylineAnnotation> anns;
  for (CvcClass c : kAllCvcClasses) {
    const auto part = class_annotations(c, 4, 32);
    anns.insert(anns.end(), part.begin(), part.end());
  }
  return build_atlas(anns, 32, 32, 1.0, 1.5);
}

}  // namespace

TEST(BuildPrior, SingleAnnotationWithoutBlurIsItsMask) {
  const auto a = line(CvcClass::IJ, {{2, 2}, {12, 9}});
  const auto prior = build_prior({a}, 16, 16, 2.0, 0.0);
  EXPECT_EQ(prior, to_prob(rasterize_polyline(a, 16, 16, 2.0)));
}

TEST(BuildPrior, AveragesCoverage) {
  const auto a = line(CvcClass::IJ, {{0, 5}, {15, 5}});
  const auto b = line(CvcClass::IJ, {{0, 5}, {7, 5}, {7, 15}});
  const auto prior = build_prior({a, b}, 16, 16, 1.0, 0.0);
  EXPECT_EQ(prior(3, 5), 1.0);
  EXPECT_EQ(prior(12, 5), 0.5);
  EXPECT_EQ(prior(7, 12), 0.5);
  EXPECT_EQ(prior(12, 12), 0.0);
}

TEST(BuildPrior, Errors) {
  EXPECT_THROW(build_prior({}, 8, 8, 1.0, 0.0), InvalidArgumentError);
  EXPECT_THROW(build_prior({line(CvcClass::IJ, {{0, 0}, {3, 3}}), line(CvcClass::SwanGanz, {{0, 0}, {3, 3}})}, 8, 8,
                           1.0, 0.0),
               InvalidArgumentError);
}

TEST(BuildPrior, IjPeakLiesInIjCorridor) {
  const auto anns = class_annotations(CvcClass::IJ, 359, 128);
  const auto prior = build_prior(anns, 128, 128, 2.0, default_prior_sigma(128, 128));
  const auto it = std::max_element(prior.pixels().begin(), prior.pixels().end());
  const auto idx = static_cast<std::size_t>(it - prior.pixels().begin());
  const double u = static_cast<double>(idx % 128) / 127.0;
  const double v = static_cast<double>(idx / 128) / 127.0;
  EXPECT_GE(u, 0.36);
  EXPECT_LE(u, 0.53);
  EXPECT_LE(v, 0.5);
}

TEST(BuildPrior, BoundedByCoverageAndOrderFree) {
  auto anns = class_annotations(CvcClass::Subclavian, 12, 32);
  const auto raw = build_prior(anns, 32, 32, 2.0, 0.0);
  const auto blurred = build_prior(anns, 32, 32, 2.0, 1.0);
  const double raw_max = *std::max_element(raw.pixels().begin(), raw.pixels().end());
  for (double v : blurred.pixels()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, raw_max + 1e-12);
  }
  std::reverse(anns.begin(), anns.end());
  EXPECT_EQ(build_prior(anns, 32, 32, 2.0, 1.0), blurred);
}

TEST(Atlas, SaveLoadRoundTripAndFileSet) {
  TempDir dir("atlas");
  const auto atlas = small_atlas();
  ASSERT_EQ(atlas.classes.size(), 5u);
  save_atlas(atlas, dir.path());
  int pfm = 0, json = 0;
  for (const auto& f : std::filesystem::directory_iterator(dir.path())) {
    pfm += f.path().extension() == ".pfm";
    json += f.path().extension() == ".json";
  }
  EXPECT_EQ(pfm, 5);
  EXPECT_EQ(json, 1);
  EXPECT_EQ(load_atlas(dir.path()), atlas);
  EXPECT_EQ(atlas.counts.at(CvcClass::IJ), 4);
}

TEST(Atlas, TamperedResolutionIsRejected) {
  TempDir dir("atlas");
  save_atlas(small_atlas(), dir.path());
  auto j = nlohmann::json::parse(read_file(dir.path() / "atlas.json"));
  j["resolution"] = {64, 32};
  write_file(dir.path() / "atlas.json", j.dump());
  EXPECT_THROW(load_atlas(dir.path()), ResolutionMismatchError);
}

TEST(Atlas, MissingAndCorruptFiles) {
  TempDir dir("atlas");
  EXPECT_THROW(load_atlas(dir.path()), MissingFileError);
  save_atlas(small_atlas(), dir.path());
  std::filesystem::remove(dir.path() / "IJ.pfm");
  EXPECT_THROW(load_atlas(dir.path()), MissingFileError);
  write_file(dir.path() / "atlas.json", "{\"version\":1");
  EXPECT_THROW(load_atlas(dir.path()), FormatError);
}

TEST(PriorOverlap, IdentityDisjointAndOracle) {
  const auto prior = testing_support::random_map(16, 16, 5);
  EXPECT_EQ(prior_overlap(ProbMap(16, 16, 1.0), prior), prior);

  ProbMap left(16, 16), right(16, 16);
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 8; ++x) {
      left(x, y) = 0.7;
      right(x + 8, y) = 0.9;
    }
  const auto disjoint = prior_overlap(left, right);
  for (double v : disjoint.pixels()) EXPECT_EQ(v, 0.0);

  const auto seg = testing_support::random_map(16, 16, 55);
  const auto out = prior_overlap(seg, prior);
  for (std::size_t i = 0; i < out.size(); ++i) {
    EXPECT_EQ(out[i], seg[i] * prior[i]);
    EXPECT_EQ(out[i], prior_overlap(prior, seg)[i]);
    EXPECT_LE(out[i], std::min(seg[i], prior[i]));
  }
  EXPECT_THROW(prior_overlap(ProbMap(4, 4), ProbMap(4, 5)), ShapeMismatchError);
}

TEST(PriorOverlap, MonotoneInSegmentation) {
  const auto prior = testing_support::random_map(8, 8, 1);
  const auto seg = testing_support::random_map(8, 8, 2);
  ProbMap more = seg;
  for (double& v : more.pixels()) v = std::min(1.0, v + 0.1);
  const auto a = prior_overlap(seg, prior), b = prior_overlap(more, prior);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_LE(a[i], b[i]);
}

TEST(Atlas, DefaultSigmaScalesWithResolution) {
  EXPECT_DOUBLE_EQ(default_prior_sigma(512, 512), 8.0);
  EXPECT_DOUBLE_EQ(default_prior_sigma(128, 128), 2.0);
}
