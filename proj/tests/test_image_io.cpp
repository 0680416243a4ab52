#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "cvc/image_io.hpp"
#include "support.hpp"

using namespace cvc;
using testing_support::TempDir;

TEST(Pgm, GrayRoundTripQuantizesTo8Bits) {
  TempDir dir("pgm");
  GrayImage img(5, 3);
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<double>(i) / 14.0;
  write_pgm(dir.path() / "a.pgm", img);
  const auto back = read_pgm(dir.path() / "a.pgm");
  ASSERT_EQ(back.width(), 5);
  ASSERT_EQ(back.height(), 3);
  for (std::size_t i = 0; i < img.size(); ++i) EXPECT_NEAR(back[i], img[i], 0.5 / 255 + 1e-12);
  // A second round trip is exact.
  write_pgm(dir.path() / "b.pgm", back);
  EXPECT_EQ(read_pgm(dir.path() / "b.pgm"), back);
}

TEST(Pgm, MaskRoundTripUses255) {
  TempDir dir("pgm");
  const auto m = testing_support::random_mask(7, 9, 0.4, 3);
  write_pgm(dir.path() / "m.pgm", m);
  EXPECT_EQ(read_pgm_mask(dir.path() / "m.pgm"), m);
  const std::string bytes = testing_support::slurp(dir.path() / "m.pgm");
  EXPECT_EQ(bytes.substr(0, 2), "P5");
  for (std::size_t i = bytes.size() - m.size(); i < bytes.size(); ++i) {
    const auto v = static_cast<unsigned char>(bytes[i]);
    ASSERT_TRUE(v == 0 || v == 255);
  }
}

TEST(Pgm, HeaderCommentsAndBadFiles) {
  TempDir dir("pgm");
  write_file(dir.path() / "c.pgm", std::string("P5\n# comment\n2 1\n255\n") + '\x00' + '\xff');
  const auto img = read_pgm(dir.path() / "c.pgm");
  EXPECT_DOUBLE_EQ(img[0], 0.0);
  EXPECT_DOUBLE_EQ(img[1], 1.0);
  write_file(dir.path() / "d.pgm", "P2\n2 1\n255\n0 1\n");
  EXPECT_THROW(read_pgm(dir.path() / "d.pgm"), FormatError);
  write_file(dir.path() / "e.pgm", std::string("P5\n4 4\n255\n") + "abc");
  EXPECT_THROW(read_pgm(dir.path() / "e.pgm"), FormatError);
  EXPECT_THROW(read_pgm(dir.path() / "missing.pgm"), MissingFileError);
}

TEST(Pfm, RoundTripIsExactForFloatValues) {
  TempDir dir("pfm");
  auto m = testing_support::random_map(6, 4, 8);
  for (double& v : m.pixels()) v = static_cast<float>(v);
  write_pfm(dir.path() / "p.pfm", m);
  EXPECT_EQ(read_pfm(dir.path() / "p.pfm"), m);
}

TEST(Pfm, LayoutIsLittleEndianBottomToTop) {
  TempDir dir("pfm");
  ProbMap m(2, 2);
  m(0, 0) = 0.25;  // top-left
  m(1, 1) = 0.75;  // bottom-right
  write_pfm(dir.path() / "p.pfm", m);
  const std::string bytes = testing_support::slurp(dir.path() / "p.pfm");
  const std::string header = "Pf\n2 2\n-1.0\n";
  ASSERT_EQ(bytes.substr(0, header.size()), header);
  float payload[4];
  std::memcpy(payload, bytes.data() + header.size(), sizeof payload);
  // First stored row is the bottom one.
  EXPECT_EQ(payload[0], 0.0f);
  EXPECT_EQ(payload[1], 0.75f);
  EXPECT_EQ(payload[2], 0.25f);
  EXPECT_EQ(payload[3], 0.0f);
}

TEST(Pfm, RejectsValuesOutsideUnitRangeAndBadMagic) {
  TempDir dir("pfm");
  std::string s = "Pf\n1 1\n-1.0\n";
  const float bad = 2.0f;
  s.append(reinterpret_cast<const char*>(&bad), 4);
  write_file(dir.path() / "bad.pfm", s);
  EXPECT_THROW(read_pfm(dir.path() / "bad.pfm"), FormatError);
  write_file(dir.path() / "rgb.pfm", "PF\n1 1\n-1.0\n............");
  EXPECT_THROW(read_pfm(dir.path() / "rgb.pfm"), FormatError);
}

TEST(Annotations, JsonLinesRoundTrip) {
  TempDir dir("ann");
  std::vector<PolylineAnnotation> anns = {
      {{{1.5, 2.25}, {3, 4}}, CvcClass::PiccLeft, "ph000001"},
      {{{0, 0}, {10, 10}, {20, 5}}, CvcClass::SwanGanz, "ph000002"},
  };
  write_annotations(dir.path() / "a.jsonl", anns);
  const auto back = read_annotations(dir.path() / "a.jsonl");
  ASSERT_EQ(back.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(back[i].image_id, anns[i].image_id);
    EXPECT_EQ(back[i].cvc_class, anns[i].cvc_class);
    EXPECT_EQ(back[i].points, anns[i].points);
  }
  const std::string line = annotation_to_json_line(anns[0]);
  EXPECT_NE(line.find("\"class\":\"PICC_LEFT\""), std::string::npos);
}

TEST(Annotations, MalformedLinesReportTheLine) {
  EXPECT_THROW(annotation_from_json_line("{\"image_id\":\"a\",\"class\":\"NG\",\"points\":[[0,0],[1,1]]}"),
               FormatError);
  EXPECT_THROW(annotation_from_json_line("{not json"), FormatError);
  EXPECT_THROW(annotation_from_json_line("{\"image_id\":\"a\",\"class\":\"IJ\",\"points\":[[0,0,3]]}"), FormatError);
  TempDir dir("ann");
  write_file(dir.path() / "a.jsonl", "{\"image_id\":\"a\",\"class\":\"IJ\",\"points\":[[0,0],[1,1]]}\nnope\n");
  try {
    read_annotations(dir.path() / "a.jsonl");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find(":2:"), std::string::npos);
  }
}
