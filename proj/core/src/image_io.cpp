#include "cvc/image_io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace cvc {

namespace fs = std::filesystem;

void write_file(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create directory " + path.parent_path().string() + ": " + ec.message());
  }
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingFileError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

namespace {

// Parses the whitespace/comment separated header tokens of a PNM-style file
// and returns the offset of the first payload byte.
struct HeaderReader {
  const std::string& bytes;
  std::size_t pos = 0;
  std::string origin;

  std::string token() {
    for (;;) {
      while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
      if (pos < bytes.size() && bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
        continue;
      }
      break;
    }
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    if (start == pos) throw FormatError(origin + ": truncated header");
    return bytes.substr(start, pos - start);
  }

  long integer() {
    const std::string t = token();
    char* end = nullptr;
    const long v = std::strtol(t.c_str(), &end, 10);
    if (*end != '\0') throw FormatError(origin + ": bad header integer '" + t + "'");
    return v;
  }

  double real() {
    const std::string t = token();
    char* end = nullptr;
    const double v = std::strtod(t.c_str(), &end);
    if (*end != '\0') throw FormatError(origin + ": bad header number '" + t + "'");
    return v;
  }

  void single_whitespace() {
    if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos])))
      throw FormatError(origin + ": missing separator before payload");
    ++pos;
  }
};

struct Pgm {
  int width = 0;
  int height = 0;
  long maxval = 0;
  std::vector<long> samples;
};

Pgm parse_pgm(const fs::path& path) {
  const std::string bytes = read_file(path);
  HeaderReader hr{bytes, 0, path.string()};
  if (hr.token() != "P5") throw FormatError(path.string() + ": not a binary PGM (P5)");
  Pgm pgm;
  const long w = hr.integer();
  const long h = hr.integer();
  pgm.maxval = hr.integer();
  if (w < 1 || h < 1 || w > 1 << 15 || h > 1 << 15)
    throw FormatError(path.string() + ": bad dimensions");
  if (pgm.maxval < 1 || pgm.maxval > 65535) throw FormatError(path.string() + ": bad maxval");
  hr.single_whitespace();
  pgm.width = static_cast<int>(w);
  pgm.height = static_cast<int>(h);
  const std::size_t n = static_cast<std::size_t>(w) * static_cast<std::size_t>(h);
  const std::size_t bps = pgm.maxval > 255 ? 2 : 1;
  if (bytes.size() - hr.pos < n * bps) throw FormatError(path.string() + ": truncated payload");
  pgm.samples.resize(n);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + hr.pos);
  for (std::size_t i = 0; i < n; ++i) {
    const long v = bps == 2 ? (long{p[2 * i]} << 8) | p[2 * i + 1] : long{p[i]};
    if (v > pgm.maxval) throw FormatError(path.string() + ": sample exceeds maxval");
    pgm.samples[i] = v;
  }
  return pgm;
}

std::string pgm_header(int w, int h) {
  return "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
}

}  // namespace

void write_pgm(const fs::path& path, const GrayImage& img) {
  std::string bytes = pgm_header(img.width(), img.height());
  const std::size_t off = bytes.size();
  bytes.resize(off + img.size());
  for (std::size_t i = 0; i < img.size(); ++i) {
    const double v = std::clamp(img[i], 0.0, 1.0);
    bytes[off + i] = static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0)));
  }
  write_file(path, bytes);
}

void write_pgm(const fs::path& path, const BinaryMask& mask) {
  std::string bytes = pgm_header(mask.width(), mask.height());
  const std::size_t off = bytes.size();
  bytes.resize(off + mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i)
    bytes[off + i] = static_cast<char>(mask[i] ? 255 : 0);
  write_file(path, bytes);
}

GrayImage read_pgm(const fs::path& path) {
  const Pgm pgm = parse_pgm(path);
  GrayImage img(pgm.width, pgm.height);
  const double scale = 1.0 / static_cast<double>(pgm.maxval);
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<double>(pgm.samples[i]) * scale;
  return img;
}

BinaryMask read_pgm_mask(const fs::path& path) {
  const Pgm pgm = parse_pgm(path);
  BinaryMask mask(pgm.width, pgm.height);
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = 2 * pgm.samples[i] > pgm.maxval ? 1 : 0;
  return mask;
}

void write_pfm(const fs::path& path, const ProbMap& map) {
  std::string bytes =
      "Pf\n" + std::to_string(map.width()) + " " + std::to_string(map.height()) + "\n-1.0\n";
  const std::size_t off = bytes.size();
  bytes.resize(off + 4 * map.size());
  char* dst = bytes.data() + off;
  for (int y = map.height() - 1; y >= 0; --y)
    for (int x = 0; x < map.width(); ++x) {
      auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(map(x, y)));
      for (int b = 0; b < 4; ++b) *dst++ = static_cast<char>((bits >> (8 * b)) & 0xffu);
    }
  write_file(path, bytes);
}

ProbMap read_pfm(const fs::path& path) {
  const std::string bytes = read_file(path);
  HeaderReader hr{bytes, 0, path.string()};
  const std::string magic = hr.token();
  if (magic != "Pf") throw FormatError(path.string() + ": not a grayscale PFM (Pf)");
  const long w = hr.integer();
  const long h = hr.integer();
  const double scale = hr.real();
  if (w < 1 || h < 1 || w > 1 << 15 || h > 1 << 15)
    throw FormatError(path.string() + ": bad dimensions");
  if (scale == 0.0 || !std::isfinite(scale)) throw FormatError(path.string() + ": bad scale");
  hr.single_whitespace();
  const std::size_t n = static_cast<std::size_t>(w) * static_cast<std::size_t>(h);
  if (bytes.size() - hr.pos < 4 * n) throw FormatError(path.string() + ": truncated payload");
  const bool little = scale < 0.0;
  ProbMap map(static_cast<int>(w), static_cast<int>(h));
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + hr.pos);
  for (long y = h - 1; y >= 0; --y)
    for (long x = 0; x < w; ++x) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b)
        bits |= std::uint32_t{p[b]} << (little ? 8 * b : 8 * (3 - b));
      p += 4;
      const float v = std::bit_cast<float>(bits);
      if (!(v >= 0.0f && v <= 1.0f)) throw FormatError(path.string() + ": value outside [0,1]");
      map(static_cast<int>(x), static_cast<int>(y)) = v;
    }
  return map;
}

std::string annotation_to_json_line(const PolylineAnnotation& ann) {
  nlohmann::ordered_json j;
  j["image_id"] = ann.image_id;
  j["class"] = std::string(to_string(ann.cvc_class));
  auto pts = nlohmann::ordered_json::array();
  for (const auto& p : ann.points) pts.push_back({p.x, p.y});
  j["points"] = std::move(pts);
  return j.dump();
}

PolylineAnnotation annotation_from_json_line(const std::string& line) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("annotation line: ") + e.what());
  }
  if (!j.is_object() || !j.contains("image_id") || !j.contains("class") || !j.contains("points"))
    throw FormatError("annotation line: expected keys image_id, class, points");
  PolylineAnnotation ann;
  try {
    ann.image_id = j.at("image_id").get<std::string>();
    const auto cls = parse_cvc_class(j.at("class").get<std::string>());
    if (!cls) throw FormatError("annotation line: unknown class '" + j.at("class").get<std::string>() + "'");
    ann.cvc_class = *cls;
    for (const auto& pt : j.at("points")) {
      if (!pt.is_array() || pt.size() != 2) throw FormatError("annotation line: point must be [x,y]");
      ann.points.push_back({pt[0].get<double>(), pt[1].get<double>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("annotation line: ") + e.what());
  }
  return ann;
}

void write_annotations(const fs::path& path, const std::vector<PolylineAnnotation>& anns) {
  std::string bytes;
  for (const auto& a : anns) {
    bytes += annotation_to_json_line(a);
    bytes += '\n';
  }
  write_file(path, bytes);
}

std::vector<PolylineAnnotation> read_annotations(const fs::path& path) {
  std::istringstream in(read_file(path));
  std::vector<PolylineAnnotation> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(annotation_from_json_line(line));
    } catch (const FormatError& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace cvc
