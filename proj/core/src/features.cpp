#include "cvc/features.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <sstream>

#include <json.hpp>

#include "cvc/image_io.hpp"

namespace cvc {

void HogConfig::validate() const {
  if (cell_size < 1) throw ConfigError("hog: cell_size must be >= 1");
  if (n_orientations < 2) throw ConfigError("hog: n_orientations must be >= 2");
}

void FeatureConfig::validate() const {
  if (n_bins < 1) throw ConfigError("features: n_bins must be >= 1");
  if (!(seg_threshold >= 0.0 && seg_threshold < 1.0)) throw ConfigError("features: seg_threshold must lie in [0,1)");
  hog.validate();
}

std::uint64_t FeatureSchema::hash() const {
  std::uint64_t h = fnv1a("cvc-features-v1");
  for (const auto& n : names) {
    h = fnv1a(n, h);
    h = fnv1a(std::string_view("\n", 1), h);
  }
  return h;
}

std::vector<double> overlap_histogram(const ProbMap& overlap, const BinaryMask& seg_mask, int n_bins) {
  require_same_shape(overlap, seg_mask, "overlap_histogram");
  if (n_bins < 1) throw InvalidArgumentError("overlap_histogram: n_bins must be >= 1");
  std::vector<double> out(static_cast<std::size_t>(n_bins) + 1, 0.0);
  std::size_t n = 0;
  for (std::size_t i = 0; i < overlap.size(); ++i) {
    if (!seg_mask[i]) continue;
    ++n;
    const double v = std::clamp(overlap[i], 0.0, 1.0);
    const int b = std::min(n_bins - 1, static_cast<int>(v * n_bins));
    out[static_cast<std::size_t>(b) + 1] += 1.0;
  }
  out[0] = static_cast<double>(n);
  if (n > 0)
    for (std::size_t b = 1; b < out.size(); ++b) out[b] /= static_cast<double>(n);
  return out;
}

std::vector<double> hog(const ProbMap& map, const HogConfig& cfg) {
  cfg.validate();
  const int w = map.width();
  const int h = map.height();
  if (w % cfg.cell_size != 0 || h % cfg.cell_size != 0)
    throw InvalidArgumentError("hog: image dimensions must be divisible by cell_size");
  const int cells_x = w / cfg.cell_size;
  const int cells_y = h / cfg.cell_size;
  const int nb = cfg.n_orientations;
  const double range = cfg.signed_gradients ? 2.0 * std::numbers::pi : std::numbers::pi;
  const double bin_width = range / nb;

  std::vector<double> out(static_cast<std::size_t>(cells_x) * cells_y * nb, 0.0);
  double total = 0.0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double gx = 0.5 * (map(std::min(x + 1, w - 1), y) - map(std::max(x - 1, 0), y));
      const double gy = 0.5 * (map(x, std::min(y + 1, h - 1)) - map(x, std::max(y - 1, 0)));
      const double mag = std::sqrt(gx * gx + gy * gy);
      if (mag <= 0.0) continue;
      double theta = std::atan2(gy, gx);
      theta = std::fmod(theta + 2.0 * range, range);
      const double pos = theta / bin_width;
      int b0 = static_cast<int>(std::floor(pos));
      const double frac = pos - b0;
      b0 %= nb;
      const int b1 = (b0 + 1) % nb;
      const std::size_t cell = static_cast<std::size_t>(y / cfg.cell_size) * cells_x + x / cfg.cell_size;
      out[cell * nb + b0] += mag * (1.0 - frac);
      out[cell * nb + b1] += mag * frac;
      total += mag;
    }
  if (total > 0.0)
    for (double& v : out) v /= total;
  return out;
}

namespace {

double percentile(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) return 0.0;
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

}  // namespace

std::vector<double> anatomy_distance_features(const BinaryMask& seg_mask, const AnatomyMasks& anatomy) {
  std::vector<double> out;
  out.reserve(kAllRegions.size() * 5 + 1);
  std::vector<std::pair<int, int>> pixels;
  for (int y = 0; y < seg_mask.height(); ++y)
    for (int x = 0; x < seg_mask.width(); ++x)
      if (seg_mask(x, y)) pixels.emplace_back(x, y);
  const double diag = std::hypot(static_cast<double>(seg_mask.width()), static_cast<double>(seg_mask.height()));

  for (AnatomyRegion r : kAllRegions) {
    const auto it = anatomy.find(r);
    if (it == anatomy.end())
      throw InvalidArgumentError("anatomy_distance_features: missing region " + std::string(to_string(r)));
    const BinaryMask& region = it->second;
    require_same_shape(seg_mask, region, "anatomy_distance_features");
    double cx = 0.0, cy = 0.0;
    std::size_t n = 0;
    for (int y = 0; y < region.height(); ++y)
      for (int x = 0; x < region.width(); ++x)
        if (region(x, y)) {
          cx += x;
          cy += y;
          ++n;
        }
    if (n == 0)
      throw InvalidArgumentError("anatomy_distance_features: empty region " + std::string(to_string(r)));
    cx /= static_cast<double>(n);
    cy /= static_cast<double>(n);

    if (pixels.empty()) {
      out.insert(out.end(), 5, 0.0);
      continue;
    }
    std::vector<double> d;
    d.reserve(pixels.size());
    double sum = 0.0;
    for (const auto& [x, y] : pixels) {
      d.push_back(std::hypot(x - cx, y - cy) / diag);
      sum += d.back();
    }
    const double mean = sum / static_cast<double>(d.size());
    double var = 0.0;
    for (double v : d) var += (v - mean) * (v - mean);
    std::sort(d.begin(), d.end());
    out.push_back(mean);
    out.push_back(std::sqrt(var / static_cast<double>(d.size())));
    out.push_back(percentile(d, 0.10));
    out.push_back(percentile(d, 0.50));
    out.push_back(percentile(d, 0.90));
  }
  out.push_back(pixels.empty() ? 1.0 : 0.0);
  return out;
}

ShapeSize shape_size_features(const BinaryMask& seg_mask) {
  ShapeSize s;
  const std::size_t n = count(seg_mask);
  if (n == 0) return s;
  s.area = static_cast<double>(n) / static_cast<double>(seg_mask.size());
  const auto comps = connected_components(seg_mask);
  s.n_components = static_cast<double>(comps.size());
  const Component* largest = &comps.front();
  for (const auto& c : comps)
    if (c.size() > largest->size()) largest = &c;

  const int w = seg_mask.width();
  double mx = 0.0, my = 0.0;
  for (std::size_t i : *largest) {
    mx += static_cast<double>(i % w);
    my += static_cast<double>(i / w);
  }
  const double m = static_cast<double>(largest->size());
  mx /= m;
  my /= m;
  double sxx = 0.0, syy = 0.0, sxy = 0.0;
  for (std::size_t i : *largest) {
    const double dx = static_cast<double>(i % w) - mx;
    const double dy = static_cast<double>(i / w) - my;
    sxx += dx * dx;
    syy += dy * dy;
    sxy += dx * dy;
  }
  // Major axis angle of the 2x2 covariance.
  const double angle = 0.5 * std::atan2(2.0 * sxy, sxx - syy);
  const double ux = std::cos(angle), uy = std::sin(angle);
  double lo1 = 1e300, hi1 = -1e300, lo2 = 1e300, hi2 = -1e300;
  for (std::size_t i : *largest) {
    const double dx = static_cast<double>(i % w) - mx;
    const double dy = static_cast<double>(i / w) - my;
    const double p1 = dx * ux + dy * uy;
    const double p2 = -dx * uy + dy * ux;
    lo1 = std::min(lo1, p1);
    hi1 = std::max(hi1, p1);
    lo2 = std::min(lo2, p2);
    hi2 = std::max(hi2, p2);
  }
  const double diag = std::hypot(static_cast<double>(w), static_cast<double>(seg_mask.height()));
  s.length = (hi1 - lo1 + 1.0) / diag;
  s.width = (hi2 - lo2 + 1.0) / diag;
  return s;
}

std::map<CvcClass, double> prior_alignment(const ProbMap& seg, const PriorAtlas& atlas, double seg_threshold) {
  const BinaryMask mask = threshold(seg, seg_threshold);
  const std::size_t n = count(mask);
  std::map<CvcClass, double> out;
  for (CvcClass c : atlas.classes) {
    const ProbMap ov = prior_overlap(seg, atlas.prior(c));
    double sum = 0.0;
    for (std::size_t i = 0; i < ov.size(); ++i)
      if (mask[i]) sum += ov[i];
    out[c] = n > 0 ? sum / static_cast<double>(n) : 0.0;
  }
  return out;
}

std::shared_ptr<const FeatureSchema> make_schema(const PriorAtlas& atlas, const FeatureConfig& cfg) {
  cfg.validate();
  if (atlas.width % cfg.hog.cell_size != 0 || atlas.height % cfg.hog.cell_size != 0)
    throw InvalidArgumentError("features: atlas resolution not divisible by HoG cell size");
  auto schema = std::make_shared<FeatureSchema>();
  auto& names = schema->names;
  char buf[96];
  const int cells_x = atlas.width / cfg.hog.cell_size;
  const int cells_y = atlas.height / cfg.hog.cell_size;
  for (CvcClass c : atlas.classes) {
    const std::string cls(to_string(c));
    names.push_back("prior." + cls + ".count");
    for (int b = 0; b < cfg.n_bins; ++b) {
      std::snprintf(buf, sizeof buf, "prior.%s.hist%02d", cls.c_str(), b);
      names.emplace_back(buf);
    }
    for (int cy = 0; cy < cells_y; ++cy)
      for (int cx = 0; cx < cells_x; ++cx)
        for (int o = 0; o < cfg.hog.n_orientations; ++o) {
          std::snprintf(buf, sizeof buf, "prior.%s.hog.r%02dc%02do%d", cls.c_str(), cy, cx, o);
          names.emplace_back(buf);
        }
  }
  for (AnatomyRegion r : kAllRegions)
    for (const char* stat : {"mean", "std", "p10", "p50", "p90"})
      names.push_back("anat." + std::string(to_string(r)) + "." + stat);
  names.push_back("anat.empty");
  for (const char* s : {"shape.area", "shape.length", "shape.width", "shape.components"}) names.emplace_back(s);
  return schema;
}

FeatureVector extract_features(const ProbMap& seg, const PriorAtlas& atlas, const AnatomyMasks& anatomy,
                               const FeatureConfig& cfg) {
  return extract_features(seg, atlas, anatomy, cfg, make_schema(atlas, cfg));
}

FeatureVector extract_features(const ProbMap& seg, const PriorAtlas& atlas, const AnatomyMasks& anatomy,
                               const FeatureConfig& cfg, std::shared_ptr<const FeatureSchema> schema) {
  cfg.validate();
  if (seg.width() != atlas.width || seg.height() != atlas.height)
    throw ResolutionMismatchError("extract_features: segmentation is " + std::to_string(seg.width()) + "x" +
                                  std::to_string(seg.height()) + ", atlas is " + std::to_string(atlas.width) +
                                  "x" + std::to_string(atlas.height));
  for (const auto& [r, m] : anatomy)
    if (!m.same_shape(seg))
      throw ResolutionMismatchError("extract_features: anatomy mask " + std::string(to_string(r)) +
                                    " does not match segmentation resolution");
  const BinaryMask mask = threshold(seg, cfg.seg_threshold);
  FeatureVector fv;
  fv.schema = std::move(schema);
  fv.values.reserve(fv.schema->size());
  for (CvcClass c : atlas.classes) {
    const ProbMap ov = prior_overlap(seg, atlas.prior(c));
    const auto hist = overlap_histogram(ov, mask, cfg.n_bins);
    fv.values.insert(fv.values.end(), hist.begin(), hist.end());
    const auto h = hog(ov, cfg.hog);
    fv.values.insert(fv.values.end(), h.begin(), h.end());
  }
  const auto anat = anatomy_distance_features(mask, anatomy);
  fv.values.insert(fv.values.end(), anat.begin(), anat.end());
  const ShapeSize s = shape_size_features(mask);
  fv.values.insert(fv.values.end(), {s.area, s.length, s.width, s.n_components});
  if (fv.values.size() != fv.schema->size())
    throw SchemaMismatchError("extract_features: schema does not match atlas/config");
  return fv;
}

namespace {

std::filesystem::path schema_path_for(const std::filesystem::path& csv) {
  std::filesystem::path p = csv;
  p.replace_extension(".schema.json");
  return p;
}

void append_number(std::string& out, double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  out.append(buf, res.ptr);
}

}  // namespace

void write_feature_table(const std::filesystem::path& csv_path, const FeatureTable& table) {
  if (!table.schema) throw InvalidArgumentError("write_feature_table: missing schema");
  if (table.ids.size() != table.rows.size()) throw InvalidArgumentError("write_feature_table: ids/rows mismatch");
  std::string out = "image_id";
  for (const auto& n : table.schema->names) {
    out += ',';
    out += n;
  }
  out += '\n';
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    if (table.rows[r].size() != table.schema->size())
      throw SchemaMismatchError("write_feature_table: row " + std::to_string(r) + " length mismatch");
    out += table.ids[r];
    for (double v : table.rows[r]) {
      out += ',';
      append_number(out, v);
    }
    out += '\n';
  }
  write_file(csv_path, out);

  nlohmann::ordered_json j;
  j["version"] = 1;
  j["hash"] = hex64(table.schema->hash());
  j["size"] = table.schema->size();
  j["names"] = table.schema->names;
  write_file(schema_path_for(csv_path), j.dump(1) + "\n");
}

FeatureTable read_feature_table(const std::filesystem::path& csv_path) {
  const auto schema_file = schema_path_for(csv_path);
  auto schema = std::make_shared<FeatureSchema>();
  try {
    const auto j = nlohmann::json::parse(read_file(schema_file));
    schema->names = j.at("names").get<std::vector<std::string>>();
    if (j.at("hash").get<std::string>() != hex64(schema->hash()))
      throw FormatError(schema_file.string() + ": schema hash mismatch");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(schema_file.string() + ": " + e.what());
  }

  FeatureTable t;
  t.schema = schema;
  const std::string text = read_file(csv_path);
  std::size_t pos = 0;
  std::size_t lineno = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    const std::string_view line(text.data() + pos, end - pos);
    pos = end + 1;
    ++lineno;
    if (line.empty()) continue;
    if (lineno == 1) {
      std::string expected = "image_id";
      for (const auto& n : schema->names) expected += "," + n;
      if (line != expected) throw SchemaMismatchError(csv_path.string() + ": header does not match schema");
      continue;
    }
    std::vector<double> row;
    row.reserve(schema->size());
    std::size_t f = line.find(',');
    if (f == std::string_view::npos) throw FormatError(csv_path.string() + ": malformed row " + std::to_string(lineno));
    t.ids.emplace_back(line.substr(0, f));
    while (f != std::string_view::npos) {
      const std::size_t next = line.find(',', f + 1);
      const std::string_view cell = line.substr(f + 1, (next == std::string_view::npos ? line.size() : next) - f - 1);
      double v = 0.0;
      const auto res = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (res.ec != std::errc() || res.ptr != cell.data() + cell.size() || !std::isfinite(v))
        throw FormatError(csv_path.string() + ": bad number on line " + std::to_string(lineno));
      row.push_back(v);
      f = next;
    }
    if (row.size() != schema->size())
      throw SchemaMismatchError(csv_path.string() + ": row " + std::to_string(lineno) + " has wrong length");
    t.rows.push_back(std::move(row));
  }
  return t;
}

}  // namespace cvc
