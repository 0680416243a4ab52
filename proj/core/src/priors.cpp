#include "cvc/priors.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "cvc/image_io.hpp"

namespace cvc {

namespace fs = std::filesystem;

const ProbMap& PriorAtlas::prior(CvcClass c) const {
  const auto it = maps.find(c);
  if (it == maps.end()) throw InvalidArgumentError("atlas has no prior for " + std::string(to_string(c)));
  return it->second;
}

ProbMap build_prior(const std::vector<PolylineAnnotation>& annotations, int width, int height,
                    double thickness, double sigma) {
  if (annotations.empty()) throw InvalidArgumentError("build_prior: no annotations");
  const CvcClass cls = annotations.front().cvc_class;
  std::vector<std::uint32_t> hits(static_cast<std::size_t>(width) * height, 0);
  for (const auto& a : annotations) {
    if (a.cvc_class != cls) throw InvalidArgumentError("build_prior: annotations mix classes");
    const BinaryMask m = rasterize_polyline(a, width, height, thickness);
    for (std::size_t i = 0; i < m.size(); ++i) hits[i] += m[i];
  }
  ProbMap mean(width, height);
  const double n = static_cast<double>(annotations.size());
  for (std::size_t i = 0; i < mean.size(); ++i) mean[i] = static_cast<double>(hits[i]) / n;
  return gaussian_blur(mean, sigma);
}

double default_prior_sigma(int width, int height) {
  return 8.0 * static_cast<double>(std::max(width, height)) / 512.0;
}

PriorAtlas build_atlas(const std::vector<PolylineAnnotation>& annotations, int width, int height,
                       double thickness, double sigma) {
  PriorAtlas atlas;
  atlas.width = width;
  atlas.height = height;
  atlas.sigma = sigma;
  atlas.thickness = thickness;
  std::map<CvcClass, std::vector<PolylineAnnotation>> by_class;
  for (const auto& a : annotations) by_class[a.cvc_class].push_back(a);
  for (CvcClass c : kAllCvcClasses) {
    const auto it = by_class.find(c);
    if (it == by_class.end()) continue;
    ProbMap p = build_prior(it->second, width, height, thickness, sigma);
    for (double& v : p.pixels()) v = static_cast<double>(static_cast<float>(v));
    atlas.classes.push_back(c);
    atlas.maps.emplace(c, std::move(p));
    atlas.counts[c] = static_cast<int>(it->second.size());
  }
  if (atlas.classes.empty()) throw InvalidArgumentError("build_atlas: no annotations");
  return atlas;
}

void save_atlas(const PriorAtlas& atlas, const fs::path& dir) {
  nlohmann::ordered_json j;
  j["version"] = atlas.version;
  j["resolution"] = {atlas.width, atlas.height};
  j["sigma"] = atlas.sigma;
  j["thickness"] = atlas.thickness;
  auto classes = nlohmann::ordered_json::array();
  for (CvcClass c : atlas.classes) {
    const std::string name(to_string(c));
    write_pfm(dir / (name + ".pfm"), atlas.prior(c));
    classes.push_back({{"class", name}, {"count", atlas.counts.at(c)}, {"file", name + ".pfm"}});
  }
  j["classes"] = std::move(classes);
  write_file(dir / "atlas.json", j.dump(2) + "\n");
}

PriorAtlas load_atlas(const fs::path& dir) {
  const fs::path meta = dir / "atlas.json";
  if (!fs::exists(meta)) throw MissingFileError("atlas metadata not found: " + meta.string());
  PriorAtlas atlas;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(meta));
    atlas.version = j.at("version").get<int>();
    if (atlas.version != 1) throw FormatError(meta.string() + ": unsupported atlas version");
    const auto& res = j.at("resolution");
    if (!res.is_array() || res.size() != 2) throw FormatError(meta.string() + ": resolution must be [w,h]");
    atlas.width = res[0].get<int>();
    atlas.height = res[1].get<int>();
    atlas.sigma = j.at("sigma").get<double>();
    atlas.thickness = j.at("thickness").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(meta.string() + ": " + e.what());
  }
  if (atlas.width < 1 || atlas.height < 1) throw FormatError(meta.string() + ": bad resolution");

  std::vector<std::pair<CvcClass, std::string>> listed;
  try {
    for (const auto& c : j.at("classes")) {
      const auto cls = parse_cvc_class(c.at("class").get<std::string>());
      if (!cls) throw FormatError(meta.string() + ": unknown class " + c.at("class").get<std::string>());
      atlas.counts[*cls] = c.at("count").get<int>();
      if (atlas.counts[*cls] < 1) throw FormatError(meta.string() + ": class count must be >= 1");
      listed.emplace_back(*cls, c.at("file").get<std::string>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(meta.string() + ": " + e.what());
  }
  std::sort(listed.begin(), listed.end());
  for (const auto& [cls, file] : listed) {
    const fs::path p = dir / file;
    if (!fs::exists(p)) throw MissingFileError("atlas prior missing: " + p.string());
    ProbMap m = read_pfm(p);
    if (m.width() != atlas.width || m.height() != atlas.height)
      throw ResolutionMismatchError(p.string() + ": prior is " + std::to_string(m.width()) + "x" +
                                    std::to_string(m.height()) + ", atlas says " +
                                    std::to_string(atlas.width) + "x" + std::to_string(atlas.height));
    atlas.classes.push_back(cls);
    atlas.maps.emplace(cls, std::move(m));
  }
  if (atlas.classes.empty()) throw FormatError(meta.string() + ": atlas lists no classes");
  return atlas;
}

ProbMap prior_overlap(const ProbMap& seg, const ProbMap& prior) {
  require_same_shape(seg, prior, "prior_overlap");
  ProbMap out(seg.width(), seg.height());
  for (std::size_t i = 0; i < seg.size(); ++i) out[i] = seg[i] * prior[i];
  return out;
}

}  // namespace cvc
