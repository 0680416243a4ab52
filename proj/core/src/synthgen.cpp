#include "cvc/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include <json.hpp>

#include "config_json.hpp"
#include "cvc/image_io.hpp"

namespace cvc {

namespace fs = std::filesystem;

std::string region_file_tag(AnatomyRegion r) {
  std::string s(to_string(r));
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

std::map<CvcClass, double> default_class_mix() {
  const double picc = 4249.0;
  const double total = 4249.0 + 1651.0 + 201.0 + 192.0;
  return {{CvcClass::PiccLeft, 0.5 * picc / total},
          {CvcClass::PiccRight, 0.5 * picc / total},
          {CvcClass::IJ, 1651.0 / total},
          {CvcClass::Subclavian, 201.0 / total},
          {CvcClass::SwanGanz, 192.0 / total}};
}

void PhantomConfig::validate() const {
  auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
  if (width < 8 || height < 8) throw ConfigError("phantom: width/height must be >= 8");
  if (!prob(p_no_catheter) || !prob(p_multi_catheter) || !prob(p_distractor))
    throw ConfigError("phantom: probabilities must lie in [0,1]");
  if (!(noise_sigma >= 0.0)) throw ConfigError("phantom: noise_sigma must be >= 0");
  if (!(catheter_thickness >= 1.0)) throw ConfigError("phantom: catheter_thickness must be >= 1");
  if (!std::isfinite(catheter_contrast)) throw ConfigError("phantom: catheter_contrast must be finite");
  double sum = 0.0;
  for (const auto& [cls, p] : class_mix) {
    if (!prob(p)) throw ConfigError("phantom: class_mix entries must lie in [0,1]");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-6) throw ConfigError("phantom: class_mix must sum to 1");
}

std::string phantom_id(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "ph%06zu", index);
  return buf;
}

namespace {

// Template layout in normalized coordinates (u right, v down).
struct Ellipse {
  double cu, cv, ru, rv;
  bool contains(double u, double v) const {
    const double a = (u - cu) / ru;
    const double b = (v - cv) / rv;
    return a * a + b * b <= 1.0;
  }
};

struct Capsule {
  double u0, v0, u1, v1, half;
  bool contains(double u, double v) const {
    const double du = u1 - u0;
    const double dv = v1 - v0;
    double t = ((u - u0) * du + (v - v0) * dv) / (du * du + dv * dv);
    t = std::clamp(t, 0.0, 1.0);
    const double eu = u0 + t * du - u;
    const double ev = v0 + t * dv - v;
    return eu * eu + ev * ev <= half * half;
  }
};

constexpr Ellipse kBody{0.50, 0.56, 0.47, 0.52};
constexpr Ellipse kLungs[2] = {{0.31, 0.52, 0.15, 0.30}, {0.69, 0.52, 0.15, 0.30}};
constexpr Ellipse kMediastinum{0.50, 0.42, 0.075, 0.32};
constexpr Ellipse kHeart{0.53, 0.66, 0.15, 0.11};
constexpr Capsule kClavicles[2] = {{0.16, 0.19, 0.44, 0.25, 0.035},
                                   {0.84, 0.19, 0.56, 0.25, 0.035}};

constexpr double kAir = 0.08;
constexpr double kSoftTissue = 0.45;
constexpr double kLung = 0.22;
constexpr double kMediastinumLevel = 0.62;
constexpr double kHeartLevel = 0.66;
constexpr double kBone = 0.62;

// Control point (u, v) with a uniform jitter half-width per axis.
struct ControlPoint {
  double u, v, ju, jv;
};

using Corridor = std::vector<ControlPoint>;

const Corridor& corridor(CvcClass c) {
  static const Corridor ij = {{0.400, 0.005, 0.015, 0.004}, {0.425, 0.120, 0.012, 0.012},
                              {0.455, 0.240, 0.010, 0.012}, {0.480, 0.350, 0.008, 0.015},
                              {0.490, 0.450, 0.008, 0.025}};
  static const Corridor subclavian = {{0.210, 0.285, 0.020, 0.008}, {0.320, 0.300, 0.012, 0.008},
                                      {0.420, 0.310, 0.010, 0.008}, {0.475, 0.360, 0.008, 0.012},
                                      {0.490, 0.455, 0.008, 0.025}};
  static const Corridor picc_left = {{0.012, 0.340, 0.006, 0.030}, {0.080, 0.245, 0.012, 0.012},
                                     {0.170, 0.170, 0.012, 0.010}, {0.300, 0.160, 0.012, 0.008},
                                     {0.420, 0.195, 0.010, 0.010}, {0.475, 0.290, 0.008, 0.012},
                                     {0.490, 0.430, 0.008, 0.025}};
  static const Corridor picc_right = [] {
    Corridor c = picc_left;
    for (auto& p : c) p.u = 1.0 - p.u;
    return c;
  }();
  static const Corridor swan_ganz = {{0.600, 0.005, 0.015, 0.004}, {0.575, 0.120, 0.012, 0.012},
                                     {0.535, 0.250, 0.010, 0.012}, {0.510, 0.400, 0.010, 0.015},
                                     {0.500, 0.580, 0.012, 0.015}, {0.560, 0.710, 0.012, 0.012},
                                     {0.650, 0.670, 0.012, 0.012}, {0.640, 0.540, 0.012, 0.012},
                                     {0.620, 0.450, 0.015, 0.020}};
  switch (c) {
    case CvcClass::PiccLeft: return picc_left;
    case CvcClass::PiccRight: return picc_right;
    case CvcClass::IJ: return ij;
    case CvcClass::Subclavian: return subclavian;
    case CvcClass::SwanGanz: return swan_ganz;
  }
  return ij;
}

// Feeding-tube style distractor: straight down the midline past the heart.
const Corridor kDistractor = {{0.505, 0.002, 0.010, 0.000}, {0.500, 0.150, 0.010, 0.010},
                              {0.490, 0.400, 0.010, 0.010}, {0.470, 0.600, 0.015, 0.015},
                              {0.520, 0.820, 0.020, 0.020}, {0.600, 0.960, 0.020, 0.010}};

// Patient positioning: the whole template is shifted and scaled about the
// image center.
struct Pose {
  double du = 0.0, dv = 0.0, scale = 1.0;
  double to_image_u(double u) const { return 0.5 + scale * (u - 0.5) + du; }
  double to_image_v(double v) const { return 0.5 + scale * (v - 0.5) + dv; }
  double to_template_u(double u) const { return 0.5 + (u - 0.5 - du) / scale; }
  double to_template_v(double v) const { return 0.5 + (v - 0.5 - dv) / scale; }
};

AnatomyMasks render_anatomy(const Pose& pose, int w, int h) {
  AnatomyMasks masks;
  for (AnatomyRegion r : kAllRegions) masks.emplace(r, BinaryMask(w, h));
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double u = pose.to_template_u((x + 0.5) / w);
      const double v = pose.to_template_v((y + 0.5) / h);
      if (kLungs[0].contains(u, v) || kLungs[1].contains(u, v)) masks[AnatomyRegion::Lungs](x, y) = 1;
      if (kHeart.contains(u, v)) masks[AnatomyRegion::Heart](x, y) = 1;
      if (kMediastinum.contains(u, v)) masks[AnatomyRegion::Mediastinum](x, y) = 1;
      if (kClavicles[0].contains(u, v) || kClavicles[1].contains(u, v))
        masks[AnatomyRegion::Clavicles](x, y) = 1;
    }
  return masks;
}

ProbMap render_background(const Pose& pose, int w, int h) {
  ProbMap img(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double u = pose.to_template_u((x + 0.5) / w);
      const double v = pose.to_template_v((y + 0.5) / h);
      double level = kBody.contains(u, v) ? kSoftTissue : kAir;
      if (kLungs[0].contains(u, v) || kLungs[1].contains(u, v)) level = kLung;
      if (kMediastinum.contains(u, v)) level = kMediastinumLevel;
      if (kHeart.contains(u, v)) level = kHeartLevel;
      if (kClavicles[0].contains(u, v) || kClavicles[1].contains(u, v)) level = kBone;
      img(x, y) = level;
    }
  return gaussian_blur(img, std::max(0.5, 2.0 * w / 128.0));
}

Point2 catmull_rom(const Point2& p0, const Point2& p1, const Point2& p2, const Point2& p3,
                   double t) {
  const double t2 = t * t;
  const double t3 = t2 * t;
  auto eval = [&](double a, double b, double c, double d) {
    return 0.5 * (2.0 * b + (-a + c) * t + (2.0 * a - 5.0 * b + 4.0 * c - d) * t2 +
                  (-a + 3.0 * b - 3.0 * c + d) * t3);
  };
  return {eval(p0.x, p1.x, p2.x, p3.x), eval(p0.y, p1.y, p2.y, p3.y)};
}

// Smooth pixel-space polyline through jittered corridor control points.
std::vector<Point2> sample_path(const Corridor& cor, const Pose& pose, int w, int h, Rng& rng) {
  std::vector<Point2> ctrl;
  ctrl.reserve(cor.size());
  for (const auto& cp : cor) {
    const double u = cp.u + rng.uniform(-cp.ju, cp.ju);
    const double v = cp.v + rng.uniform(-cp.jv, cp.jv);
    ctrl.push_back({pose.to_image_u(u) * w - 0.5, pose.to_image_v(v) * h - 0.5});
  }
  auto clamp_point = [&](Point2 p) {
    return Point2{std::clamp(p.x, 0.0, w - 1.0), std::clamp(p.y, 0.0, h - 1.0)};
  };
  std::vector<Point2> path;
  const std::size_t n = ctrl.size();
  for (std::size_t i = 0; i + 1 < n; ++i) {
    const Point2& p0 = ctrl[i == 0 ? 0 : i - 1];
    const Point2& p1 = ctrl[i];
    const Point2& p2 = ctrl[i + 1];
    const Point2& p3 = ctrl[std::min(i + 2, n - 1)];
    const double len = std::hypot(p2.x - p1.x, p2.y - p1.y);
    const int steps = std::max(2, static_cast<int>(std::ceil(len)));
    for (int s = 0; s < steps; ++s) {
      const Point2 q = clamp_point(catmull_rom(p0, p1, p2, p3, static_cast<double>(s) / steps));
      if (path.empty() || !(path.back() == q)) path.push_back(q);
    }
  }
  const Point2 last = clamp_point(ctrl.back());
  if (path.empty() || !(path.back() == last)) path.push_back(last);
  if (path.size() < 2) path.push_back(clamp_point({last.x + 1.0, last.y}));
  return path;
}

CvcClass draw_class(const std::map<CvcClass, double>& mix, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  CvcClass last = CvcClass::IJ;
  for (CvcClass c : kAllCvcClasses) {
    const auto it = mix.find(c);
    if (it == mix.end() || it->second <= 0.0) continue;
    acc += it->second;
    last = c;
    if (u < acc) return c;
  }
  return last;
}

std::size_t nonzero_classes(const std::map<CvcClass, double>& mix) {
  return static_cast<std::size_t>(
      std::count_if(mix.begin(), mix.end(), [](const auto& kv) { return kv.second > 0.0; }));
}

}  // namespace

AnatomyMasks template_anatomy(int width, int height) {
  return render_anatomy(Pose{}, width, height);
}

BinaryMask catheter_mask(const std::vector<PolylineAnnotation>& catheters, int width, int height,
                         double thickness) {
  BinaryMask mask(width, height);
  for (const auto& c : catheters) mask = mask_union(mask, rasterize_polyline(c, width, height, thickness));
  return mask;
}

Phantom generate_phantom(const PhantomConfig& config, std::size_t index) {
  config.validate();
  const int w = config.width;
  const int h = config.height;
  Rng rng(Rng::derive(config.seed, index));

  Pose pose;
  pose.du = rng.uniform(-0.02, 0.02);
  pose.dv = rng.uniform(-0.02, 0.02);
  pose.scale = rng.uniform(0.96, 1.04);

  Phantom ph;
  ph.id = phantom_id(index);

  std::vector<CvcClass> classes;
  if (!rng.bernoulli(config.p_no_catheter)) {
    classes.push_back(draw_class(config.class_mix, rng));
    if (rng.bernoulli(config.p_multi_catheter) && nonzero_classes(config.class_mix) > 1) {
      CvcClass second = draw_class(config.class_mix, rng);
      while (second == classes.front()) second = draw_class(config.class_mix, rng);
      classes.push_back(second);
    }
  }
  for (CvcClass c : classes) {
    PolylineAnnotation ann;
    ann.cvc_class = c;
    ann.image_id = ph.id;
    ann.points = sample_path(corridor(c), pose, w, h, rng);
    ph.catheters.push_back(std::move(ann));
  }
  if (rng.bernoulli(config.p_distractor)) ph.distractors.push_back(sample_path(kDistractor, pose, w, h, rng));

  ProbMap canvas = render_background(pose, w, h);
  for (const auto& c : ph.catheters) {
    const BinaryMask m = rasterize_polyline(c, w, h, config.catheter_thickness);
    for (std::size_t i = 0; i < m.size(); ++i)
      if (m[i]) canvas[i] += config.catheter_contrast;
  }
  for (const auto& d : ph.distractors) {
    PolylineAnnotation tube{d, CvcClass::IJ, ph.id};
    const BinaryMask m = rasterize_polyline(tube, w, h, 1.5 * config.catheter_thickness);
    for (std::size_t i = 0; i < m.size(); ++i)
      if (m[i]) canvas[i] += config.catheter_contrast;
  }
  ph.image = GrayImage(w, h);
  for (std::size_t i = 0; i < canvas.size(); ++i)
    ph.image[i] = std::clamp(canvas[i] + config.noise_sigma * rng.normal(), 0.0, 1.0);

  ph.anatomy = render_anatomy(pose, w, h);
  ph.labels.presence = !ph.catheters.empty();
  for (const auto& c : ph.catheters) ph.labels.types[index_of(type_of(c.cvc_class))] = true;
  return ph;
}

namespace {

nlohmann::ordered_json entry_to_json(const CorpusEntry& e) {
  nlohmann::ordered_json j;
  j["id"] = e.id;
  j["image"] = e.image.generic_string();
  nlohmann::ordered_json anat = nlohmann::ordered_json::object();
  for (const auto& [r, p] : e.anatomy) anat[std::string(to_string(r))] = p.generic_string();
  j["anatomy"] = std::move(anat);
  j["presence"] = e.labels.presence;
  nlohmann::ordered_json types = nlohmann::ordered_json::object();
  for (CatheterType t : kAllTypes) types[std::string(to_string(t))] = e.labels.types[index_of(t)];
  j["types"] = std::move(types);
  auto cls = nlohmann::ordered_json::array();
  for (CvcClass c : e.classes) cls.push_back(std::string(to_string(c)));
  j["classes"] = std::move(cls);
  j["distractors"] = e.distractors;
  return j;
}

CorpusEntry entry_from_json(const nlohmann::json& j) {
  CorpusEntry e;
  e.id = j.at("id").get<std::string>();
  e.image = j.at("image").get<std::string>();
  for (AnatomyRegion r : kAllRegions)
    e.anatomy[r] = j.at("anatomy").at(std::string(to_string(r))).get<std::string>();
  e.labels.presence = j.at("presence").get<bool>();
  for (CatheterType t : kAllTypes)
    e.labels.types[index_of(t)] = j.at("types").at(std::string(to_string(t))).get<bool>();
  for (const auto& c : j.at("classes")) {
    const auto cls = parse_cvc_class(c.get<std::string>());
    if (!cls) throw FormatError("manifest: unknown class " + c.get<std::string>());
    e.classes.push_back(*cls);
  }
  e.distractors = j.value("distractors", 0);
  return e;
}

}  // namespace

CorpusManifest generate_corpus(const PhantomConfig& config, std::size_t n, const fs::path& out_dir) {
  config.validate();
  if (n < 1) throw InvalidArgumentError("generate_corpus: n must be >= 1");
  std::error_code ec;
  fs::create_directories(out_dir / "images", ec);
  if (!ec) fs::create_directories(out_dir / "anatomy", ec);
  if (ec) throw IoError("cannot create corpus directory " + out_dir.string() + ": " + ec.message());

  CorpusManifest manifest;
  manifest.width = config.width;
  manifest.height = config.height;
  manifest.catheter_thickness = config.catheter_thickness;
  manifest.seed = config.seed;
  manifest.entries.resize(n);
  std::vector<std::vector<PolylineAnnotation>> anns(n);

  parallel_for(n, [&](std::size_t i) {
    const Phantom ph = generate_phantom(config, i);
    CorpusEntry& e = manifest.entries[i];
    e.id = ph.id;
    e.image = fs::path("images") / (ph.id + ".pgm");
    write_pgm(out_dir / e.image, ph.image);
    for (const auto& [region, mask] : ph.anatomy) {
      e.anatomy[region] = fs::path("anatomy") / (ph.id + "." + region_file_tag(region) + ".pgm");
      write_pgm(out_dir / e.anatomy[region], mask);
    }
    e.labels = ph.labels;
    for (const auto& c : ph.catheters) e.classes.push_back(c.cvc_class);
    e.distractors = static_cast<int>(ph.distractors.size());
    anns[i] = ph.catheters;
  });

  std::vector<PolylineAnnotation> all;
  for (auto& a : anns) all.insert(all.end(), a.begin(), a.end());
  write_annotations(out_dir / "annotations.jsonl", all);

  nlohmann::ordered_json j;
  j["version"] = manifest.version;
  j["width"] = manifest.width;
  j["height"] = manifest.height;
  j["catheter_thickness"] = manifest.catheter_thickness;
  j["seed"] = manifest.seed;
  j["config"] = detail::to_json(config);
  auto entries = nlohmann::ordered_json::array();
  for (const auto& e : manifest.entries) entries.push_back(entry_to_json(e));
  j["phantoms"] = std::move(entries);
  write_file(out_dir / "manifest.json", j.dump(2) + "\n");
  return manifest;
}

CorpusManifest load_manifest(const fs::path& corpus_dir) {
  const fs::path path = corpus_dir / "manifest.json";
  if (!fs::exists(path)) throw MissingFileError("corpus manifest not found: " + path.string());
  CorpusManifest m;
  try {
    const auto j = nlohmann::json::parse(read_file(path));
    m.version = j.at("version").get<int>();
    if (m.version != 1) throw FormatError(path.string() + ": unsupported manifest version");
    m.width = j.at("width").get<int>();
    m.height = j.at("height").get<int>();
    m.catheter_thickness = j.at("catheter_thickness").get<double>();
    m.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& e : j.at("phantoms")) m.entries.push_back(entry_from_json(e));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return m;
}

std::vector<CorpusItem> load_corpus(const fs::path& corpus_dir) {
  const CorpusManifest m = load_manifest(corpus_dir);
  std::map<std::string, std::vector<PolylineAnnotation>> by_id;
  for (auto& a : read_annotations(corpus_dir / "annotations.jsonl")) by_id[a.image_id].push_back(std::move(a));

  std::vector<CorpusItem> items(m.entries.size());
  parallel_for(items.size(), [&](std::size_t i) {
    CorpusItem& it = items[i];
    it.entry = m.entries[i];
    it.image = read_pgm(corpus_dir / it.entry.image);
    for (const auto& [r, p] : it.entry.anatomy) it.anatomy[r] = read_pgm_mask(corpus_dir / p);
    if (const auto f = by_id.find(it.entry.id); f != by_id.end()) it.catheters = f->second;
  });
  return items;
}

}  // namespace cvc
