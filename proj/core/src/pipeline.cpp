#include "cvc/pipeline.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>

#include <json.hpp>

#include "config_json.hpp"
#include "cvc/image_io.hpp"
#include "cvc/priors.hpp"

namespace cvc {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

Task parse_task(const std::string& s) {
  if (s == "presence") return Task::Presence;
  if (s == "type") return Task::Type;
  throw ConfigError("unknown task '" + s + "' (expected presence or type)");
}

void RunConfig::validate() const {
  if (n_phantoms < 5) throw ConfigError("n_phantoms must be >= 5 for 5-fold evaluation");
  phantom.validate();
  if (segmenter != "ridge" && segmenter != "segnet" && segmenter != "truth")
    throw ConfigError("segmenter.method must be ridge, segnet or truth");
  if (!(ridge_scale > 0.0)) throw ConfigError("segmenter.ridge_scale must be > 0");
  if (!(ridge_threshold > 0.0 && ridge_threshold < 1.0)) throw ConfigError("segmenter.ridge_threshold must be in (0,1)");
  if (!(prior_sigma >= 0.0)) throw ConfigError("priors.sigma must be >= 0");
  loss.validate();
  train.validate();
  features.validate();
  if (grid.empty()) throw ConfigError("forest.grid must not be empty");
  for (const auto& g : grid) g.validate();
  if (overlap_radii.empty() || overlap_thresholds.empty()) throw ConfigError("eval radii/thresholds must not be empty");
}

// ---------------------------------------------------------------------------
// Config documents

namespace {

std::string joined(const std::vector<std::string>& v) {
  std::string s;
  for (const auto& x : v) s += (s.empty() ? "" : ", ") + x;
  return s;
}

void apply_json(RunConfig& cfg, const nlohmann::json& j) {
  std::vector<std::string> unknown;
  detail::Reader top(j, "", unknown);
  std::string run_dir = cfg.run_dir.string();
  top.get("run_dir", run_dir).get("n_phantoms", cfg.n_phantoms);
  cfg.run_dir = run_dir;
  if (const auto* p = top.child("phantom")) detail::from_json(*p, cfg.phantom, "phantom.", unknown);
  if (const auto* s = top.child("segmenter")) {
    detail::Reader r(*s, "segmenter.", unknown);
    r.get("method", cfg.segmenter).get("ridge_scale", cfg.ridge_scale).get("ridge_threshold", cfg.ridge_threshold);
    r.finish();
  }
  if (const auto* p = top.child("priors")) {
    detail::Reader r(*p, "priors.", unknown);
    r.get("sigma", cfg.prior_sigma);
    r.finish();
  }
  if (const auto* l = top.child("loss")) detail::from_json(*l, cfg.loss, "loss.", unknown);
  if (const auto* t = top.child("train")) detail::from_json(*t, cfg.train, "train.", unknown);
  if (const auto* f = top.child("features")) detail::from_json(*f, cfg.features, "features.", unknown);
  if (const auto* f = top.child("forest")) {
    detail::Reader r(*f, "forest.", unknown);
    r.get("fold_seed", cfg.fold_seed);
    if (const auto* g = r.child("grid")) {
      if (!g->is_array()) throw ConfigError("config key 'forest.grid' must be an array");
      cfg.grid.clear();
      for (std::size_t i = 0; i < g->size(); ++i) {
        ForestConfig c;
        detail::from_json((*g)[i], c, "forest.grid[" + std::to_string(i) + "].", unknown);
        cfg.grid.push_back(c);
      }
    }
    r.finish();
  }
  if (const auto* e = top.child("eval")) {
    detail::Reader r(*e, "eval.", unknown);
    r.get("radii", cfg.overlap_radii).get("thresholds", cfg.overlap_thresholds);
    r.finish();
  }
  if (const auto* p = top.child("paths")) {
    detail::Reader r(*p, "paths.", unknown);
    std::string corpus = cfg.corpus.string(), atlas = cfg.atlas.string(), models = cfg.models.string(),
                reports = cfg.reports.string(), segs = cfg.segmentations.string(),
                feats = cfg.features_dir.string();
    r.get("corpus", corpus)
        .get("atlas", atlas)
        .get("models", models)
        .get("reports", reports)
        .get("segmentations", segs)
        .get("features", feats);
    r.finish();
    cfg.corpus = corpus;
    cfg.atlas = atlas;
    cfg.models = models;
    cfg.reports = reports;
    cfg.segmentations = segs;
    cfg.features_dir = feats;
  }
  top.finish();
  if (!unknown.empty()) throw ConfigError("unknown config keys: " + joined(unknown));
}

}  // namespace

void apply_config_json(RunConfig& cfg, const std::string& json_text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  apply_json(cfg, j);
}

void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key=value: " + assignment);
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception&) {
    value = text;
  }
  nlohmann::json doc = nlohmann::json::object();
  nlohmann::json* at = &doc;
  std::size_t start = 0;
  for (;;) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("override has an empty key segment: " + assignment);
    if (dot == std::string::npos) {
      (*at)[part] = value;
      break;
    }
    at = &(*at)[part];
    start = dot + 1;
  }
  apply_json(cfg, doc);
}

std::string run_config_json(const RunConfig& cfg) {
  ojson j;
  j["run_dir"] = cfg.run_dir.string();
  j["n_phantoms"] = cfg.n_phantoms;
  j["phantom"] = detail::to_json(cfg.phantom);
  j["segmenter"] = ojson{{"method", cfg.segmenter}, {"ridge_scale", cfg.ridge_scale}, {"ridge_threshold", cfg.ridge_threshold}};
  j["priors"] = ojson{{"sigma", cfg.prior_sigma}};
  j["loss"] = detail::to_json(cfg.loss);
  j["train"] = detail::to_json(cfg.train);
  j["features"] = detail::to_json(cfg.features);
  auto grid = ojson::array();
  for (const auto& g : cfg.grid) grid.push_back(detail::to_json(g));
  j["forest"] = ojson{{"fold_seed", cfg.fold_seed}, {"grid", grid}};
  j["eval"] = ojson{{"radii", cfg.overlap_radii}, {"thresholds", cfg.overlap_thresholds}};
  j["paths"] = ojson{{"corpus", cfg.corpus.string()},   {"atlas", cfg.atlas.string()},
                     {"models", cfg.models.string()},   {"reports", cfg.reports.string()},
                     {"segmentations", cfg.segmentations.string()}, {"features", cfg.features_dir.string()}};
  return j.dump(2) + "\n";
}

RunLock::RunLock(const fs::path& run_dir) : path_(run_dir / ".lock") {
  fs::create_directories(run_dir);
  const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0) {
    if (errno == EEXIST)
      throw LockError("run directory is locked by another process (remove " + path_.string() + " if stale)");
    throw IoError("cannot create lock " + path_.string() + ": " + std::strerror(errno));
  }
  const std::string pid = std::to_string(::getpid()) + "\n";
  [[maybe_unused]] const auto w = ::write(fd, pid.data(), pid.size());
  ::close(fd);
}

RunLock::~RunLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

std::string error_json(const std::string& kind, const std::string& stage, const std::string& message) {
  return ojson{{"error", kind}, {"stage", stage}, {"message", message}}.dump() + "\n";
}

// ---------------------------------------------------------------------------
// Stages

namespace {

void require_path(const fs::path& p, const std::string& stage, const std::string& what, const std::string& producer) {
  if (!fs::exists(p))
    throw DependencyError("stage '" + stage + "' needs " + what + " (" + p.string() + "); run '" + producer +
                          "' first");
}

fs::path seg_path(const RunConfig& cfg, const std::string& id) { return cfg.path(cfg.segmentations) / (id + ".pfm"); }

ProbMap segment_image(const RunConfig& cfg, const GrayImage& image, const SegNetParams* net) {
  if (cfg.segmenter == "ridge") return ridge_segment(image, cfg.ridge_scale, cfg.ridge_threshold);
  if (cfg.segmenter == "segnet") return forward(*net, image);
  throw ConfigError("segmenter '" + cfg.segmenter + "' cannot segment an unannotated image");
}

}  // namespace

bool in_type_task(const CorpusEntry& e) { return e.labels.presence || e.distractors > 0; }

int type_stratum(const CorpusEntry& e) {
  return e.classes.empty() ? static_cast<int>(kAllCvcClasses.size()) : static_cast<int>(index_of(e.classes.front()));
}

void stage_synth(const RunConfig& cfg) {
  cfg.validate();
  const fs::path dir = cfg.path(cfg.corpus);
  // Stale phantoms from an earlier, larger corpus would otherwise linger.
  fs::remove_all(dir / "images");
  fs::remove_all(dir / "anatomy");
  generate_corpus(cfg.phantom, cfg.n_phantoms, dir);
}

void stage_build_priors(const RunConfig& cfg) {
  cfg.validate();
  const fs::path corpus = cfg.path(cfg.corpus);
  require_path(corpus / "manifest.json", "build-priors", "a corpus", "synth");
  const CorpusManifest m = load_manifest(corpus);
  const auto annotations = read_annotations(corpus / "annotations.jsonl");
  const double sigma = cfg.prior_sigma > 0.0 ? cfg.prior_sigma : default_prior_sigma(m.width, m.height);
  const PriorAtlas atlas = build_atlas(annotations, m.width, m.height, m.catheter_thickness, sigma);
  fs::remove_all(cfg.path(cfg.atlas));
  save_atlas(atlas, cfg.path(cfg.atlas));
}

TrainingResult stage_train_seg(const RunConfig& cfg) {
  cfg.validate();
  const fs::path corpus = cfg.path(cfg.corpus);
  require_path(corpus / "manifest.json", "train-seg", "a corpus", "synth");
  const auto items = load_corpus(corpus);
  const CorpusManifest m = load_manifest(corpus);
  std::vector<TrainingSample> samples;
  for (const auto& it : items)
    samples.push_back({it.image, catheter_mask(it.catheters, m.width, m.height, m.catheter_thickness)});
  TrainingResult result = train(samples, cfg.train, cfg.loss);
  save_params(cfg.path(cfg.models) / "segnet.bin", result.params);
  write_file(cfg.path(cfg.models) / "segnet_log.csv", training_log_csv(result.log));
  return result;
}

void stage_segment(const RunConfig& cfg) {
  cfg.validate();
  const fs::path corpus = cfg.path(cfg.corpus);
  require_path(corpus / "manifest.json", "segment", "a corpus", "synth");
  SegNetParams net;
  if (cfg.segmenter == "segnet") {
    const fs::path p = cfg.path(cfg.models) / "segnet.bin";
    require_path(p, "segment", "a trained segmentation network", "train-seg");
    net = load_params(p);
  }
  const auto items = load_corpus(corpus);
  const CorpusManifest m = load_manifest(corpus);
  fs::remove_all(cfg.path(cfg.segmentations));
  fs::create_directories(cfg.path(cfg.segmentations));
  parallel_for(items.size(), [&](std::size_t i) {
    const auto& it = items[i];
    ProbMap seg = cfg.segmenter == "truth"
                      ? to_prob(catheter_mask(it.catheters, m.width, m.height, m.catheter_thickness))
                      : segment_image(cfg, it.image, &net);
    write_pfm(seg_path(cfg, it.entry.id), seg);
  });
}

void stage_features(const RunConfig& cfg) {
  cfg.validate();
  const fs::path corpus = cfg.path(cfg.corpus);
  require_path(corpus / "manifest.json", "features", "a corpus", "synth");
  require_path(cfg.path(cfg.atlas) / "atlas.json", "features", "a prior atlas", "build-priors");
  require_path(cfg.path(cfg.segmentations), "features", "segmentations", "segment");
  const PriorAtlas atlas = load_atlas(cfg.path(cfg.atlas));
  const auto items = load_corpus(corpus);
  if (!items.empty() && (items.front().image.width() != atlas.width || items.front().image.height() != atlas.height))
    throw ResolutionMismatchError("atlas resolution does not match the corpus");
  for (const auto& it : items) require_path(seg_path(cfg, it.entry.id), "features", "a segmentation", "segment");

  FeatureTable table;
  table.schema = make_schema(atlas, cfg.features);
  table.ids.resize(items.size());
  table.rows.resize(items.size());
  parallel_for(items.size(), [&](std::size_t i) {
    const ProbMap seg = read_pfm(seg_path(cfg, items[i].entry.id));
    table.ids[i] = items[i].entry.id;
    table.rows[i] = extract_features(seg, atlas, items[i].anatomy, cfg.features, table.schema).values;
  });
  write_feature_table(cfg.path(cfg.features_dir) / "features.csv", table);
}

namespace {

struct Loaded {
  CorpusManifest manifest;
  FeatureTable table;
};

Loaded load_features(const RunConfig& cfg, const std::string& stage) {
  const fs::path corpus = cfg.path(cfg.corpus);
  require_path(corpus / "manifest.json", stage, "a corpus", "synth");
  const fs::path csv = cfg.path(cfg.features_dir) / "features.csv";
  require_path(csv, stage, "a feature table", "features");
  Loaded l{load_manifest(corpus), read_feature_table(csv)};
  if (l.table.ids.size() != l.manifest.entries.size())
    throw SchemaMismatchError("feature table rows do not match the corpus; rerun 'features'");
  for (std::size_t i = 0; i < l.table.ids.size(); ++i)
    if (l.table.ids[i] != l.manifest.entries[i].id)
      throw SchemaMismatchError("feature table ids do not match the corpus; rerun 'features'");
  return l;
}

Matrix rows_matrix(const FeatureTable& t, const std::vector<std::size_t>& rows) {
  Matrix X(rows.size(), t.schema->size());
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < X.cols(); ++c) X(r, c) = t.rows[rows[r]][c];
  return X;
}

std::vector<std::size_t> type_rows(const CorpusManifest& m) {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < m.entries.size(); ++i)
    if (in_type_task(m.entries[i])) rows.push_back(i);
  return rows;
}

std::vector<std::size_t> all_rows(std::size_t n) {
  std::vector<std::size_t> rows(n);
  for (std::size_t i = 0; i < n; ++i) rows[i] = i;
  return rows;
}

TypeFlags flags_of(const CorpusEntry& e) {
  TypeFlags f{};
  for (std::size_t t = 0; t < kNumTypes; ++t) f[t] = e.labels.types[t] ? 1 : 0;
  return f;
}

}  // namespace

void stage_train_rf(const RunConfig& cfg, Task task) {
  cfg.validate();
  const std::string stage = task == Task::Presence ? "train-rf --task presence" : "train-rf --task type";
  const Loaded l = load_features(cfg, stage);
  const auto& entries = l.manifest.entries;
  const std::uint64_t hash = l.table.schema->hash();

  if (task == Task::Presence) {
    const auto rows = all_rows(entries.size());
    std::vector<int> y;
    for (const auto& e : entries) y.push_back(e.labels.presence ? 1 : 0);
    const FoldPlan plan = make_folds(y, cfg.fold_seed);
    const Fold& f = plan.folds.front();
    const Matrix X = rows_matrix(l.table, rows);
    std::vector<int> ytr, yva;
    for (auto i : f.train) ytr.push_back(y[i]);
    for (auto i : f.val) yva.push_back(y[i]);
    const TuneResult tuned = tune(X.select(f.train), ytr, X.select(f.val), yva, cfg.grid, hash);
    save_forest(cfg.path(cfg.models) / "presence.json", fit_forest(X, y, tuned.config, hash));
    return;
  }

  const auto rows = type_rows(l.manifest);
  if (rows.size() < static_cast<std::size_t>(kNumFolds))
    throw InvalidArgumentError("type task needs at least 5 images with catheters or tubes");
  std::vector<TypeFlags> y;
  std::vector<int> strata;
  for (auto r : rows) {
    y.push_back(flags_of(entries[r]));
    strata.push_back(type_stratum(entries[r]));
  }
  const Matrix X = rows_matrix(l.table, rows);
  const FoldPlan plan = make_folds(strata, cfg.fold_seed);
  const Fold& f = plan.folds.front();
  std::vector<TypeFlags> ytr, yva;
  for (auto i : f.train) ytr.push_back(y[i]);
  for (auto i : f.val) yva.push_back(y[i]);
  TypeModel tuned = tune_type_model(X.select(f.train), ytr, X.select(f.val), yva, cfg.grid, hash);
  TypeModel final_model;
  final_model.schema_hash = hash;
  for (std::size_t t = 0; t < kNumTypes; ++t)
    final_model.forests[t] = fit_forest(X, indicator_column(y, t), tuned.forests[t].config, hash);
  const fs::path dir = cfg.path(cfg.models) / "type";
  fs::remove_all(dir);
  save_type_model(dir, final_model);
}

EvalSummary stage_eval(const RunConfig& cfg) {
  cfg.validate();
  const Loaded l = load_features(cfg, "eval");
  const auto& entries = l.manifest.entries;
  EvalSummary out;
  CvOptions opt;
  opt.grid = cfg.grid;
  opt.fold_seed = cfg.fold_seed;
  opt.schema_hash = l.table.schema->hash();

  {
    std::vector<int> y;
    for (const auto& e : entries) y.push_back(e.labels.presence ? 1 : 0);
    out.presence = run_presence_cv(rows_matrix(l.table, all_rows(entries.size())), y, opt);
  }
  {
    const auto rows = type_rows(l.manifest);
    std::vector<TypeFlags> y;
    std::vector<int> strata;
    for (auto r : rows) {
      y.push_back(flags_of(entries[r]));
      strata.push_back(type_stratum(entries[r]));
    }
    out.type = run_type_cv(rows_matrix(l.table, rows), y, strata, opt);
  }

  // Segmentation overlap over images that contain a catheter.
  const fs::path corpus = cfg.path(cfg.corpus);
  const auto annotations = read_annotations(corpus / "annotations.jsonl");
  std::map<std::string, std::vector<PolylineAnnotation>> by_image;
  for (const auto& a : annotations) by_image[a.image_id].push_back(a);
  std::vector<std::pair<BinaryMask, BinaryMask>> pairs;
  for (const auto& e : entries) {
    const auto it = by_image.find(e.id);
    if (it == by_image.end()) continue;
    const fs::path sp = seg_path(cfg, e.id);
    require_path(sp, "eval", "a segmentation", "segment");
    pairs.emplace_back(threshold(read_pfm(sp), cfg.features.seg_threshold),
                       catheter_mask(it->second, l.manifest.width, l.manifest.height, l.manifest.catheter_thickness));
  }
  if (!pairs.empty()) out.overlap = seg_overlap_report(pairs, cfg.overlap_radii, cfg.overlap_thresholds);

  const fs::path rep = cfg.path(cfg.reports);
  for (const CvReport* r : {&out.presence, &out.type}) {
    write_file(rep / (r->task + ".json"), cv_report_json(*r));
    write_file(rep / (r->task + ".txt"), cv_report_table(*r));
    if (!r->roc_labels.empty()) {
      try {
        write_file(rep / (r->task + "_roc.svg"),
                   roc_svg(roc_curve(r->roc_labels, r->roc_scores), r->task, roc_auc(r->roc_labels, r->roc_scores)));
      } catch (const InvalidArgumentError&) {
      }
    }
  }
  if (!pairs.empty()) {
    write_file(rep / "segmentation.json", overlap_table_json(out.overlap));
    write_file(rep / "segmentation.txt", overlap_table_text(out.overlap));
  }
  return out;
}

EvalSummary run_all(const RunConfig& cfg) {
  stage_synth(cfg);
  stage_build_priors(cfg);
  if (cfg.segmenter == "segnet") stage_train_seg(cfg);
  stage_segment(cfg);
  stage_features(cfg);
  stage_train_rf(cfg, Task::Presence);
  stage_train_rf(cfg, Task::Type);
  return stage_eval(cfg);
}

std::string predict(const RunConfig& cfg, const fs::path& image_path) {
  cfg.validate();
  if (!fs::exists(image_path)) throw MissingFileError("image not found: " + image_path.string());
  require_path(cfg.path(cfg.atlas) / "atlas.json", "predict", "a prior atlas", "build-priors");
  require_path(cfg.path(cfg.models) / "presence.json", "predict", "a presence model", "train-rf --task presence");
  require_path(cfg.path(cfg.models) / "type" / "index.json", "predict", "a type model", "train-rf --task type");
  SegNetParams net;
  if (cfg.segmenter == "segnet") {
    const fs::path p = cfg.path(cfg.models) / "segnet.bin";
    require_path(p, "predict", "a trained segmentation network", "train-seg");
    net = load_params(p);
  }
  const GrayImage image = read_pgm(image_path);
  const PriorAtlas atlas = load_atlas(cfg.path(cfg.atlas));
  if (image.width() != atlas.width || image.height() != atlas.height)
    throw ResolutionMismatchError("image is " + std::to_string(image.width()) + "x" + std::to_string(image.height()) +
                                  " but the atlas is " + std::to_string(atlas.width) + "x" +
                                  std::to_string(atlas.height));

  // <corpus>/images/<id>.pgm has its masks at <corpus>/anatomy/<id>.<region>.pgm.
  AnatomyMasks anatomy;
  bool from_corpus = true;
  const fs::path anatomy_dir = image_path.parent_path().parent_path() / "anatomy";
  for (AnatomyRegion r : kAllRegions) {
    const fs::path p = anatomy_dir / (image_path.stem().string() + "." + region_file_tag(r) + ".pgm");
    if (!fs::exists(p)) {
      from_corpus = false;
      break;
    }
    anatomy[r] = read_pgm_mask(p);
  }
  if (!from_corpus) anatomy = template_anatomy(image.width(), image.height());

  const ProbMap seg = segment_image(cfg, image, &net);
  const FeatureVector fv = extract_features(seg, atlas, anatomy, cfg.features);
  const Forest presence = load_forest(cfg.path(cfg.models) / "presence.json");
  const TypeModel types = load_type_model(cfg.path(cfg.models) / "type");
  const double p = presence.predict_proba(fv);
  const auto tp = types.predict(fv);

  ojson j;
  j["image"] = image_path.string();
  j["anatomy"] = from_corpus ? "corpus" : "template";
  j["presence_probability"] = round4(p);
  j["presence"] = p >= 0.5;
  ojson t = ojson::object();
  for (CatheterType c : kAllTypes)
    t[std::string(to_string(c))] = ojson{{"probability", round4(tp.probability[index_of(c)])},
                                         {"indicator", tp.indicator[index_of(c)]}};
  j["types"] = std::move(t);
  return j.dump(2) + "\n";
}

}  // namespace cvc
