#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "cvc/eval.hpp"
#include "cvc/features.hpp"
#include "cvc/forest.hpp"
#include "cvc/segnet.hpp"
#include "cvc/synthgen.hpp"

namespace cvc {

enum class Task { Presence, Type };
Task parse_task(const std::string& s);

struct RunConfig {
  std::filesystem::path run_dir = "run";
  std::size_t n_phantoms = 500;
  PhantomConfig phantom;

  /// "ridge", "segnet" (needs train-seg) or "truth" (annotation masks,
  /// an oracle for establishing the ceiling).
  std::string segmenter = "ridge";
  double ridge_scale = 1.0;
  double ridge_threshold = 0.4;

  /// 0 selects default_prior_sigma for the resolution.
  double prior_sigma = 0.0;

  LossConfig loss;
  TrainConfig train;
  FeatureConfig features;
  std::vector<ForestConfig> grid = default_grid();
  std::uint64_t fold_seed = 1;
  std::vector<int> overlap_radii{2, 5};
  std::vector<double> overlap_thresholds{0.5, 0.4};

  /// Stage directories, relative to run_dir unless absolute.
  std::filesystem::path corpus = "corpus";
  std::filesystem::path atlas = "atlas";
  std::filesystem::path models = "models";
  std::filesystem::path reports = "reports";
  std::filesystem::path segmentations = "segmentations";
  std::filesystem::path features_dir = "features";

  std::filesystem::path path(const std::filesystem::path& p) const { return p.is_absolute() ? p : run_dir / p; }
  void validate() const;
};

/// Applies a JSON document onto cfg. Unknown keys are collected and
/// reported together in one ConfigError.
void apply_config_json(RunConfig& cfg, const std::string& json_text);
/// "section.key=value"; value is parsed as JSON, falling back to a string.
void apply_override(RunConfig& cfg, const std::string& assignment);
std::string run_config_json(const RunConfig& cfg);

/// Advisory lock: creates <run_dir>/.lock exclusively, removes it on exit.
class RunLock {
 public:
  explicit RunLock(const std::filesystem::path& run_dir);
  ~RunLock();
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  std::filesystem::path path_;
};

void stage_synth(const RunConfig& cfg);
void stage_build_priors(const RunConfig& cfg);
TrainingResult stage_train_seg(const RunConfig& cfg);
void stage_segment(const RunConfig& cfg);
void stage_features(const RunConfig& cfg);
void stage_train_rf(const RunConfig& cfg, Task task);

struct EvalSummary {
  CvReport presence;
  CvReport type;
  OverlapTable overlap;
};
EvalSummary stage_eval(const RunConfig& cfg);

/// Runs synth through eval in order.
EvalSummary run_all(const RunConfig& cfg);

/// Segments one radiograph and applies the trained forests. Anatomy masks
/// are taken from a corpus layout next to the image when present,
/// otherwise from template_anatomy. Returns a JSON document.
std::string predict(const RunConfig& cfg, const std::filesystem::path& image);

/// Rows of the type task: images with a catheter or a distractor tube.
bool in_type_task(const CorpusEntry& e);
/// Stratum for the type task folds (primary class, or 5 for tube-only).
int type_stratum(const CorpusEntry& e);

/// Error document written to stderr by the CLI.
std::string error_json(const std::string& kind, const std::string& stage, const std::string& message);

}  // namespace cvc
