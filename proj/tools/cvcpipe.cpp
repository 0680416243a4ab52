#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cvc/image_io.hpp"
#include "cvc/pipeline.hpp"

namespace {

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string run_dir;
  std::optional<std::size_t> n;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config_path, "JSON run configuration");
  app->add_option("--set", c.overrides, "Override a config key, e.g. --set train.learning_rate=1e-3");
  app->add_option("--run-dir", c.run_dir, "Run directory (default: run)");
  app->add_option("--n", c.n, "Number of phantoms");
  app->add_option("--seed", c.seed, "Phantom seed");
}

cvc::RunConfig resolve(const Common& c) {
  cvc::RunConfig cfg;
  if (!c.config_path.empty()) cvc::apply_config_json(cfg, cvc::read_file(c.config_path));
  for (const auto& o : c.overrides) cvc::apply_override(cfg, o);
  if (!c.run_dir.empty()) cfg.run_dir = c.run_dir;
  if (c.n) cfg.n_phantoms = *c.n;
  if (c.seed) cfg.phantom.seed = *c.seed;
  cfg.validate();
  return cfg;
}

int fail(const std::string& kind, const std::string& stage, const std::string& message) {
  std::cerr << cvc::error_json(kind, stage, message);
  return kind == "config" ? 2 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cvcpipe: catheter detection and type classification pipeline"};
  app.require_subcommand(1);
  Common common;
  std::string task;
  std::string image;

  auto* synth = app.add_subcommand("synth", "Generate the phantom corpus");
  auto* priors = app.add_subcommand("build-priors", "Build the per-class prior atlas");
  auto* train_seg = app.add_subcommand("train-seg", "Train the segmentation network");
  auto* segment = app.add_subcommand("segment", "Segment every corpus image");
  auto* features = app.add_subcommand("features", "Extract the feature table");
  auto* train_rf = app.add_subcommand("train-rf", "Tune and fit a random forest model");
  auto* eval = app.add_subcommand("eval", "5-fold cross-validation reports");
  auto* predict = app.add_subcommand("predict", "Classify one radiograph");
  auto* show = app.add_subcommand("config", "Print the resolved configuration");
  for (auto* s : {synth, priors, train_seg, segment, features, train_rf, eval, predict, show}) add_common(s, common);
  train_rf->add_option("--task", task, "presence or type")->required();
  predict->add_option("image", image, "PGM radiograph")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  CLI::App* sub = app.get_subcommands().front();
  const std::string stage = sub->get_name();
  try {
    const cvc::RunConfig cfg = resolve(common);
    if (sub == show) {
      std::cout << cvc::run_config_json(cfg);
      return 0;
    }
    if (sub == predict) {
      std::cout << cvc::predict(cfg, image);
      return 0;
    }
    cvc::RunLock lock(cfg.run_dir);
    if (sub == synth) cvc::stage_synth(cfg);
    else if (sub == priors) cvc::stage_build_priors(cfg);
    else if (sub == train_seg) {
      const auto r = cvc::stage_train_seg(cfg);
      std::cerr << "best epoch " << r.best_epoch << " of " << r.log.size() - 1 << "\n";
    } else if (sub == segment) cvc::stage_segment(cfg);
    else if (sub == features) cvc::stage_features(cfg);
    else if (sub == train_rf) cvc::stage_train_rf(cfg, cvc::parse_task(task));
    else if (sub == eval) {
      const auto s = cvc::stage_eval(cfg);
      std::cout << cvc::cv_report_table(s.presence) << cvc::cv_report_table(s.type);
      if (s.overlap.n_cases > 0) std::cout << cvc::overlap_table_text(s.overlap);
    }
    return 0;
  } catch (const cvc::Error& e) {
    return fail(e.kind(), stage, e.what());
  } catch (const std::exception& e) {
    return fail("internal", stage, e.what());
  }
}
