#pragma once

// JSON mapping for the module configs. Readers apply known keys onto an
// existing config and collect unknown ones so callers can reject them all
// at once.

#include <string>
#include <vector>

#include <json.hpp>

#include "cvc/features.hpp"
#include "cvc/forest.hpp"
#include "cvc/segnet.hpp"
#include "cvc/synthgen.hpp"

namespace cvc::detail {

using ojson = nlohmann::ordered_json;

class Reader {
 public:
  Reader(const nlohmann::json& j, std::string prefix, std::vector<std::string>& unknown)
      : j_(j), prefix_(std::move(prefix)), unknown_(unknown) {
    if (!j_.is_object()) throw ConfigError(where() + " must be a JSON object");
  }

  template <class T>
  Reader& get(const char* key, T& out) {
    seen_.emplace_back(key);
    const auto it = j_.find(key);
    if (it == j_.end()) return *this;
    try {
      out = it->template get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("config key '" + prefix_ + key + "' has the wrong type");
    }
    return *this;
  }

  const nlohmann::json* child(const char* key) {
    seen_.emplace_back(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void finish() {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      bool known = false;
      for (const auto& s : seen_) known = known || s == it.key();
      if (!known) unknown_.push_back(prefix_ + it.key());
    }
  }

  const std::string& prefix() const { return prefix_; }

 private:
  std::string where() const { return prefix_.empty() ? std::string("config") : "'" + prefix_.substr(0, prefix_.size() - 1) + "'"; }

  const nlohmann::json& j_;
  std::string prefix_;
  std::vector<std::string>& unknown_;
  std::vector<std::string> seen_;
};

inline ojson to_json(const PhantomConfig& c) {
  ojson mix = ojson::object();
  for (const auto& [cls, w] : c.class_mix) mix[std::string(to_string(cls))] = w;
  return ojson{{"width", c.width},
               {"height", c.height},
               {"class_mix", mix},
               {"p_no_catheter", c.p_no_catheter},
               {"p_multi_catheter", c.p_multi_catheter},
               {"p_distractor", c.p_distractor},
               {"noise_sigma", c.noise_sigma},
               {"catheter_contrast", c.catheter_contrast},
               {"catheter_thickness", c.catheter_thickness},
               {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, PhantomConfig& c, const std::string& prefix,
                      std::vector<std::string>& unknown) {
  Reader r(j, prefix, unknown);
  r.get("width", c.width)
      .get("height", c.height)
      .get("p_no_catheter", c.p_no_catheter)
      .get("p_multi_catheter", c.p_multi_catheter)
      .get("p_distractor", c.p_distractor)
      .get("noise_sigma", c.noise_sigma)
      .get("catheter_contrast", c.catheter_contrast)
      .get("catheter_thickness", c.catheter_thickness)
      .get("seed", c.seed);
  if (const auto* mix = r.child("class_mix")) {
    if (!mix->is_object()) throw ConfigError("config key '" + prefix + "class_mix' must be an object");
    c.class_mix.clear();
    for (auto it = mix->begin(); it != mix->end(); ++it) {
      const auto cls = parse_cvc_class(it.key());
      if (!cls || !it->is_number()) {
        unknown.push_back(prefix + "class_mix." + it.key());
        continue;
      }
      c.class_mix[*cls] = it->get<double>();
    }
  }
  r.finish();
}

inline ojson to_json(const LossConfig& c) {
  return ojson{{"w_dice", c.w_dice},
               {"w_cross", c.w_cross},
               {"gamma_dice", c.gamma_dice},
               {"gamma_cross", c.gamma_cross},
               {"epsilon", c.epsilon}};
}

inline void from_json(const nlohmann::json& j, LossConfig& c, const std::string& prefix,
                      std::vector<std::string>& unknown) {
  Reader r(j, prefix, unknown);
  r.get("w_dice", c.w_dice)
      .get("w_cross", c.w_cross)
      .get("gamma_dice", c.gamma_dice)
      .get("gamma_cross", c.gamma_cross)
      .get("epsilon", c.epsilon);
  r.finish();
}

inline ojson to_json(const TrainConfig& c) {
  return ojson{{"learning_rate", c.learning_rate},
               {"beta1", c.beta1},
               {"beta2", c.beta2},
               {"adam_epsilon", c.adam_epsilon},
               {"batch_size", c.batch_size},
               {"max_epochs", c.max_epochs},
               {"tolerance", c.tolerance},
               {"patience", c.patience},
               {"seed", c.seed},
               {"train_fraction", c.train_fraction},
               {"val_fraction", c.val_fraction},
               {"crop_size", c.crop_size},
               {"foreground_prior", c.foreground_prior},
               {"base_channels", c.net.base_channels},
               {"levels", c.net.levels}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c, const std::string& prefix,
                      std::vector<std::string>& unknown) {
  Reader r(j, prefix, unknown);
  r.get("learning_rate", c.learning_rate)
      .get("beta1", c.beta1)
      .get("beta2", c.beta2)
      .get("adam_epsilon", c.adam_epsilon)
      .get("batch_size", c.batch_size)
      .get("max_epochs", c.max_epochs)
      .get("tolerance", c.tolerance)
      .get("patience", c.patience)
      .get("seed", c.seed)
      .get("train_fraction", c.train_fraction)
      .get("val_fraction", c.val_fraction)
      .get("crop_size", c.crop_size)
      .get("foreground_prior", c.foreground_prior)
      .get("base_channels", c.net.base_channels)
      .get("levels", c.net.levels);
  r.finish();
}

inline ojson to_json(const FeatureConfig& c) {
  return ojson{{"n_bins", c.n_bins},
               {"seg_threshold", c.seg_threshold},
               {"hog_cell_size", c.hog.cell_size},
               {"hog_orientations", c.hog.n_orientations},
               {"hog_signed", c.hog.signed_gradients}};
}

inline void from_json(const nlohmann::json& j, FeatureConfig& c, const std::string& prefix,
                      std::vector<std::string>& unknown) {
  Reader r(j, prefix, unknown);
  r.get("n_bins", c.n_bins)
      .get("seg_threshold", c.seg_threshold)
      .get("hog_cell_size", c.hog.cell_size)
      .get("hog_orientations", c.hog.n_orientations)
      .get("hog_signed", c.hog.signed_gradients);
  r.finish();
}

inline ojson to_json(const ForestConfig& c) {
  return ojson{{"n_trees", c.n_trees},
               {"max_depth", c.max_depth},
               {"min_samples_leaf", c.min_samples_leaf},
               {"mtry", c.mtry},
               {"bootstrap", c.bootstrap},
               {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, ForestConfig& c, const std::string& prefix,
                      std::vector<std::string>& unknown) {
  Reader r(j, prefix, unknown);
  r.get("n_trees", c.n_trees)
      .get("max_depth", c.max_depth)
      .get("min_samples_leaf", c.min_samples_leaf)
      .get("mtry", c.mtry)
      .get("bootstrap", c.bootstrap)
      .get("seed", c.seed);
  r.finish();
}

}  // namespace cvc::detail
