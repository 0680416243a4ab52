#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cvc/raster.hpp"

namespace cvc {

/// Weights of the exponential logarithmic loss (Dice 0.8, cross entropy
/// 0.2 by default).
struct LossConfig {
  double w_dice = 0.8;
  double w_cross = 0.2;
  double gamma_dice = 0.3;
  double gamma_cross = 0.3;
  /// Dice smoothing term and probability clamp [epsilon, 1 - epsilon].
  double epsilon = 1e-7;

  void validate() const;
};

/// Dice and cross-entropy parts of the loss, before weighting.
struct LossTerms {
  double dice_soft = 0.0;
  double dice_term = 0.0;
  double cross_term = 0.0;
  double total = 0.0;
};

LossTerms explog_loss_terms(const ProbMap& pred, const BinaryMask& target, const LossConfig& cfg);
double explog_loss(const ProbMap& pred, const BinaryMask& target, const LossConfig& cfg);
/// dL/dpred per pixel; zero where the clamp is active.
ProbMap explog_loss_grad(const ProbMap& pred, const BinaryMask& target, const LossConfig& cfg);

/// (2 sum p g + eps) / (sum p + sum g + eps).
double soft_dice(const ProbMap& pred, const BinaryMask& target, double epsilon = 1e-7);

/// U-Net style encoder-decoder: `levels` 2x2 max-pool stages with skip
/// connections, two 3x3 convolutions + ReLU per stage, channel width
/// doubling per level, nearest-neighbour upsampling, 1x1 sigmoid head.
struct SegNetConfig {
  int base_channels = 8;
  int levels = 2;

  void validate() const;
  std::uint64_t hash() const;
};

struct ConvSpec {
  int in_channels;
  int out_channels;
  int kernel;
  std::size_t offset;  // into the flat weight vector; weights then biases

  std::size_t weight_count() const {
    return static_cast<std::size_t>(in_channels) * out_channels * kernel * kernel;
  }
  std::size_t param_count() const { return weight_count() + static_cast<std::size_t>(out_channels); }
};

/// Layer order: encoder convs per level, bottleneck convs, decoder convs
/// from deepest level up, head.
std::vector<ConvSpec> segnet_layout(const SegNetConfig& cfg);

struct SegNetParams {
  SegNetConfig config;
  std::vector<double> weights;

  static SegNetParams zeros(const SegNetConfig& cfg);
  /// He-normal convolution weights, zero biases, head bias at the logit of
  /// `foreground_prior`.
  static SegNetParams random(const SegNetConfig& cfg, std::uint64_t seed,
                             double foreground_prior = 0.05);

  std::size_t size() const { return weights.size(); }
};

/// Per-pixel foreground probability, strictly inside (0,1). The input is
/// standardized (zero mean, unit variance) before the first layer.
ProbMap forward(const SegNetParams& params, const GrayImage& image);

/// Loss and dL/dweights for one image (backpropagation).
struct LossAndGradient {
  double loss = 0.0;
  std::vector<double> gradient;
};
LossAndGradient loss_and_gradient(const SegNetParams& params, const GrayImage& image,
                                  const BinaryMask& target, const LossConfig& cfg);

struct TrainConfig {
  double learning_rate = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  int batch_size = 4;
  int max_epochs = 100;
  /// Stop once the best validation loss has not improved by more than
  /// `tolerance` for `patience` consecutive epochs.
  double tolerance = 1e-5;
  int patience = 15;
  std::uint64_t seed = 7;
  double train_fraction = 0.8;
  double val_fraction = 0.2;
  /// Square random training crop; 0 trains on full images.
  int crop_size = 64;
  double foreground_prior = 0.05;
  SegNetConfig net;

  void validate() const;
};

struct TrainingSample {
  GrayImage image;
  BinaryMask mask;
};

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_dice = 0.0;
};

struct TrainingResult {
  SegNetParams params;
  std::vector<EpochLog> log;
  int best_epoch = 0;
  std::vector<std::size_t> train_indices;
  std::vector<std::size_t> val_indices;
};

/// Adam training; returns the weights with the best validation loss.
/// Throws TrainingDivergedError on a non-finite loss.
TrainingResult train(const std::vector<TrainingSample>& samples, const TrainConfig& tcfg,
                     const LossConfig& lcfg);

/// Deterministic split of n samples into train/validation index lists.
void split_indices(std::size_t n, const TrainConfig& tcfg, std::vector<std::size_t>& train_idx,
                   std::vector<std::size_t>& val_idx);

std::string training_log_csv(const std::vector<EpochLog>& log);

/// Binary layout: "CVCSEGN1", u32 version, u32 base_channels, u32 levels,
/// u64 config hash, u64 weight count, then little-endian float32 weights
/// in segnet_layout order (each conv: [out][in][ky][kx] weights, then
/// [out] biases).
void save_params(const std::filesystem::path& path, const SegNetParams& params);
SegNetParams load_params(const std::filesystem::path& path);

/// Non-learned line detector: single-scale Hessian vesselness for bright
/// ridges, normalized by its image maximum to r in [0,1], then mapped
/// piecewise-linearly so that r == threshold lands on 0.5. Thresholding the
/// result at 0.5 therefore keeps pixels with r > threshold.
ProbMap ridge_segment(const GrayImage& image, double scale, double threshold);

}  // namespace cvc
