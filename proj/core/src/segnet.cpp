#include "cvc/segnet.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

#include "cvc/image_io.hpp"

namespace cvc {

// ---------------------------------------------------------------------------
// Loss

void LossConfig::validate() const {
  if (!(w_dice >= 0.0 && w_cross >= 0.0) || std::abs(w_dice + w_cross - 1.0) > 1e-12)
    throw ConfigError("loss: w_dice and w_cross must be non-negative and sum to 1");
  if (!(gamma_dice > 0.0) || !(gamma_cross > 0.0)) throw ConfigError("loss: gammas must be > 0");
  if (!(epsilon > 0.0 && epsilon < 0.5)) throw ConfigError("loss: epsilon must lie in (0, 0.5)");
}

namespace {

double clamp_prob(double p, double eps) { return std::clamp(p, eps, 1.0 - eps); }

struct DiceSums {
  double pg = 0.0;
  double p = 0.0;
  double g = 0.0;
};

DiceSums dice_sums(const ProbMap& pred, const BinaryMask& target, double eps) {
  DiceSums s;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double p = clamp_prob(pred[i], eps);
    const double g = target[i] ? 1.0 : 0.0;
    s.pg += p * g;
    s.p += p;
    s.g += g;
  }
  return s;
}

}  // namespace

double soft_dice(const ProbMap& pred, const BinaryMask& target, double epsilon) {
  require_same_shape(pred, target, "soft_dice");
  const DiceSums s = dice_sums(pred, target, epsilon);
  return (2.0 * s.pg + epsilon) / (s.p + s.g + epsilon);
}

LossTerms explog_loss_terms(const ProbMap& pred, const BinaryMask& target, const LossConfig& cfg) {
  require_same_shape(pred, target, "explog_loss");
  const double eps = cfg.epsilon;
  LossTerms t;
  const DiceSums s = dice_sums(pred, target, eps);
  t.dice_soft = (2.0 * s.pg + eps) / (s.p + s.g + eps);
  t.dice_term = std::pow(std::max(0.0, -std::log(t.dice_soft)), cfg.gamma_dice);
  double cross = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double p = clamp_prob(pred[i], eps);
    const double q = target[i] ? p : 1.0 - p;
    cross += std::pow(-std::log(q), cfg.gamma_cross);
  }
  t.cross_term = cross / static_cast<double>(pred.size());
  t.total = cfg.w_dice * t.dice_term + cfg.w_cross * t.cross_term;
  return t;
}

double explog_loss(const ProbMap& pred, const BinaryMask& target, const LossConfig& cfg) {
  return explog_loss_terms(pred, target, cfg).total;
}

ProbMap explog_loss_grad(const ProbMap& pred, const BinaryMask& target, const LossConfig& cfg) {
  require_same_shape(pred, target, "explog_loss_grad");
  const double eps = cfg.epsilon;
  const DiceSums s = dice_sums(pred, target, eps);
  const double num = 2.0 * s.pg + eps;
  const double den = s.p + s.g + eps;
  const double dice = num / den;
  const double u = -std::log(dice);
  // d(dice_term)/d(dice); u > 0 whenever predictions are clamped.
  const double d_term_d_dice =
      u > 0.0 ? cfg.gamma_dice * std::pow(u, cfg.gamma_dice - 1.0) * (-1.0 / dice) : 0.0;
  const double inv_n = 1.0 / static_cast<double>(pred.size());

  ProbMap grad(pred.width(), pred.height());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double raw = pred[i];
    if (raw < eps || raw > 1.0 - eps) continue;
    const double p = raw;
    const double g = target[i] ? 1.0 : 0.0;
    const double d_dice = (2.0 * g * den - num) / (den * den);
    const double q = target[i] ? p : 1.0 - p;
    const double v = -std::log(q);
    const double d_cross = cfg.gamma_cross * std::pow(v, cfg.gamma_cross - 1.0) * (-1.0 / q) *
                           (target[i] ? 1.0 : -1.0) * inv_n;
    grad[i] = cfg.w_dice * d_term_d_dice * d_dice + cfg.w_cross * d_cross;
  }
  return grad;
}

// ---------------------------------------------------------------------------
// Network

void SegNetConfig::validate() const {
  if (base_channels < 1 || base_channels > 64) throw ConfigError("segnet: base_channels must be in [1,64]");
  if (levels < 1 || levels > 5) throw ConfigError("segnet: levels must be in [1,5]");
}

std::uint64_t SegNetConfig::hash() const {
  return fnv1a("segnet:v1:base=" + std::to_string(base_channels) +
               ":levels=" + std::to_string(levels));
}

std::vector<ConvSpec> segnet_layout(const SegNetConfig& cfg) {
  cfg.validate();
  std::vector<ConvSpec> layers;
  std::size_t offset = 0;
  auto add = [&](int in, int out, int k) {
    layers.push_back({in, out, k, offset});
    offset += layers.back().param_count();
  };
  auto width = [&](int level) { return cfg.base_channels << level; };
  int in = 1;
  for (int l = 0; l < cfg.levels; ++l) {
    add(in, width(l), 3);
    add(width(l), width(l), 3);
    in = width(l);
  }
  add(in, width(cfg.levels), 3);
  add(width(cfg.levels), width(cfg.levels), 3);
  in = width(cfg.levels);
  for (int l = cfg.levels - 1; l >= 0; --l) {
    add(in + width(l), width(l), 3);
    add(width(l), width(l), 3);
    in = width(l);
  }
  add(in, 1, 1);
  return layers;
}

SegNetParams SegNetParams::zeros(const SegNetConfig& cfg) {
  const auto layout = segnet_layout(cfg);
  const auto& last = layout.back();
  return {cfg, std::vector<double>(last.offset + last.param_count(), 0.0)};
}

SegNetParams SegNetParams::random(const SegNetConfig& cfg, std::uint64_t seed,
                                  double foreground_prior) {
  SegNetParams p = zeros(cfg);
  const auto layout = segnet_layout(cfg);
  Rng rng(seed);
  for (const auto& l : layout) {
    const double stddev = std::sqrt(2.0 / (static_cast<double>(l.in_channels) * l.kernel * l.kernel));
    for (std::size_t i = 0; i < l.weight_count(); ++i) p.weights[l.offset + i] = stddev * rng.normal();
  }
  if (foreground_prior > 0.0 && foreground_prior < 1.0) {
    const auto& head = layout.back();
    p.weights[head.offset + head.weight_count()] = std::log(foreground_prior / (1.0 - foreground_prior));
  }
  return p;
}

namespace {

struct Tensor {
  int c = 0, h = 0, w = 0;
  std::vector<double> v;

  Tensor() = default;
  Tensor(int channels, int height, int width)
      : c(channels), h(height), w(width),
        v(static_cast<std::size_t>(channels) * height * width, 0.0) {}

  double* plane(int ch) { return v.data() + static_cast<std::size_t>(ch) * h * w; }
  const double* plane(int ch) const { return v.data() + static_cast<std::size_t>(ch) * h * w; }
};

void conv_forward(const Tensor& in, const ConvSpec& L, const double* params, Tensor& out) {
  out = Tensor(L.out_channels, in.h, in.w);
  const int k = L.kernel;
  const int half = k / 2;
  const double* bias = params + L.weight_count();
  for (int oc = 0; oc < L.out_channels; ++oc) {
    double* o = out.plane(oc);
    std::fill(o, o + static_cast<std::size_t>(in.h) * in.w, bias[oc]);
    for (int ic = 0; ic < L.in_channels; ++ic) {
      const double* src = in.plane(ic);
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
          const double wgt = params[((static_cast<std::size_t>(oc) * L.in_channels + ic) * k + ky) * k + kx];
          const int dy = ky - half;
          const int dx = kx - half;
          const int y0 = std::max(0, -dy), y1 = std::min(in.h, in.h - dy);
          const int x0 = std::max(0, -dx), x1 = std::min(in.w, in.w - dx);
          for (int y = y0; y < y1; ++y) {
            double* orow = o + static_cast<std::size_t>(y) * in.w;
            const double* irow = src + static_cast<std::size_t>(y + dy) * in.w + dx;
            for (int x = x0; x < x1; ++x) orow[x] += wgt * irow[x];
          }
        }
    }
  }
}

// d_out is dL/d(conv output). Accumulates into grad and d_in.
void conv_backward(const Tensor& in, const ConvSpec& L, const double* params, const Tensor& d_out,
                   double* grad, Tensor* d_in) {
  const int k = L.kernel;
  const int half = k / 2;
  if (d_in) *d_in = Tensor(in.c, in.h, in.w);
  double* gbias = grad + L.weight_count();
  for (int oc = 0; oc < L.out_channels; ++oc) {
    const double* go = d_out.plane(oc);
    double sum = 0.0;
    for (std::size_t i = 0; i < static_cast<std::size_t>(in.h) * in.w; ++i) sum += go[i];
    gbias[oc] += sum;
    for (int ic = 0; ic < L.in_channels; ++ic) {
      const double* src = in.plane(ic);
      double* gsrc = d_in ? d_in->plane(ic) : nullptr;
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
          const std::size_t wi = ((static_cast<std::size_t>(oc) * L.in_channels + ic) * k + ky) * k + kx;
          const double wgt = params[wi];
          const int dy = ky - half;
          const int dx = kx - half;
          const int y0 = std::max(0, -dy), y1 = std::min(in.h, in.h - dy);
          const int x0 = std::max(0, -dx), x1 = std::min(in.w, in.w - dx);
          double acc = 0.0;
          for (int y = y0; y < y1; ++y) {
            const double* grow = go + static_cast<std::size_t>(y) * in.w;
            const double* irow = src + static_cast<std::size_t>(y + dy) * in.w + dx;
            for (int x = x0; x < x1; ++x) acc += grow[x] * irow[x];
            if (gsrc) {
              double* drow = gsrc + static_cast<std::size_t>(y + dy) * in.w + dx;
              for (int x = x0; x < x1; ++x) drow[x] += wgt * grow[x];
            }
          }
          grad[wi] += acc;
        }
    }
  }
}

void relu_inplace(Tensor& t) {
  for (double& x : t.v) x = x > 0.0 ? x : 0.0;
}

// Zeroes gradient where the activation was clipped.
void relu_backward(const Tensor& activated, Tensor& grad) {
  for (std::size_t i = 0; i < grad.v.size(); ++i)
    if (!(activated.v[i] > 0.0)) grad.v[i] = 0.0;
}

void maxpool_forward(const Tensor& in, Tensor& out, std::vector<std::uint32_t>& argmax) {
  out = Tensor(in.c, in.h / 2, in.w / 2);
  argmax.assign(out.v.size(), 0);
  std::size_t o = 0;
  for (int c = 0; c < in.c; ++c) {
    const double* src = in.plane(c);
    for (int y = 0; y < out.h; ++y)
      for (int x = 0; x < out.w; ++x, ++o) {
        std::uint32_t best = static_cast<std::uint32_t>((2 * y) * in.w + 2 * x);
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            const auto idx = static_cast<std::uint32_t>((2 * y + dy) * in.w + 2 * x + dx);
            if (src[idx] > src[best]) best = idx;
          }
        out.v[o] = src[best];
        argmax[o] = best;
      }
  }
}

void maxpool_backward(const Tensor& d_out, const std::vector<std::uint32_t>& argmax, int in_h,
                      int in_w, Tensor& d_in) {
  d_in = Tensor(d_out.c, in_h, in_w);
  std::size_t o = 0;
  for (int c = 0; c < d_out.c; ++c) {
    double* dst = d_in.plane(c);
    for (int i = 0; i < d_out.h * d_out.w; ++i, ++o) dst[argmax[o]] += d_out.v[o];
  }
}

Tensor upsample_concat(const Tensor& deep, const Tensor& skip) {
  Tensor out(deep.c + skip.c, skip.h, skip.w);
  for (int c = 0; c < deep.c; ++c) {
    const double* src = deep.plane(c);
    double* dst = out.plane(c);
    for (int y = 0; y < skip.h; ++y)
      for (int x = 0; x < skip.w; ++x) dst[y * skip.w + x] = src[(y / 2) * deep.w + x / 2];
  }
  std::copy(skip.v.begin(), skip.v.end(), out.plane(deep.c));
  return out;
}

void upsample_concat_backward(const Tensor& d_cat, int deep_c, int deep_h, int deep_w,
                              Tensor& d_deep, Tensor& d_skip_accum) {
  d_deep = Tensor(deep_c, deep_h, deep_w);
  for (int c = 0; c < deep_c; ++c) {
    const double* src = d_cat.plane(c);
    double* dst = d_deep.plane(c);
    for (int y = 0; y < d_cat.h; ++y)
      for (int x = 0; x < d_cat.w; ++x) dst[(y / 2) * deep_w + x / 2] += src[y * d_cat.w + x];
  }
  const std::size_t off = static_cast<std::size_t>(deep_c) * d_cat.h * d_cat.w;
  for (std::size_t i = 0; i < d_skip_accum.v.size(); ++i) d_skip_accum.v[i] += d_cat.v[off + i];
}

struct Activations {
  std::vector<Tensor> conv_in;   // input of each conv layer
  std::vector<Tensor> conv_out;  // output of each conv layer (post-ReLU, pre-sigmoid for head)
  std::vector<Tensor> skips;
  std::vector<std::vector<std::uint32_t>> pool_argmax;
  std::vector<double> prob;      // sigmoid(head), unclamped
};

Tensor standardized_input(const GrayImage& image) {
  Tensor x(1, image.height(), image.width());
  const double n = static_cast<double>(image.size());
  double mean = 0.0;
  for (double v : image.pixels()) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : image.pixels()) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / n);
  const double scale = sd > 1e-12 ? 1.0 / sd : 1.0;
  for (std::size_t i = 0; i < image.size(); ++i) x.v[i] = (image[i] - mean) * scale;
  return x;
}

void check_input(const SegNetParams& params, const GrayImage& image) {
  const auto layout = segnet_layout(params.config);
  const auto& last = layout.back();
  if (params.weights.size() != last.offset + last.param_count())
    throw ShapeMismatchError("segnet: weight count does not match configuration");
  const int m = 1 << params.config.levels;
  if (image.width() % m != 0 || image.height() % m != 0)
    throw ShapeMismatchError("segnet: image dimensions must be divisible by " + std::to_string(m));
}

Activations run_forward(const SegNetParams& params, const GrayImage& image) {
  check_input(params, image);
  const auto layout = segnet_layout(params.config);
  const double* w = params.weights.data();
  const int levels = params.config.levels;
  Activations a;
  a.conv_in.reserve(layout.size());
  a.conv_out.reserve(layout.size());

  std::size_t li = 0;
  auto conv_relu = [&](const Tensor& in) {
    a.conv_in.push_back(in);
    Tensor out;
    conv_forward(in, layout[li], w + layout[li].offset, out);
    relu_inplace(out);
    a.conv_out.push_back(out);
    ++li;
    return a.conv_out.back();
  };

  Tensor x = standardized_input(image);
  for (int l = 0; l < levels; ++l) {
    x = conv_relu(x);
    x = conv_relu(x);
    a.skips.push_back(x);
    Tensor pooled;
    a.pool_argmax.emplace_back();
    maxpool_forward(x, pooled, a.pool_argmax.back());
    x = std::move(pooled);
  }
  x = conv_relu(x);
  x = conv_relu(x);
  for (int l = levels - 1; l >= 0; --l) {
    x = upsample_concat(x, a.skips[l]);
    x = conv_relu(x);
    x = conv_relu(x);
  }
  a.conv_in.push_back(x);
  Tensor logits;
  conv_forward(x, layout[li], w + layout[li].offset, logits);
  a.conv_out.push_back(logits);
  a.prob.resize(logits.v.size());
  for (std::size_t i = 0; i < logits.v.size(); ++i) a.prob[i] = 1.0 / (1.0 + std::exp(-logits.v[i]));
  return a;
}

}  // namespace

ProbMap forward(const SegNetParams& params, const GrayImage& image) {
  const Activations a = run_forward(params, image);
  ProbMap out(image.width(), image.height());
  constexpr double kEdge = 1e-12;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(a.prob[i], kEdge, 1.0 - kEdge);
  return out;
}

LossAndGradient loss_and_gradient(const SegNetParams& params, const GrayImage& image,
                                  const BinaryMask& target, const LossConfig& cfg) {
  require_same_shape(image, target, "loss_and_gradient");
  const Activations a = run_forward(params, image);
  const auto layout = segnet_layout(params.config);
  const int levels = params.config.levels;
  const double* w = params.weights.data();

  ProbMap pred(image.width(), image.height(), a.prob);
  LossAndGradient out;
  out.loss = explog_loss(pred, target, cfg);
  out.gradient.assign(params.weights.size(), 0.0);
  double* g = out.gradient.data();

  const ProbMap d_pred = explog_loss_grad(pred, target, cfg);
  Tensor d(1, image.height(), image.width());
  for (std::size_t i = 0; i < d.v.size(); ++i) d.v[i] = d_pred[i] * a.prob[i] * (1.0 - a.prob[i]);

  std::size_t li = layout.size() - 1;
  Tensor d_in;
  conv_backward(a.conv_in[li], layout[li], w + layout[li].offset, d, g + layout[li].offset, &d_in);
  d = std::move(d_in);

  auto conv_relu_back = [&](Tensor& grad) {
    --li;
    relu_backward(a.conv_out[li], grad);
    Tensor gin;
    conv_backward(a.conv_in[li], layout[li], w + layout[li].offset, grad, g + layout[li].offset, &gin);
    grad = std::move(gin);
  };

  std::vector<Tensor> d_skips;
  for (const auto& s : a.skips) d_skips.emplace_back(s.c, s.h, s.w);
  for (int l = 0; l < levels; ++l) {
    conv_relu_back(d);
    conv_relu_back(d);
    // d is now the gradient of upsample_concat(deep, skip[l]).
    const Tensor& skip = a.skips[l];
    const int deep_c = d.c - skip.c;
    Tensor d_deep;
    upsample_concat_backward(d, deep_c, skip.h / 2, skip.w / 2, d_deep, d_skips[l]);
    d = std::move(d_deep);
  }
  conv_relu_back(d);
  conv_relu_back(d);
  for (int l = levels - 1; l >= 0; --l) {
    Tensor d_skip;
    maxpool_backward(d, a.pool_argmax[l], a.skips[l].h, a.skips[l].w, d_skip);
    for (std::size_t i = 0; i < d_skip.v.size(); ++i) d_skip.v[i] += d_skips[l].v[i];
    d = std::move(d_skip);
    conv_relu_back(d);
    if (li == 1) {
      // First layer: the input gradient is not needed.
      --li;
      relu_backward(a.conv_out[li], d);
      conv_backward(a.conv_in[li], layout[li], w + layout[li].offset, d, g + layout[li].offset, nullptr);
    } else {
      conv_relu_back(d);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("train: learning_rate must be > 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
    throw ConfigError("train: adam betas must lie in [0,1)");
  if (!(adam_epsilon > 0.0)) throw ConfigError("train: adam_epsilon must be > 0");
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (max_epochs < 1) throw ConfigError("train: max_epochs must be >= 1");
  if (patience < 1) throw ConfigError("train: patience must be >= 1");
  if (!(tolerance >= 0.0)) throw ConfigError("train: tolerance must be >= 0");
  if (!(train_fraction > 0.0) || !(val_fraction >= 0.0) ||
      std::abs(train_fraction + val_fraction - 1.0) > 1e-9)
    throw ConfigError("train: train_fraction + val_fraction must equal 1");
  if (crop_size < 0) throw ConfigError("train: crop_size must be >= 0");
  if (!(foreground_prior > 0.0 && foreground_prior < 1.0))
    throw ConfigError("train: foreground_prior must lie in (0,1)");
  net.validate();
  if (crop_size > 0 && crop_size % (1 << net.levels) != 0)
    throw ConfigError("train: crop_size must be divisible by 2^levels");
}

void split_indices(std::size_t n, const TrainConfig& tcfg, std::vector<std::size_t>& train_idx,
                   std::vector<std::size_t>& val_idx) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(Rng::derive(tcfg.seed, 1));
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  std::size_t n_train = n;
  if (n >= 2 && tcfg.val_fraction > 0.0) {
    n_train = static_cast<std::size_t>(std::lround(tcfg.train_fraction * static_cast<double>(n)));
    n_train = std::clamp<std::size_t>(n_train, 1, n - 1);
  }
  train_idx.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  val_idx.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
  std::sort(train_idx.begin(), train_idx.end());
  std::sort(val_idx.begin(), val_idx.end());
}

namespace {

TrainingSample crop(const TrainingSample& s, int size, Rng& rng) {
  const int w = s.image.width();
  const int h = s.image.height();
  if (size <= 0 || (w <= size && h <= size)) return s;
  const int cw = std::min(size, w);
  const int ch = std::min(size, h);
  const int x0 = static_cast<int>(rng.below(static_cast<std::size_t>(w - cw + 1)));
  const int y0 = static_cast<int>(rng.below(static_cast<std::size_t>(h - ch + 1)));
  TrainingSample out{GrayImage(cw, ch), BinaryMask(cw, ch)};
  for (int y = 0; y < ch; ++y)
    for (int x = 0; x < cw; ++x) {
      out.image(x, y) = s.image(x0 + x, y0 + y);
      out.mask(x, y) = s.mask(x0 + x, y0 + y);
    }
  return out;
}

struct Evaluation {
  double loss = 0.0;
  double dice = 0.0;
};

Evaluation evaluate(const SegNetParams& params, const std::vector<TrainingSample>& samples,
                    const std::vector<std::size_t>& idx, const LossConfig& lcfg) {
  std::vector<Evaluation> per(idx.size());
  parallel_for(idx.size(), [&](std::size_t i) {
    const auto& s = samples[idx[i]];
    const ProbMap p = forward(params, s.image);
    per[i] = {explog_loss(p, s.mask, lcfg), soft_dice(p, s.mask, lcfg.epsilon)};
  });
  Evaluation e;
  for (const auto& v : per) {
    e.loss += v.loss;
    e.dice += v.dice;
  }
  if (!per.empty()) {
    e.loss /= static_cast<double>(per.size());
    e.dice /= static_cast<double>(per.size());
  }
  return e;
}

}  // namespace

TrainingResult train(const std::vector<TrainingSample>& samples, const TrainConfig& tcfg,
                     const LossConfig& lcfg) {
  tcfg.validate();
  lcfg.validate();
  if (samples.empty()) throw InvalidArgumentError("train: need at least one training image");
  for (const auto& s : samples) require_same_shape(s.image, s.mask, "train sample");

  TrainingResult result;
  split_indices(samples.size(), tcfg, result.train_indices, result.val_indices);
  const auto& val_idx = result.val_indices.empty() ? result.train_indices : result.val_indices;

  SegNetParams params = SegNetParams::random(tcfg.net, Rng::derive(tcfg.seed, 2), tcfg.foreground_prior);
  const std::size_t n_params = params.size();
  std::vector<double> m(n_params, 0.0), v(n_params, 0.0);
  std::uint64_t step = 0;

  const Evaluation init_train = evaluate(params, samples, result.train_indices, lcfg);
  const Evaluation init_val = evaluate(params, samples, val_idx, lcfg);
  result.log.push_back({0, init_train.loss, init_val.loss, init_val.dice});
  result.params = params;
  double best = init_val.loss;
  int stale = 0;

  for (int epoch = 1; epoch <= tcfg.max_epochs; ++epoch) {
    std::vector<std::size_t> order = result.train_indices;
    Rng shuffle_rng(Rng::derive(tcfg.seed, 100 + static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle_rng.below(i)]);
    Rng crop_rng(Rng::derive(tcfg.seed, 1'000'000 + static_cast<std::uint64_t>(epoch)));

    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(tcfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(tcfg.batch_size));
      std::vector<TrainingSample> batch;
      for (std::size_t i = start; i < end; ++i) batch.push_back(crop(samples[order[i]], tcfg.crop_size, crop_rng));
      std::vector<LossAndGradient> parts(batch.size());
      parallel_for(batch.size(), [&](std::size_t i) {
        parts[i] = loss_and_gradient(params, batch[i].image, batch[i].mask, lcfg);
      });
      std::vector<double> grad(n_params, 0.0);
      const double inv = 1.0 / static_cast<double>(parts.size());
      for (const auto& p : parts) {
        if (!std::isfinite(p.loss))
          throw TrainingDivergedError("non-finite loss at epoch " + std::to_string(epoch) +
                                      ", batch starting at " + std::to_string(start));
        epoch_loss += p.loss;
        for (std::size_t k = 0; k < n_params; ++k) grad[k] += p.gradient[k] * inv;
      }
      ++step;
      const double bc1 = 1.0 - std::pow(tcfg.beta1, static_cast<double>(step));
      const double bc2 = 1.0 - std::pow(tcfg.beta2, static_cast<double>(step));
      for (std::size_t k = 0; k < n_params; ++k) {
        if (!std::isfinite(grad[k]))
          throw TrainingDivergedError("non-finite gradient at epoch " + std::to_string(epoch));
        m[k] = tcfg.beta1 * m[k] + (1.0 - tcfg.beta1) * grad[k];
        v[k] = tcfg.beta2 * v[k] + (1.0 - tcfg.beta2) * grad[k] * grad[k];
        params.weights[k] -= tcfg.learning_rate * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + tcfg.adam_epsilon);
      }
    }
    epoch_loss /= static_cast<double>(order.size());
    const Evaluation val = evaluate(params, samples, val_idx, lcfg);
    if (!std::isfinite(val.loss))
      throw TrainingDivergedError("non-finite validation loss at epoch " + std::to_string(epoch));
    result.log.push_back({epoch, epoch_loss, val.loss, val.dice});

    if (val.loss < best) {
      stale = best - val.loss > tcfg.tolerance ? 0 : stale + 1;
      best = val.loss;
      result.params = params;
      result.best_epoch = epoch;
    } else {
      ++stale;
    }
    if (stale >= tcfg.patience) break;
  }
  return result;
}

std::string training_log_csv(const std::vector<EpochLog>& log) {
  std::ostringstream out;
  out.precision(10);
  out << "epoch,train_loss,val_loss,val_dice\n";
  for (const auto& e : log) out << e.epoch << ',' << e.train_loss << ',' << e.val_loss << ',' << e.val_dice << '\n';
  return out.str();
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

constexpr char kMagic[8] = {'C', 'V', 'C', 'S', 'E', 'G', 'N', '1'};
constexpr std::uint32_t kParamsVersion = 1;

template <typename T>
void put_le(std::string& out, T value) {
  for (std::size_t b = 0; b < sizeof(T); ++b) out.push_back(static_cast<char>((value >> (8 * b)) & 0xff));
}

template <typename T>
T get_le(const std::string& in, std::size_t& pos, const std::string& origin) {
  if (pos + sizeof(T) > in.size()) throw FormatError(origin + ": truncated segnet parameter file");
  T v = 0;
  for (std::size_t b = 0; b < sizeof(T); ++b)
    v |= static_cast<T>(static_cast<unsigned char>(in[pos + b])) << (8 * b);
  pos += sizeof(T);
  return v;
}

}  // namespace

void save_params(const std::filesystem::path& path, const SegNetParams& params) {
  std::string out(kMagic, sizeof kMagic);
  put_le<std::uint32_t>(out, kParamsVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(params.config.base_channels));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(params.config.levels));
  put_le<std::uint64_t>(out, params.config.hash());
  put_le<std::uint64_t>(out, params.weights.size());
  for (double wv : params.weights) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(wv)));
  write_file(path, out);
}

SegNetParams load_params(const std::filesystem::path& path) {
  const std::string in = read_file(path);
  const std::string origin = path.string();
  if (in.size() < sizeof kMagic || std::memcmp(in.data(), kMagic, sizeof kMagic) != 0)
    throw FormatError(origin + ": not a segnet parameter file");
  std::size_t pos = sizeof kMagic;
  if (get_le<std::uint32_t>(in, pos, origin) != kParamsVersion)
    throw FormatError(origin + ": unsupported segnet parameter version");
  SegNetConfig cfg;
  cfg.base_channels = static_cast<int>(get_le<std::uint32_t>(in, pos, origin));
  cfg.levels = static_cast<int>(get_le<std::uint32_t>(in, pos, origin));
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw FormatError(origin + ": " + e.what());
  }
  if (get_le<std::uint64_t>(in, pos, origin) != cfg.hash())
    throw FormatError(origin + ": configuration hash mismatch");
  SegNetParams p = SegNetParams::zeros(cfg);
  if (get_le<std::uint64_t>(in, pos, origin) != p.weights.size())
    throw FormatError(origin + ": weight count does not match configuration");
  for (double& wv : p.weights) {
    const float f = std::bit_cast<float>(get_le<std::uint32_t>(in, pos, origin));
    if (!std::isfinite(f)) throw FormatError(origin + ": non-finite weight");
    wv = f;
  }
  if (pos != in.size()) throw FormatError(origin + ": trailing bytes");
  return p;
}

}  // namespace cvc
