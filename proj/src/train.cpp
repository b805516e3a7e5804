#include "comvit/train.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <ostream>
#include <string>

#include "comvit/errors.hpp"
#include "comvit/ops.hpp"

namespace comvit {

void TrainConfig::validate() const {
  if (epochs == 0) throw ConfigError("train.epochs must be >= 1");
  if (warmup_epochs < 0 || cooldown_epochs < 0) throw ConfigError("warmup/cooldown epochs must be >= 0");
  if (!(warmup_epochs + cooldown_epochs < static_cast<double>(epochs))) {
    throw ConfigError("train.warmup_epochs + train.cooldown_epochs must be < train.epochs");
  }
  if (!(base_lr > 0) || !(min_lr >= 0) || min_lr > base_lr) throw ConfigError("need 0 <= min_lr <= base_lr, base_lr > 0");
  if (!(warmup_start_factor > 0 && warmup_start_factor <= 1)) throw ConfigError("train.warmup_start_factor must be in (0, 1]");
  if (!(weight_decay >= 0)) throw ConfigError("train.weight_decay must be >= 0");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("AdamW betas must be in [0, 1)");
  if (!(eps > 0)) throw ConfigError("train.eps must be > 0");
  if (batch_size == 0 || eval_batch_size == 0) throw ConfigError("batch sizes must be >= 1");
  if (!(mixup_alpha > 0) || !(cutmix_alpha > 0)) throw ConfigError("mixup/cutmix alpha must be > 0");
  if (!(cutmix_prob >= 0 && cutmix_prob <= 1)) throw ConfigError("train.cutmix_prob must be in [0, 1]");
  if (!(label_smoothing >= 0 && label_smoothing < 1)) throw ConfigError("train.label_smoothing must be in [0, 1)");
  if (!(clip_max_norm > 0)) throw ConfigError("train.clip_max_norm must be > 0");
  if (!(crop_min_scale > 0 && crop_min_scale <= 1)) throw ConfigError("train.crop_min_scale must be in (0, 1]");
}

double lr_at(double epoch, const TrainConfig& cfg) {
  const double total = static_cast<double>(cfg.epochs);
  if (!(epoch >= 0.0 && epoch <= total)) {
    throw RangeError("lr_at: epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(cfg.epochs) + "]");
  }
  if (epoch < cfg.warmup_epochs) {
    const double start = cfg.base_lr * cfg.warmup_start_factor;
    return start + (cfg.base_lr - start) * (epoch / cfg.warmup_epochs);
  }
  const double cosine_end = total - cfg.cooldown_epochs;
  if (epoch >= cosine_end) return cfg.min_lr;
  const double phase = (epoch - cfg.warmup_epochs) / (cosine_end - cfg.warmup_epochs);
  return cfg.min_lr + (cfg.base_lr - cfg.min_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * phase));
}

template <typename T>
OptimizerState<T> OptimizerState<T>::zeros_like(const std::vector<NamedTensor<T>>& params) {
  OptimizerState<T> s;
  for (const auto& p : params) {
    s.first_moment.emplace_back(p.tensor.shape());
    s.second_moment.emplace_back(p.tensor.shape());
  }
  return s;
}

template <typename T>
void adamw_step(const std::vector<NamedTensor<T>>& params, OptimizerState<T>& state, double lr,
                const TrainConfig& cfg) {
  if (state.first_moment.size() != params.size() || state.second_moment.size() != params.size()) {
    throw StateError("optimizer state holds " + std::to_string(state.first_moment.size()) + " buffers for " +
                     std::to_string(params.size()) + " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.first_moment[i].shape() != params[i].tensor.shape() ||
        state.second_moment[i].shape() != params[i].tensor.shape()) {
      throw StateError("optimizer buffer shape mismatch for '" + params[i].name + "'");
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bias1 = 1.0 - std::pow(cfg.beta1, t);
  const double bias2 = 1.0 - std::pow(cfg.beta2, t);
  const T b1 = static_cast<T>(cfg.beta1);
  const T b2 = static_cast<T>(cfg.beta2);
  const T step_size = static_cast<T>(lr / bias1);
  const T inv_sqrt_bias2 = static_cast<T>(1.0 / std::sqrt(bias2));
  const T eps = static_cast<T>(cfg.eps);

  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T> p = params[i].tensor;
    auto w = p.mutable_data();
    auto g = p.grad();
    auto m = state.first_moment[i].mutable_data();
    auto v = state.second_moment[i].mutable_data();
    if (cfg.weight_decay > 0 && decays(params[i].name)) {
      const T keep = static_cast<T>(1.0 - lr * cfg.weight_decay);
      for (T& x : w) x *= keep;
    }
    for (std::size_t j = 0; j < w.size(); ++j) {
      const T gj = g.empty() ? T(0) : g[j];
      m[j] = b1 * m[j] + (T(1) - b1) * gj;
      v[j] = b2 * v[j] + (T(1) - b2) * gj * gj;
      w[j] -= step_size * m[j] / (std::sqrt(v[j]) * inv_sqrt_bias2 + eps);
    }
  }
}

template <typename T>
double clip_grad_norm(const std::vector<NamedTensor<T>>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    for (T g : p.tensor.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const T factor = static_cast<T>(max_norm / norm);
    for (const auto& p : params) {
      if (!p.tensor.has_grad()) continue;
      for (T& g : p.tensor.grad_buffer()) g *= factor;
    }
  }
  return norm;
}

template <typename T>
Tensor<T> label_smooth_ce(const Tensor<T>& logits, const Tensor<T>& targets, double smoothing) {
  if (!(smoothing >= 0.0 && smoothing < 1.0)) throw ConfigError("label smoothing must be in [0, 1)");
  if (targets.rank() != 2) throw DimensionError("label_smooth_ce: targets must be [B x C]");
  const T classes = static_cast<T>(targets.dim(1));
  const T keep = static_cast<T>(1.0 - smoothing);
  const T spread = static_cast<T>(smoothing) / classes;
  Tensor<T> smoothed(targets.shape());
  auto src = targets.data();
  auto dst = smoothed.mutable_data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = keep * src[i] + spread;
  return cross_entropy(logits, smoothed);
}

void apply_mixup(Tensor<float>& images, Tensor<float>& labels, double lambda) {
  const std::size_t batch = images.dim(0);
  const std::size_t plane = images.numel() / batch;
  const std::size_t classes = labels.dim(1);
  const float lam = static_cast<float>(lambda);
  const std::vector<float> img(images.data().begin(), images.data().end());
  const std::vector<float> lab(labels.data().begin(), labels.data().end());
  auto out = images.mutable_data();
  auto lout = labels.mutable_data();
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t mirror = batch - 1 - b;
    for (std::size_t i = 0; i < plane; ++i) {
      out[b * plane + i] = lam * img[b * plane + i] + (1.0f - lam) * img[mirror * plane + i];
    }
    for (std::size_t c = 0; c < classes; ++c) {
      lout[b * classes + c] = lam * lab[b * classes + c] + (1.0f - lam) * lab[mirror * classes + c];
    }
  }
}

CutBox sample_cut_box(std::size_t height, std::size_t width, double lambda, Rng& rng) {
  const double ratio = std::sqrt(1.0 - lambda);
  const auto cut_h = static_cast<long>(static_cast<double>(height) * ratio);
  const auto cut_w = static_cast<long>(static_cast<double>(width) * ratio);
  const auto cy = static_cast<long>(rng.below(height));
  const auto cx = static_cast<long>(rng.below(width));
  auto clip = [](long v, std::size_t hi) { return static_cast<std::size_t>(std::clamp(v, 0L, static_cast<long>(hi))); };
  return CutBox{clip(cy - cut_h / 2, height), clip(cx - cut_w / 2, width), clip(cy + cut_h / 2, height),
                clip(cx + cut_w / 2, width)};
}

void apply_cutmix(Tensor<float>& images, Tensor<float>& labels, const CutBox& box) {
  const std::size_t batch = images.dim(0);
  const std::size_t channels = images.dim(1);
  const std::size_t height = images.dim(2);
  const std::size_t width = images.dim(3);
  const std::size_t plane = channels * height * width;
  const std::size_t classes = labels.dim(1);
  const std::vector<float> img(images.data().begin(), images.data().end());
  const std::vector<float> lab(labels.data().begin(), labels.data().end());
  auto out = images.mutable_data();
  auto lout = labels.mutable_data();
  const float pasted = static_cast<float>(box.area_fraction(height, width));
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t mirror = batch - 1 - b;
    for (std::size_t c = 0; c < channels; ++c) {
      for (std::size_t y = box.y0; y < box.y1; ++y) {
        for (std::size_t x = box.x0; x < box.x1; ++x) {
          const std::size_t off = (c * height + y) * width + x;
          out[b * plane + off] = img[mirror * plane + off];
        }
      }
    }
    for (std::size_t c = 0; c < classes; ++c) {
      lout[b * classes + c] = (1.0f - pasted) * lab[b * classes + c] + pasted * lab[mirror * classes + c];
    }
  }
}

MixResult mixup_cutmix(Tensor<float>& images, Tensor<float>& labels, const TrainConfig& cfg, Rng& rng,
                       double epoch) {
  if (epoch >= cfg.mixup_off_epoch || images.dim(0) < 2) return {};
  MixResult result;
  const bool cut = rng.uniform() < cfg.cutmix_prob;
  if (cut) {
    const double lambda = rng.beta(cfg.cutmix_alpha, cfg.cutmix_alpha);
    const CutBox box = sample_cut_box(images.dim(2), images.dim(3), lambda, rng);
    apply_cutmix(images, labels, box);
    result.kind = MixResult::Kind::cutmix;
    result.lambda = 1.0 - box.area_fraction(images.dim(2), images.dim(3));
  } else {
    result.lambda = rng.beta(cfg.mixup_alpha, cfg.mixup_alpha);
    apply_mixup(images, labels, result.lambda);
    result.kind = MixResult::Kind::mixup;
  }
  return result;
}

void augment_image(std::span<float> chw, std::size_t channels, std::size_t height, std::size_t width,
                   const TrainConfig& cfg, Rng& rng) {
  if (cfg.hflip && rng.bernoulli(0.5)) {
    for (std::size_t c = 0; c < channels; ++c) {
      for (std::size_t y = 0; y < height; ++y) {
        float* row = chw.data() + (c * height + y) * width;
        std::reverse(row, row + width);
      }
    }
  }
  if (!cfg.random_resized_crop) return;
  const double area = static_cast<double>(height * width);
  const double target = area * rng.uniform(cfg.crop_min_scale, 1.0);
  const double log_ratio = rng.uniform(std::log(3.0 / 4.0), std::log(4.0 / 3.0));
  const double ratio = std::exp(log_ratio);
  double crop_w = std::sqrt(target * ratio);
  double crop_h = std::sqrt(target / ratio);
  crop_w = std::min(crop_w, static_cast<double>(width));
  crop_h = std::min(crop_h, static_cast<double>(height));
  const double x0 = rng.uniform(0.0, static_cast<double>(width) - crop_w);
  const double y0 = rng.uniform(0.0, static_cast<double>(height) - crop_h);

  const std::vector<float> src(chw.begin(), chw.end());
  const double sx = crop_w / static_cast<double>(width);
  const double sy = crop_h / static_cast<double>(height);
  for (std::size_t y = 0; y < height; ++y) {
    const double fy = std::clamp(y0 + (static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(height - 1));
    const auto iy = static_cast<std::size_t>(fy);
    const std::size_t iy1 = std::min(iy + 1, height - 1);
    const float wy = static_cast<float>(fy - static_cast<double>(iy));
    for (std::size_t x = 0; x < width; ++x) {
      const double fx = std::clamp(x0 + (static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(width - 1));
      const auto ix = static_cast<std::size_t>(fx);
      const std::size_t ix1 = std::min(ix + 1, width - 1);
      const float wx = static_cast<float>(fx - static_cast<double>(ix));
      for (std::size_t c = 0; c < channels; ++c) {
        const float* p = src.data() + c * height * width;
        const float top = p[iy * width + ix] * (1 - wx) + p[iy * width + ix1] * wx;
        const float bottom = p[iy1 * width + ix] * (1 - wx) + p[iy1 * width + ix1] * wx;
        chw[(c * height + y) * width + x] = top * (1 - wy) + bottom * wy;
      }
    }
  }
}

double top1(const Tensor<float>& logits, std::span<const std::uint16_t> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) throw DimensionError("top1: logits/labels mismatch");
  const std::size_t classes = logits.dim(1);
  std::size_t correct = 0;
  auto z = logits.data();
  for (std::size_t b = 0; b < labels.size(); ++b) {
    const float* row = z.data() + b * classes;
    const auto best = static_cast<std::size_t>(std::max_element(row, row + classes) - row);  // first max
    if (best == labels[b]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

double evaluate(const ModelParams<float>& params, const ModelConfig& config, const Dataset& ds,
                std::size_t batch_size) {
  if (ds.count == 0) throw ConfigError("evaluate: empty dataset");
  if (ds.height != config.image_size || ds.width != config.image_size || ds.channels != config.in_channels) {
    throw ConfigError("evaluate: dataset images " + std::to_string(ds.height) + "x" + std::to_string(ds.width) + "x" +
                      std::to_string(ds.channels) + " do not match model input");
  }
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < ds.count; start += batch_size) {
    const std::size_t end = std::min<std::size_t>(ds.count, start + batch_size);
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const Tensor<float> logits = forward(image_batch(ds, idx), params, config, false);
    const double acc = top1(logits, std::span(ds.labels).subspan(start, end - start));
    correct += static_cast<std::size_t>(std::lround(acc * static_cast<double>(end - start)));
  }
  return static_cast<double>(correct) / static_cast<double>(ds.count);
}

TrainState TrainState::fresh(const ModelConfig& config, std::uint64_t seed) {
  TrainState s;
  s.rng = Rng(seed);
  s.params = init_params<float>(config, s.rng);
  s.optimizer = OptimizerState<float>::zeros_like(s.params.named());
  return s;
}

Checkpoint TrainState::to_checkpoint(const ModelConfig& config) const {
  Checkpoint ckpt;
  ckpt.config = config;
  const auto named = params.named();
  for (const auto& p : named) ckpt.tensors.push_back({p.name, p.tensor.detach()});
  for (std::size_t i = 0; i < named.size(); ++i) {
    ckpt.tensors.push_back({"adamw.m." + named[i].name, optimizer.first_moment[i].detach()});
  }
  for (std::size_t i = 0; i < named.size(); ++i) {
    ckpt.tensors.push_back({"adamw.v." + named[i].name, optimizer.second_moment[i].detach()});
  }
  ckpt.epoch = static_cast<std::uint32_t>(epoch);
  ckpt.rng = rng.state();
  ckpt.optimizer_step = optimizer.step;
  return ckpt;
}

TrainState TrainState::from_checkpoint(const Checkpoint& ckpt) {
  check_compatible(ckpt, ckpt.config);
  const std::size_t n = param_shapes(ckpt.config).size();
  std::vector<NamedTensor<float>> weights;
  for (std::size_t i = 0; i < n; ++i) weights.push_back({ckpt.tensors[i].name, ckpt.tensors[i].tensor.detach()});
  TrainState s;
  s.params = assemble_params(ckpt.config, std::move(weights));
  if (ckpt.has_optimizer()) {
    for (std::size_t i = 0; i < n; ++i) s.optimizer.first_moment.push_back(ckpt.tensors[n + i].tensor.detach());
    for (std::size_t i = 0; i < n; ++i) s.optimizer.second_moment.push_back(ckpt.tensors[2 * n + i].tensor.detach());
    s.optimizer.step = ckpt.optimizer_step;
  } else {
    s.optimizer = OptimizerState<float>::zeros_like(s.params.named());
  }
  s.rng = Rng(ckpt.rng);
  s.epoch = ckpt.epoch;
  return s;
}

void write_metrics_header(std::ostream& out) { out << "epoch,train_loss,eval_top1,lr\n" << std::flush; }

void write_metrics_row(std::ostream& out, const EpochRecord& r) {
  const auto old = out.precision(17);
  out << r.epoch << ',' << r.train_loss << ',' << r.eval_top1 << ',' << r.lr << '\n' << std::flush;
  out.precision(old);
}

std::vector<EpochRecord> fit(TrainState& state, const ModelConfig& config, const Dataset& train, const Dataset* eval,
                             const TrainConfig& cfg, const FitCallbacks& callbacks, std::ostream* metrics,
                             std::size_t until_epoch) {
  cfg.validate();
  config.validate();
  if (until_epoch == 0) until_epoch = cfg.epochs;
  if (until_epoch > cfg.epochs) throw ConfigError("fit: until_epoch beyond train.epochs");
  if (train.count == 0) throw ConfigError("fit: empty training set");
  if (train.height != config.image_size || train.width != config.image_size || train.channels != config.in_channels) {
    throw ConfigError("fit: training images do not match model input size/channels");
  }
  if (train.num_classes > config.num_classes) throw ConfigError("fit: dataset has more classes than the model");

  const std::size_t classes = config.num_classes;
  const std::size_t plane = train.image_bytes();
  const std::size_t steps = (train.count + cfg.batch_size - 1) / cfg.batch_size;
  const auto named = state.params.named();
  std::vector<EpochRecord> history;
  std::vector<std::size_t> order(train.count);

  for (; state.epoch < until_epoch; ++state.epoch) {
    const std::size_t epoch = state.epoch;
    std::iota(order.begin(), order.end(), std::size_t{0});
    state.rng.shuffle(std::span(order));
    double loss_sum = 0.0;
    std::size_t seen = 0;
    for (std::size_t step = 0; step < steps; ++step) {
      const std::size_t begin = step * cfg.batch_size;
      const std::size_t end = std::min<std::size_t>(train.count, begin + cfg.batch_size);
      const auto idx = std::span(order).subspan(begin, end - begin);
      Tensor<float> images = image_batch(train, idx);
      Tensor<float> targets(Shape{idx.size(), classes});
      for (std::size_t b = 0; b < idx.size(); ++b) targets.mutable_data()[b * classes + train.labels[idx[b]]] = 1.0f;
      if (cfg.hflip || cfg.random_resized_crop) {
        for (std::size_t b = 0; b < idx.size(); ++b) {
          augment_image(images.mutable_data().subspan(b * plane, plane), train.channels, train.height, train.width,
                        cfg, state.rng);
        }
      }
      const double progress = static_cast<double>(epoch) + static_cast<double>(step) / static_cast<double>(steps);
      mixup_cutmix(images, targets, cfg, state.rng, static_cast<double>(epoch));

      double loss_value = 0.0;
      try {
        Tape<float> tape;
        TapeScope<float> scope(tape);
        const Tensor<float> logits = forward(images, state.params, config, true, &state.rng);
        const Tensor<float> loss = label_smooth_ce(logits, targets, cfg.label_smoothing);
        loss_value = loss.item();
        if (!std::isfinite(loss_value)) throw NumericalError("non-finite loss");
        state.params.zero_grad();
        tape.backward(loss);
      } catch (const NumericalError& e) {
        throw NumericalError("training diverged at epoch " + std::to_string(epoch) + " step " + std::to_string(step) +
                             ": " + e.what());
      }
      clip_grad_norm(named, cfg.clip_max_norm);
      adamw_step(named, state.optimizer, lr_at(progress, cfg), cfg);

      loss_sum += loss_value * static_cast<double>(idx.size());
      seen += idx.size();
      if (callbacks.on_step) callbacks.on_step(epoch, step, loss_value);
    }
    EpochRecord record;
    record.epoch = epoch;
    record.train_loss = loss_sum / static_cast<double>(seen);
    record.eval_top1 = eval != nullptr ? evaluate(state.params, config, *eval, cfg.eval_batch_size) : 0.0;
    record.lr = lr_at(static_cast<double>(epoch), cfg);
    history.push_back(record);
    if (metrics != nullptr) write_metrics_row(*metrics, record);
    if (callbacks.on_epoch_end) {
      ++state.epoch;  // a checkpoint taken here resumes at the next epoch
      callbacks.on_epoch_end(record, state);
      --state.epoch;
    }
  }
  return history;
}

#define COMVIT_INSTANTIATE_TRAIN(T)                                                                   \
  template struct OptimizerState<T>;                                                                  \
  template void adamw_step(const std::vector<NamedTensor<T>>&, OptimizerState<T>&, double,            \
                           const TrainConfig&);                                                       \
  template double clip_grad_norm(const std::vector<NamedTensor<T>>&, double);                        \
  template Tensor<T> label_smooth_ce(const Tensor<T>&, const Tensor<T>&, double);

COMVIT_INSTANTIATE_TRAIN(float)
COMVIT_INSTANTIATE_TRAIN(double)

}  // namespace comvit
