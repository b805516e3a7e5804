#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <vector>

#include "comvit/data.hpp"
#include "comvit/model.hpp"
#include "comvit/rng.hpp"
#include "comvit/tensor.hpp"

namespace comvit {

/// Supervised recipe: AdamW, linear warmup -> cosine -> flat cooldown,
/// mixup/cutmix until `mixup_off_epoch`, label smoothing, global-norm
/// clipping, stochastic depth (rate lives in ModelConfig).
struct TrainConfig {
  std::size_t epochs = 300;
  double base_lr = 1.1e-4;
  double warmup_epochs = 10;
  double cooldown_epochs = 10;
  double min_lr = 1e-5;
  double warmup_start_factor = 1e-2;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t batch_size = 512;
  double mixup_alpha = 0.8;
  double cutmix_alpha = 1.0;
  double cutmix_prob = 0.5;  // chance of cutmix over mixup when mixing
  double mixup_off_epoch = 175;
  double label_smoothing = 0.1;
  double clip_max_norm = 1.0;
  std::uint64_t seed = 0;
  bool hflip = true;
  bool random_resized_crop = true;
  double crop_min_scale = 0.7;
  std::size_t eval_batch_size = 256;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

/// Learning rate at fractional epoch `epoch` in [0, epochs].
double lr_at(double epoch, const TrainConfig& cfg);

template <typename T>
struct OptimizerState {
  std::vector<Tensor<T>> first_moment;
  std::vector<Tensor<T>> second_moment;
  std::uint64_t step = 0;

  static OptimizerState zeros_like(const std::vector<NamedTensor<T>>& params);
};

/// One AdamW update over `params` using their grad buffers (absent grad
/// counts as zero). Weight decay is decoupled and applied only where
/// decays(name) holds.
template <typename T>
void adamw_step(const std::vector<NamedTensor<T>>& params, OptimizerState<T>& state, double lr,
                const TrainConfig& cfg);

/// Global L2 norm over all grads; scales them by max_norm / norm when the
/// norm exceeds max_norm. Returns the pre-clip norm.
template <typename T>
double clip_grad_norm(const std::vector<NamedTensor<T>>& params, double max_norm);

/// (1 - s) * target + s / C, then soft-target cross-entropy, batch mean.
template <typename T>
Tensor<T> label_smooth_ce(const Tensor<T>& logits, const Tensor<T>& targets, double smoothing);

/// images [B x C x H x W], labels [B x classes], both mutated in place.
/// Each sample is mixed with its mirror in the batch (b <-> B-1-b).
void apply_mixup(Tensor<float>& images, Tensor<float>& labels, double lambda);

struct CutBox {
  std::size_t y0 = 0, x0 = 0, y1 = 0, x1 = 0;  // half-open
  double area_fraction(std::size_t height, std::size_t width) const {
    return static_cast<double>((y1 - y0) * (x1 - x0)) / static_cast<double>(height * width);
  }
};
/// Box with area fraction ~(1 - lambda), centered uniformly, clipped to the image.
CutBox sample_cut_box(std::size_t height, std::size_t width, double lambda, Rng& rng);
/// Pastes the mirrored sample's pixels inside `box`; pasted-class weight is the
/// box area fraction.
void apply_cutmix(Tensor<float>& images, Tensor<float>& labels, const CutBox& box);

struct MixResult {
  enum class Kind { none, mixup, cutmix } kind = Kind::none;
  double lambda = 1.0;  // weight kept by the original label
};
/// Batch-level mixing; identity when epoch >= mixup_off_epoch or batch < 2.
MixResult mixup_cutmix(Tensor<float>& images, Tensor<float>& labels, const TrainConfig& cfg, Rng& rng,
                       double epoch);

/// Random horizontal flip and random-resized crop (bilinear) on one CHW image.
void augment_image(std::span<float> chw, std::size_t channels, std::size_t height, std::size_t width,
                   const TrainConfig& cfg, Rng& rng);

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
double top1(const Tensor<float>& logits, std::span<const std::uint16_t> labels);

/// Top-1 accuracy in inference mode.
double evaluate(const ModelParams<float>& params, const ModelConfig& config, const Dataset& ds,
                std::size_t batch_size = 256);

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0;
  double eval_top1 = 0;
  double lr = 0;
};

/// Everything that evolves during training; checkpointable.
struct TrainState {
  ModelParams<float> params;
  OptimizerState<float> optimizer;
  Rng rng;
  std::size_t epoch = 0;  // next epoch to run

  static TrainState fresh(const ModelConfig& config, std::uint64_t seed);
  Checkpoint to_checkpoint(const ModelConfig& config) const;
  static TrainState from_checkpoint(const Checkpoint& ckpt);
};

struct FitCallbacks {
  std::function<void(std::size_t epoch, std::size_t step, double loss)> on_step;
  std::function<void(const EpochRecord&, const TrainState&)> on_epoch_end;
};

/// Writes the `epoch,train_loss,eval_top1,lr` header.
void write_metrics_header(std::ostream& out);
void write_metrics_row(std::ostream& out, const EpochRecord& record);

/// Runs epochs [state.epoch, until_epoch) (until_epoch 0 = cfg.epochs).
/// `metrics`, when given, gets one flushed CSV row per epoch.
/// Throws NumericalError naming epoch and step if the loss goes non-finite.
std::vector<EpochRecord> fit(TrainState& state, const ModelConfig& config, const Dataset& train, const Dataset* eval,
                             const TrainConfig& cfg, const FitCallbacks& callbacks = {}, std::ostream* metrics = nullptr,
                             std::size_t until_epoch = 0);

}  // namespace comvit
