#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "comvit/model.hpp"
#include "comvit/rng.hpp"
#include "comvit/tensor.hpp"

namespace comvit {

/// Labeled u8 images, row-major [count][height][width][channels].
///
/// CMVD1 layout (little-endian):
///   "CMVD1" + 3 zero bytes
///   u32 count, height, width, channels, num_classes
///   pixel block, count*height*width*channels bytes
///   label block, u16 per sample
struct Dataset {
  std::uint32_t count = 0;
  std::uint32_t height = 0;
  std::uint32_t width = 0;
  std::uint32_t channels = 0;
  std::uint32_t num_classes = 0;
  std::vector<std::uint8_t> pixels;
  std::vector<std::uint16_t> labels;

  std::size_t image_bytes() const { return static_cast<std::size_t>(height) * width * channels; }
  std::span<const std::uint8_t> image(std::size_t index) const {
    return std::span(pixels).subspan(index * image_bytes(), image_bytes());
  }
  /// Throws ContentError/SizeError if the header arithmetic or labels are off.
  void validate() const;
  bool operator==(const Dataset&) const = default;
};

inline constexpr std::size_t kDatasetHeaderBytes = 28;

std::vector<std::uint8_t> write_dataset(const Dataset& ds);
Dataset read_dataset(std::span<const std::uint8_t> bytes);

void save_dataset(const std::filesystem::path& path, const Dataset& ds);
Dataset load_dataset(const std::filesystem::path& path);

/// Pixel u8 -> [0,1] -> (v - 0.5) / 0.5, writing CHW planes into `out`.
void normalize_image(std::span<const std::uint8_t> hwc, std::size_t height, std::size_t width, std::size_t channels,
                     std::span<float> chw);
/// Normalized [count x C x H x W] tensor for the given sample indices.
Tensor<float> image_batch(const Dataset& ds, std::span<const std::size_t> indices);

/// Half-open pixel rectangle [x0, x1) x [y0, y1).
struct BoundingBox {
  std::uint32_t x0 = 0;
  std::uint32_t y0 = 0;
  std::uint32_t x1 = 0;
  std::uint32_t y1 = 0;
  bool operator==(const BoundingBox&) const = default;
};

struct SynthShapes {
  Dataset dataset;
  std::vector<BoundingBox> boxes;
  std::optional<std::string> warning;
};

/// Two-class grayscale set: class 0 filled circles, class 1 filled squares,
/// with random center, size and intensity over a noisy background. Classes
/// alternate by index, so any even count is exactly balanced.
SynthShapes synth_shapes(std::size_t count, std::size_t image_size, std::uint64_t seed);

/// Sidecar CSV with header `index,x0,y0,x1,y1`.
std::string boxes_csv(std::span<const BoundingBox> boxes);
std::vector<BoundingBox> parse_boxes_csv(const std::string& text);

/// Model snapshot. Tensors are the parameters in canonical order, optionally
/// followed by AdamW first/second moments named "adamw.m.<param>" and
/// "adamw.v.<param>".
///
/// CMVW1 layout (little-endian):
///   "CMVW1" + 3 zero bytes
///   config: u32 x14 (image_size, in_channels, layers, hidden, heads,
///     mlp_size, num_classes, stem_channels, conv_kernel, conv_stride,
///     conv_padding, pool_kernel, pool_stride, pool_padding),
///     f64 drop_path_rate, f64 temperature_init, u8 diagonal_mask, u8 pre_norm
///   u32 tensor count, then per tensor: u16 name length, name bytes,
///     u8 ndim, u32 extents, f32 data
///   trailer: u32 epoch, u64 rng seed, u64 rng counter, u64 optimizer step
struct Checkpoint {
  ModelConfig config;
  std::vector<NamedTensor<float>> tensors;
  std::uint32_t epoch = 0;
  Rng::State rng;
  std::uint64_t optimizer_step = 0;

  bool has_optimizer() const;
};

std::vector<std::uint8_t> save_checkpoint(const Checkpoint& ckpt);
/// Verifies the tensor names and shapes against the embedded config.
Checkpoint load_checkpoint(std::span<const std::uint8_t> bytes);
/// IncompatibleError naming the first tensor whose name or shape differs
/// from what `expected` would allocate.
void check_compatible(const Checkpoint& ckpt, const ModelConfig& expected);

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

}  // namespace comvit
