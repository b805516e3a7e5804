#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "comvit/data.hpp"
#include "comvit/model.hpp"
#include "comvit/tensor.hpp"

namespace comvit {

/// Class-evidence map over the token grid, values in [0, 1].
struct Heatmap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> values;  // row-major
  std::size_t source_extent = 0;  // image side the grid was computed from
};

/// relu(sum_c mean(grad_c) * activation_c), divided by its maximum unless it
/// is identically zero. activation and grad are [h x g x g].
Heatmap cam_from_activations(const Tensor<float>& activation, const Tensor<float>& grad);

/// Grad-CAM on the tokenizer's final feature map for one image
/// [C x H x W] (or [1 x C x H x W]). Runs the model in inference mode.
Heatmap grad_cam(const ModelParams<float>& params, const ModelConfig& config, const Tensor<float>& image,
                 std::size_t target_class);

/// Nearest-neighbor upsample to `size` x `size`.
std::vector<float> upsample_nearest(const Heatmap& map, std::size_t size);

/// Binary PGM: "P5\n<w> <h>\n255\n" then u8 rows, value * 255 rounded half up.
std::vector<std::uint8_t> write_pgm(const Heatmap& map, std::size_t scale_to);

struct Localization {
  double inside = 0;
  double outside = 0;
};
/// Mean upsampled heat inside and outside `box` at `image_size` resolution.
Localization localization(const Heatmap& map, std::size_t image_size, const BoundingBox& box);

}  // namespace comvit
