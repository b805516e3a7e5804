#include "comvit/explain.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "comvit/errors.hpp"
#include "comvit/ops.hpp"

namespace comvit {

Heatmap cam_from_activations(const Tensor<float>& activation, const Tensor<float>& grad) {
  if (activation.rank() != 3 || grad.shape() != activation.shape()) {
    throw DimensionError("cam: activation " + shape_str(activation.shape()) + " vs grad " + shape_str(grad.shape()));
  }
  const std::size_t channels = activation.dim(0);
  const std::size_t h = activation.dim(1);
  const std::size_t w = activation.dim(2);
  const std::size_t plane = h * w;
  auto a = activation.data();
  auto g = grad.data();
  std::vector<double> acc(plane, 0.0);
  for (std::size_t c = 0; c < channels; ++c) {
    double alpha = 0.0;
    for (std::size_t i = 0; i < plane; ++i) alpha += g[c * plane + i];
    alpha /= static_cast<double>(plane);
    if (alpha == 0.0) continue;
    for (std::size_t i = 0; i < plane; ++i) acc[i] += alpha * a[c * plane + i];
  }
  Heatmap map;
  map.height = h;
  map.width = w;
  map.values.resize(plane);
  double peak = 0.0;
  for (double& v : acc) {
    v = std::max(v, 0.0);
    peak = std::max(peak, v);
  }
  for (std::size_t i = 0; i < plane; ++i) map.values[i] = peak > 0.0 ? static_cast<float>(acc[i] / peak) : 0.0f;
  return map;
}

Heatmap grad_cam(const ModelParams<float>& params, const ModelConfig& config, const Tensor<float>& image,
                 std::size_t target_class) {
  if (target_class >= config.num_classes) {
    throw IndexError("grad_cam: target class " + std::to_string(target_class) + " >= num_classes " +
                     std::to_string(config.num_classes));
  }
  Tensor<float> batch = image.rank() == 3 ? reshape(image, Shape{1, image.dim(0), image.dim(1), image.dim(2)}) : image;
  if (batch.rank() != 4 || batch.dim(0) != 1) throw DimensionError("grad_cam: expected a single image");

  // Private constant copy of the weights: the caller's grads stay untouched and
  // the tape reaches the feature map through the image alone.
  std::vector<NamedTensor<float>> frozen;
  for (const auto& p : params.named()) frozen.push_back({p.name, p.tensor.detach()});
  const ModelParams<float> snapshot = assemble_params(config, std::move(frozen));
  for (const auto& p : snapshot.named()) Tensor<float>(p.tensor).set_requires_grad(false);
  Tensor<float> input = batch.detach();
  input.set_requires_grad(true);

  Tape<float> tape;
  TapeScope<float> scope(tape);
  ForwardTrace<float> trace;
  const Tensor<float> logits = forward(input, snapshot, config, false, nullptr, &trace);
  Tensor<float> pick(logits.shape());
  pick.mutable_data()[target_class] = 1.0f;
  const Tensor<float> score = sum(mul(logits, pick));
  tape.backward(score);

  const Tensor<float>& fmap = trace.feature_map;
  const Shape chw{fmap.dim(1), fmap.dim(2), fmap.dim(3)};
  Tensor<float> activation(chw, std::vector<float>(fmap.data().begin(), fmap.data().end()));
  Tensor<float> grad(chw);
  if (fmap.has_grad()) std::copy(fmap.grad().begin(), fmap.grad().end(), grad.mutable_data().begin());

  Heatmap map = cam_from_activations(activation, grad);
  map.source_extent = config.image_size;
  return map;
}

std::vector<float> upsample_nearest(const Heatmap& map, std::size_t size) {
  std::vector<float> out(size * size);
  for (std::size_t y = 0; y < size; ++y) {
    const std::size_t sy = y * map.height / size;
    for (std::size_t x = 0; x < size; ++x) out[y * size + x] = map.values[sy * map.width + x * map.width / size];
  }
  return out;
}

std::vector<std::uint8_t> write_pgm(const Heatmap& map, std::size_t scale_to) {
  const std::string header = "P5\n" + std::to_string(scale_to) + " " + std::to_string(scale_to) + "\n255\n";
  std::vector<std::uint8_t> bytes(header.begin(), header.end());
  for (float v : upsample_nearest(map, scale_to)) {
    const double q = std::floor(std::clamp(static_cast<double>(v), 0.0, 1.0) * 255.0 + 0.5);
    bytes.push_back(static_cast<std::uint8_t>(q));
  }
  return bytes;
}

Localization localization(const Heatmap& map, std::size_t image_size, const BoundingBox& box) {
  const std::vector<float> up = upsample_nearest(map, image_size);
  double in_sum = 0, out_sum = 0;
  std::size_t in_n = 0, out_n = 0;
  for (std::size_t y = 0; y < image_size; ++y) {
    for (std::size_t x = 0; x < image_size; ++x) {
      const bool inside = x >= box.x0 && x < box.x1 && y >= box.y0 && y < box.y1;
      (inside ? in_sum : out_sum) += up[y * image_size + x];
      ++(inside ? in_n : out_n);
    }
  }
  return {in_n ? in_sum / static_cast<double>(in_n) : 0.0, out_n ? out_sum / static_cast<double>(out_n) : 0.0};
}

}  // namespace comvit
