#include "comvit/model.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "comvit/errors.hpp"
#include "comvit/ops.hpp"

namespace comvit {

std::vector<std::size_t> ModelConfig::stage_extents() const {
  const std::size_t c1 = conv1().output_extent(image_size);
  const std::size_t p1 = pool().output_extent(c1);
  const std::size_t c2 = conv2().output_extent(p1);
  const std::size_t p2 = pool().output_extent(c2);
  return {c1, p1, c2, p2};
}

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw ConfigError(std::string("model.") + name + " must be >= 1");
  };
  positive(image_size, "image_size");
  positive(in_channels, "in_channels");
  positive(layers, "layers");
  positive(hidden, "hidden");
  positive(heads, "heads");
  positive(mlp_size, "mlp_size");
  positive(num_classes, "num_classes");
  positive(stem_channels, "stem_channels");
  positive(conv_kernel, "conv_kernel");
  positive(conv_stride, "conv_stride");
  positive(pool_kernel, "pool_kernel");
  positive(pool_stride, "pool_stride");
  if (num_classes > 65535) throw ConfigError("model.num_classes must fit in u16");
  if (hidden % heads != 0) {
    throw ConfigError("model.hidden (" + std::to_string(hidden) + ") must be divisible by model.heads (" +
                      std::to_string(heads) + ")");
  }
  if (2 * pool_padding > pool_kernel) throw ConfigError("model.pool_padding must be at most pool_kernel / 2");
  if (!(drop_path_rate >= 0.0 && drop_path_rate < 1.0)) throw ConfigError("model.drop_path_rate must be in [0, 1)");
  if (!(temperature_init > kTemperatureFloor)) {
    throw ConfigError("model.temperature_init must exceed " + std::to_string(kTemperatureFloor));
  }
  std::vector<std::size_t> extents;
  try {
    extents = stage_extents();
  } catch (const DimensionError& e) {
    throw ConfigError(std::string("tokenizer produces zero tokens: ") + e.what());
  }
  if (diagonal_mask && sequence_length() < 2) {
    throw ConfigError("diagonal masking needs at least 2 tokens, tokenizer yields " +
                      std::to_string(sequence_length()));
  }
}

std::vector<std::pair<std::string, Shape>> param_shapes(const ModelConfig& c) {
  const std::size_t k = c.conv_kernel;
  const std::size_t h = c.hidden;
  std::vector<std::pair<std::string, Shape>> shapes{
      {"tokenizer.conv1.weight", {c.stem_channels, c.in_channels, k, k}},
      {"tokenizer.conv1.bias", {c.stem_channels}},
      {"tokenizer.conv2.weight", {h, c.stem_channels, k, k}},
      {"tokenizer.conv2.bias", {h}},
      {"pos_embed", {c.sequence_length(), h}},
  };
  for (std::size_t l = 0; l < c.layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    shapes.push_back({p + "ln1.gamma", {h}});
    shapes.push_back({p + "ln1.beta", {h}});
    for (const char* proj : {"q", "k", "v", "out"}) {
      shapes.push_back({p + "attn." + proj + ".weight", {h, h}});
      shapes.push_back({p + "attn." + proj + ".bias", {h}});
    }
    shapes.push_back({p + "attn.temperature", {c.heads}});
    shapes.push_back({p + "ln2.gamma", {h}});
    shapes.push_back({p + "ln2.beta", {h}});
    shapes.push_back({p + "mlp.fc1.weight", {h, c.mlp_size}});
    shapes.push_back({p + "mlp.fc1.bias", {c.mlp_size}});
    shapes.push_back({p + "mlp.fc2.weight", {c.mlp_size, h}});
    shapes.push_back({p + "mlp.fc2.bias", {h}});
  }
  shapes.push_back({"norm.gamma", {h}});
  shapes.push_back({"norm.beta", {h}});
  shapes.push_back({"seq_pool.weight", {h, 1}});
  shapes.push_back({"seq_pool.bias", {1}});
  shapes.push_back({"classifier.weight", {h, c.num_classes}});
  shapes.push_back({"classifier.bias", {c.num_classes}});
  return shapes;
}

bool decays(const std::string& name) {
  if (name == "pos_embed") return false;
  if (name.ends_with(".temperature")) return false;
  if (name.ends_with(".gamma") || name.ends_with(".beta")) return false;
  return name.ends_with(".weight");
}

template <typename T>
std::vector<NamedTensor<T>> ModelParams<T>::named() const {
  std::vector<NamedTensor<T>> out{
      {"tokenizer.conv1.weight", conv1_weight},
      {"tokenizer.conv1.bias", conv1_bias},
      {"tokenizer.conv2.weight", conv2_weight},
      {"tokenizer.conv2.bias", conv2_bias},
      {"pos_embed", pos_embed},
  };
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    const LayerParams<T>& L = layers[l];
    out.push_back({p + "ln1.gamma", L.ln1_gamma});
    out.push_back({p + "ln1.beta", L.ln1_beta});
    out.push_back({p + "attn.q.weight", L.q_weight});
    out.push_back({p + "attn.q.bias", L.q_bias});
    out.push_back({p + "attn.k.weight", L.k_weight});
    out.push_back({p + "attn.k.bias", L.k_bias});
    out.push_back({p + "attn.v.weight", L.v_weight});
    out.push_back({p + "attn.v.bias", L.v_bias});
    out.push_back({p + "attn.out.weight", L.out_weight});
    out.push_back({p + "attn.out.bias", L.out_bias});
    out.push_back({p + "attn.temperature", L.temperature});
    out.push_back({p + "ln2.gamma", L.ln2_gamma});
    out.push_back({p + "ln2.beta", L.ln2_beta});
    out.push_back({p + "mlp.fc1.weight", L.fc1_weight});
    out.push_back({p + "mlp.fc1.bias", L.fc1_bias});
    out.push_back({p + "mlp.fc2.weight", L.fc2_weight});
    out.push_back({p + "mlp.fc2.bias", L.fc2_bias});
  }
  out.push_back({"norm.gamma", norm_gamma});
  out.push_back({"norm.beta", norm_beta});
  out.push_back({"seq_pool.weight", pool_weight});
  out.push_back({"seq_pool.bias", pool_bias});
  out.push_back({"classifier.weight", head_weight});
  out.push_back({"classifier.bias", head_bias});
  return out;
}

template <typename T>
std::size_t ModelParams<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : named()) n += p.tensor.numel();
  return n;
}

template <typename T>
void ModelParams<T>::zero_grad() const {
  for (const auto& p : named()) p.tensor.zero_grad();
}

template <typename T>
ModelParams<T> assemble_params(const ModelConfig& config, std::vector<NamedTensor<T>> tensors) {
  const auto shapes = param_shapes(config);
  if (tensors.size() != shapes.size()) {
    throw IncompatibleError("expected " + std::to_string(shapes.size()) + " parameter tensors, got " +
                            std::to_string(tensors.size()));
  }
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    if (tensors[i].name != shapes[i].first || tensors[i].tensor.shape() != shapes[i].second) {
      throw IncompatibleError("tensor '" + tensors[i].name + "' " + shape_str(tensors[i].tensor.shape()) +
                              " does not match expected '" + shapes[i].first + "' " + shape_str(shapes[i].second));
    }
  }
  std::size_t next = 0;
  auto take = [&]() {
    Tensor<T> t = tensors[next++].tensor;
    t.set_requires_grad(true);
    return t;
  };
  ModelParams<T> p;
  p.conv1_weight = take();
  p.conv1_bias = take();
  p.conv2_weight = take();
  p.conv2_bias = take();
  p.pos_embed = take();
  p.layers.resize(config.layers);
  for (auto& L : p.layers) {
    L.ln1_gamma = take();
    L.ln1_beta = take();
    L.q_weight = take();
    L.q_bias = take();
    L.k_weight = take();
    L.k_bias = take();
    L.v_weight = take();
    L.v_bias = take();
    L.out_weight = take();
    L.out_bias = take();
    L.temperature = take();
    L.ln2_gamma = take();
    L.ln2_beta = take();
    L.fc1_weight = take();
    L.fc1_bias = take();
    L.fc2_weight = take();
    L.fc2_bias = take();
  }
  p.norm_gamma = take();
  p.norm_beta = take();
  p.pool_weight = take();
  p.pool_bias = take();
  p.head_weight = take();
  p.head_bias = take();
  return p;
}

template <typename T>
ModelParams<T> init_params(const ModelConfig& config, Rng& rng) {
  config.validate();
  // theta such that softplus(theta) + floor == temperature_init
  const double theta0 = std::log(std::expm1(config.temperature_init - kTemperatureFloor));
  std::vector<NamedTensor<T>> tensors;
  for (const auto& [name, shape] : param_shapes(config)) {
    Tensor<T> t(shape);
    auto d = t.mutable_data();
    if (name.starts_with("tokenizer.") && name.ends_with(".weight")) {
      const double fan_in = static_cast<double>(shape[1] * shape[2] * shape[3]);
      const double stddev = std::sqrt(2.0 / fan_in);
      for (T& v : d) v = static_cast<T>(rng.normal() * stddev);
    } else if (name == "pos_embed") {
      for (T& v : d) v = static_cast<T>(rng.truncated_normal(0.2));
    } else if (name.ends_with(".temperature")) {
      for (T& v : d) v = static_cast<T>(theta0);
    } else if (name.ends_with(".gamma")) {
      for (T& v : d) v = T(1);
    } else if (name.ends_with(".weight")) {
      for (T& v : d) v = static_cast<T>(rng.truncated_normal(0.02));
    }
    tensors.push_back({name, std::move(t)});
  }
  return assemble_params(config, std::move(tensors));
}

template <typename T>
Tokens<T> tokenize(const Tensor<T>& images, const ModelParams<T>& params, const ModelConfig& config) {
  if (images.rank() != 4 || images.dim(1) != config.in_channels || images.dim(2) != config.image_size ||
      images.dim(3) != config.image_size) {
    throw DimensionError("tokenize: expected [B x " + std::to_string(config.in_channels) + " x " +
                         std::to_string(config.image_size) + " x " + std::to_string(config.image_size) + "], got " +
                         shape_str(images.shape()));
  }
  Tensor<T> x = relu(conv2d(images, params.conv1_weight, params.conv1_bias, config.conv1()));
  x = maxpool2d(x, config.pool());
  x = relu(conv2d(x, params.conv2_weight, params.conv2_bias, config.conv2()));
  Tensor<T> fmap = maxpool2d(x, config.pool());
  const std::size_t batch = images.dim(0);
  const std::size_t n = fmap.dim(2) * fmap.dim(3);
  if (n == 0) throw ConfigError("tokenizer produced zero tokens");
  // [B, h, g, g] -> [B, h, N] -> [B, N, h]; tokens in row-major grid order
  Tensor<T> tokens = permute(reshape(fmap, Shape{batch, config.hidden, n}), {0, 2, 1});
  return {fmap, tokens};
}

template <typename T>
Tensor<T> add_positional(const Tensor<T>& tokens, const Tensor<T>& pos_embed) {
  if (tokens.rank() != 3 || pos_embed.rank() != 2 || tokens.dim(2) != pos_embed.dim(1)) {
    throw DimensionError("add_positional: tokens " + shape_str(tokens.shape()) + " vs table " +
                         shape_str(pos_embed.shape()));
  }
  if (tokens.dim(1) != pos_embed.dim(0)) {
    throw DimensionError("sequence length mismatch: " + std::to_string(tokens.dim(1)) +
                         " tokens but positional table has " + std::to_string(pos_embed.dim(0)) + " rows");
  }
  return add(tokens, pos_embed);
}

template <typename T>
Tensor<T> diagonal_mask(std::size_t n) {
  Tensor<T> m(Shape{n, n});
  auto d = m.mutable_data();
  for (std::size_t i = 0; i < n; ++i) d[i * n + i] = -std::numeric_limits<T>::infinity();
  return m;
}

template <typename T>
Tensor<T> temperatures(const LayerParams<T>& layer) {
  return shift(softplus(layer.temperature), static_cast<T>(kTemperatureFloor));
}

template <typename T>
Tensor<T> masked_attention(const Tensor<T>& z, const LayerParams<T>& layer, const ModelConfig& config,
                           Tensor<T>* probs) {
  const std::size_t batch = z.dim(0);
  const std::size_t n = z.dim(1);
  const std::size_t heads = config.heads;
  const std::size_t dk = config.head_dim();
  if (config.diagonal_mask && n < 2) {
    throw NumericalError("masked attention over a single token leaves no unmasked logit");
  }
  auto split_heads = [&](const Tensor<T>& w, const Tensor<T>& b) {
    // [B, N, h] -> [B, heads, N, dk]
    return permute(reshape(add(matmul(z, w), b), Shape{batch, n, heads, dk}), {0, 2, 1, 3});
  };
  Tensor<T> q = split_heads(layer.q_weight, layer.q_bias);
  Tensor<T> k = split_heads(layer.k_weight, layer.k_bias);
  Tensor<T> v = split_heads(layer.v_weight, layer.v_bias);

  Tensor<T> logits = matmul(q, permute(k, {0, 1, 3, 2}));
  Tensor<T> inv_scale = reciprocal(scale(temperatures(layer), std::sqrt(static_cast<T>(dk))));
  logits = mul_axis(logits, inv_scale, 1);
  if (config.diagonal_mask) logits = add(logits, diagonal_mask<T>(n));
  Tensor<T> attn = softmax_lastdim(logits);
  if (probs != nullptr) *probs = attn;

  Tensor<T> heads_out = permute(matmul(attn, v), {0, 2, 1, 3});
  Tensor<T> concat = reshape(heads_out, Shape{batch, n, config.hidden});
  return add(matmul(concat, layer.out_weight), layer.out_bias);
}

template <typename T>
Tensor<T> mlp(const Tensor<T>& z, const LayerParams<T>& layer) {
  Tensor<T> hidden = gelu(add(matmul(z, layer.fc1_weight), layer.fc1_bias));
  return add(matmul(hidden, layer.fc2_weight), layer.fc2_bias);
}

template <typename T>
Tensor<T> encoder_block(const Tensor<T>& z, const LayerParams<T>& layer, const ModelConfig& config, bool training,
                        Rng* rng) {
  const double rate = config.drop_path_rate;
  if (config.pre_norm) {
    Tensor<T> mid = add(z, drop_path(masked_attention(layer_norm(z, layer.ln1_gamma, layer.ln1_beta), layer, config),
                                     rate, training, rng));
    return add(mid, drop_path(mlp(layer_norm(mid, layer.ln2_gamma, layer.ln2_beta), layer), rate, training, rng));
  }
  Tensor<T> mid = layer_norm(add(z, drop_path(masked_attention(z, layer, config), rate, training, rng)),
                             layer.ln1_gamma, layer.ln1_beta);
  return layer_norm(add(mid, drop_path(mlp(mid, layer), rate, training, rng)), layer.ln2_gamma, layer.ln2_beta);
}

template <typename T>
Tensor<T> seq_pool(const Tensor<T>& tokens, const Tensor<T>& weight, const Tensor<T>& bias, Tensor<T>* weights) {
  if (tokens.rank() != 3) throw DimensionError("seq_pool: expected [B x N x h], got " + shape_str(tokens.shape()));
  const std::size_t batch = tokens.dim(0);
  const std::size_t n = tokens.dim(1);
  const std::size_t h = tokens.dim(2);
  // scores [B, N, 1] -> [B, N]; softmax over tokens
  Tensor<T> w = softmax_lastdim(reshape(add(matmul(tokens, weight), bias), Shape{batch, n}));
  if (weights != nullptr) *weights = w;
  return reshape(matmul(reshape(w, Shape{batch, 1, n}), tokens), Shape{batch, h});
}

template <typename T>
Tensor<T> forward(const Tensor<T>& images, const ModelParams<T>& params, const ModelConfig& config, bool training,
                  Rng* rng, ForwardTrace<T>* trace) {
  Tokens<T> tok = tokenize(images, params, config);
  Tensor<T> z = add_positional(tok.tokens, params.pos_embed);
  for (const LayerParams<T>& layer : params.layers) z = encoder_block(z, layer, config, training, rng);
  z = layer_norm(z, params.norm_gamma, params.norm_beta);
  Tensor<T> pooled = seq_pool(z, params.pool_weight, params.pool_bias);
  if (trace != nullptr) {
    trace->feature_map = tok.feature_map;
    trace->pooled = pooled;
  }
  return add(matmul(pooled, params.head_weight), params.head_bias);
}

std::uint64_t count_params(const ModelConfig& c) {
  const std::uint64_t k2 = c.conv_kernel * c.conv_kernel;
  const std::uint64_t h = c.hidden;
  const std::uint64_t tokenizer = (k2 * c.in_channels * c.stem_channels + c.stem_channels) + (k2 * c.stem_channels * h + h);
  const std::uint64_t positional = static_cast<std::uint64_t>(c.sequence_length()) * h;
  const std::uint64_t per_layer = 4 * (h * h + h)            // q, k, v, out
                                  + (h * c.mlp_size + c.mlp_size)  // fc1
                                  + (c.mlp_size * h + h)           // fc2
                                  + 2 * 2 * h                      // two layer norms
                                  + c.heads;                       // temperatures
  const std::uint64_t tail = 2 * h + (h + 1) + (h * c.num_classes + c.num_classes);
  return tokenizer + positional + c.layers * per_layer + tail;
}

MacBreakdown mac_breakdown(const ModelConfig& c) {
  const auto ext = c.stage_extents();
  const std::uint64_t k2 = c.conv_kernel * c.conv_kernel;
  const std::uint64_t n = c.sequence_length();
  const std::uint64_t h = c.hidden;
  MacBreakdown m;
  m.conv1 = static_cast<std::uint64_t>(ext[0]) * ext[0] * c.stem_channels * k2 * c.in_channels;
  m.conv2 = static_cast<std::uint64_t>(ext[2]) * ext[2] * h * k2 * c.stem_channels;
  m.encoder = c.layers * (4 * n * h * h + 2 * n * n * h + 2 * n * h * c.mlp_size);
  m.pooling = 2 * n * h;  // token scores, weighted sum
  m.classifier = h * c.num_classes;
  return m;
}

std::uint64_t count_macs(const ModelConfig& config) { return mac_breakdown(config).total(); }

#define COMVIT_INSTANTIATE_MODEL(T)                                                                             \
  template struct ModelParams<T>;                                                                               \
  template ModelParams<T> init_params(const ModelConfig&, Rng&);                                                \
  template ModelParams<T> assemble_params(const ModelConfig&, std::vector<NamedTensor<T>>);                     \
  template Tokens<T> tokenize(const Tensor<T>&, const ModelParams<T>&, const ModelConfig&);                     \
  template Tensor<T> add_positional(const Tensor<T>&, const Tensor<T>&);                                        \
  template Tensor<T> diagonal_mask(std::size_t);                                                                \
  template Tensor<T> temperatures(const LayerParams<T>&);                                                       \
  template Tensor<T> masked_attention(const Tensor<T>&, const LayerParams<T>&, const ModelConfig&, Tensor<T>*); \
  template Tensor<T> mlp(const Tensor<T>&, const LayerParams<T>&);                                              \
  template Tensor<T> encoder_block(const Tensor<T>&, const LayerParams<T>&, const ModelConfig&, bool, Rng*);    \
  template Tensor<T> seq_pool(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Tensor<T>*);                \
  template Tensor<T> forward(const Tensor<T>&, const ModelParams<T>&, const ModelConfig&, bool, Rng*,           \
                             ForwardTrace<T>*);

COMVIT_INSTANTIATE_MODEL(float)
COMVIT_INSTANTIATE_MODEL(double)

}  // namespace comvit
