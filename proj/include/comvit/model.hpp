#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "comvit/nn.hpp"
#include "comvit/rng.hpp"
#include "comvit/tensor.hpp"

namespace comvit {

/// Architecture hyperparameters. Defaults are the published compact setup:
/// 7 layers, width 256, 4 heads, MLP 512, on 224x224 RGB input.
///
/// The tokenizer is conv(k, s, p) -> relu -> maxpool -> conv -> relu ->
/// maxpool; the second conv emits `hidden` channels so every spatial cell of
/// its pooled map becomes one token.
struct ModelConfig {
  std::size_t image_size = 224;
  std::size_t in_channels = 3;
  std::size_t layers = 7;
  std::size_t hidden = 256;
  std::size_t heads = 4;
  std::size_t mlp_size = 512;
  std::size_t num_classes = 9;

  std::size_t stem_channels = 64;
  std::size_t conv_kernel = 7;
  std::size_t conv_stride = 2;
  std::size_t conv_padding = 3;
  std::size_t pool_kernel = 3;
  std::size_t pool_stride = 2;
  std::size_t pool_padding = 1;

  double drop_path_rate = 0.1;
  double temperature_init = 1.0;
  bool diagonal_mask = true;
  bool pre_norm = true;

  std::size_t head_dim() const { return hidden / heads; }
  Conv2DSpec conv1() const { return {in_channels, stem_channels, conv_kernel, conv_stride, conv_padding}; }
  Conv2DSpec conv2() const { return {stem_channels, hidden, conv_kernel, conv_stride, conv_padding}; }
  PoolSpec pool() const { return {pool_kernel, pool_stride, pool_padding}; }

  /// Spatial extent after each tokenizer stage: conv1, pool1, conv2, pool2.
  std::vector<std::size_t> stage_extents() const;
  /// Side of the final feature map (the token grid).
  std::size_t token_grid() const { return stage_extents().back(); }
  std::size_t sequence_length() const { return token_grid() * token_grid(); }

  /// Throws ConfigError naming the first violated invariant.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

/// Lower bound on the temperature: tau = softplus(theta) + kTemperatureFloor.
inline constexpr double kTemperatureFloor = 1e-4;

template <typename T>
struct LayerParams {
  Tensor<T> ln1_gamma, ln1_beta;
  Tensor<T> q_weight, q_bias, k_weight, k_bias, v_weight, v_bias, out_weight, out_bias;
  Tensor<T> temperature;  // theta per head; tau = softplus(theta) + floor
  Tensor<T> ln2_gamma, ln2_beta;
  Tensor<T> fc1_weight, fc1_bias, fc2_weight, fc2_bias;
};

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

/// Every learnable tensor of one model. Linear weights are [in x out].
template <typename T>
struct ModelParams {
  Tensor<T> conv1_weight, conv1_bias, conv2_weight, conv2_bias;
  Tensor<T> pos_embed;
  std::vector<LayerParams<T>> layers;
  Tensor<T> norm_gamma, norm_beta;
  Tensor<T> pool_weight, pool_bias;
  Tensor<T> head_weight, head_bias;

  /// Handles in canonical order; the order of param_shapes().
  std::vector<NamedTensor<T>> named() const;
  std::size_t scalar_count() const;
  void zero_grad() const;
};

/// Canonical (name, shape) map derived from the config alone.
std::vector<std::pair<std::string, Shape>> param_shapes(const ModelConfig& config);

/// Whether AdamW applies weight decay to this parameter: weights yes;
/// biases, norm affine, positional table and temperatures no.
bool decays(const std::string& param_name);

/// Fresh parameters, drawn from `rng` in canonical order.
template <typename T>
ModelParams<T> init_params(const ModelConfig& config, Rng& rng);

/// Rebuilds a ModelParams from named tensors (checkpoint load); the name and
/// shape sequence must match param_shapes(config) exactly.
template <typename T>
ModelParams<T> assemble_params(const ModelConfig& config, std::vector<NamedTensor<T>> tensors);

/// Final tokenizer feature map [B x h x g x g] and its token view [B x N x h].
template <typename T>
struct Tokens {
  Tensor<T> feature_map;
  Tensor<T> tokens;
};

template <typename T>
Tokens<T> tokenize(const Tensor<T>& images, const ModelParams<T>& params, const ModelConfig& config);

template <typename T>
Tensor<T> add_positional(const Tensor<T>& tokens, const Tensor<T>& pos_embed);

/// Additive mask: -inf on the diagonal, 0 elsewhere.
template <typename T>
Tensor<T> diagonal_mask(std::size_t n);

/// Per-head temperatures tau = softplus(theta) + floor, as a tensor on the tape.
template <typename T>
Tensor<T> temperatures(const LayerParams<T>& layer);

/// Multi-head attention with logits Q_i.K_j / (tau_head * sqrt(d_k)) and the
/// diagonal mask. If `probs` is non-null it receives the [B x heads x N x N]
/// attention matrix.
template <typename T>
Tensor<T> masked_attention(const Tensor<T>& z, const LayerParams<T>& layer, const ModelConfig& config,
                           Tensor<T>* probs = nullptr);

template <typename T>
Tensor<T> mlp(const Tensor<T>& z, const LayerParams<T>& layer);

template <typename T>
Tensor<T> encoder_block(const Tensor<T>& z, const LayerParams<T>& layer, const ModelConfig& config, bool training,
                        Rng* rng);

/// Softmax-weighted token average. `weights`, if non-null, receives [B x N].
template <typename T>
Tensor<T> seq_pool(const Tensor<T>& tokens, const Tensor<T>& weight, const Tensor<T>& bias,
                   Tensor<T>* weights = nullptr);

/// Intermediates exposed for inspection (Grad-CAM, tests).
template <typename T>
struct ForwardTrace {
  Tensor<T> feature_map;
  Tensor<T> pooled;
};

template <typename T>
Tensor<T> forward(const Tensor<T>& images, const ModelParams<T>& params, const ModelConfig& config, bool training,
                  Rng* rng = nullptr, ForwardTrace<T>* trace = nullptr);

/// Closed-form scalar count.
std::uint64_t count_params(const ModelConfig& config);

/// Multiply-accumulates for one image: convolutions, attention projections,
/// score and value products, MLP, sequence pooling and classifier.
struct MacBreakdown {
  std::uint64_t conv1 = 0;
  std::uint64_t conv2 = 0;
  std::uint64_t encoder = 0;
  std::uint64_t pooling = 0;
  std::uint64_t classifier = 0;
  std::uint64_t total() const { return conv1 + conv2 + encoder + pooling + classifier; }
};
MacBreakdown mac_breakdown(const ModelConfig& config);
std::uint64_t count_macs(const ModelConfig& config);

}  // namespace comvit
