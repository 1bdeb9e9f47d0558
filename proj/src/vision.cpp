#include "a3net/vision.hpp"

#include <cmath>

#include "a3net/ops.hpp"

namespace a3net {

Tensor sinusoid_table(std::size_t n, std::size_t d) {
  std::vector<double> values(n * d);
  for (std::size_t pos = 0; pos < n; ++pos) {
    for (std::size_t j = 0; j < d; ++j) {
      const double exponent = static_cast<double>(2 * (j / 2)) / static_cast<double>(d);
      const double angle = static_cast<double>(pos) / std::pow(10000.0, exponent);
      values[pos * d + j] = (j % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return Tensor::from({n, d}, std::move(values));
}

Tensor add_patch_positions(const Tensor& patches, bool enabled) {
  if (!enabled) return patches;
  if (patches.rank() != 3) throw DimensionError("add_patch_positions: expected [B,S,d], got " + shape_str(patches.shape()));
  return add(patches, sinusoid_table(patches.dim(1), patches.dim(2)));
}

VisualExtractor::VisualExtractor(const ModelConfig& config, ParameterSet& params, Rng& rng) : config_(config) {
  std::size_t in_ch = config.image_channels;
  for (std::size_t s = 0; s < config.conv_channels.size(); ++s) {
    const std::size_t out_ch = config.conv_channels[s];
    const std::size_t fan_in = 9 * in_ch;
    // He scaling keeps activations O(1) through the ReLU stack.
    conv_weights_.push_back(params.normal("visual.conv" + std::to_string(s) + ".weight", {fan_in, out_ch},
                                          ParamGroup::Visual, rng, std::sqrt(2.0 / static_cast<double>(fan_in))));
    conv_biases_.push_back(
        params.constant("visual.conv" + std::to_string(s) + ".bias", {out_ch}, ParamGroup::Visual, 0.0));
    in_ch = out_ch;
  }
  patch_weight_ = params.normal("visual.patch.weight", {in_ch, config.d_vis}, ParamGroup::Visual, rng,
                                1.0 / std::sqrt(static_cast<double>(in_ch)));
  patch_bias_ = params.constant("visual.patch.bias", {config.d_vis}, ParamGroup::Visual, 0.0);
  model_weight_ = params.normal("visual.to_model.weight", {config.d_vis, config.d_model}, ParamGroup::Visual, rng,
                                1.0 / std::sqrt(static_cast<double>(config.d_vis)));
  model_bias_ = params.constant("visual.to_model.bias", {config.d_model}, ParamGroup::Visual, 0.0);
}

std::size_t VisualExtractor::patches_per_view() const {
  const std::size_t side = config_.image_size >> config_.conv_channels.size();
  return side * side;
}

Tensor VisualExtractor::extract_patches(std::span<const ImageSet> batch) const {
  if (batch.empty()) throw ContractError("extract_patches: empty batch");
  const std::size_t views = batch[0].size();
  if (views < 1 || views > 2) {
    throw ConfigError("extract_patches: " + std::to_string(views) + " views per sample (1 or 2 supported)");
  }
  const ImageView& first = batch[0][0];
  const std::size_t stride = std::size_t{1} << conv_weights_.size();
  if (first.height % stride != 0 || first.width % stride != 0 || first.height == 0 || first.width == 0) {
    throw ConfigError("extract_patches: image " + std::to_string(first.height) + "x" + std::to_string(first.width) +
                      " is not divisible by the stride product " + std::to_string(stride));
  }
  if (first.channels != config_.image_channels) {
    throw ConfigError("extract_patches: expected " + std::to_string(config_.image_channels) + " channel(s), got " +
                      std::to_string(first.channels));
  }
  std::vector<double> pixels;
  pixels.reserve(batch.size() * views * first.pixels.size());
  for (const auto& sample : batch) {
    if (sample.size() != views) throw ConfigError("extract_patches: mixed view counts within a batch");
    for (const auto& v : sample) {
      if (v.height != first.height || v.width != first.width || v.channels != first.channels) {
        throw ConfigError("extract_patches: view dimensions differ within a batch");
      }
      if (v.pixels.size() != v.height * v.width * v.channels) {
        throw DimensionError("extract_patches: pixel buffer does not match " + std::to_string(v.height) + "x" +
                             std::to_string(v.width) + "x" + std::to_string(v.channels));
      }
      pixels.insert(pixels.end(), v.pixels.begin(), v.pixels.end());
    }
  }
  const std::size_t n = batch.size() * views;
  Tensor x = Tensor::from({n, first.height, first.width, first.channels}, std::move(pixels));
  std::size_t h = first.height, w = first.width;
  for (std::size_t s = 0; s < conv_weights_.size(); ++s) {
    Tensor cols = im2col(x, 3, 2, 1);
    h /= 2;
    w /= 2;
    Tensor y = relu(add(matmul(cols, conv_weights_[s]), conv_biases_[s]));
    x = reshape(y, {n, h, w, conv_weights_[s].dim(1)});
  }
  Tensor seq = reshape(x, {n, h * w, x.dim(3)});
  Tensor feats = add(matmul(seq, patch_weight_), patch_bias_);
  // Views of one sample are adjacent rows, so this reshape concatenates their sequences.
  return reshape(feats, {batch.size(), views * h * w, config_.d_vis});
}

Tensor VisualExtractor::forward(std::span<const ImageSet> batch) const {
  Tensor feats = add(matmul(extract_patches(batch), model_weight_), model_bias_);
  return add_patch_positions(feats, config_.patch_positions);
}

}  // namespace a3net
