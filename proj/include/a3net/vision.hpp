#pragma once

#include <span>
#include <vector>

#include "a3net/config.hpp"
#include "a3net/parameters.hpp"
#include "a3net/tensor.hpp"

namespace a3net {

/// One radiograph view, channels-last (H x W x F), pixel values in [0, 1].
struct ImageView {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 1;
  std::vector<double> pixels;

  bool operator==(const ImageView&) const = default;
};

/// The views of one study (1 or 2).
using ImageSet = std::vector<ImageView>;

/// Fixed sinusoid table [n, d]: even columns sin(pos / 10000^(2i/d)), odd columns cos.
Tensor sinusoid_table(std::size_t n, std::size_t d);

/// Adds sinusoid encodings over the sequence axis of [B,S,d] features; identity when disabled.
Tensor add_patch_positions(const Tensor& patches, bool enabled = true);

/// Small trainable conv stack standing in for a pretrained backbone.
///
/// Each stage is a 3x3, stride-2, pad-1 convolution followed by ReLU. The
/// final feature map is flattened row-major into a patch sequence and
/// projected (1x1) to d_vis. Multi-view studies concatenate their patch
/// sequences along the sequence axis. All parameters belong to the visual
/// learning-rate group.
class VisualExtractor {
 public:
  VisualExtractor(const ModelConfig& config, ParameterSet& params, Rng& rng);

  /// [B, S, d_vis] patch features, S = (H/r)(W/r) * views.
  Tensor extract_patches(std::span<const ImageSet> batch) const;
  /// Patch features projected to d_model, with positions when configured.
  Tensor forward(std::span<const ImageSet> batch) const;

  std::size_t patches_per_view() const;
  std::size_t sequence_length() const { return patches_per_view() * config_.views; }

 private:
  ModelConfig config_;
  std::vector<Tensor> conv_weights_;  // [9*Cin, Cout]
  std::vector<Tensor> conv_biases_;   // [Cout]
  Tensor patch_weight_;               // [C_last, d_vis]
  Tensor patch_bias_;
  Tensor model_weight_;  // [d_vis, d_model]
  Tensor model_bias_;
};

}  // namespace a3net
