#pragma once

#include <span>
#include <vector>

#include "a3net/tensor.hpp"

// Differentiable primitives. Every function records a backward rule when
// grad mode is on and an input requires a gradient.
namespace a3net {

/// Batched matrix product over the last two axes; leading axes broadcast.
Tensor matmul(const Tensor& a, const Tensor& b);

// Elementwise with numpy-style broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);

Tensor relu(const Tensor& x);

/// Softmax over the last axis, stabilized by max-subtraction.
Tensor softmax_rows(const Tensor& x);
Tensor log_softmax_rows(const Tensor& x);

/// Normalizes the last axis to zero mean / unit variance, then applies gamma, beta.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

Tensor reshape(const Tensor& x, Shape shape);
/// Swaps two axes (negative values count from the end).
Tensor transpose(const Tensor& x, int axis_a, int axis_b);
Tensor transpose_last_two(const Tensor& x);
Tensor concat(std::span<const Tensor> parts, int axis);
Tensor concat_last_axis(const Tensor& a, const Tensor& b);
Tensor slice(const Tensor& x, int axis, std::size_t start, std::size_t length);
Tensor broadcast_to(const Tensor& x, const Shape& shape);

/// Rows of `table` [V,d] selected by `ids`; result shape is ids_shape + [d].
Tensor embedding_lookup(const Tensor& table, std::span<const std::size_t> ids, const Shape& ids_shape);

/// x[..., ids[...]]: picks one entry of the last axis per leading position.
Tensor gather_last(const Tensor& x, std::span<const std::size_t> ids);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// Attention scores [..., q, k]: entries whose key lies in the future of the
/// query (k_index > q_index + (k - q)) are replaced by a large negative value.
Tensor causal_mask(const Tensor& scores);

/// Unfolds kernel x kernel windows of a channels-last image batch [B,H,W,C]
/// into rows: [B, Ho*Wo, kernel*kernel*C] ordered (ky, kx, c). Zero padding.
Tensor im2col(const Tensor& images, std::size_t kernel, std::size_t stride, std::size_t pad);

inline constexpr double kMaskedLogit = -1e30;

}  // namespace a3net
