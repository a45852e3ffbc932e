#pragma once

// Differentiable tensor operations. All functions are templated on the
// scalar type and explicitly instantiated for float and double.
//
// Layout conventions: token matrices are [rows, features]; images and
// feature maps are [channels, height, width]; everything is row-major.

#include <nvs/var.hpp>

#include <cstdint>
#include <functional>
#include <vector>

namespace nvs {

/// Per-row validity flags; an empty vector means "all valid".
using Mask = std::vector<std::uint8_t>;

/// Creates the result node of a custom operation. The backward closure
/// receives the output gradient and must accumulate into the inputs that
/// require gradients (see accumulate_grad). Nothing is recorded when
/// recording is disabled or no input requires a gradient.
template <typename Scalar>
Var<Scalar> make_op(ArrayX<Scalar> value, Shape shape, const std::vector<Var<Scalar>>& inputs,
                    std::function<void(const ArrayX<Scalar>&)> backward);

template <typename Scalar, typename Expr>
void accumulate_grad(const Var<Scalar>& input, const Expr& delta) {
  if (input.requires_grad()) const_cast<Var<Scalar>&>(input).grad_mutable() += delta;
}

// Elementwise arithmetic on equally sized tensors.
template <typename Scalar> Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar> Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar> Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar> Var<Scalar> scale(const Var<Scalar>& a, Scalar factor);

/// Multiplies row i of x (leading axis) by the constant factors[i].
template <typename Scalar> Var<Scalar> scale_rows(const Var<Scalar>& x, const ArrayX<Scalar>& factors);

/// x [N, D] + bias [D] broadcast over rows.
template <typename Scalar> Var<Scalar> add_row_bias(const Var<Scalar>& x, const Var<Scalar>& bias);

/// x [C, ...] + bias [C] broadcast over the trailing axes.
template <typename Scalar> Var<Scalar> add_channel_bias(const Var<Scalar>& x, const Var<Scalar>& bias);

/// [N, K] x [K, M] -> [N, M].
template <typename Scalar> Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b);

/// x [N, in] * weight [in, out] (+ bias [out] when defined).
template <typename Scalar>
Var<Scalar> linear(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias);

template <typename Scalar> Var<Scalar> gelu(const Var<Scalar>& x);
template <typename Scalar> Var<Scalar> silu(const Var<Scalar>& x);

/// Normalizes each row of x [N, D] and applies per-feature gain and shift.
template <typename Scalar>
Var<Scalar> layer_norm(const Var<Scalar>& x, const Var<Scalar>& gain, const Var<Scalar>& shift, Scalar eps = 1e-5);

/// Group normalization of x [C, H, W] with per-channel gain and shift.
template <typename Scalar>
Var<Scalar> group_norm(const Var<Scalar>& x, Index groups, const Var<Scalar>& gain, const Var<Scalar>& shift,
                       Scalar eps = 1e-5);

/// 2D convolution: x [Cin, H, W], weight [Cout, Cin, k, k], optional bias [Cout].
template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias, Index stride,
                   Index padding);

template <typename Scalar> Var<Scalar> upsample_nearest2x(const Var<Scalar>& x);

/// Bilinear resampling of x [C, h, w] to [C, height, width] with corner
/// pixels aligned, so source grid points map onto target grid points.
template <typename Scalar> Var<Scalar> resize_bilinear(const Var<Scalar>& x, Index height, Index width);

/// Non-overlapping average pooling of x [C, H, W] by an integer factor.
template <typename Scalar> Var<Scalar> avg_pool(const Var<Scalar>& x, Index factor);

/// Concatenation along the leading axis; trailing axes must agree.
template <typename Scalar> Var<Scalar> concat(const std::vector<Var<Scalar>>& parts);

/// Column concatenation of rank-2 tensors with equal row counts.
template <typename Scalar> Var<Scalar> concat_cols(const std::vector<Var<Scalar>>& parts);

/// Rows [start, start + count) along the leading axis.
template <typename Scalar> Var<Scalar> slice(const Var<Scalar>& x, Index start, Index count);

/// Columns [start, start + count) of a rank-2 tensor.
template <typename Scalar> Var<Scalar> slice_cols(const Var<Scalar>& x, Index start, Index count);

/// out[i] = x[rows[i]] along the leading axis.
template <typename Scalar> Var<Scalar> gather_rows(const Var<Scalar>& x, const std::vector<Index>& rows);

template <typename Scalar> Var<Scalar> reshape(const Var<Scalar>& x, Shape shape);
template <typename Scalar> Var<Scalar> transpose(const Var<Scalar>& x);

/// Multi-head self-attention inside consecutive groups of `group` rows.
/// qkv is [N, 3D] laid out as [queries | keys | values]; returns [N, D].
/// Keys flagged invalid are excluded; a group with no valid key attends to all.
template <typename Scalar>
Var<Scalar> grouped_attention(const Var<Scalar>& qkv, Index group, Index heads, const Mask& key_valid = {});

/// Softmax over consecutive groups of a logit vector [N] or [N, 1]. Invalid
/// entries get weight exactly 0; a fully invalid group gets constant uniform weights.
template <typename Scalar>
Var<Scalar> group_softmax(const Var<Scalar>& logits, Index group, const Mask& valid = {});

/// out[g] = sum_k weights[g*group + k] * values[g*group + k]; values [N, D] -> [N/group, D].
template <typename Scalar>
Var<Scalar> group_weighted_sum(const Var<Scalar>& weights, const Var<Scalar>& values, Index group);

/// Trilinear interpolation in volume [c, d, H, W] at voxel coordinates
/// (x = column, y = row, z = depth slice), one point per row of coords.
/// Invalid points yield zero rows. Returns [N, c].
template <typename Scalar>
Var<Scalar> trilinear_sample(const Var<Scalar>& volume, const Eigen::MatrixX3d& coords, const Mask& valid);

template <typename Scalar> Var<Scalar> sum(const Var<Scalar>& x);
template <typename Scalar> Var<Scalar> mean(const Var<Scalar>& x);

/// Mean squared error over all elements.
template <typename Scalar> Var<Scalar> mse(const Var<Scalar>& a, const Var<Scalar>& b);

}  // namespace nvs
