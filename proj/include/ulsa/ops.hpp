#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "ulsa/autograd.hpp"

/// Differentiable operations over Var. Every op checks shapes (throwing
/// ShapeMismatch with both shapes in the message) and trips NonFinite if
/// its forward output contains NaN/Inf. Image-like tensors are NCHW.
namespace ulsa::ops {

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double k);
/// Adds a per-channel bias (C) to x of shape (N, C, ...).
Var add_bias(Var x, Var bias);
/// (M, K) x (K, N) -> (M, N).
Var matmul(Var a, Var b);
/// x (N, Cin, H, W), w (Cout, Cin, k, k), zero padding; no bias.
Var conv2d(Var x, Var w, std::size_t stride, std::size_t pad);
Var relu(Var x);
/// Max over k x k windows with the given stride (no padding).
Var max_pool2d(Var x, std::size_t kernel, std::size_t stride);
/// Per-sample normalization over groups of channels and all spatial
/// positions of x (N, C, ...), followed by a per-channel affine map.
/// Statistics never mix samples of a batch.
Var group_norm(Var x, Var gamma, Var beta, std::size_t groups, double eps = 1e-5);
/// Softmax along axis 1 of x (N, C, ...).
Var softmax(Var x);
/// Numerically stable log(softmax(x)) along axis 1.
Var log_softmax(Var x);
Var log(Var x);
/// Sum of all elements -> shape {1}.
Var sum(Var x);
/// Mean of all elements -> shape {1}; summation is sequential row-major.
Var mean(Var x);
/// (B, C, H, W) -> (B, C): spatial mean per (sample, channel).
Var adaptive_avg_pool(Var x);
/// Row-wise cosine similarity of (B, C) inputs -> (B); norms floored at 1e-12.
Var cosine_similarity(Var a, Var b);
/// Same value, gradient stops here.
Var detach(Var x);
/// Nearest-neighbour 2x upsampling of (N, C, H, W).
Var upsample2x(Var x);
/// Concatenates (N, Ca, ...) and (N, Cb, ...) along axis 1.
Var concat_channels(Var a, Var b);
/// Mean of -log_probs[n, target_n, ...] over all positions, for log_probs
/// (N, K, ...) and integer targets laid out as (N, ...).
Var nll_mean(Var log_probs, std::span<const int> targets);

inline constexpr double kCosineNormFloor = 1e-12;

}  // namespace ulsa::ops
