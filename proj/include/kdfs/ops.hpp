// Copyright 2026 The KDFS Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef KDFS_OPS_HPP
#define KDFS_OPS_HPP

#include <cstddef>
#include <span>
#include <vector>

#include "kdfs/tape.hpp"
#include "kdfs/tensor.hpp"

// Differentiable primitives. Every function records its result on the tape of
// its operands and registers a backward rule. Binary element-wise ops accept
// two tensors of the same shape, or one single-element tensor broadcast
// against the other. Everything is instantiated for float and double; double
// is used for gradient checking.

namespace kdfs {

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> scale(const Var<T>& a, T factor);
template <typename T>
Var<T> add_scalar(const Var<T>& a, T offset);

template <typename T>
Var<T> relu(const Var<T>& x);
template <typename T>
Var<T> abs(const Var<T>& x);

template <typename T>
Var<T> sum(const Var<T>& x);
template <typename T>
Var<T> mean(const Var<T>& x);
template <typename T>
Var<T> frobenius_norm(const Var<T>& x);

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape);

/// [M,K] x [K,N] -> [M,N]
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b);

/// Fully-connected layer: x[N,F], weight[O,F], bias[O] -> [N,O].
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias);

/// Row-wise softmax over the last axis of a rank-2 tensor, max-shifted.
template <typename T>
Var<T> softmax(const Var<T>& x);
template <typename T>
Var<T> log_softmax(const Var<T>& x);

/// 2-D convolution without bias, realized as patch gather + GEMM.
/// input[N,C,H,W], weight[O,C,k,k] -> [N,O,(H+2p-k)/s+1,(W+2p-k)/s+1].
template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& weight, int stride, int padding);

/// Adds a per-channel bias[C] to x[N,C,H,W].
template <typename T>
Var<T> bias_add(const Var<T>& x, const Var<T>& bias);

template <typename T>
Var<T> max_pool2d(const Var<T>& x, int kernel, int stride);

/// [N,C,H,W] -> [N,C]
template <typename T>
Var<T> global_avg_pool(const Var<T>& x);

template <typename T>
struct RunningStats {
  Tensor<T>* mean = nullptr;
  Tensor<T>* var = nullptr;
  T momentum = T(0.1);
};

/// Batch normalization over (N,H,W) per channel of x[N,C,H,W].
///
/// Training mode normalizes with batch statistics and, when `running` points
/// at buffers, blends them in with `momentum` (variance is stored unbiased).
/// Eval mode normalizes with the running buffers, which must be present.
template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                  const RunningStats<T>& running, bool training, T eps = T(1e-5));

/// Multiplies channel c of x[N,C,H,W] by mask[c].
template <typename T>
Var<T> channel_mask(const Var<T>& x, const Var<T>& mask);

/// Places channel i of x[N,C',H,W] at channel kept[i] of an all-zero
/// [N,C,H,W] result. `kept` must be strictly increasing and below `channels`.
template <typename T>
Var<T> zero_pad_scatter(const Var<T>& x, std::span<const int> kept, std::size_t channels);

/// Selects channels `kept` of x[N,C,H,W]. Inverse of zero_pad_scatter.
template <typename T>
Var<T> channel_gather(const Var<T>& x, std::span<const int> kept);

/// Output spatial extent of a convolution or pooling window.
inline std::size_t conv_out_size(std::size_t in, int kernel, int stride, int padding) {
  return (in + 2 * static_cast<std::size_t>(padding) - static_cast<std::size_t>(kernel)) /
             static_cast<std::size_t>(stride) +
         1;
}

}  // namespace kdfs

#endif  // KDFS_OPS_HPP
