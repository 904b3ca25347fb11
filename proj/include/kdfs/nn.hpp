// Copyright 2026 The KDFS Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef KDFS_NN_HPP
#define KDFS_NN_HPP

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "kdfs/ops.hpp"
#include "kdfs/random.hpp"
#include "kdfs/tape.hpp"
#include "kdfs/tensor.hpp"

namespace kdfs {

/// Binary keep (1) / drop (0) decision per filter of one prunable conv.
using Mask = std::vector<std::uint8_t>;

std::vector<int> kept_indices(const Mask& mask);
std::size_t popcount(const Mask& mask);

struct BatchNormParams {
  Tensor<float> scale;
  Tensor<float> shift;
  Tensor<float> running_mean;
  Tensor<float> running_var;

  BatchNormParams() = default;
  explicit BatchNormParams(std::size_t channels)
      : scale({channels}, 1.0f),
        shift({channels}, 0.0f),
        running_mean({channels}, 0.0f),
        running_var({channels}, 1.0f) {}
};

/// Convolution followed by batch norm. The mask, when one applies, scales the
/// batch-norm output per channel (before any activation).
struct ConvBlock {
  Tensor<float> weight;  // [out, in, k, k]
  BatchNormParams bn;
  int stride = 1;
  int padding = 0;
  bool prunable = false;
  int mask_slot = -1;

  std::size_t out_channels() const { return weight.dim(0); }
  std::size_t in_channels() const { return weight.dim(1); }
  int kernel() const { return static_cast<int>(weight.dim(2)); }
};

/// Basic block: conv-BN-ReLU, conv-BN, add shortcut, ReLU.
///
/// `scatter` is empty while conv2 emits the full residual width. After
/// pruning it lists, in increasing order, which residual channels conv2's
/// surviving filters write to; the others are zero-padded.
struct ResidualBlock {
  ConvBlock conv1;
  ConvBlock conv2;
  std::optional<ConvBlock> shortcut;
  std::vector<int> scatter;
  std::size_t width = 0;
};

struct Stage {
  std::size_t width = 0;
  std::vector<ResidualBlock> blocks;
};

/// Architecture of a CIFAR-style ResNet: one stage per entry of `widths`,
/// `blocks[i]` basic blocks in stage i, stride 2 at the start of every stage
/// after the first.
struct ResNetConfig {
  std::vector<int> widths{16, 32, 64};
  std::vector<int> blocks{1, 1, 1};
  int in_channels = 3;
  int in_height = 32;
  int in_width = 32;
  int classes = 10;

  void validate() const;
};

struct Network {
  ResNetConfig config;
  ConvBlock stem;
  std::vector<Stage> stages;
  Tensor<float> fc_weight;  // [classes, last width]
  Tensor<float> fc_bias;    // [classes]

  std::size_t mask_slots() const;
  /// Prunable convs ordered by mask slot.
  std::vector<const ConvBlock*> prunable() const;
  std::vector<ConvBlock*> prunable();
  /// Trainable tensors (conv weights, batch-norm scale/shift, classifier).
  std::vector<Tensor<float>*> parameters();
  /// Every tensor including running statistics, with stable dotted names.
  std::vector<std::pair<std::string, Tensor<float>*>> named_tensors();
  std::vector<std::pair<std::string, const Tensor<float>*>> named_tensors() const;
};

/// Builds a ResNet with Kaiming-normal conv weights. Identity shortcuts are
/// used unless width or stride changes, in which case a 1x1 conv + BN is used.
Network build_resnet(const ResNetConfig& config, Rng& rng);

enum class Mode { kTrain, kEval };

struct ForwardTrace {
  Var<float> logits;                       // [N, classes]
  std::vector<Var<float>> stage_features;  // one per stage
};

/// Runs `net` on `batch` [N,C,H,W].
///
/// `masks` is either empty or holds one vector per mask slot, sized to that
/// conv's output channels, with entries in [0,1]. Stage features are taken
/// at the masked BN output of the stage's last conv (after zero-padding
/// scatter, before the residual addition), which is where masked filters
/// show up as all-zero maps. Train mode normalizes with batch statistics and
/// updates the running buffers; eval mode reads them.
ForwardTrace forward(Network& net, Tape<float>& tape, const Tensor<float>& batch,
                     std::span<const Var<float>> masks, Mode mode);

/// Eval-mode forward of a frozen network. Parameters enter the tape as
/// constants, so nothing upstream of the outputs receives gradients.
ForwardTrace forward_frozen(const Network& net, Tape<float>& tape, const Tensor<float>& batch,
                            std::span<const Var<float>> masks = {});

/// Records binary masks as constant tape values.
std::vector<Var<float>> constant_masks(Tape<float>& tape, std::span<const Mask> masks);

/// Scatters pruned features [N,C',H,W] back to [N,mask.size(),H,W] with
/// zeros at dropped channels. popcount(mask) must equal C'.
Var<float> zero_pad_scatter(const Var<float>& features, const Mask& mask);

}  // namespace kdfs

#endif  // KDFS_NN_HPP
