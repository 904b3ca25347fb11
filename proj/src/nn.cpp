// Copyright 2026 The KDFS Authors
// SPDX-License-Identifier: Apache-2.0

#include "kdfs/nn.hpp"

#include <cmath>
#include <string>

namespace kdfs {

std::vector<int> kept_indices(const Mask& mask) {
  std::vector<int> kept;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i]) kept.push_back(static_cast<int>(i));
  }
  return kept;
}

std::size_t popcount(const Mask& mask) {
  std::size_t n = 0;
  for (std::uint8_t m : mask) n += m ? 1 : 0;
  return n;
}

void ResNetConfig::validate() const {
  if (widths.empty()) throw ConfigError("resnet: at least one stage is required");
  if (widths.size() != blocks.size()) {
    throw ConfigError("resnet: " + std::to_string(widths.size()) + " stage widths but " +
                      std::to_string(blocks.size()) + " block counts");
  }
  for (std::size_t i = 0; i < widths.size(); ++i) {
    if (widths[i] < 1) throw ConfigError("resnet: stage " + std::to_string(i) + " has zero width");
    if (blocks[i] < 1) throw ConfigError("resnet: stage " + std::to_string(i) + " has no blocks");
  }
  if (in_channels < 1 || in_height < 1 || in_width < 1) {
    throw ConfigError("resnet: input shape must be positive");
  }
  if (classes < 2) throw ConfigError("resnet: at least two classes are required");
}

namespace {

ConvBlock make_conv(std::size_t in, std::size_t out, int kernel, int stride, int padding, Rng& rng) {
  ConvBlock conv;
  const std::size_t k = static_cast<std::size_t>(kernel);
  conv.weight = Tensor<float>({out, in, k, k});
  const double std_dev = std::sqrt(2.0 / static_cast<double>(in * k * k));
  for (float& w : conv.weight.data) w = static_cast<float>(rng.normal() * std_dev);
  conv.bn = BatchNormParams(out);
  conv.stride = stride;
  conv.padding = padding;
  return conv;
}

template <typename Net, typename Conv>
void collect_prunable(Net& net, std::vector<Conv*>& out) {
  out.assign(net.mask_slots(), nullptr);
  for (auto& stage : net.stages) {
    for (auto& block : stage.blocks) {
      for (auto* conv : {&block.conv1, &block.conv2}) {
        if (conv->prunable) out.at(static_cast<std::size_t>(conv->mask_slot)) = conv;
      }
    }
  }
}

template <typename Net, typename Ptr>
void collect_named(Net& net, std::vector<std::pair<std::string, Ptr>>& out, bool with_buffers) {
  auto add_conv = [&](const std::string& prefix, auto& conv) {
    out.emplace_back(prefix + ".weight", &conv.weight);
    out.emplace_back(prefix + ".bn.scale", &conv.bn.scale);
    out.emplace_back(prefix + ".bn.shift", &conv.bn.shift);
    if (with_buffers) {
      out.emplace_back(prefix + ".bn.running_mean", &conv.bn.running_mean);
      out.emplace_back(prefix + ".bn.running_var", &conv.bn.running_var);
    }
  };
  add_conv("stem", net.stem);
  for (std::size_t s = 0; s < net.stages.size(); ++s) {
    for (std::size_t b = 0; b < net.stages[s].blocks.size(); ++b) {
      auto& block = net.stages[s].blocks[b];
      const std::string prefix = "stage" + std::to_string(s) + ".block" + std::to_string(b);
      add_conv(prefix + ".conv1", block.conv1);
      add_conv(prefix + ".conv2", block.conv2);
      if (block.shortcut) add_conv(prefix + ".shortcut", *block.shortcut);
    }
  }
  out.emplace_back("fc.weight", &net.fc_weight);
  out.emplace_back("fc.bias", &net.fc_bias);
}

// Binds network tensors to the tape either as trainable parameters or as
// borrowed constants.
struct Binder {
  Tape<float>& tape;
  Network* mutable_net;  // null for frozen forwards

  Var<float> bind(const Tensor<float>& t) const {
    if (mutable_net) return tape.param(const_cast<Tensor<float>&>(t));
    return tape.constant_ref(t);
  }
};

Var<float> conv_bn(const ConvBlock& conv, const Var<float>& x, const Binder& binder, Mode mode,
                   std::span<const Var<float>> masks) {
  Var<float> y = conv2d(x, binder.bind(conv.weight), conv.stride, conv.padding);
  RunningStats<float> stats;
  const bool training = mode == Mode::kTrain;
  if (!training || binder.mutable_net) {
    // Frozen networks never write their running statistics.
    stats.mean = const_cast<Tensor<float>*>(&conv.bn.running_mean);
    stats.var = const_cast<Tensor<float>*>(&conv.bn.running_var);
  }
  y = batch_norm(y, binder.bind(conv.bn.scale), binder.bind(conv.bn.shift), stats, training);
  if (conv.prunable && !masks.empty()) {
    y = channel_mask(y, masks[static_cast<std::size_t>(conv.mask_slot)]);
  }
  return y;
}

void check_masks(const Network& net, std::span<const Var<float>> masks) {
  if (masks.empty()) return;
  const auto convs = net.prunable();
  if (masks.size() != convs.size()) {
    throw DimensionError("forward: expected " + std::to_string(convs.size()) + " masks, got " +
                         std::to_string(masks.size()));
  }
  for (std::size_t i = 0; i < convs.size(); ++i) {
    if (masks[i].shape() != Shape{convs[i]->out_channels()}) {
      throw DimensionError("forward: mask " + std::to_string(i) + " has shape " +
                           to_string(masks[i].shape()) + " but the conv has " +
                           std::to_string(convs[i]->out_channels()) + " output channels");
    }
    for (float v : masks[i].value().data) {
      if (!(v >= 0.0f && v <= 1.0f)) {
        throw ContractError("forward: mask " + std::to_string(i) + " has an entry outside [0,1]");
      }
    }
  }
}

ForwardTrace run_forward(const Network& net, const Binder& binder, const Tensor<float>& batch,
                         std::span<const Var<float>> masks, Mode mode) {
  if (batch.rank() != 4 || batch.dim(1) != net.stem.in_channels()) {
    throw DimensionError("forward: batch shape " + to_string(batch.shape) + " does not match " +
                         std::to_string(net.stem.in_channels()) + " input channels");
  }
  check_masks(net, masks);
  Tape<float>& tape = binder.tape;
  ForwardTrace trace;
  Var<float> x = relu(conv_bn(net.stem, tape.constant_ref(batch), binder, mode, masks));
  for (const Stage& stage : net.stages) {
    Var<float> stage_end;
    for (const ResidualBlock& block : stage.blocks) {
      Var<float> h = relu(conv_bn(block.conv1, x, binder, mode, masks));
      Var<float> o = conv_bn(block.conv2, h, binder, mode, masks);
      if (!block.scatter.empty()) o = zero_pad_scatter(o, std::span<const int>(block.scatter), block.width);
      stage_end = o;
      Var<float> shortcut = block.shortcut ? conv_bn(*block.shortcut, x, binder, mode, masks) : x;
      x = relu(add(o, shortcut));
    }
    trace.stage_features.push_back(stage_end);
  }
  Var<float> pooled = global_avg_pool(x);
  trace.logits = linear(pooled, binder.bind(net.fc_weight), binder.bind(net.fc_bias));
  return trace;
}

}  // namespace

std::size_t Network::mask_slots() const {
  std::size_t n = 0;
  for (const Stage& stage : stages) {
    for (const ResidualBlock& block : stage.blocks) {
      n += (block.conv1.prunable ? 1 : 0) + (block.conv2.prunable ? 1 : 0);
    }
  }
  return n;
}

std::vector<const ConvBlock*> Network::prunable() const {
  std::vector<const ConvBlock*> out;
  collect_prunable(*this, out);
  return out;
}

std::vector<ConvBlock*> Network::prunable() {
  std::vector<ConvBlock*> out;
  collect_prunable(*this, out);
  return out;
}

std::vector<Tensor<float>*> Network::parameters() {
  std::vector<std::pair<std::string, Tensor<float>*>> named;
  collect_named(*this, named, false);
  std::vector<Tensor<float>*> out;
  for (auto& [name, t] : named) out.push_back(t);
  return out;
}

std::vector<std::pair<std::string, Tensor<float>*>> Network::named_tensors() {
  std::vector<std::pair<std::string, Tensor<float>*>> out;
  collect_named(*this, out, true);
  return out;
}

std::vector<std::pair<std::string, const Tensor<float>*>> Network::named_tensors() const {
  std::vector<std::pair<std::string, const Tensor<float>*>> out;
  collect_named(*this, out, true);
  return out;
}

Network build_resnet(const ResNetConfig& config, Rng& rng) {
  config.validate();
  Network net;
  net.config = config;
  std::size_t width = static_cast<std::size_t>(config.widths.front());
  net.stem = make_conv(static_cast<std::size_t>(config.in_channels), width, 3, 1, 1, rng);
  int slot = 0;
  for (std::size_t s = 0; s < config.widths.size(); ++s) {
    Stage stage;
    stage.width = static_cast<std::size_t>(config.widths[s]);
    for (int b = 0; b < config.blocks[s]; ++b) {
      const int stride = (s > 0 && b == 0) ? 2 : 1;
      ResidualBlock block;
      block.width = stage.width;
      block.conv1 = make_conv(width, stage.width, 3, stride, 1, rng);
      block.conv2 = make_conv(stage.width, stage.width, 3, 1, 1, rng);
      block.conv1.prunable = block.conv2.prunable = true;
      block.conv1.mask_slot = slot++;
      block.conv2.mask_slot = slot++;
      if (stride != 1 || width != stage.width) {
        block.shortcut = make_conv(width, stage.width, 1, stride, 0, rng);
      }
      stage.blocks.push_back(std::move(block));
      width = stage.width;
    }
    net.stages.push_back(std::move(stage));
  }
  const std::size_t classes = static_cast<std::size_t>(config.classes);
  net.fc_weight = Tensor<float>({classes, width});
  net.fc_bias = Tensor<float>({classes});
  const double bound = 1.0 / std::sqrt(static_cast<double>(width));
  for (float& w : net.fc_weight.data) w = static_cast<float>((2.0 * rng.uniform() - 1.0) * bound);
  for (float& w : net.fc_bias.data) w = static_cast<float>((2.0 * rng.uniform() - 1.0) * bound);
  return net;
}

ForwardTrace forward(Network& net, Tape<float>& tape, const Tensor<float>& batch,
                     std::span<const Var<float>> masks, Mode mode) {
  return run_forward(net, Binder{tape, &net}, batch, masks, mode);
}

ForwardTrace forward_frozen(const Network& net, Tape<float>& tape, const Tensor<float>& batch,
                            std::span<const Var<float>> masks) {
  return run_forward(net, Binder{tape, nullptr}, batch, masks, Mode::kEval);
}

std::vector<Var<float>> constant_masks(Tape<float>& tape, std::span<const Mask> masks) {
  std::vector<Var<float>> out;
  out.reserve(masks.size());
  for (const Mask& m : masks) {
    Tensor<float> t({m.size()});
    for (std::size_t i = 0; i < m.size(); ++i) t[i] = m[i] ? 1.0f : 0.0f;
    out.push_back(tape.constant(std::move(t)));
  }
  return out;
}

Var<float> zero_pad_scatter(const Var<float>& features, const Mask& mask) {
  if (features.shape().size() == 4 && popcount(mask) != features.shape()[1]) {
    throw DimensionError("zero_pad_scatter: mask keeps " + std::to_string(popcount(mask)) +
                         " channels but features have " + std::to_string(features.shape()[1]));
  }
  const std::vector<int> kept = kept_indices(mask);
  return zero_pad_scatter(features, std::span<const int>(kept), mask.size());
}

}  // namespace kdfs
