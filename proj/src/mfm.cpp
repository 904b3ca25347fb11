// Copyright 2026 The KDFS Authors
// SPDX-License-Identifier: Apache-2.0

#include "kdfs/mfm.hpp"

#include <cmath>

#include "kdfs/ops.hpp"

namespace kdfs {

void DecoderSpec::validate() const {
  if (depth != 1 && depth != 2) {
    throw ConfigError("decoder: depth must be 1 or 2, got " + std::to_string(depth));
  }
  if (channels < 1) throw ConfigError("decoder: channel count must be positive");
  if (kernel < 1 || kernel % 2 == 0) throw ConfigError("decoder: kernel must be odd");
}

Decoder build_decoder(const DecoderSpec& spec, Rng& rng) {
  spec.validate();
  std::vector<Decoder::Layer> layers;
  auto make = [&](int k) {
    const std::size_t ks = static_cast<std::size_t>(k);
    Decoder::Layer layer{Tensor<float>({spec.channels, spec.channels, ks, ks}),
                         Tensor<float>({spec.channels}, 0.0f)};
    const double std_dev = std::sqrt(2.0 / static_cast<double>(spec.channels * ks * ks));
    for (float& w : layer.weight.data) w = static_cast<float>(rng.normal() * std_dev);
    return layer;
  };
  for (int i = 0; i < spec.depth; ++i) layers.push_back(make(spec.kernel));
  layers.push_back(make(1));
  return Decoder(std::move(layers), spec);
}

Var<float> Decoder::forward(Tape<float>& tape, const Var<float>& features) {
  Var<float> x = features;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const bool hidden = i + 1 < layers_.size();
    const int pad = hidden ? spec_.kernel / 2 : 0;
    x = conv2d(x, tape.param(layers_[i].weight), 1, pad);
    x = bias_add(x, tape.param(layers_[i].bias));
    if (hidden) x = relu(x);
  }
  return x;
}

std::size_t Decoder::parameter_count() const {
  std::size_t n = 0;
  for (const Layer& layer : layers_) n += layer.weight.numel() + layer.bias.numel();
  return n;
}

std::vector<Tensor<float>*> Decoder::parameters() {
  std::vector<Tensor<float>*> out;
  for (Layer& layer : layers_) {
    out.push_back(&layer.weight);
    out.push_back(&layer.bias);
  }
  return out;
}

template <typename T>
Var<T> rl_loss(const Var<T>& teacher, const Var<T>& decoded) {
  if (teacher.shape() != decoded.shape()) {
    throw DimensionError("rl_loss: teacher features " + to_string(teacher.shape()) +
                         " vs decoded " + to_string(decoded.shape()));
  }
  return frobenius_norm(sub(teacher, decoded));
}

template Var<float> rl_loss(const Var<float>&, const Var<float>&);
template Var<double> rl_loss(const Var<double>&, const Var<double>&);

}  // namespace kdfs
