// Copyright 2026 The KDFS Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef KDFS_MFM_HPP
#define KDFS_MFM_HPP

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "kdfs/random.hpp"
#include "kdfs/tape.hpp"
#include "kdfs/tensor.hpp"

namespace kdfs {

struct DecoderSpec {
  int depth = 1;         // hidden 3x3 layers, 1 or 2
  std::size_t channels = 0;  // stage width
  int kernel = 3;
  std::size_t stage = 0;

  void validate() const;
};

/// Reconstructs teacher stage features from masked student features:
/// `depth` x (kxk conv + bias + ReLU) at constant width, then a 1x1 conv +
/// bias. Stride 1 and "same" padding keep the spatial size.
class Decoder {
 public:
  struct Layer {
    Tensor<float> weight;
    Tensor<float> bias;
  };

  Decoder() = default;
  explicit Decoder(std::vector<Layer> layers, DecoderSpec spec)
      : spec_(spec), layers_(std::move(layers)) {}

  const DecoderSpec& spec() const { return spec_; }
  std::vector<Layer>& layers() { return layers_; }
  const std::vector<Layer>& layers() const { return layers_; }

  Var<float> forward(Tape<float>& tape, const Var<float>& features);
  std::size_t parameter_count() const;
  std::vector<Tensor<float>*> parameters();

 private:
  DecoderSpec spec_;
  std::vector<Layer> layers_;
};

Decoder build_decoder(const DecoderSpec& spec, Rng& rng);

/// Frobenius norm of (teacher - decoded) over the whole batch tensor.
template <typename T>
Var<T> rl_loss(const Var<T>& teacher, const Var<T>& decoded);

}  // namespace kdfs

#endif  // KDFS_MFM_HPP
