// Copyright 2026 The KDFS Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef KDFS_SAMPLER_HPP
#define KDFS_SAMPLER_HPP

#include <cstddef>
#include <cstdint>
#include <vector>

#include "kdfs/nn.hpp"
#include "kdfs/random.hpp"
#include "kdfs/tape.hpp"
#include "kdfs/tensor.hpp"

namespace kdfs {

/// Gumbel(0,1) draws of shape [rows, 2]: g = -log(-log u) with u clamped to
/// [1e-10, 1 - 1e-10].
template <typename T>
Tensor<T> gumbel_noise(Rng& rng, std::size_t rows);

/// Gumbel(0,1) transform of one uniform draw, using the same clamp.
double gumbel_from_uniform(double u);

/// Row-wise softmax((logits + noise) / tau) over a [C,2] matrix. Differentiable
/// with respect to `logits`. Throws ContractError when tau <= 0.
template <typename T>
Var<T> gumbel_softmax(const Var<T>& logits, const Tensor<T>& noise, T tau);

/// m[i] = 1 iff probs[i,1] >= probs[i,0]. Ties keep the filter.
template <typename T>
Mask hard_mask(const Tensor<T>& probs);

/// How the mask gradient reaches the relaxed probabilities.
enum class SteRouting {
  kSecondColumn,   // dL/dpi[i,1] = dL/dm[i]; column 0 receives nothing
  kAntisymmetric,  // additionally dL/dpi[i,0] = -dL/dm[i]
};

/// Straight-through mask: forward value is hard_mask(probs) as a [C] vector,
/// backward copies the incoming gradient onto probs[:,1].
template <typename T>
Var<T> straight_through_mask(const Var<T>& probs, SteRouting routing = SteRouting::kSecondColumn);

/// Noise-free mask used at inference: m[i] = 1 iff logits[i,1] >= logits[i,0].
template <typename T>
Mask inference_mask(const Tensor<T>& logits);

struct TemperatureSchedule {
  enum class Kind { kLinear, kExponential };
  Kind kind = Kind::kLinear;
  double tau_start = 1.0;
  double tau_end = 0.1;
  int epochs = 1;

  void validate() const;
};

/// Temperature at epoch e in [0, epochs]. Linear interpolation or geometric
/// decay between tau_start and tau_end.
double temperature_at(const TemperatureSchedule& schedule, double epoch);

/// How sampling logits start out.
enum class SamplerInit {
  kKaiming,  // N(0, 2/fan_in) with fan_in = 2, i.e. unit variance
  kKeepAll,  // column 1 ahead by a margin no Gumbel draw can overturn
};

/// Learnable [C_l, 2] sampling logits for every prunable conv, each with its
/// own Gumbel noise stream derived from the run seed and the layer index.
class FilterSampler {
 public:
  FilterSampler() = default;
  FilterSampler(const std::vector<std::size_t>& widths, std::uint64_t seed,
                SamplerInit init = SamplerInit::kKaiming);

  std::size_t layers() const { return logits_.size(); }
  std::vector<Tensor<float>>& logits() { return logits_; }
  const std::vector<Tensor<float>>& logits() const { return logits_; }
  std::vector<Rng>& streams() { return streams_; }
  const std::vector<Rng>& streams() const { return streams_; }

  /// Draws fresh noise for every layer and records the straight-through masks.
  /// `probs_out`, when given, receives the relaxed probabilities per layer.
  std::vector<Var<float>> sample(Tape<float>& tape, float tau, SteRouting routing,
                                 std::vector<Var<float>>* probs_out = nullptr);

  std::vector<Mask> inference_masks() const;

 private:
  std::vector<Tensor<float>> logits_;
  std::vector<Rng> streams_;
};

}  // namespace kdfs

#endif  // KDFS_SAMPLER_HPP
