// Copyright 2026 The KDFS Authors
// SPDX-License-Identifier: Apache-2.0

#include "kdfs/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "kdfs/ops.hpp"

namespace kdfs {

namespace {
constexpr double kUniformClamp = 1e-10;
// Exceeds the largest gap two clamped Gumbel draws can produce (about 26.2).
constexpr float kKeepAllMargin = 30.0f;
}  // namespace

double gumbel_from_uniform(double u) {
  u = std::clamp(u, kUniformClamp, 1.0 - kUniformClamp);
  return -std::log(-std::log(u));
}

template <typename T>
Tensor<T> gumbel_noise(Rng& rng, std::size_t rows) {
  Tensor<T> g({rows, 2});
  for (T& v : g.data) v = static_cast<T>(gumbel_from_uniform(rng.uniform()));
  return g;
}

template <typename T>
Var<T> gumbel_softmax(const Var<T>& logits, const Tensor<T>& noise, T tau) {
  if (!(tau > T{0})) throw ContractError("gumbel_softmax: temperature must be positive");
  if (logits.shape().size() != 2 || logits.shape()[1] != 2) {
    throw DimensionError("gumbel_softmax: logits must have shape [C,2], got " + to_string(logits.shape()));
  }
  if (noise.shape != logits.shape()) {
    throw DimensionError("gumbel_softmax: noise shape " + to_string(noise.shape) +
                         " != logits shape " + to_string(logits.shape()));
  }
  Tape<T>& tape = logits.tape();
  Var<T> perturbed = add(logits, tape.constant(noise));
  return softmax(scale(perturbed, T{1} / tau));
}

template <typename T>
Mask hard_mask(const Tensor<T>& probs) {
  if (probs.rank() != 2 || probs.dim(1) != 2) {
    throw DimensionError("hard_mask: expected [C,2], got " + to_string(probs.shape));
  }
  Mask m(probs.dim(0));
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = probs[2 * i + 1] >= probs[2 * i] ? 1 : 0;
  return m;
}

template <typename T>
Var<T> straight_through_mask(const Var<T>& probs, SteRouting routing) {
  const Mask hard = hard_mask(probs.value());
  Tensor<T> out({hard.size()});
  for (std::size_t i = 0; i < hard.size(); ++i) out[i] = hard[i] ? T{1} : T{0};
  const std::size_t ip = probs.id();
  return probs.tape().record(std::move(out), {probs}, [=](Tape<T>& tape, std::span<const T> g) {
    std::vector<T>& gp = *tape.grad_buffer(ip);
    for (std::size_t i = 0; i < g.size(); ++i) {
      gp[2 * i + 1] += g[i];
      if (routing == SteRouting::kAntisymmetric) gp[2 * i] -= g[i];
    }
  });
}

template <typename T>
Mask inference_mask(const Tensor<T>& logits) {
  if (logits.rank() != 2 || logits.dim(1) != 2) {
    throw DimensionError("inference_mask: expected [C,2], got " + to_string(logits.shape));
  }
  Mask m(logits.dim(0));
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = logits[2 * i + 1] >= logits[2 * i] ? 1 : 0;
  return m;
}

void TemperatureSchedule::validate() const {
  if (!(tau_start > 0.0) || !(tau_end > 0.0)) {
    throw ConfigError("temperature schedule: tau_start and tau_end must be positive");
  }
  if (epochs < 1) throw ConfigError("temperature schedule: epochs must be >= 1");
}

double temperature_at(const TemperatureSchedule& schedule, double epoch) {
  schedule.validate();
  const double total = static_cast<double>(schedule.epochs);
  if (epoch < 0.0 || epoch > total) {
    throw ContractError("temperature_at: epoch " + std::to_string(epoch) + " outside [0, " +
                        std::to_string(schedule.epochs) + "]");
  }
  const double frac = epoch / total;
  if (epoch == total) return schedule.tau_end;
  if (schedule.kind == TemperatureSchedule::Kind::kLinear) {
    return (1.0 - frac) * schedule.tau_start + frac * schedule.tau_end;
  }
  return schedule.tau_start * std::pow(schedule.tau_end / schedule.tau_start, frac);
}

FilterSampler::FilterSampler(const std::vector<std::size_t>& widths, std::uint64_t seed,
                             SamplerInit init) {
  Rng init_rng(mix_seed(seed, 0x5a4d));
  for (std::size_t l = 0; l < widths.size(); ++l) {
    Tensor<float> p({widths[l], 2});
    for (std::size_t i = 0; i < widths[l]; ++i) {
      if (init == SamplerInit::kKaiming) {
        // fan_in of a [C,2] matrix is 2, so std = sqrt(2 / 2) = 1.
        p[2 * i] = static_cast<float>(init_rng.normal());
        p[2 * i + 1] = static_cast<float>(init_rng.normal());
      } else {
        p[2 * i] = 0.0f;
        p[2 * i + 1] = kKeepAllMargin;
      }
    }
    logits_.push_back(std::move(p));
    streams_.emplace_back(mix_seed(seed, 1000 + l));
  }
}

std::vector<Var<float>> FilterSampler::sample(Tape<float>& tape, float tau, SteRouting routing,
                                              std::vector<Var<float>>* probs_out) {
  std::vector<Var<float>> masks;
  masks.reserve(logits_.size());
  if (probs_out) probs_out->clear();
  for (std::size_t l = 0; l < logits_.size(); ++l) {
    Tensor<float> noise = gumbel_noise<float>(streams_[l], logits_[l].dim(0));
    Var<float> probs = gumbel_softmax(tape.param(logits_[l]), noise, tau);
    if (probs_out) probs_out->push_back(probs);
    masks.push_back(straight_through_mask(probs, routing));
  }
  return masks;
}

std::vector<Mask> FilterSampler::inference_masks() const {
  std::vector<Mask> out;
  out.reserve(logits_.size());
  for (const Tensor<float>& p : logits_) out.push_back(inference_mask(p));
  return out;
}

template Tensor<float> gumbel_noise<float>(Rng&, std::size_t);
template Tensor<double> gumbel_noise<double>(Rng&, std::size_t);
template Var<float> gumbel_softmax(const Var<float>&, const Tensor<float>&, float);
template Var<double> gumbel_softmax(const Var<double>&, const Tensor<double>&, double);
template Mask hard_mask(const Tensor<float>&);
template Mask hard_mask(const Tensor<double>&);
template Var<float> straight_through_mask(const Var<float>&, SteRouting);
template Var<double> straight_through_mask(const Var<double>&, SteRouting);
template Mask inference_mask(const Tensor<float>&);
template Mask inference_mask(const Tensor<double>&);

}  // namespace kdfs
