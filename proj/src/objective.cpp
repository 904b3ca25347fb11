// Copyright 2026 The KDFS Authors
// SPDX-License-Identifier: Apache-2.0

#include "kdfs/objective.hpp"

#include <cmath>
#include <optional>

#include "kdfs/ops.hpp"

namespace kdfs {

template <typename T>
Var<T> ce_loss(const Var<T>& logits, std::span<const int> labels) {
  if (logits.shape().size() != 2) {
    throw DimensionError("ce_loss: logits must be [N,K], got " + to_string(logits.shape()));
  }
  const std::size_t n = logits.shape()[0], k = logits.shape()[1];
  if (labels.size() != n) {
    throw DimensionError("ce_loss: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(n) + " rows");
  }
  Tensor<T> onehot({n, k});
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k) {
      throw DataError("ce_loss: label " + std::to_string(labels[i]) + " outside [0," +
                      std::to_string(k) + ")");
    }
    onehot[i * k + static_cast<std::size_t>(labels[i])] = T{1};
  }
  Tape<T>& tape = logits.tape();
  Var<T> picked = sum(mul(tape.constant(std::move(onehot)), log_softmax(logits)));
  return scale(picked, T{-1} / static_cast<T>(n));
}

template <typename T>
Var<T> kd_loss(const Tensor<T>& teacher_logits, const Var<T>& student_logits, T temperature) {
  if (!(temperature > T{0})) throw ContractError("kd_loss: temperature must be positive");
  if (teacher_logits.shape != student_logits.shape() || teacher_logits.rank() != 2) {
    throw DimensionError("kd_loss: teacher logits " + to_string(teacher_logits.shape) +
                         " vs student logits " + to_string(student_logits.shape()));
  }
  const std::size_t n = teacher_logits.dim(0), k = teacher_logits.dim(1);
  // Teacher soft targets and their logs, computed off-tape.
  Tensor<T> log_p({n, k}), p({n, k});
  for (std::size_t r = 0; r < n; ++r) {
    T peak = teacher_logits[r * k];
    for (std::size_t c = 1; c < k; ++c) peak = std::max(peak, teacher_logits[r * k + c]);
    T total{0};
    for (std::size_t c = 0; c < k; ++c) total += std::exp((teacher_logits[r * k + c] - peak) / temperature);
    const T lse = std::log(total);
    for (std::size_t c = 0; c < k; ++c) {
      log_p[r * k + c] = (teacher_logits[r * k + c] - peak) / temperature - lse;
      p[r * k + c] = std::exp(log_p[r * k + c]);
    }
  }
  Tape<T>& tape = student_logits.tape();
  Var<T> log_q = log_softmax(scale(student_logits, T{1} / temperature));
  Var<T> kl = sum(mul(tape.constant(std::move(p)), sub(tape.constant(std::move(log_p)), log_q)));
  return scale(kl, temperature * temperature / static_cast<T>(n));
}

std::int64_t FlopsModel::teacher_flops() const { return flops_of(*this); }

FlopsModel build_flops_model(const Network& net) {
  FlopsModel model;
  for (const ConvBlock* conv : net.prunable()) model.slot_widths.push_back(conv->out_channels());

  std::int64_t h = net.config.in_height, w = net.config.in_width;
  auto out_hw = [&](const ConvBlock& conv) {
    const auto oh = static_cast<std::int64_t>(conv_out_size(static_cast<std::size_t>(h), conv.kernel(), conv.stride, conv.padding));
    const auto ow = static_cast<std::int64_t>(conv_out_size(static_cast<std::size_t>(w), conv.kernel(), conv.stride, conv.padding));
    return std::pair{oh, ow};
  };
  auto fixed_cost = [](const ConvBlock& conv, std::int64_t spatial) {
    return spatial * conv.kernel() * conv.kernel() * static_cast<std::int64_t>(conv.in_channels()) *
           static_cast<std::int64_t>(conv.out_channels());
  };

  {
    auto [oh, ow] = out_hw(net.stem);
    model.fixed += fixed_cost(net.stem, oh * ow);
    h = oh;
    w = ow;
  }
  for (std::size_t s = 0; s < net.stages.size(); ++s) {
    for (std::size_t b = 0; b < net.stages[s].blocks.size(); ++b) {
      const ResidualBlock& block = net.stages[s].blocks[b];
      const std::string prefix = "stage" + std::to_string(s) + ".block" + std::to_string(b);
      auto [oh, ow] = out_hw(block.conv1);
      const std::int64_t spatial = oh * ow;
      const ConvBlock* prev = nullptr;
      for (const ConvBlock* conv : {&block.conv1, &block.conv2}) {
        FlopsLayer layer;
        layer.name = prefix + (conv == &block.conv1 ? ".conv1" : ".conv2");
        layer.spatial = spatial;
        layer.kernel_area = static_cast<std::int64_t>(conv->kernel()) * conv->kernel();
        layer.in_channels = static_cast<std::int64_t>(conv->in_channels());
        layer.out_channels = static_cast<std::int64_t>(conv->out_channels());
        if (prev && prev->prunable) layer.in_slot = prev->mask_slot;
        if (conv->prunable) layer.out_slot = conv->mask_slot;
        if (layer.in_slot < 0 && layer.out_slot < 0) {
          model.fixed += fixed_cost(*conv, spatial);
        } else {
          model.layers.push_back(layer);
        }
        prev = conv;
      }
      if (block.shortcut) model.fixed += fixed_cost(*block.shortcut, spatial);
      h = oh;
      w = ow;
    }
  }
  model.fixed += static_cast<std::int64_t>(net.fc_weight.numel());
  return model;
}

std::int64_t flops_of(const FlopsModel& model, std::span<const Mask> masks) {
  if (!masks.empty() && masks.size() != model.slot_widths.size()) {
    throw ContractError("flops_of: expected " + std::to_string(model.slot_widths.size()) +
                        " masks, got " + std::to_string(masks.size()));
  }
  for (std::size_t i = 0; i < masks.size(); ++i) {
    if (masks[i].size() != model.slot_widths[i]) {
      throw ContractError("flops_of: mask " + std::to_string(i) + " has " + std::to_string(masks[i].size()) +
                          " entries, expected " + std::to_string(model.slot_widths[i]));
    }
  }
  auto channels = [&](int slot, std::int64_t fixed) -> std::int64_t {
    if (slot < 0) return fixed;
    if (static_cast<std::size_t>(slot) >= model.slot_widths.size()) {
      throw ContractError("flops_of: unresolved mask slot " + std::to_string(slot));
    }
    if (masks.empty()) return static_cast<std::int64_t>(model.slot_widths[static_cast<std::size_t>(slot)]);
    return static_cast<std::int64_t>(popcount(masks[static_cast<std::size_t>(slot)]));
  };
  std::int64_t total = model.fixed;
  for (const FlopsLayer& layer : model.layers) {
    total += layer.spatial * layer.kernel_area * channels(layer.in_slot, layer.in_channels) *
             channels(layer.out_slot, layer.out_channels);
  }
  return total;
}

template <typename T>
Var<T> flops_of(const FlopsModel& model, std::span<const Var<T>> masks) {
  if (masks.size() != model.slot_widths.size()) {
    throw ContractError("flops_of: expected " + std::to_string(model.slot_widths.size()) +
                        " masks, got " + std::to_string(masks.size()));
  }
  if (masks.empty()) throw ContractError("flops_of: differentiable FLOPs need at least one mask");
  for (std::size_t i = 0; i < masks.size(); ++i) {
    if (masks[i].numel() != model.slot_widths[i]) {
      throw ContractError("flops_of: mask " + std::to_string(i) + " has " + std::to_string(masks[i].numel()) +
                          " entries, expected " + std::to_string(model.slot_widths[i]));
    }
  }
  Tape<T>& tape = masks.front().tape();
  std::vector<std::optional<Var<T>>> sums(masks.size());
  auto channel_sum = [&](int slot) -> Var<T> {
    if (static_cast<std::size_t>(slot) >= masks.size()) {
      throw ContractError("flops_of: unresolved mask slot " + std::to_string(slot));
    }
    auto& cached = sums[static_cast<std::size_t>(slot)];
    if (!cached) cached = sum(masks[static_cast<std::size_t>(slot)]);
    return *cached;
  };
  Var<T> total = tape.constant(Tensor<T>::scalar(static_cast<T>(model.fixed)));
  for (const FlopsLayer& layer : model.layers) {
    T coef = static_cast<T>(layer.spatial * layer.kernel_area);
    Var<T> term;
    if (layer.in_slot >= 0 && layer.out_slot >= 0) {
      term = mul(channel_sum(layer.in_slot), channel_sum(layer.out_slot));
    } else if (layer.out_slot >= 0) {
      term = channel_sum(layer.out_slot);
      coef *= static_cast<T>(layer.in_channels);
    } else {
      term = channel_sum(layer.in_slot);
      coef *= static_cast<T>(layer.out_channels);
    }
    total = add(total, scale(term, coef));
  }
  return total;
}

template <typename T>
Var<T> flops_regularizer(const Var<T>& student_flops, T teacher_flops, T rate, RegularizerKind kind) {
  if (!(teacher_flops > T{0})) throw ContractError("flops_regularizer: teacher FLOPs must be positive");
  Var<T> gap = add_scalar(scale(student_flops, T{1} / teacher_flops), -(T{1} - rate));
  if (kind == RegularizerKind::kSquared) return mul(gap, gap);
  return abs(gap);
}

void LossWeights::validate() const {
  if (kd < 0 || rl < 0 || flops < 0) throw ConfigError("loss weights must be non-negative");
  if (!(kd_temperature > 0)) throw ConfigError("kd temperature must be positive");
  if (!(rate >= 0 && rate < 1)) throw ConfigError("compression rate must lie in [0,1)");
}

template <typename T>
Var<T> total_loss(const Var<T>& ce, const Var<T>& kd, std::span<const Var<T>> rl, const Var<T>& reg,
                  const LossWeights& weights) {
  auto check = [](const Var<T>& term, const std::string& name) {
    if (term.numel() != 1) throw ContractError("total_loss: " + name + " term is not scalar");
    if (!std::isfinite(term.item())) throw NumericError("total_loss: non-finite " + name + " term");
  };
  check(ce, "ce");
  check(kd, "kd");
  for (std::size_t i = 0; i < rl.size(); ++i) check(rl[i], "rl[" + std::to_string(i) + "]");
  check(reg, "flops regularization");

  Var<T> total = add(ce, scale(kd, static_cast<T>(weights.kd)));
  for (const Var<T>& term : rl) total = add(total, scale(term, static_cast<T>(weights.rl)));
  return add(total, scale(reg, static_cast<T>(weights.flops)));
}

template Var<float> ce_loss(const Var<float>&, std::span<const int>);
template Var<double> ce_loss(const Var<double>&, std::span<const int>);
template Var<float> kd_loss(const Tensor<float>&, const Var<float>&, float);
template Var<double> kd_loss(const Tensor<double>&, const Var<double>&, double);
template Var<float> flops_of(const FlopsModel&, std::span<const Var<float>>);
template Var<double> flops_of(const FlopsModel&, std::span<const Var<double>>);
template Var<float> flops_regularizer(const Var<float>&, float, float, RegularizerKind);
template Var<double> flops_regularizer(const Var<double>&, double, double, RegularizerKind);
template Var<float> total_loss(const Var<float>&, const Var<float>&, std::span<const Var<float>>,
                               const Var<float>&, const LossWeights&);
template Var<double> total_loss(const Var<double>&, const Var<double>&, std::span<const Var<double>>,
                                const Var<double>&, const LossWeights&);

}  // namespace kdfs
