// Copyright 2026 The KDFS Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef KDFS_OBJECTIVE_HPP
#define KDFS_OBJECTIVE_HPP

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "kdfs/nn.hpp"
#include "kdfs/tape.hpp"
#include "kdfs/tensor.hpp"

namespace kdfs {

/// Batch mean of -log softmax(logits)[label]. Labels outside [0,K) raise
/// DataError.
template <typename T>
Var<T> ce_loss(const Var<T>& logits, std::span<const int> labels);

/// Batch mean of T^2 * KL(softmax(teacher/T) || softmax(student/T)). The
/// teacher side is a plain tensor, so no gradient can reach it.
template <typename T>
Var<T> kd_loss(const Tensor<T>& teacher_logits, const Var<T>& student_logits, T temperature);

/// One convolution whose cost depends on at least one mask. Input and output
/// channel counts come either from a mask slot (its channel sum) or from a
/// fixed count when the slot index is negative.
struct FlopsLayer {
  std::string name;
  std::int64_t spatial = 0;      // output H' * W'
  std::int64_t kernel_area = 0;  // d * d
  int in_slot = -1;
  std::int64_t in_channels = 0;
  int out_slot = -1;
  std::int64_t out_channels = 0;
};

/// Multiply-accumulate count of a network as a function of its masks.
/// Batch norm, activations, pooling and residual additions are not counted.
struct FlopsModel {
  std::vector<FlopsLayer> layers;
  std::int64_t fixed = 0;  // stem, shortcut convs and classifier
  std::vector<std::size_t> slot_widths;

  std::int64_t teacher_flops() const;
};

FlopsModel build_flops_model(const Network& net);

/// Integer FLOPs at binary masks; an empty span means all ones.
std::int64_t flops_of(const FlopsModel& model, std::span<const Mask> masks = {});

/// Differentiable FLOPs at (straight-through) mask values.
template <typename T>
Var<T> flops_of(const FlopsModel& model, std::span<const Var<T>> masks);

enum class RegularizerKind { kAbsolute, kSquared };

/// |student/teacher - (1 - r)|, i.e. the FLOPs gap to the budget normalized
/// by the teacher's FLOPs (squared when requested).
template <typename T>
Var<T> flops_regularizer(const Var<T>& student_flops, T teacher_flops, T rate,
                         RegularizerKind kind = RegularizerKind::kAbsolute);

struct LossWeights {
  double kd = 0.05;
  double rl = 1000.0;
  double flops = 10000.0;
  double kd_temperature = 3.0;
  double rate = 0.5;  // global compression rate r

  void validate() const;
};

/// ce + kd_w * kd + rl_w * sum(rl) + flops_w * reg. Throws NumericError naming
/// the first non-finite term.
template <typename T>
Var<T> total_loss(const Var<T>& ce, const Var<T>& kd, std::span<const Var<T>> rl, const Var<T>& reg,
                  const LossWeights& weights);

}  // namespace kdfs

#endif  // KDFS_OBJECTIVE_HPP
