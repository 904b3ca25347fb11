// Copyright 2026 The KDFS Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef KDFS_TRAINER_HPP
#define KDFS_TRAINER_HPP

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "kdfs/datasets.hpp"
#include "kdfs/mfm.hpp"
#include "kdfs/model_file.hpp"
#include "kdfs/nn.hpp"
#include "kdfs/objective.hpp"
#include "kdfs/pruner.hpp"
#include "kdfs/sampler.hpp"

namespace kdfs {

struct AdaMaxState {
  std::vector<float> m;  // first moment
  std::vector<float> u;  // exponentially weighted infinity norm
  std::int64_t t = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One AdaMax update of `w` in place. A positive `weight_decay` adds
/// weight_decay * w to the gradient first. Throws ContractError on size
/// mismatch.
void adamax_step(std::span<float> w, std::span<const float> g, AdaMaxState& state, double lr,
                 double weight_decay = 0.0);

/// AdaMax over groups of tensors, reading gradients from Tensor::grad.
/// Tensors whose gradient was never allocated are skipped for that step.
class AdaMax {
 public:
  /// Registers a group; its step uses lr * lr_scale.
  void add(std::vector<Tensor<float>*> params, bool decay, double lr_scale = 1.0);
  void step(double lr, double weight_decay);
  void zero_grad();

  std::size_t size() const { return slots_.size(); }
  AdaMaxState& state(std::size_t i) { return slots_[i].state; }
  const AdaMaxState& state(std::size_t i) const { return slots_[i].state; }

 private:
  struct Slot {
    Tensor<float>* param;
    bool decay;
    double lr_scale;
    AdaMaxState state;
  };
  std::vector<Slot> slots_;
};

/// eta_min + (eta0 - eta_min) * (1 + cos(pi * e / E)) / 2 for 0 <= e <= E.
double cosine_lr(double epoch, double phase_epochs, double eta0, double eta_min);

struct TrainConfig {
  int epochs = 350;          // E
  int finetune_epochs = 50;  // E_ft
  double lr = 1e-2;
  double lr_min = 1e-4;
  double weight_decay = 1e-4;
  std::size_t batch_size = 256;
  double sampler_lr_scale = 1.0;  // sampler logits step at lr * sampler_lr_scale
  std::uint64_t seed = 0;
  LossWeights weights;
  TemperatureSchedule::Kind schedule = TemperatureSchedule::Kind::kLinear;
  double tau_start = 1.0;
  double tau_end = 0.1;
  RegularizerKind regularizer = RegularizerKind::kAbsolute;
  SteRouting routing = SteRouting::kSecondColumn;
  SamplerInit sampler_init = SamplerInit::kKaiming;
  int decoder_depth = 1;
  Augmentation augment;  // training batches only; none by default
  int checkpoint_every = 0;  // epochs; 0 disables

  int pruning_epochs() const { return epochs - finetune_epochs; }
  TemperatureSchedule temperature() const;
  void validate() const;
};

struct EpochMetrics {
  int epoch = 0;
  double tau = 0.0;
  double lr = 0.0;
  double ce = 0.0;
  double kd = 0.0;
  double rl = 0.0;
  double reg = 0.0;
  double flops_ratio = 0.0;  // hard-mask FLOPs / teacher FLOPs
  double train_acc = 0.0;
  double eval_acc = 0.0;     // NaN without an evaluation split
};

std::string metrics_header();
std::string metrics_row(const EpochMetrics& m);

using EpochCallback = std::function<void(const EpochMetrics&)>;

/// Fraction of correctly classified samples, eval mode.
double evaluate(const Network& net, const Dataset& data, std::span<const Mask> masks = {},
                std::size_t batch_size = 256);

/// Trains `net` with cross-entropy only, AdaMax and cosine decay over
/// `config.epochs`. Throws NumericError on a non-finite loss.
std::vector<EpochMetrics> train_teacher(Network& net, const Dataset& train, const Dataset* eval,
                                        const TrainConfig& config, const EpochCallback& on_epoch = {});

/// Keeps, for each all-zero mask, the filter whose keep logit leads its drop
/// logit by the most. Returns how many masks were repaired.
std::size_t repair_masks(std::vector<Mask>& masks, const FilterSampler& sampler);

/// The pruning phase: joint training of student weights, sampler logits and
/// decoders against a frozen teacher. The student starts from the teacher's
/// weights.
class KdfsTrainer {
 public:
  KdfsTrainer(const Network& teacher, const Dataset& train, const Dataset* eval, TrainConfig config,
              std::string config_hash = {});
  KdfsTrainer(const KdfsTrainer&) = delete;
  KdfsTrainer& operator=(const KdfsTrainer&) = delete;

  bool done() const { return epoch_ >= config_.pruning_epochs(); }
  int epoch() const { return epoch_; }
  /// Runs the next pruning epoch and appends its metrics row.
  const EpochMetrics& run_epoch();
  void run(const EpochCallback& on_epoch = {});

  const Network& student() const { return student_; }
  const FilterSampler& sampler() const { return sampler_; }
  const std::vector<Decoder>& decoders() const { return decoders_; }
  const std::vector<EpochMetrics>& history() const { return history_; }
  const FlopsModel& flops_model() const { return flops_; }

  /// Noise-free masks from the current logits, with degenerate layers repaired.
  std::vector<Mask> final_masks() const;

  ModelFile checkpoint() const;
  /// Restores a checkpoint taken with the same teacher and configuration.
  void restore(const ModelFile& file);

 private:
  const Network& teacher_;
  const Dataset& train_;
  const Dataset* eval_;
  TrainConfig config_;
  std::string config_hash_;
  Network student_;
  FilterSampler sampler_;
  std::vector<Decoder> decoders_;
  AdaMax optimizer_;
  FlopsModel flops_;
  int epoch_ = 0;
  std::vector<EpochMetrics> history_;

  void build_optimizer();
};

/// Fine-tunes the compact model with CE + kd_weight * KD at lr / 100 (flat)
/// for `config.finetune_epochs`; weights only. Epoch numbers continue after
/// the pruning phase.
std::vector<EpochMetrics> finetune(PrunedModel& model, const Network& teacher, const Dataset& train,
                                   const Dataset* eval, const TrainConfig& config,
                                   const EpochCallback& on_epoch = {});

}  // namespace kdfs

#endif  // KDFS_TRAINER_HPP
