// Copyright 2026 The KDFS Authors
// SPDX-License-Identifier: Apache-2.0

#include "kdfs/trainer.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>

namespace kdfs {
namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::size_t correct_predictions(const Tensor<float>& logits, std::span<const int> labels) {
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const float* row = logits.data.data() + i * k;
    const auto best = static_cast<int>(std::max_element(row, row + k) - row);
    if (best == labels[i]) ++hits;
  }
  return hits;
}

std::vector<Tensor<float>*> decoder_params(std::vector<Decoder>& decoders) {
  std::vector<Tensor<float>*> out;
  for (Decoder& d : decoders) {
    for (Tensor<float>* p : d.parameters()) out.push_back(p);
  }
  return out;
}

std::vector<Tensor<float>*> sampler_params(FilterSampler& sampler) {
  std::vector<Tensor<float>*> out;
  for (Tensor<float>& p : sampler.logits()) out.push_back(&p);
  return out;
}

void require_finite(double v, const std::string& what, int epoch, std::size_t batch) {
  if (!std::isfinite(v)) {
    throw NumericError(what + " became non-finite at epoch " + std::to_string(epoch) + ", batch " +
                       std::to_string(batch));
  }
}

Rng* augment_rng(const TrainConfig& config, int epoch, Rng& storage) {
  if (!config.augment.enabled()) return nullptr;
  storage = Rng(mix_seed(config.seed, 0xa0000 + static_cast<std::uint64_t>(epoch)));
  return &storage;
}

std::vector<std::vector<std::size_t>> epoch_batches(const Dataset& data, const TrainConfig& config, int epoch) {
  return batches(data.size(), config.batch_size, mix_seed(config.seed, static_cast<std::uint64_t>(epoch)), true);
}

double json_number(const nlohmann::json& j) { return j.is_null() ? kNaN : j.get<double>(); }

}  // namespace

void adamax_step(std::span<float> w, std::span<const float> g, AdaMaxState& state, double lr, double weight_decay) {
  if (w.size() != g.size()) {
    throw ContractError("adamax_step: " + std::to_string(w.size()) + " weights vs " + std::to_string(g.size()) +
                        " gradients");
  }
  if (state.m.empty() && state.u.empty()) {
    state.m.assign(w.size(), 0.0f);
    state.u.assign(w.size(), 0.0f);
  }
  if (state.m.size() != w.size() || state.u.size() != w.size()) {
    throw ContractError("adamax_step: optimizer state does not match the parameter size");
  }
  state.t += 1;
  const double step = lr / (1.0 - std::pow(state.beta1, static_cast<double>(state.t)));
  const auto b1 = static_cast<float>(state.beta1), b2 = static_cast<float>(state.beta2);
  const auto wd = static_cast<float>(weight_decay);
  for (std::size_t i = 0; i < w.size(); ++i) {
    const float grad = g[i] + wd * w[i];
    state.m[i] = b1 * state.m[i] + (1.0f - b1) * grad;
    state.u[i] = std::max(b2 * state.u[i], std::abs(grad));
    w[i] -= static_cast<float>(step * state.m[i] / (state.u[i] + state.eps));
  }
}

void AdaMax::add(std::vector<Tensor<float>*> params, bool decay, double lr_scale) {
  for (Tensor<float>* p : params) slots_.push_back({p, decay, lr_scale, {}});
}

void AdaMax::step(double lr, double weight_decay) {
  for (Slot& slot : slots_) {
    if (!slot.param->has_grad()) continue;
    adamax_step(slot.param->data, slot.param->grad, slot.state, lr * slot.lr_scale,
                slot.decay ? weight_decay : 0.0);
  }
}

void AdaMax::zero_grad() {
  for (Slot& slot : slots_) slot.param->zero_grad();
}

double cosine_lr(double epoch, double phase_epochs, double eta0, double eta_min) {
  if (!(phase_epochs > 0) || epoch < 0 || epoch > phase_epochs) {
    throw ContractError("cosine_lr: epoch " + std::to_string(epoch) + " outside [0," +
                        std::to_string(phase_epochs) + "]");
  }
  return eta_min + 0.5 * (eta0 - eta_min) * (1.0 + std::cos(std::numbers::pi * epoch / phase_epochs));
}

TemperatureSchedule TrainConfig::temperature() const {
  TemperatureSchedule s;
  s.kind = schedule;
  s.tau_start = tau_start;
  s.tau_end = tau_end;
  s.epochs = std::max(1, pruning_epochs());
  return s;
}

void TrainConfig::validate() const {
  if (!(epochs > finetune_epochs && finetune_epochs >= 0)) {
    throw ConfigError("epochs must exceed finetune_epochs, which must be non-negative");
  }
  if (!(lr > lr_min && lr_min > 0)) throw ConfigError("need lr > lr_min > 0");
  if (weight_decay < 0) throw ConfigError("weight_decay must be non-negative");
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (!(sampler_lr_scale > 0)) throw ConfigError("sampler_lr_scale must be positive");
  if (decoder_depth != 1 && decoder_depth != 2) throw ConfigError("decoder_depth must be 1 or 2");
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be non-negative");
  if (augment.max_shift < 0) throw ConfigError("augment_shift must be non-negative");
  weights.validate();
  temperature().validate();
}

std::string metrics_header() { return "epoch,tau,lr,ce,kd,rl,reg,flops_ratio,train_acc,eval_acc"; }

std::string metrics_row(const EpochMetrics& m) {
  char buf[320];
  std::snprintf(buf, sizeof buf, "%d,%.6g,%.6g,%.9g,%.9g,%.9g,%.9g,%.6f,%.6f,%.6f", m.epoch, m.tau, m.lr, m.ce, m.kd,
                m.rl, m.reg, m.flops_ratio, m.train_acc, m.eval_acc);
  return buf;
}

double evaluate(const Network& net, const Dataset& data, std::span<const Mask> masks, std::size_t batch_size) {
  if (data.size() == 0) return kNaN;
  std::size_t hits = 0;
  std::vector<int> labels;
  for (const auto& idx : batches(data.size(), batch_size, 0, false)) {
    const Tensor<float> x = make_batch(data, idx, &labels);
    Tape<float> tape;
    const auto mask_vars = constant_masks(tape, masks);
    hits += correct_predictions(forward_frozen(net, tape, x, mask_vars).logits.value(), labels);
  }
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

std::vector<EpochMetrics> train_teacher(Network& net, const Dataset& train, const Dataset* eval,
                                        const TrainConfig& config, const EpochCallback& on_epoch) {
  config.validate();
  AdaMax optimizer;
  optimizer.add(net.parameters(), true);
  std::vector<EpochMetrics> history;
  std::vector<int> labels;
  Rng aug_storage;
  for (int e = 1; e <= config.epochs; ++e) {
    EpochMetrics m;
    m.epoch = e;
    m.lr = cosine_lr(e - 1, config.epochs, config.lr, config.lr_min);
    m.flops_ratio = 1.0;
    Rng* aug = augment_rng(config, e, aug_storage);
    double ce_sum = 0.0;
    std::size_t hits = 0, seen = 0, b = 0;
    for (const auto& idx : epoch_batches(train, config, e)) {
      const Tensor<float> x = make_batch(train, idx, &labels, aug, config.augment);
      Tape<float> tape;
      const ForwardTrace trace = forward(net, tape, x, {}, Mode::kTrain);
      Var<float> ce = ce_loss(trace.logits, std::span<const int>(labels));
      require_finite(ce.item(), "teacher cross-entropy", e, b++);
      optimizer.zero_grad();
      tape.backward(ce);
      optimizer.step(m.lr, config.weight_decay);
      ce_sum += static_cast<double>(ce.item()) * static_cast<double>(idx.size());
      hits += correct_predictions(trace.logits.value(), labels);
      seen += idx.size();
    }
    m.ce = ce_sum / static_cast<double>(seen);
    m.train_acc = static_cast<double>(hits) / static_cast<double>(seen);
    m.eval_acc = eval ? evaluate(net, *eval) : kNaN;
    history.push_back(m);
    if (on_epoch) on_epoch(m);
  }
  return history;
}

std::size_t repair_masks(std::vector<Mask>& masks, const FilterSampler& sampler) {
  if (masks.size() != sampler.layers()) throw ContractError("repair_masks: mask count does not match the sampler");
  std::size_t repaired = 0;
  for (std::size_t l = 0; l < masks.size(); ++l) {
    if (popcount(masks[l]) > 0) continue;
    const Tensor<float>& p = sampler.logits()[l];
    std::size_t best = 0;
    for (std::size_t i = 1; i < masks[l].size(); ++i) {
      if (p[2 * i + 1] - p[2 * i] > p[2 * best + 1] - p[2 * best]) best = i;
    }
    masks[l][best] = 1;
    ++repaired;
  }
  return repaired;
}

KdfsTrainer::KdfsTrainer(const Network& teacher, const Dataset& train, const Dataset* eval, TrainConfig config,
                         std::string config_hash)
    : teacher_(teacher),
      train_(train),
      eval_(eval),
      config_(std::move(config)),
      config_hash_(std::move(config_hash)),
      student_(teacher),
      flops_(build_flops_model(teacher)) {
  config_.validate();
  sampler_ = FilterSampler(flops_.slot_widths, mix_seed(config_.seed, 0x5a3), config_.sampler_init);
  Rng decoder_rng(mix_seed(config_.seed, 0xdec));
  for (std::size_t s = 0; s < student_.stages.size(); ++s) {
    DecoderSpec spec;
    spec.depth = config_.decoder_depth;
    spec.channels = student_.stages[s].width;
    spec.stage = s;
    decoders_.push_back(build_decoder(spec, decoder_rng));
  }
  build_optimizer();
}

void KdfsTrainer::build_optimizer() {
  optimizer_ = AdaMax();
  optimizer_.add(student_.parameters(), true);
  optimizer_.add(sampler_params(sampler_), false, config_.sampler_lr_scale);
  optimizer_.add(decoder_params(decoders_), false);
}

const EpochMetrics& KdfsTrainer::run_epoch() {
  if (done()) throw ContractError("run_epoch: pruning phase already finished");
  const int e = epoch_ + 1;
  const int phase = config_.pruning_epochs();
  const LossWeights& w = config_.weights;
  EpochMetrics m;
  m.epoch = e;
  m.tau = temperature_at(config_.temperature(), e);
  m.lr = cosine_lr(e - 1, phase, config_.lr, config_.lr_min);
  const auto teacher_flops = static_cast<float>(flops_.teacher_flops());
  const bool need_teacher = w.kd > 0 || w.rl > 0;

  Rng aug_storage;
  Rng* aug = augment_rng(config_, e, aug_storage);
  std::vector<int> labels;
  double ce_sum = 0, kd_sum = 0, rl_sum = 0, reg_sum = 0;
  std::size_t hits = 0, seen = 0, b = 0;
  for (const auto& idx : epoch_batches(train_, config_, e)) {
    const Tensor<float> x = make_batch(train_, idx, &labels, aug, config_.augment);
    const auto n = static_cast<float>(idx.size());

    Tape<float> teacher_tape;
    ForwardTrace teacher_trace;
    if (need_teacher) teacher_trace = forward_frozen(teacher_, teacher_tape, x);

    Tape<float> tape;
    const std::vector<Var<float>> masks = sampler_.sample(tape, static_cast<float>(m.tau), config_.routing);
    const ForwardTrace trace = forward(student_, tape, x, masks, Mode::kTrain);

    Var<float> ce = ce_loss(trace.logits, std::span<const int>(labels));
    Var<float> kd = w.kd > 0 ? kd_loss(teacher_trace.logits.value(), trace.logits, static_cast<float>(w.kd_temperature))
                             : tape.constant(Tensor<float>::scalar(0.0f));
    std::vector<Var<float>> rl;
    if (w.rl > 0) {
      for (std::size_t s = 0; s < decoders_.size(); ++s) {
        Var<float> target = tape.constant(teacher_trace.stage_features[s].value());
        rl.push_back(scale(rl_loss(target, decoders_[s].forward(tape, trace.stage_features[s])), 1.0f / n));
      }
    }
    Var<float> reg = flops_regularizer(flops_of(flops_, std::span<const Var<float>>(masks)), teacher_flops,
                                       static_cast<float>(w.rate), config_.regularizer);
    Var<float> loss;
    try {
      loss = total_loss(ce, kd, std::span<const Var<float>>(rl), reg, w);
    } catch (const NumericError& err) {
      throw NumericError(std::string(err.what()) + " at epoch " + std::to_string(e) + ", batch " + std::to_string(b));
    }
    require_finite(loss.item(), "total loss", e, b);

    optimizer_.zero_grad();
    tape.backward(loss);
    optimizer_.step(m.lr, config_.weight_decay);

    const double bs = idx.size();
    ce_sum += ce.item() * bs;
    kd_sum += kd.item() * bs;
    for (const auto& term : rl) rl_sum += term.item() * bs;
    reg_sum += reg.item() * bs;
    hits += correct_predictions(trace.logits.value(), labels);
    seen += idx.size();
    ++b;
  }
  const double total = static_cast<double>(seen);
  m.ce = ce_sum / total;
  m.kd = kd_sum / total;
  m.rl = rl_sum / total;
  m.reg = reg_sum / total;
  m.train_acc = static_cast<double>(hits) / total;

  std::vector<Mask> hard = sampler_.inference_masks();
  repair_masks(hard, sampler_);
  m.flops_ratio = static_cast<double>(flops_of(flops_, hard)) / static_cast<double>(flops_.teacher_flops());
  m.eval_acc = eval_ ? evaluate(student_, *eval_, hard) : kNaN;

  epoch_ = e;
  history_.push_back(m);
  return history_.back();
}

void KdfsTrainer::run(const EpochCallback& on_epoch) {
  while (!done()) {
    const EpochMetrics& m = run_epoch();
    if (on_epoch) on_epoch(m);
  }
}

std::vector<Mask> KdfsTrainer::final_masks() const {
  std::vector<Mask> masks = sampler_.inference_masks();
  const std::size_t repaired = repair_masks(masks, sampler_);
  if (repaired > 0) {
    spdlog::warn("{} layer(s) would lose every filter; kept the filter with the largest keep margin in each",
                 repaired);
  }
  return masks;
}

ModelFile KdfsTrainer::checkpoint() const {
  ModelFile file;
  nlohmann::json streams = nlohmann::json::array();
  for (const Rng& r : sampler_.streams()) streams.push_back(r.state());
  nlohmann::json decoders = nlohmann::json::array();
  for (const Decoder& d : decoders_) {
    decoders.push_back({{"depth", d.spec().depth}, {"channels", d.spec().channels}, {"kernel", d.spec().kernel}});
  }
  nlohmann::json steps = nlohmann::json::array();
  for (std::size_t i = 0; i < optimizer_.size(); ++i) steps.push_back(optimizer_.state(i).t);
  nlohmann::json history = nlohmann::json::array();
  for (const EpochMetrics& m : history_) {
    auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
    history.push_back({m.epoch, num(m.tau), num(m.lr), num(m.ce), num(m.kd), num(m.rl), num(m.reg),
                       num(m.flops_ratio), num(m.train_acc), num(m.eval_acc)});
  }
  file.descriptor = {{"kind", "kdfs-checkpoint"}, {"epoch", epoch_},       {"config_hash", config_hash_},
                     {"network", describe(student_)}, {"sampler_streams", streams}, {"decoders", decoders},
                     {"adamax_steps", steps},    {"history", history}};
  append_tensors(file, student_, "student.");
  for (std::size_t l = 0; l < sampler_.layers(); ++l) {
    file.tensors.emplace_back("sampler." + std::to_string(l), sampler_.logits()[l]);
  }
  for (std::size_t s = 0; s < decoders_.size(); ++s) {
    const auto& layers = decoders_[s].layers();
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const std::string prefix = "decoder." + std::to_string(s) + "." + std::to_string(i);
      file.tensors.emplace_back(prefix + ".weight", layers[i].weight);
      file.tensors.emplace_back(prefix + ".bias", layers[i].bias);
    }
  }
  for (std::size_t i = 0; i < optimizer_.size(); ++i) {
    const AdaMaxState& st = optimizer_.state(i);
    file.tensors.emplace_back("adamax." + std::to_string(i) + ".m", Tensor<float>({st.m.size()}, st.m));
    file.tensors.emplace_back("adamax." + std::to_string(i) + ".u", Tensor<float>({st.u.size()}, st.u));
  }
  return file;
}

void KdfsTrainer::restore(const ModelFile& file) {
  const nlohmann::json& d = file.descriptor;
  try {
    if (d.at("kind") != "kdfs-checkpoint") throw FormatError("model file is not a training checkpoint");
    const auto hash = d.at("config_hash").get<std::string>();
    if (!hash.empty() && !config_hash_.empty() && hash != config_hash_) {
      throw ConfigError("checkpoint was written with a different configuration (" + hash + " vs " + config_hash_ +
                        ")");
    }
    student_ = network_from(d.at("network"), file, "student.");
    const auto streams = d.at("sampler_streams").get<std::vector<std::string>>();
    if (streams.size() != sampler_.layers()) throw FormatError("checkpoint sampler has the wrong layer count");
    for (std::size_t l = 0; l < streams.size(); ++l) {
      const Tensor<float>& p = file.tensor("sampler." + std::to_string(l));
      if (p.shape != sampler_.logits()[l].shape) throw FormatError("checkpoint sampler logits have the wrong shape");
      sampler_.logits()[l] = p;
      sampler_.streams()[l].set_state(streams[l]);
    }
    const auto& decoders = d.at("decoders");
    if (decoders.size() != decoders_.size()) throw FormatError("checkpoint has the wrong decoder count");
    for (std::size_t s = 0; s < decoders_.size(); ++s) {
      if (decoders[s].at("depth").get<int>() != decoders_[s].spec().depth) {
        throw ConfigError("checkpoint decoder depth differs from the configuration");
      }
      auto& layers = decoders_[s].layers();
      for (std::size_t i = 0; i < layers.size(); ++i) {
        const std::string prefix = "decoder." + std::to_string(s) + "." + std::to_string(i);
        layers[i].weight = file.tensor(prefix + ".weight");
        layers[i].bias = file.tensor(prefix + ".bias");
      }
    }
    build_optimizer();
    const auto steps = d.at("adamax_steps").get<std::vector<std::int64_t>>();
    if (steps.size() != optimizer_.size()) throw FormatError("checkpoint optimizer state has the wrong size");
    for (std::size_t i = 0; i < steps.size(); ++i) {
      AdaMaxState& st = optimizer_.state(i);
      st.t = steps[i];
      st.m = file.tensor("adamax." + std::to_string(i) + ".m").data;
      st.u = file.tensor("adamax." + std::to_string(i) + ".u").data;
    }
    history_.clear();
    for (const auto& row : d.at("history")) {
      EpochMetrics m;
      m.epoch = row.at(0).get<int>();
      double* fields[] = {&m.tau, &m.lr, &m.ce, &m.kd, &m.rl, &m.reg, &m.flops_ratio, &m.train_acc, &m.eval_acc};
      for (std::size_t i = 0; i < std::size(fields); ++i) *fields[i] = json_number(row.at(i + 1));
      history_.push_back(m);
    }
    epoch_ = d.at("epoch").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed checkpoint descriptor: ") + e.what());
  }
}

std::vector<EpochMetrics> finetune(PrunedModel& model, const Network& teacher, const Dataset& train,
                                   const Dataset* eval, const TrainConfig& config, const EpochCallback& on_epoch) {
  config.validate();
  std::vector<EpochMetrics> history;
  if (config.finetune_epochs == 0) return history;
  Network& net = model.network;
  AdaMax optimizer;
  optimizer.add(net.parameters(), true);
  const double lr = config.lr / 100.0;
  const auto kd_weight = static_cast<float>(config.weights.kd);
  const double ratio = static_cast<double>(count_flops(net)) / static_cast<double>(count_flops(teacher));
  std::vector<int> labels;
  Rng aug_storage;
  for (int k = 1; k <= config.finetune_epochs; ++k) {
    const int e = config.pruning_epochs() + k;
    EpochMetrics m;
    m.epoch = e;
    m.lr = lr;
    m.flops_ratio = ratio;
    Rng* aug = augment_rng(config, e, aug_storage);
    double ce_sum = 0, kd_sum = 0;
    std::size_t hits = 0, seen = 0, b = 0;
    for (const auto& idx : epoch_batches(train, config, e)) {
      const Tensor<float> x = make_batch(train, idx, &labels, aug, config.augment);
      Tape<float> tape;
      const ForwardTrace trace = forward(net, tape, x, {}, Mode::kTrain);
      Var<float> ce = ce_loss(trace.logits, std::span<const int>(labels));
      Var<float> loss = ce;
      double kd_value = 0.0;
      if (kd_weight > 0) {
        Tape<float> teacher_tape;
        const Tensor<float>& teacher_logits = forward_frozen(teacher, teacher_tape, x).logits.value();
        Var<float> kd = kd_loss(teacher_logits, trace.logits, static_cast<float>(config.weights.kd_temperature));
        kd_value = kd.item();
        loss = add(ce, scale(kd, kd_weight));
      }
      require_finite(loss.item(), "fine-tune loss", e, b++);
      optimizer.zero_grad();
      tape.backward(loss);
      optimizer.step(lr, config.weight_decay);
      ce_sum += ce.item() * static_cast<double>(idx.size());
      kd_sum += kd_value * static_cast<double>(idx.size());
      hits += correct_predictions(trace.logits.value(), labels);
      seen += idx.size();
    }
    m.ce = ce_sum / static_cast<double>(seen);
    m.kd = kd_sum / static_cast<double>(seen);
    m.train_acc = static_cast<double>(hits) / static_cast<double>(seen);
    m.eval_acc = eval ? evaluate(net, *eval) : kNaN;
    history.push_back(m);
    if (on_epoch) on_epoch(m);
  }
  return history;
}

}  // namespace kdfs
