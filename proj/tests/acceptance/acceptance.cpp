// Copyright 2026 The KDFS Authors
// SPDX-License-Identifier: Apache-2.0
//
// Acceptance runner. `kdfs_acceptance 3` runs one criterion, `all` runs every
// one in order. Each prints a single PASS/FAIL line; the exit code is nonzero
// when any selected criterion fails.

#include <spdlog/spdlog.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fixtures.hpp"
#include "kdfs/config.hpp"
#include "kdfs/gradcheck.hpp"
#include "kdfs/mfm.hpp"
#include "kdfs/objective.hpp"
#include "kdfs/pruner.hpp"
#include "kdfs/sampler.hpp"
#include "kdfs/trainer.hpp"
#include "oracles.hpp"
#include "random_tensors.hpp"

namespace fs = std::filesystem;
using namespace kdfs;
using fixture::random_tensor;
using fixture::weighted_sum;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Context {
  fs::path desk_config;
  fs::path cache;
};

std::string format(const char* fmt, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, fmt, args...);
  return buf;
}

// ---------------------------------------------------------------- criterion 1

struct GradCase {
  std::string name;
  std::function<std::pair<ScalarFn, Tensor<double>>(Rng&, std::uint64_t)> make;
};

std::vector<int> random_labels(Rng& rng, std::size_t n, std::size_t classes) {
  std::vector<int> labels(n);
  for (int& l : labels) l = static_cast<int>(rng.below(classes));
  return labels;
}

Tensor<double> uniform_tensor(Shape shape, Rng& rng, double lo, double hi) {
  Tensor<double> t(std::move(shape));
  for (double& v : t.data) v = lo + (hi - lo) * rng.uniform();
  return t;
}

// Splits a flat input into one Var per prunable layer of `model`.
std::vector<Var<double>> split_masks(const Var<double>& flat, const FlopsModel& model) {
  std::vector<Var<double>> out;
  const std::size_t total = flat.value().numel();
  const Var<double> image = reshape(flat, Shape{1, total, 1, 1});
  int offset = 0;
  for (std::size_t w : model.slot_widths) {
    std::vector<int> idx(w);
    std::iota(idx.begin(), idx.end(), offset);
    offset += static_cast<int>(w);
    out.push_back(reshape(channel_gather(image, std::span<const int>(idx)), Shape{w}));
  }
  return out;
}

std::vector<GradCase> gradient_cases() {
  using P = std::pair<ScalarFn, Tensor<double>>;
  std::vector<GradCase> cases;
  auto unary = [&](std::string name, auto op) {
    cases.push_back({std::move(name), [op](Rng& rng, std::uint64_t s) -> P {
                       const std::size_t n = 2 + rng.below(3), c = 2 + rng.below(4);
                       return {[op, s](Tape<double>&, const Var<double>& v) { return weighted_sum(op(v), s); },
                               random_tensor({n, c}, rng)};
                     }});
  };
  auto binary = [&](std::string name, auto op) {
    cases.push_back({std::move(name), [op](Rng& rng, std::uint64_t s) -> P {
                       const std::size_t n = 2 + rng.below(3), c = 2 + rng.below(4);
                       Tensor<double> other = random_tensor({n, c}, rng);
                       return {[op, s, other](Tape<double>& t, const Var<double>& v) {
                                 return weighted_sum(op(v, t.constant(other)), s);
                               },
                               random_tensor({n, c}, rng)};
                     }});
  };
  auto image = [&](std::string name, auto op) {
    cases.push_back({std::move(name), [op](Rng& rng, std::uint64_t s) -> P {
                       const std::size_t n = 1 + rng.below(2), c = 1 + rng.below(3), h = 4 + rng.below(3);
                       return {[op, s, c](Tape<double>& t, const Var<double>& v) { return weighted_sum(op(t, v, c), s); },
                               random_tensor({n, c, h, h}, rng)};
                     }});
  };

  binary("add", [](auto a, auto b) { return add(a, b); });
  binary("sub", [](auto a, auto b) { return sub(b, a); });
  binary("mul", [](auto a, auto b) { return mul(a, b); });
  unary("scale", [](auto a) { return scale(a, -1.7); });
  unary("add_scalar", [](auto a) { return mul(add_scalar(a, 0.5), a); });
  unary("relu", [](auto a) { return relu(a); });
  unary("abs", [](auto a) { return abs(a); });
  unary("sum", [](auto a) { return sum(mul(a, a)); });
  unary("mean", [](auto a) { return mean(mul(a, a)); });
  unary("frobenius_norm", [](auto a) { return frobenius_norm(a); });
  unary("reshape", [](auto a) { return reshape(a, Shape{a.value().numel()}); });
  unary("softmax", [](auto a) { return softmax(a); });
  unary("log_softmax", [](auto a) { return log_softmax(a); });

  cases.push_back({"matmul", [](Rng& rng, std::uint64_t s) -> P {
                     const std::size_t n = 2 + rng.below(3), k = 2 + rng.below(3), m = 2 + rng.below(3);
                     Tensor<double> a = random_tensor({n, k}, rng), b = random_tensor({k, m}, rng);
                     const bool left = s % 2 == 0;
                     if (left) {
                       return {[b, s](Tape<double>& t, const Var<double>& v) {
                                 return weighted_sum(matmul(v, t.constant(b)), s);
                               },
                               a};
                     }
                     return {[a, s](Tape<double>& t, const Var<double>& v) {
                               return weighted_sum(matmul(t.constant(a), v), s);
                             },
                             b};
                   }});
  cases.push_back({"linear", [](Rng& rng, std::uint64_t s) -> P {
                     const std::size_t n = 2 + rng.below(3), in = 2 + rng.below(4), out = 2 + rng.below(3);
                     Tensor<double> x = random_tensor({n, in}, rng), w = random_tensor({out, in}, rng),
                                    b = random_tensor({out}, rng);
                     // Differentiate with respect to all three operands packed into one input.
                     Tensor<double> packed({x.numel() + w.numel() + b.numel()});
                     std::copy(x.data.begin(), x.data.end(), packed.data.begin());
                     std::copy(w.data.begin(), w.data.end(), packed.data.begin() + x.numel());
                     std::copy(b.data.begin(), b.data.end(), packed.data.begin() + x.numel() + w.numel());
                     return {[=](Tape<double>&, const Var<double>& v) {
                               const Var<double> img = reshape(v, Shape{1, v.value().numel(), 1, 1});
                               auto slice = [&](std::size_t from, std::size_t count, Shape shape) {
                                 std::vector<int> idx(count);
                                 std::iota(idx.begin(), idx.end(), static_cast<int>(from));
                                 return reshape(channel_gather(img, std::span<const int>(idx)), std::move(shape));
                               };
                               const Var<double> xv = slice(0, x.numel(), x.shape);
                               const Var<double> wv = slice(x.numel(), w.numel(), w.shape);
                               const Var<double> bv = slice(x.numel() + w.numel(), b.numel(), b.shape);
                               return weighted_sum(linear(xv, wv, bv), s);
                             },
                             packed};
                   }});
  image("conv2d input stride 1", [](Tape<double>&, const Var<double>& v, std::size_t c) {
    Rng rng(c * 31 + 7);
    return conv2d(v, v.tape().constant(random_tensor({3, c, 3, 3}, rng)), 1, 1);
  });
  image("conv2d input stride 2", [](Tape<double>&, const Var<double>& v, std::size_t c) {
    Rng rng(c * 31 + 8);
    return conv2d(v, v.tape().constant(random_tensor({2, c, 3, 3}, rng)), 2, 1);
  });
  cases.push_back({"conv2d weight", [](Rng& rng, std::uint64_t s) -> P {
                     const std::size_t c = 1 + rng.below(3), o = 1 + rng.below(3), k = s % 2 ? 3 : 1;
                     Tensor<double> x = random_tensor({2, c, 5, 5}, rng);
                     return {[x, s, k](Tape<double>& t, const Var<double>& v) {
                               return weighted_sum(conv2d(t.constant(x), v, static_cast<int>(1 + s % 2),
                                                          static_cast<int>(k / 2)),
                                                   s);
                             },
                             random_tensor({o, c, k, k}, rng)};
                   }});
  image("bias_add", [](Tape<double>& t, const Var<double>& v, std::size_t c) {
    Rng rng(c);
    return bias_add(v, t.constant(random_tensor({c}, rng)));
  });
  image("max_pool2d", [](Tape<double>&, const Var<double>& v, std::size_t) { return max_pool2d(v, 2, 2); });
  image("global_avg_pool", [](Tape<double>&, const Var<double>& v, std::size_t) { return global_avg_pool(v); });
  image("batch_norm train", [](Tape<double>& t, const Var<double>& v, std::size_t c) {
    Rng rng(c + 100);
    return batch_norm(v, t.constant(uniform_tensor({c}, rng, 0.5, 1.5)), t.constant(random_tensor({c}, rng)),
                      RunningStats<double>{}, true);
  });
  cases.push_back({"batch_norm gamma and beta", [](Rng& rng, std::uint64_t s) -> P {
                     const std::size_t c = 1 + rng.below(3);
                     Tensor<double> x = random_tensor({3, c, 3, 3}, rng);
                     return {[x, s, c](Tape<double>&, const Var<double>& v) {
                               const Var<double> img = reshape(v, Shape{1, 2 * c, 1, 1});
                               std::vector<int> g(c), b(c);
                               std::iota(g.begin(), g.end(), 0);
                               std::iota(b.begin(), b.end(), static_cast<int>(c));
                               const Var<double> gamma = reshape(channel_gather(img, std::span<const int>(g)), Shape{c});
                               const Var<double> beta = reshape(channel_gather(img, std::span<const int>(b)), Shape{c});
                               return weighted_sum(
                                   batch_norm(v.tape().constant(x), gamma, beta, RunningStats<double>{}, true), s);
                             },
                             uniform_tensor({2 * c}, rng, 0.5, 1.5)};
                   }});
  cases.push_back({"batch_norm eval", [](Rng& rng, std::uint64_t s) -> P {
                     const std::size_t c = 1 + rng.below(3);
                     auto mean = std::make_shared<Tensor<double>>(random_tensor({c}, rng));
                     auto var = std::make_shared<Tensor<double>>(uniform_tensor({c}, rng, 0.5, 2.0));
                     Tensor<double> gamma = uniform_tensor({c}, rng, 0.5, 1.5), beta = random_tensor({c}, rng);
                     return {[=](Tape<double>& t, const Var<double>& v) {
                               return weighted_sum(batch_norm(v, t.constant(gamma), t.constant(beta),
                                                              RunningStats<double>{mean.get(), var.get(), 0.1}, false),
                                                   s);
                             },
                             random_tensor({2, c, 3, 3}, rng)};
                   }});
  image("channel_mask input", [](Tape<double>& t, const Var<double>& v, std::size_t c) {
    Rng rng(c + 300);
    return channel_mask(v, t.constant(uniform_tensor({c}, rng, 0.0, 1.0)));
  });
  cases.push_back({"channel_mask mask", [](Rng& rng, std::uint64_t s) -> P {
                     const std::size_t c = 2 + rng.below(3);
                     Tensor<double> x = random_tensor({2, c, 3, 3}, rng);
                     return {[x, s](Tape<double>& t, const Var<double>& v) {
                               return weighted_sum(channel_mask(t.constant(x), v), s);
                             },
                             uniform_tensor({c}, rng, 0.0, 1.0)};
                   }});
  image("zero_pad_scatter", [](Tape<double>&, const Var<double>& v, std::size_t c) {
    std::vector<int> kept(c);
    for (std::size_t i = 0; i < c; ++i) kept[i] = static_cast<int>(2 * i);
    return zero_pad_scatter(v, std::span<const int>(kept), 2 * c + 1);
  });
  image("channel_gather", [](Tape<double>&, const Var<double>& v, std::size_t c) {
    std::vector<int> kept;
    for (std::size_t i = 0; i < c; i += 2) kept.push_back(static_cast<int>(i));
    return channel_gather(v, std::span<const int>(kept));
  });
  cases.push_back({"gumbel_softmax", [](Rng& rng, std::uint64_t s) -> P {
                     const std::size_t rows = 2 + rng.below(5);
                     Tensor<double> noise = gumbel_noise<double>(rng, rows);
                     const double tau = 0.2 + 0.8 * rng.uniform();
                     return {[noise, tau, s](Tape<double>&, const Var<double>& v) {
                               return weighted_sum(gumbel_softmax(v, noise, tau), s);
                             },
                             random_tensor({rows, 2}, rng)};
                   }});

  // Loss terms.
  cases.push_back({"cross-entropy", [](Rng& rng, std::uint64_t) -> P {
                     const std::size_t n = 2 + rng.below(4), k = 2 + rng.below(8);
                     const std::vector<int> labels = random_labels(rng, n, k);
                     return {[labels](Tape<double>&, const Var<double>& v) {
                               return ce_loss(v, std::span<const int>(labels));
                             },
                             random_tensor({n, k}, rng, 2.0)};
                   }});
  cases.push_back({"distillation", [](Rng& rng, std::uint64_t) -> P {
                     const std::size_t n = 2 + rng.below(4), k = 2 + rng.below(8);
                     Tensor<double> teacher = random_tensor({n, k}, rng, 3.0);
                     const double temperature = 1.0 + 4.0 * rng.uniform();
                     return {[teacher, temperature](Tape<double>&, const Var<double>& v) {
                               return kd_loss(teacher, v, temperature);
                             },
                             random_tensor({n, k}, rng, 3.0)};
                   }});
  cases.push_back({"reconstruction", [](Rng& rng, std::uint64_t) -> P {
                     const std::size_t n = 1 + rng.below(3), c = 1 + rng.below(4), h = 2 + rng.below(3);
                     Tensor<double> target = random_tensor({n, c, h, h}, rng);
                     return {[target](Tape<double>& t, const Var<double>& v) { return rl_loss(t.constant(target), v); },
                             random_tensor({n, c, h, h}, rng)};
                   }});
  auto flops_case = [&](std::string name, RegularizerKind kind) {
    cases.push_back({std::move(name), [kind](Rng& rng, std::uint64_t) -> P {
                       const ResNetConfig arch = fixture::random_arch(rng);
                       Rng build(rng.below(1000));
                       const FlopsModel model = build_flops_model(build_resnet(arch, build));
                       std::size_t total = 0;
                       for (std::size_t w : model.slot_widths) total += w;
                       const double rate = 0.2 + 0.6 * rng.uniform();
                       return {[model, rate, kind](Tape<double>&, const Var<double>& v) {
                                 const auto masks = split_masks(v, model);
                                 const Var<double> f = flops_of<double>(model, std::span<const Var<double>>(masks));
                                 return flops_regularizer(f, static_cast<double>(model.teacher_flops()), rate, kind);
                               },
                               uniform_tensor({total}, rng, 0.05, 0.95)};
                     }});
  };
  flops_case("FLOPs regularizer", RegularizerKind::kAbsolute);
  flops_case("FLOPs regularizer squared", RegularizerKind::kSquared);
  cases.push_back({"total objective", [](Rng& rng, std::uint64_t) -> P {
                     const std::size_t n = 2 + rng.below(3), k = 2 + rng.below(5);
                     const std::vector<int> labels = random_labels(rng, n, k);
                     Tensor<double> teacher = random_tensor({n, k}, rng, 2.0);
                     Tensor<double> target = random_tensor({n, k, 1, 1}, rng);
                     LossWeights w;
                     w.kd = rng.uniform();
                     w.rl = rng.uniform();
                     w.flops = rng.uniform();
                     return {[=](Tape<double>& t, const Var<double>& v) {
                               const Var<double> ce = ce_loss(v, std::span<const int>(labels));
                               const Var<double> kd = kd_loss(teacher, v, 3.0);
                               const std::vector<Var<double>> rl{
                                   rl_loss(t.constant(target), reshape(v, Shape{n, k, 1, 1})),
                                   rl_loss(t.constant(target), reshape(scale(v, 0.5), Shape{n, k, 1, 1}))};
                               const Var<double> reg =
                                   flops_regularizer(add_scalar(scale(mean(mul(v, v)), 1.0), 1.0), 4.0, 0.5);
                               return total_loss(ce, kd, std::span<const Var<double>>(rl), reg, w);
                             },
                             random_tensor({n, k}, rng)};
                   }});
  return cases;
}

Outcome gradients(const Context&) {
  Rng rng(0x9ad);
  double worst = 0.0;
  std::string worst_name, failed;
  std::size_t checks = 0;
  for (const GradCase& c : gradient_cases()) {
    for (std::uint64_t i = 0; i < 10; ++i) {
      const auto [f, x] = c.make(rng, i);
      const double err = finite_diff_check(f, x, 1e-5);
      ++checks;
      if (err > worst) {
        worst = err;
        worst_name = c.name;
      }
      if (!(err < 1e-3) && failed.find(c.name) == std::string::npos) failed += " " + c.name;
    }
  }
  const std::size_t kinds = checks / 10;
  if (!failed.empty()) return {false, format("%zu checks; failing:%s", checks, failed.c_str())};
  return {true, format("%zu functions x 10 instances, worst relative error %.2e (%s)", kinds, worst,
                       worst_name.c_str())};
}

// ---------------------------------------------------------------- criterion 2

Outcome equivalence(const Context&) {
  double worst = 0.0;
  std::size_t logits = 0;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const auto e = fixture::masked_vs_pruned(0xe9u * 1000 + seed);
    worst = std::max(worst, e.max_abs);
    logits += e.logits;
  }
  return {worst < 1e-4, format("200 pairs, %zu logits, max |masked - pruned| = %.3e", logits, worst)};
}

// ---------------------------------------------------------------- criterion 3

Outcome flops_oracle(const Context&) {
  struct Arch {
    const char* name;
    std::vector<int> widths, blocks;
    int channels, size, classes;
  };
  const std::vector<Arch> archs{
      {"toy 4/8", {4, 8}, {1, 1}, 1, 8, 4},
      {"toy 8/16/32", {8, 16, 32}, {1, 1, 1}, 1, 16, 10},
      {"desk 16/32/64", {16, 32, 64}, {1, 1, 1}, 1, 28, 10},
      {"ResNet-20", {16, 32, 64}, {3, 3, 3}, 3, 32, 10},
      {"ResNet-56", {16, 32, 64}, {9, 9, 9}, 3, 32, 10},
  };
  bool pass = true;
  std::string detail;
  std::int64_t resnet56 = 0;
  for (const Arch& a : archs) {
    ResNetConfig rc;
    rc.widths = a.widths;
    rc.blocks = a.blocks;
    rc.in_channels = a.channels;
    rc.in_height = rc.in_width = a.size;
    rc.classes = a.classes;
    Rng rng(1);
    const FlopsModel model = build_flops_model(build_resnet(rc, rng));
    const std::int64_t ours = flops_of(model);
    const std::int64_t oracle = oracle::resnet_flops(a.widths, a.blocks, a.channels, a.size, a.size, a.classes);
    pass &= ours == oracle;
    if (ours != oracle) detail += format("%s: %lld vs oracle %lld; ", a.name, (long long)ours, (long long)oracle);
    if (std::string(a.name) == "ResNet-56") resnet56 = ours;
  }
  // Published baseline: 0.12G, two digits. The other common count treats the
  // two stride-2 shortcuts as parameter-free zero padding.
  const std::int64_t projections = 16LL * 32 * 16 * 16 + 32LL * 64 * 8 * 8;
  const std::int64_t zero_pad = resnet56 - projections;
  const double spread = std::abs(double(resnet56) - double(zero_pad)) / double(zero_pad);
  const bool published = std::floor(double(resnet56) / 1e7) == 12 && std::floor(double(zero_pad) / 1e7) == 12;
  pass &= spread < 0.02 && published;
  detail += format("5 architectures integer-exact: %s; ResNet-56 %lld (%.4gG), zero-padding shortcut count %lld, "
                   "spread %.2f%%",
                   pass ? "yes" : "no", (long long)resnet56, resnet56 / 1e9, (long long)zero_pad, 100 * spread);
  return {pass, detail};
}

// ---------------------------------------------------------------- criterion 4

Outcome sampler_statistics(const Context&) {
  Rng rng(0x5a);
  double worst = 0.0;
  for (int row = 0; row < 50; ++row) {
    Tensor<double> logits({1, 2});
    logits[0] = 1.5 * rng.normal();
    logits[1] = 1.5 * rng.normal();
    const double p1 = 1.0 / (1.0 + std::exp(logits[0] - logits[1]));
    std::size_t kept = 0;
    const int draws = 100'000;
    for (int d = 0; d < draws; ++d) {
      const Tensor<double> noise = gumbel_noise<double>(rng, 1);
      Tape<double> tape;
      const Var<double> probs = gumbel_softmax(tape.constant_ref(logits), noise, 1.0);
      kept += hard_mask(probs.value())[0];
    }
    worst = std::max(worst, std::abs(double(kept) / draws - p1));
  }

  bool endpoints = true;
  for (auto kind : {TemperatureSchedule::Kind::kLinear, TemperatureSchedule::Kind::kExponential}) {
    const TemperatureSchedule s{kind, 1.0, 0.1, 300};
    endpoints &= temperature_at(s, 0) == 1.0 && temperature_at(s, 300) == 0.1;
  }

  // Straight-through: the upstream gradient of each mask entry lands unchanged
  // on the keep column of the relaxed probabilities.
  bool identity = true;
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t rows = 3 + rng.below(6);
    Tensor<double> logits = random_tensor({rows, 2}, rng);
    Tape<double> tape;
    const Var<double> probs = gumbel_softmax(tape.param(logits), gumbel_noise<double>(rng, rows), 0.5);
    const Var<double> mask = straight_through_mask(probs);
    const Tensor<double> upstream = random_tensor({rows}, rng);
    tape.backward(sum(mul(mask, tape.constant(upstream))));
    const Mask hard = hard_mask(probs.value());
    const std::vector<double>* g = probs.grad();
    identity &= g != nullptr;
    for (std::size_t i = 0; g && i < rows; ++i) {
      identity &= mask.value()[i] == static_cast<double>(hard[i]);
      identity &= (*g)[2 * i + 1] == upstream[i];
      identity &= (*g)[2 * i] == 0.0;
    }
  }
  return {worst <= 0.01 && endpoints && identity,
          format("50 rows x 100000 draws, max |freq - softmax| = %.4f; endpoints %s; straight-through identity %s",
                 worst, endpoints ? "exact" : "WRONG", identity ? "holds" : "BROKEN")};
}

// ---------------------------------------------------------------- criterion 5

Network cached_teacher(const fs::path& path, const std::function<Network()>& train) {
  if (fs::exists(path)) return load_model(path.string()).network;
  Network net = train();
  std::vector<Mask> full;
  for (const ConvBlock* conv : net.prunable()) full.emplace_back(conv->out_channels(), 1);
  fs::create_directories(path.parent_path());
  save_model(path.string(), extract(net, full));
  return net;
}

Outcome budget_steering(const Context& ctx) {
  SyntheticSpec spec;
  spec.seed = 1;
  Dataset train = synthetic(spec);
  compute_normalization(train);
  ResNetConfig rc;
  rc.widths = {8, 16, 32};
  rc.blocks = {1, 1, 1};
  rc.in_channels = 1;
  rc.in_height = rc.in_width = static_cast<int>(spec.size);
  rc.classes = static_cast<int>(spec.classes);
  TrainConfig base;
  base.epochs = 60;
  base.finetune_epochs = 0;
  base.batch_size = 16;
  base.sampler_lr_scale = 5;
  base.seed = 1;

  const Network teacher = cached_teacher(ctx.cache / "budget_teacher.kdfs", [&] {
    Rng rng(1);
    Network net = build_resnet(rc, rng);
    TrainConfig t = base;
    t.epochs = 15;
    t.batch_size = 64;
    train_teacher(net, train, nullptr, t);
    return net;
  });

  bool pass = true;
  std::string detail;
  for (double r : {0.3, 0.5, 0.7}) {
    const auto start = std::chrono::steady_clock::now();
    TrainConfig c = base;
    c.weights.rate = r;
    KdfsTrainer trainer(teacher, train, nullptr, c);
    trainer.run();
    const double ratio = double(flops_of(trainer.flops_model(), trainer.final_masks())) /
                         double(trainer.flops_model().teacher_flops());
    const double reduction = 100.0 * (1.0 - ratio);
    const double minutes = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count() / 60;
    const bool ok = std::abs(reduction - 100 * r) <= 7.0 && minutes < 15.0;
    pass &= ok;
    detail += format("%sr=%.1f: %.2f%% (%.1f min)", detail.empty() ? "" : "; ", r, reduction, minutes);
  }
  return {pass, detail};
}

// ------------------------------------------------------------ criteria 6 and 7

struct DeskResult {
  double teacher_acc = 0.0;
  double pruned_acc = 0.0;
  double flops_reduction = 0.0;
  double minutes = 0.0;
};

RunConfig desk_config(const Context& ctx) { return load_config(ctx.desk_config.string()); }

fs::path desk_teacher_path(const Context& ctx, const RunConfig& config) {
  RunConfig key = config;
  key.train = TrainConfig{};
  key.train.seed = config.train.seed;
  return ctx.cache / ("desk_teacher_" + config_hash(key) + ".kdfs");
}

// Runs the full pipeline (teacher, pruning, extraction, fine-tuning, export)
// with the desk configuration, caching the teacher and the final numbers.
DeskResult desk_run(const Context& ctx, std::uint64_t seed, bool ablation) {
  const RunConfig base = desk_config(ctx);
  RunConfig config = base;
  config.train.seed = seed;
  if (ablation) {
    config.train.weights.kd = 0.0;
    config.train.weights.rl = 0.0;
  }
  const fs::path result_path = ctx.cache / ("desk_result_" + config_hash(config) + ".txt");
  DeskResult r;
  if (std::ifstream in(result_path); in && in >> r.teacher_acc >> r.pruned_acc >> r.flops_reduction >> r.minutes) {
    return r;
  }

  const auto start = std::chrono::steady_clock::now();
  const Splits data = load_splits(config.data);
  const Network teacher = cached_teacher(desk_teacher_path(ctx, base), [&] {
    Rng rng(mix_seed(base.train.seed, 0x7eac));
    Network net = build_resnet(network_config(base, data.train), rng);
    train_teacher(net, data.train, &data.test, teacher_train_config(base), [](const EpochMetrics& m) {
      spdlog::info("teacher epoch {} ce {:.4f} eval {:.4f}", m.epoch, m.ce, m.eval_acc);
    });
    return net;
  });
  r.teacher_acc = evaluate(teacher, data.test);

  KdfsTrainer trainer(teacher, data.train, &data.test, config.train, config_hash(config));
  trainer.run([](const EpochMetrics& m) {
    spdlog::info("prune epoch {} tau {:.3f} ce {:.4f} flops {:.3f} eval {:.4f}", m.epoch, m.tau, m.ce,
                 m.flops_ratio, m.eval_acc);
  });
  PrunedModel model = extract(trainer.student(), trainer.final_masks(), {config_hash(config), ""});
  finetune(model, teacher, data.train, &data.test, config.train, [](const EpochMetrics& m) {
    spdlog::info("finetune epoch {} ce {:.4f} eval {:.4f}", m.epoch, m.ce, m.eval_acc);
  });
  const PrunedModel exported = deserialize(serialize(model));
  r.pruned_acc = evaluate(exported.network, data.test);
  r.flops_reduction = reduction_percent(count_flops(exported.network), count_flops(teacher));
  r.minutes = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count() / 60;
  fs::create_directories(ctx.cache);
  std::ofstream(result_path) << r.teacher_acc << ' ' << r.pruned_acc << ' ' << r.flops_reduction << ' ' << r.minutes
                             << '\n';
  return r;
}

Outcome desk_experiment(const Context& ctx) {
  const RunConfig config = desk_config(ctx);
  const auto start = std::chrono::steady_clock::now();
  const DeskResult r = desk_run(ctx, config.train.seed, false);
  const double minutes = std::max(
      r.minutes, std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count() / 60);
  const double gap = 100.0 * (r.teacher_acc - r.pruned_acc);
  const bool pass = r.teacher_acc >= 0.97 && r.flops_reduction >= 45.0 && gap <= 2.0 && minutes <= 45.0;
  return {pass, format("teacher %.2f%%, %s %.2f%% at %.2f%% FLOPs reduction (gap %.2f points), %.1f min",
                       100 * r.teacher_acc, config.run_name().c_str(), 100 * r.pruned_acc, r.flops_reduction, gap,
                       minutes)};
}

Outcome ablation(const Context& ctx) {
  const std::uint64_t base_seed = desk_config(ctx).train.seed;
  double full = 0.0, none = 0.0;
  std::string detail;
  for (std::uint64_t i = 0; i < 3; ++i) {
    const DeskResult a = desk_run(ctx, base_seed + i, false);
    const DeskResult b = desk_run(ctx, base_seed + i, true);
    full += a.pruned_acc / 3;
    none += b.pruned_acc / 3;
    detail += format("seed %llu: %.2f%% vs %.2f%%; ", (unsigned long long)(base_seed + i), 100 * a.pruned_acc,
                     100 * b.pruned_acc);
  }
  detail += format("mean with KD+MFM %.2f%%, without %.2f%%", 100 * full, 100 * none);
  return {full >= none, detail};
}

// ---------------------------------------------------------------- criterion 8

struct TinyRun {
  std::vector<std::string> csv;
  std::vector<std::uint8_t> model;
};

TinyRun tiny_pipeline() {
  SyntheticSpec spec;
  spec.classes = 4;
  spec.per_class = 16;
  spec.size = 8;
  spec.seed = 3;
  Dataset train = synthetic(spec);
  compute_normalization(train);
  ResNetConfig rc;
  rc.widths = {4, 8};
  rc.blocks = {1, 1};
  rc.in_channels = 1;
  rc.in_height = rc.in_width = 8;
  rc.classes = 4;
  TrainConfig c;
  c.epochs = 6;
  c.finetune_epochs = 2;
  c.batch_size = 16;
  c.seed = 11;

  TinyRun run;
  auto record = [&](const EpochMetrics& m) { run.csv.push_back(metrics_row(m)); };
  Rng rng(mix_seed(c.seed, 0x7eac));
  Network teacher = build_resnet(rc, rng);
  TrainConfig tc = c;
  tc.epochs = 3;
  tc.finetune_epochs = 0;
  train_teacher(teacher, train, &train, tc, record);
  KdfsTrainer trainer(teacher, train, &train, c);
  trainer.run(record);
  PrunedModel model = extract(trainer.student(), trainer.final_masks());
  finetune(model, teacher, train, &train, c, record);
  run.model = serialize(model);
  return run;
}

Outcome persistence(const Context&) {
  const TinyRun a = tiny_pipeline(), b = tiny_pipeline();
  const bool same_csv = a.csv == b.csv && !a.csv.empty();
  const bool same_model = a.model == b.model;
  const bool round_trip = serialize(deserialize(a.model)) == a.model;

  std::size_t rejected = 0, tried = 0;
  for (std::size_t i = 0; i < a.model.size(); i += 3) {
    std::vector<std::uint8_t> bad = a.model;
    bad[i] ^= static_cast<std::uint8_t>(1u << (i % 8));
    ++tried;
    try {
      deserialize(bad);
    } catch (const Error&) {
      ++rejected;
    }
  }
  for (std::size_t keep : {std::size_t{0}, std::size_t{7}, a.model.size() / 2, a.model.size() - 1}) {
    ++tried;
    try {
      deserialize(std::span(a.model.data(), keep));
    } catch (const Error&) {
      ++rejected;
    }
  }
  const bool pass = same_csv && same_model && round_trip && rejected == tried;
  return {pass, format("%zu metrics rows identical: %s; model bytes identical: %s; round trip bit-exact: %s; "
                       "%zu/%zu corrupted files rejected",
                       a.csv.size(), same_csv ? "yes" : "no", same_model ? "yes" : "no", round_trip ? "yes" : "no",
                       rejected, tried)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"KDFS acceptance criteria"};
  std::vector<std::string> selected;
  Context ctx;
  std::string desk = "configs/mnist_desk.ini", cache = "acceptance_cache";
  app.add_option("criteria", selected, "criterion numbers 1-8 or 'all'")->required();
  app.add_option("--desk-config", desk, "configuration of the desk experiment (criteria 6 and 7)");
  app.add_option("--cache", cache, "directory for trained teachers and desk results");
  CLI11_PARSE(app, argc, argv);
  ctx.desk_config = desk;
  ctx.cache = cache;
  spdlog::set_level(spdlog::level::warn);

  const std::map<std::string, std::pair<const char*, Outcome (*)(const Context&)>> criteria{
      {"1", {"gradient correctness", gradients}},     {"2", {"masked vs pruned equivalence", equivalence}},
      {"3", {"FLOPs oracle", flops_oracle}},          {"4", {"sampler statistics", sampler_statistics}},
      {"5", {"budget steering", budget_steering}},    {"6", {"desk experiment", desk_experiment}},
      {"7", {"ablation direction", ablation}},        {"8", {"reproducibility and persistence", persistence}},
  };
  if (selected.size() == 1 && selected[0] == "all") {
    selected.clear();
    for (const auto& [id, c] : criteria) selected.push_back(id);
  }
  int failures = 0;
  for (const std::string& id : selected) {
    const auto it = criteria.find(id);
    if (it == criteria.end()) {
      std::fprintf(stderr, "unknown criterion '%s'\n", id.c_str());
      return 2;
    }
    Outcome o;
    try {
      o = it->second.second(ctx);
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("criterion %s (%s): %s  %s\n", id.c_str(), it->second.first, o.pass ? "PASS" : "FAIL",
                o.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
