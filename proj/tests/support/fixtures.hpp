// Copyright 2026 The KDFS Authors
// SPDX-License-Identifier: Apache-2.0
//
// Small random networks, masks and batches shared by unit and acceptance tests.

#ifndef KDFS_TESTS_FIXTURES_HPP
#define KDFS_TESTS_FIXTURES_HPP

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "kdfs/nn.hpp"
#include "kdfs/pruner.hpp"
#include "kdfs/random.hpp"

namespace fixture {

inline int pick(kdfs::Rng& rng, int lo, int hi) { return lo + static_cast<int>(rng.below(hi - lo + 1)); }

// 1 to 3 stages of width 2..8 with 1 or 2 blocks each, small inputs.
inline kdfs::ResNetConfig random_arch(kdfs::Rng& rng) {
  kdfs::ResNetConfig c;
  const int stages = pick(rng, 1, 3);
  c.widths.clear();
  c.blocks.clear();
  for (int s = 0; s < stages; ++s) {
    c.widths.push_back(pick(rng, 2, 8));
    c.blocks.push_back(pick(rng, 1, 2));
  }
  c.in_channels = pick(rng, 1, 3);
  c.in_height = pick(rng, 4, 9);
  c.in_width = pick(rng, 4, 9);
  c.classes = pick(rng, 2, 6);
  return c;
}

// Non-trivial batch-norm state so eval mode exercises every parameter.
inline void perturb_batch_norm(kdfs::Network& net, kdfs::Rng& rng) {
  for (auto& [name, t] : net.named_tensors()) {
    const auto ends = [&](const std::string& s) { return name.ends_with(s); };
    for (float& v : t->data) {
      if (ends("running_var")) v = static_cast<float>(0.5 + rng.uniform());
      else if (ends("running_mean") || ends("shift")) v = static_cast<float>(0.3 * rng.normal());
      else if (ends("scale")) v = static_cast<float>(0.5 + rng.uniform());
    }
  }
  for (float& v : net.fc_bias.data) v = static_cast<float>(0.1 * rng.normal());
}

// Binary masks with at least one kept filter per layer.
inline std::vector<kdfs::Mask> random_masks(const kdfs::Network& net, kdfs::Rng& rng, double keep = 0.6) {
  std::vector<kdfs::Mask> masks;
  for (const kdfs::ConvBlock* conv : net.prunable()) {
    kdfs::Mask m(conv->out_channels());
    for (auto& v : m) v = rng.uniform() < keep ? 1 : 0;
    if (kdfs::popcount(m) == 0) m[rng.below(m.size())] = 1;
    masks.push_back(std::move(m));
  }
  return masks;
}

inline kdfs::Tensor<float> random_batch(const kdfs::ResNetConfig& c, std::size_t n, kdfs::Rng& rng) {
  kdfs::Tensor<float> x({n, static_cast<std::size_t>(c.in_channels), static_cast<std::size_t>(c.in_height),
                         static_cast<std::size_t>(c.in_width)});
  for (float& v : x.data) v = static_cast<float>(rng.normal());
  return x;
}

struct Equivalence {
  double max_abs = 0.0;
  std::size_t logits = 0;
};

// Eval-mode logits of the masked network against its extracted counterpart.
inline Equivalence masked_vs_pruned(std::uint64_t seed) {
  kdfs::Rng rng(seed);
  const kdfs::ResNetConfig c = random_arch(rng);
  kdfs::Network net = kdfs::build_resnet(c, rng);
  perturb_batch_norm(net, rng);
  const auto masks = random_masks(net, rng);
  const kdfs::Tensor<float> x = random_batch(c, 3, rng);

  kdfs::Tape<float> t1;
  const auto masked = kdfs::forward_frozen(net, t1, x, kdfs::constant_masks(t1, masks));
  const kdfs::PrunedModel pruned = kdfs::extract(net, masks);
  kdfs::Tape<float> t2;
  const auto compact = kdfs::forward_frozen(pruned.network, t2, x);

  Equivalence e;
  const auto& a = masked.logits.value().data;
  const auto& b = compact.logits.value().data;
  e.logits = a.size();
  for (std::size_t i = 0; i < a.size(); ++i) {
    e.max_abs = std::max(e.max_abs, static_cast<double>(std::abs(a[i] - b[i])));
  }
  if (a.size() != b.size()) e.max_abs = INFINITY;
  return e;
}

}  // namespace fixture

#endif  // KDFS_TESTS_FIXTURES_HPP
