// Copyright 2026 The KDFS Authors
// SPDX-License-Identifier: Apache-2.0

#include "kdfs/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace kdfs {
namespace {

double evaluate(const ScalarFn& f, const Tensor<double>& x) {
  Tape<double> tape;
  Tensor<double> copy(x.shape, x.data);
  return f(tape, tape.constant_ref(copy)).item();
}

}  // namespace

double finite_diff_check(const ScalarFn& f, const Tensor<double>& x, double eps) {
  if (eps <= 0) throw ContractError("finite_diff_check: eps must be positive");

  Tensor<double> bound(x.shape, x.data);
  std::vector<double> analytic(x.numel(), 0.0);
  {
    Tape<double> tape;
    Var<double> loss = f(tape, tape.param(bound));
    if (loss.numel() != 1) throw ContractError("finite_diff_check: f must be scalar-valued");
    // A constant f never touches the parameter, so its gradient is zero.
    if (loss.requires_grad()) {
      tape.backward(loss);
      if (bound.has_grad()) analytic = bound.grad;
    }
  }

  double worst = 0.0;
  Tensor<double> probe(x.shape, x.data);
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + eps;
    const double up = evaluate(f, probe);
    probe[i] = orig - eps;
    const double down = evaluate(f, probe);
    probe[i] = orig;
    const double numeric = (up - down) / (2.0 * eps);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

}  // namespace kdfs
