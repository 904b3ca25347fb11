// Copyright 2026 The KDFS Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef KDFS_GRADCHECK_HPP
#define KDFS_GRADCHECK_HPP

#include <functional>

#include "kdfs/tape.hpp"
#include "kdfs/tensor.hpp"

namespace kdfs {

/// Scalar-valued function of one tape-bound input.
using ScalarFn = std::function<Var<double>(Tape<double>&, const Var<double>&)>;

/// Compares the tape gradient of `f` at `x` against central differences.
///
/// Returns max_i |analytic_i - numeric_i| / max(|analytic_i|, |numeric_i|, 1e-8).
/// `f` is re-evaluated on a fresh tape for every perturbation, so it must be
/// deterministic.
double finite_diff_check(const ScalarFn& f, const Tensor<double>& x, double eps = 1e-4);

}  // namespace kdfs

#endif  // KDFS_GRADCHECK_HPP
