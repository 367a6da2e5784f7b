// Copyright 2026 The DuMeta Lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <string>
#include <vector>

#include "dumeta/param_set.hpp"

namespace dumeta::tc {

/// Receives parameters bound to a fresh tape (analytic pass) or detached
/// (finite-difference passes) and returns a one-element loss.
using ScalarFn = std::function<Tensor(const ParamSet&)>;

struct GradCheckOptions {
  double eps = 1e-5;
  /// Flat indices into ParamSet::flatten(); empty checks every entry.
  std::vector<int64_t> indices;
};

struct GradCheckEntry {
  std::string name;
  int64_t flat_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_err = 0.0;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  double mean_rel_err = 0.0;
  std::vector<GradCheckEntry> entries;
  std::vector<std::string> unreachable;
};

/// Relative error with denominator max(|a|, |b|, 1e-12).
double relative_error(double a, double b);

/// Central-difference gradient check. Throws NumericError on a non-finite f.
GradCheckReport check_grad(const ScalarFn& f, const ParamSet& params, const GradCheckOptions& options = {});

}  // namespace dumeta::tc
