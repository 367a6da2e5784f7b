// Copyright 2026 The DuMeta Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "dumeta/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace dumeta::tc {

double relative_error(double a, double b) {
  const double denom = std::max({std::abs(a), std::abs(b), 1e-12});
  return std::abs(a - b) / denom;
}

GradCheckReport check_grad(const ScalarFn& f, const ParamSet& params, const GradCheckOptions& options) {
  if (!(options.eps > 0.0)) throw std::invalid_argument("check_grad: eps must be positive");

  Tape tape;
  ParamSet bound = params.bind(tape);
  Tensor loss = f(bound);
  if (!std::isfinite(loss.item())) throw NumericError("check_grad: non-finite function value");
  Gradients analytic = grad(loss, bound, false);

  GradCheckReport report;
  report.unreachable = analytic.unreachable;
  const std::vector<double> base = params.flatten();
  const std::vector<double> flat_grad = analytic.values.flatten();

  // flat index -> owning parameter name
  std::vector<std::size_t> owner(base.size());
  {
    std::size_t offset = 0;
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto n = static_cast<std::size_t>(params.at(i).numel());
      std::fill(owner.begin() + offset, owner.begin() + offset + n, i);
      offset += n;
    }
  }

  std::vector<int64_t> indices = options.indices;
  if (indices.empty()) {
    indices.resize(base.size());
    for (std::size_t i = 0; i < base.size(); ++i) indices[i] = static_cast<int64_t>(i);
  }

  std::vector<double> probe = base;
  double total = 0.0;
  for (int64_t idx : indices) {
    if (idx < 0 || idx >= static_cast<int64_t>(base.size())) throw std::out_of_range("check_grad: index out of range");
    const auto u = static_cast<std::size_t>(idx);
    probe[u] = base[u] + options.eps;
    const double fp = f(params.from_flat(probe)).item();
    probe[u] = base[u] - options.eps;
    const double fm = f(params.from_flat(probe)).item();
    probe[u] = base[u];
    if (!std::isfinite(fp) || !std::isfinite(fm)) throw NumericError("check_grad: non-finite function value");
    GradCheckEntry e;
    e.name = params.names()[owner[u]];
    e.flat_index = idx;
    e.analytic = flat_grad[u];
    e.numeric = (fp - fm) / (2.0 * options.eps);
    e.rel_err = relative_error(e.analytic, e.numeric);
    report.max_rel_err = std::max(report.max_rel_err, e.rel_err);
    total += e.rel_err;
    report.entries.push_back(std::move(e));
  }
  if (!indices.empty()) report.mean_rel_err = total / static_cast<double>(indices.size());
  return report;
}

}  // namespace dumeta::tc
