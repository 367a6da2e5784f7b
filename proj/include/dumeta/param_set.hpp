// Copyright 2026 The DuMeta Lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "dumeta/tape.hpp"
#include "dumeta/tensor.hpp"

namespace dumeta::tc {

enum class ParamRole { Extractor, Head, HeadInit };

std::string_view to_string(ParamRole role);
ParamRole param_role_from_string(std::string_view text);

/// Ordered name -> tensor map. Names are unique, iteration follows insertion
/// order and shapes are fixed once an entry exists.
class ParamSet {
 public:
  explicit ParamSet(ParamRole role = ParamRole::Extractor) : role_(role) {}

  void add(std::string name, Tensor value);
  void set(const std::string& name, Tensor value);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const Tensor& at(const std::string& name) const;
  const Tensor& at(std::size_t i) const { return values_[i]; }

  std::size_t size() const { return names_.size(); }
  bool empty() const { return names_.empty(); }
  const std::vector<std::string>& names() const { return names_; }
  std::span<const Tensor> tensors() const { return values_; }
  int64_t total_numel() const;

  ParamRole role() const { return role_; }
  ParamSet with_role(ParamRole role) const;

  /// Copy whose tensors are fresh leaves on `tape`.
  ParamSet bind(Tape& tape) const;
  ParamSet detached() const;

  std::vector<double> flatten() const;
  ParamSet from_flat(std::span<const double> flat) const;

  bool bitwise_equal(const ParamSet& other) const;

 private:
  ParamRole role_;
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct Gradients {
  ParamSet values;                       // same names/shapes as the params
  std::vector<std::string> unreachable;  // names that received a zero gradient
};

/// d(loss)/d(params). With `create_graph` the returned tensors are tape nodes
/// that can be differentiated again. `loss` must hold a single element.
Gradients grad(const Tensor& loss, const ParamSet& params, bool create_graph);

/// Applies p <- p + factor * g entrywise on tape (used for unrolled steps).
ParamSet axpy(const ParamSet& params, double factor, const ParamSet& grads);

}  // namespace dumeta::tc
