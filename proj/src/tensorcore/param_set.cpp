// Copyright 2026 The DuMeta Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "dumeta/param_set.hpp"

#include "dumeta/ops.hpp"

namespace dumeta::tc {

std::string_view to_string(ParamRole role) {
  switch (role) {
    case ParamRole::Extractor: return "extractor";
    case ParamRole::Head: return "head";
    case ParamRole::HeadInit: return "head_init";
  }
  return "extractor";
}

ParamRole param_role_from_string(std::string_view text) {
  if (text == "extractor") return ParamRole::Extractor;
  if (text == "head") return ParamRole::Head;
  if (text == "head_init") return ParamRole::HeadInit;
  throw std::invalid_argument("unknown parameter role '" + std::string(text) + "'");
}

void ParamSet::add(std::string name, Tensor value) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter name '" + name + "'");
  index_.emplace(name, names_.size());
  names_.push_back(std::move(name));
  values_.push_back(std::move(value));
}

void ParamSet::set(const std::string& name, Tensor value) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter named '" + name + "'");
  Tensor& slot = values_[it->second];
  if (slot.shape() != value.shape()) {
    throw ShapeError("parameter '" + name + "' has shape " + to_string(slot.shape()) + ", got " + to_string(value.shape()));
  }
  slot = std::move(value);
}

const Tensor& ParamSet::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter named '" + name + "'");
  return values_[it->second];
}

int64_t ParamSet::total_numel() const {
  int64_t n = 0;
  for (const Tensor& t : values_) n += t.numel();
  return n;
}

ParamSet ParamSet::with_role(ParamRole role) const {
  ParamSet out = *this;
  out.role_ = role;
  return out;
}

ParamSet ParamSet::bind(Tape& tape) const {
  ParamSet out(role_);
  for (std::size_t i = 0; i < names_.size(); ++i) out.add(names_[i], tape.leaf(values_[i]));
  return out;
}

ParamSet ParamSet::detached() const {
  ParamSet out(role_);
  for (std::size_t i = 0; i < names_.size(); ++i) out.add(names_[i], values_[i].detach());
  return out;
}

std::vector<double> ParamSet::flatten() const {
  std::vector<double> flat;
  flat.reserve(static_cast<std::size_t>(total_numel()));
  for (const Tensor& t : values_) flat.insert(flat.end(), t.data().begin(), t.data().end());
  return flat;
}

ParamSet ParamSet::from_flat(std::span<const double> flat) const {
  if (static_cast<int64_t>(flat.size()) != total_numel()) throw ShapeError("from_flat: size mismatch");
  ParamSet out(role_);
  std::size_t offset = 0;
  for (std::size_t i = 0; i < names_.size(); ++i) {
    const auto n = static_cast<std::size_t>(values_[i].numel());
    out.add(names_[i], Tensor(values_[i].shape(), std::vector<double>(flat.begin() + offset, flat.begin() + offset + n)));
    offset += n;
  }
  return out;
}

bool ParamSet::bitwise_equal(const ParamSet& other) const {
  if (names_ != other.names_) return false;
  for (std::size_t i = 0; i < values_.size(); ++i) {
    if (!values_[i].same_values(other.values_[i])) return false;
  }
  return true;
}

Gradients grad(const Tensor& loss, const ParamSet& params, bool create_graph) {
  if (loss.numel() != 1) throw ShapeError("grad: loss must be a scalar, got " + to_string(loss.shape()));
  Gradients out{ParamSet(params.role()), {}};
  if (!loss.has_node()) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      out.values.add(params.names()[i], Tensor::zeros(params.at(i).shape()));
      out.unreachable.push_back(params.names()[i]);
    }
    return out;
  }
  Tape tape = Tape::owner_of(loss);
  VjpResult r = tape.grad(loss, params.tensors(), create_graph);
  for (std::size_t i = 0; i < params.size(); ++i) {
    out.values.add(params.names()[i], r.grads[i]);
    if (!r.reachable[i]) out.unreachable.push_back(params.names()[i]);
  }
  return out;
}

ParamSet axpy(const ParamSet& params, double factor, const ParamSet& grads) {
  ParamSet out(params.role());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string& name = params.names()[i];
    out.add(name, factor == 0.0 ? params.at(i) : add(params.at(i), scale(grads.at(name), factor)));
  }
  return out;
}

}  // namespace dumeta::tc
