// Copyright 2026 The DuMeta Lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string_view>
#include <vector>

#include "dumeta/tensor.hpp"

namespace dumeta::tc {

/// Arguments handed to a node's backward rule. `inputs` and `output` are
/// re-bound to the tape, so a rule written in terms of tensor ops is itself
/// differentiable when the tape is recording.
struct BackwardContext {
  std::span<const Tensor> inputs;
  const Tensor& output;
  const Tensor& grad_output;
  std::span<const bool> needs;  // which input gradients are requested
};

/// Returns one entry per input; an empty (rank-0, node-less) placeholder is
/// fine for inputs whose `needs` flag is false.
using BackwardFn = std::function<std::vector<Tensor>(const BackwardContext&)>;

struct VjpOptions {
  bool create_graph = false;
  /// Nodes whose accumulated gradient is final: nothing flows past them.
  std::vector<Tensor> stop_at;
};

struct VjpResult {
  std::vector<Tensor> grads;     // aligned with `wrt`
  std::vector<bool> reachable;   // false => zero gradient, wrt not on a path
};

namespace detail {

struct Node {
  std::string_view op;
  std::vector<int> input_ids;      // -1 for constants
  std::vector<Tensor> inputs;      // detached values
  Tensor output;                   // detached value
  std::shared_ptr<const BackwardFn> backward;  // null for leaves
};

struct TapeImpl : std::enable_shared_from_this<TapeImpl> {
  std::vector<Node> nodes;
  bool recording = true;

  Tensor bind(const Tensor& value, int node);
  Tensor record(std::string_view op, Tensor output, std::span<const Tensor> inputs, BackwardFn backward);
};

}  // namespace detail

/// Append-only record of tensor operations supporting reverse-mode
/// differentiation whose own computation can be recorded (double backprop).
/// A tape is confined to one thread at a time.
class Tape {
 public:
  Tape();
  explicit Tape(std::shared_ptr<detail::TapeImpl> impl) : impl_(std::move(impl)) {}

  /// The tape a node-bound tensor lives on.
  static Tape owner_of(const Tensor& t);

  /// Registers `value` as a differentiable leaf.
  Tensor leaf(const Tensor& value);

  std::size_t size() const;
  bool recording() const;
  void set_recording(bool on);

  /// Vector-Jacobian product of `outputs` seeded with `seeds` (ones when
  /// empty) with respect to `wrt`.
  VjpResult vjp(std::span<const Tensor> outputs, std::span<const Tensor> seeds,
                std::span<const Tensor> wrt, const VjpOptions& options = {}) const;

  /// d(loss)/d(wrt) for a one-element `loss`.
  VjpResult grad(const Tensor& loss, std::span<const Tensor> wrt, bool create_graph = false) const;

  std::shared_ptr<detail::TapeImpl> impl() const { return impl_; }

 private:
  std::shared_ptr<detail::TapeImpl> impl_;
};

/// Suspends recording on a tape for its lifetime (evaluation passes).
class NoGradGuard {
 public:
  explicit NoGradGuard(Tape& tape) : tape_(tape), previous_(tape.recording()) { tape.set_recording(false); }
  ~NoGradGuard() { tape_.set_recording(previous_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape& tape_;
  bool previous_;
};

namespace detail {
/// Creates the result tensor of an op, recording a node when any input lives
/// on a recording tape. Throws ShapeError when inputs span two tapes.
Tensor make_result(std::string_view op, Shape shape, std::vector<double> data,
                   std::span<const Tensor> inputs, BackwardFn backward);
}  // namespace detail

}  // namespace dumeta::tc
