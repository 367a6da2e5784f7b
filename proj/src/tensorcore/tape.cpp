// Copyright 2026 The DuMeta Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "dumeta/tape.hpp"

#include <cmath>
#include <optional>
#include <string>
#include <unordered_set>

#include "dumeta/ops.hpp"

namespace dumeta::tc {

namespace detail {

Tensor TapeImpl::bind(const Tensor& value, int node) {
  Tensor t = value.detach();
  t.tape_ = shared_from_this();
  t.node_ = node;
  return t;
}

Tensor TapeImpl::record(std::string_view op, Tensor output, std::span<const Tensor> inputs, BackwardFn backward) {
  Node node;
  node.op = op;
  node.input_ids.reserve(inputs.size());
  node.inputs.reserve(inputs.size());
  for (const Tensor& in : inputs) {
    node.input_ids.push_back(in.tape_impl() == this ? in.node() : -1);
    node.inputs.push_back(in.detach());
  }
  node.output = output.detach();
  if (backward) node.backward = std::make_shared<const BackwardFn>(std::move(backward));
  nodes.push_back(std::move(node));
  return bind(output, static_cast<int>(nodes.size() - 1));
}

Tensor make_result(std::string_view op, Shape shape, std::vector<double> data, std::span<const Tensor> inputs,
                   BackwardFn backward) {
  if (checked_mode()) {
    for (double v : data) {
      if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + std::string(op));
    }
  }
  Tensor out(std::move(shape), std::move(data));
  TapeImpl* tape = nullptr;
  for (const Tensor& in : inputs) {
    if (!in.has_node()) continue;
    if (tape == nullptr) {
      tape = in.tape_impl();
    } else if (tape != in.tape_impl()) {
      throw ShapeError(std::string(op) + ": inputs belong to different tapes");
    }
  }
  if (tape == nullptr || !tape->recording) return out;
  return tape->record(op, std::move(out), inputs, std::move(backward));
}

}  // namespace detail

Tape::Tape() : impl_(std::make_shared<detail::TapeImpl>()) {}

Tape Tape::owner_of(const Tensor& t) {
  if (!t.has_node()) throw ShapeError("tensor is not bound to a tape");
  return Tape(t.tape_impl()->shared_from_this());
}

Tensor Tape::leaf(const Tensor& value) { return impl_->record("leaf", value.detach(), {}, nullptr); }

std::size_t Tape::size() const { return impl_->nodes.size(); }
bool Tape::recording() const { return impl_->recording; }
void Tape::set_recording(bool on) { impl_->recording = on; }

namespace {

class RecordingScope {
 public:
  RecordingScope(detail::TapeImpl& tape, bool on) : tape_(tape), previous_(tape.recording) { tape.recording = on; }
  ~RecordingScope() { tape_.recording = previous_; }

 private:
  detail::TapeImpl& tape_;
  bool previous_;
};

}  // namespace

VjpResult Tape::vjp(std::span<const Tensor> outputs, std::span<const Tensor> seeds, std::span<const Tensor> wrt,
                    const VjpOptions& options) const {
  auto& impl = *impl_;
  if (!seeds.empty() && seeds.size() != outputs.size()) throw ShapeError("vjp: seed count differs from output count");

  int max_id = -1;
  for (const Tensor& out : outputs) {
    if (out.has_node() && out.tape_impl() == &impl) max_id = std::max(max_id, out.node());
  }

  VjpResult result;
  result.grads.reserve(wrt.size());
  result.reachable.assign(wrt.size(), false);

  std::unordered_set<int> stop;
  for (const Tensor& s : options.stop_at) {
    if (s.has_node() && s.tape_impl() == &impl) stop.insert(s.node());
  }
  std::unordered_set<int> targets;
  for (const Tensor& w : wrt) {
    if (w.has_node() && w.tape_impl() == &impl) targets.insert(w.node());
  }

  // needs[id]: some gradient target is reachable backwards from id.
  const auto count = static_cast<std::size_t>(max_id + 1);
  std::vector<char> needs(count, 0);
  for (std::size_t id = 0; id < count; ++id) {
    const int i = static_cast<int>(id);
    if (targets.count(i)) {
      needs[id] = 1;
      continue;
    }
    if (stop.count(i)) continue;
    for (int in : impl.nodes[id].input_ids) {
      if (in >= 0 && needs[static_cast<std::size_t>(in)]) {
        needs[id] = 1;
        break;
      }
    }
  }

  std::vector<std::optional<Tensor>> grads(count);
  RecordingScope scope(impl, options.create_graph);

  for (std::size_t k = 0; k < outputs.size(); ++k) {
    const Tensor& out = outputs[k];
    if (!out.has_node() || out.tape_impl() != &impl) continue;
    Tensor seed = seeds.empty() ? Tensor::ones(out.shape()) : seeds[k];
    if (seed.shape() != out.shape()) throw ShapeError("vjp: seed shape " + to_string(seed.shape()) + " vs output " + to_string(out.shape()));
    auto& slot = grads[static_cast<std::size_t>(out.node())];
    slot = slot ? add(*slot, seed) : seed;
  }

  for (int id = max_id; id >= 0; --id) {
    const auto uid = static_cast<std::size_t>(id);
    if (!grads[uid] || !needs[uid] || stop.count(id)) continue;
    // Copy what we need: recording may grow (and reallocate) the node list.
    std::shared_ptr<const BackwardFn> fn = impl.nodes[uid].backward;
    if (!fn) continue;
    const std::vector<int> input_ids = impl.nodes[uid].input_ids;
    std::vector<Tensor> inputs;
    inputs.reserve(input_ids.size());
    bool any = false;
    std::vector<char> need_flags(input_ids.size(), 0);
    for (std::size_t j = 0; j < input_ids.size(); ++j) {
      const int in = input_ids[j];
      const Tensor& value = impl.nodes[uid].inputs[j];
      inputs.push_back(in >= 0 ? impl.bind(value, in) : value);
      need_flags[j] = in >= 0 && needs[static_cast<std::size_t>(in)];
      any = any || need_flags[j];
    }
    if (!any) continue;
    const Tensor output = impl.bind(impl.nodes[uid].output, id);
    const Tensor grad_out = *grads[uid];
    std::unique_ptr<bool[]> need_bools(new bool[need_flags.size()]);
    for (std::size_t j = 0; j < need_flags.size(); ++j) need_bools[j] = need_flags[j] != 0;
    BackwardContext ctx{inputs, output, grad_out, std::span<const bool>(need_bools.get(), need_flags.size())};
    std::vector<Tensor> input_grads = (*fn)(ctx);
    for (std::size_t j = 0; j < input_ids.size(); ++j) {
      if (!need_flags[j]) continue;
      const Tensor& g = input_grads.at(j);
      if (g.shape() != inputs[j].shape()) {
        throw ShapeError(std::string(impl.nodes[uid].op) + " backward produced " + to_string(g.shape()) +
                         " for input " + to_string(inputs[j].shape()));
      }
      auto& slot = grads[static_cast<std::size_t>(input_ids[j])];
      slot = slot ? add(*slot, g) : g;
    }
  }

  for (std::size_t k = 0; k < wrt.size(); ++k) {
    const Tensor& w = wrt[k];
    const bool on_tape = w.has_node() && w.tape_impl() == &impl && w.node() <= max_id;
    if (on_tape && grads[static_cast<std::size_t>(w.node())]) {
      Tensor g = *grads[static_cast<std::size_t>(w.node())];
      result.grads.push_back(options.create_graph ? g : g.detach());
      result.reachable[k] = true;
    } else {
      result.grads.push_back(Tensor::zeros(w.shape()));
    }
  }
  return result;
}

VjpResult Tape::grad(const Tensor& loss, std::span<const Tensor> wrt, bool create_graph) const {
  if (loss.numel() != 1) throw ShapeError("grad: loss must hold one element, got " + to_string(loss.shape()));
  VjpOptions options;
  options.create_graph = create_graph;
  return vjp(std::span<const Tensor>(&loss, 1), {}, wrt, options);
}

}  // namespace dumeta::tc
