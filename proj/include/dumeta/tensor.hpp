// Copyright 2026 The DuMeta Lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dumeta::tc {

using Shape = std::vector<int64_t>;

int64_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {
struct TapeImpl;
}

/// Dense row-major float64 array, optionally bound to a node of a Tape.
///
/// Storage is immutable and shared, so copies are cheap. A tensor with a node
/// belongs to exactly one tape; the tape is kept alive by its tensors.
class Tensor {
 public:
  Tensor();  // rank-0 zero
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape);
  static Tensor ones(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);

  const Shape& shape() const { return shape_; }
  int64_t rank() const { return static_cast<int64_t>(shape_.size()); }
  int64_t numel() const { return static_cast<int64_t>(data_->size()); }
  int64_t extent(int64_t axis) const;

  std::span<const double> data() const { return {data_->data(), data_->size()}; }
  double operator[](int64_t i) const { return (*data_)[static_cast<size_t>(i)]; }
  /// Value of a one-element tensor.
  double item() const;
  std::vector<double> to_vector() const { return *data_; }

  bool has_node() const { return node_ >= 0; }
  int node() const { return node_; }
  detail::TapeImpl* tape_impl() const { return tape_.get(); }

  /// Same values, no tape binding.
  Tensor detach() const;
  Tensor reshaped(Shape shape) const;  // tape-free reshape of the values

  bool same_values(const Tensor& other) const;

 private:
  friend struct detail::TapeImpl;
  friend class Tape;

  Shape shape_;
  std::shared_ptr<const std::vector<double>> data_;
  std::shared_ptr<detail::TapeImpl> tape_;
  int node_ = -1;
};

/// Checked mode validates every op result for NaN/Inf and rejects log/div
/// domain violations. Thread-local.
void set_checked_mode(bool enabled);
bool checked_mode();

class CheckedModeGuard {
 public:
  explicit CheckedModeGuard(bool enabled) : previous_(checked_mode()) { set_checked_mode(enabled); }
  ~CheckedModeGuard() { set_checked_mode(previous_); }
  CheckedModeGuard(const CheckedModeGuard&) = delete;
  CheckedModeGuard& operator=(const CheckedModeGuard&) = delete;

 private:
  bool previous_;
};

}  // namespace dumeta::tc
