// Copyright 2026 The DuMeta Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "dumeta/tensor.hpp"

#include <cstring>
#include <sstream>

#include "dumeta/tape.hpp"

namespace dumeta::tc {

namespace {
thread_local bool g_checked = false;
}

void set_checked_mode(bool enabled) { g_checked = enabled; }
bool checked_mode() { return g_checked; }

int64_t numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t e : shape) n *= e;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor() : data_(std::make_shared<const std::vector<double>>(1, 0.0)) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)) {
  for (int64_t e : shape_) {
    if (e <= 0) throw ShapeError("tensor extents must be positive, got " + to_string(shape_));
  }
  if (tc::numel(shape_) != static_cast<int64_t>(data.size())) {
    throw ShapeError("shape " + to_string(shape_) + " does not match " + std::to_string(data.size()) + " values");
  }
  data_ = std::make_shared<const std::vector<double>>(std::move(data));
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }
Tensor Tensor::ones(Shape shape) { return full(std::move(shape), 1.0); }

Tensor Tensor::full(Shape shape, double value) {
  auto n = static_cast<std::size_t>(tc::numel(shape));
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor({}, {value}); }

int64_t Tensor::extent(int64_t axis) const {
  if (axis < 0 || axis >= rank()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + to_string(shape_));
  return shape_[static_cast<std::size_t>(axis)];
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape_));
  return (*data_)[0];
}

Tensor Tensor::detach() const {
  Tensor t;
  t.shape_ = shape_;
  t.data_ = data_;
  return t;
}

Tensor Tensor::reshaped(Shape shape) const {
  if (tc::numel(shape) != numel()) throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_ = data_;
  return t;
}

bool Tensor::same_values(const Tensor& other) const {
  if (shape_ != other.shape_) return false;
  if (data_ == other.data_) return true;
  return std::memcmp(data_->data(), other.data_->data(), data_->size() * sizeof(double)) == 0;
}

}  // namespace dumeta::tc
