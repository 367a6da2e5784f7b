// Copyright 2026 The DuMeta Lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <span>
#include <vector>

#include "dumeta/tape.hpp"
#include "dumeta/tensor.hpp"

namespace dumeta::tc {

enum class Elementwise { Add, Sub, Mul, Div, Neg, Scale, Relu, Exp, Log, Power };

/// Generic entry point; `param` is the constant for Scale and the exponent
/// for Power. Binary kinds accept equal shapes or a one-element operand.
Tensor elementwise(Elementwise kind, const Tensor& a, const Tensor* b = nullptr, double param = 0.0);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& x);
Tensor scale(const Tensor& x, double c);
Tensor add_scalar(const Tensor& x, double c);
Tensor relu(const Tensor& x);

/// Collects the sign pattern (x > 0) of every relu input evaluated on this
/// thread while alive, in evaluation order. Two evaluations with equal
/// patterns lie in the same linear region of all activations.
class ReluPatternRecorder {
 public:
  ReluPatternRecorder();
  ~ReluPatternRecorder();
  ReluPatternRecorder(const ReluPatternRecorder&) = delete;
  ReluPatternRecorder& operator=(const ReluPatternRecorder&) = delete;

  const std::vector<bool>& pattern() const { return pattern_; }
  /// Smallest |x| seen so far (+inf before any relu).
  double min_abs() const { return min_abs_; }
  void record(std::span<const double> x);

 private:
  std::vector<bool> pattern_;
  double min_abs_;
  ReluPatternRecorder* previous_;
};
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor pow(const Tensor& x, double exponent);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);  // rank 2

Tensor reshape(const Tensor& x, Shape shape);

enum class Reduce { Sum, Mean };

/// Reduces over `axes` (removed from the shape). An empty axis list reduces
/// everything to a rank-0 scalar.
Tensor reduce(const Tensor& x, Reduce kind, std::vector<int64_t> axes = {});
Tensor sum(const Tensor& x, std::vector<int64_t> axes = {});
Tensor mean(const Tensor& x, std::vector<int64_t> axes = {});

/// Adjoint of a sum-reduction: replicates `x` along the `axes` of `shape`
/// that `x` lacks. `x.shape()` must equal `shape` with `axes` removed.
Tensor expand(const Tensor& x, Shape shape, std::vector<int64_t> axes);

Tensor concat(std::span<const Tensor> parts, int64_t axis);
Tensor slice(const Tensor& x, int64_t axis, int64_t start, int64_t length);

/// Rows of `x` (axis 0) at `indices`, and its adjoint scatter-add.
Tensor index_select(const Tensor& x, std::span<const int64_t> indices);
Tensor index_add(const Tensor& base, std::span<const int64_t> indices, const Tensor& rows);

/// 2D convolution, x: B×C×H×W, w: O×C×kh×kw, bias: O (optional).
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor* bias, int stride = 1, int pad = 0);

/// The two other bilinear forms of <gy, conv(x, w)>; exposed so their
/// gradients stay in the differentiable op set.
Tensor conv2d_input_grad(const Tensor& gy, const Tensor& w, const Shape& x_shape, int stride, int pad);
Tensor conv2d_weight_grad(const Tensor& x, const Tensor& gy, const Shape& w_shape, int stride, int pad);

enum class Resample { AvgDown, NearestUp };

/// Spatial resampling of the last two axes.
Tensor resample(const Tensor& x, Resample mode, int factor);

struct MaskedMean {
  Tensor mean;             // B×C
  std::vector<bool> valid; // per batch element; false => all-zero mask, zeros returned
};

/// Per (batch, channel) mean of x over positions where mask (B×H×W, {0,1}) is 1.
MaskedMean masked_mean(const Tensor& x, std::span<const double> mask);

/// Log-softmax over `axis`, stabilised by subtracting a detached max.
Tensor log_softmax(const Tensor& x, int64_t axis);
Tensor softmax(const Tensor& x, int64_t axis);

/// Instance normalisation over the spatial axes of a B×C×H×W tensor with
/// per-channel affine parameters (gamma, beta: C).
Tensor instance_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

}  // namespace dumeta::tc
