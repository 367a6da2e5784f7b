// Copyright 2026 The DuMeta Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "dumeta/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace dumeta::tc {

using detail::make_result;

namespace {

Tensor constant(Shape shape, std::vector<double> data) { return Tensor(std::move(shape), std::move(data)); }

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

std::vector<int64_t> normalize_axes(const Shape& shape, std::vector<int64_t> axes) {
  const auto rank = static_cast<int64_t>(shape.size());
  if (axes.empty()) {
    for (int64_t i = 0; i < rank; ++i) axes.push_back(i);
    return axes;
  }
  for (int64_t& a : axes) {
    if (a < 0) a += rank;
    if (a < 0 || a >= rank) throw ShapeError("axis out of range for shape " + to_string(shape));
  }
  std::sort(axes.begin(), axes.end());
  if (std::adjacent_find(axes.begin(), axes.end()) != axes.end()) throw ShapeError("duplicate reduction axis");
  return axes;
}

Shape remove_axes(const Shape& shape, const std::vector<int64_t>& axes) {
  Shape out;
  for (std::size_t d = 0; d < shape.size(); ++d) {
    if (!std::binary_search(axes.begin(), axes.end(), static_cast<int64_t>(d))) out.push_back(shape[d]);
  }
  return out;
}

/// For every flat index of `full`, the flat index into `full` with `axes`
/// removed. Row-major odometer walk.
std::vector<int64_t> reduced_index_map(const Shape& full, const std::vector<int64_t>& axes) {
  const std::size_t rank = full.size();
  std::vector<int64_t> rstride(rank, 0);
  int64_t acc = 1;
  for (std::size_t d = rank; d-- > 0;) {
    if (std::binary_search(axes.begin(), axes.end(), static_cast<int64_t>(d))) continue;
    rstride[d] = acc;
    acc *= full[d];
  }
  const int64_t n = numel(full);
  std::vector<int64_t> map(static_cast<std::size_t>(n));
  std::vector<int64_t> counter(rank, 0);
  int64_t r = 0;
  for (int64_t i = 0; i < n; ++i) {
    map[static_cast<std::size_t>(i)] = r;
    for (std::size_t d = rank; d-- > 0;) {
      if (++counter[d] < full[d]) {
        r += rstride[d];
        break;
      }
      r -= rstride[d] * (full[d] - 1);
      counter[d] = 0;
    }
  }
  return map;
}

// Lifts a one-element operand to the other's shape.
std::pair<Tensor, Tensor> broadcast_pair(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return {a, b};
  if (b.numel() == 1) {
    Tensor s = b.rank() == 0 ? b : reshape(b, {});
    return {a, expand(s, a.shape(), {})};
  }
  if (a.numel() == 1) {
    Tensor s = a.rank() == 0 ? a : reshape(a, {});
    return {expand(s, b.shape(), {}), b};
  }
  require_same_shape(op, a, b);
  return {a, b};
}

template <typename F>
std::vector<double> map_unary(const Tensor& x, F f) {
  std::vector<double> out(static_cast<std::size_t>(x.numel()));
  auto d = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(d[i]);
  return out;
}

template <typename F>
std::vector<double> map_binary(const Tensor& a, const Tensor& b, F f) {
  std::vector<double> out(static_cast<std::size_t>(a.numel()));
  auto da = a.data();
  auto db = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(da[i], db[i]);
  return out;
}

Tensor add_same(const Tensor& a, const Tensor& b) {
  Tensor in[] = {a, b};
  return make_result("add", a.shape(), map_binary(a, b, [](double x, double y) { return x + y; }), in,
                     [](const BackwardContext& c) { return std::vector<Tensor>{c.grad_output, c.grad_output}; });
}

Tensor sub_same(const Tensor& a, const Tensor& b) {
  Tensor in[] = {a, b};
  return make_result("sub", a.shape(), map_binary(a, b, [](double x, double y) { return x - y; }), in,
                     [](const BackwardContext& c) {
                       std::vector<Tensor> g(2);
                       g[0] = c.grad_output;
                       if (c.needs[1]) g[1] = neg(c.grad_output);
                       return g;
                     });
}

Tensor mul_same(const Tensor& a, const Tensor& b) {
  Tensor in[] = {a, b};
  return make_result("mul", a.shape(), map_binary(a, b, [](double x, double y) { return x * y; }), in,
                     [](const BackwardContext& c) {
                       std::vector<Tensor> g(2);
                       if (c.needs[0]) g[0] = mul(c.grad_output, c.inputs[1]);
                       if (c.needs[1]) g[1] = mul(c.grad_output, c.inputs[0]);
                       return g;
                     });
}

Tensor div_same(const Tensor& a, const Tensor& b) {
  if (checked_mode()) {
    for (double v : b.data()) {
      if (v == 0.0) throw NumericError("div: zero divisor");
    }
  }
  Tensor in[] = {a, b};
  return make_result("div", a.shape(), map_binary(a, b, [](double x, double y) { return x / y; }), in,
                     [](const BackwardContext& c) {
                       std::vector<Tensor> g(2);
                       if (c.needs[0]) g[0] = div(c.grad_output, c.inputs[1]);
                       if (c.needs[1]) g[1] = neg(mul(c.grad_output, div(c.output, c.inputs[1])));
                       return g;
                     });
}

struct ConvGeometry {
  int64_t batch, in_ch, height, width;
  int64_t out_ch, kh, kw;
  int64_t out_h, out_w;
  int stride, pad;
};

ConvGeometry conv_geometry(const Shape& x, const Shape& w, int stride, int pad) {
  if (x.size() != 4 || w.size() != 4) throw ShapeError("conv2d expects rank-4 input and weight");
  if (stride < 1 || pad < 0) throw ShapeError("conv2d: stride must be >= 1 and pad >= 0");
  if (x[1] != w[1]) {
    throw ShapeError("conv2d: channel mismatch, input " + to_string(x) + " vs weight " + to_string(w));
  }
  ConvGeometry g{x[0], x[1], x[2], x[3], w[0], w[2], w[3], 0, 0, stride, pad};
  if (g.kh > g.height + 2 * pad || g.kw > g.width + 2 * pad) throw ShapeError("conv2d: kernel larger than padded input");
  g.out_h = (g.height + 2 * pad - g.kh) / stride + 1;
  g.out_w = (g.width + 2 * pad - g.kw) / stride + 1;
  return g;
}

// Valid output-column range [lo, hi) for kernel column kj.
inline void column_range(const ConvGeometry& g, int64_t kj, int64_t& lo, int64_t& hi) {
  const int64_t s = g.stride;
  const int64_t off = kj - g.pad;  // iw = ow*s + off
  lo = off >= 0 ? 0 : (-off + s - 1) / s;
  const int64_t max_ow = g.width - 1 - off;  // ow*s <= max_ow
  hi = max_ow < 0 ? 0 : std::min(g.out_w, max_ow / s + 1);
}

// Visits every (x, w, y) triple of the convolution; `body(xi, wi, yi, len, xstep)`
// handles a contiguous output row segment.
template <typename Body>
void conv_visit(const ConvGeometry& g, Body body) {
  for (int64_t b = 0; b < g.batch; ++b) {
    for (int64_t o = 0; o < g.out_ch; ++o) {
      for (int64_t c = 0; c < g.in_ch; ++c) {
        const int64_t x_base = ((b * g.in_ch) + c) * g.height * g.width;
        const int64_t y_base = ((b * g.out_ch) + o) * g.out_h * g.out_w;
        const int64_t w_base = ((o * g.in_ch) + c) * g.kh * g.kw;
        for (int64_t ki = 0; ki < g.kh; ++ki) {
          for (int64_t kj = 0; kj < g.kw; ++kj) {
            int64_t lo, hi;
            column_range(g, kj, lo, hi);
            if (lo >= hi) continue;
            const int64_t wi = w_base + ki * g.kw + kj;
            for (int64_t oh = 0; oh < g.out_h; ++oh) {
              const int64_t ih = oh * g.stride + ki - g.pad;
              if (ih < 0 || ih >= g.height) continue;
              const int64_t xi = x_base + ih * g.width + lo * g.stride + kj - g.pad;
              const int64_t yi = y_base + oh * g.out_w + lo;
              body(xi, wi, yi, hi - lo);
            }
          }
        }
      }
    }
  }
}

Tensor conv_raw(const Tensor& x, const Tensor& w, int stride, int pad) {
  const ConvGeometry g = conv_geometry(x.shape(), w.shape(), stride, pad);
  std::vector<double> y(static_cast<std::size_t>(g.batch * g.out_ch * g.out_h * g.out_w), 0.0);
  const double* xd = x.data().data();
  const double* wd = w.data().data();
  double* yd = y.data();
  const int64_t s = g.stride;
  conv_visit(g, [&](int64_t xi, int64_t wi, int64_t yi, int64_t len) {
    const double wv = wd[wi];
    const double* xp = xd + xi;
    double* yp = yd + yi;
    if (s == 1) {
      for (int64_t t = 0; t < len; ++t) yp[t] += wv * xp[t];
    } else {
      for (int64_t t = 0; t < len; ++t) yp[t] += wv * xp[t * s];
    }
  });
  Tensor in[] = {x, w};
  return make_result("conv2d", {g.batch, g.out_ch, g.out_h, g.out_w}, std::move(y), in,
                     [stride, pad](const BackwardContext& c) {
                       std::vector<Tensor> grads(2);
                       if (c.needs[0]) grads[0] = conv2d_input_grad(c.grad_output, c.inputs[1], c.inputs[0].shape(), stride, pad);
                       if (c.needs[1]) grads[1] = conv2d_weight_grad(c.inputs[0], c.grad_output, c.inputs[1].shape(), stride, pad);
                       return grads;
                     });
}

}  // namespace

Tensor elementwise(Elementwise kind, const Tensor& a, const Tensor* b, double param) {
  auto need_b = [&]() -> const Tensor& {
    if (b == nullptr) throw ShapeError("elementwise: binary kind requires a second operand");
    return *b;
  };
  switch (kind) {
    case Elementwise::Add: return add(a, need_b());
    case Elementwise::Sub: return sub(a, need_b());
    case Elementwise::Mul: return mul(a, need_b());
    case Elementwise::Div: return div(a, need_b());
    case Elementwise::Neg: return neg(a);
    case Elementwise::Scale: return scale(a, param);
    case Elementwise::Relu: return relu(a);
    case Elementwise::Exp: return exp(a);
    case Elementwise::Log: return log(a);
    case Elementwise::Power: return pow(a, param);
  }
  throw ShapeError("elementwise: unknown kind");
}

Tensor add(const Tensor& a, const Tensor& b) {
  auto [x, y] = broadcast_pair("add", a, b);
  return add_same(x, y);
}

Tensor sub(const Tensor& a, const Tensor& b) {
  auto [x, y] = broadcast_pair("sub", a, b);
  return sub_same(x, y);
}

Tensor mul(const Tensor& a, const Tensor& b) {
  auto [x, y] = broadcast_pair("mul", a, b);
  return mul_same(x, y);
}

Tensor div(const Tensor& a, const Tensor& b) {
  auto [x, y] = broadcast_pair("div", a, b);
  return div_same(x, y);
}

Tensor neg(const Tensor& x) {
  Tensor in[] = {x};
  return make_result("neg", x.shape(), map_unary(x, [](double v) { return -v; }), in,
                     [](const BackwardContext& c) { return std::vector<Tensor>{neg(c.grad_output)}; });
}

Tensor scale(const Tensor& x, double k) {
  Tensor in[] = {x};
  return make_result("scale", x.shape(), map_unary(x, [k](double v) { return k * v; }), in,
                     [k](const BackwardContext& c) { return std::vector<Tensor>{scale(c.grad_output, k)}; });
}

Tensor add_scalar(const Tensor& x, double k) {
  Tensor in[] = {x};
  return make_result("add_scalar", x.shape(), map_unary(x, [k](double v) { return v + k; }), in,
                     [](const BackwardContext& c) { return std::vector<Tensor>{c.grad_output}; });
}

namespace {
thread_local ReluPatternRecorder* g_relu_recorder = nullptr;
}

ReluPatternRecorder::ReluPatternRecorder() : min_abs_(std::numeric_limits<double>::infinity()), previous_(g_relu_recorder) {
  g_relu_recorder = this;
}
ReluPatternRecorder::~ReluPatternRecorder() { g_relu_recorder = previous_; }

void ReluPatternRecorder::record(std::span<const double> x) {
  for (double v : x) {
    pattern_.push_back(v > 0.0);
    min_abs_ = std::min(min_abs_, std::abs(v));
  }
}

Tensor relu(const Tensor& x) {
  if (g_relu_recorder) g_relu_recorder->record(x.data());
  Tensor in[] = {x};
  return make_result("relu", x.shape(), map_unary(x, [](double v) { return v > 0.0 ? v : 0.0; }), in,
                     [](const BackwardContext& c) {
                       const Tensor& xin = c.inputs[0];
                       Tensor mask = constant(xin.shape(), map_unary(xin, [](double v) { return v > 0.0 ? 1.0 : 0.0; }));
                       return std::vector<Tensor>{mul(c.grad_output, mask)};
                     });
}

Tensor exp(const Tensor& x) {
  Tensor in[] = {x};
  return make_result("exp", x.shape(), map_unary(x, [](double v) { return std::exp(v); }), in,
                     [](const BackwardContext& c) { return std::vector<Tensor>{mul(c.grad_output, c.output)}; });
}

Tensor log(const Tensor& x) {
  if (checked_mode()) {
    for (double v : x.data()) {
      if (!(v > 0.0)) throw NumericError("log: non-positive operand");
    }
  }
  Tensor in[] = {x};
  return make_result("log", x.shape(), map_unary(x, [](double v) { return std::log(v); }), in,
                     [](const BackwardContext& c) { return std::vector<Tensor>{div(c.grad_output, c.inputs[0])}; });
}

Tensor pow(const Tensor& x, double p) {
  Tensor in[] = {x};
  return make_result("pow", x.shape(), map_unary(x, [p](double v) { return std::pow(v, p); }), in,
                     [p](const BackwardContext& c) {
                       if (p == 0.0) return std::vector<Tensor>{Tensor::zeros(c.inputs[0].shape())};
                       if (p == 1.0) return std::vector<Tensor>{c.grad_output};
                       return std::vector<Tensor>{mul(c.grad_output, scale(pow(c.inputs[0], p - 1.0), p))};
                     });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) throw ShapeError("matmul expects rank-2 operands");
  const int64_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  if (b.extent(0) != k) throw ShapeError("matmul: inner extents " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  std::vector<double> out(static_cast<std::size_t>(m * n), 0.0);
  auto da = a.data();
  auto db = b.data();
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t p = 0; p < k; ++p) {
      const double av = da[static_cast<std::size_t>(i * k + p)];
      for (int64_t j = 0; j < n; ++j) out[static_cast<std::size_t>(i * n + j)] += av * db[static_cast<std::size_t>(p * n + j)];
    }
  }
  Tensor in[] = {a, b};
  return make_result("matmul", {m, n}, std::move(out), in, [](const BackwardContext& c) {
    std::vector<Tensor> g(2);
    if (c.needs[0]) g[0] = matmul(c.grad_output, transpose(c.inputs[1]));
    if (c.needs[1]) g[1] = matmul(transpose(c.inputs[0]), c.grad_output);
    return g;
  });
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose expects rank 2");
  const int64_t m = a.extent(0), n = a.extent(1);
  std::vector<double> out(static_cast<std::size_t>(m * n));
  auto d = a.data();
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < n; ++j) out[static_cast<std::size_t>(j * m + i)] = d[static_cast<std::size_t>(i * n + j)];
  }
  Tensor in[] = {a};
  return make_result("transpose", {n, m}, std::move(out), in,
                     [](const BackwardContext& c) { return std::vector<Tensor>{transpose(c.grad_output)}; });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.numel()) throw ShapeError("reshape: " + to_string(x.shape()) + " to " + to_string(shape));
  Tensor in[] = {x};
  return make_result("reshape", std::move(shape), x.to_vector(), in, [](const BackwardContext& c) {
    return std::vector<Tensor>{reshape(c.grad_output, c.inputs[0].shape())};
  });
}

Tensor reduce(const Tensor& x, Reduce kind, std::vector<int64_t> axes) {
  axes = normalize_axes(x.shape(), std::move(axes));
  Shape out_shape = remove_axes(x.shape(), axes);
  std::vector<double> out(static_cast<std::size_t>(numel(out_shape)), 0.0);
  const auto map = reduced_index_map(x.shape(), axes);
  auto d = x.data();
  for (std::size_t i = 0; i < map.size(); ++i) out[static_cast<std::size_t>(map[i])] += d[i];
  const double count = static_cast<double>(x.numel()) / static_cast<double>(out.size());
  if (kind == Reduce::Mean) {
    for (double& v : out) v /= count;
  }
  Tensor in[] = {x};
  return make_result(kind == Reduce::Sum ? "sum" : "mean", std::move(out_shape), std::move(out), in,
                     [axes, kind, count](const BackwardContext& c) {
                       Tensor g = expand(c.grad_output, c.inputs[0].shape(), axes);
                       if (kind == Reduce::Mean) g = scale(g, 1.0 / count);
                       return std::vector<Tensor>{g};
                     });
}

Tensor sum(const Tensor& x, std::vector<int64_t> axes) { return reduce(x, Reduce::Sum, std::move(axes)); }
Tensor mean(const Tensor& x, std::vector<int64_t> axes) { return reduce(x, Reduce::Mean, std::move(axes)); }

Tensor expand(const Tensor& x, Shape shape, std::vector<int64_t> axes) {
  axes = normalize_axes(shape, std::move(axes));
  if (remove_axes(shape, axes) != x.shape()) {
    throw ShapeError("expand: " + to_string(x.shape()) + " is not " + to_string(shape) + " without the expanded axes");
  }
  const auto map = reduced_index_map(shape, axes);
  std::vector<double> out(map.size());
  auto d = x.data();
  for (std::size_t i = 0; i < map.size(); ++i) out[i] = d[static_cast<std::size_t>(map[i])];
  Tensor in[] = {x};
  return make_result("expand", std::move(shape), std::move(out), in, [axes](const BackwardContext& c) {
    return std::vector<Tensor>{sum(c.grad_output, axes)};
  });
}

Tensor concat(std::span<const Tensor> parts, int64_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts[0].shape();
  const auto rank = static_cast<int64_t>(first.size());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw ShapeError("concat: axis out of range");
  Shape out_shape = first;
  out_shape[static_cast<std::size_t>(axis)] = 0;
  std::vector<int64_t> lengths;
  for (const Tensor& p : parts) {
    if (p.rank() != rank) throw ShapeError("concat: rank mismatch");
    for (int64_t d = 0; d < rank; ++d) {
      if (d != axis && p.extent(d) != first[static_cast<std::size_t>(d)]) {
        throw ShapeError("concat: extent mismatch " + to_string(p.shape()) + " vs " + to_string(first));
      }
    }
    lengths.push_back(p.extent(axis));
    out_shape[static_cast<std::size_t>(axis)] += p.extent(axis);
  }
  int64_t outer = 1, inner = 1;
  for (int64_t d = 0; d < axis; ++d) outer *= first[static_cast<std::size_t>(d)];
  for (int64_t d = axis + 1; d < rank; ++d) inner *= first[static_cast<std::size_t>(d)];
  const int64_t total = out_shape[static_cast<std::size_t>(axis)];
  std::vector<double> out(static_cast<std::size_t>(numel(out_shape)));
  int64_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto d = parts[k].data();
    const int64_t len = lengths[k] * inner;
    for (int64_t o = 0; o < outer; ++o) {
      std::copy(d.begin() + o * len, d.begin() + (o + 1) * len, out.begin() + (o * total + offset) * inner);
    }
    offset += lengths[k];
  }
  return make_result("concat", std::move(out_shape), std::move(out), parts, [axis, lengths](const BackwardContext& c) {
    std::vector<Tensor> g(lengths.size());
    int64_t start = 0;
    for (std::size_t k = 0; k < lengths.size(); ++k) {
      if (c.needs[k]) g[k] = slice(c.grad_output, axis, start, lengths[k]);
      start += lengths[k];
    }
    return g;
  });
}

Tensor slice(const Tensor& x, int64_t axis, int64_t start, int64_t length) {
  const int64_t rank = x.rank();
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw ShapeError("slice: axis out of range");
  const int64_t extent = x.extent(axis);
  if (start < 0 || length <= 0 || start + length > extent) throw ShapeError("slice: range out of bounds");
  int64_t outer = 1, inner = 1;
  for (int64_t d = 0; d < axis; ++d) outer *= x.extent(d);
  for (int64_t d = axis + 1; d < rank; ++d) inner *= x.extent(d);
  Shape out_shape = x.shape();
  out_shape[static_cast<std::size_t>(axis)] = length;
  std::vector<double> out(static_cast<std::size_t>(outer * length * inner));
  auto d = x.data();
  for (int64_t o = 0; o < outer; ++o) {
    auto src = d.begin() + (o * extent + start) * inner;
    std::copy(src, src + length * inner, out.begin() + o * length * inner);
  }
  Tensor in[] = {x};
  return make_result("slice", std::move(out_shape), std::move(out), in,
                     [axis, start, length, extent](const BackwardContext& c) {
                       const Shape& full = c.inputs[0].shape();
                       std::vector<Tensor> pieces;
                       if (start > 0) {
                         Shape s = full;
                         s[static_cast<std::size_t>(axis)] = start;
                         pieces.push_back(Tensor::zeros(s));
                       }
                       pieces.push_back(c.grad_output);
                       if (start + length < extent) {
                         Shape s = full;
                         s[static_cast<std::size_t>(axis)] = extent - start - length;
                         pieces.push_back(Tensor::zeros(s));
                       }
                       return std::vector<Tensor>{pieces.size() == 1 ? pieces[0] : concat(pieces, axis)};
                     });
}

Tensor index_select(const Tensor& x, std::span<const int64_t> indices) {
  if (x.rank() < 1) throw ShapeError("index_select: rank-0 input");
  if (indices.empty()) throw ShapeError("index_select: empty index list");
  const int64_t rows = x.extent(0);
  const int64_t row = x.numel() / rows;
  Shape out_shape = x.shape();
  out_shape[0] = static_cast<int64_t>(indices.size());
  std::vector<double> out(static_cast<std::size_t>(numel(out_shape)));
  auto d = x.data();
  for (std::size_t k = 0; k < indices.size(); ++k) {
    if (indices[k] < 0 || indices[k] >= rows) throw ShapeError("index_select: index out of range");
    std::copy(d.begin() + indices[k] * row, d.begin() + (indices[k] + 1) * row, out.begin() + static_cast<int64_t>(k) * row);
  }
  std::vector<int64_t> idx(indices.begin(), indices.end());
  Tensor in[] = {x};
  return make_result("index_select", std::move(out_shape), std::move(out), in, [idx](const BackwardContext& c) {
    return std::vector<Tensor>{index_add(Tensor::zeros(c.inputs[0].shape()), idx, c.grad_output)};
  });
}

Tensor index_add(const Tensor& base, std::span<const int64_t> indices, const Tensor& rows) {
  if (base.rank() < 1 || rows.rank() != base.rank()) throw ShapeError("index_add: rank mismatch");
  if (rows.extent(0) != static_cast<int64_t>(indices.size())) throw ShapeError("index_add: row count mismatch");
  const int64_t row = base.numel() / base.extent(0);
  if (rows.numel() / rows.extent(0) != row) throw ShapeError("index_add: row size mismatch");
  std::vector<double> out = base.to_vector();
  auto r = rows.data();
  for (std::size_t k = 0; k < indices.size(); ++k) {
    if (indices[k] < 0 || indices[k] >= base.extent(0)) throw ShapeError("index_add: index out of range");
    for (int64_t j = 0; j < row; ++j) {
      out[static_cast<std::size_t>(indices[k] * row + j)] += r[static_cast<std::size_t>(static_cast<int64_t>(k) * row + j)];
    }
  }
  std::vector<int64_t> idx(indices.begin(), indices.end());
  Tensor in[] = {base, rows};
  return make_result("index_add", base.shape(), std::move(out), in, [idx](const BackwardContext& c) {
    std::vector<Tensor> g(2);
    g[0] = c.grad_output;
    if (c.needs[1]) g[1] = index_select(c.grad_output, idx);
    return g;
  });
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor* bias, int stride, int pad) {
  Tensor y = conv_raw(x, w, stride, pad);
  if (bias == nullptr) return y;
  if (bias->rank() != 1 || bias->extent(0) != w.extent(0)) throw ShapeError("conv2d: bias must have one entry per output channel");
  return add(y, expand(*bias, y.shape(), {0, 2, 3}));
}

Tensor conv2d_input_grad(const Tensor& gy, const Tensor& w, const Shape& x_shape, int stride, int pad) {
  const ConvGeometry g = conv_geometry(x_shape, w.shape(), stride, pad);
  if (gy.shape() != Shape{g.batch, g.out_ch, g.out_h, g.out_w}) throw ShapeError("conv2d_input_grad: output-gradient shape mismatch");
  std::vector<double> gx(static_cast<std::size_t>(numel(x_shape)), 0.0);
  const double* gyd = gy.data().data();
  const double* wd = w.data().data();
  double* gxd = gx.data();
  const int64_t s = g.stride;
  conv_visit(g, [&](int64_t xi, int64_t wi, int64_t yi, int64_t len) {
    const double wv = wd[wi];
    const double* yp = gyd + yi;
    double* xp = gxd + xi;
    for (int64_t t = 0; t < len; ++t) xp[t * s] += wv * yp[t];
  });
  Tensor in[] = {gy, w};
  return make_result("conv2d_input_grad", x_shape, std::move(gx), in, [stride, pad](const BackwardContext& c) {
    std::vector<Tensor> grads(2);
    if (c.needs[0]) grads[0] = conv_raw(c.grad_output, c.inputs[1], stride, pad);
    if (c.needs[1]) grads[1] = conv2d_weight_grad(c.grad_output, c.inputs[0], c.inputs[1].shape(), stride, pad);
    return grads;
  });
}

Tensor conv2d_weight_grad(const Tensor& x, const Tensor& gy, const Shape& w_shape, int stride, int pad) {
  const ConvGeometry g = conv_geometry(x.shape(), w_shape, stride, pad);
  if (gy.shape() != Shape{g.batch, g.out_ch, g.out_h, g.out_w}) throw ShapeError("conv2d_weight_grad: output-gradient shape mismatch");
  std::vector<double> gw(static_cast<std::size_t>(numel(w_shape)), 0.0);
  const double* xd = x.data().data();
  const double* gyd = gy.data().data();
  double* gwd = gw.data();
  const int64_t s = g.stride;
  conv_visit(g, [&](int64_t xi, int64_t wi, int64_t yi, int64_t len) {
    const double* xp = xd + xi;
    const double* yp = gyd + yi;
    double acc = 0.0;
    for (int64_t t = 0; t < len; ++t) acc += xp[t * s] * yp[t];
    gwd[wi] += acc;
  });
  Tensor in[] = {x, gy};
  return make_result("conv2d_weight_grad", w_shape, std::move(gw), in, [stride, pad](const BackwardContext& c) {
    std::vector<Tensor> grads(2);
    if (c.needs[0]) grads[0] = conv2d_input_grad(c.inputs[1], c.grad_output, c.inputs[0].shape(), stride, pad);
    if (c.needs[1]) grads[1] = conv_raw(c.inputs[0], c.grad_output, stride, pad);
    return grads;
  });
}

Tensor resample(const Tensor& x, Resample mode, int factor) {
  if (x.rank() < 2) throw ShapeError("resample expects at least two spatial axes");
  if (factor < 1) throw ShapeError("resample: factor must be >= 1");
  const int64_t h = x.extent(x.rank() - 2), w = x.extent(x.rank() - 1);
  const int64_t planes = x.numel() / (h * w);
  const int64_t f = factor;
  Shape out_shape = x.shape();
  auto d = x.data();
  if (mode == Resample::AvgDown) {
    if (h % f != 0 || w % f != 0) {
      throw ShapeError("resample: spatial extents " + to_string(x.shape()) + " not divisible by " + std::to_string(f));
    }
    const int64_t oh = h / f, ow = w / f;
    out_shape[out_shape.size() - 2] = oh;
    out_shape[out_shape.size() - 1] = ow;
    std::vector<double> out(static_cast<std::size_t>(planes * oh * ow), 0.0);
    const double inv = 1.0 / static_cast<double>(f * f);
    for (int64_t p = 0; p < planes; ++p) {
      for (int64_t i = 0; i < h; ++i) {
        for (int64_t j = 0; j < w; ++j) {
          out[static_cast<std::size_t>((p * oh + i / f) * ow + j / f)] += d[static_cast<std::size_t>((p * h + i) * w + j)];
        }
      }
    }
    for (double& v : out) v *= inv;
    Tensor in[] = {x};
    return make_result("avg_down", std::move(out_shape), std::move(out), in, [factor, inv](const BackwardContext& c) {
      return std::vector<Tensor>{scale(resample(c.grad_output, Resample::NearestUp, factor), inv)};
    });
  }
  const int64_t oh = h * f, ow = w * f;
  out_shape[out_shape.size() - 2] = oh;
  out_shape[out_shape.size() - 1] = ow;
  std::vector<double> out(static_cast<std::size_t>(planes * oh * ow));
  for (int64_t p = 0; p < planes; ++p) {
    for (int64_t i = 0; i < oh; ++i) {
      for (int64_t j = 0; j < ow; ++j) {
        out[static_cast<std::size_t>((p * oh + i) * ow + j)] = d[static_cast<std::size_t>((p * h + i / f) * w + j / f)];
      }
    }
  }
  const double area = static_cast<double>(f * f);
  Tensor in[] = {x};
  return make_result("nearest_up", std::move(out_shape), std::move(out), in, [factor, area](const BackwardContext& c) {
    return std::vector<Tensor>{scale(resample(c.grad_output, Resample::AvgDown, factor), area)};
  });
}

MaskedMean masked_mean(const Tensor& x, std::span<const double> mask) {
  if (x.rank() != 4) throw ShapeError("masked_mean expects B×C×H×W features");
  const int64_t b = x.extent(0), ch = x.extent(1), h = x.extent(2), w = x.extent(3);
  if (static_cast<int64_t>(mask.size()) != b * h * w) {
    throw ShapeError("masked_mean: mask has " + std::to_string(mask.size()) + " entries, features " + to_string(x.shape()));
  }
  MaskedMean result;
  result.valid.assign(static_cast<std::size_t>(b), false);
  std::vector<double> full(static_cast<std::size_t>(x.numel()));
  std::vector<double> inv(static_cast<std::size_t>(b * ch), 0.0);
  for (int64_t i = 0; i < b; ++i) {
    double count = 0.0;
    for (int64_t p = 0; p < h * w; ++p) {
      const double m = mask[static_cast<std::size_t>(i * h * w + p)];
      if (m != 0.0 && m != 1.0) throw ShapeError("masked_mean: mask values must be 0 or 1");
      count += m;
    }
    result.valid[static_cast<std::size_t>(i)] = count > 0.0;
    for (int64_t c = 0; c < ch; ++c) {
      std::copy(mask.begin() + i * h * w, mask.begin() + (i + 1) * h * w, full.begin() + (i * ch + c) * h * w);
      if (count > 0.0) inv[static_cast<std::size_t>(i * ch + c)] = 1.0 / count;
    }
  }
  Tensor sums = sum(mul(x, Tensor(x.shape(), std::move(full))), {2, 3});
  result.mean = mul(sums, Tensor({b, ch}, std::move(inv)));
  return result;
}

Tensor log_softmax(const Tensor& x, int64_t axis) {
  const int64_t rank = x.rank();
  if (axis < 0) axis += rank;
  std::vector<int64_t> axes{axis};
  // Detached per-slice max; softmax is shift invariant so its gradient is exact.
  const Shape reduced = remove_axes(x.shape(), axes);
  const auto map = reduced_index_map(x.shape(), axes);
  std::vector<double> mx(static_cast<std::size_t>(numel(reduced)), -std::numeric_limits<double>::infinity());
  auto d = x.data();
  for (std::size_t i = 0; i < map.size(); ++i) {
    double& m = mx[static_cast<std::size_t>(map[i])];
    m = std::max(m, d[i]);
  }
  Tensor z = sub(x, expand(Tensor(reduced, std::move(mx)), x.shape(), axes));
  Tensor lse = log(sum(exp(z), axes));
  return sub(z, expand(lse, x.shape(), axes));
}

Tensor softmax(const Tensor& x, int64_t axis) { return exp(log_softmax(x, axis)); }

Tensor instance_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() != 4) throw ShapeError("instance_norm expects B×C×H×W");
  const int64_t ch = x.extent(1);
  if (gamma.shape() != Shape{ch} || beta.shape() != Shape{ch}) throw ShapeError("instance_norm: affine parameters must have C entries");
  const Shape& s = x.shape();
  Tensor mu = mean(x, {2, 3});
  Tensor centered = sub(x, expand(mu, s, {2, 3}));
  Tensor var = mean(mul(centered, centered), {2, 3});
  Tensor inv_std = pow(add_scalar(var, eps), -0.5);
  Tensor normed = mul(centered, expand(inv_std, s, {2, 3}));
  return add(mul(normed, expand(gamma, s, {0, 2, 3})), expand(beta, s, {0, 2, 3}));
}

}  // namespace dumeta::tc
