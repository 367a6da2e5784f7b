// Copyright 2026 The DuMeta Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "dumeta/labels.hpp"

#include <cmath>
#include <stdexcept>

namespace dumeta {

using tc::ShapeError;
using tc::Tensor;

LabelMap::LabelMap(int64_t b, int64_t h, int64_t w, std::vector<int> v) : batch(b), height(h), width(w), values(std::move(v)) {
  if (b <= 0 || h <= 0 || w <= 0) throw ShapeError("label map extents must be positive");
  if (static_cast<int64_t>(values.size()) != b * h * w) throw ShapeError("label map size does not match extents");
}

std::span<const int> LabelMap::element(int64_t b) const {
  if (b < 0 || b >= batch) throw std::out_of_range("label map element out of range");
  return std::span<const int>(values).subspan(static_cast<std::size_t>(b * plane()), static_cast<std::size_t>(plane()));
}

LabelMap downsample_nearest(const LabelMap& labels, int64_t factor) {
  if (factor < 1 || labels.height % factor != 0 || labels.width % factor != 0) {
    throw ShapeError("downsample_nearest: factor " + std::to_string(factor) + " does not divide the label extents");
  }
  const int64_t h = labels.height / factor, w = labels.width / factor;
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(labels.batch * h * w));
  for (int64_t b = 0; b < labels.batch; ++b) {
    for (int64_t i = 0; i < h; ++i) {
      for (int64_t j = 0; j < w; ++j) out.push_back(labels.at(b, i * factor, j * factor));
    }
  }
  return LabelMap(labels.batch, h, w, std::move(out));
}

LabelMap stack_labels(std::span<const LabelMap> items) {
  if (items.empty()) throw ShapeError("stack_labels: nothing to stack");
  int64_t batch = 0;
  std::vector<int> values;
  for (const LabelMap& m : items) {
    if (m.height != items[0].height || m.width != items[0].width) throw ShapeError("stack_labels: extent mismatch");
    batch += m.batch;
    values.insert(values.end(), m.values.begin(), m.values.end());
  }
  return LabelMap(batch, items[0].height, items[0].width, std::move(values));
}

LabelMap select_element(const LabelMap& labels, int64_t b) {
  auto e = labels.element(b);
  return LabelMap(1, labels.height, labels.width, std::vector<int>(e.begin(), e.end()));
}

Tensor one_hot(const LabelMap& labels, int64_t num_classes) {
  const int64_t plane = labels.plane();
  std::vector<double> data(static_cast<std::size_t>(labels.batch * num_classes * plane), 0.0);
  for (int64_t b = 0; b < labels.batch; ++b) {
    for (int64_t p = 0; p < plane; ++p) {
      const int c = labels.values[static_cast<std::size_t>(b * plane + p)];
      if (c < 0 || c >= num_classes) throw std::out_of_range("label " + std::to_string(c) + " outside [0, " + std::to_string(num_classes) + ")");
      data[static_cast<std::size_t>((b * num_classes + c) * plane + p)] = 1.0;
    }
  }
  return Tensor({labels.batch, num_classes, labels.height, labels.width}, std::move(data));
}

std::vector<double> class_mask(const LabelMap& labels, int cls) {
  std::vector<double> mask(labels.values.size());
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = labels.values[i] == cls ? 1.0 : 0.0;
  return mask;
}

LabelMap labels_from_tensor(const Tensor& t, int64_t batch, int64_t height, int64_t width) {
  if (t.numel() != batch * height * width) throw ShapeError("labels_from_tensor: size mismatch");
  std::vector<int> values(static_cast<std::size_t>(t.numel()));
  for (int64_t i = 0; i < t.numel(); ++i) {
    const double v = t[i];
    if (v != std::floor(v) || v < 0 || v > 255) throw std::invalid_argument("labels_from_tensor: value is not a class index");
    values[static_cast<std::size_t>(i)] = static_cast<int>(v);
  }
  return LabelMap(batch, height, width, std::move(values));
}

Tensor labels_to_tensor(const LabelMap& labels) {
  std::vector<double> data(labels.values.begin(), labels.values.end());
  return Tensor({labels.batch, labels.height, labels.width}, std::move(data));
}

}  // namespace dumeta
