// Copyright 2026 The DuMeta Lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dumeta/tensor.hpp"

namespace dumeta {

enum Tissue : int { kBackground = 0, kCsf = 1, kGm = 2, kWm = 3 };
inline constexpr int kTissueClasses[] = {kCsf, kGm, kWm};
inline constexpr const char* kTissueNames[] = {"CSF", "GM", "WM"};

/// Integer class map of shape batch×height×width.
struct LabelMap {
  int64_t batch = 0;
  int64_t height = 0;
  int64_t width = 0;
  std::vector<int> values;

  LabelMap() = default;
  LabelMap(int64_t b, int64_t h, int64_t w, std::vector<int> v);

  int64_t plane() const { return height * width; }
  int at(int64_t b, int64_t i, int64_t j) const { return values[static_cast<std::size_t>((b * height + i) * width + j)]; }
  std::span<const int> element(int64_t b) const;
  bool operator==(const LabelMap&) const = default;
};

/// Nearest-neighbour downsampling: output pixel (i, j) takes input (i·f, j·f).
LabelMap downsample_nearest(const LabelMap& labels, int64_t factor);

/// Concatenates single-element maps along the batch axis.
LabelMap stack_labels(std::span<const LabelMap> items);

LabelMap select_element(const LabelMap& labels, int64_t b);

/// B×C×H×W one-hot encoding; throws std::out_of_range for labels outside [0, C).
tc::Tensor one_hot(const LabelMap& labels, int64_t num_classes);

/// 0/1 mask over B·H·W for one class.
std::vector<double> class_mask(const LabelMap& labels, int cls);

/// Converts a tensor holding class indices (any shape with B·H·W values) back to labels.
LabelMap labels_from_tensor(const tc::Tensor& t, int64_t batch, int64_t height, int64_t width);
tc::Tensor labels_to_tensor(const LabelMap& labels);

}  // namespace dumeta
