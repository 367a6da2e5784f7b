// Copyright 2026 The DuMeta Lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "dumeta/param_set.hpp"

namespace dumeta::seg {

using tc::ParamSet;
using tc::Tensor;

struct NetConfig {
  int64_t in_channels = 1;
  int64_t num_classes = 4;  // background + CSF + GM + WM
  int K = 3;
  int64_t base_width = 8;
  int64_t image_size = 32;
  bool norm = true;  // instance normalization; when off, convs carry a bias

  void validate() const;  // throws std::invalid_argument
  int64_t scale_size(int k) const { return image_size >> (k - 1); }
  int64_t scale_width(int k) const { return base_width << (k - 1); }
};

struct Network {
  ParamSet theta;  // extractor: encoder blocks
  ParamSet omega;  // head: decoder blocks + per-scale classifiers
};

/// He-normal initialization (std = sqrt(2 / fan_in)); norm gains 1, biases 0.
Network build_network(const NetConfig& config, uint64_t seed);

struct FeaturePyramid {
  std::vector<Tensor> features;  // F_1 (finest) .. F_K
  std::vector<int64_t> factors;  // downsampling factor of each scale: 1, 2, 4, ...
};

FeaturePyramid extract_features(const NetConfig& config, const ParamSet& theta, const Tensor& images);

/// Logits per scale ordered coarsest first, so the finest scale is last.
std::vector<Tensor> decode(const NetConfig& config, const ParamSet& omega, const FeaturePyramid& pyramid);

/// Convenience: extract_features followed by decode.
std::vector<Tensor> forward(const NetConfig& config, const ParamSet& theta, const ParamSet& omega, const Tensor& images);

struct HeadPartition {
  std::set<std::string> trainable;
  std::set<std::string> frozen;
  int n_upsample_layers = 0;
};

/// Trainable = the n finest decoder blocks plus every classifier.
HeadPartition partition_head(const NetConfig& config, const ParamSet& omega, int n_upsample_layers);

/// Decoder block that produces scale k (1 = finest), or 0 for classifier and
/// unrecognized names.
int decoder_scale(const std::string& param_name);

}  // namespace dumeta::seg
