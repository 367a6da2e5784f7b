// Copyright 2026 The DuMeta Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "dumeta/segnet.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

#include "dumeta/ops.hpp"

namespace dumeta::seg {

using tc::Shape;
using tc::ShapeError;

void NetConfig::validate() const {
  if (K < 2) throw std::invalid_argument("net.K must be >= 2");
  if (num_classes < 2) throw std::invalid_argument("net.num_classes must be >= 2");
  if (in_channels < 1 || base_width < 1) throw std::invalid_argument("net.in_channels and net.base_width must be >= 1");
  if (K > 16 || image_size < 1 || image_size % (int64_t{1} << (K - 1)) != 0) {
    throw std::invalid_argument("net.image_size must be divisible by 2^(K-1)");
  }
}

namespace {

Tensor he_normal(Shape shape, std::mt19937_64& rng) {
  const int64_t fan_in = tc::numel(shape) / shape[0];
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  std::vector<double> data(static_cast<std::size_t>(tc::numel(shape)));
  for (double& v : data) v = dist(rng);
  return Tensor(std::move(shape), std::move(data));
}

void add_conv_unit(ParamSet& p, const NetConfig& config, const std::string& prefix, int idx, int64_t in, int64_t out,
                   std::mt19937_64& rng) {
  const std::string conv = prefix + ".conv" + std::to_string(idx);
  p.add(conv + ".w", he_normal({out, in, 3, 3}, rng));
  if (config.norm) {
    const std::string norm = prefix + ".norm" + std::to_string(idx);
    p.add(norm + ".g", Tensor::ones({out}));
    p.add(norm + ".b", Tensor::zeros({out}));
  } else {
    p.add(conv + ".b", Tensor::zeros({out}));
  }
}

// conv3x3 -> (norm) -> relu
Tensor conv_unit(const NetConfig& config, const ParamSet& p, const std::string& prefix, int idx, const Tensor& x) {
  const std::string conv = prefix + ".conv" + std::to_string(idx);
  if (config.norm) {
    const std::string norm = prefix + ".norm" + std::to_string(idx);
    Tensor y = tc::conv2d(x, p.at(conv + ".w"), nullptr, 1, 1);
    return tc::relu(tc::instance_norm(y, p.at(norm + ".g"), p.at(norm + ".b")));
  }
  return tc::relu(tc::conv2d(x, p.at(conv + ".w"), &p.at(conv + ".b"), 1, 1));
}

Tensor block(const NetConfig& config, const ParamSet& p, const std::string& prefix, const Tensor& x) {
  return conv_unit(config, p, prefix, 2, conv_unit(config, p, prefix, 1, x));
}

}  // namespace

Network build_network(const NetConfig& config, uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  Network net{ParamSet(tc::ParamRole::Extractor), ParamSet(tc::ParamRole::Head)};
  int64_t in = config.in_channels;
  for (int k = 1; k <= config.K; ++k) {
    const std::string prefix = "enc" + std::to_string(k);
    add_conv_unit(net.theta, config, prefix, 1, in, config.scale_width(k), rng);
    add_conv_unit(net.theta, config, prefix, 2, config.scale_width(k), config.scale_width(k), rng);
    in = config.scale_width(k);
  }
  for (int k = config.K - 1; k >= 1; --k) {
    const std::string prefix = "dec" + std::to_string(k);
    const int64_t fused = config.scale_width(k + 1) + config.scale_width(k);
    add_conv_unit(net.omega, config, prefix, 1, fused, config.scale_width(k), rng);
    add_conv_unit(net.omega, config, prefix, 2, config.scale_width(k), config.scale_width(k), rng);
  }
  for (int k = config.K; k >= 1; --k) {
    const std::string prefix = "cls" + std::to_string(k);
    net.omega.add(prefix + ".w", he_normal({config.num_classes, config.scale_width(k), 1, 1}, rng));
    net.omega.add(prefix + ".b", Tensor::zeros({config.num_classes}));
  }
  return net;
}

FeaturePyramid extract_features(const NetConfig& config, const ParamSet& theta, const Tensor& images) {
  if (images.rank() != 4 || images.extent(1) != config.in_channels || images.extent(2) != config.image_size ||
      images.extent(3) != config.image_size) {
    throw ShapeError("extract_features: expected B×" + std::to_string(config.in_channels) + "×" +
                     std::to_string(config.image_size) + "×" + std::to_string(config.image_size) + " images, got " +
                     tc::to_string(images.shape()));
  }
  FeaturePyramid pyramid;
  Tensor x = images;
  for (int k = 1; k <= config.K; ++k) {
    if (k > 1) x = tc::resample(x, tc::Resample::AvgDown, 2);
    x = block(config, theta, "enc" + std::to_string(k), x);
    pyramid.features.push_back(x);
    pyramid.factors.push_back(int64_t{1} << (k - 1));
  }
  return pyramid;
}

std::vector<Tensor> decode(const NetConfig& config, const ParamSet& omega, const FeaturePyramid& pyramid) {
  if (static_cast<int>(pyramid.features.size()) != config.K) {
    throw ShapeError("decode: pyramid has " + std::to_string(pyramid.features.size()) + " scales, config expects " +
                     std::to_string(config.K));
  }
  for (int k = 1; k <= config.K; ++k) {
    const Tensor& f = pyramid.features[static_cast<std::size_t>(k - 1)];
    if (f.rank() != 4 || f.extent(1) != config.scale_width(k) || f.extent(2) != config.scale_size(k)) {
      throw ShapeError("decode: scale " + std::to_string(k) + " features have shape " + tc::to_string(f.shape()));
    }
  }
  auto classify = [&](int k, const Tensor& h) {
    const std::string prefix = "cls" + std::to_string(k);
    return tc::conv2d(h, omega.at(prefix + ".w"), &omega.at(prefix + ".b"), 1, 0);
  };
  std::vector<Tensor> logits;
  Tensor h = pyramid.features.back();
  logits.push_back(classify(config.K, h));
  for (int k = config.K - 1; k >= 1; --k) {
    Tensor parts[] = {tc::resample(h, tc::Resample::NearestUp, 2), pyramid.features[static_cast<std::size_t>(k - 1)]};
    h = block(config, omega, "dec" + std::to_string(k), tc::concat(parts, 1));
    logits.push_back(classify(k, h));
  }
  return logits;
}

std::vector<Tensor> forward(const NetConfig& config, const ParamSet& theta, const ParamSet& omega, const Tensor& images) {
  return decode(config, omega, extract_features(config, theta, images));
}

int decoder_scale(const std::string& name) {
  if (name.rfind("dec", 0) != 0) return 0;
  std::size_t pos = 3;
  int k = 0;
  while (pos < name.size() && name[pos] >= '0' && name[pos] <= '9') k = k * 10 + (name[pos++] - '0');
  return k;
}

HeadPartition partition_head(const NetConfig& config, const ParamSet& omega, int n) {
  if (n < 0 || n > config.K - 1) {
    throw std::invalid_argument("n_upsample_layers must be in [0, " + std::to_string(config.K - 1) + "], got " + std::to_string(n));
  }
  HeadPartition part;
  part.n_upsample_layers = n;
  for (const std::string& name : omega.names()) {
    const int k = decoder_scale(name);
    const bool trainable = k == 0 || k <= n;
    (trainable ? part.trainable : part.frozen).insert(name);
  }
  return part;
}

}  // namespace dumeta::seg
