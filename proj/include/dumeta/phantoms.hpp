// Copyright 2026 The DuMeta Lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dumeta/labels.hpp"
#include "dumeta/tensor.hpp"
#include "json.hpp"

namespace dumeta::phantom {

inline constexpr int kPoolVersion = 1;

struct AgeGroupSpec {
  std::string name;
  std::array<double, 3> contrast{};  // mean intensity of CSF, GM, WM
  double atrophy = 0.0;              // GM eroded into CSF, pixels
  double noise = 0.05;               // Gaussian sigma
  int blobs_min = 1;                 // ventricle blob count range
  int blobs_max = 2;
  int subjects = 20;
  bool warp = true;                  // random affine per subject
  double label_flip = 0.0;           // probability of flipping a boundary label

  void validate(bool isointense_allowed) const;
};

nlohmann::json to_json(const AgeGroupSpec& spec);
AgeGroupSpec spec_from_json(const nlohmann::json& j);

/// Training groups 12m-like, 24m-like, elderly-like followed by the unseen 6m-like group.
std::vector<AgeGroupSpec> default_specs();

struct Subject {
  tc::Tensor image;  // 1×H×W in [0, 1]
  LabelMap labels;   // 1×H×W over {BG, CSF, GM, WM}
  std::string group;
  std::string id;
  uint64_t seed = 0;
};

class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Deterministic in (spec, seed, image_size). Retries with derived seeds until
/// CSF, GM and WM each cover at least 1% of the pixels; gives up after 10.
Subject generate_subject(const AgeGroupSpec& spec, uint64_t seed, int64_t image_size = 32);

/// Per-tissue fraction of pixels (CSF, GM, WM).
std::array<double, 3> class_fractions(const LabelMap& labels);

struct Group {
  AgeGroupSpec spec;
  std::vector<Subject> subjects;
  std::vector<int> train;
  std::vector<int> val;  // for the unseen group this is the test split
};

struct MetaPool {
  std::vector<Group> train_groups;  // exactly 3
  Group test_group;
  uint64_t seed = 0;
  int64_t image_size = 32;

  const Group& group(const std::string& name) const;
};

/// Seed of subject i of group g, derived from the pool seed.
uint64_t subject_seed(uint64_t pool_seed, int group_index, int subject_index);

/// Three valid training specs followed by a distinct unseen spec; throws
/// std::invalid_argument otherwise.
void validate_specs(const std::vector<AgeGroupSpec>& specs);

/// `specs` holds three training specs followed by the unseen spec.
MetaPool build_pool(const std::vector<AgeGroupSpec>& specs, uint64_t seed, int64_t image_size = 32);

nlohmann::json manifest(const MetaPool& pool);
void save_pool(const MetaPool& pool, const std::filesystem::path& dir);
/// Throws tc::FormatError naming the offending file.
MetaPool load_pool(const std::filesystem::path& dir);

/// FNV-1a 64-bit digest, hex encoded.
std::string fnv1a_hex(const std::string& bytes);

}  // namespace dumeta::phantom
