// Copyright 2026 The DuMeta Lab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint layout: one JSON manifest line terminated by '\n', followed by
// concatenated DTNS records. Manifest entries carry name, role, shape and the
// byte offset of the record relative to the first byte after the newline.

#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dumeta/param_set.hpp"
#include "json.hpp"

namespace dumeta::seg {

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  std::vector<tc::ParamSet> sets;  // one per role, in file order
  nlohmann::json meta = nlohmann::json::object();

  /// Throws std::out_of_range when no set has the role.
  const tc::ParamSet& get(tc::ParamRole role) const;
  bool has(tc::ParamRole role) const;
};

std::string encode_checkpoint(std::span<const tc::ParamSet> sets, const nlohmann::json& meta);
Checkpoint decode_checkpoint(const std::string& bytes, const std::string& source);

void save_checkpoint(const std::filesystem::path& path, std::span<const tc::ParamSet> sets, const nlohmann::json& meta);
/// Throws tc::FormatError naming the file on malformed input.
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace dumeta::seg
