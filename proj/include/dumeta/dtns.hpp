// Copyright 2026 The DuMeta Lab Authors
// SPDX-License-Identifier: Apache-2.0

// DTNS tensor records: "DTNS", u32 version (1), u32 rank, u64 extents[rank],
// then the little-endian f64 payload.

#pragma once

#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>

#include "dumeta/tensor.hpp"

namespace dumeta::tc {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr uint32_t kDtnsVersion = 1;

std::string encode_dtns(const Tensor& tensor);
void write_dtns(std::ostream& out, const Tensor& tensor);

/// `source` names the origin in error messages.
Tensor read_dtns(std::istream& in, const std::string& source);
Tensor decode_dtns(const std::string& bytes, const std::string& source);

/// Atomic write (temporary file, then rename).
void save_dtns(const std::filesystem::path& path, const Tensor& tensor);
Tensor load_dtns(const std::filesystem::path& path);

/// Writes `bytes` to `path` through a temporary sibling and a rename.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);
std::string read_file(const std::filesystem::path& path);

}  // namespace dumeta::tc
