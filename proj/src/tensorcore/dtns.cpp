// Copyright 2026 The DuMeta Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "dumeta/dtns.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace dumeta::tc {

namespace {

template <typename T>
void put_le(std::string& out, T value) {
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.append(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get_le(std::istream& in, const std::string& source) {
  unsigned char bytes[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(T))) throw FormatError(source + ": truncated DTNS record");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

}  // namespace

std::string encode_dtns(const Tensor& tensor) {
  std::string out = "DTNS";
  put_le<uint32_t>(out, kDtnsVersion);
  put_le<uint32_t>(out, static_cast<uint32_t>(tensor.rank()));
  for (int64_t e : tensor.shape()) put_le<uint64_t>(out, static_cast<uint64_t>(e));
  for (double v : tensor.data()) put_le<double>(out, v);
  return out;
}

void write_dtns(std::ostream& out, const Tensor& tensor) {
  const std::string bytes = encode_dtns(tensor);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Tensor read_dtns(std::istream& in, const std::string& source) {
  char magic[4];
  if (!in.read(magic, 4)) throw FormatError(source + ": truncated DTNS record");
  if (std::memcmp(magic, "DTNS", 4) != 0) throw FormatError(source + ": bad magic bytes (expected DTNS)");
  const auto version = get_le<uint32_t>(in, source);
  if (version != kDtnsVersion) throw FormatError(source + ": unsupported DTNS version " + std::to_string(version));
  const auto rank = get_le<uint32_t>(in, source);
  if (rank > 16) throw FormatError(source + ": implausible rank " + std::to_string(rank));
  Shape shape;
  uint64_t count = 1;
  for (uint32_t i = 0; i < rank; ++i) {
    const auto e = get_le<uint64_t>(in, source);
    if (e == 0 || e > (uint64_t{1} << 32)) throw FormatError(source + ": invalid extent");
    shape.push_back(static_cast<int64_t>(e));
    count *= e;
  }
  if (count > (uint64_t{1} << 31)) throw FormatError(source + ": tensor too large");
  std::vector<double> data(static_cast<std::size_t>(count));
  for (auto& v : data) v = get_le<double>(in, source);
  return Tensor(std::move(shape), std::move(data));
}

Tensor decode_dtns(const std::string& bytes, const std::string& source) {
  std::istringstream in(bytes);
  return read_dtns(in, source);
}

void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void save_dtns(const std::filesystem::path& path, const Tensor& tensor) { write_file_atomic(path, encode_dtns(tensor)); }

Tensor load_dtns(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  Tensor t = read_dtns(in, path.string());
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError(path.string() + ": trailing bytes after DTNS record");
  return t;
}

}  // namespace dumeta::tc
