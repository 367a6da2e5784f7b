// Copyright 2026 The DuMeta Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "dumeta/checkpoint.hpp"

#include <stdexcept>

#include "dumeta/dtns.hpp"

namespace dumeta::seg {

using nlohmann::json;
using tc::FormatError;
using tc::ParamRole;
using tc::ParamSet;

const ParamSet& Checkpoint::get(ParamRole role) const {
  for (const ParamSet& s : sets) {
    if (s.role() == role) return s;
  }
  throw std::out_of_range("checkpoint has no " + std::string(tc::to_string(role)) + " parameters");
}

bool Checkpoint::has(ParamRole role) const {
  for (const ParamSet& s : sets) {
    if (s.role() == role) return true;
  }
  return false;
}

std::string encode_checkpoint(std::span<const ParamSet> sets, const json& meta) {
  json entries = json::array();
  std::string payload;
  for (const ParamSet& s : sets) {
    for (std::size_t i = 0; i < s.size(); ++i) {
      entries.push_back({{"name", s.names()[i]},
                         {"role", std::string(tc::to_string(s.role()))},
                         {"offset", payload.size()},
                         {"shape", s.at(i).shape()}});
      payload += tc::encode_dtns(s.at(i));
    }
  }
  json manifest = {{"format", "dumeta-checkpoint"}, {"version", kCheckpointVersion}, {"meta", meta}, {"entries", entries}};
  return manifest.dump() + "\n" + payload;
}

Checkpoint decode_checkpoint(const std::string& bytes, const std::string& source) {
  const auto newline = bytes.find('\n');
  if (newline == std::string::npos) throw FormatError(source + ": missing checkpoint manifest line");
  json manifest;
  try {
    manifest = json::parse(bytes.substr(0, newline));
  } catch (const json::exception& e) {
    throw FormatError(source + ": malformed checkpoint manifest: " + e.what());
  }
  if (!manifest.is_object() || manifest.value("format", "") != "dumeta-checkpoint") {
    throw FormatError(source + ": not a checkpoint file");
  }
  if (manifest.value("version", 0) != kCheckpointVersion) throw FormatError(source + ": unsupported checkpoint version");

  const std::string payload = bytes.substr(newline + 1);
  Checkpoint ckpt;
  ckpt.meta = manifest.value("meta", json::object());
  std::size_t expected_offset = 0;
  try {
    for (const json& e : manifest.at("entries")) {
      const ParamRole role = tc::param_role_from_string(e.at("role").get<std::string>());
      const auto offset = e.at("offset").get<std::size_t>();
      if (offset != expected_offset || offset > payload.size()) throw FormatError(source + ": inconsistent record offset");
      const std::string name = e.at("name").get<std::string>();
      const std::string record_source = source + " [" + name + "]";
      tc::Tensor t = tc::decode_dtns(payload.substr(offset), record_source);
      if (t.shape() != e.at("shape").get<tc::Shape>()) throw FormatError(record_source + ": shape disagrees with manifest");
      expected_offset = offset + tc::encode_dtns(t).size();
      if (ckpt.sets.empty() || ckpt.sets.back().role() != role) ckpt.sets.emplace_back(role);
      ckpt.sets.back().add(name, std::move(t));
    }
  } catch (const json::exception& e) {
    throw FormatError(source + ": malformed checkpoint manifest: " + e.what());
  } catch (const std::invalid_argument& e) {
    throw FormatError(source + ": " + e.what());
  }
  if (expected_offset != payload.size()) throw FormatError(source + ": trailing bytes after checkpoint records");
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, std::span<const ParamSet> sets, const json& meta) {
  tc::write_file_atomic(path, encode_checkpoint(sets, meta));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(tc::read_file(path), path.string());
}

}  // namespace dumeta::seg
