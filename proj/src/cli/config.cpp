// Copyright 2026 The DuMeta Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "dumeta/cli.hpp"
#include "dumeta/dtns.hpp"

namespace dumeta::cli {

using nlohmann::json;

namespace {

std::string intra_name(loss::IntraMode m) { return m == loss::IntraMode::Positional ? "positional" : "batchmean"; }

loss::IntraMode intra_from(const std::string& s) {
  if (s == "batchmean") return loss::IntraMode::BatchMean;
  if (s == "positional") return loss::IntraMode::Positional;
  throw UsageError("loss.intra_mode: expected 'batchmean' or 'positional', got '" + s + "'");
}

// Whether `value` may replace the default `def` for key `key`.
bool type_compatible(const std::string& key, const json& def, const json& value) {
  if (key == "loss.deep_supervision") return value.is_null() || value.is_array();
  if (def.is_boolean()) return value.is_boolean();
  if (def.is_number_float()) return value.is_number();
  if (def.is_number_unsigned()) return value.is_number_unsigned() || (value.is_number_integer() && value.get<int64_t>() >= 0);
  if (def.is_number_integer()) return value.is_number_integer();
  if (def.is_string()) return value.is_string();
  if (def.is_array()) return value.is_array();
  return def.type() == value.type();
}

const char* type_name(const json& def) {
  if (def.is_boolean()) return "a boolean";
  if (def.is_number_float()) return "a number";
  if (def.is_number_unsigned()) return "a non-negative integer";
  if (def.is_number_integer()) return "an integer";
  if (def.is_string()) return "a string";
  if (def.is_array()) return "an array";
  return "null";
}

template <typename T>
T field(const json& flat, const std::string& key) {
  try {
    return flat.at(key).get<T>();
  } catch (const json::exception& e) {
    throw UsageError("config key '" + key + "': " + e.what());
  }
}

}  // namespace

json ExperimentConfig::to_json() const {
  json j = json::object();
  j["seed"] = seed;
  j["seeds"] = seeds;
  j["jobs"] = jobs;
  j["out"] = out;
  j["pool"] = pool;
  json groups_json = json::array();
  for (const auto& g : groups) groups_json.push_back(phantom::to_json(g));
  j["data.groups"] = groups_json;
  j["net.K"] = net.K;
  j["net.base_width"] = net.base_width;
  j["net.image_size"] = net.image_size;
  j["net.norm"] = net.norm;
  j["train.alpha0"] = train.alpha0;
  j["train.outer_alpha0"] = train.outer_alpha0;
  j["train.poly_power"] = train.poly_power;
  j["train.momentum"] = train.outer.momentum;
  j["train.weight_decay"] = train.outer.weight_decay;
  j["train.nesterov"] = train.outer.nesterov;
  j["train.episodes"] = train.episodes;
  j["train.batch_size"] = train.batch_size;
  j["train.hypergrad_mode"] = meta::to_string(train.mode);
  j["train.inner_steps"] = train.inner_steps;
  j["train.shared_outer_batches"] = train.shared_outer_batches;
  j["train.checkpoint_every"] = train.checkpoint_every;
  j["train.fd_param_limit"] = train.fd_param_limit;
  j["train.fd_eps"] = train.fd_eps;
  j["train.augment"] = train.augment;
  j["train.augment_noise"] = train.augment_noise;
  j["loss.beta"] = train.weights.beta;
  j["loss.gamma"] = train.weights.gamma;
  // null means halving weights for the configured K
  j["loss.deep_supervision"] =
      train.weights.deep_supervision == loss::LossWeights::halving(net.K) ? json(nullptr) : json(train.weights.deep_supervision);
  j["loss.intra_mode"] = intra_name(train.weights.intra_mode);
  j["finetune.shots"] = shots;
  j["finetune.steps"] = finetune.steps;
  j["finetune.alpha"] = finetune.alpha;
  j["finetune.layers"] = finetune.n_upsample_layers;
  j["finetune.all"] = finetune.all;
  j["finetune.momentum"] = finetune.sgd.momentum;
  j["finetune.weight_decay"] = finetune.sgd.weight_decay;
  j["finetune.nesterov"] = finetune.sgd.nesterov;
  j["finetune.augment"] = finetune.augment;
  j["finetune.augment_noise"] = finetune.augment_noise;
  j["eval.spacing"] = spacing;
  j["gradcheck.image_size"] = gradcheck.image_size;
  j["gradcheck.K"] = gradcheck.K;
  j["gradcheck.base_width"] = gradcheck.base_width;
  j["gradcheck.alpha"] = gradcheck.alpha;
  j["gradcheck.eps"] = gradcheck.eps;
  j["gradcheck.min_margin"] = gradcheck.min_margin;
  j["gradcheck.toy_tolerance"] = gradcheck.toy_tolerance;
  j["gradcheck.segnet_tolerance"] = gradcheck.segnet_tolerance;
  j["ablation.variants"] = variants;
  j["ablation.ft_layers"] = ablation_ft_layers;
  return j;
}

json default_config_json() { return ExperimentConfig{}.to_json(); }

ExperimentConfig ExperimentConfig::from_json(const json& flat) {
  if (!flat.is_object()) throw UsageError("config must be a flat JSON object");
  json merged = default_config_json();
  for (const auto& [key, value] : flat.items()) {
    if (!merged.contains(key)) throw UsageError("unknown config key '" + key + "'");
    if (!type_compatible(key, merged[key], value)) {
      throw UsageError("config key '" + key + "' must be " + type_name(merged[key]));
    }
    merged[key] = value;
  }
  const bool ds_auto = merged["loss.deep_supervision"].is_null();

  ExperimentConfig c;
  c.seed = field<uint64_t>(merged, "seed");
  c.seeds = field<std::vector<uint64_t>>(merged, "seeds");
  c.jobs = field<int>(merged, "jobs");
  c.out = field<std::string>(merged, "out");
  c.pool = field<std::string>(merged, "pool");
  c.groups.clear();
  for (const json& g : merged["data.groups"]) {
    try {
      c.groups.push_back(phantom::spec_from_json(g));
    } catch (const json::exception& e) {
      throw UsageError(std::string("config key 'data.groups': ") + e.what());
    }
  }
  c.net.K = field<int>(merged, "net.K");
  c.net.base_width = field<int64_t>(merged, "net.base_width");
  c.net.image_size = field<int64_t>(merged, "net.image_size");
  c.net.norm = field<bool>(merged, "net.norm");
  c.train.alpha0 = field<double>(merged, "train.alpha0");
  c.train.outer_alpha0 = field<double>(merged, "train.outer_alpha0");
  c.train.poly_power = field<double>(merged, "train.poly_power");
  c.train.outer.momentum = field<double>(merged, "train.momentum");
  c.train.outer.weight_decay = field<double>(merged, "train.weight_decay");
  c.train.outer.nesterov = field<bool>(merged, "train.nesterov");
  c.train.episodes = field<int>(merged, "train.episodes");
  c.train.batch_size = field<int>(merged, "train.batch_size");
  try {
    c.train.mode = meta::hypergrad_mode_from_string(field<std::string>(merged, "train.hypergrad_mode"));
  } catch (const std::invalid_argument& e) {
    throw UsageError(std::string("train.hypergrad_mode: ") + e.what());
  }
  c.train.inner_steps = field<int>(merged, "train.inner_steps");
  c.train.shared_outer_batches = field<bool>(merged, "train.shared_outer_batches");
  c.train.checkpoint_every = field<int>(merged, "train.checkpoint_every");
  c.train.fd_param_limit = field<int64_t>(merged, "train.fd_param_limit");
  c.train.fd_eps = field<double>(merged, "train.fd_eps");
  c.train.augment = field<bool>(merged, "train.augment");
  c.train.augment_noise = field<double>(merged, "train.augment_noise");
  c.train.weights.beta = field<double>(merged, "loss.beta");
  c.train.weights.gamma = field<double>(merged, "loss.gamma");
  c.train.weights.deep_supervision =
      ds_auto ? loss::LossWeights::halving(c.net.K) : field<std::vector<double>>(merged, "loss.deep_supervision");
  c.train.weights.intra_mode = intra_from(field<std::string>(merged, "loss.intra_mode"));
  c.shots = field<int>(merged, "finetune.shots");
  c.finetune.steps = field<int>(merged, "finetune.steps");
  c.finetune.alpha = field<double>(merged, "finetune.alpha");
  c.finetune.n_upsample_layers = field<int>(merged, "finetune.layers");
  c.finetune.all = field<bool>(merged, "finetune.all");
  c.finetune.sgd.momentum = field<double>(merged, "finetune.momentum");
  c.finetune.sgd.weight_decay = field<double>(merged, "finetune.weight_decay");
  c.finetune.sgd.nesterov = field<bool>(merged, "finetune.nesterov");
  c.finetune.augment = field<bool>(merged, "finetune.augment");
  c.finetune.augment_noise = field<double>(merged, "finetune.augment_noise");
  c.spacing = field<double>(merged, "eval.spacing");
  c.gradcheck.image_size = field<int64_t>(merged, "gradcheck.image_size");
  c.gradcheck.K = field<int>(merged, "gradcheck.K");
  c.gradcheck.base_width = field<int64_t>(merged, "gradcheck.base_width");
  c.gradcheck.alpha = field<double>(merged, "gradcheck.alpha");
  c.gradcheck.eps = field<double>(merged, "gradcheck.eps");
  c.gradcheck.min_margin = field<double>(merged, "gradcheck.min_margin");
  c.gradcheck.toy_tolerance = field<double>(merged, "gradcheck.toy_tolerance");
  c.gradcheck.segnet_tolerance = field<double>(merged, "gradcheck.segnet_tolerance");
  c.variants = field<std::vector<std::string>>(merged, "ablation.variants");
  c.ablation_ft_layers = field<std::vector<int>>(merged, "ablation.ft_layers");
  c.validate();
  return c;
}

void ExperimentConfig::validate() const {
  auto wrap = [](auto&& fn) {
    try {
      fn();
    } catch (const UsageError&) {
      throw;
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
  };
  wrap([&] { net.validate(); });
  wrap([&] { train.validate(net.K); });
  wrap([&] { phantom::validate_specs(groups); });
  if (jobs < 1) throw UsageError("jobs must be >= 1");
  if (seeds.empty()) throw UsageError("seeds must not be empty");
  if (std::set<uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) throw UsageError("seeds must be distinct");
  if (shots < 1) throw UsageError("finetune.shots must be >= 1");
  if (finetune.steps < 0) throw UsageError("finetune.steps must be >= 0");
  if (!(finetune.alpha >= 0.0)) throw UsageError("finetune.alpha must be >= 0");
  if (!(finetune.sgd.momentum >= 0.0 && finetune.sgd.momentum < 1.0)) throw UsageError("finetune.momentum must lie in [0, 1)");
  if (!(finetune.sgd.weight_decay >= 0.0)) throw UsageError("finetune.weight_decay must be >= 0");
  if (!(finetune.augment_noise >= 0.0)) throw UsageError("finetune.augment_noise must be >= 0");
  auto check_layers = [&](int n, const std::string& key) {
    if (n < 0 || n > net.K - 1) {
      throw UsageError(key + " must lie in [0, " + std::to_string(net.K - 1) + "] for K=" + std::to_string(net.K) + ", got " +
                       std::to_string(n));
    }
  };
  check_layers(finetune.n_upsample_layers, "finetune.layers");
  for (int n : ablation_ft_layers) check_layers(n, "ablation.ft_layers");
  if (!(spacing > 0.0)) throw UsageError("eval.spacing must be > 0");
  if (gradcheck.K < 1 || gradcheck.image_size < 2 || gradcheck.base_width < 1) throw UsageError("gradcheck network is invalid");
  if (!(gradcheck.alpha >= 0.0) || !(gradcheck.eps > 0.0)) throw UsageError("gradcheck.alpha must be >= 0 and gradcheck.eps > 0");
  std::set<std::string> seen;
  for (const std::string& v : variants) {
    find_variant(v);
    if (!seen.insert(v).second) throw UsageError("ablation.variants lists '" + v + "' twice");
  }
}

ExperimentConfig load_config(const std::optional<fs::path>& file, const std::vector<std::string>& overrides, const char* env_seed) {
  json flat = json::object();
  if (file) {
    if (!fs::exists(*file)) throw MissingArtifact("config file not found: " + file->string());
    try {
      flat = json::parse(tc::read_file(*file));
    } catch (const json::parse_error& e) {
      throw UsageError("config file " + file->string() + ": " + e.what());
    }
    if (!flat.is_object()) throw UsageError("config file " + file->string() + " must hold a flat JSON object");
  }
  for (const std::string& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) throw UsageError("--set expects key=value, got '" + o + "'");
    const std::string key = o.substr(0, eq), text = o.substr(eq + 1);
    json value = json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;
    flat[key] = value;
  }
  if (env_seed && *env_seed) {
    const std::string s(env_seed);
    uint64_t v = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) throw UsageError("DUOMETA_SEED must be a non-negative integer, got '" + s + "'");
    flat["seed"] = v;
  }
  return ExperimentConfig::from_json(flat);
}

std::string config_hash(const ExperimentConfig& config) {
  json j = config.to_json();
  j.erase("jobs");
  j.erase("out");
  return phantom::fnv1a_hex(j.dump());
}

void echo_config(const ExperimentConfig& config, const fs::path& dir) {
  fs::create_directories(dir);
  tc::write_file_atomic(dir / "config.json", config.to_json().dump(2) + "\n");
}

const std::vector<Variant>& ablation_variants() {
  static const std::vector<Variant> v = {
      {"A", false, false, false, "joint pre-training"},
      {"B", true, false, false, "meta, no regularization"},
      {"C", true, true, false, "meta + inter-tissue"},
      {"D", true, false, true, "meta + intra-tissue"},
      {"E", true, true, true, "meta + inter + intra"},
  };
  return v;
}

const Variant& find_variant(const std::string& name) {
  for (const Variant& v : ablation_variants()) {
    if (v.name == name) return v;
  }
  throw UsageError("unknown ablation variant '" + name + "' (expected A, B, C, D or E)");
}

ExperimentConfig apply_variant(const ExperimentConfig& config, const Variant& variant) {
  ExperimentConfig c = config;
  if (!variant.inter) c.train.weights.beta = 0.0;
  if (!variant.intra) c.train.weights.gamma = 0.0;
  return c;
}

}  // namespace dumeta::cli
