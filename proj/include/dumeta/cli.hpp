// Copyright 2026 The DuMeta Lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dumeta/duometa.hpp"
#include "dumeta/metrics.hpp"
#include "dumeta/phantoms.hpp"
#include "dumeta/segnet.hpp"
#include "json.hpp"

namespace dumeta::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kExitOk = 0, kExitUsage = 2, kExitNumeric = 3, kExitMissing = 4 };

class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class MissingArtifact : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct GradcheckSettings {
  int64_t image_size = 8;
  int K = 2;
  int64_t base_width = 2;
  double alpha = 0.01;
  double eps = 1e-4;
  double min_margin = 1e-3;
  double toy_tolerance = 1e-8;
  double segnet_tolerance = 1e-5;
};

struct ExperimentConfig {
  uint64_t seed = 0;
  std::vector<uint64_t> seeds = {0, 1, 2, 3, 4};
  int jobs = 1;
  std::string out = "runs";
  std::string pool = "pool";
  std::vector<phantom::AgeGroupSpec> groups = phantom::default_specs();
  seg::NetConfig net;
  meta::TrainConfig train = [] {
    meta::TrainConfig t;
    t.episodes = 300;
    t.checkpoint_every = 30;
    return t;
  }();
  int shots = 1;
  meta::FineTuneConfig finetune;
  double spacing = 1.0;
  GradcheckSettings gradcheck;
  std::vector<std::string> variants = {"A", "B", "C", "D", "E"};
  std::vector<int> ablation_ft_layers = {0, 1, 2};

  /// Flat object with dotted keys, every field present.
  nlohmann::json to_json() const;
  /// Overlays `flat` on the defaults; unknown keys and type mismatches throw UsageError.
  static ExperimentConfig from_json(const nlohmann::json& flat);
  /// Cross-field checks; throws UsageError.
  void validate() const;
};

nlohmann::json default_config_json();

/// Defaults, then the config file, then `key=value` overrides (value parsed
/// as JSON, falling back to a string), then DUOMETA_SEED when set.
ExperimentConfig load_config(const std::optional<fs::path>& file, const std::vector<std::string>& overrides,
                             const char* env_seed);

/// Digest of the canonical config dump without the execution-only keys
/// `jobs` and `out`.
std::string config_hash(const ExperimentConfig& config);

/// Writes config.json into `dir` (created if needed).
void echo_config(const ExperimentConfig& config, const fs::path& dir);

struct Variant {
  std::string name;
  bool meta = true;
  bool inter = true;
  bool intra = true;
  std::string label;
};

/// Regularization ablation rows: A joint baseline, B meta without
/// regularizers, C inter only, D intra only, E both.
const std::vector<Variant>& ablation_variants();
const Variant& find_variant(const std::string& name);
/// Copy of `config` with β/γ zeroed as the variant requires.
ExperimentConfig apply_variant(const ExperimentConfig& config, const Variant& variant);

struct MetatrainOptions {
  bool joint = false;  // baseline A: joint pre-training instead of meta-training
  std::optional<fs::path> resume;
};

struct GradcheckReport {
  double toy_max_rel_err = 0.0;
  double toy_indirect_norm = 0.0;
  int64_t segnet_params = 0;  // θ and ω of the tiny network
  meta::SegnetGradcheck segnet;
  double exact_indirect_norm = 0.0;
  double first_order_indirect_norm = 0.0;
  bool toy_pass = false;
  bool segnet_pass = false;
  bool modes_pass = false;

  bool passed() const { return toy_pass && segnet_pass && modes_pass; }
  nlohmann::json to_json() const;
};

/// Finite-difference hypergradient oracle on the quadratic toy and on a tiny
/// segmentation network over one phantom image per batch.
GradcheckReport run_gradcheck(const ExperimentConfig& config);

struct AblationSummary {
  nlohmann::json report;  // also written as ablation_report.json
  std::string table;      // also written as ablation_report.txt
  bool diverged = false;
};

/// gendata, metatrain, finetune and eval per seed and variant, plus the
/// fine-tune layer sweep; seeds run on up to `config.jobs` workers.
AblationSummary run_ablations(const ExperimentConfig& config, const fs::path& out_dir, std::ostream& log);

/// Library entry points. Each writes artifacts under `out_dir`, prints a
/// short human summary to `log` and returns an exit code; errors surface as
/// UsageError, MissingArtifact, tc::NumericError or tc::FormatError.
int cmd_gendata(const ExperimentConfig& config, const fs::path& out_dir, bool force, std::ostream& log);
int cmd_metatrain(const ExperimentConfig& config, const fs::path& pool_dir, const fs::path& out_dir, const MetatrainOptions& options,
                  std::ostream& log);
int cmd_finetune(const ExperimentConfig& config, const fs::path& checkpoint, const fs::path& pool_dir, const fs::path& out_dir,
                 std::ostream& log);
int cmd_eval(const ExperimentConfig& config, const fs::path& checkpoint, const fs::path& pool_dir, const fs::path& out_dir,
             std::ostream& log);
int cmd_gradcheck(const ExperimentConfig& config, const std::optional<fs::path>& out_dir, std::ostream& log);
int cmd_run_ablations(const ExperimentConfig& config, const fs::path& out_dir, std::ostream& log);

/// Checkpoint whose evaluation predicts the ground truth; for harness tests.
void write_oracle_checkpoint(const fs::path& path);

/// Seeded choice of `shots` subjects from the unseen group's training split.
std::vector<int> select_shots(const phantom::Group& group, int shots, uint64_t seed);

/// Resumable meta-training state (parameters, optimizer buffers, t, seed).
void save_state(const fs::path& path, const meta::MetaState& state, const nlohmann::json& meta);
meta::MetaState load_state(const fs::path& path);

/// Parses argv, dispatches and maps exceptions to exit codes.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace dumeta::cli
