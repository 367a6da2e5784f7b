// Copyright 2026 The DuMeta Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include <cstdlib>
#include <ostream>

#include "CLI11.hpp"
#include "dumeta/cli.hpp"
#include "dumeta/dtns.hpp"

namespace dumeta::cli {

using nlohmann::json;

namespace {

struct Args {
  std::string config_file;
  std::vector<std::string> sets;
  std::optional<uint64_t> seed;
  bool print_defaults = false;

  std::string out, pool, checkpoint, groups, resume, mode;
  bool force = false, joint = false, ft_all = false;
  std::optional<int> episodes, shots, ft_layers, steps, jobs;
  std::vector<uint64_t> seeds;
};

ExperimentConfig resolve(const Args& a, const std::vector<std::string>& extra) {
  std::vector<std::string> overrides = a.sets;
  overrides.insert(overrides.end(), extra.begin(), extra.end());
  if (a.seed) overrides.push_back("seed=" + std::to_string(*a.seed));
  const char* env = a.seed ? nullptr : std::getenv("DUOMETA_SEED");
  const std::optional<fs::path> file = a.config_file.empty() ? std::nullopt : std::optional<fs::path>(a.config_file);
  return load_config(file, overrides, env);
}

std::string flag(const std::string& key, const json& value) { return key + "=" + value.dump(); }

int dispatch(CLI::App& app, const Args& a, std::ostream& out) {
  if (a.print_defaults) {
    out << default_config_json().dump(2) << "\n";
    return kExitOk;
  }
  std::vector<std::string> extra;
  if (a.episodes) extra.push_back(flag("train.episodes", *a.episodes));
  if (!a.mode.empty()) extra.push_back(flag("train.hypergrad_mode", a.mode));
  if (a.shots) extra.push_back(flag("finetune.shots", *a.shots));
  if (a.ft_layers) extra.push_back(flag("finetune.layers", *a.ft_layers));
  if (a.steps) extra.push_back(flag("finetune.steps", *a.steps));
  if (a.ft_all) extra.push_back(flag("finetune.all", true));
  if (a.jobs) extra.push_back(flag("jobs", *a.jobs));
  if (!a.seeds.empty()) extra.push_back(flag("seeds", a.seeds));
  if (!a.groups.empty()) {
    if (!fs::exists(a.groups)) throw MissingArtifact("groups file not found: " + a.groups);
    const json g = json::parse(tc::read_file(a.groups), nullptr, false);
    if (g.is_discarded() || !g.is_array()) throw UsageError("--groups expects a JSON array of group specs");
    extra.push_back(flag("data.groups", g));
  }
  const ExperimentConfig cfg = resolve(a, extra);
  const fs::path pool = a.pool.empty() ? fs::path(cfg.pool) : fs::path(a.pool);
  auto out_or = [&](const std::string& fallback) { return a.out.empty() ? fs::path(cfg.out) / fallback : fs::path(a.out); };

  if (app.got_subcommand("gendata")) return cmd_gendata(cfg, a.out.empty() ? pool : fs::path(a.out), a.force, out);
  if (app.got_subcommand("metatrain")) {
    MetatrainOptions o;
    o.joint = a.joint;
    if (!a.resume.empty()) o.resume = fs::path(a.resume);
    return cmd_metatrain(cfg, pool, out_or(a.joint ? "joint" : "meta"), o, out);
  }
  if (app.got_subcommand("finetune")) return cmd_finetune(cfg, a.checkpoint, pool, out_or("finetune"), out);
  if (app.got_subcommand("eval")) return cmd_eval(cfg, a.checkpoint, pool, out_or("eval"), out);
  if (app.got_subcommand("gradcheck")) {
    return cmd_gradcheck(cfg, a.out.empty() ? std::nullopt : std::optional<fs::path>(a.out), out);
  }
  if (app.got_subcommand("run-paper-ablations")) return cmd_run_ablations(cfg, out_or("ablations"), out);
  throw UsageError("no command given; see --help");
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"DuMeta lab: dual meta-learning on synthetic brain phantoms", "dumeta"};
  app.fallthrough();
  app.require_subcommand(0, 1);
  Args a;
  app.add_option("--config", a.config_file, "flat JSON config with dotted keys");
  app.add_option("--set", a.sets, "config override key=value (repeatable)")->allow_extra_args(false);
  app.add_option("--seed", a.seed, "seed; overrides DUOMETA_SEED and the config");
  app.add_flag("--print-defaults", a.print_defaults, "print every config key with its default and exit");

  CLI::App* gendata = app.add_subcommand("gendata", "generate and persist a phantom pool");
  gendata->add_option("--out", a.out, "pool directory (default: config 'pool')");
  gendata->add_flag("--force", a.force, "overwrite a non-empty output directory");
  gendata->add_option("--groups", a.groups, "JSON array of 3 training + 1 unseen group specs");

  CLI::App* metatrain = app.add_subcommand("metatrain", "meta-train θ and φ (or joint-train with --joint)");
  metatrain->add_option("--pool", a.pool, "pool directory");
  metatrain->add_option("--out", a.out, "run directory");
  metatrain->add_option("--hypergrad-mode", a.mode, "exact | first-order | finite-diff-check");
  metatrain->add_option("--episodes", a.episodes, "episode count T");
  metatrain->add_flag("--joint", a.joint, "joint pre-training baseline instead of meta-training");
  metatrain->add_option("--resume", a.resume, "state.ckpt of an earlier run");

  CLI::App* finetune = app.add_subcommand("finetune", "one-shot fine-tune of the head on the unseen group");
  finetune->add_option("--checkpoint", a.checkpoint, "best.ckpt from metatrain")->required();
  finetune->add_option("--pool", a.pool, "pool directory");
  finetune->add_option("--out", a.out, "output directory");
  finetune->add_option("--shots", a.shots, "labelled subjects drawn from the unseen group");
  finetune->add_option("--ft-layers", a.ft_layers, "decoder blocks to fine-tune, 0..K-1");
  finetune->add_option("--steps", a.steps, "fine-tune steps (0 keeps the initialization)");
  finetune->add_flag("--ft-all", a.ft_all, "fine-tune every head parameter");

  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on the unseen group's test split");
  eval->add_option("--checkpoint", a.checkpoint, "head.ckpt from finetune (or any checkpoint with a head)")->required();
  eval->add_option("--pool", a.pool, "pool directory");
  eval->add_option("--out", a.out, "output directory");

  CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference hypergradient oracle");
  gradcheck->add_option("--out", a.out, "optional directory for gradcheck.json");

  CLI::App* ablations = app.add_subcommand("run-paper-ablations", "variants A-E and the fine-tune layer sweep over a seed list");
  ablations->add_option("--out", a.out, "output directory");
  ablations->add_option("--jobs", a.jobs, "parallel seed workers");
  ablations->add_option("--seeds", a.seeds, "seed list");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }
  try {
    return dispatch(app, a, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const MissingArtifact& e) {
    err << "error: " << e.what() << "\n";
    return kExitMissing;
  } catch (const tc::FormatError& e) {
    err << "error: " << e.what() << "\n";
    return kExitMissing;
  } catch (const tc::NumericError& e) {
    err << "numerical failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace dumeta::cli
