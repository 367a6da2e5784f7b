// Copyright 2026 The DuMeta Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include <cstdlib>
#include <set>
#include <sstream>

#include "doctest.h"
#include "dumeta/checkpoint.hpp"
#include "dumeta/cli.hpp"
#include "dumeta/dtns.hpp"

using namespace dumeta;
using namespace dumeta::cli;
using nlohmann::json;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("dumeta_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

struct Run {
  int code = -1;
  std::string out, err;
};

Run run(std::vector<std::string> args) {
  args.insert(args.begin(), "dumeta");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  Run r;
  r.code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

// Small network, short runs: seconds per command.
fs::path tiny_config(const fs::path& dir, const json& extra = json::object()) {
  json c = {{"net.image_size", 16},      {"net.K", 2},
            {"net.base_width", 4},       {"train.episodes", 4},
            {"train.checkpoint_every", 2}, {"finetune.steps", 3},
            {"finetune.layers", 1},      {"ablation.ft_layers", {0, 1}},
            {"seeds", {0, 1}}};
  auto specs = phantom::default_specs();
  json groups = json::array();
  for (auto& s : specs) {
    s.subjects = s.name == "6m-like" ? 10 : 6;
    groups.push_back(phantom::to_json(s));
  }
  c["data.groups"] = groups;
  c.update(extra);
  const fs::path p = dir / "config.json";
  tc::write_file_atomic(p, c.dump());
  return p;
}

std::string read(const fs::path& p) { return tc::read_file(p); }

std::vector<json> read_jsonl(const fs::path& p) {
  std::vector<json> out;
  std::istringstream in(read(p));
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(json::parse(line));
  }
  return out;
}

}  // namespace

TEST_CASE("defaults cover every key and round-trip") {
  const json d = default_config_json();
  CHECK(d.is_object());
  for (const char* key : {"seed", "seeds", "jobs", "net.K", "train.alpha0", "train.momentum", "train.weight_decay", "train.hypergrad_mode",
                          "train.shared_outer_batches", "loss.beta", "loss.gamma", "loss.deep_supervision", "loss.intra_mode",
                          "finetune.shots", "finetune.layers", "finetune.steps", "finetune.alpha", "pool", "out"}) {
    CHECK_MESSAGE(d.contains(key), key);
  }
  CHECK(d["train.alpha0"] == 0.01);
  CHECK(d["train.momentum"] == 0.99);
  CHECK(d["train.weight_decay"] == 3e-5);
  CHECK(d["loss.beta"] == 0.1);
  CHECK(d["loss.gamma"] == 0.001);
  const ExperimentConfig c = ExperimentConfig::from_json(d);
  CHECK(c.to_json() == d);
  CHECK(c.train.weights.deep_supervision == std::vector<double>{1.0, 0.5, 0.25});

  const Run r = run({"--print-defaults"});
  CHECK(r.code == 0);
  CHECK(json::parse(r.out) == d);
}

TEST_CASE("config validation rejects unknown keys, bad types and bad layer counts") {
  CHECK_THROWS_AS(ExperimentConfig::from_json({{"train.alpha", 0.1}}), UsageError);
  CHECK_THROWS_AS(ExperimentConfig::from_json({{"train.episodes", "many"}}), UsageError);
  CHECK_THROWS_AS(ExperimentConfig::from_json({{"train.episodes", 1.5}}), UsageError);
  CHECK_THROWS_AS(ExperimentConfig::from_json({{"train.hypergrad_mode", "second-order"}}), UsageError);
  CHECK_THROWS_AS(ExperimentConfig::from_json({{"ablation.variants", {"F"}}}), UsageError);
  for (int n = 0; n <= 2; ++n) CHECK_NOTHROW(ExperimentConfig::from_json({{"finetune.layers", n}}));
  CHECK_THROWS_AS(ExperimentConfig::from_json({{"finetune.layers", 3}}), UsageError);
  const ExperimentConfig k2 = ExperimentConfig::from_json({{"net.K", 2}, {"ablation.ft_layers", {0, 1}}, {"finetune.layers", 1}});
  CHECK(k2.train.weights.deep_supervision == std::vector<double>{1.0, 0.5});
  CHECK(ExperimentConfig::from_json({{"train.alpha0", 1}}).train.alpha0 == 1.0);
}

TEST_CASE("seed precedence: config, DUOMETA_SEED, --seed") {
  const fs::path dir = scratch("seed");
  tc::write_file_atomic(dir / "c.json", R"({"seed": 5})");
  CHECK(load_config(dir / "c.json", {}, nullptr).seed == 5);
  CHECK(load_config(dir / "c.json", {}, "42").seed == 42);
  CHECK(load_config(dir / "c.json", {"seed=7"}, "42").seed == 42);
  CHECK_THROWS_AS(load_config(std::nullopt, {}, "abc"), UsageError);
  CHECK_THROWS_AS(load_config(dir / "missing.json", {}, nullptr), MissingArtifact);
  CHECK(load_config(std::nullopt, {"out=somewhere"}, nullptr).out == "somewhere");

  ::setenv("DUOMETA_SEED", "11", 1);
  Run r = run({"--config", (dir / "c.json").string(), "gendata", "--out", (dir / "p1").string()});
  CHECK(r.code == 0);
  CHECK(r.out.find("seed 11") != std::string::npos);
  r = run({"--config", (dir / "c.json").string(), "--seed", "3", "gendata", "--out", (dir / "p2").string()});
  CHECK(r.out.find("seed 3") != std::string::npos);
  ::unsetenv("DUOMETA_SEED");
  fs::remove_all(dir);
}

TEST_CASE("gendata writes a pool, is reproducible and guards its output") {
  const fs::path dir = scratch("gendata");
  const std::string cfg = tiny_config(dir).string();
  Run r = run({"--config", cfg, "gendata", "--out", (dir / "a").string()});
  REQUIRE(r.code == 0);
  CHECK(fs::exists(dir / "a" / "manifest.json"));
  CHECK(fs::exists(dir / "a" / "config.json"));
  for (const char* g : {"12m-like", "24m-like", "elderly-like", "6m-like"}) CHECK(fs::is_directory(dir / "a" / g));
  const auto hash_line = [](const std::string& out) { return out.substr(out.find("manifest hash")); };

  Run again = run({"--config", cfg, "gendata", "--out", (dir / "b").string()});
  CHECK(hash_line(again.out) == hash_line(r.out));
  CHECK(read(dir / "a" / "manifest.json") == read(dir / "b" / "manifest.json"));

  Run other = run({"--config", cfg, "--seed", "9", "gendata", "--out", (dir / "c").string()});
  CHECK(hash_line(other.out) != hash_line(r.out));

  Run busy = run({"--config", cfg, "gendata", "--out", (dir / "a").string()});
  CHECK(busy.code == kExitUsage);
  CHECK(busy.err.find("--force") != std::string::npos);
  CHECK(run({"--config", cfg, "gendata", "--out", (dir / "a").string(), "--force"}).code == 0);

  json two = json::array();
  for (int i = 0; i < 2; ++i) two.push_back(phantom::to_json(phantom::default_specs()[static_cast<std::size_t>(i)]));
  tc::write_file_atomic(dir / "groups.json", two.dump());
  Run bad = run({"gendata", "--out", (dir / "d").string(), "--groups", (dir / "groups.json").string()});
  CHECK(bad.code == kExitUsage);
  CHECK(bad.err.find("3 training groups + 1 unseen test group") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("metatrain logs, checkpoints, modes and determinism") {
  const fs::path dir = scratch("metatrain");
  const std::string cfg = tiny_config(dir).string();
  const std::string pool = (dir / "pool").string();
  REQUIRE(run({"--config", cfg, "gendata", "--out", pool}).code == 0);

  Run r = run({"--config", cfg, "metatrain", "--pool", pool, "--out", (dir / "t1").string(), "--episodes", "1"});
  REQUIRE(r.code == 0);
  CHECK(read_jsonl(dir / "t1" / "episodes.jsonl").size() == 1);
  CHECK(fs::exists(dir / "t1" / "best.ckpt"));
  CHECK(json::parse(read(dir / "t1" / "config.json"))["train.episodes"] == 1);

  REQUIRE(run({"--config", cfg, "metatrain", "--pool", pool, "--out", (dir / "ex").string()}).code == 0);
  REQUIRE(run({"--config", cfg, "metatrain", "--pool", pool, "--out", (dir / "fo").string(), "--hypergrad-mode", "first-order"}).code == 0);
  const auto ex = read_jsonl(dir / "ex" / "episodes.jsonl");
  const auto fo = read_jsonl(dir / "fo" / "episodes.jsonl");
  REQUIRE(ex.size() == 4);
  REQUIRE(fo.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(ex[i]["t"] == static_cast<int>(i));
    CHECK(ex[i]["indirect_norm"].get<double>() > 0.0);
    CHECK(fo[i]["indirect_norm"].get<double>() == 0.0);
  }
  const seg::Checkpoint best = seg::load_checkpoint(dir / "ex" / "best.ckpt");
  CHECK(best.has(tc::ParamRole::Extractor));
  CHECK(best.has(tc::ParamRole::HeadInit));
  CHECK(best.meta["kind"] == "meta");

  // rerun with identical config and seed
  REQUIRE(run({"--config", cfg, "metatrain", "--pool", pool, "--out", (dir / "ex2").string()}).code == 0);
  for (const char* f : {"episodes.jsonl", "val.jsonl", "best.ckpt", "state.ckpt", "summary.json", "config.json"}) {
    CHECK_MESSAGE(read(dir / "ex" / f) == read(dir / "ex2" / f), f);
  }

  // resume from the mid-run snapshot reproduces the uninterrupted run
  fs::copy(dir / "ex", dir / "rs", fs::copy_options::recursive);
  fs::remove(dir / "rs" / "states" / "state-000004.ckpt");
  Run rs = run({"--config", cfg, "metatrain", "--pool", pool, "--out", (dir / "rs").string(), "--resume",
                (dir / "rs" / "states" / "state-000002.ckpt").string()});
  REQUIRE(rs.code == 0);
  const auto resumed = read_jsonl(dir / "rs" / "episodes.jsonl");
  REQUIRE(resumed.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) CHECK(resumed[i]["t"] == static_cast<int>(i));
  for (const char* f : {"episodes.jsonl", "val.jsonl", "best.ckpt", "state.ckpt"}) CHECK_MESSAGE(read(dir / "ex" / f) == read(dir / "rs" / f), f);

  Run wrong_kind = run({"--config", cfg, "metatrain", "--joint", "--pool", pool, "--out", (dir / "j").string(), "--resume",
                        (dir / "ex" / "states" / "state-000002.ckpt").string()});
  CHECK(wrong_kind.code == kExitUsage);
  REQUIRE(run({"--config", cfg, "metatrain", "--joint", "--pool", pool, "--out", (dir / "j").string()}).code == 0);
  CHECK(seg::load_checkpoint(dir / "j" / "best.ckpt").meta["kind"] == "joint");
  CHECK(run({"--config", cfg, "metatrain", "--pool", (dir / "nowhere").string(), "--out", (dir / "x").string()}).code == kExitMissing);
  fs::remove_all(dir);
}

TEST_CASE("divergence exits with the numerical code and keeps the last good checkpoint") {
  const fs::path dir = scratch("diverge");
  const std::string cfg = tiny_config(dir, {{"train.alpha0", 1e200}}).string();
  const std::string pool = (dir / "pool").string();
  REQUIRE(run({"--config", cfg, "gendata", "--out", pool}).code == 0);
  Run r = run({"--config", cfg, "metatrain", "--pool", pool, "--out", (dir / "m").string()});
  CHECK(r.code == kExitNumeric);
  CHECK(r.code != kExitUsage);
  const json summary = json::parse(read(dir / "m" / "summary.json"));
  CHECK(summary["diverged"] == true);
  REQUIRE(fs::exists(dir / "m" / "best.ckpt"));
  const seg::Checkpoint best = seg::load_checkpoint(dir / "m" / "best.ckpt");
  CHECK(best.meta["t"] == 0);
  CHECK(std::isfinite(best.meta["val_loss"].get<double>()));
  fs::remove_all(dir);
}

TEST_CASE("finetune: seeded shots, layer bounds, zero steps, missing checkpoint") {
  const fs::path dir = scratch("finetune");
  const std::string cfg = tiny_config(dir).string();
  const std::string pool = (dir / "pool").string();
  REQUIRE(run({"--config", cfg, "gendata", "--out", pool}).code == 0);
  REQUIRE(run({"--config", cfg, "metatrain", "--pool", pool, "--out", (dir / "m").string()}).code == 0);
  const std::string ckpt = (dir / "m" / "best.ckpt").string();

  std::set<std::string> picked;
  for (int seed = 0; seed < 6; ++seed) {
    const fs::path out = dir / ("s" + std::to_string(seed));
    REQUIRE(run({"--config", cfg, "--seed", std::to_string(seed), "finetune", "--checkpoint", ckpt, "--pool", pool, "--out", out.string(),
                 "--shots", "1"})
                .code == 0);
    const json info = json::parse(read(out / "finetune.json"));
    REQUIRE(info["shots"].size() == 1);
    picked.insert(info["shots"][0].get<std::string>());
    CHECK(info["frozen_bit_identical"] == true);
  }
  CHECK(picked.size() > 1);
  const phantom::MetaPool p = phantom::load_pool(pool);
  CHECK(select_shots(p.test_group, 1, 4) == select_shots(p.test_group, 1, 4));
  for (int i : select_shots(p.test_group, 3, 4)) {
    CHECK(std::find(p.test_group.train.begin(), p.test_group.train.end(), i) != p.test_group.train.end());
  }

  for (int n = 0; n <= 1; ++n) {
    CHECK(run({"--config", cfg, "finetune", "--checkpoint", ckpt, "--pool", pool, "--out", (dir / "n").string(), "--ft-layers",
               std::to_string(n)})
              .code == 0);
  }
  Run k = run({"--config", cfg, "finetune", "--checkpoint", ckpt, "--pool", pool, "--out", (dir / "n").string(), "--ft-layers", "2"});
  CHECK(k.code == kExitUsage);

  REQUIRE(run({"--config", cfg, "finetune", "--checkpoint", ckpt, "--pool", pool, "--out", (dir / "z").string(), "--steps", "0"}).code == 0);
  const seg::Checkpoint src = seg::load_checkpoint(ckpt), head = seg::load_checkpoint(dir / "z" / "head.ckpt");
  CHECK(head.get(tc::ParamRole::Head).bitwise_equal(src.get(tc::ParamRole::HeadInit).with_role(tc::ParamRole::Head)));
  CHECK(head.get(tc::ParamRole::Extractor).bitwise_equal(src.get(tc::ParamRole::Extractor)));

  Run missing = run({"--config", cfg, "finetune", "--checkpoint", (dir / "none.ckpt").string(), "--pool", pool});
  CHECK(missing.code == kExitMissing);
  fs::remove_all(dir);
}

TEST_CASE("eval: oracle, reproducibility, class order, missing files") {
  const fs::path dir = scratch("eval");
  const std::string cfg = tiny_config(dir).string();
  const std::string pool = (dir / "pool").string();
  REQUIRE(run({"--config", cfg, "gendata", "--out", pool}).code == 0);

  write_oracle_checkpoint(dir / "oracle.ckpt");
  REQUIRE(run({"--config", cfg, "eval", "--checkpoint", (dir / "oracle.ckpt").string(), "--pool", pool, "--out", (dir / "o").string()})
              .code == 0);
  const json o = json::parse(read(dir / "o" / "report.json"));
  REQUIRE(o["classes"].size() == 3);
  const char* names[] = {"CSF", "GM", "WM"};
  for (std::size_t c = 0; c < 3; ++c) {
    CHECK(o["classes"][c]["class"] == names[c]);
    CHECK(o["classes"][c]["dice_mean"] == 1.0);
    CHECK(o["classes"][c]["asd_mean"] == 0.0);
  }
  CHECK(o["subjects"] == 2);
  const std::string table = read(dir / "o" / "report.txt");
  CHECK(table.find("CSF") < table.find("GM"));
  CHECK(table.find("GM") < table.find("WM"));

  REQUIRE(run({"--config", cfg, "metatrain", "--pool", pool, "--out", (dir / "m").string()}).code == 0);
  REQUIRE(run({"--config", cfg, "finetune", "--checkpoint", (dir / "m" / "best.ckpt").string(), "--pool", pool, "--out",
               (dir / "f").string()})
              .code == 0);
  for (const char* out : {"e1", "e2"}) {
    REQUIRE(run({"--config", cfg, "eval", "--checkpoint", (dir / "f" / "head.ckpt").string(), "--pool", pool, "--out",
                 (dir / out).string()})
                .code == 0);
  }
  CHECK(read(dir / "e1" / "report.json") == read(dir / "e2" / "report.json"));
  CHECK(read(dir / "e1" / "report.txt") == read(dir / "e2" / "report.txt"));

  CHECK(run({"--config", cfg, "eval", "--checkpoint", (dir / "nope.ckpt").string(), "--pool", pool}).code == kExitMissing);
  CHECK(run({"--config", cfg, "eval", "--checkpoint", (dir / "oracle.ckpt").string(), "--pool", (dir / "nope").string()}).code ==
        kExitMissing);
  tc::write_file_atomic(dir / "junk.ckpt", "not a checkpoint");
  CHECK(run({"--config", cfg, "eval", "--checkpoint", (dir / "junk.ckpt").string(), "--pool", pool}).code == kExitMissing);
  fs::remove_all(dir);
}

TEST_CASE("gradcheck passes and reports mode semantics") {
  const fs::path dir = scratch("gradcheck");
  const Run r = run({"gradcheck", "--out", dir.string()});
  CHECK(r.code == 0);
  const json j = json::parse(read(dir / "gradcheck.json"));
  CHECK(j["pass"] == true);
  CHECK(j["toy"]["max_rel_err"].get<double>() < 1e-8);
  CHECK(j["segnet"]["max_rel_err"].get<double>() < 1e-5);
  CHECK(j["segnet"]["params"].get<int>() <= 2000);
  CHECK(j["modes"]["exact_indirect_norm"].get<double>() > 0.0);
  CHECK(j["modes"]["first_order_indirect_norm"].get<double>() == 0.0);
  CHECK(r.out.find("PASS") != std::string::npos);

  CHECK(run({"--set", "train.fd_param_limit=100", "gradcheck"}).code == kExitUsage);
  CHECK(run({"--set", "gradcheck.segnet_tolerance=1e-30", "gradcheck"}).code == kExitNumeric);
  fs::remove_all(dir);
}

TEST_CASE("run-paper-ablations: report structure and worker-count independence") {
  const fs::path dir = scratch("ablations");
  const std::string cfg = tiny_config(dir, {{"train.episodes", 2}, {"variants", nullptr}}).string();
  // "variants" is not a config key
  CHECK(run({"--config", cfg, "run-paper-ablations"}).code == kExitUsage);

  const std::string good = tiny_config(dir, {{"train.episodes", 2}, {"ablation.variants", {"A", "B", "E"}}}).string();
  const Run one = run({"--config", good, "run-paper-ablations", "--out", (dir / "j1").string(), "--jobs", "1"});
  REQUIRE(one.code == 0);
  const Run two = run({"--config", good, "run-paper-ablations", "--out", (dir / "j2").string(), "--jobs", "2"});
  REQUIRE(two.code == 0);
  CHECK(read(dir / "j1" / "ablation_report.json") == read(dir / "j2" / "ablation_report.json"));
  const json rep = json::parse(read(dir / "j1" / "ablation_report.json"));
  for (const char* v : {"A", "B", "E"}) {
    CHECK(rep["variants"][v]["per_seed"].size() == 2);
  }
  CHECK(rep.contains("ordering"));
  CHECK(rep["ft_layers"].contains("0"));
  CHECK(rep["ft_layers"].contains("1"));
  CHECK(rep["ft_frozen_bit_identical"] == true);
  for (const char* seed : {"seed_0", "seed_1"}) {
    CHECK(fs::exists(dir / "j1" / seed / "pool" / "manifest.json"));
    CHECK(fs::exists(dir / "j1" / seed / "E" / "eval" / "report.json"));
    CHECK(fs::exists(dir / "j1" / seed / "A" / "train" / "config.json"));
  }
  CHECK(read(dir / "j1" / "seed_1" / "B" / "train" / "best.ckpt") == read(dir / "j2" / "seed_1" / "B" / "train" / "best.ckpt"));
  fs::remove_all(dir);
}

TEST_CASE("usage errors") {
  CHECK(run({}).code == kExitUsage);
  CHECK(run({"frobnicate"}).code == kExitUsage);
  CHECK(run({"gendata", "--no-such-flag"}).code == kExitUsage);
  CHECK(run({"finetune"}).code == kExitUsage);  // --checkpoint is required
  CHECK(run({"--help"}).code == 0);
}
