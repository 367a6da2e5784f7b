// Copyright 2026 The DuMeta Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <exception>
#include <iomanip>
#include <map>
#include <mutex>
#include <ostream>
#include <sstream>
#include <thread>

#include "dumeta/cli.hpp"
#include "dumeta/dtns.hpp"

namespace dumeta::cli {

using nlohmann::json;

namespace {

struct SeedResult {
  uint64_t seed = 0;
  std::map<std::string, json> variants;  // name -> eval report
  std::map<int, json> ft_layers;         // n -> eval report
  std::map<int, bool> ft_frozen_exact;
  bool diverged = false;
};

json read_json(const fs::path& p) { return json::parse(tc::read_file(p)); }

SeedResult run_seed(const ExperimentConfig& base, uint64_t seed, const fs::path& dir, std::ostream& log) {
  SeedResult r;
  r.seed = seed;
  ExperimentConfig cfg = base;
  cfg.seed = seed;
  const fs::path pool = dir / "pool";
  cmd_gendata(cfg, pool, true, log);
  for (const std::string& name : cfg.variants) {
    const Variant& v = find_variant(name);
    const ExperimentConfig vc = apply_variant(cfg, v);
    const fs::path vdir = dir / name;
    MetatrainOptions opts;
    opts.joint = !v.meta;
    if (cmd_metatrain(vc, pool, vdir / "train", opts, log) == kExitNumeric) r.diverged = true;
    cmd_finetune(vc, vdir / "train" / "best.ckpt", pool, vdir / "finetune", log);
    cmd_eval(vc, vdir / "finetune" / "head.ckpt", pool, vdir / "eval", log);
    r.variants[name] = read_json(vdir / "eval" / "report.json");
  }
  // fine-tune layer sweep on the last listed variant's meta-trained checkpoint
  if (!cfg.variants.empty() && !cfg.ablation_ft_layers.empty()) {
    const std::string src = cfg.variants.back();
    const ExperimentConfig vc = apply_variant(cfg, find_variant(src));
    for (int n : cfg.ablation_ft_layers) {
      ExperimentConfig fc = vc;
      fc.finetune.n_upsample_layers = n;
      fc.finetune.all = false;
      const fs::path ndir = dir / "ft_layers" / std::to_string(n);
      cmd_finetune(fc, dir / src / "train" / "best.ckpt", pool, ndir / "finetune", log);
      cmd_eval(fc, ndir / "finetune" / "head.ckpt", pool, ndir / "eval", log);
      r.ft_layers[n] = read_json(ndir / "eval" / "report.json");
      r.ft_frozen_exact[n] = read_json(ndir / "finetune" / "finetune.json")["frozen_bit_identical"].get<bool>();
    }
  }
  return r;
}

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? std::nan("") : s / static_cast<double>(v.size());
}

std::string fixed(double v, int digits) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

const char* kClassNames[3] = {"CSF", "GM", "WM"};

// Per-seed foreground Dice plus class means over seeds.
json summarize(const std::vector<const json*>& reports) {
  std::vector<double> fg;
  std::array<std::vector<double>, 3> cls;
  for (const json* r : reports) {
    fg.push_back((*r)["mean_foreground_dice"].get<double>());
    for (std::size_t c = 0; c < 3; ++c) cls[c].push_back((*r)["classes"][c]["dice_mean"].get<double>());
  }
  json j = {{"per_seed", fg}, {"mean", mean(fg)}};
  for (std::size_t c = 0; c < 3; ++c) j["class_mean"][kClassNames[c]] = mean(cls[c]);
  return j;
}

}  // namespace

AblationSummary run_ablations(const ExperimentConfig& config, const fs::path& out_dir, std::ostream& log) {
  config.validate();
  fs::create_directories(out_dir);
  echo_config(config, out_dir);

  const std::size_t n = config.seeds.size();
  std::vector<SeedResult> results(n);
  std::vector<std::exception_ptr> errors(n);
  std::mutex log_mutex;
  std::size_t next = 0;
  auto worker = [&] {
    for (;;) {
      std::size_t i;
      {
        std::lock_guard<std::mutex> lock(log_mutex);
        if (next >= n) return;
        i = next++;
      }
      const uint64_t seed = config.seeds[i];
      const fs::path dir = out_dir / ("seed_" + std::to_string(seed));
      std::ostringstream seed_log;
      try {
        fs::create_directories(dir);
        results[i] = run_seed(config, seed, dir, seed_log);
      } catch (...) {
        errors[i] = std::current_exception();
      }
      tc::write_file_atomic(dir / "log.txt", seed_log.str());
      std::lock_guard<std::mutex> lock(log_mutex);
      log << "seed " << seed << (errors[i] ? " failed" : " done");
      if (!errors[i]) {
        for (const auto& [name, rep] : results[i].variants) log << "  " << name << " " << fixed(rep["mean_foreground_dice"].get<double>(), 4);
      }
      log << "\n" << std::flush;
    }
  };
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(config.jobs), n);
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(worker);
  worker();
  for (std::thread& t : pool) t.join();
  for (const std::exception_ptr& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  AblationSummary out;
  json& rep = out.report;
  rep["seeds"] = config.seeds;
  std::ostringstream table;
  table << std::left << std::setw(4) << "row" << std::setw(26) << "variant" << std::right << std::setw(10) << "fg Dice" << std::setw(9)
        << "CSF" << std::setw(9) << "GM" << std::setw(9) << "WM" << "\n";
  std::map<std::string, double> means;
  for (const std::string& name : config.variants) {
    std::vector<const json*> reports;
    for (const SeedResult& r : results) reports.push_back(&r.variants.at(name));
    json s = summarize(reports);
    s["label"] = find_variant(name).label;
    means[name] = s["mean"].get<double>();
    table << std::left << std::setw(4) << name << std::setw(26) << find_variant(name).label << std::right << std::setw(10)
          << fixed(means[name], 4);
    for (const char* c : kClassNames) table << std::setw(9) << fixed(s["class_mean"][c].get<double>(), 4);
    table << "\n";
    rep["variants"][name] = s;
  }
  if (means.count("A") && means.count("B") && means.count("E")) {
    const double eb = means["E"] - means["B"], ba = means["B"] - means["A"];
    const bool holds = eb > 0.0 && ba > 0.0;
    rep["ordering"] = {{"E_minus_B", eb}, {"B_minus_A", ba}, {"E_gt_B_gt_A", holds}};
    table << "ordering E > B > A: " << (holds ? "holds" : "violated") << "  (E-B " << fixed(eb, 4) << ", B-A " << fixed(ba, 4)
          << ")\n";
  }
  if (!config.ablation_ft_layers.empty() && !config.variants.empty()) {
    table << "fine-tune layers (" << config.variants.back() << "):";
    bool frozen_exact = true;
    for (int k : config.ablation_ft_layers) {
      std::vector<const json*> reports;
      for (const SeedResult& r : results) {
        reports.push_back(&r.ft_layers.at(k));
        frozen_exact = frozen_exact && r.ft_frozen_exact.at(k);
      }
      json s = summarize(reports);
      rep["ft_layers"][std::to_string(k)] = s;
      table << "  n=" << k << " " << fixed(s["mean"].get<double>(), 4);
    }
    rep["ft_frozen_bit_identical"] = frozen_exact;
    table << "\n";
  }
  for (const SeedResult& r : results) out.diverged = out.diverged || r.diverged;
  rep["diverged"] = out.diverged;
  out.table = table.str();
  tc::write_file_atomic(out_dir / "ablation_report.json", rep.dump(2) + "\n");
  tc::write_file_atomic(out_dir / "ablation_report.txt", out.table);
  return out;
}

int cmd_run_ablations(const ExperimentConfig& config, const fs::path& out_dir, std::ostream& log) {
  const AblationSummary s = run_ablations(config, out_dir, log);
  log << s.table;
  return s.diverged ? kExitNumeric : kExitOk;
}

}  // namespace dumeta::cli
