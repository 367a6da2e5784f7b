// Copyright 2026 The DuMeta Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <random>

#include "dumeta/checkpoint.hpp"
#include "dumeta/cli.hpp"
#include "dumeta/dtns.hpp"
#include "dumeta/ops.hpp"
#include "dumeta/seeding.hpp"

namespace dumeta::cli {

using nlohmann::json;
using tc::ParamRole;
using tc::ParamSet;
using tc::Tensor;

namespace {

constexpr uint64_t kShotStream = 0x53484f54;  // "SHOT"
constexpr uint64_t kToyStream = 0x544f5920;   // "TOY "

json net_json(const seg::NetConfig& n) {
  return {{"K", n.K}, {"base_width", n.base_width}, {"image_size", n.image_size}, {"norm", n.norm}, {"num_classes", n.num_classes}};
}

phantom::MetaPool open_pool(const fs::path& dir, const ExperimentConfig& config) {
  if (!fs::exists(dir / "manifest.json")) throw MissingArtifact("pool not found: " + (dir / "manifest.json").string());
  phantom::MetaPool pool = phantom::load_pool(dir);
  if (pool.image_size != config.net.image_size) {
    throw UsageError("pool " + dir.string() + " holds " + std::to_string(pool.image_size) + "px images but net.image_size is " +
                     std::to_string(config.net.image_size));
  }
  return pool;
}

seg::Checkpoint open_checkpoint(const fs::path& path, const ExperimentConfig& config) {
  if (!fs::exists(path)) throw MissingArtifact("checkpoint not found: " + path.string());
  seg::Checkpoint ck = seg::load_checkpoint(path);
  if (ck.meta.contains("net") && ck.meta["net"] != net_json(config.net)) {
    throw UsageError("checkpoint " + path.string() + " was written for net " + ck.meta["net"].dump() + ", config has " +
                     net_json(config.net).dump());
  }
  return ck;
}

void append_line(const fs::path& path, const json& record) {
  std::ofstream f(path, std::ios::app | std::ios::binary);
  if (!f) throw std::runtime_error("cannot append to " + path.string());
  f << record.dump() << '\n';
}

// Keeps the JSONL records whose `t` satisfies `keep`.
void filter_log(const fs::path& path, const std::function<bool(int64_t)>& keep) {
  if (!fs::exists(path)) return;
  std::ifstream in(path, std::ios::binary);
  std::string line, kept;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line, nullptr, false);
    if (!j.is_discarded() && j.contains("t") && keep(j["t"].get<int64_t>())) kept += line + "\n";
  }
  in.close();
  tc::write_file_atomic(path, kept);
}

void write_json(const fs::path& path, const json& j) { tc::write_file_atomic(path, j.dump(2) + "\n"); }

std::string fixed(double v, int digits) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

std::string sci(double v) {
  std::ostringstream s;
  s << std::scientific << std::setprecision(3) << v;
  return s.str();
}

}  // namespace

std::vector<int> select_shots(const phantom::Group& group, int shots, uint64_t seed) {
  if (shots < 1 || static_cast<std::size_t>(shots) > group.train.size()) {
    throw UsageError("shots must lie in [1, " + std::to_string(group.train.size()) + "] for group '" + group.spec.name + "'");
  }
  std::vector<int> pick = group.train;
  std::mt19937_64 rng(derive_seed(seed, {kShotStream}));
  std::shuffle(pick.begin(), pick.end(), rng);
  pick.resize(static_cast<std::size_t>(shots));
  return pick;
}

void save_state(const fs::path& path, const meta::MetaState& state, const json& meta) {
  std::vector<ParamSet> sets = {state.theta.with_role(ParamRole::Extractor), state.phi.with_role(ParamRole::HeadInit)};
  const bool buffers = !state.theta_buffers.empty() && !state.phi_buffers.empty();
  if (buffers) {
    sets.push_back(state.theta_buffers.with_role(ParamRole::Extractor));
    sets.push_back(state.phi_buffers.with_role(ParamRole::HeadInit));
  }
  json m = meta;
  m["kind"] = m.value("kind", std::string("state"));
  m["t"] = state.t;
  m["seed"] = state.seed;
  m["buffers"] = buffers;
  seg::save_checkpoint(path, sets, m);
}

meta::MetaState load_state(const fs::path& path) {
  if (!fs::exists(path)) throw MissingArtifact("state checkpoint not found: " + path.string());
  const seg::Checkpoint ck = seg::load_checkpoint(path);
  const bool buffers = ck.meta.value("buffers", false);
  const std::size_t expected = buffers ? 4 : 2;
  if (ck.sets.size() != expected || !ck.meta.contains("t") || !ck.meta.contains("seed")) {
    throw tc::FormatError(path.string() + ": not a training state checkpoint");
  }
  meta::MetaState s;
  s.theta = ck.sets[0];
  s.phi = ck.sets[1];
  if (buffers) {
    s.theta_buffers = ck.sets[2];
    s.phi_buffers = ck.sets[3];
  }
  s.t = ck.meta["t"].get<int64_t>();
  s.seed = ck.meta["seed"].get<uint64_t>();
  return s;
}

void write_oracle_checkpoint(const fs::path& path) {
  fs::create_directories(path.parent_path().empty() ? fs::path(".") : path.parent_path());
  seg::save_checkpoint(path, std::span<const ParamSet>{}, json{{"kind", "oracle"}});
}

int cmd_gendata(const ExperimentConfig& config, const fs::path& out_dir, bool force, std::ostream& log) {
  if (fs::exists(out_dir)) {
    if (!fs::is_directory(out_dir)) throw UsageError(out_dir.string() + " exists and is not a directory");
    if (!fs::is_empty(out_dir)) {
      if (!force) throw UsageError("output directory " + out_dir.string() + " is not empty; pass --force to overwrite");
      fs::remove_all(out_dir);
    }
  }
  phantom::MetaPool pool;
  try {
    pool = phantom::build_pool(config.groups, config.seed, config.net.image_size);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  phantom::save_pool(pool, out_dir);
  echo_config(config, out_dir);
  const std::string hash = phantom::fnv1a_hex(phantom::manifest(pool).dump());
  log << "pool " << out_dir.string() << ": seed " << pool.seed << ", " << pool.image_size << "x" << pool.image_size << "\n";
  auto line = [&](const phantom::Group& g, const char* split) {
    log << "  " << std::left << std::setw(14) << g.spec.name << std::right << std::setw(4) << g.subjects.size() << " subjects  train "
        << g.train.size() << "  " << split << " " << g.val.size() << "\n";
  };
  for (const phantom::Group& g : pool.train_groups) line(g, "val");
  line(pool.test_group, "test");
  log << "manifest hash " << hash << "\n";
  return kExitOk;
}

int cmd_metatrain(const ExperimentConfig& config, const fs::path& pool_dir, const fs::path& out_dir, const MetatrainOptions& options,
                  std::ostream& log) {
  const phantom::MetaPool pool = open_pool(pool_dir, config);
  const std::string kind = options.joint ? "joint" : "meta";
  const fs::path episodes = out_dir / "episodes.jsonl", vals = out_dir / "val.jsonl";
  const fs::path best_path = out_dir / "best.ckpt", state_path = out_dir / "state.ckpt";
  auto snapshot = [&](int64_t t) {
    std::ostringstream name;
    name << "state-" << std::setw(6) << std::setfill('0') << t << ".ckpt";
    return out_dir / "states" / name.str();
  };

  meta::MetaState start;
  double best_val = std::numeric_limits<double>::infinity();
  int64_t best_t = 0;
  if (options.resume) {
    start = load_state(*options.resume);
    const seg::Checkpoint rk = seg::load_checkpoint(*options.resume);
    if (rk.meta.value("kind", std::string()) != kind) {
      throw UsageError("cannot resume a '" + rk.meta.value("kind", std::string("?")) + "' run as '" + kind + "'");
    }
    if (rk.meta.contains("net") && rk.meta["net"] != net_json(config.net)) throw UsageError("resume state was written for another net");
    if (start.t > config.train.episodes) throw UsageError("resume state is past train.episodes");
    fs::create_directories(out_dir);
    const int64_t t0 = start.t;
    filter_log(episodes, [t0](int64_t t) { return t < t0; });
    filter_log(vals, [t0](int64_t t) { return t <= t0; });
    log << kind << "-train resumed at t=" << t0 << "\n";
  } else {
    start = meta::init_state(config.net, config.seed);
    fs::create_directories(out_dir);
    fs::remove(episodes);
    fs::remove(vals);
    fs::remove_all(out_dir / "states");
  }
  echo_config(config, out_dir);

  const std::string hash = config_hash(config);
  auto ckpt_meta = [&](int64_t t, double val) {
    return json{{"kind", kind}, {"t", t}, {"val_loss", val}, {"seed", config.seed}, {"net", net_json(config.net)}, {"config_hash", hash}};
  };
  auto save_best = [&](const ParamSet& theta, const ParamSet& phi, int64_t t, double val) {
    const ParamSet sets[] = {theta.with_role(ParamRole::Extractor), phi.with_role(ParamRole::HeadInit)};
    seg::save_checkpoint(best_path, sets, ckpt_meta(t, val));
    best_val = val;
    best_t = t;
  };

  fs::create_directories(out_dir / "states");
  if (options.resume) {
    // best checkpoint as of the resume point: earliest minimum of the kept
    // validation records whose snapshot exists, else the resume state itself
    int64_t bt = start.t;
    double bv = seg::load_checkpoint(*options.resume).meta.value("val_loss", std::numeric_limits<double>::infinity());
    bool from_log = false;
    if (fs::exists(vals)) {
      std::ifstream in(vals, std::ios::binary);
      std::string line;
      double lv = std::numeric_limits<double>::infinity();
      int64_t lt = -1;
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        const json j = json::parse(line);
        if (j["val_loss"].get<double>() < lv) {
          lv = j["val_loss"].get<double>();
          lt = j["t"].get<int64_t>();
        }
      }
      if (lt >= 0 && fs::exists(snapshot(lt))) {
        bt = lt;
        bv = lv;
        from_log = true;
      }
    }
    const meta::MetaState b = from_log ? load_state(snapshot(bt)) : start;
    if (!from_log && !(fs::exists(snapshot(start.t)) && fs::equivalent(*options.resume, snapshot(start.t)))) {
      fs::copy_file(*options.resume, snapshot(start.t), fs::copy_options::overwrite_existing);
    }
    save_best(b.theta, b.phi, bt, bv);
  } else {
    const double v0 = meta::validation_loss(pool, config.net, start.theta, start.phi, config.train.weights);
    append_line(vals, {{"t", start.t}, {"val_loss", v0}});
    save_state(state_path, start, ckpt_meta(start.t, v0));
    fs::copy_file(state_path, snapshot(start.t), fs::copy_options::overwrite_existing);
    if (std::isfinite(v0)) save_best(start.theta, start.phi, start.t, v0);
  }

  meta::TrainHooks hooks;
  hooks.on_episode = [&](const meta::EpisodeTrace& trace) { append_line(episodes, trace.to_json()); };
  hooks.on_checkpoint = [&](const meta::MetaState& state, double val, bool) {
    append_line(vals, {{"t", state.t}, {"val_loss", val}});
    save_state(state_path, state, ckpt_meta(state.t, val));
    fs::copy_file(state_path, snapshot(state.t), fs::copy_options::overwrite_existing);
    if (val < best_val) save_best(state.theta, state.phi, state.t, val);
  };

  const meta::MetaState* resume = options.resume ? &start : nullptr;
  const meta::TrainResult r = options.joint ? meta::pretrain_joint(pool, config.net, config.train, config.seed, resume, hooks)
                                            : meta::meta_train(pool, config.net, config.train, config.seed, resume, hooks);

  json summary = {{"kind", kind},
                  {"start_t", start.t},
                  {"final_t", r.final_state.t},
                  {"episodes_run", r.traces.size()},
                  {"best_t", best_t},
                  {"best_val_loss", best_val},
                  {"diverged", r.diverged},
                  {"divergence", r.divergence},
                  {"config_hash", hash}};
  write_json(out_dir / "summary.json", summary);
  log << kind << "-train " << out_dir.string() << ": t " << start.t << " -> " << r.final_state.t << ", best t=" << best_t
      << " val " << fixed(best_val, 4) << "\n";
  if (r.diverged) {
    log << "diverged at " << r.divergence << "; best checkpoint kept at t=" << best_t << "\n";
    return kExitNumeric;
  }
  return kExitOk;
}

int cmd_finetune(const ExperimentConfig& config, const fs::path& checkpoint, const fs::path& pool_dir, const fs::path& out_dir,
                 std::ostream& log) {
  const seg::Checkpoint ck = open_checkpoint(checkpoint, config);
  if (!ck.has(ParamRole::Extractor) || !ck.has(ParamRole::HeadInit)) {
    throw tc::FormatError(checkpoint.string() + ": expected extractor and head-initialization parameters");
  }
  const phantom::MetaPool pool = open_pool(pool_dir, config);
  const phantom::Group& g = pool.test_group;
  const std::vector<int> ids = select_shots(g, config.shots, config.seed);
  std::vector<const phantom::Subject*> subjects;
  for (int i : ids) subjects.push_back(&g.subjects[static_cast<std::size_t>(i)]);
  const meta::Batch shots = meta::make_batch(subjects);

  const ParamSet& theta = ck.get(ParamRole::Extractor);
  const ParamSet& phi = ck.get(ParamRole::HeadInit);
  std::vector<double> losses;
  const ParamSet omega = meta::fine_tune(config.net, theta, phi, shots, config.finetune, config.train.weights, config.seed, &losses);

  const seg::HeadPartition part =
      seg::partition_head(config.net, phi, config.finetune.all ? config.net.K - 1 : config.finetune.n_upsample_layers);
  std::set<std::string> trainable = part.trainable, frozen = part.frozen;
  if (config.finetune.all) {
    trainable.insert(frozen.begin(), frozen.end());
    frozen.clear();
  }
  bool frozen_exact = true;
  for (const std::string& name : frozen) frozen_exact = frozen_exact && omega.at(name).same_values(phi.at(name));

  fs::create_directories(out_dir);
  echo_config(config, out_dir);
  std::vector<std::string> shot_ids;
  for (const auto* s : subjects) shot_ids.push_back(s->id);
  const ParamSet sets[] = {theta.with_role(ParamRole::Extractor), omega.with_role(ParamRole::Head)};
  seg::save_checkpoint(out_dir / "head.ckpt", sets,
                       json{{"kind", "finetuned"},
                            {"source", phantom::fnv1a_hex(tc::read_file(checkpoint))},
                            {"source_kind", ck.meta.value("kind", std::string())},
                            {"shots", shot_ids},
                            {"steps", config.finetune.steps},
                            {"layers", config.finetune.n_upsample_layers},
                            {"all", config.finetune.all},
                            {"net", net_json(config.net)}});
  write_json(out_dir / "finetune.json", json{{"group", g.spec.name},
                                             {"shots", shot_ids},
                                             {"losses", losses},
                                             {"layers", config.finetune.n_upsample_layers},
                                             {"all", config.finetune.all},
                                             {"trainable", trainable},
                                             {"frozen", frozen},
                                             {"frozen_bit_identical", frozen_exact}});
  log << "fine-tuned on " << g.spec.name << " shot";
  for (const auto& id : shot_ids) log << " " << id;
  log << ": " << config.finetune.steps << " steps, " << trainable.size() << " trainable / " << frozen.size() << " frozen tensors";
  if (!losses.empty()) log << ", loss " << fixed(losses.front(), 4) << " -> " << fixed(losses.back(), 4);
  log << "\n";
  if (!frozen_exact) throw std::logic_error("fine-tune moved a frozen parameter");
  return kExitOk;
}

int cmd_eval(const ExperimentConfig& config, const fs::path& checkpoint, const fs::path& pool_dir, const fs::path& out_dir,
             std::ostream& log) {
  const seg::Checkpoint ck = open_checkpoint(checkpoint, config);
  const phantom::MetaPool pool = open_pool(pool_dir, config);
  const phantom::Group& g = pool.test_group;
  const std::string kind = ck.meta.value("kind", std::string());
  const bool oracle = kind == "oracle";
  if (!oracle && (!ck.has(ParamRole::Extractor) || !(ck.has(ParamRole::Head) || ck.has(ParamRole::HeadInit)))) {
    throw tc::FormatError(checkpoint.string() + ": expected extractor and head parameters");
  }
  std::vector<LabelMap> preds, gts;
  std::vector<std::string> ids;
  for (int i : g.val) {
    const phantom::Subject& s = g.subjects[static_cast<std::size_t>(i)];
    gts.push_back(s.labels);
    ids.push_back(s.id);
    if (oracle) {
      preds.push_back(s.labels);
      continue;
    }
    const ParamSet& theta = ck.get(ParamRole::Extractor);
    const ParamSet& omega = ck.has(ParamRole::Head) ? ck.get(ParamRole::Head) : ck.get(ParamRole::HeadInit);
    const meta::Batch b = meta::make_batch({&s});
    preds.push_back(metrics::argmax_labels(seg::forward(config.net, theta, omega, b.images).back()));
  }
  const std::string fingerprint =
      phantom::fnv1a_hex(tc::read_file(checkpoint) + phantom::manifest(pool).dump() + fixed(config.spacing, 6));
  const metrics::EvalReport report = metrics::report_from_predictions(preds, gts, fingerprint, config.spacing);
  json j = report.to_json();
  j["group"] = g.spec.name;
  j["subject_ids"] = ids;
  j["checkpoint_kind"] = kind;
  j["mean_foreground_dice"] = report.mean_foreground_dice();

  fs::create_directories(out_dir);
  echo_config(config, out_dir);
  write_json(out_dir / "report.json", j);
  const std::string table = metrics::format_table({{kind.empty() ? "checkpoint" : kind, report}});
  tc::write_file_atomic(out_dir / "report.txt", table);
  log << "eval on " << g.spec.name << " test split (" << report.subjects << " subjects)\n" << table;
  return kExitOk;
}

json GradcheckReport::to_json() const {
  return {{"toy", {{"max_rel_err", toy_max_rel_err}, {"indirect_norm", toy_indirect_norm}, {"pass", toy_pass}}},
          {"segnet",
           {{"params", segnet_params},
            {"init_seed", segnet.init_seed},
            {"screened", segnet.tries},
            {"relu_margin", segnet.margin},
            {"max_rel_err", segnet.check.fd.max_rel_err},
            {"norm_rel_err", segnet.check.fd.norm_rel_err},
            {"refined", segnet.check.fd.refined},
            {"kink_excluded", segnet.check.fd.kink_excluded},
            {"pass", segnet_pass}}},
          {"modes",
           {{"exact_indirect_norm", exact_indirect_norm}, {"first_order_indirect_norm", first_order_indirect_norm}, {"pass", modes_pass}}},
          {"pass", passed()}};
}

GradcheckReport run_gradcheck(const ExperimentConfig& config) {
  const GradcheckSettings& gc = config.gradcheck;
  GradcheckReport rep;

  // Quadratic toy: L_in = Σ(ω − θ)², L_out = Σ(ω* − c)² + Σ ω*·θ, so ∂ω*/∂θ = 2α.
  {
    std::mt19937_64 rng(derive_seed(config.seed, {kToyStream}));
    std::normal_distribution<double> nd(0.0, 1.0);
    auto vec = [&](int n) {
      std::vector<double> v(static_cast<std::size_t>(n));
      for (double& x : v) x = nd(rng);
      return Tensor({n}, v);
    };
    ParamSet theta(ParamRole::Extractor), phi(ParamRole::Head);
    theta.add("theta", vec(6));
    phi.add("omega", vec(6));
    const Tensor c = vec(6);
    const double alpha = 0.1;
    auto inner_of = [](const ParamSet& th) {
      return [th](const ParamSet& w) {
        const Tensor d = tc::sub(w.at(0), th.at(0));
        return tc::sum(tc::mul(d, d));
      };
    };
    auto outer_of = [&c](const ParamSet& th, const ParamSet& ws) {
      const Tensor d = tc::sub(ws.at(0), c);
      return tc::add(tc::sum(tc::mul(d, d)), tc::sum(tc::mul(ws.at(0), th.at(0))));
    };
    meta::Hypergradient h;
    {
      tc::Tape tape;
      const ParamSet tb = theta.bind(tape);
      const ParamSet wb = phi.bind(tape);
      const ParamSet ws = meta::inner_update(inner_of(tb), wb, alpha, true);
      h = meta::hypergradient(outer_of(tb, ws), tb, ws, meta::HypergradMode::Exact);
    }
    auto composed = [&](const ParamSet& th) {
      tc::Tape tape;
      const ParamSet ws = meta::inner_update(inner_of(th), phi.bind(tape), alpha, false).detached();
      return outer_of(th, ws).item();
    };
    const meta::FdReport fd = meta::finite_difference_check(composed, theta, h.total, gc.eps);
    rep.toy_max_rel_err = fd.max_rel_err;
    rep.toy_indirect_norm = h.indirect_norm;
    rep.toy_pass = fd.passed(gc.toy_tolerance);
  }

  // Tiny segmentation network on one phantom image per batch.
  {
    seg::NetConfig net;
    net.image_size = gc.image_size;
    net.K = gc.K;
    net.base_width = gc.base_width;
    net.validate();
    const seg::Network probe = seg::build_network(net, 0);
    rep.segnet_params = probe.theta.total_numel() + probe.omega.total_numel();
    if (rep.segnet_params > config.train.fd_param_limit) {
      throw UsageError("gradcheck network has " + std::to_string(rep.segnet_params) + " parameters, over train.fd_param_limit " +
                       std::to_string(config.train.fd_param_limit));
    }
    std::vector<phantom::AgeGroupSpec> specs = config.groups;
    for (auto& s : specs) s.subjects = 2;
    const phantom::MetaPool pool = phantom::build_pool(specs, config.seed, gc.image_size);
    auto first = [&](int g) { return meta::make_batch({&pool.train_groups[static_cast<std::size_t>(g)].subjects[0]}); };
    const meta::Batch inner = first(0);
    const std::array<meta::Batch, 2> outer = {first(1), first(2)};
    loss::LossWeights w = config.train.weights;
    w.deep_supervision = loss::LossWeights::halving(net.K);
    rep.segnet = meta::segnet_hypergradient_check(net, inner, outer, gc.alpha, w, config.seed, gc.min_margin, 64, gc.eps);
    rep.segnet_pass = rep.segnet.check.fd.passed(gc.segnet_tolerance);

    const meta::MetaState st = meta::init_state(net, rep.segnet.init_seed);
    rep.exact_indirect_norm = rep.segnet.check.analytic.indirect_norm;
    rep.first_order_indirect_norm =
        meta::mfl_hypergradient(net, st.theta, st.phi, inner, outer, gc.alpha, w, meta::HypergradMode::FirstOrder).indirect_norm;
    rep.modes_pass = rep.exact_indirect_norm > 0.0 && rep.first_order_indirect_norm == 0.0;
  }
  return rep;
}

int cmd_gradcheck(const ExperimentConfig& config, const std::optional<fs::path>& out_dir, std::ostream& log) {
  const GradcheckReport rep = run_gradcheck(config);
  const auto verdict = [](bool ok) { return ok ? "PASS" : "FAIL"; };
  log << "quadratic toy      max rel err " << sci(rep.toy_max_rel_err) << "  (< " << sci(config.gradcheck.toy_tolerance) << ")  "
      << verdict(rep.toy_pass) << "\n";
  log << "tiny segnet        max rel err " << sci(rep.segnet.check.fd.max_rel_err) << "  (< " << sci(config.gradcheck.segnet_tolerance)
      << ")  " << verdict(rep.segnet_pass) << "  [" << rep.segnet_params << " params, relu margin " << sci(rep.segnet.margin)
      << ", kinks " << rep.segnet.check.fd.kink_excluded << "]\n";
  log << "indirect norm      exact " << sci(rep.exact_indirect_norm) << "  first-order " << sci(rep.first_order_indirect_norm) << "  "
      << verdict(rep.modes_pass) << "\n";
  if (out_dir) {
    fs::create_directories(*out_dir);
    echo_config(config, *out_dir);
    write_json(*out_dir / "gradcheck.json", rep.to_json());
  }
  return rep.passed() ? kExitOk : kExitNumeric;
}

}  // namespace dumeta::cli
