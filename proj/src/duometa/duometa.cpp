// Copyright 2026 The DuMeta Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "dumeta/duometa.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "dumeta/gradcheck.hpp"
#include "dumeta/ops.hpp"
#include "dumeta/seeding.hpp"

namespace dumeta::meta {

using tc::NumericError;

namespace {

constexpr uint64_t kEpisodeStream = 0x45504953;  // "EPIS"
constexpr uint64_t kJointStream = 0x4a4f494e;    // "JOIN"
constexpr uint64_t kFineTuneStream = 0x4654554e; // "FTUN"
constexpr uint64_t kGradcheckStream = 0x47524144;  // "GRAD"

bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

bool all_finite(const ParamSet& p) {
  for (const Tensor& t : p.tensors()) {
    if (!all_finite(t.data())) return false;
  }
  return true;
}

double l2_norm(const ParamSet& p) {
  double s = 0.0;
  for (const Tensor& t : p.tensors()) {
    for (double v : t.data()) s += v * v;
  }
  return std::sqrt(s);
}

ParamSet assemble(const ParamSet& like, std::span<const Tensor> values, std::size_t offset) {
  ParamSet out(like.role());
  for (std::size_t i = 0; i < like.size(); ++i) out.add(like.names()[i], values[offset + i].detach());
  return out;
}

ParamSet zeros_like(const ParamSet& like) {
  ParamSet out(like.role());
  for (std::size_t i = 0; i < like.size(); ++i) out.add(like.names()[i], Tensor::zeros(like.at(i).shape()));
  return out;
}

ParamSet sum_sets(const ParamSet& a, const ParamSet& b) {
  ParamSet out(a.role());
  for (std::size_t i = 0; i < a.size(); ++i) out.add(a.names()[i], tc::add(a.at(i).detach(), b.at(i).detach()));
  return out;
}

std::vector<const phantom::Subject*> pick(const phantom::Group& group, const std::vector<int>& indices) {
  std::vector<const phantom::Subject*> out;
  for (int i : indices) out.push_back(&group.subjects.at(static_cast<std::size_t>(i)));
  return out;
}

Tensor mean_of(const std::vector<Tensor>& losses) {
  Tensor total = losses.front();
  for (std::size_t i = 1; i < losses.size(); ++i) total = tc::add(total, losses[i]);
  return tc::scale(total, 1.0 / static_cast<double>(losses.size()));
}

void require_three(const phantom::MetaPool& pool) {
  if (pool.train_groups.size() != 3) {
    throw std::invalid_argument("meta-training needs exactly 3 training datasets, got " + std::to_string(pool.train_groups.size()));
  }
}

using StepFn = std::function<EpisodeResult(const MetaState&)>;

TrainResult train_loop(const phantom::MetaPool& pool, const seg::NetConfig& net, const TrainConfig& config, MetaState state,
                       const StepFn& step, const TrainHooks& hooks) {
  TrainResult r;
  r.initial_val_loss = validation_loss(pool, net, state.theta, state.phi, config.weights);
  r.best_val_loss = r.initial_val_loss;
  r.best_theta = state.theta;
  r.best_phi = state.phi;
  r.best_t = state.t;
  r.val_history.emplace_back(state.t, r.initial_val_loss);
  while (state.t < config.episodes) {
    try {
      EpisodeResult e = step(state);
      state = std::move(e.state);
      if (hooks.on_episode) hooks.on_episode(e.trace);
      r.traces.push_back(std::move(e.trace));
    } catch (const NumericError& err) {
      r.diverged = true;
      r.divergence = "episode " + std::to_string(state.t) + ": " + err.what();
      break;
    }
    if (state.t % config.checkpoint_every == 0 || state.t == config.episodes) {
      const double v = validation_loss(pool, net, state.theta, state.phi, config.weights);
      if (!std::isfinite(v)) {
        r.diverged = true;
        r.divergence = "episode " + std::to_string(state.t) + ": non-finite validation loss";
        break;
      }
      r.val_history.emplace_back(state.t, v);
      const bool best = v < r.best_val_loss;
      if (best) {
        r.best_val_loss = v;
        r.best_theta = state.theta;
        r.best_phi = state.phi;
        r.best_t = state.t;
      }
      if (hooks.on_checkpoint) hooks.on_checkpoint(state, v, best);
    }
  }
  r.final_state = std::move(state);
  return r;
}

HeadLoss inner_head_loss(const seg::NetConfig& net, const ParamSet& theta, const Batch& inner, const std::vector<double>& ds) {
  auto pyr = std::make_shared<seg::FeaturePyramid>(seg::extract_features(net, theta, inner.images));
  return [&net, &ds, labels = inner.labels, pyr](const ParamSet& w) { return loss::seg_loss(seg::decode(net, w, *pyr), labels, ds); };
}

loss::OuterTerms mfl_terms(const seg::NetConfig& net, const ParamSet& theta, const ParamSet& omega_star, std::span<const Batch> outer,
                           const loss::LossWeights& weights) {
  const bool need_reps = weights.beta > 0.0 || weights.gamma > 0.0;
  std::vector<loss::OuterBatch> batches;
  for (const Batch& b : outer) {
    const seg::FeaturePyramid pyr = seg::extract_features(net, theta, b.images);
    loss::OuterBatch ob{seg::decode(net, omega_star, pyr), b.labels, {}};
    if (need_reps) ob.reps = loss::tissue_representations(pyr, b.labels);
    batches.push_back(std::move(ob));
  }
  return loss::outer_loss(batches, weights);
}

// θ ↦ L_outer(θ, ω*(θ)) with the inner step re-run from φ for every θ.
std::function<double(const ParamSet&)> composed_outer(const seg::NetConfig& net, const ParamSet& phi, const Batch& inner,
                                                      std::span<const Batch> outer, double alpha, const loss::LossWeights& weights,
                                                      int inner_steps) {
  return [&net, &phi, &inner, outer, alpha, &weights, inner_steps](const ParamSet& theta) {
    tc::Tape tape;
    const ParamSet w = phi.with_role(tc::ParamRole::Head).bind(tape);
    const ParamSet ws = inner_update(inner_head_loss(net, theta, inner, weights.deep_supervision), w, alpha, false, inner_steps).detached();
    return mfl_terms(net, theta, ws, outer, weights).total.item();
  };
}

}  // namespace

std::string to_string(HypergradMode mode) {
  switch (mode) {
    case HypergradMode::Exact:
      return "exact";
    case HypergradMode::FirstOrder:
      return "first-order";
    case HypergradMode::FiniteDiffCheck:
      return "finite-diff-check";
  }
  return "exact";
}

HypergradMode hypergrad_mode_from_string(const std::string& text) {
  if (text == "exact") return HypergradMode::Exact;
  if (text == "first-order") return HypergradMode::FirstOrder;
  if (text == "finite-diff-check") return HypergradMode::FiniteDiffCheck;
  throw std::invalid_argument("unknown hypergradient mode '" + text + "' (exact, first-order, finite-diff-check)");
}

ParamSet sgd_step(const ParamSet& params, const ParamSet& grads, double lr, const SgdConfig& config, ParamSet& buffers,
                  const std::set<std::string>* only) {
  if (buffers.empty() && buffers.role() != params.role()) buffers = ParamSet(params.role());
  ParamSet out(params.role());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string& name = params.names()[i];
    const Tensor& p = params.at(i);
    if (only && !only->count(name)) {
      out.add(name, p.detach());
      continue;
    }
    const Tensor& gt = grads.at(name);
    if (gt.shape() != p.shape()) throw tc::ShapeError("sgd_step: gradient shape mismatch for '" + name + "'");
    const auto pv = p.data();
    const auto gv = gt.data();
    std::vector<double> g(gv.begin(), gv.end());
    if (config.weight_decay != 0.0) {
      for (std::size_t k = 0; k < g.size(); ++k) g[k] += config.weight_decay * pv[k];
    }
    std::vector<double> buf(g.size());
    if (config.momentum != 0.0 && buffers.contains(name)) {
      const auto bv = buffers.at(name).data();
      for (std::size_t k = 0; k < g.size(); ++k) buf[k] = config.momentum * bv[k] + g[k];
    } else {
      buf = g;
    }
    std::vector<double> next(g.size());
    for (std::size_t k = 0; k < g.size(); ++k) {
      double stepv = g[k];
      if (config.momentum != 0.0) stepv = config.nesterov ? g[k] + config.momentum * buf[k] : buf[k];
      next[k] = pv[k] - lr * stepv;
    }
    out.add(name, Tensor(p.shape(), std::move(next)));
    if (config.momentum != 0.0) {
      Tensor bt(p.shape(), std::move(buf));
      if (buffers.contains(name)) {
        buffers.set(name, std::move(bt));
      } else {
        buffers.add(name, std::move(bt));
      }
    }
  }
  return out;
}

void TrainConfig::validate(int K) const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("train config: " + m); };
  if (!(alpha0 > 0.0) || !std::isfinite(alpha0)) fail("alpha0 must be > 0");
  if (!std::isfinite(outer_alpha0)) fail("outer_alpha0 must be finite");
  if (!(poly_power >= 0.0)) fail("poly_power must be >= 0");
  if (episodes < 1) fail("episodes must be >= 1");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (inner_steps < 1) fail("inner_steps must be >= 1");
  if (checkpoint_every < 1) fail("checkpoint_every must be >= 1");
  if (fd_param_limit < 1) fail("fd_param_limit must be >= 1");
  if (!(fd_eps > 0.0)) fail("fd_eps must be > 0");
  if (!(augment_noise >= 0.0)) fail("augment_noise must be >= 0");
  if (!(outer.momentum >= 0.0 && outer.momentum < 1.0)) fail("momentum must lie in [0, 1)");
  if (!(outer.weight_decay >= 0.0)) fail("weight_decay must be >= 0");
  weights.validate();
  if (static_cast<int>(weights.deep_supervision.size()) != K) {
    fail("deep_supervision has " + std::to_string(weights.deep_supervision.size()) + " weights for K=" + std::to_string(K));
  }
}

double TrainConfig::alpha(int64_t t) const {
  if (t >= episodes) return 0.0;
  return alpha0 * std::pow(1.0 - static_cast<double>(t) / static_cast<double>(episodes), poly_power);
}

double TrainConfig::outer_alpha(int64_t t) const {
  const double base = outer_alpha0 > 0.0 ? outer_alpha0 : alpha0;
  if (t >= episodes) return 0.0;
  return base * std::pow(1.0 - static_cast<double>(t) / static_cast<double>(episodes), poly_power);
}

Batch make_batch(const std::vector<const phantom::Subject*>& subjects) {
  if (subjects.empty()) throw std::invalid_argument("make_batch: no subjects");
  const int64_t h = subjects.front()->image.extent(1), w = subjects.front()->image.extent(2);
  std::vector<double> data;
  std::vector<LabelMap> labels;
  for (const phantom::Subject* s : subjects) {
    if (s->image.extent(1) != h || s->image.extent(2) != w) throw tc::ShapeError("make_batch: subjects differ in size");
    const auto v = s->image.data();
    data.insert(data.end(), v.begin(), v.end());
    labels.push_back(s->labels);
  }
  const int64_t b = static_cast<int64_t>(subjects.size());
  return {Tensor({b, 1, h, w}, std::move(data)), stack_labels(labels)};
}

Batch augment_batch(const Batch& batch, std::mt19937_64& rng, double noise) {
  const int64_t B = batch.labels.batch, H = batch.labels.height, W = batch.labels.width;
  std::vector<double> img(batch.images.data().begin(), batch.images.data().end());
  std::vector<int> lab = batch.labels.values;
  std::bernoulli_distribution coin(0.5);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (int64_t b = 0; b < B; ++b) {
    const bool fh = coin(rng), fv = coin(rng);
    const std::size_t base = static_cast<std::size_t>(b * H * W);
    for (int64_t i = 0; i < H; ++i) {
      for (int64_t j = 0; j < W; ++j) {
        const int64_t si = fv ? H - 1 - i : i, sj = fh ? W - 1 - j : j;
        const std::size_t dst = base + static_cast<std::size_t>(i * W + j), src = base + static_cast<std::size_t>(si * W + sj);
        img[dst] = batch.images[static_cast<int64_t>(src)];
        lab[dst] = batch.labels.values[src];
      }
    }
  }
  if (noise > 0.0) {
    for (double& v : img) v += noise * gauss(rng);
  }
  return {Tensor(batch.images.shape(), std::move(img)), LabelMap(B, H, W, std::move(lab))};
}

Batch sample_batch(const phantom::Group& group, int batch_size, std::mt19937_64& rng, bool augment, double noise) {
  std::vector<int> pool = group.train;
  if (batch_size < 1 || static_cast<std::size_t>(batch_size) > pool.size()) {
    throw std::invalid_argument("sample_batch: group '" + group.spec.name + "' has " + std::to_string(pool.size()) +
                                " training subjects, batch size " + std::to_string(batch_size));
  }
  for (int k = 0; k < batch_size; ++k) {
    std::uniform_int_distribution<std::size_t> d(static_cast<std::size_t>(k), pool.size() - 1);
    std::swap(pool[static_cast<std::size_t>(k)], pool[d(rng)]);
  }
  pool.resize(static_cast<std::size_t>(batch_size));
  Batch b = make_batch(pick(group, pool));
  return augment ? augment_batch(b, rng, noise) : b;
}

ParamSet inner_update(const HeadLoss& inner_loss, const ParamSet& omega, double alpha, bool create_graph, int steps, double* first_loss) {
  if (!(alpha >= 0.0)) throw std::invalid_argument("inner step: alpha must be >= 0");
  ParamSet w = omega;
  for (int s = 0; s < steps; ++s) {
    const Tensor loss = inner_loss(w);
    const double value = loss.item();
    if (!std::isfinite(value)) throw NumericError("inner step: non-finite inner loss");
    if (s == 0 && first_loss) *first_loss = value;
    const tc::Gradients g = tc::grad(loss, w, create_graph);
    w = tc::axpy(w, -alpha, g.values);
  }
  return w;
}

Hypergradient hypergradient(const Tensor& outer_loss, const ParamSet& theta_bound, const ParamSet& omega_star, HypergradMode mode) {
  const bool exact = mode != HypergradMode::FirstOrder;
  std::vector<Tensor> stops;
  for (const Tensor& w : omega_star.tensors()) {
    if (w.has_node()) {
      stops.push_back(w);
    } else if (exact) {
      throw std::logic_error("hypergradient: ω* carries no retained inner graph");
    }
  }
  Hypergradient h;
  if (!outer_loss.has_node()) {
    h.direct = h.indirect = h.total = zeros_like(theta_bound);
    return h;
  }
  const tc::Tape tape = tc::Tape::owner_of(outer_loss);
  std::vector<Tensor> wrt(theta_bound.tensors().begin(), theta_bound.tensors().end());
  const std::size_t n_theta = wrt.size();
  if (exact) wrt.insert(wrt.end(), omega_star.tensors().begin(), omega_star.tensors().end());

  // pass 1: everything reaching θ without crossing ω*, plus ∂L/∂ω*
  tc::VjpOptions first;
  first.stop_at = stops;
  const Tensor loss_arr[] = {outer_loss};
  const tc::VjpResult r1 = tape.vjp(loss_arr, {}, wrt, first);
  h.direct = assemble(theta_bound, r1.grads, 0);

  if (exact) {
    // pass 2: pull ∂L/∂ω* back through the retained inner step
    std::vector<Tensor> seeds(r1.grads.begin() + static_cast<std::ptrdiff_t>(n_theta), r1.grads.end());
    std::vector<Tensor> outs(omega_star.tensors().begin(), omega_star.tensors().end());
    const tc::VjpResult r2 = tape.vjp(outs, seeds, theta_bound.tensors());
    h.indirect = assemble(theta_bound, r2.grads, 0);
  } else {
    h.indirect = zeros_like(theta_bound);
  }
  h.total = sum_sets(h.direct, h.indirect);
  if (!all_finite(h.total)) throw NumericError("non-finite hypergradient");
  h.direct_norm = l2_norm(h.direct);
  h.indirect_norm = l2_norm(h.indirect);
  return h;
}

MflResult mfl_outer_step(const ParamSet& theta, const ParamSet& theta_bound, const ParamSet& omega_star, const Tensor& outer_loss,
                         double alpha, const SgdConfig& sgd, ParamSet& buffers, HypergradMode mode) {
  if (!std::isfinite(outer_loss.item())) throw NumericError("MFL: non-finite outer loss");
  MflResult r;
  r.grad = hypergradient(outer_loss, theta_bound, omega_star, mode);
  r.theta_next = sgd_step(theta, r.grad.total, alpha, sgd, buffers);
  return r;
}

MilResult mil_outer_step(const ParamSet& phi, const ParamSet& omega_star, const HeadLoss& outer2_loss, double alpha, const SgdConfig& sgd,
                         ParamSet& buffers) {
  tc::Tape tape;
  const ParamSet w = omega_star.detached().bind(tape);
  const Tensor loss = outer2_loss(w);
  MilResult r;
  r.loss = loss.item();
  if (!std::isfinite(r.loss)) throw NumericError("MIL: non-finite outer loss");
  r.grad = tc::grad(loss, w, false).values.detached();
  if (!all_finite(r.grad)) throw NumericError("MIL: non-finite gradient");
  r.phi_next = sgd_step(phi, r.grad, alpha, sgd, buffers);
  return r;
}

FdReport finite_difference_check(const std::function<double(const ParamSet&)>& composed, const ParamSet& theta, const ParamSet& analytic,
                                 double eps) {
  constexpr int kMaxRefinements = 3;
  std::vector<double> flat = theta.flatten();
  double ss = 0.0;
  for (double v : flat) ss += v * v;
  const double rms = flat.empty() ? 0.0 : std::sqrt(ss / static_cast<double>(flat.size()));
  const double h0 = rms > 0.0 ? eps * rms : eps;
  auto eval = [&](std::vector<bool>& pattern) {
    tc::ReluPatternRecorder rec;
    const double v = composed(theta.from_flat(flat));
    if (!std::isfinite(v)) throw NumericError("finite_difference_check: non-finite objective");
    pattern = rec.pattern();
    return v;
  };
  FdReport rep;
  rep.analytic = analytic.flatten();
  if (rep.analytic.size() != flat.size()) throw tc::ShapeError("finite_difference_check: gradient size mismatch");
  rep.numeric.resize(flat.size());
  std::vector<bool> base, pp, pm;
  {
    tc::ReluPatternRecorder rec;
    if (!std::isfinite(composed(theta))) throw NumericError("finite_difference_check: non-finite objective");
    base = rec.pattern();
    rep.relu_margin = rec.min_abs();
  }
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < flat.size(); ++i) {
    const double keep = flat[i];
    double h = h0, n = 0.0;
    bool smooth = false;
    for (int attempt = 0; attempt <= kMaxRefinements && !smooth; ++attempt, h /= 10.0) {
      flat[i] = keep + h;
      const double fp = eval(pp);
      flat[i] = keep - h;
      const double fm = eval(pm);
      n = (fp - fm) / (2.0 * h);
      smooth = pp == base && pm == base;
      if (smooth && attempt > 0) ++rep.refined;
    }
    flat[i] = keep;
    rep.numeric[i] = n;
    if (!smooth) {
      ++rep.kink_excluded;
      continue;
    }
    rep.max_rel_err = std::max(rep.max_rel_err, tc::relative_error(rep.analytic[i], n));
    diff += (rep.analytic[i] - n) * (rep.analytic[i] - n);
    na += rep.analytic[i] * rep.analytic[i];
    nn += n * n;
  }
  const double denom = std::sqrt(std::max(na, nn));
  rep.norm_rel_err = denom > 0.0 ? std::sqrt(diff) / denom : 0.0;
  return rep;
}

MetaState init_state(const seg::NetConfig& net, uint64_t seed) {
  seg::Network n = seg::build_network(net, seed);
  MetaState s;
  s.theta = n.theta;
  s.phi = n.omega.with_role(tc::ParamRole::HeadInit);
  s.theta_buffers = ParamSet(tc::ParamRole::Extractor);
  s.phi_buffers = ParamSet(tc::ParamRole::HeadInit);
  s.seed = seed;
  return s;
}

nlohmann::json EpisodeTrace::to_json() const {
  nlohmann::json j = {{"t", t},
                      {"alpha", alpha},
                      {"inner_dataset", inner_dataset},
                      {"outer_datasets", {outer_datasets[0], outer_datasets[1]}},
                      {"inner_loss", inner_loss},
                      {"mfl_loss", mfl_loss},
                      {"mfl_seg", mfl_seg},
                      {"mfl_inter", mfl_inter},
                      {"mfl_intra", mfl_intra},
                      {"mil_loss", mil_loss},
                      {"direct_norm", direct_norm},
                      {"indirect_norm", indirect_norm}};
  if (!std::isnan(fd_max_rel_err)) j["fd_max_rel_err"] = fd_max_rel_err;
  return j;
}

bool EpisodeTrace::finite() const {
  for (double v : {alpha, inner_loss, mfl_loss, mfl_seg, mfl_inter, mfl_intra, mil_loss, direct_norm, indirect_norm}) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

Hypergradient mfl_hypergradient(const seg::NetConfig& net, const ParamSet& theta, const ParamSet& phi, const Batch& inner,
                                std::span<const Batch> outer, double alpha, const loss::LossWeights& weights, HypergradMode mode,
                                int inner_steps) {
  if (outer.size() != 2) throw std::invalid_argument("mfl_hypergradient: needs exactly 2 outer batches");
  const bool exact = mode != HypergradMode::FirstOrder;
  tc::Tape tape;
  const ParamSet theta_b = theta.bind(tape);
  const ParamSet omega_b = phi.with_role(tc::ParamRole::Head).bind(tape);
  ParamSet ws = inner_update(inner_head_loss(net, theta_b, inner, weights.deep_supervision), omega_b, alpha, exact, inner_steps);
  if (!exact) ws = ws.detached();
  return hypergradient(mfl_terms(net, theta_b, ws, outer, weights).total, theta_b, ws, exact ? HypergradMode::Exact : mode);
}

HypergradCheck check_hypergradient(const seg::NetConfig& net, const ParamSet& theta, const ParamSet& phi, const Batch& inner,
                                   std::span<const Batch> outer, double alpha, const loss::LossWeights& weights, int inner_steps, double eps) {
  if (outer.size() != 2) throw std::invalid_argument("check_hypergradient: needs exactly 2 outer batches");
  HypergradCheck c;
  c.analytic = mfl_hypergradient(net, theta, phi, inner, outer, alpha, weights, HypergradMode::Exact, inner_steps);
  c.fd = finite_difference_check(composed_outer(net, phi, inner, outer, alpha, weights, inner_steps), theta, c.analytic.total, eps);
  return c;
}

std::mt19937_64 episode_rng(uint64_t seed, int64_t t) {
  return std::mt19937_64(derive_seed(seed, {kEpisodeStream, static_cast<uint64_t>(t)}));
}

double hypergradient_relu_margin(const seg::NetConfig& net, const ParamSet& theta, const ParamSet& phi, const Batch& inner,
                                 std::span<const Batch> outer, double alpha, const loss::LossWeights& weights, int inner_steps) {
  tc::ReluPatternRecorder rec;
  composed_outer(net, phi, inner, outer, alpha, weights, inner_steps)(theta);
  return rec.min_abs();
}

SegnetGradcheck segnet_hypergradient_check(const seg::NetConfig& net, const Batch& inner, std::span<const Batch> outer, double alpha,
                                           const loss::LossWeights& weights, uint64_t seed, double min_margin, int max_tries, double eps) {
  if (max_tries < 1) throw std::invalid_argument("segnet_hypergradient_check: max_tries must be >= 1");
  SegnetGradcheck out;
  out.margin = -1.0;
  for (int k = 0; k < max_tries; ++k) {
    const uint64_t s = derive_seed(seed, {kGradcheckStream, static_cast<uint64_t>(k)});
    const MetaState st = init_state(net, s);
    const double m = hypergradient_relu_margin(net, st.theta, st.phi, inner, outer, alpha, weights);
    out.tries = k + 1;
    if (m > out.margin) {
      out.margin = m;
      out.init_seed = s;
    }
    if (m >= min_margin) break;
  }
  const MetaState st = init_state(net, out.init_seed);
  out.check = check_hypergradient(net, st.theta, st.phi, inner, outer, alpha, weights, 1, eps);
  return out;
}

int sample_inner_dataset(std::mt19937_64& rng) { return std::uniform_int_distribution<int>(0, 2)(rng); }

EpisodeResult run_episode(const MetaState& state, const phantom::MetaPool& pool, const seg::NetConfig& net, const TrainConfig& config) {
  require_three(pool);
  std::mt19937_64 rng = episode_rng(state.seed, state.t);
  EpisodeTrace trace;
  trace.t = state.t;
  trace.inner_dataset = sample_inner_dataset(rng);
  int k = 0;
  for (int d = 0; d < 3; ++d) {
    if (d != trace.inner_dataset) trace.outer_datasets[static_cast<std::size_t>(k++)] = d;
  }
  const double alpha = config.alpha(state.t), outer_alpha = config.outer_alpha(state.t);
  trace.alpha = alpha;
  auto group = [&](int d) -> const phantom::Group& { return pool.train_groups[static_cast<std::size_t>(d)]; };
  auto draw = [&](int d) { return sample_batch(group(d), config.batch_size, rng, config.augment, config.augment_noise); };
  const Batch inner = draw(trace.inner_dataset);
  const std::array<Batch, 2> mfl = {draw(trace.outer_datasets[0]), draw(trace.outer_datasets[1])};
  const std::array<Batch, 2> mil = config.shared_outer_batches ? mfl : std::array<Batch, 2>{draw(trace.outer_datasets[0]), draw(trace.outer_datasets[1])};
  const auto& ds = config.weights.deep_supervision;
  const bool exact = config.mode != HypergradMode::FirstOrder;
  MetaState next = state;
  ParamSet omega_star_values;
  {
    tc::Tape tape;
    const ParamSet theta_b = state.theta.bind(tape);
    const ParamSet omega_b = state.phi.with_role(tc::ParamRole::Head).bind(tape);
    ParamSet omega_star =
        inner_update(inner_head_loss(net, theta_b, inner, ds), omega_b, alpha, exact, config.inner_steps, &trace.inner_loss);
    if (!exact) omega_star = omega_star.detached();
    omega_star_values = omega_star.detached();
    const loss::OuterTerms terms = mfl_terms(net, theta_b, omega_star, mfl, config.weights);
    trace.mfl_loss = terms.total.item();
    trace.mfl_seg = terms.seg.item();
    trace.mfl_inter = terms.inter.item();
    trace.mfl_intra = terms.intra.item();
    MflResult m = mfl_outer_step(state.theta, theta_b, omega_star, terms.total, outer_alpha, config.outer, next.theta_buffers, config.mode);
    trace.direct_norm = m.grad.direct_norm;
    trace.indirect_norm = m.grad.indirect_norm;

    if (config.mode == HypergradMode::FiniteDiffCheck) {
      if (state.theta.total_numel() > config.fd_param_limit) {
        throw std::invalid_argument("finite-diff-check: extractor has " + std::to_string(state.theta.total_numel()) +
                                    " parameters, limit is " + std::to_string(config.fd_param_limit));
      }
      const auto composed = composed_outer(net, state.phi, inner, mfl, alpha, config.weights, config.inner_steps);
      trace.fd_max_rel_err = finite_difference_check(composed, state.theta, m.grad.total, config.fd_eps).max_rel_err;
    }
    next.theta = std::move(m.theta_next);
  }

  // MIL: seg loss of the adapted head on features of the updated extractor
  std::vector<seg::FeaturePyramid> pyrs;
  for (const Batch& b : mil) pyrs.push_back(seg::extract_features(net, next.theta, b.images));
  const HeadLoss outer2 = [&](const ParamSet& w) {
    std::vector<Tensor> parts;
    for (std::size_t i = 0; i < mil.size(); ++i) parts.push_back(loss::seg_loss(seg::decode(net, w, pyrs[i]), mil[i].labels, ds));
    return mean_of(parts);
  };
  MilResult r = mil_outer_step(state.phi, omega_star_values.with_role(tc::ParamRole::HeadInit), outer2, outer_alpha, config.outer,
                               next.phi_buffers);
  trace.mil_loss = r.loss;
  next.phi = std::move(r.phi_next);
  next.t = state.t + 1;
  if (!trace.finite()) throw NumericError("episode " + std::to_string(state.t) + ": non-finite trace value");
  return {std::move(next), trace};
}

double validation_loss(const phantom::MetaPool& pool, const seg::NetConfig& net, const ParamSet& theta, const ParamSet& omega,
                       const loss::LossWeights& weights) {
  require_three(pool);
  const ParamSet th = theta.detached(), om = omega.detached();
  double total = 0.0;
  for (const phantom::Group& g : pool.train_groups) {
    if (g.val.empty()) throw std::invalid_argument("validation_loss: group '" + g.spec.name + "' has no validation split");
    const Batch b = make_batch(pick(g, g.val));
    total += loss::seg_loss(seg::forward(net, th, om, b.images), b.labels, weights.deep_supervision).item();
  }
  return total / 3.0;
}

TrainResult meta_train(const phantom::MetaPool& pool, const seg::NetConfig& net, const TrainConfig& config, uint64_t seed,
                       const MetaState* resume, const TrainHooks& hooks) {
  require_three(pool);
  net.validate();
  config.validate(net.K);
  MetaState start = resume ? *resume : init_state(net, seed);
  return train_loop(pool, net, config, std::move(start),
                    [&](const MetaState& s) { return run_episode(s, pool, net, config); }, hooks);
}

TrainResult pretrain_joint(const phantom::MetaPool& pool, const seg::NetConfig& net, const TrainConfig& config, uint64_t seed,
                           const MetaState* resume, const TrainHooks& hooks) {
  require_three(pool);
  net.validate();
  config.validate(net.K);
  auto step = [&](const MetaState& state) {
    std::mt19937_64 rng(derive_seed(state.seed, {kJointStream, static_cast<uint64_t>(state.t)}));
    tc::Tape tape;
    const ParamSet theta_b = state.theta.bind(tape);
    const ParamSet omega_b = state.phi.bind(tape);
    std::vector<Tensor> parts;
    for (const phantom::Group& g : pool.train_groups) {
      const Batch b = sample_batch(g, config.batch_size, rng, config.augment, config.augment_noise);
      parts.push_back(loss::seg_loss(seg::forward(net, theta_b, omega_b, b.images), b.labels, config.weights.deep_supervision));
    }
    const Tensor total = mean_of(parts);
    EpisodeTrace trace;
    trace.t = state.t;
    trace.alpha = config.outer_alpha(state.t);
    trace.inner_loss = total.item();
    if (!std::isfinite(trace.inner_loss)) throw NumericError("joint training: non-finite loss");
    const ParamSet g_theta = tc::grad(total, theta_b, false).values;
    const ParamSet g_omega = tc::grad(total, omega_b, false).values;
    if (!all_finite(g_theta) || !all_finite(g_omega)) throw NumericError("joint training: non-finite gradient");
    trace.direct_norm = l2_norm(g_theta);
    MetaState next = state;
    next.theta = sgd_step(state.theta, g_theta, trace.alpha, config.outer, next.theta_buffers);
    next.phi = sgd_step(state.phi, g_omega, trace.alpha, config.outer, next.phi_buffers);
    next.t = state.t + 1;
    return EpisodeResult{std::move(next), trace};
  };
  return train_loop(pool, net, config, resume ? *resume : init_state(net, seed), step, hooks);
}

ParamSet fine_tune(const seg::NetConfig& net, const ParamSet& theta, const ParamSet& phi, const Batch& shots, const FineTuneConfig& config,
                   const loss::LossWeights& weights, uint64_t seed, std::vector<double>* losses) {
  if (shots.labels.batch < 1) throw std::invalid_argument("fine_tune: empty shot set");
  if (config.steps < 0) throw std::invalid_argument("fine_tune: steps must be >= 0");
  const seg::HeadPartition part = seg::partition_head(net, phi, config.all ? net.K - 1 : config.n_upsample_layers);
  std::set<std::string> trainable = part.trainable;
  if (config.all) trainable = std::set<std::string>(phi.names().begin(), phi.names().end());
  const ParamSet frozen_theta = theta.detached();
  ParamSet w = phi.detached().with_role(tc::ParamRole::Head);
  ParamSet buffers(tc::ParamRole::Head);
  std::mt19937_64 rng(derive_seed(seed, {kFineTuneStream}));
  std::optional<seg::FeaturePyramid> fixed;
  if (!config.augment) fixed = seg::extract_features(net, frozen_theta, shots.images);
  for (int s = 0; s < config.steps; ++s) {
    Batch b = shots;
    seg::FeaturePyramid pyr;
    if (config.augment) {
      b = augment_batch(shots, rng, config.augment_noise);
      pyr = seg::extract_features(net, frozen_theta, b.images);
    } else {
      pyr = *fixed;
    }
    tc::Tape tape;
    const ParamSet wb = w.bind(tape);
    const Tensor l = loss::seg_loss(seg::decode(net, wb, pyr), b.labels, weights.deep_supervision);
    const double value = l.item();
    if (!std::isfinite(value)) throw NumericError("fine_tune: non-finite loss at step " + std::to_string(s));
    if (losses) losses->push_back(value);
    const ParamSet g = tc::grad(l, wb, false).values;
    w = sgd_step(w, g, config.alpha, config.sgd, buffers, &trainable);
  }
  return w;
}

}  // namespace dumeta::meta
