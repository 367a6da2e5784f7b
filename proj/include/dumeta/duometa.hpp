// Copyright 2026 The DuMeta Lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <functional>
#include <optional>
#include <limits>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "dumeta/losses.hpp"
#include "dumeta/phantoms.hpp"
#include "dumeta/segnet.hpp"
#include "json.hpp"

namespace dumeta::meta {

using tc::ParamSet;
using tc::Tensor;

enum class HypergradMode { Exact, FirstOrder, FiniteDiffCheck };
std::string to_string(HypergradMode mode);
HypergradMode hypergrad_mode_from_string(const std::string& text);

struct SgdConfig {
  double momentum = 0.99;
  double weight_decay = 3e-5;
  bool nesterov = true;
};

/// One SGD step in the PyTorch convention: g += wd·p; buf = μ·buf + g;
/// step = g + μ·buf (Nesterov) or buf; p -= lr·step. `buffers` starts empty
/// and is filled on first use. When `only` is given, other entries are copied
/// unchanged and get no buffer.
ParamSet sgd_step(const ParamSet& params, const ParamSet& grads, double lr, const SgdConfig& config, ParamSet& buffers,
                  const std::set<std::string>* only = nullptr);

struct TrainConfig {
  double alpha0 = 0.01;        // inner-loop learning rate at t = 0
  double outer_alpha0 = 0.0;   // outer learning rate at t = 0; <= 0 means alpha0
  double poly_power = 0.9;
  SgdConfig outer;
  int episodes = 100;
  int batch_size = 2;
  HypergradMode mode = HypergradMode::Exact;
  int inner_steps = 1;
  bool shared_outer_batches = false;
  int checkpoint_every = 50;
  int64_t fd_param_limit = 2000;
  double fd_eps = 1e-4;        // relative to the RMS parameter scale
  bool augment = true;         // random flips + Gaussian noise
  double augment_noise = 0.02;
  loss::LossWeights weights;

  void validate(int K) const;
  /// Poly schedule α₀·(1 − t/T)^power.
  double alpha(int64_t t) const;
  double outer_alpha(int64_t t) const;
};

struct Batch {
  Tensor images;  // B×1×H×W
  LabelMap labels;
};

Batch make_batch(const std::vector<const phantom::Subject*>& subjects);
/// Draws `batch_size` distinct subjects from the group's training split.
Batch sample_batch(const phantom::Group& group, int batch_size, std::mt19937_64& rng, bool augment, double noise);
/// Random horizontal/vertical flips per element plus additive Gaussian noise.
Batch augment_batch(const Batch& batch, std::mt19937_64& rng, double noise);

using HeadLoss = std::function<Tensor(const ParamSet& omega)>;

/// ω* = ω − α·∂L/∂ω, repeated `steps` times. With `create_graph` ω* stays a
/// differentiable function of everything L depends on.
ParamSet inner_update(const HeadLoss& inner_loss, const ParamSet& omega, double alpha, bool create_graph, int steps = 1,
                      double* first_loss = nullptr);

struct Hypergradient {
  ParamSet total;
  ParamSet direct;    // paths that do not pass through ω*
  ParamSet indirect;  // paths through ω*(θ)
  double direct_norm = 0.0;
  double indirect_norm = 0.0;
};

/// Total derivative of `outer_loss` w.r.t. the bound θ. In exact mode ω* must
/// carry the retained inner graph; in first-order mode the indirect path is
/// cut and reported as zero.
Hypergradient hypergradient(const Tensor& outer_loss, const ParamSet& theta_bound, const ParamSet& omega_star, HypergradMode mode);

struct MflResult {
  ParamSet theta_next;
  Hypergradient grad;
};

MflResult mfl_outer_step(const ParamSet& theta, const ParamSet& theta_bound, const ParamSet& omega_star, const Tensor& outer_loss,
                         double alpha, const SgdConfig& sgd, ParamSet& buffers, HypergradMode mode);

struct MilResult {
  ParamSet phi_next;
  ParamSet grad;  // ∂L_outer2/∂ω* evaluated at ω*
  double loss = 0.0;
};

/// First-order meta-initialization update: φ′ = SGD(φ, ∂L_outer2/∂ω*).
MilResult mil_outer_step(const ParamSet& phi, const ParamSet& omega_star, const HeadLoss& outer2_loss, double alpha, const SgdConfig& sgd,
                         ParamSet& buffers);

struct FdReport {
  std::vector<double> analytic;
  std::vector<double> numeric;
  double max_rel_err = 0.0;
  double norm_rel_err = 0.0;  // ‖a − n‖ / max(‖a‖, ‖n‖)
  int refined = 0;            // entries that needed a smaller step
  int kink_excluded = 0;      // entries sitting on a relu kink at every step
  double relu_margin = 0.0;   // smallest |relu input| at the unperturbed point

  bool passed(double tolerance) const { return kink_excluded == 0 && max_rel_err < tolerance; }
};

/// Central differences of `composed` over every entry of θ with step
/// eps·rms(θ) (eps itself when θ is all zero). A probe is accepted only if
/// both evaluations share the relu sign pattern of the unperturbed point;
/// otherwise the step shrinks tenfold, up to three times. Entries that never
/// settle are excluded from the error statistics and counted.
FdReport finite_difference_check(const std::function<double(const ParamSet&)>& composed, const ParamSet& theta,
                                 const ParamSet& analytic, double eps);

/// Hypergradient of L_outer(θ, ω*(θ)) on fixed batches with ω* one inner
/// step from φ; first-order mode cuts the path through ω*.
Hypergradient mfl_hypergradient(const seg::NetConfig& net, const ParamSet& theta, const ParamSet& phi, const Batch& inner,
                                std::span<const Batch> outer, double alpha, const loss::LossWeights& weights, HypergradMode mode,
                                int inner_steps = 1);

struct HypergradCheck {
  Hypergradient analytic;
  FdReport fd;
};

/// Exact hypergradient of θ ↦ L_outer(θ, ω*(θ)) on fixed batches (inner step
/// from φ) against central differences that re-run the inner step.
HypergradCheck check_hypergradient(const seg::NetConfig& net, const ParamSet& theta, const ParamSet& phi, const Batch& inner,
                                   std::span<const Batch> outer, double alpha, const loss::LossWeights& weights, int inner_steps = 1,
                                   double eps = 1e-4);

/// Smallest |x| over every relu input met while evaluating
/// θ ↦ L_outer(θ, ω*(θ)) once; small values mean θ sits near a kink.
double hypergradient_relu_margin(const seg::NetConfig& net, const ParamSet& theta, const ParamSet& phi, const Batch& inner,
                                 std::span<const Batch> outer, double alpha, const loss::LossWeights& weights, int inner_steps = 1);

struct SegnetGradcheck {
  uint64_t init_seed = 0;  // network seed that was checked
  int tries = 0;           // initializations screened
  double margin = 0.0;     // relu margin of the checked point
  HypergradCheck check;
};

/// Hypergradient check of a freshly initialized network at the first
/// initialization (seeds derived from `seed`) whose relu margin reaches
/// `min_margin`; the best-margin candidate is used if none does.
SegnetGradcheck segnet_hypergradient_check(const seg::NetConfig& net, const Batch& inner, std::span<const Batch> outer, double alpha,
                                           const loss::LossWeights& weights, uint64_t seed, double min_margin = 1e-3,
                                           int max_tries = 64, double eps = 1e-4);

struct MetaState {
  ParamSet theta;
  ParamSet phi;
  ParamSet theta_buffers;
  ParamSet phi_buffers;
  int64_t t = 0;
  uint64_t seed = 0;
};

MetaState init_state(const seg::NetConfig& net, uint64_t seed);

struct EpisodeTrace {
  int64_t t = 0;
  double alpha = 0.0;
  int inner_dataset = 0;
  std::array<int, 2> outer_datasets{};
  double inner_loss = 0.0;
  double mfl_loss = 0.0;
  double mfl_seg = 0.0;
  double mfl_inter = 0.0;
  double mfl_intra = 0.0;
  double mil_loss = 0.0;
  double direct_norm = 0.0;
  double indirect_norm = 0.0;
  double fd_max_rel_err = std::numeric_limits<double>::quiet_NaN();

  nlohmann::json to_json() const;
  bool finite() const;
};

struct EpisodeResult {
  MetaState state;
  EpisodeTrace trace;
};

/// Random stream of episode t; its first draw picks the inner dataset.
std::mt19937_64 episode_rng(uint64_t seed, int64_t t);
/// Dataset index for the inner loop (uniform over the three).
int sample_inner_dataset(std::mt19937_64& rng);

/// One pass of the shared inner step, the MFL update of θ and the MIL update
/// of φ. Throws tc::NumericError on a non-finite loss or gradient.
EpisodeResult run_episode(const MetaState& state, const phantom::MetaPool& pool, const seg::NetConfig& net, const TrainConfig& config);

/// Mean seg_loss of (θ, ω) over the validation splits of the training groups.
double validation_loss(const phantom::MetaPool& pool, const seg::NetConfig& net, const ParamSet& theta, const ParamSet& omega,
                       const loss::LossWeights& weights);

struct TrainResult {
  MetaState final_state;
  ParamSet best_theta;
  ParamSet best_phi;  // head (φ for meta-training, ω for joint pre-training)
  int64_t best_t = 0;
  double best_val_loss = std::numeric_limits<double>::infinity();
  double initial_val_loss = 0.0;
  std::vector<EpisodeTrace> traces;
  std::vector<std::pair<int64_t, double>> val_history;
  bool diverged = false;
  std::string divergence;
};

struct TrainHooks {
  std::function<void(const EpisodeTrace&)> on_episode;
  std::function<void(const MetaState&, double val_loss, bool best)> on_checkpoint;
};

/// Runs episodes state.t .. config.episodes − 1 (from scratch when `resume`
/// is null), validating every checkpoint_every episodes and at the end.
/// On divergence the best checkpoint so far is kept and `diverged` is set.
TrainResult meta_train(const phantom::MetaPool& pool, const seg::NetConfig& net, const TrainConfig& config, uint64_t seed,
                       const MetaState* resume = nullptr, const TrainHooks& hooks = {});

/// Baseline: standard joint training of θ and ω on mini-batches drawn from
/// all three training groups each step, same schedule and optimizer.
TrainResult pretrain_joint(const phantom::MetaPool& pool, const seg::NetConfig& net, const TrainConfig& config, uint64_t seed,
                           const MetaState* resume = nullptr, const TrainHooks& hooks = {});

struct FineTuneConfig {
  int steps = 50;
  double alpha = 0.01;
  int n_upsample_layers = 2;
  bool all = false;  // train every head parameter regardless of n
  SgdConfig sgd{0.9, 3e-5, true};
  bool augment = true;
  double augment_noise = 0.02;
};

/// Adapts ω := φ̂ on the shots with θ̂ frozen; only the trainable part of the
/// head partition moves, frozen entries are returned bit-identical.
ParamSet fine_tune(const seg::NetConfig& net, const ParamSet& theta, const ParamSet& phi, const Batch& shots, const FineTuneConfig& config,
                   const loss::LossWeights& weights, uint64_t seed, std::vector<double>* losses = nullptr);

}  // namespace dumeta::meta
