// Copyright 2026 The DuMeta Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <random>

#include "doctest.h"
#include "dumeta/gradcheck.hpp"
#include "dumeta/losses.hpp"
#include "test_util.hpp"

using namespace dumeta;
using namespace dumeta::loss;
using dumeta::testing::random_away_from_zero;
using dumeta::testing::random_tensor;
using dumeta::testing::values;

namespace {

LabelMap random_labels(int64_t b, int64_t h, int classes, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> cls(0, classes - 1);
  std::vector<int> v(static_cast<std::size_t>(b * h * h));
  for (int& x : v) x = cls(rng);
  return LabelMap(b, h, h, std::move(v));
}

// Logits with +margin at the true class and 0 elsewhere.
Tensor margin_logits(const LabelMap& labels, int64_t classes, double margin) {
  Tensor y = one_hot(labels, classes);
  return tc::scale(y, margin);
}

// Plain-double oracles.
double cos_oracle(const std::vector<double>& u, const std::vector<double>& v) {
  double dot = 0, nu = 0, nv = 0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    dot += u[i] * v[i];
    nu += u[i] * u[i];
    nv += v[i] * v[i];
  }
  return dot / (std::sqrt(nu) * std::sqrt(nv) + 1e-8);
}

std::vector<double> row(const Tensor& t, int64_t r) {
  const int64_t c = t.extent(1);
  auto d = t.data();
  return std::vector<double>(d.begin() + r * c, d.begin() + (r + 1) * c);
}

double mean_cos_oracle(const Tensor& u, const Tensor& v) {
  double s = 0;
  for (int64_t r = 0; r < u.extent(0); ++r) s += cos_oracle(row(u, r), row(v, r));
  return s / static_cast<double>(u.extent(0));
}

double dice_oracle(const Tensor& logits, const LabelMap& labels) {
  const int64_t C = logits.extent(1), P = labels.plane();
  std::vector<double> inter(static_cast<std::size_t>(C)), ps(static_cast<std::size_t>(C)), ys(static_cast<std::size_t>(C));
  for (int64_t b = 0; b < labels.batch; ++b) {
    for (int64_t p = 0; p < P; ++p) {
      double mx = -1e300;
      for (int64_t c = 0; c < C; ++c) mx = std::max(mx, logits[(b * C + c) * P + p]);
      double z = 0;
      for (int64_t c = 0; c < C; ++c) z += std::exp(logits[(b * C + c) * P + p] - mx);
      for (int64_t c = 0; c < C; ++c) {
        const double prob = std::exp(logits[(b * C + c) * P + p] - mx) / z;
        const double y = labels.values[static_cast<std::size_t>(b * P + p)] == c ? 1.0 : 0.0;
        inter[static_cast<std::size_t>(c)] += prob * y;
        ps[static_cast<std::size_t>(c)] += prob;
        ys[static_cast<std::size_t>(c)] += y;
      }
    }
  }
  double s = 0;
  for (std::size_t c = 0; c < inter.size(); ++c) s += (2 * inter[c] + 1e-5) / (ps[c] + ys[c] + 1e-5);
  return 1.0 - s / static_cast<double>(C);
}

double ce_oracle(const Tensor& logits, const LabelMap& labels) {
  const int64_t C = logits.extent(1), P = labels.plane();
  double s = 0;
  for (int64_t b = 0; b < labels.batch; ++b) {
    for (int64_t p = 0; p < P; ++p) {
      double mx = -1e300;
      for (int64_t c = 0; c < C; ++c) mx = std::max(mx, logits[(b * C + c) * P + p]);
      double z = 0;
      for (int64_t c = 0; c < C; ++c) z += std::exp(logits[(b * C + c) * P + p] - mx);
      const int t = labels.values[static_cast<std::size_t>(b * P + p)];
      s -= logits[(b * C + t) * P + p] - mx - std::log(z);
    }
  }
  return s / static_cast<double>(labels.batch * P);
}

ClassRep rep_of(Tensor t) {
  std::vector<bool> valid(static_cast<std::size_t>(t.extent(0)), true);
  return ClassRep{std::move(t), std::move(valid)};
}

TissueReps reps_from(const std::vector<std::array<Tensor, 3>>& scales) {
  TissueReps r;
  for (const auto& s : scales) r.scales.push_back({rep_of(s[0]), rep_of(s[1]), rep_of(s[2])});
  return r;
}

TissueReps random_reps(int K, int64_t B, std::mt19937_64& rng) {
  std::vector<std::array<Tensor, 3>> s;
  for (int k = 0; k < K; ++k) s.push_back({random_tensor({B, 3 + k}, rng), random_tensor({B, 3 + k}, rng), random_tensor({B, 3 + k}, rng)});
  return reps_from(s);
}

}  // namespace

TEST_CASE("dice_loss examples") {
  std::mt19937_64 rng(1);
  LabelMap labels = random_labels(2, 8, 4, rng);
  CHECK(dice_loss(margin_logits(labels, 4, 20.0), labels).item() < 1e-3);

  // two classes, uniform logits, balanced labels
  std::vector<int> v(64);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<int>(i % 2);
  LabelMap balanced(1, 8, 8, v);
  const double N = 64, Nc = 32;
  const double per_class = (2 * 0.5 * Nc + 1e-5) / (0.5 * N + Nc + 1e-5);
  CHECK(dice_loss(Tensor::zeros({1, 2, 8, 8}), balanced).item() == doctest::Approx(1.0 - per_class).epsilon(1e-12));
  CHECK(dice_loss(Tensor::zeros({1, 2, 8, 8}), balanced).item() == doctest::Approx(0.5).epsilon(1e-6));

  Tensor logits = random_tensor({2, 4, 8, 8}, rng, -3, 3);
  CHECK(dice_loss(logits, labels).item() == doctest::Approx(dice_oracle(logits, labels)).epsilon(1e-12));

  // swapping the batch elements
  std::vector<double> lv = logits.to_vector();
  std::rotate(lv.begin(), lv.begin() + 4 * 64, lv.end());
  std::vector<int> labv = labels.values;
  std::rotate(labv.begin(), labv.begin() + 64, labv.end());
  CHECK(dice_loss(Tensor(logits.shape(), lv), LabelMap(2, 8, 8, labv)).item() ==
        doctest::Approx(dice_loss(logits, labels).item()).epsilon(1e-13));

  LabelMap bad(1, 8, 8, std::vector<int>(64, 4));
  CHECK_THROWS_AS(dice_loss(Tensor::zeros({1, 4, 8, 8}), bad), std::out_of_range);
}

TEST_CASE("ce_loss examples") {
  std::mt19937_64 rng(2);
  LabelMap labels = random_labels(2, 8, 4, rng);
  CHECK(ce_loss(Tensor::zeros({2, 4, 8, 8}), labels).item() == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  CHECK(ce_loss(margin_logits(labels, 4, 20.0), labels).item() < 1e-8);

  Tensor logits = random_tensor({2, 4, 8, 8}, rng, -3, 3);
  CHECK(ce_loss(logits, labels).item() == doctest::Approx(ce_oracle(logits, labels)).epsilon(1e-12));
  // per-voxel constant shift
  std::vector<double> shifted = logits.to_vector();
  for (int64_t b = 0; b < 2; ++b) {
    for (int64_t p = 0; p < 64; ++p) {
      const double s = static_cast<double>((b * 64 + p) % 7) - 3.0;
      for (int64_t c = 0; c < 4; ++c) shifted[static_cast<std::size_t>((b * 4 + c) * 64 + p)] += s;
    }
  }
  CHECK(ce_loss(Tensor(logits.shape(), shifted), labels).item() == doctest::Approx(ce_loss(logits, labels).item()).epsilon(1e-12));
}

TEST_CASE("seg_loss examples") {
  std::mt19937_64 rng(3);
  LabelMap labels = random_labels(2, 8, 4, rng);
  Tensor fine = random_tensor({2, 4, 8, 8}, rng, -2, 2);
  Tensor mid = random_tensor({2, 4, 4, 4}, rng, -2, 2);
  Tensor coarse = random_tensor({2, 4, 2, 2}, rng, -2, 2);

  Tensor single[] = {fine};
  const double w1[] = {1.0};
  CHECK(seg_loss(single, labels, w1).item() == doctest::Approx(dice_oracle(fine, labels) + ce_oracle(fine, labels)).epsilon(1e-12));

  Tensor three[] = {coarse, mid, fine};
  const double zero_coarse[] = {1.0, 0.0, 0.0};
  CHECK(seg_loss(three, labels, zero_coarse).item() == doctest::Approx(seg_loss(single, labels, w1).item()).epsilon(1e-14));

  // hand-weighted: labels picked at (i·f, j·f)
  auto pick = [&](int64_t f) {
    std::vector<int> v;
    for (int64_t b = 0; b < 2; ++b) {
      for (int64_t i = 0; i < 8; i += f) {
        for (int64_t j = 0; j < 8; j += f) v.push_back(labels.values[static_cast<std::size_t>(b * 64 + i * 8 + j)]);
      }
    }
    return LabelMap(2, 8 / f, 8 / f, v);
  };
  const double l1 = dice_oracle(fine, labels) + ce_oracle(fine, labels);
  const double l2 = dice_oracle(mid, pick(2)) + ce_oracle(mid, pick(2));
  const double l3 = dice_oracle(coarse, pick(4)) + ce_oracle(coarse, pick(4));
  const double w[] = {1.0, 0.5, 0.25};
  const double expected = (1.0 * l1 + 0.5 * l2 + 0.25 * l3) / 1.75;
  CHECK(seg_loss(three, labels, w).item() == doctest::Approx(expected).epsilon(1e-12));

  CHECK_THROWS_AS(seg_loss(three, labels, w1), tc::ShapeError);
}

TEST_CASE("label downsampling picks the top-left sample of each cell") {
  LabelMap m(1, 4, 4, {1, 2, 3, 0, 0, 0, 0, 0, 2, 2, 1, 1, 3, 3, 3, 3});
  CHECK(downsample_nearest(m, 2).values == std::vector<int>{1, 3, 2, 1});
}

TEST_CASE("tissue_representations examples") {
  std::mt19937_64 rng(4);
  LabelMap labels = random_labels(2, 8, 4, rng);
  seg::FeaturePyramid constant{{Tensor::full({2, 3, 8, 8}, 0.7), Tensor::full({2, 5, 4, 4}, 0.7)}, {1, 2}};
  TissueReps reps = tissue_representations(constant, labels);
  REQUIRE(reps.scales.size() == 2);
  for (const auto& s : reps.scales) {
    for (const ClassRep& r : s) {
      for (std::size_t b = 0; b < r.valid.size(); ++b) {
        if (!r.valid[b]) continue;
        for (double v : row(r.rep, static_cast<int64_t>(b))) CHECK(v == doctest::Approx(0.7).epsilon(1e-15));
      }
    }
  }

  seg::FeaturePyramid random_pyr{{random_tensor({1, 3, 8, 8}, rng)}, {1}};
  TissueReps gm_only = tissue_representations(random_pyr, LabelMap(1, 8, 8, std::vector<int>(64, kGm)));
  CHECK_FALSE(gm_only.scales[0][0].valid[0]);
  CHECK(gm_only.scales[0][1].valid[0]);
  CHECK_FALSE(gm_only.scales[0][2].valid[0]);
  Tensor spatial = tc::mean(random_pyr.features[0], {2, 3});
  for (int64_t c = 0; c < 3; ++c) CHECK(gm_only.scales[0][1].rep[c] == doctest::Approx(spatial[c]).epsilon(1e-14));

  // 4×4 checkerboard of CSF/WM vs explicit index enumeration
  std::vector<int> board(16);
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j < 4; ++j) board[static_cast<std::size_t>(i * 4 + j)] = (i + j) % 2 == 0 ? kCsf : kWm;
  }
  Tensor f = random_tensor({1, 2, 4, 4}, rng);
  TissueReps cb = tissue_representations(seg::FeaturePyramid{{f}, {1}}, LabelMap(1, 4, 4, board));
  for (int64_t ch = 0; ch < 2; ++ch) {
    double csf = 0, wm = 0;
    for (int i = 0; i < 4; ++i) {
      for (int j = 0; j < 4; ++j) ((i + j) % 2 == 0 ? csf : wm) += f[ch * 16 + i * 4 + j];
    }
    CHECK(cb.scales[0][0].rep[ch] == doctest::Approx(csf / 8).epsilon(1e-14));
    CHECK(cb.scales[0][2].rep[ch] == doctest::Approx(wm / 8).epsilon(1e-14));
  }
  CHECK_FALSE(cb.scales[0][1].valid[0]);
}

TEST_CASE("cosine_similarity examples") {
  Tensor u({1, 3}, {0.3, -1.2, 2.0});
  CHECK(cosine_similarity(u, u).item() == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(cosine_similarity(Tensor({1, 2}, {1, 0}), Tensor({1, 2}, {0, 1})).item() == 0.0);
  CHECK(cosine_similarity(Tensor({1, 2}, {1, 1}), Tensor({1, 2}, {-1, -1})).item() == doctest::Approx(-1.0).epsilon(1e-6));

  Tensor a({2, 2}, {1, 0, 1, 1});
  Tensor b({2, 2}, {5, 5, 1, 1});
  Cosine dropped = cosine_similarity(a, b, {true, true}, {false, true});
  CHECK(dropped.rows == 1);
  CHECK(dropped.value.item() == doctest::Approx(1.0).epsilon(1e-6));
  Cosine none = cosine_similarity(a, b, {false, false}, {true, true});
  CHECK_FALSE(none.valid());
  CHECK(none.value.item() == 0.0);

  Tensor z({2, 2}, {0, 0, 1, 1});
  Cosine with_zero = cosine_similarity(z, b, {true, true}, {true, true});
  CHECK(with_zero.rows == 2);
  CHECK(with_zero.value.item() == doctest::Approx(0.5).epsilon(1e-6));
}

TEST_CASE("inter_tissue_loss examples") {
  Tensor e1({1, 3}, {1, 0, 0}), e2({1, 3}, {0, 2, 0}), e3({1, 3}, {0, 0, 3});
  CHECK(std::abs(inter_tissue_loss(reps_from({{e1, e2, e3}, {e2, e3, e1}})).item()) < 1e-6);
  Tensor v({1, 3}, {0.5, -1, 2});
  CHECK(inter_tissue_loss(reps_from({{v, v, v}})).item() == doctest::Approx(1.0).epsilon(1e-6));

  std::mt19937_64 rng(5);
  TissueReps r = random_reps(2, 3, rng);
  double s = 0;
  for (const auto& sc : r.scales) {
    s += mean_cos_oracle(sc[0].rep, sc[1].rep) + mean_cos_oracle(sc[0].rep, sc[2].rep) + mean_cos_oracle(sc[1].rep, sc[2].rep);
  }
  CHECK(inter_tissue_loss(r).item() == doctest::Approx(s / 6).epsilon(1e-12));
}

TEST_CASE("intra_tissue_loss examples") {
  std::mt19937_64 rng(6);
  TissueReps a = random_reps(2, 2, rng);
  CHECK(intra_tissue_loss(a, a, IntraMode::Positional).item() == doctest::Approx(-1.0).epsilon(1e-6));
  CHECK(intra_tissue_loss(a, a, IntraMode::BatchMean).item() == doctest::Approx(-1.0).epsilon(1e-6));

  Tensor e1({1, 2}, {1, 0}), e2({1, 2}, {0, 1});
  CHECK(std::abs(intra_tissue_loss(reps_from({{e1, e1, e2}}), reps_from({{e2, e2, e1}}), IntraMode::Positional).item()) < 1e-6);

  TissueReps x = random_reps(1, 3, rng), y = random_reps(1, 3, rng);
  double s = 0;
  for (int c = 0; c < 3; ++c) s += mean_cos_oracle(x.scales[0][c].rep, y.scales[0][c].rep);
  CHECK(intra_tissue_loss(x, y, IntraMode::Positional).item() == doctest::Approx(-s / 3).epsilon(1e-12));

  double sm = 0;
  for (int c = 0; c < 3; ++c) {
    const Tensor& ux = x.scales[0][c].rep;
    const Tensor& uy = y.scales[0][c].rep;
    std::vector<double> mx(static_cast<std::size_t>(ux.extent(1))), my(mx.size());
    for (int64_t r = 0; r < 3; ++r) {
      for (std::size_t j = 0; j < mx.size(); ++j) {
        mx[j] += row(ux, r)[j] / 3;
        my[j] += row(uy, r)[j] / 3;
      }
    }
    sm += cos_oracle(mx, my);
  }
  CHECK(intra_tissue_loss(x, y, IntraMode::BatchMean).item() == doctest::Approx(-sm / 3).epsilon(1e-12));

  TissueReps small = random_reps(1, 2, rng);
  CHECK_THROWS_AS(intra_tissue_loss(x, small, IntraMode::Positional), tc::ShapeError);
  CHECK_NOTHROW(intra_tissue_loss(x, small, IntraMode::BatchMean));
}

TEST_CASE("outer_loss examples") {
  std::mt19937_64 rng(7);
  const std::vector<double> ds = {1.0};
  auto batch = [&](Tensor logits, LabelMap labels, TissueReps reps) { return OuterBatch{{std::move(logits)}, std::move(labels), std::move(reps)}; };
  LabelMap la = random_labels(2, 4, 4, rng), lb = random_labels(2, 4, 4, rng);
  Tensor ga = random_tensor({2, 4, 4, 4}, rng), gb = random_tensor({2, 4, 4, 4}, rng);
  TissueReps ra = random_reps(1, 2, rng), rb = random_reps(1, 2, rng);
  std::vector<OuterBatch> batches{batch(ga, la, ra), batch(gb, lb, rb)};

  LossWeights plain{0.0, 0.0, ds, IntraMode::BatchMean};
  const double sa = dice_oracle(ga, la) + ce_oracle(ga, la), sb = dice_oracle(gb, lb) + ce_oracle(gb, lb);
  CHECK(outer_loss(batches, plain).total.item() == doctest::Approx((sa + sb) / 2).epsilon(1e-12));

  LossWeights full{0.1, 0.001, ds, IntraMode::Positional};
  OuterTerms t = outer_loss(batches, full);
  const double inter = (inter_tissue_loss(ra).item() + inter_tissue_loss(rb).item()) / 2;
  const double intra = intra_tissue_loss(ra, rb, IntraMode::Positional).item();
  CHECK(t.total.item() == doctest::Approx((sa + sb) / 2 + 0.1 * inter + 0.001 * intra).epsilon(1e-12));

  // perfect predictions, orthogonal inter reps, identical intra reps
  Tensor e1({2, 3}, {1, 0, 0, 1, 0, 0}), e2({2, 3}, {0, 1, 0, 0, 1, 0}), e3({2, 3}, {0, 0, 1, 0, 0, 1});
  TissueReps ortho = reps_from({{e1, e2, e3}});
  std::vector<OuterBatch> ideal{batch(margin_logits(la, 4, 30.0), la, ortho), batch(margin_logits(lb, 4, 30.0), lb, ortho)};
  CHECK(outer_loss(ideal, full).total.item() == doctest::Approx(-0.001).epsilon(1e-4));

  std::vector<OuterBatch> one{batches[0]};
  CHECK_THROWS_AS(outer_loss(one, full), std::invalid_argument);
}

TEST_CASE("loss ranges on random inputs") {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    LabelMap labels = random_labels(2, 4, 4, rng);
    Tensor logits = random_tensor({2, 4, 4, 4}, rng, -5, 5);
    const double d = dice_loss(logits, labels).item();
    CHECK(d >= 0.0);
    CHECK(d <= 1.0 + 1e-5);
    CHECK(ce_loss(logits, labels).item() >= 0.0);
    TissueReps a = random_reps(2, 2, rng), b = random_reps(2, 2, rng);
    const double inter = inter_tissue_loss(a).item();
    const double intra = intra_tissue_loss(a, b).item();
    CHECK(inter >= -1.0);
    CHECK(inter <= 1.0);
    CHECK(intra >= -1.0);
    CHECK(intra <= 1.0);
  }
}

TEST_CASE("cosine losses are invariant to positive feature scaling") {
  std::mt19937_64 rng(9);
  LabelMap la = random_labels(2, 8, 4, rng), lb = random_labels(2, 8, 4, rng);
  seg::FeaturePyramid pa{{random_tensor({2, 4, 8, 8}, rng, 0, 1), random_tensor({2, 8, 4, 4}, rng, 0, 1)}, {1, 2}};
  seg::FeaturePyramid pb{{random_tensor({2, 4, 8, 8}, rng, 0, 1), random_tensor({2, 8, 4, 4}, rng, 0, 1)}, {1, 2}};
  auto scaled = [](seg::FeaturePyramid p, double s) {
    for (Tensor& f : p.features) f = tc::scale(f, s);
    return p;
  };
  for (double s : {0.5, 3.0, 250.0}) {
    TissueReps a = tissue_representations(pa, la), b = tissue_representations(pb, lb);
    TissueReps as = tissue_representations(scaled(pa, s), la), bs = tissue_representations(scaled(pb, s), lb);
    CHECK(std::abs(inter_tissue_loss(as).item() - inter_tissue_loss(a).item()) < 1e-6);
    for (IntraMode m : {IntraMode::Positional, IntraMode::BatchMean}) {
      CHECK(std::abs(intra_tissue_loss(as, bs, m).item() - intra_tissue_loss(a, b, m).item()) < 1e-6);
    }
  }
}

TEST_CASE("outer loss is differentiable end to end") {
  seg::NetConfig cfg;
  cfg.image_size = 8;
  cfg.base_width = 3;
  cfg.K = 2;
  seg::Network net = seg::build_network(cfg, 21);
  std::mt19937_64 rng(10);
  Tensor xa = random_tensor({2, 1, 8, 8}, rng, 0, 1), xb = random_tensor({2, 1, 8, 8}, rng, 0, 1);
  LabelMap la = random_labels(2, 8, 4, rng), lb = random_labels(2, 8, 4, rng);
  LossWeights w{0.1, 0.001, LossWeights::halving(cfg.K), IntraMode::BatchMean};
  auto f = [&](const tc::ParamSet& theta) {
    std::vector<OuterBatch> batches;
    for (auto [x, l] : {std::pair{xa, la}, std::pair{xb, lb}}) {
      seg::FeaturePyramid p = seg::extract_features(cfg, theta, x);
      batches.push_back(OuterBatch{seg::decode(cfg, net.omega, p), l, tissue_representations(p, l)});
    }
    return outer_loss(batches, w).total;
  };
  tc::GradCheckOptions opt;
  std::uniform_int_distribution<int64_t> pick(0, net.theta.total_numel() - 1);
  for (int i = 0; i < 30; ++i) opt.indices.push_back(pick(rng));
  tc::GradCheckReport r = tc::check_grad(f, net.theta, opt);
  INFO("max rel err " << r.max_rel_err);
  CHECK(r.max_rel_err < 1e-4);
}
