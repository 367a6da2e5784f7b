// Copyright 2026 The DuMeta Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "dumeta/losses.hpp"

#include <cmath>
#include <stdexcept>

namespace dumeta::loss {

using tc::ShapeError;

void LossWeights::validate() const {
  if (!(beta >= 0.0) || !(gamma >= 0.0)) throw std::invalid_argument("loss weights beta and gamma must be >= 0");
  double total = 0.0;
  for (double w : deep_supervision) {
    if (!(w >= 0.0)) throw std::invalid_argument("deep supervision weights must be >= 0");
    total += w;
  }
  if (!(total > 0.0)) throw std::invalid_argument("deep supervision weights must not all be zero");
}

std::vector<double> LossWeights::halving(int K) {
  std::vector<double> w;
  for (int k = 0; k < K; ++k) w.push_back(std::ldexp(1.0, -k));
  return w;
}

namespace {

void check_logits(const Tensor& logits, const LabelMap& labels, const char* op) {
  if (logits.rank() != 4 || logits.extent(0) != labels.batch || logits.extent(2) != labels.height ||
      logits.extent(3) != labels.width) {
    throw ShapeError(std::string(op) + ": logits " + tc::to_string(logits.shape()) + " do not match labels " +
                     std::to_string(labels.batch) + "×" + std::to_string(labels.height) + "×" + std::to_string(labels.width));
  }
}

Tensor zero() { return Tensor::scalar(0.0); }

std::vector<int64_t> valid_rows(const std::vector<bool>& valid) {
  std::vector<int64_t> rows;
  for (std::size_t i = 0; i < valid.size(); ++i) {
    if (valid[i]) rows.push_back(static_cast<int64_t>(i));
  }
  return rows;
}

bool row_is_zero(const Tensor& t, int64_t row) {
  const int64_t c = t.extent(1);
  for (int64_t j = 0; j < c; ++j) {
    if (t[row * c + j] != 0.0) return false;
  }
  return true;
}

}  // namespace

Tensor dice_loss(const Tensor& logits, const LabelMap& labels) {
  check_logits(logits, labels, "dice_loss");
  const Tensor y = one_hot(labels, logits.extent(1));
  const Tensor p = tc::softmax(logits, 1);
  const Tensor intersection = tc::sum(tc::mul(p, y), {0, 2, 3});
  const Tensor denom = tc::add(tc::sum(p, {0, 2, 3}), tc::sum(y, {0, 2, 3}));
  const Tensor dice = tc::div(tc::add_scalar(tc::scale(intersection, 2.0), kDiceSmooth), tc::add_scalar(denom, kDiceSmooth));
  return tc::add_scalar(tc::neg(tc::mean(dice)), 1.0);
}

Tensor ce_loss(const Tensor& logits, const LabelMap& labels) {
  check_logits(logits, labels, "ce_loss");
  const Tensor y = one_hot(labels, logits.extent(1));
  const double voxels = static_cast<double>(labels.batch * labels.plane());
  return tc::scale(tc::sum(tc::mul(tc::log_softmax(logits, 1), y)), -1.0 / voxels);
}

Tensor seg_loss(std::span<const Tensor> multi_logits, const LabelMap& labels, std::span<const double> deep_supervision) {
  const std::size_t K = multi_logits.size();
  if (K == 0 || deep_supervision.size() != K) {
    throw ShapeError("seg_loss: " + std::to_string(K) + " scales but " + std::to_string(deep_supervision.size()) + " weights");
  }
  Tensor total = zero();
  double weight_sum = 0.0;
  for (std::size_t i = 0; i < K; ++i) {
    const double w = deep_supervision[K - 1 - i];
    weight_sum += w;
    if (w == 0.0) continue;
    const Tensor& logits = multi_logits[i];
    if (logits.rank() != 4 || logits.extent(2) == 0 || labels.height % logits.extent(2) != 0) {
      throw ShapeError("seg_loss: logits " + tc::to_string(logits.shape()) + " do not tile the label map");
    }
    const LabelMap scaled = downsample_nearest(labels, labels.height / logits.extent(2));
    total = tc::add(total, tc::scale(tc::add(dice_loss(logits, scaled), ce_loss(logits, scaled)), w));
  }
  if (!(weight_sum > 0.0)) throw std::invalid_argument("seg_loss: deep supervision weights sum to zero");
  return tc::scale(total, 1.0 / weight_sum);
}

TissueReps tissue_representations(const seg::FeaturePyramid& pyramid, const LabelMap& labels) {
  if (pyramid.features.size() != pyramid.factors.size()) throw ShapeError("tissue_representations: malformed pyramid");
  TissueReps reps;
  for (std::size_t k = 0; k < pyramid.features.size(); ++k) {
    const LabelMap scaled = downsample_nearest(labels, pyramid.factors[k]);
    std::array<ClassRep, 3> per_class;
    for (std::size_t c = 0; c < 3; ++c) {
      tc::MaskedMean m = tc::masked_mean(pyramid.features[k], class_mask(scaled, kTissueClasses[c]));
      per_class[c] = ClassRep{std::move(m.mean), std::move(m.valid)};
    }
    reps.scales.push_back(std::move(per_class));
  }
  return reps;
}

Cosine cosine_similarity(const Tensor& u, const Tensor& v, const std::vector<bool>& valid_u, const std::vector<bool>& valid_v) {
  if (u.rank() != 2 || u.shape() != v.shape()) {
    throw ShapeError("cosine_similarity: operands " + tc::to_string(u.shape()) + " and " + tc::to_string(v.shape()));
  }
  const int64_t batch = u.extent(0);
  if (static_cast<int64_t>(valid_u.size()) != batch || static_cast<int64_t>(valid_v.size()) != batch) {
    throw ShapeError("cosine_similarity: validity mask length mismatch");
  }
  Cosine out{zero(), 0};
  std::vector<int64_t> live;
  for (int64_t r = 0; r < batch; ++r) {
    if (!valid_u[static_cast<std::size_t>(r)] || !valid_v[static_cast<std::size_t>(r)]) continue;
    ++out.rows;
    if (!row_is_zero(u, r) && !row_is_zero(v, r)) live.push_back(r);
  }
  if (live.empty()) return out;
  const bool all = static_cast<int64_t>(live.size()) == batch;
  const Tensor a = all ? u : tc::index_select(u, live);
  const Tensor b = all ? v : tc::index_select(v, live);
  const Tensor dot = tc::sum(tc::mul(a, b), {1});
  const Tensor na = tc::pow(tc::sum(tc::mul(a, a), {1}), 0.5);
  const Tensor nb = tc::pow(tc::sum(tc::mul(b, b), {1}), 0.5);
  const Tensor cos = tc::div(dot, tc::add_scalar(tc::mul(na, nb), kCosineGuard));
  out.value = tc::scale(tc::sum(cos), 1.0 / static_cast<double>(out.rows));
  return out;
}

Tensor cosine_similarity(const Tensor& u, const Tensor& v) {
  const std::vector<bool> all(static_cast<std::size_t>(u.rank() == 2 ? u.extent(0) : 0), true);
  return cosine_similarity(u, v, all, all).value;
}

Tensor inter_tissue_loss(const TissueReps& reps) {
  if (reps.scales.empty()) throw ShapeError("inter_tissue_loss: no scales");
  static constexpr std::pair<int, int> kPairs[] = {{0, 1}, {0, 2}, {1, 2}};
  Tensor total = zero();
  for (const auto& scale : reps.scales) {
    for (auto [i, j] : kPairs) {
      total = tc::add(total, cosine_similarity(scale[i].rep, scale[j].rep, scale[i].valid, scale[j].valid).value);
    }
  }
  return tc::scale(total, 1.0 / (3.0 * static_cast<double>(reps.scales.size())));
}

namespace {

ClassRep batch_mean(const ClassRep& r) {
  const std::vector<int64_t> rows = valid_rows(r.valid);
  if (rows.empty()) return ClassRep{Tensor::zeros({1, r.rep.extent(1)}), {false}};
  const Tensor selected = static_cast<int64_t>(rows.size()) == r.rep.extent(0) ? r.rep : tc::index_select(r.rep, rows);
  return ClassRep{tc::reshape(tc::mean(selected, {0}), {1, r.rep.extent(1)}), {true}};
}

}  // namespace

Tensor intra_tissue_loss(const TissueReps& a, const TissueReps& b, IntraMode mode) {
  if (a.scales.size() != b.scales.size() || a.scales.empty()) throw ShapeError("intra_tissue_loss: scale count mismatch");
  Tensor total = zero();
  for (std::size_t k = 0; k < a.scales.size(); ++k) {
    for (std::size_t c = 0; c < 3; ++c) {
      const ClassRep& ra = a.scales[k][c];
      const ClassRep& rb = b.scales[k][c];
      if (mode == IntraMode::Positional) {
        if (ra.rep.extent(0) != rb.rep.extent(0)) {
          throw ShapeError("intra_tissue_loss: positional pairing needs equal mini-batch sizes, got " +
                           std::to_string(ra.rep.extent(0)) + " and " + std::to_string(rb.rep.extent(0)));
        }
        total = tc::add(total, cosine_similarity(ra.rep, rb.rep, ra.valid, rb.valid).value);
      } else {
        const ClassRep ma = batch_mean(ra), mb = batch_mean(rb);
        total = tc::add(total, cosine_similarity(ma.rep, mb.rep, ma.valid, mb.valid).value);
      }
    }
  }
  return tc::scale(total, -1.0 / (3.0 * static_cast<double>(a.scales.size())));
}

OuterTerms outer_loss(std::span<const OuterBatch> batches, const LossWeights& weights) {
  if (batches.size() != 2) throw std::invalid_argument("outer_loss needs exactly two outer batches, got " + std::to_string(batches.size()));
  OuterTerms t;
  t.seg = tc::scale(tc::add(seg_loss(batches[0].logits, batches[0].labels, weights.deep_supervision),
                            seg_loss(batches[1].logits, batches[1].labels, weights.deep_supervision)),
                    0.5);
  t.inter = weights.beta == 0.0 ? zero()
                                : tc::scale(tc::add(inter_tissue_loss(batches[0].reps), inter_tissue_loss(batches[1].reps)), 0.5);
  t.intra = weights.gamma == 0.0 ? zero() : intra_tissue_loss(batches[0].reps, batches[1].reps, weights.intra_mode);
  t.total = t.seg;
  if (weights.beta != 0.0) t.total = tc::add(t.total, tc::scale(t.inter, weights.beta));
  if (weights.gamma != 0.0) t.total = tc::add(t.total, tc::scale(t.intra, weights.gamma));
  return t;
}

}  // namespace dumeta::loss
