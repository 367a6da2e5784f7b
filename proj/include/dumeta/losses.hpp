// Copyright 2026 The DuMeta Lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <span>
#include <vector>

#include "dumeta/labels.hpp"
#include "dumeta/ops.hpp"
#include "dumeta/segnet.hpp"

namespace dumeta::loss {

using tc::Tensor;

inline constexpr double kDiceSmooth = 1e-5;
inline constexpr double kCosineGuard = 1e-8;

enum class IntraMode { Positional, BatchMean };

struct LossWeights {
  double beta = 0.1;    // inter-tissue weight
  double gamma = 0.001; // intra-tissue weight
  std::vector<double> deep_supervision = {1.0, 0.5, 0.25};  // finest scale first
  IntraMode intra_mode = IntraMode::BatchMean;

  void validate() const;
  /// Halving weights for K scales: 1, 0.5, 0.25, ...
  static std::vector<double> halving(int K);
};

/// Soft Dice over the whole batch, background included.
Tensor dice_loss(const Tensor& logits, const LabelMap& labels);
Tensor ce_loss(const Tensor& logits, const LabelMap& labels);

/// Weighted deep-supervision loss. `multi_logits` is ordered as decode()
/// returns it (finest last); `labels` are at the finest resolution and are
/// downsampled by nearest pick for coarser scales. The weight of a scale is
/// looked up finest-first.
Tensor seg_loss(std::span<const Tensor> multi_logits, const LabelMap& labels, std::span<const double> deep_supervision);

struct ClassRep {
  Tensor rep;               // B×NC_k
  std::vector<bool> valid;  // per batch element
};

struct TissueReps {
  // scales[k-1][c] for tissue c in CSF, GM, WM order
  std::vector<std::array<ClassRep, 3>> scales;
};

TissueReps tissue_representations(const seg::FeaturePyramid& pyramid, const LabelMap& labels);

struct Cosine {
  Tensor value;    // mean cosine over retained rows (rank 0)
  int64_t rows = 0;  // rows retained after validity filtering
  bool valid() const { return rows > 0; }
};

/// Mean over batch rows of <u,v> / (|u||v| + 1e-8). Rows where either side is
/// invalid are dropped. Rows where either vector is exactly zero contribute a
/// constant 0.
Cosine cosine_similarity(const Tensor& u, const Tensor& v, const std::vector<bool>& valid_u, const std::vector<bool>& valid_v);
Tensor cosine_similarity(const Tensor& u, const Tensor& v);

Tensor inter_tissue_loss(const TissueReps& reps);
Tensor intra_tissue_loss(const TissueReps& a, const TissueReps& b, IntraMode mode = IntraMode::BatchMean);

struct OuterBatch {
  std::vector<Tensor> logits;
  LabelMap labels;
  TissueReps reps;
};

struct OuterTerms {
  Tensor total;
  Tensor seg;    // mean of the two seg losses
  Tensor inter;  // mean of the two inter-tissue losses
  Tensor intra;
};

/// Requires exactly two batches.
OuterTerms outer_loss(std::span<const OuterBatch> batches, const LossWeights& weights);

}  // namespace dumeta::loss
