// Copyright 2026 The DuMeta Lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "dumeta/labels.hpp"
#include "dumeta/phantoms.hpp"
#include "dumeta/segnet.hpp"
#include "json.hpp"

namespace dumeta::metrics {

/// 2|P∩G| / (|P|+|G|); 1 when both are empty, 0 when exactly one is.
double dice_score(const LabelMap& pred, const LabelMap& gt, int cls);

/// Class pixels with at least one 4-neighbour outside the class (the image
/// border counts as outside). Row-major 0/1 mask of one label plane.
std::vector<unsigned char> boundary(const LabelMap& labels, int cls);

/// Exact squared Euclidean distance from every pixel to the nearest set
/// pixel (two-pass separable transform). Unset everywhere yields +inf.
std::vector<double> squared_distance_transform(const std::vector<unsigned char>& set, int64_t height, int64_t width);

/// Average symmetric surface distance, or nullopt when either mask is empty.
/// Single-plane label maps only.
std::optional<double> asd(const LabelMap& pred, const LabelMap& gt, int cls, double spacing = 1.0);

struct SubjectMetrics {
  std::array<double, 3> dice{};
  std::array<std::optional<double>, 3> asd{};
};

SubjectMetrics subject_metrics(const LabelMap& pred, const LabelMap& gt, double spacing = 1.0);

struct ClassStats {
  double dice_mean = 0, dice_std = 0;
  double asd_mean = 0, asd_std = 0;
  int asd_count = 0;    // subjects with a defined ASD
  int asd_missing = 0;  // subjects excluded because a mask was empty
};

struct EvalReport {
  std::array<ClassStats, 3> classes{};  // CSF, GM, WM
  int subjects = 0;
  std::string fingerprint;
  std::vector<SubjectMetrics> per_subject;

  double mean_foreground_dice() const;
  nlohmann::json to_json() const;
};

/// Mean ± population std across subjects.
EvalReport aggregate(const std::vector<SubjectMetrics>& per_subject, std::string fingerprint);
EvalReport report_from_predictions(const std::vector<LabelMap>& preds, const std::vector<LabelMap>& gts, std::string fingerprint,
                                   double spacing = 1.0);

/// Argmax over classes of B×C×H×W logits.
LabelMap argmax_labels(const tc::Tensor& logits);

/// Predicts each subject with the finest-scale logits and aggregates.
EvalReport evaluate(const seg::NetConfig& config, const tc::ParamSet& theta, const tc::ParamSet& omega,
                    const std::vector<const phantom::Subject*>& subjects, std::string fingerprint = "");

/// Aligned text table: one row per named report, Dice and ASD per class.
std::string format_table(const std::vector<std::pair<std::string, EvalReport>>& rows);

}  // namespace dumeta::metrics
