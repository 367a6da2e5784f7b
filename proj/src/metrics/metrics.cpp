// Copyright 2026 The DuMeta Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "dumeta/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "dumeta/ops.hpp"

namespace dumeta::metrics {

using tc::ShapeError;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void check_pair(const LabelMap& pred, const LabelMap& gt) {
  if (pred.batch != gt.batch || pred.height != gt.height || pred.width != gt.width) {
    throw ShapeError("metrics: prediction and ground truth extents differ");
  }
}

// Lower envelope of parabolas rooted at the finite entries of f.
void distance_1d(const std::vector<double>& f, std::vector<double>& d) {
  const int64_t n = static_cast<int64_t>(f.size());
  std::vector<int64_t> v;
  std::vector<double> z;
  for (int64_t q = 0; q < n; ++q) {
    if (f[static_cast<std::size_t>(q)] == kInf) continue;
    const double fq = f[static_cast<std::size_t>(q)] + static_cast<double>(q * q);
    while (!v.empty()) {
      const int64_t p = v.back();
      const double s = (fq - (f[static_cast<std::size_t>(p)] + static_cast<double>(p * p))) / static_cast<double>(2 * (q - p));
      if (s > z.back()) {
        v.push_back(q);
        z.push_back(s);
        break;
      }
      v.pop_back();
      z.pop_back();
    }
    if (v.empty()) {
      v.push_back(q);
      z.push_back(-kInf);
    }
  }
  d.assign(f.size(), kInf);
  if (v.empty()) return;
  std::size_t k = 0;
  for (int64_t q = 0; q < n; ++q) {
    while (k + 1 < v.size() && z[k + 1] < static_cast<double>(q)) ++k;
    const int64_t p = v[k];
    d[static_cast<std::size_t>(q)] = static_cast<double>((q - p) * (q - p)) + f[static_cast<std::size_t>(p)];
  }
}

double surface_sum(const std::vector<unsigned char>& from, const std::vector<double>& dist_to) {
  double s = 0.0;
  for (std::size_t i = 0; i < from.size(); ++i) {
    if (from[i]) s += std::sqrt(dist_to[i]);
  }
  return s;
}

int64_t count(const std::vector<unsigned char>& m) {
  int64_t n = 0;
  for (unsigned char c : m) n += c;
  return n;
}

}  // namespace

double dice_score(const LabelMap& pred, const LabelMap& gt, int cls) {
  check_pair(pred, gt);
  int64_t p = 0, g = 0, both = 0;
  for (std::size_t i = 0; i < pred.values.size(); ++i) {
    const bool a = pred.values[i] == cls, b = gt.values[i] == cls;
    p += a;
    g += b;
    both += a && b;
  }
  if (p == 0 && g == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

std::vector<unsigned char> boundary(const LabelMap& labels, int cls) {
  if (labels.batch != 1) throw ShapeError("boundary: expects a single label plane");
  const int64_t h = labels.height, w = labels.width;
  std::vector<unsigned char> out(static_cast<std::size_t>(h * w), 0);
  auto in_class = [&](int64_t i, int64_t j) { return i >= 0 && j >= 0 && i < h && j < w && labels.at(0, i, j) == cls; };
  for (int64_t i = 0; i < h; ++i) {
    for (int64_t j = 0; j < w; ++j) {
      if (!in_class(i, j)) continue;
      if (!in_class(i - 1, j) || !in_class(i + 1, j) || !in_class(i, j - 1) || !in_class(i, j + 1)) {
        out[static_cast<std::size_t>(i * w + j)] = 1;
      }
    }
  }
  return out;
}

std::vector<double> squared_distance_transform(const std::vector<unsigned char>& set, int64_t h, int64_t w) {
  if (static_cast<int64_t>(set.size()) != h * w) throw ShapeError("distance transform: mask size mismatch");
  std::vector<double> grid(set.size());
  for (std::size_t i = 0; i < set.size(); ++i) grid[i] = set[i] ? 0.0 : kInf;
  std::vector<double> f, d;
  f.resize(static_cast<std::size_t>(h));
  for (int64_t j = 0; j < w; ++j) {
    for (int64_t i = 0; i < h; ++i) f[static_cast<std::size_t>(i)] = grid[static_cast<std::size_t>(i * w + j)];
    distance_1d(f, d);
    for (int64_t i = 0; i < h; ++i) grid[static_cast<std::size_t>(i * w + j)] = d[static_cast<std::size_t>(i)];
  }
  f.resize(static_cast<std::size_t>(w));
  for (int64_t i = 0; i < h; ++i) {
    for (int64_t j = 0; j < w; ++j) f[static_cast<std::size_t>(j)] = grid[static_cast<std::size_t>(i * w + j)];
    distance_1d(f, d);
    for (int64_t j = 0; j < w; ++j) grid[static_cast<std::size_t>(i * w + j)] = d[static_cast<std::size_t>(j)];
  }
  return grid;
}

std::optional<double> asd(const LabelMap& pred, const LabelMap& gt, int cls, double spacing) {
  check_pair(pred, gt);
  const auto bp = boundary(pred, cls);
  const auto bg = boundary(gt, cls);
  const int64_t np = count(bp), ng = count(bg);
  if (np == 0 || ng == 0) return std::nullopt;
  const auto dp = squared_distance_transform(bp, pred.height, pred.width);
  const auto dg = squared_distance_transform(bg, gt.height, gt.width);
  // the two one-sided sums are added last so that asd(P, G) == asd(G, P) bitwise
  const double total = surface_sum(bp, dg) + surface_sum(bg, dp);
  return spacing * total / static_cast<double>(np + ng);
}

SubjectMetrics subject_metrics(const LabelMap& pred, const LabelMap& gt, double spacing) {
  SubjectMetrics m;
  for (std::size_t c = 0; c < 3; ++c) {
    m.dice[c] = dice_score(pred, gt, kTissueClasses[c]);
    m.asd[c] = asd(pred, gt, kTissueClasses[c], spacing);
  }
  return m;
}

double EvalReport::mean_foreground_dice() const {
  return (classes[0].dice_mean + classes[1].dice_mean + classes[2].dice_mean) / 3.0;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json cls = nlohmann::json::array();
  for (std::size_t c = 0; c < 3; ++c) {
    const ClassStats& s = classes[c];
    cls.push_back({{"class", kTissueNames[c]},
                   {"dice_mean", s.dice_mean},
                   {"dice_std", s.dice_std},
                   {"asd_mean", s.asd_mean},
                   {"asd_std", s.asd_std},
                   {"asd_count", s.asd_count},
                   {"asd_missing", s.asd_missing}});
  }
  return {{"subjects", subjects}, {"fingerprint", fingerprint}, {"classes", cls}, {"mean_foreground_dice", mean_foreground_dice()}};
}

EvalReport aggregate(const std::vector<SubjectMetrics>& per_subject, std::string fingerprint) {
  if (per_subject.empty()) throw std::invalid_argument("aggregate: no subjects");
  EvalReport r;
  r.subjects = static_cast<int>(per_subject.size());
  r.fingerprint = std::move(fingerprint);
  r.per_subject = per_subject;
  for (std::size_t c = 0; c < 3; ++c) {
    ClassStats& s = r.classes[c];
    std::vector<double> dice, dist;
    for (const SubjectMetrics& m : per_subject) {
      dice.push_back(m.dice[c]);
      if (m.asd[c]) {
        dist.push_back(*m.asd[c]);
      } else {
        ++s.asd_missing;
      }
    }
    auto stats = [](const std::vector<double>& x, double& mean, double& sd) {
      mean = sd = 0.0;
      if (x.empty()) return;
      for (double v : x) mean += v;
      mean /= static_cast<double>(x.size());
      for (double v : x) sd += (v - mean) * (v - mean);
      sd = std::sqrt(sd / static_cast<double>(x.size()));
    };
    stats(dice, s.dice_mean, s.dice_std);
    stats(dist, s.asd_mean, s.asd_std);
    s.asd_count = static_cast<int>(dist.size());
  }
  return r;
}

EvalReport report_from_predictions(const std::vector<LabelMap>& preds, const std::vector<LabelMap>& gts, std::string fingerprint,
                                   double spacing) {
  if (preds.size() != gts.size()) throw std::invalid_argument("report: prediction and ground-truth counts differ");
  std::vector<SubjectMetrics> per;
  for (std::size_t i = 0; i < preds.size(); ++i) per.push_back(subject_metrics(preds[i], gts[i], spacing));
  return aggregate(per, std::move(fingerprint));
}

LabelMap argmax_labels(const tc::Tensor& logits) {
  if (logits.rank() != 4) throw ShapeError("argmax_labels: expects B×C×H×W logits");
  const int64_t B = logits.extent(0), C = logits.extent(1), H = logits.extent(2), W = logits.extent(3), P = H * W;
  std::vector<int> out(static_cast<std::size_t>(B * P));
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t p = 0; p < P; ++p) {
      int best = 0;
      for (int64_t c = 1; c < C; ++c) {
        if (logits[(b * C + c) * P + p] > logits[(b * C + best) * P + p]) best = static_cast<int>(c);
      }
      out[static_cast<std::size_t>(b * P + p)] = best;
    }
  }
  return LabelMap(B, H, W, std::move(out));
}

EvalReport evaluate(const seg::NetConfig& config, const tc::ParamSet& theta, const tc::ParamSet& omega,
                    const std::vector<const phantom::Subject*>& subjects, std::string fingerprint) {
  if (subjects.empty()) throw std::invalid_argument("evaluate: empty dataset");
  std::vector<LabelMap> preds, gts;
  for (const phantom::Subject* s : subjects) {
    const int64_t n = s->image.extent(1);
    tc::Tensor x = s->image.reshaped({1, 1, n, s->image.extent(2)});
    preds.push_back(argmax_labels(seg::forward(config, theta.detached(), omega.detached(), x).back()));
    gts.push_back(s->labels);
  }
  return report_from_predictions(preds, gts, std::move(fingerprint));
}

std::string format_table(const std::vector<std::pair<std::string, EvalReport>>& rows) {
  std::size_t name_w = 6;
  for (const auto& r : rows) name_w = std::max(name_w, r.first.size());
  std::ostringstream out;
  auto pad = [](std::string s, std::size_t w) {
    s.resize(std::max(s.size(), w), ' ');
    return s;
  };
  out << pad("Method", name_w);
  for (const char* cls : kTissueNames) out << " | " << pad(std::string(cls) + " Dice(+)", 15) << " | " << pad(std::string(cls) + " ASD(-)", 15);
  out << " | n\n";
  out << std::string(name_w, '-');
  for (int i = 0; i < 3; ++i) out << "-+-" << std::string(15, '-') << "-+-" << std::string(15, '-');
  out << "-+--\n";
  for (const auto& [name, r] : rows) {
    out << pad(name, name_w);
    for (const ClassStats& s : r.classes) {
      char dice[32], dist[32];
      std::snprintf(dice, sizeof dice, "%.4f±%.4f", s.dice_mean, s.dice_std);
      if (s.asd_count > 0) {
        std::snprintf(dist, sizeof dist, "%.3f±%.3f", s.asd_mean, s.asd_std);
      } else {
        std::snprintf(dist, sizeof dist, "n/a");
      }
      // "±" is two bytes in UTF-8; pad by display width
      out << " | " << pad(dice, 16) << " | " << pad(dist, s.asd_count > 0 ? 16 : 15);
    }
    out << " | " << r.subjects << "\n";
  }
  return out.str();
}

}  // namespace dumeta::metrics
