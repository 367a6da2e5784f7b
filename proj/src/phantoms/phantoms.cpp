// Copyright 2026 The DuMeta Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "dumeta/phantoms.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>
#include <set>

#include "dumeta/dtns.hpp"
#include "dumeta/seeding.hpp"

namespace dumeta::phantom {

using nlohmann::json;
using tc::FormatError;
using tc::Tensor;

void AgeGroupSpec::validate(bool isointense_allowed) const {
  auto fail = [&](const std::string& what) { throw std::invalid_argument("group '" + name + "': " + what); };
  if (name.empty()) throw std::invalid_argument("group name must not be empty");
  for (double c : contrast) {
    if (!(c >= 0.0 && c <= 1.0)) fail("contrast means must lie in [0, 1]");
  }
  for (int i = 0; i < 3; ++i) {
    for (int j = i + 1; j < 3; ++j) {
      const bool gm_wm = i == 1 && j == 2;
      if (std::abs(contrast[static_cast<std::size_t>(i)] - contrast[static_cast<std::size_t>(j)]) < 0.05 && !(gm_wm && isointense_allowed)) {
        fail("contrast means must be separated by at least 0.05");
      }
    }
  }
  if (!(noise >= 0.0)) fail("noise must be >= 0");
  if (!(atrophy >= 0.0 && atrophy <= 3.0)) fail("atrophy must lie in [0, 3] pixels");
  if (blobs_min < 0 || blobs_max < blobs_min || blobs_max > 4) fail("blob range must satisfy 0 <= min <= max <= 4");
  if (subjects < 2) fail("needs at least 2 subjects");
  if (!(label_flip >= 0.0 && label_flip <= 1.0)) fail("label_flip must lie in [0, 1]");
}

json to_json(const AgeGroupSpec& s) {
  return {{"name", s.name},         {"contrast", s.contrast}, {"atrophy", s.atrophy},   {"noise", s.noise},
          {"blobs_min", s.blobs_min}, {"blobs_max", s.blobs_max}, {"subjects", s.subjects}, {"warp", s.warp},
          {"label_flip", s.label_flip}};
}

AgeGroupSpec spec_from_json(const json& j) {
  AgeGroupSpec s;
  s.name = j.at("name").get<std::string>();
  s.contrast = j.at("contrast").get<std::array<double, 3>>();
  s.atrophy = j.value("atrophy", 0.0);
  s.noise = j.value("noise", 0.05);
  s.blobs_min = j.value("blobs_min", 1);
  s.blobs_max = j.value("blobs_max", 2);
  s.subjects = j.value("subjects", 20);
  s.warp = j.value("warp", true);
  s.label_flip = j.value("label_flip", 0.0);
  return s;
}

std::vector<AgeGroupSpec> default_specs() {
  AgeGroupSpec m12{"12m-like", {0.15, 0.65, 0.45}, 0.0, 0.05, 1, 2, 20, true, 0.0};
  AgeGroupSpec m24{"24m-like", {0.15, 0.50, 0.62}, 0.0, 0.05, 1, 2, 20, true, 0.0};
  AgeGroupSpec old{"elderly-like", {0.20, 0.42, 0.78}, 1.0, 0.05, 2, 3, 20, true, 0.0};
  AgeGroupSpec m6{"6m-like", {0.28, 0.54, 0.52}, 0.0, 0.05, 1, 2, 100, true, 0.0};
  return {m12, m24, old, m6};
}

namespace {

constexpr double kPi = std::numbers::pi;

struct Ellipse {
  double cx, cy, a, b, rot;
  bool contains(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    const double u = std::cos(rot) * dx + std::sin(rot) * dy;
    const double v = -std::sin(rot) * dx + std::cos(rot) * dy;
    return (u * u) / (a * a) + (v * v) / (b * b) <= 1.0;
  }
};

struct Geometry {
  double r0;
  std::array<double, 3> amp, phase;  // harmonics 2..4 of the outer boundary
  double csf_width, gm_width;
  int folds;
  double fold_phase, fold_depth;
  std::vector<Ellipse> ventricles;
  // affine (canonical <- image): q = inv * (p - shift)
  double inv[2][2];
  double shift[2];
};

Geometry sample_geometry(const AgeGroupSpec& spec, int64_t size, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto uni = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };
  Geometry g{};
  const double s = static_cast<double>(size);
  g.r0 = 0.40 * s;
  for (int m = 0; m < 3; ++m) {
    g.amp[static_cast<std::size_t>(m)] = uni(-0.06, 0.06);
    g.phase[static_cast<std::size_t>(m)] = uni(0.0, 2 * kPi);
  }
  g.csf_width = 0.12 * g.r0 + spec.atrophy;
  g.gm_width = std::max(0.22 * g.r0 - spec.atrophy * 0.5, 0.08 * g.r0);
  g.folds = 5 + static_cast<int>(u01(rng) * 4.0);
  g.fold_phase = uni(0.0, 2 * kPi);
  g.fold_depth = uni(0.25, 0.45);
  std::uniform_int_distribution<int> count(spec.blobs_min, spec.blobs_max);
  const int n = count(rng);
  for (int i = 0; i < n; ++i) {
    const double grow = 1.0 + 0.15 * spec.atrophy;
    g.ventricles.push_back(Ellipse{uni(-0.2, 0.2) * g.r0, uni(-0.2, 0.2) * g.r0, uni(0.12, 0.22) * g.r0 * grow,
                                   uni(0.05, 0.10) * g.r0 * grow, uni(0.0, kPi)});
  }
  double fwd[2][2] = {{1, 0}, {0, 1}};
  g.shift[0] = g.shift[1] = 0.0;
  if (spec.warp) {
    const double rot = uni(-0.3, 0.3), sx = uni(0.9, 1.1), sy = uni(0.9, 1.1), shear = uni(-0.1, 0.1);
    const double c = std::cos(rot), sn = std::sin(rot);
    // R · [[sx, shear·sx], [0, sy]]
    fwd[0][0] = c * sx;
    fwd[0][1] = c * shear * sx - sn * sy;
    fwd[1][0] = sn * sx;
    fwd[1][1] = sn * shear * sx + c * sy;
    g.shift[0] = uni(-0.06, 0.06) * s;
    g.shift[1] = uni(-0.06, 0.06) * s;
  }
  const double det = fwd[0][0] * fwd[1][1] - fwd[0][1] * fwd[1][0];
  g.inv[0][0] = fwd[1][1] / det;
  g.inv[0][1] = -fwd[0][1] / det;
  g.inv[1][0] = -fwd[1][0] / det;
  g.inv[1][1] = fwd[0][0] / det;
  return g;
}

int tissue_at(const Geometry& g, double x, double y) {
  const double r = std::hypot(x, y);
  const double theta = std::atan2(y, x);
  double outer = 1.0;
  for (int m = 0; m < 3; ++m) outer += g.amp[static_cast<std::size_t>(m)] * std::cos((m + 2) * theta + g.phase[static_cast<std::size_t>(m)]);
  outer *= g.r0;
  if (r > outer) return kBackground;
  const double gm_outer = outer - g.csf_width;
  if (r > gm_outer) return kCsf;
  const double wm_outer = gm_outer - g.gm_width * (1.0 + g.fold_depth * std::cos(g.folds * theta + g.fold_phase));
  if (r > wm_outer) return kGm;
  for (const Ellipse& e : g.ventricles) {
    if (e.contains(x, y)) return kCsf;
  }
  return kWm;
}

void flip_boundaries(std::vector<int>& labels, int64_t size, double p, std::mt19937_64& rng) {
  if (p <= 0.0) return;
  const std::vector<int> src = labels;
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  static constexpr int kDi[] = {-1, 1, 0, 0}, kDj[] = {0, 0, -1, 1};
  for (int64_t i = 0; i < size; ++i) {
    for (int64_t j = 0; j < size; ++j) {
      std::vector<int> others;
      for (int d = 0; d < 4; ++d) {
        const int64_t ni = i + kDi[d], nj = j + kDj[d];
        if (ni < 0 || nj < 0 || ni >= size || nj >= size) continue;
        const int l = src[static_cast<std::size_t>(ni * size + nj)];
        if (l != src[static_cast<std::size_t>(i * size + j)]) others.push_back(l);
      }
      if (others.empty() || u01(rng) >= p) continue;
      labels[static_cast<std::size_t>(i * size + j)] = others[static_cast<std::size_t>(u01(rng) * static_cast<double>(others.size())) % others.size()];
    }
  }
}

Subject render(const AgeGroupSpec& spec, uint64_t attempt_seed, int64_t size) {
  std::mt19937_64 rng(attempt_seed);
  const Geometry g = sample_geometry(spec, size, rng);
  std::vector<int> labels(static_cast<std::size_t>(size * size));
  const double half = static_cast<double>(size) / 2.0;
  for (int64_t i = 0; i < size; ++i) {
    for (int64_t j = 0; j < size; ++j) {
      const double px = static_cast<double>(j) + 0.5 - half - g.shift[0];
      const double py = static_cast<double>(i) + 0.5 - half - g.shift[1];
      const double qx = g.inv[0][0] * px + g.inv[0][1] * py;
      const double qy = g.inv[1][0] * px + g.inv[1][1] * py;
      labels[static_cast<std::size_t>(i * size + j)] = tissue_at(g, qx, qy);
    }
  }
  std::normal_distribution<double> noise(0.0, 1.0);
  std::vector<double> image(labels.size());
  for (std::size_t p = 0; p < labels.size(); ++p) {
    const int l = labels[p];
    const double mean = l == kBackground ? 0.0 : spec.contrast[static_cast<std::size_t>(l - 1)];
    const double v = spec.noise > 0.0 ? mean + spec.noise * noise(rng) : mean;
    image[p] = std::clamp(v, 0.0, 1.0);
  }
  flip_boundaries(labels, size, spec.label_flip, rng);
  Subject s;
  s.image = Tensor({1, size, size}, std::move(image));
  s.labels = LabelMap(1, size, size, std::move(labels));
  s.group = spec.name;
  return s;
}

}  // namespace

std::array<double, 3> class_fractions(const LabelMap& labels) {
  std::array<double, 3> f{};
  for (int v : labels.values) {
    if (v >= 1 && v <= 3) f[static_cast<std::size_t>(v - 1)] += 1.0;
  }
  for (double& x : f) x /= static_cast<double>(labels.values.size());
  return f;
}

Subject generate_subject(const AgeGroupSpec& spec, uint64_t seed, int64_t image_size) {
  if (image_size < 8) throw std::invalid_argument("phantom image size must be >= 8");
  for (uint64_t attempt = 0; attempt < 10; ++attempt) {
    Subject s = render(spec, attempt == 0 ? seed : derive_seed(seed, {attempt}), image_size);
    const auto f = class_fractions(s.labels);
    if (std::all_of(f.begin(), f.end(), [](double x) { return x >= 0.01; })) {
      s.seed = seed;
      return s;
    }
  }
  throw GenerationError("group '" + spec.name + "': could not reach 1% per tissue class after 10 attempts");
}

const Group& MetaPool::group(const std::string& name) const {
  for (const Group& g : train_groups) {
    if (g.spec.name == name) return g;
  }
  if (test_group.spec.name == name) return test_group;
  throw std::out_of_range("pool has no group '" + name + "'");
}

uint64_t subject_seed(uint64_t pool_seed, int group_index, int subject_index) {
  return derive_seed(pool_seed, {0x5u, static_cast<uint64_t>(group_index), static_cast<uint64_t>(subject_index)});
}

namespace {

std::string subject_id(int i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "s%03d", i);
  return buf;
}

void assign_split(Group& g, uint64_t pool_seed, int group_index) {
  const int n = static_cast<int>(g.subjects.size());
  const int n_val = std::max(1, n / 5);
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  std::mt19937_64 rng(derive_seed(pool_seed, {0x6u, static_cast<uint64_t>(group_index)}));
  std::shuffle(order.begin(), order.end(), rng);
  g.val.assign(order.begin(), order.begin() + n_val);
  g.train.assign(order.begin() + n_val, order.end());
  std::sort(g.train.begin(), g.train.end());
  std::sort(g.val.begin(), g.val.end());
}

}  // namespace

void validate_specs(const std::vector<AgeGroupSpec>& specs) {
  if (specs.size() != 4) {
    throw std::invalid_argument("a pool needs exactly 3 training groups + 1 unseen test group, got " + std::to_string(specs.size()) + " specs");
  }
  std::set<std::string> names;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    specs[i].validate(i == 3);
    if (!names.insert(specs[i].name).second) throw std::invalid_argument("duplicate group name '" + specs[i].name + "'");
  }
  const auto& t = specs[3].contrast;
  for (std::size_t i = 0; i < 3; ++i) {
    if (specs[i].contrast == t && specs[i].atrophy == specs[3].atrophy) {
      throw std::invalid_argument("unseen group must differ from training group '" + specs[i].name + "'");
    }
  }
}

MetaPool build_pool(const std::vector<AgeGroupSpec>& specs, uint64_t seed, int64_t image_size) {
  validate_specs(specs);
  MetaPool pool;
  pool.seed = seed;
  pool.image_size = image_size;
  for (int gi = 0; gi < 4; ++gi) {
    Group g;
    g.spec = specs[static_cast<std::size_t>(gi)];
    for (int i = 0; i < g.spec.subjects; ++i) {
      Subject s = generate_subject(g.spec, subject_seed(seed, gi, i), image_size);
      s.id = subject_id(i);
      g.subjects.push_back(std::move(s));
    }
    assign_split(g, seed, gi);
    if (gi < 3) {
      pool.train_groups.push_back(std::move(g));
    } else {
      pool.test_group = std::move(g);
    }
  }
  return pool;
}

json manifest(const MetaPool& pool) {
  json groups = json::array();
  auto add = [&](const Group& g, const char* role) {
    json subjects = json::array();
    for (const Subject& s : g.subjects) subjects.push_back({{"id", s.id}, {"seed", s.seed}});
    groups.push_back({{"role", role}, {"spec", to_json(g.spec)}, {"subjects", subjects}, {"train", g.train}, {"val", g.val}});
  };
  for (const Group& g : pool.train_groups) add(g, "train");
  add(pool.test_group, "test");
  return {{"format", "dumeta-pool"}, {"version", kPoolVersion}, {"seed", pool.seed}, {"image_size", pool.image_size}, {"groups", groups}};
}

void save_pool(const MetaPool& pool, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto write_group = [&](const Group& g) {
    const auto gdir = dir / g.spec.name;
    std::filesystem::create_directories(gdir);
    for (const Subject& s : g.subjects) {
      tc::save_dtns(gdir / (s.id + ".img.dtns"), s.image);
      tc::save_dtns(gdir / (s.id + ".lbl.dtns"), labels_to_tensor(s.labels));
    }
  };
  for (const Group& g : pool.train_groups) write_group(g);
  write_group(pool.test_group);
  tc::write_file_atomic(dir / "manifest.json", manifest(pool).dump(2) + "\n");
}

MetaPool load_pool(const std::filesystem::path& dir) {
  const auto mpath = dir / "manifest.json";
  json m;
  try {
    m = json::parse(tc::read_file(mpath));
  } catch (const json::exception& e) {
    throw FormatError(mpath.string() + ": malformed manifest: " + e.what());
  }
  if (m.value("format", "") != "dumeta-pool") throw FormatError(mpath.string() + ": not a pool manifest");
  if (m.value("version", 0) != kPoolVersion) throw FormatError(mpath.string() + ": unsupported pool version");
  MetaPool pool;
  try {
    pool.seed = m.at("seed").get<uint64_t>();
    pool.image_size = m.at("image_size").get<int64_t>();
    const int64_t n = pool.image_size;
    for (const json& gj : m.at("groups")) {
      Group g;
      g.spec = spec_from_json(gj.at("spec"));
      g.train = gj.at("train").get<std::vector<int>>();
      g.val = gj.at("val").get<std::vector<int>>();
      for (const json& sj : gj.at("subjects")) {
        Subject s;
        s.id = sj.at("id").get<std::string>();
        s.seed = sj.at("seed").get<uint64_t>();
        s.group = g.spec.name;
        const auto img_path = dir / g.spec.name / (s.id + ".img.dtns");
        const auto lbl_path = dir / g.spec.name / (s.id + ".lbl.dtns");
        s.image = tc::load_dtns(img_path);
        if (s.image.shape() != tc::Shape{1, n, n}) throw FormatError(img_path.string() + ": unexpected image shape");
        const Tensor lbl = tc::load_dtns(lbl_path);
        if (lbl.shape() != tc::Shape{1, n, n}) throw FormatError(lbl_path.string() + ": unexpected label shape");
        try {
          s.labels = labels_from_tensor(lbl, 1, n, n);
        } catch (const std::invalid_argument& e) {
          throw FormatError(lbl_path.string() + ": " + e.what());
        }
        g.subjects.push_back(std::move(s));
      }
      const int count = static_cast<int>(g.subjects.size());
      for (int idx : g.train) {
        if (idx < 0 || idx >= count) throw FormatError(mpath.string() + ": split index out of range");
      }
      for (int idx : g.val) {
        if (idx < 0 || idx >= count) throw FormatError(mpath.string() + ": split index out of range");
      }
      if (gj.at("role").get<std::string>() == "test") {
        pool.test_group = std::move(g);
      } else {
        pool.train_groups.push_back(std::move(g));
      }
    }
  } catch (const json::exception& e) {
    throw FormatError(mpath.string() + ": malformed manifest: " + e.what());
  }
  if (pool.train_groups.size() != 3 || pool.test_group.subjects.empty()) {
    throw FormatError(mpath.string() + ": pool must hold 3 training groups and 1 test group");
  }
  return pool;
}

std::string fnv1a_hex(const std::string& bytes) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace dumeta::phantom
