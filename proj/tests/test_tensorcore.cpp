// Copyright 2026 The DuMeta Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <sstream>

#include "doctest.h"
#include "dumeta/dtns.hpp"
#include "dumeta/gradcheck.hpp"
#include "dumeta/ops.hpp"
#include "dumeta/param_set.hpp"
#include "test_util.hpp"

using namespace dumeta;
using namespace dumeta::tc;
using dumeta::testing::random_away_from_zero;
using dumeta::testing::random_tensor;
using dumeta::testing::values;

namespace {

ParamSet single(const std::string& name, Tensor t) {
  ParamSet p;
  p.add(name, std::move(t));
  return p;
}

// Contracts an op output with a fixed random weight so every output entry
// contributes a distinct amount to the scalar.
Tensor weighted_sum(const Tensor& y, uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sum(mul(y, random_tensor(y.shape(), rng)));
}

void expect_gradcheck(const ScalarFn& f, const ParamSet& params, double tol = 1e-5, double eps = 1e-5) {
  GradCheckOptions opt;
  opt.eps = eps;
  GradCheckReport r = check_grad(f, params, opt);
  INFO("max rel err " << r.max_rel_err);
  CHECK(r.max_rel_err < tol);
}

}  // namespace

TEST_CASE("elementwise examples") {
  Tensor a({2}, {1, 2});
  Tensor b({2}, {3, 4});
  CHECK(values(add(a, b)) == std::vector<double>{4, 6});
  CHECK(values(relu(Tensor({3}, {-1, 0, 2}))) == std::vector<double>{0, 0, 2});
  CHECK(values(elementwise(Elementwise::Scale, a, nullptr, 3.0)) == std::vector<double>{3, 6});
  CHECK(values(mul(a, Tensor::scalar(2.0))) == std::vector<double>{2, 4});

  Tape tape;
  Tensor x = tape.leaf(Tensor({1}, {3}));
  auto g = tape.grad(sum(mul(x, x)), std::span<const Tensor>(&x, 1));
  CHECK(g.grads[0].item() == 6.0);
}

TEST_CASE("shape mismatch is rejected") {
  CHECK_THROWS_AS(add(Tensor::ones({2}), Tensor::ones({3})), ShapeError);
  CHECK_THROWS_AS(matmul(Tensor::ones({2, 3}), Tensor::ones({2, 3})), ShapeError);
  CHECK_THROWS_AS(conv2d(Tensor::ones({1, 2, 4, 4}), Tensor::ones({1, 3, 3, 3}), nullptr), ShapeError);
  CHECK_THROWS_AS(resample(Tensor::ones({1, 1, 3, 4}), Resample::AvgDown, 2), ShapeError);
  CHECK_THROWS_AS(Tensor({2, 2}, {1, 2, 3}), ShapeError);
}

TEST_CASE("checked mode rejects log and div domain errors") {
  CheckedModeGuard guard(true);
  CHECK_THROWS_AS(log(Tensor({2}, {1.0, 0.0})), NumericError);
  CHECK_THROWS_AS(div(Tensor::ones({2}), Tensor({2}, {1.0, 0.0})), NumericError);
  CHECK_NOTHROW(log(Tensor({1}, {2.0})));
}

TEST_CASE("relu subgradient at zero is zero") {
  Tape tape;
  Tensor x = tape.leaf(Tensor({3}, {-1.0, 0.0, 2.0}));
  auto g = tape.grad(sum(relu(x)), std::span<const Tensor>(&x, 1));
  CHECK(values(g.grads[0]) == std::vector<double>{0, 0, 1});
}

TEST_CASE("matmul examples") {
  Tensor m({2, 2}, {1, 2, 3, 4});
  Tensor eye({2, 2}, {1, 0, 0, 1});
  CHECK(values(matmul(m, eye)) == values(m));
  CHECK(matmul(Tensor({1, 2}, {1, 2}), Tensor({2, 1}, {3, 4})).item() == 11.0);

  Tape tape;
  Tensor a = tape.leaf(Tensor::ones({1, 2}));
  auto g = tape.grad(sum(matmul(a, Tensor({2, 1}, {1, 2}))), std::span<const Tensor>(&a, 1));
  CHECK(values(g.grads[0]) == std::vector<double>{1, 2});
}

TEST_CASE("conv2d examples") {
  Tensor x = Tensor({1, 1, 2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor w = Tensor::ones({1, 1, 1, 1});
  Tensor b = Tensor::zeros({1});
  CHECK(values(conv2d(x, w, &b)) == values(x));
  CHECK(conv2d(Tensor::ones({1, 1, 3, 3}), Tensor::ones({1, 1, 3, 3}), nullptr).item() == 9.0);

  Tensor out = conv2d(Tensor::ones({2, 3, 7, 5}), Tensor::ones({4, 3, 3, 3}), nullptr, 2, 1);
  CHECK(out.shape() == Shape{2, 4, 4, 3});
}

TEST_CASE("conv2d weight gradient matches finite differences") {
  std::mt19937_64 rng(7);
  Tensor x = random_tensor({1, 1, 4, 4}, rng);
  ParamSet p;
  p.add("w", random_tensor({2, 1, 3, 3}, rng));
  p.add("b", random_tensor({2}, rng));
  expect_gradcheck([&](const ParamSet& q) { return weighted_sum(conv2d(x, q.at("w"), &q.at("b"), 1, 1), 1); }, p, 1e-6);
}

TEST_CASE("resample examples") {
  CHECK(resample(Tensor({1, 1, 2, 2}, {1, 1, 3, 3}), Resample::AvgDown, 2).item() == 2.0);
  CHECK(values(resample(Tensor({1, 1, 1, 1}, {5}), Resample::NearestUp, 2)) == std::vector<double>{5, 5, 5, 5});
  Tensor c = Tensor::full({1, 2, 4, 4}, 1.5);
  CHECK(values(resample(resample(c, Resample::AvgDown, 2), Resample::NearestUp, 2)) == values(c));
}

TEST_CASE("reduce examples") {
  CHECK(mean(Tensor({3}, {1, 2, 3})).item() == 2.0);
  CHECK(values(sum(Tensor({2, 2}, {1, 2, 3, 4}), {0})) == std::vector<double>{4, 6});
  CHECK(sum(Tensor({2, 2}, {1, 2, 3, 4})).shape().empty());

  Tape tape;
  Tensor x = tape.leaf(Tensor({4}, {1, 2, 3, 4}));
  auto g = tape.grad(mean(x), std::span<const Tensor>(&x, 1));
  CHECK(values(g.grads[0]) == std::vector<double>{0.25, 0.25, 0.25, 0.25});
}

TEST_CASE("masked_mean examples") {
  MaskedMean ones = masked_mean(Tensor::ones({2, 3, 2, 2}), std::vector<double>{1, 0, 0, 1, 0, 1, 0, 0});
  CHECK(values(ones.mean) == std::vector<double>(6, 1.0));

  std::mt19937_64 rng(3);
  Tensor x = random_tensor({1, 2, 2, 2}, rng);
  auto xd = x.data();
  // single position (1, 0) -> flat spatial index 2
  MaskedMean one = masked_mean(x, std::vector<double>{0, 0, 1, 0});
  CHECK(values(one.mean) == std::vector<double>{xd[2], xd[6]});

  // two positions: brute-force average by explicit indexing
  MaskedMean two = masked_mean(x, std::vector<double>{1, 0, 0, 1});
  std::vector<double> expected;
  for (int c = 0; c < 2; ++c) {
    double s = 0.0;
    s += xd[static_cast<std::size_t>(c * 4 + 0)];
    s += xd[static_cast<std::size_t>(c * 4 + 3)];
    expected.push_back(s * (1.0 / 2.0));
  }
  CHECK(values(two.mean) == expected);

  MaskedMean empty = masked_mean(x, std::vector<double>{0, 0, 0, 0});
  CHECK_FALSE(empty.valid[0]);
  CHECK(values(empty.mean) == std::vector<double>{0, 0});

  CHECK_THROWS_AS(masked_mean(x, std::vector<double>{1, 0, 0}), ShapeError);
}

TEST_CASE("masked_mean with a full mask equals the spatial mean") {
  std::mt19937_64 rng(11);
  Tensor x = random_tensor({2, 3, 4, 4}, rng);
  MaskedMean m = masked_mean(x, std::vector<double>(32, 1.0));
  Tensor ref = mean(x, {2, 3});
  for (int64_t i = 0; i < ref.numel(); ++i) CHECK(m.mean[i] == doctest::Approx(ref[i]).epsilon(1e-14));
}

TEST_CASE("grad examples") {
  Tape tape;
  Tensor theta = tape.leaf(Tensor({2}, {1, -2}));
  auto g = tape.grad(sum(mul(theta, theta)), std::span<const Tensor>(&theta, 1));
  CHECK(values(g.grads[0]) == std::vector<double>{2, -4});

  Tensor x = tape.leaf(Tensor::scalar(2.0));
  Tensor cube = pow(x, 3.0);
  auto g1 = tape.grad(cube, std::span<const Tensor>(&x, 1), true);
  auto g2 = tape.grad(g1.grads[0], std::span<const Tensor>(&x, 1));
  CHECK(g2.grads[0].item() == doctest::Approx(12.0).epsilon(1e-14));

  // f(w, t) = w^2 t; d/dt <1, df/dw> = 2w
  Tensor w = tape.leaf(Tensor::scalar(1.5));
  Tensor t = tape.leaf(Tensor::scalar(-0.7));
  Tensor f = mul(mul(w, w), t);
  auto dfdw = tape.grad(f, std::span<const Tensor>(&w, 1), true);
  auto mixed = tape.grad(dfdw.grads[0], std::span<const Tensor>(&t, 1));
  CHECK(mixed.grads[0].item() == doctest::Approx(3.0).epsilon(1e-14));
}

TEST_CASE("unreachable parameters get flagged zero gradients") {
  Tape tape;
  ParamSet p;
  p.add("used", Tensor({2}, {1, 2}));
  p.add("unused", Tensor({3}, {1, 2, 3}));
  ParamSet b = p.bind(tape);
  Gradients g = grad(sum(b.at("used")), b, false);
  REQUIRE(g.unreachable.size() == 1);
  CHECK(g.unreachable[0] == "unused");
  CHECK(values(g.values.at("unused")) == std::vector<double>{0, 0, 0});
  CHECK_THROWS_AS(grad(b.at("used"), b, false), ShapeError);
}

TEST_CASE("check_grad examples") {
  std::mt19937_64 rng(5);
  ParamSet p = single("p", random_tensor({6}, rng));
  GradCheckReport lin = check_grad([](const ParamSet& q) { return sum(q.at("p")); }, p);
  CHECK(lin.max_rel_err < 1e-10);

  GradCheckReport sq = check_grad([](const ParamSet& q) { return sum(mul(q.at("p"), q.at("p"))); }, p);
  CHECK(sq.max_rel_err < 1e-6);

  ParamSet two = p;
  two.add("detached", random_tensor({2}, rng));
  GradCheckReport det = check_grad([](const ParamSet& q) { return sum(q.at("p")); }, two);
  CHECK(det.unreachable == std::vector<std::string>{"detached"});
  for (const auto& e : det.entries) {
    if (e.name == "detached") {
      CHECK(e.analytic == 0.0);
      CHECK(e.numeric == 0.0);
      CHECK(e.rel_err == 0.0);
    }
  }

  CHECK_THROWS_AS(check_grad([](const ParamSet& q) { return log(scale(sum(q.at("p")), 0.0)); }, p), NumericError);
}

TEST_CASE("every primitive matches central differences") {
  std::mt19937_64 rng(2024);
  using F = std::function<Tensor(const ParamSet&)>;
  struct Case {
    const char* name;
    ParamSet params;
    F f;
  };
  Tensor cw = random_tensor({3, 2, 3, 3}, rng);
  std::vector<Case> cases;
  {
    ParamSet p;
    p.add("a", random_tensor({3, 4}, rng));
    p.add("b", random_away_from_zero({3, 4}, rng, 0.5, 1.5));
    cases.push_back({"add", p, [](const ParamSet& q) { return weighted_sum(add(q.at("a"), q.at("b")), 1); }});
    cases.push_back({"sub", p, [](const ParamSet& q) { return weighted_sum(sub(q.at("a"), q.at("b")), 2); }});
    cases.push_back({"mul", p, [](const ParamSet& q) { return weighted_sum(mul(q.at("a"), q.at("b")), 3); }});
    cases.push_back({"div", p, [](const ParamSet& q) { return weighted_sum(div(q.at("a"), q.at("b")), 4); }});
    cases.push_back({"neg", p, [](const ParamSet& q) { return weighted_sum(neg(q.at("a")), 5); }});
    cases.push_back({"scale", p, [](const ParamSet& q) { return weighted_sum(scale(q.at("a"), -2.5), 6); }});
    cases.push_back({"exp", p, [](const ParamSet& q) { return weighted_sum(exp(q.at("a")), 7); }});
    cases.push_back({"matmul", p, [](const ParamSet& q) { return weighted_sum(matmul(q.at("a"), transpose(q.at("b"))), 8); }});
    cases.push_back({"reduce", p, [](const ParamSet& q) {
                       return add(weighted_sum(sum(q.at("a"), {0}), 9), weighted_sum(mean(q.at("b"), {1}), 10));
                     }});
    cases.push_back({"concat_slice", p, [](const ParamSet& q) {
                       Tensor parts[] = {q.at("a"), q.at("b")};
                       return weighted_sum(slice(concat(parts, 1), 1, 2, 5), 11);
                     }});
    cases.push_back({"index", p, [](const ParamSet& q) {
                       std::vector<int64_t> idx{2, 0, 2};
                       Tensor rows = index_select(q.at("a"), idx);
                       return weighted_sum(index_add(q.at("b"), idx, rows), 12);
                     }});
    cases.push_back({"scalar_broadcast", p, [](const ParamSet& q) {
                       return weighted_sum(mul(q.at("a"), sum(q.at("b"))), 13);
                     }});
  }
  {
    ParamSet p;
    p.add("x", random_away_from_zero({2, 5}, rng));
    cases.push_back({"relu", p, [](const ParamSet& q) { return weighted_sum(relu(q.at("x")), 14); }});
    ParamSet pos;
    pos.add("x", random_tensor({2, 5}, rng, 0.5, 2.0));
    cases.push_back({"log", pos, [](const ParamSet& q) { return weighted_sum(log(q.at("x")), 15); }});
    cases.push_back({"pow", pos, [](const ParamSet& q) { return weighted_sum(pow(q.at("x"), -1.5), 16); }});
  }
  {
    ParamSet p;
    p.add("x", random_tensor({2, 2, 5, 6}, rng));
    p.add("w", cw);
    p.add("b", random_tensor({3}, rng));
    cases.push_back({"conv_s1", p, [](const ParamSet& q) { return weighted_sum(conv2d(q.at("x"), q.at("w"), &q.at("b"), 1, 1), 17); }});
    cases.push_back({"conv_s2", p, [](const ParamSet& q) { return weighted_sum(conv2d(q.at("x"), q.at("w"), &q.at("b"), 2, 0), 18); }});
    cases.push_back({"conv_input_grad", p, [](const ParamSet& q) {
                       Tensor gy = conv2d(q.at("x"), q.at("w"), nullptr, 2, 1);
                       return weighted_sum(conv2d_input_grad(gy, q.at("w"), q.at("x").shape(), 2, 1), 19);
                     }});
    cases.push_back({"conv_weight_grad", p, [](const ParamSet& q) {
                       Tensor gy = conv2d(q.at("x"), q.at("w"), nullptr, 1, 1);
                       return weighted_sum(conv2d_weight_grad(q.at("x"), gy, q.at("w").shape(), 1, 1), 20);
                     }});
  }
  {
    ParamSet p;
    p.add("x", random_tensor({2, 3, 4, 4}, rng));
    p.add("g", random_tensor({3}, rng, 0.5, 1.5));
    p.add("b", random_tensor({3}, rng));
    cases.push_back({"resample", p, [](const ParamSet& q) {
                       Tensor d = resample(q.at("x"), Resample::AvgDown, 2);
                       return weighted_sum(resample(mul(d, d), Resample::NearestUp, 2), 21);
                     }});
    cases.push_back({"expand", p, [](const ParamSet& q) { return weighted_sum(expand(q.at("g"), {2, 3, 4}, {0, 2}), 22); }});
    cases.push_back({"masked_mean", p, [](const ParamSet& q) {
                       std::vector<double> mask(32, 0.0);
                       for (std::size_t i = 0; i < mask.size(); i += 3) mask[i] = 1.0;
                       return weighted_sum(masked_mean(q.at("x"), mask).mean, 23);
                     }});
    cases.push_back({"log_softmax", p, [](const ParamSet& q) { return weighted_sum(log_softmax(q.at("x"), 1), 24); }});
    cases.push_back({"instance_norm", p, [](const ParamSet& q) {
                       return weighted_sum(instance_norm(q.at("x"), q.at("g"), q.at("b")), 25);
                     }});
  }
  for (const Case& c : cases) {
    SUBCASE(c.name) { expect_gradcheck(c.f, c.params); }
  }
}

TEST_CASE("double backprop matches finite-differenced first gradients") {
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 4; ++trial) {
    const int64_t n = 12 + trial * 10;  // up to 42 parameters
    Tensor m = random_tensor({n, n}, rng, -0.3, 0.3);
    Tensor v = random_tensor({n, 1}, rng);
    auto f = [&](const Tensor& p) {
      Tensor h = matmul(m, p);
      return add(sum(pow(h, 3.0)), sum(mul(exp(scale(p, 0.5)), p)));
    };
    auto first_grad = [&](const Tensor& p) {
      Tape tape;
      Tensor leaf = tape.leaf(p);
      return tape.grad(f(leaf), std::span<const Tensor>(&leaf, 1)).grads[0];
    };
    Tensor p0 = random_tensor({n, 1}, rng);
    Tape tape;
    Tensor leaf = tape.leaf(p0);
    Tensor g = tape.grad(f(leaf), std::span<const Tensor>(&leaf, 1), true).grads[0];
    Tensor hvp = tape.grad(sum(mul(g, v)), std::span<const Tensor>(&leaf, 1)).grads[0];

    const double eps = 1e-5;
    std::vector<double> plus = p0.to_vector(), minus = p0.to_vector();
    for (int64_t i = 0; i < n; ++i) {
      plus[static_cast<std::size_t>(i)] += eps * v[i];
      minus[static_cast<std::size_t>(i)] -= eps * v[i];
    }
    Tensor gp = first_grad(Tensor(p0.shape(), plus));
    Tensor gm = first_grad(Tensor(p0.shape(), minus));
    for (int64_t i = 0; i < n; ++i) {
      const double fd = (gp[i] - gm[i]) / (2 * eps);
      CHECK(relative_error(hvp[i], fd) < 1e-4);
    }
  }
}

TEST_CASE("identical computations are bit-identical") {
  auto run = [] {
    std::mt19937_64 rng(42);
    Tensor x = random_tensor({2, 2, 8, 8}, rng);
    Tensor w = random_tensor({3, 2, 3, 3}, rng);
    Tape tape;
    Tensor wl = tape.leaf(w);
    Tensor y = instance_norm(relu(conv2d(x, wl, nullptr, 1, 1)), Tensor::ones({3}), Tensor::zeros({3}));
    Tensor g = tape.grad(sum(mul(y, y)), std::span<const Tensor>(&wl, 1), true).grads[0];
    Tensor hv = tape.grad(sum(g), std::span<const Tensor>(&wl, 1)).grads[0];
    return std::make_pair(y, hv);
  };
  auto a = run();
  auto b = run();
  CHECK(a.first.same_values(b.first));
  CHECK(a.second.same_values(b.second));
}

TEST_CASE("tapes cannot be mixed") {
  Tape t1, t2;
  Tensor a = t1.leaf(Tensor::ones({2}));
  Tensor b = t2.leaf(Tensor::ones({2}));
  CHECK_THROWS_AS(add(a, b), ShapeError);
}

TEST_CASE("node inputs always reference earlier nodes") {
  Tape tape;
  Tensor x = tape.leaf(Tensor({3}, {1, 2, 3}));
  Tensor g = tape.grad(sum(exp(x)), std::span<const Tensor>(&x, 1), true).grads[0];
  (void)tape.grad(sum(g), std::span<const Tensor>(&x, 1));
  const auto& nodes = tape.impl()->nodes;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    for (int in : nodes[i].input_ids) CHECK(in < static_cast<int>(i));
  }
}

TEST_CASE("no-grad guard suspends recording") {
  Tape tape;
  Tensor x = tape.leaf(Tensor::ones({2}));
  const auto before = tape.size();
  {
    NoGradGuard guard(tape);
    Tensor y = exp(x);
    CHECK_FALSE(y.has_node());
  }
  CHECK(tape.size() == before);
  CHECK(exp(x).has_node());
}

TEST_CASE("param set contracts") {
  ParamSet p(ParamRole::Head);
  p.add("a", Tensor::ones({2}));
  p.add("b", Tensor::ones({1, 3}));
  CHECK_THROWS(p.add("a", Tensor::ones({2})));
  CHECK_THROWS_AS(p.set("a", Tensor::ones({3})), ShapeError);
  CHECK(p.names() == std::vector<std::string>{"a", "b"});
  CHECK(p.total_numel() == 5);
  ParamSet q = p.from_flat(std::vector<double>{1, 2, 3, 4, 5});
  CHECK(values(q.at("b")) == std::vector<double>{3, 4, 5});
  CHECK(q.role() == ParamRole::Head);
}

TEST_CASE("DTNS round trip and corruption") {
  std::mt19937_64 rng(1);
  Tensor t = random_tensor({2, 3, 4}, rng);
  std::string bytes = encode_dtns(t);
  CHECK(bytes.size() == 4 + 4 + 4 + 3 * 8 + 24 * 8);
  CHECK(bytes.substr(0, 4) == "DTNS");
  CHECK(decode_dtns(bytes, "mem").same_values(t));
  CHECK(decode_dtns(encode_dtns(Tensor::scalar(3.5)), "mem").item() == 3.5);

  std::string bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(decode_dtns(bad, "mem"), FormatError);
  std::string version = bytes;
  version[4] = 2;
  CHECK_THROWS_AS(decode_dtns(version, "mem"), FormatError);
  CHECK_THROWS_AS(decode_dtns(bytes.substr(0, bytes.size() - 3), "mem"), FormatError);

  auto dir = std::filesystem::temp_directory_path() / "dumeta_dtns_test";
  std::filesystem::create_directories(dir);
  save_dtns(dir / "t.dtns", t);
  CHECK(load_dtns(dir / "t.dtns").same_values(t));
  std::filesystem::remove_all(dir);
}
