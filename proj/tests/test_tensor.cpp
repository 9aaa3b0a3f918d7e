#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "tnt/gradcheck.hpp"
#include "tnt/tensor.hpp"

using namespace tnt;

namespace {

Tensor randn(RngStream& r, Shape s, bool req = false) {
  Tensor t = gaussian(r, std::move(s));
  t.set_requires_grad(req);
  return t;
}

// Scalarize an arbitrary output through fixed random weights so every output
// element feeds the loss with a distinct coefficient.
Tensor pick(const Tensor& out, RngStream& r) {
  RngStream local = r.derive(99);
  Tensor w = gaussian(local, out.shape());
  return sum(mul(out, w));
}

}  // namespace

TEST_CASE("matmul worked example") {
  Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::from({2, 1}, {0, 1});
  Tensor c = matmul(a, b);
  CHECK(c.shape() == Shape{2, 1});
  CHECK(c.data()[0] == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(c.data()[1] == doctest::Approx(4.0).epsilon(1e-15));
}

TEST_CASE("matmul rejects inner mismatch") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({2, 2});
  CHECK_THROWS_AS(matmul(a, b), shape_error);
}

TEST_CASE("softmax shift invariance worked example") {
  // [c, c + ln 3] -> [0.25, 0.75] for any c.
  for (double c : {0.0, 100.0, -50.0}) {
    Tensor x = Tensor::from({2}, {c, c + std::log(3.0)});
    Tensor y = softmax(x, 0);
    CHECK(y.data()[0] == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(y.data()[1] == doctest::Approx(0.75).epsilon(1e-12));
  }
}

TEST_CASE("layer_norm worked example") {
  Tensor x = Tensor::from({1, 2}, {1, 3});
  Tensor g = Tensor::full({2}, 1.0);
  Tensor b = Tensor::zeros({2});
  Tensor y = layer_norm(x, g, b, 1e-12);
  CHECK(y.data()[0] == doctest::Approx(-1.0).epsilon(1e-6));
  CHECK(y.data()[1] == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("backward worked example: sum of squares") {
  Tensor p = Tensor::from({2}, {1, 2}, true);
  Tape tape;
  Tensor loss = sum(mul(p, p));
  tape.backward(loss);
  CHECK(loss.value() == doctest::Approx(5.0));
  CHECK(p.grad()[0] == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(p.grad()[1] == doctest::Approx(4.0).epsilon(1e-12));
}

TEST_CASE("gradient accumulates when a tensor is used twice") {
  Tensor p = Tensor::from({1}, {3}, true);
  Tape tape;
  Tensor loss = sum(add(p, p));
  tape.backward(loss);
  CHECK(p.grad()[0] == doctest::Approx(2.0));
}

TEST_CASE("cross_entropy uniform logits") {
  Tensor logits = Tensor::zeros({1, 2});
  logits.set_requires_grad(true);
  Tape tape;
  Tensor loss = cross_entropy(logits, {1});
  tape.backward(loss);
  CHECK(loss.value() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(logits.grad()[0] == doctest::Approx(0.5));
  CHECK(logits.grad()[1] == doctest::Approx(-0.5));
  CHECK_THROWS_AS(cross_entropy(Tensor::zeros({1, 2}), {2}), domain_error);
}

TEST_CASE("mean_axis worked example") {
  Tensor x = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor m0 = mean_axis(x, 0);
  CHECK(m0.data()[0] == doctest::Approx(2.0));
  CHECK(m0.data()[1] == doctest::Approx(3.0));
  Tensor m1 = mean_axis(x, 1);
  CHECK(m1.data()[0] == doctest::Approx(1.5));
  CHECK(m1.data()[1] == doctest::Approx(3.5));
}

TEST_CASE("tape nesting is rejected") {
  Tape outer;
  CHECK_THROWS_AS(Tape{}, usage_error);
}

TEST_CASE("backward demands a scalar and a fresh tape") {
  Tensor x = Tensor::zeros({2}, true);
  {
    Tape tape;
    Tensor y = scale(x, 2.0);
    CHECK_THROWS_AS(tape.backward(y), usage_error);
  }
  {
    Tape tape;
    Tensor l = sum(scale(x, 2.0));
    tape.backward(l);
    CHECK_THROWS_AS(tape.backward(l), usage_error);
  }
}

TEST_CASE("ops outside a tape record nothing and require no grad") {
  Tensor a = Tensor::from({2}, {1, 2}, true);
  Tensor y = scale(a, 3.0);
  CHECK(!y.requires_grad());
  Tape tape;
  CHECK(tape.node_count() == 0);
}

TEST_CASE("detach blocks gradient flow") {
  Tensor p = Tensor::from({2}, {1, 2}, true);
  Tape tape;
  Tensor d = p.detach();
  Tensor loss = sum(mul(d, d));
  tape.backward(loss);
  CHECK(p.grad().empty());
}

TEST_CASE("gaussian determinism and moments") {
  RngStream r1(5, 1), r2(5, 1);
  Tensor a = gaussian(r1, {64});
  Tensor b = gaussian(r2, {64});
  for (int i = 0; i < 64; ++i) CHECK(a.data()[i] == b.data()[i]);

  RngStream r(5, 2);
  Tensor big = gaussian(r, {1000000});
  double acc = 0, acc2 = 0;
  for (double v : big.data()) {
    acc += v;
    acc2 += v * v;
  }
  double mean = acc / 1e6;
  double sd = std::sqrt(acc2 / 1e6 - mean * mean);
  CHECK(std::fabs(mean) < 0.005);
  CHECK(std::fabs(sd - 1.0) < 0.005);
}

TEST_CASE("finite differences agree for every primitive") {
  RngStream r(2024, 0);
  const double tol = 1e-6;
  const double h = 1e-5;

  auto check = [&](const char* name, const std::function<Tensor()>& f,
                   std::vector<std::pair<std::string, Tensor>> params) {
    auto rep = finite_diff_check(f, params, h);
    INFO(name, ": worst ", rep.worst_param, "[", rep.worst_index, "] analytic ",
         rep.worst_analytic, " numeric ", rep.worst_numeric);
    CHECK(rep.max_rel_err < tol);
  };

  {
    Tensor a = randn(r, {3, 4}, true), b = randn(r, {4, 2}, true);
    check("matmul2", [&] { return pick(matmul(a, b), r); }, {{"a", a}, {"b", b}});
  }
  {
    Tensor a = randn(r, {2, 3, 4}, true), b = randn(r, {2, 4, 2}, true);
    check("matmul3", [&] { return pick(matmul(a, b), r); }, {{"a", a}, {"b", b}});
  }
  {
    Tensor a = randn(r, {2, 3, 4}, true);
    check("transpose", [&] { return pick(transpose(a), r); }, {{"a", a}});
    check("reshape", [&] { return pick(reshape(a, {4, 6}), r); }, {{"a", a}});
    check("scale", [&] { return pick(scale(a, -1.7), r); }, {{"a", a}});
    check("add_scalar", [&] { return pick(add_scalar(a, 0.3), r); }, {{"a", a}});
    check("gelu", [&] { return pick(gelu(a), r); }, {{"a", a}});
    check("sum", [&] { return sum(a); }, {{"a", a}});
    check("mean_axis", [&] { return pick(mean_axis(a, 1), r); }, {{"a", a}});
    check("slice_axis", [&] { return pick(slice_axis(a, 1, 1, 2), r); }, {{"a", a}});
    check("softmax1", [&] { return pick(softmax(a, 1), r); }, {{"a", a}});
    check("softmax2", [&] { return pick(softmax(a, 2), r); }, {{"a", a}});
  }
  {
    Tensor a = randn(r, {3, 4}, true), b = randn(r, {3, 4}, true);
    check("add", [&] { return pick(add(a, b), r); }, {{"a", a}, {"b", b}});
    check("mul", [&] { return pick(mul(a, b), r); }, {{"a", a}, {"b", b}});
  }
  {
    Tensor x = randn(r, {2, 3, 4}, true), p = randn(r, {3, 4}, true);
    check("add_bcast", [&] { return pick(add_bcast(x, p), r); }, {{"x", x}, {"p", p}});
  }
  {
    Tensor x = randn(r, {2, 3, 4}, true), s = randn(r, {2, 3}, true);
    check("scale_last", [&] { return pick(scale_last(x, s), r); }, {{"x", x}, {"s", s}});
  }
  {
    Tensor x = randn(r, {3, 5}, true);
    Tensor g = randn(r, {5}, true), b = randn(r, {5}, true);
    check("layer_norm", [&] { return pick(layer_norm(x, g, b, 1e-5), r); },
          {{"x", x}, {"g", g}, {"b", b}});
  }
  {
    Tensor logits = randn(r, {4, 3}, true);
    std::vector<int64_t> labels{0, 2, 1, 2};
    check("cross_entropy", [&] { return cross_entropy(logits, labels); },
          {{"logits", logits}});
  }
  {
    Tensor a = randn(r, {2, 3, 4}, true), b = randn(r, {2, 2, 4}, true);
    std::vector<Tensor> parts{a, b};
    check("concat_axis", [&] { return pick(concat_axis(parts, 1), r); },
          {{"a", a}, {"b", b}});
  }
  {
    Tensor t = randn(r, {1, 4}, true);
    check("repeat_first", [&] { return pick(repeat_first(t, 3), r); }, {{"t", t}});
  }
  {
    Tensor x = randn(r, {2, 4, 3}, true);
    std::vector<std::vector<int64_t>> idx{{0, 2, 3}, {1, 1, 0}};
    check("gather_axis1", [&] { return pick(gather_axis1(x, idx), r); }, {{"x", x}});
  }
  {
    Tensor x = randn(r, {2, 3, 4}, true), w = randn(r, {4, 5}, true), b = randn(r, {5}, true);
    check("linear", [&] { return pick(linear(x, w, b), r); },
          {{"x", x}, {"w", w}, {"b", b}});
  }
}

TEST_CASE("finite differences on a composed mlp block") {
  RngStream r(77, 0);
  Tensor x = randn(r, {4, 6}, false);
  Tensor w1 = randn(r, {6, 8}, true), b1 = randn(r, {8}, true);
  Tensor w2 = randn(r, {8, 3}, true), b2 = randn(r, {3}, true);
  Tensor g = randn(r, {6}, true), b = randn(r, {6}, true);
  std::vector<int64_t> labels{0, 1, 2, 1};
  auto f = [&] {
    Tensor h = layer_norm(x, g, b, 1e-5);
    h = gelu(linear(h, w1, b1));
    return cross_entropy(linear(h, w2, b2), labels);
  };
  auto rep = finite_diff_check(
      f, {{"w1", w1}, {"b1", b1}, {"w2", w2}, {"b2", b2}, {"g", g}, {"b", b}}, 1e-5);
  INFO("worst ", rep.worst_param, " analytic ", rep.worst_analytic, " numeric ",
       rep.worst_numeric);
  CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("shape errors carry both shapes") {
  Tensor a = Tensor::zeros({2, 3});
  try {
    add(a, Tensor::zeros({3, 2}));
    FAIL("expected shape_error");
  } catch (const shape_error& e) {
    std::string m = e.what();
    CHECK(m.find("[2,3]") != std::string::npos);
    CHECK(m.find("[3,2]") != std::string::npos);
  }
}
