#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "metanb/tensor.hpp"
#include "oracle.hpp"

using namespace metanb;

namespace {

Tensor rnd(std::mt19937_64& rng, Shape shape, double lo = -2.0, double hi = 2.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = d(rng);
  return Tensor::param(std::move(shape), std::move(v));
}

// Like rnd but keeps values away from 0, for kinked ops (relu, clamp) and
// divisors.
Tensor rnd_away(std::mt19937_64& rng, Shape shape, double margin = 0.1) {
  Tensor t = rnd(rng, shape);
  std::vector<double> v = t.data();
  for (auto& x : v)
    if (std::abs(x) < margin) x = x < 0 ? x - margin : x + margin;
  t.set_data(v);
  return t;
}

void check_grads(const std::function<Tensor()>& build, const std::vector<Tensor>& leaves,
                 double rtol = 1e-6, double atol = 1e-8) {
  Tensor loss = build();
  auto analytic = gradient(loss, leaves);
  auto numeric = testutil::fd_gradient([&] { return build().item(); }, leaves);
  auto r = testutil::compare_grads(analytic, numeric, rtol, atol);
  INFO(r.detail);
  CHECK(r.ok);
}

double grad_elem(const std::function<Tensor()>& build, const std::vector<Tensor>& leaves,
                 std::size_t t, std::size_t i) {
  return gradient(build(), leaves)[t].at(i);
}

// Second-order check: analytic rows of the Hessian (gradient of a first-order
// gradient element, via create_graph) against finite differences of the
// analytic first-order gradient.
void check_second_order(const std::function<Tensor()>& build, const std::vector<Tensor>& leaves,
                        std::size_t t, std::size_t i, double rtol = 1e-4, double atol = 1e-6) {
  Tensor loss = build();
  auto first = gradient(loss, leaves, /*create_graph=*/true);
  Tensor gi = narrow(reshape(first[t], {first[t].numel()}), 0, i, 1);
  auto hess_row = gradient(gi, leaves);
  auto numeric =
      testutil::fd_gradient([&] { return grad_elem(build, leaves, t, i); }, leaves);
  auto r = testutil::compare_grads(hess_row, numeric, rtol, atol);
  INFO("d/d(leaf " << t << " elem " << i << "): " << r.detail);
  CHECK(r.ok);
}

}  // namespace

TEST_CASE("hand-checked derivatives") {
  // d/dx x^2 at x=3 is 6
  Tensor x = Tensor::param({}, {3.0});
  Tensor y = mul(x, x);
  CHECK(gradient(y, {x})[0].item() == Catch::Approx(6.0).epsilon(1e-12));

  // d2/dx2 x^3 at x=2 is 12
  Tensor z = Tensor::param({}, {2.0});
  Tensor c = mul(mul(z, z), z);
  Tensor g1 = gradient(c, {z}, true)[0];
  CHECK(g1.item() == Catch::Approx(12.0).epsilon(1e-12));  // 3x^2
  Tensor g2 = gradient(g1, {z})[0];
  CHECK(g2.item() == Catch::Approx(12.0).epsilon(1e-12));  // 6x
}

TEST_CASE("first-order FD: elementwise and broadcasting") {
  std::mt19937_64 rng(7);
  Tensor a = rnd(rng, {3, 4});
  Tensor row = rnd(rng, {1, 4});
  Tensor col = rnd(rng, {3, 1});
  Tensor s = rnd(rng, {});
  Tensor pos = rnd_away(rng, {3, 4});

  check_grads([&] { return sum(mul(add(a, row), sub(a, col))); }, {a, row, col});
  check_grads([&] { return sum(mul(add(col, row), add(col, row))); }, {row, col});
  check_grads([&] { return sum(exp(mul(row, col))); }, {row, col});
  check_grads([&] { return sum(div(a, pos)); }, {a, pos});
  check_grads([&] { return sum(mul(s, add(a, s))); }, {a, s});
  check_grads([&] { return sum(div(row, s)); }, {row, s});
  check_grads([&] { return mean(mul(a, a)); }, {a});
}

TEST_CASE("first-order FD: unary ops") {
  std::mt19937_64 rng(11);
  Tensor a = rnd_away(rng, {2, 5});
  Tensor p = rnd(rng, {2, 5}, 0.2, 3.0);  // positive domain for log/sqrt

  check_grads([&] { return sum(relu(a)); }, {a});
  check_grads([&] { return sum(exp(mul_scalar(a, 0.5))); }, {a});
  check_grads([&] { return sum(log(p)); }, {p});
  check_grads([&] { return sum(sqrt(p)); }, {p});
  check_grads([&] { return sum(clamp_min(a, 0.25)); }, {a});
  check_grads([&] { return sum(neg(add_scalar(a, 1.5))); }, {a});
}

TEST_CASE("first-order FD: matmul, all transpose combinations") {
  std::mt19937_64 rng(13);
  Tensor a = rnd(rng, {3, 2});
  Tensor b = rnd(rng, {2, 4});
  Tensor c = rnd(rng, {3, 4});
  Tensor w = rnd(rng, {4, 2});
  Tensor u = rnd(rng, {5, 2});

  check_grads([&] { return sum(mul(matmul(a, b), c)); }, {a, b, c});
  check_grads([&] { return sum(matmul(a, c, true, false)); }, {a, c});
  check_grads([&] { return sum(matmul(a, w, false, true)); }, {a, w});
  check_grads([&] { return sum(matmul(b, u, true, true)); }, {b, u});
}

TEST_CASE("first-order FD: reductions, softmax, shape ops") {
  std::mt19937_64 rng(17);
  Tensor a = rnd(rng, {3, 4});
  Tensor b = rnd(rng, {4});

  check_grads([&] { return sum(mul(sum_dim0(a), sum_dim0(a))); }, {a});
  check_grads([&] { return sum(mul(sum_dim1(a), sum_dim1(a))); }, {a});
  check_grads([&] { return sum(mul(softmax_rows(a), a)); }, {a});
  check_grads([&] { return sum(mul(softmax(b), b)); }, {b});
  check_grads([&] { return sum(mul(transpose(a), transpose(a))); }, {a});
  check_grads([&] { return sum(narrow(a, 0, 1, 2)); }, {a});
  check_grads([&] { return sum(mul(narrow(a, 1, 1, 3), narrow(a, 1, 0, 3))); }, {a});
  check_grads([&] { return sum(mul(concat({a, a}, 1), concat({a, a}, 1))); }, {a});
  check_grads([&] { return sum(mul(reshape(a, {4, 3}), reshape(a, {4, 3}))); }, {a});
}

TEST_CASE("first-order FD: attention-style composite") {
  std::mt19937_64 rng(19);
  Tensor z = rnd(rng, {2, 3});   // queries
  Tensor k = rnd(rng, {5, 3});   // keys
  Tensor v = rnd(rng, {5, 4});   // values
  double gamma = 2.0;

  auto build = [&] {
    Tensor zz = sum_dim1(mul(z, z));                    // [2,1]
    Tensor kk = transpose(sum_dim1(mul(k, k)));         // [1,5]
    Tensor sq = add(add(zz, kk), mul_scalar(matmul(z, k, false, true), -2.0));
    Tensor dist = sqrt(clamp_min(sq, 1e-24));
    Tensor w = softmax_rows(mul_scalar(dist, -gamma));  // [2,5]
    Tensor mixed = matmul(w, v);                        // [2,4]
    return sum(mul(mixed, mixed));
  };
  check_grads(build, {z, k, v});
}

TEST_CASE("first-order FD: mlp with cross-entropy composite") {
  std::mt19937_64 rng(23);
  Tensor x = rnd(rng, {4, 3});
  Tensor w1 = rnd(rng, {5, 3}, -0.8, 0.8);
  Tensor b1 = rnd(rng, {1, 5}, -0.5, 0.5);
  Tensor w2 = rnd(rng, {2, 5}, -0.8, 0.8);
  Tensor b2 = rnd(rng, {1, 2}, -0.5, 0.5);
  Tensor targets = Tensor::from_data({4, 2}, {1, 0, 0, 1, 1, 0, 0, 1});

  auto build = [&] {
    Tensor h = relu(add(matmul(x, w1, false, true), b1));
    Tensor logits = add(matmul(h, w2, false, true), b2);
    Tensor p = clamp_min(softmax_rows(logits), 1e-12);
    return neg(mean(sum_dim1(mul(targets, log(p)))));
  };
  check_grads(build, {x, w1, b1, w2, b2});
}

TEST_CASE("second-order FD spot checks") {
  std::mt19937_64 rng(29);
  Tensor a = rnd(rng, {2, 3});
  Tensor w = rnd(rng, {3, 3});

  auto quad = [&] { return sum(mul(matmul(a, w), matmul(a, w))); };
  check_second_order(quad, {a, w}, 0, 1);
  check_second_order(quad, {a, w}, 1, 4);

  auto smax = [&] { return sum(mul(softmax_rows(a), a)); };
  check_second_order(smax, {a}, 0, 0);
  check_second_order(smax, {a}, 0, 5);

  Tensor p = rnd(rng, {4}, 0.3, 2.0);
  auto chain = [&] { return sum(mul(exp(mul_scalar(p, 0.3)), log(p))); };
  check_second_order(chain, {p}, 0, 2);

  Tensor q = rnd(rng, {1, 4});
  Tensor k = rnd(rng, {3, 4});
  auto attn = [&] {
    Tensor zz = sum_dim1(mul(q, q));
    Tensor kk = transpose(sum_dim1(mul(k, k)));
    Tensor sq = add(add(zz, kk), mul_scalar(matmul(q, k, false, true), -2.0));
    Tensor w2 = softmax_rows(mul_scalar(sqrt(clamp_min(sq, 1e-24)), -1.5));
    return sum(mul(w2, matmul(q, k, false, true)));
  };
  check_second_order(attn, {q, k}, 0, 1);
  check_second_order(attn, {q, k}, 1, 7);
}

TEST_CASE("gradient plumbing rules") {
  Tensor x = Tensor::param({2}, {1.0, 2.0});
  Tensor y = Tensor::param({2}, {3.0, 4.0});

  SECTION("disconnected parameters get zero gradients") {
    Tensor loss = sum(mul(x, x));
    auto g = gradient(loss, {x, y});
    CHECK(g[0].data() == std::vector<double>{2.0, 4.0});
    CHECK(g[1].data() == std::vector<double>{0.0, 0.0});
  }

  SECTION("constant output gives zeros for everything") {
    Tensor c = Tensor::scalar(5.0);
    auto g = gradient(c, {x});
    CHECK(g[0].data() == std::vector<double>{0.0, 0.0});
  }

  SECTION("non-scalar output is rejected") {
    Tensor v = mul(x, x);
    CHECK_THROWS_AS(gradient(v, {x}), ShapeError);
  }

  SECTION("diamond graphs accumulate") {
    // f = (x0+x1)*(x0*x1) = x0^2 x1 + x0 x1^2 at (1,2)
    // df/dx0 = 2 x0 x1 + x1^2 = 8, df/dx1 = x0^2 + 2 x0 x1 = 5
    Tensor s = sum(mul(sum(x), mul(narrow(x, 0, 0, 1), narrow(x, 0, 1, 1))));
    auto g = gradient(s, {x});
    CHECK(g[0].at(0) == Catch::Approx(8.0).epsilon(1e-12));
    CHECK(g[0].at(1) == Catch::Approx(5.0).epsilon(1e-12));
  }

  SECTION("create_graph controls differentiability of gradients") {
    Tensor loss = sum(mul(mul(x, x), x));
    auto plain = gradient(loss, {x});
    CHECK_FALSE(plain[0].requires_grad());
    auto graphed = gradient(loss, {x}, true);
    CHECK(graphed[0].requires_grad());
  }

  SECTION("no-grad evaluation is not differentiable") {
    NoGradGuard ng;
    Tensor loss = sum(mul(x, x));
    auto g = gradient(loss, {x});
    CHECK(g[0].data() == std::vector<double>{0.0, 0.0});
  }
}

TEST_CASE("gradients are deterministic") {
  auto run = [] {
    std::mt19937_64 rng(123);
    Tensor a = rnd(rng, {6, 6});
    Tensor b = rnd(rng, {6, 6});
    Tensor loss = sum(mul(softmax_rows(matmul(a, b)), matmul(a, b, false, true)));
    return gradient(loss, {a, b});
  };
  auto g1 = run();
  auto g2 = run();
  CHECK(g1[0].data() == g2[0].data());
  CHECK(g1[1].data() == g2[1].data());
}
