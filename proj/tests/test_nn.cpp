#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "fd_util.hpp"
#include "poem/nn.hpp"

using namespace poem;

namespace {

// inner product of a fixed probe with the op output turns any forward pass
// into a scalar functional for the finite-difference checks
double probe_dot(const Tensor<double>& probe, const Tensor<double>& y) {
  double s = 0;
  for (std::size_t i = 0; i < y.size(); ++i) s += probe[i] * y[i];
  return s;
}

} // namespace

TEST_CASE("linear_forward identity rows pick out w columns") {
  std::mt19937_64 rng(1);
  Tensor<double> w = fd::randn({3, 4}, rng);
  Tensor<double> x({4, 4});
  for (std::size_t i = 0; i < 4; ++i) x.at(i, i) = 1.0;
  Tensor<double> y = linear_forward(x, w);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 3; ++j) CHECK(y.at(i, j) == doctest::Approx(w.at(j, i)));
}

TEST_CASE("linear_forward zero input yields bias") {
  std::mt19937_64 rng(2);
  Tensor<double> w = fd::randn({3, 5}, rng);
  Tensor<double> b = fd::randn({3}, rng);
  Tensor<double> x({2, 5});
  Tensor<double> y = linear_forward(x, w, &b);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 3; ++j) CHECK(y.at(i, j) == doctest::Approx(b[j]));
}

TEST_CASE("linear_forward matches triple-loop oracle") {
  std::mt19937_64 rng(3);
  Tensor<double> x = fd::randn({4, 8}, rng);
  Tensor<double> w = fd::randn({3, 8}, rng);
  Tensor<double> y = linear_forward(x, w);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      double acc = 0;
      for (std::size_t k = 0; k < 8; ++k) acc += x.at(i, k) * w.at(j, k);
      CHECK(fd::close_rel(y.at(i, j), acc, 1e-6));
    }
  CHECK_THROWS_AS(linear_forward(x, Tensor<double>({3, 9})), std::invalid_argument);
}

TEST_CASE("linear_backward zero grad and scalar case") {
  std::mt19937_64 rng(4);
  Tensor<double> x = fd::randn({4, 8}, rng);
  Tensor<double> w = fd::randn({3, 8}, rng);
  GradBundle<double> g = linear_backward(x, w, Tensor<double>({4, 3}), true);
  for (double v : g.get("w").flat()) CHECK(v == 0.0);
  for (double v : g.get("bias").flat()) CHECK(v == 0.0);
  for (double v : g.input.flat()) CHECK(v == 0.0);

  // single-element product rule: y = x*w, dy/dw = x, dy/dx = w
  Tensor<double> x1({1, 1}, {2.5});
  Tensor<double> w1({1, 1}, {-1.5});
  Tensor<double> go({1, 1}, {1.0});
  GradBundle<double> g1 = linear_backward(x1, w1, go);
  CHECK(g1.get("w")[0] == doctest::Approx(2.5));
  CHECK(g1.input[0] == doctest::Approx(-1.5));
}

TEST_CASE("linear_backward matches finite differences") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor<double> x = fd::randn({4, 6}, rng);
    Tensor<double> w = fd::randn({3, 6}, rng);
    Tensor<double> b = fd::randn({3}, rng);
    Tensor<double> probe = fd::randn({4, 3}, rng);
    auto f = [&] { return probe_dot(probe, linear_forward(x, w, &b)); };
    GradBundle<double> g = linear_backward(x, w, probe, true);
    CHECK(fd::check_grad(w, g.get("w"), f, 1e-4) == 0);
    CHECK(fd::check_grad(x, g.input, f, 1e-4) == 0);
    Tensor<double> db = g.get("bias");
    CHECK(fd::check_grad(b, db, f, 1e-4) == 0);
  }
}

TEST_CASE("batchnorm constant channel maps to shift") {
  BatchNormState<double> bn(3);
  Tensor<double> x = Tensor<double>::full({4, 3}, 7.0);
  BatchNormCache<double> cache;
  Tensor<double> y = batchnorm_forward(x, bn, BnMode::train, &cache);
  for (double v : y.flat()) CHECK(v == doctest::Approx(0.0)); // gamma*0 + beta
}

TEST_CASE("batchnorm eval with unit running stats is identity within epsilon slack") {
  BatchNormState<double> bn(2);
  Tensor<double> x({3, 2}, {1.0, -2.0, 0.5, 4.0, -1.0, 0.0});
  Tensor<double> y = batchnorm_forward(x, bn, BnMode::eval);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(std::abs(y[i] - x[i]) <= 1e-5 * (1 + std::abs(x[i])));
}

TEST_CASE("batchnorm train rejects batch of one") {
  BatchNormState<double> bn(2);
  Tensor<double> x({1, 2});
  CHECK_THROWS_AS(batchnorm_forward(x, bn, BnMode::train), std::invalid_argument);
}

TEST_CASE("batchnorm train output normalized per channel before affine") {
  std::mt19937_64 rng(6);
  BatchNormState<double> bn(5);
  Tensor<double> x = fd::randn({64, 5}, rng, 2.0);
  BatchNormCache<double> cache;
  batchnorm_forward(x, bn, BnMode::train, &cache);
  for (std::size_t j = 0; j < 5; ++j) {
    double m = 0, v = 0;
    for (std::size_t i = 0; i < 64; ++i) m += cache.xhat.at(i, j);
    m /= 64;
    for (std::size_t i = 0; i < 64; ++i) v += (cache.xhat.at(i, j) - m) * (cache.xhat.at(i, j) - m);
    v /= 64;
    CHECK(std::abs(m) < 1e-5);
    CHECK(std::abs(v - 1.0) < 1e-5);
  }
}

TEST_CASE("batchnorm backward matches finite differences through batch stats") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor<double> x = fd::randn({6, 3}, rng);
    BatchNormState<double> bn(3);
    std::normal_distribution<double> g(0.0, 1.0);
    for (auto& v : bn.gamma.flat()) v = 1.0 + 0.2 * g(rng);
    for (auto& v : bn.beta.flat()) v = 0.2 * g(rng);
    Tensor<double> probe = fd::randn({6, 3}, rng);
    auto f = [&] {
      BatchNormState<double> b2 = bn; // keep running stats untouched across evals
      return probe_dot(probe, batchnorm_forward(x, b2, BnMode::train, nullptr, false));
    };
    BatchNormCache<double> cache;
    batchnorm_forward(x, bn, BnMode::train, &cache, false);
    GradBundle<double> grads = batchnorm_backward(probe, cache, bn);
    CHECK(fd::check_grad(x, grads.input, f, 1e-4) == 0);
    CHECK(fd::check_grad(bn.gamma, grads.get("gamma"), f, 1e-4) == 0);
    CHECK(fd::check_grad(bn.beta, grads.get("beta"), f, 1e-4) == 0);
  }
}

TEST_CASE("prelu identity cases") {
  PReLUState<double> st;
  Tensor<double> x({4}, {0.0, 1.0, 2.0, 0.5});
  Tensor<double> y = prelu_forward(x, st);
  CHECK(y == x); // nonnegative input untouched

  st.slope = 1.0;
  Tensor<double> xneg({4}, {-3.0, -0.1, 0.2, 5.0});
  CHECK(prelu_forward(xneg, st) == xneg); // slope 1 is identity everywhere
}

TEST_CASE("prelu backward matches finite differences") {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor<double> x = fd::randn({5, 4}, rng);
    for (auto& v : x.flat())
      if (std::abs(v) < 1e-3) v = 0.1; // keep clear of the kink
    PReLUState<double> st;
    st.slope = 0.25 + 0.1 * std::uniform_real_distribution<double>(0, 1)(rng);
    Tensor<double> probe = fd::randn({5, 4}, rng);
    auto f = [&] { return probe_dot(probe, prelu_forward(x, st)); };
    GradBundle<double> g = prelu_backward(probe, x, st);
    CHECK(fd::check_grad(x, g.input, f, 1e-6, 1e-6) == 0);
    double ds = fd::central_diff(f, st.slope, 1e-6);
    CHECK(fd::close_rel(ds, g.get("slope")[0], 1e-6));
  }
}

TEST_CASE("maxpool single point is identity and permutation invariant") {
  std::mt19937_64 rng(9);
  Tensor<double> one = fd::randn({2, 1, 3}, rng);
  auto r = maxpool_points_forward(one);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 3; ++j) CHECK(r.pooled.at(i, j) == one.at(i, 0, j));

  Tensor<double> x = fd::randn({2, 7, 4}, rng);
  auto base = maxpool_points_forward(x);
  std::vector<std::size_t> perm{6, 2, 0, 5, 1, 4, 3};
  Tensor<double> shuffled({2, 7, 4});
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t q = 0; q < 7; ++q)
      for (std::size_t j = 0; j < 4; ++j) shuffled.at(i, q, j) = x.at(i, perm[q], j);
  auto permuted = maxpool_points_forward(shuffled);
  CHECK(permuted.pooled == base.pooled);

  CHECK_THROWS_AS(maxpool_points_forward(Tensor<double>({2, 0, 4})), std::invalid_argument);
}

TEST_CASE("maxpool matches loop oracle and finite differences") {
  std::mt19937_64 rng(10);
  Tensor<double> x = fd::randn({3, 6, 5}, rng);
  auto r = maxpool_points_forward(x);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 5; ++j) {
      double best = -1e300;
      for (std::size_t q = 0; q < 6; ++q) best = std::max(best, x.at(i, q, j));
      CHECK(r.pooled.at(i, j) == best);
    }

  Tensor<double> probe = fd::randn({3, 5}, rng);
  auto f = [&] { return probe_dot(probe, maxpool_points_forward(x).pooled); };
  Tensor<double> dx = maxpool_points_backward(probe, r.argmax, 6);
  CHECK(fd::check_grad(x, dx, f, 1e-6, 1e-7) == 0);
}

TEST_CASE("cross entropy on uniform and concentrated logits") {
  Tensor<double> uniform({2, 4});
  std::vector<int> labels{1, 3};
  auto r = softmax_cross_entropy<double>(uniform, labels);
  CHECK(r.loss == doctest::Approx(std::log(4.0)));

  Tensor<double> sharp({1, 3}, {0.0, 50.0, 0.0});
  std::vector<int> l1{1};
  CHECK(softmax_cross_entropy<double>(sharp, l1).loss < 1e-12);

  std::vector<int> bad{7};
  CHECK_THROWS_AS(softmax_cross_entropy<double>(sharp, bad), std::invalid_argument);
}

TEST_CASE("cross entropy gradient matches finite differences") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor<double> logits = fd::randn({4, 5}, rng);
    std::vector<int> labels{0, 2, 4, 1};
    auto f = [&] { return static_cast<double>(softmax_cross_entropy<double>(logits, labels).loss); };
    auto r = softmax_cross_entropy<double>(logits, labels);
    CHECK(fd::check_grad(logits, r.dlogits, f, 1e-6, 1e-6) == 0);
  }
}

TEST_CASE("adam zero gradient leaves fresh parameters unchanged") {
  Tensor<double> p({3}, {1.0, -2.0, 0.5});
  Tensor<double> expect = p;
  AdamSlot<double> slot;
  adam_step(p, Tensor<double>({3}), slot, 1, AdamParams{});
  CHECK(p == expect);
}

TEST_CASE("adam single step on scalar quadratic, hand-evaluated") {
  // f(w) = w^2 at w=3: g = 6; at t=1 the update is lr * g / (|g| + eps)
  Tensor<double> w({1}, {3.0});
  Tensor<double> g({1}, {6.0});
  AdamSlot<double> slot;
  adam_step(w, g, slot, 1, AdamParams{});
  CHECK(w[0] == doctest::Approx(3.0 - 0.001 * 6.0 / (6.0 + 1e-8)).epsilon(1e-12));
}

TEST_CASE("adam first-step magnitude is about lr at any gradient scale") {
  for (double scale : {1e-6, 1.0, 1e6}) {
    Tensor<double> w({1}, {0.0});
    Tensor<double> g({1}, {scale});
    AdamSlot<double> slot;
    adam_step(w, g, slot, 1, AdamParams{});
    CHECK(std::abs(w[0]) <= 0.001);
    CHECK(std::abs(w[0]) >= 0.0009);
  }
}

TEST_CASE("cosine schedule endpoints and midpoint") {
  CHECK(cosine_lr(0, 100, 0.001) == doctest::Approx(0.001));
  CHECK(cosine_lr(100, 100, 0.001) == doctest::Approx(0.0));
  CHECK(cosine_lr(50, 100, 0.001) == doctest::Approx(0.0005));
  CHECK(cosine_lr(100, 100, 0.001, 1e-5) == doctest::Approx(1e-5));
}
