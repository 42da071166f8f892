#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "transhp/gradcheck.hpp"
#include "transhp/kernels.hpp"
#include "transhp/tensor.hpp"

using namespace transhp;
using T64 = Tensor<double>;

namespace {

std::mt19937_64 rng(20240517);

T64 random_tensor(std::vector<int> shape, double lo = -1.0, double hi = 1.0) {
  return make_uniform<double>(std::move(shape), rng, lo, hi);
}

}  // namespace

TEST_CASE("matmul basics") {
  auto I = T64::from({2, 2}, {1, 0, 0, 1});
  auto B = T64::from({2, 2}, {3, 4, 5, 6});
  auto C = matmul(I, B);
  CHECK(C.data() == std::vector<double>{3, 4, 5, 6});

  auto a = T64::from({1, 2}, {1, 2});
  auto b = T64::from({2, 1}, {3, 4});
  CHECK(matmul(a, b).item() == 11.0);

  CHECK_THROWS_AS(matmul(T64::zeros({2, 3}), T64::zeros({4, 5})), ShapeError);
  try {
    matmul(T64::zeros({2, 3}), T64::zeros({4, 5}));
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[4x5]") != std::string::npos);
  }
}

TEST_CASE("matmul agrees with the triple-loop oracle bit-for-bit") {
  auto a = random_tensor({4, 5});
  auto b = random_tensor({5, 3});
  auto c = matmul(a, b);
  // independent in-test triple loop, same per-element summation order
  std::vector<double> expect(4 * 3, 0.0);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 3; ++j) {
      double acc = 0;
      for (int p = 0; p < 5; ++p) acc += a.data()[i * 5 + p] * b.data()[p * 3 + j];
      expect[i * 3 + j] = acc;
    }
  for (int i = 0; i < 12; ++i) CHECK(c.data()[i] == expect[i]);

  // the serial reference kernel matches too, at larger sizes
  auto A = random_tensor({37, 29});
  auto B = random_tensor({29, 41});
  auto C = matmul(A, B);
  std::vector<double> R(37 * 41);
  ref::matmul(A.data().data(), B.data().data(), R.data(), 37, 29, 41);
  for (size_t i = 0; i < R.size(); ++i) CHECK(C.data()[i] == R[i]);
}

TEST_CASE("softmax examples and oracle") {
  auto u = softmax(T64::from({3}, {0, 0, 0}));
  for (double v : u.data()) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-12));

  auto s = softmax(T64::from({2}, {1000, 0}));
  CHECK(std::isfinite(s.data()[0]));
  CHECK(s.data()[0] == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(s.data()[1] == doctest::Approx(0.0).epsilon(1e-9));

  auto x = random_tensor({7}, -3.0, 3.0);
  auto y = softmax(x);
  std::vector<double> oracle(7);
  ref::softmax_rows(x.data().data(), oracle.data(), 1, 7);
  for (int i = 0; i < 7; ++i) CHECK(std::abs(y.data()[i] - oracle[i]) <= 1e-12);

  CHECK_THROWS_AS(softmax(T64::from({2}, {std::nan(""), 0.0})), NumericError);
  CHECK_THROWS_AS(softmax(T64::from({2}, {std::numeric_limits<double>::infinity(), 0.0})),
                  NumericError);
}

TEST_CASE("softmax slices sum to one and lie in [0,1], any axis") {
  for (int axis = 0; axis < 3; ++axis) {
    auto x = random_tensor({3, 4, 5}, -5.0, 5.0);
    auto y = softmax(x, axis);
    for (double v : y.data()) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
    // sum over the softmax axis must be 1 for every slice
    const auto& sh = x.shape();
    long outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= sh[i];
    for (int i = axis + 1; i < 3; ++i) inner *= sh[i];
    const int n = sh[axis];
    for (long o = 0; o < outer; ++o)
      for (long in = 0; in < inner; ++in) {
        double s = 0;
        for (int j = 0; j < n; ++j) s += y.data()[o * n * inner + j * inner + in];
        CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
      }
  }
}

TEST_CASE("layer_norm examples and oracle") {
  auto g = T64::from({4}, {1, 1, 1, 1});
  auto b = T64::zeros({4});
  auto y = layer_norm(T64::from({4}, {5, 5, 5, 5}), g, b, 1e-5);
  for (double v : y.data()) CHECK(v == doctest::Approx(0.0).epsilon(1e-12));

  auto g2 = T64::from({2}, {1, 1});
  auto b2 = T64::zeros({2});
  auto y2 = layer_norm(T64::from({2}, {1, -1}), g2, b2, 1e-12);
  CHECK(y2.data()[0] == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(y2.data()[1] == doctest::Approx(-1.0).epsilon(1e-6));

  auto x = random_tensor({6});
  auto gg = random_tensor({6});
  auto bb = random_tensor({6});
  auto out = layer_norm(x, gg, bb, 1e-6);
  std::vector<double> oracle(6);
  ref::layer_norm_rows(x.data().data(), gg.data().data(), bb.data().data(), 1e-6, oracle.data(), 1, 6);
  for (int i = 0; i < 6; ++i) CHECK(std::abs(out.data()[i] - oracle[i]) <= 1e-10);

  CHECK_THROWS_AS(layer_norm(x, gg, bb, 0.0), ContractError);
  CHECK_THROWS_AS(layer_norm(x, T64::zeros({5}), bb, 1e-5), ShapeError);
}

TEST_CASE("cross_entropy examples and oracle") {
  CHECK(cross_entropy(T64::from({1}, {3.7}), 0).item() == 0.0);
  CHECK(cross_entropy(T64::from({2}, {0, 0}), 0).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  auto z = random_tensor({5}, -2.0, 2.0);
  for (int t = 0; t < 5; ++t) {
    double expect = ref::cross_entropy(z.data().data(), 5, t);
    CHECK(std::abs(cross_entropy(z, t).item() - expect) <= 1e-12);
  }
  CHECK_THROWS_AS(cross_entropy(z, 5), IndexError);
  CHECK_THROWS_AS(cross_entropy(z, -1), IndexError);
}

TEST_CASE("cross_entropy gradient is softmax minus one-hot") {
  auto z = random_tensor({5}, -2.0, 2.0).set_requires_grad();
  auto loss = cross_entropy(z, 2);
  backward(loss);
  std::vector<double> sm(5);
  ref::softmax_rows(z.data().data(), sm.data(), 1, 5);
  for (int i = 0; i < 5; ++i)
    CHECK(z.grad()[i] == doctest::Approx(sm[i] - (i == 2 ? 1.0 : 0.0)).epsilon(1e-12));
}

TEST_CASE("backward on linear and quadratic functionals") {
  auto x = random_tensor({3, 4}).set_requires_grad();
  backward(sum(x));
  for (double g : x.grad()) CHECK(g == 1.0);

  auto y = random_tensor({7}).set_requires_grad();
  backward(scale(sum(mul(y, y)), 0.5));
  for (int i = 0; i < 7; ++i) CHECK(y.grad()[i] == doctest::Approx(y.data()[i]).epsilon(1e-14));

  CHECK_THROWS_AS(backward(random_tensor({2})), ContractError);
}

TEST_CASE("repeated backward accumulates") {
  auto x = random_tensor({4}).set_requires_grad();
  auto loss = sum(x);
  backward(loss);
  backward(loss);
  for (double g : x.grad()) CHECK(g == 2.0);
}

TEST_CASE("backward is additive over losses") {
  auto x = random_tensor({6}).set_requires_grad();
  auto w = random_tensor({6});

  auto f1 = [&](const T64& t) { return sum(mul(t, w)); };
  auto f2 = [&](const T64& t) { return scale(sum(mul(t, t)), 0.5); };

  x.zero_grad();
  backward(add(f1(x), f2(x)));
  auto combined = x.grad();

  x.zero_grad();
  backward(f1(x));
  auto g1 = x.grad();
  x.zero_grad();
  backward(f2(x));
  auto g2 = x.grad();

  for (int i = 0; i < 6; ++i) CHECK(std::abs(combined[i] - (g1[i] + g2[i])) <= 1e-10);
}

TEST_CASE("gradient_check basics") {
  auto x = random_tensor({5});
  auto res = gradient_check([](const T64& t) { return sum(t); }, x, 1e-5, 1e-10);
  CHECK(res.passed);
  CHECK(res.max_relative_error <= 1e-10);

  // softmax then pick first coordinate
  auto pick0 = T64::from({3}, {1, 0, 0});
  auto x3 = random_tensor({3});
  auto res2 = gradient_check(
      [&](const T64& t) { return sum(mul(softmax(t), pick0)); }, x3, 1e-5, 1e-6);
  CHECK(res2.passed);

  CHECK_THROWS_AS(gradient_check([](const T64& t) { return sum(t); }, x, 0.0, 1e-6),
                  ContractError);
}

TEST_CASE("gradient_check flags an injected fault on one coordinate") {
  auto x = random_tensor({4});
  // The value depends on coordinate 2 through a detached constant, so the
  // analytic gradient misses a 0.1 contribution there.
  auto f = [](const T64& t) {
    return add(sum(t), T64::scalar(0.1 * t.data()[2]));
  };
  auto res = gradient_check(f, x, 1e-5, 1e-6);
  CHECK_FALSE(res.passed);
  REQUIRE(res.worst_coordinate.size() == 1);
  CHECK(res.worst_coordinate[0] == 2);
  CHECK(res.max_relative_error == doctest::Approx(0.1 / 1.1).epsilon(1e-3));
}

TEST_CASE("gradient_check across op inventory at fp64") {
  const double h = 1e-5, tol = 1e-6;

  SUBCASE("add/sub/mul/scale chain") {
    auto x = random_tensor({3, 4});
    auto a = random_tensor({3, 4});
    auto res = gradient_check(
        [&](const T64& t) { return sum(mul(add(t, a), sub(t, a))); }, x, h, tol);
    CHECK(res.passed);
  }
  SUBCASE("matmul both operands") {
    auto a = random_tensor({4, 5});
    auto b = random_tensor({5, 3});
    CHECK(gradient_check([&](const T64& t) { return sum(matmul(t, b)); }, a, h, tol).passed);
    CHECK(gradient_check([&](const T64& t) { return sum(matmul(a, t)); }, b, h, tol).passed);
  }
  SUBCASE("linear with bias") {
    auto x = random_tensor({2, 3, 4});
    auto w = random_tensor({4, 6});
    auto b = random_tensor({6});
    CHECK(gradient_check([&](const T64& t) { return sum(gelu(linear(t, w, b))); }, x, h, tol).passed);
    CHECK(gradient_check([&](const T64& t) { return sum(gelu(linear(x, t, b))); }, w, h, tol).passed);
    CHECK(gradient_check([&](const T64& t) { return sum(gelu(linear(x, w, t))); }, b, h, tol).passed);
  }
  SUBCASE("bmm and bmm_nt") {
    auto a = random_tensor({3, 2, 4});
    auto b = random_tensor({3, 4, 5});
    auto c = random_tensor({3, 5, 4});
    CHECK(gradient_check([&](const T64& t) { return sum(bmm(t, b)); }, a, h, tol).passed);
    CHECK(gradient_check([&](const T64& t) { return sum(bmm(a, t)); }, b, h, tol).passed);
    CHECK(gradient_check([&](const T64& t) { return sum(bmm_nt(t, c)); }, a, h, tol).passed);
    CHECK(gradient_check([&](const T64& t) { return sum(bmm_nt(a, t)); }, c, h, tol).passed);
  }
  SUBCASE("softmax then weighted pick") {
    auto x = random_tensor({4, 7});
    auto w = random_tensor({4, 7});
    CHECK(gradient_check([&](const T64& t) { return sum(mul(softmax(t), w)); }, x, h, tol).passed);
  }
  SUBCASE("layer_norm all inputs") {
    auto x = random_tensor({3, 8});
    auto g = random_tensor({8}, 0.5, 1.5);
    auto b = random_tensor({8});
    auto w = random_tensor({3, 8});
    CHECK(gradient_check([&](const T64& t) { return sum(mul(layer_norm(t, g, b, 1e-5), w)); }, x, h, tol).passed);
    CHECK(gradient_check([&](const T64& t) { return sum(mul(layer_norm(x, t, b, 1e-5), w)); }, g, h, tol).passed);
    CHECK(gradient_check([&](const T64& t) { return sum(mul(layer_norm(x, g, t, 1e-5), w)); }, b, h, tol).passed);
  }
  SUBCASE("cross_entropy single and rows") {
    auto z = random_tensor({6});
    CHECK(gradient_check([&](const T64& t) { return cross_entropy(t, 3); }, z, h, tol).passed);
    auto zr = random_tensor({4, 5});
    std::vector<int> targets{0, 2, 4, 1};
    CHECK(gradient_check([&](const T64& t) { return cross_entropy_rows(t, targets); }, zr, h, tol).passed);
  }
  SUBCASE("token shuffling ops") {
    auto x = random_tensor({2, 5, 6});
    auto y = random_tensor({2, 3, 6});
    auto w = random_tensor({2, 8, 6});
    CHECK(gradient_check([&](const T64& t) { return sum(mul(concat_tokens(t, y), w)); }, x, h, tol).passed);
    CHECK(gradient_check([&](const T64& t) { return sum(slice_tokens(t, 1, 3)); }, x, h, tol).passed);
    auto hsplit = random_tensor({2, 5, 6});
    auto w2 = random_tensor({4, 5, 3});
    CHECK(gradient_check([&](const T64& t) { return sum(mul(split_heads(t, 2), w2)); }, hsplit, h, tol).passed);
    auto m = random_tensor({4, 5, 3});
    auto w3 = random_tensor({2, 5, 6});
    CHECK(gradient_check([&](const T64& t) { return sum(mul(merge_heads(t, 2), w3)); }, m, h, tol).passed);
  }
  SUBCASE("broadcast ops") {
    auto x = random_tensor({4, 6});
    auto w = random_tensor({3, 4, 6});
    CHECK(gradient_check([&](const T64& t) { return sum(mul(broadcast_batch(t, 3), w)); }, x, h, tol).passed);
    auto big = random_tensor({3, 4, 6});
    CHECK(gradient_check([&](const T64& t) { return sum(mul(add_broadcast_batch(big, t), w)); }, x, h, tol).passed);
    CHECK(gradient_check([&](const T64& t) { return sum(mul(add_broadcast_batch(t, x), w)); }, big, h, tol).passed);
  }
  SUBCASE("paired_row_scores") {
    auto p = random_tensor({2, 5, 7});
    auto w = random_tensor({5, 7});
    auto pick = random_tensor({2, 5});
    CHECK(gradient_check([&](const T64& t) { return sum(mul(paired_row_scores(t, w), pick)); }, p, h, tol).passed);
    CHECK(gradient_check([&](const T64& t) { return sum(mul(paired_row_scores(p, t), pick)); }, w, h, tol).passed);
  }
  SUBCASE("gelu matches reference formula") {
    auto x = random_tensor({20}, -3.0, 3.0);
    auto y = gelu(x);
    for (int i = 0; i < 20; ++i)
      CHECK(y.data()[i] == doctest::Approx(ref::gelu(x.data()[i])).epsilon(1e-12));
    CHECK(gradient_check([&](const T64& t) { return sum(mul(gelu(t), x)); }, random_tensor({20}, -2.0, 2.0), h, tol).passed);
  }
}

TEST_CASE("parallel kernels match serial reference") {
  const int m = 83, k = 47, n = 61;  // big enough to cross the parallel cutoff
  auto A = random_tensor({m, k});
  auto B = random_tensor({k, n});

  std::vector<double> C1(m * n), C2(m * n);
  kern::mm_nn(A.data().data(), B.data().data(), C1.data(), m, k, n);
  ref::matmul(A.data().data(), B.data().data(), C2.data(), m, k, n);
  for (int i = 0; i < m * n; ++i) CHECK(C1[i] == C2[i]);

  // mm_tn(A,B) == ref::matmul(transpose(A), B)
  std::vector<double> At(k * m);
  kern::transpose(A.data().data(), At.data(), m, k);
  std::vector<double> D1(k * n), D2(k * n);
  kern::mm_tn(A.data().data(), B.data().data(), D1.data(), m, k, n);
  ref::matmul(At.data(), B.data().data(), D2.data(), k, m, n);
  for (int i = 0; i < k * n; ++i) CHECK(D1[i] == doctest::Approx(D2[i]).epsilon(1e-12));

  // mm_nt(A,Bt) == mm_nn(A,B) where Bt = B^T
  std::vector<double> Bt(n * k);
  kern::transpose(B.data().data(), Bt.data(), k, n);
  std::vector<double> E1(m * n);
  kern::mm_nt(A.data().data(), Bt.data(), E1.data(), m, k, n);
  for (int i = 0; i < m * n; ++i) CHECK(E1[i] == C1[i]);

  // parallel softmax (max-subtracted) vs direct reference
  auto X = random_tensor({40, 33}, -4.0, 4.0);
  std::vector<double> Y1(40 * 33), Y2(40 * 33);
  kern::softmax_rows(X.data().data(), Y1.data(), 40, 33);
  ref::softmax_rows(X.data().data(), Y2.data(), 40, 33);
  for (size_t i = 0; i < Y1.size(); ++i) CHECK(std::abs(Y1[i] - Y2[i]) <= 1e-12);

  // colsum vs naive
  std::vector<double> s1(k, 0.0), s2(k, 0.0);
  kern::colsum(A.data().data(), s1.data(), m, k);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < k; ++j) s2[j] += A.data()[i * k + j];
  for (int j = 0; j < k; ++j) CHECK(s1[j] == s2[j]);
}

TEST_CASE("bmm kernels agree with per-batch reference") {
  const int L = 5, m = 6, k = 7, n = 4;
  auto A = random_tensor({L, m, k});
  auto B = random_tensor({L, k, n});
  auto C = bmm(A, B);
  for (int l = 0; l < L; ++l) {
    std::vector<double> R(m * n);
    ref::matmul(A.data().data() + l * m * k, B.data().data() + l * k * n, R.data(), m, k, n);
    for (int i = 0; i < m * n; ++i)
      CHECK(C.data()[l * m * n + i] == doctest::Approx(R[i]).epsilon(1e-12));
  }
}
