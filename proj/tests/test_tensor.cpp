#include "fastmoco/conv.hpp"
#include "fastmoco/gradcheck.hpp"
#include "fastmoco/tensor.hpp"

#include <doctest.h>

#include <cmath>

using namespace fastmoco;

namespace {

Tensor<double> randn(Shape shape, Rng& rng, bool grad = false) {
  auto t = Tensor<double>::zeros(shape);
  for (auto& v : t.vec()) v = rng.normal();
  if (grad) t.set_requires_grad(true);
  return t;
}

}  // namespace

TEST_CASE("tensor construction invariants") {
  auto t = Tensor<double>::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.numel() == 6);
  CHECK_THROWS_AS(Tensor<double>::from_data({2, 3}, {1, 2, 3}), dim_error);
  CHECK_THROWS_AS(Tensor<double>::zeros({2, 0}), std::invalid_argument);
}

TEST_CASE("matmul identity and column cases") {
  auto a = Tensor<double>::from_data({2, 2}, {1, 2, 3, 4});
  auto eye = Tensor<double>::from_data({2, 2}, {1, 0, 0, 1});
  auto r = matmul(a, eye);
  CHECK(r.vec() == std::vector<double>{1, 2, 3, 4});

  auto col = Tensor<double>::from_data({2, 1}, {5, 7});
  auto r2 = matmul(eye, col);
  CHECK(r2.vec() == std::vector<double>{5, 7});

  CHECK_THROWS_AS(matmul(a, Tensor<double>::zeros({3, 2})), dim_error);
}

TEST_CASE("matmul gradients match finite differences") {
  Rng rng(11);
  auto a = randn({3, 4}, rng, true);
  auto b = randn({4, 2}, rng, true);
  gradcheck_detail::Projector proj{&rng};
  auto rep = finite_diff_check(
      "matmul", {&a, &b}, [&, proj]() mutable { return proj(matmul(a, b)); }, 1e-6);
  CHECK(rep.pass);
  CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("conv2d trivial cases") {
  SUBCASE("constant input, 1x1 kernel") {
    auto x = Tensor<double>::full({1, 1, 3, 3}, 1.0);
    auto w = Tensor<double>::full({1, 1, 1, 1}, 2.0);
    auto y = conv2d(x, w, 1, 0);
    CHECK(y.shape() == Shape{1, 1, 3, 3});
    for (double v : y.vec()) CHECK(v == doctest::Approx(2.0));
  }
  SUBCASE("impulse reproduces the kernel") {
    auto x = Tensor<double>::zeros({1, 1, 5, 5});
    x.vec()[2 * 5 + 2] = 1.0;  // delta at center
    Rng rng(3);
    auto w = randn({1, 1, 3, 3}, rng);
    auto y = conv2d(x, w, 1, 1);
    // cross-correlation: the kernel appears point-reflected around the impulse
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        CHECK(y.vec()[static_cast<std::size_t>((i + 1) * 5 + (j + 1))] ==
              doctest::Approx(w.vec()[static_cast<std::size_t>((2 - i) * 3 + (2 - j))]));
  }
  SUBCASE("shape errors") {
    auto x = Tensor<double>::zeros({1, 2, 4, 4});
    auto w = Tensor<double>::zeros({1, 3, 3, 3});
    CHECK_THROWS_AS(conv2d(x, w, 1, 0), dim_error);
    auto w2 = Tensor<double>::zeros({1, 2, 6, 6});
    CHECK_THROWS_AS(conv2d(x, w2, 1, 0), dim_error);  // non-positive output extent
  }
}

TEST_CASE("conv2d gradients match finite differences") {
  Rng rng(12);
  auto x = randn({2, 3, 8, 8}, rng, true);
  auto w = randn({4, 3, 3, 3}, rng, true);
  gradcheck_detail::Projector proj{&rng};
  auto rep = finite_diff_check(
      "conv", {&x, &w}, [&, proj]() mutable { return proj(conv2d(x, w, 2, 1)); }, 1e-5);
  CHECK(rep.pass);
}

TEST_CASE("l2_normalize") {
  auto v = Tensor<double>::from_data({1, 2}, {3, 4});
  auto n = l2_normalize(v);
  CHECK(n.vec()[0] == doctest::Approx(0.6));
  CHECK(n.vec()[1] == doctest::Approx(0.8));

  auto unit = Tensor<double>::from_data({1, 2}, {1, 0});
  auto n2 = l2_normalize(unit);
  CHECK(n2.vec() == std::vector<double>{1, 0});

  auto zero = Tensor<double>::zeros({1, 3});
  CHECK_THROWS_AS(l2_normalize(zero), domain_error);

  SUBCASE("unit output norm and gradient orthogonality") {
    Rng rng(5);
    auto z = randn({1, 5}, rng, true);
    auto out = l2_normalize(z);
    double sq = 0;
    for (double x : out.vec()) sq += x * x;
    CHECK(std::abs(std::sqrt(sq) - 1.0) < 1e-9);

    auto r = randn({1, 5}, rng);
    backward(sum(mul(out, r)));
    double dot = 0;
    for (int i = 0; i < 5; ++i) dot += z.grad()[static_cast<std::size_t>(i)] * z.vec()[static_cast<std::size_t>(i)];
    CHECK(std::abs(dot) < 1e-8);  // J z = 0 for scale-invariant map
  }
}

TEST_CASE("elementwise examples") {
  auto x = Tensor<double>::from_data({2}, {-1, 2});
  CHECK(relu(x).vec() == std::vector<double>{0, 2});

  CHECK_THROWS_AS(log(Tensor<double>::from_data({1}, {-0.5})), domain_error);

  auto a = Tensor<double>::from_data({2}, {1, 3});
  auto b = Tensor<double>::from_data({2}, {3, 1});
  CHECK(max_elementwise(a, b).vec() == std::vector<double>{3, 3});
}

TEST_CASE("softmax_cross_entropy frozen values") {
  SUBCASE("uniform logits give ln(B) for any label") {
    for (int big : {2, 8, 64}) {
      std::vector<double> logits(static_cast<std::size_t>(big), 0.7);
      auto t = Tensor<double>::from_data({1, big}, std::move(logits));
      auto loss = softmax_cross_entropy(t, {big / 2});
      CHECK(std::abs(loss.item() - std::log(static_cast<double>(big))) < 1e-12);
    }
  }
  SUBCASE("two-logit case") {
    // direct evaluation: -log(e^1 / (e^1 + e^0)) = ln(1 + e^-1)
    auto t = Tensor<double>::from_data({1, 2}, {1, 0});
    auto loss = softmax_cross_entropy(t, {0});
    CHECK(loss.item() == doctest::Approx(0.3132616875182228).epsilon(1e-12));
  }
  SUBCASE("label out of range") {
    auto t = Tensor<double>::zeros({1, 3});
    CHECK_THROWS_AS(softmax_cross_entropy(t, {3}), dim_error);
  }
}

TEST_CASE("backward basics") {
  SUBCASE("sum gives ones") {
    auto w = Tensor<double>::from_data({3}, {1, 2, 3});
    w.set_requires_grad(true);
    backward(sum(w));
    CHECK(w.grad() == std::vector<double>{1, 1, 1});
  }
  SUBCASE("half squared norm gives w") {
    auto w = Tensor<double>::from_data({3}, {1.5, -2, 0.25});
    w.set_requires_grad(true);
    backward(mul_scalar(sum(mul(w, w)), 0.5));
    for (int i = 0; i < 3; ++i)
      CHECK(w.grad()[static_cast<std::size_t>(i)] == doctest::Approx(w.vec()[static_cast<std::size_t>(i)]));
  }
  SUBCASE("non-scalar root rejected") {
    auto w = Tensor<double>::from_data({2}, {1, 2});
    w.set_requires_grad(true);
    auto y = mul_scalar(w, 2.0);
    CHECK_THROWS_AS(backward(y), dim_error);
  }
  SUBCASE("backward twice accumulates exactly 2x") {
    auto w = Tensor<double>::from_data({4}, {1, 2, 3, 4});
    w.set_requires_grad(true);
    backward(mean(mul(w, w)));
    const auto once = w.grad();
    w.zero_grad();
    backward(mean(mul(w, w)));
    backward(mean(mul(w, w)));
    for (std::size_t i = 0; i < once.size(); ++i) CHECK(w.grad()[i] == 2.0 * once[i]);
  }
  SUBCASE("diamond reuse accumulates both paths") {
    auto w = Tensor<double>::from_data({2}, {3, 5});
    w.set_requires_grad(true);
    backward(sum(add(w, w)));
    CHECK(w.grad() == std::vector<double>{2, 2});
  }
}

TEST_CASE("chain rule composition matches manual product") {
  Rng rng(21);
  auto x = randn({3, 3}, rng, true);
  auto r = randn({3, 3}, rng);
  backward(sum(mul(exp(x), r)));
  for (std::size_t i = 0; i < x.vec().size(); ++i)
    CHECK(x.grad()[i] == doctest::Approx(r.vec()[i] * std::exp(x.vec()[i])).epsilon(1e-12));
}

TEST_CASE("ops are deterministic given identical inputs") {
  Rng rng(31);
  auto x = randn({4, 3, 16, 16}, rng);
  auto w = randn({8, 3, 3, 3}, rng);
  auto y1 = conv2d(x, w, 2, 1);
  auto y2 = conv2d(x, w, 2, 1);
  CHECK(y1.vec() == y2.vec());
}

TEST_CASE("batch_norm semantics") {
  Rng rng(41);
  auto x = randn({8, 3, 4, 4}, rng, true);
  auto gamma = Tensor<double>::full({3}, 1.0);
  auto beta = Tensor<double>::zeros({3});
  auto rm = Tensor<double>::zeros({3});
  auto rv = Tensor<double>::full({3}, 1.0);

  auto y = batch_norm(x, gamma, beta, rm, rv, true);
  // per-channel mean ~0, biased var ~1 after training-mode normalization
  const int hw = 16, n = 8;
  for (int c = 0; c < 3; ++c) {
    double m = 0;
    for (int i = 0; i < n; ++i)
      for (int k = 0; k < hw; ++k) m += y.vec()[static_cast<std::size_t>((i * 3 + c) * hw + k)];
    m /= n * hw;
    CHECK(std::abs(m) < 1e-10);
  }
  // running stats moved from init by momentum 0.1
  CHECK(rm.vec()[0] != 0.0);
  CHECK(rv.vec()[0] != 1.0);

  SUBCASE("infer mode uses running stats and is affine") {
    auto stats_m = rm.clone_detached();
    auto y2 = batch_norm(x, gamma, beta, rm, rv, false);
    CHECK(rm.vec() == stats_m.vec());  // unchanged in eval
    CHECK(y2.numel() == x.numel());
  }
}

TEST_CASE("shape ops round trips") {
  Rng rng(51);
  auto x = randn({2, 3, 4, 6}, rng);
  SUBCASE("concat then crop recovers operands") {
    auto y = randn({2, 3, 4, 6}, rng);
    auto cat = concat(x, y, 3);
    auto back_x = crop(cat, 0, 4, 0, 6);
    auto back_y = crop(cat, 0, 4, 6, 6);
    CHECK(back_x.vec() == x.vec());
    CHECK(back_y.vec() == y.vec());
  }
  SUBCASE("select_rows gathers dim-0 slices") {
    auto two = select_rows(x, {1, 0});
    CHECK(two.dim(0) == 2);
    CHECK(two.vec()[0] == x.vec()[static_cast<std::size_t>(x.numel() / 2)]);
  }
  SUBCASE("crop bounds checked") { CHECK_THROWS_AS(crop(x, 0, 5, 0, 6), dim_error); }
}

TEST_CASE("custom op hook supports mutation-style sanity checks") {
  // A deliberately wrong backward (sign flip on relu) must be caught by the
  // finite-difference oracle.
  Rng rng(61);
  auto x = randn({3, 3}, rng, true);
  for (auto& v : x.vec()) v += (v >= 0 ? 0.3 : -0.3);
  auto buggy_relu = [](const Tensor<double>& a) {
    std::vector<double> out(a.vec());
    for (auto& v : out) v = v > 0 ? v : 0;
    auto ia = a.impl();
    return detail::record(a.shape(), std::move(out), {a}, [ia](auto& self) {
      if (!ia->requires_grad) return;
      ia->ensure_grad();
      for (std::size_t i = 0; i < self.data.size(); ++i)
        if (ia->data[i] > 0) ia->grad[i] -= self.grad[i];  // wrong sign
    });
  };
  gradcheck_detail::Projector proj{&rng};
  auto rep = finite_diff_check(
      "buggy_relu", {&x}, [&, proj]() mutable { return proj(buggy_relu(x)); }, 1e-5);
  CHECK_FALSE(rep.pass);
  CHECK(rep.max_rel_err > 0.1);
}
