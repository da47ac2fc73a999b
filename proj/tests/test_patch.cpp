#include "fastmoco/patch.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>

using namespace fastmoco;

namespace {

Tensor<double> randn(Shape shape, Rng& rng, bool grad = false) {
  auto t = Tensor<double>::zeros(shape);
  for (auto& v : t.vec()) v = rng.normal();
  if (grad) t.set_requires_grad(true);
  return t;
}

// independent brute-force enumeration: subsets as sorted bitmask expansions
std::vector<std::vector<int>> bitmask_combinations(int items, int n) {
  std::vector<std::vector<int>> out;
  for (int mask = 0; mask < (1 << items); ++mask) {
    if (__builtin_popcount(static_cast<unsigned>(mask)) != n) continue;
    std::vector<int> sub;
    for (int i = 0; i < items; ++i)
      if (mask & (1 << i)) sub.push_back(i);
    out.push_back(std::move(sub));
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

TEST_CASE("divide tiles the view exactly") {
  Rng rng(1);
  SUBCASE("m=2 on 32x32, reassembly is bitwise") {
    auto x = randn({2, 3, 32, 32}, rng);
    auto p = divide(x, 2);
    CHECK(p.shape() == Shape{8, 3, 16, 16});
    // image-major: image 0 patches at rows 0..3, row-major grid order
    auto tl = select_rows(p, {0});
    auto manual_tl = crop(x, 0, 16, 0, 16);
    CHECK(tl.vec() == std::vector<double>(manual_tl.vec().begin(),
                                          manual_tl.vec().begin() + 3 * 16 * 16));
    auto quad = stitch_quad(select_rows(p, {0, 4}), select_rows(p, {1, 5}),
                            select_rows(p, {2, 6}), select_rows(p, {3, 7}));
    CHECK(quad.vec() == x.vec());
  }
  SUBCASE("m=1 is the view itself") {
    auto x = randn({3, 3, 8, 8}, rng);
    CHECK(divide(x, 1).vec() == x.vec());
  }
  SUBCASE("m=3 on 30x30 gives nine 10x10 patches") {
    auto x = randn({1, 3, 30, 30}, rng);
    auto p = divide(x, 3);
    CHECK(p.shape() == Shape{9, 3, 10, 10});
  }
  SUBCASE("indivisible size rejected") {
    auto x = randn({1, 3, 32, 32}, rng);
    CHECK_THROWS_AS(divide(x, 5), dim_error);
  }
}

TEST_CASE("enumerate_combinations vs brute force") {
  CHECK(enumerate_combinations(2, 2).size() == 6);
  CHECK(enumerate_combinations(2, 4) == std::vector<std::vector<int>>{{0, 1, 2, 3}});
  CHECK(enumerate_combinations(3, 3).size() == 84);

  for (int m = 1; m <= 3; ++m)
    for (int n = 1; n <= m * m; ++n) {
      auto got = enumerate_combinations(m, n);
      auto want = bitmask_combinations(m * m, n);
      CHECK(got.size() == static_cast<std::size_t>(n_choose_k(m * m, n)));
      CHECK(got == want);  // lexicographic contents
    }

  CHECK_THROWS_AS(enumerate_combinations(2, 5), std::invalid_argument);
  CHECK_THROWS_AS(enumerate_combinations(2, 0), std::invalid_argument);
}

TEST_CASE("equal-use subsampling") {
  for (int pairs : {2, 4, 6}) {
    auto subs = equal_use_subsets(2, 2, pairs);
    CHECK(static_cast<int>(subs.size()) == pairs);
    std::vector<int> count(4, 0);
    for (const auto& s : subs)
      for (int p : s) ++count[static_cast<std::size_t>(p)];
    for (int c : count) CHECK(c == pairs * 2 / 4);
  }
  CHECK(equal_use_subsets(2, 2, 2) == std::vector<std::vector<int>>{{0, 1}, {2, 3}});
  CHECK_THROWS_AS(equal_use_subsets(2, 2, 3), std::invalid_argument);  // unequal usage
  CHECK_THROWS_AS(equal_use_subsets(2, 2, 7), std::invalid_argument);  // > C(4,2)

  SUBCASE("greedy path for a 3x3 grid") {
    auto subs = equal_use_subsets(3, 3, 3);  // 3*3 = 9 slots, one use each
    std::vector<int> count(9, 0);
    for (const auto& s : subs)
      for (int p : s) ++count[static_cast<std::size_t>(p)];
    for (int c : count) CHECK(c == 1);
  }
}

TEST_CASE("combine_mean") {
  auto members = Tensor<double>::from_data({2, 2}, {1, 3, 3, 1});
  CHECK(combine_mean(members).vec() == std::vector<double>{2, 2});

  auto single = Tensor<double>::from_data({1, 3}, {4, 5, 6});
  CHECK(combine_mean(single).vec() == std::vector<double>{4, 5, 6});

  SUBCASE("permutation invariance") {
    Rng rng(2);
    auto v = randn({4, 6}, rng);
    auto perm = select_rows(v, {2, 0, 3, 1});
    auto a = combine_mean(v);
    auto b = combine_mean(perm);
    for (int i = 0; i < 6; ++i)
      CHECK(a.vec()[static_cast<std::size_t>(i)] ==
            doctest::Approx(b.vec()[static_cast<std::size_t>(i)]).epsilon(1e-12));
  }
  SUBCASE("linearity") {
    Rng rng(3);
    auto v = randn({3, 4}, rng);
    auto w = randn({3, 4}, rng);
    auto lhs = combine_mean(add(mul_scalar(v, 2.0), mul_scalar(w, -0.5)));
    auto rhs = add(mul_scalar(combine_mean(v), 2.0), mul_scalar(combine_mean(w), -0.5));
    for (std::size_t i = 0; i < lhs.vec().size(); ++i)
      CHECK(lhs.vec()[i] == doctest::Approx(rhs.vec()[i]).epsilon(1e-12));
  }
  SUBCASE("member gradient is 1/n of the combined gradient") {
    Rng rng(4);
    auto v = randn({3, 5}, rng, true);
    auto c = combine_mean(v);
    auto r = randn({1, 5}, rng);
    backward(sum(mul(c, r)));
    for (int row = 0; row < 3; ++row)
      for (int col = 0; col < 5; ++col)
        CHECK(v.grad()[static_cast<std::size_t>(row * 5 + col)] ==
              doctest::Approx(r.vec()[static_cast<std::size_t>(col)] / 3.0).epsilon(1e-12));
  }
}

TEST_CASE("combine_weighted") {
  auto a = Tensor<double>::from_data({1, 2}, {1, 0});
  auto b = Tensor<double>::from_data({1, 2}, {0, 1});
  auto c = combine_weighted(a, b, 0.7);
  CHECK(c.vec()[0] == doctest::Approx(0.7));
  CHECK(c.vec()[1] == doctest::Approx(0.3));

  SUBCASE("gamma = 0.5 equals the mean") {
    Rng rng(5);
    auto x = randn({2, 4}, rng);
    auto y = randn({2, 4}, rng);
    auto w = combine_weighted(x, y, 0.5);
    for (std::size_t i = 0; i < w.vec().size(); ++i)
      CHECK(w.vec()[i] == doctest::Approx(0.5 * (x.vec()[i] + y.vec()[i])).epsilon(1e-12));
  }
  SUBCASE("gamma near 1 returns the first member") {
    auto w = combine_weighted(a, b, 1.0 - 1e-12);
    CHECK(w.vec()[0] == doctest::Approx(1.0));
    CHECK(w.vec()[1] == doctest::Approx(0.0));
  }
  CHECK_THROWS_AS(combine_weighted(a, b, 0.3), domain_error);
  CHECK_THROWS_AS(combine_weighted(a, b, 1.0), domain_error);
}

TEST_CASE("combine_beta draws") {
  SUBCASE("gamma is symmetric around one half") {
    for (double alpha : {0.2, 1.0, 16.0}) {
      Rng rng(6);
      double acc = 0;
      const int draws = 100000;
      for (int i = 0; i < draws; ++i) acc += rng.beta(alpha, alpha);
      CHECK(std::abs(acc / draws - 0.5) < 0.005);
    }
  }
  SUBCASE("variance of Beta(16,16) is 1/132") {
    Rng rng(7);
    double acc = 0, acc2 = 0;
    const int draws = 100000;
    for (int i = 0; i < draws; ++i) {
      const double g = rng.beta(16, 16);
      acc += g;
      acc2 += g * g;
    }
    const double mean = acc / draws;
    const double var = acc2 / draws - mean * mean;
    CHECK(std::abs(var - 1.0 / 132.0) < 0.1 / 132.0);
  }
  SUBCASE("fixed seed reproduces the combination") {
    auto a = Tensor<double>::from_data({1, 2}, {1, 0});
    auto b = Tensor<double>::from_data({1, 2}, {0, 1});
    Rng r1(8), r2(8);
    auto c1 = combine_beta(a, b, 4.0, r1);
    auto c2 = combine_beta(a, b, 4.0, r2);
    CHECK(c1.vec() == c2.vec());
  }
  SUBCASE("non-positive alpha rejected") {
    auto a = Tensor<double>::from_data({1, 1}, {1});
    Rng rng(9);
    CHECK_THROWS_AS(combine_beta(a, a, 0.0, rng), domain_error);
  }
}

TEST_CASE("combine_max") {
  auto a = Tensor<double>::from_data({1, 2}, {1, 3});
  auto b = Tensor<double>::from_data({1, 2}, {3, 1});
  CHECK(combine_max(a, b).vec() == std::vector<double>{3, 3});
  CHECK(combine_max(a, a).vec() == a.vec());  // idempotent
  auto c = combine_max(a, b);
  for (std::size_t i = 0; i < c.vec().size(); ++i) {
    CHECK(c.vec()[i] >= a.vec()[i]);
    CHECK(c.vec()[i] >= b.vec()[i]);
  }
}

TEST_CASE("stitching") {
  Rng rng(10);
  auto x = randn({1, 3, 32, 32}, rng);
  auto p = divide(x, 2);

  SUBCASE("left+right reproduces the top half bitwise") {
    auto strip = stitch_grid_pair(select_rows(p, {0}), 0, select_rows(p, {1}), 1, 2);
    CHECK(strip.shape() == Shape{1, 3, 16, 32});
    auto top = crop(x, 0, 16, 0, 32);
    CHECK(strip.vec() == top.vec());
  }
  SUBCASE("operand order does not matter: original position wins") {
    auto a = stitch_grid_pair(select_rows(p, {1}), 1, select_rows(p, {0}), 0, 2);
    auto b = stitch_grid_pair(select_rows(p, {0}), 0, select_rows(p, {1}), 1, 2);
    CHECK(a.vec() == b.vec());
  }
  SUBCASE("feature map shapes") {
    auto fa = randn({2, 128, 8, 8}, rng);
    auto fb = randn({2, 128, 8, 8}, rng);
    CHECK(stitch_pair(fa, fb, StitchOrientation::kHorizontal).shape() == Shape{2, 128, 8, 16});
    CHECK(stitch_pair(fa, fb, StitchOrientation::kVertical).shape() == Shape{2, 128, 16, 8});
  }
  SUBCASE("diagonal pairs rejected") {
    CHECK_FALSE(grid_adjacency(0, 3, 2).has_value());
    CHECK_FALSE(grid_adjacency(1, 2, 2).has_value());
    CHECK_THROWS_AS(stitch_grid_pair(select_rows(p, {0}), 0, select_rows(p, {3}), 3, 2),
                    dim_error);
  }
  SUBCASE("exactly the four adjacent pairs of a 2x2 grid are stitchable") {
    int adjacent = 0;
    for (int a = 0; a < 4; ++a)
      for (int b = a + 1; b < 4; ++b)
        if (grid_adjacency(a, b, 2)) ++adjacent;
    CHECK(adjacent == 4);
  }
}

TEST_CASE("montage assembly") {
  Rng rng(11);
  const int k = 3;
  auto patches = randn({4 * k, 2, 4, 4}, rng);

  SUBCASE("placement is a permutation of the 4K slots") {
    Rng mr(12);
    auto [montage, placement] = montage_assemble(patches, mr);
    CHECK(montage.shape() == Shape{k, 2, 8, 8});
    std::vector<int> sorted = placement.slot_to_patch;
    std::sort(sorted.begin(), sorted.end());
    for (int i = 0; i < 4 * k; ++i) CHECK(sorted[static_cast<std::size_t>(i)] == i);
  }
  SUBCASE("disassemble routes each patch back to its source") {
    Rng mr(13);
    auto [montage, placement] = montage_assemble(patches, mr);
    auto back = montage_disassemble(montage, placement);
    CHECK(back.vec() == patches.vec());  // bitwise round trip at input level
  }
  SUBCASE("K=1 montages the four patches of one image in random order") {
    auto four = randn({4, 2, 4, 4}, rng);
    Rng mr(14);
    auto [montage, placement] = montage_assemble(four, mr);
    CHECK(montage.shape() == Shape{1, 2, 8, 8});
    auto back = montage_disassemble(montage, placement);
    CHECK(back.vec() == four.vec());
  }
  SUBCASE("count mismatch rejected") {
    auto bad = randn({5, 2, 4, 4}, rng);
    Rng mr(15);
    CHECK_THROWS_AS(montage_assemble(bad, mr), dim_error);
    Rng mr2(16);
    auto [montage, placement] = montage_assemble(patches, mr2);
    auto wrong = randn({k + 1, 2, 8, 8}, rng);
    CHECK_THROWS_AS(montage_disassemble(wrong, placement), dim_error);
  }
}
