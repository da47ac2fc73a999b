#include "fastmoco/loss.hpp"
#include "fastmoco/patch.hpp"
#include "fastmoco/rng.hpp"

#include <doctest.h>

#include <Eigen/Dense>

#include <cmath>

using namespace fastmoco;

namespace {

Tensor<double> unit_rows(Shape shape, Rng& rng) {
  auto t = Tensor<double>::zeros(shape);
  for (auto& v : t.vec()) v = rng.normal();
  return l2_normalize(t);
}

// plain-double InfoNCE for one online row, used as the brute-force oracle
double nce_row(const std::vector<double>& z, const Tensor<double>& targets, int pos, double tau) {
  const int b = targets.dim(0), d = targets.dim(1);
  double denom = 0, pos_logit = 0;
  std::vector<double> logits(static_cast<std::size_t>(b));
  double mx = -1e300;
  for (int r = 0; r < b; ++r) {
    double dot = 0;
    for (int c = 0; c < d; ++c) dot += z[static_cast<std::size_t>(c)] * targets.vec()[static_cast<std::size_t>(r * d + c)];
    logits[static_cast<std::size_t>(r)] = dot / tau;
    mx = std::max(mx, logits[static_cast<std::size_t>(r)]);
  }
  for (int r = 0; r < b; ++r) denom += std::exp(logits[static_cast<std::size_t>(r)] - mx);
  pos_logit = logits[static_cast<std::size_t>(pos)];
  return mx + std::log(denom) - pos_logit;
}

std::vector<double> row_of(const Tensor<double>& t, int r) {
  const int d = t.dim(1);
  return {t.vec().begin() + static_cast<std::ptrdiff_t>(r) * d,
          t.vec().begin() + static_cast<std::ptrdiff_t>(r + 1) * d};
}

}  // namespace

TEST_CASE("info_nce basics") {
  SUBCASE("uniform similarities give exactly ln(B)") {
    for (int b : {2, 8, 64}) {
      // identical target rows make every logit equal, for any tau
      auto one = Tensor<double>::zeros({b, 4});
      for (int r = 0; r < b; ++r) one.vec()[static_cast<std::size_t>(r * 4)] = 1.0;
      auto z = Tensor<double>::zeros({1, 4});
      z.vec()[1] = 1.0;
      for (double tau : {0.3, 1.0}) {
        auto loss = info_nce(z, one, b / 2, tau);
        CHECK(std::abs(loss.item() - std::log(static_cast<double>(b))) < 1e-9);
      }
    }
  }
  SUBCASE("two-target frozen value") {
    auto z = Tensor<double>::from_data({1, 2}, {1, 0});
    auto targets = Tensor<double>::from_data({2, 2}, {1, 0, 0, 1});
    auto loss = info_nce(z, targets, 0, 1.0);
    CHECK(loss.item() == doctest::Approx(0.3132616875182228).epsilon(1e-12));
  }
  SUBCASE("small tau with a dominant positive drives the loss to zero") {
    auto z = Tensor<double>::from_data({1, 2}, {1, 0});
    auto targets = Tensor<double>::from_data({2, 2}, {1, 0, 0, 1});
    auto loss = info_nce(z, targets, 0, 0.01);
    CHECK(loss.item() < 1e-8);
  }
  SUBCASE("temperature must be positive") {
    auto z = Tensor<double>::from_data({1, 1}, {1});
    CHECK_THROWS_AS(info_nce(z, z, 0, 0.0), domain_error);
  }
  SUBCASE("non-unit rows rejected") {
    auto z = Tensor<double>::from_data({1, 2}, {2, 0});
    auto targets = Tensor<double>::from_data({1, 2}, {1, 0});
    CHECK_THROWS_AS(info_nce(z, targets, 0, 1.0), domain_error);
  }
  SUBCASE("loss bounds when the positive is the max logit") {
    Rng rng(1);
    auto z = unit_rows({1, 8}, rng);
    auto targets = unit_rows({6, 8}, rng);
    // copy z into the positive slot so it is strictly most similar
    for (int c = 0; c < 8; ++c) targets.vec()[static_cast<std::size_t>(2 * 8 + c)] = z.vec()[static_cast<std::size_t>(c)];
    auto loss = info_nce(z, targets, 2, 0.5);
    CHECK(loss.item() >= 0.0);
    CHECK(loss.item() <= std::log(6.0));
  }
  SUBCASE("general upper bound ln(B) + (max-min logit)/tau") {
    Rng rng(14);
    for (int trial = 0; trial < 30; ++trial) {
      const int b = 2 + rng.uniform_int(12);
      auto z = unit_rows({1, 8}, rng);
      auto targets = unit_rows({b, 8}, rng);
      const double tau = rng.uniform(0.2, 2.0);
      double mx = -1e300, mn = 1e300;
      for (int r = 0; r < b; ++r) {
        double dot = 0;
        for (int c = 0; c < 8; ++c)
          dot += z.vec()[static_cast<std::size_t>(c)] * targets.vec()[static_cast<std::size_t>(r * 8 + c)];
        mx = std::max(mx, dot / tau);
        mn = std::min(mn, dot / tau);
      }
      const double loss = info_nce(z, targets, rng.uniform_int(b), tau).item();
      CHECK(loss <= std::log(static_cast<double>(b)) + (mx - mn) + 1e-9);
    }
  }
}

TEST_CASE("symmetrized pair loss") {
  Rng rng(2);
  const int n = 5, d = 8;
  auto oa = unit_rows({n, d}, rng), ob = unit_rows({n, d}, rng);
  auto ta = unit_rows({n, d}, rng), tb = unit_rows({n, d}, rng);

  SUBCASE("swapping the view labels leaves the value unchanged") {
    auto l1 = symmetrized_pair_loss(oa, ob, ta, tb, 0.7);
    auto l2 = symmetrized_pair_loss(ob, oa, tb, ta, 0.7);
    CHECK(l1.item() == doctest::Approx(l2.item()).epsilon(1e-15));
  }
  SUBCASE("value equals the mean of the two directional losses") {
    auto l = symmetrized_pair_loss(oa, ob, ta, tb, 0.7);
    double manual = 0;
    for (int i = 0; i < n; ++i) manual += nce_row(row_of(oa, i), tb, i, 0.7);
    for (int i = 0; i < n; ++i) manual += nce_row(row_of(ob, i), ta, i, 0.7);
    manual /= 2 * n;
    CHECK(l.item() == doctest::Approx(manual).epsilon(1e-12));
  }
  SUBCASE("one-image batch with identical views and branches is exactly zero") {
    auto z = unit_rows({1, d}, rng);
    auto l = symmetrized_pair_loss(z, z, z, z, 1.0);
    CHECK(l.item() == 0.0);  // single target: ln(1)
  }
  SUBCASE("batch mismatch rejected") {
    auto small = unit_rows({n - 1, d}, rng);
    CHECK_THROWS_AS(symmetrized_pair_loss(small, ob, ta, tb, 1.0), dim_error);
  }
}

TEST_CASE("fastmoco multi-pair loss") {
  Rng rng(3);
  const int n = 4, d = 8, k = 6;
  auto ca = unit_rows({n * k, d}, rng), cb = unit_rows({n * k, d}, rng);
  auto ta = unit_rows({n, d}, rng), tb = unit_rows({n, d}, rng);

  SUBCASE("k=1 equals symmetrized_pair_loss bitwise") {
    auto oa = unit_rows({n, d}, rng), ob = unit_rows({n, d}, rng);
    auto l1 = fastmoco_loss(oa, ob, ta, tb, 1, 0.9);
    auto l2 = symmetrized_pair_loss(oa, ob, ta, tb, 0.9);
    CHECK(l1.item() == l2.item());
  }
  SUBCASE("m=2, n=2 value equals the brute-force six-combination sum") {
    auto l = fastmoco_loss(ca, cb, ta, tb, k, 0.8);
    double manual = 0;
    for (int i = 0; i < n; ++i)
      for (int c = 0; c < k; ++c) manual += nce_row(row_of(ca, i * k + c), tb, i, 0.8);
    double manual_b = 0;
    for (int i = 0; i < n; ++i)
      for (int c = 0; c < k; ++c) manual_b += nce_row(row_of(cb, i * k + c), ta, i, 0.8);
    const double want = 0.5 * (manual / (n * k) + manual_b / (n * k));
    CHECK(l.item() == doctest::Approx(want).epsilon(1e-12));
  }
  SUBCASE("duplicating every combined sample leaves the mean unchanged") {
    std::vector<int> dup;
    for (int i = 0; i < n; ++i)
      for (int rep = 0; rep < 2; ++rep)
        for (int c = 0; c < k; ++c) dup.push_back(i * k + c);
    auto ca2 = select_rows(ca, dup);
    auto cb2 = select_rows(cb, dup);
    auto l1 = fastmoco_loss(ca, cb, ta, tb, k, 0.8);
    auto l2 = fastmoco_loss(ca2, cb2, ta, tb, 2 * k, 0.8);
    CHECK(l1.item() == doctest::Approx(l2.item()).epsilon(1e-12));
  }
  SUBCASE("same-view flag changes only the positive map") {
    auto l_same = fastmoco_loss(ca, cb, ta, tb, k, 0.8, true);
    auto l_manual_a = detail::directional_loss(ca, ta, k, 0.8);
    auto l_manual_b = detail::directional_loss(cb, tb, k, 0.8);
    CHECK(l_same.item() ==
          doctest::Approx(0.5 * (l_manual_a.item() + l_manual_b.item())).epsilon(1e-15));
    // flag off reproduces the cross-view loss bitwise
    CHECK(fastmoco_loss(ca, cb, ta, tb, k, 0.8, false).item() ==
          fastmoco_loss(ca, cb, ta, tb, k, 0.8).item());
  }
}

TEST_CASE("sec loss") {
  Rng rng(4);
  const int n = 3, d = 8, combos = 28;
  auto c = unit_rows({n * combos, d}, rng);
  auto ta = unit_rows({n, d}, rng), tb = unit_rows({n, d}, rng);

  SUBCASE("wrong combination count rejected") {
    CHECK_THROWS_AS(sec_loss(c, ta, tb, 27, 1.0), dim_error);
  }
  SUBCASE("identical target sets make both inner terms coincide") {
    auto l = sec_loss(c, ta, ta, combos, 1.0);
    auto one = detail::directional_loss(c, ta, combos, 1.0);
    CHECK(l.item() == doctest::Approx(one.item()).epsilon(1e-15));
  }
  SUBCASE("brute-force double loop equality") {
    auto l = sec_loss(c, ta, tb, combos, 0.6);
    double manual = 0;
    for (int i = 0; i < n; ++i)
      for (int cc = 0; cc < combos; ++cc) {
        manual += nce_row(row_of(c, i * combos + cc), ta, i, 0.6);
        manual += nce_row(row_of(c, i * combos + cc), tb, i, 0.6);
      }
    manual /= 2.0 * combos * n;
    CHECK(l.item() == doctest::Approx(manual).epsilon(1e-12));
  }
}

TEST_CASE("encode-only loss") {
  Rng rng(5);
  const int n = 3, d = 8;
  auto zp = unit_rows({4 * n, d}, rng);
  auto ta = unit_rows({n, d}, rng), tb = unit_rows({n, d}, rng);

  SUBCASE("patch count other than four rejected") {
    auto bad = unit_rows({3 * n, d}, rng);
    CHECK_THROWS_AS(encode_only_loss(bad, ta, tb, 1.0), dim_error);
  }
  SUBCASE("eight terms per image, weight 1/8, brute force") {
    auto l = encode_only_loss(zp, ta, tb, 0.7);
    double manual = 0;
    for (int i = 0; i < n; ++i)
      for (int p = 0; p < 4; ++p) {
        manual += nce_row(row_of(zp, i * 4 + p), ta, i, 0.7);
        manual += nce_row(row_of(zp, i * 4 + p), tb, i, 0.7);
      }
    manual /= 8.0 * n;
    CHECK(l.item() == doctest::Approx(manual).epsilon(1e-12));
  }
  SUBCASE("identical patches give identical per-term losses") {
    auto one = unit_rows({1, d}, rng);
    std::vector<int> rep(4, 0);
    auto same = select_rows(one, rep);  // 4 copies
    auto t1 = unit_rows({1, d}, rng);
    auto la = detail::directional_loss(same, t1, 4, 1.0);
    auto single = detail::directional_loss(select_rows(one, {0}), t1, 1, 1.0);
    CHECK(la.item() == doctest::Approx(single.item()).epsilon(1e-15));
  }
}

TEST_CASE("joint orthogonal rotation leaves losses unchanged") {
  Rng rng(6);
  const int n = 4, d = 16, k = 3;
  auto ca = unit_rows({n * k, d}, rng), cb = unit_rows({n * k, d}, rng);
  auto ta = unit_rows({n, d}, rng), tb = unit_rows({n, d}, rng);
  const double base = fastmoco_loss(ca, cb, ta, tb, k, 0.5).item();

  // random orthogonal matrix via Householder QR
  Eigen::MatrixXd g(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) g(i, j) = rng.normal();
  Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(g).householderQ();

  auto rotate = [&](const Tensor<double>& t) {
    auto out = Tensor<double>::zeros(t.shape());
    const int rows = t.dim(0);
    for (int r = 0; r < rows; ++r)
      for (int i = 0; i < d; ++i) {
        double acc = 0;
        for (int j = 0; j < d; ++j) acc += q(i, j) * t.vec()[static_cast<std::size_t>(r * d + j)];
        out.vec()[static_cast<std::size_t>(r * d + i)] = acc;
      }
    return out;
  };
  const double rotated = fastmoco_loss(rotate(ca), rotate(cb), rotate(ta), rotate(tb), k, 0.5)
                             .item();
  CHECK(std::abs(rotated - base) < 1e-6);
}
