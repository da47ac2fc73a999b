#include "fastmoco/gradcheck.hpp"
#include "fastmoco/nn.hpp"

#include <doctest.h>

#include <cmath>
#include <set>

using namespace fastmoco;

namespace {

template <typename S>
Tensor<S> randn(Shape shape, Rng& rng) {
  auto t = Tensor<S>::zeros(shape);
  for (auto& v : t.vec()) v = static_cast<S>(rng.normal());
  return t;
}

template <typename S>
std::int64_t param_count(Encoder<S>& enc) {
  std::int64_t n = 0;
  enc.visit("", [&](const std::string&, Tensor<S>& t, ParamKind k) {
    if (k != ParamKind::kBuffer) n += t.numel();
  });
  return n;
}

}  // namespace

TEST_CASE("encoder shape contracts") {
  Rng rng(1);
  auto enc = Encoder<float>::create(EncoderDef{}, rng, true);
  CHECK(enc.embedding_dim() == 256);

  SUBCASE("patch batch to embeddings") {
    Rng r2(2);
    auto x = randn<float>({8, 3, 16, 16}, r2);
    auto emb = enc.encode_staged(x, kFinalStage, false);
    CHECK(emb.shape() == Shape{8, 256});
  }
  SUBCASE("stage feature maps for a 32x32 view") {
    Rng r2(3);
    auto x = randn<float>({2, 3, 32, 32}, r2);
    CHECK(enc.encode_staged(x, 1, false).shape() == Shape{2, 64, 16, 16});
    CHECK(enc.encode_staged(x, 2, false).shape() == Shape{2, 128, 8, 8});
    CHECK(enc.encode_staged(x, 3, false).shape() == Shape{2, 256, 4, 4});
  }
  SUBCASE("unknown stage id") {
    Rng r2(4);
    auto x = randn<float>({1, 3, 32, 32}, r2);
    CHECK_THROWS_AS(enc.encode_staged(x, 7, false), dim_error);
  }
  SUBCASE("eval mode is deterministic") {
    Rng r2(5);
    auto x = randn<float>({2, 3, 32, 32}, r2);
    auto a = enc.forward(x, false);
    auto b = enc.forward(x, false);
    CHECK(a.vec() == b.vec());
  }
}

TEST_CASE("split-resume identity at every stage") {
  Rng rng(6);
  auto enc = Encoder<double>::create(EncoderDef{}, rng, true);
  Rng r2(7);
  auto x = randn<double>({2, 3, 32, 32}, r2);
  auto full = enc.encode_staged(x, kFinalStage, false);
  for (int s = 1; s <= enc.num_stages(); ++s) {
    auto feat = enc.encode_staged(x, s, false);
    auto resumed = enc.resume_encode(feat, s, false);
    CHECK(resumed.vec() == full.vec());  // bitwise
  }
  SUBCASE("stitched stage-2 map resumes to an embedding") {
    auto feat = enc.encode_staged(x, 2, false);
    auto wide = concat(feat, feat, 3);  // 128 x 8 x 16
    auto emb = enc.resume_encode(wide, 2, false);
    CHECK(emb.shape() == Shape{2, 256});
  }
}

TEST_CASE("gradient flows through the resumed path") {
  Rng rng(8);
  auto enc = Encoder<double>::create(gradcheck_encoder_def(), rng, true);
  Rng r2(9);
  auto x = randn<double>({2, 3, 8, 8}, r2);
  std::vector<Tensor<double>*> params;
  std::vector<Tensor<double>*> state;
  enc.visit("", [&](const std::string&, Tensor<double>& t, ParamKind k) {
    if (k == ParamKind::kBuffer)
      state.push_back(&t);
    else
      params.push_back(&t);
  });
  gradcheck_detail::Projector proj{&rng};
  auto rep = finite_diff_check(
      "resume_path", params,
      [&, proj]() mutable {
        auto feat = enc.encode_staged(x, 1, true);
        return proj(enc.resume_encode(feat, 1, true));
      },
      1e-4, state);
  CHECK(rep.pass);
}

TEST_CASE("project_predict shapes and linear pass-through") {
  Rng rng(10);
  auto model = DualBranch<double>::create(EncoderDef{}, HeadDef{}, 0.99, rng);
  Rng r2(11);
  auto v = randn<double>({4, 256}, r2);
  auto [zp, zq] = model.project_predict(v, true);
  CHECK(zp.shape() == Shape{4, 128});
  CHECK(zq.shape() == Shape{4, 128});

  SUBCASE("identity-weight linear layer passes values through") {
    LinearLayer<double> ident;
    ident.w = Tensor<double>::zeros({5, 5});
    for (int i = 0; i < 5; ++i) ident.w.vec()[static_cast<std::size_t>(i * 5 + i)] = 1.0;
    auto x = randn<double>({3, 5}, r2);
    CHECK(ident.forward(x).vec() == x.vec());
  }
}

TEST_CASE("dual branch construction") {
  Rng rng(12);
  auto model = DualBranch<float>::create(EncoderDef{}, HeadDef{}, 0.99f, rng);

  SUBCASE("parameter counts match between branches") {
    CHECK(param_count(model.online_encoder) == param_count(model.target_encoder));
  }
  SUBCASE("target equals online right after initialization") {
    Rng r2(13);
    auto x = randn<float>({2, 3, 32, 32}, r2);
    auto vo = model.online_encoder.forward(x, false);
    auto vt = model.target_encoder.forward(x, false);
    CHECK(vo.vec() == vt.vec());
  }
  SUBCASE("target branch never requires grad") {
    model.visit_target([&](const std::string&, Tensor<float>& t, ParamKind) {
      CHECK_FALSE(t.requires_grad());
    });
  }
  SUBCASE("naming scheme") {
    std::set<std::string> names;
    model.visit_all(
        [&](const std::string& n, Tensor<float>&, ParamKind) { names.insert(n); });
    CHECK(names.count("online.encoder.stage2.block1.conv1.w") == 1);
    CHECK(names.count("online.encoder.stem.bn.gamma") == 1);
    CHECK(names.count("online.projector.fc1.w") == 1);
    CHECK(names.count("online.predictor.fc2.b") == 1);
    CHECK(names.count("target.encoder.stage3.block2.bn2.running_var") == 1);
    CHECK(names.count("target.predictor.fc1.w") == 0);  // no predictor on target
  }
}

TEST_CASE("ema_update") {
  Rng rng(14);
  auto model = DualBranch<float>::create(gradcheck_encoder_def(), gradcheck_head_def(), 0.99f, rng);

  SUBCASE("single step from 1 toward 0 gives alpha") {
    auto& t = model.target_encoder.stem_conv.w;
    auto& o = model.online_encoder.stem_conv.w;
    std::fill(t.vec().begin(), t.vec().end(), 1.0f);
    std::fill(o.vec().begin(), o.vec().end(), 0.0f);
    model.ema_update();
    CHECK(t.vec()[0] == doctest::Approx(0.99f));
  }
  SUBCASE("equal branches are a fixed point") {
    model.copy_online_to_target();
    auto before = model.target_encoder.stem_conv.w.vec();
    model.ema_update();
    CHECK(model.target_encoder.stem_conv.w.vec() == before);
  }
  SUBCASE("closed form over k steps, both alphas") {
    for (float alpha : {0.9f, 0.99f}) {
      Rng r2(15);
      auto m = DualBranch<float>::create(gradcheck_encoder_def(), gradcheck_head_def(), alpha, r2);
      // separate the branches, then hold online fixed
      auto& t = m.target_projector.fc2.w;
      auto& o = m.online_projector.fc2.w;
      std::fill(t.vec().begin(), t.vec().end(), 2.0f);
      std::fill(o.vec().begin(), o.vec().end(), 0.5f);
      const int k = 100;
      for (int i = 0; i < k; ++i) m.ema_update();
      const double expect = std::pow(alpha, k) * 2.0 + (1.0 - std::pow(alpha, k)) * 0.5;
      for (float v : t.vec()) CHECK(std::abs(v - expect) < 1e-6);
    }
  }
  SUBCASE("never touches online parameters, never records a tape") {
    auto before = model.online_encoder.stem_conv.w.vec();
    model.online_encoder.stem_conv.w.vec()[0] += 1.0f;  // make branches differ
    model.ema_update();
    CHECK(model.online_encoder.stem_conv.w.vec()[0] == before[0] + 1.0f);
    CHECK(model.target_encoder.stem_conv.w.is_leaf());
  }
}
