#pragma once

#include "fastmoco/loss.hpp"
#include "fastmoco/nn.hpp"
#include "fastmoco/patch.hpp"
#include "fastmoco/rng.hpp"
#include "fastmoco/tensor.hpp"

#include <functional>
#include <string>
#include <vector>

namespace fastmoco {

struct GradCheckReport {
  std::string name;
  double max_rel_err = 0;
  double tol = 0;
  bool pass = false;
};

/// Central finite differences (f64, h = 1e-5) against the recorded backward.
/// `f` must be a pure scalar function of the listed parameters; tensors in
/// `scratch_state` (e.g. batch-norm running stats) are snapshotted and
/// restored around every evaluation.
inline GradCheckReport finite_diff_check(
    const std::string& name, const std::vector<Tensor<double>*>& params,
    const std::function<Tensor<double>()>& f, double tol,
    const std::vector<Tensor<double>*>& scratch_state = {}, double h = 1e-5) {
  std::vector<std::vector<double>> saved;
  saved.reserve(scratch_state.size());
  for (auto* t : scratch_state) saved.push_back(t->vec());
  auto restore = [&] {
    for (std::size_t i = 0; i < scratch_state.size(); ++i) scratch_state[i]->vec() = saved[i];
  };

  for (auto* p : params) p->zero_grad();
  auto loss = f();
  backward(loss);
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (auto* p : params) analytic.push_back(p->grad());
  for (auto* p : params) p->zero_grad();
  restore();

  GradCheckReport rep{name, 0, tol, false};
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& vals = params[pi]->vec();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double v = vals[i];
      double fp, fm;
      {
        NoGradGuard ng;
        vals[i] = v + h;
        fp = f().item();
        restore();
        vals[i] = v - h;
        fm = f().item();
        restore();
        vals[i] = v;
      }
      const double fd = (fp - fm) / (2 * h);
      const double an = analytic[pi][i];
      const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-3});
      if (rel > rep.max_rel_err) rep.max_rel_err = rel;
    }
  }
  rep.pass = rep.max_rel_err < tol;
  return rep;
}

namespace gradcheck_detail {

inline Tensor<double> rand_t(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0,
                             bool grad = true) {
  auto t = Tensor<double>::zeros(shape);
  for (auto& v : t.vec()) v = rng.uniform(lo, hi);
  if (grad) t.set_requires_grad(true);
  return t;
}

/// Projects an op output to a scalar against a random tensor that is fixed
/// on first use, so repeated evaluations see the same function.
struct Projector {
  Rng* rng;
  Tensor<double> r;

  Tensor<double> operator()(const Tensor<double>& out) {
    if (!r.defined()) r = rand_t(out.shape(), *rng, -1.0, 1.0, false);
    return sum(mul(out, r));
  }
};

}  // namespace gradcheck_detail

/// Toy sizing for the end-to-end loss check: 4 images, 8x8 pixels, 2-stage
/// encoder, reduced heads.
inline EncoderDef gradcheck_encoder_def() {
  EncoderDef def;
  def.stem_channels = 4;
  def.stage_channels = {4, 8};
  return def;
}

inline HeadDef gradcheck_head_def() {
  HeadDef def;
  def.embedding_dim = 8;
  def.proj_hidden = 8;
  def.contrast_dim = 4;
  def.pred_hidden = 4;
  return def;
}

/// The whole finite-difference suite: every differentiable op plus the full
/// multi-pair loss through a toy dual branch.
inline std::vector<GradCheckReport> run_gradcheck_suite() {
  using gradcheck_detail::Projector;
  using gradcheck_detail::rand_t;
  std::vector<GradCheckReport> reports;
  Rng rng(20240901);
  const double tol_elem = 1e-5;
  const double tol_net = 1e-4;

  auto check_binary = [&](const std::string& name, auto op, Shape sa, Shape sb) {
    auto a = rand_t(sa, rng), b = rand_t(sb, rng);
    Projector proj{&rng};
    reports.push_back(
        finite_diff_check(name, {&a, &b}, [&, proj]() mutable { return proj(op(a, b)); },
                          tol_elem));
  };

  check_binary("add", [](auto& a, auto& b) { return add(a, b); }, {3, 4}, {3, 4});
  check_binary("sub", [](auto& a, auto& b) { return sub(a, b); }, {3, 4}, {3, 4});
  check_binary("mul", [](auto& a, auto& b) { return mul(a, b); }, {3, 4}, {3, 4});
  check_binary("matmul", [](auto& a, auto& b) { return matmul(a, b); }, {3, 4}, {4, 2});
  check_binary("matmul_nt", [](auto& a, auto& b) { return matmul_nt(a, b); }, {3, 4}, {5, 4});
  check_binary("concat_h", [](auto& a, auto& b) { return concat(a, b, 2); }, {2, 3, 4, 4},
               {2, 3, 4, 4});
  check_binary("concat_w", [](auto& a, auto& b) { return concat(a, b, 3); }, {2, 3, 4, 4},
               {2, 3, 4, 4});
  check_binary("concat_rows", [](auto& a, auto& b) { return concat_rows(a, b); }, {3, 5}, {2, 5});

  {
    auto a = rand_t({3, 4}, rng);
    Projector proj{&rng};
    reports.push_back(finite_diff_check(
        "mul_scalar", {&a}, [&, proj]() mutable { return proj(mul_scalar(a, 1.7)); }, tol_elem));
  }
  {
    // keep inputs away from the relu kink
    auto a = rand_t({4, 5}, rng);
    for (auto& v : a.vec()) v += (v >= 0 ? 0.2 : -0.2);
    Projector proj{&rng};
    reports.push_back(finite_diff_check("relu", {&a},
                                        [&, proj]() mutable { return proj(relu(a)); }, tol_elem));
  }
  {
    auto a = rand_t({3, 4}, rng);
    Projector proj{&rng};
    reports.push_back(finite_diff_check("exp", {&a},
                                        [&, proj]() mutable { return proj(exp(a)); }, tol_elem));
  }
  {
    auto a = rand_t({3, 4}, rng, 0.2, 2.0);
    Projector proj{&rng};
    reports.push_back(finite_diff_check("log", {&a},
                                        [&, proj]() mutable { return proj(log(a)); }, tol_elem));
  }
  {
    auto a = rand_t({3, 7}, rng);
    reports.push_back(finite_diff_check("mean", {&a}, [&] { return mean(a); }, tol_elem));
  }
  {
    auto a = rand_t({2, 6}, rng);
    reports.push_back(finite_diff_check("sum", {&a}, [&] { return sum(a); }, tol_elem));
  }
  {
    // separate the operands so the argmax never flips under perturbation
    auto a = rand_t({3, 4}, rng), b = rand_t({3, 4}, rng);
    for (std::size_t i = 0; i < a.vec().size(); ++i)
      if (std::abs(a.vec()[i] - b.vec()[i]) < 0.2) a.vec()[i] += 0.4;
    Projector proj{&rng};
    reports.push_back(finite_diff_check(
        "max_elementwise", {&a, &b},
        [&, proj]() mutable { return proj(max_elementwise(a, b)); }, tol_elem));
  }
  {
    auto x = rand_t({4, 5}, rng), w = rand_t({3, 5}, rng), b = rand_t({3}, rng);
    Projector proj{&rng};
    reports.push_back(finite_diff_check(
        "linear", {&x, &w, &b}, [&, proj]() mutable { return proj(linear(x, w, b)); }, tol_elem));
  }
  {
    auto x = rand_t({2, 3, 8, 8}, rng), w = rand_t({4, 3, 3, 3}, rng);
    Projector proj{&rng};
    reports.push_back(finite_diff_check(
        "conv2d_s1p1", {&x, &w}, [&, proj]() mutable { return proj(conv2d(x, w, 1, 1)); },
        tol_elem));
  }
  {
    auto x = rand_t({2, 3, 8, 8}, rng), w = rand_t({4, 3, 3, 3}, rng);
    Projector proj{&rng};
    reports.push_back(finite_diff_check(
        "conv2d_s2p1", {&x, &w}, [&, proj]() mutable { return proj(conv2d(x, w, 2, 1)); },
        tol_elem));
  }
  {
    auto x = rand_t({1, 2, 5, 7}, rng), w = rand_t({3, 2, 3, 3}, rng);
    Projector proj{&rng};
    reports.push_back(finite_diff_check(
        "conv2d_rect", {&x, &w}, [&, proj]() mutable { return proj(conv2d(x, w, 2, 1)); },
        tol_elem));
  }
  {
    auto x = rand_t({3, 4, 4, 4}, rng);
    auto gamma = rand_t({4}, rng, 0.5, 1.5);
    auto beta = rand_t({4}, rng, -0.5, 0.5);
    auto rm = Tensor<double>::zeros({4});
    auto rv = Tensor<double>::full({4}, 1.0);
    Projector p1{&rng}, p2{&rng};
    reports.push_back(finite_diff_check(
        "batch_norm_train", {&x, &gamma, &beta},
        [&, p1]() mutable { return p1(batch_norm(x, gamma, beta, rm, rv, true)); }, tol_elem,
        {&rm, &rv}));
    reports.push_back(finite_diff_check(
        "batch_norm_infer", {&x, &gamma, &beta},
        [&, p2]() mutable { return p2(batch_norm(x, gamma, beta, rm, rv, false)); }, tol_elem,
        {&rm, &rv}));
  }
  {
    auto x = rand_t({6, 5}, rng);
    auto gamma = rand_t({5}, rng, 0.5, 1.5);
    auto beta = rand_t({5}, rng, -0.5, 0.5);
    auto rm = Tensor<double>::zeros({5});
    auto rv = Tensor<double>::full({5}, 1.0);
    Projector proj{&rng};
    reports.push_back(finite_diff_check(
        "batch_norm_1d", {&x, &gamma, &beta},
        [&, proj]() mutable { return proj(batch_norm(x, gamma, beta, rm, rv, true)); }, tol_elem,
        {&rm, &rv}));
  }
  {
    auto x = rand_t({2, 3, 4, 4}, rng);
    Projector proj{&rng};
    reports.push_back(finite_diff_check(
        "global_avg_pool", {&x}, [&, proj]() mutable { return proj(global_avg_pool(x)); },
        tol_elem));
  }
  {
    auto x = rand_t({4, 6}, rng);
    for (auto& v : x.vec()) v += (v >= 0 ? 0.5 : -0.5);
    Projector proj{&rng};
    // composition through normalization gets the looser bound
    reports.push_back(finite_diff_check(
        "l2_normalize", {&x}, [&, proj]() mutable { return proj(l2_normalize(x)); },
        1e-4));
  }
  {
    auto logits = rand_t({5, 7}, rng);
    const std::vector<int> labels = {0, 3, 6, 2, 1};
    reports.push_back(finite_diff_check(
        "softmax_cross_entropy", {&logits},
        [&] { return softmax_cross_entropy(logits, labels); }, tol_elem));
  }
  {
    auto x = rand_t({2, 3, 6, 6}, rng);
    Projector proj{&rng};
    reports.push_back(finite_diff_check(
        "crop", {&x}, [&, proj]() mutable { return proj(crop(x, 1, 4, 2, 3)); }, tol_elem));
  }
  {
    auto x = rand_t({5, 4}, rng);
    Projector proj{&rng};
    reports.push_back(finite_diff_check(
        "select_rows", {&x}, [&, proj]() mutable { return proj(select_rows(x, {3, 0, 3, 1})); },
        tol_elem));
  }
  {
    auto x = rand_t({5, 6}, rng);
    Projector proj{&rng};
    reports.push_back(finite_diff_check(
        "reshape", {&x}, [&, proj]() mutable { return proj(reshape(x, {3, 10})); }, tol_elem));
  }
  {
    auto x = rand_t({2, 3, 4, 4}, rng);
    Projector proj{&rng};
    reports.push_back(finite_diff_check(
        "divide", {&x}, [&, proj]() mutable { return proj(divide(x, 2)); }, tol_elem));
  }
  {
    auto v = rand_t({6, 5}, rng);
    Projector proj{&rng};
    reports.push_back(finite_diff_check(
        "combine_rows", {&v},
        [&, proj]() mutable {
          return proj(combine_rows(v, {{0, 1}, {2, 3}, {4, 5}, {0, 5}},
                                   {{0.5, 0.5}, {0.5, 0.5}, {0.5, 0.5}, {0.7, 0.3}}));
        },
        tol_elem));
  }
  {
    auto v = rand_t({6, 5}, rng);
    for (std::size_t i = 0; i < v.vec().size(); ++i)
      v.vec()[i] += 0.3 * static_cast<double>(i % 7);
    Projector proj{&rng};
    reports.push_back(finite_diff_check(
        "combine_rows_max", {&v},
        [&, proj]() mutable { return proj(combine_rows_max(v, {{0, 1}, {2, 5}})); }, tol_elem));
  }
  {
    auto patches = rand_t({8, 2, 4, 4}, rng);
    Projector proj{&rng};
    reports.push_back(finite_diff_check(
        "montage_roundtrip", {&patches},
        [&, proj]() mutable {
          Rng r2(7);  // same shuffle every evaluation
          auto [mt, pl] = montage_assemble(patches, r2);
          return proj(montage_disassemble(mt, pl));
        },
        tol_elem));
  }
  {
    // full multi-pair loss through a toy dual branch (m=2, n=2, all pairs)
    Rng init(99);
    auto model =
        DualBranch<double>::create(gradcheck_encoder_def(), gradcheck_head_def(), 0.99, init);
    auto xa = rand_t({4, 3, 8, 8}, rng, 0.0, 1.0, false);
    auto xb = rand_t({4, 3, 8, 8}, rng, 0.0, 1.0, false);
    std::vector<Tensor<double>*> params;
    std::vector<Tensor<double>*> state;
    model.visit_online([&](const std::string&, Tensor<double>& t, ParamKind kind) {
      if (kind == ParamKind::kBuffer)
        state.push_back(&t);
      else
        params.push_back(&t);
    });
    model.visit_target([&](const std::string&, Tensor<double>& t, ParamKind kind) {
      if (kind == ParamKind::kBuffer) state.push_back(&t);
    });
    const auto subsets = enumerate_combinations(2, 2);
    auto f = [&] {
      auto one_view = [&](const Tensor<double>& x) {
        auto patches = divide(x, 2);
        auto v = model.online_encoder.forward(patches, true);
        std::vector<std::vector<int>> gsub;
        std::vector<std::vector<double>> w;
        for (int i = 0; i < 4; ++i)
          for (const auto& sub : subsets) {
            gsub.push_back({4 * i + sub[0], 4 * i + sub[1]});
            w.push_back({0.5, 0.5});
          }
        auto c = combine_rows(v, gsub, w);
        return l2_normalize(model.project_predict(c, true).second);
      };
      auto ca = one_view(xa);
      auto cb = one_view(xb);
      Tensor<double> ta, tb;
      {
        NoGradGuard g;
        ta = l2_normalize(
            model.target_projector.forward(model.target_encoder.forward(xa, true), true));
        tb = l2_normalize(
            model.target_projector.forward(model.target_encoder.forward(xb, true), true));
      }
      return fastmoco_loss(ca, cb, ta, tb, 6, 1.0);
    };
    reports.push_back(finite_diff_check("fastmoco_loss_full_net", params, f, tol_net, state));
  }

  return reports;
}

}  // namespace fastmoco
