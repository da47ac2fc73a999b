#pragma once

#include "fastmoco/conv.hpp"
#include "fastmoco/rng.hpp"
#include "fastmoco/tensor.hpp"

#include <array>
#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace fastmoco {

enum class ParamKind { kWeight, kNormOrBias, kBuffer };

template <typename S>
using ParamVisitor = std::function<void(const std::string&, Tensor<S>&, ParamKind)>;

/// Stop/resume marker for the pooled embedding (as opposed to a stage's
/// feature map).
inline constexpr int kFinalStage = 0;

namespace detail {

template <typename S>
void he_normal_fill(Tensor<S>& t, int fan_in, Rng& rng) {
  const double std = std::sqrt(2.0 / fan_in);
  for (auto& v : t.vec()) v = static_cast<S>(rng.normal() * std);
}

template <typename S>
void scaled_normal_fill(Tensor<S>& t, int fan_in, Rng& rng) {
  const double std = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (auto& v : t.vec()) v = static_cast<S>(rng.normal() * std);
}

}  // namespace detail

template <typename S>
struct Conv2dLayer {
  Tensor<S> w;  // OIHW
  int stride = 1;
  int pad = 0;

  static Conv2dLayer create(int out_ch, int in_ch, int k, int stride, int pad, Rng& rng,
                            bool trainable) {
    Conv2dLayer l;
    l.w = Tensor<S>::zeros({out_ch, in_ch, k, k});
    detail::he_normal_fill(l.w, in_ch * k * k, rng);
    l.w.set_requires_grad(trainable);
    l.stride = stride;
    l.pad = pad;
    return l;
  }

  Tensor<S> forward(const Tensor<S>& x) const { return conv2d(x, w, stride, pad); }

  void visit(const std::string& prefix, const ParamVisitor<S>& fn) {
    fn(prefix + ".w", w, ParamKind::kWeight);
  }
};

template <typename S>
struct BatchNormLayer {
  Tensor<S> gamma, beta, running_mean, running_var;

  static BatchNormLayer create(int channels, bool trainable) {
    BatchNormLayer l;
    l.gamma = Tensor<S>::full({channels}, S(1));
    l.beta = Tensor<S>::zeros({channels});
    l.running_mean = Tensor<S>::zeros({channels});
    l.running_var = Tensor<S>::full({channels}, S(1));
    l.gamma.set_requires_grad(trainable);
    l.beta.set_requires_grad(trainable);
    return l;
  }

  Tensor<S> forward(const Tensor<S>& x, bool training) {
    return batch_norm(x, gamma, beta, running_mean, running_var, training);
  }

  void visit(const std::string& prefix, const ParamVisitor<S>& fn) {
    fn(prefix + ".gamma", gamma, ParamKind::kNormOrBias);
    fn(prefix + ".beta", beta, ParamKind::kNormOrBias);
    fn(prefix + ".running_mean", running_mean, ParamKind::kBuffer);
    fn(prefix + ".running_var", running_var, ParamKind::kBuffer);
  }
};

template <typename S>
struct LinearLayer {
  Tensor<S> w;  // (out, in)
  Tensor<S> b;  // undefined when the layer has no bias

  static LinearLayer create(int out_dim, int in_dim, bool bias, Rng& rng, bool trainable) {
    LinearLayer l;
    l.w = Tensor<S>::zeros({out_dim, in_dim});
    detail::scaled_normal_fill(l.w, in_dim, rng);
    l.w.set_requires_grad(trainable);
    if (bias) {
      l.b = Tensor<S>::zeros({out_dim});
      const double bound = 1.0 / std::sqrt(static_cast<double>(in_dim));
      for (auto& v : l.b.vec()) v = static_cast<S>(rng.uniform(-bound, bound));
      l.b.set_requires_grad(trainable);
    }
    return l;
  }

  Tensor<S> forward(const Tensor<S>& x) const { return linear(x, w, b); }

  void visit(const std::string& prefix, const ParamVisitor<S>& fn) {
    fn(prefix + ".w", w, ParamKind::kWeight);
    if (b.defined()) fn(prefix + ".b", b, ParamKind::kNormOrBias);
  }
};

template <typename S>
struct ResidualBlock {
  Conv2dLayer<S> conv1, conv2;
  BatchNormLayer<S> bn1, bn2;
  bool has_down = false;
  Conv2dLayer<S> down_conv;
  BatchNormLayer<S> down_bn;

  static ResidualBlock create(int in_ch, int out_ch, int stride, Rng& rng, bool trainable) {
    ResidualBlock b;
    b.conv1 = Conv2dLayer<S>::create(out_ch, in_ch, 3, stride, 1, rng, trainable);
    b.bn1 = BatchNormLayer<S>::create(out_ch, trainable);
    b.conv2 = Conv2dLayer<S>::create(out_ch, out_ch, 3, 1, 1, rng, trainable);
    b.bn2 = BatchNormLayer<S>::create(out_ch, trainable);
    b.has_down = stride != 1 || in_ch != out_ch;
    if (b.has_down) {
      b.down_conv = Conv2dLayer<S>::create(out_ch, in_ch, 1, stride, 0, rng, trainable);
      b.down_bn = BatchNormLayer<S>::create(out_ch, trainable);
    }
    return b;
  }

  Tensor<S> forward(const Tensor<S>& x, bool training) {
    auto y = relu(bn1.forward(conv1.forward(x), training));
    y = bn2.forward(conv2.forward(y), training);
    auto skip = has_down ? down_bn.forward(down_conv.forward(x), training) : x;
    return relu(add(y, skip));
  }

  void visit(const std::string& prefix, const ParamVisitor<S>& fn) {
    conv1.visit(prefix + ".conv1", fn);
    bn1.visit(prefix + ".bn1", fn);
    conv2.visit(prefix + ".conv2", fn);
    bn2.visit(prefix + ".bn2", fn);
    if (has_down) {
      down_conv.visit(prefix + ".down.conv", fn);
      down_bn.visit(prefix + ".down.bn", fn);
    }
  }
};

struct EncoderDef {
  int stem_channels = 64;
  std::vector<int> stage_channels = {64, 128, 256};  // stride 2 at each stage entry
};

/// Small residual encoder: 3x3 stem at stride 1, then stages of two residual
/// blocks each, stride-2 at the stage entry, global average pool at the end.
/// For 32x32 input the stage outputs are 16x16, 8x8, 4x4 and the pooled
/// embedding has stage_channels.back() dimensions.
template <typename S>
struct Encoder {
  EncoderDef def;
  Conv2dLayer<S> stem_conv;
  BatchNormLayer<S> stem_bn;
  std::vector<std::array<ResidualBlock<S>, 2>> stages;

  static Encoder create(const EncoderDef& def, Rng& rng, bool trainable) {
    Encoder e;
    e.def = def;
    e.stem_conv = Conv2dLayer<S>::create(def.stem_channels, 3, 3, 1, 1, rng, trainable);
    e.stem_bn = BatchNormLayer<S>::create(def.stem_channels, trainable);
    int in_ch = def.stem_channels;
    for (int ch : def.stage_channels) {
      e.stages.push_back({ResidualBlock<S>::create(in_ch, ch, 2, rng, trainable),
                          ResidualBlock<S>::create(ch, ch, 1, rng, trainable)});
      in_ch = ch;
    }
    return e;
  }

  int num_stages() const { return static_cast<int>(stages.size()); }
  int embedding_dim() const { return def.stage_channels.back(); }

  /// Runs the encoder up to and including `stop_stage` (1-based); pass
  /// kFinalStage for the pooled embedding.
  Tensor<S> encode_staged(const Tensor<S>& x, int stop_stage, bool training) {
    check_stage(stop_stage);
    auto y = relu(stem_bn.forward(stem_conv.forward(x), training));
    for (int s = 1; s <= num_stages(); ++s) {
      y = stages[static_cast<std::size_t>(s - 1)][0].forward(y, training);
      y = stages[static_cast<std::size_t>(s - 1)][1].forward(y, training);
      if (stop_stage == s) return y;
    }
    return global_avg_pool(y);
  }

  /// Continues encoding from the output of `from_stage` to the pooled
  /// embedding; identical to an uninterrupted pass.
  Tensor<S> resume_encode(const Tensor<S>& feat, int from_stage, bool training) {
    check_stage(from_stage);
    if (from_stage == kFinalStage) return feat;
    auto y = feat;
    for (int s = from_stage + 1; s <= num_stages(); ++s) {
      y = stages[static_cast<std::size_t>(s - 1)][0].forward(y, training);
      y = stages[static_cast<std::size_t>(s - 1)][1].forward(y, training);
    }
    return global_avg_pool(y);
  }

  Tensor<S> forward(const Tensor<S>& x, bool training) {
    return encode_staged(x, kFinalStage, training);
  }

  void visit(const std::string& prefix, const ParamVisitor<S>& fn) {
    stem_conv.visit(prefix + "stem.conv", fn);
    stem_bn.visit(prefix + "stem.bn", fn);
    for (std::size_t s = 0; s < stages.size(); ++s) {
      const std::string sp = prefix + "stage" + std::to_string(s + 1);
      stages[s][0].visit(sp + ".block1", fn);
      stages[s][1].visit(sp + ".block2", fn);
    }
  }

 private:
  void check_stage(int stage) const {
    if (stage != kFinalStage && (stage < 1 || stage > num_stages()))
      throw dim_error("unknown encoder stage id " + std::to_string(stage));
  }
};

struct HeadDef {
  int embedding_dim = 256;
  int proj_hidden = 512;
  int contrast_dim = 128;
  int pred_hidden = 64;
};

/// Two-layer MLP head: fc (no bias) + norm + relu, then fc with bias and no
/// norm on the output.
template <typename S>
struct MlpHead {
  LinearLayer<S> fc1;
  BatchNormLayer<S> bn1;
  LinearLayer<S> fc2;

  static MlpHead create(int in_dim, int hidden, int out_dim, Rng& rng, bool trainable) {
    MlpHead h;
    h.fc1 = LinearLayer<S>::create(hidden, in_dim, /*bias=*/false, rng, trainable);
    h.bn1 = BatchNormLayer<S>::create(hidden, trainable);
    h.fc2 = LinearLayer<S>::create(out_dim, hidden, /*bias=*/true, rng, trainable);
    return h;
  }

  Tensor<S> forward(const Tensor<S>& x, bool training) {
    return fc2.forward(relu(bn1.forward(fc1.forward(x), training)));
  }

  void visit(const std::string& prefix, const ParamVisitor<S>& fn) {
    fc1.visit(prefix + "fc1", fn);
    bn1.visit(prefix + "bn1", fn);
    fc2.visit(prefix + "fc2", fn);
  }
};

/// Online branch (encoder f, projector g, predictor q) plus the EMA-updated
/// target branch (encoder, projector). The target never receives gradients.
template <typename S>
struct DualBranch {
  Encoder<S> online_encoder;
  MlpHead<S> online_projector;
  MlpHead<S> online_predictor;
  Encoder<S> target_encoder;
  MlpHead<S> target_projector;
  S ema_momentum = S(0.99);

  static DualBranch create(const EncoderDef& edef, const HeadDef& hdef, S alpha, Rng& rng) {
    DualBranch d;
    d.ema_momentum = alpha;
    d.online_encoder = Encoder<S>::create(edef, rng, /*trainable=*/true);
    d.online_projector =
        MlpHead<S>::create(hdef.embedding_dim, hdef.proj_hidden, hdef.contrast_dim, rng, true);
    d.online_predictor =
        MlpHead<S>::create(hdef.contrast_dim, hdef.pred_hidden, hdef.contrast_dim, rng, true);
    // Target starts as an exact copy of the online branch.
    Rng dummy(0);
    d.target_encoder = Encoder<S>::create(edef, dummy, /*trainable=*/false);
    d.target_projector =
        MlpHead<S>::create(hdef.embedding_dim, hdef.proj_hidden, hdef.contrast_dim, dummy, false);
    d.copy_online_to_target();
    return d;
  }

  /// (z_proj, z_pred) for online embeddings v.
  std::pair<Tensor<S>, Tensor<S>> project_predict(const Tensor<S>& v, bool training) {
    auto z_proj = online_projector.forward(v, training);
    auto z_pred = online_predictor.forward(z_proj, training);
    return {z_proj, z_pred};
  }

  Tensor<S> target_project(const Tensor<S>& v, bool training) {
    return target_projector.forward(v, training);
  }

  void visit_online(const ParamVisitor<S>& fn) {
    online_encoder.visit("online.encoder.", fn);
    online_projector.visit("online.projector.", fn);
    online_predictor.visit("online.predictor.", fn);
  }

  void visit_target(const ParamVisitor<S>& fn) {
    target_encoder.visit("target.encoder.", fn);
    target_projector.visit("target.projector.", fn);
  }

  void visit_all(const ParamVisitor<S>& fn) {
    visit_online(fn);
    visit_target(fn);
  }

  void copy_online_to_target() {
    zip_branches([](Tensor<S>& t, const Tensor<S>& o, ParamKind) { t.vec() = o.vec(); });
    ema_comp_.clear();
  }

  /// Target update: t <- alpha*t + (1-alpha)*o for every encoder/projector
  /// parameter (running stats included). No tape entries are created.
  /// Storage rounding is compensated (Kahan-style) so iterated updates track
  /// the closed-form interpolation to within an ulp even at f32.
  void ema_update() {
    const double a = static_cast<double>(ema_momentum);
    std::size_t ti = 0;
    zip_branches([&](Tensor<S>& t, const Tensor<S>& o, ParamKind) {
      if (ema_comp_.size() <= ti)
        ema_comp_.emplace_back(static_cast<std::size_t>(t.numel()), S(0));
      S* pt = t.data();
      const S* po = o.data();
      S* pc = ema_comp_[ti].data();
      for (std::int64_t i = 0; i < t.numel(); ++i) {
        const double y = a * pt[i] + (1.0 - a) * po[i] - pc[i];
        const S rounded = static_cast<S>(y);
        pc[i] = static_cast<S>(static_cast<double>(rounded) - y);
        pt[i] = rounded;
      }
      ++ti;
    });
  }

 private:
  std::vector<std::vector<S>> ema_comp_;  // per-tensor rounding compensation

  // Pairs target tensors with their online counterparts (predictor excluded).
  void zip_branches(const std::function<void(Tensor<S>&, const Tensor<S>&, ParamKind)>& fn) {
    std::vector<Tensor<S>*> online;
    std::vector<ParamKind> kinds;
    ParamVisitor<S> collect = [&](const std::string&, Tensor<S>& t, ParamKind k) {
      online.push_back(&t);
      kinds.push_back(k);
    };
    online_encoder.visit("", collect);
    online_projector.visit("", collect);
    std::size_t i = 0;
    ParamVisitor<S> apply = [&](const std::string&, Tensor<S>& t, ParamKind) {
      fn(t, *online[i], kinds[i]);
      ++i;
    };
    target_encoder.visit("", apply);
    target_projector.visit("", apply);
  }
};

}  // namespace fastmoco
