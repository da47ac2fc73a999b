#pragma once

#include "fastmoco/augment.hpp"
#include "fastmoco/checkpoint.hpp"
#include "fastmoco/config.hpp"
#include "fastmoco/data.hpp"
#include "fastmoco/eval.hpp"
#include "fastmoco/loss.hpp"
#include "fastmoco/nn.hpp"
#include "fastmoco/patch.hpp"
#include "fastmoco/util.hpp"

#include <chrono>
#include <cstdio>
#include <string>
#include <vector>

namespace fastmoco {

struct TrainAbort : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Schedule and optimizer
// ---------------------------------------------------------------------------

/// Linear ramp from warmup_start to lr0 over warmup_steps, then cosine decay
/// from lr0 to 0 at `total`.
inline double cosine_lr(long step, long total, double lr0, long warmup_steps,
                        double warmup_start) {
  if (total <= 0) throw std::invalid_argument("cosine_lr: total must be positive");
  if (step < 0 || step > total) throw std::invalid_argument("cosine_lr: step out of range");
  if (step < warmup_steps)
    return warmup_start + (lr0 - warmup_start) * static_cast<double>(step) / warmup_steps;
  const long denom = total - warmup_steps;
  const double t = denom > 0 ? static_cast<double>(step - warmup_steps) / denom : 1.0;
  return lr0 * 0.5 * (1.0 + std::cos(M_PI * t));
}

template <typename S>
struct ParamRef {
  std::string name;
  Tensor<S>* tensor;
  bool decay;  // weight decay applies
};

template <typename S>
std::vector<ParamRef<S>> trainable_params(DualBranch<S>& model, bool wd_exclude_norm_bias) {
  std::vector<ParamRef<S>> out;
  model.visit_online([&](const std::string& name, Tensor<S>& t, ParamKind kind) {
    if (kind == ParamKind::kBuffer) return;
    const bool decay = kind == ParamKind::kWeight || !wd_exclude_norm_bias;
    out.push_back({name, &t, decay});
  });
  return out;
}

template <typename S>
struct OptimState {
  std::vector<std::vector<S>> momentum;

  static OptimState zeros_like(const std::vector<ParamRef<S>>& params) {
    OptimState st;
    st.momentum.reserve(params.size());
    for (const auto& p : params)
      st.momentum.emplace_back(static_cast<std::size_t>(p.tensor->numel()), S(0));
    return st;
  }
};

template <typename S>
double global_grad_norm(const std::vector<ParamRef<S>>& params) {
  double sq = 0;
  for (const auto& p : params)
    for (S g : p.tensor->grad()) sq += static_cast<double>(g) * g;
  return std::sqrt(sq);
}

/// Scales all gradients by clip/norm when the global norm exceeds clip;
/// never increases the norm, never changes direction.
template <typename S>
void clip_gradients(const std::vector<ParamRef<S>>& params, double clip, double norm) {
  if (clip <= 0 || norm <= clip) return;
  const S scale = static_cast<S>(clip / norm);
  for (const auto& p : params)
    for (S& g : p.tensor->grad()) g *= scale;
}

/// SGD with momentum and L2 weight decay folded into the gradient:
/// g <- g + wd*theta, m <- mu*m + g, theta <- theta - lr*m.
template <typename S>
void sgd_step(const std::vector<ParamRef<S>>& params, OptimState<S>& state, double lr,
              double mu, double wd) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params[i];
    S* theta = p.tensor->data();
    const std::vector<S>& grad = p.tensor->grad();
    std::vector<S>& m = state.momentum[i];
    const S wd_s = p.decay ? static_cast<S>(wd) : S(0);
    for (std::size_t j = 0; j < grad.size(); ++j) {
      if (!std::isfinite(grad[j]))
        throw TrainAbort("NaN/Inf gradient in parameter " + p.name);
      const S g = grad[j] + wd_s * theta[j];
      m[j] = static_cast<S>(mu) * m[j] + g;
      theta[j] -= static_cast<S>(lr) * m[j];
    }
  }
}

// ---------------------------------------------------------------------------
// Model snapshot / restore
// ---------------------------------------------------------------------------

namespace detail {

template <typename S>
void ck_add(Checkpoint& ck, const std::string& name, const Tensor<S>& t) {
  std::vector<std::uint32_t> dims;
  for (int d : t.shape()) dims.push_back(static_cast<std::uint32_t>(d));
  if constexpr (std::is_same_v<S, float>)
    ck.add_f32(name, std::move(dims), t.data());
  else
    ck.add_f64(name, std::move(dims), t.data());
}

}  // namespace detail

template <typename S>
Checkpoint snapshot_model(DualBranch<S>& model, std::uint64_t step, std::uint64_t hash) {
  Checkpoint ck;
  model.visit_all([&](const std::string& name, Tensor<S>& t, ParamKind) {
    detail::ck_add(ck, name, t);
  });
  ck.add_u64("meta.step", step);
  ck.add_u64("meta.config_hash", hash);
  return ck;
}

template <typename S>
void restore_tensor(const Checkpoint& ck, const std::string& name, Tensor<S>& t) {
  const auto* e = ck.find(name);
  if (!e) throw checkpoint_error("checkpoint is missing entry " + name);
  if (e->count() != t.numel())
    throw checkpoint_error("checkpoint entry " + name + " has " + std::to_string(e->count()) +
                           " values, model expects " + std::to_string(t.numel()));
  t.vec() = ck.values_as<S>(*e);
}

template <typename S>
void restore_model(DualBranch<S>& model, const Checkpoint& ck) {
  model.visit_all([&](const std::string& name, Tensor<S>& t, ParamKind) {
    restore_tensor(ck, name, t);
  });
}

template <typename S>
void restore_encoder(Encoder<S>& enc, const Checkpoint& ck,
                     const std::string& prefix = "online.encoder.") {
  enc.visit(prefix, [&](const std::string& name, Tensor<S>& t, ParamKind) {
    restore_tensor(ck, name, t);
  });
}

// ---------------------------------------------------------------------------
// Pipeline forward passes
// ---------------------------------------------------------------------------

enum class CombineStageId { kInput, kS1, kS2, kS3, kFinal, kProj, kPred };

inline CombineStageId parse_stage(const std::string& s) {
  if (s == "input") return CombineStageId::kInput;
  if (s == "stage1") return CombineStageId::kS1;
  if (s == "stage2") return CombineStageId::kS2;
  if (s == "stage3") return CombineStageId::kS3;
  if (s == "final") return CombineStageId::kFinal;
  if (s == "proj") return CombineStageId::kProj;
  if (s == "pred") return CombineStageId::kPred;
  throw config_error("unknown combine_stage '" + s + "'");
}

template <typename S>
struct StepOutput {
  Tensor<S> loss;
  Tensor<S> probe_vectors;  // normalized online vectors of view a, detached use only
  long positive_pairs = 0;
};

/// Drives one training run: owns batch assembly, the per-pipeline forward,
/// and the optimizer/EMA update cycle.
template <typename S>
class Trainer {
 public:
  Trainer(const RunConfig& cfg, const Dataset& data, DualBranch<S>& model)
      : cfg_(cfg),
        data_(data),
        model_(model),
        stats_(cfg.dataset == "cifar10" ? cifar_stats() : synth_stats()),
        stage_(parse_stage(cfg.combine_stage)),
        params_(trainable_params(model, cfg.wd_exclude_norm_bias)),
        optim_(OptimState<S>::zeros_like(params_)) {
    if (cfg_.pipeline == "divide_combine_encode") stage_ = CombineStageId::kInput;
    plan_subsets_ = resolve_subsets();
  }

  const std::vector<ParamRef<S>>& params() const { return params_; }

  /// Forward + loss for the batch of dataset indices; no parameter update.
  StepOutput<S> forward_batch(const std::vector<int>& indices, int epoch, long step) {
    if (cfg_.pipeline == "sec") return forward_sec(indices, epoch);
    if (cfg_.pipeline == "encode_only") return forward_encode_only(indices, epoch);
    if (cfg_.pipeline == "montage") return forward_montage(indices, epoch, step);
    if (cfg_.pipeline == "sample_combine_encode") return forward_sce(indices, epoch);
    return forward_grid(indices, epoch, step);  // fastmoco / divide_combine_encode
  }

  /// One full optimization step (per-batch: forward, backward, clip, SGD,
  /// EMA). Returns the step's metrics inputs.
  struct StepStats {
    double loss, grad_norm, embedding_std;
    long positive_pairs;
  };
  StepStats train_step(const std::vector<int>& indices, int epoch, long step, double lr) {
    auto out = forward_batch(indices, epoch, step);
    const double loss_value = static_cast<double>(out.loss.item());
    if (!std::isfinite(loss_value)) throw TrainAbort(nan_diagnostic(indices, epoch, step));
    backward(out.loss);
    const double norm = global_grad_norm(params_);
    if (!std::isfinite(norm)) throw TrainAbort(nan_diagnostic(indices, epoch, step));
    clip_gradients(params_, cfg_.clip_norm, norm);
    sgd_step(params_, optim_, lr, cfg_.sgd_momentum, cfg_.weight_decay);
    for (auto& p : params_) p.tensor->zero_grad();
    model_.ema_update();
    const double emb_std = collapse_metric(out.probe_vectors);
    return {loss_value, norm, emb_std, out.positive_pairs};
  }

  /// Normalized target vectors for a batch of augmented views.
  Tensor<S> target_vectors(const Tensor<S>& x) {
    NoGradGuard ng;
    const bool train_bn = cfg_.target_bn_mode == "train";
    auto v = model_.target_encoder.forward(x, train_bn);
    auto z = model_.target_projector.forward(v, train_bn);
    return l2_normalize(z);
  }

  Tensor<S> make_views(const std::vector<int>& indices, int epoch, std::uint64_t view_tag,
                       int out_size) {
    std::vector<std::vector<double>> views;
    views.reserve(indices.size());
    for (int idx : indices) {
      auto img = record_to_float(data_.records[static_cast<std::size_t>(idx)]);
      Rng rng = Rng::substream(cfg_.seed, {kStreamAugment, static_cast<std::uint64_t>(epoch),
                                           static_cast<std::uint64_t>(idx), view_tag});
      views.push_back(augment_view(img, kImageSide, kImageSide, out_size, aug_, rng));
    }
    return views_to_tensor<S>(views, out_size, stats_);
  }

 private:
  // per-image combination plan over local patch indices 0..m^2-1
  std::vector<std::vector<int>> resolve_subsets() {
    const int m = cfg_.divide_m, total = m * m;
    if (cfg_.combine_op == "weighted" || cfg_.combine_op == "beta") {
      // ordered pair cycle: every patch appears once on each side
      std::vector<std::vector<int>> subs;
      for (int i = 0; i < total; ++i) subs.push_back({i, (i + 1) % total});
      return subs;
    }
    return equal_use_subsets(m, cfg_.combine_n, resolved_pairs_used(cfg_));
  }

  std::string nan_diagnostic(const std::vector<int>& indices, int epoch, long step) const {
    std::string idxs;
    for (int i : indices) idxs += (idxs.empty() ? "" : ",") + std::to_string(i);
    return "non-finite loss/grad at epoch " + std::to_string(epoch) + " step " +
           std::to_string(step) + "; batch indices [" + idxs + "]";
  }

  // ---- embedding-level combine over per-image row blocks -------------------

  Tensor<S> combine_blocks(const Tensor<S>& v, int rows_per_image, int n_images, int epoch,
                           long step, std::uint64_t view_tag) {
    std::vector<std::vector<int>> subsets;
    subsets.reserve(static_cast<std::size_t>(n_images) * plan_subsets_.size());
    for (int i = 0; i < n_images; ++i)
      for (const auto& sub : plan_subsets_) {
        std::vector<int> gsub;
        gsub.reserve(sub.size());
        for (int p : sub) gsub.push_back(i * rows_per_image + p);
        subsets.push_back(std::move(gsub));
      }
    if (cfg_.combine_op == "max") return combine_rows_max(v, subsets);
    std::vector<std::vector<S>> weights;
    weights.reserve(subsets.size());
    if (cfg_.combine_op == "mean") {
      for (const auto& sub : subsets)
        weights.emplace_back(sub.size(), S(1) / static_cast<S>(sub.size()));
    } else if (cfg_.combine_op == "weighted") {
      const S g = static_cast<S>(cfg_.weighted_gamma);
      for (std::size_t i = 0; i < subsets.size(); ++i) weights.push_back({g, S(1) - g});
    } else {  // beta: one draw per combination per step
      Rng rng = Rng::substream(cfg_.seed, {kStreamCombine, static_cast<std::uint64_t>(epoch),
                                           static_cast<std::uint64_t>(step), view_tag});
      for (std::size_t i = 0; i < subsets.size(); ++i) {
        const S g = static_cast<S>(rng.beta(cfg_.beta_alpha, cfg_.beta_alpha));
        weights.push_back({g, S(1) - g});
      }
    }
    return combine_rows(v, subsets, weights);
  }

  // ---- grid pipelines (fastmoco, divide_combine_encode) --------------------

  /// Normalized online vectors for one view, (N*k, d); sets k_out.
  Tensor<S> grid_online(const Tensor<S>& x, int epoch, long step, std::uint64_t view_tag,
                        int* k_out) {
    const int m = cfg_.divide_m;
    const int n_images = x.dim(0);
    auto patches = divide(x, m);

    if (stage_ == CombineStageId::kFinal || stage_ == CombineStageId::kProj ||
        stage_ == CombineStageId::kPred) {
      auto v = model_.online_encoder.forward(patches, true);
      Tensor<S> out;
      if (stage_ == CombineStageId::kFinal) {
        auto c = combine_blocks(v, m * m, n_images, epoch, step, view_tag);
        out = model_.project_predict(c, true).second;
      } else if (stage_ == CombineStageId::kProj) {
        auto zp = model_.online_projector.forward(v, true);
        auto c = combine_blocks(zp, m * m, n_images, epoch, step, view_tag);
        out = model_.online_predictor.forward(c, true);
      } else {
        auto zq = model_.project_predict(v, true).second;
        out = combine_blocks(zq, m * m, n_images, epoch, step, view_tag);
      }
      *k_out = static_cast<int>(plan_subsets_.size());
      return l2_normalize(out);
    }

    // geometry-preserving combine (m == 2): stitch patches or feature maps
    const int sidx = stage_ == CombineStageId::kS1   ? 1
                     : stage_ == CombineStageId::kS2 ? 2
                                                     : 3;
    auto feats = stage_ == CombineStageId::kInput
                     ? patches
                     : model_.online_encoder.encode_staged(patches, sidx, true);
    Tensor<S> emb;
    if (cfg_.combine_n == 4) {
      std::vector<int> tl, tr, bl, br;
      for (int i = 0; i < n_images; ++i) {
        tl.push_back(4 * i);
        tr.push_back(4 * i + 1);
        bl.push_back(4 * i + 2);
        br.push_back(4 * i + 3);
      }
      auto quad = stitch_quad(select_rows(feats, tl), select_rows(feats, tr),
                              select_rows(feats, bl), select_rows(feats, br));
      emb = stage_ == CombineStageId::kInput
                ? model_.online_encoder.forward(quad, true)
                : model_.online_encoder.resume_encode(quad, sidx, true);
      *k_out = 1;
    } else {
      // two disjoint adjacent pairs per image; partition orientation is
      // drawn per image per epoch
      std::vector<int> h_images, v_images;
      for (int i = 0; i < n_images; ++i) {
        Rng rng = Rng::substream(cfg_.seed, {kStreamStitch, static_cast<std::uint64_t>(epoch),
                                             static_cast<std::uint64_t>(step), view_tag,
                                             static_cast<std::uint64_t>(i)});
        (rng.bernoulli(0.5) ? h_images : v_images).push_back(i);
      }
      auto stitched_embeddings = [&](const std::vector<int>& group, bool horizontal) {
        std::vector<int> first, second;
        for (int i : group) {
          if (horizontal) {  // (p0|p1), (p2|p3)
            first.push_back(4 * i);
            second.push_back(4 * i + 1);
            first.push_back(4 * i + 2);
            second.push_back(4 * i + 3);
          } else {  // (p0/p2), (p1/p3)
            first.push_back(4 * i);
            second.push_back(4 * i + 2);
            first.push_back(4 * i + 1);
            second.push_back(4 * i + 3);
          }
        }
        auto stitched = concat(select_rows(feats, first), select_rows(feats, second),
                               horizontal ? 3 : 2);
        return stage_ == CombineStageId::kInput
                   ? model_.online_encoder.forward(stitched, true)
                   : model_.online_encoder.resume_encode(stitched, sidx, true);
      };
      Tensor<S> all;
      if (h_images.empty()) {
        all = stitched_embeddings(v_images, false);
      } else if (v_images.empty()) {
        all = stitched_embeddings(h_images, true);
      } else {
        all = concat_rows(stitched_embeddings(h_images, true),
                          stitched_embeddings(v_images, false));
      }
      // back to image-major order
      std::vector<int> perm(static_cast<std::size_t>(2 * n_images));
      for (std::size_t j = 0; j < h_images.size(); ++j) {
        perm[static_cast<std::size_t>(2 * h_images[j])] = static_cast<int>(2 * j);
        perm[static_cast<std::size_t>(2 * h_images[j] + 1)] = static_cast<int>(2 * j + 1);
      }
      const int off = static_cast<int>(2 * h_images.size());
      for (std::size_t j = 0; j < v_images.size(); ++j) {
        perm[static_cast<std::size_t>(2 * v_images[j])] = off + static_cast<int>(2 * j);
        perm[static_cast<std::size_t>(2 * v_images[j] + 1)] = off + static_cast<int>(2 * j + 1);
      }
      emb = select_rows(all, perm);
      *k_out = 2;
    }
    return l2_normalize(model_.project_predict(emb, true).second);
  }

  StepOutput<S> forward_grid(const std::vector<int>& indices, int epoch, long step) {
    const int n = static_cast<int>(indices.size());
    auto xa = make_views(indices, epoch, 0, cfg_.image_size);
    auto xb = make_views(indices, epoch, 1, cfg_.image_size);
    int ka = 0, kb = 0;
    auto ca = grid_online(xa, epoch, step, 0, &ka);
    auto cb = grid_online(xb, epoch, step, 1, &kb);
    auto ta = target_vectors(xa);
    auto tb = target_vectors(xb);
    StepOutput<S> out;
    out.probe_vectors = ca.clone_detached();
    if (cfg_.multicrop_mode == "extra_full_crop") {
      auto xe = make_views(indices, epoch, 2, cfg_.image_size);
      auto ve = model_.online_encoder.forward(xe, true);
      auto ze = l2_normalize(model_.project_predict(ve, true).second);
      out.loss = fastmoco_loss_multicrop(ca, cb, ze, ta, tb, ka, static_cast<S>(cfg_.tau),
                                         cfg_.same_view_positive);
      out.positive_pairs = static_cast<long>(2 * n) * (ka + 1);
    } else {
      out.loss =
          fastmoco_loss(ca, cb, ta, tb, ka, static_cast<S>(cfg_.tau), cfg_.same_view_positive);
      out.positive_pairs = static_cast<long>(n) * (ka + kb);
    }
    return out;
  }

  // ---- independently sampled patch pipelines -------------------------------

  Tensor<S> patch_batch(const std::vector<int>& indices, int epoch, int count, int size,
                        std::uint64_t view_tag) {
    std::vector<std::vector<double>> views;
    views.reserve(indices.size() * static_cast<std::size_t>(count));
    for (int idx : indices) {
      auto img = record_to_float(data_.records[static_cast<std::size_t>(idx)]);
      auto patches = sample_patches_independent(img, kImageSide, kImageSide, count, size, aug_,
                                                cfg_.seed, static_cast<std::uint64_t>(epoch),
                                                static_cast<std::uint64_t>(idx), view_tag);
      for (auto& p : patches) views.push_back(std::move(p));
    }
    return views_to_tensor<S>(views, size, stats_);
  }

  StepOutput<S> forward_sec(const std::vector<int>& indices, int epoch) {
    const int n = static_cast<int>(indices.size());
    auto xa = make_views(indices, epoch, 0, cfg_.image_size);
    auto xb = make_views(indices, epoch, 1, cfg_.image_size);
    auto patches = patch_batch(indices, epoch, 8, cfg_.image_size / 2, 2);
    auto v = model_.online_encoder.forward(patches, true);
    // all 2-combinations of the 8 patch embeddings of each image
    auto pairs = enumerate_combinations_of(8, 2);
    std::vector<std::vector<int>> subsets;
    std::vector<std::vector<S>> weights;
    for (int i = 0; i < n; ++i)
      for (const auto& pr : pairs) {
        subsets.push_back({8 * i + pr[0], 8 * i + pr[1]});
        weights.push_back({S(0.5), S(0.5)});
      }
    auto c = combine_rows(v, subsets, weights);
    auto z = l2_normalize(model_.project_predict(c, true).second);
    auto ta = target_vectors(xa);
    auto tb = target_vectors(xb);
    StepOutput<S> out;
    out.probe_vectors = z.clone_detached();
    out.loss = sec_loss(z, ta, tb, static_cast<int>(pairs.size()), static_cast<S>(cfg_.tau));
    out.positive_pairs = static_cast<long>(n) * 2 * static_cast<long>(pairs.size());
    return out;
  }

  StepOutput<S> forward_encode_only(const std::vector<int>& indices, int epoch) {
    const int n = static_cast<int>(indices.size());
    // patch side scaled from the reference 158/224 ratio, rounded to even
    int psize = static_cast<int>(std::lround(cfg_.image_size * 158.0 / 224.0));
    if (psize % 2 != 0) --psize;
    auto xa = make_views(indices, epoch, 0, cfg_.image_size);
    auto xb = make_views(indices, epoch, 1, cfg_.image_size);
    auto patches = patch_batch(indices, epoch, 4, psize, 2);
    auto v = model_.online_encoder.forward(patches, true);
    auto z = l2_normalize(model_.project_predict(v, true).second);
    auto ta = target_vectors(xa);
    auto tb = target_vectors(xb);
    StepOutput<S> out;
    out.probe_vectors = z.clone_detached();
    out.loss = encode_only_loss(z, ta, tb, static_cast<S>(cfg_.tau));
    out.positive_pairs = static_cast<long>(n) * 8;
    return out;
  }

  StepOutput<S> forward_sce(const std::vector<int>& indices, int epoch) {
    const int n = static_cast<int>(indices.size());
    auto xa = make_views(indices, epoch, 0, cfg_.image_size);
    auto xb = make_views(indices, epoch, 1, cfg_.image_size);
    auto ta = target_vectors(xa);
    auto tb = target_vectors(xb);

    auto one_side = [&](std::uint64_t view_tag) {
      auto patches = patch_batch(indices, epoch, 4, cfg_.image_size / 2, 10 + view_tag);
      // stitch independent patches pairwise; orientation is arbitrary, drawn
      // per image
      std::vector<int> h_images, v_images;
      for (int i = 0; i < n; ++i) {
        Rng rng = Rng::substream(cfg_.seed, {kStreamStitch, static_cast<std::uint64_t>(epoch),
                                             static_cast<std::uint64_t>(indices[static_cast<std::size_t>(i)]),
                                             view_tag});
        (rng.bernoulli(0.5) ? h_images : v_images).push_back(i);
      }
      auto stitched_embeddings = [&](const std::vector<int>& group, bool horizontal) {
        std::vector<int> first, second;
        for (int i : group) {
          first.push_back(4 * i);
          second.push_back(4 * i + 1);
          first.push_back(4 * i + 2);
          second.push_back(4 * i + 3);
        }
        auto stitched = concat(select_rows(patches, first), select_rows(patches, second),
                               horizontal ? 3 : 2);
        return model_.online_encoder.forward(stitched, true);
      };
      Tensor<S> all;
      if (h_images.empty()) {
        all = stitched_embeddings(v_images, false);
      } else if (v_images.empty()) {
        all = stitched_embeddings(h_images, true);
      } else {
        all = concat_rows(stitched_embeddings(h_images, true),
                          stitched_embeddings(v_images, false));
      }
      std::vector<int> perm(static_cast<std::size_t>(2 * n));
      for (std::size_t j = 0; j < h_images.size(); ++j) {
        perm[static_cast<std::size_t>(2 * h_images[j])] = static_cast<int>(2 * j);
        perm[static_cast<std::size_t>(2 * h_images[j] + 1)] = static_cast<int>(2 * j + 1);
      }
      const int off = static_cast<int>(2 * h_images.size());
      for (std::size_t j = 0; j < v_images.size(); ++j) {
        perm[static_cast<std::size_t>(2 * v_images[j])] = off + static_cast<int>(2 * j);
        perm[static_cast<std::size_t>(2 * v_images[j] + 1)] = off + static_cast<int>(2 * j + 1);
      }
      auto emb = select_rows(all, perm);
      return l2_normalize(model_.project_predict(emb, true).second);
    };

    auto ca = one_side(0);
    auto cb = one_side(1);
    StepOutput<S> out;
    out.probe_vectors = ca.clone_detached();
    out.loss = fastmoco_loss(ca, cb, ta, tb, 2, static_cast<S>(cfg_.tau), cfg_.same_view_positive);
    out.positive_pairs = static_cast<long>(n) * 4;
    return out;
  }

  StepOutput<S> forward_montage(const std::vector<int>& indices, int epoch, long step) {
    const int n = static_cast<int>(indices.size());
    auto xa = make_views(indices, epoch, 0, cfg_.image_size);
    auto xb = make_views(indices, epoch, 1, cfg_.image_size);
    auto ta = target_vectors(xa);
    auto tb = target_vectors(xb);

    const int last = model_.online_encoder.num_stages();
    auto montage_embeddings = [&](std::uint64_t group_tag) {
      auto patches = patch_batch(indices, epoch, 4, cfg_.image_size / 2, 20 + group_tag);
      Rng rng = Rng::substream(cfg_.seed, {kStreamMontage, static_cast<std::uint64_t>(epoch),
                                           static_cast<std::uint64_t>(step), group_tag});
      auto [montages, placement] = montage_assemble(patches, rng);
      auto fmap = model_.online_encoder.encode_staged(montages, last, true);
      auto per_patch = montage_disassemble(fmap, placement);
      return global_avg_pool(per_patch);  // (4N, D), original patch order
    };
    auto ea = montage_embeddings(0);
    auto eb = montage_embeddings(1);
    auto v = concat_rows(ea, eb);  // image i rows: {4i..4i+3} and {4n+4i..}

    auto pairs = enumerate_combinations_of(8, 2);
    std::vector<std::vector<int>> subsets;
    std::vector<std::vector<S>> weights;
    auto global_row = [&](int image, int local) {
      return local < 4 ? 4 * image + local : 4 * n + 4 * image + (local - 4);
    };
    for (int i = 0; i < n; ++i)
      for (const auto& pr : pairs) {
        subsets.push_back({global_row(i, pr[0]), global_row(i, pr[1])});
        weights.push_back({S(0.5), S(0.5)});
      }
    auto c = combine_rows(v, subsets, weights);
    auto z = l2_normalize(model_.project_predict(c, true).second);
    StepOutput<S> out;
    out.probe_vectors = z.clone_detached();
    out.loss = sec_loss(z, ta, tb, static_cast<int>(pairs.size()), static_cast<S>(cfg_.tau));
    out.positive_pairs = static_cast<long>(n) * 2 * static_cast<long>(pairs.size());
    return out;
  }

  // n-combinations over an arbitrary item count (not tied to a grid)
  static std::vector<std::vector<int>> enumerate_combinations_of(int items, int n) {
    std::vector<std::vector<int>> out;
    std::vector<int> cur(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) cur[static_cast<std::size_t>(i)] = i;
    for (;;) {
      out.push_back(cur);
      int i = n - 1;
      while (i >= 0 && cur[static_cast<std::size_t>(i)] == items - n + i) --i;
      if (i < 0) break;
      ++cur[static_cast<std::size_t>(i)];
      for (int j = i + 1; j < n; ++j)
        cur[static_cast<std::size_t>(j)] = cur[static_cast<std::size_t>(j - 1)] + 1;
    }
    return out;
  }

  RunConfig cfg_;
  const Dataset& data_;
  DualBranch<S>& model_;
  ChannelStats stats_;
  AugmentConfig aug_;
  CombineStageId stage_;
  std::vector<std::vector<int>> plan_subsets_;
  std::vector<ParamRef<S>> params_;
  OptimState<S> optim_;
};

// ---------------------------------------------------------------------------
// Training run
// ---------------------------------------------------------------------------

struct PretrainResult {
  std::string run_dir;
  std::string checkpoint_path;
  std::string metrics_path;
  std::string hash;
  double final_loss = 0;
  long steps = 0;
};

inline std::uint64_t config_hash_u64(const RunConfig& cfg) {
  return std::stoull(config_hash(cfg), nullptr, 16);
}

/// Full pretraining run over `data`, writing the config snapshot, metrics CSV
/// and checkpoints under out_dir/<config_hash>/.
template <typename S>
PretrainResult pretrain_on(const RunConfig& cfg, const Dataset& data, DualBranch<S>& model) {
  validate_config(cfg);
  const std::string hash = config_hash(cfg);
  PretrainResult res;
  res.hash = hash;
  res.run_dir = cfg.out_dir + "/" + hash;
  ensure_dir(res.run_dir);
  write_text_atomic(res.run_dir + "/config.txt",
                    "# config_hash=" + hash + "\n" + serialize_config(cfg));
  res.metrics_path = res.run_dir + "/metrics.csv";
  res.checkpoint_path = res.run_dir + "/ckpt_final.fmck";

  const int steps_per_epoch = data.size() / cfg.batch;
  if (steps_per_epoch < 1)
    throw config_error("dataset of " + std::to_string(data.size()) +
                       " images is smaller than one batch of " + std::to_string(cfg.batch));
  const long total_steps = static_cast<long>(steps_per_epoch) * cfg.epochs;
  const long warmup_steps = static_cast<long>(steps_per_epoch) * cfg.warmup_epochs;

  Trainer<S> trainer(cfg, data, model);
  std::string csv = "# config_hash=" + hash + "\n";
  csv += "epoch,step,lr,loss,embedding_std,grad_norm,wall_time_s\n";

  std::vector<int> order(static_cast<std::size_t>(data.size()));
  for (int i = 0; i < data.size(); ++i) order[static_cast<std::size_t>(i)] = i;

  const auto t0 = std::chrono::steady_clock::now();
  long step = 0;
  double last_loss = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng perm = Rng::substream(cfg.seed, {kStreamPerm, static_cast<std::uint64_t>(epoch)});
    perm.shuffle(order.begin(), order.end());
    for (int bi = 0; bi < steps_per_epoch; ++bi, ++step) {
      const std::vector<int> indices(order.begin() + static_cast<std::ptrdiff_t>(bi) * cfg.batch,
                                     order.begin() + static_cast<std::ptrdiff_t>(bi + 1) * cfg.batch);
      const double lr = cosine_lr(step, total_steps, cfg.lr0, warmup_steps, cfg.lr0 / 4.0);
      typename Trainer<S>::StepStats st;
      try {
        st = trainer.train_step(indices, epoch, step, lr);
      } catch (const TrainAbort&) {
        // dump the last-good parameters before propagating
        save_checkpoint(res.run_dir + "/ckpt_abort_last_good.fmck",
                        snapshot_model(model, static_cast<std::uint64_t>(step),
                                       config_hash_u64(cfg)));
        write_text_atomic(res.metrics_path, csv);
        throw;
      }
      last_loss = st.loss;
      if (step % cfg.log_every == 0 || step + 1 == total_steps) {
        // wall time is censored in deterministic mode so reruns byte-match
        const double wall =
            cfg.deterministic
                ? 0.0
                : std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        char row[256];
        std::snprintf(row, sizeof(row), "%d,%ld,%.8f,%.8f,%.8f,%.8f,%.3f\n", epoch, step, lr,
                      st.loss, st.embedding_std, st.grad_norm, wall);
        csv += row;
      }
    }
    if (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 &&
        epoch + 1 < cfg.epochs) {
      save_checkpoint(res.run_dir + "/ckpt_epoch" + std::to_string(epoch + 1) + ".fmck",
                      snapshot_model(model, static_cast<std::uint64_t>(step),
                                     config_hash_u64(cfg)));
    }
    write_text_atomic(res.metrics_path, csv);
  }
  save_checkpoint(res.checkpoint_path,
                  snapshot_model(model, static_cast<std::uint64_t>(step), config_hash_u64(cfg)));
  write_text_atomic(res.metrics_path, csv);
  res.final_loss = last_loss;
  res.steps = step;
  return res;
}

}  // namespace fastmoco
