#pragma once

#include "fastmoco/tensor.hpp"

#include <string>
#include <vector>

namespace fastmoco {

/// One side of a contrastive comparison: online vectors against the batch of
/// target vectors, with a total positive-index map. Rows must arrive
/// l2-normalized.
template <typename S>
struct ContrastBatch {
  Tensor<S> online;           // (R, d)
  Tensor<S> targets;          // (B, d)
  std::vector<int> positive;  // size R, values in [0, B)
  S tau = S(1);
};

template <typename S>
void validate_contrast_batch(const ContrastBatch<S>& b, S norm_tol = S(1e-6)) {
  if (b.tau <= S(0)) throw domain_error("contrast: temperature must be positive");
  if (b.online.rank() != 2 || b.targets.rank() != 2 || b.online.dim(1) != b.targets.dim(1))
    throw dim_error("contrast: online/target dims disagree");
  if (static_cast<int>(b.positive.size()) != b.online.dim(0))
    throw dim_error("contrast: positive map is not total");
  for (int p : b.positive)
    if (p < 0 || p >= b.targets.dim(0)) throw dim_error("contrast: positive index out of range");
  auto check_rows = [&](const Tensor<S>& t, const char* which) {
    const int n = t.dim(0), d = t.dim(1);
    for (int r = 0; r < n; ++r) {
      S sq = S(0);
      const S* row = t.data() + static_cast<std::size_t>(r) * d;
      for (int c = 0; c < d; ++c) sq += row[c] * row[c];
      if (std::abs(std::sqrt(sq) - S(1)) > norm_tol)
        throw domain_error(std::string("contrast: ") + which + " row " + std::to_string(r) +
                           " is not unit-norm");
    }
  };
  check_rows(b.online, "online");
  check_rows(b.targets, "target");
}

/// Mean InfoNCE over the rows of `online`: for each row, softmax
/// cross-entropy over similarities to every target (the positive is part of
/// the denominator), at temperature tau.
template <typename S>
Tensor<S> info_nce_batch(const ContrastBatch<S>& b) {
  validate_contrast_batch(b);
  auto logits = mul_scalar(matmul_nt(b.online, b.targets), S(1) / b.tau);
  return softmax_cross_entropy(logits, b.positive);
}

/// Single-vector InfoNCE: z (1,d) or (d,) against targets (B,d).
template <typename S>
Tensor<S> info_nce(const Tensor<S>& z, const Tensor<S>& targets, int positive, S tau) {
  auto zr = z.rank() == 1 ? reshape(z, {1, z.dim(0)}) : z;
  return info_nce_batch<S>({zr, targets, {positive}, tau});
}

namespace detail {

template <typename S>
Tensor<S> directional_loss(const Tensor<S>& online, const Tensor<S>& targets, int per_image,
                           S tau) {
  const int rows = online.dim(0);
  if (per_image < 1 || rows % per_image != 0)
    throw dim_error("contrast: online rows not a multiple of samples per image");
  std::vector<int> positive(static_cast<std::size_t>(rows));
  for (int i = 0; i < rows; ++i) positive[static_cast<std::size_t>(i)] = i / per_image;
  return info_nce_batch<S>({online, targets, std::move(positive), tau});
}

}  // namespace detail

/// Symmetrized two-view loss: 1/2 (L(z_o^a, Z_t^a') + L(z_o^a', Z_t^a)).
/// All four blocks are (N, d) and row i of each belongs to image i.
template <typename S>
Tensor<S> symmetrized_pair_loss(const Tensor<S>& online_a, const Tensor<S>& online_b,
                                const Tensor<S>& target_a, const Tensor<S>& target_b, S tau) {
  if (online_a.dim(0) != online_b.dim(0) || target_a.dim(0) != target_b.dim(0) ||
      online_a.dim(0) != target_a.dim(0))
    throw dim_error("symmetrized_pair_loss: batch mismatch");
  auto la = detail::directional_loss(online_a, target_b, 1, tau);
  auto lb = detail::directional_loss(online_b, target_a, 1, tau);
  return mul_scalar(add(la, lb), S(0.5));
}

/// Multi-pair loss: per view, k combined samples per image (rows ordered
/// image-major: image i occupies rows [i*k, (i+1)*k)), each contrasted
/// against the other view's targets (its own view's when same_view_positive).
/// The k=1 case is exactly symmetrized_pair_loss.
template <typename S>
Tensor<S> fastmoco_loss(const Tensor<S>& combined_a, const Tensor<S>& combined_b,
                        const Tensor<S>& target_a, const Tensor<S>& target_b, int k, S tau,
                        bool same_view_positive = false) {
  if (k < 1) throw dim_error("fastmoco_loss: k must be >= 1");
  auto la = detail::directional_loss(combined_a, same_view_positive ? target_a : target_b, k, tau);
  auto lb = detail::directional_loss(combined_b, same_view_positive ? target_b : target_a, k, tau);
  return mul_scalar(add(la, lb), S(0.5));
}

/// As fastmoco_loss but with one extra full-view sample per image per
/// direction appended after the combined rows.
template <typename S>
Tensor<S> fastmoco_loss_multicrop(const Tensor<S>& combined_a, const Tensor<S>& combined_b,
                                  const Tensor<S>& extra, const Tensor<S>& target_a,
                                  const Tensor<S>& target_b, int k, S tau,
                                  bool same_view_positive = false) {
  const int n = target_a.dim(0);
  if (extra.dim(0) != n) throw dim_error("fastmoco_loss_multicrop: extra-crop batch mismatch");
  auto with_extra = [&](const Tensor<S>& combined, const Tensor<S>& targets) {
    std::vector<int> positive;
    positive.reserve(static_cast<std::size_t>(combined.dim(0) + n));
    for (int i = 0; i < combined.dim(0); ++i) positive.push_back(i / k);
    for (int i = 0; i < n; ++i) positive.push_back(i);
    return info_nce_batch<S>({concat_rows(combined, extra), targets, std::move(positive), tau});
  };
  auto la = with_extra(combined_a, same_view_positive ? target_a : target_b);
  auto lb = with_extra(combined_b, same_view_positive ? target_b : target_a);
  return mul_scalar(add(la, lb), S(0.5));
}

/// Sample-Encode-Combine loss: the combined vectors of each image (rows
/// image-major, combos_per_image each, C(8,2)=28 in the reference setting)
/// are contrasted against both views' targets.
template <typename S>
Tensor<S> sec_loss(const Tensor<S>& combined, const Tensor<S>& target_a, const Tensor<S>& target_b,
                   int combos_per_image, S tau) {
  const int n = target_a.dim(0);
  if (combined.dim(0) != n * combos_per_image)
    throw dim_error("sec_loss: expected " + std::to_string(combos_per_image) +
                    " combined vectors per image");
  auto la = detail::directional_loss(combined, target_a, combos_per_image, tau);
  auto lb = detail::directional_loss(combined, target_b, combos_per_image, tau);
  return mul_scalar(add(la, lb), S(0.5));
}

/// Encode-Only loss: four separately encoded patch vectors per image, each
/// contrasted with both targets (8 terms per image, hence the 1/8 weight).
template <typename S>
Tensor<S> encode_only_loss(const Tensor<S>& patch_vecs, const Tensor<S>& target_a,
                           const Tensor<S>& target_b, S tau) {
  const int n = target_a.dim(0);
  if (patch_vecs.dim(0) != 4 * n)
    throw dim_error("encode_only_loss: expected exactly 4 patch vectors per image");
  auto la = detail::directional_loss(patch_vecs, target_a, 4, tau);
  auto lb = detail::directional_loss(patch_vecs, target_b, 4, tau);
  return mul_scalar(add(la, lb), S(0.5));
}

}  // namespace fastmoco
