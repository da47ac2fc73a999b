#pragma once

#include "fastmoco/rng.hpp"
#include "fastmoco/tensor.hpp"

#include <optional>
#include <string>
#include <vector>

namespace fastmoco {

// ---------------------------------------------------------------------------
// Divide step
// ---------------------------------------------------------------------------

/// Splits each image of an (N,C,H,W) batch into an m x m grid of
/// non-overlapping patches. Output is (N*m^2, C, H/m, W/m), image-major with
/// row-major grid order: patch p of image i sits at row i*m^2 + p.
template <typename S>
Tensor<S> divide(const Tensor<S>& x, int m) {
  if (x.rank() != 4) throw dim_error("divide: expects NCHW tensor");
  if (m < 1) throw dim_error("divide: grid side must be >= 1");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % m != 0 || w % m != 0)
    throw dim_error("divide: view size " + std::to_string(h) + "x" + std::to_string(w) +
                    " not divisible by m=" + std::to_string(m));
  const int ph = h / m, pw = w / m;
  std::vector<S> out(static_cast<std::size_t>(n) * m * m * c * ph * pw);
  const S* px = x.data();
  for (int i = 0; i < n; ++i)
    for (int gr = 0; gr < m; ++gr)
      for (int gc = 0; gc < m; ++gc) {
        const int p = gr * m + gc;
        S* dst = out.data() + (static_cast<std::size_t>(i) * m * m + p) * c * ph * pw;
        for (int ch = 0; ch < c; ++ch) {
          const S* src =
              px + ((static_cast<std::size_t>(i) * c + ch) * h + gr * ph) * w + gc * pw;
          for (int r = 0; r < ph; ++r)
            std::copy(src + r * w, src + r * w + pw,
                      dst + (static_cast<std::size_t>(ch) * ph + r) * pw);
        }
      }
  auto ix = x.impl();
  return detail::record<S>({n * m * m, c, ph, pw}, std::move(out), {x},
                           [ix, n, c, h, w, m, ph, pw](auto& self) {
                             if (!ix->requires_grad) return;
                             ix->ensure_grad();
                             const S* g = self.grad.data();
                             for (int i = 0; i < n; ++i)
                               for (int gr = 0; gr < m; ++gr)
                                 for (int gc = 0; gc < m; ++gc) {
                                   const int p = gr * m + gc;
                                   const S* src =
                                       g + (static_cast<std::size_t>(i) * m * m + p) * c * ph * pw;
                                   for (int ch = 0; ch < c; ++ch) {
                                     S* dst = ix->grad.data() +
                                              ((static_cast<std::size_t>(i) * c + ch) * h + gr * ph) * w +
                                              gc * pw;
                                     for (int r = 0; r < ph; ++r)
                                       for (int k = 0; k < pw; ++k)
                                         dst[r * w + k] +=
                                             src[(static_cast<std::size_t>(ch) * ph + r) * pw + k];
                                   }
                                 }
                           });
}

// ---------------------------------------------------------------------------
// Combination enumeration
// ---------------------------------------------------------------------------

inline std::int64_t n_choose_k(int n, int k) {
  if (k < 0 || k > n) return 0;
  std::int64_t r = 1;
  for (int i = 1; i <= k; ++i) r = r * (n - k + i) / i;
  return r;
}

/// All n-element subsets of the patch index set {0..m^2-1}, each sorted,
/// listed in lexicographic order.
inline std::vector<std::vector<int>> enumerate_combinations(int m, int n) {
  const int total = m * m;
  if (n < 1 || n > total)
    throw std::invalid_argument("enumerate_combinations: n=" + std::to_string(n) +
                                " out of range for m^2=" + std::to_string(total));
  std::vector<std::vector<int>> out;
  std::vector<int> cur(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) cur[static_cast<std::size_t>(i)] = i;
  for (;;) {
    out.push_back(cur);
    int i = n - 1;
    while (i >= 0 && cur[static_cast<std::size_t>(i)] == total - n + i) --i;
    if (i < 0) break;
    ++cur[static_cast<std::size_t>(i)];
    for (int j = i + 1; j < n; ++j)
      cur[static_cast<std::size_t>(j)] = cur[static_cast<std::size_t>(j - 1)] + 1;
  }
  return out;
}

/// Selects pairs_used subsets such that every patch index appears equally
/// often. For m=2, n=2 the published patterns {12,34}, {12,34,13,24} and the
/// full six are used; other settings fall back to a greedy balanced pick over
/// the lexicographic list.
inline std::vector<std::vector<int>> equal_use_subsets(int m, int n, int pairs_used) {
  const int total = m * m;
  const std::int64_t all = n_choose_k(total, n);
  if (pairs_used < 1 || pairs_used > all)
    throw std::invalid_argument("pairs_used=" + std::to_string(pairs_used) +
                                " out of range, C(" + std::to_string(total) + "," +
                                std::to_string(n) + ")=" + std::to_string(all));
  if (pairs_used == all) return enumerate_combinations(m, n);
  if (static_cast<std::int64_t>(pairs_used) * n % total != 0)
    throw std::invalid_argument("pairs_used=" + std::to_string(pairs_used) +
                                " cannot use all " + std::to_string(total) +
                                " patches equally often");
  if (m == 2 && n == 2) {
    if (pairs_used == 2) return {{0, 1}, {2, 3}};
    if (pairs_used == 4) return {{0, 1}, {2, 3}, {0, 2}, {1, 3}};
  }
  const int per_index = pairs_used * n / total;
  auto cands = enumerate_combinations(m, n);
  std::vector<std::vector<int>> picked;
  std::vector<int> count(static_cast<std::size_t>(total), 0);
  std::vector<bool> used(cands.size(), false);
  for (int round = 0; static_cast<int>(picked.size()) < pairs_used; ++round) {
    bool progress = false;
    for (std::size_t i = 0; i < cands.size() && static_cast<int>(picked.size()) < pairs_used; ++i) {
      if (used[i]) continue;
      bool ok = true;
      for (int idx : cands[i])
        if (count[static_cast<std::size_t>(idx)] >= per_index) ok = false;
      if (!ok) continue;
      used[i] = true;
      picked.push_back(cands[i]);
      for (int idx : cands[i]) ++count[static_cast<std::size_t>(idx)];
      progress = true;
    }
    if (!progress)
      throw std::invalid_argument("equal-use subsampling infeasible for pairs_used=" +
                                  std::to_string(pairs_used));
  }
  return picked;
}

// ---------------------------------------------------------------------------
// Combine operators (embedding level)
// ---------------------------------------------------------------------------

/// out[i] = sum_j weights[i][j] * v.row(subsets[i][j]); the workhorse behind
/// mean/weighted/beta combining of patch embeddings.
template <typename S>
Tensor<S> combine_rows(const Tensor<S>& v, const std::vector<std::vector<int>>& subsets,
                       const std::vector<std::vector<S>>& weights) {
  if (v.rank() != 2) throw dim_error("combine_rows: expects 2-d tensor");
  if (subsets.size() != weights.size() || subsets.empty())
    throw dim_error("combine_rows: empty or mismatched subset/weight lists");
  const int rows = v.dim(0), d = v.dim(1);
  const int k = static_cast<int>(subsets.size());
  std::vector<S> out(static_cast<std::size_t>(k) * d, S(0));
  const S* pv = v.data();
  for (int i = 0; i < k; ++i) {
    if (subsets[static_cast<std::size_t>(i)].size() != weights[static_cast<std::size_t>(i)].size() ||
        subsets[static_cast<std::size_t>(i)].empty())
      throw dim_error("combine_rows: empty subset");
    S* dst = out.data() + static_cast<std::size_t>(i) * d;
    for (std::size_t j = 0; j < subsets[static_cast<std::size_t>(i)].size(); ++j) {
      const int r = subsets[static_cast<std::size_t>(i)][j];
      if (r < 0 || r >= rows) throw dim_error("combine_rows: row index out of range");
      const S wj = weights[static_cast<std::size_t>(i)][j];
      const S* src = pv + static_cast<std::size_t>(r) * d;
      for (int c = 0; c < d; ++c) dst[c] += wj * src[c];
    }
  }
  auto iv = v.impl();
  return detail::record<S>({k, d}, std::move(out), {v},
                           [iv, subsets, weights, k, d](auto& self) {
                             if (!iv->requires_grad) return;
                             iv->ensure_grad();
                             const S* g = self.grad.data();
                             for (int i = 0; i < k; ++i)
                               for (std::size_t j = 0; j < subsets[static_cast<std::size_t>(i)].size();
                                    ++j) {
                                 const int r = subsets[static_cast<std::size_t>(i)][j];
                                 const S wj = weights[static_cast<std::size_t>(i)][j];
                                 S* dst = iv->grad.data() + static_cast<std::size_t>(r) * d;
                                 const S* src = g + static_cast<std::size_t>(i) * d;
                                 for (int c = 0; c < d; ++c) dst[c] += wj * src[c];
                               }
                           });
}

/// Elementwise max over the selected rows; gradient routes to the arg-max
/// member (first on ties).
template <typename S>
Tensor<S> combine_rows_max(const Tensor<S>& v, const std::vector<std::vector<int>>& subsets) {
  if (v.rank() != 2) throw dim_error("combine_rows_max: expects 2-d tensor");
  if (subsets.empty()) throw dim_error("combine_rows_max: empty subset list");
  const int rows = v.dim(0), d = v.dim(1);
  const int k = static_cast<int>(subsets.size());
  std::vector<S> out(static_cast<std::size_t>(k) * d);
  std::vector<int> argmax(static_cast<std::size_t>(k) * d);
  const S* pv = v.data();
  for (int i = 0; i < k; ++i) {
    const auto& sub = subsets[static_cast<std::size_t>(i)];
    if (sub.empty()) throw dim_error("combine_rows_max: empty subset");
    for (int r : sub)
      if (r < 0 || r >= rows) throw dim_error("combine_rows_max: row index out of range");
    S* dst = out.data() + static_cast<std::size_t>(i) * d;
    int* am = argmax.data() + static_cast<std::size_t>(i) * d;
    for (int c = 0; c < d; ++c) {
      S best = pv[static_cast<std::size_t>(sub[0]) * d + c];
      int br = sub[0];
      for (std::size_t j = 1; j < sub.size(); ++j) {
        const S cand = pv[static_cast<std::size_t>(sub[j]) * d + c];
        if (cand > best) {
          best = cand;
          br = sub[j];
        }
      }
      dst[c] = best;
      am[c] = br;
    }
  }
  auto iv = v.impl();
  return detail::record<S>({k, d}, std::move(out), {v},
                           [iv, argmax = std::move(argmax), k, d](auto& self) {
                             if (!iv->requires_grad) return;
                             iv->ensure_grad();
                             const S* g = self.grad.data();
                             for (int i = 0; i < k; ++i)
                               for (int c = 0; c < d; ++c)
                                 iv->grad[static_cast<std::size_t>(
                                              argmax[static_cast<std::size_t>(i) * d + c]) *
                                              d +
                                          c] += g[static_cast<std::size_t>(i) * d + c];
                           });
}

/// c = (1/n) sum of the member rows of an (n, d) tensor; returns (1, d).
template <typename S>
Tensor<S> combine_mean(const Tensor<S>& members) {
  if (members.rank() != 2 || members.dim(0) < 1)
    throw dim_error("combine_mean: expects a non-empty (n, d) tensor");
  const int n = members.dim(0);
  std::vector<int> all(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) all[static_cast<std::size_t>(i)] = i;
  return combine_rows(members, {all}, {std::vector<S>(static_cast<std::size_t>(n),
                                                      S(1) / static_cast<S>(n))});
}

/// c = gamma*a + (1-gamma)*b with gamma in [0.5, 1).
template <typename S>
Tensor<S> combine_weighted(const Tensor<S>& a, const Tensor<S>& b, S gamma) {
  if (gamma < S(0.5) || gamma >= S(1)) throw domain_error("combine_weighted: gamma out of [0.5,1)");
  return add(mul_scalar(a, gamma), mul_scalar(b, S(1) - gamma));
}

/// Convex combination with gamma ~ Beta(beta_alpha, beta_alpha), drawn per call.
template <typename S>
Tensor<S> combine_beta(const Tensor<S>& a, const Tensor<S>& b, double beta_alpha, Rng& rng) {
  if (beta_alpha <= 0.0) throw domain_error("combine_beta: beta_alpha must be positive");
  const S gamma = static_cast<S>(rng.beta(beta_alpha, beta_alpha));
  return add(mul_scalar(a, gamma), mul_scalar(b, S(1) - gamma));
}

/// Elementwise max of two equally shaped tensors.
template <typename S>
Tensor<S> combine_max(const Tensor<S>& a, const Tensor<S>& b) {
  return max_elementwise(a, b);
}

// ---------------------------------------------------------------------------
// Geometry-preserving combine (image / feature-map level)
// ---------------------------------------------------------------------------

enum class StitchOrientation { kHorizontal, kVertical };

/// Orientation of a grid-adjacent pair, or nullopt when the pair is not
/// edge-adjacent (e.g. diagonal).
inline std::optional<StitchOrientation> grid_adjacency(int pa, int pb, int m) {
  const int ra = pa / m, ca = pa % m, rb = pb / m, cb = pb % m;
  if (ra == rb && std::abs(ca - cb) == 1) return StitchOrientation::kHorizontal;
  if (ca == cb && std::abs(ra - rb) == 1) return StitchOrientation::kVertical;
  return std::nullopt;
}

/// Concatenates two equally shaped images or feature maps into a 2:1 strip:
/// side by side (horizontal) or stacked (vertical).
template <typename S>
Tensor<S> stitch_pair(const Tensor<S>& a, const Tensor<S>& b, StitchOrientation o) {
  detail::check_same_shape(a, b, "stitch_pair");
  return concat(a, b, o == StitchOrientation::kHorizontal ? 3 : 2);
}

/// Stitches two patches identified by their grid indices, preserving their
/// original relative position. Non-adjacent (diagonal) pairs are rejected.
template <typename S>
Tensor<S> stitch_grid_pair(const Tensor<S>& a, int pa, const Tensor<S>& b, int pb, int m) {
  auto o = grid_adjacency(pa, pb, m);
  if (!o)
    throw dim_error("stitch_grid_pair: patches " + std::to_string(pa) + "," + std::to_string(pb) +
                    " are not grid-adjacent");
  // Order operands by original position (left/top first).
  const bool a_first = *o == StitchOrientation::kHorizontal ? (pa % m < pb % m) : (pa / m < pb / m);
  return a_first ? stitch_pair(a, b, *o) : stitch_pair(b, a, *o);
}

/// Reassembles the four patches of a 2x2 grid into the full view.
template <typename S>
Tensor<S> stitch_quad(const Tensor<S>& tl, const Tensor<S>& tr, const Tensor<S>& bl,
                      const Tensor<S>& br) {
  return concat(concat(tl, tr, 3), concat(bl, br, 3), 2);
}

// ---------------------------------------------------------------------------
// Montage assembly
// ---------------------------------------------------------------------------

/// slot s = montage_index*4 + quadrant (row-major quadrants); slot_to_patch
/// is a permutation of the 4K patch indices.
struct MontagePlacement {
  int k = 0;
  std::vector<int> slot_to_patch;
};

/// Stitches 4K half-size patches (4 per source image) into K montage views,
/// placing each patch exactly once at a random slot.
template <typename S>
std::pair<Tensor<S>, MontagePlacement> montage_assemble(const Tensor<S>& patches, Rng& rng) {
  if (patches.rank() != 4) throw dim_error("montage_assemble: expects NCHW patches");
  const int np = patches.dim(0);
  if (np % 4 != 0) throw dim_error("montage_assemble: patch count must be 4K");
  const int k = np / 4;
  const int c = patches.dim(1), ph = patches.dim(2), pw = patches.dim(3);
  MontagePlacement placement;
  placement.k = k;
  placement.slot_to_patch.resize(static_cast<std::size_t>(np));
  for (int i = 0; i < np; ++i) placement.slot_to_patch[static_cast<std::size_t>(i)] = i;
  rng.shuffle(placement.slot_to_patch.begin(), placement.slot_to_patch.end());

  std::vector<S> out(static_cast<std::size_t>(k) * c * (2 * ph) * (2 * pw));
  const S* pp = patches.data();
  for (int s = 0; s < np; ++s) {
    const int j = s / 4, q = s % 4;
    const int qr = q / 2, qc = q % 2;
    const int p = placement.slot_to_patch[static_cast<std::size_t>(s)];
    for (int ch = 0; ch < c; ++ch) {
      const S* src = pp + (static_cast<std::size_t>(p) * c + ch) * ph * pw;
      S* dst = out.data() + ((static_cast<std::size_t>(j) * c + ch) * 2 * ph + qr * ph) * 2 * pw +
               qc * pw;
      for (int r = 0; r < ph; ++r)
        std::copy(src + r * pw, src + r * pw + pw, dst + r * 2 * pw);
    }
  }
  auto ip = patches.impl();
  auto t = detail::record<S>(
      {k, c, 2 * ph, 2 * pw}, std::move(out), {patches},
      [ip, slots = placement.slot_to_patch, k, c, ph, pw](auto& self) {
        if (!ip->requires_grad) return;
        ip->ensure_grad();
        const S* g = self.grad.data();
        for (int s = 0; s < 4 * k; ++s) {
          const int j = s / 4, q = s % 4;
          const int qr = q / 2, qc = q % 2;
          const int p = slots[static_cast<std::size_t>(s)];
          for (int ch = 0; ch < c; ++ch) {
            S* dst = ip->grad.data() + (static_cast<std::size_t>(p) * c + ch) * ph * pw;
            const S* src =
                g + ((static_cast<std::size_t>(j) * c + ch) * 2 * ph + qr * ph) * 2 * pw + qc * pw;
            for (int r = 0; r < ph; ++r)
              for (int col = 0; col < pw; ++col) dst[r * pw + col] += src[r * 2 * pw + col];
          }
        }
      });
  return {std::move(t), std::move(placement)};
}

/// Splits montage feature maps (K,C,H,W) back into per-patch quadrant maps,
/// returned in original patch order (4K,C,H/2,W/2) so row p belongs to the
/// patch that was placed as patches.row(p) at assembly.
template <typename S>
Tensor<S> montage_disassemble(const Tensor<S>& feat, const MontagePlacement& placement) {
  if (feat.rank() != 4) throw dim_error("montage_disassemble: expects NCHW feature maps");
  const int k = feat.dim(0), c = feat.dim(1), h = feat.dim(2), w = feat.dim(3);
  if (k != placement.k || static_cast<int>(placement.slot_to_patch.size()) != 4 * k)
    throw dim_error("montage_disassemble: placement does not match feature maps");
  if (h % 2 != 0 || w % 2 != 0) throw dim_error("montage_disassemble: odd feature extent");
  const int qh = h / 2, qw = w / 2;
  std::vector<S> out(static_cast<std::size_t>(4 * k) * c * qh * qw);
  const S* pf = feat.data();
  for (int s = 0; s < 4 * k; ++s) {
    const int j = s / 4, q = s % 4;
    const int qr = q / 2, qc = q % 2;
    const int p = placement.slot_to_patch[static_cast<std::size_t>(s)];
    for (int ch = 0; ch < c; ++ch) {
      const S* src = pf + ((static_cast<std::size_t>(j) * c + ch) * h + qr * qh) * w + qc * qw;
      S* dst = out.data() + (static_cast<std::size_t>(p) * c + ch) * qh * qw;
      for (int r = 0; r < qh; ++r)
        std::copy(src + r * w, src + r * w + qw, dst + r * qw);
    }
  }
  auto ifeat = feat.impl();
  return detail::record<S>(
      {4 * k, c, qh, qw}, std::move(out), {feat},
      [ifeat, slots = placement.slot_to_patch, k, c, h, w, qh, qw](auto& self) {
        if (!ifeat->requires_grad) return;
        ifeat->ensure_grad();
        const S* g = self.grad.data();
        for (int s = 0; s < 4 * k; ++s) {
          const int j = s / 4, q = s % 4;
          const int qr = q / 2, qc = q % 2;
          const int p = slots[static_cast<std::size_t>(s)];
          for (int ch = 0; ch < c; ++ch) {
            S* dst =
                ifeat->grad.data() + ((static_cast<std::size_t>(j) * c + ch) * h + qr * qh) * w + qc * qw;
            const S* src = g + (static_cast<std::size_t>(p) * c + ch) * qh * qw;
            for (int r = 0; r < qh; ++r)
              for (int col = 0; col < qw; ++col) dst[r * w + col] += src[r * qw + col];
          }
        }
      });
}

}  // namespace fastmoco
