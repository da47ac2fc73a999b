#pragma once

#include "fastmoco/tensor.hpp"

#include <cstring>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace fastmoco {

namespace detail {

// Images per im2col/gemm chunk. Fixed so results are bitwise independent of
// thread count: chunks are data-parallel, and the only cross-chunk reduction
// (the weight gradient) is summed in chunk order.
inline constexpr int kConvChunk = 32;

struct ConvDims {
  int n, c, h, w;  // input
  int o, kh, kw;   // kernel
  int stride, pad;
  int ho, wo;  // output
  int ck() const { return c * kh * kw; }
};

/// Per-thread scratch for column/product buffers; grows once, then is reused
/// across calls so the hot loop never touches the allocator.
template <typename S>
inline S* conv_scratch(int which, std::size_t need) {
  thread_local std::vector<S> bufs[3];
  auto& b = bufs[which];
  if (b.size() < need) b.resize(need);
  return b.data();
}

/// col is (CK x count*Ho*Wo), column index = (img_local*Ho + oh)*Wo + ow.
template <typename S>
void im2col(const ConvDims& d, const S* x, int img0, int count, S* col) {
  const int cols = count * d.ho * d.wo;
  for (int c = 0; c < d.c; ++c) {
    for (int ki = 0; ki < d.kh; ++ki) {
      for (int kj = 0; kj < d.kw; ++kj) {
        S* row = col + (static_cast<std::size_t>(c) * d.kh * d.kw + ki * d.kw + kj) * cols;
        // ow range whose source column stays in bounds for this kj
        const int ow_lo = std::max(0, (d.pad - kj + d.stride - 1) / d.stride);
        const int ow_hi = std::min(d.wo, (d.w - 1 + d.pad - kj) / d.stride + 1);
        for (int li = 0; li < count; ++li) {
          const S* img = x + (static_cast<std::size_t>(img0 + li) * d.c + c) * d.h * d.w;
          S* dst = row + static_cast<std::size_t>(li) * d.ho * d.wo;
          for (int oh = 0; oh < d.ho; ++oh) {
            const int ih = oh * d.stride - d.pad + ki;
            S* drow = dst + static_cast<std::size_t>(oh) * d.wo;
            if (ih < 0 || ih >= d.h || ow_lo >= ow_hi) {
              std::fill(drow, drow + d.wo, S(0));
              continue;
            }
            const S* srow = img + static_cast<std::size_t>(ih) * d.w;
            std::fill(drow, drow + ow_lo, S(0));
            if (d.stride == 1) {
              std::memcpy(drow + ow_lo, srow + ow_lo - d.pad + kj,
                          static_cast<std::size_t>(ow_hi - ow_lo) * sizeof(S));
            } else {
              for (int ow = ow_lo; ow < ow_hi; ++ow)
                drow[ow] = srow[ow * d.stride - d.pad + kj];
            }
            std::fill(drow + ow_hi, drow + d.wo, S(0));
          }
        }
      }
    }
  }
}

/// Scatter-add of a column buffer back onto the input layout.
template <typename S>
void col2im_acc(const ConvDims& d, const S* col, int img0, int count, S* gx) {
  const int cols = count * d.ho * d.wo;
  for (int c = 0; c < d.c; ++c) {
    for (int ki = 0; ki < d.kh; ++ki) {
      for (int kj = 0; kj < d.kw; ++kj) {
        const S* row = col + (static_cast<std::size_t>(c) * d.kh * d.kw + ki * d.kw + kj) * cols;
        const int ow_lo = std::max(0, (d.pad - kj + d.stride - 1) / d.stride);
        const int ow_hi = std::min(d.wo, (d.w - 1 + d.pad - kj) / d.stride + 1);
        if (ow_lo >= ow_hi) continue;
        for (int li = 0; li < count; ++li) {
          S* img = gx + (static_cast<std::size_t>(img0 + li) * d.c + c) * d.h * d.w;
          const S* src = row + static_cast<std::size_t>(li) * d.ho * d.wo;
          for (int oh = 0; oh < d.ho; ++oh) {
            const int ih = oh * d.stride - d.pad + ki;
            if (ih < 0 || ih >= d.h) continue;
            const S* srow = src + static_cast<std::size_t>(oh) * d.wo;
            S* drow = img + static_cast<std::size_t>(ih) * d.w - d.pad + kj;
            if (d.stride == 1) {
              for (int ow = ow_lo; ow < ow_hi; ++ow) drow[ow] += srow[ow];
            } else {
              for (int ow = ow_lo; ow < ow_hi; ++ow) drow[ow * d.stride] += srow[ow];
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

/// 2-d cross-correlation of x (N,C,H,W) with w (O,I,kh,kw), zero padding.
/// Implemented as im2col + matmul over fixed-size image chunks.
template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, int stride, int pad) {
  if (x.rank() != 4 || w.rank() != 4) throw dim_error("conv2d: expects NCHW input, OIHW kernel");
  if (x.dim(1) != w.dim(1))
    throw dim_error("conv2d: channel mismatch, input " + shape_str(x.shape()) + " kernel " +
                    shape_str(w.shape()));
  if (stride < 1 || pad < 0) throw dim_error("conv2d: bad stride/pad");
  detail::ConvDims d;
  d.n = x.dim(0), d.c = x.dim(1), d.h = x.dim(2), d.w = x.dim(3);
  d.o = w.dim(0), d.kh = w.dim(2), d.kw = w.dim(3);
  d.stride = stride, d.pad = pad;
  d.ho = (d.h + 2 * pad - d.kh) / stride + 1;
  d.wo = (d.w + 2 * pad - d.kw) / stride + 1;
  if (d.h + 2 * pad < d.kh || d.w + 2 * pad < d.kw || d.ho <= 0 || d.wo <= 0)
    throw dim_error("conv2d: non-positive output extent");

  const int hwo = d.ho * d.wo;
  const int ck = d.ck();
  const int n_chunks = (d.n + detail::kConvChunk - 1) / detail::kConvChunk;
  std::vector<S> out(static_cast<std::size_t>(d.n) * d.o * hwo);
  const S* px = x.data();
  const S* pw = w.data();

  // when a backward pass will follow, keep the per-chunk column buffers so
  // the weight-gradient gemm does not redo im2col
  const bool keep_cols = grad_enabled() && (x.requires_grad() || w.requires_grad()) &&
                         w.requires_grad();
  auto cached_cols = std::make_shared<std::vector<std::vector<S>>>(
      keep_cols ? static_cast<std::size_t>(n_chunks) : 0);

#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (int ch = 0; ch < n_chunks; ++ch) {
    const int img0 = ch * detail::kConvChunk;
    const int count = std::min(detail::kConvChunk, d.n - img0);
    const int cols = count * hwo;
    S* col;
    if (keep_cols) {
      (*cached_cols)[static_cast<std::size_t>(ch)].resize(static_cast<std::size_t>(ck) * cols);
      col = (*cached_cols)[static_cast<std::size_t>(ch)].data();
    } else {
      col = detail::conv_scratch<S>(0, static_cast<std::size_t>(ck) * cols);
    }
    detail::im2col(d, px, img0, count, col);
    S* prod = detail::conv_scratch<S>(1, static_cast<std::size_t>(d.o) * cols);
    detail::EMap<S>(prod, d.o, cols).noalias() =
        detail::ECMap<S>(pw, d.o, ck) * detail::ECMap<S>(col, ck, cols);
    for (int li = 0; li < count; ++li)
      for (int o = 0; o < d.o; ++o)
        std::memcpy(out.data() + (static_cast<std::size_t>(img0 + li) * d.o + o) * hwo,
                    prod + (static_cast<std::size_t>(o) * count + li) * hwo,
                    static_cast<std::size_t>(hwo) * sizeof(S));
  }

  auto ix = x.impl();
  auto iw = w.impl();
  return detail::record<S>(
      {d.n, d.o, d.ho, d.wo}, std::move(out), {x, w},
      [ix, iw, d, hwo, ck, n_chunks, cached_cols](auto& self) {
        const bool need_x = ix->requires_grad;
        const bool need_w = iw->requires_grad;
        if (need_x) ix->ensure_grad();
        if (need_w) iw->ensure_grad();
        std::vector<std::vector<S>> gw_partial(need_w ? static_cast<std::size_t>(n_chunks) : 0);
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
        for (int ch = 0; ch < n_chunks; ++ch) {
          const int img0 = ch * detail::kConvChunk;
          const int count = std::min(detail::kConvChunk, d.n - img0);
          const int cols = count * hwo;
          // gather output grads into (O x cols)
          S* gout = detail::conv_scratch<S>(1, static_cast<std::size_t>(d.o) * cols);
          for (int li = 0; li < count; ++li)
            for (int o = 0; o < d.o; ++o)
              std::memcpy(gout + (static_cast<std::size_t>(o) * count + li) * hwo,
                          self.grad.data() + (static_cast<std::size_t>(img0 + li) * d.o + o) * hwo,
                          static_cast<std::size_t>(hwo) * sizeof(S));
          if (need_x) {
            S* gcol = detail::conv_scratch<S>(2, static_cast<std::size_t>(ck) * cols);
            detail::EMap<S>(gcol, ck, cols).noalias() =
                detail::ECMap<S>(iw->data.data(), d.o, ck).transpose() *
                detail::ECMap<S>(gout, d.o, cols);
            detail::col2im_acc(d, gcol, img0, count, ix->grad.data());
          }
          if (need_w) {
            S* col;
            if (!cached_cols->empty()) {
              col = (*cached_cols)[static_cast<std::size_t>(ch)].data();
            } else {
              col = detail::conv_scratch<S>(0, static_cast<std::size_t>(ck) * cols);
              detail::im2col(d, ix->data.data(), img0, count, col);
            }
            gw_partial[static_cast<std::size_t>(ch)].resize(static_cast<std::size_t>(d.o) * ck);
            detail::EMap<S>(gw_partial[static_cast<std::size_t>(ch)].data(), d.o, ck).noalias() =
                detail::ECMap<S>(gout, d.o, cols) * detail::ECMap<S>(col, ck, cols).transpose();
            if (!cached_cols->empty())
              std::vector<S>().swap((*cached_cols)[static_cast<std::size_t>(ch)]);
          }
        }
        if (need_w) {
          detail::EMap<S> gw(iw->grad.data(), d.o, ck);
          for (int ch = 0; ch < n_chunks; ++ch)
            gw += detail::ECMap<S>(gw_partial[static_cast<std::size_t>(ch)].data(), d.o, ck);
        }
      });
}

}  // namespace fastmoco
