#pragma once

#include "fastmoco/data.hpp"
#include "fastmoco/rng.hpp"
#include "fastmoco/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace fastmoco {

/// SimSiam-style augmentation adapted to 32x32 inputs: random resized crop
/// (area scale 0.2-1.0), horizontal flip p=0.5, color jitter
/// (0.4, 0.4, 0.4, 0.1) p=0.8, grayscale p=0.2. Gaussian blur is omitted at
/// this resolution. All outputs stay in [0, 1].
struct AugmentConfig {
  double scale_min = 0.2, scale_max = 1.0;
  double aspect_min = 3.0 / 4.0, aspect_max = 4.0 / 3.0;
  double hflip_p = 0.5;
  double jitter_p = 0.8;
  double brightness = 0.4, contrast = 0.4, saturation = 0.4, hue = 0.1;
  double grayscale_p = 0.2;

  static AugmentConfig identity() {
    AugmentConfig c;
    c.scale_min = c.scale_max = 1.0;
    c.aspect_min = c.aspect_max = 1.0;
    c.hflip_p = c.jitter_p = c.grayscale_p = 0.0;
    return c;
  }
};

namespace detail {

inline double gray_of(const double* px, std::size_t idx, std::size_t plane) {
  return 0.299 * px[idx] + 0.587 * px[plane + idx] + 0.114 * px[2 * plane + idx];
}

inline void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v) {
  const double mx = std::max({r, g, b});
  const double mn = std::min({r, g, b});
  v = mx;
  const double d = mx - mn;
  s = mx > 0 ? d / mx : 0.0;
  if (d <= 0) {
    h = 0;
    return;
  }
  if (mx == r)
    h = std::fmod((g - b) / d, 6.0);
  else if (mx == g)
    h = (b - r) / d + 2.0;
  else
    h = (r - g) / d + 4.0;
  h /= 6.0;
  if (h < 0) h += 1.0;
}

inline void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b) {
  const double h6 = h * 6.0;
  const int i = static_cast<int>(std::floor(h6)) % 6;
  const double f = h6 - std::floor(h6);
  const double p = v * (1 - s);
  const double q = v * (1 - f * s);
  const double t = v * (1 - (1 - f) * s);
  switch (i) {
    case 0: r = v, g = t, b = p; break;
    case 1: r = q, g = v, b = p; break;
    case 2: r = p, g = v, b = t; break;
    case 3: r = p, g = q, b = v; break;
    case 4: r = t, g = p, b = v; break;
    default: r = v, g = p, b = q; break;
  }
}

/// Bilinear resample of a planar 3xHxW crop window to out x out
/// (pixel-center convention; an identity window at equal size is exact).
inline std::vector<double> resize_crop(const std::vector<double>& src, int h, int w, int y0,
                                       int x0, int ch_, int cw, int out) {
  std::vector<double> dst(static_cast<std::size_t>(3) * out * out);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const double sy = static_cast<double>(ch_) / out;
  const double sx = static_cast<double>(cw) / out;
  for (int oy = 0; oy < out; ++oy) {
    const double fy = (oy + 0.5) * sy - 0.5;
    const int iy = static_cast<int>(std::floor(fy));
    const double wy = fy - iy;
    const int y1 = std::clamp(iy, 0, ch_ - 1), y2 = std::clamp(iy + 1, 0, ch_ - 1);
    for (int ox = 0; ox < out; ++ox) {
      const double fx = (ox + 0.5) * sx - 0.5;
      const int ix = static_cast<int>(std::floor(fx));
      const double wx = fx - ix;
      const int x1 = std::clamp(ix, 0, cw - 1), x2 = std::clamp(ix + 1, 0, cw - 1);
      for (int c = 0; c < 3; ++c) {
        const double* p = src.data() + static_cast<std::size_t>(c) * plane;
        auto at = [&](int yy, int xx) {
          return p[static_cast<std::size_t>(y0 + yy) * w + (x0 + xx)];
        };
        const double top = at(y1, x1) * (1 - wx) + at(y1, x2) * wx;
        const double bot = at(y2, x1) * (1 - wx) + at(y2, x2) * wx;
        dst[(static_cast<std::size_t>(c) * out + oy) * out + ox] = top * (1 - wy) + bot * wy;
      }
    }
  }
  return dst;
}

}  // namespace detail

/// One augmented view of a 3xHxW float image, returned as planar
/// 3 x out_size x out_size in [0, 1]. Deterministic in the rng stream.
inline std::vector<double> augment_view(const std::vector<double>& img, int h, int w, int out_size,
                                        const AugmentConfig& cfg, Rng& rng) {
  // random resized crop
  int cy = 0, cx = 0, ch_ = h, cw = w;
  bool found = false;
  const double area = static_cast<double>(h) * w;
  for (int attempt = 0; attempt < 10 && !found; ++attempt) {
    const double target = area * rng.uniform(cfg.scale_min, cfg.scale_max);
    const double ratio =
        std::exp(rng.uniform(std::log(cfg.aspect_min), std::log(cfg.aspect_max)));
    const int tw = static_cast<int>(std::lround(std::sqrt(target * ratio)));
    const int th = static_cast<int>(std::lround(std::sqrt(target / ratio)));
    if (tw >= 1 && th >= 1 && tw <= w && th <= h) {
      cx = rng.uniform_int(w - tw + 1);
      cy = rng.uniform_int(h - th + 1);
      cw = tw;
      ch_ = th;
      found = true;
    }
  }
  if (!found) {  // center square fallback
    const int side = std::min(h, w);
    cy = (h - side) / 2;
    cx = (w - side) / 2;
    ch_ = cw = side;
  }
  auto view = detail::resize_crop(img, h, w, cy, cx, ch_, cw, out_size);
  const std::size_t plane = static_cast<std::size_t>(out_size) * out_size;

  if (rng.bernoulli(cfg.hflip_p)) {
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < out_size; ++y) {
        double* row = view.data() + static_cast<std::size_t>(c) * plane +
                      static_cast<std::size_t>(y) * out_size;
        std::reverse(row, row + out_size);
      }
  }

  auto clamp_all = [&] {
    for (auto& v : view) v = std::clamp(v, 0.0, 1.0);
  };

  if (rng.bernoulli(cfg.jitter_p)) {
    int order[4] = {0, 1, 2, 3};
    rng.shuffle(order, order + 4);
    for (int idx = 0; idx < 4; ++idx) {
      switch (order[idx]) {
        case 0: {  // brightness
          const double f = rng.uniform(std::max(0.0, 1 - cfg.brightness), 1 + cfg.brightness);
          for (auto& v : view) v *= f;
          clamp_all();
          break;
        }
        case 1: {  // contrast: blend with the mean grayscale level
          const double f = rng.uniform(std::max(0.0, 1 - cfg.contrast), 1 + cfg.contrast);
          double gm = 0;
          for (std::size_t i = 0; i < plane; ++i) gm += detail::gray_of(view.data(), i, plane);
          gm /= static_cast<double>(plane);
          for (auto& v : view) v = f * v + (1 - f) * gm;
          clamp_all();
          break;
        }
        case 2: {  // saturation: per-pixel blend with grayscale
          const double f = rng.uniform(std::max(0.0, 1 - cfg.saturation), 1 + cfg.saturation);
          for (std::size_t i = 0; i < plane; ++i) {
            const double g = detail::gray_of(view.data(), i, plane);
            for (int c = 0; c < 3; ++c) {
              double& v = view[static_cast<std::size_t>(c) * plane + i];
              v = f * v + (1 - f) * g;
            }
          }
          clamp_all();
          break;
        }
        default: {  // hue rotation in HSV
          const double delta = rng.uniform(-cfg.hue, cfg.hue);
          for (std::size_t i = 0; i < plane; ++i) {
            double& r = view[i];
            double& g = view[plane + i];
            double& b = view[2 * plane + i];
            double hh, ss, vv;
            detail::rgb_to_hsv(r, g, b, hh, ss, vv);
            hh = std::fmod(hh + delta + 1.0, 1.0);
            detail::hsv_to_rgb(hh, ss, vv, r, g, b);
          }
          clamp_all();
          break;
        }
      }
    }
  }

  if (rng.bernoulli(cfg.grayscale_p)) {
    for (std::size_t i = 0; i < plane; ++i) {
      const double g = detail::gray_of(view.data(), i, plane);
      view[i] = view[plane + i] = view[2 * plane + i] = g;
    }
  }
  return view;
}

/// `count` independently augmented patches of one image, one rng substream
/// per patch.
inline std::vector<std::vector<double>> sample_patches_independent(
    const std::vector<double>& img, int h, int w, int count, int size, const AugmentConfig& cfg,
    std::uint64_t seed, std::uint64_t epoch, std::uint64_t image_index, std::uint64_t view_tag) {
  if (size > std::min(h, w)) throw dim_error("sample_patches_independent: patch size too large");
  std::vector<std::vector<double>> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int p = 0; p < count; ++p) {
    Rng rng = Rng::substream(seed, {kStreamPatch, epoch, image_index, view_tag,
                                    static_cast<std::uint64_t>(p)});
    out.push_back(augment_view(img, h, w, size, cfg, rng));
  }
  return out;
}

/// Stacks augmented planar views into a normalized (N, 3, S, S) tensor.
template <typename S>
Tensor<S> views_to_tensor(const std::vector<std::vector<double>>& views, int size,
                          const ChannelStats& stats) {
  const int n = static_cast<int>(views.size());
  const std::size_t plane = static_cast<std::size_t>(size) * size;
  std::vector<S> data(static_cast<std::size_t>(n) * 3 * plane);
  for (int i = 0; i < n; ++i) {
    if (views[static_cast<std::size_t>(i)].size() != 3 * plane)
      throw dim_error("views_to_tensor: view size mismatch");
    for (int c = 0; c < 3; ++c) {
      const double m = stats.mean[static_cast<std::size_t>(c)];
      const double sd = stats.stddev[static_cast<std::size_t>(c)];
      const double* src = views[static_cast<std::size_t>(i)].data() + static_cast<std::size_t>(c) * plane;
      S* dst = data.data() + (static_cast<std::size_t>(i) * 3 + c) * plane;
      for (std::size_t k = 0; k < plane; ++k) dst[k] = static_cast<S>((src[k] - m) / sd);
    }
  }
  return Tensor<S>::from_data({n, 3, size, size}, std::move(data));
}

}  // namespace fastmoco
