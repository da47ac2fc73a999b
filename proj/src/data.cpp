#include "fastmoco/data.hpp"

#include "fastmoco/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace fastmoco {

std::vector<double> record_to_float(const ImageRecord& rec) {
  std::vector<double> out(kImagePixels);
  for (int i = 0; i < kImagePixels; ++i) out[static_cast<std::size_t>(i)] = rec.pixels[static_cast<std::size_t>(i)] / 255.0;
  return out;
}

Dataset load_cifar_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open dataset file: " + path);
  in.seekg(0, std::ios::end);
  const auto bytes = static_cast<std::int64_t>(in.tellg());
  in.seekg(0, std::ios::beg);
  if (bytes <= 0 || bytes % kRecordBytes != 0)
    throw std::runtime_error("truncated or malformed dataset file (" + std::to_string(bytes) +
                             " bytes, record size " + std::to_string(kRecordBytes) + "): " + path);
  Dataset ds;
  ds.records.resize(static_cast<std::size_t>(bytes / kRecordBytes));
  for (auto& rec : ds.records) {
    char label;
    in.read(&label, 1);
    in.read(reinterpret_cast<char*>(rec.pixels.data()), kImagePixels);
    rec.label = static_cast<std::uint8_t>(label);
    if (rec.label >= kNumClasses)
      throw std::runtime_error("bad label byte " + std::to_string(rec.label) + " in " + path);
  }
  if (!in) throw std::runtime_error("read error in dataset file: " + path);
  return ds;
}

Dataset load_cifar_files(const std::vector<std::string>& paths) {
  Dataset ds;
  for (const auto& p : paths) {
    auto part = load_cifar_file(p);
    ds.records.insert(ds.records.end(), part.records.begin(), part.records.end());
  }
  return ds;
}

Dataset load_cifar_dir(const std::string& dir, bool train) {
  std::vector<std::string> paths;
  if (train) {
    for (int i = 1; i <= 5; ++i) paths.push_back(dir + "/data_batch_" + std::to_string(i) + ".bin");
  } else {
    paths.push_back(dir + "/test_batch.bin");
  }
  return load_cifar_files(paths);
}

void write_cifar_file(const std::string& path, const Dataset& ds) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for write: " + path);
  for (const auto& rec : ds.records) {
    const char label = static_cast<char>(rec.label);
    out.write(&label, 1);
    out.write(reinterpret_cast<const char*>(rec.pixels.data()), kImagePixels);
  }
  if (!out) throw std::runtime_error("write error: " + path);
}

namespace {

struct Hsv {
  double h, s, v;
};

std::array<double, 3> hsv_to_rgb(const Hsv& c) {
  const double h6 = c.h * 6.0;
  const int i = static_cast<int>(std::floor(h6)) % 6;
  const double f = h6 - std::floor(h6);
  const double p = c.v * (1 - c.s);
  const double q = c.v * (1 - f * c.s);
  const double t = c.v * (1 - (1 - f) * c.s);
  switch (i) {
    case 0: return {c.v, t, p};
    case 1: return {q, c.v, p};
    case 2: return {p, c.v, t};
    case 3: return {p, q, c.v};
    case 4: return {t, p, c.v};
    default: return {c.v, p, q};
  }
}

// Signed distance-ish membership tests for the ten shape classes, in shape
// local coordinates (dx, dy) with half-extent `r`.
bool in_shape(int cls, double dx, double dy, double r) {
  const double ax = std::abs(dx), ay = std::abs(dy);
  switch (cls) {
    case 0:  // filled circle
      return dx * dx + dy * dy <= r * r;
    case 1: {  // ring
      const double d2 = dx * dx + dy * dy;
      const double inner = 0.55 * r;
      return d2 <= r * r && d2 >= inner * inner;
    }
    case 2:  // filled square
      return ax <= r * 0.82 && ay <= r * 0.82;
    case 3:  // upward triangle
      return dy <= r * 0.9 && dy >= -r * 0.9 && ax <= (dy + r * 0.9) * 0.58;
    case 4:  // plus
      return (ax <= 0.33 * r && ay <= r) || (ay <= 0.33 * r && ax <= r);
    case 5:  // diagonal cross
      return (std::abs(dx - dy) <= 0.45 * r || std::abs(dx + dy) <= 0.45 * r) && ax <= r && ay <= r;
    case 6:  // horizontal bar
      return ax <= r && ay <= 0.35 * r;
    case 7:  // vertical bar
      return ay <= r && ax <= 0.35 * r;
    case 8:  // diamond
      return ax + ay <= r * 1.1;
    default:  // two diagonal blocks
      return (dx <= 0 && dy <= 0 && ax <= r * 0.85 && ay <= r * 0.85) ||
             (dx >= 0 && dy >= 0 && ax <= r * 0.85 && ay <= r * 0.85);
  }
}

ImageRecord synth_image(int cls, Rng& rng) {
  ImageRecord rec;
  rec.label = static_cast<std::uint8_t>(cls);

  // Background: two-tone gradient with mild per-pixel noise.
  const Hsv bg_a{rng.uniform(), rng.uniform(0.1, 0.5), rng.uniform(0.2, 0.75)};
  const Hsv bg_b{rng.uniform(), rng.uniform(0.1, 0.5), rng.uniform(0.2, 0.75)};
  const auto rgb_a = hsv_to_rgb(bg_a);
  const auto rgb_b = hsv_to_rgb(bg_b);
  const bool horizontal = rng.bernoulli(0.5);
  const double noise = rng.uniform(0.02, 0.08);

  // Shape: saturated and bright so it contrasts with the background.
  const Hsv fg{rng.uniform(), rng.uniform(0.7, 1.0), rng.uniform(0.75, 1.0)};
  const auto rgb_fg = hsv_to_rgb(fg);
  const double cx = kImageSide / 2.0 + rng.uniform(-4.0, 4.0);
  const double cy = kImageSide / 2.0 + rng.uniform(-4.0, 4.0);
  const double r = rng.uniform(7.0, 11.0);

  for (int y = 0; y < kImageSide; ++y) {
    for (int x = 0; x < kImageSide; ++x) {
      const double t = (horizontal ? x : y) / static_cast<double>(kImageSide - 1);
      std::array<double, 3> px;
      for (int ch = 0; ch < 3; ++ch)
        px[static_cast<std::size_t>(ch)] =
            rgb_a[static_cast<std::size_t>(ch)] * (1 - t) + rgb_b[static_cast<std::size_t>(ch)] * t;
      if (in_shape(cls, x - cx, y - cy, r)) px = rgb_fg;
      for (int ch = 0; ch < 3; ++ch) {
        double v = px[static_cast<std::size_t>(ch)] + rng.normal() * noise;
        v = std::clamp(v, 0.0, 1.0);
        rec.pixels[static_cast<std::size_t>(ch * kImageSide * kImageSide + y * kImageSide + x)] =
            static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
    }
  }
  return rec;
}

}  // namespace

Dataset synth_dataset(int n, std::uint64_t seed, bool stratified) {
  if (n <= 0) throw std::invalid_argument("synth_dataset: n must be positive");
  Dataset ds;
  ds.records.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    Rng rng = Rng::substream(seed, {kStreamSynth, static_cast<std::uint64_t>(i)});
    const int cls = stratified ? i % kNumClasses : rng.uniform_int(kNumClasses);
    ds.records.push_back(synth_image(cls, rng));
  }
  return ds;
}

ChannelStats cifar_stats() {
  return {{0.4914, 0.4822, 0.4465}, {0.2470, 0.2435, 0.2616}};
}

ChannelStats synth_stats() { return {{0.5, 0.5, 0.5}, {0.25, 0.25, 0.25}}; }

}  // namespace fastmoco
