#pragma once

#include "fastmoco/augment.hpp"
#include "fastmoco/data.hpp"
#include "fastmoco/nn.hpp"
#include "fastmoco/rng.hpp"
#include "fastmoco/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace fastmoco {

/// Mean over dimensions of the per-dimension std of l2-normalized
/// embeddings; near 1/sqrt(d) for well-spread vectors, 0 at full collapse.
template <typename S>
double collapse_metric(const Tensor<S>& embeddings) {
  if (embeddings.rank() != 2 || embeddings.dim(0) < 2)
    throw dim_error("collapse_metric: needs at least two embedding rows");
  const int n = embeddings.dim(0), d = embeddings.dim(1);
  std::vector<double> normed(static_cast<std::size_t>(n) * d);
  const S* p = embeddings.data();
  for (int r = 0; r < n; ++r) {
    double sq = 0;
    for (int c = 0; c < d; ++c) {
      const double v = p[static_cast<std::size_t>(r) * d + c];
      sq += v * v;
    }
    const double inv = 1.0 / std::max(std::sqrt(sq), 1e-12);
    for (int c = 0; c < d; ++c)
      normed[static_cast<std::size_t>(r) * d + c] = p[static_cast<std::size_t>(r) * d + c] * inv;
  }
  double acc = 0;
  for (int c = 0; c < d; ++c) {
    double m = 0;
    for (int r = 0; r < n; ++r) m += normed[static_cast<std::size_t>(r) * d + c];
    m /= n;
    double var = 0;
    for (int r = 0; r < n; ++r) {
      const double dv = normed[static_cast<std::size_t>(r) * d + c] - m;
      var += dv * dv;
    }
    acc += std::sqrt(var / n);
  }
  return acc / d;
}

/// Embeds a dataset with a frozen encoder in eval mode (no augmentation:
/// pixels are only normalized). Returns (N, D).
template <typename S>
Tensor<S> embed_dataset(Encoder<S>& encoder, const Dataset& ds, const ChannelStats& stats,
                        int image_size, int batch = 256) {
  NoGradGuard ng;
  const int n = ds.size();
  const int d = encoder.embedding_dim();
  std::vector<S> all(static_cast<std::size_t>(n) * d);
  const AugmentConfig ident = AugmentConfig::identity();
  Rng unused(0);
  for (int start = 0; start < n; start += batch) {
    const int count = std::min(batch, n - start);
    std::vector<std::vector<double>> views;
    views.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
      auto img = record_to_float(ds.records[static_cast<std::size_t>(start + i)]);
      views.push_back(augment_view(img, kImageSide, kImageSide, image_size, ident, unused));
    }
    auto x = views_to_tensor<S>(views, image_size, stats);
    auto emb = encoder.forward(x, /*training=*/false);
    std::copy(emb.vec().begin(), emb.vec().end(), all.begin() + static_cast<std::size_t>(start) * d);
  }
  return Tensor<S>::from_data({n, d}, std::move(all));
}

/// Trains a linear classifier on frozen embeddings (SGD with momentum,
/// cosine schedule, no weight decay) and reports top-1 on the test split.
template <typename S>
double linear_probe_on_embeddings(const Tensor<S>& train_emb, const std::vector<int>& train_labels,
                                  const Tensor<S>& test_emb, const std::vector<int>& test_labels,
                                  double lr0, int epochs, int batch, std::uint64_t seed,
                                  double momentum = 0.9) {
  const int n = train_emb.dim(0), d = train_emb.dim(1);
  Rng init = Rng::substream(seed, {kStreamProbe, 0});
  auto w = Tensor<S>::zeros({kNumClasses, d});
  detail::scaled_normal_fill(w, d, init);
  w.set_requires_grad(true);
  auto b = Tensor<S>::zeros({kNumClasses});
  b.set_requires_grad(true);

  std::vector<S> mw(w.vec().size(), S(0)), mb(b.vec().size(), S(0));
  const long steps_per_epoch = std::max(1, n / batch);
  const long total_steps = steps_per_epoch * epochs;
  long step = 0;
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;

  for (int epoch = 0; epoch < epochs; ++epoch) {
    Rng perm = Rng::substream(seed, {kStreamProbe, 1, static_cast<std::uint64_t>(epoch)});
    perm.shuffle(order.begin(), order.end());
    for (long bi = 0; bi < steps_per_epoch; ++bi, ++step) {
      const double t = total_steps > 1 ? static_cast<double>(step) / (total_steps - 1) : 0.0;
      const S lr = static_cast<S>(lr0 * 0.5 * (1.0 + std::cos(M_PI * t)));
      std::vector<int> rows(order.begin() + bi * batch,
                            order.begin() + std::min<long>(n, (bi + 1) * batch));
      std::vector<int> labels;
      labels.reserve(rows.size());
      for (int r : rows) labels.push_back(train_labels[static_cast<std::size_t>(r)]);
      auto x = select_rows(train_emb, rows);
      auto loss = softmax_cross_entropy(linear(x, w, b), labels);
      backward(loss);
      S* pw = w.data();
      const std::vector<S>& gw = w.grad();
      for (std::size_t i = 0; i < mw.size(); ++i) {
        mw[i] = static_cast<S>(momentum) * mw[i] + gw[i];
        pw[i] -= lr * mw[i];
      }
      S* pb = b.data();
      const std::vector<S>& gb = b.grad();
      for (std::size_t i = 0; i < mb.size(); ++i) {
        mb[i] = static_cast<S>(momentum) * mb[i] + gb[i];
        pb[i] -= lr * mb[i];
      }
      w.zero_grad();
      b.zero_grad();
    }
  }

  NoGradGuard ng;
  auto logits = linear(test_emb, w, b);
  int correct = 0;
  const int m = test_emb.dim(0);
  for (int r = 0; r < m; ++r) {
    const S* row = logits.data() + static_cast<std::size_t>(r) * kNumClasses;
    int best = 0;
    for (int c = 1; c < kNumClasses; ++c)
      if (row[c] > row[best]) best = c;
    if (best == test_labels[static_cast<std::size_t>(r)]) ++correct;
  }
  return 100.0 * correct / m;
}

/// Cosine-similarity k-nearest-neighbor classification accuracy (%).
template <typename S>
double knn_probe(const Tensor<S>& gallery, const std::vector<int>& gallery_labels,
                 const Tensor<S>& queries, const std::vector<int>& query_labels, int k) {
  if (k < 1) throw std::invalid_argument("knn_probe: k must be >= 1");
  if (gallery.dim(0) < 1) throw std::invalid_argument("knn_probe: empty gallery");
  NoGradGuard ng;
  auto g = l2_normalize(gallery.clone_detached());
  auto q = l2_normalize(queries.clone_detached());
  auto sims = matmul_nt(q, g);  // (Q, G)
  const int qn = q.dim(0), gn = g.dim(0);
  const int kk = std::min(k, gn);
  int correct = 0;
  std::vector<int> idx(static_cast<std::size_t>(gn));
  for (int r = 0; r < qn; ++r) {
    const S* row = sims.data() + static_cast<std::size_t>(r) * gn;
    for (int i = 0; i < gn; ++i) idx[static_cast<std::size_t>(i)] = i;
    std::partial_sort(idx.begin(), idx.begin() + kk, idx.end(),
                      [&](int a, int c) { return row[a] > row[c]; });
    // similarity-weighted vote; negative similarities carry no weight
    double votes[kNumClasses] = {0};
    for (int i = 0; i < kk; ++i) {
      const int gi = idx[static_cast<std::size_t>(i)];
      votes[gallery_labels[static_cast<std::size_t>(gi)]] += std::max(0.0, static_cast<double>(row[gi]));
    }
    int best = 0;
    for (int c = 1; c < kNumClasses; ++c)
      if (votes[c] > votes[best]) best = c;
    if (best == query_labels[static_cast<std::size_t>(r)]) ++correct;
  }
  return 100.0 * correct / qn;
}

inline std::vector<int> dataset_labels(const Dataset& ds) {
  std::vector<int> out;
  out.reserve(ds.records.size());
  for (const auto& r : ds.records) out.push_back(r.label);
  return out;
}

}  // namespace fastmoco
