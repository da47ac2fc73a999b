#pragma once

#include <Eigen/Dense>

#ifdef _OPENMP
#include <omp.h>
#endif

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace fastmoco {

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) {
    if (d <= 0) throw std::invalid_argument("shape extents must be positive");
    n *= d;
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string r = "(";
  for (std::size_t i = 0; i < s.size(); ++i) r += (i ? "," : "") + std::to_string(s[i]);
  return r + ")";
}

struct dim_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct domain_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

template <typename S>
struct TensorImpl {
  Shape shape;
  std::vector<S> data;
  std::vector<S> grad;  // sized lazily; persistent on leaves
  bool requires_grad = false;
  bool leaf = true;
  std::vector<std::shared_ptr<TensorImpl>> parents;
  std::function<void(TensorImpl&)> backward;

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), S(0));
  }
  void release_tape() {
    backward = nullptr;
    parents.clear();
    std::vector<S>().swap(grad);
  }
};

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables tape recording for the enclosing scope (target-branch forwards,
/// evaluation, metric computation).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// Dense row-major tensor with reverse-mode gradient tracking. Value-semantic
/// handle: copies share the underlying buffer and tape node.
template <typename S>
class Tensor {
  static_assert(std::is_floating_point_v<S>);

 public:
  using Impl = detail::TensorImpl<S>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape) {
    auto n = shape_numel(shape);
    return from_data(std::move(shape), std::vector<S>(static_cast<std::size_t>(n), S(0)));
  }
  static Tensor full(Shape shape, S v) {
    auto n = shape_numel(shape);
    return from_data(std::move(shape), std::vector<S>(static_cast<std::size_t>(n), v));
  }
  static Tensor scalar(S v) { return from_data({1}, {v}); }
  static Tensor from_data(Shape shape, std::vector<S> data) {
    if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
      throw dim_error("tensor data length does not match shape " + shape_str(shape));
    auto impl = std::make_shared<Impl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    return Tensor(std::move(impl));
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int dim(int i) const { return impl_->shape[static_cast<std::size_t>(i)]; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  std::int64_t numel() const { return impl_->numel(); }

  S* data() { return impl_->data.data(); }
  const S* data() const { return impl_->data.data(); }
  std::vector<S>& vec() { return impl_->data; }
  const std::vector<S>& vec() const { return impl_->data; }

  S item() const {
    if (numel() != 1) throw dim_error("item() requires a scalar tensor");
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  bool is_leaf() const { return impl_->leaf; }

  /// Marks a leaf tensor as a differentiable parameter.
  Tensor& set_requires_grad(bool v = true) {
    if (!impl_->leaf) throw std::logic_error("set_requires_grad only valid on leaf tensors");
    impl_->requires_grad = v;
    return *this;
  }

  bool has_grad() const { return impl_->grad.size() == impl_->data.size(); }
  std::vector<S>& grad() {
    impl_->ensure_grad();
    return impl_->grad;
  }
  const std::vector<S>& grad() const {
    impl_->ensure_grad();
    return impl_->grad;
  }
  void zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), S(0));
  }

  /// Deep copy of the value, detached from any tape.
  Tensor clone_detached() const { return from_data(impl_->shape, impl_->data); }

  std::shared_ptr<Impl> impl() const { return impl_; }

 private:
  std::shared_ptr<Impl> impl_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

namespace detail {

/// Records an op result on the tape. `bwd` receives the output node and must
/// accumulate into the parents' grad buffers (call ensure_grad first).
template <typename S, typename F>
Tensor<S> record(Shape shape, std::vector<S> data, std::vector<Tensor<S>> inputs, F&& bwd) {
  auto out = Tensor<S>::from_data(std::move(shape), std::move(data));
  bool need = grad_mode_flag();
  if (need) {
    need = false;
    for (const auto& t : inputs)
      if (t.requires_grad()) {
        need = true;
        break;
      }
  }
  if (need) {
    auto impl = out.impl();
    impl->requires_grad = true;
    impl->leaf = false;
    impl->parents.reserve(inputs.size());
    for (const auto& t : inputs) impl->parents.push_back(t.impl());
    impl->backward = std::forward<F>(bwd);
  }
  return out;
}

template <typename S>
using EMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using EMap = Eigen::Map<EMat<S>>;
template <typename S>
using ECMap = Eigen::Map<const EMat<S>>;

template <typename S>
void check_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  if (a.shape() != b.shape())
    throw dim_error(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                    shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape(a, b, "add");
  std::vector<S> out(a.vec());
  const S* pb = b.data();
  const std::int64_t n_el = static_cast<std::int64_t>(out.size());
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (n_el > (1 << 16))
#endif
  for (std::int64_t i = 0; i < n_el; ++i) out[static_cast<std::size_t>(i)] += pb[i];
  auto ia = a.impl();
  auto ib = b.impl();
  return detail::record(a.shape(), std::move(out), {a, b}, [ia, ib](auto& self) {
    const S* g = self.grad.data();
    const std::int64_t n = static_cast<std::int64_t>(self.data.size());
    if (ia->requires_grad) {
      ia->ensure_grad();
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (n > (1 << 16))
#endif
      for (std::int64_t i = 0; i < n; ++i) ia->grad[static_cast<std::size_t>(i)] += g[i];
    }
    if (ib->requires_grad) {
      ib->ensure_grad();
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (n > (1 << 16))
#endif
      for (std::int64_t i = 0; i < n; ++i) ib->grad[static_cast<std::size_t>(i)] += g[i];
    }
  });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape(a, b, "sub");
  std::vector<S> out(a.vec());
  const S* pb = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= pb[i];
  auto ia = a.impl();
  auto ib = b.impl();
  return detail::record(a.shape(), std::move(out), {a, b}, [ia, ib](auto& self) {
    const S* g = self.grad.data();
    const std::size_t n = self.data.size();
    if (ia->requires_grad) {
      ia->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) ia->grad[i] += g[i];
    }
    if (ib->requires_grad) {
      ib->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) ib->grad[i] -= g[i];
    }
  });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape(a, b, "mul");
  std::vector<S> out(a.vec());
  const S* pb = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= pb[i];
  auto ia = a.impl();
  auto ib = b.impl();
  return detail::record(a.shape(), std::move(out), {a, b}, [ia, ib](auto& self) {
    const S* g = self.grad.data();
    const std::size_t n = self.data.size();
    if (ia->requires_grad) {
      ia->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) ia->grad[i] += g[i] * ib->data[i];
    }
    if (ib->requires_grad) {
      ib->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) ib->grad[i] += g[i] * ia->data[i];
    }
  });
}

template <typename S>
Tensor<S> mul_scalar(const Tensor<S>& a, S c) {
  std::vector<S> out(a.vec());
  for (auto& v : out) v *= c;
  auto ia = a.impl();
  return detail::record(a.shape(), std::move(out), {a}, [ia, c](auto& self) {
    if (!ia->requires_grad) return;
    ia->ensure_grad();
    const S* g = self.grad.data();
    for (std::size_t i = 0; i < self.data.size(); ++i) ia->grad[i] += g[i] * c;
  });
}

template <typename S>
Tensor<S> relu(const Tensor<S>& a) {
  std::vector<S> out(a.vec());
  const std::int64_t n_el = static_cast<std::int64_t>(out.size());
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (n_el > (1 << 16))
#endif
  for (std::int64_t i = 0; i < n_el; ++i) {
    S& v = out[static_cast<std::size_t>(i)];
    v = v > S(0) ? v : S(0);
  }
  auto ia = a.impl();
  return detail::record(a.shape(), std::move(out), {a}, [ia](auto& self) {
    if (!ia->requires_grad) return;
    ia->ensure_grad();
    const S* g = self.grad.data();
    const std::int64_t n_el = static_cast<std::int64_t>(self.data.size());
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (n_el > (1 << 16))
#endif
    for (std::int64_t i = 0; i < n_el; ++i)
      if (ia->data[static_cast<std::size_t>(i)] > S(0))
        ia->grad[static_cast<std::size_t>(i)] += g[i];
  });
}

template <typename S>
Tensor<S> exp(const Tensor<S>& a) {
  std::vector<S> out(a.vec());
  for (auto& v : out) v = std::exp(v);
  auto ia = a.impl();
  return detail::record(a.shape(), std::move(out), {a}, [ia](auto& self) {
    if (!ia->requires_grad) return;
    ia->ensure_grad();
    const S* g = self.grad.data();
    for (std::size_t i = 0; i < self.data.size(); ++i) ia->grad[i] += g[i] * self.data[i];
  });
}

template <typename S>
Tensor<S> log(const Tensor<S>& a) {
  std::vector<S> out(a.vec());
  for (auto& v : out) {
    if (v <= S(0)) throw domain_error("log: non-positive input");
    v = std::log(v);
  }
  auto ia = a.impl();
  return detail::record(a.shape(), std::move(out), {a}, [ia](auto& self) {
    if (!ia->requires_grad) return;
    ia->ensure_grad();
    const S* g = self.grad.data();
    for (std::size_t i = 0; i < self.data.size(); ++i) ia->grad[i] += g[i] / ia->data[i];
  });
}

template <typename S>
Tensor<S> max_elementwise(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape(a, b, "max_elementwise");
  std::vector<S> out(a.vec());
  const S* pb = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(out[i], pb[i]);
  auto ia = a.impl();
  auto ib = b.impl();
  // Ties route to the first argument.
  return detail::record(a.shape(), std::move(out), {a, b}, [ia, ib](auto& self) {
    const S* g = self.grad.data();
    const std::size_t n = self.data.size();
    if (ia->requires_grad) ia->ensure_grad();
    if (ib->requires_grad) ib->ensure_grad();
    for (std::size_t i = 0; i < n; ++i) {
      if (ia->data[i] >= ib->data[i]) {
        if (ia->requires_grad) ia->grad[i] += g[i];
      } else if (ib->requires_grad) {
        ib->grad[i] += g[i];
      }
    }
  });
}

template <typename S>
Tensor<S> sum(const Tensor<S>& a) {
  S acc = S(0);
  for (S v : a.vec()) acc += v;  // fixed row-major order
  auto ia = a.impl();
  return detail::record<S>({1}, {acc}, {a}, [ia](auto& self) {
    if (!ia->requires_grad) return;
    ia->ensure_grad();
    const S g = self.grad[0];
    for (auto& gv : ia->grad) gv += g;
  });
}

template <typename S>
Tensor<S> mean(const Tensor<S>& a) {
  const S inv = S(1) / static_cast<S>(a.numel());
  S acc = S(0);
  for (S v : a.vec()) acc += v;
  auto ia = a.impl();
  return detail::record<S>({1}, {acc * inv}, {a}, [ia, inv](auto& self) {
    if (!ia->requires_grad) return;
    ia->ensure_grad();
    const S g = self.grad[0] * inv;
    for (auto& gv : ia->grad) gv += g;
  });
}

// ---------------------------------------------------------------------------
// Matrix ops (Eigen-backed)
// ---------------------------------------------------------------------------

/// C = A(M,K) * B(K,N)
template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw dim_error("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                    shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<S> out(static_cast<std::size_t>(m) * n);
  detail::EMap<S>(out.data(), m, n).noalias() =
      detail::ECMap<S>(a.data(), m, k) * detail::ECMap<S>(b.data(), k, n);
  auto ia = a.impl();
  auto ib = b.impl();
  return detail::record<S>({m, n}, std::move(out), {a, b}, [ia, ib, m, k, n](auto& self) {
    detail::ECMap<S> g(self.grad.data(), m, n);
    if (ia->requires_grad) {
      ia->ensure_grad();
      detail::EMap<S>(ia->grad.data(), m, k).noalias() +=
          g * detail::ECMap<S>(ib->data.data(), k, n).transpose();
    }
    if (ib->requires_grad) {
      ib->ensure_grad();
      detail::EMap<S>(ib->grad.data(), k, n).noalias() +=
          detail::ECMap<S>(ia->data.data(), m, k).transpose() * g;
    }
  });
}

/// C = A(M,K) * B(N,K)^T
template <typename S>
Tensor<S> matmul_nt(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1))
    throw dim_error("matmul_nt: incompatible shapes " + shape_str(a.shape()) + " x " +
                    shape_str(b.shape()) + "^T");
  const int m = a.dim(0), k = a.dim(1), n = b.dim(0);
  std::vector<S> out(static_cast<std::size_t>(m) * n);
  detail::EMap<S>(out.data(), m, n).noalias() =
      detail::ECMap<S>(a.data(), m, k) * detail::ECMap<S>(b.data(), n, k).transpose();
  auto ia = a.impl();
  auto ib = b.impl();
  return detail::record<S>({m, n}, std::move(out), {a, b}, [ia, ib, m, k, n](auto& self) {
    detail::ECMap<S> g(self.grad.data(), m, n);
    if (ia->requires_grad) {
      ia->ensure_grad();
      detail::EMap<S>(ia->grad.data(), m, k).noalias() +=
          g * detail::ECMap<S>(ib->data.data(), n, k);
    }
    if (ib->requires_grad) {
      ib->ensure_grad();
      detail::EMap<S>(ib->grad.data(), n, k).noalias() +=
          g.transpose() * detail::ECMap<S>(ia->data.data(), m, k);
    }
  });
}

/// y = x(N,I) * w(O,I)^T + b(O). Pass an undefined bias tensor to skip it.
template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
  if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(1))
    throw dim_error("linear: incompatible shapes " + shape_str(x.shape()) + " and " +
                    shape_str(w.shape()));
  const int n = x.dim(0), in = x.dim(1), out_dim = w.dim(0);
  const bool has_bias = b.defined();
  if (has_bias && (b.rank() != 1 || b.dim(0) != out_dim)) throw dim_error("linear: bad bias shape");
  std::vector<S> out(static_cast<std::size_t>(n) * out_dim);
  detail::EMap<S> y(out.data(), n, out_dim);
  y.noalias() =
      detail::ECMap<S>(x.data(), n, in) * detail::ECMap<S>(w.data(), out_dim, in).transpose();
  if (has_bias) {
    const S* pb = b.data();
    for (int r = 0; r < n; ++r) {
      S* row = out.data() + static_cast<std::size_t>(r) * out_dim;
      for (int c = 0; c < out_dim; ++c) row[c] += pb[c];
    }
  }
  std::vector<Tensor<S>> inputs = {x, w};
  if (has_bias) inputs.push_back(b);
  auto ix = x.impl();
  auto iw = w.impl();
  auto ib = has_bias ? b.impl() : nullptr;
  return detail::record<S>({n, out_dim}, std::move(out), std::move(inputs),
                           [ix, iw, ib, n, in, out_dim](auto& self) {
                             detail::ECMap<S> g(self.grad.data(), n, out_dim);
                             if (ix->requires_grad) {
                               ix->ensure_grad();
                               detail::EMap<S>(ix->grad.data(), n, in).noalias() +=
                                   g * detail::ECMap<S>(iw->data.data(), out_dim, in);
                             }
                             if (iw->requires_grad) {
                               iw->ensure_grad();
                               detail::EMap<S>(iw->grad.data(), out_dim, in).noalias() +=
                                   g.transpose() * detail::ECMap<S>(ix->data.data(), n, in);
                             }
                             if (ib && ib->requires_grad) {
                               ib->ensure_grad();
                               for (int r = 0; r < n; ++r) {
                                 const S* grow =
                                     self.grad.data() + static_cast<std::size_t>(r) * out_dim;
                                 for (int c = 0; c < out_dim; ++c) ib->grad[c] += grow[c];
                               }
                             }
                           });
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> reshape(const Tensor<S>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) throw dim_error("reshape: element count mismatch");
  auto ia = a.impl();
  return detail::record(std::move(shape), std::vector<S>(a.vec()), {a}, [ia](auto& self) {
    if (!ia->requires_grad) return;
    ia->ensure_grad();
    for (std::size_t i = 0; i < self.data.size(); ++i) ia->grad[i] += self.grad[i];
  });
}

/// Concatenates two 4-d tensors along `axis` (2 = height, 3 = width).
template <typename S>
Tensor<S> concat(const Tensor<S>& a, const Tensor<S>& b, int axis) {
  if (a.rank() != 4 || b.rank() != 4) throw dim_error("concat: expects NCHW tensors");
  if (axis != 2 && axis != 3) throw dim_error("concat: axis must be 2 or 3");
  for (int d = 0; d < 4; ++d)
    if (d != axis && a.dim(d) != b.dim(d)) throw dim_error("concat: shapes disagree off-axis");
  const int n = a.dim(0), c = a.dim(1);
  const int ha = a.dim(2), wa = a.dim(3), hb = b.dim(2), wb = b.dim(3);
  const int ho = axis == 2 ? ha + hb : ha;
  const int wo = axis == 3 ? wa + wb : wa;
  std::vector<S> out(static_cast<std::size_t>(n) * c * ho * wo);
  const S* pa = a.data();
  const S* pb = b.data();
  for (int i = 0; i < n * c; ++i) {
    S* dst = out.data() + static_cast<std::size_t>(i) * ho * wo;
    const S* sa = pa + static_cast<std::size_t>(i) * ha * wa;
    const S* sb = pb + static_cast<std::size_t>(i) * hb * wb;
    if (axis == 2) {
      std::copy(sa, sa + ha * wa, dst);
      std::copy(sb, sb + hb * wb, dst + ha * wa);
    } else {
      for (int r = 0; r < ho; ++r) {
        std::copy(sa + r * wa, sa + (r + 1) * wa, dst + r * wo);
        std::copy(sb + r * wb, sb + (r + 1) * wb, dst + r * wo + wa);
      }
    }
  }
  auto ia = a.impl();
  auto ib = b.impl();
  return detail::record<S>({n, c, ho, wo}, std::move(out), {a, b},
                           [ia, ib, n, c, ha, wa, hb, wb, ho, wo, axis](auto& self) {
                             if (ia->requires_grad) ia->ensure_grad();
                             if (ib->requires_grad) ib->ensure_grad();
                             const S* g = self.grad.data();
                             for (int i = 0; i < n * c; ++i) {
                               const S* src = g + static_cast<std::size_t>(i) * ho * wo;
                               S* ga = ia->requires_grad
                                           ? ia->grad.data() + static_cast<std::size_t>(i) * ha * wa
                                           : nullptr;
                               S* gb = ib->requires_grad
                                           ? ib->grad.data() + static_cast<std::size_t>(i) * hb * wb
                                           : nullptr;
                               if (axis == 2) {
                                 if (ga)
                                   for (int k = 0; k < ha * wa; ++k) ga[k] += src[k];
                                 if (gb)
                                   for (int k = 0; k < hb * wb; ++k) gb[k] += src[ha * wa + k];
                               } else {
                                 for (int r = 0; r < ho; ++r) {
                                   if (ga)
                                     for (int k = 0; k < wa; ++k) ga[r * wa + k] += src[r * wo + k];
                                   if (gb)
                                     for (int k = 0; k < wb; ++k)
                                       gb[r * wb + k] += src[r * wo + wa + k];
                                 }
                               }
                             }
                           });
}

/// Spatial crop of an NCHW tensor: rows [h0, h0+hlen), cols [w0, w0+wlen).
template <typename S>
Tensor<S> crop(const Tensor<S>& x, int h0, int hlen, int w0, int wlen) {
  if (x.rank() != 4) throw dim_error("crop: expects NCHW tensor");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h0 < 0 || w0 < 0 || hlen <= 0 || wlen <= 0 || h0 + hlen > h || w0 + wlen > w)
    throw dim_error("crop: window out of bounds");
  std::vector<S> out(static_cast<std::size_t>(n) * c * hlen * wlen);
  const S* px = x.data();
  for (int i = 0; i < n * c; ++i) {
    const S* src = px + (static_cast<std::size_t>(i) * h + h0) * w + w0;
    S* dst = out.data() + static_cast<std::size_t>(i) * hlen * wlen;
    for (int r = 0; r < hlen; ++r) std::copy(src + r * w, src + r * w + wlen, dst + r * wlen);
  }
  auto ix = x.impl();
  return detail::record<S>({n, c, hlen, wlen}, std::move(out), {x},
                           [ix, n, c, h, w, h0, w0, hlen, wlen](auto& self) {
                             if (!ix->requires_grad) return;
                             ix->ensure_grad();
                             const S* g = self.grad.data();
                             for (int i = 0; i < n * c; ++i) {
                               S* dst = ix->grad.data() + (static_cast<std::size_t>(i) * h + h0) * w + w0;
                               const S* src = g + static_cast<std::size_t>(i) * hlen * wlen;
                               for (int r = 0; r < hlen; ++r)
                                 for (int k = 0; k < wlen; ++k) dst[r * w + k] += src[r * wlen + k];
                             }
                           });
}

/// Gathers slices along dim 0 (rows of a matrix, images of an NCHW batch).
template <typename S>
Tensor<S> select_rows(const Tensor<S>& x, std::vector<int> rows) {
  if (x.rank() < 1) throw dim_error("select_rows: expects rank >= 1");
  const int n = x.dim(0);
  const std::int64_t d = x.numel() / n;
  for (int r : rows)
    if (r < 0 || r >= n) throw dim_error("select_rows: row index out of range");
  std::vector<S> out(rows.size() * static_cast<std::size_t>(d));
  const S* px = x.data();
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy(px + static_cast<std::size_t>(rows[i]) * d, px + (static_cast<std::size_t>(rows[i]) + 1) * d,
              out.data() + i * static_cast<std::size_t>(d));
  Shape shape = x.shape();
  shape[0] = static_cast<int>(rows.size());
  auto ix = x.impl();
  return detail::record<S>(std::move(shape), std::move(out), {x},
                           [ix, rows = std::move(rows), d](auto& self) {
                             if (!ix->requires_grad) return;
                             ix->ensure_grad();
                             const S* g = self.grad.data();
                             for (std::size_t i = 0; i < rows.size(); ++i) {
                               S* dst = ix->grad.data() + static_cast<std::size_t>(rows[i]) * d;
                               const S* src = g + i * static_cast<std::size_t>(d);
                               for (std::int64_t k = 0; k < d; ++k) dst[k] += src[k];
                             }
                           });
}

/// Stacks two tensors along dim 0 (shapes must agree past dim 0).
template <typename S>
Tensor<S> concat_rows(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != b.rank() || a.rank() < 1) throw dim_error("concat_rows: rank mismatch");
  for (int i = 1; i < a.rank(); ++i)
    if (a.dim(i) != b.dim(i)) throw dim_error("concat_rows: shapes disagree past dim 0");
  std::vector<S> data(a.vec().size() + b.vec().size());
  std::copy(a.vec().begin(), a.vec().end(), data.begin());
  std::copy(b.vec().begin(), b.vec().end(), data.begin() + static_cast<std::ptrdiff_t>(a.vec().size()));
  Shape shape = a.shape();
  shape[0] += b.dim(0);
  auto ia = a.impl();
  auto ib = b.impl();
  return detail::record(std::move(shape), std::move(data), {a, b}, [ia, ib](auto& self) {
    const S* g = self.grad.data();
    if (ia->requires_grad) {
      ia->ensure_grad();
      for (std::size_t i = 0; i < ia->data.size(); ++i) ia->grad[i] += g[i];
    }
    if (ib->requires_grad) {
      ib->ensure_grad();
      const S* gb = g + ia->data.size();
      for (std::size_t i = 0; i < ib->data.size(); ++i) ib->grad[i] += gb[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Normalization / pooling / loss
// ---------------------------------------------------------------------------

/// Row-wise l2 normalization of an (N, d) tensor. Rows with norm below eps
/// are degenerate and rejected.
template <typename S>
Tensor<S> l2_normalize(const Tensor<S>& z, S eps = S(1e-12)) {
  if (z.rank() != 2) throw dim_error("l2_normalize: expects 2-d tensor");
  const int n = z.dim(0), d = z.dim(1);
  std::vector<S> out(z.vec());
  std::vector<S> inv_norm(static_cast<std::size_t>(n));
  for (int r = 0; r < n; ++r) {
    S* row = out.data() + static_cast<std::size_t>(r) * d;
    S sq = S(0);
    for (int k = 0; k < d; ++k) sq += row[k] * row[k];
    const S norm = std::sqrt(sq);
    if (norm < eps) throw domain_error("l2_normalize: degenerate (near-zero) vector");
    inv_norm[static_cast<std::size_t>(r)] = S(1) / norm;
    for (int k = 0; k < d; ++k) row[k] *= inv_norm[static_cast<std::size_t>(r)];
  }
  auto iz = z.impl();
  return detail::record<S>({n, d}, std::move(out), {z},
                           [iz, inv_norm = std::move(inv_norm), n, d](auto& self) {
                             if (!iz->requires_grad) return;
                             iz->ensure_grad();
                             for (int r = 0; r < n; ++r) {
                               const S* y = self.data.data() + static_cast<std::size_t>(r) * d;
                               const S* g = self.grad.data() + static_cast<std::size_t>(r) * d;
                               S* gz = iz->grad.data() + static_cast<std::size_t>(r) * d;
                               S dot = S(0);
                               for (int k = 0; k < d; ++k) dot += g[k] * y[k];
                               const S s = inv_norm[static_cast<std::size_t>(r)];
                               for (int k = 0; k < d; ++k) gz[k] += s * (g[k] - dot * y[k]);
                             }
                           });
}

/// (N, C, H, W) -> (N, C) spatial mean.
template <typename S>
Tensor<S> global_avg_pool(const Tensor<S>& x) {
  if (x.rank() != 4) throw dim_error("global_avg_pool: expects NCHW tensor");
  const int n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  const S inv = S(1) / static_cast<S>(hw);
  std::vector<S> out(static_cast<std::size_t>(n) * c);
  const S* px = x.data();
  for (int i = 0; i < n * c; ++i) {
    S acc = S(0);
    const S* src = px + static_cast<std::size_t>(i) * hw;
    for (int k = 0; k < hw; ++k) acc += src[k];
    out[static_cast<std::size_t>(i)] = acc * inv;
  }
  auto ix = x.impl();
  return detail::record<S>({n, c}, std::move(out), {x}, [ix, n, c, hw, inv](auto& self) {
    if (!ix->requires_grad) return;
    ix->ensure_grad();
    for (int i = 0; i < n * c; ++i) {
      const S g = self.grad[static_cast<std::size_t>(i)] * inv;
      S* dst = ix->grad.data() + static_cast<std::size_t>(i) * hw;
      for (int k = 0; k < hw; ++k) dst[k] += g;
    }
  });
}

/// Mean cross-entropy between rows of `logits` (N, B) and integer labels.
template <typename S>
Tensor<S> softmax_cross_entropy(const Tensor<S>& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2) throw dim_error("softmax_cross_entropy: expects 2-d logits");
  const int n = logits.dim(0), b = logits.dim(1);
  if (static_cast<int>(labels.size()) != n)
    throw dim_error("softmax_cross_entropy: label count mismatch");
  for (int l : labels)
    if (l < 0 || l >= b) throw dim_error("softmax_cross_entropy: label out of range");
  const S* px = logits.data();
  S total = S(0);
  for (int r = 0; r < n; ++r) {
    const S* row = px + static_cast<std::size_t>(r) * b;
    S m = row[0];
    for (int k = 1; k < b; ++k) m = std::max(m, row[k]);
    S se = S(0);
    for (int k = 0; k < b; ++k) se += std::exp(row[k] - m);
    total += m + std::log(se) - row[labels[static_cast<std::size_t>(r)]];
  }
  const S inv_n = S(1) / static_cast<S>(n);
  auto il = logits.impl();
  return detail::record<S>({1}, {total * inv_n}, {logits}, [il, labels, n, b, inv_n](auto& self) {
    if (!il->requires_grad) return;
    il->ensure_grad();
    const S g = self.grad[0] * inv_n;
    for (int r = 0; r < n; ++r) {
      const S* row = il->data.data() + static_cast<std::size_t>(r) * b;
      S* grow = il->grad.data() + static_cast<std::size_t>(r) * b;
      S m = row[0];
      for (int k = 1; k < b; ++k) m = std::max(m, row[k]);
      S se = S(0);
      for (int k = 0; k < b; ++k) se += std::exp(row[k] - m);
      const S inv_se = S(1) / se;
      for (int k = 0; k < b; ++k) grow[k] += g * std::exp(row[k] - m) * inv_se;
      grow[labels[static_cast<std::size_t>(r)]] -= g;
    }
  });
}

/// Batch normalization. Accepts NCHW (per-channel over N,H,W) or (N, D)
/// (per-column over N). Biased variance, eps 1e-5. In training mode the
/// running stats are updated in place with momentum 0.1; they carry no tape.
/// Channel loops are data-parallel: each channel's reduction keeps its own
/// fixed order, so results do not depend on the thread count.
template <typename S>
Tensor<S> batch_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                     Tensor<S>& running_mean, Tensor<S>& running_var, bool training,
                     S momentum = S(0.1), S eps = S(1e-5)) {
  const bool spatial = x.rank() == 4;
  if (!spatial && x.rank() != 2) throw dim_error("batch_norm: expects 2-d or 4-d tensor");
  const int n = x.dim(0);
  const int c = x.dim(1);
  const int hw = spatial ? x.dim(2) * x.dim(3) : 1;
  if (gamma.numel() != c || beta.numel() != c || running_mean.numel() != c ||
      running_var.numel() != c)
    throw dim_error("batch_norm: parameter size mismatch");
  const std::int64_t m_count = static_cast<std::int64_t>(n) * hw;

  std::vector<S> mean_v(static_cast<std::size_t>(c)), invstd_v(static_cast<std::size_t>(c));
  const S* px = x.data();
  if (training) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int ci = 0; ci < c; ++ci) {
      S acc = S(0), sq = S(0);
      for (int ni = 0; ni < n; ++ni) {
        const S* src = spatial ? px + (static_cast<std::size_t>(ni) * c + ci) * hw
                               : px + static_cast<std::size_t>(ni) * c + ci;
        for (int k = 0; k < hw; ++k) {
          acc += src[k];
          sq += src[k] * src[k];
        }
      }
      const S mu = acc / static_cast<S>(m_count);
      const S var = std::max(sq / static_cast<S>(m_count) - mu * mu, S(0));
      mean_v[static_cast<std::size_t>(ci)] = mu;
      invstd_v[static_cast<std::size_t>(ci)] = S(1) / std::sqrt(var + eps);
      running_mean.data()[ci] = (S(1) - momentum) * running_mean.data()[ci] + momentum * mu;
      running_var.data()[ci] = (S(1) - momentum) * running_var.data()[ci] + momentum * var;
    }
  } else {
    for (int ci = 0; ci < c; ++ci) {
      mean_v[static_cast<std::size_t>(ci)] = running_mean.data()[ci];
      invstd_v[static_cast<std::size_t>(ci)] = S(1) / std::sqrt(running_var.data()[ci] + eps);
    }
  }

  std::vector<S> out(x.vec().size());
  const S* pg = gamma.data();
  const S* pb = beta.data();
  if (spatial) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int i = 0; i < n * c; ++i) {
      const int ci = i % c;
      const S mu = mean_v[static_cast<std::size_t>(ci)];
      const S gsc = pg[ci] * invstd_v[static_cast<std::size_t>(ci)];
      const S b = pb[ci];
      const S* src = px + static_cast<std::size_t>(i) * hw;
      S* dst = out.data() + static_cast<std::size_t>(i) * hw;
      for (int k = 0; k < hw; ++k) dst[k] = (src[k] - mu) * gsc + b;
    }
  } else {
    for (int ni = 0; ni < n; ++ni) {
      const S* src = px + static_cast<std::size_t>(ni) * c;
      S* dst = out.data() + static_cast<std::size_t>(ni) * c;
      for (int ci = 0; ci < c; ++ci)
        dst[ci] = (src[ci] - mean_v[static_cast<std::size_t>(ci)]) * pg[ci] *
                      invstd_v[static_cast<std::size_t>(ci)] +
                  pb[ci];
    }
  }

  auto ix = x.impl();
  auto igamma = gamma.impl();
  auto ibeta = beta.impl();
  return detail::record(
      x.shape(), std::move(out), {x, gamma, beta},
      [ix, igamma, ibeta, mean_v = std::move(mean_v), invstd_v = std::move(invstd_v), n, c, hw,
       m_count, training, spatial](auto& self) {
        const S* g = self.grad.data();
        const S* px2 = ix->data.data();
        if (igamma->requires_grad) igamma->ensure_grad();
        if (ibeta->requires_grad) ibeta->ensure_grad();
        if (ix->requires_grad) ix->ensure_grad();
        const S inv_m = S(1) / static_cast<S>(m_count);
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
        for (int ci = 0; ci < c; ++ci) {
          const S mu = mean_v[static_cast<std::size_t>(ci)];
          const S is = invstd_v[static_cast<std::size_t>(ci)];
          const S gam = igamma->data[static_cast<std::size_t>(ci)];
          // per-channel reductions, fixed order
          S sum_g = S(0), sum_gx = S(0);
          for (int ni = 0; ni < n; ++ni) {
            const std::size_t base = spatial ? (static_cast<std::size_t>(ni) * c + ci) * hw
                                             : static_cast<std::size_t>(ni) * c + ci;
            for (int k = 0; k < hw; ++k) {
              sum_g += g[base + k];
              sum_gx += g[base + k] * (px2[base + k] - mu) * is;
            }
          }
          if (igamma->requires_grad) igamma->grad[static_cast<std::size_t>(ci)] += sum_gx;
          if (ibeta->requires_grad) ibeta->grad[static_cast<std::size_t>(ci)] += sum_g;
          if (ix->requires_grad) {
            for (int ni = 0; ni < n; ++ni) {
              const std::size_t base = spatial ? (static_cast<std::size_t>(ni) * c + ci) * hw
                                               : static_cast<std::size_t>(ni) * c + ci;
              const S* grow = g + base;
              const S* xrow = px2 + base;
              S* drow = ix->grad.data() + base;
              if (training) {
                const S a1 = gam * is;
                const S a2 = inv_m * sum_g;
                const S a3 = inv_m * sum_gx * is;
                for (int k = 0; k < hw; ++k)
                  drow[k] += a1 * (grow[k] - a2 - (xrow[k] - mu) * a3);
              } else {
                const S a1 = gam * is;
                for (int k = 0; k < hw; ++k) drow[k] += a1 * grow[k];
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Backward driver
// ---------------------------------------------------------------------------

/// Propagates gradients from a scalar loss to every requires_grad leaf,
/// then releases the tape. Leaf grads accumulate across calls until
/// zero_grad.
template <typename S>
void backward(const Tensor<S>& loss) {
  if (loss.numel() != 1) throw dim_error("backward: root must be scalar");
  auto root = loss.impl();
  if (!root->requires_grad)
    throw std::logic_error("backward: root is not connected to a gradient tape");

  // Post-order DFS: inputs precede consumers. The order list owns the nodes
  // so releasing a consumer's tape cannot free a producer mid-traversal.
  std::vector<std::shared_ptr<detail::TensorImpl<S>>> order;
  std::unordered_set<detail::TensorImpl<S>*> visited;
  struct Frame {
    std::shared_ptr<detail::TensorImpl<S>> node;
    std::size_t next;
  };
  std::vector<Frame> stack;
  stack.push_back({root, 0});
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& fr = stack.back();
    if (fr.next < fr.node->parents.size()) {
      auto p = fr.node->parents[fr.next++];
      if (p->requires_grad && !visited.count(p.get())) {
        visited.insert(p.get());
        stack.push_back({std::move(p), 0});
      }
    } else {
      order.push_back(std::move(fr.node));
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad[0] += S(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto& node = *it;
    if (node->backward) {
      node->ensure_grad();
      node->backward(*node);
    }
    if (!node->leaf) node->release_tape();
  }
}

template <typename S>
bool all_finite(const Tensor<S>& t) {
  for (S v : t.vec())
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace fastmoco
