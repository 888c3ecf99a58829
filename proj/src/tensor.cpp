#include "tau/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <unordered_set>

namespace tau {

int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

static std::atomic<bool> g_checked{false};
bool checked_mode() { return g_checked.load(std::memory_order_relaxed); }
void set_checked_mode(bool on) { g_checked.store(on, std::memory_order_relaxed); }

static thread_local bool g_grad_enabled = true;
bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

// ---- Tensor members --------------------------------------------------------

template <typename T>
Tensor<T> Tensor<T>::zeros(const Shape& s) {
  return from_data(s, std::vector<T>(static_cast<size_t>(numel(s)), T(0)));
}

template <typename T>
Tensor<T> Tensor<T>::full(const Shape& s, T v) {
  return from_data(s, std::vector<T>(static_cast<size_t>(numel(s)), v));
}

template <typename T>
Tensor<T> Tensor<T>::from_data(const Shape& s, std::vector<T> d) {
  for (int64_t e : s) {
    if (e <= 0) throw std::invalid_argument("tensor: non-positive extent in shape " + shape_str(s));
  }
  if (numel(s) != static_cast<int64_t>(d.size())) {
    throw std::invalid_argument("tensor: shape " + shape_str(s) + " wants " +
                                std::to_string(numel(s)) + " elements, got " +
                                std::to_string(d.size()));
  }
  auto n = std::make_shared<TensorNode<T>>();
  n->shape = s;
  n->data = std::move(d);
  return Tensor(std::move(n));
}

template <typename T>
Tensor<T> Tensor<T>::randn(const Shape& s, Rng& rng, double stddev, double mean) {
  std::vector<T> d(static_cast<size_t>(numel(s)));
  for (auto& v : d) v = static_cast<T>(rng.normal(mean, stddev));
  return from_data(s, std::move(d));
}

template <typename T>
Tensor<T> Tensor<T>::uniform(const Shape& s, Rng& rng, double lo, double hi) {
  std::vector<T> d(static_cast<size_t>(numel(s)));
  for (auto& v : d) v = static_cast<T>(rng.uniform(lo, hi));
  return from_data(s, std::move(d));
}

template <typename T>
T Tensor<T>::item() const {
  if (size() != 1) throw std::invalid_argument("item: tensor has shape " + shape_str(shape()));
  return impl_->data[0];
}

template <typename T>
std::vector<T>& Tensor<T>::grad() {
  return detail::ensure_grad(*impl_);
}

template <typename T>
void Tensor<T>::zero_grad() {
  std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return from_data(shape(), data());
}

// ---- detail ----------------------------------------------------------------

namespace detail {

template <typename T>
Tensor<T> make_op(const char* op, Shape shape, std::vector<T> data,
                  std::vector<Tensor<T>> parents,
                  std::function<void(TensorNode<T>&)> backfn) {
  auto out = Tensor<T>::from_data(std::move(shape), std::move(data));
  out.node()->op = op;
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& p : parents) needs = needs || p.requires_grad();
  }
  if (needs) {
    out.node()->requires_grad = true;
    out.node()->parents = std::move(parents);
    out.node()->backfn = std::move(backfn);
  }
  return out;
}

template <typename T>
std::vector<T>& ensure_grad(TensorNode<T>& n) {
  if (n.grad.empty()) n.grad.assign(n.data.size(), T(0));
  return n.grad;
}

template <typename T>
void check_finite(const char* op, const Tensor<T>& t) {
  if (!checked_mode()) return;
  for (T v : t.data()) {
    if (!std::isfinite(static_cast<double>(v))) {
      throw std::runtime_error(std::string(op) + ": non-finite input value in tensor " +
                               shape_str(t.shape()));
    }
  }
}

}  // namespace detail

using detail::ensure_grad;
using detail::make_op;

// ---- broadcasting ----------------------------------------------------------

namespace {

enum class Bc { Same, Scalar, ChanVec, PerSample };

struct IdxMap {
  Bc kind = Bc::Same;
  int64_t c = 1, hw = 1, chw = 1;
  int64_t operator()(int64_t i) const {
    switch (kind) {
      case Bc::Same: return i;
      case Bc::Scalar: return 0;
      case Bc::ChanVec: return (i / hw) % c;
      case Bc::PerSample: return i % chw;
    }
    return i;
  }
};

struct BinPlan {
  Shape out;
  IdxMap a, b;
};

IdxMap map_against(const Shape& big, const Shape& small, const char* op,
                   const Shape& other_for_msg) {
  if (numel(small) == 1) return {Bc::Scalar, 1, 1, 1};
  if (big.size() == 4 && small.size() == 1 && small[0] == big[1]) {
    return {Bc::ChanVec, big[1], big[2] * big[3], 1};
  }
  if (big.size() == 4 && small.size() == 3 && small[0] == big[1] &&
      small[1] == big[2] && small[2] == big[3]) {
    return {Bc::PerSample, 1, 1, big[1] * big[2] * big[3]};
  }
  throw std::invalid_argument(std::string(op) + ": shapes " + shape_str(other_for_msg) +
                              " and " + shape_str(small) + " do not broadcast");
}

BinPlan plan_binary(const char* op, const Shape& a, const Shape& b) {
  if (a == b) return {a, {}, {}};
  if (numel(a) >= numel(b)) return {a, {}, map_against(a, b, op, a)};
  BinPlan p;
  p.out = b;
  p.a = map_against(b, a, op, b);
  return p;
}

// Shared skeleton for the binary arithmetic ops.
template <typename T, typename Fwd, typename Bwd>
Tensor<T> binary_op(const char* name, const Tensor<T>& a, const Tensor<T>& b,
                    Fwd fwd, Bwd bwd) {
  detail::check_finite(name, a);
  detail::check_finite(name, b);
  BinPlan plan = plan_binary(name, a.shape(), b.shape());
  const int64_t n = numel(plan.out);
  std::vector<T> out(static_cast<size_t>(n));
  const auto& av = a.data();
  const auto& bv = b.data();
  for (int64_t i = 0; i < n; ++i) {
    out[static_cast<size_t>(i)] = fwd(av[static_cast<size_t>(plan.a(i))],
                                      bv[static_cast<size_t>(plan.b(i))]);
  }
  return make_op<T>(
      name, plan.out, std::move(out), {a, b},
      [a, b, plan, bwd, n](TensorNode<T>& node) mutable {
        const auto& g = ensure_grad(node);
        const auto& av = a.data();
        const auto& bv = b.data();
        std::vector<T>* ga = a.requires_grad() ? &ensure_grad(*a.node()) : nullptr;
        std::vector<T>* gb = b.requires_grad() ? &ensure_grad(*b.node()) : nullptr;
        for (int64_t i = 0; i < n; ++i) {
          const size_t ia = static_cast<size_t>(plan.a(i));
          const size_t ib = static_cast<size_t>(plan.b(i));
          T da, db;
          bwd(av[ia], bv[ib], g[static_cast<size_t>(i)], da, db);
          if (ga) (*ga)[ia] += da;
          if (gb) (*gb)[ib] += db;
        }
      });
}

}  // namespace

// ---- elementwise -----------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      "add", a, b, [](T x, T y) { return x + y; },
      [](T, T, T g, T& da, T& db) { da = g; db = g; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      "sub", a, b, [](T x, T y) { return x - y; },
      [](T, T, T g, T& da, T& db) { da = g; db = -g; });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      "mul", a, b, [](T x, T y) { return x * y; },
      [](T x, T y, T g, T& da, T& db) { da = g * y; db = g * x; });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      "div", a, b, [](T x, T y) { return x / y; },
      [](T x, T y, T g, T& da, T& db) {
        da = g / y;
        db = -g * x / (y * y);
      });
}

namespace {

template <typename T, typename Fwd, typename Bwd>
Tensor<T> unary_op(const char* name, const Tensor<T>& x, Fwd fwd, Bwd bwd) {
  detail::check_finite(name, x);
  const int64_t n = x.size();
  std::vector<T> out(static_cast<size_t>(n));
  const auto& xv = x.data();
  for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(i)] = fwd(xv[static_cast<size_t>(i)]);
  return make_op<T>(name, x.shape(), std::move(out), {x},
                    [x, bwd, n](TensorNode<T>& node) mutable {
                      if (!x.requires_grad()) return;
                      const auto& g = ensure_grad(node);
                      auto& gx = ensure_grad(*x.node());
                      const auto& xv = x.data();
                      const auto& yv = node.data;
                      for (int64_t i = 0; i < n; ++i) {
                        const size_t k = static_cast<size_t>(i);
                        gx[k] += bwd(xv[k], yv[k], g[k]);
                      }
                    });
}

}  // namespace

template <typename T>
Tensor<T> scale(const Tensor<T>& x, double s) {
  const T c = static_cast<T>(s);
  return unary_op<T>(
      "scale", x, [c](T v) { return c * v; }, [c](T, T, T g) { return c * g; });
}

template <typename T>
Tensor<T> affine(const Tensor<T>& x, double a, double b) {
  const T ca = static_cast<T>(a), cb = static_cast<T>(b);
  return unary_op<T>(
      "affine", x, [ca, cb](T v) { return ca * v + cb; },
      [ca](T, T, T g) { return ca * g; });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return unary_op<T>(
      "relu", x, [](T v) { return v > T(0) ? v : T(0); },
      [](T v, T, T g) { return v > T(0) ? g : T(0); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return unary_op<T>(
      "sigmoid", x,
      [](T v) { return static_cast<T>(1.0 / (1.0 + std::exp(-static_cast<double>(v)))); },
      [](T, T y, T g) { return g * y * (T(1) - y); });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  if (checked_mode()) {
    for (T v : x.data()) {
      if (!(v > T(0))) throw std::runtime_error("log: non-positive input");
    }
  }
  return unary_op<T>(
      "log", x, [](T v) { return static_cast<T>(std::log(static_cast<double>(v))); },
      [](T v, T, T g) { return g / v; });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  return unary_op<T>(
      "exp", x, [](T v) { return static_cast<T>(std::exp(static_cast<double>(v))); },
      [](T, T y, T g) { return g * y; });
}

template <typename T>
Tensor<T> clamp(const Tensor<T>& x, double lo, double hi) {
  const T tlo = static_cast<T>(lo), thi = static_cast<T>(hi);
  return unary_op<T>(
      "clamp", x,
      [tlo, thi](T v) { return v < tlo ? tlo : (v > thi ? thi : v); },
      [tlo, thi](T v, T, T g) { return (v > tlo && v < thi) ? g : T(0); });
}

// ---- linear algebra --------------------------------------------------------

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using CMatMap = Eigen::Map<const RowMat<T>>;

template <typename T>
void gemm(bool ta, bool tb, int64_t m, int64_t k, int64_t n, const T* a, const T* b,
          T* c, bool accumulate) {
  RowMat<T> A = CMatMap<T>(a, ta ? k : m, ta ? m : k);
  RowMat<T> B = CMatMap<T>(b, tb ? n : k, tb ? k : n);
  RowMat<T> C(m, n);
  if (!ta && !tb) {
    C.noalias() = A * B;
  } else if (ta && !tb) {
    C.noalias() = A.transpose() * B;
  } else if (!ta && tb) {
    C.noalias() = A * B.transpose();
  } else {
    C.noalias() = A.transpose() * B.transpose();
  }
  const T* src = C.data();
  const int64_t total = m * n;
  if (accumulate) {
    for (int64_t i = 0; i < total; ++i) c[i] += src[i];
  } else {
    for (int64_t i = 0; i < total; ++i) c[i] = src[i];
  }
}

template void gemm<float>(bool, bool, int64_t, int64_t, int64_t, const float*,
                          const float*, float*, bool);
template void gemm<double>(bool, bool, int64_t, int64_t, int64_t, const double*,
                           const double*, double*, bool);

}  // namespace detail

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw std::invalid_argument("matmul: expects rank-2 operands, got " +
                                shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw std::invalid_argument("matmul: inner extents differ, " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
  std::vector<T> out(static_cast<size_t>(m * n));
  detail::gemm<T>(false, false, m, k, n, a.data().data(), b.data().data(), out.data(), false);
  return make_op<T>("matmul", {m, n}, std::move(out), {a, b},
                    [a, b, m, k, n](TensorNode<T>& node) mutable {
                      const auto& g = ensure_grad(node);
                      if (a.requires_grad()) {  // dA = G * B^T
                        detail::gemm<T>(false, true, m, n, k, g.data(), b.data().data(),
                                        ensure_grad(*a.node()).data(), true);
                      }
                      if (b.requires_grad()) {  // dB = A^T * G
                        detail::gemm<T>(true, false, k, m, n, a.data().data(), g.data(),
                                        ensure_grad(*b.node()).data(), true);
                      }
                    });
}

namespace {

template <typename T>
void bmm_shapes(const char* op, const Tensor<T>& a, const Tensor<T>& w, int64_t& B,
                int64_t& m, int64_t& k, int64_t& n, int64_t& G) {
  if (a.rank() != 3 || w.rank() != 3) {
    throw std::invalid_argument(std::string(op) + ": expects rank-3 operands, got " +
                                shape_str(a.shape()) + " and " + shape_str(w.shape()));
  }
  B = a.dim(0);
  m = a.dim(1);
  k = a.dim(2);
  G = w.dim(0);
  n = w.dim(2);
  if (w.dim(1) != k) {
    throw std::invalid_argument(std::string(op) + ": inner extents differ, " +
                                shape_str(a.shape()) + " vs " + shape_str(w.shape()));
  }
  if (B % G != 0) {
    throw std::invalid_argument(std::string(op) + ": batch " + std::to_string(B) +
                                " not divisible by group count " + std::to_string(G));
  }
}

}  // namespace

template <typename T>
Tensor<T> bmm_grouped(const Tensor<T>& a, const Tensor<T>& w) {
  int64_t B, m, k, n, G;
  bmm_shapes("bmm", a, w, B, m, k, n, G);
  std::vector<T> out(static_cast<size_t>(B * m * n));
  for (int64_t b = 0; b < B; ++b) {
    detail::gemm<T>(false, false, m, k, n, a.data().data() + b * m * k,
                    w.data().data() + (b % G) * k * n, out.data() + b * m * n, false);
  }
  return make_op<T>("bmm", {B, m, n}, std::move(out), {a, w},
                    [a, w, B, m, k, n, G](TensorNode<T>& node) mutable {
                      const auto& g = ensure_grad(node);
                      for (int64_t b = 0; b < B; ++b) {
                        const T* gb = g.data() + b * m * n;
                        if (a.requires_grad()) {  // dA_b = G_b * W_g^T
                          detail::gemm<T>(false, true, m, n, k, gb,
                                          w.data().data() + (b % G) * k * n,
                                          ensure_grad(*a.node()).data() + b * m * k, true);
                        }
                        if (w.requires_grad()) {  // dW_g += A_b^T * G_b
                          detail::gemm<T>(true, false, k, m, n,
                                          a.data().data() + b * m * k, gb,
                                          ensure_grad(*w.node()).data() + (b % G) * k * n,
                                          true);
                        }
                      }
                    });
}

template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() == 3 && b.rank() == 3 && a.dim(0) != b.dim(0)) {
    throw std::invalid_argument("bmm: batch extents differ, " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
  return bmm_grouped(a, b);
}

// ---- softmax ---------------------------------------------------------------

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  if (axis < 0 || axis >= x.rank()) {
    throw std::invalid_argument("softmax: axis " + std::to_string(axis) +
                                " invalid for shape " + shape_str(x.shape()));
  }
  detail::check_finite("softmax", x);
  const Shape& s = x.shape();
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) inner *= s[i];
  const int64_t len = s[static_cast<size_t>(axis)];

  const auto& xv = x.data();
  std::vector<T> out(xv.size());
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      const int64_t base = o * len * inner + in;
      T mx = xv[static_cast<size_t>(base)];
      for (int64_t i = 1; i < len; ++i) mx = std::max(mx, xv[static_cast<size_t>(base + i * inner)]);
      double denom = 0.0;
      for (int64_t i = 0; i < len; ++i) {
        const double e = std::exp(static_cast<double>(xv[static_cast<size_t>(base + i * inner)] - mx));
        out[static_cast<size_t>(base + i * inner)] = static_cast<T>(e);
        denom += e;
      }
      for (int64_t i = 0; i < len; ++i) {
        out[static_cast<size_t>(base + i * inner)] =
            static_cast<T>(static_cast<double>(out[static_cast<size_t>(base + i * inner)]) / denom);
      }
    }
  }
  return make_op<T>("softmax", s, std::move(out), {x},
                    [x, outer, len, inner](TensorNode<T>& node) mutable {
                      if (!x.requires_grad()) return;
                      const auto& g = ensure_grad(node);
                      const auto& y = node.data;
                      auto& gx = ensure_grad(*x.node());
                      // dx_i = y_i * (g_i - sum_j g_j y_j), per slice
                      for (int64_t o = 0; o < outer; ++o) {
                        for (int64_t in = 0; in < inner; ++in) {
                          const int64_t base = o * len * inner + in;
                          double dot = 0.0;
                          for (int64_t i = 0; i < len; ++i) {
                            const size_t k = static_cast<size_t>(base + i * inner);
                            dot += static_cast<double>(g[k]) * static_cast<double>(y[k]);
                          }
                          for (int64_t i = 0; i < len; ++i) {
                            const size_t k = static_cast<size_t>(base + i * inner);
                            gx[k] += y[k] * (g[k] - static_cast<T>(dot));
                          }
                        }
                      }
                    });
}

// ---- data movement ---------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, const Shape& s) {
  if (numel(s) != x.size()) {
    throw std::invalid_argument("reshape: cannot view " + shape_str(x.shape()) + " as " +
                                shape_str(s));
  }
  return make_op<T>("reshape", s, x.data(), {x}, [x](TensorNode<T>& node) mutable {
    if (!x.requires_grad()) return;
    const auto& g = ensure_grad(node);
    auto& gx = ensure_grad(*x.node());
    for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

namespace {

// Maps every flat index of the permuted tensor to its source flat index.
std::vector<int64_t> permute_source_indices(const Shape& in, const std::vector<int>& perm) {
  const int r = static_cast<int>(in.size());
  std::vector<int64_t> in_strides(static_cast<size_t>(r), 1);
  for (int i = r - 2; i >= 0; --i) {
    in_strides[static_cast<size_t>(i)] =
        in_strides[static_cast<size_t>(i + 1)] * in[static_cast<size_t>(i + 1)];
  }
  Shape out(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i) out[static_cast<size_t>(i)] = in[static_cast<size_t>(perm[static_cast<size_t>(i)])];
  const int64_t n = numel(in);
  std::vector<int64_t> src(static_cast<size_t>(n));
  std::vector<int64_t> idx(static_cast<size_t>(r), 0);
  for (int64_t f = 0; f < n; ++f) {
    int64_t s = 0;
    for (int i = 0; i < r; ++i) {
      s += idx[static_cast<size_t>(i)] * in_strides[static_cast<size_t>(perm[static_cast<size_t>(i)])];
    }
    src[static_cast<size_t>(f)] = s;
    for (int i = r - 1; i >= 0; --i) {
      if (++idx[static_cast<size_t>(i)] < out[static_cast<size_t>(i)]) break;
      idx[static_cast<size_t>(i)] = 0;
    }
  }
  return src;
}

}  // namespace

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<int>& perm) {
  const int r = x.rank();
  if (static_cast<int>(perm.size()) != r) {
    throw std::invalid_argument("permute: axis list size " + std::to_string(perm.size()) +
                                " does not match rank " + std::to_string(r));
  }
  std::vector<bool> seen(static_cast<size_t>(r), false);
  for (int p : perm) {
    if (p < 0 || p >= r || seen[static_cast<size_t>(p)]) {
      throw std::invalid_argument("permute: invalid axis permutation for shape " +
                                  shape_str(x.shape()));
    }
    seen[static_cast<size_t>(p)] = true;
  }
  Shape out_shape(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i) {
    out_shape[static_cast<size_t>(i)] = x.dim(perm[static_cast<size_t>(i)]);
  }
  auto src = permute_source_indices(x.shape(), perm);
  const auto& xv = x.data();
  std::vector<T> out(xv.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = xv[static_cast<size_t>(src[i])];
  return make_op<T>("permute", std::move(out_shape), std::move(out), {x},
                    [x, src = std::move(src)](TensorNode<T>& node) mutable {
                      if (!x.requires_grad()) return;
                      const auto& g = ensure_grad(node);
                      auto& gx = ensure_grad(*x.node());
                      for (size_t i = 0; i < g.size(); ++i) gx[static_cast<size_t>(src[i])] += g[i];
                    });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const int r = parts[0].rank();
  if (axis < 0 || axis >= r) {
    throw std::invalid_argument("concat: axis " + std::to_string(axis) +
                                " invalid for shape " + shape_str(parts[0].shape()));
  }
  Shape out_shape = parts[0].shape();
  int64_t axis_total = 0;
  for (const auto& p : parts) {
    if (p.rank() != r) throw std::invalid_argument("concat: rank mismatch");
    for (int i = 0; i < r; ++i) {
      if (i != axis && p.dim(i) != out_shape[static_cast<size_t>(i)]) {
        throw std::invalid_argument("concat: extent mismatch between " +
                                    shape_str(parts[0].shape()) + " and " +
                                    shape_str(p.shape()) + " outside axis " +
                                    std::to_string(axis));
      }
    }
    axis_total += p.dim(axis);
  }
  out_shape[static_cast<size_t>(axis)] = axis_total;

  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= out_shape[static_cast<size_t>(i)];
  for (int i = axis + 1; i < r; ++i) inner *= out_shape[static_cast<size_t>(i)];

  std::vector<T> out(static_cast<size_t>(numel(out_shape)));
  const int64_t out_row = axis_total * inner;
  int64_t offset = 0;  // in units of inner elements
  for (const auto& p : parts) {
    const int64_t block = p.dim(axis) * inner;
    const auto& pv = p.data();
    for (int64_t o = 0; o < outer; ++o) {
      std::copy_n(pv.begin() + o * block, block, out.begin() + o * out_row + offset);
    }
    offset += block;
  }
  return make_op<T>("concat", std::move(out_shape), std::move(out), parts,
                    [parts, outer, inner, out_row, axis](TensorNode<T>& node) mutable {
                      const auto& g = ensure_grad(node);
                      int64_t offset = 0;
                      for (auto& p : parts) {
                        const int64_t blk = p.dim(axis) * inner;
                        if (p.requires_grad()) {
                          auto& gp = ensure_grad(*p.node());
                          for (int64_t o = 0; o < outer; ++o) {
                            const T* src = g.data() + o * out_row + offset;
                            T* dst = gp.data() + o * blk;
                            for (int64_t i = 0; i < blk; ++i) dst[i] += src[i];
                          }
                        }
                        offset += blk;
                      }
                    });
}

// ---- reductions ------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  double acc = 0.0;
  for (T v : x.data()) acc += static_cast<double>(v);
  return make_op<T>("sum", {1}, {static_cast<T>(acc)}, {x},
                    [x](TensorNode<T>& node) mutable {
                      if (!x.requires_grad()) return;
                      const T g = ensure_grad(node)[0];
                      auto& gx = ensure_grad(*x.node());
                      for (auto& v : gx) v += g;
                    });
}

template <typename T>
Tensor<T> sum_axes(const Tensor<T>& x, const std::vector<int>& axes) {
  const int r = x.rank();
  std::vector<bool> reduce(static_cast<size_t>(r), false);
  for (int a : axes) {
    if (a < 0 || a >= r) {
      throw std::invalid_argument("sum: axis " + std::to_string(a) + " invalid for shape " +
                                  shape_str(x.shape()));
    }
    if (reduce[static_cast<size_t>(a)]) {
      throw std::invalid_argument("sum: duplicate axis " + std::to_string(a));
    }
    reduce[static_cast<size_t>(a)] = true;
  }
  Shape out_shape;
  for (int i = 0; i < r; ++i) {
    if (!reduce[static_cast<size_t>(i)]) out_shape.push_back(x.dim(i));
  }
  if (out_shape.empty()) out_shape = {1};

  // flat index of x -> flat index of reduced output
  const Shape& s = x.shape();
  std::vector<int64_t> in_strides(static_cast<size_t>(r), 1);
  for (int i = r - 2; i >= 0; --i) {
    in_strides[static_cast<size_t>(i)] =
        in_strides[static_cast<size_t>(i + 1)] * s[static_cast<size_t>(i + 1)];
  }
  std::vector<int64_t> out_strides(static_cast<size_t>(r), 0);
  int64_t stride = 1;
  for (int i = r - 1; i >= 0; --i) {
    if (!reduce[static_cast<size_t>(i)]) {
      out_strides[static_cast<size_t>(i)] = stride;
      stride *= s[static_cast<size_t>(i)];
    }
  }
  const int64_t n = x.size();
  std::vector<int64_t> omap(static_cast<size_t>(n));
  for (int64_t f = 0; f < n; ++f) {
    int64_t rem = f, o = 0;
    for (int i = 0; i < r; ++i) {
      const int64_t q = rem / in_strides[static_cast<size_t>(i)];
      rem %= in_strides[static_cast<size_t>(i)];
      o += q * out_strides[static_cast<size_t>(i)];
    }
    omap[static_cast<size_t>(f)] = o;
  }

  std::vector<double> acc(static_cast<size_t>(numel(out_shape)), 0.0);
  const auto& xv = x.data();
  for (int64_t f = 0; f < n; ++f) acc[static_cast<size_t>(omap[static_cast<size_t>(f)])] += static_cast<double>(xv[static_cast<size_t>(f)]);
  std::vector<T> out(acc.size());
  for (size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<T>(acc[i]);

  return make_op<T>("sum", std::move(out_shape), std::move(out), {x},
                    [x, omap = std::move(omap)](TensorNode<T>& node) mutable {
                      if (!x.requires_grad()) return;
                      const auto& g = ensure_grad(node);
                      auto& gx = ensure_grad(*x.node());
                      for (size_t f = 0; f < gx.size(); ++f) {
                        gx[f] += g[static_cast<size_t>(omap[f])];
                      }
                    });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

template <typename T>
Tensor<T> mean_axes(const Tensor<T>& x, const std::vector<int>& axes) {
  Tensor<T> s = sum_axes(x, axes);
  const double count = static_cast<double>(x.size()) / static_cast<double>(s.size());
  return scale(s, 1.0 / count);
}

// ---- autodiff --------------------------------------------------------------

namespace {

template <typename T>
std::vector<TensorNode<T>*> topo_order(TensorNode<T>* root, bool grad_only) {
  std::vector<TensorNode<T>*> order;
  std::unordered_set<TensorNode<T>*> seen;
  struct Frame {
    TensorNode<T>* n;
    size_t next;
  };
  std::vector<Frame> stack;
  stack.push_back({root, 0});
  seen.insert(root);
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next < f.n->parents.size()) {
      TensorNode<T>* p = f.n->parents[f.next++].node();
      const bool want = grad_only ? p->requires_grad : true;
      if (want && !seen.count(p)) {
        seen.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(f.n);
      stack.pop_back();
    }
  }
  return order;  // parents precede children
}

}  // namespace

template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined()) throw std::invalid_argument("backward: undefined tensor");
  if (loss.size() != 1) {
    throw std::invalid_argument("backward: loss must be a scalar, got shape " +
                                shape_str(loss.shape()));
  }
  ensure_grad(*loss.node())[0] += T(1);
  if (!loss.node()->requires_grad) return;
  auto order = topo_order<T>(loss.node(), true);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backfn) (*it)->backfn(**it);
  }
}

template <typename T>
std::string first_nonfinite(const Tensor<T>& root) {
  if (!root.defined()) return "";
  auto order = topo_order<T>(root.node(), false);
  for (TensorNode<T>* n : order) {
    for (T v : n->data) {
      if (!std::isfinite(static_cast<double>(v))) {
        return std::string(n->op) + " " + shape_str(n->shape);
      }
    }
  }
  return "";
}

template <typename T>
GradCheckReport gradcheck(const std::function<Tensor<T>(const Tensor<T>&)>& f,
                          const Tensor<T>& x, double eps, double tol,
                          int64_t max_probes, uint64_t probe_seed) {
  // determinism check: two fresh evaluations must agree bitwise
  {
    NoGradGuard ng;
    Tensor<T> y0 = f(x.detach());
    Tensor<T> y1 = f(x.detach());
    if (y0.data() != y1.data()) {
      throw std::runtime_error("gradcheck: function is not deterministic");
    }
    if (y0.size() != 1) {
      throw std::invalid_argument("gradcheck: function must be scalar-valued, got shape " +
                                  shape_str(y0.shape()));
    }
  }

  Tensor<T> leaf = x.detach().set_requires_grad(true);
  Tensor<T> y = f(leaf);
  backward(y);
  std::vector<T> analytic = leaf.grad();

  std::vector<int64_t> probes(static_cast<size_t>(x.size()));
  std::iota(probes.begin(), probes.end(), 0);
  if (max_probes > 0 && x.size() > max_probes) {
    Rng rng(probe_seed);
    rng.shuffle(probes);
    probes.resize(static_cast<size_t>(max_probes));
    std::sort(probes.begin(), probes.end());
  }

  GradCheckReport rep;
  rep.probes = static_cast<int64_t>(probes.size());
  NoGradGuard ng;
  for (int64_t i : probes) {
    const size_t k = static_cast<size_t>(i);
    Tensor<T> xp = x.detach();
    xp.data()[k] += static_cast<T>(eps);
    Tensor<T> xm = x.detach();
    xm.data()[k] -= static_cast<T>(eps);
    const double fp = static_cast<double>(f(xp).item());
    const double fm = static_cast<double>(f(xm).item());
    const double numeric = (fp - fm) / (2.0 * eps);
    const double a = static_cast<double>(analytic[k]);
    const double rel = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
    if (rel > rep.max_rel_err) {
      rep.max_rel_err = rel;
      rep.worst = "index " + std::to_string(i) + ": analytic " + std::to_string(a) +
                  ", numeric " + std::to_string(numeric);
    }
  }
  rep.pass = rep.max_rel_err <= tol;
  return rep;
}

// ---- explicit instantiations ------------------------------------------------

#define TAU_INSTANTIATE(T)                                                                 \
  template class Tensor<T>;                                                                \
  template Tensor<T> detail::make_op<T>(const char*, Shape, std::vector<T>,                \
                                        std::vector<Tensor<T>>,                           \
                                        std::function<void(TensorNode<T>&)>);             \
  template std::vector<T>& detail::ensure_grad<T>(TensorNode<T>&);                         \
  template void detail::check_finite<T>(const char*, const Tensor<T>&);                    \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> div<T>(const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> scale<T>(const Tensor<T>&, double);                                   \
  template Tensor<T> affine<T>(const Tensor<T>&, double, double);                          \
  template Tensor<T> relu<T>(const Tensor<T>&);                                            \
  template Tensor<T> sigmoid<T>(const Tensor<T>&);                                         \
  template Tensor<T> log<T>(const Tensor<T>&);                                             \
  template Tensor<T> exp<T>(const Tensor<T>&);                                             \
  template Tensor<T> clamp<T>(const Tensor<T>&, double, double);                           \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                        \
  template Tensor<T> bmm<T>(const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> bmm_grouped<T>(const Tensor<T>&, const Tensor<T>&);                   \
  template Tensor<T> softmax<T>(const Tensor<T>&, int);                                    \
  template Tensor<T> reshape<T>(const Tensor<T>&, const Shape&);                           \
  template Tensor<T> permute<T>(const Tensor<T>&, const std::vector<int>&);                \
  template Tensor<T> concat<T>(const std::vector<Tensor<T>>&, int);                        \
  template Tensor<T> sum<T>(const Tensor<T>&);                                             \
  template Tensor<T> sum_axes<T>(const Tensor<T>&, const std::vector<int>&);               \
  template Tensor<T> mean<T>(const Tensor<T>&);                                            \
  template Tensor<T> mean_axes<T>(const Tensor<T>&, const std::vector<int>&);              \
  template void backward<T>(const Tensor<T>&);                                             \
  template std::string first_nonfinite<T>(const Tensor<T>&);                               \
  template GradCheckReport gradcheck<T>(const std::function<Tensor<T>(const Tensor<T>&)>&, \
                                        const Tensor<T>&, double, double, int64_t,         \
                                        uint64_t);

TAU_INSTANTIATE(float)
TAU_INSTANTIATE(double)

#undef TAU_INSTANTIATE

}  // namespace tau
