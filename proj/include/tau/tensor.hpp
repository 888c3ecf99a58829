#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "tau/rng.hpp"

namespace tau {

// Dense row-major tensor with reverse-mode autodiff. Shapes follow the
// N x C x H x W convention; lower-rank tensors are plain prefixes of it.
// Values are immutable once an op has produced them; only grad buffers
// (and explicitly documented parameter buffers such as running norm
// statistics) mutate afterwards. float is the training type, double the
// gradient-checking type.

using Shape = std::vector<int64_t>;

int64_t numel(const Shape& s);
std::string shape_str(const Shape& s);

// Checked mode: ops validate inputs for finiteness / domain violations.
// Off by default; costs a scan per op when on.
bool checked_mode();
void set_checked_mode(bool on);

// Lineage recording toggle (RAII). Disabled during pure inference.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <typename T>
class Tensor;

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first needed; then data-sized
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<Tensor<T>> parents;
  // Reads this->grad, accumulates (+=) into each parent's grad.
  std::function<void(TensorNode<T>&)> backfn;
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& s);
  static Tensor full(const Shape& s, T v);
  static Tensor from_data(const Shape& s, std::vector<T> d);
  static Tensor scalar(T v) { return full({1}, v); }
  static Tensor randn(const Shape& s, Rng& rng, double stddev = 1.0,
                      double mean = 0.0);
  static Tensor uniform(const Shape& s, Rng& rng, double lo = 0.0,
                        double hi = 1.0);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  int64_t dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
  int64_t size() const { return static_cast<int64_t>(impl_->data.size()); }

  std::vector<T>& data() { return impl_->data; }
  const std::vector<T>& data() const { return impl_->data; }
  T item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool b) {
    impl_->requires_grad = b;
    return *this;
  }

  // Grad buffer, allocated (zeroed) on first access.
  std::vector<T>& grad();
  bool has_grad() const { return defined() && !impl_->grad.empty(); }
  void zero_grad();

  const char* op() const { return impl_->op; }
  TensorNode<T>* node() const { return impl_.get(); }

  // Detached value-only copy (fresh leaf, no lineage).
  Tensor detach() const;

  static Tensor wrap(std::shared_ptr<TensorNode<T>> n) { return Tensor(std::move(n)); }

 private:
  explicit Tensor(std::shared_ptr<TensorNode<T>> n) : impl_(std::move(n)) {}
  std::shared_ptr<TensorNode<T>> impl_;
};

namespace detail {

// Builds an op node. Lineage is recorded only when grad mode is on and some
// parent requires grad; otherwise the result is a plain value.
template <typename T>
Tensor<T> make_op(const char* op, Shape shape, std::vector<T> data,
                  std::vector<Tensor<T>> parents,
                  std::function<void(TensorNode<T>&)> backfn);

template <typename T>
std::vector<T>& ensure_grad(TensorNode<T>& n);

template <typename T>
void check_finite(const char* op, const Tensor<T>& t);

// C[m,n] (+)= op(A) x op(B), row-major raw buffers; op transposes when the
// flag is set (A is stored [k,m] if ta, B is stored [n,k] if tb). Operands are
// staged into fixed-alignment storage first so the kernel choice — and thus
// the floating-point result — depends only on the shapes, never on where the
// caller's buffers happen to sit in memory. Keep every matrix product in the
// library on this path; bit-reproducibility of outputs depends on it.
template <typename T>
void gemm(bool ta, bool tb, int64_t m, int64_t k, int64_t n, const T* a, const T* b,
          T* c, bool accumulate);

}  // namespace detail

// ---- elementwise ----------------------------------------------------------
// Binary ops broadcast: equal shapes, a 1-element scalar against anything,
// a [C] vector against [N,C,H,W], or a [C,H,W] block against [N,C,H,W].

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& x, double s);
// a*x + b, elementwise with scalar coefficients.
template <typename T>
Tensor<T> affine(const Tensor<T>& x, double a, double b);
template <typename T>
Tensor<T> relu(const Tensor<T>& x);
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);
// Natural log; callers clamp into a safe domain first (see clamp).
template <typename T>
Tensor<T> log(const Tensor<T>& x);
template <typename T>
Tensor<T> exp(const Tensor<T>& x);
// Gradient passes through strictly interior values only.
template <typename T>
Tensor<T> clamp(const Tensor<T>& x, double lo, double hi);

// ---- linear algebra -------------------------------------------------------

// [m,k] x [k,n] -> [m,n]
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
// [B,m,k] x [B,k,n] -> [B,m,n]
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b);
// [B,m,k] x [G,k,n] -> [B,m,n] with group g = b % G (B % G == 0).
// G = heads gives per-head weights after a [N,heads,...] flatten; G = 1 shares.
template <typename T>
Tensor<T> bmm_grouped(const Tensor<T>& a, const Tensor<T>& w);

// Max-subtracted softmax along `axis`; every slice sums to 1.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis);

// ---- data movement --------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, const Shape& s);
template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<int>& perm);
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis);

// ---- reductions -----------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& x);  // -> shape [1]
template <typename T>
Tensor<T> sum_axes(const Tensor<T>& x, const std::vector<int>& axes);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);
template <typename T>
Tensor<T> mean_axes(const Tensor<T>& x, const std::vector<int>& axes);

// ---- autodiff -------------------------------------------------------------

// Reverse pass from a scalar loss. Visits each reachable node once in
// reverse topological order; gradients accumulate additively, so tensors
// used several times receive the sum of their branch gradients.
template <typename T>
void backward(const Tensor<T>& loss);

struct GradCheckReport {
  double max_rel_err = 0.0;
  bool pass = false;
  int64_t probes = 0;
  std::string worst;  // index / values of the worst probe, for diagnostics
};

// Central-difference check of d f / d x against the analytic reverse pass.
// Relative error per element is |a - n| / max(1, |a|, |n|). If max_probes > 0
// and x is larger, a seeded random subset of indices is probed. f must be
// deterministic (verified by double evaluation) and scalar-valued.
// Meant to run with T = double.
template <typename T>
GradCheckReport gradcheck(const std::function<Tensor<T>(const Tensor<T>&)>& f,
                          const Tensor<T>& x, double eps, double tol,
                          int64_t max_probes = 0, uint64_t probe_seed = 0x5eed);

// First tensor (topological order from `root`) containing a non-finite
// value; returns its op tag, or empty string if all finite. Diagnostic aid.
template <typename T>
std::string first_nonfinite(const Tensor<T>& root);

}  // namespace tau
