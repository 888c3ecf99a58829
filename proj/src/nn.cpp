#include "tau/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace tau {

using detail::ensure_grad;
using detail::make_op;

template <typename T>
Tensor<T> he_normal(const Shape& s, int64_t fan_in, Rng& rng) {
  if (fan_in <= 0) throw std::invalid_argument("he_normal: fan_in must be positive");
  return Tensor<T>::randn(s, rng, std::sqrt(2.0 / static_cast<double>(fan_in)));
}

// ---- conv2d -----------------------------------------------------------------

template <typename T>
Conv2dParams<T> make_conv2d(int64_t in_c, int64_t out_c, int k, Rng& rng, int stride,
                            int padding) {
  Conv2dParams<T> p;
  p.weight = he_normal<T>({out_c, in_c, k, k}, in_c * k * k, rng).set_requires_grad(true);
  p.bias = Tensor<T>::zeros({out_c}).set_requires_grad(true);
  p.stride = stride;
  p.padding = padding;
  return p;
}

namespace {

struct ConvDims {
  int64_t N, Cin, H, W, Cout, kh, kw, Ho, Wo;
  int stride, pad;
  int64_t patch() const { return Cin * kh * kw; }   // im2col rows
  int64_t cols() const { return Ho * Wo; }          // im2col columns
};

// col is [Cin*kh*kw, Ho*Wo] for one sample; out-of-range taps read as zero.
template <typename T>
void im2col(const T* x, const ConvDims& d, T* col) {
  int64_t r = 0;
  for (int64_t c = 0; c < d.Cin; ++c) {
    for (int64_t ki = 0; ki < d.kh; ++ki) {
      for (int64_t kj = 0; kj < d.kw; ++kj, ++r) {
        T* dst = col + r * d.cols();
        for (int64_t oh = 0; oh < d.Ho; ++oh) {
          const int64_t ih = oh * d.stride + ki - d.pad;
          for (int64_t ow = 0; ow < d.Wo; ++ow) {
            const int64_t iw = ow * d.stride + kj - d.pad;
            const bool in = ih >= 0 && ih < d.H && iw >= 0 && iw < d.W;
            dst[oh * d.Wo + ow] = in ? x[(c * d.H + ih) * d.W + iw] : T(0);
          }
        }
      }
    }
  }
}

// Transpose of im2col: scatter-adds col-layout gradients back onto the image.
template <typename T>
void col2im_add(const T* col, const ConvDims& d, T* gx) {
  int64_t r = 0;
  for (int64_t c = 0; c < d.Cin; ++c) {
    for (int64_t ki = 0; ki < d.kh; ++ki) {
      for (int64_t kj = 0; kj < d.kw; ++kj, ++r) {
        const T* src = col + r * d.cols();
        for (int64_t oh = 0; oh < d.Ho; ++oh) {
          const int64_t ih = oh * d.stride + ki - d.pad;
          if (ih < 0 || ih >= d.H) continue;
          for (int64_t ow = 0; ow < d.Wo; ++ow) {
            const int64_t iw = ow * d.stride + kj - d.pad;
            if (iw < 0 || iw >= d.W) continue;
            gx[(c * d.H + ih) * d.W + iw] += src[oh * d.Wo + ow];
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Conv2dParams<T>& p) {
  if (x.rank() != 4 || p.weight.rank() != 4) {
    throw std::invalid_argument("conv2d: expects [N,C,H,W] input and [O,I,kh,kw] weight");
  }
  ConvDims d;
  d.N = x.dim(0);
  d.Cin = x.dim(1);
  d.H = x.dim(2);
  d.W = x.dim(3);
  d.Cout = p.weight.dim(0);
  d.kh = p.weight.dim(2);
  d.kw = p.weight.dim(3);
  d.stride = p.stride;
  d.pad = p.padding;
  if (p.weight.dim(1) != d.Cin) {
    throw std::invalid_argument("conv2d: input has " + std::to_string(d.Cin) +
                                " channels but weight expects " +
                                std::to_string(p.weight.dim(1)));
  }
  d.Ho = (d.H + 2 * d.pad - d.kh) / d.stride + 1;
  d.Wo = (d.W + 2 * d.pad - d.kw) / d.stride + 1;
  if (d.H + 2 * d.pad < d.kh || d.W + 2 * d.pad < d.kw || d.Ho <= 0 || d.Wo <= 0) {
    throw std::invalid_argument("conv2d: non-positive output extent for input " +
                                shape_str(x.shape()) + " with kernel " +
                                shape_str(p.weight.shape()));
  }
  detail::check_finite("conv2d", x);

  const int64_t K = d.patch(), L = d.cols();
  std::vector<T> col(static_cast<size_t>(K * L));
  std::vector<T> out(static_cast<size_t>(d.N * d.Cout * L));
  for (int64_t n = 0; n < d.N; ++n) {
    im2col(x.data().data() + n * d.Cin * d.H * d.W, d, col.data());
    T* on = out.data() + n * d.Cout * L;
    detail::gemm<T>(false, false, d.Cout, K, L, p.weight.data().data(), col.data(), on,
                    false);
    for (int64_t oc = 0; oc < d.Cout; ++oc) {
      const T bias = p.bias.data()[static_cast<size_t>(oc)];
      for (int64_t l = 0; l < L; ++l) on[oc * L + l] += bias;
    }
  }

  Tensor<T> w = p.weight, b = p.bias;
  return make_op<T>(
      "conv2d", {d.N, d.Cout, d.Ho, d.Wo}, std::move(out), {x, w, b},
      [x, w, b, d, K, L](TensorNode<T>& node) mutable {
        const auto& g = ensure_grad(node);
        std::vector<T> col(static_cast<size_t>(K * L));  // recomputed, not cached
        for (int64_t n = 0; n < d.N; ++n) {
          const T* gn = g.data() + n * d.Cout * L;
          if (w.requires_grad() || x.requires_grad()) {
            im2col(x.data().data() + n * d.Cin * d.H * d.W, d, col.data());
          }
          if (w.requires_grad()) {  // dW += G_n * col^T
            detail::gemm<T>(false, true, d.Cout, L, K, gn, col.data(),
                            ensure_grad(*w.node()).data(), true);
          }
          if (x.requires_grad()) {  // dcol = W^T * G_n, then scatter back
            detail::gemm<T>(true, false, K, d.Cout, L, w.data().data(), gn, col.data(),
                            false);
            col2im_add(col.data(), d,
                       ensure_grad(*x.node()).data() + n * d.Cin * d.H * d.W);
          }
          if (b.requires_grad()) {
            auto& gb = ensure_grad(*b.node());
            for (int64_t oc = 0; oc < d.Cout; ++oc) {
              double acc = 0.0;
              for (int64_t l = 0; l < L; ++l) acc += static_cast<double>(gn[oc * L + l]);
              gb[static_cast<size_t>(oc)] += static_cast<T>(acc);
            }
          }
        }
      });
}

// ---- maxpool ----------------------------------------------------------------

template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x, int window, int stride) {
  if (x.rank() != 4) throw std::invalid_argument("maxpool2d: expects [N,C,H,W]");
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H < window || W < window || (H - window) % stride != 0 || (W - window) % stride != 0) {
    throw std::invalid_argument("maxpool2d: extents " + std::to_string(H) + "x" +
                                std::to_string(W) + " do not tile with window " +
                                std::to_string(window) + " stride " + std::to_string(stride));
  }
  const int64_t Ho = (H - window) / stride + 1;
  const int64_t Wo = (W - window) / stride + 1;
  const auto& xv = x.data();
  std::vector<T> out(static_cast<size_t>(N * C * Ho * Wo));
  // flat input index of each output's argmax, for backward routing
  auto argmax = std::make_shared<std::vector<int64_t>>(out.size());
  int64_t o = 0;
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const T* plane = xv.data() + nc * H * W;
    const int64_t base = nc * H * W;
    for (int64_t oh = 0; oh < Ho; ++oh) {
      for (int64_t ow = 0; ow < Wo; ++ow, ++o) {
        T best = plane[(oh * stride) * W + ow * stride];
        int64_t best_at = (oh * stride) * W + ow * stride;
        for (int64_t i = 0; i < window; ++i) {
          for (int64_t j = 0; j < window; ++j) {
            const int64_t at = (oh * stride + i) * W + ow * stride + j;
            if (plane[at] > best) {  // strict: first row-major max wins ties
              best = plane[at];
              best_at = at;
            }
          }
        }
        out[static_cast<size_t>(o)] = best;
        (*argmax)[static_cast<size_t>(o)] = base + best_at;
      }
    }
  }
  return make_op<T>("maxpool2d", {N, C, Ho, Wo}, std::move(out), {x},
                    [x, argmax](TensorNode<T>& node) mutable {
                      if (!x.requires_grad()) return;
                      const auto& g = ensure_grad(node);
                      auto& gx = ensure_grad(*x.node());
                      for (size_t i = 0; i < g.size(); ++i) {
                        gx[static_cast<size_t>((*argmax)[i])] += g[i];
                      }
                    });
}

// ---- bilinear upsampling ------------------------------------------------------

namespace {

struct Lin {
  int64_t lo, hi;
  double w;  // out = (1-w)*src[lo] + w*src[hi]
};

std::vector<Lin> lin_table(int64_t in, int64_t out) {
  std::vector<Lin> t(static_cast<size_t>(out));
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (int64_t d = 0; d < out; ++d) {
    double src = (static_cast<double>(d) + 0.5) * scale - 0.5;
    if (src < 0.0) src = 0.0;  // edge clamp
    int64_t lo = static_cast<int64_t>(src);
    if (lo > in - 1) lo = in - 1;
    const int64_t hi = std::min(lo + 1, in - 1);
    t[static_cast<size_t>(d)] = {lo, hi, src - static_cast<double>(lo)};
  }
  return t;
}

}  // namespace

template <typename T>
Tensor<T> upsample_bilinear(const Tensor<T>& x, int64_t out_h, int64_t out_w) {
  if (x.rank() != 4) throw std::invalid_argument("upsample_bilinear: expects [N,C,H,W]");
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (out_h < H || out_w < W) {
    throw std::invalid_argument("upsample_bilinear: target " + std::to_string(out_h) + "x" +
                                std::to_string(out_w) + " would downscale " +
                                std::to_string(H) + "x" + std::to_string(W));
  }
  auto ty = std::make_shared<std::vector<Lin>>(lin_table(H, out_h));
  auto tx = std::make_shared<std::vector<Lin>>(lin_table(W, out_w));
  const auto& xv = x.data();
  std::vector<T> out(static_cast<size_t>(N * C * out_h * out_w));
  int64_t o = 0;
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const T* plane = xv.data() + nc * H * W;
    for (int64_t dy = 0; dy < out_h; ++dy) {
      const Lin& ly = (*ty)[static_cast<size_t>(dy)];
      for (int64_t dx = 0; dx < out_w; ++dx, ++o) {
        const Lin& lx = (*tx)[static_cast<size_t>(dx)];
        const double top = (1.0 - lx.w) * plane[ly.lo * W + lx.lo] + lx.w * plane[ly.lo * W + lx.hi];
        const double bot = (1.0 - lx.w) * plane[ly.hi * W + lx.lo] + lx.w * plane[ly.hi * W + lx.hi];
        out[static_cast<size_t>(o)] = static_cast<T>((1.0 - ly.w) * top + ly.w * bot);
      }
    }
  }
  return make_op<T>(
      "upsample_bilinear", {N, C, out_h, out_w}, std::move(out), {x},
      [x, ty, tx, N, C, H, W, out_h, out_w](TensorNode<T>& node) mutable {
        if (!x.requires_grad()) return;
        const auto& g = ensure_grad(node);
        auto& gx = ensure_grad(*x.node());
        int64_t o = 0;
        for (int64_t nc = 0; nc < N * C; ++nc) {
          T* plane = gx.data() + nc * H * W;
          for (int64_t dy = 0; dy < out_h; ++dy) {
            const Lin& ly = (*ty)[static_cast<size_t>(dy)];
            for (int64_t dx = 0; dx < out_w; ++dx, ++o) {
              const Lin& lx = (*tx)[static_cast<size_t>(dx)];
              const double gv = static_cast<double>(g[static_cast<size_t>(o)]);
              plane[ly.lo * W + lx.lo] += static_cast<T>((1.0 - ly.w) * (1.0 - lx.w) * gv);
              plane[ly.lo * W + lx.hi] += static_cast<T>((1.0 - ly.w) * lx.w * gv);
              plane[ly.hi * W + lx.lo] += static_cast<T>(ly.w * (1.0 - lx.w) * gv);
              plane[ly.hi * W + lx.hi] += static_cast<T>(ly.w * lx.w * gv);
            }
          }
        }
      });
}

// ---- batch normalization ------------------------------------------------------

template <typename T>
NormParams<T> make_norm(int64_t channels) {
  NormParams<T> p;
  p.gamma = Tensor<T>::full({channels}, T(1)).set_requires_grad(true);
  p.beta = Tensor<T>::zeros({channels}).set_requires_grad(true);
  p.running_mean = Tensor<T>::zeros({channels});
  p.running_var = Tensor<T>::full({channels}, T(1));
  return p;
}

template <typename T>
Tensor<T> norm2d(const Tensor<T>& x, NormParams<T>& p) {
  if (x.rank() != 4) throw std::invalid_argument("norm2d: expects [N,C,H,W]");
  const int64_t C = x.dim(1);
  if (p.gamma.size() != C) {
    throw std::invalid_argument("norm2d: input has " + std::to_string(C) +
                                " channels but params have " + std::to_string(p.gamma.size()));
  }
  if (p.mode == NormMode::eval) {
    if (p.batches_tracked == 0) {
      throw std::runtime_error("norm2d: eval mode before any train-mode batch");
    }
    std::vector<T> istd(static_cast<size_t>(C));
    for (int64_t c = 0; c < C; ++c) {
      istd[static_cast<size_t>(c)] = static_cast<T>(
          1.0 / std::sqrt(static_cast<double>(p.running_var.data()[static_cast<size_t>(c)]) + p.eps));
    }
    Tensor<T> xc = sub(x, p.running_mean.detach());
    Tensor<T> xhat = mul(xc, Tensor<T>::from_data({C}, std::move(istd)));
    return add(mul(xhat, p.gamma), p.beta);
  }

  // Train mode, built entirely from differentiable primitives so the full
  // batch-norm backward falls out of autodiff. Biased variance throughout,
  // including the running buffers.
  Tensor<T> m = mean_axes(x, {0, 2, 3});                       // [C]
  Tensor<T> xc = sub(x, m);
  Tensor<T> var = mean_axes(mul(xc, xc), {0, 2, 3});           // [C]
  Tensor<T> istd = exp(scale(log(affine(var, 1.0, p.eps)), -0.5));
  Tensor<T> y = add(mul(mul(xc, istd), p.gamma), p.beta);

  const double mom = p.momentum;
  for (int64_t c = 0; c < C; ++c) {
    const size_t k = static_cast<size_t>(c);
    p.running_mean.data()[k] = static_cast<T>(
        (1.0 - mom) * static_cast<double>(p.running_mean.data()[k]) +
        mom * static_cast<double>(m.data()[k]));
    p.running_var.data()[k] = static_cast<T>(
        (1.0 - mom) * static_cast<double>(p.running_var.data()[k]) +
        mom * static_cast<double>(var.data()[k]));
  }
  p.batches_tracked++;
  return y;
}

// ---- conv block ----------------------------------------------------------------

template <typename T>
ConvBlockParams<T> make_conv_block(int64_t in_c, int64_t out_c, bool use_norm, Rng& rng) {
  ConvBlockParams<T> p;
  p.conv1 = make_conv2d<T>(in_c, out_c, 3, rng, 1, 1);
  p.conv2 = make_conv2d<T>(out_c, out_c, 3, rng, 1, 1);
  p.use_norm = use_norm;
  if (use_norm) {
    p.norm1 = make_norm<T>(out_c);
    p.norm2 = make_norm<T>(out_c);
  }
  return p;
}

template <typename T>
Tensor<T> conv_block(const Tensor<T>& x, ConvBlockParams<T>& p, NormMode mode) {
  Tensor<T> h = conv2d(x, p.conv1);
  if (p.use_norm) {
    p.norm1.mode = mode;
    h = norm2d(h, p.norm1);
  }
  h = relu(h);
  h = conv2d(h, p.conv2);
  if (p.use_norm) {
    p.norm2.mode = mode;
    h = norm2d(h, p.norm2);
  }
  return relu(h);
}

// ---- explicit instantiations ----------------------------------------------------

#define TAU_INSTANTIATE_NN(T)                                                              \
  template Tensor<T> he_normal<T>(const Shape&, int64_t, Rng&);                            \
  template Conv2dParams<T> make_conv2d<T>(int64_t, int64_t, int, Rng&, int, int);          \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const Conv2dParams<T>&);                  \
  template Tensor<T> maxpool2d<T>(const Tensor<T>&, int, int);                             \
  template Tensor<T> upsample_bilinear<T>(const Tensor<T>&, int64_t, int64_t);             \
  template NormParams<T> make_norm<T>(int64_t);                                            \
  template Tensor<T> norm2d<T>(const Tensor<T>&, NormParams<T>&);                          \
  template ConvBlockParams<T> make_conv_block<T>(int64_t, int64_t, bool, Rng&);            \
  template Tensor<T> conv_block<T>(const Tensor<T>&, ConvBlockParams<T>&, NormMode);

TAU_INSTANTIATE_NN(float)
TAU_INSTANTIATE_NN(double)

#undef TAU_INSTANTIATE_NN

}  // namespace tau
