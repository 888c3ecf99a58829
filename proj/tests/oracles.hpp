#pragma once

// Brute-force reference implementations used as oracles by the test suites.
// Deliberately written as plain loops, independent of the library's kernels.

#include "tau/tensor.hpp"

#include <cmath>
#include <vector>

namespace oracle {

// Direct cross-correlation, no im2col: out[n,oc,oh,ow] =
//   bias[oc] + sum_{ic,ki,kj} x[n,ic,oh*s+ki-p,ow*s+kj-p] * w[oc,ic,ki,kj]
template <typename T>
std::vector<T> conv2d_ref(const std::vector<T>& x, int64_t N, int64_t Cin, int64_t H,
                          int64_t W, const std::vector<T>& w, int64_t Cout, int64_t kh,
                          int64_t kw, const std::vector<T>& bias, int stride, int pad) {
  const int64_t Ho = (H + 2 * pad - kh) / stride + 1;
  const int64_t Wo = (W + 2 * pad - kw) / stride + 1;
  std::vector<T> out(static_cast<size_t>(N * Cout * Ho * Wo), T(0));
  for (int64_t n = 0; n < N; ++n) {
    for (int64_t oc = 0; oc < Cout; ++oc) {
      for (int64_t oh = 0; oh < Ho; ++oh) {
        for (int64_t ow = 0; ow < Wo; ++ow) {
          double acc = static_cast<double>(bias[static_cast<size_t>(oc)]);
          for (int64_t ic = 0; ic < Cin; ++ic) {
            for (int64_t ki = 0; ki < kh; ++ki) {
              for (int64_t kj = 0; kj < kw; ++kj) {
                const int64_t ih = oh * stride + ki - pad;
                const int64_t iw = ow * stride + kj - pad;
                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                acc += static_cast<double>(x[static_cast<size_t>(((n * Cin + ic) * H + ih) * W + iw)]) *
                       static_cast<double>(w[static_cast<size_t>(((oc * Cin + ic) * kh + ki) * kw + kj)]);
              }
            }
          }
          out[static_cast<size_t>(((n * Cout + oc) * Ho + oh) * Wo + ow)] = static_cast<T>(acc);
        }
      }
    }
  }
  return out;
}

// Dense interpolation matrix [out x in] for 1-D bilinear resampling with
// half-pixel centers and edge clamping. Tensor-form oracle for upsampling:
// out_plane = My * in_plane * Mx^T.
inline std::vector<double> bilinear_matrix(int64_t in, int64_t out) {
  std::vector<double> m(static_cast<size_t>(out * in), 0.0);
  for (int64_t d = 0; d < out; ++d) {
    double src = (static_cast<double>(d) + 0.5) * static_cast<double>(in) /
                     static_cast<double>(out) - 0.5;
    if (src < 0.0) src = 0.0;
    if (src > static_cast<double>(in - 1)) src = static_cast<double>(in - 1);
    const int64_t lo = static_cast<int64_t>(src);
    const int64_t hi = std::min(lo + 1, in - 1);
    const double w = src - static_cast<double>(lo);
    m[static_cast<size_t>(d * in + lo)] += 1.0 - w;
    m[static_cast<size_t>(d * in + hi)] += w;
  }
  return m;
}

// Applies the separable matrix-form oracle to one [H,W] plane.
inline std::vector<double> bilinear_ref_plane(const std::vector<double>& plane, int64_t H,
                                              int64_t W, int64_t Ho, int64_t Wo) {
  const auto my = bilinear_matrix(H, Ho);
  const auto mx = bilinear_matrix(W, Wo);
  std::vector<double> tmp(static_cast<size_t>(Ho * W), 0.0);
  for (int64_t i = 0; i < Ho; ++i) {
    for (int64_t k = 0; k < H; ++k) {
      const double w = my[static_cast<size_t>(i * H + k)];
      if (w == 0.0) continue;
      for (int64_t j = 0; j < W; ++j) {
        tmp[static_cast<size_t>(i * W + j)] += w * plane[static_cast<size_t>(k * W + j)];
      }
    }
  }
  std::vector<double> out(static_cast<size_t>(Ho * Wo), 0.0);
  for (int64_t i = 0; i < Ho; ++i) {
    for (int64_t j = 0; j < Wo; ++j) {
      double acc = 0.0;
      for (int64_t k = 0; k < W; ++k) {
        acc += mx[static_cast<size_t>(j * W + k)] * tmp[static_cast<size_t>(i * W + k)];
      }
      out[static_cast<size_t>(i * Wo + j)] = acc;
    }
  }
  return out;
}

// Plain three-loop matrix product, the reference for anything GEMM-backed.
inline std::vector<double> matmul_ref(const std::vector<double>& a, int64_t m, int64_t k,
                                      const std::vector<double>& b, int64_t n) {
  std::vector<double> c(static_cast<size_t>(m * n), 0.0);
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t l = 0; l < k; ++l) {
      const double av = a[static_cast<size_t>(i * k + l)];
      for (int64_t j = 0; j < n; ++j) {
        c[static_cast<size_t>(i * n + j)] += av * b[static_cast<size_t>(l * n + j)];
      }
    }
  }
  return c;
}

// Row-wise softmax over an [m x n] buffer.
inline std::vector<double> softmax_rows_ref(std::vector<double> a, int64_t m, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    double mx = a[static_cast<size_t>(i * n)];
    for (int64_t j = 1; j < n; ++j) mx = std::max(mx, a[static_cast<size_t>(i * n + j)]);
    double denom = 0.0;
    for (int64_t j = 0; j < n; ++j) {
      auto& v = a[static_cast<size_t>(i * n + j)];
      v = std::exp(v - mx);
      denom += v;
    }
    for (int64_t j = 0; j < n; ++j) a[static_cast<size_t>(i * n + j)] /= denom;
  }
  return a;
}

// Exhaustive index-loop transformer self attention over channel tokens, no
// output projection. f is [N,c,hw] row-major, wq/wk/wv are [groups,hw,hw]
// (groups = heads or 1 when shared), pos is [c,hw].
template <typename T>
std::vector<T> tsa_ref(const std::vector<T>& f, int64_t N, int64_t c, int64_t hw,
                       const std::vector<T>& wq, const std::vector<T>& wk,
                       const std::vector<T>& wv, int64_t groups,
                       const std::vector<T>& pos, int heads) {
  const int64_t ch = c / heads;
  std::vector<T> out(static_cast<size_t>(N * c * hw));
  std::vector<double> fp(static_cast<size_t>(c * hw));
  for (int64_t n = 0; n < N; ++n) {
    for (int64_t ci = 0; ci < c; ++ci) {
      for (int64_t t = 0; t < hw; ++t) {
        fp[static_cast<size_t>(ci * hw + t)] =
            static_cast<double>(f[static_cast<size_t>((n * c + ci) * hw + t)]) +
            static_cast<double>(pos[static_cast<size_t>(ci * hw + t)]);
      }
    }
    for (int64_t hd = 0; hd < heads; ++hd) {
      const int64_t g = groups == 1 ? 0 : hd;
      std::vector<double> q(static_cast<size_t>(ch * hw)), k(q), v(q);
      for (int64_t i = 0; i < ch; ++i) {
        for (int64_t t = 0; t < hw; ++t) {
          double aq = 0.0, ak = 0.0, av = 0.0;
          for (int64_t s = 0; s < hw; ++s) {
            const double x = fp[static_cast<size_t>((hd * ch + i) * hw + s)];
            aq += x * static_cast<double>(wq[static_cast<size_t>((g * hw + s) * hw + t)]);
            ak += x * static_cast<double>(wk[static_cast<size_t>((g * hw + s) * hw + t)]);
            av += x * static_cast<double>(wv[static_cast<size_t>((g * hw + s) * hw + t)]);
          }
          q[static_cast<size_t>(i * hw + t)] = aq;
          k[static_cast<size_t>(i * hw + t)] = ak;
          v[static_cast<size_t>(i * hw + t)] = av;
        }
      }
      std::vector<double> logits(static_cast<size_t>(ch * ch));
      for (int64_t i = 0; i < ch; ++i) {
        for (int64_t j = 0; j < ch; ++j) {
          double acc = 0.0;
          for (int64_t t = 0; t < hw; ++t) {
            acc += q[static_cast<size_t>(i * hw + t)] * k[static_cast<size_t>(j * hw + t)];
          }
          logits[static_cast<size_t>(i * ch + j)] = acc / std::sqrt(static_cast<double>(hw));
        }
      }
      const auto a = softmax_rows_ref(logits, ch, ch);
      for (int64_t i = 0; i < ch; ++i) {
        for (int64_t t = 0; t < hw; ++t) {
          double acc = 0.0;
          for (int64_t j = 0; j < ch; ++j) {
            acc += a[static_cast<size_t>(i * ch + j)] * v[static_cast<size_t>(j * hw + t)];
          }
          out[static_cast<size_t>((n * c + hd * ch + i) * hw + t)] = static_cast<T>(acc);
        }
      }
    }
  }
  return out;
}

// Exhaustive global spatial attention. f is [N,c,hw]; the two 1x1 convs are
// given as plain matrices wr [c' x c] + br and wf [c x c] + bf. B follows the
// column-normalized definition B[i][j] = exp(L[i][j]) / sum_i exp(L[i][j]),
// and out[ci][p] = sum_q wfull[ci][q] * B[p][q].
template <typename T>
std::vector<T> gsa_ref(const std::vector<T>& f, int64_t N, int64_t c, int64_t hw,
                       const std::vector<T>& wr, const std::vector<T>& br, int64_t cr,
                       const std::vector<T>& wf, const std::vector<T>& bf) {
  std::vector<T> out(static_cast<size_t>(N * c * hw));
  for (int64_t n = 0; n < N; ++n) {
    const T* fn = f.data() + n * c * hw;
    std::vector<double> r(static_cast<size_t>(cr * hw));
    for (int64_t a = 0; a < cr; ++a) {
      for (int64_t p = 0; p < hw; ++p) {
        double acc = static_cast<double>(br[static_cast<size_t>(a)]);
        for (int64_t ci = 0; ci < c; ++ci) {
          acc += static_cast<double>(wr[static_cast<size_t>(a * c + ci)]) *
                 static_cast<double>(fn[ci * hw + p]);
        }
        r[static_cast<size_t>(a * hw + p)] = acc;
      }
    }
    std::vector<double> expl(static_cast<size_t>(hw * hw));
    for (int64_t i = 0; i < hw; ++i) {
      for (int64_t j = 0; j < hw; ++j) {
        double acc = 0.0;
        for (int64_t a = 0; a < cr; ++a) {
          acc += r[static_cast<size_t>(a * hw + i)] * r[static_cast<size_t>(a * hw + j)];
        }
        expl[static_cast<size_t>(i * hw + j)] = acc;
      }
    }
    // column-wise softmax (normalize over i), with max subtraction
    std::vector<double> b(static_cast<size_t>(hw * hw));
    for (int64_t j = 0; j < hw; ++j) {
      double mx = expl[static_cast<size_t>(j)];
      for (int64_t i = 1; i < hw; ++i) mx = std::max(mx, expl[static_cast<size_t>(i * hw + j)]);
      double denom = 0.0;
      for (int64_t i = 0; i < hw; ++i) {
        b[static_cast<size_t>(i * hw + j)] = std::exp(expl[static_cast<size_t>(i * hw + j)] - mx);
        denom += b[static_cast<size_t>(i * hw + j)];
      }
      for (int64_t i = 0; i < hw; ++i) b[static_cast<size_t>(i * hw + j)] /= denom;
    }
    for (int64_t ci = 0; ci < c; ++ci) {
      std::vector<double> wrow(static_cast<size_t>(hw));
      for (int64_t p = 0; p < hw; ++p) {
        double acc = static_cast<double>(bf[static_cast<size_t>(ci)]);
        for (int64_t cj = 0; cj < c; ++cj) {
          acc += static_cast<double>(wf[static_cast<size_t>(ci * c + cj)]) *
                 static_cast<double>(fn[cj * hw + p]);
        }
        wrow[static_cast<size_t>(p)] = acc;
      }
      for (int64_t p = 0; p < hw; ++p) {
        double acc = 0.0;
        for (int64_t qq = 0; qq < hw; ++qq) {
          acc += wrow[static_cast<size_t>(qq)] * b[static_cast<size_t>(p * hw + qq)];
        }
        out[static_cast<size_t>((n * c + ci) * hw + p)] = static_cast<T>(acc);
      }
    }
  }
  return out;
}

}  // namespace oracle
