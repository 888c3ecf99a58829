#pragma once

#include "tau/tensor.hpp"

namespace tau {

// He-style fan-in initialization: Normal(0, sqrt(2 / fan_in)).
template <typename T>
Tensor<T> he_normal(const Shape& s, int64_t fan_in, Rng& rng);

// ---- conv2d -----------------------------------------------------------------

template <typename T>
struct Conv2dParams {
  Tensor<T> weight;  // [out_c, in_c, kh, kw]
  Tensor<T> bias;    // [out_c]
  int stride = 1;
  int padding = 0;
};

// He-initialized weights (fan_in = in_c * k * k), zero bias; both require grad.
template <typename T>
Conv2dParams<T> make_conv2d(int64_t in_c, int64_t out_c, int k, Rng& rng,
                            int stride = 1, int padding = 0);

// Cross-correlation (no kernel flip) plus bias.
// Output extents: floor((in + 2*pad - k) / stride) + 1.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Conv2dParams<T>& p);

// ---- pooling / resampling ---------------------------------------------------

// Per-window max. Ties route the gradient to the first (row-major) maximal
// element. Requires (H - window) and (W - window) divisible by stride.
template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x, int window = 2, int stride = 2);

// Bilinear upsampling with half-pixel centers: src = (dst + 0.5) * in/out - 0.5,
// clamped at edges ("align_corners = false" semantics). Upscaling only.
template <typename T>
Tensor<T> upsample_bilinear(const Tensor<T>& x, int64_t out_h, int64_t out_w);

// ---- normalization ----------------------------------------------------------

enum class NormMode { train, eval };

template <typename T>
struct NormParams {
  Tensor<T> gamma, beta;                 // [C], learnable
  Tensor<T> running_mean, running_var;   // [C], buffers (biased variance)
  double momentum = 0.1;
  double eps = 1e-5;
  NormMode mode = NormMode::train;
  int64_t batches_tracked = 0;
};

template <typename T>
NormParams<T> make_norm(int64_t channels);

// Batch normalization over (N, H, W) per channel. Train mode normalizes with
// batch statistics (biased variance, matching the running buffers) and updates
// running stats; eval mode applies running stats and requires at least one
// prior train-mode batch.
template <typename T>
Tensor<T> norm2d(const Tensor<T>& x, NormParams<T>& p);

// ---- conv block -------------------------------------------------------------

// [conv3x3 -> norm -> relu] x 2 with "same" padding; norm is toggleable.
template <typename T>
struct ConvBlockParams {
  Conv2dParams<T> conv1, conv2;
  NormParams<T> norm1, norm2;
  bool use_norm = true;
};

template <typename T>
ConvBlockParams<T> make_conv_block(int64_t in_c, int64_t out_c, bool use_norm, Rng& rng);

template <typename T>
Tensor<T> conv_block(const Tensor<T>& x, ConvBlockParams<T>& p, NormMode mode);

}  // namespace tau
