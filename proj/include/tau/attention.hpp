#pragma once

#include "tau/nn.hpp"
#include "tau/tensor.hpp"

namespace tau {

// Self-aware attention bottleneck: transformer-style channel attention (TSA),
// global spatial attention (GSA), and a learnable weighted fusion of both with
// the incoming encoder features.

// ---- transformer self attention ---------------------------------------------

template <typename T>
struct TsaParams {
  // Right-multiplication projections over the flattened spatial axis,
  // [groups, h*w, h*w]; groups == heads, or 1 when shared across heads.
  Tensor<T> w_q, w_k, w_v;
  Tensor<T> pos_enc;  // [c, h, w], learnable, init Normal(0, 0.02)
  int heads = 8;
  int64_t d_k = 0;  // per-head query/key row length (= h*w)
  bool use_out_proj = true;
  Conv2dParams<T> out_proj;  // 1x1, c -> c, applied after head concat
};

template <typename T>
TsaParams<T> make_tsa(int64_t c, int64_t h, int64_t w, int heads, bool share_qkv,
                      bool use_out_proj, Rng& rng);

template <typename T>
struct TsaResult {
  Tensor<T> out;   // [N, c, h, w]
  Tensor<T> attn;  // [N*heads, c/heads, c/heads]; every row sums to 1
};

// Channels are the token axis: with F' = F + pos_enc flattened to [c, h*w],
// each head h takes rows h*c/heads .. (h+1)*c/heads and computes
// softmax(Q K^T / sqrt(d_k)) V with Q = F'W_q, K = F'W_k, V = F'W_v.
template <typename T>
TsaResult<T> tsa_forward(const Tensor<T>& f, const TsaParams<T>& p);

// ---- global spatial attention ------------------------------------------------

template <typename T>
struct GsaParams {
  Conv2dParams<T> proj_reduce;  // 1x1, c -> c/8
  Conv2dParams<T> proj_full;    // 1x1, c -> c
};

template <typename T>
GsaParams<T> make_gsa(int64_t c, Rng& rng);

template <typename T>
struct GsaResult {
  Tensor<T> out;   // [N, c, h, w]
  Tensor<T> attn;  // [N, h*w, h*w]; every row sums to 1
};

// Position-pairwise attention: with reduced features r_p per position,
// logits L[i,j] = r_i . r_j are normalized over i (the stored map holds the
// transpose, so its rows sum to 1) and output position p aggregates
// sum_q W[:,q] * B[p,q] from the full projection W.
template <typename T>
GsaResult<T> gsa_forward(const Tensor<T>& f, const GsaParams<T>& p);

// ---- fusion --------------------------------------------------------------------

template <typename T>
struct FusionParams {
  Tensor<T> lambda1, lambda2;  // [1] scalars, initialized to exactly 0
};

template <typename T>
FusionParams<T> make_fusion();

// lambda1 * F_tsa + lambda2 * F_gsa + F_en, elementwise; both lambdas learn.
template <typename T>
Tensor<T> saa_fuse(const Tensor<T>& f_en, const Tensor<T>& f_tsa, const Tensor<T>& f_gsa,
                   const FusionParams<T>& p);

// ---- composed block -------------------------------------------------------------

template <typename T>
struct SaaParams {
  TsaParams<T> tsa;
  GsaParams<T> gsa;
  FusionParams<T> fuse;
  bool use_tsa = true;
  bool use_gsa = true;
};

template <typename T>
SaaParams<T> make_saa(int64_t c, int64_t h, int64_t w, int heads, bool use_tsa,
                      bool use_gsa, bool share_qkv, bool use_out_proj, Rng& rng);

template <typename T>
struct SaaResult {
  Tensor<T> out;
  Tensor<T> tsa_attn;  // undefined when TSA is ablated
  Tensor<T> gsa_attn;  // undefined when GSA is ablated
};

// Ablating a branch drops its term from the fusion entirely (a zero
// contribution); with both branches off this is the identity on f_en.
template <typename T>
SaaResult<T> saa_forward(const Tensor<T>& f_en, const SaaParams<T>& p);

}  // namespace tau
