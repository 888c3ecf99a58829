#include "tau/attention.hpp"

#include <cmath>
#include <stdexcept>

namespace tau {

// ---- TSA ---------------------------------------------------------------------

template <typename T>
TsaParams<T> make_tsa(int64_t c, int64_t h, int64_t w, int heads, bool share_qkv,
                      bool use_out_proj, Rng& rng) {
  if (heads <= 0 || c % heads != 0) {
    throw std::invalid_argument("tsa: " + std::to_string(c) + " channels not divisible by " +
                                std::to_string(heads) + " heads");
  }
  const int64_t hw = h * w;
  const int64_t groups = share_qkv ? 1 : heads;
  TsaParams<T> p;
  p.w_q = he_normal<T>({groups, hw, hw}, hw, rng).set_requires_grad(true);
  p.w_k = he_normal<T>({groups, hw, hw}, hw, rng).set_requires_grad(true);
  p.w_v = he_normal<T>({groups, hw, hw}, hw, rng).set_requires_grad(true);
  p.pos_enc = Tensor<T>::randn({c, h, w}, rng, 0.02).set_requires_grad(true);
  p.heads = heads;
  p.d_k = hw;
  p.use_out_proj = use_out_proj;
  if (use_out_proj) p.out_proj = make_conv2d<T>(c, c, 1, rng);
  return p;
}

template <typename T>
TsaResult<T> tsa_forward(const Tensor<T>& f, const TsaParams<T>& p) {
  if (f.rank() != 4) throw std::invalid_argument("tsa_forward: expects [N,c,h,w]");
  const int64_t N = f.dim(0), c = f.dim(1), h = f.dim(2), w = f.dim(3);
  if (c % p.heads != 0) {
    throw std::invalid_argument("tsa_forward: " + std::to_string(c) +
                                " channels not divisible by " + std::to_string(p.heads) +
                                " heads");
  }
  if (p.pos_enc.shape() != Shape{c, h, w}) {
    throw std::invalid_argument("tsa_forward: pos_enc " + shape_str(p.pos_enc.shape()) +
                                " does not match features " + shape_str(f.shape()));
  }
  const int64_t hw = h * w;
  const int64_t ch = c / p.heads;  // channel tokens per head

  Tensor<T> fp = add(f, p.pos_enc);
  Tensor<T> seq = reshape(fp, {N * p.heads, ch, hw});
  Tensor<T> q = bmm_grouped(seq, p.w_q);
  Tensor<T> k = bmm_grouped(seq, p.w_k);
  Tensor<T> v = bmm_grouped(seq, p.w_v);
  Tensor<T> logits = scale(bmm(q, permute(k, {0, 2, 1})), 1.0 / std::sqrt(static_cast<double>(hw)));
  Tensor<T> a = softmax(logits, 2);  // [N*heads, ch, ch], rows sum to 1
  Tensor<T> out = reshape(bmm(a, v), {N, c, h, w});
  if (p.use_out_proj) out = conv2d(out, p.out_proj);
  return {out, a};
}

// ---- GSA ---------------------------------------------------------------------

template <typename T>
GsaParams<T> make_gsa(int64_t c, Rng& rng) {
  if (c % 8 != 0) {
    throw std::invalid_argument("gsa: " + std::to_string(c) + " channels not divisible by 8");
  }
  GsaParams<T> p;
  p.proj_reduce = make_conv2d<T>(c, c / 8, 1, rng);
  p.proj_full = make_conv2d<T>(c, c, 1, rng);
  return p;
}

template <typename T>
GsaResult<T> gsa_forward(const Tensor<T>& f, const GsaParams<T>& p) {
  if (f.rank() != 4) throw std::invalid_argument("gsa_forward: expects [N,c,h,w]");
  const int64_t N = f.dim(0), c = f.dim(1), h = f.dim(2), w = f.dim(3);
  if (c % 8 != 0 || p.proj_reduce.weight.dim(1) != c) {
    throw std::invalid_argument("gsa_forward: " + std::to_string(c) +
                                " channels incompatible with params (need c divisible by 8)");
  }
  const int64_t hw = h * w;

  Tensor<T> n_mat = reshape(conv2d(f, p.proj_reduce), {N, c / 8, hw});  // N: c' x hw
  Tensor<T> m_mat = permute(n_mat, {0, 2, 1});                          // M: hw x c'
  Tensor<T> logits = bmm(m_mat, n_mat);  // L[i,j] = M_i . N_j
  // Normalize over i, the first logit index, by storing the transpose and
  // softmaxing its rows: attn[j,i] = exp(L[i,j]) / sum_i exp(L[i,j]).
  Tensor<T> attn = softmax(permute(logits, {0, 2, 1}), 2);  // [N, hw, hw]
  Tensor<T> w_full = reshape(conv2d(f, p.proj_full), {N, c, hw});
  // out[:,p] = sum_q W[:,q] * B[p,q] with B the pre-transpose map = W x attn.
  Tensor<T> out = reshape(bmm(w_full, attn), {N, c, h, w});
  return {out, attn};
}

// ---- fusion ---------------------------------------------------------------------

template <typename T>
FusionParams<T> make_fusion() {
  FusionParams<T> p;
  p.lambda1 = Tensor<T>::zeros({1}).set_requires_grad(true);
  p.lambda2 = Tensor<T>::zeros({1}).set_requires_grad(true);
  return p;
}

template <typename T>
Tensor<T> saa_fuse(const Tensor<T>& f_en, const Tensor<T>& f_tsa, const Tensor<T>& f_gsa,
                   const FusionParams<T>& p) {
  if (f_en.shape() != f_tsa.shape() || f_en.shape() != f_gsa.shape()) {
    throw std::invalid_argument("saa_fuse: shapes differ: " + shape_str(f_en.shape()) +
                                ", " + shape_str(f_tsa.shape()) + ", " +
                                shape_str(f_gsa.shape()));
  }
  return add(add(mul(p.lambda1, f_tsa), mul(p.lambda2, f_gsa)), f_en);
}

// ---- composed block ----------------------------------------------------------------

template <typename T>
SaaParams<T> make_saa(int64_t c, int64_t h, int64_t w, int heads, bool use_tsa,
                      bool use_gsa, bool share_qkv, bool use_out_proj, Rng& rng) {
  SaaParams<T> p;
  p.use_tsa = use_tsa;
  p.use_gsa = use_gsa;
  if (use_tsa) p.tsa = make_tsa<T>(c, h, w, heads, share_qkv, use_out_proj, rng);
  if (use_gsa) p.gsa = make_gsa<T>(c, rng);
  p.fuse = make_fusion<T>();
  return p;
}

template <typename T>
SaaResult<T> saa_forward(const Tensor<T>& f_en, const SaaParams<T>& p) {
  SaaResult<T> r;
  if (!p.use_tsa && !p.use_gsa) {
    r.out = f_en;
    return r;
  }
  Tensor<T> acc;
  if (p.use_tsa) {
    TsaResult<T> t = tsa_forward(f_en, p.tsa);
    r.tsa_attn = t.attn;
    acc = mul(p.fuse.lambda1, t.out);
  }
  if (p.use_gsa) {
    GsaResult<T> g = gsa_forward(f_en, p.gsa);
    r.gsa_attn = g.attn;
    Tensor<T> term = mul(p.fuse.lambda2, g.out);
    acc = acc.defined() ? add(acc, term) : term;
  }
  r.out = add(acc, f_en);
  return r;
}

// ---- explicit instantiations ---------------------------------------------------------

#define TAU_INSTANTIATE_ATTN(T)                                                           \
  template TsaParams<T> make_tsa<T>(int64_t, int64_t, int64_t, int, bool, bool, Rng&);    \
  template TsaResult<T> tsa_forward<T>(const Tensor<T>&, const TsaParams<T>&);            \
  template GsaParams<T> make_gsa<T>(int64_t, Rng&);                                       \
  template GsaResult<T> gsa_forward<T>(const Tensor<T>&, const GsaParams<T>&);            \
  template FusionParams<T> make_fusion<T>();                                              \
  template Tensor<T> saa_fuse<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,    \
                                 const FusionParams<T>&);                                 \
  template SaaParams<T> make_saa<T>(int64_t, int64_t, int64_t, int, bool, bool, bool,     \
                                    bool, Rng&);                                          \
  template SaaResult<T> saa_forward<T>(const Tensor<T>&, const SaaParams<T>&);

TAU_INSTANTIATE_ATTN(float)
TAU_INSTANTIATE_ATTN(double)

#undef TAU_INSTANTIATE_ATTN

}  // namespace tau
