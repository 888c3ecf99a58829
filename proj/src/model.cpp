#include "tau/model.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <stdexcept>

namespace tau {
namespace {

int64_t pow2(int64_t n) { return int64_t{1} << n; }

void check_cfg(const ModelConfig& cfg) {
  if (cfg.in_channels < 1 || cfg.base_channels < 1 || cfg.depth < 1 || cfg.heads < 1)
    throw std::invalid_argument(
        "model: in_channels, base_channels, depth, and heads must all be positive");
  if (cfg.msc_mode != MscMode::none && cfg.depth < 2)
    throw std::invalid_argument("model: multi-scale fusion needs depth >= 2, got depth " +
                                std::to_string(cfg.depth));
  const int64_t bottleneck_c = cfg.base_channels * pow2(cfg.depth);
  const int64_t div = std::max<int64_t>(cfg.heads, 8);
  if (bottleneck_c % div != 0)
    throw std::invalid_argument("model: bottleneck channels " + std::to_string(bottleneck_c) +
                                " must be divisible by " + std::to_string(div));
}

void check_extents(const ModelConfig& cfg, int64_t h, int64_t w, const char* who) {
  const int64_t d = pow2(cfg.depth);
  if (h <= 0 || w <= 0 || h % d != 0 || w % d != 0)
    throw std::invalid_argument(std::string(who) + ": extents " + std::to_string(h) + "x" +
                                std::to_string(w) + " must be divisible by " + std::to_string(d) +
                                " (depth " + std::to_string(cfg.depth) + ")");
}

// Width of decoder stage n (1-based, coarsest first): base * 2^(depth - n).
int64_t stage_width(const ModelConfig& cfg, int64_t n) {
  return cfg.base_channels * pow2(cfg.depth - n);
}

template <typename T>
Tensor<T> to_extents(const Tensor<T>& t, int64_t h, int64_t w) {
  if (t.dim(2) == h && t.dim(3) == w) return t;
  return upsample_bilinear(t, h, w);
}

template <typename T>
void check_msc_args(const std::vector<DecoderStageOutput<T>>& stages,
                    const std::vector<ConvBlockParams<T>>& fuse, size_t want_fuse,
                    const char* who) {
  if (stages.size() < 2)
    throw std::invalid_argument(std::string(who) + ": needs at least 2 decoder stages, got " +
                                std::to_string(stages.size()));
  if (fuse.size() != want_fuse)
    throw std::invalid_argument(std::string(who) + ": expected " + std::to_string(want_fuse) +
                                " fusion blocks, got " + std::to_string(fuse.size()));
}

template <typename T>
void add_conv(std::vector<ParamRef<T>>& out, const std::string& prefix, Conv2dParams<T>& c) {
  out.push_back({prefix + ".weight", c.weight, true});
  out.push_back({prefix + ".bias", c.bias, true});
}

template <typename T>
void add_block(std::vector<ParamRef<T>>& out, const std::string& prefix,
               ConvBlockParams<T>& blk) {
  add_conv(out, prefix + ".conv1", blk.conv1);
  if (blk.use_norm) {
    out.push_back({prefix + ".norm1.gamma", blk.norm1.gamma, false});
    out.push_back({prefix + ".norm1.beta", blk.norm1.beta, false});
  }
  add_conv(out, prefix + ".conv2", blk.conv2);
  if (blk.use_norm) {
    out.push_back({prefix + ".norm2.gamma", blk.norm2.gamma, false});
    out.push_back({prefix + ".norm2.beta", blk.norm2.beta, false});
  }
}

}  // namespace

MscMode msc_mode_from_string(const std::string& s) {
  if (s == "cascade") return MscMode::cascade;
  if (s == "residual") return MscMode::residual;
  if (s == "dense") return MscMode::dense;
  if (s == "none") return MscMode::none;
  throw std::invalid_argument("unknown msc_mode '" + s +
                              "' (expected cascade, residual, dense, or none)");
}

std::string to_string(MscMode m) {
  switch (m) {
    case MscMode::cascade: return "cascade";
    case MscMode::residual: return "residual";
    case MscMode::dense: return "dense";
    case MscMode::none: return "none";
  }
  throw std::invalid_argument("unknown msc_mode value");
}

template <typename T>
UNetParams<T> build_unet(const ModelConfig& cfg, int64_t h, int64_t w) {
  check_cfg(cfg);
  check_extents(cfg, h, w, "build_unet");
  Rng rng(cfg.seed);
  UNetParams<T> p;
  p.cfg = cfg;
  p.in_h = h;
  p.in_w = w;
  const int64_t b = cfg.base_channels;
  const int64_t d = cfg.depth;

  int64_t in_c = cfg.in_channels;
  for (int64_t i = 0; i < d; ++i) {
    p.enc.push_back(make_conv_block<T>(in_c, b * pow2(i), cfg.use_norm, rng));
    in_c = b * pow2(i);
  }
  p.bottom = make_conv_block<T>(b * pow2(d - 1), b * pow2(d), cfg.use_norm, rng);
  p.saa = make_saa<T>(b * pow2(d), h / pow2(d), w / pow2(d), cfg.heads, cfg.use_tsa,
                      cfg.use_gsa, cfg.tsa_share_qkv, cfg.tsa_out_proj, rng);
  for (int64_t n = 1; n <= d; ++n) {
    // Upsampled previous stage (2x the width) concatenated with the skip.
    p.dec.push_back(make_conv_block<T>(3 * stage_width(cfg, n), stage_width(cfg, n),
                                       cfg.use_norm, rng));
  }
  switch (cfg.msc_mode) {
    case MscMode::cascade: {
      int64_t total = 0;
      for (int64_t n = 1; n <= d; ++n) total += stage_width(cfg, n);
      p.fuse.push_back(make_conv_block<T>(total, b, cfg.use_norm, rng));
      break;
    }
    case MscMode::residual:
      for (int64_t n = 2; n <= d; ++n)
        p.fuse.push_back(make_conv_block<T>(stage_width(cfg, n - 1) + stage_width(cfg, n),
                                            stage_width(cfg, n), cfg.use_norm, rng));
      break;
    case MscMode::dense:
      for (int64_t n = 2; n <= d; ++n) {
        int64_t in = stage_width(cfg, n);
        for (int64_t m = 1; m < n; ++m) in += stage_width(cfg, m);
        p.fuse.push_back(make_conv_block<T>(in, stage_width(cfg, n), cfg.use_norm, rng));
      }
      break;
    case MscMode::none: break;
  }
  p.head = make_conv2d<T>(b, 1, 1, rng);
  return p;
}

template <typename T>
std::pair<std::vector<Tensor<T>>, Tensor<T>> encoder_forward(const Tensor<T>& x,
                                                             UNetParams<T>& p, NormMode mode) {
  if (x.rank() != 4)
    throw std::invalid_argument("encoder_forward: input must be [N, C, H, W]");
  if (x.dim(1) != p.cfg.in_channels)
    throw std::invalid_argument("encoder_forward: expected " +
                                std::to_string(p.cfg.in_channels) + " input channels, got " +
                                std::to_string(x.dim(1)));
  check_extents(p.cfg, x.dim(2), x.dim(3), "encoder_forward");
  std::vector<Tensor<T>> skips;
  Tensor<T> cur = x;
  for (auto& block : p.enc) {
    cur = conv_block(cur, block, mode);
    skips.push_back(cur);
    cur = maxpool2d(cur);
  }
  return {std::move(skips), conv_block(cur, p.bottom, mode)};
}

template <typename T>
Tensor<T> decoder_stage(const Tensor<T>& prev, const Tensor<T>& skip,
                        ConvBlockParams<T>& block, NormMode mode) {
  if (prev.rank() != 4 || skip.rank() != 4)
    throw std::invalid_argument("decoder_stage: inputs must be [N, C, H, W]");
  if (skip.dim(2) != 2 * prev.dim(2) || skip.dim(3) != 2 * prev.dim(3))
    throw std::invalid_argument(
        "decoder_stage: skip extents " + std::to_string(skip.dim(2)) + "x" +
        std::to_string(skip.dim(3)) + " must be exactly twice " + std::to_string(prev.dim(2)) +
        "x" + std::to_string(prev.dim(3)));
  Tensor<T> up = upsample_bilinear(prev, skip.dim(2), skip.dim(3));
  return conv_block(concat<T>({up, skip}, 1), block, mode);
}

template <typename T>
Tensor<T> msc_cascade(const std::vector<DecoderStageOutput<T>>& stages,
                      std::vector<ConvBlockParams<T>>& fuse, NormMode mode) {
  check_msc_args(stages, fuse, 1, "msc_cascade");
  const int64_t th = stages.back().features.dim(2);
  const int64_t tw = stages.back().features.dim(3);
  std::vector<Tensor<T>> parts;
  for (const auto& s : stages) parts.push_back(to_extents(s.features, th, tw));
  return conv_block(concat<T>(parts, 1), fuse[0], mode);
}

template <typename T>
Tensor<T> msc_residual(const std::vector<DecoderStageOutput<T>>& stages,
                       std::vector<ConvBlockParams<T>>& fuse, NormMode mode) {
  check_msc_args(stages, fuse, stages.size() - 1, "msc_residual");
  Tensor<T> acc = stages[0].features;
  for (size_t n = 1; n < stages.size(); ++n) {
    const Tensor<T>& f = stages[n].features;
    Tensor<T> up = to_extents(acc, f.dim(2), f.dim(3));
    acc = conv_block(concat<T>({up, f}, 1), fuse[n - 1], mode);
  }
  return acc;
}

template <typename T>
Tensor<T> msc_dense(const std::vector<DecoderStageOutput<T>>& stages,
                    std::vector<ConvBlockParams<T>>& fuse, NormMode mode) {
  check_msc_args(stages, fuse, stages.size() - 1, "msc_dense");
  std::vector<Tensor<T>> outs;  // fused output per stage; stage 1 passes through
  outs.push_back(stages[0].features);
  for (size_t n = 1; n < stages.size(); ++n) {
    const Tensor<T>& f = stages[n].features;
    std::vector<Tensor<T>> parts;
    for (size_t m = 0; m < n; ++m) parts.push_back(to_extents(outs[m], f.dim(2), f.dim(3)));
    parts.push_back(f);
    outs.push_back(conv_block(concat<T>(parts, 1), fuse[n - 1], mode));
  }
  return outs.back();
}

template <typename T>
Tensor<T> model_forward(const Tensor<T>& x, UNetParams<T>& p, NormMode mode,
                        ForwardTrace<T>* trace) {
  if (x.rank() != 4)
    throw std::invalid_argument("model_forward: input must be [N, C, H, W]");
  if (x.dim(2) != p.in_h || x.dim(3) != p.in_w)
    throw std::invalid_argument("model_forward: model was built for " + std::to_string(p.in_h) +
                                "x" + std::to_string(p.in_w) + " inputs, got " +
                                std::to_string(x.dim(2)) + "x" + std::to_string(x.dim(3)));
  auto enc = encoder_forward(x, p, mode);
  std::vector<Tensor<T>>& skips = enc.first;
  SaaResult<T> saa = saa_forward(enc.second, p.saa);
  Tensor<T> cur = saa.out;
  if (trace) trace->bottleneck = cur;

  const int64_t d = p.cfg.depth;
  std::vector<DecoderStageOutput<T>> stages;
  for (int64_t n = 1; n <= d; ++n) {
    cur = decoder_stage(cur, skips[static_cast<size_t>(d - n)], p.dec[static_cast<size_t>(n - 1)],
                        mode);
    stages.push_back({n, cur, pow2(d - n)});
  }

  Tensor<T> fused = cur;
  switch (p.cfg.msc_mode) {
    case MscMode::cascade: fused = msc_cascade(stages, p.fuse, mode); break;
    case MscMode::residual: fused = msc_residual(stages, p.fuse, mode); break;
    case MscMode::dense: fused = msc_dense(stages, p.fuse, mode); break;
    case MscMode::none: break;
  }
  if (trace) {
    trace->stages = std::move(stages);
    trace->fused = fused;
  }
  return sigmoid(conv2d(fused, p.head));
}

template <typename T>
std::vector<ParamRef<T>> collect_params(UNetParams<T>& p) {
  std::vector<ParamRef<T>> out;
  for (size_t i = 0; i < p.enc.size(); ++i)
    add_block(out, "enc" + std::to_string(i + 1), p.enc[i]);
  add_block(out, "bottom", p.bottom);
  if (p.cfg.use_tsa) {
    out.push_back({"tsa.wq", p.saa.tsa.w_q, true});
    out.push_back({"tsa.wk", p.saa.tsa.w_k, true});
    out.push_back({"tsa.wv", p.saa.tsa.w_v, true});
    out.push_back({"tsa.pos", p.saa.tsa.pos_enc, true});
    if (p.saa.tsa.use_out_proj) add_conv(out, "tsa.proj", p.saa.tsa.out_proj);
  }
  if (p.cfg.use_gsa) {
    add_conv(out, "gsa.reduce", p.saa.gsa.proj_reduce);
    add_conv(out, "gsa.full", p.saa.gsa.proj_full);
  }
  // Each lambda only participates in the graph when its branch is enabled.
  if (p.cfg.use_tsa) out.push_back({"saa.lambda1", p.saa.fuse.lambda1, false});
  if (p.cfg.use_gsa) out.push_back({"saa.lambda2", p.saa.fuse.lambda2, false});
  for (size_t i = 0; i < p.dec.size(); ++i)
    add_block(out, "dec" + std::to_string(i + 1), p.dec[i]);
  for (size_t i = 0; i < p.fuse.size(); ++i)
    add_block(out, "msc" + std::to_string(i + 1), p.fuse[i]);
  add_conv(out, "head", p.head);
  return out;
}

template <typename T>
std::vector<std::pair<std::string, NormParams<T>*>> collect_norms(UNetParams<T>& p) {
  std::vector<std::pair<std::string, NormParams<T>*>> out;
  auto add = [&out](const std::string& prefix, ConvBlockParams<T>& blk) {
    if (!blk.use_norm) return;
    out.push_back({prefix + ".norm1", &blk.norm1});
    out.push_back({prefix + ".norm2", &blk.norm2});
  };
  for (size_t i = 0; i < p.enc.size(); ++i) add("enc" + std::to_string(i + 1), p.enc[i]);
  add("bottom", p.bottom);
  for (size_t i = 0; i < p.dec.size(); ++i) add("dec" + std::to_string(i + 1), p.dec[i]);
  for (size_t i = 0; i < p.fuse.size(); ++i) add("msc" + std::to_string(i + 1), p.fuse[i]);
  return out;
}

template <typename T>
ImageU8 channel_mean_image(const Tensor<T>& features) {
  if (features.rank() != 4)
    throw std::invalid_argument("channel_mean_image: input must be [N, C, H, W]");
  const int64_t c = features.dim(1), h = features.dim(2), w = features.dim(3);
  const int64_t hw = h * w;
  const std::vector<T>& v = features.data();
  std::vector<double> m(static_cast<size_t>(hw), 0.0);
  for (int64_t ch = 0; ch < c; ++ch)  // sample 0 only
    for (int64_t i = 0; i < hw; ++i) m[static_cast<size_t>(i)] += static_cast<double>(v[static_cast<size_t>(ch * hw + i)]);
  double lo = m[0], hi = m[0];
  for (double x : m) {
    lo = std::min(lo, x);
    hi = std::max(hi, x);
  }
  ImageU8 img;
  img.h = h;
  img.w = w;
  img.pixels.assign(static_cast<size_t>(hw), 0);
  if (hi > lo) {
    for (int64_t i = 0; i < hw; ++i) {
      const double scaled = (m[static_cast<size_t>(i)] - lo) / (hi - lo) * 255.0;
      img.pixels[static_cast<size_t>(i)] =
          static_cast<uint8_t>(std::clamp<long>(std::lround(scaled), 0, 255));
    }
  }
  return img;
}

template <typename T>
void export_activations(const Tensor<T>& x, UNetParams<T>& p, NormMode mode,
                        const std::string& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec)
    throw std::runtime_error("export_activations: cannot create " + out_dir + ": " +
                             ec.message());
  ForwardTrace<T> trace;
  {
    NoGradGuard ng;
    model_forward(x, p, mode, &trace);
  }
  for (const auto& s : trace.stages)
    write_pgm(out_dir + "/stage_" + std::to_string(s.stage_index) + ".pgm",
              channel_mean_image(s.features));
}

#define TAU_INSTANTIATE_MODEL(T)                                                              \
  template UNetParams<T> build_unet<T>(const ModelConfig&, int64_t, int64_t);                 \
  template std::pair<std::vector<Tensor<T>>, Tensor<T>> encoder_forward<T>(                   \
      const Tensor<T>&, UNetParams<T>&, NormMode);                                            \
  template Tensor<T> decoder_stage<T>(const Tensor<T>&, const Tensor<T>&, ConvBlockParams<T>&, \
                                      NormMode);                                              \
  template Tensor<T> msc_cascade<T>(const std::vector<DecoderStageOutput<T>>&,                \
                                    std::vector<ConvBlockParams<T>>&, NormMode);              \
  template Tensor<T> msc_residual<T>(const std::vector<DecoderStageOutput<T>>&,               \
                                     std::vector<ConvBlockParams<T>>&, NormMode);             \
  template Tensor<T> msc_dense<T>(const std::vector<DecoderStageOutput<T>>&,                  \
                                  std::vector<ConvBlockParams<T>>&, NormMode);                \
  template Tensor<T> model_forward<T>(const Tensor<T>&, UNetParams<T>&, NormMode,             \
                                      ForwardTrace<T>*);                                      \
  template std::vector<ParamRef<T>> collect_params<T>(UNetParams<T>&);                        \
  template std::vector<std::pair<std::string, NormParams<T>*>> collect_norms<T>(              \
      UNetParams<T>&);                                                                        \
  template ImageU8 channel_mean_image<T>(const Tensor<T>&);                                   \
  template void export_activations<T>(const Tensor<T>&, UNetParams<T>&, NormMode,             \
                                      const std::string&);

TAU_INSTANTIATE_MODEL(float)
TAU_INSTANTIATE_MODEL(double)

#undef TAU_INSTANTIATE_MODEL

}  // namespace tau
