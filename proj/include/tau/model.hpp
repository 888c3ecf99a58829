#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "tau/attention.hpp"
#include "tau/io.hpp"
#include "tau/nn.hpp"
#include "tau/tensor.hpp"

namespace tau {

// How decoder stages of different scales are merged before the head:
//   cascade  - every stage upsampled to full resolution, one joint fusion;
//   residual - running accumulator fused with the next finer stage each step;
//   dense    - every stage consumes all earlier fused outputs;
//   none     - plain U-Net, the last decoder stage feeds the head directly.
enum class MscMode { cascade, residual, dense, none };

MscMode msc_mode_from_string(const std::string& s);
std::string to_string(MscMode m);

// Architecture knobs. Spatial extents are fixed at build time because the
// attention tables at the bottleneck are sized for one resolution.
struct ModelConfig {
  int64_t in_channels = 1;
  int64_t base_channels = 16;
  int64_t depth = 4;  // number of pooling stages
  int heads = 8;
  MscMode msc_mode = MscMode::residual;
  bool use_tsa = true;
  bool use_gsa = true;
  bool use_norm = true;
  bool tsa_out_proj = true;
  bool tsa_share_qkv = false;
  uint64_t seed = 0;
};

template <typename T>
struct UNetParams {
  ModelConfig cfg;
  int64_t in_h = 0, in_w = 0;            // extents the model was built for
  std::vector<ConvBlockParams<T>> enc;   // depth blocks, widths base..base*2^(depth-1)
  ConvBlockParams<T> bottom;             // bottleneck block, width base*2^depth
  SaaParams<T> saa;
  std::vector<ConvBlockParams<T>> dec;   // depth blocks, coarsest first
  std::vector<ConvBlockParams<T>> fuse;  // skip-fusion blocks; count depends on msc_mode
  Conv2dParams<T> head;                  // 1x1 conv, base -> 1 channel
};

// One decoder output in production order (stage 1 = coarsest).
template <typename T>
struct DecoderStageOutput {
  int64_t stage_index = 0;
  Tensor<T> features;
  int64_t spatial_scale = 1;  // power-of-two divisor relative to the input
};

// Intermediate activations captured during a forward pass.
template <typename T>
struct ForwardTrace {
  Tensor<T> bottleneck;                       // after attention fusion
  std::vector<DecoderStageOutput<T>> stages;  // decoder outputs, coarsest first
  Tensor<T> fused;                            // the tensor fed to the head
};

// Named handle on one learnable tensor; storage is shared with the model.
template <typename T>
struct ParamRef {
  std::string name;
  Tensor<T> tensor;
  bool decay = true;  // weight-decay eligibility
};

// Parameters are created in one fixed order from cfg.seed, so equal configs
// always build bit-identical models.
template <typename T>
UNetParams<T> build_unet(const ModelConfig& cfg, int64_t h, int64_t w);

// Per stage: conv block, keep the result as a skip, then 2x2 maxpool; the
// bottleneck block runs after the last pool. Skips are returned finest first
// (stage order), bottleneck at 1/2^depth resolution.
template <typename T>
std::pair<std::vector<Tensor<T>>, Tensor<T>> encoder_forward(const Tensor<T>& x,
                                                             UNetParams<T>& p, NormMode mode);

// Upsample prev by exactly 2x (bilinear), concatenate the skip after it on
// the channel axis, then fuse with the given conv block.
template <typename T>
Tensor<T> decoder_stage(const Tensor<T>& prev, const Tensor<T>& skip,
                        ConvBlockParams<T>& block, NormMode mode);

// Multi-scale fusion of the decoder stage outputs. All three take the stage
// list coarsest-first and concatenate coarser inputs before finer ones, with
// the consumer's own features last; `fuse` holds one conv block for cascade
// and stages-1 blocks for residual/dense. With two stages, residual and
// dense are the same wiring and produce bit-identical results.
template <typename T>
Tensor<T> msc_cascade(const std::vector<DecoderStageOutput<T>>& stages,
                      std::vector<ConvBlockParams<T>>& fuse, NormMode mode);
template <typename T>
Tensor<T> msc_residual(const std::vector<DecoderStageOutput<T>>& stages,
                       std::vector<ConvBlockParams<T>>& fuse, NormMode mode);
template <typename T>
Tensor<T> msc_dense(const std::vector<DecoderStageOutput<T>>& stages,
                    std::vector<ConvBlockParams<T>>& fuse, NormMode mode);

// encoder -> attention bottleneck -> decoder -> multi-scale fusion -> 1x1
// conv -> sigmoid. Output is [N, 1, H, W] with values in (0, 1).
template <typename T>
Tensor<T> model_forward(const Tensor<T>& x, UNetParams<T>& p, NormMode mode,
                        ForwardTrace<T>* trace = nullptr);

// Every learnable tensor with a stable name (checkpoint order). Lambdas and
// norm affine parameters are flagged exempt from weight decay.
template <typename T>
std::vector<ParamRef<T>> collect_params(UNetParams<T>& p);

// Norm layers by name, for checkpointing their running statistics.
template <typename T>
std::vector<std::pair<std::string, NormParams<T>*>> collect_norms(UNetParams<T>& p);

// Channel-mean activation map of sample 0, min-max scaled to [0, 255];
// a constant map (max == min) renders as all zeros.
template <typename T>
ImageU8 channel_mean_image(const Tensor<T>& features);

// Forward `x` and write one PGM per decoder stage (stage_<k>.pgm, coarsest
// stage first) into out_dir, creating the directory if needed.
template <typename T>
void export_activations(const Tensor<T>& x, UNetParams<T>& p, NormMode mode,
                        const std::string& out_dir);

}  // namespace tau
