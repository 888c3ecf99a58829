#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tau/tensor.hpp"

namespace tau {

// 8-bit grayscale raster, row-major.
struct ImageU8 {
  int64_t h = 0, w = 0;
  std::vector<uint8_t> pixels;
};

// Binary PGM (P5) with maxval 255. The reader accepts comments and arbitrary
// whitespace in the header; the writer emits a canonical minimal header, so a
// write -> read round trip is lossless byte for byte.
ImageU8 read_pgm(const std::string& path);
void write_pgm(const std::string& path, const ImageU8& img);

// Minimal PNG reader for 8-bit grayscale, non-interlaced images (zlib
// inflate + scanline filters 0-4). Anything else is rejected by name.
ImageU8 read_png(const std::string& path);

// Reads either format, dispatching on the file's magic bytes.
ImageU8 load_gray8(const std::string& path);

// ---- tensors <-> rasters ----------------------------------------------------

Tensor<float> image_to_unit(const ImageU8& img);   // [1,H,W], pixel / 255
ImageU8 unit_to_image(const Tensor<float>& t);     // round(v * 255), clamped

// Image scaled into [0,1]; mask files must contain only {0, 255} and map to
// {0, 1} (violations are reported with the offending byte values).
Tensor<float> load_image(const std::string& path);
Tensor<float> load_mask(const std::string& path);

// ---- samples ----------------------------------------------------------------

enum class SampleSource { synthetic, file };

struct SegSample {
  std::string id;
  Tensor<float> image;  // [1, H, W] in [0, 1]
  Tensor<float> mask;   // [1, H, W] in {0, 1}
  SampleSource source = SampleSource::synthetic;
};

// ---- synthetic data -----------------------------------------------------------

struct SynthConfig {
  int64_t h = 64, w = 64;
  int min_shapes = 1, max_shapes = 4;
  bool ellipses = true;
  bool rectangles = true;
  double contrast_lo = 0.3, contrast_hi = 0.7;  // foreground lift over background
  double noise_sigma = 0.05;
  uint64_t seed = 0;
};

// Interior rasterizers used by the generator: pixels (x, y) with
// ((x-cx)/rx)^2 + ((y-cy)/ry)^2 <= 1, respectively the inclusive box
// [y0..y1] x [x0..x1], are set to 1 in a row-major h*w grid.
void fill_ellipse(std::vector<uint8_t>& grid, int64_t h, int64_t w, double cy, double cx,
                  double ry, double rx);
void fill_rect(std::vector<uint8_t>& grid, int64_t h, int64_t w, int64_t y0, int64_t x0,
               int64_t y1, int64_t x1);

// Bright shapes on a dark background plus Gaussian noise; the mask is the
// union of shape interiors. Sample i is fully determined by (cfg.seed, i).
std::vector<SegSample> synth_generate(const SynthConfig& cfg, int64_t n);

// ---- resizing -----------------------------------------------------------------

// Image: bilinear (half-pixel centers, both directions); mask: nearest
// neighbor, so it stays binary. With divisor > 0 the target extents are
// checked for divisibility — a violation throws when strict, else warns on
// stderr. An identity target returns the sample unchanged.
SegSample resize_pair(const SegSample& s, int64_t th, int64_t tw, int64_t divisor = 0,
                      bool strict = true);

// ---- splitting and on-disk layout ---------------------------------------------

struct SplitFractions {
  double train = 0.8, val = 0.1, test = 0.1;
};

struct Dataset {
  std::vector<SegSample> train, val, test;
};

// Deterministic shuffle by seed, then a sequential partition with
// round-to-nearest bucket sizes (10 samples at 0.8/0.1/0.1 -> 8/1/1).
Dataset split(const std::vector<SegSample>& samples, const SplitFractions& f, uint64_t seed);

// Layout: <root>/images/<id>.pgm, <root>/masks/<id>.pgm, <root>/manifest.csv
// with "id,split" rows in train/val/test order.
void save_dataset(const std::string& root, const Dataset& ds);
Dataset load_dataset(const std::string& root);

}  // namespace tau
