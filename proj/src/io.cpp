#include "tau/io.hpp"

#include <zlib.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include "tau/rng.hpp"

namespace tau {
namespace {

// Next whitespace-delimited header token; '#' comments run to end of line.
// Consumes exactly one whitespace byte after the token, which for the final
// header field is the separator in front of the raw pixel block.
std::string pgm_token(std::istream& in) {
  std::string tok;
  int c;
  while ((c = in.get()) != EOF) {
    if (c == '#') {
      while ((c = in.get()) != EOF && c != '\n') {
      }
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(static_cast<char>(c));
  }
  return tok;
}

int64_t pgm_int(std::istream& in, const std::string& path, const char* what) {
  const std::string tok = pgm_token(in);
  try {
    size_t pos = 0;
    const int64_t v = std::stoll(tok, &pos);
    if (pos == tok.size() && v > 0) return v;
  } catch (const std::exception&) {
  }
  throw std::runtime_error("read_pgm: bad " + std::string(what) + " '" + tok + "' in " + path);
}

constexpr uint8_t kPngSignature[8] = {137, 'P', 'N', 'G', '\r', '\n', 26, '\n'};

uint32_t be32(const uint8_t* p) {
  return (static_cast<uint32_t>(p[0]) << 24) | (static_cast<uint32_t>(p[1]) << 16) |
         (static_cast<uint32_t>(p[2]) << 8) | static_cast<uint32_t>(p[3]);
}

int paeth(int left, int up, int upleft) {
  const int p = left + up - upleft;
  const int pa = std::abs(p - left), pb = std::abs(p - up), pc = std::abs(p - upleft);
  if (pa <= pb && pa <= pc) return left;
  if (pb <= pc) return up;
  return upleft;
}

std::vector<uint8_t> read_all(const std::string& path, const char* who) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(std::string(who) + ": cannot open " + path);
  return std::vector<uint8_t>((std::istreambuf_iterator<char>(in)),
                              std::istreambuf_iterator<char>());
}

}  // namespace

ImageU8 read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_pgm: cannot open " + path);
  if (pgm_token(in) != "P5")
    throw std::runtime_error("read_pgm: " + path + " is not a binary PGM (P5) file");
  ImageU8 img;
  img.w = pgm_int(in, path, "width");
  img.h = pgm_int(in, path, "height");
  const int64_t maxval = pgm_int(in, path, "maxval");
  if (maxval != 255)
    throw std::runtime_error("read_pgm: only maxval 255 is supported, got " +
                             std::to_string(maxval) + " in " + path);
  img.pixels.resize(static_cast<size_t>(img.h * img.w));
  in.read(reinterpret_cast<char*>(img.pixels.data()),
          static_cast<std::streamsize>(img.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.pixels.size()))
    throw std::runtime_error("read_pgm: truncated pixel data in " + path);
  return img;
}

void write_pgm(const std::string& path, const ImageU8& img) {
  if (img.h <= 0 || img.w <= 0 ||
      static_cast<int64_t>(img.pixels.size()) != img.h * img.w)
    throw std::invalid_argument("write_pgm: pixel buffer does not match extents for " + path);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("write_pgm: cannot open " + path);
  out << "P5\n" << img.w << " " << img.h << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()),
            static_cast<std::streamsize>(img.pixels.size()));
  if (!out) throw std::runtime_error("write_pgm: write failed for " + path);
}

ImageU8 read_png(const std::string& path) {
  const std::vector<uint8_t> buf = read_all(path, "read_png");
  if (buf.size() < 8 || !std::equal(kPngSignature, kPngSignature + 8, buf.begin()))
    throw std::runtime_error("read_png: " + path + " is not a PNG file");

  ImageU8 img;
  std::vector<uint8_t> idat;
  bool have_ihdr = false;
  size_t off = 8;
  while (off + 8 <= buf.size()) {
    const size_t len = be32(&buf[off]);
    const std::string type(reinterpret_cast<const char*>(&buf[off + 4]), 4);
    if (off + 12 + len > buf.size())
      throw std::runtime_error("read_png: truncated " + type + " chunk in " + path);
    const uint8_t* data = &buf[off + 8];
    off += 12 + len;  // length + type + data + crc (crc is not checked)

    if (type == "IHDR") {
      if (len != 13) throw std::runtime_error("read_png: malformed IHDR in " + path);
      img.w = be32(data);
      img.h = be32(data + 4);
      const int bit_depth = data[8], color_type = data[9];
      const int compression = data[10], filter_method = data[11], interlace = data[12];
      if (bit_depth != 8 || color_type != 0)
        throw std::runtime_error("read_png: only 8-bit grayscale is supported, " + path +
                                 " has bit depth " + std::to_string(bit_depth) +
                                 " and color type " + std::to_string(color_type));
      if (compression != 0 || filter_method != 0)
        throw std::runtime_error("read_png: unsupported compression/filter method in " + path);
      if (interlace != 0)
        throw std::runtime_error("read_png: interlaced PNG is not supported: " + path);
      if (img.w <= 0 || img.h <= 0)
        throw std::runtime_error("read_png: bad extents in " + path);
      have_ihdr = true;
    } else if (type == "IDAT") {
      idat.insert(idat.end(), data, data + len);
    } else if (type == "IEND") {
      break;
    }  // other chunks are ancillary here and skipped
  }
  if (!have_ihdr) throw std::runtime_error("read_png: missing IHDR in " + path);
  if (idat.empty()) throw std::runtime_error("read_png: missing IDAT in " + path);

  // One filter byte per scanline, then w grayscale bytes.
  const size_t stride = static_cast<size_t>(img.w) + 1;
  std::vector<uint8_t> raw(stride * static_cast<size_t>(img.h));
  uLongf raw_len = static_cast<uLongf>(raw.size());
  if (uncompress(raw.data(), &raw_len, idat.data(), static_cast<uLong>(idat.size())) != Z_OK ||
      raw_len != raw.size())
    throw std::runtime_error("read_png: inflate failed for " + path);

  img.pixels.resize(static_cast<size_t>(img.h * img.w));
  for (int64_t y = 0; y < img.h; ++y) {
    const uint8_t filter = raw[static_cast<size_t>(y) * stride];
    const uint8_t* src = &raw[static_cast<size_t>(y) * stride + 1];
    uint8_t* dst = &img.pixels[static_cast<size_t>(y * img.w)];
    const uint8_t* above = y > 0 ? dst - img.w : nullptr;
    for (int64_t x = 0; x < img.w; ++x) {
      const int left = x > 0 ? dst[x - 1] : 0;
      const int up = above ? above[x] : 0;
      const int upleft = (above && x > 0) ? above[x - 1] : 0;
      int v = src[x];
      switch (filter) {
        case 0: break;
        case 1: v += left; break;
        case 2: v += up; break;
        case 3: v += (left + up) / 2; break;
        case 4: v += paeth(left, up, upleft); break;
        default:
          throw std::runtime_error("read_png: unknown scanline filter " +
                                   std::to_string(filter) + " in " + path);
      }
      dst[x] = static_cast<uint8_t>(v & 0xff);
    }
  }
  return img;
}

ImageU8 load_gray8(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_gray8: cannot open " + path);
  uint8_t magic[8] = {0};
  in.read(reinterpret_cast<char*>(magic), 8);
  in.close();
  if (std::equal(kPngSignature, kPngSignature + 8, magic)) return read_png(path);
  if (magic[0] == 'P' && magic[1] == '5') return read_pgm(path);
  throw std::runtime_error("load_gray8: " + path + " is neither a P5 PGM nor a PNG file");
}

Tensor<float> image_to_unit(const ImageU8& img) {
  if (img.h <= 0 || img.w <= 0 ||
      static_cast<int64_t>(img.pixels.size()) != img.h * img.w)
    throw std::invalid_argument("image_to_unit: pixel buffer does not match extents");
  std::vector<float> v(img.pixels.size());
  for (size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(img.pixels[i]) / 255.0f;
  return Tensor<float>::from_data({1, img.h, img.w}, v);
}

ImageU8 unit_to_image(const Tensor<float>& t) {
  if (t.rank() != 3 || t.dim(0) != 1)
    throw std::invalid_argument("unit_to_image: expected a [1,H,W] tensor");
  ImageU8 img;
  img.h = t.dim(1);
  img.w = t.dim(2);
  img.pixels.resize(static_cast<size_t>(img.h * img.w));
  const auto& v = t.data();
  for (size_t i = 0; i < img.pixels.size(); ++i) {
    const long p = std::lround(static_cast<double>(v[i]) * 255.0);
    img.pixels[i] = static_cast<uint8_t>(std::clamp(p, 0L, 255L));
  }
  return img;
}

Tensor<float> load_image(const std::string& path) { return image_to_unit(load_gray8(path)); }

Tensor<float> load_mask(const std::string& path) {
  const ImageU8 img = load_gray8(path);
  std::set<int> offenders;
  for (uint8_t p : img.pixels)
    if (p != 0 && p != 255) offenders.insert(p);
  if (!offenders.empty()) {
    std::ostringstream msg;
    msg << "load_mask: " << path << " is not a binary mask; found pixel values {";
    bool first = true;
    for (int v : offenders) {
      if (!first) msg << ", ";
      msg << v;
      first = false;
    }
    msg << "} outside {0, 255}";
    throw std::runtime_error(msg.str());
  }
  std::vector<float> v(img.pixels.size());
  for (size_t i = 0; i < v.size(); ++i) v[i] = img.pixels[i] == 255 ? 1.0f : 0.0f;
  return Tensor<float>::from_data({1, img.h, img.w}, v);
}

// ---- synthetic data -----------------------------------------------------------

void fill_ellipse(std::vector<uint8_t>& grid, int64_t h, int64_t w, double cy, double cx,
                  double ry, double rx) {
  if (h <= 0 || w <= 0 || static_cast<int64_t>(grid.size()) != h * w)
    throw std::invalid_argument("fill_ellipse: grid does not match extents");
  if (!(ry > 0.0) || !(rx > 0.0))
    throw std::invalid_argument("fill_ellipse: radii must be positive");
  const int64_t y0 = std::max<int64_t>(0, static_cast<int64_t>(std::ceil(cy - ry)));
  const int64_t y1 = std::min<int64_t>(h - 1, static_cast<int64_t>(std::floor(cy + ry)));
  const int64_t x0 = std::max<int64_t>(0, static_cast<int64_t>(std::ceil(cx - rx)));
  const int64_t x1 = std::min<int64_t>(w - 1, static_cast<int64_t>(std::floor(cx + rx)));
  for (int64_t y = y0; y <= y1; ++y) {
    const double dy = (static_cast<double>(y) - cy) / ry;
    for (int64_t x = x0; x <= x1; ++x) {
      const double dx = (static_cast<double>(x) - cx) / rx;
      if (dy * dy + dx * dx <= 1.0) grid[y * w + x] = 1;
    }
  }
}

void fill_rect(std::vector<uint8_t>& grid, int64_t h, int64_t w, int64_t y0, int64_t x0,
               int64_t y1, int64_t x1) {
  if (h <= 0 || w <= 0 || static_cast<int64_t>(grid.size()) != h * w)
    throw std::invalid_argument("fill_rect: grid does not match extents");
  if (y0 > y1 || x0 > x1) throw std::invalid_argument("fill_rect: empty box");
  y0 = std::max<int64_t>(0, y0);
  x0 = std::max<int64_t>(0, x0);
  y1 = std::min<int64_t>(h - 1, y1);
  x1 = std::min<int64_t>(w - 1, x1);
  for (int64_t y = y0; y <= y1; ++y)
    for (int64_t x = x0; x <= x1; ++x) grid[y * w + x] = 1;
}

std::vector<SegSample> synth_generate(const SynthConfig& cfg, int64_t n) {
  if (n < 1) throw std::invalid_argument("synth_generate: n must be >= 1");
  if (cfg.h < 8 || cfg.w < 8)
    throw std::invalid_argument("synth_generate: canvas must be at least 8x8");
  if (cfg.min_shapes < 1 || cfg.max_shapes < cfg.min_shapes)
    throw std::invalid_argument("synth_generate: need 1 <= min_shapes <= max_shapes");
  if (!cfg.ellipses && !cfg.rectangles)
    throw std::invalid_argument("synth_generate: at least one shape kind must be enabled");
  if (!(cfg.contrast_lo >= 0.0) || cfg.contrast_hi < cfg.contrast_lo)
    throw std::invalid_argument("synth_generate: need 0 <= contrast_lo <= contrast_hi");
  if (cfg.noise_sigma < 0.0)
    throw std::invalid_argument("synth_generate: noise_sigma must be nonnegative");

  const int64_t hw = cfg.h * cfg.w;
  std::vector<SegSample> out;
  out.reserve(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    // Each sample gets its own stream, so sample i is independent of n.
    Rng rng(Rng::mix(cfg.seed, static_cast<uint64_t>(i)));
    const double bg = rng.uniform(0.10, 0.25);
    std::vector<float> image(static_cast<size_t>(hw), static_cast<float>(bg));
    std::vector<uint8_t> mask(static_cast<size_t>(hw), 0);

    const int shapes =
        cfg.min_shapes +
        static_cast<int>(rng.below(static_cast<uint64_t>(cfg.max_shapes - cfg.min_shapes + 1)));
    for (int s = 0; s < shapes; ++s) {
      const bool ellipse = cfg.ellipses && (!cfg.rectangles || rng.uniform() < 0.5);
      const double lift = rng.uniform(cfg.contrast_lo, cfg.contrast_hi);
      std::vector<uint8_t> shape(static_cast<size_t>(hw), 0);
      bool placed = false;
      for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
        if (ellipse) {
          const double ry = rng.uniform(2.0, static_cast<double>(cfg.h) / 4.0);
          const double rx = rng.uniform(2.0, static_cast<double>(cfg.w) / 4.0);
          const double cy = rng.uniform(ry, static_cast<double>(cfg.h - 1) - ry);
          const double cx = rng.uniform(rx, static_cast<double>(cfg.w - 1) - rx);
          if (cy < ry || cx < rx) continue;  // canvas too small for the drawn radii
          fill_ellipse(shape, cfg.h, cfg.w, cy, cx, ry, rx);
        } else {
          const int64_t hy = 1 + static_cast<int64_t>(rng.below(
                                     static_cast<uint64_t>(std::max<int64_t>(1, cfg.h / 8))));
          const int64_t hx = 1 + static_cast<int64_t>(rng.below(
                                     static_cast<uint64_t>(std::max<int64_t>(1, cfg.w / 8))));
          if (2 * hy >= cfg.h || 2 * hx >= cfg.w) continue;
          const int64_t cy =
              hy + static_cast<int64_t>(rng.below(static_cast<uint64_t>(cfg.h - 2 * hy)));
          const int64_t cx =
              hx + static_cast<int64_t>(rng.below(static_cast<uint64_t>(cfg.w - 2 * hx)));
          fill_rect(shape, cfg.h, cfg.w, cy - hy, cx - hx, cy + hy, cx + hx);
        }
        placed = true;
      }
      if (!placed)
        throw std::runtime_error("synth_generate: could not place a shape on a " +
                                 std::to_string(cfg.h) + "x" + std::to_string(cfg.w) +
                                 " canvas after 100 attempts");
      const float fg = static_cast<float>(std::min(1.0, bg + lift));
      for (int64_t p = 0; p < hw; ++p) {
        if (shape[static_cast<size_t>(p)]) {
          mask[static_cast<size_t>(p)] = 1;
          image[static_cast<size_t>(p)] = fg;
        }
      }
    }

    if (cfg.noise_sigma > 0.0)
      for (int64_t p = 0; p < hw; ++p)
        image[static_cast<size_t>(p)] =
            static_cast<float>(image[static_cast<size_t>(p)] + rng.normal(0.0, cfg.noise_sigma));
    for (float& v : image) v = std::clamp(v, 0.0f, 1.0f);

    std::vector<float> mval(static_cast<size_t>(hw));
    for (int64_t p = 0; p < hw; ++p) mval[static_cast<size_t>(p)] = mask[static_cast<size_t>(p)];

    char id[32];
    std::snprintf(id, sizeof(id), "synth_%04lld", static_cast<long long>(i));
    SegSample smp;
    smp.id = id;
    smp.image = Tensor<float>::from_data({1, cfg.h, cfg.w}, image);
    smp.mask = Tensor<float>::from_data({1, cfg.h, cfg.w}, mval);
    smp.source = SampleSource::synthetic;
    out.push_back(std::move(smp));
  }
  return out;
}

// ---- resizing -----------------------------------------------------------------

namespace {

struct Lin {
  int64_t lo = 0, hi = 0;
  double w = 0.0;
};

// Half-pixel-center sampling positions, clamped to the source extent.
std::vector<Lin> lin_table(int64_t in, int64_t out) {
  std::vector<Lin> t(static_cast<size_t>(out));
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (int64_t d = 0; d < out; ++d) {
    const double src = (static_cast<double>(d) + 0.5) * scale - 0.5;
    const double clamped = std::clamp(src, 0.0, static_cast<double>(in - 1));
    Lin& l = t[static_cast<size_t>(d)];
    l.lo = static_cast<int64_t>(std::floor(clamped));
    l.hi = std::min(l.lo + 1, in - 1);
    l.w = clamped - static_cast<double>(l.lo);
  }
  return t;
}

std::vector<float> resize_bilinear(const std::vector<float>& src, int64_t h, int64_t w,
                                   int64_t th, int64_t tw) {
  const std::vector<Lin> ys = lin_table(h, th);
  const std::vector<Lin> xs = lin_table(w, tw);
  std::vector<float> out(static_cast<size_t>(th * tw));
  for (int64_t y = 0; y < th; ++y) {
    const Lin& ly = ys[static_cast<size_t>(y)];
    for (int64_t x = 0; x < tw; ++x) {
      const Lin& lx = xs[static_cast<size_t>(x)];
      const double top = (1.0 - lx.w) * src[static_cast<size_t>(ly.lo * w + lx.lo)] +
                         lx.w * src[static_cast<size_t>(ly.lo * w + lx.hi)];
      const double bot = (1.0 - lx.w) * src[static_cast<size_t>(ly.hi * w + lx.lo)] +
                         lx.w * src[static_cast<size_t>(ly.hi * w + lx.hi)];
      out[static_cast<size_t>(y * tw + x)] = static_cast<float>((1.0 - ly.w) * top + ly.w * bot);
    }
  }
  return out;
}

std::vector<float> resize_nearest(const std::vector<float>& src, int64_t h, int64_t w,
                                  int64_t th, int64_t tw) {
  std::vector<float> out(static_cast<size_t>(th * tw));
  const double sy = static_cast<double>(h) / static_cast<double>(th);
  const double sx = static_cast<double>(w) / static_cast<double>(tw);
  for (int64_t y = 0; y < th; ++y) {
    const int64_t yin = std::clamp<int64_t>(
        static_cast<int64_t>(std::floor((static_cast<double>(y) + 0.5) * sy)), 0, h - 1);
    for (int64_t x = 0; x < tw; ++x) {
      const int64_t xin = std::clamp<int64_t>(
          static_cast<int64_t>(std::floor((static_cast<double>(x) + 0.5) * sx)), 0, w - 1);
      out[static_cast<size_t>(y * tw + x)] = src[static_cast<size_t>(yin * w + xin)];
    }
  }
  return out;
}

}  // namespace

SegSample resize_pair(const SegSample& s, int64_t th, int64_t tw, int64_t divisor, bool strict) {
  if (!s.image.defined() || !s.mask.defined())
    throw std::invalid_argument("resize_pair: sample '" + s.id + "' has undefined tensors");
  if (s.image.rank() != 3 || s.image.dim(0) != 1 || s.mask.shape() != s.image.shape())
    throw std::invalid_argument("resize_pair: sample '" + s.id +
                                "' must hold matching [1,H,W] image and mask");
  if (th <= 0 || tw <= 0) throw std::invalid_argument("resize_pair: target extents must be positive");
  if (divisor > 0 && (th % divisor != 0 || tw % divisor != 0)) {
    const std::string msg = "resize_pair: target " + std::to_string(th) + "x" +
                            std::to_string(tw) + " is not divisible by " +
                            std::to_string(divisor);
    if (strict) throw std::invalid_argument(msg);
    std::fprintf(stderr, "warning: %s\n", msg.c_str());
  }
  const int64_t h = s.image.dim(1), w = s.image.dim(2);
  if (th == h && tw == w) return s;

  SegSample out;
  out.id = s.id;
  out.source = s.source;
  out.image = Tensor<float>::from_data({1, th, tw}, resize_bilinear(s.image.data(), h, w, th, tw));
  out.mask = Tensor<float>::from_data({1, th, tw}, resize_nearest(s.mask.data(), h, w, th, tw));
  return out;
}

// ---- splitting and on-disk layout ---------------------------------------------

Dataset split(const std::vector<SegSample>& samples, const SplitFractions& f, uint64_t seed) {
  if (f.train < 0.0 || f.val < 0.0 || f.test < 0.0)
    throw std::invalid_argument("split: fractions must be nonnegative");
  const double sum = f.train + f.val + f.test;
  if (std::abs(sum - 1.0) > 1e-9)
    throw std::invalid_argument("split: fractions sum to " + std::to_string(sum) +
                                ", expected 1");
  const int64_t n = static_cast<int64_t>(samples.size());
  std::vector<int64_t> idx(static_cast<size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  rng.shuffle(idx);

  int64_t n_train = std::llround(static_cast<double>(n) * f.train);
  n_train = std::min(n_train, n);
  int64_t n_val = std::llround(static_cast<double>(n) * f.val);
  n_val = std::min(n_val, n - n_train);

  Dataset ds;
  for (int64_t i = 0; i < n; ++i) {
    const SegSample& s = samples[static_cast<size_t>(idx[static_cast<size_t>(i)])];
    if (i < n_train)
      ds.train.push_back(s);
    else if (i < n_train + n_val)
      ds.val.push_back(s);
    else
      ds.test.push_back(s);
  }
  return ds;
}

namespace {

ImageU8 mask_to_image(const SegSample& s) {
  ImageU8 img;
  img.h = s.mask.dim(1);
  img.w = s.mask.dim(2);
  img.pixels.resize(static_cast<size_t>(img.h * img.w));
  const auto& v = s.mask.data();
  for (size_t i = 0; i < img.pixels.size(); ++i) {
    if (v[i] != 0.0f && v[i] != 1.0f)
      throw std::invalid_argument("save_dataset: mask of '" + s.id + "' is not binary");
    img.pixels[i] = v[i] == 1.0f ? 255 : 0;
  }
  return img;
}

void save_split(const std::string& root, const char* name,
                const std::vector<SegSample>& samples, std::ostream& manifest) {
  for (const SegSample& s : samples) {
    if (s.id.empty() || s.id.find_first_of(",/\\\n") != std::string::npos)
      throw std::invalid_argument("save_dataset: sample id '" + s.id +
                                  "' is empty or not filename-safe");
    write_pgm(root + "/images/" + s.id + ".pgm", unit_to_image(s.image));
    write_pgm(root + "/masks/" + s.id + ".pgm", mask_to_image(s));
    manifest << s.id << ',' << name << '\n';
  }
}

}  // namespace

void save_dataset(const std::string& root, const Dataset& ds) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(root + "/images", ec);
  if (!ec) fs::create_directories(root + "/masks", ec);
  if (ec)
    throw std::runtime_error("save_dataset: cannot create directories under " + root + ": " +
                             ec.message());
  std::ofstream manifest(root + "/manifest.csv", std::ios::trunc);
  if (!manifest) throw std::runtime_error("save_dataset: cannot open " + root + "/manifest.csv");
  manifest << "id,split\n";
  save_split(root, "train", ds.train, manifest);
  save_split(root, "val", ds.val, manifest);
  save_split(root, "test", ds.test, manifest);
  if (!manifest) throw std::runtime_error("save_dataset: write failed for " + root + "/manifest.csv");
}

Dataset load_dataset(const std::string& root) {
  std::ifstream manifest(root + "/manifest.csv");
  if (!manifest) throw std::runtime_error("load_dataset: cannot open " + root + "/manifest.csv");
  std::string line;
  if (!std::getline(manifest, line) || line != "id,split")
    throw std::runtime_error("load_dataset: bad manifest header in " + root + "/manifest.csv");

  Dataset ds;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    const size_t comma = line.find(',');
    if (comma == std::string::npos || comma == 0)
      throw std::runtime_error("load_dataset: malformed manifest row '" + line + "'");
    SegSample s;
    s.id = line.substr(0, comma);
    const std::string which = line.substr(comma + 1);
    s.image = load_image(root + "/images/" + s.id + ".pgm");
    s.mask = load_mask(root + "/masks/" + s.id + ".pgm");
    s.source = SampleSource::file;
    if (which == "train")
      ds.train.push_back(std::move(s));
    else if (which == "val")
      ds.val.push_back(std::move(s));
    else if (which == "test")
      ds.test.push_back(std::move(s));
    else
      throw std::runtime_error("load_dataset: unknown split '" + which + "' for id '" + s.id +
                               "'");
  }
  return ds;
}

}  // namespace tau
