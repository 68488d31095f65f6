#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "taxofuse/error.hpp"
#include "taxofuse/ndiff/tensor.hpp"

namespace taxofuse {

using nd::Tensor;

enum class PreprocessMode { train, eval };

// Geometry and augmentation strength of the image pipeline.
struct PreprocessConfig {
  std::size_t resize = 256;
  std::size_t crop = 224;
  double max_rotation_deg = 15.0;
  bool horizontal_flip = true;
  double brightness = 0.2;
  double contrast = 0.2;
  double saturation = 0.2;
};

// Per-channel standardization statistics.
struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> stddev;

  static ChannelStats identity(std::size_t channels) {
    return {std::vector<double>(channels, 0.0), std::vector<double>(channels, 1.0)};
  }
};

namespace image_detail {

inline void check_image(const Tensor& img, std::size_t min_channels) {
  if (img.rank() != 3 || img.empty())
    throw ShapeError("image must be a non-empty [C,H,W] tensor, got " + nd::shape_string(img.shape()));
  if (img.dim(0) < min_channels)
    throw ShapeError("image needs at least " + std::to_string(min_channels) + " channels, got " +
                     std::to_string(img.dim(0)));
  if (img.dim(1) < 8 || img.dim(2) < 8)
    throw ShapeError("image " + nd::shape_string(img.shape()) + " is smaller than 8x8");
}

// Bilinear sample with edge clamping at fractional pixel (y, x).
inline double sample(const double* plane, std::size_t h, std::size_t w, double y, double x) {
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  auto y0 = static_cast<std::size_t>(y), x0 = static_cast<std::size_t>(x);
  std::size_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
  double fy = y - static_cast<double>(y0), fx = x - static_cast<double>(x0);
  double top = plane[y0 * w + x0] * (1 - fx) + plane[y0 * w + x1] * fx;
  double bot = plane[y1 * w + x0] * (1 - fx) + plane[y1 * w + x1] * fx;
  return top * (1 - fy) + bot * fy;
}

}  // namespace image_detail

// Bilinear resize of a [C,H,W] image (half-pixel centers).
inline Tensor resize_bilinear(const Tensor& img, std::size_t out_h, std::size_t out_w) {
  const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  if (out_h == h && out_w == w) return img;
  Tensor out({c, out_h, out_w});
  const double sy = static_cast<double>(h) / out_h, sx = static_cast<double>(w) / out_w;
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* plane = img.data() + ch * h * w;
    for (std::size_t y = 0; y < out_h; ++y)
      for (std::size_t x = 0; x < out_w; ++x)
        out[(ch * out_h + y) * out_w + x] =
            image_detail::sample(plane, h, w, (y + 0.5) * sy - 0.5, (x + 0.5) * sx - 0.5);
  }
  return out;
}

// Central size x size window; offset is floor((H - size) / 2).
inline Tensor center_crop(const Tensor& img, std::size_t size) {
  const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  if (size > h || size > w)
    throw ShapeError("crop " + std::to_string(size) + " larger than image " + nd::shape_string(img.shape()));
  const std::size_t oy = (h - size) / 2, ox = (w - size) / 2;
  Tensor out({c, size, size});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x)
        out[(ch * size + y) * size + x] = img[(ch * h + y + oy) * w + x + ox];
  return out;
}

inline Tensor rotate(const Tensor& img, double degrees) {
  const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  const double a = degrees * std::numbers::pi / 180.0, ca = std::cos(a), sa = std::sin(a);
  const double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0;
  Tensor out({c, h, w});
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* plane = img.data() + ch * h * w;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        double dy = y - cy, dx = x - cx;
        out[(ch * h + y) * w + x] =
            image_detail::sample(plane, h, w, cy + ca * dy - sa * dx, cx + sa * dy + ca * dx);
      }
  }
  return out;
}

inline Tensor flip_horizontal(const Tensor& img) {
  const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  Tensor out({c, h, w});
  for (std::size_t p = 0; p < c * h; ++p)
    for (std::size_t x = 0; x < w; ++x) out[p * w + x] = img[p * w + (w - 1 - x)];
  return out;
}

// Brightness, contrast and saturation jitter on the first three channels;
// extra channels get brightness only.
inline void color_jitter(Tensor& img, const PreprocessConfig& cfg, nd::Rng& rng) {
  const std::size_t c = img.dim(0), hw = img.dim(1) * img.dim(2);
  auto factor = [&rng](double s) {
    if (s <= 0) return 1.0;
    return std::uniform_real_distribution<double>(1.0 - s, 1.0 + s)(rng);
  };
  const double b = factor(cfg.brightness), k = factor(cfg.contrast), s = factor(cfg.saturation);
  for (auto& v : img.values()) v *= b;
  const std::size_t rgb = std::min<std::size_t>(3, c);
  double mean = 0.0;
  for (std::size_t i = 0; i < rgb * hw; ++i) mean += img[i];
  mean /= static_cast<double>(rgb * hw);
  for (std::size_t i = 0; i < rgb * hw; ++i) img[i] = mean + k * (img[i] - mean);
  if (rgb == 3) {
    for (std::size_t p = 0; p < hw; ++p) {
      double gray = 0.299 * img[p] + 0.587 * img[hw + p] + 0.114 * img[2 * hw + p];
      for (std::size_t ch = 0; ch < 3; ++ch) img[ch * hw + p] = gray + s * (img[ch * hw + p] - gray);
    }
  }
}

// Per-channel (v - mean) / stddev in place.
inline void standardize(Tensor& img, const ChannelStats& stats) {
  const std::size_t c = img.dim(0), hw = img.dim(1) * img.dim(2);
  if (stats.mean.size() != c || stats.stddev.size() != c)
    throw ShapeError("channel statistics for " + std::to_string(stats.mean.size()) +
                     " channels applied to image " + nd::shape_string(img.shape()));
  for (std::size_t ch = 0; ch < c; ++ch) {
    double sd = stats.stddev[ch] > 0 ? stats.stddev[ch] : 1.0;
    for (std::size_t p = 0; p < hw; ++p) img[ch * hw + p] = (img[ch * hw + p] - stats.mean[ch]) / sd;
  }
}

// Resize -> center crop, plus (train only) rotation, flip and color jitter,
// then per-channel standardization. Eval mode is a pure function of its
// inputs; train mode draws only from the supplied generator.
inline Tensor preprocess_image(const Tensor& pixels, PreprocessMode mode, const ChannelStats& stats,
                               const PreprocessConfig& cfg, nd::Rng* rng = nullptr) {
  image_detail::check_image(pixels, 3);
  Tensor img = center_crop(resize_bilinear(pixels, cfg.resize, cfg.resize), cfg.crop);
  if (mode == PreprocessMode::train) {
    if (!rng) throw ConfigError("train-mode preprocessing needs a random generator");
    if (cfg.max_rotation_deg > 0) {
      double deg = std::uniform_real_distribution<double>(-cfg.max_rotation_deg, cfg.max_rotation_deg)(*rng);
      img = rotate(img, deg);
    }
    if (cfg.horizontal_flip && std::bernoulli_distribution(0.5)(*rng)) img = flip_horizontal(img);
    color_jitter(img, cfg, *rng);
  }
  standardize(img, stats);
  return img;
}

// Mean and (population) standard deviation per channel over images that
// have already been resized and cropped.
inline ChannelStats fit_channel_stats(std::span<const Tensor> images) {
  if (images.empty()) throw DataError("cannot fit channel statistics on zero images");
  const std::size_t c = images[0].dim(0);
  std::vector<double> sum(c, 0.0), sq(c, 0.0);
  double count = 0.0;
  for (const auto& img : images) {
    if (img.rank() != 3 || img.dim(0) != c) throw ShapeError("inconsistent image shapes in channel statistics");
    const std::size_t hw = img.dim(1) * img.dim(2);
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < hw; ++p) {
        double v = img[ch * hw + p];
        sum[ch] += v;
        sq[ch] += v * v;
      }
    count += static_cast<double>(hw);
  }
  ChannelStats st{std::vector<double>(c), std::vector<double>(c)};
  for (std::size_t ch = 0; ch < c; ++ch) {
    st.mean[ch] = sum[ch] / count;
    st.stddev[ch] = std::sqrt(std::max(0.0, sq[ch] / count - st.mean[ch] * st.mean[ch]));
    if (st.stddev[ch] < 1e-12) st.stddev[ch] = 1.0;
  }
  return st;
}

// Binary PPM (P6, maxval 255) reader producing [3,H,W] values in [0, 1].
inline Tensor read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open image: " + path);
  std::string magic;
  in >> magic;
  auto next_int = [&in, &path]() {
    int v = 0;
    while (in >> std::ws && in.peek() == '#') {
      std::string comment;
      std::getline(in, comment);
    }
    if (!(in >> v)) throw DataError("malformed PPM header: " + path);
    return v;
  };
  if (magic != "P6") throw DataError("unsupported image format (need binary PPM P6): " + path);
  int w = next_int(), h = next_int(), maxval = next_int();
  if (w <= 0 || h <= 0 || maxval != 255) throw DataError("unsupported PPM geometry or depth: " + path);
  in.get();
  std::vector<unsigned char> buf(static_cast<std::size_t>(w) * h * 3);
  if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size())))
    throw DataError("truncated PPM body: " + path);
  Tensor out({3, static_cast<std::size_t>(h), static_cast<std::size_t>(w)});
  const std::size_t hw = static_cast<std::size_t>(w) * h;
  for (std::size_t p = 0; p < hw; ++p)
    for (std::size_t ch = 0; ch < 3; ++ch) out[ch * hw + p] = buf[p * 3 + ch] / 255.0;
  return out;
}

}  // namespace taxofuse
