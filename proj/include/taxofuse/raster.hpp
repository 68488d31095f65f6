#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "taxofuse/error.hpp"
#include "taxofuse/ndiff/tensor.hpp"

namespace taxofuse {

using nd::Tensor;

// North-up affine georeference in GDAL coefficient order:
// x = c[0] + col * c[1] + row * c[2];  y = c[3] + col * c[4] + row * c[5].
struct GeoTransform {
  std::array<double, 6> c{0.0, 1.0, 0.0, 0.0, 0.0, -1.0};

  double origin_x() const { return c[0]; }
  double pixel_width() const { return c[1]; }
  double origin_y() const { return c[3]; }
  double pixel_height() const { return c[5]; }
};

// Multi-band float raster, band-sequential, each band row-major.
struct Raster {
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  std::uint32_t bands = 0;
  GeoTransform geo;
  std::vector<float> data;

  float at(std::size_t band, std::size_t row, std::size_t col) const {
    return data[(band * height + row) * width + col];
  }
  float& at(std::size_t band, std::size_t row, std::size_t col) {
    return data[(band * height + row) * width + col];
  }
};

// Binary layout (little-endian):
//   8 bytes  magic "TXRASTER"
//   u32      format version (1)
//   u32      width, u32 height
//   f64 x 6  geotransform
//   u32      band count
//   f32 x (bands * height * width) body
inline constexpr char kRasterMagic[8] = {'T', 'X', 'R', 'A', 'S', 'T', 'E', 'R'};
inline constexpr std::uint32_t kRasterVersion = 1;

inline void write_raster(const std::string& path, const Raster& r) {
  if (r.data.size() != static_cast<std::size_t>(r.width) * r.height * r.bands)
    throw DataError("raster body size does not match its header");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write raster: " + path);
  auto put = [&out](const auto& v) { out.write(reinterpret_cast<const char*>(&v), sizeof(v)); };
  out.write(kRasterMagic, sizeof(kRasterMagic));
  put(kRasterVersion);
  put(r.width);
  put(r.height);
  for (double v : r.geo.c) put(v);
  put(r.bands);
  out.write(reinterpret_cast<const char*>(r.data.data()),
            static_cast<std::streamsize>(r.data.size() * sizeof(float)));
  if (!out) throw ConfigError("failed writing raster: " + path);
}

inline Raster read_raster(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open raster: " + path);
  auto get = [&in, &path](auto& v) {
    if (!in.read(reinterpret_cast<char*>(&v), sizeof(v))) throw DataError("truncated raster header: " + path);
  };
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kRasterMagic, 8) != 0)
    throw DataError("not a raster file (bad magic): " + path);
  std::uint32_t version = 0;
  get(version);
  if (version != kRasterVersion) throw DataError("unsupported raster version " + std::to_string(version));
  Raster r;
  get(r.width);
  get(r.height);
  for (double& v : r.geo.c) get(v);
  get(r.bands);
  if (r.geo.c[2] != 0.0 || r.geo.c[4] != 0.0) throw DataError("rotated rasters are not supported: " + path);
  r.data.resize(static_cast<std::size_t>(r.width) * r.height * r.bands);
  if (!in.read(reinterpret_cast<char*>(r.data.data()), static_cast<std::streamsize>(r.data.size() * sizeof(float))))
    throw DataError("truncated raster body: " + path);
  return r;
}

// Source of satellite context around a location.
class RasterProvider {
 public:
  virtual ~RasterProvider() = default;
  // [bands, extent, extent] window centred on (lon, lat).
  virtual Tensor query(double longitude, double latitude, std::size_t extent) const = 0;
  virtual std::size_t bands() const = 0;
};

class InMemoryRaster final : public RasterProvider {
 public:
  explicit InMemoryRaster(Raster r) : r_(std::move(r)) {
    if (r_.geo.pixel_width() == 0.0 || r_.geo.pixel_height() == 0.0) throw DataError("raster has zero pixel size");
  }

  static std::shared_ptr<InMemoryRaster> open(const std::string& path) {
    return std::make_shared<InMemoryRaster>(read_raster(path));
  }

  const Raster& raster() const { return r_; }
  std::size_t bands() const override { return r_.bands; }

  // Pixel containing the location (may lie outside the grid).
  std::pair<long, long> pixel_of(double longitude, double latitude) const {
    auto col = static_cast<long>(std::floor((longitude - r_.geo.origin_x()) / r_.geo.pixel_width()));
    auto row = static_cast<long>(std::floor((latitude - r_.geo.origin_y()) / r_.geo.pixel_height()));
    return {row, col};
  }

  // The window covers rows [row - E/2, row - E/2 + E) and likewise for
  // columns. No padding: a window that leaves the grid is an error.
  Tensor query(double longitude, double latitude, std::size_t extent) const override {
    auto [row, col] = pixel_of(longitude, latitude);
    const long h = r_.height, w = r_.width, e = static_cast<long>(extent);
    if (row < 0 || row >= h || col < 0 || col >= w)
      throw DataError("location (" + std::to_string(longitude) + ", " + std::to_string(latitude) +
                      ") is outside raster coverage");
    const long r0 = row - e / 2, c0 = col - e / 2;
    if (r0 < 0 || c0 < 0 || r0 + e > h || c0 + e > w)
      throw DataError("a " + std::to_string(extent) + " px window at (" + std::to_string(longitude) + ", " +
                      std::to_string(latitude) + ") is only partially covered by the raster");
    Tensor out({r_.bands, extent, extent});
    for (std::size_t b = 0; b < r_.bands; ++b)
      for (long y = 0; y < e; ++y)
        for (long x = 0; x < e; ++x)
          out[(b * extent + y) * extent + x] = r_.at(b, r0 + y, c0 + x);
    return out;
  }

 private:
  Raster r_;
};

inline constexpr std::array<std::size_t, 3> kPatchExtents = {128, 256, 512};
inline constexpr std::size_t kPatchBands = 4;

inline void check_patch_extent(std::size_t extent) {
  for (auto e : kPatchExtents)
    if (e == extent) return;
  throw ConfigError("patch extent must be 128, 256 or 512 px, got " + std::to_string(extent));
}

// Four-band satellite patch centred on the location.
inline Tensor extract_patch(const RasterProvider& provider, double longitude, double latitude,
                            std::size_t extent) {
  check_patch_extent(extent);
  if (provider.bands() != kPatchBands)
    throw DataError("satellite raster must have 4 bands, has " + std::to_string(provider.bands()));
  return provider.query(longitude, latitude, extent);
}

// Ground footprint of a square patch, in meters.
inline double patch_footprint_m(std::size_t extent, double gsd_m = 10.0) { return extent * gsd_m; }

// Block-mean downsampling of [C, E, E] to [C, S, S]; E must be a multiple of S.
inline Tensor block_average(const Tensor& patch, std::size_t size) {
  const std::size_t c = patch.dim(0), e = patch.dim(1);
  if (patch.rank() != 3 || patch.dim(2) != e || size == 0 || e % size != 0)
    throw ShapeError("cannot block-average " + nd::shape_string(patch.shape()) + " to " + std::to_string(size));
  const std::size_t k = e / size;
  if (k == 1) return patch;
  Tensor out({c, size, size});
  const double inv = 1.0 / static_cast<double>(k * k);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < e; ++y)
      for (std::size_t x = 0; x < e; ++x) out[(ch * size + y / k) * size + x / k] += inv * patch[(ch * e + y) * e + x];
  return out;
}

}  // namespace taxofuse
