#pragma once

#include <filesystem>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "taxofuse/dataset.hpp"
#include "taxofuse/image.hpp"
#include "taxofuse/model/train.hpp"
#include "taxofuse/raster.hpp"
#include "taxofuse/synthetic.hpp"
#include "taxofuse/taxonomy.hpp"

namespace taxofuse {

// Resolves observation image references: "synth:" references render from
// a synthetic world, anything else is read as a binary PPM file (relative
// paths are taken from `base`).
class ImageSource {
 public:
  ImageSource() = default;
  explicit ImageSource(std::shared_ptr<const SyntheticWorld> world, std::filesystem::path base = {})
      : world_(std::move(world)), base_(std::move(base)) {}

  Tensor load(const std::string& ref) const {
    if (ref.rfind("synth:", 0) == 0) {
      if (!world_) throw DataError("synthetic image reference '" + ref + "' but no synthetic world is loaded");
      return world_->render(ref);
    }
    std::filesystem::path p(ref);
    if (p.is_relative() && !base_.empty()) p = base_ / p;
    return read_ppm(p.string());
  }

 private:
  std::shared_ptr<const SyntheticWorld> world_;
  std::filesystem::path base_;
};

struct PipelineConfig {
  PreprocessConfig image;
  bool augment = true;
  bool satellite = false;
  std::size_t patch_extent = 256;
  std::size_t satellite_size = 16;
};

inline constexpr std::size_t kUnknownLabel = std::numeric_limits<std::size_t>::max();

// Satellite input for one observation: the patch block-averaged to the
// branch input size.
inline Tensor observation_patch(const RasterProvider& raster, const Observation& o, std::size_t extent,
                                std::size_t satellite_size) {
  return block_average(extract_patch(raster, o.context.longitude, o.context.latitude, extent), satellite_size);
}

// Normalization bounds, image statistics and patch statistics from the
// training observations only.
inline Preprocessing fit_preprocessing(std::span<const Observation> train, const ImageSource& images,
                                       const RasterProvider* raster, const PipelineConfig& cfg) {
  if (train.empty()) throw DataError("cannot fit preprocessing on an empty training split");
  Preprocessing pre;
  pre.image = cfg.image;
  pre.augment = cfg.augment;
  pre.patch_extent = cfg.patch_extent;
  std::vector<RawContext> ctx;
  std::vector<Tensor> imgs;
  for (const auto& o : train) {
    ctx.push_back(o.context);
    Tensor raw = images.load(o.image_ref);
    imgs.push_back(center_crop(resize_bilinear(raw, cfg.image.resize, cfg.image.resize), cfg.image.crop));
  }
  pre.bounds = fit_bounds(ctx);
  pre.image_stats = fit_channel_stats(imgs);
  if (cfg.satellite) {
    if (!raster) throw ConfigError("satellite branch enabled but no raster provider given");
    std::vector<Tensor> patches;
    for (const auto& o : train) patches.push_back(observation_patch(*raster, o, cfg.patch_extent, cfg.satellite_size));
    pre.patch_stats = fit_channel_stats(patches);
  }
  return pre;
}

// Loads and encodes observations. Labels absent from the taxonomy are an
// error unless allow_unknown, in which case they become kUnknownLabel.
inline SampleSet build_samples(std::span<const Observation> obs, const TaxonomyTree& taxonomy,
                               const ImageSource& images, const RasterProvider* raster, const Preprocessing& pre,
                               const PipelineConfig& cfg, bool allow_unknown = false) {
  SampleSet s;
  for (const auto& o : obs) {
    s.images.push_back(images.load(o.image_ref));
    s.contexts.push_back(normalize_context(o.context, pre.bounds));
    if (cfg.satellite) {
      if (!raster) throw ConfigError("satellite branch enabled but no raster provider given");
      s.patches.push_back(observation_patch(*raster, o, cfg.patch_extent, cfg.satellite_size));
    }
    auto id = taxonomy.find(Level::species, o.species);
    if (!id && !allow_unknown) throw DataError("observation " + o.id + " has species '" + o.species + "' not in the model taxonomy");
    s.labels.push_back(id ? *id : kUnknownLabel);
  }
  return s;
}

}  // namespace taxofuse
