#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "taxofuse/error.hpp"
#include "taxofuse/model/model.hpp"
#include "taxofuse/model/train.hpp"

namespace taxofuse {

// A trained model with everything needed to run it on new observations.
struct ModelBundle {
  Model model;
  Preprocessing pre;
  std::uint64_t taxonomy_fingerprint = 0;
  std::vector<std::string> species;  // model class names, in class order
};

// Checkpoint layout (little-endian):
//   8 bytes  magic "TXFCKPT1"
//   u32      format version
//   u64      taxonomy fingerprint
//   u8 x 3   fusion tag, satellite flag, dropout flag
//   u32 + n  architecture/preprocessing settings as JSON text
//   u32      tensor count, then per tensor:
//              u32 + n name, u32 rank, u64 x rank dims, f64 x size values
inline constexpr char kCheckpointMagic[8] = {'T', 'X', 'F', 'C', 'K', 'P', 'T', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace checkpoint_detail {

inline nlohmann::json settings_json(const ModelBundle& b) {
  const auto& c = b.model.config();
  return {{"num_classes", c.num_classes},
          {"image_channels", c.image_channels},
          {"image_size", c.image_size},
          {"image_widths", c.image_encoder.widths},
          {"image_kernel", c.image_encoder.kernel},
          {"context_hidden", c.context_hidden},
          {"satellite_widths", c.satellite_encoder.widths},
          {"satellite_kernel", c.satellite_encoder.kernel},
          {"satellite_size", c.satellite_size},
          {"early_hidden", c.early_hidden},
          {"dropout_rate", c.dropout_rate},
          {"resize", b.pre.image.resize},
          {"crop", b.pre.image.crop},
          {"patch_extent", b.pre.patch_extent},
          {"species", b.species}};
}

inline std::vector<std::pair<std::string, Tensor>> preprocessing_tensors(const Preprocessing& p) {
  const auto& bd = p.bounds;
  return {{"pre.bounds", Tensor::vector({bd.longitude.min, bd.longitude.max, bd.latitude.min, bd.latitude.max,
                                         bd.altitude.min, bd.altitude.max})},
          {"pre.image_mean", Tensor::vector(p.image_stats.mean)},
          {"pre.image_std", Tensor::vector(p.image_stats.stddev)},
          {"pre.patch_mean", Tensor::vector(p.patch_stats.mean)},
          {"pre.patch_std", Tensor::vector(p.patch_stats.stddev)}};
}

}  // namespace checkpoint_detail

inline void save_checkpoint(const std::string& path, const ModelBundle& b) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write checkpoint: " + path);
  auto put = [&out](const auto& v) { out.write(reinterpret_cast<const char*>(&v), sizeof(v)); };
  auto put_str = [&](const std::string& s) {
    put(static_cast<std::uint32_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
  };
  auto put_tensor = [&](const std::string& name, const Tensor& t) {
    put_str(name);
    put(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put(static_cast<std::uint64_t>(d));
    out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  };
  out.write(kCheckpointMagic, 8);
  put(kCheckpointVersion);
  put(b.taxonomy_fingerprint);
  const auto& f = b.model.fusion();
  put(static_cast<std::uint8_t>(f.tag));
  put(static_cast<std::uint8_t>(f.satellite));
  put(static_cast<std::uint8_t>(f.dropout));
  put_str(checkpoint_detail::settings_json(b).dump());
  auto extra = checkpoint_detail::preprocessing_tensors(b.pre);
  put(static_cast<std::uint32_t>(b.model.parameters().size() + extra.size()));
  for (const auto& p : b.model.parameters()) put_tensor(p.name, p.value);
  for (const auto& [n, t] : extra) put_tensor(n, t);
  if (!out) throw ConfigError("failed writing checkpoint: " + path);
}

inline ModelBundle load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint: " + path);
  auto get = [&](auto& v) {
    if (!in.read(reinterpret_cast<char*>(&v), sizeof(v))) throw DataError("truncated checkpoint: " + path);
  };
  auto get_str = [&]() {
    std::uint32_t n = 0;
    get(n);
    std::string s(n, '\0');
    if (!in.read(s.data(), n)) throw DataError("truncated checkpoint: " + path);
    return s;
  };
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw DataError("not a checkpoint file (bad magic): " + path);
  std::uint32_t version = 0;
  get(version);
  if (version != kCheckpointVersion) throw DataError("unsupported checkpoint version " + std::to_string(version));
  ModelBundle b;
  get(b.taxonomy_fingerprint);
  std::uint8_t tag = 0, sat = 0, drop = 0;
  get(tag);
  get(sat);
  get(drop);
  if (tag > 3) throw DataError("checkpoint has unknown fusion tag " + std::to_string(tag));

  ModelConfig cfg;
  try {
    auto j = nlohmann::json::parse(get_str());
    cfg.num_classes = j.at("num_classes");
    cfg.image_channels = j.at("image_channels");
    cfg.image_size = j.at("image_size");
    cfg.image_encoder.widths = j.at("image_widths").get<std::vector<std::size_t>>();
    cfg.image_encoder.kernel = j.at("image_kernel");
    cfg.context_hidden = j.at("context_hidden").get<std::vector<std::size_t>>();
    cfg.satellite_encoder.widths = j.at("satellite_widths").get<std::vector<std::size_t>>();
    cfg.satellite_encoder.kernel = j.at("satellite_kernel");
    cfg.satellite_size = j.at("satellite_size");
    cfg.early_hidden = j.at("early_hidden");
    cfg.dropout_rate = j.at("dropout_rate");
    b.pre.image.resize = j.at("resize");
    b.pre.image.crop = j.at("crop");
    b.pre.patch_extent = j.at("patch_extent");
    b.species = j.value("species", std::vector<std::string>{});
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed checkpoint settings in " + path + ": " + e.what());
  }
  if (!b.species.empty() && b.species.size() != cfg.num_classes)
    throw DataError("checkpoint lists " + std::to_string(b.species.size()) + " species for " +
                    std::to_string(cfg.num_classes) + " classes");
  cfg.fusion = FusionMode{static_cast<FusionTag>(tag), sat != 0, drop != 0};
  b.model = Model(cfg, 0);

  std::uint32_t count = 0;
  get(count);
  std::map<std::string, Tensor> extra;
  std::size_t loaded = 0;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = get_str();
    std::uint32_t rank = 0;
    get(rank);
    nd::Shape shape(rank);
    for (auto& d : shape) {
      std::uint64_t v = 0;
      get(v);
      d = static_cast<std::size_t>(v);
    }
    Tensor t(shape);
    if (!in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double))))
      throw DataError("truncated checkpoint tensor '" + name + "'");
    if (b.model.has_param(name)) {
      auto& p = b.model.param(name);
      if (p.value.shape() != t.shape())
        throw DataError("checkpoint tensor '" + name + "' has shape " + nd::shape_string(t.shape()) +
                        ", model expects " + nd::shape_string(p.value.shape()));
      p.value = std::move(t);
      ++loaded;
    } else {
      extra.emplace(std::move(name), std::move(t));
    }
  }
  if (loaded != b.model.parameters().size()) throw DataError("checkpoint is missing model parameters: " + path);
  auto need = [&](const char* n) -> const Tensor& {
    auto it = extra.find(n);
    if (it == extra.end()) throw DataError(std::string("checkpoint lacks ") + n);
    return it->second;
  };
  const auto& bd = need("pre.bounds");
  if (bd.size() != 6) throw DataError("checkpoint bounds tensor must have 6 values");
  b.pre.bounds = {{bd[0], bd[1]}, {bd[2], bd[3]}, {bd[4], bd[5]}};
  b.pre.image_stats = {need("pre.image_mean").storage(), need("pre.image_std").storage()};
  b.pre.patch_stats = {need("pre.patch_mean").storage(), need("pre.patch_std").storage()};
  b.pre.augment = false;
  return b;
}

}  // namespace taxofuse
