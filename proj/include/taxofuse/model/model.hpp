#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "taxofuse/encoding.hpp"
#include "taxofuse/error.hpp"
#include "taxofuse/ndiff/optim.hpp"
#include "taxofuse/ndiff/tape.hpp"

namespace taxofuse {

using nd::Parameter;
using nd::Tape;
using nd::Tensor;
using nd::Var;

// How image and auxiliary cues are combined. `image` is the image-only
// baseline; the other three are the multimodal training strategies.
enum class FusionTag : std::uint8_t { image = 0, early = 1, separate = 2, late = 3 };

inline std::string_view fusion_name(FusionTag t) {
  switch (t) {
    case FusionTag::image: return "image";
    case FusionTag::early: return "early";
    case FusionTag::separate: return "separate";
    case FusionTag::late: return "late";
  }
  return "?";
}

inline FusionTag parse_fusion(std::string_view s) {
  for (auto t : {FusionTag::image, FusionTag::early, FusionTag::separate, FusionTag::late})
    if (fusion_name(t) == s) return t;
  throw ConfigError("unknown fusion mode '" + std::string(s) + "' (expected image, early, separate or late)");
}

struct FusionMode {
  FusionTag tag = FusionTag::late;
  bool satellite = false;
  bool dropout = false;

  bool uses_context() const { return tag != FusionTag::image; }
  // Early and late fusion need the metadata at inference time.
  bool requires_context() const { return tag == FusionTag::early || tag == FusionTag::late; }
};

// Conv-relu-maxpool blocks followed by global average pooling.
struct EncoderConfig {
  std::vector<std::size_t> widths{16, 32, 64};
  std::size_t kernel = 3;
};

struct ModelConfig {
  std::size_t num_classes = 0;
  std::size_t image_channels = 3;
  std::size_t image_size = 224;  // input side after preprocessing
  EncoderConfig image_encoder;
  std::vector<std::size_t> context_hidden{64, 64};
  EncoderConfig satellite_encoder{{8, 16}, 3};
  std::size_t satellite_size = 16;  // patches are block-averaged to this side
  std::size_t early_hidden = 64;
  double dropout_rate = 0.5;
  FusionMode fusion;
};

// All learnable parameters plus the architecture they belong to.
class Model {
 public:
  Model() = default;
  Model(ModelConfig cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  const FusionMode& fusion() const { return cfg_.fusion; }
  std::size_t num_classes() const { return cfg_.num_classes; }

  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  Parameter& param(const std::string& name) { return params_.at(index_.at(name)); }
  const Parameter& param(const std::string& name) const { return params_.at(index_.at(name)); }
  bool has_param(const std::string& name) const { return index_.count(name) > 0; }
  // Parameters whose name starts with the prefix ("image.", "context.", ...).
  std::vector<Parameter*> parameters_with_prefix(std::string_view prefix);

  // Adds the tape gradients of this model's parameters into their .grad.
  void accumulate_gradients(const Tape& t);

  // Image encoder output width (pooled feature dimension).
  std::size_t image_feature_dim() const { return cfg_.image_encoder.widths.back(); }

  // ---- branches on a tape ------------------------------------------------
  // images [N, C, S, S] -> pooled features [N, F]
  Var image_features(Tape& t, Var images) const;
  // features -> logits z_I [N, classes]
  Var image_head(Tape& t, Var features, bool training, nd::Rng& rng) const;
  Var image_logits(Tape& t, Var images, bool training, nd::Rng& rng) const {
    return image_head(t, image_features(t, images), training, rng);
  }
  // context [N, 5] -> presence logits [N, classes] (sigmoid gives p(y|x))
  Var context_logits(Tape& t, Var context) const;
  // patches [N, 4, P, P] -> pooled features / presence logits
  Var satellite_features(Tape& t, Var patches) const;
  Var satellite_logits(Tape& t, Var patches, bool training, nd::Rng& rng) const;
  // early fusion head over concatenated features -> logits
  Var early_logits(Tape& t, Var image_feat, Var context, std::optional<Var> sat_feat, bool training,
                   nd::Rng& rng) const;

  // Log-posterior over species for the configured fusion mode. `context`
  // may be absent only for image and separate modes.
  Var log_posterior(Tape& t, Var images, std::optional<Var> context, std::optional<Var> patches,
                    bool training, nd::Rng& rng) const;

 private:
  void add(std::string name, nd::Shape shape, nd::ParamKind kind, double stddev, nd::Rng& rng);
  Var dense(Tape& t, Var x, const std::string& prefix) const;
  Var encoder(Tape& t, Var x, const std::string& prefix, std::size_t blocks) const;

  ModelConfig cfg_;
  std::vector<Parameter> params_;
  std::map<std::string, std::size_t> index_;
};

inline Model::Model(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  if (cfg_.num_classes == 0) throw ConfigError("model needs at least one class");
  if (cfg_.image_encoder.widths.empty()) throw ConfigError("image encoder needs at least one block");
  if (cfg_.dropout_rate < 0 || cfg_.dropout_rate >= 1) throw ConfigError("dropout rate must be in [0, 1)");
  nd::Rng rng(seed);
  const std::size_t c = cfg_.num_classes;

  auto conv_stack = [&](const std::string& prefix, const EncoderConfig& enc, std::size_t in_ch) {
    std::size_t ch = in_ch;
    for (std::size_t i = 0; i < enc.widths.size(); ++i) {
      const std::size_t fan_in = ch * enc.kernel * enc.kernel;
      add(prefix + ".conv" + std::to_string(i) + ".w", {enc.widths[i], ch, enc.kernel, enc.kernel},
          nd::ParamKind::conv, std::sqrt(2.0 / static_cast<double>(fan_in)), rng);
      add(prefix + ".conv" + std::to_string(i) + ".b", {enc.widths[i]}, nd::ParamKind::conv, 0.0, rng);
      ch = enc.widths[i];
    }
  };
  auto fc = [&](const std::string& name, std::size_t in, std::size_t out, double gain) {
    add(name + ".w", {out, in}, nd::ParamKind::dense, std::sqrt(gain / static_cast<double>(in)), rng);
    add(name + ".b", {out}, nd::ParamKind::dense, 0.0, rng);
  };
  conv_stack("image", cfg_.image_encoder, cfg_.image_channels);
  if (cfg_.fusion.tag != FusionTag::early) fc("image.head", image_feature_dim(), c, 1.0);

  const bool sat = cfg_.fusion.satellite && cfg_.fusion.tag != FusionTag::image;
  if (sat) {
    if (cfg_.satellite_encoder.widths.empty()) throw ConfigError("satellite encoder needs at least one block");
    conv_stack("satellite", cfg_.satellite_encoder, 4);
    if (cfg_.fusion.tag != FusionTag::early) fc("satellite.out", cfg_.satellite_encoder.widths.back(), c, 1.0);
  }
  if (cfg_.fusion.tag == FusionTag::separate || cfg_.fusion.tag == FusionTag::late) {
    std::size_t in = ContextVector::kDim;
    for (std::size_t i = 0; i < cfg_.context_hidden.size(); ++i) {
      fc("context.fc" + std::to_string(i), in, cfg_.context_hidden[i], 2.0);
      in = cfg_.context_hidden[i];
    }
    fc("context.out", in, c, 1.0);
  }
  if (cfg_.fusion.tag == FusionTag::early) {
    std::size_t in = image_feature_dim() + ContextVector::kDim + (sat ? cfg_.satellite_encoder.widths.back() : 0);
    fc("early.fc", in, cfg_.early_hidden, 2.0);
    fc("early.out", cfg_.early_hidden, c, 1.0);
  }
}

inline void Model::add(std::string name, nd::Shape shape, nd::ParamKind kind, double stddev, nd::Rng& rng) {
  Tensor v(std::move(shape));
  if (stddev > 0) {
    std::normal_distribution<double> g(0.0, stddev);
    for (auto& x : v.values()) x = g(rng);
  }
  index_.emplace(name, params_.size());
  params_.emplace_back(std::move(name), std::move(v), kind);
}

inline std::vector<Parameter*> Model::parameters_with_prefix(std::string_view prefix) {
  std::vector<Parameter*> out;
  for (auto& p : params_)
    if (p.name.rfind(prefix, 0) == 0) out.push_back(&p);
  return out;
}

inline Var Model::dense(Tape& t, Var x, const std::string& prefix) const {
  return t.dense(x, t.param(param(prefix + ".w")), t.param(param(prefix + ".b")));
}

inline void Model::accumulate_gradients(const Tape& t) {
  for (auto& p : params_) {
    if (p.grad.shape() != p.value.shape()) p.zero_grad();
    auto g = t.gradient_of(p);
    for (std::size_t i = 0; i < g.size(); ++i) p.grad[i] += g[i];
  }
}

inline Var Model::encoder(Tape& t, Var x, const std::string& prefix, std::size_t blocks) const {
  for (std::size_t i = 0; i < blocks; ++i) {
    const std::string base = prefix + ".conv" + std::to_string(i);
    const auto& w = param(base + ".w");
    x = t.conv2d(x, t.param(w), t.param(param(base + ".b")), 1, w.value.dim(2) / 2);
    x = t.relu(x);
    const auto& s = t.value(x).shape();
    if (s[2] >= 2 && s[3] >= 2) x = t.max_pool2d(x, 2);
  }
  return t.global_avg_pool(x);
}

inline Var Model::image_features(Tape& t, Var images) const {
  const auto& s = t.value(images).shape();
  if (s.size() != 4 || s[1] != cfg_.image_channels || s[2] != cfg_.image_size || s[3] != cfg_.image_size)
    throw ShapeError("image branch expects [N," + std::to_string(cfg_.image_channels) + "," +
                     std::to_string(cfg_.image_size) + "," + std::to_string(cfg_.image_size) + "], got " +
                     nd::shape_string(s));
  return encoder(t, images, "image", cfg_.image_encoder.widths.size());
}

inline Var Model::image_head(Tape& t, Var features, bool training, nd::Rng& rng) const {
  if (cfg_.fusion.dropout) features = t.dropout(features, cfg_.dropout_rate, training, rng);
  return dense(t, features, "image.head");
}

inline Var Model::context_logits(Tape& t, Var context) const {
  const auto& s = t.value(context).shape();
  if (s.size() != 2 || s[1] != ContextVector::kDim)
    throw ShapeError("context branch expects [N,5], got " + nd::shape_string(s));
  if (!has_param("context.out.w")) throw ConfigError("model has no context branch");
  Var h = context;
  for (std::size_t i = 0; i < cfg_.context_hidden.size(); ++i)
    h = t.relu(dense(t, h, "context.fc" + std::to_string(i)));
  return dense(t, h, "context.out");
}

inline Var Model::satellite_features(Tape& t, Var patches) const {
  const auto& s = t.value(patches).shape();
  if (s.size() != 4 || s[1] != 4 || s[2] != s[3] || s[2] % cfg_.satellite_size != 0)
    throw ShapeError("satellite branch expects [N,4,P,P] with P a multiple of " +
                     std::to_string(cfg_.satellite_size) + ", got " + nd::shape_string(s));
  if (!has_param("satellite.conv0.w")) throw ConfigError("model has no satellite branch");
  Var x = patches;
  if (s[2] != cfg_.satellite_size) x = t.avg_pool2d(x, s[2] / cfg_.satellite_size);
  return encoder(t, x, "satellite", cfg_.satellite_encoder.widths.size());
}

inline Var Model::satellite_logits(Tape& t, Var patches, bool training, nd::Rng& rng) const {
  Var f = satellite_features(t, patches);
  if (cfg_.fusion.dropout) f = t.dropout(f, cfg_.dropout_rate, training, rng);
  return dense(t, f, "satellite.out");
}

inline Var Model::early_logits(Tape& t, Var image_feat, Var context, std::optional<Var> sat_feat, bool training,
                               nd::Rng& rng) const {
  std::vector<Var> parts{image_feat, context};
  if (sat_feat) parts.push_back(*sat_feat);
  Var x = t.concat(parts);
  Var h = t.relu(dense(t, x, "early.fc"));
  if (cfg_.fusion.dropout) h = t.dropout(h, cfg_.dropout_rate, training, rng);
  return dense(t, h, "early.out");
}

inline Var Model::log_posterior(Tape& t, Var images, std::optional<Var> context, std::optional<Var> patches,
                                bool training, nd::Rng& rng) const {
  const auto& f = cfg_.fusion;
  if (f.requires_context() && !context)
    throw ConfigError(std::string(fusion_name(f.tag)) + " fusion requires the observation context");
  const bool sat = f.satellite && f.tag != FusionTag::image;
  if (sat && f.requires_context() && !patches)
    throw ConfigError(std::string(fusion_name(f.tag)) + " fusion with satellite branch requires a patch");

  Var feat = image_features(t, images);
  if (f.tag == FusionTag::early) {
    std::optional<Var> sf;
    if (sat) sf = satellite_features(t, *patches);
    return t.log_softmax(early_logits(t, feat, *context, sf, training, rng));
  }
  Var z = image_head(t, feat, training, rng);
  if (f.tag == FusionTag::image) return t.log_softmax(z);
  // Late / separate: softmax(z) * prod sigmoid(branch), renormalized, is
  // softmax(z + sum log sigmoid(branch)).
  if (context) z = t.add(z, t.log_sigmoid(context_logits(t, *context)));
  if (sat && patches) z = t.add(z, t.log_sigmoid(satellite_logits(t, *patches, training, rng)));
  return t.log_softmax(z);
}

}  // namespace taxofuse
