#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "taxofuse/dataset.hpp"
#include "taxofuse/image.hpp"
#include "taxofuse/raster.hpp"
#include "taxofuse/taxonomy.hpp"

namespace taxofuse {

// Generator settings for a synthetic world with known ground truth.
struct SyntheticConfig {
  // Children per parent going up: species/genus, genera/family,
  // families/order, orders/class, classes/phylum; then the phylum count.
  std::array<std::size_t, 5> branching{2, 2, 2, 1, 1};
  std::size_t phyla = 1;

  // Observation counts: count = round(max_obs * rank^-power_law), clamped.
  std::size_t min_obs = 10;
  std::size_t max_obs = 60;
  double power_law = 1.0;

  // Pairs of species with identical visual prototypes and disjoint ranges.
  std::size_t ambiguity_pairs = 0;
  bool hierarchy_consistent = true;
  double pair_separation = 6.0;  // minimum centre distance, in range sigmas

  // Species per genus that receive only 6..9 observations (unseen candidates).
  std::size_t unseen_per_genus = 0;
  std::size_t unseen_min_obs = 6;
  std::size_t unseen_max_obs = 9;

  // Region (degrees) and range spread (fraction of the region side).
  double lon_min = 6.0, lon_max = 10.0, lat_min = 45.8, lat_max = 47.8;
  double range_sigma = 0.06;
  double season_kappa = 0.0;  // von Mises concentration of observation dates

  // Images: prototype = sum over levels of scale[l] * pattern(node at l).
  std::size_t image_size = 32;
  double image_noise = 0.3;
  // > 0: the object fills a centred disc and the rest of the frame shows the
  // habitat colour at the photo location (scaled by this factor).
  double background_strength = 0.0;
  std::array<double, kNumLevels> prototype_scale{0.5, 1.0, 0.5, 0.3, 0.2, 0.1};

  // Satellite raster: core pixels cover the region; margin pixels surround it.
  std::size_t raster_core = 128;
  std::size_t raster_margin = 256;

  std::uint64_t seed = 1;

  std::size_t species_per_genus() const { return branching[0]; }
  std::size_t n_species() const {
    std::size_t n = phyla;
    for (auto b : branching) n *= b;
    return n;
  }
  std::size_t n_genera() const { return n_species() / branching[0]; }
};

inline void to_json(nlohmann::json& j, const SyntheticConfig& c) {
  j = nlohmann::json{{"branching", c.branching},
                     {"phyla", c.phyla},
                     {"min_obs", c.min_obs},
                     {"max_obs", c.max_obs},
                     {"power_law", c.power_law},
                     {"ambiguity_pairs", c.ambiguity_pairs},
                     {"hierarchy_consistent", c.hierarchy_consistent},
                     {"pair_separation", c.pair_separation},
                     {"unseen_per_genus", c.unseen_per_genus},
                     {"unseen_min_obs", c.unseen_min_obs},
                     {"unseen_max_obs", c.unseen_max_obs},
                     {"lon_min", c.lon_min},
                     {"lon_max", c.lon_max},
                     {"lat_min", c.lat_min},
                     {"lat_max", c.lat_max},
                     {"range_sigma", c.range_sigma},
                     {"season_kappa", c.season_kappa},
                     {"image_size", c.image_size},
                     {"image_noise", c.image_noise},
                     {"background_strength", c.background_strength},
                     {"prototype_scale", c.prototype_scale},
                     {"raster_core", c.raster_core},
                     {"raster_margin", c.raster_margin},
                     {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, SyntheticConfig& c) {
  SyntheticConfig d;
  c.branching = j.value("branching", d.branching);
  c.phyla = j.value("phyla", d.phyla);
  c.min_obs = j.value("min_obs", d.min_obs);
  c.max_obs = j.value("max_obs", d.max_obs);
  c.power_law = j.value("power_law", d.power_law);
  c.ambiguity_pairs = j.value("ambiguity_pairs", d.ambiguity_pairs);
  c.hierarchy_consistent = j.value("hierarchy_consistent", d.hierarchy_consistent);
  c.pair_separation = j.value("pair_separation", d.pair_separation);
  c.unseen_per_genus = j.value("unseen_per_genus", d.unseen_per_genus);
  c.unseen_min_obs = j.value("unseen_min_obs", d.unseen_min_obs);
  c.unseen_max_obs = j.value("unseen_max_obs", d.unseen_max_obs);
  c.lon_min = j.value("lon_min", d.lon_min);
  c.lon_max = j.value("lon_max", d.lon_max);
  c.lat_min = j.value("lat_min", d.lat_min);
  c.lat_max = j.value("lat_max", d.lat_max);
  c.range_sigma = j.value("range_sigma", d.range_sigma);
  c.season_kappa = j.value("season_kappa", d.season_kappa);
  c.image_size = j.value("image_size", d.image_size);
  c.image_noise = j.value("image_noise", d.image_noise);
  c.background_strength = j.value("background_strength", d.background_strength);
  c.prototype_scale = j.value("prototype_scale", d.prototype_scale);
  c.raster_core = j.value("raster_core", d.raster_core);
  c.raster_margin = j.value("raster_margin", d.raster_margin);
  c.seed = j.value("seed", d.seed);
}

// Visual pattern of one taxon: a colour offset plus an oriented wave.
struct TexturePattern {
  std::array<double, 3> color{};
  std::array<double, 3> amplitude{};
  double kx = 0.0, ky = 0.0;  // wave vector, radians per pixel
};

struct SyntheticSpecies {
  std::string name;
  std::size_t genus = 0;
  double u = 0.5, v = 0.5;   // range centre in unit region coordinates
  double season_peak = 0.0;  // day of year
  std::size_t count = 0;
  double prior = 0.0;        // count / total
  double mass = 1.0;         // Gaussian mass inside the unit square
  std::size_t prototype = 0; // index of the species whose pattern is rendered
  bool unseen_candidate = false;
};

// A fully specified synthetic world: taxonomy, species ranges, visual
// prototypes, satellite raster and the observations drawn from it.
class SyntheticWorld {
 public:
  explicit SyntheticWorld(SyntheticConfig cfg);

  const SyntheticConfig& config() const { return cfg_; }
  const std::vector<TaxonRecord>& taxonomy_records() const { return records_; }
  const std::vector<SyntheticSpecies>& species() const { return species_; }
  const std::vector<Observation>& observations() const { return observations_; }
  const Raster& raster() const { return raster_; }
  const std::vector<std::pair<std::size_t, std::size_t>>& ambiguity_pairs() const { return pairs_; }

  // Ground-truth p(species | location, day) over all world species, in
  // species() order. Exact for the generating process.
  std::vector<double> true_posterior(const RawContext& ctx) const;

  // Altitude of the synthetic terrain at a location.
  double elevation(double longitude, double latitude) const;

  // Renders "synth:<prototype>:<seed>[@<u>,<v>]" as a [3, S, S] image; the
  // optional suffix is the photo location in unit region coordinates.
  Tensor render(const std::string& image_ref) const;
  Tensor render(std::size_t prototype, std::uint64_t noise_seed,
                std::optional<std::pair<double, double>> location = std::nullopt) const;

  // Writes observations.csv, taxonomy.csv, satellite.rst, ground_truth.json
  // and ground_truth_posterior.csv into dir.
  void write(const std::filesystem::path& dir) const;

  // Rebuilds the world from a ground_truth.json sidecar.
  static SyntheticWorld from_sidecar(const std::filesystem::path& path);

 private:
  std::pair<double, double> to_unit(double lon, double lat) const {
    return {(lon - cfg_.lon_min) / (cfg_.lon_max - cfg_.lon_min),
            (lat - cfg_.lat_min) / (cfg_.lat_max - cfg_.lat_min)};
  }
  double terrain(double u, double v) const;
  double habitat(std::size_t band, double u, double v) const;

  SyntheticConfig cfg_;
  std::vector<TaxonRecord> records_;
  std::vector<SyntheticSpecies> species_;
  // patterns_[level][node] ; species-level patterns indexed by species.
  std::array<std::vector<TexturePattern>, kNumLevels> patterns_;
  std::vector<std::pair<std::size_t, std::size_t>> pairs_;
  std::vector<Observation> observations_;
  std::array<std::array<double, 4>, 4> habitat_coef_{};
  Raster raster_;
};

inline SyntheticWorld generate_synthetic(const SyntheticConfig& cfg) { return SyntheticWorld(cfg); }

namespace synth_detail {

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

inline std::string padded(const char* prefix, std::size_t i) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s%04zu", prefix, i);
  return buf;
}

}  // namespace synth_detail

inline SyntheticWorld::SyntheticWorld(SyntheticConfig cfg) : cfg_(std::move(cfg)) {
  const std::size_t n = cfg_.n_species();
  const std::size_t per_genus = cfg_.species_per_genus();
  if (n == 0) throw ConfigError("synthetic tree has no species");
  if (cfg_.min_obs == 0 || cfg_.max_obs < cfg_.min_obs) throw ConfigError("need 0 < min_obs <= max_obs");
  if (cfg_.power_law < 0) throw ConfigError("power_law must be non-negative");
  if (cfg_.image_size < 8) throw ConfigError("synthetic images must be at least 8x8");
  if (cfg_.unseen_per_genus > 0 && cfg_.unseen_max_obs < cfg_.unseen_min_obs)
    throw ConfigError("need unseen_min_obs <= unseen_max_obs");
  if (!(cfg_.lon_min < cfg_.lon_max && cfg_.lat_min < cfg_.lat_max)) throw ConfigError("empty synthetic region");

  nd::Rng rng(cfg_.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  // Taxonomy: node at level l has index s / prod(branching[0..l)).
  std::array<std::size_t, kNumLevels> divisor{};
  divisor[0] = 1;
  for (int l = 1; l < kNumLevels; ++l) divisor[l] = divisor[l - 1] * cfg_.branching[l - 1];
  const char* prefix[kNumLevels] = {"sp_", "gen_", "fam_", "ord_", "cls_", "phy_"};
  for (std::size_t s = 0; s < n; ++s) {
    TaxonRecord r;
    for (int l = 0; l < kNumLevels; ++l) r.names[l] = synth_detail::padded(prefix[l], s / divisor[l]);
    records_.push_back(std::move(r));
  }

  // Visual patterns for every node at every level.
  for (int l = 0; l < kNumLevels; ++l) {
    const std::size_t nodes = n / divisor[l];
    for (std::size_t i = 0; i < nodes; ++i) {
      TexturePattern p;
      for (auto& c : p.color) c = gauss(rng);
      for (auto& a : p.amplitude) a = 0.5 + 0.5 * unif(rng);
      double freq = 0.4 + 1.2 * unif(rng);
      double theta = std::numbers::pi * unif(rng);
      p.kx = freq * std::cos(theta);
      p.ky = freq * std::sin(theta);
      patterns_[l].push_back(p);
    }
  }

  species_.resize(n);
  for (std::size_t s = 0; s < n; ++s) {
    species_[s].name = records_[s].species();
    species_[s].genus = s / per_genus;
    species_[s].prototype = s;
  }

  // Unseen candidates: the last unseen_per_genus species of each genus.
  if (cfg_.unseen_per_genus > 0) {
    if (cfg_.unseen_per_genus >= per_genus) throw ConfigError("unseen_per_genus must leave trained species in each genus");
    for (std::size_t s = 0; s < n; ++s)
      if (s % per_genus >= per_genus - cfg_.unseen_per_genus) species_[s].unseen_candidate = true;
  }

  // Ambiguity pairs.
  if (cfg_.ambiguity_pairs > 0) {
    if (cfg_.hierarchy_consistent) {
      const std::size_t trained_per_genus = per_genus - cfg_.unseen_per_genus;
      const std::size_t per_genus_pairs = trained_per_genus / 2;
      if (per_genus_pairs == 0 || cfg_.ambiguity_pairs > per_genus_pairs * cfg_.n_genera())
        throw ConfigError("cannot place " + std::to_string(cfg_.ambiguity_pairs) +
                          " ambiguity pairs within genera of this tree");
      std::size_t made = 0;
      for (std::size_t slot = 0; slot < per_genus_pairs && made < cfg_.ambiguity_pairs; ++slot)
        for (std::size_t g = 0; g < cfg_.n_genera() && made < cfg_.ambiguity_pairs; ++g, ++made)
          pairs_.emplace_back(g * per_genus + 2 * slot, g * per_genus + 2 * slot + 1);
    } else {
      std::vector<std::size_t> pool;
      for (std::size_t s = 0; s < n; ++s)
        if (!species_[s].unseen_candidate) pool.push_back(s);
      if (2 * cfg_.ambiguity_pairs > pool.size()) throw ConfigError("too many ambiguity pairs for the species count");
      for (std::size_t i = 0; i < cfg_.ambiguity_pairs; ++i) pairs_.emplace_back(pool[2 * i], pool[2 * i + 1]);
    }
    for (auto [a, b] : pairs_) species_[b].prototype = species_[a].prototype;
  }

  // Ranges: centres in [0.15, 0.85]^2; pair partners far apart.
  const double sig = cfg_.range_sigma;
  auto draw_centre = [&](SyntheticSpecies& sp) {
    sp.u = 0.15 + 0.7 * unif(rng);
    sp.v = 0.15 + 0.7 * unif(rng);
  };
  for (auto& sp : species_) {
    draw_centre(sp);
    sp.season_peak = 365.0 * unif(rng);
  }
  for (auto [a, b] : pairs_) {
    for (int attempt = 0;; ++attempt) {
      double d = std::hypot(species_[a].u - species_[b].u, species_[a].v - species_[b].v);
      if (d >= cfg_.pair_separation * sig) break;
      if (attempt > 10000) throw ConfigError("cannot separate ambiguity pair ranges; reduce range_sigma");
      draw_centre(species_[b]);
    }
  }
  for (auto& sp : species_) {
    auto axis = [sig](double m) { return synth_detail::normal_cdf((1 - m) / sig) - synth_detail::normal_cdf(-m / sig); };
    sp.mass = axis(sp.u) * axis(sp.v);
  }

  // Long-tail counts over a random rank permutation of trained species.
  std::vector<std::size_t> ranked;
  for (std::size_t s = 0; s < n; ++s)
    if (!species_[s].unseen_candidate) ranked.push_back(s);
  std::shuffle(ranked.begin(), ranked.end(), rng);
  for (std::size_t r = 0; r < ranked.size(); ++r) {
    double c = std::round(static_cast<double>(cfg_.max_obs) * std::pow(static_cast<double>(r + 1), -cfg_.power_law));
    species_[ranked[r]].count =
        std::clamp(static_cast<std::size_t>(c), cfg_.min_obs, cfg_.max_obs);
  }
  for (auto& sp : species_)
    if (sp.unseen_candidate)
      sp.count = std::uniform_int_distribution<std::size_t>(cfg_.unseen_min_obs, cfg_.unseen_max_obs)(rng);
  double total = 0;
  for (auto& sp : species_) total += static_cast<double>(sp.count);
  for (auto& sp : species_) sp.prior = static_cast<double>(sp.count) / total;

  // Terrain and habitat coefficients.
  for (auto& band : habitat_coef_)
    for (auto& c : band) c = 2.0 * unif(rng) - 1.0;

  // Raster.
  const std::size_t side = cfg_.raster_core + 2 * cfg_.raster_margin;
  raster_.width = raster_.height = static_cast<std::uint32_t>(side);
  raster_.bands = static_cast<std::uint32_t>(kPatchBands);
  const double pw = (cfg_.lon_max - cfg_.lon_min) / static_cast<double>(cfg_.raster_core);
  const double ph = (cfg_.lat_max - cfg_.lat_min) / static_cast<double>(cfg_.raster_core);
  raster_.geo.c = {cfg_.lon_min - pw * static_cast<double>(cfg_.raster_margin), pw, 0.0,
                   cfg_.lat_max + ph * static_cast<double>(cfg_.raster_margin), 0.0, -ph};
  raster_.data.resize(side * side * kPatchBands);
  for (std::size_t b = 0; b < kPatchBands; ++b)
    for (std::size_t row = 0; row < side; ++row)
      for (std::size_t col = 0; col < side; ++col) {
        double u = (static_cast<double>(col) + 0.5 - static_cast<double>(cfg_.raster_margin)) / static_cast<double>(cfg_.raster_core);
        double v = 1.0 - (static_cast<double>(row) + 0.5 - static_cast<double>(cfg_.raster_margin)) / static_cast<double>(cfg_.raster_core);
        raster_.at(b, row, col) = static_cast<float>(habitat(b, u, v));
      }

  // Observations, species by species.
  std::size_t next_id = 0;
  for (std::size_t s = 0; s < n; ++s) {
    const auto& sp = species_[s];
    for (std::size_t i = 0; i < sp.count; ++i) {
      double u, v;
      do {
        u = sp.u + sig * gauss(rng);
        v = sp.v + sig * gauss(rng);
      } while (u < 0 || u > 1 || v < 0 || v > 1);
      double t;
      if (cfg_.season_kappa > 0) {
        // Rejection from the uniform circle.
        double ang;
        do {
          ang = 2.0 * std::numbers::pi * unif(rng);
        } while (unif(rng) > std::exp(cfg_.season_kappa * (std::cos(ang) - 1.0)));
        t = std::fmod(sp.season_peak + 365.0 * ang / (2.0 * std::numbers::pi), 365.0);
      } else {
        t = 365.0 * unif(rng);
      }
      Observation o;
      o.id = synth_detail::padded("obs_", next_id++);
      std::uint64_t noise_seed = rng();
      o.image_ref = "synth:" + std::to_string(sp.prototype) + ":" + std::to_string(noise_seed);
      if (cfg_.background_strength > 0) {
        char loc[64];
        std::snprintf(loc, sizeof loc, "@%.6f,%.6f", u, v);
        o.image_ref += loc;
      }
      o.context.longitude = cfg_.lon_min + u * (cfg_.lon_max - cfg_.lon_min);
      o.context.latitude = cfg_.lat_min + v * (cfg_.lat_max - cfg_.lat_min);
      o.context.altitude = terrain(u, v);
      o.context.day_of_year = std::round(t * 1000.0) / 1000.0;
      o.species = sp.name;
      observations_.push_back(std::move(o));
    }
  }
}

inline double SyntheticWorld::terrain(double u, double v) const {
  return 400.0 + 1500.0 * (1.0 + std::sin(3.0 * u + 0.5) * std::cos(2.5 * v - 0.3)) + 300.0 * v;
}

inline double SyntheticWorld::elevation(double longitude, double latitude) const {
  auto [u, v] = to_unit(longitude, latitude);
  return terrain(u, v);
}

inline double SyntheticWorld::habitat(std::size_t band, double u, double v) const {
  const auto& c = habitat_coef_[band];
  return c[0] * std::sin(4.0 * u + 2.0 * c[1]) + c[2] * std::cos(5.0 * v + 2.0 * c[3]) +
         0.5 * std::sin(7.0 * (u + v) + static_cast<double>(band));
}

inline std::vector<double> SyntheticWorld::true_posterior(const RawContext& ctx) const {
  auto [u, v] = to_unit(ctx.longitude, ctx.latitude);
  const double sig = cfg_.range_sigma;
  std::vector<double> logw(species_.size());
  for (std::size_t s = 0; s < species_.size(); ++s) {
    const auto& sp = species_[s];
    double d2 = (u - sp.u) * (u - sp.u) + (v - sp.v) * (v - sp.v);
    double lw = std::log(sp.prior) - d2 / (2 * sig * sig) - std::log(sp.mass);
    if (cfg_.season_kappa > 0) lw += cfg_.season_kappa * std::cos(2 * std::numbers::pi * (ctx.day_of_year - sp.season_peak) / 365.0);
    logw[s] = lw;
  }
  double m = *std::max_element(logw.begin(), logw.end());
  double z = 0;
  for (auto& w : logw) z += (w = std::exp(w - m));
  for (auto& w : logw) w /= z;
  return logw;
}

inline Tensor SyntheticWorld::render(std::size_t prototype, std::uint64_t noise_seed,
                                     std::optional<std::pair<double, double>> location) const {
  if (prototype >= species_.size()) throw DataError("synthetic prototype " + std::to_string(prototype) + " out of range");
  const std::size_t sz = cfg_.image_size;
  nd::Rng rng(noise_seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  Tensor img({3, sz, sz});
  for (int l = 0; l < kNumLevels; ++l) {
    std::size_t node = prototype;
    for (int k = 0; k < l; ++k) node /= cfg_.branching[k];
    const auto& p = patterns_[l][node];
    const double s = cfg_.prototype_scale[l];
    const double ph = phase(rng);
    for (std::size_t y = 0; y < sz; ++y)
      for (std::size_t x = 0; x < sz; ++x) {
        double wave = std::sin(p.kx * static_cast<double>(x) + p.ky * static_cast<double>(y) + ph);
        for (std::size_t c = 0; c < 3; ++c) img[(c * sz + y) * sz + x] += s * (p.color[c] + p.amplitude[c] * wave);
      }
  }
  if (location && cfg_.background_strength > 0) {
    const double c = 0.5 * static_cast<double>(sz - 1), r2 = 0.16 * static_cast<double>(sz * sz);
    for (std::size_t ch = 0; ch < 3; ++ch) {
      const double tint = cfg_.background_strength * habitat(ch, location->first, location->second);
      for (std::size_t y = 0; y < sz; ++y)
        for (std::size_t x = 0; x < sz; ++x) {
          const double dx = static_cast<double>(x) - c, dy = static_cast<double>(y) - c;
          if (dx * dx + dy * dy > r2) img[(ch * sz + y) * sz + x] = tint;
        }
    }
  }
  for (auto& v : img.values()) v += cfg_.image_noise * gauss(rng);
  return img;
}

inline Tensor SyntheticWorld::render(const std::string& ref) const {
  // synth:<prototype>:<seed>[@<u>,<v>]
  if (ref.rfind("synth:", 0) != 0) throw DataError("not a synthetic image reference: " + ref);
  auto colon = ref.find(':', 6);
  if (colon == std::string::npos) throw DataError("malformed synthetic image reference: " + ref);
  try {
    std::size_t proto = std::stoull(ref.substr(6, colon - 6));
    auto at = ref.find('@', colon);
    std::uint64_t seed = std::stoull(ref.substr(colon + 1, at == std::string::npos ? std::string::npos : at - colon - 1));
    std::optional<std::pair<double, double>> loc;
    if (at != std::string::npos) {
      auto comma = ref.find(',', at);
      if (comma == std::string::npos) throw DataError("malformed synthetic image location: " + ref);
      loc = std::pair{std::stod(ref.substr(at + 1, comma - at - 1)), std::stod(ref.substr(comma + 1))};
    }
    return render(proto, seed, loc);
  } catch (const std::logic_error&) {
    throw DataError("malformed synthetic image reference: " + ref);
  }
}

inline void SyntheticWorld::write(const std::filesystem::path& dir) const {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  auto open = [&dir](const char* name) {
    std::ofstream out(dir / name, std::ios::binary);
    if (!out) throw ConfigError("cannot write " + (dir / name).string());
    return out;
  };
  {
    auto out = open("observations.csv");
    write_observations(out, observations_);
  }
  {
    auto out = open("taxonomy.csv");
    write_taxonomy_records(out, records_);
  }
  write_raster((dir / "satellite.rst").string(), raster_);
  {
    nlohmann::json j;
    j["generator"] = cfg_;
    nlohmann::json sp = nlohmann::json::array();
    for (const auto& s : species_)
      sp.push_back({{"name", s.name},
                    {"centre_lon", cfg_.lon_min + s.u * (cfg_.lon_max - cfg_.lon_min)},
                    {"centre_lat", cfg_.lat_min + s.v * (cfg_.lat_max - cfg_.lat_min)},
                    {"prior", s.prior},
                    {"count", s.count},
                    {"prototype", s.prototype},
                    {"unseen_candidate", s.unseen_candidate}});
    j["species"] = sp;
    nlohmann::json pairs = nlohmann::json::array();
    for (auto [a, b] : pairs_) pairs.push_back({species_[a].name, species_[b].name});
    j["ambiguity_pairs"] = pairs;
    auto out = open("ground_truth.json");
    out << j.dump(2) << '\n';
  }
  {
    auto out = open("ground_truth_posterior.csv");
    out << "id";
    for (const auto& s : species_) out << ',' << s.name;
    out << '\n';
    for (const auto& o : observations_) {
      out << o.id;
      for (double p : true_posterior(o.context)) out << ',' << format_double(p);
      out << '\n';
    }
  }
}

inline SyntheticWorld SyntheticWorld::from_sidecar(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open synthetic sidecar: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
    return SyntheticWorld(j.at("generator").get<SyntheticConfig>());
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed synthetic sidecar " + path.string() + ": " + e.what());
  }
}

}  // namespace taxofuse
