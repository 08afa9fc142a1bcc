#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "todsynth/errors.hpp"
#include "todsynth/numerics/ops.hpp"
#include "todsynth/numerics/rng.hpp"
#include "todsynth/scenes.hpp"

namespace todsynth {

namespace {

// Built-in six-class palette. Classes 3 and 4 are close in colour and differ
// mainly in texture, so a segmenter needs local context.
const float kDefaultColors[6][3] = {
    {0.30f, 0.50f, -0.20f},   // cropland
    {-0.35f, 0.15f, -0.45f},  // forest
    {-0.60f, -0.30f, 0.45f},  // water
    {0.40f, 0.30f, 0.25f},    // building
    {0.22f, 0.20f, 0.15f},    // road
    {-0.05f, 0.35f, 0.30f},   // wetland (rare by default)
};
const float kDefaultTexture[6] = {0.10f, 0.30f, 0.05f, 0.35f, 0.06f, 0.20f};

}  // namespace

void SceneConfig::validate(std::size_t patch) const {
  if (classes < 2) throw ConfigError("scene.classes", "need at least 2 classes");
  if (classes > 254) throw ConfigError("scene.classes", "at most 254 classes fit the u8 mask");
  if (channels == 0) throw ConfigError("scene.channels", "must be positive");
  if (size == 0) throw ConfigError("scene.size", "must be positive");
  if (patch == 0 || size % patch != 0) {
    throw ConfigError("scene.size", "image size " + std::to_string(size) + " is not a multiple of patch size " +
                                        std::to_string(patch));
  }
  if (min_regions > max_regions) throw ConfigError("scene.min_regions", "exceeds max_regions");
  if (!colors.empty()) {
    if (colors.size() != classes) throw ConfigError("scene.colors", "need one colour per class");
    for (const auto& c : colors) {
      if (c.size() != channels) throw ConfigError("scene.colors", "need one value per channel");
    }
  }
  if (!texture.empty() && texture.size() != classes) throw ConfigError("scene.texture", "need one amplitude per class");
  for (auto r : rare_classes) {
    if (r >= classes) throw ConfigError("scene.rare_classes", "class " + std::to_string(r) + " out of range");
  }
  if (rare_classes.size() >= classes) throw ConfigError("scene.rare_classes", "at least one class must be common");
  if (!rare_classes.empty() && !(rare_frequency > 0.0 && rare_frequency < 1.0)) {
    throw ConfigError("scene.rare_frequency", "must lie in (0, 1)");
  }
}

std::vector<float> SceneConfig::class_color(std::size_t cls) const {
  if (!colors.empty()) return colors[cls];
  std::vector<float> out(channels);
  for (std::size_t ch = 0; ch < channels; ++ch) {
    if (cls < 6 && ch < 3) {
      out[ch] = kDefaultColors[cls][ch];
    } else {
      // Deterministic spread for classes / channels beyond the palette.
      const double phase = 2.0 * std::numbers::pi * (0.618034 * static_cast<double>(cls) + ch / 3.0);
      out[ch] = static_cast<float>(0.6 * std::sin(phase));
    }
  }
  return out;
}

float SceneConfig::class_texture(std::size_t cls) const {
  if (!texture.empty()) return texture[cls];
  return cls < 6 ? kDefaultTexture[cls] : 0.05f + 0.05f * static_cast<float>(cls % 5);
}

DatasetShape dataset_shape(const SceneConfig& cfg) {
  return {static_cast<std::uint32_t>(cfg.size), static_cast<std::uint32_t>(cfg.size),
          static_cast<std::uint32_t>(cfg.channels), static_cast<std::uint32_t>(cfg.classes)};
}

namespace {

void paint_region(std::vector<std::uint8_t>& mask, std::size_t size, std::uint8_t cls, Rng& rng, double min_frac,
                  double max_frac) {
  const double s = static_cast<double>(size);
  if (rng.bernoulli(0.5)) {
    const auto w = static_cast<std::size_t>(std::max(1.0, rng.uniform(min_frac, max_frac) * s));
    const auto h = static_cast<std::size_t>(std::max(1.0, rng.uniform(min_frac, max_frac) * s));
    const std::size_t x0 = rng.below(size - std::min(w, size) + 1);
    const std::size_t y0 = rng.below(size - std::min(h, size) + 1);
    for (std::size_t y = y0; y < std::min(size, y0 + h); ++y) {
      for (std::size_t x = x0; x < std::min(size, x0 + w); ++x) mask[y * size + x] = cls;
    }
    return;
  }
  const double cx = rng.uniform(0.0, s), cy = rng.uniform(0.0, s);
  const double rx = rng.uniform(min_frac, max_frac) * s * 0.6 + 1.0;
  const double ry = rng.uniform(min_frac, max_frac) * s * 0.6 + 1.0;
  const double lobes = static_cast<double>(2 + rng.below(4));
  const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double wobble = rng.uniform(0.1, 0.35);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double dx = (static_cast<double>(x) + 0.5 - cx) / rx;
      const double dy = (static_cast<double>(y) + 0.5 - cy) / ry;
      const double r = std::sqrt(dx * dx + dy * dy);
      const double ang = std::atan2(dy, dx);
      if (r <= 1.0 + wobble * std::sin(lobes * ang + phase)) mask[y * size + x] = cls;
    }
  }
}

}  // namespace

SceneSample generate_scene(const SceneConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(derive_seed(seed, "scene"));
  const std::size_t s = cfg.size;
  std::vector<std::uint8_t> common;
  for (std::size_t c = 0; c < cfg.classes; ++c) {
    if (std::find(cfg.rare_classes.begin(), cfg.rare_classes.end(), c) == cfg.rare_classes.end()) {
      common.push_back(static_cast<std::uint8_t>(c));
    }
  }
  std::vector<std::uint8_t> mask(s * s, common[rng.below(common.size())]);
  const std::size_t regions = cfg.min_regions + rng.below(cfg.max_regions - cfg.min_regions + 1);
  for (std::size_t r = 0; r < regions; ++r) {
    paint_region(mask, s, common[rng.below(common.size())], rng, 0.15, 0.5);
  }
  // Rare classes are painted last so a gated draw always shows up in the mask.
  for (auto rare : cfg.rare_classes) {
    if (rng.bernoulli(cfg.rare_frequency)) paint_region(mask, s, rare, rng, 0.2, 0.4);
  }

  SceneSample out;
  out.image = Tensor({cfg.channels, s, s});
  const float light = static_cast<float>(rng.uniform(-cfg.illumination, cfg.illumination));
  std::vector<std::vector<float>> colors(cfg.classes);
  for (std::size_t c = 0; c < cfg.classes; ++c) colors[c] = cfg.class_color(c);
  for (std::size_t p = 0; p < s * s; ++p) {
    const std::uint8_t c = mask[p];
    const float n = static_cast<float>(rng.normal()) * cfg.class_texture(c);
    for (std::size_t ch = 0; ch < cfg.channels; ++ch) {
      out.image[ch * s * s + p] = std::clamp(colors[c][ch] + light + n, -1.0f, 1.0f);
    }
  }
  out.cond_hist = class_histogram(mask, cfg.classes);
  out.mask = std::move(mask);
  return out;
}

Dataset generate_dataset(const SceneConfig& cfg, std::uint64_t base_seed, std::size_t count) {
  Dataset d;
  d.shape = dataset_shape(cfg);
  d.samples.reserve(count);
  for (std::size_t i = 0; i < count; ++i) d.samples.push_back(generate_scene(cfg, base_seed + i));
  return d;
}

std::vector<float> class_histogram(std::span<const std::uint8_t> mask, std::size_t classes) {
  std::vector<std::size_t> counts(classes, 0);
  std::size_t total = 0;
  for (auto v : mask) {
    if (v == kIgnoreIndex) continue;
    if (v >= classes) {
      throw ContractError("mask label " + std::to_string(v) + " outside [0, " + std::to_string(classes) + ")");
    }
    ++counts[v];
    ++total;
  }
  if (total == 0) throw ContractError("class_histogram: every pixel is ignored");
  std::vector<float> hist(classes);
  for (std::size_t c = 0; c < classes; ++c) {
    hist[c] = static_cast<float>(static_cast<double>(counts[c]) / static_cast<double>(total));
  }
  return hist;
}

Split split_validation(const Dataset& data, std::uint64_t seed, double val_fraction) {
  const auto n_val = static_cast<std::size_t>(std::floor(static_cast<double>(data.size()) * val_fraction));
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, "val-split"));
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  std::vector<bool> is_val(data.size(), false);
  for (std::size_t i = 0; i < n_val; ++i) is_val[order[i]] = true;
  Split split;
  split.train.shape = split.val.shape = data.shape;
  for (std::size_t i = 0; i < data.size(); ++i) {
    (is_val[i] ? split.val : split.train).samples.push_back(data.samples[i]);
  }
  return split;
}

Dataset subset(const Dataset& data, std::size_t count) {
  Dataset d;
  d.shape = data.shape;
  d.samples.assign(data.samples.begin(),
                   data.samples.begin() + static_cast<std::ptrdiff_t>(std::min(count, data.size())));
  return d;
}

Dataset concat_datasets(const Dataset& a, const Dataset& b) {
  const bool a_set = a.shape.classes != 0, b_set = b.shape.classes != 0;
  if (a_set && b_set && !(a.shape == b.shape)) {
    throw ConfigError("", "datasets disagree in shape or class count");
  }
  Dataset d{a_set ? a.shape : b.shape, {}};
  d.samples = a.samples;
  d.samples.insert(d.samples.end(), b.samples.begin(), b.samples.end());
  return d;
}

}  // namespace todsynth
