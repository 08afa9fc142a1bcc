#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "todsynth/numerics/tensor.hpp"

namespace todsynth {

// Procedural "land-cover" scene parameters.
struct SceneConfig {
  std::size_t size = 32;  // H = W
  std::size_t channels = 3;
  std::size_t classes = 6;
  // Per-class base colour (one value per channel, in [-1, 1]) and texture
  // amplitude. Empty vectors select the built-in palette.
  std::vector<std::vector<float>> colors;
  std::vector<float> texture;
  std::size_t min_regions = 2;
  std::size_t max_regions = 5;
  // Classes painted only through a Bernoulli(rare_frequency) gate.
  std::vector<std::uint8_t> rare_classes = {5};
  double rare_frequency = 0.1;
  // Per-image brightness jitter amplitude.
  float illumination = 0.1f;

  // Throws ConfigError. `patch` is the model patch size that must divide size.
  void validate(std::size_t patch = 1) const;
  std::vector<float> class_color(std::size_t cls) const;
  float class_texture(std::size_t cls) const;
};

// Paired image / mask record; the unit of both real and synthetic data.
struct SceneSample {
  Tensor image;                     // C×H×W in [-1, 1]
  std::vector<std::uint8_t> mask;   // H×W, class index or kIgnoreIndex
  std::vector<float> cond_hist;     // per-class pixel fraction over non-ignored pixels

  std::size_t height() const { return image.dim(1); }
  std::size_t width() const { return image.dim(2); }
  bool operator==(const SceneSample&) const = default;
};

struct DatasetShape {
  std::uint32_t height = 0;
  std::uint32_t width = 0;
  std::uint32_t channels = 0;
  std::uint32_t classes = 0;
  bool operator==(const DatasetShape&) const = default;
};

struct Dataset {
  DatasetShape shape;
  std::vector<SceneSample> samples;

  std::size_t size() const noexcept { return samples.size(); }
  bool empty() const noexcept { return samples.empty(); }
};

SceneSample generate_scene(const SceneConfig& cfg, std::uint64_t seed);
// Sample i uses seed base_seed + i.
Dataset generate_dataset(const SceneConfig& cfg, std::uint64_t base_seed, std::size_t count);
DatasetShape dataset_shape(const SceneConfig& cfg);

// Throws ContractError for out-of-range labels or an all-ignored mask.
std::vector<float> class_histogram(std::span<const std::uint8_t> mask, std::size_t classes);

// Deterministic split: floor(20%) of the samples (chosen by seed) go to validation.
struct Split {
  Dataset train;
  Dataset val;
};
Split split_validation(const Dataset& data, std::uint64_t seed, double val_fraction = 0.2);

Dataset subset(const Dataset& data, std::size_t count);
Dataset concat_datasets(const Dataset& a, const Dataset& b);

// "TODS" container, little-endian, version 1.
inline constexpr std::uint16_t kContainerVersion = 1;
void write_container(const std::filesystem::path& path, const Dataset& data);
Dataset read_container(const std::filesystem::path& path);
std::uint64_t file_checksum(const std::filesystem::path& path);

// Binary 8-bit RGB pixmaps: <prefix>_image.ppm and <prefix>_mask.ppm.
std::vector<std::array<std::uint8_t, 3>> mask_palette(std::size_t classes);
void export_pixmap(const SceneSample& sample, const std::string& path_prefix, std::size_t classes);

}  // namespace todsynth
