#include <algorithm>
#include <cmath>
#include <fstream>

#include "todsynth/errors.hpp"
#include "todsynth/numerics/ops.hpp"
#include "todsynth/scenes.hpp"

namespace todsynth {

namespace {

constexpr std::uint8_t kPalette[12][3] = {
    {230, 200, 90},  {30, 120, 40},   {40, 90, 200},  {200, 60, 50},  {150, 150, 150}, {80, 200, 190},
    {170, 90, 200},  {240, 140, 30},  {120, 70, 30},  {250, 170, 200}, {100, 230, 80},  {20, 40, 90},
};

void write_ppm(const std::string& path, std::size_t width, std::size_t height, const std::vector<std::uint8_t>& rgb) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  os << "P6\n" << width << ' ' << height << "\n255\n";
  os.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
  if (!os) throw std::runtime_error("write failed for " + path);
}

}  // namespace

std::vector<std::array<std::uint8_t, 3>> mask_palette(std::size_t classes) {
  std::vector<std::array<std::uint8_t, 3>> out(classes);
  for (std::size_t c = 0; c < classes; ++c) {
    if (c < 12) {
      out[c] = {kPalette[c][0], kPalette[c][1], kPalette[c][2]};
    } else {
      const auto k = static_cast<std::uint8_t>((c * 37) % 256);
      out[c] = {k, static_cast<std::uint8_t>(255 - k), static_cast<std::uint8_t>((c * 91) % 256)};
    }
  }
  return out;
}

void export_pixmap(const SceneSample& sample, const std::string& path_prefix, std::size_t classes) {
  const std::size_t c = sample.image.dim(0), h = sample.height(), w = sample.width();
  std::vector<std::uint8_t> rgb(h * w * 3);
  for (std::size_t p = 0; p < h * w; ++p) {
    for (std::size_t ch = 0; ch < 3; ++ch) {
      const float v = sample.image[std::min(ch, c - 1) * h * w + p];
      const float scaled = (std::clamp(v, -1.0f, 1.0f) + 1.0f) * 127.5f;
      rgb[p * 3 + ch] = static_cast<std::uint8_t>(std::lround(scaled));
    }
  }
  write_ppm(path_prefix + "_image.ppm", w, h, rgb);

  const auto palette = mask_palette(classes);
  for (std::size_t p = 0; p < h * w; ++p) {
    const std::uint8_t m = sample.mask[p];
    // Ignored pixels are black.
    const std::array<std::uint8_t, 3> col = m < classes ? palette[m] : std::array<std::uint8_t, 3>{0, 0, 0};
    std::copy(col.begin(), col.end(), rgb.begin() + static_cast<std::ptrdiff_t>(p * 3));
  }
  write_ppm(path_prefix + "_mask.ppm", w, h, rgb);
}

}  // namespace todsynth
