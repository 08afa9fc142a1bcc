#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "todsynth/errors.hpp"
#include "todsynth/numerics/ops.hpp"
#include "todsynth/numerics/rng.hpp"
#include "todsynth/scenes.hpp"

using namespace todsynth;
namespace fs = std::filesystem;

namespace {

fs::path temp_path(const std::string& name) {
  auto dir = fs::temp_directory_path() / "todsynth_tests";
  fs::create_directories(dir);
  return dir / name;
}

std::vector<std::uint8_t> read_bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("generate_scene is deterministic in (cfg, seed)") {
  SceneConfig cfg;
  CHECK(generate_scene(cfg, 42) == generate_scene(cfg, 42));
  CHECK_FALSE(generate_scene(cfg, 42) == generate_scene(cfg, 43));
}

TEST_CASE("generated samples respect their invariants") {
  SceneConfig cfg;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto s = generate_scene(cfg, seed);
    CHECK(s.image.shape() == Shape{3, 32, 32});
    for (float v : s.image.data()) CHECK((v >= -1.0f && v <= 1.0f));
    double total = 0.0;
    for (float h : s.cond_hist) total += h;
    CHECK(std::abs(total - 1.0) < 1e-6);
    for (auto m : s.mask) CHECK(m < cfg.classes);
  }
}

TEST_CASE("single region with two classes yields at most two labels") {
  SceneConfig cfg;
  cfg.classes = 2;
  cfg.rare_classes.clear();
  cfg.min_regions = cfg.max_regions = 1;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto s = generate_scene(cfg, seed);
    CHECK(std::set<std::uint8_t>(s.mask.begin(), s.mask.end()).size() <= 2);
  }
}

TEST_CASE("rare class frequency over 1000 samples") {
  SceneConfig cfg;
  cfg.size = 16;
  cfg.rare_frequency = 0.1;
  std::size_t hits = 0;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const auto s = generate_scene(cfg, seed);
    if (std::find(s.mask.begin(), s.mask.end(), 5) != s.mask.end()) ++hits;
  }
  const double freq = static_cast<double>(hits) / 1000.0;
  CHECK(freq >= 0.07);
  CHECK(freq <= 0.13);
}

TEST_CASE("config validation") {
  SceneConfig cfg;
  CHECK_NOTHROW(cfg.validate(4));
  CHECK_THROWS_AS(cfg.validate(5), ConfigError);
  cfg.classes = 1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.classes = 6;
  cfg.rare_frequency = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("class_histogram examples") {
  std::vector<std::uint8_t> uniform(16, 2);
  CHECK(class_histogram(uniform, 4) == std::vector<float>{0, 0, 1, 0});
  CHECK(class_histogram(std::vector<std::uint8_t>{0, 1, 1, 1}, 2) == std::vector<float>{0.25f, 0.75f});
  CHECK(class_histogram(std::vector<std::uint8_t>{0, kIgnoreIndex, 1, 1}, 2)[0] == doctest::Approx(1.0 / 3.0));
  CHECK_THROWS_AS(class_histogram(std::vector<std::uint8_t>(4, kIgnoreIndex), 2), ContractError);
  CHECK_THROWS_AS(class_histogram(std::vector<std::uint8_t>{3}, 2), ContractError);
}

TEST_CASE("container round trip") {
  SceneConfig cfg;
  cfg.size = 8;
  Dataset d = generate_dataset(cfg, 7, 3);
  d.samples[1].mask[5] = kIgnoreIndex;
  d.samples[1].cond_hist = class_histogram(d.samples[1].mask, cfg.classes);
  const auto path = temp_path("roundtrip.tods");
  write_container(path, d);
  const Dataset back = read_container(path);
  CHECK(back.shape == d.shape);
  REQUIRE(back.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) CHECK(back.samples[i] == d.samples[i]);

  // Writing the read-back set reproduces the file byte for byte.
  const auto again = temp_path("roundtrip2.tods");
  write_container(again, back);
  CHECK(read_bytes(path) == read_bytes(again));
  CHECK(file_checksum(path) == file_checksum(again));
}

TEST_CASE("container header layout is little-endian") {
  SceneConfig cfg;
  cfg.size = 4;
  const auto path = temp_path("layout.tods");
  write_container(path, generate_dataset(cfg, 1, 2));
  const auto bytes = read_bytes(path);
  REQUIRE(bytes.size() == 26 + 2 * (4 * 4 * 3 * 4 + 16));
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "TODS");
  CHECK(bytes[4] == 1);
  CHECK(bytes[5] == 0);
  CHECK(bytes[6] == 2);
  CHECK(bytes[10] == 4);
  CHECK(bytes[22] == 6);
}

TEST_CASE("container errors") {
  SceneConfig cfg;
  cfg.size = 8;
  const auto path = temp_path("bad.tods");
  write_container(path, generate_dataset(cfg, 3, 2));
  auto bytes = read_bytes(path);

  SUBCASE("truncated file names expected and actual length") {
    const auto cut = temp_path("truncated.tods");
    std::ofstream(cut, std::ios::binary).write(reinterpret_cast<const char*>(bytes.data()),
                                               static_cast<std::streamsize>(bytes.size() - 10));
    try {
      read_container(cut);
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      const std::string msg = e.what();
      CHECK(msg.find(std::to_string(bytes.size())) != std::string::npos);
      CHECK(msg.find(std::to_string(bytes.size() - 10)) != std::string::npos);
      CHECK(e.offset() == bytes.size() - 10);
    }
  }
  SUBCASE("bad magic") {
    bytes[0] = 'X';
    const auto p = temp_path("magic.tods");
    std::ofstream(p, std::ios::binary).write(reinterpret_cast<const char*>(bytes.data()),
                                             static_cast<std::streamsize>(bytes.size()));
    try {
      read_container(p);
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(e.offset() == 0);
    }
  }
  SUBCASE("bad version") {
    bytes[4] = 9;
    const auto p = temp_path("version.tods");
    std::ofstream(p, std::ios::binary).write(reinterpret_cast<const char*>(bytes.data()),
                                             static_cast<std::streamsize>(bytes.size()));
    try {
      read_container(p);
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(e.offset() == 4);
    }
  }
  SUBCASE("missing file") { CHECK_THROWS_AS(read_container(temp_path("nope.tods")), MissingArtifactError); }
}

TEST_CASE("empty container is valid") {
  Dataset d;
  d.shape = {8, 8, 3, 6};
  const auto path = temp_path("empty.tods");
  write_container(path, d);
  const Dataset back = read_container(path);
  CHECK(back.empty());
  CHECK(back.shape == d.shape);
}

TEST_CASE("validation split takes floor(20%)") {
  SceneConfig cfg;
  cfg.size = 4;
  for (std::size_t n : {10u, 11u, 14u, 15u}) {
    const auto split = split_validation(generate_dataset(cfg, 0, n), 9);
    CHECK(split.val.size() == n / 5);
    CHECK(split.train.size() + split.val.size() == n);
  }
}

TEST_CASE("pixmap export") {
  SceneSample s;
  s.image = Tensor({3, 2, 2}, -1.0f);
  s.mask = {0, 1, 2, kIgnoreIndex};
  s.cond_hist = class_histogram(s.mask, 3);
  const auto prefix = temp_path("pix").string();

  export_pixmap(s, prefix, 3);
  auto img = read_bytes(prefix + "_image.ppm");
  const std::string header = "P6\n2 2\n255\n";
  REQUIRE(img.size() == header.size() + 12);
  CHECK(std::string(img.begin(), img.begin() + static_cast<long>(header.size())) == header);
  for (std::size_t i = header.size(); i < img.size(); ++i) CHECK(img[i] == 0);

  s.image = Tensor({3, 2, 2}, 1.0f);
  export_pixmap(s, prefix, 3);
  img = read_bytes(prefix + "_image.ppm");
  for (std::size_t i = header.size(); i < img.size(); ++i) CHECK(img[i] == 255);

  const auto mask1 = read_bytes(prefix + "_mask.ppm");
  export_pixmap(s, prefix, 3);
  CHECK(read_bytes(prefix + "_mask.ppm") == mask1);
  CHECK(mask_palette(6) == mask_palette(6));
  const auto pal = mask_palette(3);
  CHECK(mask1[header.size() + 0] == pal[0][0]);
  CHECK(mask1[header.size() + 3] == pal[1][0]);
}
