#include <algorithm>
#include <fstream>
#include <iterator>

#include "../bytes.hpp"
#include "todsynth/errors.hpp"
#include "todsynth/numerics/ops.hpp"
#include "todsynth/scenes.hpp"

namespace todsynth {

namespace {

constexpr char kMagic[4] = {'T', 'O', 'D', 'S'};
constexpr std::size_t kHeaderBytes = 4 + 2 + 4 + 4 * 4;

}  // namespace

void write_container(const std::filesystem::path& path, const Dataset& data) {
  const DatasetShape& sh = data.shape;
  const std::size_t pixels = static_cast<std::size_t>(sh.height) * sh.width;
  const std::size_t values = pixels * sh.channels;
  detail::ByteWriter w;
  w.reserve(kHeaderBytes + data.size() * (values * 4 + pixels));
  for (char c : kMagic) w.u8(static_cast<std::uint8_t>(c));
  w.u16(kContainerVersion);
  w.u32(static_cast<std::uint32_t>(data.size()));
  w.u32(sh.height);
  w.u32(sh.width);
  w.u32(sh.channels);
  w.u32(sh.classes);
  for (const auto& s : data.samples) {
    if (s.image.shape() != Shape{sh.channels, sh.height, sh.width} || s.mask.size() != pixels) {
      throw DimensionError("write_container: sample shape " + shape_str(s.image.shape()) +
                           " differs from the container header");
    }
    w.floats(s.image.data());
    w.bytes(s.mask);
  }
  w.save(path);
}

Dataset read_container(const std::filesystem::path& path) {
  auto r = detail::ByteReader::load(path, "container");
  if (r.size() < kHeaderBytes) {
    throw FormatError("truncated header: expected " + std::to_string(kHeaderBytes) + " bytes, file has " +
                          std::to_string(r.size()),
                      r.size());
  }
  if (!std::equal(std::begin(kMagic), std::end(kMagic), r.data())) throw FormatError("bad magic, expected TODS", 0);
  r.skip(4);
  const std::uint16_t version = r.u16();
  if (version != kContainerVersion) throw FormatError("unsupported container version " + std::to_string(version), 4);
  const std::uint32_t count = r.u32();
  Dataset d;
  d.shape.height = r.u32();
  d.shape.width = r.u32();
  d.shape.channels = r.u32();
  d.shape.classes = r.u32();
  const DatasetShape& sh = d.shape;
  if (count > 0 && (sh.height == 0 || sh.width == 0 || sh.channels == 0)) throw FormatError("zero extent in header", 10);
  if (sh.classes < 2 || sh.classes > 254) throw FormatError("invalid class count " + std::to_string(sh.classes), 22);
  const std::uint64_t pixels = static_cast<std::uint64_t>(sh.height) * sh.width;
  const std::uint64_t record = pixels * sh.channels * 4 + pixels;
  const std::uint64_t expected = kHeaderBytes + record * count;
  if (r.size() != expected) {
    throw FormatError("length mismatch: expected " + std::to_string(expected) + " bytes for " +
                          std::to_string(count) + " samples, file has " + std::to_string(r.size()),
                      std::min<std::uint64_t>(r.size(), expected));
  }
  d.samples.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    SceneSample s;
    s.image = Tensor({sh.channels, sh.height, sh.width});
    r.floats(s.image.data());
    const std::size_t off = r.offset();
    s.mask.assign(r.data() + off, r.data() + off + pixels);
    r.skip(pixels);
    for (std::size_t p = 0; p < pixels; ++p) {
      if (s.mask[p] >= sh.classes && s.mask[p] != kIgnoreIndex) {
        throw FormatError("mask label " + std::to_string(s.mask[p]) + " out of range", off + p);
      }
    }
    try {
      s.cond_hist = class_histogram(s.mask, sh.classes);
    } catch (const ContractError&) {
      throw FormatError("sample " + std::to_string(i) + " has an all-ignored mask", off);
    }
    d.samples.push_back(std::move(s));
  }
  return d;
}

std::uint64_t file_checksum(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingArtifactError("file not found: " + path.string());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::istreambuf_iterator<char> it(is), end; it != end; ++it) {
    h ^= static_cast<unsigned char>(*it);
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace todsynth
