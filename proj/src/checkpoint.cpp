#include "todsynth/checkpoint.hpp"

#include <algorithm>

#include "bytes.hpp"
#include "todsynth/errors.hpp"

namespace todsynth {

namespace {

constexpr char kMagic[4] = {'T', 'O', 'D', 'W'};

void write_tensor(detail::ByteWriter& w, const Tensor& t) {
  w.u8(static_cast<std::uint8_t>(t.rank()));
  for (auto d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
  w.floats(t.data());
}

Tensor read_tensor(detail::ByteReader& r) {
  const std::size_t at = r.offset();
  const std::uint8_t rank = r.u8();
  if (rank == 0) throw FormatError("tensor of rank 0", at);
  Shape shape(rank);
  for (auto& d : shape) {
    d = r.u32();
    if (d == 0) throw FormatError("tensor with zero extent", r.offset() - 4);
  }
  Tensor t(shape);
  r.floats(t.data());
  return t;
}

}  // namespace

Checkpoint make_checkpoint(std::string kind, std::string config_json, std::uint64_t step,
                           const ParameterSet& params, const AdamW* opt) {
  Checkpoint c;
  c.kind = std::move(kind);
  c.config_json = std::move(config_json);
  c.step = step;
  for (std::size_t i = 0; i < params.size(); ++i) {
    c.names.push_back(params.name(i));
    Tensor t = params[i];
    t.set_requires_grad(false);
    c.tensors.push_back(std::move(t));
  }
  if (opt != nullptr && !opt->first_moments().empty()) {
    c.optimizer = OptimizerState{opt->steps(), opt->first_moments(), opt->second_moments()};
  }
  return c;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  detail::ByteWriter w;
  for (char c : kMagic) w.u8(static_cast<std::uint8_t>(c));
  w.u16(kCheckpointVersion);
  w.str(ckpt.kind);
  w.str(ckpt.config_json);
  w.u64(ckpt.step);
  w.u32(static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (std::size_t i = 0; i < ckpt.tensors.size(); ++i) {
    w.str(ckpt.names[i]);
    write_tensor(w, ckpt.tensors[i]);
  }
  w.u8(ckpt.optimizer ? 1 : 0);
  if (ckpt.optimizer) {
    w.u64(ckpt.optimizer->step);
    for (const auto& m : ckpt.optimizer->first) write_tensor(w, m);
    for (const auto& v : ckpt.optimizer->second) write_tensor(w, v);
  }
  w.save(path);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  auto r = detail::ByteReader::load(path, "checkpoint");
  r.need(6, "header");
  if (!std::equal(std::begin(kMagic), std::end(kMagic), r.data())) throw FormatError("bad magic, expected TODW", 0);
  r.skip(4);
  const std::uint16_t version = r.u16();
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version), 4);
  Checkpoint c;
  c.kind = r.str();
  c.config_json = r.str();
  c.step = r.u64();
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    c.names.push_back(r.str());
    c.tensors.push_back(read_tensor(r));
  }
  const std::size_t flag_at = r.offset();
  const std::uint8_t flag = r.u8();
  if (flag > 1) throw FormatError("bad optimizer flag", flag_at);
  if (flag == 1) {
    OptimizerState s;
    s.step = r.u64();
    for (std::uint32_t i = 0; i < count; ++i) s.first.push_back(read_tensor(r));
    for (std::uint32_t i = 0; i < count; ++i) s.second.push_back(read_tensor(r));
    c.optimizer = std::move(s);
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after checkpoint", r.offset());
  return c;
}

void load_parameters(const Checkpoint& ckpt, ParameterSet& params) {
  if (ckpt.tensors.size() != params.size()) {
    throw FormatError("checkpoint holds " + std::to_string(ckpt.tensors.size()) + " tensors, model expects " +
                          std::to_string(params.size()),
                      0);
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (ckpt.names[i] != params.name(i)) {
      throw FormatError("checkpoint parameter " + std::to_string(i) + " is " + ckpt.names[i] + ", model expects " +
                            params.name(i),
                        0);
    }
    Tensor& dst = params[i];
    if (dst.shape() != ckpt.tensors[i].shape()) {
      throw DimensionError("parameter " + ckpt.names[i] + ": checkpoint shape " + shape_str(ckpt.tensors[i].shape()) +
                           " vs model " + shape_str(dst.shape()));
    }
    std::copy(ckpt.tensors[i].data().begin(), ckpt.tensors[i].data().end(), dst.data().begin());
  }
}

void load_optimizer(const Checkpoint& ckpt, AdamW& opt) {
  if (!ckpt.optimizer) return;
  opt.restore(ckpt.optimizer->step, ckpt.optimizer->first, ckpt.optimizer->second);
}

}  // namespace todsynth
