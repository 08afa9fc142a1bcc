#include <cmath>
#include <numbers>

#include "todsynth/errors.hpp"
#include "todsynth/model.hpp"
#include "todsynth/numerics/ops.hpp"
#include "todsynth/numerics/rng.hpp"

namespace todsynth {

std::string_view scheme_name(Scheme s) {
  switch (s) {
    case Scheme::TriAttention: return "tri";
    case Scheme::SiameseMM: return "siamese";
    case Scheme::MaskAdapter: return "adapter";
  }
  return "?";
}

Scheme parse_scheme(std::string_view name) {
  if (name == "tri") return Scheme::TriAttention;
  if (name == "siamese") return Scheme::SiameseMM;
  if (name == "adapter") return Scheme::MaskAdapter;
  throw ConfigError("model.scheme", "expected one of tri|siamese|adapter, got '" + std::string(name) + "'");
}

void FlowNetConfig::validate() const {
  if (d_model == 0 || d_model % 2 != 0) throw ConfigError("model.d_model", "must be a positive even number");
  if (heads == 0 || d_model % heads != 0) {
    throw ConfigError("model.heads", "d_model " + std::to_string(d_model) + " is not divisible by " +
                                         std::to_string(heads) + " heads");
  }
  if (depth == 0) throw ConfigError("model.depth", "must be positive");
  if (patch == 0 || image_size == 0 || image_size % patch != 0) {
    throw ConfigError("model.patch", "image size " + std::to_string(image_size) + " is not a multiple of patch " +
                                         std::to_string(patch));
  }
  if (classes < 2) throw ConfigError("model.classes", "need at least 2 classes");
  if (channels == 0) throw ConfigError("model.channels", "must be positive");
  if (cond_tokens == 0) throw ConfigError("model.cond_tokens", "must be positive");
  if (ffn_mult == 0) throw ConfigError("model.ffn_mult", "must be positive");
}

std::vector<std::uint32_t> patchify_index(std::size_t channels, std::size_t size, std::size_t patch) {
  const std::size_t g = size / patch, pd = channels * patch * patch;
  std::vector<std::uint32_t> idx(g * g * pd);
  for (std::size_t gy = 0; gy < g; ++gy)
    for (std::size_t gx = 0; gx < g; ++gx)
      for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t py = 0; py < patch; ++py)
          for (std::size_t px = 0; px < patch; ++px) {
            const std::size_t row = gy * g + gx;
            const std::size_t col = (c * patch + py) * patch + px;
            const std::size_t src = (c * size + gy * patch + py) * size + gx * patch + px;
            idx[row * pd + col] = static_cast<std::uint32_t>(src);
          }
  return idx;
}

Tensor mask_patch_fractions(std::span<const std::uint8_t> mask, std::size_t size, std::size_t patch,
                            std::size_t classes) {
  if (mask.size() != size * size) {
    throw DimensionError("mask has " + std::to_string(mask.size()) + " pixels, expected " +
                         std::to_string(size * size));
  }
  const std::size_t g = size / patch;
  Tensor out({g * g, classes});
  for (std::size_t gy = 0; gy < g; ++gy)
    for (std::size_t gx = 0; gx < g; ++gx) {
      std::size_t n = 0;
      float* row = out.data().data() + (gy * g + gx) * classes;
      for (std::size_t py = 0; py < patch; ++py)
        for (std::size_t px = 0; px < patch; ++px) {
          const std::uint8_t m = mask[(gy * patch + py) * size + gx * patch + px];
          if (m == kIgnoreIndex) continue;
          if (m >= classes) throw ContractError("mask label " + std::to_string(m) + " out of range");
          row[m] += 1.0f;
          ++n;
        }
      if (n > 0) {
        for (std::size_t c = 0; c < classes; ++c) row[c] /= static_cast<float>(n);
      }
    }
  return out;
}

Tensor timestep_features(float t, std::size_t dim) {
  Tensor f({1, dim});
  const std::size_t half = dim / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(half));
    const double a = 1000.0 * t * freq;
    f[i] = static_cast<float>(std::sin(a));
    f[half + i] = static_cast<float>(std::cos(a));
  }
  return f;
}

std::vector<Var> joint_attention(Tape& tape, std::span<const Var> streams, std::span<const Projections> proj,
                                 std::size_t heads) {
  if (streams.size() != proj.size()) throw DimensionError("joint_attention: one projection set per stream");
  std::vector<Var> q, k, v;
  for (std::size_t s = 0; s < streams.size(); ++s) {
    q.push_back(ops::matmul(streams[s], tape.param(*proj[s].wq)));
    k.push_back(ops::matmul(streams[s], tape.param(*proj[s].wk)));
    v.push_back(ops::matmul(streams[s], tape.param(*proj[s].wv)));
  }
  const Var joint = ops::attention(ops::concat(q), ops::concat(k), ops::concat(v), heads);
  std::vector<Var> out;
  std::size_t row = 0;
  for (std::size_t s = 0; s < streams.size(); ++s) {
    const std::size_t n = streams[s].shape()[0];
    out.push_back(ops::matmul(ops::slice_rows(joint, row, n), tape.param(*proj[s].wo)));
    row += n;
  }
  return out;
}

Var cross_attention(Tape& tape, Var queries, Var context, const Projections& proj, std::size_t heads) {
  const Var q = ops::matmul(queries, tape.param(*proj.wq));
  const Var k = ops::matmul(context, tape.param(*proj.wk));
  const Var v = ops::matmul(context, tape.param(*proj.wv));
  return ops::matmul(ops::attention(q, k, v, heads), tape.param(*proj.wo));
}

namespace {

// 2-D sinusoidal table: the first half of the width encodes the patch row, the
// second half the column.
Tensor sinusoidal_positions(std::size_t grid, std::size_t d) {
  Tensor pos({grid * grid, d});
  const std::size_t half = d / 2, quarter = std::max<std::size_t>(1, half / 2);
  for (std::size_t r = 0; r < grid; ++r)
    for (std::size_t c = 0; c < grid; ++c) {
      float* row = pos.data().data() + (r * grid + c) * d;
      for (std::size_t i = 0; i < half; ++i) {
        const std::size_t j = i % quarter;
        const double freq = std::pow(100.0, -static_cast<double>(j) / static_cast<double>(quarter));
        const bool use_cos = i >= quarter;
        row[i] = static_cast<float>(use_cos ? std::cos(r * freq) : std::sin(r * freq));
        row[half + i] = static_cast<float>(use_cos ? std::cos(c * freq) : std::sin(c * freq));
      }
    }
  return pos;
}

const char* const kStreams[] = {"t", "z", "m"};

}  // namespace

void FlowNet::add_linear(const std::string& name, std::size_t in, std::size_t out, double std, std::uint64_t seed) {
  Rng rng(derive_seed(seed, name + ".w"));
  Tensor w({in, out});
  for (float& x : w.data()) x = static_cast<float>(rng.normal() * std);
  w.set_requires_grad(true);
  params_.add(name + ".w", std::move(w));
  Tensor b({out});
  b.set_requires_grad(true);
  params_.add(name + ".b", std::move(b));
}

void FlowNet::add_attention(const std::string& prefix, std::uint64_t seed) {
  const std::size_t d = cfg_.d_model;
  const double std_in = 1.0 / std::sqrt(static_cast<double>(d));
  const double std_out = std_in / std::sqrt(2.0 * static_cast<double>(cfg_.depth));
  for (const char* w : {"wq", "wk", "wv", "wo"}) {
    const std::string name = prefix + "." + w;
    Rng rng(derive_seed(seed, name));
    Tensor t({d, d});
    const double s = std::string(w) == "wo" ? std_out : std_in;
    for (float& x : t.data()) x = static_cast<float>(rng.normal() * s);
    t.set_requires_grad(true);
    params_.add(name, std::move(t));
  }
}

void FlowNet::add_ffn(const std::string& prefix, std::uint64_t seed) {
  const std::size_t d = cfg_.d_model, hidden = d * cfg_.ffn_mult;
  add_linear(prefix + ".fc1", d, hidden, 1.0 / std::sqrt(static_cast<double>(d)), seed);
  add_linear(prefix + ".fc2", hidden, d,
             1.0 / std::sqrt(static_cast<double>(hidden)) / std::sqrt(2.0 * static_cast<double>(cfg_.depth)), seed);
}

void FlowNet::add_gain(const std::string& name) {
  Tensor g({cfg_.d_model}, 1.0f);
  g.set_requires_grad(true);
  params_.add(name, std::move(g));
}

FlowNet::FlowNet(FlowNetConfig cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  const std::size_t d = cfg_.d_model, k = cfg_.classes;
  add_linear("embed.image", cfg_.patch_dim(), d, 1.0 / std::sqrt(static_cast<double>(cfg_.patch_dim())), seed);
  add_linear("embed.mask", k, d, 1.0, seed);
  add_linear("embed.cond", k, cfg_.cond_tokens * d, 1.0, seed);
  Tensor pos = sinusoidal_positions(cfg_.grid(), d);
  pos.set_requires_grad(true);
  params_.add("pos", std::move(pos));
  add_linear("time.fc1", d, d, 1.0 / std::sqrt(static_cast<double>(d)), seed);
  add_linear("time.fc2", d, d, 1.0 / std::sqrt(static_cast<double>(d)), seed);
  if (cfg_.scheme == Scheme::MaskAdapter) add_gain("adapter.mask_norm");

  for (std::size_t b = 0; b < cfg_.depth; ++b) {
    const std::string blk = "block" + std::to_string(b) + ".";
    // Condition and image streams are common to every scheme.
    for (const char* s : {"t", "z"}) {
      add_gain(blk + "norm1." + s);
      add_attention(blk + "attn." + s, seed);
      add_gain(blk + "norm2." + s);
      add_ffn(blk + "ffn." + s, seed);
    }
    switch (cfg_.scheme) {
      case Scheme::TriAttention:
        add_gain(blk + "norm1.m");
        add_attention(blk + "attn.m", seed);
        add_gain(blk + "norm2.m");
        add_ffn(blk + "ffn.m", seed);
        break;
      case Scheme::SiameseMM:
        // Second block over [mask, image] with its own parameters, including
        // its own image-stream feed-forward.
        for (const char* s : {"m", "z"}) {
          add_gain(blk + "b.norm1." + s);
          add_attention(blk + "b.attn." + s, seed);
          add_gain(blk + "b.norm2." + s);
          add_ffn(blk + "b.ffn." + s, seed);
        }
        break;
      case Scheme::MaskAdapter:
        add_gain(blk + "adapter.norm");
        add_attention(blk + "adapter", seed);
        break;
    }
  }
  add_gain("out.norm");
  add_linear("head", d, cfg_.patch_dim(), 0.02, seed);

  patch_index_ = patchify_index(cfg_.channels, cfg_.image_size, cfg_.patch);
  unpatch_index_.resize(patch_index_.size());
  for (std::size_t i = 0; i < patch_index_.size(); ++i) unpatch_index_[patch_index_[i]] = static_cast<std::uint32_t>(i);
  identity_positions_.resize(cfg_.tokens());
  for (std::size_t i = 0; i < identity_positions_.size(); ++i) identity_positions_[i] = static_cast<std::uint32_t>(i);
}

const Tensor& FlowNet::p(const std::string& name) const {
  const auto idx = params_.find(name);
  if (!idx) throw ContractError("FlowNet has no parameter " + name);
  return params_[*idx];
}

Var FlowNet::param(Tape& tape, const std::string& name) const { return tape.param(p(name)); }

Projections FlowNet::projections(const std::string& prefix) const {
  return {&p(prefix + ".wq"), &p(prefix + ".wk"), &p(prefix + ".wv"), &p(prefix + ".wo")};
}

Var FlowNet::feed_forward(Tape& tape, const std::string& prefix, Var h) const {
  Var x = ops::add_rowwise(ops::matmul(h, param(tape, prefix + ".fc1.w")), param(tape, prefix + ".fc1.b"));
  x = ops::gelu(x);
  return ops::add_rowwise(ops::matmul(x, param(tape, prefix + ".fc2.w")), param(tape, prefix + ".fc2.b"));
}

Streams FlowNet::embed_patches(Tape& tape, Var patches, const Tensor& mask_fractions,
                               std::span<const float> cond_hist, float t,
                               std::span<const std::uint32_t> positions) const {
  const std::size_t n = cfg_.tokens(), d = cfg_.d_model, k = cfg_.classes;
  if (patches.shape() != Shape{n, cfg_.patch_dim()}) {
    throw DimensionError("image patches " + shape_str(patches.shape()) + " do not match config " +
                         shape_str({n, cfg_.patch_dim()}));
  }
  if (mask_fractions.shape() != Shape{n, k}) {
    throw DimensionError("mask patches " + shape_str(mask_fractions.shape()) + " do not match config " +
                         shape_str({n, k}));
  }
  if (cond_hist.size() != k) {
    throw DimensionError("cond_hist has " + std::to_string(cond_hist.size()) + " entries, expected " +
                         std::to_string(k));
  }
  if (positions.size() != n) throw DimensionError("positions must list one row per patch token");

  Var pos = param(tape, "pos");
  if (!std::equal(positions.begin(), positions.end(), identity_positions_.begin())) {
    std::vector<std::uint32_t> idx(n * d);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) idx[i * d + j] = static_cast<std::uint32_t>(positions[i] * d + j);
    pos = ops::gather(pos, std::move(idx), {n, d});
  }

  Var temb = tape.constant(timestep_features(t, d));
  temb = ops::silu(ops::add_rowwise(ops::matmul(temb, param(tape, "time.fc1.w")), param(tape, "time.fc1.b")));
  temb = ops::add_rowwise(ops::matmul(temb, param(tape, "time.fc2.w")), param(tape, "time.fc2.b"));

  Streams s;
  Var hz = ops::add_rowwise(ops::matmul(patches, param(tape, "embed.image.w")), param(tape, "embed.image.b"));
  s.z = ops::add_broadcast_row(ops::add(hz, pos), temb);
  Var hm = ops::add_rowwise(ops::matmul(tape.constant(mask_fractions), param(tape, "embed.mask.w")),
                            param(tape, "embed.mask.b"));
  s.m = ops::add_broadcast_row(ops::add(hm, pos), temb);
  Var c = tape.constant(Tensor({1, k}, std::vector<float>(cond_hist.begin(), cond_hist.end())));
  c = ops::add_rowwise(ops::matmul(c, param(tape, "embed.cond.w")), param(tape, "embed.cond.b"));
  s.t = ops::reshape(c, {cfg_.cond_tokens, d});
  if (cfg_.scheme == Scheme::MaskAdapter) {
    // Static mask representation: normalised once, never updated by blocks.
    s.m = ops::rms_norm(s.m, param(tape, "adapter.mask_norm"));
  }
  return s;
}

Streams FlowNet::embed_inputs(Tape& tape, Var z_t, std::span<const std::uint8_t> mask,
                              std::span<const float> cond_hist, float t) const {
  const Shape want{cfg_.channels, cfg_.image_size, cfg_.image_size};
  if (z_t.shape() != want) {
    throw DimensionError("z_t " + shape_str(z_t.shape()) + " does not match config " + shape_str(want));
  }
  const Var patches = ops::gather(z_t, patch_index_, {cfg_.tokens(), cfg_.patch_dim()});
  const Tensor fracs = mask_patch_fractions(mask, cfg_.image_size, cfg_.patch, cfg_.classes);
  return embed_patches(tape, patches, fracs, cond_hist, t, identity_positions_);
}

Streams FlowNet::tri_attention(Tape& tape, std::size_t b, const Streams& s) const {
  const std::string blk = "block" + std::to_string(b) + ".";
  const Var in[] = {s.t, s.z, s.m};
  std::vector<Var> normed;
  std::vector<Projections> proj;
  for (std::size_t i = 0; i < 3; ++i) {
    normed.push_back(ops::rms_norm(in[i], param(tape, blk + "norm1." + kStreams[i])));
    proj.push_back(projections(blk + "attn." + kStreams[i]));
  }
  const auto o = joint_attention(tape, normed, proj, cfg_.heads);
  return {ops::add(s.t, o[0]), ops::add(s.z, o[1]), ops::add(s.m, o[2])};
}

Streams FlowNet::mask_adapter_attention(Tape& tape, std::size_t b, const Streams& s) const {
  const std::string blk = "block" + std::to_string(b) + ".";
  const Var normed[] = {ops::rms_norm(s.t, param(tape, blk + "norm1.t")),
                        ops::rms_norm(s.z, param(tape, blk + "norm1.z"))};
  const Projections proj[] = {projections(blk + "attn.t"), projections(blk + "attn.z")};
  const auto o = joint_attention(tape, normed, proj, cfg_.heads);
  Streams out{ops::add(s.t, o[0]), ops::add(s.z, o[1]), s.m};
  const Var q = ops::rms_norm(out.z, param(tape, blk + "adapter.norm"));
  out.z = ops::add(out.z, cross_attention(tape, q, s.m, projections(blk + "adapter"), cfg_.heads));
  return out;
}

Streams FlowNet::siamese_block(Tape& tape, std::size_t b, const Streams& s) const {
  const std::string blk = "block" + std::to_string(b) + ".";
  // Block A over [cond, image].
  const Var na[] = {ops::rms_norm(s.t, param(tape, blk + "norm1.t")),
                    ops::rms_norm(s.z, param(tape, blk + "norm1.z"))};
  const Projections pa[] = {projections(blk + "attn.t"), projections(blk + "attn.z")};
  const auto oa = joint_attention(tape, na, pa, cfg_.heads);
  Var t = ops::add(s.t, oa[0]);
  t = ops::add(t, feed_forward(tape, blk + "ffn.t", ops::rms_norm(t, param(tape, blk + "norm2.t"))));
  Var za = ops::add(s.z, oa[1]);
  za = ops::add(za, feed_forward(tape, blk + "ffn.z", ops::rms_norm(za, param(tape, blk + "norm2.z"))));

  // Block B over [mask, image], independent parameters.
  const Var nb[] = {ops::rms_norm(s.m, param(tape, blk + "b.norm1.m")),
                    ops::rms_norm(s.z, param(tape, blk + "b.norm1.z"))};
  const Projections pb[] = {projections(blk + "b.attn.m"), projections(blk + "b.attn.z")};
  const auto ob = joint_attention(tape, nb, pb, cfg_.heads);
  Var m = ops::add(s.m, ob[0]);
  m = ops::add(m, feed_forward(tape, blk + "b.ffn.m", ops::rms_norm(m, param(tape, blk + "b.norm2.m"))));
  const Var zb_mid = ops::add(s.z, ob[1]);
  const Var fb = feed_forward(tape, blk + "b.ffn.z", ops::rms_norm(zb_mid, param(tape, blk + "b.norm2.z")));

  // Both blocks read the same h_z; their residual updates are summed.
  const Var delta_b = ops::add(ob[1], fb);
  return {t, ops::add(za, delta_b), m};
}

Streams FlowNet::block(Tape& tape, std::size_t b, const Streams& s) const {
  if (cfg_.scheme == Scheme::SiameseMM) return siamese_block(tape, b, s);
  const std::string blk = "block" + std::to_string(b) + ".";
  Streams o = cfg_.scheme == Scheme::TriAttention ? tri_attention(tape, b, s) : mask_adapter_attention(tape, b, s);
  o.t = ops::add(o.t, feed_forward(tape, blk + "ffn.t", ops::rms_norm(o.t, param(tape, blk + "norm2.t"))));
  o.z = ops::add(o.z, feed_forward(tape, blk + "ffn.z", ops::rms_norm(o.z, param(tape, blk + "norm2.z"))));
  if (cfg_.scheme == Scheme::TriAttention) {
    o.m = ops::add(o.m, feed_forward(tape, blk + "ffn.m", ops::rms_norm(o.m, param(tape, blk + "norm2.m"))));
  }
  return o;
}

Var FlowNet::forward_patches(Tape& tape, Var patches, const Tensor& mask_fractions, std::span<const float> cond_hist,
                             float t, std::span<const std::uint32_t> positions) const {
  Streams s = embed_patches(tape, patches, mask_fractions, cond_hist, t, positions);
  for (std::size_t b = 0; b < cfg_.depth; ++b) s = block(tape, b, s);
  const Var h = ops::rms_norm(s.z, param(tape, "out.norm"));
  return ops::add_rowwise(ops::matmul(h, param(tape, "head.w")), param(tape, "head.b"));
}

Var FlowNet::forward(Tape& tape, Var z_t, std::span<const std::uint8_t> mask, std::span<const float> cond_hist,
                     float t) const {
  const Shape want{cfg_.channels, cfg_.image_size, cfg_.image_size};
  if (z_t.shape() != want) {
    throw DimensionError("z_t " + shape_str(z_t.shape()) + " does not match config " + shape_str(want));
  }
  const Var patches = ops::gather(z_t, patch_index_, {cfg_.tokens(), cfg_.patch_dim()});
  const Tensor fracs = mask_patch_fractions(mask, cfg_.image_size, cfg_.patch, cfg_.classes);
  const Var out = forward_patches(tape, patches, fracs, cond_hist, t, identity_positions_);
  return ops::gather(out, unpatch_index_, want);
}

Tensor FlowNet::predict(const Tensor& z_t, std::span<const std::uint8_t> mask, std::span<const float> cond_hist,
                        float t) const {
  Tape tape(Tape::ParamGrads::Ignore);
  return forward(tape, tape.constant(z_t), mask, cond_hist, t).value();
}

}  // namespace todsynth
