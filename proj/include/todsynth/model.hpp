#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "todsynth/numerics/tape.hpp"
#include "todsynth/numerics/tensor.hpp"

namespace todsynth {

// How the mask stream enters the image stream.
enum class Scheme {
  TriAttention,  // one joint attention over [cond, image, mask]
  SiameseMM,     // [cond, image] and [mask, image] blocks, image updates summed
  MaskAdapter,   // [cond, image] backbone plus image→mask cross-attention
};

std::string_view scheme_name(Scheme s);  // "tri", "siamese", "adapter"
Scheme parse_scheme(std::string_view name);  // throws ConfigError

struct FlowNetConfig {
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t depth = 4;
  std::size_t patch = 4;
  std::size_t classes = 6;
  std::size_t channels = 3;
  std::size_t image_size = 32;
  std::size_t cond_tokens = 1;
  std::size_t ffn_mult = 4;
  Scheme scheme = Scheme::TriAttention;

  void validate() const;  // throws ConfigError with "model.*" paths
  std::size_t grid() const { return image_size / patch; }
  std::size_t tokens() const { return grid() * grid(); }
  std::size_t patch_dim() const { return channels * patch * patch; }
};

// Token streams: condition (L_t×d), image (L_z×d), mask (L_m×d).
struct Streams {
  Var t, z, m;
};

// Output projection weights of one attention stream (all d×d).
struct Projections {
  const Tensor* wq;
  const Tensor* wk;
  const Tensor* wv;
  const Tensor* wo;
};

// Joint attention: each stream is projected with its own weights, the
// projections are concatenated along the token axis, attended jointly, split
// back and passed through each stream's output projection. Inputs are expected
// pre-normalised; no residual is added.
std::vector<Var> joint_attention(Tape& tape, std::span<const Var> streams, std::span<const Projections> proj,
                                 std::size_t heads);
// Q from `queries`, K and V from `context`; returns the projected output.
Var cross_attention(Tape& tape, Var queries, Var context, const Projections& proj, std::size_t heads);

// [C×H×W] -> [(H/p)(W/p) × C·p·p] gather indices, row-major patch order.
std::vector<std::uint32_t> patchify_index(std::size_t channels, std::size_t size, std::size_t patch);
// Per-patch class fractions of a mask, [(H/p)(W/p) × K]. Ignored pixels are
// left out of each patch's denominator; fully ignored patches are all zero.
Tensor mask_patch_fractions(std::span<const std::uint8_t> mask, std::size_t size, std::size_t patch,
                            std::size_t classes);
// Sinusoidal timestep features of width `dim`.
Tensor timestep_features(float t, std::size_t dim);

// Three-stream conditional velocity network v(z_t, t, cond_hist, mask).
class FlowNet {
 public:
  FlowNet(FlowNetConfig cfg, std::uint64_t seed);

  const FlowNetConfig& config() const noexcept { return cfg_; }
  ParameterSet& params() noexcept { return params_; }
  const ParameterSet& params() const noexcept { return params_; }

  // Token construction. `positions[i]` selects the positional row used by
  // patch token i (identity order for ordinary use).
  Streams embed_patches(Tape& tape, Var patches, const Tensor& mask_fractions, std::span<const float> cond_hist,
                        float t, std::span<const std::uint32_t> positions) const;
  Streams embed_inputs(Tape& tape, Var z_t, std::span<const std::uint8_t> mask, std::span<const float> cond_hist,
                       float t) const;

  // Attention sublayers of block b, pre-norm and residual included.
  Streams tri_attention(Tape& tape, std::size_t b, const Streams& s) const;
  Streams mask_adapter_attention(Tape& tape, std::size_t b, const Streams& s) const;
  // One full transformer block (attention + per-stream feed-forward).
  Streams block(Tape& tape, std::size_t b, const Streams& s) const;

  // Image-space velocity [C×H×W].
  Var forward(Tape& tape, Var z_t, std::span<const std::uint8_t> mask, std::span<const float> cond_hist,
              float t) const;
  // Patch-space velocity [tokens × patch_dim].
  Var forward_patches(Tape& tape, Var patches, const Tensor& mask_fractions, std::span<const float> cond_hist,
                      float t, std::span<const std::uint32_t> positions) const;
  // Gradient-free evaluation.
  Tensor predict(const Tensor& z_t, std::span<const std::uint8_t> mask, std::span<const float> cond_hist,
                 float t) const;

  Projections projections(const std::string& prefix) const;

 private:
  const Tensor& p(const std::string& name) const;
  Var param(Tape& tape, const std::string& name) const;
  Var feed_forward(Tape& tape, const std::string& prefix, Var h) const;
  Streams siamese_block(Tape& tape, std::size_t b, const Streams& s) const;
  void add_linear(const std::string& name, std::size_t in, std::size_t out, double std, std::uint64_t seed);
  void add_attention(const std::string& prefix, std::uint64_t seed);
  void add_ffn(const std::string& prefix, std::uint64_t seed);
  void add_gain(const std::string& name);

  FlowNetConfig cfg_;
  ParameterSet params_;
  std::vector<std::uint32_t> patch_index_;
  std::vector<std::uint32_t> unpatch_index_;
  std::vector<std::uint32_t> identity_positions_;
};

}  // namespace todsynth
