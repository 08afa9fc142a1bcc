#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "todsynth/model.hpp"
#include "todsynth/numerics/adamw.hpp"
#include "todsynth/numerics/rng.hpp"
#include "todsynth/scenes.hpp"
#include "todsynth/segment.hpp"

namespace todsynth {

struct SamplerConfig {
  std::size_t steps = 23;       // N
  std::size_t crfm_steps = 4;   // k, counted from the first (noisiest) step
  // Fixed rectification strength; unset selects the adaptive rule
  // alpha = alpha_ratio * |v| / |g| measured on the first rectified step.
  std::optional<double> alpha;
  double alpha_ratio = 0.1;
  // Evaluate pre-synth CE on every step, not only rectified ones.
  bool trace_ce = false;
  std::uint64_t seed = 0;

  void validate() const;  // "sampler.*" paths
};

// z_t = (1 - t) z0 + t z1, t in [0, 1].
Tensor interpolate(const Tensor& z0, const Tensor& z1, double t);
// One-shot endpoint estimate z0 = z_t - t v, t in (0, 1].
Tensor presynth(const Tensor& z_t, double t, const Tensor& v);
// Standard normal tensor from a seed.
Tensor gaussian_noise(const Shape& shape, std::uint64_t seed);
double l2_norm(const Tensor& t);

struct StepRecord {
  std::size_t step = 0;    // i, counting down from N
  double t = 0.0;          // i / N
  bool rectified = false;
  double ce = 0.0;         // NaN when not evaluated
  double v_norm = 0.0;     // |v| used for the Euler update
  double g_norm = 0.0;     // raw |dCE/dv|, 0 when not rectified
  double update_ratio = 0.0;  // |alpha g| / |v_pred|
  bool state_untouched = true;  // rectification left z_t as it was
};

struct TrajectoryLog {
  std::vector<StepRecord> steps;
  std::vector<std::string> warnings;
  double alpha = 0.0;  // strength actually applied

  // Columns: step,t,ce,v_norm,g_norm,rectified,update_ratio
  void write_csv(const std::filesystem::path& path) const;
};

// Velocity field v(z, t) used by the generic integrators.
using VelocityField = std::function<Tensor(const Tensor& z, double t)>;

// Euler integration from t = 1 to 0 with t_i = i / N and step -1/N. Throws
// NumericalError naming i if the state becomes non-finite.
Tensor euler_integrate(const VelocityField& field, const Tensor& z1, std::size_t steps);
Tensor euler_sample(const FlowNet& net, const Tensor& z1, std::span<const std::uint8_t> mask,
                    std::span<const float> cond_hist, std::size_t steps);

struct Rectification {
  Tensor v;     // v_pred - alpha * g
  double ce;    // CE of the pre-synth estimate before rectification
  Tensor grad;  // g = dCE/dv_pred with z_t held fixed
};
// Throws ConfigError if the mask uses labels the segmenter cannot output.
Rectification crfm_rectify(const Tensor& v_pred, const Tensor& z_t, double t, std::span<const std::uint8_t> mask,
                           const SegNet& seg, double alpha);
// CE of the pre-synth estimate, no gradient.
double presynth_ce(const Tensor& z_t, double t, const Tensor& v, std::span<const std::uint8_t> mask,
                   const SegNet& seg);

struct SampleResult {
  Tensor z0;
  TrajectoryLog log;
};
// Euler sampling whose first k velocities are replaced by crfm_rectify output.
SampleResult crfm_integrate(const VelocityField& field, const SegNet& seg, const Tensor& z1,
                            std::span<const std::uint8_t> mask, const SamplerConfig& cfg);
SampleResult crfm_sample(const FlowNet& net, const SegNet& seg, const Tensor& z1, std::span<const std::uint8_t> mask,
                         std::span<const float> cond_hist, const SamplerConfig& cfg);

// Rectified-flow regression loss over a batch: z0 = image, z1 ~ N(0, I),
// t ~ U(0, 1) per sample, mean of MSE(v(z_t), z1 - z0).
Var rf_training_loss(Tape& tape, const FlowNet& net, std::span<const SceneSample* const> batch, Rng& rng);

struct FlowTrainConfig {
  std::size_t steps = 2000;
  std::size_t batch = 8;
  double lr = 1e-3;
  double weight_decay = 0.0;
  double clip = 1.0;
  std::uint64_t seed = 0;

  void validate() const;  // "flow_train.*" paths
};

// Resumable trainer; step s draws its batch, noise and times from
// derive_seed(seed, "flow-step", s).
struct FlowTrainer {
  FlowNet net;
  AdamW opt;
  std::uint64_t step = 0;

  FlowTrainer(FlowNet n, const FlowTrainConfig& cfg);
  void run(const Dataset& data, const FlowTrainConfig& cfg, std::uint64_t until,
           const std::function<void(std::uint64_t, double)>& on_step = {});
};

FlowNet train_flow(const Dataset& data, const FlowNetConfig& net_cfg, const FlowTrainConfig& cfg,
                   const std::function<void(std::uint64_t, double)>& on_step = {});

}  // namespace todsynth
