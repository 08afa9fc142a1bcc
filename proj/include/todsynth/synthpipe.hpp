#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "todsynth/flow.hpp"
#include "todsynth/model.hpp"
#include "todsynth/scenes.hpp"
#include "todsynth/segment.hpp"

namespace todsynth {

using FeatureMatrix = std::vector<std::vector<double>>;  // rows are samples

// Keep iff the mask has at least three distinct labelled classes or contains
// any class from `rare_set`.
bool class_count_filter(std::span<const std::uint8_t> mask, std::span<const std::uint8_t> rare_set);

// Fréchet distance between Gaussian fits of two feature sets:
//   |mu_a - mu_b|² + Tr(S_a + S_b - 2 (S_a S_b)^1/2)
// The trace of the square root is taken from the eigenvalues of
// S_a^1/2 S_b S_a^1/2 with negatives clamped to zero. Covariances carry a
// 1e-6 diagonal jitter. Throws NumericalError on non-finite features and
// DimensionError on ragged input or fewer than two rows.
double frechet_distance(const FeatureMatrix& a, const FeatureMatrix& b);

// Pooled penultimate features of `net` for each image.
FeatureMatrix extract_features(const SegNet& net, const Dataset& data);

struct SynthesisJob {
  SamplerConfig sampler;
  std::size_t seeds_per_mask = 3;
  bool use_class_count_filter = true;
  bool use_pixel_filter = true;
  double phi = 1.25;
  std::vector<std::uint8_t> rare_set = {5};
  std::uint64_t seed = 0;
  std::size_t jobs = 1;  // worker threads; output order never depends on it

  void validate() const;  // "synth.*" paths
};

struct SynthesisReport {
  std::size_t generated = 0;
  std::size_t kept_class_count = 0;  // after the class-count filter
  std::size_t kept = 0;              // after the pixel filter as well
  std::string filter_order = "class_count,pixel";
  double ignored_fraction = 0.0;     // mean over kept samples
  double fd_pre = 0.0;               // all candidates vs reference; NaN without reference
  double fd_post = 0.0;              // kept samples vs reference
  double mean_alpha = 0.0;
  std::vector<double> mean_ce;       // per rectified step, over candidates
  std::vector<std::string> warnings;
  double seconds = 0.0;
};

struct SynthesisResult {
  Dataset data;
  SynthesisReport report;
};

// For mask j and slot s the initial noise is seeded by
// derive_seed(job.seed, "synth-noise", j * seeds_per_mask + s), so jobs that
// differ only in the sampler see the same noise. Candidates pass the
// class-count filter, then the pixel filter (which needs `calib`). When
// `fd_reference` is given its features anchor both FD values. `judge`, when
// given, replaces `guidance` for the pixel filter and the FD features so the
// rectifying model can vary while post-processing stays fixed; `calib` must
// then belong to `judge`. Throws ContractError naming the filter that removed
// everything.
SynthesisResult synthesize(const FlowNet& flow, const SegNet& guidance, const Dataset& masks,
                           const FilterCalibration* calib, const SynthesisJob& job,
                           const Dataset* fd_reference = nullptr, const SegNet* judge = nullptr);

struct DownstreamConfig {
  SegNetConfig net;
  SegTrainConfig train;
};

// Trains a fresh SegNet on real_train + synth and scores it on real_val.
// Throws ConfigError if the class counts differ.
SegMetrics run_downstream(const Dataset& real_train, const Dataset& synth, const Dataset& real_val,
                          const DownstreamConfig& cfg);

struct SweepGrid {
  std::vector<Scheme> schemes;
  std::vector<std::size_t> steps;
  std::vector<std::size_t> crfm_steps;
};

struct SweepCell {
  std::size_t id = 0;
  Scheme scheme = Scheme::TriAttention;
  std::size_t steps = 0;
  std::size_t crfm_steps = 0;
  bool ok = false;
  std::string error;
  double oa = 0.0, miou = 0.0, macc = 0.0;
  double fd = 0.0, fd_post = 0.0;
  std::size_t kept = 0;
};

struct SweepInputs {
  const Dataset* real_train = nullptr;
  const Dataset* real_val = nullptr;
  const Dataset* masks = nullptr;
  const SegNet* guidance = nullptr;
  const FilterCalibration* calib = nullptr;
  // Trained flow model for a scheme; may throw, which fails that cell only.
  std::function<const FlowNet&(Scheme)> flow_for;
  SynthesisJob job;
  DownstreamConfig downstream;
};

// One cell per scheme × N × k in that nesting order. Cell failures are
// recorded and the sweep continues.
std::vector<SweepCell> ablation_sweep(const SweepGrid& grid, const SweepInputs& in);

// Columns: cell,scheme,steps,crfm_steps,OA,mIoU,mAcc,FD,FD_post,kept,status
void write_sweep_csv(const std::filesystem::path& path, std::span<const SweepCell> cells);

}  // namespace todsynth
