#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "todsynth/numerics/adamw.hpp"
#include "todsynth/numerics/rng.hpp"
#include "todsynth/numerics/tape.hpp"
#include "todsynth/scenes.hpp"

namespace todsynth {

struct SegNetConfig {
  std::size_t channels = 3;
  std::size_t classes = 6;
  std::size_t width1 = 16;  // full resolution
  std::size_t width2 = 24;  // 1/2 resolution
  std::size_t width3 = 32;  // 1/4 resolution and middle block

  void validate() const;  // throws ConfigError with "seg.*" paths
};

// Compact conv encoder-decoder:
//   e1 = act(conv3x3(x))            H
//   e2 = act(conv3x3/2(e1))         H/2
//   e3 = act(conv3x3/2(e2))         H/4
//   m  = act(conv3x3(e3))
//   u2 = act(conv3x3([up(m), e2]))  H/2
//   u1 = act(conv3x3([up(u2), e1])) H   (penultimate features)
//   logits = conv1x1(u1)
// with SiLU activations. Input sides must be divisible by 4.
class SegNet {
 public:
  SegNet(SegNetConfig cfg, std::uint64_t seed);

  const SegNetConfig& config() const noexcept { return cfg_; }
  ParameterSet& params() noexcept { return params_; }
  const ParameterSet& params() const noexcept { return params_; }

  struct Output {
    Var logits;    // K×H×W
    Var features;  // width1×H×W
  };
  Output forward_all(Tape& tape, Var image) const;
  Var forward(Tape& tape, Var image) const { return forward_all(tape, image).logits; }

  Tensor logits(const Tensor& image) const;
  std::vector<std::uint8_t> predict(const Tensor& image) const;
  // Per-channel mean and standard deviation of the penultimate features.
  std::vector<double> pooled_features(const Tensor& image) const;

 private:
  void add_conv(const std::string& name, std::size_t in, std::size_t out, std::size_t k, std::uint64_t seed);
  Var conv(Tape& tape, const std::string& name, Var x, std::size_t stride, std::size_t pad) const;

  SegNetConfig cfg_;
  ParameterSet params_;
};

// Per-pixel CE averaged over non-ignored pixels; logits K×H×W.
Var segmentation_loss(Var logits, std::span<const std::uint8_t> mask);

struct SegTrainConfig {
  std::size_t epochs = 30;
  std::size_t batch = 8;
  double lr = 2e-3;
  double weight_decay = 1e-4;
  double clip = 5.0;
  bool augment = true;
  std::uint64_t seed = 0;

  void validate() const;  // "seg_train.*" paths
};

// Random horizontal / vertical flips and a random crop of 75% area resized
// back to full size (nearest neighbour, applied identically to the mask).
SceneSample augment_sample(const SceneSample& s, Rng& rng);

// Resumable training state. Step s always draws the same batch and
// augmentations, so a resumed run reproduces an uninterrupted one.
struct SegTrainer {
  SegNet net;
  AdamW opt;
  std::uint64_t step = 0;

  SegTrainer(SegNet n, const SegTrainConfig& cfg);
  std::uint64_t total_steps(std::size_t dataset_size, const SegTrainConfig& cfg) const;
  // Runs until `until` steps (capped at total_steps). Throws NumericalError on
  // a non-finite loss.
  void run(const Dataset& data, const SegTrainConfig& cfg, std::uint64_t until,
           const std::function<void(std::uint64_t, double)>& on_step = {});
};

SegNet train_seg(const Dataset& data, const SegNetConfig& net_cfg, const SegTrainConfig& cfg,
                 const std::function<void(std::uint64_t, double)>& on_step = {});

// Rows are ground truth, columns predictions; ignored pixels are skipped.
struct ConfusionMatrix {
  std::size_t classes = 0;
  std::vector<std::uint64_t> counts;

  explicit ConfusionMatrix(std::size_t k = 0) : classes(k), counts(k * k, 0) {}
  void add(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt);
  std::uint64_t at(std::size_t gt, std::size_t pred) const { return counts[gt * classes + pred]; }
  std::uint64_t total() const;
};

struct SegMetrics {
  double oa = 0.0;
  double miou = 0.0;
  double macc = 0.0;
  std::vector<double> iou;  // NaN for classes absent from both gt and prediction
  std::vector<double> acc;  // NaN for classes absent from gt
  ConfusionMatrix confusion;
};

// Throws ContractError if no pixel is scored.
SegMetrics metrics_from_confusion(const ConfusionMatrix& cm);
SegMetrics compute_metrics(std::span<const std::vector<std::uint8_t>> pred,
                           std::span<const std::vector<std::uint8_t>> gt, std::size_t classes);
SegMetrics evaluate(const SegNet& net, const Dataset& data);

// Mean per-pixel CE of the guidance net per ground-truth class, measured on
// real validation data.
struct FilterCalibration {
  std::vector<double> class_mean_ce;  // NaN where the class never occurred
  double global_mean_ce = 0.0;
  double threshold_for(std::size_t cls) const;
};
FilterCalibration calibrate_filter(const SegNet& net, const Dataset& real_val);

struct FilterResult {
  std::vector<std::uint8_t> mask;
  double ignored_fraction = 0.0;
};
// Ignores pixels whose CE exceeds phi times their class's calibrated mean CE.
// Throws ContractError if `calib` is null.
FilterResult pixel_filter(const Tensor& image, std::span<const std::uint8_t> mask, const SegNet& net,
                          const FilterCalibration* calib, double phi);

}  // namespace todsynth
