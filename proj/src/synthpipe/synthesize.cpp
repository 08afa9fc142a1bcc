#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <limits>
#include <thread>

#include "todsynth/errors.hpp"
#include "todsynth/numerics/ops.hpp"
#include "todsynth/synthpipe.hpp"

namespace todsynth {

namespace {

struct Candidate {
  Tensor image;
  std::vector<std::uint8_t> mask;
  bool class_ok = false;
  bool pixel_ok = false;
  double ignored = 0.0;
  TrajectoryLog log;
};

// Runs fn(i) for i in [0, n) on up to `jobs` threads and rethrows the
// lowest-index failure.
void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn) {
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t threads = std::min(std::max<std::size_t>(jobs, 1), n);
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

FeatureMatrix features_of(const SegNet& net, std::span<const Tensor> images) {
  FeatureMatrix out;
  out.reserve(images.size());
  for (const auto& img : images) out.push_back(net.pooled_features(img));
  return out;
}

}  // namespace

bool class_count_filter(std::span<const std::uint8_t> mask, std::span<const std::uint8_t> rare_set) {
  std::vector<bool> seen(256, false);
  std::size_t distinct = 0;
  for (auto m : mask) {
    if (m == kIgnoreIndex || seen[m]) continue;
    seen[m] = true;
    ++distinct;
  }
  if (distinct >= 3) return true;
  return std::any_of(rare_set.begin(), rare_set.end(), [&](std::uint8_t r) { return r != kIgnoreIndex && seen[r]; });
}

FeatureMatrix extract_features(const SegNet& net, const Dataset& data) {
  FeatureMatrix out;
  out.reserve(data.size());
  for (const auto& s : data.samples) out.push_back(net.pooled_features(s.image));
  return out;
}

void SynthesisJob::validate() const {
  sampler.validate();
  if (seeds_per_mask == 0) throw ConfigError("synth.seeds_per_mask", "must be at least 1");
  if (!(phi > 0.0)) throw ConfigError("synth.phi", "must be positive");
  if (jobs == 0) throw ConfigError("synth.jobs", "must be at least 1");
}

SynthesisResult synthesize(const FlowNet& flow, const SegNet& guidance, const Dataset& masks,
                           const FilterCalibration* calib, const SynthesisJob& job, const Dataset* fd_reference,
                           const SegNet* judge) {
  const auto start = std::chrono::steady_clock::now();
  job.validate();
  if (masks.empty()) throw ContractError("synthesize: mask source is empty");
  const auto& mc = flow.config();
  if (masks.shape.classes != mc.classes || masks.shape.height != mc.image_size || masks.shape.width != mc.image_size) {
    throw ConfigError("synth.masks", "mask source does not match the flow model's classes or image size");
  }
  if (guidance.config().classes != mc.classes) {
    throw ConfigError("synth.guidance", "guidance segmenter predicts " + std::to_string(guidance.config().classes) +
                                            " classes, flow model uses " + std::to_string(mc.classes));
  }
  const SegNet& critic = judge ? *judge : guidance;
  if (critic.config().classes != mc.classes) {
    throw ConfigError("synth.judge", "filter segmenter predicts " + std::to_string(critic.config().classes) +
                                         " classes, flow model uses " + std::to_string(mc.classes));
  }
  if (job.use_pixel_filter && calib == nullptr) {
    throw ContractError("synthesize: pixel filter enabled without calibration statistics");
  }

  const std::size_t spm = job.seeds_per_mask;
  const std::size_t n = masks.size() * spm;
  const Shape shape{mc.channels, mc.image_size, mc.image_size};
  std::vector<Candidate> cands(n);
  parallel_for(n, job.jobs, [&](std::size_t i) {
    const SceneSample& src = masks.samples[i / spm];
    const Tensor z1 = gaussian_noise(shape, derive_seed(job.seed, "synth-noise", i));
    SampleResult r = crfm_sample(flow, guidance, z1, src.mask, src.cond_hist, job.sampler);
    Candidate& c = cands[i];
    // Identity decoder followed by the image range clamp.
    c.image = std::move(r.z0);
    for (float& v : c.image.data()) v = std::clamp(v, -1.0f, 1.0f);
    c.log = std::move(r.log);
    c.class_ok = !job.use_class_count_filter || class_count_filter(src.mask, job.rare_set);
    if (!c.class_ok) return;
    if (job.use_pixel_filter) {
      FilterResult fr = pixel_filter(c.image, src.mask, critic, calib, job.phi);
      c.mask = std::move(fr.mask);
      c.ignored = fr.ignored_fraction;
    } else {
      c.mask = src.mask;
    }
    c.pixel_ok = std::any_of(c.mask.begin(), c.mask.end(), [](std::uint8_t m) { return m != kIgnoreIndex; });
  });

  SynthesisResult out;
  out.data.shape = masks.shape;
  auto& rep = out.report;
  rep.generated = n;
  rep.filter_order = std::string(job.use_class_count_filter ? "class_count" : "") +
                     (job.use_class_count_filter && job.use_pixel_filter ? "," : "") +
                     (job.use_pixel_filter ? "pixel" : "");
  rep.mean_ce.assign(job.sampler.crfm_steps, 0.0);
  double alpha_sum = 0.0, ignored_sum = 0.0;
  for (auto& c : cands) {
    alpha_sum += c.log.alpha;
    for (std::size_t j = 0; j < job.sampler.crfm_steps; ++j) rep.mean_ce[j] += c.log.steps[j].ce / static_cast<double>(n);
    if (!c.class_ok) continue;
    ++rep.kept_class_count;
    if (!c.pixel_ok) continue;
    ++rep.kept;
    ignored_sum += c.ignored;
    SceneSample s;
    s.image = c.image;
    s.cond_hist = class_histogram(c.mask, mc.classes);
    s.mask = std::move(c.mask);
    out.data.samples.push_back(std::move(s));
  }
  rep.mean_alpha = alpha_sum / static_cast<double>(n);
  rep.warnings = cands.front().log.warnings;
  if (rep.kept_class_count == 0) {
    throw ContractError("synthesize: the class-count filter rejected all " + std::to_string(n) + " candidates");
  }
  if (rep.kept == 0) {
    throw ContractError("synthesize: the pixel filter ignored every pixel of all " +
                        std::to_string(rep.kept_class_count) + " remaining candidates");
  }
  rep.ignored_fraction = ignored_sum / static_cast<double>(rep.kept);

  const double nan = std::numeric_limits<double>::quiet_NaN();
  rep.fd_pre = rep.fd_post = nan;
  if (fd_reference != nullptr) {
    const FeatureMatrix ref = extract_features(critic, *fd_reference);
    std::vector<Tensor> all;
    all.reserve(n);
    for (const auto& c : cands) all.push_back(c.image);
    rep.fd_pre = frechet_distance(features_of(critic, all), ref);
    if (out.data.size() >= 2) rep.fd_post = frechet_distance(extract_features(critic, out.data), ref);
  }
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

}  // namespace todsynth
