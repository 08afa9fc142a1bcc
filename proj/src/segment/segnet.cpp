#include <algorithm>
#include <cmath>
#include <numeric>

#include "todsynth/errors.hpp"
#include "todsynth/numerics/ops.hpp"
#include "todsynth/numerics/rng.hpp"
#include "todsynth/segment.hpp"

namespace todsynth {

void SegNetConfig::validate() const {
  if (channels == 0) throw ConfigError("seg.channels", "must be positive");
  if (classes < 2) throw ConfigError("seg.classes", "need at least 2 classes");
  if (width1 == 0) throw ConfigError("seg.width1", "must be positive");
  if (width2 == 0) throw ConfigError("seg.width2", "must be positive");
  if (width3 == 0) throw ConfigError("seg.width3", "must be positive");
}

void SegTrainConfig::validate() const {
  if (epochs == 0) throw ConfigError("seg_train.epochs", "must be positive");
  if (batch == 0) throw ConfigError("seg_train.batch", "must be positive");
  if (!(lr > 0.0)) throw ConfigError("seg_train.lr", "must be positive");
  if (weight_decay < 0.0) throw ConfigError("seg_train.weight_decay", "must be non-negative");
  if (!(clip > 0.0)) throw ConfigError("seg_train.clip", "must be positive");
}

void SegNet::add_conv(const std::string& name, std::size_t in, std::size_t out, std::size_t k, std::uint64_t seed) {
  Rng rng(derive_seed(seed, name));
  const double fan_in = static_cast<double>(in * k * k);
  const double std = (name == "head" ? 1.0 : std::sqrt(2.0)) / std::sqrt(fan_in);
  Tensor w({out, in, k, k});
  for (float& v : w.data()) v = static_cast<float>(rng.normal() * std);
  w.set_requires_grad(true);
  params_.add(name + ".w", std::move(w));
  Tensor b({out});
  b.set_requires_grad(true);
  params_.add(name + ".b", std::move(b));
}

SegNet::SegNet(SegNetConfig cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  add_conv("enc1", cfg_.channels, cfg_.width1, 3, seed);
  add_conv("enc2", cfg_.width1, cfg_.width2, 3, seed);
  add_conv("enc3", cfg_.width2, cfg_.width3, 3, seed);
  add_conv("mid", cfg_.width3, cfg_.width3, 3, seed);
  add_conv("dec2", cfg_.width3 + cfg_.width2, cfg_.width2, 3, seed);
  add_conv("dec1", cfg_.width2 + cfg_.width1, cfg_.width1, 3, seed);
  add_conv("head", cfg_.width1, cfg_.classes, 1, seed);
}

Var SegNet::conv(Tape& tape, const std::string& name, Var x, std::size_t stride, std::size_t pad) const {
  return ops::conv2d(x, tape.param(params_[*params_.find(name + ".w")]),
                     tape.param(params_[*params_.find(name + ".b")]), stride, pad);
}

SegNet::Output SegNet::forward_all(Tape& tape, Var image) const {
  const Shape& sh = image.shape();
  if (sh.size() != 3 || sh[0] != cfg_.channels || sh[1] % 4 != 0 || sh[2] % 4 != 0 || sh[1] == 0 || sh[2] == 0) {
    throw DimensionError("SegNet: image " + shape_str(sh) + " must be " + std::to_string(cfg_.channels) +
                         "×H×W with H, W multiples of 4");
  }
  const Var e1 = ops::silu(conv(tape, "enc1", image, 1, 1));
  const Var e2 = ops::silu(conv(tape, "enc2", e1, 2, 1));
  const Var e3 = ops::silu(conv(tape, "enc3", e2, 2, 1));
  const Var m = ops::silu(conv(tape, "mid", e3, 1, 1));
  const Var cat2[] = {ops::upsample2x(m), e2};
  const Var u2 = ops::silu(conv(tape, "dec2", ops::concat(cat2), 1, 1));
  const Var cat1[] = {ops::upsample2x(u2), e1};
  const Var u1 = ops::silu(conv(tape, "dec1", ops::concat(cat1), 1, 1));
  return {conv(tape, "head", u1, 1, 0), u1};
}

Tensor SegNet::logits(const Tensor& image) const {
  Tape tape(Tape::ParamGrads::Ignore);
  return forward(tape, tape.constant(image)).value();
}

std::vector<std::uint8_t> SegNet::predict(const Tensor& image) const {
  const Tensor l = logits(image);
  const std::size_t k = l.dim(0), n = l.dim(1) * l.dim(2);
  std::vector<std::uint8_t> out(n);
  for (std::size_t p = 0; p < n; ++p) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < k; ++c) {
      if (l[c * n + p] > l[best * n + p]) best = c;
    }
    out[p] = static_cast<std::uint8_t>(best);
  }
  return out;
}

std::vector<double> SegNet::pooled_features(const Tensor& image) const {
  Tape tape(Tape::ParamGrads::Ignore);
  const Tensor f = forward_all(tape, tape.constant(image)).features.value();
  const std::size_t c = f.dim(0), n = f.dim(1) * f.dim(2);
  std::vector<double> out(2 * c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double s = 0.0, ss = 0.0;
    for (std::size_t p = 0; p < n; ++p) {
      const double v = f[ch * n + p];
      s += v;
      ss += v * v;
    }
    const double mean = s / static_cast<double>(n);
    out[ch] = mean;
    out[c + ch] = std::sqrt(std::max(0.0, ss / static_cast<double>(n) - mean * mean));
  }
  return out;
}

Var segmentation_loss(Var logits, std::span<const std::uint8_t> mask) {
  const Shape& sh = logits.shape();
  if (sh.size() != 3) throw DimensionError("segmentation_loss: logits " + shape_str(sh) + " must be K×H×W");
  const std::size_t k = sh[0], n = sh[1] * sh[2];
  return ops::cross_entropy(ops::transpose(ops::reshape(logits, {k, n})), mask);
}

SceneSample augment_sample(const SceneSample& s, Rng& rng) {
  const std::size_t c = s.image.dim(0), h = s.height(), w = s.width();
  const bool flip_x = rng.bernoulli(0.5), flip_y = rng.bernoulli(0.5);
  // Square crop covering 75% of the area, rescaled to full size.
  const auto ch = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(std::sqrt(0.75) * h)));
  const auto cw = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(std::sqrt(0.75) * w)));
  const std::size_t oy = rng.below(h - ch + 1), ox = rng.below(w - cw + 1);
  SceneSample out;
  out.image = Tensor(s.image.shape());
  out.mask.resize(h * w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      std::size_t sy = oy + (y * ch) / h, sx = ox + (x * cw) / w;
      if (flip_y) sy = h - 1 - sy;
      if (flip_x) sx = w - 1 - sx;
      out.mask[y * w + x] = s.mask[sy * w + sx];
      for (std::size_t k = 0; k < c; ++k) out.image[(k * h + y) * w + x] = s.image[(k * h + sy) * w + sx];
    }
  }
  out.cond_hist = s.cond_hist;
  return out;
}

SegTrainer::SegTrainer(SegNet n, const SegTrainConfig& cfg)
    : net(std::move(n)), opt(AdamWOptions{cfg.lr, cfg.weight_decay}) {}

std::uint64_t SegTrainer::total_steps(std::size_t dataset_size, const SegTrainConfig& cfg) const {
  const std::uint64_t per_epoch = (dataset_size + cfg.batch - 1) / cfg.batch;
  return per_epoch * cfg.epochs;
}

void SegTrainer::run(const Dataset& data, const SegTrainConfig& cfg, std::uint64_t until,
                     const std::function<void(std::uint64_t, double)>& on_step) {
  cfg.validate();
  if (data.empty()) throw ContractError("train_seg: dataset is empty");
  if (data.shape.classes != net.config().classes) {
    throw ConfigError("seg.classes", "dataset has " + std::to_string(data.shape.classes) + " classes, net has " +
                                         std::to_string(net.config().classes));
  }
  const std::size_t n = data.size();
  const std::uint64_t per_epoch = (n + cfg.batch - 1) / cfg.batch;
  until = std::min(until, total_steps(n, cfg));
  net.params().set_requires_grad(true);
  std::vector<std::size_t> order(n);
  std::uint64_t order_epoch = ~0ULL;
  for (; step < until; ++step) {
    const std::uint64_t epoch = step / per_epoch, slot = step % per_epoch;
    if (epoch != order_epoch) {
      std::iota(order.begin(), order.end(), 0);
      Rng shuffle(derive_seed(cfg.seed, "seg-epoch", epoch));
      for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);
      order_epoch = epoch;
    }
    const std::size_t begin = slot * cfg.batch, end = std::min(n, begin + cfg.batch);
    Tape tape;
    std::vector<Var> losses;
    for (std::size_t j = begin; j < end; ++j) {
      const SceneSample& src = data.samples[order[j]];
      SceneSample s = src;
      if (cfg.augment) {
        Rng rng(derive_seed(cfg.seed, "seg-aug", step * 4096 + (j - begin)));
        s = augment_sample(src, rng);
      }
      if (std::all_of(s.mask.begin(), s.mask.end(), [](std::uint8_t m) { return m == kIgnoreIndex; })) continue;
      losses.push_back(segmentation_loss(net.forward(tape, tape.constant(s.image)), s.mask));
    }
    if (losses.empty()) continue;
    Var total = losses[0];
    for (std::size_t i = 1; i < losses.size(); ++i) total = ops::add(total, losses[i]);
    total = ops::scale(total, 1.0f / static_cast<float>(losses.size()));
    const double loss = total.value()[0];
    if (!std::isfinite(loss)) throw NumericalError("segmentation loss is not finite", static_cast<std::int64_t>(step + 1));
    net.params().zero_grad();
    tape.backward(total);
    tape.accumulate_param_grads(net.params());
    clip_grad_norm(net.params(), cfg.clip);
    opt.step(net.params());
    if (!net.params().all_finite()) {
      throw NumericalError("segmentation weights became non-finite", static_cast<std::int64_t>(step + 1));
    }
    if (on_step) on_step(step + 1, loss);
  }
  net.params().zero_grad();
}

SegNet train_seg(const Dataset& data, const SegNetConfig& net_cfg, const SegTrainConfig& cfg,
                 const std::function<void(std::uint64_t, double)>& on_step) {
  SegTrainer trainer(SegNet(net_cfg, derive_seed(cfg.seed, "seg-init")), cfg);
  trainer.run(data, cfg, trainer.total_steps(data.size(), cfg), on_step);
  return std::move(trainer.net);
}

}  // namespace todsynth
