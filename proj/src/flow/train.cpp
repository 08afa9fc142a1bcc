#include <cmath>

#include "todsynth/errors.hpp"
#include "todsynth/flow.hpp"
#include "todsynth/numerics/ops.hpp"

namespace todsynth {

void FlowTrainConfig::validate() const {
  if (steps == 0) throw ConfigError("flow_train.steps", "must be positive");
  if (batch == 0) throw ConfigError("flow_train.batch", "must be positive");
  if (!(lr > 0.0)) throw ConfigError("flow_train.lr", "must be positive");
  if (weight_decay < 0.0) throw ConfigError("flow_train.weight_decay", "must be non-negative");
  if (!(clip > 0.0)) throw ConfigError("flow_train.clip", "must be positive");
}

Var rf_training_loss(Tape& tape, const FlowNet& net, std::span<const SceneSample* const> batch, Rng& rng) {
  if (batch.empty()) throw ContractError("rf_training_loss: batch is empty");
  Var total;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const SceneSample& s = *batch[b];
    const Tensor& z0 = s.image;
    Tensor z1(z0.shape());
    for (float& x : z1.data()) x = static_cast<float>(rng.normal());
    const double t = rng.uniform();
    Tensor target(z0.shape());
    for (std::size_t i = 0; i < target.numel(); ++i) target[i] = z1[i] - z0[i];
    const Var v = net.forward(tape, tape.constant(interpolate(z0, z1, t)), s.mask, s.cond_hist, static_cast<float>(t));
    const Var l = ops::mse(v, tape.constant(std::move(target)));
    total = b == 0 ? l : ops::add(total, l);
  }
  return ops::scale(total, 1.0f / static_cast<float>(batch.size()));
}

FlowTrainer::FlowTrainer(FlowNet n, const FlowTrainConfig& cfg)
    : net(std::move(n)), opt(AdamWOptions{cfg.lr, cfg.weight_decay}) {}

void FlowTrainer::run(const Dataset& data, const FlowTrainConfig& cfg, std::uint64_t until,
                      const std::function<void(std::uint64_t, double)>& on_step) {
  cfg.validate();
  if (data.empty()) throw ContractError("train_flow: dataset is empty");
  const auto& mc = net.config();
  if (data.shape.classes != mc.classes || data.shape.channels != mc.channels || data.shape.height != mc.image_size ||
      data.shape.width != mc.image_size) {
    throw ConfigError("model", "dataset shape does not match the flow model (classes, channels or image_size)");
  }
  until = std::min<std::uint64_t>(until, cfg.steps);
  net.params().set_requires_grad(true);
  std::vector<const SceneSample*> batch(cfg.batch);
  for (; step < until; ++step) {
    Rng rng(derive_seed(cfg.seed, "flow-step", step));
    for (auto& p : batch) p = &data.samples[rng.below(data.size())];
    Tape tape;
    const Var loss = rf_training_loss(tape, net, batch, rng);
    const double value = loss.value()[0];
    if (!std::isfinite(value)) throw NumericalError("flow loss is not finite", static_cast<std::int64_t>(step + 1));
    net.params().zero_grad();
    tape.backward(loss);
    tape.accumulate_param_grads(net.params());
    clip_grad_norm(net.params(), cfg.clip);
    opt.step(net.params());
    if (!net.params().all_finite()) {
      throw NumericalError("flow weights became non-finite", static_cast<std::int64_t>(step + 1));
    }
    if (on_step) on_step(step + 1, value);
  }
  net.params().zero_grad();
}

FlowNet train_flow(const Dataset& data, const FlowNetConfig& net_cfg, const FlowTrainConfig& cfg,
                   const std::function<void(std::uint64_t, double)>& on_step) {
  FlowTrainer trainer(FlowNet(net_cfg, derive_seed(cfg.seed, "flow-init")), cfg);
  trainer.run(data, cfg, cfg.steps, on_step);
  return std::move(trainer.net);
}

}  // namespace todsynth
