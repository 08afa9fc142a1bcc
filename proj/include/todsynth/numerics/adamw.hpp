#pragma once

#include <cstdint>
#include <vector>

#include "todsynth/numerics/tensor.hpp"

namespace todsynth {

struct AdamWOptions {
  double lr = 1e-3;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// AdamW with decoupled weight decay. Moment buffers are created lazily on the
// first step and keep the parameter shapes.
class AdamW {
 public:
  explicit AdamW(AdamWOptions opts = {}) : opts_(opts) {}

  // Updates every parameter that holds a gradient; parameters without one are
  // left untouched. Increments the step counter once per call.
  void step(ParameterSet& params);

  const AdamWOptions& options() const noexcept { return opts_; }
  AdamWOptions& options() noexcept { return opts_; }
  std::uint64_t steps() const noexcept { return step_; }

  // Checkpoint support.
  const std::vector<Tensor>& first_moments() const noexcept { return m_; }
  const std::vector<Tensor>& second_moments() const noexcept { return v_; }
  void restore(std::uint64_t step, std::vector<Tensor> m, std::vector<Tensor> v);

 private:
  AdamWOptions opts_;
  std::uint64_t step_ = 0;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
};

// Scales all gradients so their global L2 norm is at most max_norm. Returns the
// norm before clipping.
double clip_grad_norm(ParameterSet& params, double max_norm);

}  // namespace todsynth
