#include "todsynth/numerics/adamw.hpp"

#include <cmath>

#include "todsynth/errors.hpp"

namespace todsynth {

void AdamW::step(ParameterSet& params) {
  if (m_.empty()) {
    for (const auto& p : params.tensors()) {
      m_.emplace_back(p.shape());
      v_.emplace_back(p.shape());
    }
  }
  if (m_.size() != params.size()) throw DimensionError("AdamW: parameter count changed between steps");
  ++step_;
  const double b1 = opts_.beta1, b2 = opts_.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i];
    if (!p.has_grad()) continue;
    if (m_[i].shape() != p.shape()) throw DimensionError("AdamW: moment shape mismatch for " + params.name(i));
    auto g = p.grad();
    auto w = p.data();
    auto m = m_[i].data();
    auto v = v_[i].data();
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g[j];
      const double mj = b1 * m[j] + (1.0 - b1) * gj;
      const double vj = b2 * v[j] + (1.0 - b2) * gj * gj;
      m[j] = static_cast<float>(mj);
      v[j] = static_cast<float>(vj);
      double wj = w[j];
      wj *= 1.0 - opts_.lr * opts_.weight_decay;
      wj -= opts_.lr * (mj / bc1) / (std::sqrt(vj / bc2) + opts_.eps);
      w[j] = static_cast<float>(wj);
    }
  }
}

void AdamW::restore(std::uint64_t step, std::vector<Tensor> m, std::vector<Tensor> v) {
  if (m.size() != v.size()) throw DimensionError("AdamW: moment buffers disagree in count");
  step_ = step;
  m_ = std::move(m);
  v_ = std::move(v);
}

double clip_grad_norm(ParameterSet& params, double max_norm) {
  double ss = 0.0;
  for (const auto& p : params.tensors()) {
    if (!p.has_grad()) continue;
    for (float g : p.grad()) ss += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(ss);
  if (norm > max_norm && norm > 0.0) {
    const auto k = static_cast<float>(max_norm / norm);
    for (auto& p : params.tensors()) {
      if (!p.has_grad()) continue;
      for (float& g : p.grad_mut()) g *= k;
    }
  }
  return norm;
}

}  // namespace todsynth
