#include <cmath>
#include <fstream>
#include <limits>

#include "todsynth/errors.hpp"
#include "todsynth/flow.hpp"
#include "todsynth/numerics/ops.hpp"

namespace todsynth {

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(what) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                         " differ");
  }
}

double t_at(std::size_t i, std::size_t n) { return static_cast<double>(i) / static_cast<double>(n); }

// The integration state is carried in double so N small steps do not pile up
// float rounding; the field always sees the float mirror `z`.
struct EulerState {
  Tensor z;
  std::vector<double> acc;

  explicit EulerState(const Tensor& z1) : z(z1), acc(z1.data().begin(), z1.data().end()) {}

  void update(const Tensor& v, std::size_t n, std::size_t i) {
    require_same_shape(z, v, "euler");
    const double dt = -1.0 / static_cast<double>(n);
    for (std::size_t j = 0; j < acc.size(); ++j) {
      acc[j] += static_cast<double>(v[j]) * dt;
      z[j] = static_cast<float>(acc[j]);
    }
    if (!z.all_finite()) throw NumericalError("sampler state became non-finite", static_cast<std::int64_t>(i));
  }
};

void check_mask_labels(std::span<const std::uint8_t> mask, std::size_t classes) {
  for (auto m : mask) {
    if (m != kIgnoreIndex && m >= classes) {
      throw ConfigError("sampler.seg", "mask label " + std::to_string(m) + " exceeds segmenter classes (" +
                                           std::to_string(classes) + ")");
    }
  }
}

}  // namespace

void SamplerConfig::validate() const {
  if (steps == 0) throw ConfigError("sampler.steps", "must be at least 1");
  if (crfm_steps > steps) {
    throw ConfigError("sampler.crfm_steps", "must not exceed sampler.steps (" + std::to_string(steps) + ")");
  }
  if (alpha && !(*alpha >= 0.0)) throw ConfigError("sampler.alpha", "must be non-negative");
  if (!(alpha_ratio >= 0.0)) throw ConfigError("sampler.alpha_ratio", "must be non-negative");
}

Tensor interpolate(const Tensor& z0, const Tensor& z1, double t) {
  require_same_shape(z0, z1, "interpolate");
  if (!(t >= 0.0 && t <= 1.0)) throw ContractError("interpolate: t must lie in [0, 1]");
  Tensor out(z0.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = static_cast<float>((1.0 - t) * z0[i] + t * z1[i]);
  return out;
}

Tensor presynth(const Tensor& z_t, double t, const Tensor& v) {
  require_same_shape(z_t, v, "presynth");
  if (!(t > 0.0 && t <= 1.0)) throw ContractError("presynth: t must lie in (0, 1]");
  Tensor out(z_t.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = static_cast<float>(z_t[i] - t * v[i]);
  return out;
}

Tensor gaussian_noise(const Shape& shape, std::uint64_t seed) {
  Rng rng(seed);
  Tensor out(shape);
  for (float& x : out.data()) x = static_cast<float>(rng.normal());
  return out;
}

double l2_norm(const Tensor& t) {
  double s = 0.0;
  for (float x : t.data()) s += static_cast<double>(x) * x;
  return std::sqrt(s);
}

void TrajectoryLog::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw MissingArtifactError("cannot write trajectory log " + path.string());
  out.precision(9);
  out << "step,t,ce,v_norm,g_norm,rectified,update_ratio\n";
  for (const auto& r : steps) {
    out << r.step << ',' << r.t << ',';
    if (std::isfinite(r.ce)) out << r.ce;
    out << ',' << r.v_norm << ',' << r.g_norm << ',' << (r.rectified ? 1 : 0) << ',' << r.update_ratio << '\n';
  }
}

Tensor euler_integrate(const VelocityField& field, const Tensor& z1, std::size_t steps) {
  if (steps == 0) throw ConfigError("sampler.steps", "must be at least 1");
  EulerState state(z1);
  for (std::size_t i = steps; i >= 1; --i) state.update(field(state.z, t_at(i, steps)), steps, i);
  return std::move(state.z);
}

Tensor euler_sample(const FlowNet& net, const Tensor& z1, std::span<const std::uint8_t> mask,
                    std::span<const float> cond_hist, std::size_t steps) {
  return euler_integrate(
      [&](const Tensor& z, double t) { return net.predict(z, mask, cond_hist, static_cast<float>(t)); }, z1, steps);
}

Rectification crfm_rectify(const Tensor& v_pred, const Tensor& z_t, double t, std::span<const std::uint8_t> mask,
                           const SegNet& seg, double alpha) {
  require_same_shape(v_pred, z_t, "crfm_rectify");
  if (!(alpha >= 0.0)) throw ContractError("crfm_rectify: alpha must be non-negative");
  if (!(t > 0.0 && t <= 1.0)) throw ContractError("crfm_rectify: t must lie in (0, 1]");
  check_mask_labels(mask, seg.config().classes);

  // Only v carries a gradient; z_t enters as a constant.
  Tape tape(Tape::ParamGrads::Ignore);
  Tensor v = v_pred;
  v.set_requires_grad(true);
  const Var x0 = ops::sub(tape.constant(z_t), ops::scale(tape.variable(v), static_cast<float>(t)));
  const Var loss = segmentation_loss(seg.forward(tape, x0), mask);
  tape.backward(loss);

  Rectification r;
  r.ce = loss.value()[0];
  r.grad = Tensor(v_pred.shape(), std::vector<float>(v.grad().begin(), v.grad().end()));
  r.v = Tensor(v_pred.shape());
  for (std::size_t i = 0; i < v_pred.numel(); ++i) r.v[i] = static_cast<float>(v_pred[i] - alpha * r.grad[i]);
  return r;
}

double presynth_ce(const Tensor& z_t, double t, const Tensor& v, std::span<const std::uint8_t> mask,
                   const SegNet& seg) {
  check_mask_labels(mask, seg.config().classes);
  Tape tape(Tape::ParamGrads::Ignore);
  const Var logits = seg.forward(tape, tape.constant(presynth(z_t, t, v)));
  return segmentation_loss(logits, mask).value()[0];
}

SampleResult crfm_integrate(const VelocityField& field, const SegNet& seg, const Tensor& z1,
                            std::span<const std::uint8_t> mask, const SamplerConfig& cfg) {
  cfg.validate();
  const std::size_t n = cfg.steps, k = cfg.crfm_steps;
  SampleResult res;
  auto& log = res.log;
  if (k == n) {
    log.warnings.push_back("crfm_steps equals steps: rectifying the whole trajectory is prone to mode collapse");
  } else if (2 * k > n) {
    log.warnings.push_back("crfm_steps exceeds half of the sampling steps: prone to mode collapse");
  }
  std::optional<double> alpha = cfg.alpha;
  EulerState state(z1);
  const Tensor& z = state.z;
  for (std::size_t i = n; i >= 1; --i) {
    const double t = t_at(i, n);
    StepRecord rec;
    rec.step = i;
    rec.t = t;
    rec.ce = std::numeric_limits<double>::quiet_NaN();
    Tensor v = field(z, t);
    const double v_pred_norm = l2_norm(v);
    if (n - i < k) {
      const Tensor before = z;
      Rectification r = crfm_rectify(v, z, t, mask, seg, 0.0);
      const double g_norm = l2_norm(r.grad);
      if (!alpha) alpha = g_norm > 0.0 ? cfg.alpha_ratio * v_pred_norm / g_norm : 0.0;
      for (std::size_t j = 0; j < v.numel(); ++j) v[j] = static_cast<float>(v[j] - *alpha * r.grad[j]);
      rec.rectified = true;
      rec.ce = r.ce;
      rec.g_norm = g_norm;
      rec.update_ratio = v_pred_norm > 0.0 ? *alpha * g_norm / v_pred_norm : 0.0;
      rec.state_untouched = (z == before);
    } else if (cfg.trace_ce) {
      rec.ce = presynth_ce(z, t, v, mask, seg);
    }
    rec.v_norm = l2_norm(v);
    state.update(v, n, i);
    log.steps.push_back(rec);
  }
  log.alpha = alpha.value_or(0.0);
  res.z0 = std::move(state.z);
  return res;
}

SampleResult crfm_sample(const FlowNet& net, const SegNet& seg, const Tensor& z1, std::span<const std::uint8_t> mask,
                         std::span<const float> cond_hist, const SamplerConfig& cfg) {
  if (seg.config().classes != net.config().classes) {
    throw ConfigError("sampler.seg", "segmenter predicts " + std::to_string(seg.config().classes) +
                                         " classes, flow model uses " + std::to_string(net.config().classes));
  }
  return crfm_integrate(
      [&](const Tensor& z, double t) { return net.predict(z, mask, cond_hist, static_cast<float>(t)); }, seg, z1, mask,
      cfg);
}

}  // namespace todsynth
