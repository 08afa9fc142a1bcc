#include <cmath>
#include <limits>

#include "todsynth/errors.hpp"
#include "todsynth/numerics/ops.hpp"
#include "todsynth/segment.hpp"

namespace todsynth {

namespace {

std::vector<double> pixel_ce(const SegNet& net, const Tensor& image, std::span<const std::uint8_t> mask) {
  const Tensor l = net.logits(image);
  const std::size_t k = l.dim(0), n = l.dim(1) * l.dim(2);
  if (mask.size() != n) {
    throw DimensionError("pixel_filter: mask has " + std::to_string(mask.size()) + " pixels, image has " +
                         std::to_string(n));
  }
  // Position-major copy for per_position_cross_entropy.
  Tensor rows({n, k});
  for (std::size_t c = 0; c < k; ++c)
    for (std::size_t p = 0; p < n; ++p) rows.at(p, c) = l[c * n + p];
  return per_position_cross_entropy(rows, mask);
}

}  // namespace

double FilterCalibration::threshold_for(std::size_t cls) const {
  if (cls < class_mean_ce.size() && std::isfinite(class_mean_ce[cls])) return class_mean_ce[cls];
  return global_mean_ce;
}

FilterCalibration calibrate_filter(const SegNet& net, const Dataset& real_val) {
  if (real_val.empty()) throw ContractError("calibrate_filter: validation set is empty");
  const std::size_t k = net.config().classes;
  std::vector<double> sum(k, 0.0);
  std::vector<std::uint64_t> count(k, 0);
  double total = 0.0;
  std::uint64_t n = 0;
  for (const auto& s : real_val.samples) {
    const auto ce = pixel_ce(net, s.image, s.mask);
    for (std::size_t p = 0; p < ce.size(); ++p) {
      if (s.mask[p] == kIgnoreIndex) continue;
      sum[s.mask[p]] += ce[p];
      ++count[s.mask[p]];
      total += ce[p];
      ++n;
    }
  }
  if (n == 0) throw ContractError("calibrate_filter: no scored pixels");
  FilterCalibration cal;
  cal.class_mean_ce.assign(k, std::numeric_limits<double>::quiet_NaN());
  for (std::size_t c = 0; c < k; ++c) {
    if (count[c] > 0) cal.class_mean_ce[c] = sum[c] / static_cast<double>(count[c]);
  }
  cal.global_mean_ce = total / static_cast<double>(n);
  return cal;
}

FilterResult pixel_filter(const Tensor& image, std::span<const std::uint8_t> mask, const SegNet& net,
                          const FilterCalibration* calib, double phi) {
  if (calib == nullptr) throw ContractError("pixel_filter: calibration statistics are missing");
  if (!(phi > 0.0)) throw ContractError("pixel_filter: tolerance must be positive");
  const auto ce = pixel_ce(net, image, mask);
  FilterResult r;
  r.mask.assign(mask.begin(), mask.end());
  std::size_t dropped = 0;
  for (std::size_t p = 0; p < ce.size(); ++p) {
    if (mask[p] == kIgnoreIndex) continue;
    if (ce[p] > phi * calib->threshold_for(mask[p])) {
      r.mask[p] = kIgnoreIndex;
      ++dropped;
    }
  }
  r.ignored_fraction = static_cast<double>(dropped) / static_cast<double>(mask.size());
  return r;
}

}  // namespace todsynth
