#include <cmath>
#include <limits>

#include "todsynth/errors.hpp"
#include "todsynth/numerics/ops.hpp"
#include "todsynth/segment.hpp"

namespace todsynth {

void ConfusionMatrix::add(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt) {
  if (pred.size() != gt.size()) {
    throw DimensionError("confusion: " + std::to_string(pred.size()) + " predictions for " +
                         std::to_string(gt.size()) + " labels");
  }
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (gt[i] == kIgnoreIndex) continue;
    if (gt[i] >= classes || pred[i] >= classes) {
      throw ContractError("confusion: label outside [0, " + std::to_string(classes) + ")");
    }
    ++counts[gt[i] * classes + pred[i]];
  }
}

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t n = 0;
  for (auto c : counts) n += c;
  return n;
}

SegMetrics metrics_from_confusion(const ConfusionMatrix& cm) {
  const std::uint64_t total = cm.total();
  if (total == 0) throw ContractError("metrics: no scored pixels");
  const std::size_t k = cm.classes;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  SegMetrics m;
  m.confusion = cm;
  m.iou.assign(k, nan);
  m.acc.assign(k, nan);
  std::uint64_t diag = 0;
  double iou_sum = 0.0, acc_sum = 0.0;
  std::size_t iou_n = 0, acc_n = 0;
  for (std::size_t c = 0; c < k; ++c) {
    const std::uint64_t tp = cm.at(c, c);
    std::uint64_t row = 0, col = 0;
    for (std::size_t j = 0; j < k; ++j) {
      row += cm.at(c, j);
      col += cm.at(j, c);
    }
    diag += tp;
    const std::uint64_t uni = row + col - tp;
    if (uni > 0) {
      m.iou[c] = static_cast<double>(tp) / static_cast<double>(uni);
      iou_sum += m.iou[c];
      ++iou_n;
    }
    if (row > 0) {
      m.acc[c] = static_cast<double>(tp) / static_cast<double>(row);
      acc_sum += m.acc[c];
      ++acc_n;
    }
  }
  m.oa = static_cast<double>(diag) / static_cast<double>(total);
  m.miou = iou_sum / static_cast<double>(iou_n);
  m.macc = acc_sum / static_cast<double>(acc_n);
  return m;
}

SegMetrics compute_metrics(std::span<const std::vector<std::uint8_t>> pred,
                           std::span<const std::vector<std::uint8_t>> gt, std::size_t classes) {
  if (pred.size() != gt.size()) {
    throw DimensionError("metrics: " + std::to_string(pred.size()) + " predicted maps for " +
                         std::to_string(gt.size()) + " ground-truth maps");
  }
  ConfusionMatrix cm(classes);
  for (std::size_t i = 0; i < gt.size(); ++i) cm.add(pred[i], gt[i]);
  return metrics_from_confusion(cm);
}

SegMetrics evaluate(const SegNet& net, const Dataset& data) {
  ConfusionMatrix cm(net.config().classes);
  for (const auto& s : data.samples) cm.add(net.predict(s.image), s.mask);
  return metrics_from_confusion(cm);
}

}  // namespace todsynth
