#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tau/tensor.hpp"

namespace tau {

struct LossConfig {
  double alpha = 0.5;  // BCE weight
  double beta = 0.5;   // Dice weight
  double epsilon = 1e-6;
  double clamp_eps = 1e-7;
  // 2 gives the canonical overlap score (perfect prediction -> loss 0);
  // 1 keeps the additive-denominator form that bottoms out at 0.5.
  double dice_numerator_factor = 2.0;
};

// Mean over all elements of -[y log p + (1-y) log(1-p)], with p clamped into
// [clamp_eps, 1-clamp_eps] before the logs. In checked mode, y must be
// strictly binary.
template <typename T>
Tensor<T> bce_loss(const Tensor<T>& p, const Tensor<T>& y, const LossConfig& cfg = {});

// 1 - (factor * sum(y*p) + eps) / (sum(y) + sum(p) + eps); the smoothing term
// makes empty-vs-empty resolve to 0 rather than 0/0.
template <typename T>
Tensor<T> dice_loss(const Tensor<T>& p, const Tensor<T>& y, const LossConfig& cfg = {});

// alpha * bce + beta * dice.
template <typename T>
Tensor<T> combined_loss(const Tensor<T>& p, const Tensor<T>& y, const LossConfig& cfg = {});

// 1 where p >= threshold, else 0 (ties count as foreground).
template <typename T>
Tensor<T> binarize(const Tensor<T>& p, double threshold = 0.5);

struct ConfusionCounts {
  int64_t tp = 0, tn = 0, fp = 0, fn = 0;
  int64_t total() const { return tp + tn + fp + fn; }
};

// Exact pixel counts; both inputs must be strictly binary and equal-shaped.
template <typename T>
ConfusionCounts confusion(const Tensor<T>& mask, const Tensor<T>& y);

struct MetricsReport {
  double dice = 0.0, iou = 0.0, acc = 0.0, rec = 0.0, pre = 0.0;
};

// Dice = 2TP/(2TP+FP+FN), IoU = TP/(TP+FP+FN), ACC = (TP+TN)/total,
// REC = TP/(TP+FN), PRE = TP/(TP+FP). A zero denominator scores 1.0 in the
// empty-vs-empty case (nothing predicted, nothing to find) and 0.0 otherwise.
MetricsReport metrics(const ConfusionCounts& c);

struct SampleMetrics {
  std::string id;
  ConfusionCounts counts;
  MetricsReport report;
};

// Macro average: the unweighted mean of each per-image metric.
MetricsReport aggregate_metrics(const std::vector<SampleMetrics>& rows);

// One row per image plus a final macro-averaged "aggregate" row with summed
// counts. Columns: id,tp,tn,fp,fn,dice,iou,acc,rec,pre. The JSON mirror holds
// the same rows under "samples"/"aggregate" and labels the averaging mode.
void write_metrics_csv(const std::string& path, const std::vector<SampleMetrics>& rows);
void write_metrics_json(const std::string& path, const std::vector<SampleMetrics>& rows);

}  // namespace tau
