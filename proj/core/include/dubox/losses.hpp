#pragma once

#include <array>
#include <span>
#include <vector>

#include "dubox/encoding.hpp"
#include "dubox/tensor.hpp"

namespace dubox {

enum class BboxLossKind { kIou, kSmoothL1 };

struct LossConfig {
  double epsilon = 0.5;  // IoU gate threshold (strict >)
  double lambda_bbox = 1.0;
  double lambda_cls = 1.0;
  int ohem_ratio = 3;  // negatives kept per gate-passing positive
  double iou_floor = 1e-6;
  BboxLossKind bbox_loss = BboxLossKind::kIou;

  void validate() const;
};

// Per-hook IoU between the predicted and target boxes at every positive hook
// of a batch, laid out [N, h, w]; zero at non-positive hooks.
using IouMap = std::vector<double>;

template <typename T>
struct BboxLossResult {
  BasicTensor<T> loss;  // shape [1]
  IouMap iou;
  std::size_t contributing_hooks = 0;
};

// Mean of -ln(max(IoU, iou_floor)) over positive hooks with bbox_weight 1.
// pred_offsets [N,4,h,w] are sigmoid outputs; targets holds one TargetMaps
// per batch element. Boxes are compared relative to their hook in feature
// units, so IoU needs no clamping. Gradient is closed-form and zero where
// the floor is active.
template <typename T>
BboxLossResult<T> iou_loss(const BasicTensor<T>& pred_offsets, std::span<const TargetMaps> targets,
                           const LossConfig& cfg);

// Ablation baseline: elementwise smooth-L1 (beta 1) on the four normalised
// offset channels, summed over channels and averaged over positive hooks with
// bbox_weight 1. The IoU map is still filled in for the classification gate.
template <typename T>
BboxLossResult<T> smooth_l1_loss(const BasicTensor<T>& pred_offsets,
                                 std::span<const TargetMaps> targets, const LossConfig& cfg);

// IoU map only (no gradient), same layout as BboxLossResult::iou.
template <typename T>
IouMap hook_iou_map(const BasicTensor<T>& pred_offsets, std::span<const TargetMaps> targets);

template <typename T>
struct ClsLossResult {
  BasicTensor<T> loss;  // shape [1]
  std::size_t positives = 0;  // gate-passing positive hooks (N)
  std::size_t mined_negatives = 0;
  std::size_t gated_out = 0;
  std::vector<std::size_t> kept_negative_hooks;  // flat [N,h,w] indices, by rank
};

// IoU-gated classification loss with hard negative mining.
//
// A positive hook contributes its binary cross-entropy over all C channels
// only when its IoU is strictly above epsilon; otherwise it is ignored. Hooks
// outside every positive range are negatives (all-zero target); they are
// ranked by loss (ties: lower flat index first) and the top
// min(ohem_ratio * N, available) are kept. The sum of kept terms is divided
// by max(1, N + kept). Mining is pooled over the whole batch.
template <typename T>
ClsLossResult<T> crps_cls_loss(const BasicTensor<T>& pred_cls, std::span<const TargetMaps> targets,
                               const IouMap& iou, const LossConfig& cfg);

struct DetectorLossStats {
  double bbox_loss = 0;
  double cls_loss = 0;
  std::size_t positives = 0;
  std::size_t mined_negatives = 0;
  std::size_t gated_out = 0;
  IouMap iou;
};

struct LossBreakdown {
  double total = 0;
  std::array<DetectorLossStats, 2> detectors;
};

// sum over detectors of lambda_bbox * bbox_b + lambda_cls * cls_b.
double total_loss(const std::array<std::array<double, 2>, 2>& per_detector, const LossConfig& cfg);

template <typename T>
struct DetectorPrediction {
  BasicTensor<T> cls;   // [N,C,h,w] in [0,1]
  BasicTensor<T> bbox;  // [N,4,h,w] in [0,1]
};

template <typename T>
struct CombinedLoss {
  BasicTensor<T> total;  // differentiable scalar
  LossBreakdown breakdown;
};

// Full two-detector objective for a batch.
template <typename T>
CombinedLoss<T> detection_loss(const std::array<DetectorPrediction<T>, 2>& preds,
                               const std::array<std::vector<TargetMaps>, 2>& targets,
                               const LossConfig& cfg);

}  // namespace dubox
