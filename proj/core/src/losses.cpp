#include "dubox/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dubox/ops.hpp"

namespace dubox {

void LossConfig::validate() const {
  if (!(epsilon > 0 && epsilon < 1)) throw ContractError("loss: epsilon must lie in (0,1)");
  if (ohem_ratio < 1) throw ContractError("loss: ohem_ratio must be >= 1");
  if (!(iou_floor > 0)) throw ContractError("loss: iou_floor must be positive");
  if (!(lambda_bbox >= 0) || !(lambda_cls >= 0)) {
    throw ContractError("loss: lambda weights must be non-negative");
  }
}

namespace {

template <typename T>
void check_prediction(const BasicTensor<T>& pred, std::span<const TargetMaps> targets,
                      std::size_t channels, const char* what) {
  if (pred.rank() != 4 || pred.dim(1) != channels || pred.dim(0) != targets.size()) {
    throw ShapeError(std::string(what) + ": prediction " + shape_to_string(pred.shape()) +
                     " does not match " + std::to_string(targets.size()) + " target maps");
  }
  for (const auto& t : targets) {
    if (static_cast<std::size_t>(t.map_h) != pred.dim(2) ||
        static_cast<std::size_t>(t.map_w) != pred.dim(3)) {
      throw ShapeError(std::string(what) + ": target map size differs from prediction");
    }
  }
}

// Hook-relative extents (left, right, top, bottom) in feature units.
struct Extents {
  double l, r, t, b;
};

struct HookIou {
  double inter, uni, value;
  double iw, ih;
};

HookIou hook_iou(const Extents& p, const Extents& g) {
  HookIou h{};
  h.iw = std::min(p.l, g.l) + std::min(p.r, g.r);
  h.ih = std::min(p.t, g.t) + std::min(p.b, g.b);
  h.inter = h.iw * h.ih;
  const double ap = (p.l + p.r) * (p.t + p.b);
  const double ag = (g.l + g.r) * (g.t + g.b);
  h.uni = ap + ag - h.inter;
  h.value = (h.uni > 0 && h.inter > 0) ? h.inter / h.uni : 0.0;
  return h;
}

template <typename T>
Extents pred_extents(const T* pred, std::size_t plane, std::size_t at, double w, double h) {
  return {static_cast<double>(pred[at]) * w, static_cast<double>(pred[plane + at]) * w,
          static_cast<double>(pred[2 * plane + at]) * h, static_cast<double>(pred[3 * plane + at]) * h};
}

Extents target_extents(const TargetMaps& t, std::size_t at) {
  const std::size_t plane = static_cast<std::size_t>(t.spatial_size());
  return {t.offsets[at] * t.map_w, t.offsets[plane + at] * t.map_w,
          t.offsets[2 * plane + at] * t.map_h, t.offsets[3 * plane + at] * t.map_h};
}

template <typename T>
BasicTensor<T> scalar_output(double value, const char* op) {
  BasicTensor<T> out = BasicTensor<T>::scalar(static_cast<T>(value));
  out.check_finite(op);
  return out;
}

}  // namespace

template <typename T>
IouMap hook_iou_map(const BasicTensor<T>& pred, std::span<const TargetMaps> targets) {
  check_prediction(pred, targets, 4, "hook_iou_map");
  const std::size_t plane = pred.dim(2) * pred.dim(3);
  IouMap iou(targets.size() * plane, 0.0);
  const T* p = pred.data().data();
  for (std::size_t n = 0; n < targets.size(); ++n) {
    const TargetMaps& t = targets[n];
    const T* pn = p + n * 4 * plane;
    for (std::size_t at = 0; at < plane; ++at) {
      if (!t.positive_mask[at]) continue;
      iou[n * plane + at] =
          hook_iou(pred_extents(pn, plane, at, t.map_w, t.map_h), target_extents(t, at)).value;
    }
  }
  return iou;
}

template <typename T>
BboxLossResult<T> iou_loss(const BasicTensor<T>& pred, std::span<const TargetMaps> targets,
                           const LossConfig& cfg) {
  check_prediction(pred, targets, 4, "iou_loss");
  const std::size_t plane = pred.dim(2) * pred.dim(3);
  BboxLossResult<T> res;
  res.iou.assign(targets.size() * plane, 0.0);

  // d(loss_hook)/d(pred channel) per contributing hook, scaled later by 1/count.
  std::vector<double> hook_grad(pred.numel(), 0.0);
  const T* p = pred.data().data();
  const double floor = cfg.iou_floor;
  double total = 0.0;
  for (std::size_t n = 0; n < targets.size(); ++n) {
    const TargetMaps& t = targets[n];
    const T* pn = p + n * 4 * plane;
    const double w = t.map_w;
    const double h = t.map_h;
    for (std::size_t at = 0; at < plane; ++at) {
      if (!t.positive_mask[at]) continue;
      const Extents pe = pred_extents(pn, plane, at, w, h);
      const Extents ge = target_extents(t, at);
      const HookIou hi = hook_iou(pe, ge);
      res.iou[n * plane + at] = hi.value;
      if (!t.bbox_weight[at]) continue;
      ++res.contributing_hooks;
      if (hi.value < floor) {
        total += -std::log(floor);
        continue;
      }
      total += -std::log(hi.value);
      // L = -ln I + ln U, U = Ap + Ag - I.
      const double inv_i = 1.0 / hi.inter;
      const double inv_u = 1.0 / hi.uni;
      const double dl_di = -inv_i - inv_u;
      const double d_ap_dhoriz = pe.t + pe.b;
      const double d_ap_dvert = pe.l + pe.r;
      const double di_dl = pe.l < ge.l ? hi.ih : 0.0;
      const double di_dr = pe.r < ge.r ? hi.ih : 0.0;
      const double di_dt = pe.t < ge.t ? hi.iw : 0.0;
      const double di_db = pe.b < ge.b ? hi.iw : 0.0;
      double* g = hook_grad.data() + n * 4 * plane;
      g[at] = (dl_di * di_dl + inv_u * d_ap_dhoriz) * w;
      g[plane + at] = (dl_di * di_dr + inv_u * d_ap_dhoriz) * w;
      g[2 * plane + at] = (dl_di * di_dt + inv_u * d_ap_dvert) * h;
      g[3 * plane + at] = (dl_di * di_db + inv_u * d_ap_dvert) * h;
    }
  }
  const double denom = static_cast<double>(std::max<std::size_t>(1, res.contributing_hooks));
  res.loss = scalar_output<T>(total / denom, "iou_loss");

  if (grad_enabled_for<T>({&pred})) {
    res.loss.set_requires_grad(true);
    active_tape<T>()->record("iou_loss", [pred, out = res.loss, hook_grad = std::move(hook_grad),
                                          denom]() mutable {
      if (!out.has_grad()) return;
      const double g = static_cast<double>(out.grad()[0]) / denom;
      auto dp = pred.mutable_grad();
      for (std::size_t i = 0; i < dp.size(); ++i) dp[i] += static_cast<T>(hook_grad[i] * g);
    });
  }
  return res;
}

template <typename T>
BboxLossResult<T> smooth_l1_loss(const BasicTensor<T>& pred, std::span<const TargetMaps> targets,
                                 const LossConfig&) {
  check_prediction(pred, targets, 4, "smooth_l1_loss");
  const std::size_t plane = pred.dim(2) * pred.dim(3);
  BboxLossResult<T> res;
  res.iou = hook_iou_map(pred, targets);
  std::vector<double> hook_grad(pred.numel(), 0.0);
  const T* p = pred.data().data();
  double total = 0.0;
  for (std::size_t n = 0; n < targets.size(); ++n) {
    const TargetMaps& t = targets[n];
    for (std::size_t at = 0; at < plane; ++at) {
      if (!t.positive_mask[at] || !t.bbox_weight[at]) continue;
      ++res.contributing_hooks;
      for (std::size_t c = 0; c < 4; ++c) {
        const std::size_t idx = (n * 4 + c) * plane + at;
        const double d = static_cast<double>(p[idx]) - t.offsets[c * plane + at];
        const double ad = std::abs(d);
        if (ad < 1.0) {
          total += 0.5 * d * d;
          hook_grad[idx] = d;
        } else {
          total += ad - 0.5;
          hook_grad[idx] = d > 0 ? 1.0 : -1.0;
        }
      }
    }
  }
  const double denom = static_cast<double>(std::max<std::size_t>(1, res.contributing_hooks));
  res.loss = scalar_output<T>(total / denom, "smooth_l1_loss");
  if (grad_enabled_for<T>({&pred})) {
    res.loss.set_requires_grad(true);
    active_tape<T>()->record("smooth_l1_loss", [pred, out = res.loss,
                                                hook_grad = std::move(hook_grad), denom]() mutable {
      if (!out.has_grad()) return;
      const double g = static_cast<double>(out.grad()[0]) / denom;
      auto dp = pred.mutable_grad();
      for (std::size_t i = 0; i < dp.size(); ++i) dp[i] += static_cast<T>(hook_grad[i] * g);
    });
  }
  return res;
}

namespace {

constexpr double kProbEps = 1e-7;

// Binary cross-entropy of probability p against target t, with p clamped
// away from {0,1}. `grad` receives d/dp evaluated at the clamped value, so a
// saturated prediction still gets pushed back.
double bce(double p, double t, double* grad) {
  const double pc = std::clamp(p, kProbEps, 1.0 - kProbEps);
  *grad = (pc - t) / (pc * (1.0 - pc));
  return -(t * std::log(pc) + (1.0 - t) * std::log(1.0 - pc));
}

}  // namespace

template <typename T>
ClsLossResult<T> crps_cls_loss(const BasicTensor<T>& pred, std::span<const TargetMaps> targets,
                               const IouMap& iou, const LossConfig& cfg) {
  if (targets.empty()) throw ShapeError("crps_cls_loss: empty batch");
  const std::size_t classes = static_cast<std::size_t>(targets.front().num_classes);
  check_prediction(pred, targets, classes, "crps_cls_loss");
  const std::size_t plane = pred.dim(2) * pred.dim(3);
  if (iou.size() != targets.size() * plane) throw ShapeError("crps_cls_loss: IoU map size mismatch");

  ClsLossResult<T> res;
  const T* p = pred.data().data();
  std::vector<double> grad(pred.numel(), 0.0);
  std::vector<double> dp(classes);

  double positive_sum = 0.0;
  struct Negative {
    double loss;
    std::size_t flat;
  };
  std::vector<Negative> negatives;
  for (std::size_t n = 0; n < targets.size(); ++n) {
    const TargetMaps& t = targets[n];
    for (std::size_t at = 0; at < plane; ++at) {
      const std::size_t flat = n * plane + at;
      if (t.positive_mask[at]) {
        if (!(iou[flat] > cfg.epsilon)) {
          ++res.gated_out;
          continue;
        }
        ++res.positives;
        for (std::size_t c = 0; c < classes; ++c) {
          const std::size_t idx = (n * classes + c) * plane + at;
          positive_sum += bce(static_cast<double>(p[idx]), t.cls[c * plane + at], &grad[idx]);
        }
      } else {
        double l = 0.0;
        for (std::size_t c = 0; c < classes; ++c) {
          const std::size_t idx = (n * classes + c) * plane + at;
          l += bce(static_cast<double>(p[idx]), 0.0, &dp[c]);
        }
        negatives.push_back({l, flat});
      }
    }
  }

  const std::size_t want = static_cast<std::size_t>(cfg.ohem_ratio) * res.positives;
  const std::size_t keep = std::min(want, negatives.size());
  std::partial_sort(negatives.begin(), negatives.begin() + static_cast<std::ptrdiff_t>(keep),
                    negatives.end(), [](const Negative& a, const Negative& b) {
                      if (a.loss != b.loss) return a.loss > b.loss;
                      return a.flat < b.flat;
                    });
  double negative_sum = 0.0;
  for (std::size_t k = 0; k < keep; ++k) {
    const std::size_t flat = negatives[k].flat;
    negative_sum += negatives[k].loss;
    res.kept_negative_hooks.push_back(flat);
    const std::size_t n = flat / plane;
    const std::size_t at = flat % plane;
    for (std::size_t c = 0; c < classes; ++c) {
      const std::size_t idx = (n * classes + c) * plane + at;
      bce(static_cast<double>(p[idx]), 0.0, &grad[idx]);
    }
  }
  res.mined_negatives = keep;

  const double denom = static_cast<double>(std::max<std::size_t>(1, res.positives + keep));
  res.loss = scalar_output<T>((positive_sum + negative_sum) / denom, "crps_cls_loss");
  if (grad_enabled_for<T>({&pred})) {
    res.loss.set_requires_grad(true);
    active_tape<T>()->record("crps_cls_loss",
                             [pred, out = res.loss, grad = std::move(grad), denom]() mutable {
                               if (!out.has_grad()) return;
                               const double g = static_cast<double>(out.grad()[0]) / denom;
                               auto d = pred.mutable_grad();
                               for (std::size_t i = 0; i < d.size(); ++i) {
                                 d[i] += static_cast<T>(grad[i] * g);
                               }
                             });
  }
  return res;
}

double total_loss(const std::array<std::array<double, 2>, 2>& per_detector, const LossConfig& cfg) {
  double total = 0.0;
  for (const auto& d : per_detector) total += cfg.lambda_bbox * d[0] + cfg.lambda_cls * d[1];
  return total;
}

template <typename T>
CombinedLoss<T> detection_loss(const std::array<DetectorPrediction<T>, 2>& preds,
                               const std::array<std::vector<TargetMaps>, 2>& targets,
                               const LossConfig& cfg) {
  cfg.validate();
  CombinedLoss<T> out;
  BasicTensor<T> total;
  for (std::size_t b = 0; b < 2; ++b) {
    BboxLossResult<T> bbox = cfg.bbox_loss == BboxLossKind::kIou
                                 ? iou_loss(preds[b].bbox, targets[b], cfg)
                                 : smooth_l1_loss(preds[b].bbox, targets[b], cfg);
    ClsLossResult<T> cls = crps_cls_loss(preds[b].cls, targets[b], bbox.iou, cfg);

    DetectorLossStats& s = out.breakdown.detectors[b];
    s.bbox_loss = static_cast<double>(bbox.loss.item());
    s.cls_loss = static_cast<double>(cls.loss.item());
    s.positives = cls.positives;
    s.mined_negatives = cls.mined_negatives;
    s.gated_out = cls.gated_out;
    s.iou = std::move(bbox.iou);

    BasicTensor<T> term = ops::add(ops::scale(bbox.loss, static_cast<T>(cfg.lambda_bbox)),
                                   ops::scale(cls.loss, static_cast<T>(cfg.lambda_cls)));
    total = total.defined() ? ops::add(total, term) : term;
  }
  out.total = total;
  out.breakdown.total = static_cast<double>(total.item());
  return out;
}

#define DUBOX_INSTANTIATE(T)                                                                     \
  template IouMap hook_iou_map(const BasicTensor<T>&, std::span<const TargetMaps>);              \
  template BboxLossResult<T> iou_loss(const BasicTensor<T>&, std::span<const TargetMaps>,        \
                                      const LossConfig&);                                        \
  template BboxLossResult<T> smooth_l1_loss(const BasicTensor<T>&, std::span<const TargetMaps>,  \
                                            const LossConfig&);                                  \
  template ClsLossResult<T> crps_cls_loss(const BasicTensor<T>&, std::span<const TargetMaps>,    \
                                          const IouMap&, const LossConfig&);                     \
  template CombinedLoss<T> detection_loss(const std::array<DetectorPrediction<T>, 2>&,           \
                                          const std::array<std::vector<TargetMaps>, 2>&,         \
                                          const LossConfig&);

DUBOX_INSTANTIATE(float)
DUBOX_INSTANTIATE(double)

#undef DUBOX_INSTANTIATE

}  // namespace dubox
