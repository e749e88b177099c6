#include "dubox/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <tuple>

#include <nlohmann/json.hpp>

#include "dubox/errors.hpp"

namespace dubox {

double Box::area() const {
  if (degenerate()) return 0.0;
  return (x2 - x1) * (y2 - y1);
}

Box make_box(double x1, double y1, double x2, double y2, BoxUnit unit, int stride) {
  if (!(x1 <= x2) || !(y1 <= y2)) {
    throw ContractError("box corners out of order: " + to_string(Box{x1, y1, x2, y2}));
  }
  if (unit == BoxUnit::kFeatureUnits && stride <= 0) {
    throw ContractError("feature-unit box needs a positive stride");
  }
  return Box{x1, y1, x2, y2, unit, unit == BoxUnit::kImagePixels ? 1 : stride};
}

Box to_feature_units(const Box& b, int stride) {
  if (b.unit != BoxUnit::kImagePixels) throw ContractError("box is already in feature units");
  const double s = stride;
  return Box{b.x1 / s, b.y1 / s, b.x2 / s, b.y2 / s, BoxUnit::kFeatureUnits, stride};
}

Box to_image_pixels(const Box& b) {
  if (b.unit != BoxUnit::kFeatureUnits) throw ContractError("box is already in image pixels");
  const double s = b.stride;
  return Box{b.x1 * s, b.y1 * s, b.x2 * s, b.y2 * s, BoxUnit::kImagePixels, 1};
}

std::string to_string(const Box& b) {
  std::ostringstream os;
  os << '(' << b.x1 << ',' << b.y1 << ',' << b.x2 << ',' << b.y2 << ')';
  return os.str();
}

double iou(const Box& a, const Box& b) {
  if (!a.same_unit(b)) throw ContractError("iou: boxes carry different unit tags");
  if (a.degenerate() || b.degenerate()) return 0.0;
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

std::vector<Detection> nms(std::span<const Detection> dets, double iou_threshold) {
  if (!(iou_threshold >= 0.0 && iou_threshold <= 1.0)) {
    throw ContractError("nms: threshold must lie in [0,1]");
  }
  for (std::size_t i = 1; i < dets.size(); ++i) {
    if (!dets[i].box.same_unit(dets[0].box)) throw ContractError("nms: mixed unit tags");
  }
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const Detection& da = dets[a];
    const Detection& db = dets[b];
    if (da.score != db.score) return da.score > db.score;
    return std::tie(da.class_id, da.box.x1, da.box.y1, da.box.x2, da.box.y2, a) <
           std::tie(db.class_id, db.box.x1, db.box.y1, db.box.x2, db.box.y2, b);
  });

  std::vector<Detection> kept;
  for (std::size_t idx : order) {
    const Detection& cand = dets[idx];
    bool suppressed = false;
    for (const Detection& k : kept) {
      if (k.class_id == cand.class_id && iou(k.box, cand.box) >= iou_threshold) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(cand);
  }
  return kept;
}

namespace {

struct RankedDetection {
  double score;
  std::size_t image;
  std::size_t index;
};

// Area under the precision/recall curve after making precision monotone
// non-increasing in recall.
double all_point_ap(const std::vector<double>& recall, const std::vector<double>& precision) {
  std::vector<double> mrec{0.0};
  std::vector<double> mpre{0.0};
  mrec.insert(mrec.end(), recall.begin(), recall.end());
  mpre.insert(mpre.end(), precision.begin(), precision.end());
  mrec.push_back(1.0);
  mpre.push_back(0.0);
  for (std::size_t i = mpre.size() - 1; i > 0; --i) mpre[i - 1] = std::max(mpre[i - 1], mpre[i]);
  double ap = 0.0;
  for (std::size_t i = 1; i < mrec.size(); ++i) {
    if (mrec[i] != mrec[i - 1]) ap += (mrec[i] - mrec[i - 1]) * mpre[i];
  }
  return ap;
}

}  // namespace

APReport average_precision(std::span<const ImageEval> images, double iou_threshold) {
  APReport report;
  std::map<int, std::vector<RankedDetection>> by_class;
  for (std::size_t im = 0; im < images.size(); ++im) {
    for (const auto& gt : images[im].ground_truths) report.counts[gt.class_id].ground_truths++;
    const auto& dets = images[im].detections;
    for (std::size_t k = 0; k < dets.size(); ++k) {
      by_class[dets[k].class_id].push_back({dets[k].score, im, k});
      report.counts[dets[k].class_id].detections++;
    }
  }

  for (auto& [cls, counts] : report.counts) {
    if (counts.ground_truths == 0) continue;
    auto& ranked = by_class[cls];
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
      if (a.score != b.score) return a.score > b.score;
      return std::tie(a.image, a.index) < std::tie(b.image, b.index);
    });

    std::vector<std::vector<bool>> matched(images.size());
    for (std::size_t im = 0; im < images.size(); ++im) {
      matched[im].assign(images[im].ground_truths.size(), false);
    }
    std::vector<double> precision, recall;
    std::size_t tp = 0;
    for (std::size_t r = 0; r < ranked.size(); ++r) {
      const auto& rd = ranked[r];
      const Detection& det = images[rd.image].detections[rd.index];
      const auto& gts = images[rd.image].ground_truths;
      double best = -1.0;
      std::size_t best_gt = gts.size();
      for (std::size_t g = 0; g < gts.size(); ++g) {
        if (gts[g].class_id != cls || matched[rd.image][g]) continue;
        const double v = iou(det.box, gts[g].box);
        if (v >= iou_threshold && v > best) {
          best = v;
          best_gt = g;
        }
      }
      if (best_gt < gts.size()) {
        matched[rd.image][best_gt] = true;
        ++tp;
      }
      precision.push_back(static_cast<double>(tp) / static_cast<double>(r + 1));
      recall.push_back(static_cast<double>(tp) / static_cast<double>(counts.ground_truths));
    }
    counts.true_positives = tp;
    report.per_class_ap[cls] = all_point_ap(recall, precision);
  }

  if (!report.per_class_ap.empty()) {
    double total = 0.0;
    for (const auto& [cls, ap] : report.per_class_ap) total += ap;
    report.map = total / static_cast<double>(report.per_class_ap.size());
  }
  return report;
}

APReport average_precision(std::span<const Detection> dets, std::span<const GroundTruth> gts,
                           double iou_threshold) {
  ImageEval one{{dets.begin(), dets.end()}, {gts.begin(), gts.end()}};
  return average_precision(std::span<const ImageEval>(&one, 1), iou_threshold);
}

std::string APReport::to_text() const {
  std::ostringstream os;
  os << std::left << std::setw(8) << "class" << std::right << std::setw(10) << "AP"
     << std::setw(8) << "gt" << std::setw(8) << "det" << std::setw(8) << "tp" << '\n';
  os << std::fixed << std::setprecision(4);
  for (const auto& [cls, c] : counts) {
    os << std::left << std::setw(8) << cls << std::right << std::setw(10);
    auto it = per_class_ap.find(cls);
    if (it != per_class_ap.end()) {
      os << it->second;
    } else {
      os << "-";
    }
    os << std::setw(8) << c.ground_truths << std::setw(8) << c.detections << std::setw(8)
       << c.true_positives << '\n';
  }
  os << std::left << std::setw(8) << "mAP" << std::right << std::setw(10) << map << '\n';
  return os.str();
}

std::string APReport::to_json() const {
  nlohmann::ordered_json j;
  j["map"] = map;
  nlohmann::ordered_json classes = nlohmann::ordered_json::array();
  for (const auto& [cls, c] : counts) {
    nlohmann::ordered_json row;
    row["class_id"] = cls;
    auto it = per_class_ap.find(cls);
    row["ap"] = it != per_class_ap.end() ? nlohmann::ordered_json(it->second) : nlohmann::ordered_json();
    row["ground_truths"] = c.ground_truths;
    row["detections"] = c.detections;
    row["true_positives"] = c.true_positives;
    classes.push_back(row);
  }
  j["classes"] = classes;
  return j.dump();
}

}  // namespace dubox
