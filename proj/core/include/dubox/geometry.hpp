#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

namespace dubox {

enum class BoxUnit { kImagePixels, kFeatureUnits };

// Axis-aligned continuous rectangle; area is (x2-x1)*(y2-y1) with no +1 pixel
// convention. Boxes in feature units also carry the stride of their map, and
// two boxes can only be combined when unit and stride agree.
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
  BoxUnit unit = BoxUnit::kImagePixels;
  int stride = 1;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const;
  bool degenerate() const { return !(x2 > x1 && y2 > y1); }
  bool same_unit(const Box& other) const {
    return unit == other.unit && (unit == BoxUnit::kImagePixels || stride == other.stride);
  }

  friend bool operator==(const Box&, const Box&) = default;
};

// Validated construction: throws ContractError unless x1 <= x2 and y1 <= y2.
Box make_box(double x1, double y1, double x2, double y2, BoxUnit unit = BoxUnit::kImagePixels,
             int stride = 1);

// Divides image-pixel coordinates by `stride`.
Box to_feature_units(const Box& image_box, int stride);
Box to_image_pixels(const Box& feature_box);

std::string to_string(const Box& b);

struct GroundTruth {
  Box box;
  int class_id = 0;

  friend bool operator==(const GroundTruth&, const GroundTruth&) = default;
};

struct Detection {
  Box box;
  int class_id = 0;
  double score = 0;
  int detector_id = 1;

  friend bool operator==(const Detection&, const Detection&) = default;
};

// Intersection over union. 0 when either box is degenerate or they do not
// overlap. Throws ContractError if the unit tags differ.
double iou(const Box& a, const Box& b);

// Greedy class-wise suppression. Candidates are visited by descending score
// (ties: smaller class_id, then lexicographically smaller x1,y1,x2,y2, then
// input position); a candidate is kept iff its IoU with every kept detection
// of its class is below `iou_threshold`. Output is in visiting order.
std::vector<Detection> nms(std::span<const Detection> dets, double iou_threshold);

struct ClassCounts {
  std::size_t ground_truths = 0;
  std::size_t detections = 0;
  std::size_t true_positives = 0;
};

struct APReport {
  // Only classes with at least one ground truth appear here.
  std::map<int, double> per_class_ap;
  double map = 0;
  std::map<int, ClassCounts> counts;

  std::string to_text() const;
  std::string to_json() const;
};

// Detections and ground truths of a single image.
struct ImageEval {
  std::vector<Detection> detections;
  std::vector<GroundTruth> ground_truths;
};

// All-point interpolated average precision per class, over a set of images.
// Detections of a class are ranked by descending score (ties: image order,
// then input order); each is matched to the not-yet-matched ground truth of
// its class and image with the highest IoU >= iou_threshold, else counts as
// a false positive. mAP averages over classes that have ground truth.
APReport average_precision(std::span<const ImageEval> images, double iou_threshold = 0.5);

// Single-image convenience overload.
APReport average_precision(std::span<const Detection> dets, std::span<const GroundTruth> gts,
                           double iou_threshold = 0.5);

}  // namespace dubox
