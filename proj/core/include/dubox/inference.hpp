#pragma once

#include <array>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "dubox/dataio.hpp"
#include "dubox/encoding.hpp"
#include "dubox/geometry.hpp"
#include "dubox/network.hpp"

namespace dubox {

// Dense outputs of one detector for a single image, both in [0,1].
struct DetectorMaps {
  int num_classes = 0;
  int map_w = 0;
  int map_h = 0;
  std::vector<double> cls;   // [C, h, w]
  std::vector<double> bbox;  // [4, h, w]
};

using ImageMaps = std::array<DetectorMaps, 2>;

template <typename T>
DetectorMaps slice_output(const DetectorOutput<T>& out, std::size_t n);

// Maps a perfect model would produce: one-hot classes and the encoded offsets.
DetectorMaps oracle_maps(const TargetMaps& targets);

// One detection per (hook, class) with score >= score_threshold, decoded in
// image pixels; degenerate decodes are dropped. Order: hook row-major, then
// class.
std::vector<Detection> decode_detector(const DetectorMaps& maps, const HookGrid& grid,
                                       double score_threshold);

enum class EvalMode { kJoint, kDetector1, kDetector2 };
enum class MergeCalibration { kNone, kMinMax };

EvalMode parse_eval_mode(const std::string& text);  // joint | d1 | d2
std::string to_string(EvalMode mode);
MergeCalibration parse_merge_calibration(const std::string& text);  // none | minmax

// Union of both lists followed by class-wise NMS.
std::vector<Detection> joint_merge(std::span<const Detection> d1, std::span<const Detection> d2,
                                   double nms_threshold);

// Rescales scores to [0,1] by their min and max; a constant list maps to 1.
std::vector<Detection> minmax_calibrate(std::span<const Detection> dets);

struct InferenceConfig {
  double score_threshold = 0.05;
  double nms_threshold = 0.5;
  MergeCalibration calibration = MergeCalibration::kNone;
};

// Anything that maps images to dense detector outputs.
class Predictor {
 public:
  virtual ~Predictor() = default;
  virtual std::vector<ImageMaps> predict(std::span<const DatasetRecord* const> batch) const = 0;
};

class ModelPredictor final : public Predictor {
 public:
  explicit ModelPredictor(const DuBoxModel<float>& model, std::size_t batch_size = 16)
      : model_(model), batch_size_(batch_size) {}
  std::vector<ImageMaps> predict(std::span<const DatasetRecord* const> batch) const override;
  std::size_t batch_size() const { return batch_size_; }

 private:
  const DuBoxModel<float>& model_;
  std::size_t batch_size_;
};

// Returns the encoded targets of each record's own ground truth.
class OraclePredictor final : public Predictor {
 public:
  explicit OraclePredictor(EncoderConfig cfg) : cfg_(cfg) {}
  std::vector<ImageMaps> predict(std::span<const DatasetRecord* const> batch) const override;

 private:
  EncoderConfig cfg_;
};

// Decoded candidates of both detectors for one image, before any NMS.
struct ImagePredictions {
  std::string id;
  std::vector<Detection> d1;
  std::vector<Detection> d2;
};

std::vector<ImagePredictions> predict_dataset(const Predictor& predictor,
                                              std::span<const DatasetRecord> records,
                                              double score_threshold, std::size_t batch_size = 16);

// Final detections of one image under `mode`.
std::vector<Detection> finalize(const ImagePredictions& preds, EvalMode mode,
                                const InferenceConfig& cfg);

// Restricts an image to ground truths with shorter side < max_side.
// Detections that match (IoU >= iou_threshold) a same-class ground truth
// outside the subset are dropped rather than scored as false positives.
ImageEval small_object_view(const ImageEval& image, double max_side, double iou_threshold);

struct EvalOutput {
  APReport report;
  std::vector<ImageEval> images;  // final detections per image, record order
};

EvalOutput evaluate_predictions(std::span<const ImagePredictions> preds,
                                std::span<const DatasetRecord> records, EvalMode mode,
                                const InferenceConfig& cfg, double iou_threshold = 0.5);

EvalOutput evaluate(const Predictor& predictor, std::span<const DatasetRecord> records,
                    EvalMode mode, const InferenceConfig& cfg = {}, double iou_threshold = 0.5);

// AP over ground truths with shorter side < max_side (see small_object_view).
APReport small_object_ap(std::span<const ImageEval> images, double max_side = 24,
                         double iou_threshold = 0.5);

// {"id": str, "detections": [[x1,y1,x2,y2,class_id,score,detector_id], ...]}
std::string format_prediction(const std::string& id, std::span<const Detection> dets);
struct PredictionLine {
  std::string id;
  std::vector<Detection> detections;
};
PredictionLine parse_prediction(const std::string& line);

// Throws ContractError when the model does not fit the data (class count or
// input size).
void check_model_matches(const ModelConfig& model, int num_classes, int image_w, int image_h);

// Draws 1-px box outlines, in a per-class colour, onto a copy of a [3,H,W]
// image.
Tensor draw_detections(const Tensor& image, std::span<const Detection> dets);

}  // namespace dubox
