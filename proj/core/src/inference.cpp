#include "dubox/inference.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

namespace dubox {

template <typename T>
DetectorMaps slice_output(const DetectorOutput<T>& out, std::size_t n) {
  DetectorMaps m;
  m.num_classes = static_cast<int>(out.cls.dim(1));
  m.map_h = static_cast<int>(out.cls.dim(2));
  m.map_w = static_cast<int>(out.cls.dim(3));
  const std::size_t hw = static_cast<std::size_t>(m.map_w) * m.map_h;
  const std::size_t C = static_cast<std::size_t>(m.num_classes);
  auto cls = out.cls.data();
  auto box = out.bbox.data();
  m.cls.assign(cls.begin() + static_cast<std::ptrdiff_t>(n * C * hw),
               cls.begin() + static_cast<std::ptrdiff_t>((n + 1) * C * hw));
  m.bbox.assign(box.begin() + static_cast<std::ptrdiff_t>(n * 4 * hw),
                box.begin() + static_cast<std::ptrdiff_t>((n + 1) * 4 * hw));
  return m;
}

template DetectorMaps slice_output<float>(const DetectorOutput<float>&, std::size_t);
template DetectorMaps slice_output<double>(const DetectorOutput<double>&, std::size_t);

DetectorMaps oracle_maps(const TargetMaps& t) {
  DetectorMaps m;
  m.num_classes = t.num_classes;
  m.map_w = t.map_w;
  m.map_h = t.map_h;
  m.cls.assign(t.cls.begin(), t.cls.end());
  m.bbox = t.offsets;
  return m;
}

std::vector<Detection> decode_detector(const DetectorMaps& maps, const HookGrid& grid,
                                       double score_threshold) {
  if (maps.map_w != grid.map_w || maps.map_h != grid.map_h) {
    throw ShapeError("decode_detector: maps do not match the hook grid");
  }
  const std::size_t hw = static_cast<std::size_t>(grid.size());
  std::vector<Detection> out;
  for (int j = 0; j < grid.map_h; ++j) {
    for (int i = 0; i < grid.map_w; ++i) {
      const std::size_t at = static_cast<std::size_t>(j) * grid.map_w + i;
      std::optional<Box> box;
      bool decoded = false;
      for (int c = 0; c < maps.num_classes; ++c) {
        const double score = maps.cls[c * hw + at];
        if (!(score >= score_threshold)) continue;
        if (!decoded) {
          const Offsets off{maps.bbox[at], maps.bbox[hw + at], maps.bbox[2 * hw + at],
                            maps.bbox[3 * hw + at]};
          box = try_decode_offsets(i, j, off, grid);
          decoded = true;
        }
        if (!box) break;
        out.push_back({*box, c, score, grid.detector_id});
      }
    }
  }
  return out;
}

EvalMode parse_eval_mode(const std::string& text) {
  if (text == "joint") return EvalMode::kJoint;
  if (text == "d1") return EvalMode::kDetector1;
  if (text == "d2") return EvalMode::kDetector2;
  throw ContractError("unknown eval mode '" + text + "' (joint|d1|d2)");
}

std::string to_string(EvalMode mode) {
  switch (mode) {
    case EvalMode::kJoint: return "joint";
    case EvalMode::kDetector1: return "d1";
    case EvalMode::kDetector2: return "d2";
  }
  return "?";
}

MergeCalibration parse_merge_calibration(const std::string& text) {
  if (text == "none") return MergeCalibration::kNone;
  if (text == "minmax") return MergeCalibration::kMinMax;
  throw ContractError("unknown merge calibration '" + text + "' (none|minmax)");
}

std::vector<Detection> joint_merge(std::span<const Detection> d1, std::span<const Detection> d2,
                                   double nms_threshold) {
  std::vector<Detection> all(d1.begin(), d1.end());
  all.insert(all.end(), d2.begin(), d2.end());
  return nms(all, nms_threshold);
}

std::vector<Detection> minmax_calibrate(std::span<const Detection> dets) {
  std::vector<Detection> out(dets.begin(), dets.end());
  if (out.empty()) return out;
  auto [lo, hi] = std::minmax_element(out.begin(), out.end(),
                                      [](const auto& a, const auto& b) { return a.score < b.score; });
  const double mn = lo->score, mx = hi->score;
  for (auto& d : out) d.score = mx > mn ? (d.score - mn) / (mx - mn) : 1.0;
  return out;
}

namespace {

HookGrid grid_for(int detector_id, const DatasetRecord& rec) {
  return HookGrid::for_detector(detector_id, rec.width(), rec.height());
}

}  // namespace

std::vector<ImageMaps> ModelPredictor::predict(std::span<const DatasetRecord* const> batch) const {
  NoGradScope<float> no_grad;
  const Tensor images = stack_images<float>(batch);
  const ForwardResult<float> out = model_.forward(images);
  std::vector<ImageMaps> maps(batch.size());
  for (std::size_t n = 0; n < batch.size(); ++n) {
    maps[n][0] = slice_output(out.d1, n);
    maps[n][1] = slice_output(out.d2, n);
  }
  return maps;
}

std::vector<ImageMaps> OraclePredictor::predict(std::span<const DatasetRecord* const> batch) const {
  std::vector<ImageMaps> maps(batch.size());
  for (std::size_t n = 0; n < batch.size(); ++n) {
    for (int d = 1; d <= 2; ++d) {
      maps[n][static_cast<std::size_t>(d - 1)] =
          oracle_maps(encode_targets(batch[n]->gts, grid_for(d, *batch[n]), cfg_));
    }
  }
  return maps;
}

std::vector<ImagePredictions> predict_dataset(const Predictor& predictor,
                                              std::span<const DatasetRecord> records,
                                              double score_threshold, std::size_t batch_size) {
  if (batch_size == 0) throw ContractError("predict_dataset: batch_size must be positive");
  std::vector<ImagePredictions> out;
  out.reserve(records.size());
  for (std::size_t start = 0; start < records.size(); start += batch_size) {
    const std::size_t end = std::min(records.size(), start + batch_size);
    std::vector<const DatasetRecord*> batch;
    for (std::size_t k = start; k < end; ++k) batch.push_back(&records[k]);
    const std::vector<ImageMaps> maps = predictor.predict(batch);
    for (std::size_t k = 0; k < batch.size(); ++k) {
      ImagePredictions p;
      p.id = batch[k]->id;
      p.d1 = decode_detector(maps[k][0], grid_for(1, *batch[k]), score_threshold);
      p.d2 = decode_detector(maps[k][1], grid_for(2, *batch[k]), score_threshold);
      out.push_back(std::move(p));
    }
  }
  return out;
}

std::vector<Detection> finalize(const ImagePredictions& preds, EvalMode mode,
                                const InferenceConfig& cfg) {
  auto above = [&](std::vector<Detection> dets) {
    std::erase_if(dets, [&](const Detection& d) { return !(d.score >= cfg.score_threshold); });
    return dets;
  };
  switch (mode) {
    case EvalMode::kDetector1: return nms(above(preds.d1), cfg.nms_threshold);
    case EvalMode::kDetector2: return nms(above(preds.d2), cfg.nms_threshold);
    case EvalMode::kJoint:
      if (cfg.calibration == MergeCalibration::kMinMax) {
        return joint_merge(above(minmax_calibrate(preds.d1)), above(minmax_calibrate(preds.d2)),
                           cfg.nms_threshold);
      }
      return joint_merge(above(preds.d1), above(preds.d2), cfg.nms_threshold);
  }
  return {};
}

ImageEval small_object_view(const ImageEval& image, double max_side, double iou_threshold) {
  ImageEval out;
  std::vector<GroundTruth> others;
  for (const auto& g : image.ground_truths) {
    if (std::min(g.box.width(), g.box.height()) < max_side) {
      out.ground_truths.push_back(g);
    } else {
      others.push_back(g);
    }
  }
  for (const auto& d : image.detections) {
    const bool explained = std::any_of(others.begin(), others.end(), [&](const GroundTruth& g) {
      return g.class_id == d.class_id && iou(g.box, d.box) >= iou_threshold;
    });
    if (!explained) out.detections.push_back(d);
  }
  return out;
}

EvalOutput evaluate_predictions(std::span<const ImagePredictions> preds,
                                std::span<const DatasetRecord> records, EvalMode mode,
                                const InferenceConfig& cfg, double iou_threshold) {
  if (preds.size() != records.size()) {
    throw ContractError("evaluate: predictions and records differ in count");
  }
  EvalOutput out;
  out.images.reserve(records.size());
  for (std::size_t k = 0; k < records.size(); ++k) {
    if (preds[k].id != records[k].id) throw ContractError("evaluate: prediction id mismatch");
    out.images.push_back({finalize(preds[k], mode, cfg), records[k].gts});
  }
  out.report = average_precision(out.images, iou_threshold);
  return out;
}

EvalOutput evaluate(const Predictor& predictor, std::span<const DatasetRecord> records,
                    EvalMode mode, const InferenceConfig& cfg, double iou_threshold) {
  const auto preds = predict_dataset(predictor, records, cfg.score_threshold);
  return evaluate_predictions(preds, records, mode, cfg, iou_threshold);
}

APReport small_object_ap(std::span<const ImageEval> images, double max_side,
                         double iou_threshold) {
  std::vector<ImageEval> view;
  view.reserve(images.size());
  for (const auto& im : images) view.push_back(small_object_view(im, max_side, iou_threshold));
  return average_precision(view, iou_threshold);
}

std::string format_prediction(const std::string& id, std::span<const Detection> dets) {
  nlohmann::ordered_json j;
  j["id"] = id;
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const auto& d : dets) {
    arr.push_back({d.box.x1, d.box.y1, d.box.x2, d.box.y2, d.class_id, d.score, d.detector_id});
  }
  j["detections"] = arr;
  return j.dump();
}

PredictionLine parse_prediction(const std::string& line) {
  PredictionLine out;
  try {
    const auto j = nlohmann::json::parse(line);
    out.id = j.at("id").get<std::string>();
    for (const auto& d : j.at("detections")) {
      if (!d.is_array() || d.size() != 7) throw FormatError("detection entry must have 7 numbers", 0);
      out.detections.push_back({make_box(d[0].get<double>(), d[1].get<double>(), d[2].get<double>(),
                                         d[3].get<double>()),
                                d[4].get<int>(), d[5].get<double>(), d[6].get<int>()});
    }
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("prediction line is not valid JSON: ") + e.what(), e.byte);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed prediction line: ") + e.what(), 0);
  }
  return out;
}

void check_model_matches(const ModelConfig& model, int num_classes, int image_w, int image_h) {
  if (model.num_classes != num_classes) {
    throw ContractError("checkpoint has " + std::to_string(model.num_classes) +
                        " classes, data has " + std::to_string(num_classes));
  }
  if (model.input_w != image_w || model.input_h != image_h) {
    throw ContractError("checkpoint expects " + std::to_string(model.input_w) + "x" +
                        std::to_string(model.input_h) + " images, data is " +
                        std::to_string(image_w) + "x" + std::to_string(image_h));
  }
}

Tensor draw_detections(const Tensor& image, std::span<const Detection> dets) {
  if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("draw_detections: need a [3,H,W] image");
  static constexpr float kPalette[3][3] = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
  Tensor out(image.shape(), std::vector<float>(image.data().begin(), image.data().end()));
  const int H = static_cast<int>(image.dim(1)), W = static_cast<int>(image.dim(2));
  auto px = out.data();
  auto paint = [&](int x, int y, const float* rgb) {
    if (x < 0 || y < 0 || x >= W || y >= H) return;
    for (int c = 0; c < 3; ++c) px[(static_cast<std::size_t>(c) * H + y) * W + x] = rgb[c];
  };
  for (const auto& d : dets) {
    const float* rgb = kPalette[static_cast<std::size_t>(d.class_id) % 3];
    const int x1 = static_cast<int>(std::floor(d.box.x1)), y1 = static_cast<int>(std::floor(d.box.y1));
    const int x2 = static_cast<int>(std::ceil(d.box.x2)) - 1, y2 = static_cast<int>(std::ceil(d.box.y2)) - 1;
    for (int x = x1; x <= x2; ++x) {
      paint(x, y1, rgb);
      paint(x, y2, rgb);
    }
    for (int y = y1; y <= y2; ++y) {
      paint(x1, y, rgb);
      paint(x2, y, rgb);
    }
  }
  return out;
}

}  // namespace dubox
