#include "dubox/config.hpp"

#include <fstream>
#include <functional>
#include <limits>
#include <set>

namespace dubox {

namespace {

// Reads one JSON object, remembering which keys were consumed so leftovers
// can be reported as unknown.
class Section {
 public:
  Section(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
  }

  std::string key_path(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const nlohmann::json* find(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void number(const std::string& key, double& out) {
    if (const auto* v = find(key)) {
      if (!v->is_number()) throw ConfigError(key_path(key), "expected a number");
      out = v->get<double>();
    }
  }

  template <typename I>
  void integer(const std::string& key, I& out) {
    if (const auto* v = find(key)) {
      if (!v->is_number_integer()) throw ConfigError(key_path(key), "expected an integer");
      if constexpr (std::is_unsigned_v<I>) {
        if (v->is_number_unsigned() || v->get<std::int64_t>() >= 0) {
          out = v->get<I>();
          return;
        }
        throw ConfigError(key_path(key), "expected a non-negative integer");
      } else {
        const auto x = v->get<std::int64_t>();
        if (x < std::numeric_limits<I>::min() || x > std::numeric_limits<I>::max()) {
          throw ConfigError(key_path(key), "integer out of range");
        }
        out = static_cast<I>(x);
      }
    }
  }

  void string(const std::string& key, std::string& out) {
    if (const auto* v = find(key)) {
      if (!v->is_string()) throw ConfigError(key_path(key), "expected a string");
      out = v->get<std::string>();
    }
  }

  void int_list(const std::string& key, std::vector<int>& out) {
    if (const auto* v = find(key)) {
      if (!v->is_array()) throw ConfigError(key_path(key), "expected an array of integers");
      std::vector<int> vals;
      for (std::size_t k = 0; k < v->size(); ++k) {
        if (!(*v)[k].is_number_integer()) {
          throw ConfigError(key_path(key) + "[" + std::to_string(k) + "]", "expected an integer");
        }
        vals.push_back((*v)[k].get<int>());
      }
      out = std::move(vals);
    }
  }

  void object(const std::string& key, const std::function<void(Section&)>& fn) {
    if (const auto* v = find(key)) {
      Section sub(*v, key_path(key));
      fn(sub);
      sub.finish();
    }
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(key_path(it.key()), "unknown key");
    }
  }

 private:
  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <typename F>
void rethrow_as_config(const std::string& path, F&& fn) {
  try {
    fn();
  } catch (const ContractError& e) {
    throw ConfigError(path, e.what());
  }
}

}  // namespace

void RunConfig::validate() const {
  rethrow_as_config("model", [&] { model.validate(); });
  rethrow_as_config("encoder", [&] { encoder.validate(); });
  rethrow_as_config("loss", [&] { loss.validate(); });
  rethrow_as_config("data", [&] { data.validate(); });
  if (encoder.num_classes != model.num_classes) {
    throw ConfigError("encoder.num_classes", "must equal model.num_classes");
  }
  if (data.num_classes != model.num_classes) {
    throw ConfigError("data.num_classes", "must equal model.num_classes");
  }
  if (data.width != model.input_w || data.height != model.input_h) {
    throw ConfigError("data.width", "data image size must equal the model input size");
  }
  if (!(optimizer.lr > 0)) throw ConfigError("optimizer.lr", "must be positive");
  if (!(optimizer.momentum >= 0 && optimizer.momentum < 1)) {
    throw ConfigError("optimizer.momentum", "must lie in [0,1)");
  }
  if (!(optimizer.weight_decay >= 0)) throw ConfigError("optimizer.weight_decay", "must be >= 0");
  if (!(optimizer.clip > 0)) throw ConfigError("optimizer.clip", "must be positive");
  if (optimizer.iterations < 1) throw ConfigError("optimizer.iterations", "must be >= 1");
  if (optimizer.lr_drop_at < 1) throw ConfigError("optimizer.lr_drop_at", "must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size", "must be >= 1");
  if (checkpoint_every < 1) throw ConfigError("checkpoint_every", "must be >= 1");
  if (!(augment.expand_prob >= 0 && augment.expand_prob <= 1)) {
    throw ConfigError("augment.expand_prob", "must lie in [0,1]");
  }
  if (!(augment.max_expand >= 1)) throw ConfigError("augment.max_expand", "must be >= 1");
  if (!(augment.min_crop_area > 0 && augment.min_crop_area <= 1)) {
    throw ConfigError("augment.min_crop_area", "must lie in (0,1]");
  }
  if (!(augment.crop_prob >= 0 && augment.crop_prob <= 1)) {
    throw ConfigError("augment.crop_prob", "must lie in [0,1]");
  }
  if (!(augment.flip_prob >= 0 && augment.flip_prob <= 1)) {
    throw ConfigError("augment.flip_prob", "must lie in [0,1]");
  }
  if (!(augment.contrast_low > 0 && augment.contrast_high >= augment.contrast_low)) {
    throw ConfigError("augment.contrast_low", "need 0 < contrast_low <= contrast_high");
  }
  if (augment.crop_attempts < 1) throw ConfigError("augment.crop_attempts", "must be >= 1");
  if (!(inference.score_threshold >= 0 && inference.score_threshold <= 1)) {
    throw ConfigError("inference.score_threshold", "must lie in [0,1]");
  }
  if (!(inference.nms_threshold >= 0 && inference.nms_threshold <= 1)) {
    throw ConfigError("inference.nms_threshold", "must lie in [0,1]");
  }
}

nlohmann::ordered_json RunConfig::to_json() const {
  nlohmann::ordered_json j;
  j["model"] = {{"num_classes", model.num_classes},
                {"head_channels", model.head_channels},
                {"backbone_channels", model.backbone_channels},
                {"input_h", model.input_h},
                {"input_w", model.input_w},
                {"seed", model.seed},
                {"residual_source", model.residual_source == ResidualSource::kLow ? "low" : "high"},
                {"upsample_kernel", model.upsample_kernel}};
  j["encoder"] = {{"p1", encoder.p1},
                  {"p2", encoder.p2},
                  {"r_cap_detector1", encoder.r_cap_detector1},
                  {"large_area_threshold", encoder.large_area_threshold},
                  {"num_classes", encoder.num_classes}};
  j["loss"] = {{"epsilon", loss.epsilon},
               {"lambda_bbox", loss.lambda_bbox},
               {"lambda_cls", loss.lambda_cls},
               {"ohem_ratio", loss.ohem_ratio},
               {"iou_floor", loss.iou_floor},
               {"bbox_loss", loss.bbox_loss == BboxLossKind::kSmoothL1 ? "smooth-l1" : "iou"}};
  j["optimizer"] = {{"lr", optimizer.lr},
                    {"momentum", optimizer.momentum},
                    {"weight_decay", optimizer.weight_decay},
                    {"clip", optimizer.clip},
                    {"iterations", optimizer.iterations},
                    {"lr_drop_at", optimizer.lr_drop_at}};
  j["augment"] = {{"expand_prob", augment.expand_prob},
                  {"max_expand", augment.max_expand},
                  {"min_crop_area", augment.min_crop_area},
                  {"crop_prob", augment.crop_prob},
                  {"flip_prob", augment.flip_prob},
                  {"brightness", augment.brightness},
                  {"contrast_low", augment.contrast_low},
                  {"contrast_high", augment.contrast_high},
                  {"crop_attempts", augment.crop_attempts}};
  j["data"] = data.to_json();
  j["inference"] = {{"score_threshold", inference.score_threshold},
                    {"nms_threshold", inference.nms_threshold},
                    {"merge_calibration",
                     inference.calibration == MergeCalibration::kMinMax ? "minmax" : "none"}};
  j["batch_size"] = batch_size;
  j["checkpoint_every"] = checkpoint_every;
  j["seed"] = seed;
  j["dataset"] = dataset;
  j["output_dir"] = output_dir;
  return j;
}

RunConfig parse_run_config(const nlohmann::json& j) {
  RunConfig c;
  Section root(j, "");
  root.object("model", [&](Section& s) {
    s.integer("num_classes", c.model.num_classes);
    s.integer("head_channels", c.model.head_channels);
    s.int_list("backbone_channels", c.model.backbone_channels);
    s.integer("input_h", c.model.input_h);
    s.integer("input_w", c.model.input_w);
    s.integer("seed", c.model.seed);
    std::string source = c.model.residual_source == ResidualSource::kLow ? "low" : "high";
    s.string("residual_source", source);
    if (source == "high") {
      c.model.residual_source = ResidualSource::kHigh;
    } else if (source == "low") {
      c.model.residual_source = ResidualSource::kLow;
    } else {
      throw ConfigError(s.key_path("residual_source"), "expected \"high\" or \"low\"");
    }
    s.integer("upsample_kernel", c.model.upsample_kernel);
  });
  root.object("encoder", [&](Section& s) {
    s.number("p1", c.encoder.p1);
    s.number("p2", c.encoder.p2);
    s.number("r_cap_detector1", c.encoder.r_cap_detector1);
    s.number("large_area_threshold", c.encoder.large_area_threshold);
    s.integer("num_classes", c.encoder.num_classes);
  });
  root.object("loss", [&](Section& s) {
    s.number("epsilon", c.loss.epsilon);
    s.number("lambda_bbox", c.loss.lambda_bbox);
    s.number("lambda_cls", c.loss.lambda_cls);
    s.integer("ohem_ratio", c.loss.ohem_ratio);
    s.number("iou_floor", c.loss.iou_floor);
    std::string kind = c.loss.bbox_loss == BboxLossKind::kSmoothL1 ? "smooth-l1" : "iou";
    s.string("bbox_loss", kind);
    if (kind == "iou") {
      c.loss.bbox_loss = BboxLossKind::kIou;
    } else if (kind == "smooth-l1") {
      c.loss.bbox_loss = BboxLossKind::kSmoothL1;
    } else {
      throw ConfigError(s.key_path("bbox_loss"), "expected \"iou\" or \"smooth-l1\"");
    }
  });
  root.object("optimizer", [&](Section& s) {
    s.number("lr", c.optimizer.lr);
    s.number("momentum", c.optimizer.momentum);
    s.number("weight_decay", c.optimizer.weight_decay);
    s.number("clip", c.optimizer.clip);
    s.integer("iterations", c.optimizer.iterations);
    s.integer("lr_drop_at", c.optimizer.lr_drop_at);
  });
  root.object("augment", [&](Section& s) {
    s.number("expand_prob", c.augment.expand_prob);
    s.number("max_expand", c.augment.max_expand);
    s.number("min_crop_area", c.augment.min_crop_area);
    s.number("crop_prob", c.augment.crop_prob);
    s.number("flip_prob", c.augment.flip_prob);
    s.number("brightness", c.augment.brightness);
    s.number("contrast_low", c.augment.contrast_low);
    s.number("contrast_high", c.augment.contrast_high);
    s.integer("crop_attempts", c.augment.crop_attempts);
  });
  root.object("data", [&](Section& s) {
    s.integer("width", c.data.width);
    s.integer("height", c.data.height);
    s.integer("num_classes", c.data.num_classes);
    s.integer("min_objects", c.data.min_objects);
    s.integer("max_objects", c.data.max_objects);
    s.number("min_side", c.data.min_side);
    s.number("max_side", c.data.max_side);
    s.number("large_fraction", c.data.large_fraction);
    s.number("large_area_threshold", c.data.large_area_threshold);
    s.number("noise", c.data.noise);
    s.number("max_pair_iou", c.data.max_pair_iou);
    s.integer("max_attempts", c.data.max_attempts);
    s.integer("seed", c.data.seed);
  });
  root.object("inference", [&](Section& s) {
    s.number("score_threshold", c.inference.score_threshold);
    s.number("nms_threshold", c.inference.nms_threshold);
    std::string cal = c.inference.calibration == MergeCalibration::kMinMax ? "minmax" : "none";
    s.string("merge_calibration", cal);
    try {
      c.inference.calibration = parse_merge_calibration(cal);
    } catch (const ContractError& e) {
      throw ConfigError(s.key_path("merge_calibration"), e.what());
    }
  });
  root.integer("batch_size", c.batch_size);
  root.integer("checkpoint_every", c.checkpoint_every);
  root.integer("seed", c.seed);
  root.string("dataset", c.dataset);
  root.string("output_dir", c.output_dir);
  root.finish();
  c.augment.out_w = c.model.input_w;
  c.augment.out_h = c.model.input_h;
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IOError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("<root>", std::string("invalid JSON: ") + e.what());
  }
  RunConfig c = parse_run_config(j);
  const auto base = path.parent_path();
  auto resolve = [&](std::string& p) {
    if (!p.empty() && std::filesystem::path(p).is_relative()) p = (base / p).lexically_normal().string();
  };
  resolve(c.dataset);
  resolve(c.output_dir);
  return c;
}

}  // namespace dubox
