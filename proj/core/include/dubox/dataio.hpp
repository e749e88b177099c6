#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dubox/encoding.hpp"
#include "dubox/geometry.hpp"
#include "dubox/tensor.hpp"

namespace dubox {

// One training/evaluation sample: a [3,H,W] image with values in [0,1] and its
// ground-truth boxes in image pixels.
struct DatasetRecord {
  Tensor image;
  std::vector<GroundTruth> gts;
  std::string id;

  int height() const { return static_cast<int>(image.dim(1)); }
  int width() const { return static_cast<int>(image.dim(2)); }

  // Throws ContractError unless every box lies inside the image with both
  // sides >= 2 px.
  void validate() const;
};

enum class ShapeKind { kRectangle = 0, kEllipse = 1, kTriangle = 2 };

struct SynthConfig {
  int width = 128;
  int height = 128;
  int num_classes = 3;  // classes are ShapeKind values, so at most 3
  int min_objects = 1;
  int max_objects = 4;
  double min_side = 8;
  double max_side = 96;
  // Share of images whose first object covers more than large_area_threshold
  // of the image. Other objects stay at or below that threshold.
  double large_fraction = 0.1;
  double large_area_threshold = 0.3;
  double noise = 0.1;  // amplitude of uniform background noise
  double max_pair_iou = 0.3;
  int max_attempts = 100;
  std::uint64_t seed = 7;

  void validate() const;
  nlohmann::ordered_json to_json() const;
  static SynthConfig from_json(const nlohmann::json& j);
};

// Deterministic in (cfg, index).
DatasetRecord generate_record(const SynthConfig& cfg, std::size_t index);
std::vector<DatasetRecord> generate(const SynthConfig& cfg, std::size_t count);

// DBIMG: "DBIM", u8 version 1, u32 H, u32 W, u32 C, then C*H*W little-endian
// f32 in channel-major order. Images are [C,H,W] tensors.
inline constexpr std::size_t kDbimgHeaderSize = 17;
std::vector<std::uint8_t> encode_dbimg(const Tensor& image);
Tensor decode_dbimg(std::span<const std::uint8_t> bytes);
void write_dbimg(const std::filesystem::path& path, const Tensor& image);
Tensor read_dbimg(const std::filesystem::path& path);

struct AnnotationEntry {
  std::string id;
  std::string image;  // path relative to the dataset root
  std::vector<GroundTruth> gts;
};

// One JSON object per line:
//   {"id": str, "image": path, "boxes": [[x1,y1,x2,y2,class_id], ...]}
std::string format_annotation(const AnnotationEntry& entry);
// Throws FormatError for malformed lines and ContractError for class ids
// outside [0, num_classes).
AnnotationEntry parse_annotation(const std::string& line, int num_classes);

// Layout: images/<id>.dbimg, annotations.jsonl, meta.json (SynthConfig echo).
struct Dataset {
  SynthConfig meta;
  std::vector<DatasetRecord> records;

  const DatasetRecord& by_id(const std::string& id) const;
};

void write_dataset(const std::filesystem::path& dir, const SynthConfig& meta,
                   std::span<const DatasetRecord> records);
Dataset read_dataset(const std::filesystem::path& dir);

BatchBalanceTable make_batch_balance_table(std::span<const DatasetRecord> records);

// ---- augmentation -------------------------------------------------------

struct AugmentConfig {
  double expand_prob = 0.5;
  double max_expand = 4.0;
  double min_crop_area = 0.3;
  double crop_prob = 1.0;
  double flip_prob = 0.5;
  double brightness = 0.2;
  double contrast_low = 0.8;
  double contrast_high = 1.25;
  int crop_attempts = 50;
  int out_w = 128;
  int out_h = 128;
};

// Pastes the image into a canvas of (width*ratio, height*ratio), rounded to
// whole pixels, at integer offset (left, top); the canvas is filled with the
// per-channel image mean.
DatasetRecord expand(const DatasetRecord& rec, double ratio, int left, int top);

struct CropWindow {
  int x = 0, y = 0, w = 0, h = 0;
};

// Keeps boxes whose centre lies inside the window, clipped and translated.
DatasetRecord crop(const DatasetRecord& rec, const CropWindow& window);

DatasetRecord flip_horizontal(const DatasetRecord& rec);

// v <- clamp(v * contrast + brightness_delta, 0, 1).
DatasetRecord photometric(const DatasetRecord& rec, double brightness_delta, double contrast);

// Nearest-neighbour resize; boxes scale with the image. Boxes left with a
// side under 2 px are dropped.
DatasetRecord resize_nearest(const DatasetRecord& rec, int out_w, int out_h);

// Expand (probabilistic), crop keeping at least one box centre, horizontal
// flip, photometric distortion and a resize back to the output size.
DatasetRecord augment(const DatasetRecord& rec, const AugmentConfig& cfg, std::mt19937_64& rng);

// Stacks same-sized [3,H,W] images into a [N,3,H,W] batch.
template <typename T>
BasicTensor<T> stack_images(std::span<const DatasetRecord* const> records);

}  // namespace dubox
