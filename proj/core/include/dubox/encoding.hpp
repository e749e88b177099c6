#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "dubox/geometry.hpp"

namespace dubox {

inline constexpr int kDetector1Stride = 8;
inline constexpr int kDetector2Stride = 32;

// Output map of one detector. Hook (i, j) is column i in [0, map_w) and row
// j in [0, map_h).
struct HookGrid {
  int map_w = 0;
  int map_h = 0;
  int stride = kDetector1Stride;
  int detector_id = 1;

  int image_w() const { return map_w * stride; }
  int image_h() const { return map_h * stride; }
  int size() const { return map_w * map_h; }

  // Grid of detector 1 (stride 8) or detector 2 (stride 32) for an image.
  // Throws ContractError unless the image dims are divisible by the stride.
  static HookGrid for_detector(int detector_id, int image_w, int image_h);
};

struct EncoderConfig {
  double p1 = 10.0;  // radius divisor on detector 1
  double p2 = 9.0;   // radius divisor on detector 2
  double r_cap_detector1 = 3.0;
  // Detector 1 ignores box regression for objects covering more than this
  // fraction of the image.
  double large_area_threshold = 0.3;
  int num_classes = 3;

  void validate() const;
  double divisor(int detector_id) const { return detector_id == 1 ? p1 : p2; }
};

struct Hook {
  int i = 0;
  int j = 0;
  friend auto operator<=>(const Hook&, const Hook&) = default;
};

struct PositiveRange {
  double cx = 0;
  double cy = 0;
  double radius = 0;
  std::vector<Hook> hooks;  // row-major order: by j, then i
  bool fallback = false;    // true when the disk held no hook
};

// Hooks responsible for a ground-truth box given in feature units:
// all in-grid (i,j) with (i-cx)^2 + (j-cy)^2 <= r^2, r = diagonal / p,
// r capped at r_cap on detector 1. An empty disk falls back to the in-grid
// hook nearest the centre (ties: smaller i, then smaller j).
// Throws DegenerateBoxError for a zero-diagonal box.
PositiveRange positive_range(const Box& gt_feature, const EncoderConfig& cfg, const HookGrid& grid);

using Offsets = std::array<double, 4>;  // (dw1, dw2, dh1, dh2)

// Dense training targets of one detector for one image. Spatial maps are
// indexed j * map_w + i.
struct TargetMaps {
  int num_classes = 0;
  int map_w = 0;
  int map_h = 0;
  int stride = 0;
  int detector_id = 0;

  std::vector<std::uint8_t> cls;            // [C, h, w] one-hot at positives
  std::vector<double> offsets;              // [4, h, w] normalised to [0,1]
  std::vector<std::uint8_t> positive_mask;  // [h, w]
  std::vector<std::uint8_t> bbox_weight;    // [h, w]
  std::vector<int> owner;                   // [h, w] owning GT index or -1
  std::vector<std::uint8_t> clamped;        // [h, w] raw offset fell outside [0,1]

  std::vector<Box> gt_boxes;  // per GT, feature units
  std::vector<int> gt_classes;
  std::vector<double> gt_area_fraction;
  std::vector<PositiveRange> ranges;  // per GT, before ownership resolution

  int spatial_size() const { return map_w * map_h; }
  std::size_t index(int i, int j) const { return static_cast<std::size_t>(j * map_w + i); }
  bool positive(int i, int j) const { return positive_mask[index(i, j)] != 0; }
  Offsets offsets_at(int i, int j) const;
  std::size_t positive_count() const;
};

// Builds the target maps of `grid` for ground truths given in image pixels.
// Overlapping disks: the smaller-area box owns the hook (ties: lower index).
// Throws ContractError for class ids outside [0, C).
TargetMaps encode_targets(std::span<const GroundTruth> gts, const HookGrid& grid,
                          const EncoderConfig& cfg);

// Inverse of the offset encoding at hook (i, j), in image pixels, without
// clamping to the image.
Box decode_offsets_unclamped(int i, int j, const Offsets& offsets, const HookGrid& grid);

// As above, clamped to the image. Throws DegenerateBoxError when the clamped
// box has no area.
Box decode_offsets(int i, int j, const Offsets& offsets, const HookGrid& grid);

// Non-throwing form of decode_offsets.
std::optional<Box> try_decode_offsets(int i, int j, const Offsets& offsets, const HookGrid& grid);

// Class-balanced sampler. Each record is listed under a class once per object
// of that class; sampling picks a class uniformly, then an entry uniformly.
class BatchBalanceTable {
 public:
  // `per_record_gts[k]` are the ground truths of record k. Throws
  // ContractError for an empty dataset or a record without objects.
  explicit BatchBalanceTable(std::span<const std::vector<GroundTruth>> per_record_gts);

  const std::map<int, std::vector<std::size_t>>& entries() const { return table_; }
  std::vector<int> classes() const;

  int sample_class(std::mt19937_64& rng) const;
  std::size_t sample_record(std::mt19937_64& rng) const;

 private:
  std::map<int, std::vector<std::size_t>> table_;
  std::vector<int> keys_;
};

}  // namespace dubox
