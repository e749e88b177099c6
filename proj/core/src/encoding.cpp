#include "dubox/encoding.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "dubox/errors.hpp"

namespace dubox {

HookGrid HookGrid::for_detector(int detector_id, int image_w, int image_h) {
  if (detector_id != 1 && detector_id != 2) throw ContractError("detector id must be 1 or 2");
  const int stride = detector_id == 1 ? kDetector1Stride : kDetector2Stride;
  if (image_w <= 0 || image_h <= 0 || image_w % stride != 0 || image_h % stride != 0) {
    throw ContractError("image size " + std::to_string(image_w) + "x" + std::to_string(image_h) +
                        " is not divisible by stride " + std::to_string(stride));
  }
  return HookGrid{image_w / stride, image_h / stride, stride, detector_id};
}

void EncoderConfig::validate() const {
  if (!(p1 > 0) || !(p2 > 0)) throw ContractError("encoder: p1 and p2 must be positive");
  if (!(r_cap_detector1 > 0)) throw ContractError("encoder: r_cap_detector1 must be positive");
  if (!(large_area_threshold > 0 && large_area_threshold <= 1)) {
    throw ContractError("encoder: large_area_threshold must lie in (0,1]");
  }
  if (num_classes <= 0) throw ContractError("encoder: num_classes must be positive");
}

PositiveRange positive_range(const Box& gt, const EncoderConfig& cfg, const HookGrid& grid) {
  const double dx = gt.x2 - gt.x1;
  const double dy = gt.y2 - gt.y1;
  const double diag_sq = dx * dx + dy * dy;
  if (!(diag_sq > 0)) throw DegenerateBoxError("positive range of a zero-diagonal box " + to_string(gt));
  constexpr double kSlack = 1e-9;
  if (gt.x1 < -kSlack || gt.y1 < -kSlack || gt.x2 > grid.map_w + kSlack ||
      gt.y2 > grid.map_h + kSlack) {
    throw ContractError("box " + to_string(gt) + " lies outside the " + std::to_string(grid.map_w) +
                        "x" + std::to_string(grid.map_h) + " map");
  }

  PositiveRange range;
  range.cx = (gt.x1 + gt.x2) / 2.0;
  range.cy = (gt.y1 + gt.y2) / 2.0;
  const double p = cfg.divisor(grid.detector_id);
  // Work with r^2 = diag^2 / p^2 directly so boundary hooks are not lost to
  // a sqrt round trip.
  double r_sq = diag_sq / (p * p);
  if (grid.detector_id == 1) {
    r_sq = std::min(r_sq, cfg.r_cap_detector1 * cfg.r_cap_detector1);
  }
  range.radius = std::sqrt(r_sq);

  for (int j = 0; j < grid.map_h; ++j) {
    for (int i = 0; i < grid.map_w; ++i) {
      const double di = i - range.cx;
      const double dj = j - range.cy;
      if (di * di + dj * dj <= r_sq) range.hooks.push_back({i, j});
    }
  }
  if (range.hooks.empty()) {
    Hook best{};
    double best_d = std::numeric_limits<double>::infinity();
    for (int i = 0; i < grid.map_w; ++i) {
      for (int j = 0; j < grid.map_h; ++j) {
        const double di = i - range.cx;
        const double dj = j - range.cy;
        const double d = di * di + dj * dj;
        if (d < best_d) {
          best_d = d;
          best = {i, j};
        }
      }
    }
    range.hooks.push_back(best);
    range.fallback = true;
  }
  return range;
}

Offsets TargetMaps::offsets_at(int i, int j) const {
  const std::size_t plane = static_cast<std::size_t>(spatial_size());
  const std::size_t at = index(i, j);
  return {offsets[at], offsets[plane + at], offsets[2 * plane + at], offsets[3 * plane + at]};
}

std::size_t TargetMaps::positive_count() const {
  return static_cast<std::size_t>(std::count(positive_mask.begin(), positive_mask.end(), 1));
}

TargetMaps encode_targets(std::span<const GroundTruth> gts, const HookGrid& grid,
                          const EncoderConfig& cfg) {
  cfg.validate();
  TargetMaps t;
  t.num_classes = cfg.num_classes;
  t.map_w = grid.map_w;
  t.map_h = grid.map_h;
  t.stride = grid.stride;
  t.detector_id = grid.detector_id;
  const std::size_t plane = static_cast<std::size_t>(grid.size());
  t.cls.assign(static_cast<std::size_t>(cfg.num_classes) * plane, 0);
  t.offsets.assign(4 * plane, 0.0);
  t.positive_mask.assign(plane, 0);
  t.bbox_weight.assign(plane, 0);
  t.owner.assign(plane, -1);
  t.clamped.assign(plane, 0);

  const double image_area = static_cast<double>(grid.image_w()) * grid.image_h();
  for (const auto& gt : gts) {
    if (gt.class_id < 0 || gt.class_id >= cfg.num_classes) {
      throw ContractError("class id " + std::to_string(gt.class_id) + " outside [0," +
                          std::to_string(cfg.num_classes) + ")");
    }
    const Box fb = to_feature_units(gt.box, grid.stride);
    t.gt_boxes.push_back(fb);
    t.gt_classes.push_back(gt.class_id);
    t.gt_area_fraction.push_back(gt.box.area() / image_area);
    t.ranges.push_back(positive_range(fb, cfg, grid));
  }

  // Resolve ownership: smallest area first, lower index on ties.
  std::vector<std::size_t> order(gts.size());
  for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return gts[a].box.area() < gts[b].box.area();
  });
  for (std::size_t k : order) {
    for (const Hook& h : t.ranges[k].hooks) {
      const std::size_t at = t.index(h.i, h.j);
      if (t.owner[at] < 0) t.owner[at] = static_cast<int>(k);
    }
  }

  const double norm[4] = {static_cast<double>(grid.map_w), static_cast<double>(grid.map_w),
                          static_cast<double>(grid.map_h), static_cast<double>(grid.map_h)};
  for (int j = 0; j < grid.map_h; ++j) {
    for (int i = 0; i < grid.map_w; ++i) {
      const std::size_t at = t.index(i, j);
      const int k = t.owner[at];
      if (k < 0) continue;
      const Box& b = t.gt_boxes[static_cast<std::size_t>(k)];
      t.positive_mask[at] = 1;
      t.cls[static_cast<std::size_t>(t.gt_classes[static_cast<std::size_t>(k)]) * plane + at] = 1;
      const double raw[4] = {i - b.x1, b.x2 - i, j - b.y1, b.y2 - j};
      for (int c = 0; c < 4; ++c) {
        double v = raw[c] / norm[c];
        if (v < 0.0 || v > 1.0) {
          t.clamped[at] = 1;
          v = std::clamp(v, 0.0, 1.0);
        }
        t.offsets[static_cast<std::size_t>(c) * plane + at] = v;
      }
      const bool ignore_regression =
          grid.detector_id == 1 &&
          t.gt_area_fraction[static_cast<std::size_t>(k)] > cfg.large_area_threshold;
      t.bbox_weight[at] = ignore_regression ? 0 : 1;
    }
  }
  return t;
}

Box decode_offsets_unclamped(int i, int j, const Offsets& o, const HookGrid& grid) {
  const double s = grid.stride;
  return Box{(i - o[0] * grid.map_w) * s, (j - o[2] * grid.map_h) * s,
             (i + o[1] * grid.map_w) * s, (j + o[3] * grid.map_h) * s, BoxUnit::kImagePixels, 1};
}

std::optional<Box> try_decode_offsets(int i, int j, const Offsets& o, const HookGrid& grid) {
  Box b = decode_offsets_unclamped(i, j, o, grid);
  const double w = grid.image_w();
  const double h = grid.image_h();
  b.x1 = std::clamp(b.x1, 0.0, w);
  b.x2 = std::clamp(b.x2, 0.0, w);
  b.y1 = std::clamp(b.y1, 0.0, h);
  b.y2 = std::clamp(b.y2, 0.0, h);
  if (b.x1 >= b.x2 || b.y1 >= b.y2) return std::nullopt;
  return b;
}

Box decode_offsets(int i, int j, const Offsets& o, const HookGrid& grid) {
  auto b = try_decode_offsets(i, j, o, grid);
  if (!b) {
    throw DegenerateBoxError("decode at hook (" + std::to_string(i) + "," + std::to_string(j) +
                             ") yields an empty box");
  }
  return *b;
}

BatchBalanceTable::BatchBalanceTable(std::span<const std::vector<GroundTruth>> per_record_gts) {
  if (per_record_gts.empty()) throw ContractError("batch balance table over an empty dataset");
  for (std::size_t k = 0; k < per_record_gts.size(); ++k) {
    if (per_record_gts[k].empty()) {
      throw ContractError("record " + std::to_string(k) + " has no ground truth");
    }
    for (const auto& gt : per_record_gts[k]) table_[gt.class_id].push_back(k);
  }
  for (const auto& [cls, list] : table_) keys_.push_back(cls);
}

std::vector<int> BatchBalanceTable::classes() const { return keys_; }

int BatchBalanceTable::sample_class(std::mt19937_64& rng) const {
  std::uniform_int_distribution<std::size_t> pick(0, keys_.size() - 1);
  return keys_[pick(rng)];
}

std::size_t BatchBalanceTable::sample_record(std::mt19937_64& rng) const {
  const auto& list = table_.at(sample_class(rng));
  std::uniform_int_distribution<std::size_t> pick(0, list.size() - 1);
  return list[pick(rng)];
}

}  // namespace dubox
